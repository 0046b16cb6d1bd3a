//! Local error density weighting: mask voxels whose neighborhood is mostly
//! misclassified by a preview model, then oversample them during training.

use crate::volume::{AffinityGraph, Axis, Dims, LabelMask, VoxelCoord};
use crate::{Error, Result};

pub const DEFAULT_LED_WINDOW: usize = 5;
pub const DEFAULT_LED_FRACTION: f64 = 0.5;
pub const DEFAULT_LED_MULTIPLIER: f64 = 10.0;

/// Binary weighting mask over training voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct LedMask {
    dims: Dims,
    mask: Vec<bool>,
    pub window: usize,
    pub fraction: f64,
    pub multiplier: f64,
}

impl LedMask {
    pub fn empty(dims: Dims) -> LedMask {
        LedMask {
            dims,
            mask: vec![false; dims.voxels()],
            window: DEFAULT_LED_WINDOW,
            fraction: DEFAULT_LED_FRACTION,
            multiplier: DEFAULT_LED_MULTIPLIER,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn is_masked(&self, v: VoxelCoord) -> bool {
        self.mask[self.dims.linear(v)]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Classify every valid edge by thresholding the prediction at 0.5, then mask
/// each voxel whose `window^3` neighborhood (clipped at borders) has a
/// strictly greater than `fraction` share of incorrect edges. Voxels with no
/// valid neighborhood edge stay unmasked.
pub fn compute_led_mask(
    pred: &AffinityGraph,
    truth: &LabelMask,
    window: usize,
    fraction: f64,
    multiplier: f64,
) -> Result<LedMask> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction dims {} != label dims {}",
            pred.dims(),
            truth.dims()
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd, got {window}")));
    }
    if multiplier < 1.0 {
        return Err(Error::InvalidArgument("multiplier must be >= 1".into()));
    }
    let dims = pred.dims();
    // Per-voxel counts of valid and incorrect edges anchored there.
    let mut valid = vec![0u32; dims.voxels()];
    let mut incorrect = vec![0u32; dims.voxels()];
    for v in dims.iter() {
        let i = dims.linear(v);
        for axis in Axis::ALL {
            let label = truth.label(v, axis);
            if label == 0 {
                continue;
            }
            valid[i] += 1;
            let predicted_positive = pred.edge(v, axis) > 0.5;
            if predicted_positive != (label > 0) {
                incorrect[i] += 1;
            }
        }
    }
    // Box sums via a 3d summed-volume table.
    let valid_sums = BoxSums::build(dims, &valid);
    let incorrect_sums = BoxSums::build(dims, &incorrect);
    let h = window / 2;
    let mut mask = vec![false; dims.voxels()];
    for v in dims.iter() {
        let v_cnt = valid_sums.window_sum(v, h);
        if v_cnt == 0 {
            continue;
        }
        let i_cnt = incorrect_sums.window_sum(v, h);
        mask[dims.linear(v)] = i_cnt as f64 > fraction * v_cnt as f64;
    }
    Ok(LedMask { dims, mask, window, fraction, multiplier })
}

/// Voxelwise OR; window metadata is taken from `a`.
pub fn merge_masks(a: &LedMask, b: &LedMask) -> Result<LedMask> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch("led mask dims differ".into()));
    }
    let mut out = a.clone();
    for (o, &m) in out.mask.iter_mut().zip(&b.mask) {
        *o |= m;
    }
    Ok(out)
}

/// Summed-volume table: `sum[z][y][x]` holds the inclusive prefix sum.
struct BoxSums {
    dims: Dims,
    sums: Vec<u64>,
}

impl BoxSums {
    fn build(dims: Dims, values: &[u32]) -> BoxSums {
        let (nx, ny, nz) = (dims.x + 1, dims.y + 1, dims.z + 1);
        let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        let mut sums = vec![0u64; nx * ny * nz];
        for z in 1..nz {
            for y in 1..ny {
                for x in 1..nx {
                    let v = values[dims.linear(VoxelCoord::new(x - 1, y - 1, z - 1))] as u64;
                    sums[idx(x, y, z)] = v
                        + sums[idx(x - 1, y, z)]
                        + sums[idx(x, y - 1, z)]
                        + sums[idx(x, y, z - 1)]
                        + sums[idx(x - 1, y - 1, z - 1)]
                        - sums[idx(x - 1, y - 1, z)]
                        - sums[idx(x - 1, y, z - 1)]
                        - sums[idx(x, y - 1, z - 1)];
                }
            }
        }
        BoxSums { dims, sums }
    }

    /// Sum over the window `v +- h`, clipped to the volume.
    fn window_sum(&self, v: VoxelCoord, h: usize) -> u64 {
        let lo = [v.x.saturating_sub(h), v.y.saturating_sub(h), v.z.saturating_sub(h)];
        let hi = [
            (v.x + h + 1).min(self.dims.x),
            (v.y + h + 1).min(self.dims.y),
            (v.z + h + 1).min(self.dims.z),
        ];
        let (nx, ny) = (self.dims.x + 1, self.dims.y + 1);
        let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        let s = &self.sums;
        s[idx(hi[0], hi[1], hi[2])]
            + s[idx(lo[0], lo[1], hi[2])]
            + s[idx(lo[0], hi[1], lo[2])]
            + s[idx(hi[0], lo[1], lo[2])]
            - s[idx(lo[0], hi[1], hi[2])]
            - s[idx(hi[0], lo[1], hi[2])]
            - s[idx(hi[0], hi[1], lo[2])]
            - s[idx(lo[0], lo[1], lo[2])]
    }
}
