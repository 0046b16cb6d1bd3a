//! From affinity graph to segmentation and scores: thresholded components,
//! watershed grow-out, and the full metric set.
//!
//! ```text
//! cargo run --example segment_and_score
//! ```

use dawmr::metrics::{
    auc_edge, balanced_accuracy, rand_curve, rand_index, RandMode, ThresholdSweep,
};
use dawmr::segmentation::{segment_components, watershed_grow};
use dawmr::volume::{
    affinities_from_segmentation, generate_synthetic, Axis, Dims, SyntheticParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dawmr::Result<()> {
    let dims = Dims::new(32, 32, 32);
    let (_, seg) = generate_synthetic(dims, &SyntheticParams::default(), 51)?;
    let (truth_aff, mask) = affinities_from_segmentation(&seg);

    // A noisy "prediction": ground truth plus uniform jitter wide enough to
    // flip some edges across the 0.5 threshold.
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut pred = truth_aff.clone();
    for v in dims.iter() {
        for axis in Axis::ALL {
            if v.step(axis, dims).is_some() {
                let jitter: f32 = rng.gen_range(-0.65..0.65);
                pred.set_edge(v, axis, (truth_aff.edge(v, axis) + jitter).clamp(0.0, 1.0));
            }
        }
    }

    // Edge classification metrics.
    let bal = balanced_accuracy(&pred, &mask, 0.5)?;
    let auc = auc_edge(&pred, &mask)?;
    println!("bal-acc  per direction {:?}, mean {:.4}", bal.per_axis, bal.mean.unwrap());
    println!("AUC-edge per direction {:?}, mean {:.4}", auc.per_axis, auc.mean.unwrap());

    // One segmentation at threshold 0.5.
    let seeds = segment_components(&pred, 0.5);
    let grown = watershed_grow(&seeds, &pred);
    println!(
        "threshold 0.5: {} components before grow-out, {} after (no background left: {})",
        seeds.object_count(),
        grown.object_count(),
        grown.ids().iter().all(|&id| id != 0)
    );
    let ri = rand_index(&seg, &grown, RandMode::ForegroundRestricted)?;
    println!("foreground-restricted Rand Index at 0.5: {ri:.4}");

    // The full quantile sweep.
    let sweep = ThresholdSweep::from_affinities(&pred, 1000)?;
    let curve = rand_curve(&pred, &seg, &sweep)?;
    println!(
        "sweep of {} thresholds: AUC-RI {:.4}, max RI {:.4}",
        curve.points.len(),
        curve.auc_ri,
        curve.max_ri
    );
    let best = curve
        .points
        .iter()
        .max_by(|a, b| a.rand_index.total_cmp(&b.rand_index))
        .unwrap();
    println!(
        "best threshold {:.3} gives {} clusters (ground truth has {})",
        best.threshold,
        best.clusters,
        seg.object_count()
    );
    Ok(())
}
