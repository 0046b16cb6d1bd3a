//! Evaluation measures: balanced class accuracy and ROC AUC per edge
//! direction, Rand Index over segmentations, and the threshold-sweep curve
//! combining them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::segmentation::{segment_components, watershed_grow};
use crate::volume::{AffinityGraph, Axis, LabelMask, SegmentationVolume};
use crate::{Error, Result};

/// A per-direction score plus the mean over the directions where the score
/// is defined. `has_undefined` flags directions that were missing a class.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalMetric {
    pub per_axis: [Option<f64>; 3],
    pub mean: Option<f64>,
    pub has_undefined: bool,
}

impl DirectionalMetric {
    fn from_axes(per_axis: [Option<f64>; 3]) -> DirectionalMetric {
        let defined: Vec<f64> = per_axis.iter().flatten().copied().collect();
        DirectionalMetric {
            per_axis,
            mean: (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            has_undefined: per_axis.iter().any(|a| a.is_none()),
        }
    }
}

fn check_aligned(pred: &AffinityGraph, truth: &LabelMask) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction dims {} != label dims {}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

/// Balanced class accuracy per direction over valid edges:
/// `0.5 * accuracy on positive edges + 0.5 * accuracy on negative edges`.
/// An edge is predicted positive when its affinity exceeds `threshold`.
/// Directions missing one class are undefined and excluded from the mean.
pub fn balanced_accuracy(
    pred: &AffinityGraph,
    truth: &LabelMask,
    threshold: f32,
) -> Result<DirectionalMetric> {
    check_aligned(pred, truth)?;
    let dims = pred.dims();
    let mut per_axis = [None; 3];
    for axis in Axis::ALL {
        let mut pos = 0u64;
        let mut pos_hit = 0u64;
        let mut neg = 0u64;
        let mut neg_hit = 0u64;
        for v in dims.iter() {
            let label = truth.label(v, axis);
            if label == 0 {
                continue;
            }
            let predicted_positive = pred.edge(v, axis) > threshold;
            if label > 0 {
                pos += 1;
                pos_hit += predicted_positive as u64;
            } else {
                neg += 1;
                neg_hit += !predicted_positive as u64;
            }
        }
        if pos > 0 && neg > 0 {
            per_axis[axis.channel()] =
                Some(0.5 * pos_hit as f64 / pos as f64 + 0.5 * neg_hit as f64 / neg as f64);
        }
    }
    Ok(DirectionalMetric::from_axes(per_axis))
}

/// ROC AUC per direction in the rank formulation
/// `P(score_pos > score_neg) + 0.5 P(score_pos = score_neg)`, computed with
/// midranks.
pub fn auc_edge(pred: &AffinityGraph, truth: &LabelMask) -> Result<DirectionalMetric> {
    check_aligned(pred, truth)?;
    let dims = pred.dims();
    let mut per_axis = [None; 3];
    for axis in Axis::ALL {
        let mut scored: Vec<(f32, bool)> = Vec::new();
        for v in dims.iter() {
            let label = truth.label(v, axis);
            if label != 0 {
                scored.push((pred.edge(v, axis), label > 0));
            }
        }
        let n_pos = scored.iter().filter(|(_, p)| *p).count() as f64;
        let n_neg = scored.len() as f64 - n_pos;
        if n_pos == 0.0 || n_neg == 0.0 {
            continue;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Midrank sum over positives.
        let mut rank_sum_pos = 0f64;
        let mut i = 0usize;
        while i < scored.len() {
            let mut j = i;
            while j < scored.len() && scored[j].0 == scored[i].0 {
                j += 1;
            }
            let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
            let pos_in_tie = scored[i..j].iter().filter(|(_, p)| *p).count() as f64;
            rank_sum_pos += midrank * pos_in_tie;
            i = j;
        }
        let auc = (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
        per_axis[axis.channel()] = Some(auc);
    }
    Ok(DirectionalMetric::from_axes(per_axis))
}

/// Which voxel pairs enter the Rand Index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandMode {
    /// Only pairs where both voxels are foreground in the first
    /// (ground-truth) argument.
    ForegroundRestricted,
    AllPairs,
}

fn pairs2(n: u64) -> u128 {
    let n = n as u128;
    n * (n - 1) / 2
}

/// Rand Index via contingency-table counts: the fraction of voxel pairs on
/// which the two segmentations agree (same cluster in both, or different in
/// both). Background ids count as ordinary cluster labels within the pair
/// universe.
pub fn rand_index(a: &SegmentationVolume, b: &SegmentationVolume, mode: RandMode) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "segmentation dims {} != {}",
            a.dims(),
            b.dims()
        )));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut n = 0u64;
    for (&ia, &ib) in a.ids().iter().zip(b.ids()) {
        if mode == RandMode::ForegroundRestricted && ia == 0 {
            continue;
        }
        *joint.entry((ia, ib)).or_default() += 1;
        *rows.entry(ia).or_default() += 1;
        *cols.entry(ib).or_default() += 1;
        n += 1;
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "rand index needs at least 2 voxels in the pair universe, got {n}"
        )));
    }
    let same_both: u128 = joint.values().map(|&c| pairs2(c)).sum();
    let same_a: u128 = rows.values().map(|&c| pairs2(c)).sum();
    let same_b: u128 = cols.values().map(|&c| pairs2(c)).sum();
    let total = pairs2(n);
    let agreements = total + 2 * same_both - same_a - same_b;
    Ok(agreements as f64 / total as f64)
}

/// Strictly increasing binarization thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f32>,
}

impl ThresholdSweep {
    /// Evenly spaced quantiles of the given analog values, deduplicated.
    pub fn from_values(mut values: Vec<f32>, count: usize) -> Result<ThresholdSweep> {
        if values.is_empty() || count == 0 {
            return Err(Error::InvalidArgument("sweep needs values and count >= 1".into()));
        }
        values.sort_by(f32::total_cmp);
        let mut thresholds: Vec<f32> = if count == 1 {
            vec![values[values.len() / 2]]
        } else {
            (0..count)
                .map(|i| values[i * (values.len() - 1) / (count - 1)])
                .collect()
        };
        thresholds.dedup();
        Ok(ThresholdSweep { thresholds })
    }

    /// Quantiles of all in-volume edge affinities (default rule: 1000).
    pub fn from_affinities(aff: &AffinityGraph, count: usize) -> Result<ThresholdSweep> {
        let dims = aff.dims();
        let mut values = Vec::new();
        for v in dims.iter() {
            for axis in Axis::ALL {
                if v.step(axis, dims).is_some() {
                    values.push(aff.edge(v, axis));
                }
            }
        }
        ThresholdSweep::from_values(values, count)
    }

    pub fn explicit(thresholds: Vec<f32>) -> ThresholdSweep {
        ThresholdSweep { thresholds }
    }
}

pub const DEFAULT_SWEEP_QUANTILES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RandCurvePoint {
    pub threshold: f32,
    /// Component count before grow-out.
    pub clusters: usize,
    pub rand_index: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandCurve {
    pub points: Vec<RandCurvePoint>,
    /// Unweighted mean of the Rand Index over the sweep.
    pub auc_ri: f64,
    pub max_ri: f64,
}

/// Segment + grow + score at every sweep threshold against the ground-truth
/// segmentation (foreground-restricted Rand Index).
pub fn rand_curve(
    pred: &AffinityGraph,
    truth: &SegmentationVolume,
    sweep: &ThresholdSweep,
) -> Result<RandCurve> {
    if sweep.thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold sweep".into()));
    }
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch("prediction / ground truth dims differ".into()));
    }
    let points: Result<Vec<RandCurvePoint>> = sweep
        .thresholds
        .par_iter()
        .map(|&threshold| {
            let seeds = segment_components(pred, threshold);
            let grown = watershed_grow(&seeds, pred);
            let ri = rand_index(truth, &grown, RandMode::ForegroundRestricted)?;
            Ok(RandCurvePoint { threshold, clusters: seeds.object_count(), rand_index: ri })
        })
        .collect();
    let points = points?;
    let auc_ri = points.iter().map(|p| p.rand_index).sum::<f64>() / points.len() as f64;
    let max_ri = points.iter().map(|p| p.rand_index).fold(f64::NEG_INFINITY, f64::max);
    Ok(RandCurve { points, auc_ri, max_ri })
}

/// The full evaluation bundle for one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub balanced_accuracy: DirectionalMetric,
    pub auc_edge: DirectionalMetric,
    pub rand_curve: RandCurve,
}

impl MetricsReport {
    /// Flat `key=value` text, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x}"),
            None => "undefined".to_string(),
        };
        for (name, metric) in
            [("bal_acc", &self.balanced_accuracy), ("auc_edge", &self.auc_edge)]
        {
            for (axis, label) in ["x", "y", "z"].iter().enumerate() {
                out.push_str(&format!("{name}_{label}={}\n", fmt(&metric.per_axis[axis])));
            }
            out.push_str(&format!("{name}_mean={}\n", fmt(&metric.mean)));
        }
        out.push_str(&format!("auc_ri={}\n", self.rand_curve.auc_ri));
        out.push_str(&format!("max_ri={}\n", self.rand_curve.max_ri));
        out.push_str(&format!("thresholds={}\n", self.rand_curve.points.len()));
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_text().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Optional per-threshold table: `threshold <tab> clusters <tab> RI`.
    pub fn write_threshold_table(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "threshold\tclusters\trand_index")?;
        for p in &self.rand_curve.points {
            writeln!(w, "{}\t{}\t{}", p.threshold, p.clusters, p.rand_index)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse a flat `key=value` metrics file into a map.
pub fn parse_report_text(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{affinities_from_segmentation, Dims, SegmentationVolume, VoxelCoord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(dims: Dims, seed: u64) -> (AffinityGraph, LabelMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seg = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            seg.set_id(v, rng.gen_range(0..3));
        }
        affinities_from_segmentation(&seg)
    }

    fn random_prediction(dims: Dims, seed: u64) -> AffinityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut aff = AffinityGraph::zeros(dims);
        for v in dims.iter() {
            for axis in Axis::ALL {
                if v.step(axis, dims).is_some() {
                    aff.set_edge(v, axis, rng.gen_range(0.0..1.0));
                }
            }
        }
        aff
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let (truth_aff, truth_mask) = random_labels(Dims::new(5, 5, 5), 1);
        let bal = balanced_accuracy(&truth_aff, &truth_mask, 0.5).unwrap();
        assert_eq!(bal.mean, Some(1.0));
        assert!(!bal.has_undefined);
        let auc = auc_edge(&truth_aff, &truth_mask).unwrap();
        assert_eq!(auc.mean, Some(1.0));
    }

    #[test]
    fn constant_positive_prediction_is_chance() {
        let (_, truth_mask) = random_labels(Dims::new(5, 5, 5), 2);
        let dims = truth_mask.dims();
        let mut aff = AffinityGraph::zeros(dims);
        for v in dims.iter() {
            for axis in Axis::ALL {
                aff.set_edge(v, axis, 1.0);
            }
        }
        let bal = balanced_accuracy(&aff, &truth_mask, 0.5).unwrap();
        assert_eq!(bal.mean, Some(0.5));
        let auc = auc_edge(&aff, &truth_mask).unwrap();
        assert_eq!(auc.mean, Some(0.5));
    }

    #[test]
    fn balanced_accuracy_matches_confusion_oracle() {
        for seed in 0..30 {
            let dims = Dims::new(5, 5, 5);
            let (_, truth) = random_labels(dims, seed);
            let pred = random_prediction(dims, seed + 1000);
            let got = balanced_accuracy(&pred, &truth, 0.5).unwrap();
            for axis in Axis::ALL {
                let mut tp = 0f64;
                let mut fp = 0f64;
                let mut tn = 0f64;
                let mut fng = 0f64;
                for v in dims.iter() {
                    match truth.label(v, axis) {
                        1 => {
                            if pred.edge(v, axis) > 0.5 {
                                tp += 1.0;
                            } else {
                                fng += 1.0;
                            }
                        }
                        -1 => {
                            if pred.edge(v, axis) > 0.5 {
                                fp += 1.0;
                            } else {
                                tn += 1.0;
                            }
                        }
                        _ => {}
                    }
                }
                let expect = if tp + fng > 0.0 && tn + fp > 0.0 {
                    Some(0.5 * tp / (tp + fng) + 0.5 * tn / (tn + fp))
                } else {
                    None
                };
                assert_eq!(got.per_axis[axis.channel()], expect, "seed {seed}");
            }
        }
    }

    #[test]
    fn auc_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            // 20 scored edges on one axis, with deliberate ties.
            let n = 20;
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..8) as f32 / 7.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let dims = Dims::new(1, 1, n + 1);
            let mut vol = crate::volume::Volume::zeros(dims, 3);
            let mut mask = LabelMask::zeros(dims);
            for i in 0..n {
                let v = VoxelCoord::new(0, 0, i);
                vol.set(0, 0, i, Axis::Z.channel(), scores[i]);
                mask.set_label(v, Axis::Z, if labels[i] { 1 } else { -1 });
            }
            let aff = AffinityGraph::new(vol).unwrap();
            let got = auc_edge(&aff, &mask).unwrap().per_axis[2].unwrap();
            let mut wins = 0f64;
            let mut pairs = 0f64;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let expect = wins / pairs;
            assert!((got - expect).abs() <= 1e-12, "trial {trial}: {got} vs {expect}");
        }
    }

    #[test]
    fn missing_class_direction_is_flagged_and_excluded() {
        let dims = Dims::new(3, 3, 3);
        let mut seg = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            seg.set_id(v, 1); // single object: no negative edges anywhere
        }
        let (aff, mask) = affinities_from_segmentation(&seg);
        let bal = balanced_accuracy(&aff, &mask, 0.5).unwrap();
        assert!(bal.has_undefined);
        assert_eq!(bal.per_axis, [None, None, None]);
        assert_eq!(bal.mean, None);
    }

    #[test]
    fn identical_segmentations_have_rand_index_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(4, 4, 4);
        let mut seg = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            seg.set_id(v, rng.gen_range(0..4));
        }
        assert_eq!(rand_index(&seg, &seg, RandMode::AllPairs).unwrap(), 1.0);
        assert_eq!(rand_index(&seg, &seg, RandMode::ForegroundRestricted).unwrap(), 1.0);
    }

    #[test]
    fn singletons_versus_one_cluster_scores_zero() {
        let dims = Dims::new(4, 1, 1);
        let a = SegmentationVolume::new(dims, vec![1, 2, 3, 4]).unwrap();
        let b = SegmentationVolume::new(dims, vec![9, 9, 9, 9]).unwrap();
        assert_eq!(rand_index(&a, &b, RandMode::AllPairs).unwrap(), 0.0);
    }

    #[test]
    fn rand_index_matches_pair_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..30 {
            let dims = Dims::new(4, 4, 4);
            let mut a = SegmentationVolume::zeros(dims);
            let mut b = SegmentationVolume::zeros(dims);
            for v in dims.iter() {
                a.set_id(v, rng.gen_range(0..4));
                b.set_id(v, rng.gen_range(0..4));
            }
            for mode in [RandMode::AllPairs, RandMode::ForegroundRestricted] {
                let got = rand_index(&a, &b, mode).unwrap();
                let universe: Vec<usize> = (0..dims.voxels())
                    .filter(|&i| mode == RandMode::AllPairs || a.ids()[i] != 0)
                    .collect();
                let mut agree = 0u64;
                let mut total = 0u64;
                for i in 0..universe.len() {
                    for j in (i + 1)..universe.len() {
                        let (vi, vj) = (universe[i], universe[j]);
                        let same_a = a.ids()[vi] == a.ids()[vj];
                        let same_b = b.ids()[vi] == b.ids()[vj];
                        agree += (same_a == same_b) as u64;
                        total += 1;
                    }
                }
                let expect = agree as f64 / total as f64;
                assert_eq!(got, expect, "trial {trial} mode {mode:?}");
            }
        }
    }

    #[test]
    fn rand_index_symmetry_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::new(4, 4, 4);
        let mut a = SegmentationVolume::zeros(dims);
        let mut b = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            a.set_id(v, rng.gen_range(0..5));
            b.set_id(v, rng.gen_range(0..5));
        }
        let ab = rand_index(&a, &b, RandMode::AllPairs).unwrap();
        let ba = rand_index(&b, &a, RandMode::AllPairs).unwrap();
        assert_eq!(ab, ba);
        // Permute b's ids.
        let perm = [3u32, 1, 4, 0, 2];
        let permuted = SegmentationVolume::new(
            dims,
            b.ids().iter().map(|&id| perm[id as usize] + 10).collect(),
        )
        .unwrap();
        for mode in [RandMode::AllPairs, RandMode::ForegroundRestricted] {
            assert_eq!(
                rand_index(&a, &b, mode).unwrap(),
                rand_index(&a, &permuted, mode).unwrap()
            );
        }
    }

    #[test]
    fn ground_truth_affinities_give_perfect_rand_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = Dims::new(6, 6, 6);
        let mut seg = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            seg.set_id(v, rng.gen_range(0..3));
        }
        // Connected relabeling so the fixed point applies.
        let (aff0, _) = affinities_from_segmentation(&seg);
        let connected = segment_components(&aff0, 0.5);
        let (aff, _) = affinities_from_segmentation(&connected);
        let sweep = ThresholdSweep::explicit(vec![0.1, 0.3, 0.5, 0.7, 0.9]);
        let curve = rand_curve(&aff, &connected, &sweep).unwrap();
        assert_eq!(curve.max_ri, 1.0);
        for p in &curve.points {
            assert_eq!(p.rand_index, 1.0, "threshold {}", p.threshold);
        }
        assert!((curve.auc_ri - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rand_curve_matches_independent_recomputation() {
        let dims = Dims::new(6, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seg = SegmentationVolume::zeros(dims);
        for v in dims.iter() {
            seg.set_id(v, rng.gen_range(0..3));
        }
        let pred = random_prediction(dims, 12);
        let sweep = ThresholdSweep::explicit(vec![0.2, 0.5, 0.8]);
        let curve = rand_curve(&pred, &seg, &sweep).unwrap();
        for p in &curve.points {
            let seeds = segment_components(&pred, p.threshold);
            let grown = watershed_grow(&seeds, &pred);
            let ri = rand_index(&seg, &grown, RandMode::ForegroundRestricted).unwrap();
            assert_eq!(p.rand_index, ri);
            assert_eq!(p.clusters, seeds.object_count());
        }
    }

    #[test]
    fn sweep_deduplicates_repeated_quantiles() {
        let values: Vec<f32> = (0..500).map(|i| (i % 10) as f32 / 10.0).collect();
        let sweep = ThresholdSweep::from_values(values, 1000).unwrap();
        assert!(sweep.thresholds.len() <= 10, "got {}", sweep.thresholds.len());
        for w in sweep.thresholds.windows(2) {
            assert!(w[0] < w[1], "strictly increasing after dedup");
        }
    }

    #[test]
    fn report_serializes_to_flat_keys() {
        let (truth_aff, truth_mask) = random_labels(Dims::new(5, 5, 5), 13);
        let mut seg = SegmentationVolume::zeros(truth_aff.dims());
        let comp = segment_components(&truth_aff, 0.5);
        seg.ids_mut().copy_from_slice(comp.ids());
        let report = MetricsReport {
            balanced_accuracy: balanced_accuracy(&truth_aff, &truth_mask, 0.5).unwrap(),
            auc_edge: auc_edge(&truth_aff, &truth_mask).unwrap(),
            rand_curve: rand_curve(
                &truth_aff,
                &seg,
                &ThresholdSweep::explicit(vec![0.5]),
            )
            .unwrap(),
        };
        let text = report.to_text();
        let map = parse_report_text(&text);
        assert_eq!(map.get("bal_acc_mean").unwrap(), "1");
        assert_eq!(map.get("max_ri").unwrap(), "1");
        assert!(map.contains_key("auc_edge_x"));
    }
}
