//! Local error density weighting: find neighborhoods a preview classifier
//! gets mostly wrong, then oversample them ten-fold.
//!
//! ```text
//! cargo run --example led_weighting
//! ```

use dawmr::mlp::BalancedSampler;
use dawmr::pipeline::{compute_led_mask, merge_masks};
use dawmr::volume::{
    affinities_from_segmentation, generate_synthetic, Axis, BoundingBox, Dims, SyntheticParams,
    VoxelCoord,
};

fn main() -> dawmr::Result<()> {
    let dims = Dims::new(32, 32, 32);
    let (_, seg) = generate_synthetic(dims, &SyntheticParams::default(), 41)?;
    let (truth_aff, mask) = affinities_from_segmentation(&seg);

    // Fake a preview prediction: correct everywhere except a planted block
    // with inverted edges.
    let mut pred = truth_aff.clone();
    let block = BoundingBox::new(VoxelCoord::new(10, 10, 10), VoxelCoord::new(18, 18, 18));
    for v in block.iter() {
        for axis in Axis::ALL {
            pred.set_edge(v, axis, 1.0 - truth_aff.edge(v, axis));
        }
    }

    let led = compute_led_mask(&pred, &mask, 5, 0.5, 10.0)?;
    println!(
        "planted an 8^3 error block; LED masks {} voxels ({:.2}% of the volume)",
        led.masked_count(),
        100.0 * led.masked_count() as f64 / dims.voxels() as f64
    );

    // Masks accumulate across iterations by OR.
    let merged = merge_masks(&led, &led)?;
    assert_eq!(merged.masked_count(), led.masked_count());

    // The mask drives weighted balanced sampling: masked records are drawn
    // at ten times the per-record rate.
    let labels: Vec<[i8; 3]> = (0..500).map(|_| [1, -1, 1]).collect();
    let weights: Vec<f64> = (0..500).map(|i| if i < 50 { 10.0 } else { 1.0 }).collect();
    let mut sampler = BalancedSampler::new(&labels, Some(&weights), 42)?;
    let mut counts = vec![0u64; 500];
    for _ in 0..50_000 {
        for i in sampler.next_batch(4) {
            counts[i] += 1;
        }
    }
    let heavy = counts[..50].iter().sum::<u64>() as f64 / 50.0;
    let light = counts[50..].iter().sum::<u64>() as f64 / 450.0;
    println!("weighted records drawn at {:.2}x the rate of unweighted ones", heavy / light);
    Ok(())
}
