//! Train a single-iteration boundary classifier on synthetic data and score
//! it on a held-out volume.
//!
//! ```text
//! cargo run --example train_boundary_classifier
//! ```

use dawmr::features::GroupInputs;
use dawmr::pipeline::{
    bundle, evaluate_prediction, train_iteration, ArchitectureConfig, PipelineConfig,
};
use dawmr::volume::{generate_synthetic, CatalogEntry, Dims, SubvolumeCatalog, SyntheticParams};

fn main() -> dawmr::Result<()> {
    let params = SyntheticParams {
        num_seeds: 8,
        boundary_width: 1.0,
        noise_sigma: 25.0,
        blur_sigma: 1.0,
    };
    let (train_img, train_seg) = generate_synthetic(Dims::new(48, 48, 48), &params, 101)?;
    let catalog = SubvolumeCatalog::new(vec![CatalogEntry::whole(train_img, train_seg)?]);

    // Single-scale foveated, 32-atom dictionary, a short update budget.
    let cfg = PipelineConfig {
        arch: ArchitectureConfig {
            scales: vec![1],
            dict_size: 32,
            dict_patches: 5000,
            ..ArchitectureConfig::default()
        },
        train: dawmr::mlp::TrainConfig {
            updates: 8000,
            hidden: vec![100],
            ..dawmr::mlp::TrainConfig::default()
        },
        seed: 102,
        ..PipelineConfig::default()
    };
    let work = std::env::temp_dir().join("dawmr_train_example");
    std::fs::create_dir_all(&work)?;
    println!(
        "training: d = {}, fov = {:?}, {} updates",
        cfg.arch.feature_dims(1)?,
        cfg.arch.field_of_view(),
        cfg.train.updates
    );
    let model = train_iteration(&catalog, &cfg, &work)?;

    // Save and reload the bundle, then evaluate on a fresh volume.
    let bundle_dir = work.join("bundle");
    let chain = dawmr::pipeline::DawmrModel { iterations: vec![model], led_masks: Vec::new() };
    bundle::save_model(&chain, &bundle_dir)?;
    let reloaded = bundle::load_model(&bundle_dir)?;

    let (val_img, val_seg) = generate_synthetic(Dims::new(32, 32, 32), &params, 103)?;
    let pred = reloaded.iterations[0].infer(&GroupInputs::image_only(&val_img)?)?;
    let report = evaluate_prediction(&pred, &val_seg, 200)?;
    println!("held-out bal-acc  {:.4}", report.balanced_accuracy.mean.unwrap());
    println!("held-out AUC-edge {:.4}", report.auc_edge.mean.unwrap());
    println!("held-out AUC-RI   {:.4}", report.rand_curve.auc_ri);
    println!("held-out max RI   {:.4}", report.rand_curve.max_ri);
    Ok(())
}
