//! Recursive refinement: a second network iteration reads the first one's
//! affinity output next to the raw image and improves on it.
//!
//! ```text
//! cargo run --example recursive_refinement
//! ```

use dawmr::pipeline::{evaluate_prediction, train_recursive, ArchitectureConfig, PipelineConfig, Prediction};
use dawmr::volume::{generate_synthetic, CatalogEntry, Dims, SubvolumeCatalog, SyntheticParams};

fn main() -> dawmr::Result<()> {
    let params = SyntheticParams {
        num_seeds: 7,
        boundary_width: 1.0,
        noise_sigma: 40.0,
        blur_sigma: 1.2,
    };
    let (train_img, train_seg) = generate_synthetic(Dims::new(44, 44, 44), &params, 301)?;
    let catalog = SubvolumeCatalog::new(vec![CatalogEntry::whole(train_img, train_seg)?]);

    let cfg = PipelineConfig {
        arch: ArchitectureConfig {
            scales: vec![1],
            dict_size: 32,
            dict_patches: 4000,
            ..ArchitectureConfig::default()
        },
        train: dawmr::mlp::TrainConfig {
            updates: 5000,
            hidden: vec![100],
            ..dawmr::mlp::TrainConfig::default()
        },
        iterations: 2,
        seed: 302,
        ..PipelineConfig::default()
    };
    let work = std::env::temp_dir().join("dawmr_recursion_example");
    std::fs::create_dir_all(&work)?;
    let model = train_recursive(&catalog, &cfg, &work)?;
    println!(
        "trained {} iterations; per-iteration fov {:?}; total fov {:?} (strict {:?})",
        model.iterations.len(),
        model.iterations[0].spec.field_of_view(),
        model.field_of_view(),
        model.field_of_view_strict(),
    );

    // Evaluate each stage on a fresh volume, on the same (final) valid box.
    let (val_img, val_seg) = generate_synthetic(Dims::new(36, 36, 36), &params, 303)?;
    let preds = model.infer(&val_img)?;
    let last_valid = preds.last().unwrap().valid;
    for (i, p) in preds.iter().enumerate() {
        let restricted = Prediction { affinities: p.affinities.clone(), valid: last_valid };
        let report = evaluate_prediction(&restricted, &val_seg, 200)?;
        println!(
            "iteration {}: bal-acc {:.4}  AUC-edge {:.4}  AUC-RI {:.4}  max RI {:.4}",
            i + 1,
            report.balanced_accuracy.mean.unwrap(),
            report.auc_edge.mean.unwrap(),
            report.rand_curve.auc_ri,
            report.rand_curve.max_ri
        );
    }
    Ok(())
}
