//! Assemble feature vectors: the reference architecture table, a working
//! extractor, and the sharded feature cache.
//!
//! ```text
//! cargo run --example feature_extraction
//! ```

use dawmr::features::{FeatureContext, FeatureExtractorSpec, GroupInputs, Pooling, Representation};
use dawmr::pipeline::{
    learn_codebooks_for, precompute_features, read_shard, ArchitectureConfig, FeatureStore,
    PipelineConfig,
};
use dawmr::volume::{generate_synthetic, CatalogEntry, Dims, SubvolumeCatalog, SyntheticParams};

fn main() -> dawmr::Result<()> {
    // Dimensionality / field-of-view arithmetic for the reference
    // single-iteration architectures (all 8000-dimensional).
    println!("architecture      dict     dims   fov");
    let rf = Representation::ReceptiveField;
    let fv = Representation::Foveated;
    for (name, rep, m, scales, patch, dict) in [
        ("5^3 RF   ", rf, [5, 5, 5], 1usize, [5, 5, 5], 32usize),
        ("SS       ", rf, [1, 1, 1], 1, [5, 5, 5], 4000),
        ("SS-FV-2d ", fv, [5, 5, 1], 1, [5, 5, 1], 2000),
        ("SS-FV    ", fv, [5, 5, 5], 1, [5, 5, 5], 2000),
        ("MS-FV    ", fv, [5, 5, 5], 2, [5, 5, 5], 1000),
    ] {
        let arch = ArchitectureConfig {
            patch_side: patch,
            representation: rep,
            neighborhood: m,
            scales: (1..=scales).collect(),
            dict_size: dict,
            ..ArchitectureConfig::default()
        };
        let fov = arch.field_of_view();
        println!(
            "  {name}  {dict:5}  {:5}   {}x{}x{}",
            arch.feature_dims(1)?,
            fov[0],
            fov[1],
            fov[2]
        );
    }

    // A small working extractor: multiscale foveated with a 16-atom
    // dictionary per scale.
    let dims = Dims::new(40, 40, 40);
    let (image, seg) = generate_synthetic(dims, &SyntheticParams::default(), 5)?;
    let catalog = SubvolumeCatalog::new(vec![CatalogEntry::whole(image, seg)?]);
    let cfg = PipelineConfig {
        arch: ArchitectureConfig {
            dict_size: 16,
            dict_patches: 2000,
            dict_epochs: 5,
            ..ArchitectureConfig::default()
        },
        seed: 9,
        ..PipelineConfig::default()
    };
    let codebooks = learn_codebooks_for(&catalog, &cfg, 1, None)?;
    let spec = FeatureExtractorSpec {
        representation: Representation::Foveated,
        neighborhood: [5; 3],
        pooling: Pooling::Max,
        scales: vec![1, 2],
        groups: vec![dawmr::features::ChannelGroup::Image],
        codebooks,
    };
    let entry = &catalog.entries[0];
    let inputs = GroupInputs::image_only(&entry.image)?;
    let ctx = FeatureContext::cached(&spec, &inputs)?;
    let valid = ctx.valid_range();
    println!(
        "extractor: d = {}, fov = {:?}, valid interior {} of {} voxels",
        spec.feature_dims(),
        spec.field_of_view(),
        valid.voxels(),
        dims.voxels()
    );
    let center = dawmr::volume::VoxelCoord::new(20, 20, 20);
    let h = ctx.features_at(center)?;
    println!(
        "h at (20,20,20): length {}, {} nonzero",
        h.len(),
        h.iter().filter(|&&v| v != 0.0).count()
    );

    // Precompute a sharded feature cache for every 11th interior location.
    let dir = std::env::temp_dir().join("dawmr_feature_shards");
    let locations: Vec<_> = valid.iter().step_by(11).collect();
    let paths = precompute_features(&ctx, &entry.mask, &locations, &dir, "demo", 4, 2)?;
    let store = FeatureStore::load_shards(&paths)?;
    println!(
        "wrote {} shards, {} records of {} bytes each",
        paths.len(),
        read_shard(&paths[0])?.len() + read_shard(&paths[1])?.len() + read_shard(&paths[2])?.len() + read_shard(&paths[3])?.len(),
        dawmr::pipeline::record_bytes(store.dim())
    );
    Ok(())
}
