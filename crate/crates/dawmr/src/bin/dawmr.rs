//! Thin command-line driver over the library's pipeline entry points.
//!
//! Every command is a deterministic wrapper over one pipeline operation and
//! writes into a run directory with a fixed layout (`manifest.txt`, copied
//! config, `models/`, `shards/`, `predictions/`, `metrics/`). Exit codes:
//! 0 success, 1 validation error, 2 i/o error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dawmr::config::RunConfig;
use dawmr::features::{FeatureContext, FeatureExtractorSpec, GroupInputs, VqCodebook};
use dawmr::mlp::FeatureSource;
use dawmr::pipeline::{
    bundle, evaluate_prediction, learn_codebooks_for, precompute_features, train_recursive,
    ArchitectureConfig, FeatureStore, PipelineConfig, Prediction,
};
use dawmr::volume::{
    generate_synthetic, io as volio, subsample_locations_within, AffinityGraph, BoundingBox,
    CatalogEntry, Dims, SegmentationVolume, SubvolumeCatalog, SyntheticParams, Volume, VoxelCoord,
};
use dawmr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dawmr",
    about = "Deep and wide multiscale recursive networks for 3d image labeling",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume and its ground-truth segmentation.
    Gen(GenArgs),
    /// Learn the vector-quantization codebooks for one iteration.
    LearnDict(LearnDictArgs),
    /// Precompute features into shard files.
    Extract(ExtractArgs),
    /// Train a single-iteration model.
    Train(TrainArgs),
    /// Train a recursive model (iteration count from the config).
    Recurse(TrainArgs),
    /// Run inference with a trained model bundle.
    Predict(PredictArgs),
    /// Score a prediction against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Volume side length, or `x,y,z`.
    #[arg(long)]
    dims: String,
    /// Number of objects to grow.
    #[arg(long, default_value_t = 8)]
    seeds: usize,
    #[arg(long, default_value_t = 1.0)]
    boundary_width: f64,
    #[arg(long, default_value_t = 20.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnDictArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Affinity input volume; switches to the two-group (iteration >= 2)
    /// dictionary split.
    #[arg(long)]
    affinity: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Ground-truth segmentation providing the edge labels.
    #[arg(long)]
    seg: PathBuf,
    /// Run directory holding codebooks written by `learn-dict`.
    #[arg(long)]
    dicts: PathBuf,
    #[arg(long)]
    affinity: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training image volume(s).
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// Ground-truth segmentation(s), parallel to --image.
    #[arg(long, required = true)]
    seg: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Model bundle directory (the `models/` output of train/recurse).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted affinity volume.
    #[arg(long)]
    pred: PathBuf,
    /// Valid-region sidecar written by `predict`.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    seg: PathBuf,
    #[arg(long, default_value_t = 1000)]
    quantiles: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            // Help and version requests are not errors.
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args),
        Command::LearnDict(args) => learn_dict(args),
        Command::Extract(args) => extract(args),
        Command::Train(args) => {
            // Always a single iteration, regardless of the config value.
            let mut cfg = RunConfig::from_file(&args.config)?;
            cfg.pipeline.iterations = 1;
            train(&args, cfg.pipeline)
        }
        Command::Recurse(args) => {
            let cfg = RunConfig::from_file(&args.config)?;
            train(&args, cfg.pipeline)
        }
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
    }
}

fn parse_dims(value: &str) -> Result<Dims> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad dims `{value}`")))
        })
        .collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok(Dims::new(parts[0], parts[0], parts[0])),
        3 => Ok(Dims::new(parts[0], parts[1], parts[2])),
        _ => Err(Error::InvalidArgument(format!("dims must be `n` or `x,y,z`, got `{value}`"))),
    }
}

fn init_run_dir(out: &Path, command: &str, config: Option<&Path>, details: &[String]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = format!("command = {command}\n");
    for d in details {
        manifest.push_str(d);
        manifest.push('\n');
    }
    if let Some(cfg) = config {
        std::fs::copy(cfg, out.join("config.txt"))?;
        manifest.push_str("config = config.txt\n");
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    Ok(())
}

fn gen(args: GenArgs) -> Result<()> {
    let dims = parse_dims(&args.dims)?;
    let params = SyntheticParams {
        num_seeds: args.seeds,
        boundary_width: args.boundary_width,
        noise_sigma: args.noise,
        blur_sigma: args.blur,
    };
    let (image, seg) = generate_synthetic(dims, &params, args.seed)?;
    init_run_dir(
        &args.out,
        "gen",
        None,
        &[
            format!("dims = {dims}"),
            format!("seeds = {}", args.seeds),
            format!("boundary_width = {}", args.boundary_width),
            format!("noise = {}", args.noise),
            format!("blur = {}", args.blur),
            format!("seed = {}", args.seed),
        ],
    )?;
    volio::write_volume(&image, args.out.join("image.dwmr"))?;
    volio::write_segmentation(&seg, args.out.join("seg.dwmr"))?;
    println!("wrote image.dwmr and seg.dwmr under {}", args.out.display());
    Ok(())
}

fn catalog_from_paths(images: &[PathBuf], segs: &[PathBuf]) -> Result<SubvolumeCatalog> {
    if images.len() != segs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --image arguments but {} --seg arguments",
            images.len(),
            segs.len()
        )));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (img, seg) in images.iter().zip(segs) {
        entries
            .push(CatalogEntry::whole(volio::read_volume(img)?, volio::read_segmentation(seg)?)?);
    }
    Ok(SubvolumeCatalog::new(entries))
}

fn learn_dict(args: LearnDictArgs) -> Result<()> {
    let cfg = RunConfig::from_file(&args.config)?;
    let image = volio::read_volume(&args.image)?;
    let affinity = args.affinity.as_ref().map(volio::read_volume).transpose()?;
    let iteration = if affinity.is_some() { 2 } else { 1 };
    // Dictionary learning is unsupervised; an empty segmentation suffices.
    let seg = SegmentationVolume::zeros(image.dims());
    let catalog = SubvolumeCatalog::new(vec![CatalogEntry::whole(image, seg)?]);
    let affs: Option<Vec<Volume>> = affinity.map(|a| vec![a]);
    let codebooks = learn_codebooks_for(&catalog, &cfg.pipeline, iteration, affs.as_deref())?;
    init_run_dir(&args.out, "learn-dict", Some(&args.config), &[])?;
    let dir = args.out.join("models");
    std::fs::create_dir_all(&dir)?;
    let mut listing = String::new();
    for (i, cb) in codebooks.iter().enumerate() {
        let name = format!("codebook{i}.dwdc");
        cb.save(dir.join(&name))?;
        listing.push_str(&name);
        listing.push('\n');
    }
    std::fs::write(dir.join("codebooks.txt"), listing)?;
    println!("wrote {} codebooks under {}", codebooks.len(), dir.display());
    Ok(())
}

fn load_codebooks(dir: &Path) -> Result<Vec<VqCodebook>> {
    let listing = std::fs::read_to_string(dir.join("codebooks.txt"))?;
    listing
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|name| VqCodebook::load(dir.join(name.trim())))
        .collect()
}

fn extract(args: ExtractArgs) -> Result<()> {
    let cfg = RunConfig::from_file(&args.config)?;
    let p = &cfg.pipeline;
    let image = volio::read_volume(&args.image)?;
    let seg = volio::read_segmentation(&args.seg)?;
    let affinity = args.affinity.as_ref().map(volio::read_volume).transpose()?;
    let iteration = if affinity.is_some() { 2 } else { 1 };
    let codebooks =
        load_codebooks(&args.dicts.join("models")).or_else(|_| load_codebooks(&args.dicts))?;
    let spec = FeatureExtractorSpec {
        representation: p.arch.representation,
        neighborhood: p.arch.neighborhood,
        pooling: p.arch.pooling,
        scales: p.arch.scales.clone(),
        groups: ArchitectureConfig::groups_for_iteration(iteration),
        codebooks,
    };
    spec.validate()?;
    let entry = CatalogEntry::whole(image, seg)?;
    let region = entry.region.intersect(&spec.valid_range(entry.image.dims()));
    let catalog = SubvolumeCatalog::new(vec![entry]);
    let picked = subsample_locations_within(
        &catalog,
        &[region],
        p.subsample_fraction,
        dawmr::seed_for_stage(p.seed, 1, "subsample"),
    )?;
    let locations: Vec<VoxelCoord> = picked.into_iter().map(|(_, l)| l).collect();
    let entry = &catalog.entries[0];
    let inputs = match &affinity {
        Some(aff) => GroupInputs::with_affinity(&entry.image, aff)?,
        None => GroupInputs::image_only(&entry.image)?,
    };
    let ctx = FeatureContext::cached(&spec, &inputs)?;
    init_run_dir(&args.out, "extract", Some(&args.config), &[])?;
    let shard_dir = args.out.join("shards");
    let paths = precompute_features(
        &ctx,
        &entry.mask,
        &locations,
        &shard_dir,
        "features",
        p.shard_count,
        p.workers,
    )?;
    let store = FeatureStore::load_shards(&paths)?;
    println!(
        "wrote {} shards ({} records, dim {}) under {}",
        paths.len(),
        store.len(),
        store.dim(),
        shard_dir.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, pipeline: PipelineConfig) -> Result<()> {
    let catalog = catalog_from_paths(&args.image, &args.seg)?;
    let command = if pipeline.iterations == 1 { "train" } else { "recurse" };
    init_run_dir(&args.out, command, Some(&args.config), &[])?;
    let shard_dir = args.out.join("shards");
    std::fs::create_dir_all(&shard_dir)?;
    let model = train_recursive(&catalog, &pipeline, &shard_dir)?;
    let bundle_dir = args.out.join("models");
    bundle::save_model(&model, &bundle_dir)?;
    let fov = model.field_of_view();
    println!(
        "trained {} iteration(s), total field of view {}x{}x{}, bundle at {}",
        model.iterations.len(),
        fov[0],
        fov[1],
        fov[2],
        bundle_dir.display()
    );
    Ok(())
}

fn write_prediction(pred: &Prediction, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    volio::write_volume(pred.affinities.volume(), dir.join("affinity.dwmr"))?;
    let v = &pred.valid;
    std::fs::write(
        dir.join("valid.txt"),
        format!("lo = {},{},{}\nhi = {},{},{}\n", v.lo.x, v.lo.y, v.lo.z, v.hi.x, v.hi.y, v.hi.z),
    )?;
    Ok(())
}

fn read_valid_box(path: &Path) -> Result<BoundingBox> {
    let text = std::fs::read_to_string(path)?;
    let mut lo = None;
    let mut hi = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let parts: Vec<usize> = v.split(',').filter_map(|p| p.trim().parse().ok()).collect();
            if parts.len() == 3 {
                let c = VoxelCoord::new(parts[0], parts[1], parts[2]);
                match k.trim() {
                    "lo" => lo = Some(c),
                    "hi" => hi = Some(c),
                    _ => {}
                }
            }
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) => Ok(BoundingBox::new(lo, hi)),
        _ => Err(Error::malformed(path, "expected `lo = x,y,z` and `hi = x,y,z`")),
    }
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = bundle::load_model(&args.model)?;
    let image = volio::read_volume(&args.image)?;
    let preds = model.infer(&image)?;
    let last = preds.last().expect("at least one iteration");
    init_run_dir(&args.out, "predict", None, &[format!("model = {}", args.model.display())])?;
    write_prediction(last, &args.out.join("predictions"))?;
    println!(
        "prediction written under {} (valid box {} voxels)",
        args.out.join("predictions").display(),
        last.valid.voxels()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let aff_vol = volio::read_volume(&args.pred)?;
    let seg = volio::read_segmentation(&args.seg)?;
    let valid = match &args.valid {
        Some(path) => read_valid_box(path)?,
        None => BoundingBox::whole(aff_vol.dims()),
    };
    let pred = Prediction { affinities: AffinityGraph::new(aff_vol)?, valid };
    let report = evaluate_prediction(&pred, &seg, args.quantiles)?;
    init_run_dir(&args.out, "evaluate", None, &[format!("pred = {}", args.pred.display())])?;
    let dir = args.out.join("metrics");
    std::fs::create_dir_all(&dir)?;
    report.write(dir.join("report.txt"))?;
    report.write_threshold_table(dir.join("rand_curve.tsv"))?;
    print!("{}", report.to_text());
    Ok(())
}
