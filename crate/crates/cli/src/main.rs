//! Command-line front end: synthetic dataset generation, field training,
//! mesh extraction, open-vocabulary queries, view segmentation and metric
//! evaluation.
//!
//! Every run writes a manifest recording the effective configuration,
//! inputs, artifacts and resource usage. Outputs are byte-identical across
//! runs with the same inputs and seed; only manifests carry timing. `eval`
//! prints machine-readable JSON on stdout, all logging goes to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use occsem::dataset_io::{load_frameset, read_prompts, synthetic, write_frameset};
use occsem::evaluation::{cull_unobserved, recon_metrics, sample_mesh_points, seg_metrics};
use occsem::grid_field::FieldSet;
use occsem::scene_query::{
    build_occ_feature_map, extract_mesh, query_similarity, read_label_png, read_ply,
    render_segmentation, segment_3d, write_label_png, write_ply, PlyContent, TriMesh,
};
use occsem::trainer::{fit, save_checkpoint, TrainConfig};
use occsem::VOID_CLASS;

#[derive(Parser)]
#[command(name = "occsem", version, about = "Occupancy-field reconstruction with open-vocabulary semantics")]
struct Cli {
    /// Upper bound on worker threads. Computation currently runs on a
    /// single worker; higher values are accepted as a cap.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-box room dataset with planted semantics.
    SynthGen(SynthGenArgs),
    /// Train occupancy, color and semantic fields on a posed RGB-D dataset.
    Train(TrainArgs),
    /// March the occupancy isosurface of a checkpoint into a mesh.
    ExtractMesh(ExtractArgs),
    /// Label or score the occupied cells of a checkpoint against prompts.
    Query(QueryArgs),
    /// Render a segmentation image from a dataset camera pose.
    SegmentView(SegmentViewArgs),
    /// Score predicted meshes or label images against ground truth.
    Eval(EvalArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        bail!("--workers must be at least 1");
    }
    match cli.command {
        Command::SynthGen(args) => cmd_synth_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::ExtractMesh(args) => cmd_extract_mesh(args),
        Command::Query(args) => cmd_query(args),
        Command::SegmentView(args) => cmd_segment_view(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

/// Everything a run leaves behind besides its artifacts: the effective
/// configuration, inputs, outputs, seed, toggles and resource usage. The
/// time fields are the only part of any output that varies between
/// identical runs.
#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    toggles: BTreeMap<String, bool>,
    artifacts: BTreeMap<String, String>,
    wall_clock_seconds: f64,
    peak_rss_bytes: Option<u64>,
    unix_time_seconds: u64,
}

struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    fn new(command: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                seed: None,
                toggles: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                wall_clock_seconds: 0.0,
                peak_rss_bytes: None,
                unix_time_seconds: 0,
            },
            start: Instant::now(),
        }
    }

    fn config(&mut self, cfg: &impl serde::Serialize) -> Result<()> {
        self.manifest.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.display().to_string());
    }

    fn artifact(&mut self, name: &str, path: &Path) {
        self.manifest.artifacts.insert(name.to_string(), path.display().to_string());
    }

    fn toggle(&mut self, name: &str, enabled: bool) {
        self.manifest.toggles.insert(name.to_string(), enabled);
    }

    fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    fn write(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        self.manifest.peak_rss_bytes = peak_rss_bytes();
        self.manifest.unix_time_seconds = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(path, text)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }
}

fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.trim_start_matches("VmHWM:").trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

/// Manifest path next to a single-file artifact: `mesh.ply` gets
/// `mesh.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

#[derive(Args)]
struct SynthGenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Number of frames on the camera ring.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Dimension of the planted per-pixel features.
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    /// Probability of swapping a pixel's feature to a wrong class.
    #[arg(long, default_value_t = 0.0)]
    corruption: f64,
    /// Stddev of Gaussian noise added to features before renormalization.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// RNG seed for prompts and corruption.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Spacing of exported ground-truth surface points in meters.
    #[arg(long, default_value_t = 0.02)]
    gt_spacing: f64,
    /// Skip ground-truth exports (surface points and per-frame labels).
    #[arg(long)]
    no_gt: bool,
    /// Manifest path; defaults to `<out>/manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn cmd_synth_gen(args: SynthGenArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("synth-gen");
    let scene = synthetic::SyntheticScene::two_box_room();
    let cfg = synthetic::SynthConfig {
        width: args.width,
        height: args.height,
        n_frames: args.frames,
        feat_dim: args.feat_dim,
        corruption: args.corruption,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    mb.config(&cfg)?;
    mb.seed(args.seed);

    let set = synthetic::generate(&scene, &cfg).context("generating the synthetic scene")?;
    write_frameset(&args.out, &set)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    mb.artifact("dataset", &args.out);
    eprintln!(
        "dataset: {} frames of {}x{} at {}, {} classes",
        set.frames.len(),
        args.width,
        args.height,
        args.out.display(),
        scene.class_count(),
    );

    if !args.no_gt {
        let surface = scene.surface_points(args.gt_spacing);
        let content = PlyContent {
            positions: surface.iter().map(|(p, _)| *p).collect(),
            classes: Some(surface.iter().map(|(_, c)| *c).collect()),
            scalar: None,
            triangles: Vec::new(),
        };
        let gt_ply = args.out.join("gt_surface.ply");
        write_ply(&gt_ply, &content, true)?;
        mb.artifact("gt_surface", &gt_ply);

        let label_dir = args.out.join("gt_label");
        fs::create_dir_all(&label_dir)?;
        for (i, frame) in set.frames.iter().enumerate() {
            let labels = scene.class_image(&set.intrinsics, &frame.pose);
            write_label_png(&label_dir.join(format!("{i:04}.png")), &labels, args.width, args.height)?;
        }
        mb.artifact("gt_labels", &label_dir);
        eprintln!("ground truth: {} surface points, {} label images", content.positions.len(), set.frames.len());
    }

    mb.write(&args.manifest.unwrap_or_else(|| args.out.join("manifest.json")))
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (layout of `synth-gen`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training configuration fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of optimization steps.
    #[arg(long)]
    iterations: Option<usize>,
    /// RNG seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Rays per batch.
    #[arg(long)]
    rays_per_batch: Option<usize>,
    /// Samples per ray.
    #[arg(long)]
    samples_per_ray: Option<usize>,
    /// Decoder learning rate.
    #[arg(long)]
    lr_decoder: Option<f64>,
    /// Grid learning rate.
    #[arg(long)]
    lr_grid: Option<f64>,
    /// Truncation band half-width in meters.
    #[arg(long)]
    truncation: Option<f64>,
    /// Grid pyramid depth for geometry and color.
    #[arg(long)]
    levels: Option<usize>,
    /// Grid pyramid depth for semantics.
    #[arg(long)]
    sem_levels: Option<usize>,
    /// Coarsest grid voxel size in meters.
    #[arg(long)]
    coarsest_voxel: Option<f64>,
    /// Decoder hidden width.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Semantic output dimension; defaults to the dataset's feature dim.
    #[arg(long)]
    sem_dim: Option<usize>,
    /// Belief cell edge length in meters.
    #[arg(long)]
    belief_voxel: Option<f64>,
    /// Replace the Huber kernel on the distillation residual with identity.
    #[arg(long)]
    no_huber: bool,
    /// Disable confidence weighting of semantic measurements.
    #[arg(long)]
    no_scp: bool,
    /// Drop the occupancy and free-space supervision terms.
    #[arg(long)]
    no_bce: bool,
    /// Per-step JSON log; defaults to `<out>/train_log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print a progress line to stderr every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Manifest path; defaults to `<out>/manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct StepRecord<'a> {
    step: u64,
    #[serde(flatten)]
    report: &'a occsem::objective::LossReport,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("train");
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            mb.input("config", path);
            toml::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! override_from {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag {
                cfg.$($field).+ = v;
            })*
        };
    }
    override_from! {
        iterations => iters,
        seed => seed,
        rays_per_batch => rays_per_batch,
        samples_per_ray => samples_per_ray,
        lr_decoder => lr_decoder,
        lr_grid => lr_grid,
        truncation => truncation,
        levels => field.levels,
        sem_levels => field.sem_levels,
        hidden_dim => field.hidden_dim,
        sem_dim => field.sem_dim,
    }
    if args.coarsest_voxel.is_some() {
        cfg.field.coarsest_voxel = args.coarsest_voxel;
    }
    if args.belief_voxel.is_some() {
        cfg.belief_voxel = args.belief_voxel;
    }
    cfg.huber_enabled &= !args.no_huber;
    cfg.scp_enabled &= !args.no_scp;
    cfg.bce_enabled &= !args.no_bce;

    let set = load_frameset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    mb.input("data", &args.data);
    let data_dim = set.frames.iter().find_map(|f| f.feature.as_ref().map(|m| m.dim));
    if let Some(d) = data_dim {
        if d != cfg.field.sem_dim && args.sem_dim.is_none() {
            eprintln!("adopting semantic dimension {d} from the dataset (config had {})", cfg.field.sem_dim);
            cfg.field.sem_dim = d;
        }
    }

    fs::create_dir_all(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("train_log.jsonl"));
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path)
            .with_context(|| format!("creating log {}", log_path.display()))?,
    );

    eprintln!(
        "training {} steps on {} frames ({} rays x {} samples, seed {})",
        cfg.iters,
        set.frames.len(),
        cfg.rays_per_batch,
        cfg.samples_per_ray,
        cfg.seed,
    );
    let mut failed = None;
    let state = fit(&set, &cfg, |step, report| {
        if failed.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, &StepRecord { step, report })
                .map_err(anyhow::Error::from)
                .and_then(|_| log.write_all(b"\n").map_err(Into::into))
            {
                failed = Some(e);
            }
        }
        if step % args.log_every.max(1) == 0 || step as usize == cfg.iters {
            eprintln!(
                "step {step}: total {:.4} (rgb {:.4} depth {:.4} occ {:.4} fs {:.4} sg {:.4})",
                report.total, report.rgb, report.depth, report.occ, report.fs, report.sg,
            );
        }
    })
    .context("training failed")?;
    if let Some(e) = failed {
        return Err(e.context("writing the step log"));
    }
    log.flush()?;

    let ckpt = args.out.join("checkpoint.occ");
    save_checkpoint(&state, &ckpt)
        .with_context(|| format!("writing checkpoint {}", ckpt.display()))?;
    eprintln!("checkpoint: {}", ckpt.display());

    mb.config(&cfg)?;
    mb.seed(cfg.seed);
    mb.toggle("huber", cfg.huber_enabled);
    mb.toggle("scp", cfg.scp_enabled);
    mb.toggle("bce", cfg.bce_enabled);
    mb.artifact("checkpoint", &ckpt);
    mb.artifact("optimizer_state", &args.out.join("checkpoint.occ.state"));
    mb.artifact("train_log", &log_path);
    mb.write(&args.manifest.unwrap_or_else(|| args.out.join("manifest.json")))
}

#[derive(Args)]
struct ExtractArgs {
    /// Trained checkpoint (`.occ`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output mesh (PLY).
    #[arg(long)]
    out: PathBuf,
    /// Marching lattice spacing in meters.
    #[arg(long, default_value_t = 0.01)]
    voxel: f64,
    /// Occupancy isosurface level.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write ASCII PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
    /// Manifest path; defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct ExtractConfig {
    voxel: f64,
    threshold: f64,
    ascii: bool,
}

fn cmd_extract_mesh(args: ExtractArgs) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        bail!("--threshold must lie in (0, 1), got {}", args.threshold);
    }
    let mut mb = ManifestBuilder::new("extract-mesh");
    mb.config(&ExtractConfig { voxel: args.voxel, threshold: args.threshold, ascii: args.ascii })?;
    mb.input("checkpoint", &args.checkpoint);

    let fields = FieldSet::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mesh = extract_mesh(&fields, args.voxel, args.threshold).context("meshing failed")?;
    if mesh.is_empty() {
        eprintln!("warning: no isosurface at threshold {}; writing an empty mesh", args.threshold);
    }
    write_ply(&args.out, &PlyContent::from(&mesh), !args.ascii)
        .with_context(|| format!("writing mesh {}", args.out.display()))?;
    eprintln!("mesh: {} vertices, {} triangles at {}", mesh.vertices.len(), mesh.triangles.len(), args.out.display());
    mb.artifact("mesh", &args.out);
    mb.write(&args.manifest.unwrap_or_else(|| sibling_manifest(&args.out)))
}

#[derive(Args)]
struct QueryArgs {
    /// Trained checkpoint (`.occ`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON prompts file `[{"label": ..., "embedding": [...]}]`; labels
    /// every occupied cell by argmax cosine.
    #[arg(long, conflicts_with = "embedding")]
    prompts: Option<PathBuf>,
    /// JSON array holding one query embedding; scores every occupied cell
    /// by cosine similarity.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Output point cloud (PLY).
    #[arg(long)]
    out: PathBuf,
    /// Edge length of the occupancy cells in meters.
    #[arg(long, default_value_t = 0.02)]
    voxel: f64,
    /// Occupancy threshold for a cell to count as solid.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write ASCII PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
    /// Manifest path; defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct QueryConfig {
    voxel: f64,
    threshold: f64,
    ascii: bool,
    mode: &'static str,
}

fn cmd_query(args: QueryArgs) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        bail!("--threshold must lie in (0, 1), got {}", args.threshold);
    }
    let mut mb = ManifestBuilder::new("query");
    mb.input("checkpoint", &args.checkpoint);
    let fields = FieldSet::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let map = build_occ_feature_map(&fields, args.voxel, args.threshold)
        .context("building the occupied-cell map")?;
    eprintln!("occupied cells: {}", map.len());

    let mode;
    let content = match (&args.prompts, &args.embedding) {
        (Some(path), None) => {
            mode = "segment";
            mb.input("prompts", path);
            let prompts = read_prompts(path)
                .with_context(|| format!("reading prompts {}", path.display()))?;
            let classes = segment_3d(&map, &prompts).context("labeling cells")?;
            PlyContent {
                positions: map.positions.clone(),
                classes: Some(classes),
                scalar: None,
                triangles: Vec::new(),
            }
        }
        (None, Some(path)) => {
            mode = "similarity";
            mb.input("embedding", path);
            let embedding: Vec<f64> = serde_json::from_reader(std::io::BufReader::new(
                fs::File::open(path)
                    .with_context(|| format!("reading embedding {}", path.display()))?,
            ))
            .context("embedding file must be a JSON array of numbers")?;
            let sims = query_similarity(&map, &embedding).context("scoring cells")?;
            PlyContent {
                positions: map.positions.clone(),
                classes: None,
                scalar: Some(("similarity".to_string(), sims)),
                triangles: Vec::new(),
            }
        }
        _ => bail!("exactly one of --prompts or --embedding is required"),
    };
    write_ply(&args.out, &content, !args.ascii)
        .with_context(|| format!("writing point cloud {}", args.out.display()))?;
    eprintln!("point cloud: {} points at {}", content.positions.len(), args.out.display());
    mb.config(&QueryConfig { voxel: args.voxel, threshold: args.threshold, ascii: args.ascii, mode })?;
    mb.artifact("points", &args.out);
    mb.write(&args.manifest.unwrap_or_else(|| sibling_manifest(&args.out)))
}

#[derive(Args)]
struct SegmentViewArgs {
    /// Trained checkpoint (`.occ`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON prompts file `[{"label": ..., "embedding": [...]}]`.
    #[arg(long)]
    prompts: PathBuf,
    /// Dataset directory providing camera intrinsics and poses.
    #[arg(long)]
    data: PathBuf,
    /// Frame index whose pose is rendered.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Depth samples per pixel ray.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// Output label image (16-bit PNG).
    #[arg(long)]
    out: PathBuf,
    /// Manifest path; defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct SegmentViewConfig {
    frame: usize,
    samples: usize,
}

fn cmd_segment_view(args: SegmentViewArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("segment-view");
    mb.config(&SegmentViewConfig { frame: args.frame, samples: args.samples })?;
    mb.input("checkpoint", &args.checkpoint);
    mb.input("prompts", &args.prompts);
    mb.input("data", &args.data);

    let fields = FieldSet::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let prompts = read_prompts(&args.prompts)
        .with_context(|| format!("reading prompts {}", args.prompts.display()))?;
    let set = load_frameset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let Some(frame) = set.frames.get(args.frame) else {
        bail!("--frame {} out of range, dataset has {} frames", args.frame, set.frames.len());
    };
    let labels = render_segmentation(&fields, &prompts, &set.intrinsics, &frame.pose, args.samples)
        .context("rendering the segmentation")?;
    write_label_png(&args.out, &labels, set.intrinsics.width, set.intrinsics.height)
        .with_context(|| format!("writing label image {}", args.out.display()))?;
    let void = labels.iter().filter(|&&c| c == VOID_CLASS).count();
    eprintln!(
        "segmentation: {}x{} at {}, {} void pixels",
        set.intrinsics.width,
        set.intrinsics.height,
        args.out.display(),
        void,
    );
    mb.artifact("labels", &args.out);
    mb.write(&args.manifest.unwrap_or_else(|| sibling_manifest(&args.out)))
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted surface: PLY mesh (sampled) or point cloud (used as-is).
    #[arg(long, requires = "gt_mesh")]
    pred_mesh: Option<PathBuf>,
    /// Ground-truth surface: PLY mesh or point cloud.
    #[arg(long, requires = "pred_mesh")]
    gt_mesh: Option<PathBuf>,
    /// Distance threshold for precision/recall in meters.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Points per square meter when sampling a mesh surface.
    #[arg(long, default_value_t = 10000.0)]
    density: f64,
    /// RNG seed for surface sampling.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Dataset whose depth frames bound the observed region; points of
    /// both surfaces outside it are dropped before scoring.
    #[arg(long)]
    observed_data: Option<PathBuf>,
    /// Depth agreement tolerance for observability in meters.
    #[arg(long, default_value_t = 0.1)]
    observed_tol: f64,
    /// Predicted label image (16-bit PNG).
    #[arg(long, requires = "gt_labels")]
    pred_labels: Option<PathBuf>,
    /// Ground-truth label image (16-bit PNG).
    #[arg(long, requires = "pred_labels")]
    gt_labels: Option<PathBuf>,
    /// Class count; inferred from the ground-truth labels when omitted.
    #[arg(long)]
    classes: Option<usize>,
    /// Manifest path (optional; eval's primary output is stdout JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct EvalConfig {
    threshold: f64,
    density: f64,
    observed_tol: f64,
}

#[derive(serde::Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    recon: Option<occsem::evaluation::ReconMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seg: Option<occsem::evaluation::SegMetrics>,
}

/// Loads a PLY surface as points: meshes are sampled at `density`, point
/// clouds pass through.
fn surface_points(path: &Path, density: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let content = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
    if content.triangles.is_empty() {
        return Ok(content.positions);
    }
    let mesh = TriMesh {
        vertices: content.positions,
        triangles: content.triangles,
        classes: content.classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mesh_points(&mesh, density, &mut rng)
        .with_context(|| format!("sampling {}", path.display()))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("eval");
    mb.config(&EvalConfig {
        threshold: args.threshold,
        density: args.density,
        observed_tol: args.observed_tol,
    })?;
    mb.seed(args.seed);
    let mut out = EvalOutput { recon: None, seg: None };

    if let (Some(pred_path), Some(gt_path)) = (&args.pred_mesh, &args.gt_mesh) {
        mb.input("pred_mesh", pred_path);
        mb.input("gt_mesh", gt_path);
        let mut pred = surface_points(pred_path, args.density, args.seed)?;
        let mut gt = surface_points(gt_path, args.density, args.seed.wrapping_add(1))?;
        if let Some(data) = &args.observed_data {
            mb.input("observed_data", data);
            let set = load_frameset(data)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let (np, ng) = (pred.len(), gt.len());
            pred = cull_unobserved(&pred, &set, args.observed_tol)?;
            gt = cull_unobserved(&gt, &set, args.observed_tol)?;
            eprintln!("observability culling: pred {np} -> {}, gt {ng} -> {}", pred.len(), gt.len());
        }
        out.recon = Some(
            recon_metrics(&pred, &gt, args.threshold).context("reconstruction metrics")?,
        );
    }

    if let (Some(pred_path), Some(gt_path)) = (&args.pred_labels, &args.gt_labels) {
        mb.input("pred_labels", pred_path);
        mb.input("gt_labels", gt_path);
        let (pred, pw, ph) = read_label_png(pred_path)
            .with_context(|| format!("reading {}", pred_path.display()))?;
        let (gt, gw, gh) = read_label_png(gt_path)
            .with_context(|| format!("reading {}", gt_path.display()))?;
        if (pw, ph) != (gw, gh) {
            bail!("label images disagree in size: {pw}x{ph} vs {gw}x{gh}");
        }
        let k = match args.classes {
            Some(k) => k,
            None => {
                let top = gt.iter().filter(|&&c| c != VOID_CLASS).max();
                match top {
                    Some(&t) => t as usize + 1,
                    None => bail!("ground-truth labels are all void; pass --classes"),
                }
            }
        };
        out.seg = Some(seg_metrics(&pred, &gt, k).context("segmentation metrics")?);
    }

    if out.recon.is_none() && out.seg.is_none() {
        bail!("nothing to evaluate: pass --pred-mesh/--gt-mesh and/or --pred-labels/--gt-labels");
    }
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    print!("{text}");
    if let Some(path) = &args.manifest {
        mb.write(path)?;
    }
    Ok(())
}
