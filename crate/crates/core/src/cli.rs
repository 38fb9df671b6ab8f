//! Command-line front end. Each subcommand wraps one pipeline stage and
//! writes its artifacts under `--out`.
//!
//! Exit codes: 0 on success, 1 on a numerical abort or runtime failure,
//! 2 on a usage or configuration error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::camera::{self, look_at_pose, CameraRecord, Intrinsics, SamplingMode, SphericalPose, Vec3};
use crate::config::PipelineConfig;
use crate::costvolume::{aggregate_variance, apply_conv3d, load_volume, save_volume, Conv3DStack, VoxelGrid};
use crate::error::{Error, Result};
use crate::features::{extract_features, load_view_set, FeatureExtractor, Image, CAMERAS_FILE};
use crate::fields::FieldSet;
use crate::mesh::{init_tetgrid, marching_tetrahedra, mesh_finetune, TetGrid, TriMesh};
use crate::metrics::{eval_circle, evaluate, Embedders, EvalReport, EvalSubject, Modality};
use crate::refine::{refine_particles, DiffusionSchedule, FieldTarget, RefineTrace};
use crate::render::{render_image, RenderConfig};

pub const LOG_ENV: &str = "GD_LOG_LEVEL";

pub const VOLUME_FILE: &str = "volume.gdvol";
pub const CHECKPOINT_FILE: &str = "checkpoint.gdfld";
pub const TRACE_FILE: &str = "trace.csv";
pub const MESH_FILE: &str = "mesh.obj";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "priors3d", version, about = "Multi-view conditioned 3D asset pipeline")]
pub struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives the bit-exact reference behavior.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample source-view poses into cameras.json.
    SampleViews(SampleViewsArgs),
    /// Build the cost volume from a directory of posed views.
    BuildVolume(BuildVolumeArgs),
    /// Refine a field against the score providers.
    Refine(RefineArgs),
    /// Render color, normal and depth of a checkpoint.
    Render(RenderArgs),
    /// Extract a triangle mesh from a checkpoint.
    ExtractMesh(CheckpointArgs),
    /// Refine geometry and texture on a tetrahedral grid.
    FinetuneMesh(CheckpointArgs),
    /// Score a mesh or checkpoint on the evaluation circle.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SampleViewsArgs {
    /// SD_FRONT or MVDREAM_FOUR; overrides the config.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SamplingMode>,
    #[arg(long)]
    pub count: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<SamplingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct BuildVolumeArgs {
    /// Directory with view_NNN.png files and cameras.json.
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 15.0)]
    pub elevation: f64,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "checkpoint")]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Also write the rendered frames as PNGs.
    #[arg(long)]
    pub frames: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::File { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Loads the configuration, applies command-line overrides and runs the command.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    info!("config sha256 {} seed {}", cfg.hash()?, cfg.seed);
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &mut cfg, &cli.out))
}

fn dispatch(command: &Command, cfg: &mut PipelineConfig, out: &Path) -> Result<()> {
    match command {
        Command::SampleViews(a) => {
            if let Some(m) = a.mode {
                cfg.views.mode = m;
            }
            if let Some(c) = a.count {
                cfg.views.count = c;
            }
            cmd_sample_views(cfg, out).map(|_| ())
        }
        Command::BuildVolume(a) => {
            if let Some(r) = a.resolution {
                cfg.volume.resolution = r;
            }
            cmd_build_volume(&a.views, cfg, &out.join(VOLUME_FILE)).map(|_| ())
        }
        Command::Refine(a) => {
            if let Some(n) = a.iterations {
                cfg.refine.iterations = n;
            }
            let input = match (&a.volume, &a.checkpoint) {
                (Some(v), _) => RefineInput::Volume(v.clone()),
                (None, Some(c)) => RefineInput::Checkpoint(c.clone()),
                (None, None) => return Err(Error::Config("refine needs --volume or --checkpoint".into())),
            };
            cmd_refine(cfg, &input, out).map(|_| ())
        }
        Command::Render(a) => {
            let radius = a.radius.unwrap_or(cfg.views.radius);
            let pose = SphericalPose::new(a.azimuth, a.elevation, radius)?;
            cmd_render(cfg, &a.checkpoint, &pose, &out.join("render"))
        }
        Command::ExtractMesh(a) => cmd_extract_mesh(cfg, &a.checkpoint, &out.join(MESH_FILE)).map(|_| ()),
        Command::FinetuneMesh(a) => cmd_finetune_mesh(cfg, &a.checkpoint, out),
        Command::Eval(a) => {
            if let Some(c) = a.count {
                cfg.metrics.circle.count = c;
            }
            let subject = match (&a.mesh, &a.checkpoint) {
                (Some(m), _) => EvalInput::Mesh(m.clone()),
                (None, Some(c)) => EvalInput::Checkpoint(c.clone()),
                (None, None) => return Err(Error::Config("eval needs --mesh or --checkpoint".into())),
            };
            cmd_eval(cfg, &subject, out, a.frames).map(|_| ())
        }
    }
}

/// Writes `out/cameras.json` and returns its records.
pub fn cmd_sample_views(cfg: &PipelineConfig, out: &Path) -> Result<Vec<CameraRecord>> {
    let strategy = cfg.views.strategy(cfg.seed);
    let views = camera::sample_source_poses(&strategy)?;
    let records: Vec<CameraRecord> = views.iter().map(CameraRecord::from_view).collect();
    let path = out.join(CAMERAS_FILE);
    camera::write_cameras(&path, &records)?;
    info!("wrote {} poses to {}", records.len(), path.display());
    Ok(records)
}

/// Extracts features from every view, aggregates their variance and applies
/// the 3D convolution stack.
pub fn cmd_build_volume(views: &Path, cfg: &PipelineConfig, out: &Path) -> Result<VoxelGrid> {
    let set = load_view_set(views)?;
    let extractor = FeatureExtractor::load(cfg.volume.extractor, cfg.volume.extractor_weights.as_deref())?;
    let maps = set
        .images
        .iter()
        .map(|img| extract_features(img, &extractor))
        .collect::<Result<Vec<_>>>()?;
    let cameras: Vec<_> = set.views.iter().map(|v| v.camera.clone()).collect();
    let raw = aggregate_variance(&maps, &cameras, &cfg.volume.grid())?;
    let stack = match &cfg.volume.conv3d_weights {
        Some(p) => Conv3DStack::load(p)?,
        None => Conv3DStack::identity(raw.channels),
    };
    let volume = apply_conv3d(&raw, &stack)?;
    info!(
        "cost volume {:?} with {} channels, valid-voxel fraction {:.4}",
        volume.spec.dims,
        volume.channels,
        volume.valid_fraction()
    );
    save_volume(&volume, out)?;
    Ok(volume)
}

#[derive(Debug, Clone)]
pub enum RefineInput {
    Volume(PathBuf),
    Checkpoint(PathBuf),
}

fn load_checkpoint(path: &Path) -> Result<FieldSet> {
    FieldSet::load(path)
}

/// Refines one field per particle. Particle 0 is written to
/// `checkpoint.gdfld`, further particles to `checkpoint_pN.gdfld`.
pub fn cmd_refine(cfg: &PipelineConfig, input: &RefineInput, out: &Path) -> Result<Vec<FieldSet>> {
    let particles = cfg.refine.particles;
    let fields: Vec<FieldSet> = match input {
        RefineInput::Volume(p) => {
            let volume = load_volume(p)?;
            (0..particles)
                .map(|i| {
                    let mut fc = cfg.fields.clone();
                    fc.seed = cfg.derived_seed(fc.seed) ^ i as u64;
                    FieldSet::from_volume(volume.clone(), &fc)
                })
                .collect::<Result<_>>()?
        }
        RefineInput::Checkpoint(p) => vec![load_checkpoint(p)?; particles],
    };
    let render = RenderConfig {
        resolution: None,
        seed: cfg.derived_seed(cfg.render.seed),
        ..cfg.render.clone()
    };
    let mut targets: Vec<FieldTarget> = fields
        .into_iter()
        .map(|fields| FieldTarget {
            fields,
            render: render.clone(),
        })
        .collect();
    let schedule = DiffusionSchedule::new(cfg.schedule.clone())?;
    let poses = cfg.poses.distribution();
    let pixels = (cfg.poses.resolution as usize).pow(2) * 3;
    let mut pre = cfg.providers.pretrained.build(pixels, &schedule, cfg.seed)?;
    let mut lora = cfg.providers.lora.build(pixels, &schedule, cfg.seed)?;
    let refine = crate::refine::RefineConfig {
        seed: cfg.derived_seed(cfg.refine.seed),
        ..cfg.refine.clone()
    };
    let trace = refine_particles(&mut targets, pre.as_mut(), lora.as_mut(), &poses, &schedule, &refine)?;
    trace.save(&out.join(TRACE_FILE))?;
    for (i, t) in targets.iter().enumerate() {
        let name = if i == 0 {
            CHECKPOINT_FILE.to_string()
        } else {
            format!("checkpoint_p{i}.gdfld")
        };
        t.fields.save(&out.join(name))?;
    }
    info!("refined {} particle(s) for {} iterations", targets.len(), refine.iterations);
    Ok(targets.into_iter().map(|t| t.fields).collect())
}

pub fn cmd_render(cfg: &PipelineConfig, checkpoint: &Path, pose: &SphericalPose, out: &Path) -> Result<()> {
    let fields = load_checkpoint(checkpoint)?;
    let size = cfg.render.resolution.unwrap_or(cfg.views.resolution);
    let cam = look_at_pose(pose, &Vec3::zeros(), Intrinsics::square(size, cfg.views.fov))?;
    let render = RenderConfig {
        seed: cfg.derived_seed(cfg.render.seed),
        ..cfg.render.clone()
    };
    let img = render_image(&fields, &cam, &render)?;
    img.save(out)?;
    info!("rendered {}x{} to {}", img.width, img.height, out.display());
    Ok(())
}

/// Tet grid covering the field's volume bounds, with sdf sampled from it.
pub fn tet_grid_for(fields: &FieldSet, resolution: usize) -> Result<TetGrid> {
    let mut grid = init_tetgrid(resolution, fields.volume.spec.bounds())?;
    grid.sample_sdf(fields);
    Ok(grid)
}

pub fn cmd_extract_mesh(cfg: &PipelineConfig, checkpoint: &Path, out: &Path) -> Result<TriMesh> {
    let fields = load_checkpoint(checkpoint)?;
    let grid = tet_grid_for(&fields, cfg.mesh.tet_resolution)?;
    let mesh = marching_tetrahedra(&grid)?;
    if mesh.is_empty() {
        warn!("extracted mesh is empty");
    }
    mesh.save(out)?;
    info!("{} vertices, {} faces -> {}", mesh.vertices.len(), mesh.faces.len(), out.display());
    Ok(mesh)
}

/// Writes `finetuned.obj`, `finetuned.ply`, `finetuned.gdfld` and both traces.
pub fn cmd_finetune_mesh(cfg: &PipelineConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let fields = load_checkpoint(checkpoint)?;
    let grid = tet_grid_for(&fields, cfg.mesh.tet_resolution)?;
    let schedule = DiffusionSchedule::new(cfg.schedule.clone())?;
    let poses = cfg.poses.distribution();
    let size = cfg.mesh.resolution.unwrap_or(cfg.poses.resolution) as usize;
    let mut pre = cfg.providers.pretrained.build(size * size * 3, &schedule, cfg.seed)?;
    let mut lora = cfg.providers.lora.build(size * size * 3, &schedule, cfg.seed)?;
    let mut mc = cfg.mesh.clone();
    mc.refine.seed = cfg.derived_seed(mc.refine.seed);
    let res = mesh_finetune(grid, fields, pre.as_mut(), lora.as_mut(), &poses, &schedule, &mc)?;
    res.mesh.save(&out.join("finetuned.obj"))?;
    res.mesh.save(&out.join("finetuned.ply"))?;
    res.fields.save(&out.join("finetuned.gdfld"))?;
    save_trace(&res.geometry_trace, &out.join("trace_geometry.csv"))?;
    save_trace(&res.texture_trace, &out.join("trace_texture.csv"))?;
    info!("fine-tuned mesh with {} faces", res.mesh.faces.len());
    Ok(())
}

fn save_trace(trace: &RefineTrace, path: &Path) -> Result<()> {
    trace.save(path)
}

#[derive(Debug, Clone)]
pub enum EvalInput {
    Mesh(PathBuf),
    Checkpoint(PathBuf),
}

fn load_reference(dir: &Path) -> Result<Vec<Image>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::from(e).at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    names.iter().map(|p| Image::load_png(p)).collect()
}

/// Renders the evaluation circle and writes `report.json` and `report.csv`.
pub fn cmd_eval(cfg: &PipelineConfig, input: &EvalInput, out: &Path, save_frames: bool) -> Result<EvalReport> {
    let (mesh, fields) = match input {
        EvalInput::Mesh(p) => (Some(TriMesh::load_obj(p)?), None),
        EvalInput::Checkpoint(p) => (None, Some(load_checkpoint(p)?)),
    };
    let render = RenderConfig {
        seed: cfg.derived_seed(cfg.render.seed),
        ..cfg.render.clone()
    };
    let subject = match (&mesh, &fields) {
        (Some(m), _) => EvalSubject::Mesh(m),
        (None, Some(f)) => EvalSubject::Fields(f, &render),
        (None, None) => unreachable!("one input is always loaded"),
    };
    let frames = eval_circle(&subject, &cfg.metrics.circle)?;
    if save_frames {
        for (i, (_, img)) in frames.iter().enumerate() {
            img.save_png(&out.join("frames").join(format!("frame_{i:03}.png")))?;
        }
    }
    let reference = match &cfg.metrics.reference_dir {
        Some(d) => load_reference(d)?,
        None => Vec::new(),
    };
    let m = &cfg.metrics;
    let mut image = m.image.build(Modality::Image, cfg.seed)?;
    let mut text = m.text.build(Modality::Text, cfg.seed)?;
    let mut points = m.points.build(Modality::Pointcloud, cfg.seed)?;
    let embedders = Embedders {
        image: image.as_mut(),
        text: text.as_mut(),
        points: points.as_mut(),
    };
    let report = evaluate(&frames, mesh.as_ref(), &m.captions, m.correct, &reference, embedders, cfg.seed)?;
    report.save(&out.join(REPORT_FILE))?;
    report.save(&out.join("report.csv"))?;
    info!(
        "{} views, r_score {:.4}, fid {:?}, uni3d {:?}",
        report.per_view_scores.len(),
        report.r_score,
        report.fid,
        report.uni3d_score
    );
    Ok(report)
}
