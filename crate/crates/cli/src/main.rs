use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use panolidar::augment::{augment_frame, crop_instances, AugmentConfig};
use panolidar::fusion::{assemble, Pooling, PoolingConfig};
use panolidar::io;
use panolidar::nms::{nms, NmsConfig};
use panolidar::range::{project, render_channel, Channel};
use panolidar::semantic::{
    sample_point_features, FeatureProvider, PrecomputedFeatures, ReferenceFeatures,
    DEFAULT_FEATURE_DIM,
};
use panolidar::temporal::{
    format_occupancy_table, occupancy_report, spatial_fuse_aligned, temporal_fuse, FusionStrategy,
};
use panolidar::voxel::{VoxelMode, VoxelSpec, DEFAULT_BEV_RESOLUTION};
use panolidar::GridSpec;

#[derive(Parser)]
#[command(
    name = "panolidar",
    version,
    about = "LiDAR range-image and voxel preprocessing"
)]
struct Cli {
    /// Worker threads; defaults to PANOLIDAR_THREADS, then the CPU count.
    #[arg(long, global = true, env = "PANOLIDAR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a point file onto the range-image grid.
    Project(ProjectArgs),
    /// Fuse the sweeps of a manifest into the key frame.
    Fuse(FuseArgs),
    /// Pool decorated point features into a sparse voxel tensor.
    Voxelize(VoxelizeArgs),
    /// Crop labelled objects out of frames into a sample database.
    GtDb(GtDbArgs),
    /// Paste database samples into a frame and apply the global transform.
    Augment(AugmentArgs),
    /// Print range-image occupancy of fused sweeps per resolution multiplier.
    Stats(StatsArgs),
    /// Greedy BEV non-maximum suppression over a box list.
    Nms(NmsArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Linear resolution multiplier applied to the default grid.
    #[arg(long, default_value_t = 1)]
    n: usize,
}

impl GridArgs {
    fn spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::default().refined(self.n)?)
    }
}

#[derive(Args)]
struct ProjectArgs {
    points: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Write `<output>.<channel>.pgm` for each listed channel.
    #[arg(long, value_delimiter = ',')]
    render: Vec<Channel>,
}

#[derive(Args)]
struct FuseArgs {
    manifest: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = FusionStrategy::Spatial)]
    strategy: FusionStrategy,
    /// Resolution multiplier for spatial fusion.
    #[arg(long, default_value_t = 2)]
    n: usize,
}

#[derive(Args)]
struct VoxelizeArgs {
    points: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Precomputed (rows, cols, dim) feature tensor on the default grid.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Width of the reference features when no tensor is given.
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    feature_dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Voxel)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_BEV_RESOLUTION)]
    bev_res: f64,
    #[arg(long, default_value_t = Pooling::Max)]
    pool_sem: Pooling,
    #[arg(long, default_value_t = Pooling::Average)]
    pool_geo: Pooling,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Voxel,
    Pillar,
}

#[derive(Args)]
struct GtDbArgs {
    /// Output database directory.
    #[arg(short, long)]
    output: PathBuf,
    /// Point file and box list pairs.
    #[arg(long = "frame", num_args = 2, value_names = ["POINTS", "BOXES"], required = true)]
    frames: Vec<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    points: PathBuf,
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = AugmentConfig::default().paste_count)]
    paste_count: usize,
    /// Augmented point file.
    #[arg(short, long)]
    output: PathBuf,
    /// Kept box list.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    n_list: Vec<usize>,
    /// Also write the rows as JSON lines.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct NmsArgs {
    boxes: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = NmsConfig::default().iou_threshold)]
    iou: f64,
    #[arg(long, default_value_t = NmsConfig::default().max_output)]
    max_output: usize,
    /// Only suppress within a category.
    #[arg(long)]
    per_category: bool,
}

fn run_project(a: &ProjectArgs) -> Result<()> {
    let cloud = io::read_points(&a.points)?;
    let img = project(&cloud, &a.grid.spec()?);
    io::write_range_image(&a.output, &img)?;
    for &ch in &a.render {
        let path = suffixed(&a.output, &format!("{ch}.pgm"));
        io::atomic_write(&path, &render_channel(&img, ch, None).to_pgm())?;
    }
    let c = img.counts();
    println!(
        "{} points: {} pixels occupied, {} discarded, {} out of view, {} degenerate",
        cloud.len(),
        c.survivors,
        c.discarded,
        c.out_of_view,
        c.degenerate
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn run_fuse(a: &FuseArgs) -> Result<()> {
    let sweeps = io::load_sweeps(&a.manifest)?;
    let spec = GridSpec::default();
    match a.strategy {
        FusionStrategy::Temporal => {
            let images = temporal_fuse(&sweeps, &spec);
            io::write_range_image_stack(&a.output, &images, &spec)?;
            println!("{} frames stacked", images.len());
        }
        FusionStrategy::Spatial => {
            let (cloud, img) = spatial_fuse_aligned(&sweeps, &spec, a.n)?;
            io::write_range_image_with_time(&a.output, &img, &cloud)?;
            println!(
                "{} points from {} frames: {} of {} pixels occupied",
                cloud.len(),
                sweeps.len(),
                img.occupied_count(),
                img.rows() * img.cols()
            );
        }
    }
    Ok(())
}

fn run_voxelize(a: &VoxelizeArgs) -> Result<()> {
    let cloud = io::read_points(&a.points)?;
    let img = project(&cloud, &GridSpec::default());
    let fmap = match &a.features {
        Some(path) => PrecomputedFeatures(io::read_feature_map(path)?).features(&img)?,
        None => ReferenceFeatures { dim: a.feature_dim }.features(&img)?,
    };
    let sem = sample_point_features(&fmap, &img)?;
    let mode = match a.mode {
        ModeArg::Voxel => VoxelMode::Voxel,
        ModeArg::Pillar => VoxelMode::Pillar,
    };
    let spec = VoxelSpec::with_bev_resolution(mode, a.bev_res)?;
    let cfg = PoolingConfig {
        semantic: a.pool_sem,
        geometric: a.pool_geo,
    };
    let tensor = assemble(&cloud, &sem, &spec, &cfg)?;
    io::write_voxel_tensor(&a.output, &tensor)?;
    println!("{} voxels of width {}", tensor.len(), tensor.dim());
    Ok(())
}

fn run_gt_db(a: &GtDbArgs) -> Result<()> {
    let mut samples = Vec::new();
    for pair in a.frames.chunks(2) {
        let cloud = io::read_points(&pair[0])?;
        let boxes = io::read_boxes(&pair[1])?;
        samples.extend(crop_instances(&cloud, &boxes));
    }
    io::save_database(&a.output, &samples)?;
    println!("{} samples", samples.len());
    Ok(())
}

fn run_augment(a: &AugmentArgs) -> Result<()> {
    let frame = io::read_points(&a.points)?;
    let boxes = io::read_boxes(&a.boxes)?;
    let db = io::load_database(&a.db)?;
    let cfg = AugmentConfig {
        rng_seed: a.seed,
        paste_count: a.paste_count,
        ..Default::default()
    };
    let out = augment_frame(&frame, &boxes, &db, &GridSpec::default(), &cfg)?;
    io::write_points(&a.output, &out.cloud)?;
    io::write_boxes(&a.labels, &out.boxes)?;
    println!(
        "{} points, {} boxes kept ({} pasted, {} removed)",
        out.cloud.len(),
        out.boxes.len(),
        out.pasted,
        out.removed
    );
    Ok(())
}

fn run_stats(a: &StatsArgs) -> Result<()> {
    let sweeps = io::load_sweeps(&a.manifest)?;
    let rows = occupancy_report(&sweeps, &GridSpec::default(), &a.n_list)?;
    print!("{}", format_occupancy_table(&rows));
    if let Some(path) = &a.json {
        let mut text = Vec::new();
        for r in &rows {
            serde_json::to_writer(&mut text, r)?;
            text.push(b'\n');
        }
        io::atomic_write(path, &text)?;
    }
    Ok(())
}

fn run_nms(a: &NmsArgs) -> Result<()> {
    let boxes = io::read_boxes(&a.boxes)?;
    let cfg = NmsConfig {
        iou_threshold: a.iou,
        max_output: a.max_output,
        per_category: a.per_category,
    }
    .validated()?;
    let kept: Vec<_> = nms(&boxes, &cfg)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect();
    io::write_boxes(&a.output, &kept)?;
    println!("{} of {} boxes kept", kept.len(), boxes.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().context("starting worker threads")?;
    match &cli.command {
        Command::Project(a) => run_project(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Voxelize(a) => run_voxelize(a),
        Command::GtDb(a) => run_gt_db(a),
        Command::Augment(a) => run_augment(a),
        Command::Stats(a) => run_stats(a),
        Command::Nms(a) => run_nms(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let message: Vec<&str> = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!(
                "panolidar: {}",
                message.join(" ").trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panolidar: {e:#}");
            ExitCode::FAILURE
        }
    }
}
