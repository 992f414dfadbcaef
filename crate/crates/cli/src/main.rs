use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use lidarsim_core::io::{self, GridFile, SweepFile};
use lidarsim_core::map_builder::{MapConfig, PointSample, SurfelMap};
use lidarsim_core::metrics::{AgreementSets, EvalReport};
use lidarsim_core::object_bank::{BoxLabel, IcpConfig, MeshConfig};
use lidarsim_core::pipeline;
use lidarsim_core::polar_grid::{azimuth_column, bin_real_sweep, Mask, CH_INCIDENCE};
use lidarsim_core::raycast::{CastConfig, SensorIntrinsics};
use lidarsim_core::raydrop::{train, FeatureSpec, TrainConfig};
use lidarsim_core::scene::{compose, Scenario};
use lidarsim_core::synth;
use lidarsim_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lidarsim", version, about = "Surfel-map LiDAR simulator")]
struct Cli {
    /// Seed for every random choice; `simulate` defaults to the scenario's own seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for raycasting and map building (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// CSV of `beam_id,elevation_deg` replacing the default 64-beam table.
    #[arg(long, global = true)]
    intrinsics: Option<PathBuf>,
    #[arg(long, global = true)]
    n_cols: Option<usize>,
    /// +1 counter-clockwise, -1 clockwise.
    #[arg(long, global = true, allow_negative_numbers = true)]
    spin_direction: Option<i8>,
    #[arg(long, global = true)]
    sweep_period: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Aggregate sweeps into a surfel map.
    BuildMap {
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.04)]
        voxel_size: f64,
    },
    /// Reconstruct an object from labeled sweeps and add it to a bank.
    BuildObject {
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
        /// JSON array of box labels, one per sweep.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Simulate one sweep of a scenario.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output prefix; writes `.grid.lgrd`, `.mask.lgrd`, `.lswp`, `.ply` and with a model `.prob.lgrd`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a raydrop model to simulated grids and matching real sweeps.
    TrainRaydrop {
        #[arg(long = "sim")]
        sims: Vec<PathBuf>,
        #[arg(long = "real")]
        reals: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV of the loss after every epoch.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Compare a simulated sweep with a real one.
    Eval {
        /// Sweep (LSWP), mask or feature grid (LGRD).
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// JSON with r_plus, r_minus, s_plus, s_minus label lists.
        #[arg(long)]
        agreement: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write synthetic fixtures.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        /// Static surfel count for `street`.
        #[arg(long, default_value_t = 200_000)]
        surfels: usize,
        /// Number of sweeps for `planes`, `object` and `raydrop`.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Planes,
    Object,
    Street,
    Raydrop,
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Quality(_) => 4,
            Error::Resolution(_) => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    step_size: Option<f64>,
    epochs: Option<usize>,
    batch_cells: Option<usize>,
    window: Option<usize>,
    channels: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot set thread count: {e}")))?;
    }
    let intr = intrinsics(&cli)?;
    match &cli.command {
        Command::BuildMap { sweeps, out, voxel_size } => build_map(sweeps, out, *voxel_size),
        Command::BuildObject { sweeps, labels, bank, id } => build_object(sweeps, labels, bank, id),
        Command::Simulate { scenario, bank, model, out } => {
            let period_flag = cli.sweep_period.is_some();
            simulate(&intr, period_flag, cli.seed, scenario, bank.as_deref(), model.as_deref(), out)
        }
        Command::TrainRaydrop {
            sims,
            reals,
            config,
            out,
            loss_log,
        } => train_raydrop(&intr, cli.seed.unwrap_or(0), sims, reals, config.as_deref(), out, loss_log.as_deref()),
        Command::Eval {
            sim,
            real,
            agreement,
            report,
        } => eval(&intr, sim, real, agreement.as_deref(), report),
        Command::Synth { kind, out, surfels, count } => synth_cmd(*kind, out, *surfels, *count, cli.seed.unwrap_or(0)),
    }
}

fn intrinsics(cli: &Cli) -> Result<SensorIntrinsics, Failure> {
    let mut intr = SensorIntrinsics::default();
    if let Some(path) = &cli.intrinsics {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        intr = intr.with_elevations(SensorIntrinsics::elevations_from_csv(&text)?);
    }
    if let Some(n) = cli.n_cols {
        intr.n_cols = n;
    }
    if let Some(s) = cli.spin_direction {
        intr.spin_direction = s;
    }
    if let Some(p) = cli.sweep_period {
        intr.sweep_period = p;
    }
    intr.validate().map_err(|e| usage(e.to_string()))?;
    Ok(intr)
}

fn load_sweeps(paths: &[PathBuf]) -> Result<Vec<SweepFile>, Failure> {
    paths
        .iter()
        .map(|p| io::load_sweep(p).map_err(|e| with_path(e, p)))
        .collect()
}

fn with_path(e: Error, path: &Path) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn build_map(sweeps: &[PathBuf], out: &Path, voxel_size: f64) -> CmdResult {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(usage("--voxel-size must be positive"));
    }
    let sweeps = load_sweeps(sweeps)?;
    let cfg = MapConfig {
        voxel_size,
        ..Default::default()
    };
    let (map, stats) = pipeline::build_map(&sweeps, &cfg)?;
    io::save_surfels(out, map.surfels())?;
    println!(
        "surfels: {} (from {} points in {} voxels, {} degenerate dropped)",
        map.len(),
        stats.input_points,
        stats.occupied_voxels,
        stats.degenerate
    );
    Ok(())
}

fn build_object(sweeps: &[PathBuf], labels: &Path, bank: &Path, id: &str) -> CmdResult {
    let sweeps = load_sweeps(sweeps)?;
    let labels: Vec<BoxLabel> = io::load_json(labels)?;
    let pairs: Vec<_> = sweeps.into_iter().map(|s| (s.points, s.pose)).collect();
    let built = pipeline::build_object(&pairs, &labels, id, &IcpConfig::default(), &MeshConfig::default())?;
    for (k, r) in &built.icp {
        println!(
            "sweep {k}: icp {} after {} iterations, rmse {:.4}",
            if r.converged { "converged" } else { "stopped" },
            r.iterations,
            r.rmse
        );
    }
    io::save_asset(bank, &built.asset)?;
    println!("asset {id}: {} surfels from {} points", built.asset.surfels.len(), built.points);
    Ok(())
}

fn simulate(
    intr: &SensorIntrinsics,
    period_flag: bool,
    seed: Option<u64>,
    scenario_path: &Path,
    bank: Option<&Path>,
    model: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let text = fs::read_to_string(scenario_path).map_err(|e| with_path(e.into(), scenario_path))?;
    let scenario = Scenario::from_json(&text).map_err(|e| with_path(e, scenario_path))?;
    let mut intr = intr.clone();
    if !period_flag {
        intr.sweep_period = scenario.sweep_period;
    }
    let map_path = scenario_path.parent().unwrap_or(Path::new(".")).join(&scenario.map);
    if !map_path.exists() {
        return Err(Error::Resolution(format!("map {} not found", map_path.display())).into());
    }
    let surfels = io::load_surfels(&map_path).map_err(|e| with_path(e, &map_path))?;
    let map = Arc::new(SurfelMap::new(surfels, 0.0));
    let bank = match bank {
        Some(dir) => io::load_bank(dir)?,
        None => Default::default(),
    };
    let model = model.map(io::load_model).transpose()?;
    let scene = compose(&scenario, map, &bank)?;
    for w in &scene.warnings {
        eprintln!("warning: {w}");
    }
    let sim = pipeline::simulate(
        &scene,
        &intr,
        scenario.sweep_start,
        model.as_ref(),
        seed.unwrap_or(scenario.seed),
        &CastConfig::default(),
    )?;
    let with_ext = |ext: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    io::save_grid(&with_ext(".grid.lgrd"), &GridFile::from_features(&sim.grid))?;
    io::save_grid(&with_ext(".mask.lgrd"), &GridFile::from_mask(&sim.keep))?;
    if let Some(p) = &sim.probabilities {
        io::save_grid(&with_ext(".prob.lgrd"), &GridFile::from_probabilities(p))?;
    }
    io::save_sweep(&with_ext(".lswp"), &sim.sweep)?;
    io::write_atomic(&with_ext(".ply"), ply(&sim.sweep).as_bytes())?;
    println!(
        "rays: {}, returns: {}, masked: {}, points: {}",
        sim.hits.cells.len(),
        sim.grid.occupancy().count(),
        sim.hits.masked.iter().filter(|&&m| m).count(),
        sim.sweep.points.len()
    );
    Ok(())
}

/// ASCII PLY of the sweep in the sensor frame.
fn ply(sweep: &SweepFile) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nproperty uchar laser\nend_header\n",
        sweep.points.len()
    );
    for p in &sweep.points {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            p.position.x as f32, p.position.y as f32, p.position.z as f32, p.intensity as f32, p.laser_id
        );
    }
    s
}

fn train_raydrop(
    intr: &SensorIntrinsics,
    seed: u64,
    sims: &[PathBuf],
    reals: &[PathBuf],
    config: Option<&Path>,
    out: &Path,
    loss_log: Option<&Path>,
) -> CmdResult {
    if sims.is_empty() {
        return Err(usage("at least one --sim/--real pair is required"));
    }
    if sims.len() != reals.len() {
        return Err(usage(format!("{} --sim grids but {} --real sweeps", sims.len(), reals.len())));
    }
    let file: TrainFile = match config {
        Some(p) => io::load_json(p)?,
        None => TrainFile::default(),
    };
    let mut cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    cfg.step_size = file.step_size.unwrap_or(cfg.step_size);
    cfg.epochs = file.epochs.unwrap_or(cfg.epochs);
    cfg.batch_cells = file.batch_cells.unwrap_or(cfg.batch_cells);
    let window = file.window.unwrap_or(cfg.feature_spec.window);
    cfg.feature_spec = match file.channels {
        Some(channels) => FeatureSpec { channels, window },
        None => FeatureSpec::windowed(window),
    };
    let grids = sims
        .iter()
        .map(|p| io::load_grid(p).and_then(GridFile::into_features).map_err(|e| with_path(e, p)))
        .collect::<Result<Vec<_>, _>>()?;
    let reals = load_sweeps(reals)?;
    let pairs = pipeline::training_pairs(grids, &reals, intr)?;
    let outcome = train(&pairs, &cfg)?;
    io::save_model(out, &outcome.model)?;
    if let Some(path) = loss_log {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in outcome.loss_history.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        io::write_atomic(path, csv.as_bytes())?;
    }
    println!(
        "loss {:.6} -> {:.6} over {} epochs",
        outcome.loss_history[0],
        outcome.model.final_loss.unwrap_or(f64::NAN),
        cfg.epochs
    );
    Ok(())
}

/// Occupancy from a sweep, a one-channel mask or an eight-channel feature grid.
fn load_occupancy(path: &Path, intr: &SensorIntrinsics) -> Result<Mask, Failure> {
    let magic = fs::read(path).map_err(|e| with_path(e.into(), path))?;
    let mask = if magic.starts_with(io::SWEEP_MAGIC) {
        let sweep = io::load_sweep(path).map_err(|e| with_path(e, path))?;
        bin_real_sweep(&sweep.points, intr)?.occupancy
    } else {
        let g = io::load_grid(path).map_err(|e| with_path(e, path))?;
        if g.channels == 1 {
            g.into_mask()?
        } else {
            g.into_features()?.occupancy()
        }
    };
    Ok(mask)
}

fn eval(intr: &SensorIntrinsics, sim: &Path, real: &Path, agreement: Option<&Path>, report: &Path) -> CmdResult {
    let sim = load_occupancy(sim, intr)?;
    let real = load_occupancy(real, intr)?;
    let sets: Option<AgreementSets> = agreement.map(io::load_json).transpose()?;
    let r = EvalReport::new(&sim, &real, sets.as_ref())?;
    io::save_json(report, &r)?;
    println!(
        "ratio {:.4}, precision {:.4}, recall {:.4}, iou {:.4}",
        r.point_count_ratio, r.occupancy.precision, r.occupancy.recall, r.occupancy.iou
    );
    Ok(())
}

fn synth_cmd(kind: SynthKind, out: &Path, surfels: usize, count: Option<usize>, seed: u64) -> CmdResult {
    fs::create_dir_all(out).map_err(Error::from)?;
    match kind {
        SynthKind::Planes => {
            for (i, s) in synth::plane_sweeps(count.unwrap_or(3), seed).iter().enumerate() {
                io::save_sweep(&out.join(format!("plane_{i}.lswp")), s)?;
            }
        }
        SynthKind::Object => {
            let (sweeps, labels) = synth::box_object_sweeps(count.unwrap_or(5), seed);
            for (i, s) in sweeps.iter().enumerate() {
                io::save_sweep(&out.join(format!("object_{i}.lswp")), s)?;
            }
            io::save_json(&out.join("labels.json"), &labels)?;
        }
        SynthKind::Street => {
            let map = synth::street_map(surfels, 60.0, seed);
            io::save_surfels(&out.join("map.lsrf"), map.surfels())?;
            for a in synth::street_bank().assets() {
                io::save_asset(&out.join("bank"), a)?;
            }
            io::save_json(&out.join("scenario.json"), &synth::street_scenario("map.lsrf", 1.0, seed))?;
            println!("street map: {} surfels", map.len());
        }
        SynthKind::Raydrop => {
            // Simulated grids paired with "real" sweeps that lose every
            // return steeper than the rule incidence.
            let map = Arc::new(synth::street_map(surfels, 60.0, seed));
            let scenario = synth::street_scenario("map.lsrf", 0.0, seed);
            let scene = compose(&scenario, map, &synth::street_bank())?;
            let n = count.unwrap_or(4);
            let starts: Vec<f64> = (0..n).map(|i| 0.5 + 0.7 * i as f64).collect();
            let intr = SensorIntrinsics::default();
            for (i, &t) in starts.iter().enumerate() {
                let sim = pipeline::simulate(&scene, &intr, t, None, seed, &CastConfig::default())?;
                io::save_grid(&out.join(format!("sim_{i}.lgrd")), &GridFile::from_features(&sim.grid))?;
                let mut real = sim.sweep.clone();
                let grid = &sim.grid;
                let keep = |p: &PointSample| {
                    let col = azimuth_column(&intr, p.position.y.atan2(p.position.x));
                    grid.get(CH_INCIDENCE, p.laser_id as usize, col) <= synth::RULE_INCIDENCE
                };
                real.points.retain(keep);
                io::save_sweep(&out.join(format!("real_{i}.lswp")), &real)?;
            }
        }
    }
    println!("wrote {:?} fixtures to {}", kind, out.display());
    Ok(())
}
