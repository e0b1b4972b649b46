//! Command-line front end.
//!
//! Five verbs cover the pipeline: `generate` renders scenes to voxel
//! files, `train` fits a model and writes a checkpoint, `eval` scores a
//! checkpoint, `ablate` sweeps component subsets, and `corrupt-eval`
//! scores robustness to photometric corruptions. Exit codes: 0 on
//! success, 2 for configuration or usage problems, 3 for numeric
//! failures such as a non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{annotate, AblationFlags, ModelConfig};
use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::dsaf::FusionStrategy;
use crate::error::{Error, Result};
use crate::scene::io::save_grid;
use crate::scene::{generate_scene, voxelize_labels};
use crate::train::{build_dataset, evaluate, smoothed_endpoints, train, EVAL_RANGES};

#[derive(Parser)]
#[command(
    name = "cdscene",
    version,
    about = "Camera-based semantic scene completion on synthetic stereo video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes and write their voxel label grids.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a loss history.
    Train(TrainArgs),
    /// Score a checkpoint, whole-grid and per range crop.
    Eval(EvalArgs),
    /// Train each requested component subset and print a comparison table.
    Ablate(AblateArgs),
    /// Score a checkpoint under photometric corruptions.
    CorruptEval(CorruptEvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Base seed; scene i uses seed + 7919 * i.
    #[arg(long)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to write.
    #[arg(long)]
    scenes: usize,
    /// Config controlling grid, classes and scene content; defaults to
    /// the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model and training config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.bin and history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Total optimizer-step budget; the schedule spans this many steps.
    #[arg(long)]
    steps: u64,
    /// Seed for the rendered training scenes.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    /// Pause after this absolute step; the checkpoint can later be
    /// resumed toward the same --steps budget.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Checkpoint written by an earlier paused run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of evaluation scenes.
    #[arg(long)]
    scenes: usize,
    /// Range crops in meters, comma separated.
    #[arg(long, value_delimiter = ',')]
    ranges: Option<Vec<f64>>,
    /// Scene seed; the default matches `train`, so by default this
    /// scores the fit on the training scenes.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Component subsets to train, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "baseline,a,b,c,d,e")]
    rows: Vec<String>,
    /// Optimizer steps per run.
    #[arg(long)]
    steps: u64,
    /// Also sweep volume-fusion strategies with every component on.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Also sweep temporal frame counts with every component on.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Base config; defaults to the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the rendered training scenes.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
}

#[derive(Args)]
struct CorruptEvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corruption families, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "brightness,contrast,dark")]
    types: Vec<String>,
    /// Severity levels, comma separated; allowed values are 1, 3, 5.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    severities: Vec<u8>,
    /// Number of evaluation scenes.
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Seed for the rendered evaluation scenes.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::CorruptEval(args) => run_corrupt_eval(args),
    }
}

fn load_config_or_default(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p),
        None => Ok(ModelConfig::toy()),
    }
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| annotate(e, path))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    if args.scenes == 0 {
        return Err(Error::Invalid("--scenes must be at least 1".into()));
    }
    let config = load_config_or_default(&args.config)?;
    config.validate()?;
    let spec = config.grid_spec()?;
    let classes = config.class_set()?;
    make_dir(&args.out)?;
    for i in 0..args.scenes {
        let seed = args.seed.wrapping_add(7919 * i as u64);
        let scene = generate_scene(
            seed,
            &spec,
            &classes,
            config.net.n_frames,
            config.train.boxes_per_scene,
        )?;
        let grid = voxelize_labels(&scene, &spec, 0);
        let path = args.out.join(format!("scene_{i:03}.vox"));
        save_grid(&grid, &spec, classes.count() as u16, &path)?;
        let occupied = grid.labels.iter().filter(|&&l| l != 0).count();
        println!(
            "wrote {} ({} of {} voxels occupied)",
            path.display(),
            occupied,
            grid.labels.len()
        );
    }
    Ok(())
}

fn write_history_csv(path: &Path, history: &[crate::losses::LossReport]) -> Result<()> {
    let mut csv = String::from(
        "step,scal_sem,scal_geo,ce,depth_d,depth_s,point_ce,point_lovasz,total\n",
    );
    for (i, r) in history.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i, r.scal_sem, r.scal_geo, r.ce, r.depth_d, r.depth_s, r.point_ce, r.point_lovasz,
            r.total
        ));
    }
    fs::write(path, csv).map_err(|e| annotate(e, path))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let result = train(
        &config,
        args.data_seed,
        args.steps,
        args.stop_after,
        resume.as_ref(),
    )?;
    make_dir(&args.out)?;
    let ck_path = args.out.join("checkpoint.bin");
    result.checkpoint.save(&ck_path)?;
    write_history_csv(&args.out.join("history.csv"), &result.history)?;

    let n = result.history.len();
    let stride = (n / 10).max(1);
    for (i, r) in result.history.iter().enumerate() {
        if i % stride == 0 || i + 1 == n {
            println!("step {:>5}  total {:.6}", result.checkpoint.step as usize - n + i, r.total);
        }
    }
    if n >= 2 {
        let (head, tail) = smoothed_endpoints(&result.history, 10.min(n / 2).max(1));
        println!("smoothed loss {head:.6} -> {tail:.6}");
    }
    println!(
        "checkpoint at step {} written to {}",
        result.checkpoint.step,
        ck_path.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    if args.scenes == 0 {
        return Err(Error::Invalid("--scenes must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let ranges = args.ranges.clone().unwrap_or_else(|| EVAL_RANGES.to_vec());
    if ranges.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Invalid(format!(
            "ranges must be positive and finite, got {ranges:?}"
        )));
    }
    let mut data_cfg = ck.config.clone();
    data_cfg.train.scenes = args.scenes;
    let data = build_dataset(&data_cfg, args.data_seed)?;
    let outcome = evaluate(&model, &data, &ranges, None)?;
    for line in outcome.lines(&ck.config)? {
        println!("{line}");
    }
    Ok(())
}

/// Pads every cell to its column width and separates the header row.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for i in 0..cols {
            if i > 0 {
                line.push_str("  ");
            }
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            line.push_str(&format!("{cell:<width$}", width = widths[i]));
        }
        line.trim_end().to_string()
    };
    let header: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    let mut out = fmt_row(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    for row in rows {
        out.push('\n');
        out.push_str(&fmt_row(row));
    }
    out
}

fn flag_mark(on: bool) -> String {
    if on { "x".into() } else { "".into() }
}

struct SweepRun {
    variant: String,
    flags: AblationFlags,
    config: ModelConfig,
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    if args.steps == 0 {
        return Err(Error::Invalid("--steps must be at least 1".into()));
    }
    let base = load_config_or_default(&args.config)?;
    base.validate()?;

    let mut runs: Vec<SweepRun> = Vec::new();
    for name in &args.rows {
        let flags = AblationFlags::row(name)?;
        let mut config = base.clone();
        config.flags = flags;
        runs.push(SweepRun {
            variant: name.clone(),
            flags,
            config,
        });
    }
    for name in args.strategies.as_deref().unwrap_or(&[]) {
        let strategy = FusionStrategy::parse(name)?;
        let mut config = base.clone();
        config.flags = AblationFlags::default();
        config.fusion = strategy;
        runs.push(SweepRun {
            variant: format!("fusion={}", strategy.name()),
            flags: config.flags,
            config,
        });
    }
    for &n in args.frames.as_deref().unwrap_or(&[]) {
        let mut config = base.clone();
        config.flags = AblationFlags::default();
        config.net.n_frames = n;
        runs.push(SweepRun {
            variant: format!("frames={n}"),
            flags: config.flags,
            config,
        });
    }
    if runs.is_empty() {
        return Err(Error::Invalid("nothing to run: no rows given".into()));
    }

    let mut table: Vec<Vec<String>> = Vec::new();
    for run in &runs {
        run.config.validate()?;
        let result = train(&run.config, args.data_seed, args.steps, None, None)?;
        let window = 10.min(result.history.len() / 2).max(1);
        let (head, tail) = smoothed_endpoints(&result.history, window);
        let model = result.checkpoint.model()?;
        let data = build_dataset(&run.config, args.data_seed)?;
        let outcome = evaluate(&model, &data, &[], None)?;
        table.push(vec![
            run.variant.clone(),
            flag_mark(run.flags.use_lmms),
            flag_mark(run.flags.use_dynamic),
            flag_mark(run.flags.use_static),
            flag_mark(run.flags.use_dsaf),
            format!("{head:.4}"),
            format!("{tail:.4}"),
            format!("{:.4}", outcome.full.miou),
            format!("{:.4}", outcome.full.geo_iou),
        ]);
    }
    println!(
        "{}",
        render_table(
            &[
                "variant", "lmms", "dyna", "stat", "dsaf", "loss[0]", "loss[-1]", "miou",
                "geo_iou",
            ],
            &table,
        )
    );
    Ok(())
}

fn run_corrupt_eval(args: CorruptEvalArgs) -> Result<()> {
    if args.scenes == 0 {
        return Err(Error::Invalid("--scenes must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let mut data_cfg = ck.config.clone();
    data_cfg.train.scenes = args.scenes;
    let data = build_dataset(&data_cfg, args.data_seed)?;

    let clean = evaluate(&model, &data, &[], None)?;
    let mut table = vec![vec![
        "clean".to_string(),
        "-".to_string(),
        format!("{:.4}", clean.full.miou),
        format!("{:.4}", clean.full.geo_iou),
        format!("{:+.4}", 0.0),
    ]];
    for name in &args.types {
        let kind = CorruptionKind::parse(name)?;
        for &severity in &args.severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let outcome = evaluate(&model, &data, &[], Some(spec))?;
            table.push(vec![
                kind.name().to_string(),
                severity.to_string(),
                format!("{:.4}", outcome.full.miou),
                format!("{:.4}", outcome.full.geo_iou),
                format!("{:+.4}", outcome.full.miou - clean.full.miou),
            ]);
        }
    }
    println!(
        "{}",
        render_table(&["corruption", "severity", "miou", "geo_iou", "delta"], &table)
    );
    Ok(())
}
