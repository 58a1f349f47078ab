//! `sstage`: train, evaluate, predict, sweep and gradient-check from the shell.
//!
//! Exit codes: 0 success, 1 user or data error, 2 internal invariant violation.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use social_stage::check;
use social_stage::dataset::{self, DatasetName, Scene};
use social_stage::metrics::{self, BestModeRule, MetricsReport, PredictionDump};
use social_stage::model::StageModel;
use social_stage::tensor::Fault;
use social_stage::train::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sstage", version, about = "Multi-modal pedestrian trajectory forecasting")]
struct Cli {
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per mode count and write checkpoints, logs and a sweep report.
    Train {
        #[arg(long)]
        test_set: Option<String>,
        /// Mode counts, e.g. `1,2,3` or `1-20`.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or an existing prediction dump, on a test set.
    Eval {
        #[arg(long, required_unless_present = "dump")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test_set: Option<String>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RuleArg::Oracle)]
        rule: RuleArg,
        /// Directory for predictions.csv and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate this dump instead of running a model.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Predict the futures of one scene file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_file: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare checkpoints with different mode counts on the validation split.
    Sweep {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        test_set: Option<String>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// Where to write the sweep CSV; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the training loss.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Precision::Both)]
        precision: Precision,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    #[value(name = "p_max")]
    PMax,
    Mean,
    Oracle,
}

impl From<RuleArg> for BestModeRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::PMax => BestModeRule::PMax,
            RuleArg::Mean => BestModeRule::Mean,
            RuleArg::Oracle => BestModeRule::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
    Both,
}

/// Failure that maps to exit code 1 without being a library error.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| social_stage::Error::Data(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset_root(cfg: &TrainConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let root = flag
        .clone()
        .or_else(|| cfg.dataset_root.clone())
        .ok_or_else(|| social_stage::Error::Parameter("no dataset root: pass --dataset-root or set dataset_root".into()))?;
    if !root.exists() {
        return Err(social_stage::Error::Data(format!("dataset root {} does not exist", root.display())).into());
    }
    Ok(root)
}

fn read_checkpoint(path: &Path) -> Result<StageModel<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| social_stage::Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    StageModel::from_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| social_stage::Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| social_stage::Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    test_set: &Option<String>,
    modes: &Option<String>,
    out: &Path,
    epochs: Option<usize>,
    root: &Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(t) = test_set {
        cfg.test_set = t.clone();
    }
    if let Some(m) = modes {
        cfg.mode_sweep = train::parse_mode_list(m)?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.dataset_root = Some(dataset_root(&cfg, root)?);
    cfg.validate()?;
    let (data, outcomes) = train::train(&cfg)?;
    create_dir(out)?;
    let select = if data.val.is_empty() { &data.train } else { &data.val };
    let mut entries = Vec::new();
    for o in &outcomes {
        write_file(&out.join(format!("model_m{}.sstg", o.modes)), &o.checkpoint)?;
        let mut log = Vec::new();
        o.log.write_csv(&mut log)?;
        write_file(&out.join(format!("train_log_m{}.csv", o.modes)), log)?;
        print!("{}", train::format_log(&o.log));
        entries.push(train::sweep_entry(&o.best_model()?, select)?);
    }
    let report = train::sweep_report(&entries)?;
    write_file(&out.join("sweep_report.csv"), &report)?;
    let best = train::best_sweep_entry(&entries).expect("non-empty sweep");
    println!("best M = {} (validation ADE_min {:.4})", entries[best].modes, entries[best].oracle.ade_min);
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn test_scenes(cfg: &TrainConfig, test_set: &Option<String>, root: &Option<PathBuf>) -> Result<Vec<Scene>> {
    let name: DatasetName = test_set.as_deref().unwrap_or(&cfg.test_set).parse()?;
    let root = dataset_root(cfg, root)?;
    let scenes = dataset::load_dataset(&root, name, 1)?;
    if scenes.is_empty() {
        bail!(social_stage::Error::Data(format!("no complete scenes in test set {name}")));
    }
    Ok(scenes)
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: &Option<PathBuf>,
    test_set: &Option<String>,
    root: &Option<PathBuf>,
    rule: BestModeRule,
    out: &Option<PathBuf>,
    dump_path: &Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let scenes = test_scenes(&cfg, test_set, root)?;
    let dump = match (dump_path, checkpoint) {
        (Some(path), _) => {
            let f = fs::File::open(path)
                .map_err(|e| social_stage::Error::Data(format!("cannot open dump {}: {e}", path.display())))?;
            PredictionDump::read_csv(f)?
        }
        (None, Some(ckpt)) => train::predict_scenes(&read_checkpoint(ckpt)?, &scenes)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let mut rules = vec![rule];
    for r in [BestModeRule::Oracle, BestModeRule::PMax] {
        if !rules.contains(&r) {
            rules.push(r);
        }
    }
    let reports: Vec<MetricsReport> = rules
        .iter()
        .map(|&r| metrics::evaluate_dataset(&dump, &scenes, r))
        .collect::<social_stage::Result<_>>()?;
    print!("{}", metrics::format_reports(&reports));
    if let Some(dir) = out {
        create_dir(dir)?;
        if dump_path.is_none() {
            let mut buf = Vec::new();
            dump.write_csv(&mut buf)?;
            write_file(&dir.join("predictions.csv"), buf)?;
        }
        let mut buf = Vec::new();
        metrics::write_reports_csv(&reports, &mut buf)?;
        write_file(&dir.join("metrics.csv"), buf)?;
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, scene_file: &Path, plot_path: &Option<PathBuf>, out: &Path) -> Result<()> {
    let model = read_checkpoint(checkpoint)?;
    let records = dataset::load_annotation_file(scene_file)?;
    let history = dataset::history_from_records(&records, model.config().t_in)
        .with_context(|| format!("in scene file {}", scene_file.display()))?;
    let pred = model.predict(&history)?;
    let mut dump = PredictionDump::new();
    dump.push_scene(0, &history, &pred);
    let mut buf = Vec::new();
    dump.write_csv(&mut buf)?;
    write_file(out, buf)?;
    if let Some(path) = plot_path {
        write_file(path, plot::render(&history, &dump.agents))?;
    }
    for a in &dump.agents {
        let probs: Vec<String> = a.probs.iter().map(|p| format!("{p:.3}")).collect();
        println!("agent {}: mode probabilities [{}]", a.agent_id, probs.join(", "));
    }
    Ok(())
}

fn cmd_sweep(
    cli: &Cli,
    checkpoints: &[PathBuf],
    test_set: &Option<String>,
    root: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let name = test_set.as_deref().unwrap_or(&cfg.test_set);
    let split = dataset::make_split(name)?.with_val_fraction(cfg.val_fraction)?;
    let data = dataset::load_split(&dataset_root(&cfg, root)?, &split, 1)?;
    let scenes = if data.val.is_empty() { &data.train } else { &data.val };
    if scenes.is_empty() {
        bail!(social_stage::Error::Data("no validation scenes".into()));
    }
    let entries = checkpoints
        .iter()
        .map(|p| Ok(train::sweep_entry(&read_checkpoint(p)?, scenes)?))
        .collect::<Result<Vec<_>>>()?;
    let report = train::sweep_report(&entries)?;
    match out {
        Some(path) => write_file(path, &report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn cmd_gradcheck(precision: Precision, inject_fault: bool) -> Result<()> {
    let fault = inject_fault.then_some(Fault::FlipConvWeightGrad);
    let mut reports = Vec::new();
    if precision != Precision::F64 {
        reports.push(check::run_suite::<f32>(fault)?);
    }
    if precision != Precision::F32 {
        reports.push(check::run_suite::<f64>(fault)?);
    }
    let mut failures = Vec::new();
    for r in &reports {
        print!("{r}");
        println!(
            "{}: {} entries, max relative error {:.3e} (tolerance {:.0e})",
            r.precision,
            r.checked(),
            r.max_rel_err(),
            if r.precision == "f32" { check::TOL_F32 } else { check::TOL_F64 }
        );
        failures.extend(
            r.failures()
                .map(|l| format!("{} {}: relative error {:.3e}", r.precision, l.name, l.report.max_rel_err)),
        );
    }
    if !failures.is_empty() {
        return Err(CheckFailed(format!("gradient check failed:\n  {}", failures.join("\n  "))).into());
    }
    println!("all gradient checks passed");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train {
            test_set,
            modes,
            out,
            epochs,
            dataset_root,
        } => cmd_train(cli, test_set, modes, out, *epochs, dataset_root),
        Command::Eval {
            checkpoint,
            test_set,
            dataset_root,
            rule,
            out,
            dump,
        } => cmd_eval(cli, checkpoint, test_set, dataset_root, (*rule).into(), out, dump),
        Command::Predict {
            checkpoint,
            scene_file,
            plot,
            out,
        } => {
            load_config(cli)?;
            cmd_predict(checkpoint, scene_file, plot, out)
        }
        Command::Sweep {
            checkpoints,
            test_set,
            dataset_root,
            out,
        } => cmd_sweep(cli, checkpoints, test_set, dataset_root, out),
        Command::Gradcheck {
            precision,
            inject_fault,
        } => {
            load_config(cli)?;
            cmd_gradcheck(*precision, *inject_fault)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use social_stage::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Dimension { .. } | E::Contract(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
