//! Training loop, configuration file, logs and the mode-count sweep.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, Scene};
use crate::error::{Error, Result};
use crate::graph::{self, GraphSequence};
use crate::losses::{self, RegNorm};
use crate::metrics::{self, BestModeRule, MetricsReport, PredictionDump};
use crate::model::{ModelConfig, StageModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Mode, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub mode_sweep: Vec<usize>,
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,
    pub test_set: String,
    pub optimizer: OptimizerKind,
    pub dropout_rate: f64,
    pub val_fraction: f64,
    /// Scenes whose gradients are summed before each update.
    pub accumulate: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            mode_sweep: vec![2],
            seed: 0,
            dataset_root: None,
            test_set: "eth".into(),
            optimizer: OptimizerKind::Adam,
            dropout_rate: 0.1,
            val_fraction: dataset::DEFAULT_VAL_FRACTION,
            accumulate: 1,
        }
    }
}

/// Parses a comma-separated mode list; `a-b` ranges are allowed.
pub fn parse_mode_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parameter(format!("invalid mode count '{s}'")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(Error::Parameter(format!("empty mode range '{part}'")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err(Error::Parameter("mode list is empty".into()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Reads `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Parameter(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "modes" => self.mode_sweep = parse_mode_list(value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "test_set" => self.test_set = value.to_string(),
            "optimizer" => self.optimizer = value.parse()?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "accumulate" => self.accumulate = num(key, value)?,
            other => return Err(Error::Parameter(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.mode_sweep.is_empty() || self.mode_sweep.contains(&0) {
            return Err(Error::Parameter("every mode count must be at least 1".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Parameter("accumulate must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter("dropout_rate must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Parameter("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Seed of the run for `modes`, distinct per mode count.
    pub fn run_seed(&self, modes: usize) -> u64 {
        dataset::splitmix64(self.seed ^ (modes as u64).wrapping_mul(0xA24B_AED4_963E_E407))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-scene averages of the training loss terms.
    pub loss_total: f64,
    pub loss_reg: f64,
    pub loss_ce: f64,
    pub val_ade_min: f64,
    pub val_fde_min: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub modes: usize,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation ADE_min.
    pub best_epoch: usize,
}

pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "epoch", "loss_total", "loss_reg", "loss_ce", "val_ade_min", "val_fde_min", "wall_secs", "best",
];

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAIN_LOG_HEADER)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.loss_total.to_string(),
                e.loss_reg.to_string(),
                e.loss_ce.to_string(),
                e.val_ade_min.to_string(),
                e.val_fde_min.to_string(),
                format!("{:.3}", e.wall_secs),
                u8::from(e.epoch == self.best_epoch).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The log without wall-clock times, which differ between identical runs.
    pub fn deterministic_part(&self) -> Vec<[u64; 6]> {
        self.epochs
            .iter()
            .map(|e| {
                [
                    e.epoch as u64,
                    e.loss_total.to_bits(),
                    e.loss_reg.to_bits(),
                    e.loss_ce.to_bits(),
                    e.val_ade_min.to_bits(),
                    e.val_fde_min.to_bits(),
                ]
            })
            .collect()
    }
}

/// Result of training one mode count.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub modes: usize,
    pub log: TrainLog,
    /// Checkpoint of the best epoch.
    pub checkpoint: Vec<u8>,
    /// Model after the last epoch.
    pub final_model: StageModel<f32>,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Result<StageModel<f32>> {
        StageModel::from_checkpoint(&self.checkpoint)
    }
}

/// Eval-mode predictions for every scene.
pub fn predict_scenes(model: &StageModel<f32>, scenes: &[Scene]) -> Result<PredictionDump> {
    let mut dump = PredictionDump::new();
    for s in scenes {
        let h = s.history();
        let pred = model.predict(&h)?;
        dump.push_scene(s.scene_id, &h, &pred);
    }
    Ok(dump)
}

pub fn evaluate_model(model: &StageModel<f32>, scenes: &[Scene], rule: BestModeRule) -> Result<MetricsReport> {
    metrics::evaluate_dataset(&predict_scenes(model, scenes)?, scenes, rule)
}

/// Trains one model per entry of `mode_sweep` on already loaded scenes.
/// With an empty validation list, model selection uses the training scenes.
pub fn train_scenes(cfg: &TrainConfig, train: &[Scene], val: &[Scene]) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    cfg.mode_sweep
        .iter()
        .map(|&m| train_modes(cfg, m, train, val))
        .collect()
}

/// Loads the configured split and trains every mode count.
pub fn train(cfg: &TrainConfig) -> Result<(dataset::SplitData, Vec<TrainOutcome>)> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Parameter("dataset_root is not set".into()))?;
    if !root.exists() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let split = dataset::make_split(&cfg.test_set)?.with_val_fraction(cfg.val_fraction)?;
    let data = dataset::load_split(root, &split, 1)?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("no training scenes under {}", root.display())));
    }
    let outcomes = train_scenes(cfg, &data.train, &data.val)?;
    Ok((data, outcomes))
}

pub fn train_modes(cfg: &TrainConfig, modes: usize, train: &[Scene], val: &[Scene]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let seed = cfg.run_seed(modes);
    let model_cfg = ModelConfig {
        modes,
        dropout_rate: cfg.dropout_rate,
        ..ModelConfig::default()
    };
    let mut model = StageModel::<f32>::new(model_cfg, seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let graphs: Vec<GraphSequence> = train.iter().map(|s| graph::build(&s.history())).collect();
    let futures: Vec<_> = train.iter().map(losses::future_tdk).collect();
    let histories: Vec<_> = train.iter().map(Scene::history).collect();

    let mut log = TrainLog {
        modes,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut pending = 0usize;
        model.zero_grad();
        for (n, &i) in order.iter().enumerate() {
            let mut pass = model.forward_on(Tape::new(), &graphs[i], Mode::Train, &mut rng)?;
            let (loss, br) = losses::total_loss(
                &mut pass.tape,
                pass.displacements,
                pass.probs,
                &histories[i],
                futures[i].view(),
                RegNorm::Stacked,
            )?;
            if !br.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "M={modes}: non-finite loss at epoch {epoch}, scene {}",
                    train[i].scene_id
                )));
            }
            pass.tape.backward(loss)?;
            model.absorb(&pass);
            sums[0] += br.total;
            sums[1] += br.l_reg_min;
            sums[2] += br.l_ce;
            pending += 1;
            if pending == cfg.accumulate || n + 1 == order.len() {
                opt.step(model.params_mut(), 1.0 / pending as f64);
                model.zero_grad();
                pending = 0;
            }
        }
        let report = evaluate_model(&model, val, BestModeRule::Oracle)?;
        let n = train.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss_total: sums[0] / n,
            loss_reg: sums[1] / n,
            loss_ce: sums[2] / n,
            val_ade_min: report.ade_min,
            val_fde_min: report.fde_min,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| report.ade_min < *b) {
            best = Some((report.ade_min, model.to_checkpoint()));
            log.best_epoch = epoch;
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        modes,
        log,
        checkpoint,
        final_model: model,
    })
}

/// Validation results of one mode count.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub modes: usize,
    pub oracle: MetricsReport,
    pub p_max: MetricsReport,
}

pub const SWEEP_HEADER: [&str; 10] = [
    "modes", "ade_min", "fde_min", "ade_pmax", "fde_pmax", "m1_ade", "m1_fde", "m2_ade", "m2_fde", "best",
];

/// Index of the entry with the lowest ADE_min (first on ties).
pub fn best_sweep_entry(entries: &[SweepEntry]) -> Option<usize> {
    (0..entries.len()).reduce(|b, i| {
        if entries[i].oracle.ade_min < entries[b].oracle.ade_min {
            i
        } else {
            b
        }
    })
}

/// Metric-versus-M table; M1 uses the oracle mode and the best M is flagged.
pub fn sweep_report(entries: &[SweepEntry]) -> Result<String> {
    let best = best_sweep_entry(entries).ok_or_else(|| Error::Contract("empty sweep".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for (i, e) in entries.iter().enumerate() {
        w.write_record([
            e.modes.to_string(),
            e.oracle.ade_min.to_string(),
            e.oracle.fde_min.to_string(),
            e.p_max.ade.to_string(),
            e.p_max.fde.to_string(),
            e.oracle.m1_ade.to_string(),
            e.oracle.m1_fde.to_string(),
            e.oracle.m2_ade.to_string(),
            e.oracle.m2_fde.to_string(),
            u8::from(i == best).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Evaluates each checkpointed model on `scenes` under both rules.
pub fn sweep_entry(model: &StageModel<f32>, scenes: &[Scene]) -> Result<SweepEntry> {
    let dump = predict_scenes(model, scenes)?;
    Ok(SweepEntry {
        modes: model.config().modes,
        oracle: metrics::evaluate_dataset(&dump, scenes, BestModeRule::Oracle)?,
        p_max: metrics::evaluate_dataset(&dump, scenes, BestModeRule::PMax)?,
    })
}

/// One-line summary per epoch.
pub fn format_log(log: &TrainLog) -> String {
    let mut s = String::new();
    for e in &log.epochs {
        let star = if e.epoch == log.best_epoch { " *" } else { "" };
        let _ = writeln!(
            s,
            "M={} epoch {:>3}  loss {:.4} (reg {:.4}, ce {:.4})  val ADE_min {:.4} FDE_min {:.4}{star}",
            log.modes, e.epoch, e.loss_total, e.loss_reg, e.loss_ce, e.val_ade_min, e.val_fde_min
        );
    }
    s
}
