//! Displacement errors, oracle minima, and the diversity (M1) and
//! confidence (M2) metrics, plus the prediction dump format.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array3, ArrayView2, Axis};

use crate::dataset::{History, Scene};
use crate::error::{Error, Result};
use crate::model::{to_absolute, PredictionSet};

/// Mean Euclidean distance over time between `[T, 2]` trajectories.
pub fn ade(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let t = pred.nrows();
    let total: f64 = (0..t)
        .map(|i| (pred[[i, 0]] - gt[[i, 0]]).hypot(pred[[i, 1]] - gt[[i, 1]]))
        .sum();
    total / t as f64
}

/// Euclidean distance at the final step.
pub fn fde(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let t = pred.nrows() - 1;
    (pred[[t, 0]] - gt[[t, 0]]).hypot(pred[[t, 1]] - gt[[t, 1]])
}

/// How the single reported mode of an agent is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BestModeRule {
    /// Most probable mode.
    PMax,
    /// Error of a caller-supplied mean trajectory.
    Mean,
    /// Lowest-error mode.
    Oracle,
}

impl BestModeRule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PMax => "p_max",
            Self::Mean => "mean",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for BestModeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BestModeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_max" | "pmax" => Ok(Self::PMax),
            "mean" => Ok(Self::Mean),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Parameter(format!(
                "unknown rule '{other}' (expected p_max, mean or oracle)"
            ))),
        }
    }
}

/// Per-mode errors of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeErrors {
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub probs: Option<Vec<f64>>,
    /// ADE and FDE of the mean trajectory, for [`BestModeRule::Mean`].
    pub mean: Option<(f64, f64)>,
}

impl ModeErrors {
    pub fn modes(&self) -> usize {
        self.ade.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMode {
    /// `None` when the error comes from outside the mode set.
    pub index: Option<usize>,
    pub error: f64,
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Independent minima over modes of ADE and FDE.
pub fn min_metrics(errors: &ModeErrors) -> (f64, f64) {
    (errors.ade[argmin(&errors.ade)], errors.fde[argmin(&errors.fde)])
}

/// `(sum_i e_i - e_hat) / M`.
pub fn m1(errors: &[f64], e_hat: f64) -> f64 {
    (errors.iter().sum::<f64>() - e_hat) / errors.len() as f64
}

/// `sum_i p_i e_i - p_max e_{p_max}`.
pub fn m2(errors: &[f64], probs: Option<&[f64]>) -> Result<f64> {
    let probs = probs.ok_or_else(|| Error::Contract("M2 needs mode probabilities".into()))?;
    if probs.len() != errors.len() {
        return Err(Error::Contract(format!(
            "{} probabilities for {} modes",
            probs.len(),
            errors.len()
        )));
    }
    let expect: f64 = probs.iter().zip(errors).map(|(p, e)| p * e).sum();
    let top = argmax(probs);
    Ok(expect - probs[top] * errors[top])
}

/// Picks the reported error among `errors` under `rule`. Ties go to the
/// lowest mode index.
pub fn select_best_mode(
    errors: &[f64],
    probs: Option<&[f64]>,
    mean: Option<f64>,
    rule: BestModeRule,
) -> Result<BestMode> {
    match rule {
        BestModeRule::Oracle => {
            let i = argmin(errors);
            Ok(BestMode {
                index: Some(i),
                error: errors[i],
            })
        }
        BestModeRule::PMax => {
            let p = probs.ok_or_else(|| Error::Contract("p_max rule needs mode probabilities".into()))?;
            let i = argmax(p);
            Ok(BestMode {
                index: Some(i),
                error: errors[i],
            })
        }
        BestModeRule::Mean => {
            let e = mean.ok_or_else(|| Error::Contract("mean rule needs a mean-trajectory error".into()))?;
            Ok(BestMode { index: None, error: e })
        }
    }
}

/// Dataset-level summary under one best-mode rule. `ade`/`fde` are the
/// errors of the selected mode; M2 always weighs against the most probable mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rule: BestModeRule,
    pub n_agents: usize,
    pub ade: f64,
    pub fde: f64,
    pub ade_min: f64,
    pub fde_min: f64,
    pub m1_ade: f64,
    pub m1_fde: f64,
    pub m2_ade: f64,
    pub m2_fde: f64,
}

pub const REPORT_HEADER: [&str; 10] = [
    "rule", "n_agents", "ade", "fde", "ade_min", "fde_min", "m1_ade", "m1_fde", "m2_ade", "m2_fde",
];

impl MetricsReport {
    fn fields(&self) -> [f64; 8] {
        [
            self.ade,
            self.fde,
            self.ade_min,
            self.fde_min,
            self.m1_ade,
            self.m1_fde,
            self.m2_ade,
            self.m2_fde,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

pub fn write_reports_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        let mut row = vec![r.rule.to_string(), r.n_agents.to_string()];
        row.extend(r.fields().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of several reports.
pub fn format_reports(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<8}{:>9}", "rule", "agents");
    for h in &REPORT_HEADER[2..] {
        s.push_str(&format!("{h:>10}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{:<8}{:>9}", r.rule.as_str(), r.n_agents));
        for v in r.fields() {
            s.push_str(&format!("{v:>10.4}"));
        }
        s.push('\n');
    }
    s
}

/// Predicted futures of one agent in absolute coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPrediction {
    pub scene_id: u64,
    pub agent_id: i64,
    pub probs: Vec<f64>,
    /// `[M, T_out, 2]`.
    pub trajectories: Array3<f64>,
}

impl AgentPrediction {
    pub fn modes(&self) -> usize {
        self.probs.len()
    }

    /// Mode-averaged trajectory `[T_out, 2]`.
    pub fn mean_trajectory(&self) -> ndarray::Array2<f64> {
        self.trajectories.mean_axis(Axis(0)).expect("at least one mode")
    }

    /// Errors of every mode against a `[T_out, 2]` ground truth.
    pub fn errors(&self, gt: ArrayView2<'_, f64>) -> ModeErrors {
        let modes = self.trajectories.outer_iter();
        let (ade_v, fde_v) = modes.map(|p| (ade(p, gt), fde(p, gt))).unzip();
        let mean = self.mean_trajectory();
        ModeErrors {
            ade: ade_v,
            fde: fde_v,
            probs: Some(self.probs.clone()),
            mean: Some((ade(mean.view(), gt), fde(mean.view(), gt))),
        }
    }
}

/// Every prediction of an evaluation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionDump {
    pub agents: Vec<AgentPrediction>,
}

pub const DUMP_HEADER: [&str; 7] = ["scene_id", "agent_id", "mode", "prob", "t", "x", "y"];

impl PredictionDump {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a scene's predictions, converted to absolute coordinates.
    pub fn push_scene(&mut self, scene_id: u64, history: &History, pred: &PredictionSet) {
        let abs = to_absolute(pred, history);
        let (m, t_out, _, _) = abs.dim();
        for (k, &agent_id) in history.agent_ids.iter().enumerate() {
            let traj = Array3::from_shape_fn((m, t_out, 2), |(mode, t, d)| abs[[mode, t, d, k]]);
            self.agents.push(AgentPrediction {
                scene_id,
                agent_id,
                probs: pred.probs.column(k).to_vec(),
                trajectories: traj,
            });
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(DUMP_HEADER)?;
        for a in &self.agents {
            let (m, t_out, _) = a.trajectories.dim();
            for mode in 0..m {
                for t in 0..t_out {
                    w.write_record([
                        a.scene_id.to_string(),
                        a.agent_id.to_string(),
                        mode.to_string(),
                        a.probs[mode].to_string(),
                        (t + 1).to_string(),
                        a.trajectories[[mode, t, 0]].to_string(),
                        a.trajectories[[mode, t, 1]].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump. Rows may come in any order; every agent must cover
    /// modes `0..M` and steps `1..T` completely.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().ne(DUMP_HEADER) {
            return Err(Error::Data(format!(
                "dump header must be '{}'",
                DUMP_HEADER.join(",")
            )));
        }
        type Row = (usize, f64, usize, f64, f64);
        let mut rows: Vec<((u64, i64), Vec<Row>)> = Vec::new();
        let mut index: HashMap<(u64, i64), usize> = HashMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let bad = |j: usize| Error::Parse {
                line,
                message: format!("invalid {} '{}'", DUMP_HEADER[j], field(j)),
            };
            let scene: u64 = field(0).parse().map_err(|_| bad(0))?;
            let agent: i64 = field(1).parse().map_err(|_| bad(1))?;
            let mode: usize = field(2).parse().map_err(|_| bad(2))?;
            let prob: f64 = field(3).parse().map_err(|_| bad(3))?;
            let t: usize = field(4).parse().map_err(|_| bad(4))?;
            let x: f64 = field(5).parse().map_err(|_| bad(5))?;
            let y: f64 = field(6).parse().map_err(|_| bad(6))?;
            if t == 0 {
                return Err(bad(4));
            }
            let slot = *index.entry((scene, agent)).or_insert_with(|| {
                rows.push(((scene, agent), Vec::new()));
                rows.len() - 1
            });
            rows[slot].1.push((mode, prob, t, x, y));
        }
        let mut agents = Vec::with_capacity(rows.len());
        for ((scene_id, agent_id), pts) in rows {
            let m = pts.iter().map(|p| p.0).max().unwrap() + 1;
            let t_out = pts.iter().map(|p| p.2).max().unwrap();
            let who = format!("scene {scene_id} agent {agent_id}");
            if pts.len() != m * t_out {
                return Err(Error::Data(format!(
                    "{who}: expected {} rows for {m} modes x {t_out} steps, found {}",
                    m * t_out,
                    pts.len()
                )));
            }
            let mut traj = Array3::from_elem((m, t_out, 2), f64::NAN);
            let mut probs = vec![f64::NAN; m];
            for &(mode, prob, t, x, y) in &pts {
                if !traj[[mode, t - 1, 0]].is_nan() {
                    return Err(Error::Data(format!("{who}: duplicate row for mode {mode} step {t}")));
                }
                if !probs[mode].is_nan() && probs[mode] != prob {
                    return Err(Error::Data(format!("{who}: mode {mode} has varying probability")));
                }
                probs[mode] = prob;
                traj[[mode, t - 1, 0]] = x;
                traj[[mode, t - 1, 1]] = y;
            }
            agents.push(AgentPrediction {
                scene_id,
                agent_id,
                probs,
                trajectories: traj,
            });
        }
        Ok(Self { agents })
    }
}

/// Per-agent errors of a dump against the ground-truth scenes, ordered by
/// `(scene_id, agent_id)`.
pub fn agent_errors(dump: &PredictionDump, scenes: &[Scene]) -> Result<Vec<((u64, i64), ModeErrors)>> {
    let lookup: HashMap<(u64, i64), &AgentPrediction> = dump
        .agents
        .iter()
        .map(|a| ((a.scene_id, a.agent_id), a))
        .collect();
    let mut keyed: Vec<((u64, i64), ModeErrors)> = Vec::new();
    let mut modes = None;
    for scene in scenes {
        let future = scene.future();
        for (k, &agent_id) in scene.agent_ids.iter().enumerate() {
            let key = (scene.scene_id, agent_id);
            let pred = lookup.get(&key).ok_or_else(|| {
                Error::Data(format!(
                    "no prediction for scene {} agent {agent_id}",
                    scene.scene_id
                ))
            })?;
            if *modes.get_or_insert(pred.modes()) != pred.modes() {
                return Err(Error::Data(format!(
                    "scene {} agent {agent_id} has {} modes, expected {}",
                    scene.scene_id,
                    pred.modes(),
                    modes.unwrap()
                )));
            }
            let gt = future.index_axis(Axis(0), k);
            if pred.trajectories.shape()[1] != gt.nrows() {
                return Err(Error::Data(format!(
                    "scene {} agent {agent_id} predicts {} steps, ground truth has {}",
                    scene.scene_id,
                    pred.trajectories.shape()[1],
                    gt.nrows()
                )));
            }
            keyed.push((key, pred.errors(gt)));
        }
    }
    keyed.sort_by_key(|(key, _)| *key);
    Ok(keyed)
}

/// Averages per-agent metrics uniformly over every agent of `scenes`.
pub fn evaluate_dataset(dump: &PredictionDump, scenes: &[Scene], rule: BestModeRule) -> Result<MetricsReport> {
    let per_agent = agent_errors(dump, scenes)?;
    summarize(per_agent.iter().map(|(_, e)| e), rule)
}

/// Uniform average of per-agent metrics.
pub fn summarize<'a, I>(errors: I, rule: BestModeRule) -> Result<MetricsReport>
where
    I: IntoIterator<Item = &'a ModeErrors>,
{
    let mut acc = [0.0f64; 8];
    let mut n = 0usize;
    for e in errors {
        let probs = e.probs.as_deref();
        let best_ade = select_best_mode(&e.ade, probs, e.mean.map(|m| m.0), rule)?;
        let best_fde = select_best_mode(&e.fde, probs, e.mean.map(|m| m.1), rule)?;
        let (ade_min, fde_min) = min_metrics(e);
        let row = [
            best_ade.error,
            best_fde.error,
            ade_min,
            fde_min,
            m1(&e.ade, best_ade.error),
            m1(&e.fde, best_fde.error),
            m2(&e.ade, probs)?,
            m2(&e.fde, probs)?,
        ];
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no agents to evaluate".into()));
    }
    let avg = acc.map(|v| v / n as f64);
    Ok(MetricsReport {
        rule,
        n_agents: n,
        ade: avg[0],
        fde: avg[1],
        ade_min: avg[2],
        fde_min: avg[3],
        m1_ade: avg[4],
        m1_fde: avg[5],
        m2_ade: avg[6],
        m2_fde: avg[7],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn errs(ade: &[f64], probs: Option<&[f64]>) -> ModeErrors {
        ModeErrors {
            ade: ade.to_vec(),
            fde: ade.to_vec(),
            probs: probs.map(<[f64]>::to_vec),
            mean: None,
        }
    }

    #[test]
    fn ade_fde_cases() {
        let gt = Array2::zeros((12, 2));
        let mut pred = Array2::zeros((12, 2));
        assert_eq!(ade(pred.view(), gt.view()), 0.0);
        pred.column_mut(0).fill(0.3);
        pred.column_mut(1).fill(0.4);
        assert!((ade(pred.view(), gt.view()) - 0.5).abs() < 1e-15);
        let mut last = Array2::zeros((12, 2));
        last[[11, 1]] = 2.0;
        assert_eq!(fde(last.view(), gt.view()), 2.0);
        assert!((ade(last.view(), gt.view()) - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn min_metrics_cases() {
        assert_eq!(min_metrics(&errs(&[0.7], None)), (0.7, 0.7));
        assert_eq!(min_metrics(&errs(&[1.0, 0.2, 0.5], None)).0, 0.2);
    }

    #[test]
    fn m1_m2_hand_cases() {
        assert_eq!(m1(&[1.0, 3.0], 1.0), 1.5);
        assert_eq!(m2(&[1.0, 3.0], Some(&[0.75, 0.25])).unwrap(), 0.75);
        assert_eq!(m1(&[0.4], 0.4), 0.0);
        assert_eq!(m2(&[0.4], Some(&[1.0])).unwrap(), 0.0);
        assert!((m1(&[0.5; 4], 0.5) - 0.5 * 3.0 / 4.0).abs() < 1e-15);
        assert!(matches!(m2(&[1.0], None), Err(Error::Contract(_))));
    }

    #[test]
    fn best_mode_rules() {
        let e = [0.5, 0.2];
        let b = select_best_mode(&e, Some(&[0.1, 0.9]), None, BestModeRule::PMax).unwrap();
        assert_eq!(b.index, Some(1));
        let b = select_best_mode(&e, None, None, BestModeRule::Oracle).unwrap();
        assert_eq!((b.index, b.error), (Some(1), 0.2));
        let b = select_best_mode(&e, Some(&[0.5, 0.5]), None, BestModeRule::PMax).unwrap();
        assert_eq!(b.index, Some(0));
        assert!(select_best_mode(&e, None, None, BestModeRule::PMax).is_err());
        assert!(select_best_mode(&e, None, None, BestModeRule::Mean).is_err());
        let b = select_best_mode(&e, None, Some(0.3), BestModeRule::Mean).unwrap();
        assert_eq!((b.index, b.error), (None, 0.3));
    }

    #[test]
    fn rule_names_round_trip() {
        for r in [BestModeRule::PMax, BestModeRule::Mean, BestModeRule::Oracle] {
            assert_eq!(r.as_str().parse::<BestModeRule>().unwrap(), r);
        }
        assert!("best".parse::<BestModeRule>().is_err());
    }

    fn scene(id: u64, agents: &[i64], fill: f64) -> Scene {
        Scene {
            scene_id: id,
            agent_ids: agents.to_vec(),
            positions: Array3::from_elem((agents.len(), 20, 2), fill),
            source_set: None,
            start_frame: 0,
            frame_step: 10,
            t_in: 8,
        }
    }

    fn constant_pred(id: u64, agent: i64, offsets: &[f64], probs: &[f64]) -> AgentPrediction {
        let m = offsets.len();
        AgentPrediction {
            scene_id: id,
            agent_id: agent,
            probs: probs.to_vec(),
            trajectories: Array3::from_shape_fn((m, 12, 2), |(mode, _, d)| if d == 0 { offsets[mode] } else { 0.0 }),
        }
    }

    #[test]
    fn dataset_average_over_agents() {
        let scenes = [scene(0, &[1, 2], 0.0)];
        let dump = PredictionDump {
            agents: vec![
                constant_pred(0, 1, &[0.2], &[1.0]),
                constant_pred(0, 2, &[0.4], &[1.0]),
            ],
        };
        let r = evaluate_dataset(&dump, &scenes, BestModeRule::PMax).unwrap();
        assert_eq!(r.n_agents, 2);
        assert!((r.ade - 0.3).abs() < 1e-15);
        assert_eq!((r.m1_ade, r.m2_ade), (0.0, 0.0));
    }

    #[test]
    fn perfect_prediction_is_all_zero() {
        let scenes = [scene(3, &[7], 0.0)];
        let dump = PredictionDump {
            agents: vec![constant_pred(3, 7, &[0.0, 0.0], &[0.3, 0.7])],
        };
        for rule in [BestModeRule::PMax, BestModeRule::Mean, BestModeRule::Oracle] {
            let r = evaluate_dataset(&dump, &scenes, rule).unwrap();
            assert_eq!(r.fields(), [0.0; 8]);
        }
    }

    #[test]
    fn missing_agent_is_named() {
        let scenes = [scene(4, &[1, 9], 0.0)];
        let dump = PredictionDump {
            agents: vec![constant_pred(4, 1, &[0.0], &[1.0])],
        };
        let err = evaluate_dataset(&dump, &scenes, BestModeRule::Oracle).unwrap_err();
        assert!(err.to_string().contains("scene 4 agent 9"), "{err}");
    }

    #[test]
    fn dump_round_trip_and_header() {
        let dump = PredictionDump {
            agents: vec![
                constant_pred(0, 1, &[0.1, -2.5], &[0.25, 0.75]),
                constant_pred(1, -3, &[1e-17, 3.0], &[0.5, 0.5]),
            ],
        };
        let mut buf = Vec::new();
        dump.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scene_id,agent_id,mode,prob,t,x,y\n0,1,0,0.25,1,0.1,0\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 12);
        assert_eq!(PredictionDump::read_csv(&buf[..]).unwrap(), dump);
    }

    #[test]
    fn dump_rejects_incomplete_agents() {
        let text = "scene_id,agent_id,mode,prob,t,x,y\n0,1,0,1,1,0,0\n0,1,0,1,3,0,0\n";
        assert!(PredictionDump::read_csv(text.as_bytes()).is_err());
        let text = "scene,agent\n";
        assert!(PredictionDump::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn push_scene_uses_absolute_positions() {
        let history = History {
            agent_ids: vec![5],
            positions: Array3::from_elem((1, 8, 2), 1.0),
        };
        let pred = PredictionSet {
            displacements: ndarray::Array4::from_elem((1, 12, 2, 1), 0.5),
            probs: array![[1.0]],
        };
        let mut dump = PredictionDump::new();
        dump.push_scene(2, &history, &pred);
        let a = &dump.agents[0];
        assert_eq!((a.scene_id, a.agent_id), (2, 5));
        assert_eq!(a.trajectories[[0, 0, 0]], 1.5);
        assert_eq!(a.trajectories[[0, 11, 1]], 7.0);
    }
}
