//! Annotation parsing, scene windowing and leave-one-out splits.
//!
//! Annotation files hold one `frame_id agent_id x y` record per line
//! (whitespace separated, `#` comments allowed). Scenes are windows of
//! `t_in + t_out` consecutive sampled frames containing only agents that are
//! present in every frame of the window.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

pub const T_IN: usize = 8;
pub const T_OUT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationRecord {
    pub frame_id: i64,
    pub agent_id: i64,
    pub x: f64,
    pub y: f64,
}

/// The five ETH/UCY sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetName {
    Eth,
    Hotel,
    Univ,
    Zara1,
    Zara2,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [
        DatasetName::Eth,
        DatasetName::Hotel,
        DatasetName::Univ,
        DatasetName::Zara1,
        DatasetName::Zara2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Eth => "eth",
            DatasetName::Hotel => "hotel",
            DatasetName::Univ => "univ",
            DatasetName::Zara1 => "zara1",
            DatasetName::Zara2 => "zara2",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown dataset '{s}', expected one of eth, hotel, univ, zara1, zara2"
                ))
            })
    }
}

/// A window of co-present agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    /// Sorted ascending; row `k` of `positions` belongs to `agent_ids[k]`.
    pub agent_ids: Vec<i64>,
    /// `[K, t_in + t_out, 2]`, meters.
    pub positions: Array3<f64>,
    pub source_set: Option<DatasetName>,
    pub start_frame: i64,
    /// Native frame gap between consecutive samples.
    pub frame_step: i64,
    pub t_in: usize,
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn t_out(&self) -> usize {
        self.positions.shape()[1] - self.t_in
    }

    pub fn observed(&self) -> ArrayView3<'_, f64> {
        self.positions.slice(s![.., ..self.t_in, ..])
    }

    /// Ground-truth future, `[K, t_out, 2]`.
    pub fn future(&self) -> ArrayView3<'_, f64> {
        self.positions.slice(s![.., self.t_in.., ..])
    }

    pub fn history(&self) -> History {
        History {
            agent_ids: self.agent_ids.clone(),
            positions: self.observed().to_owned(),
        }
    }

    /// Annotation lines that parse back into this scene.
    pub fn to_annotation_lines(&self) -> String {
        let mut out = String::new();
        let steps = self.positions.shape()[1];
        for t in 0..steps {
            let frame = self.start_frame + t as i64 * self.frame_step;
            for (k, id) in self.agent_ids.iter().enumerate() {
                let (x, y) = (self.positions[[k, t, 0]], self.positions[[k, t, 1]]);
                out.push_str(&format!("{frame}\t{id}\t{x:?}\t{y:?}\n"));
            }
        }
        out
    }
}

/// Observed positions only, `[K, t_in, 2]`; the model's input.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub agent_ids: Vec<i64>,
    pub positions: Array3<f64>,
}

impl History {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last observed position of agent `k`.
    pub fn last(&self, k: usize) -> [f64; 2] {
        let t = self.len() - 1;
        [self.positions[[k, t, 0]], self.positions[[k, t, 1]]]
    }
}

fn parse_int(field: &str, what: &str, line: usize) -> Result<i64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} '{field}' is not a number"),
    })?;
    if !v.is_finite() || v.fract() != 0.0 || v.abs() > 9.007_199_254_740_992e15 {
        return Err(Error::Parse {
            line,
            message: format!("{what} '{field}' is not an integer"),
        });
    }
    Ok(v as i64)
}

fn parse_coord(field: &str, what: &str, line: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("{what} '{field}' is not a finite number"),
        }),
    }
}

/// Parses annotation text. Records come back sorted by `(frame_id, agent_id)`.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields (frame agent x y), found {}", fields.len()),
            });
        }
        records.push(AnnotationRecord {
            frame_id: parse_int(fields[0], "frame id", lineno)?,
            agent_id: parse_int(fields[1], "agent id", lineno)?,
            x: parse_coord(fields[2], "x", lineno)?,
            y: parse_coord(fields[3], "y", lineno)?,
        });
    }
    records.sort_by_key(|r| (r.frame_id, r.agent_id));
    if let Some(w) = records
        .windows(2)
        .find(|w| (w[0].frame_id, w[0].agent_id) == (w[1].frame_id, w[1].agent_id))
    {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "duplicate record for frame {} agent {}",
                w[0].frame_id, w[0].agent_id
            ),
        });
    }
    Ok(records)
}

pub fn parse_annotations_str(text: &str) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(text.as_bytes())
}

/// Smallest positive gap between consecutive distinct frames.
fn frame_step(frames: &[i64]) -> Option<i64> {
    frames.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0).min()
}

/// Slides a `t_in + t_out` window over the sampled frame timeline.
///
/// A stride of 0 is treated as 1. Windows without any fully-present agent
/// are dropped; scene ids count emitted scenes from 0.
pub fn build_scenes(
    records: &[AnnotationRecord],
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Vec<Scene> {
    let seq_len = t_in + t_out;
    let stride = stride.max(1);
    let mut by_frame: BTreeMap<i64, HashMap<i64, [f64; 2]>> = BTreeMap::new();
    for r in records {
        by_frame
            .entry(r.frame_id)
            .or_default()
            .insert(r.agent_id, [r.x, r.y]);
    }
    let frames: Vec<i64> = by_frame.keys().copied().collect();
    let (Some(&first), Some(&last), Some(step)) = (frames.first(), frames.last(), frame_step(&frames))
    else {
        return Vec::new();
    };
    let timeline: Vec<i64> = (0..)
        .map(|i| first + i * step)
        .take_while(|&f| f <= last)
        .collect();
    let empty = HashMap::new();

    let mut scenes = Vec::new();
    let mut start = 0;
    while start + seq_len <= timeline.len() {
        let window = &timeline[start..start + seq_len];
        let at = |f: i64| by_frame.get(&f).unwrap_or(&empty);
        let mut agents: Vec<i64> = at(window[0])
            .keys()
            .copied()
            .filter(|id| window.iter().all(|&f| at(f).contains_key(id)))
            .collect();
        agents.sort_unstable();
        if !agents.is_empty() {
            let mut positions = Array3::zeros((agents.len(), seq_len, 2));
            for (k, id) in agents.iter().enumerate() {
                for (t, &f) in window.iter().enumerate() {
                    let p = at(f)[id];
                    positions[[k, t, 0]] = p[0];
                    positions[[k, t, 1]] = p[1];
                }
            }
            scenes.push(Scene {
                scene_id: scenes.len() as u64,
                agent_ids: agents,
                positions,
                source_set: None,
                start_frame: window[0],
                frame_step: step,
                t_in,
            });
        }
        start += stride;
    }
    scenes
}

/// Observation window for inference: the last `t_in` frames of the
/// records, restricted to agents present in all of them.
pub fn history_from_records(records: &[AnnotationRecord], t_in: usize) -> Result<History> {
    let mut by_frame: BTreeMap<i64, HashMap<i64, [f64; 2]>> = BTreeMap::new();
    for r in records {
        by_frame
            .entry(r.frame_id)
            .or_default()
            .insert(r.agent_id, [r.x, r.y]);
    }
    if by_frame.len() < t_in {
        return Err(Error::Data(format!(
            "scene has {} frames, at least {t_in} are needed",
            by_frame.len()
        )));
    }
    let window: Vec<&HashMap<i64, [f64; 2]>> = by_frame.values().skip(by_frame.len() - t_in).collect();
    let mut agents: Vec<i64> = window[0]
        .keys()
        .copied()
        .filter(|id| window.iter().all(|f| f.contains_key(id)))
        .collect();
    agents.sort_unstable();
    if agents.is_empty() {
        return Err(Error::Data(format!(
            "no agent is present in all of the last {t_in} frames"
        )));
    }
    let positions = Array3::from_shape_fn((agents.len(), t_in, 2), |(k, t, d)| {
        window[t][&agents[k]][d]
    });
    Ok(History {
        agent_ids: agents,
        positions,
    })
}

/// Leave-one-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub test_set: DatasetName,
    pub train_sets: Vec<DatasetName>,
    pub val_sets: Vec<DatasetName>,
    /// Fraction of the training-set scenes held out for validation.
    pub val_fraction: f64,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

pub fn make_split(test_set_name: &str) -> Result<SplitSpec> {
    let test_set: DatasetName = test_set_name.parse()?;
    let rest: Vec<DatasetName> = DatasetName::ALL
        .into_iter()
        .filter(|&d| d != test_set)
        .collect();
    Ok(SplitSpec {
        test_set,
        train_sets: rest.clone(),
        val_sets: rest,
        val_fraction: DEFAULT_VAL_FRACTION,
    })
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitSpec {
    pub fn with_val_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Parameter(format!(
                "validation fraction {fraction} outside [0, 1)"
            )));
        }
        self.val_fraction = fraction;
        Ok(self)
    }

    /// Deterministic hash-based holdout keyed on `(source_set, scene_id)`.
    pub fn is_validation(&self, scene: &Scene) -> bool {
        let set = scene.source_set.map_or(0, |d| d as u64 + 1);
        let h = splitmix64(splitmix64(set) ^ scene.scene_id);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        u < self.val_fraction
    }
}

/// Scenes of one split.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Annotation files of one set: `<root>/<name>/*.txt` (sorted) or `<root>/<name>.txt`.
pub fn dataset_files(root: &Path, name: DatasetName) -> Result<Vec<PathBuf>> {
    let dir = root.join(name.as_str());
    if dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .txt files in {}", dir.display())));
        }
        return Ok(files);
    }
    let file = root.join(format!("{}.txt", name.as_str()));
    if file.is_file() {
        return Ok(vec![file]);
    }
    Err(Error::Data(format!(
        "dataset '{name}' not found: expected {} or {}",
        dir.display(),
        file.display()
    )))
}

pub fn load_annotation_file(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    parse_annotations(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// All scenes of one set, numbered consecutively across its files.
pub fn load_dataset(root: &Path, name: DatasetName, stride: usize) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for file in dataset_files(root, name)? {
        let records = load_annotation_file(&file)?;
        for mut s in build_scenes(&records, T_IN, T_OUT, stride) {
            s.scene_id = scenes.len() as u64;
            s.source_set = Some(name);
            scenes.push(s);
        }
    }
    Ok(scenes)
}

pub fn load_split(root: &Path, split: &SplitSpec, stride: usize) -> Result<SplitData> {
    let mut data = SplitData {
        test: load_dataset(root, split.test_set, stride)?,
        ..Default::default()
    };
    for &name in &split.train_sets {
        for scene in load_dataset(root, name, stride)? {
            if split.is_validation(&scene) {
                data.val.push(scene);
            } else {
                data.train.push(scene);
            }
        }
    }
    // ids restart per set; make them unique within each pooled list
    for list in [&mut data.train, &mut data.val] {
        for (i, s) in list.iter_mut().enumerate() {
            s.scene_id = i as u64;
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(agent: i64, frames: std::ops::Range<i64>, step: i64) -> String {
        frames
            .map(|i| format!("{} {agent} {}.0 0.0\n", i * step, i))
            .collect()
    }

    #[test]
    fn parses_two_records() {
        let r = parse_annotations_str("10 1 0.0 0.0\n20 1 1.0 0.0").unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|r| r.agent_id == 1));
        assert_eq!(r[1].x, 1.0);
    }

    #[test]
    fn empty_and_comments() {
        assert!(parse_annotations_str("").unwrap().is_empty());
        let r = parse_annotations_str("# header\n\n  \n10.0\t2.0 1.5  -2.5\n").unwrap();
        assert_eq!(
            r,
            vec![AnnotationRecord { frame_id: 10, agent_id: 2, x: 1.5, y: -2.5 }]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_annotations_str("10 1 x y") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_annotations_str("10 1 0 0\n10.5 1 0 0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_annotations_str("10 1 0").is_err());
        assert!(parse_annotations_str("10 1 0 0\n10 1 1 1").is_err());
    }

    #[test]
    fn sorts_by_frame_then_agent() {
        let r = parse_annotations_str("20 2 0 0\n10 5 0 0\n20 1 0 0\n").unwrap();
        let keys: Vec<_> = r.iter().map(|r| (r.frame_id, r.agent_id)).collect();
        assert_eq!(keys, vec![(10, 5), (20, 1), (20, 2)]);
    }

    #[test]
    fn exactly_twenty_frames_gives_one_scene() {
        let recs = parse_annotations_str(&walk(1, 0..20, 10)).unwrap();
        let scenes = build_scenes(&recs, T_IN, T_OUT, 1);
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].num_agents(), 1);
        assert_eq!(scenes[0].frame_step, 10);
        assert_eq!(scenes[0].positions[[0, 19, 0]], 19.0);
    }

    #[test]
    fn nineteen_frames_gives_nothing() {
        let recs = parse_annotations_str(&walk(1, 0..19, 10)).unwrap();
        assert!(build_scenes(&recs, T_IN, T_OUT, 1).is_empty());
    }

    #[test]
    fn partial_agents_are_excluded() {
        let text = walk(1, 0..20, 10) + &walk(2, 3..20, 10);
        let recs = parse_annotations_str(&text).unwrap();
        let scenes = build_scenes(&recs, T_IN, T_OUT, 1);
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].agent_ids, vec![1]);
    }

    #[test]
    fn stride_skips_windows() {
        let recs = parse_annotations_str(&walk(1, 0..30, 10)).unwrap();
        assert_eq!(build_scenes(&recs, T_IN, T_OUT, 1).len(), 11);
        assert_eq!(build_scenes(&recs, T_IN, T_OUT, 5).len(), 3);
    }

    #[test]
    fn split_names() {
        let s = make_split("eth").unwrap();
        assert_eq!(s.test_set, DatasetName::Eth);
        assert_eq!(
            s.train_sets,
            vec![DatasetName::Hotel, DatasetName::Univ, DatasetName::Zara1, DatasetName::Zara2]
        );
        assert!(!s.val_sets.contains(&DatasetName::Eth));
        assert_eq!(make_split("zara2").unwrap().test_set, DatasetName::Zara2);
        assert!(matches!(make_split("foo"), Err(Error::Parameter(_))));
    }

    #[test]
    fn validation_holdout_is_close_to_fraction() {
        let split = make_split("eth").unwrap();
        let recs = parse_annotations_str(&walk(1, 0..20, 10)).unwrap();
        let base = build_scenes(&recs, T_IN, T_OUT, 1).remove(0);
        let held = (0..10_000u64)
            .filter(|&id| {
                let mut s = base.clone();
                s.scene_id = id;
                s.source_set = Some(DatasetName::Hotel);
                split.is_validation(&s)
            })
            .count();
        assert!((800..1200).contains(&held), "{held}");
    }

    #[test]
    fn history_uses_last_frames() {
        let text = walk(1, 0..12, 10) + &walk(2, 5..12, 10);
        let h = history_from_records(&parse_annotations_str(&text).unwrap(), 8).unwrap();
        assert_eq!(h.agent_ids, vec![1]);
        assert_eq!(h.positions[[0, 0, 0]], 4.0);
        assert_eq!(h.last(0), [11.0, 0.0]);
        let short = parse_annotations_str(&walk(1, 0..7, 10)).unwrap();
        assert!(matches!(history_from_records(&short, 8), Err(Error::Data(_))));
    }
}
