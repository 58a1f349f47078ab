//! Small synthetic corpora for sanity training runs.

use ndarray::Array3;

use crate::dataset::{Scene, T_IN, T_OUT};

/// Distance covered per step by every synthetic walker.
pub const WALK_SPEED: f64 = 0.1;

const HEADINGS: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];

/// Four walkers, one per axis heading, in the order given by `perm`. Agent 0
/// turns by 90 degrees after the observation when `turn` is set: `Some(true)`
/// to the left, `Some(false)` to the right.
pub fn crossing_scene(scene_id: u64, perm: [usize; 4], turn: Option<bool>) -> Scene {
    let steps = T_IN + T_OUT;
    let mut positions = Array3::zeros((4, steps, 2));
    for (a, &h) in perm.iter().enumerate() {
        let dir = HEADINGS[h];
        let start = [2.0 * a as f64, -(a as f64)];
        for t in 0..steps {
            for d in 0..2 {
                positions[[a, t, d]] = start[d] + WALK_SPEED * t as f64 * dir[d];
            }
        }
    }
    if let Some(left) = turn {
        let dir = HEADINGS[perm[0]];
        let side = if left { [-dir[1], dir[0]] } else { [dir[1], -dir[0]] };
        let corner = [positions[[0, T_IN - 1, 0]], positions[[0, T_IN - 1, 1]]];
        for t in T_IN..steps {
            let n = (t + 1 - T_IN) as f64 * WALK_SPEED;
            for d in 0..2 {
                positions[[0, t, d]] = corner[d] + n * side[d];
            }
        }
    }
    Scene {
        scene_id,
        agent_ids: (0..4).collect(),
        positions,
        source_set: None,
        start_frame: 0,
        frame_step: 10,
        t_in: T_IN,
    }
}

/// Permutations of `0..4` in lexicographic order.
fn permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p.contains(&i)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Ten scenes of four walkers each: eight in which everyone walks straight
/// and the two outcomes of one junction, which share an identical history.
///
/// Every scene contains one walker per axis heading, so all histories are
/// agent permutations of each other and per-scene batch statistics agree.
#[derive(Debug, Clone)]
pub struct DeskCorpus {
    pub scenes: Vec<Scene>,
    /// Positions of the two junction outcomes in `scenes`.
    pub junction: [usize; 2],
}

pub fn desk_corpus() -> DeskCorpus {
    let perms = permutations();
    let mut scenes: Vec<Scene> = (1..=8u64)
        .map(|i| crossing_scene(i - 1, perms[i as usize + 5], None))
        .collect();
    scenes.push(crossing_scene(8, perms[0], Some(true)));
    scenes.push(crossing_scene(9, perms[0], Some(false)));
    DeskCorpus {
        scenes,
        junction: [8, 9],
    }
}
