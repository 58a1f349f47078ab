#![allow(dead_code)]

use ndarray::Array3;
use rand::Rng;
use social_stage::dataset::{History, Scene, T_IN, T_OUT};

/// Random walkers with `k` agents; roughly a quarter of them share one
/// velocity so coincident-motion edges appear.
pub fn random_scene<R: Rng>(rng: &mut R, scene_id: u64, k: usize) -> Scene {
    let steps = T_IN + T_OUT;
    let shared = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let mut positions = Array3::zeros((k, steps, 2));
    for a in 0..k {
        let start = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let lockstep = rng.gen_bool(0.25);
        let mut p = start;
        for t in 0..steps {
            for d in 0..2 {
                positions[[a, t, d]] = p[d];
                p[d] += if lockstep { shared[d] } else { rng.gen_range(-0.6..0.6) };
            }
        }
    }
    Scene {
        scene_id,
        agent_ids: (0..k as i64).map(|i| 3 * i + 1).collect(),
        positions,
        source_set: None,
        start_frame: 0,
        frame_step: 10,
        t_in: T_IN,
    }
}

pub fn history(positions: Array3<f64>) -> History {
    History {
        agent_ids: (0..positions.shape()[0] as i64).collect(),
        positions,
    }
}
