mod common;

use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use social_stage::dataset::{self, History, Scene, T_IN, T_OUT};
use social_stage::graph;
use social_stage::losses::{self, RegNorm};
use social_stage::metrics::{self, BestModeRule, ModeErrors, PredictionDump};
use social_stage::model::{ModelConfig, PredictionSet, StageModel};
use social_stage::tensor::{Tape, Tensor};

fn leaf(tape: &mut Tape<f64>, shape: &[usize], values: &[f64]) -> social_stage::tensor::Var {
    tape.leaf(Tensor::from_f64(shape, values).unwrap().with_grad(true))
}

/// Positions on a 1/64 grid, so sums with integer offsets are exact.
fn grid_history(k: usize, cells: &[i32]) -> History {
    let positions = Array3::from_shape_fn((k, T_IN, 2), |(a, t, d)| cells[(a * T_IN + t) * 2 + d] as f64 / 64.0);
    common::history(positions)
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|p| p / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        xs in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[3, 4], &xs);
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let b = leaf(&mut tape, &[3, 4], &shifted);
        for axis in [0, 1] {
            let sa = tape.softmax(a, axis).unwrap();
            let sb = tape.softmax(b, axis).unwrap();
            let (va, vb) = (tape.values(sa).to_vec(), tape.values(sb).to_vec());
            for (x, y) in va.iter().zip(&vb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let arr = Array2::from_shape_vec((3, 4), va).unwrap();
            for s in arr.sum_axis(Axis(axis)) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(xs in prop::collection::vec(-1.0f64..1.0, 24)) {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 3, 4], &xs);
        let r = tape.reshape(a, &[6, 4]).unwrap();
        let r = tape.reshape(r, &[4, 3, 2]).unwrap();
        let r = tape.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(tape.values(r), tape.values(a));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        let p = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.values(p), tape.values(a));
    }

    #[test]
    fn backward_is_linear(
        xs in prop::collection::vec(-1.0f64..1.0, 8),
        us in prop::collection::vec(-1.0f64..1.0, 8),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let grad = |wa: f64, wb: f64| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let x = leaf(&mut tape, &[2, 4], &xs);
            let u = tape.constant(Tensor::from_f64(&[2, 4], &us).unwrap());
            let s = tape.softmax(x, 1).unwrap();
            let f = tape.mul(s, u).unwrap();
            let f = tape.sum(f);
            let c = tape.cumsum(x, 1).unwrap();
            let g = tape.l2_norm(c);
            let g = tape.sum(g);
            let f = tape.scale(f, wa);
            let g = tape.scale(g, wb);
            let total = tape.add(f, g).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).to_vec()
        };
        let (gf, gg, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
        for i in 0..8 {
            prop_assert!((both[i] - (alpha * gf[i] + beta * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_serialization_is_bit_exact(
        k in 1usize..5,
        coords in prop::collection::vec(prop::num::f64::NORMAL, 5 * 20 * 2),
        start in -1000i64..1000,
        step in 1i64..12,
    ) {
        let steps = T_IN + T_OUT;
        let scene = Scene {
            scene_id: 0,
            agent_ids: (0..k as i64).map(|i| 7 * i - 3).collect(),
            positions: Array3::from_shape_fn((k, steps, 2), |(a, t, d)| coords[(a * steps + t) * 2 + d]),
            source_set: None,
            start_frame: start,
            frame_step: step,
            t_in: T_IN,
        };
        let records = dataset::parse_annotations_str(&scene.to_annotation_lines()).unwrap();
        let parsed = dataset::build_scenes(&records, T_IN, T_OUT, 1);
        prop_assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        prop_assert_eq!(&p.agent_ids, &scene.agent_ids);
        prop_assert_eq!((p.start_frame, p.frame_step), (start, step));
        for (x, y) in p.positions.iter().zip(&scene.positions) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn build_scenes_ignores_record_order(k in 1usize..5, frames in 20usize..26, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for f in 0..frames {
            for a in 0..k {
                if f > 0 && a == 0 && rng.gen_bool(0.1) {
                    continue;
                }
                text.push_str(&format!("{} {} {} {}\n", 10 * f, a, rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)));
            }
        }
        let mut lines: Vec<&str> = text.lines().collect();
        let reference = dataset::build_scenes(&dataset::parse_annotations_str(&text).unwrap(), T_IN, T_OUT, 1);
        lines.shuffle(&mut rng);
        let shuffled = lines.join("\n");
        let again = dataset::build_scenes(&dataset::parse_annotations_str(&shuffled).unwrap(), T_IN, T_OUT, 1);
        prop_assert_eq!(&reference, &again);
        for s in &reference {
            prop_assert!(s.positions.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn graph_is_translation_invariant_bitwise(
        k in 1usize..6,
        cells in prop::collection::vec(-4096i32..4096, 5 * T_IN * 2),
        dx in -500i32..500,
        dy in -500i32..500,
    ) {
        let h = grid_history(k, &cells);
        let mut moved = h.clone();
        for mut p in moved.positions.lanes_mut(Axis(2)) {
            p[0] += dx as f64;
            p[1] += dy as f64;
        }
        let (g, gm) = (graph::build(&h), graph::build(&moved));
        prop_assert!(g.v.iter().zip(&gm.v).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(g.a.iter().zip(&gm.a).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn normalize_keeps_symmetry(
        k in 1usize..7,
        upper in prop::collection::vec(0.0f64..5.0, 21),
    ) {
        let mut a = Array2::<f64>::eye(k);
        let mut n = 0;
        for i in 0..k {
            for j in (i + 1)..k {
                a[[i, j]] = upper[n];
                a[[j, i]] = upper[n];
                n += 1;
            }
        }
        let out = graph::normalize(&a);
        for i in 0..k {
            for j in 0..k {
                prop_assert_eq!(out[[i, j]].to_bits(), out[[j, i]].to_bits());
            }
        }
        prop_assert_eq!(graph::normalize(&Array2::eye(k)), Array2::<f64>::eye(k));
    }

    #[test]
    fn min_error_mode_survives_rescaling(
        m in 1usize..6,
        k in 1usize..4,
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Array3::from_shape_fn((T_OUT, 2, k), |_| rng.gen_range(-3.0..3.0));
        let pred = Array4::from_shape_fn((m, T_OUT, 2, k), |_| rng.gen_range(-3.0..3.0));
        let errors = losses::mode_errors(pred.view(), gt.view(), RegNorm::Stacked);
        // residuals scaled by `scale` scale every mode error by it
        let scaled = Array4::from_shape_fn(pred.dim(), |(mo, t, d, a)| {
            gt[[t, d, a]] + scale * (pred[[mo, t, d, a]] - gt[[t, d, a]])
        });
        let before = losses::min_error_mode(pred.view(), gt.view(), RegNorm::Stacked);
        let after = losses::min_error_mode(scaled.view(), gt.view(), RegNorm::Stacked);
        for a in 0..k {
            let best = errors[[before[a], a]];
            // rounding may reorder modes whose errors are within 1e-9
            let near_tie = errors.column(a).iter().filter(|&&e| (e - best).abs() <= 1e-9 * (1.0 + best)).count() > 1;
            prop_assert!(near_tie || before[a] == after[a]);
        }
    }

    #[test]
    fn ce_loss_is_nonnegative_and_zero_on_certainty(
        m in 1usize..8,
        k in 1usize..5,
        raw in prop::collection::vec(0.01f64..1.0, 40),
        pick in prop::collection::vec(0usize..8, 5),
    ) {
        let mut probs = Array2::zeros((m, k));
        for a in 0..k {
            let col = simplex(&raw[a * 8..a * 8 + m]);
            for i in 0..m {
                probs[[i, a]] = col[i];
            }
        }
        let m_min: Vec<usize> = pick[..k].iter().map(|p| p % m).collect();
        prop_assert!(losses::ce_loss(probs.view(), &m_min) >= 0.0);
        let mut certain = Array2::zeros((m, k));
        for (a, &i) in m_min.iter().enumerate() {
            certain[[i, a]] = 1.0;
        }
        prop_assert_eq!(losses::ce_loss(certain.view(), &m_min), 0.0);
    }

    #[test]
    fn mode_metrics_bounds_and_permutations(
        ade in prop::collection::vec(0.0f64..10.0, 1..20),
        raw in prop::collection::vec(0.01f64..1.0, 20),
        seed in any::<u64>(),
    ) {
        let m = ade.len();
        let fde: Vec<f64> = ade.iter().map(|e| 1.7 * e + 0.1).collect();
        let probs = simplex(&raw[..m]);
        let e_hat = ade.iter().copied().fold(f64::INFINITY, f64::min);
        let m1 = metrics::m1(&ade, e_hat);
        let m2 = metrics::m2(&ade, Some(&probs)).unwrap();
        prop_assert!(m1 >= 0.0 && m2 >= 0.0);
        let best = ade.iter().position(|&e| e == e_hat).unwrap();
        let others_zero = ade.iter().enumerate().all(|(i, &e)| i == best || e == 0.0);
        prop_assert_eq!(m1 == 0.0, others_zero);

        let errs = ModeErrors { ade: ade.clone(), fde: fde.clone(), probs: Some(probs.clone()), mean: None };
        let (amin, fmin) = metrics::min_metrics(&errs);
        for rule in [BestModeRule::Oracle, BestModeRule::PMax] {
            let b = metrics::select_best_mode(&ade, Some(&probs), None, rule).unwrap();
            prop_assert!(amin <= b.error);
        }
        prop_assert!(ade.iter().all(|&e| amin <= e) && fde.iter().all(|&e| fmin <= e));

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<f64> = order.iter().map(|&i| ade[i]).collect();
        let pp: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
        let pe = ModeErrors { ade: pa.clone(), fde: order.iter().map(|&i| fde[i]).collect(), probs: Some(pp.clone()), mean: None };
        prop_assert_eq!(metrics::min_metrics(&pe), (amin, fmin));
        prop_assert!((metrics::m1(&pa, e_hat) - m1).abs() < 1e-12);
        // with tied top probabilities the subtracted mode can change
        let top = probs.iter().copied().fold(0.0, f64::max);
        if probs.iter().filter(|&&p| p == top).count() == 1 {
            prop_assert!((metrics::m2(&pa, Some(&pp)).unwrap() - m2).abs() < 1e-12);
        }

        let mut certain = vec![0.0; m];
        certain[0] = 1.0;
        prop_assert_eq!(metrics::m2(&ade, Some(&certain)).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_are_translation_invariant_in_displacement_space(
        k in 1usize..5,
        cells in prop::collection::vec(-4096i32..4096, 4 * T_IN * 2),
        dx in -300i32..300,
        dy in -300i32..300,
        modes in 1usize..4,
    ) {
        let model = StageModel::<f32>::new(ModelConfig::with_modes(modes), 5).unwrap();
        let h = grid_history(k, &cells);
        let mut moved = h.clone();
        for mut p in moved.positions.lanes_mut(Axis(2)) {
            p[0] += dx as f64;
            p[1] += dy as f64;
        }
        prop_assert_eq!(model.predict(&h).unwrap(), model.predict(&moved).unwrap());
    }

    #[test]
    fn graph_is_permutation_equivariant(k in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = common::random_scene(&mut rng, 0, k).history();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let ph = History {
            agent_ids: perm.iter().map(|&i| h.agent_ids[i]).collect(),
            positions: h.positions.select(Axis(0), &perm),
        };
        let (g, gp) = (graph::build(&h), graph::build(&ph));
        prop_assert_eq!(gp.v, g.v.select(Axis(2), &perm));
        for t in 0..T_IN {
            for (j, &i) in perm.iter().enumerate() {
                for (l, &m) in perm.iter().enumerate() {
                    prop_assert!((gp.a[[t, j, l]] - g.a[[t, i, m]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_predictions_are_deterministic(k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = StageModel::<f32>::new(ModelConfig::with_modes(3), seed).unwrap();
        let h = common::random_scene(&mut rng, 0, k).history();
        prop_assert_eq!(model.predict(&h).unwrap(), model.predict(&h).unwrap());
    }

    #[test]
    fn dataset_evaluation_ignores_scene_and_agent_order(seed in any::<u64>(), modes in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Vec<Scene> = (0..6)
            .map(|s| {
                let k = rng.gen_range(1..5);
                common::random_scene(&mut rng, s, k)
            })
            .collect();
        let mut dump = PredictionDump::new();
        for s in &scenes {
            let k = s.num_agents();
            let mut probs = Array2::from_shape_fn((modes, k), |_| rng.gen_range(0.05..1.0));
            for mut col in probs.columns_mut() {
                let z = col.sum();
                col.mapv_inplace(|p| p / z);
            }
            let pred = PredictionSet {
                displacements: Array4::from_shape_fn((modes, T_OUT, 2, k), |_| rng.gen_range(-0.5..0.5)),
                probs,
            };
            dump.push_scene(s.scene_id, &s.history(), &pred);
        }
        let mut shuffled_scenes = scenes.clone();
        shuffled_scenes.shuffle(&mut rng);
        let mut shuffled_dump = dump.clone();
        shuffled_dump.agents.shuffle(&mut rng);
        for rule in [BestModeRule::Oracle, BestModeRule::PMax, BestModeRule::Mean] {
            let a = metrics::evaluate_dataset(&dump, &scenes, rule).unwrap();
            let b = metrics::evaluate_dataset(&shuffled_dump, &shuffled_scenes, rule).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
