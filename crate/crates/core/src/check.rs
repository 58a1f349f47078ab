//! Finite-difference verification of every differentiable primitive and of
//! the end-to-end training loss with respect to every model parameter.

use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Scene, T_IN, T_OUT};
use crate::error::Result;
use crate::graph;
use crate::losses::{self, RegNorm};
use crate::model::{ForwardPass, ModelConfig, StageModel};
use crate::tensor::{grad_check_against, grad_floor, Fault, GradCheckReport, Mode, Real, Tape, Tensor, Var};

/// Central-difference step; the reference side always runs in f64.
pub const FD_STEP: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-4;
pub const SUITE_SEED: u64 = 20;

/// One checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub precision: &'static str,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.report.passed())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.report.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.lines.iter().map(|l| l.report.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.lines.iter().map(|l| l.report.checked).sum()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let r = &l.report;
            writeln!(
                f,
                "{} {:<40} rel {:.3e}  abs {:.3e}  n={:<5} {}",
                self.precision,
                l.name,
                r.max_rel_err,
                r.max_abs_err,
                r.checked,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape")
}

/// Runs a check on the same closure body instantiated for `T` and for f64.
macro_rules! check {
    ($out:ident, $name:expr, $inputs:expr, $tol:expr, $fault:expr, |$t:ident, $v:ident| $body:expr) => {{
        let inputs: Vec<Tensor<f64>> = $inputs;
        let reports = grad_check_against::<T, _, _>(
            |$t: &mut Tape<T>, $v: &[Var]| $body,
            |$t: &mut Tape<f64>, $v: &[Var]| $body,
            &inputs,
            FD_STEP,
            $tol,
            $fault,
        )?;
        for (i, report) in reports.into_iter().enumerate() {
            $out.push(CheckLine {
                name: format!("{}[{i}]", $name),
                report,
            });
        }
    }};
}

fn tolerance<T: Real>() -> (f64, &'static str) {
    if std::mem::size_of::<T>() == 4 {
        (TOL_F32, "f32")
    } else {
        (TOL_F64, "f64")
    }
}

/// Every tape primitive on random inputs in [-1, 1].
pub fn primitive_checks<T: Real>(fault: Option<Fault>) -> Result<Vec<CheckLine>> {
    let (tol, _) = tolerance::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED);
    let r = &mut rng;
    let mut out = Vec::new();
    let a = uniform(&[2, 3], -1.0, 1.0, r);
    let b = uniform(&[2, 3], -1.0, 1.0, r);
    check!(out, "add", vec![a.clone(), b.clone()], tol, fault, |t, v| t.add(v[0], v[1]));
    check!(out, "sub", vec![a.clone(), b.clone()], tol, fault, |t, v| t.sub(v[0], v[1]));
    check!(out, "mul", vec![a.clone(), b.clone()], tol, fault, |t, v| t.mul(v[0], v[1]));
    check!(out, "scale", vec![a.clone()], tol, fault, |t, v| Ok(t.scale(v[0], Real::of(-1.5))));
    check!(out, "sum", vec![a.clone()], tol, fault, |t, v| Ok(t.sum(v[0])));
    let x4 = uniform(&[2, 3, 4, 2], -1.0, 1.0, r);
    check!(out, "reshape", vec![x4.clone()], tol, fault, |t, v| t.reshape(v[0], &[6, 8]));
    check!(out, "permute", vec![x4.clone()], tol, fault, |t, v| t.permute(v[0], &[2, 0, 3, 1]));
    check!(out, "sum_axis", vec![x4.clone()], tol, fault, |t, v| t.sum_axis(v[0], 2));
    check!(out, "cumsum", vec![x4.clone()], tol, fault, |t, v| t.cumsum(v[0], 1));
    check!(out, "softmax.axis1", vec![x4.clone()], tol, fault, |t, v| t.softmax(v[0], 1));
    check!(out, "softmax.axis2", vec![x4.clone()], tol, fault, |t, v| t.softmax(v[0], 2));
    check!(out, "l2_norm", vec![x4.clone()], tol, fault, |t, v| Ok(t.l2_norm(v[0])));
    let pos = uniform(&[3, 4], 0.1, 1.0, r);
    check!(out, "ln_clamped", vec![pos], tol, fault, |t, v| Ok(t.ln_clamped(v[0], Real::of(1e-12))));
    let m1 = uniform(&[3, 2, 4], -1.0, 1.0, r);
    let m2 = uniform(&[3, 4, 5], -1.0, 1.0, r);
    check!(out, "matmul", vec![m1, m2], tol, fault, |t, v| t.matmul(v[0], v[1]));
    let alpha = Tensor::scalar(0.25);
    check!(out, "prelu", vec![x4.clone(), alpha], tol, fault, |t, v| t.prelu(v[0], v[1]));
    check!(out, "dropout", vec![x4.clone()], tol, fault, |t, v| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(v[0], 0.25, Mode::Train, &mut drop_rng)
    });
    let gamma = uniform(&[3], 0.5, 1.5, r);
    let beta = uniform(&[3], -0.5, 0.5, r);
    for mode in [Mode::Train, Mode::Eval] {
        let name = format!("batch_norm2d.{mode:?}").to_lowercase();
        check!(out, name, vec![x4.clone(), gamma.clone(), beta.clone()], tol, fault, |t, v| {
            let mut mean = vec![Real::of(0.1); 3];
            let mut var = vec![Real::of(0.8); 3];
            t.batch_norm2d(v[0], v[1], v[2], &mut mean, &mut var, mode, 1e-5, 0.1)
        });
    }
    for (pad, kh, kw) in [((1, 0), 3, 1), ((0, 0), 1, 1), ((1, 1), 3, 3)] {
        let x = uniform(&[1, 2, 5, 3], -1.0, 1.0, r);
        let w = uniform(&[2, 3, kh, kw], -1.0, 1.0, r);
        let bias = uniform(&[3], -1.0, 1.0, r);
        let name = format!("conv2d.{kh}x{kw}");
        check!(out, name, vec![x, w, bias], tol, fault, |t, v| t.conv2d(v[0], v[1], v[2], pad));
    }
    Ok(out)
}

/// Seeded two-agent scene used by the end-to-end check.
pub fn gradcheck_scene() -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED);
    let steps = T_IN + T_OUT;
    let mut positions = Array3::zeros((2, steps, 2));
    for a in 0..2 {
        let mut p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let v = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
        for t in 0..steps {
            for d in 0..2 {
                p[d] += v[d] + rng.gen_range(-0.05..0.05);
                positions[[a, t, d]] = p[d];
            }
        }
    }
    Scene {
        scene_id: 0,
        agent_ids: vec![0, 1],
        positions,
        source_set: None,
        start_frame: 0,
        frame_step: 10,
        t_in: T_IN,
    }
}

fn loss_pass<U: Real>(model: &StageModel<U>, scene: &Scene, fault: Option<Fault>) -> Result<(ForwardPass<U>, Var)> {
    let history = scene.history();
    let g = graph::build(&history);
    let gt = losses::future_tdk(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let mut pass = model.forward_on(tape, &g, Mode::Train, &mut rng)?;
    let (loss, _) = losses::total_loss(
        &mut pass.tape,
        pass.displacements,
        pass.probs,
        &history,
        gt.view(),
        RegNorm::Stacked,
    )?;
    Ok((pass, loss))
}

/// Total loss on [`gradcheck_scene`] (M=2, train-mode batch statistics, no
/// dropout) against every trainable parameter of a seeded model.
pub fn model_checks<T: Real>(fault: Option<Fault>) -> Result<Vec<CheckLine>> {
    let (tol, _) = tolerance::<T>();
    let scene = gradcheck_scene();
    let config = ModelConfig {
        dropout_rate: 0.0,
        ..ModelConfig::with_modes(2)
    };
    let model = StageModel::<T>::new(config, SUITE_SEED)?;

    let (mut pass, loss) = loss_pass(&model, &scene, fault)?;
    pass.tape.backward(loss)?;

    // reference model at exactly the same point, in f64
    let mut reference: StageModel<f64> = model.cast();
    let mut out = Vec::new();
    let params: Vec<_> = model.params().trainable().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in params {
        let var = pass.param_var(id).expect("bound parameter");
        let analytic: Vec<f64> = pass.tape.grad(var).iter().map(|g| g.f64()).collect();
        let mut pairs = Vec::with_capacity(analytic.len());
        for (k, &a) in analytic.iter().enumerate() {
            let orig = reference.params().get(id).tensor.values()[k];
            let mut eval_at = |x: f64| -> Result<f64> {
                reference.params_mut().get_mut(id).tensor.values_mut()[k] = x;
                let (pass, loss) = loss_pass(&reference, &scene, None)?;
                Ok(pass.tape.values(loss)[0])
            };
            let up = eval_at(orig + FD_STEP)?;
            let down = eval_at(orig - FD_STEP)?;
            reference.params_mut().get_mut(id).tensor.values_mut()[k] = orig;
            pairs.push((a, (up - down) / (2.0 * FD_STEP)));
        }
        out.push(CheckLine {
            name: format!("loss/{name}"),
            report: GradCheckReport::from_pairs(pairs, tol, grad_floor::<T>()),
        });
    }
    Ok(out)
}

/// Primitive and end-to-end checks in precision `T`.
pub fn run_suite<T: Real>(fault: Option<Fault>) -> Result<SuiteReport> {
    let (_, precision) = tolerance::<T>();
    let mut lines = primitive_checks::<T>(fault)?;
    lines.extend(model_checks::<T>(fault)?);
    Ok(SuiteReport { precision, lines })
}
