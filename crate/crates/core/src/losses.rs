//! Training objective: minimum-error trajectory regression plus
//! cross-entropy on the mode probabilities, with the one-hot target placed
//! on each agent's minimum-error mode.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayView4};

use crate::dataset::{History, Scene};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Log arguments are clamped from below at this value.
pub const PROB_FLOOR: f64 = 1e-12;

/// How a mode's trajectory residual is collapsed to one error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegNorm {
    /// L2 norm of the whole `T_out x 2` residual.
    #[default]
    Stacked,
    /// Sum of per-step Euclidean distances.
    PerStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_reg_min: f64,
    pub l_ce: f64,
    /// Minimum-error mode of every agent.
    pub m_min: Vec<usize>,
}

/// Ground-truth future of a scene as `[T_out, 2, K]`.
pub fn future_tdk(scene: &Scene) -> Array3<f64> {
    scene.future().permuted_axes([1, 2, 0]).to_owned()
}

/// Per-mode, per-agent regression error `[M, K]` of absolute predictions
/// `[M, T_out, 2, K]` against `gt [T_out, 2, K]`.
pub fn mode_errors(pred_abs: ArrayView4<'_, f64>, gt: ArrayView3<'_, f64>, norm: RegNorm) -> Array2<f64> {
    let (m, t_out, _, k) = pred_abs.dim();
    let mut err = Array2::zeros((m, k));
    for mode in 0..m {
        for a in 0..k {
            let mut total = 0.0;
            for t in 0..t_out {
                let dx = gt[[t, 0, a]] - pred_abs[[mode, t, 0, a]];
                let dy = gt[[t, 1, a]] - pred_abs[[mode, t, 1, a]];
                match norm {
                    RegNorm::Stacked => total += dx * dx + dy * dy,
                    RegNorm::PerStep => total += (dx * dx + dy * dy).sqrt(),
                }
            }
            err[[mode, a]] = match norm {
                RegNorm::Stacked => total.sqrt(),
                RegNorm::PerStep => total,
            };
        }
    }
    err
}

/// Column-wise argmin with ties going to the lowest index.
fn argmin_columns(errors: ArrayView2<'_, f64>) -> Vec<usize> {
    (0..errors.shape()[1])
        .map(|a| {
            let col = errors.column(a);
            let mut best = 0;
            for m in 1..col.len() {
                if col[m] < col[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}

pub fn min_error_mode(pred_abs: ArrayView4<'_, f64>, gt: ArrayView3<'_, f64>, norm: RegNorm) -> Vec<usize> {
    argmin_columns(mode_errors(pred_abs, gt, norm).view())
}

/// Sum over agents of the minimum-error mode's regression error.
pub fn reg_loss_min(pred_abs: ArrayView4<'_, f64>, gt: ArrayView3<'_, f64>, norm: RegNorm) -> f64 {
    let err = mode_errors(pred_abs, gt, norm);
    argmin_columns(err.view())
        .iter()
        .enumerate()
        .map(|(a, &m)| err[[m, a]])
        .sum()
}

/// `sum_k -ln probs[m_min[k], k]`, log argument clamped at [`PROB_FLOOR`].
pub fn ce_loss(probs: ArrayView2<'_, f64>, m_min: &[usize]) -> f64 {
    m_min
        .iter()
        .enumerate()
        .map(|(a, &m)| -probs[[m, a]].max(PROB_FLOOR).ln())
        .sum()
}

/// Differentiable total loss on the tape of a forward pass.
///
/// `displacements` is `[M, T_out, 2, K]`, `probs` is `[M, K]`. The
/// minimum-error modes are treated as constants.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    displacements: Var,
    probs: Var,
    history: &History,
    gt: ArrayView3<'_, f64>,
    norm: RegNorm,
) -> Result<(Var, LossBreakdown)> {
    let shape = tape.shape(displacements).to_vec();
    if shape.len() != 4 || shape[2] != 2 {
        return Err(Error::dim("displacements", format!("expected [M, T, 2, K], got {shape:?}")));
    }
    let (m, t_out, k) = (shape[0], shape[1], shape[3]);
    if gt.dim() != (t_out, 2, k) {
        return Err(Error::dim(
            "ground truth",
            format!("expected [{t_out}, 2, {k}], got {:?}", gt.shape()),
        ));
    }
    if tape.shape(probs) != [m, k] {
        return Err(Error::dim("probs", format!("expected [{m}, {k}], got {:?}", tape.shape(probs))));
    }
    if history.num_agents() != k {
        return Err(Error::dim("agents", "history and prediction disagree on agent count"));
    }

    // residual = gt - (last + cumsum(displacements)) = (gt - last) - cumsum(...)
    let mut target = Vec::with_capacity(m * t_out * 2 * k);
    for _ in 0..m {
        for t in 0..t_out {
            for d in 0..2 {
                for a in 0..k {
                    target.push(gt[[t, d, a]] - history.last(a)[d]);
                }
            }
        }
    }
    let target = tape.constant(Tensor::from_f64(&shape, &target)?);
    let path = tape.cumsum(displacements, 1)?;
    let resid = tape.sub(target, path)?;
    let resid = tape.permute(resid, &[0, 3, 1, 2])?;
    let errors = match norm {
        RegNorm::Stacked => {
            let flat = tape.reshape(resid, &[m, k, t_out * 2])?;
            tape.l2_norm(flat)
        }
        RegNorm::PerStep => {
            let steps = tape.l2_norm(resid);
            tape.sum_axis(steps, 2)?
        }
    };
    let err_vals = Array2::from_shape_vec((m, k), tape.value(errors).to_f64()).expect("[M, K]");
    let m_min = argmin_columns(err_vals.view());

    let mut mask = vec![0.0; m * k];
    for (a, &best) in m_min.iter().enumerate() {
        mask[best * k + a] = 1.0;
    }
    let mask = tape.constant(Tensor::from_f64(&[m, k], &mask)?);
    let picked = tape.mul(errors, mask)?;
    let reg = tape.sum(picked);
    let logp = tape.ln_clamped(probs, T::of(PROB_FLOOR));
    let picked = tape.mul(logp, mask)?;
    let nll = tape.sum(picked);
    let ce = tape.scale(nll, -T::one());
    let total = tape.add(reg, ce)?;

    let l_reg_min = tape.values(reg)[0].f64();
    let l_ce = tape.values(ce)[0].f64();
    Ok((
        total,
        LossBreakdown {
            total: l_reg_min + l_ce,
            l_reg_min,
            l_ce,
            m_min,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};

    #[test]
    fn single_mode_always_selected() {
        let pred = Array4::from_elem((1, 12, 2, 3), 1.0);
        let gt = Array3::zeros((12, 2, 3));
        assert_eq!(min_error_mode(pred.view(), gt.view(), RegNorm::Stacked), vec![0, 0, 0]);
    }

    #[test]
    fn exact_mode_wins() {
        let gt = Array3::from_shape_fn((12, 2, 2), |(t, d, a)| (t + d + a) as f64 * 0.1);
        let mut pred = Array4::zeros((2, 12, 2, 2));
        pred.index_axis_mut(Axis(0), 0).assign(&(&gt + 0.3));
        pred.index_axis_mut(Axis(0), 1).assign(&gt);
        assert_eq!(min_error_mode(pred.view(), gt.view(), RegNorm::Stacked), vec![1, 1]);
        assert_eq!(reg_loss_min(pred.view(), gt.view(), RegNorm::Stacked), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let pred = Array4::from_elem((3, 12, 2, 1), 1.0);
        let gt = Array3::zeros((12, 2, 1));
        assert_eq!(min_error_mode(pred.view(), gt.view(), RegNorm::Stacked), vec![0]);
    }

    #[test]
    fn constant_residual_analytic() {
        let gt = Array3::zeros((12, 2, 1));
        let mut pred = Array4::zeros((1, 12, 2, 1));
        pred.index_axis_mut(Axis(2), 0).fill(0.3);
        pred.index_axis_mut(Axis(2), 1).fill(0.4);
        let l = reg_loss_min(pred.view(), gt.view(), RegNorm::Stacked);
        assert!((l - 3f64.sqrt()).abs() < 1e-12, "{l}");
        let l = reg_loss_min(pred.view(), gt.view(), RegNorm::PerStep);
        assert!((l - 6.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn ce_cases() {
        let uniform = Array2::from_elem((2, 1), 0.5);
        assert!((ce_loss(uniform.view(), &[0]) - 2f64.ln()).abs() < 1e-15);
        let uniform = Array2::from_elem((2, 3), 0.5);
        assert!((ce_loss(uniform.view(), &[0, 1, 1]) - 3.0 * 2f64.ln()).abs() < 1e-15);
        let sure = ndarray::array![[0.0], [1.0]];
        assert_eq!(ce_loss(sure.view(), &[1]), 0.0);
        // clamp keeps the loss finite
        assert!((ce_loss(sure.view(), &[0]) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn every_logit_gets_gradient_through_softmax() {
        let (m, k) = (3, 2);
        let history = History {
            agent_ids: vec![0, 1],
            positions: Array3::zeros((k, 8, 2)),
        };
        let gt = Array3::from_shape_fn((12, 2, k), |(t, d, a)| 0.1 * (t + d + a) as f64);
        let mut tape = Tape::<f64>::new();
        let disp: Vec<f64> = (0..m * 12 * 2 * k).map(|i| (i % 7) as f64 * 0.05).collect();
        let d = tape.leaf(Tensor::from_f64(&[m, 12, 2, k], &disp).unwrap().with_grad(true));
        let logits = tape.leaf(Tensor::from_f64(&[m, k], &[0.1, -0.2, 0.3, 0.0, 0.5, 0.2]).unwrap().with_grad(true));
        let probs = tape.softmax(logits, 0).unwrap();
        let (loss, _) = total_loss(&mut tape, d, probs, &history, gt.view(), RegNorm::Stacked).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(logits).iter().all(|g| g.abs() > 1e-6), "{:?}", tape.grad(logits));
    }
}
