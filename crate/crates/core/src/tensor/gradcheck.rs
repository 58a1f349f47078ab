use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fault, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Magnitude below which gradient entries are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Floor for single-precision analytic gradients, whose rounding noise on
/// gradients that vanish exactly is around 1e-8 to 1e-7.
pub const GRAD_FLOOR_F32: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, GRAD_FLOOR)
}

pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Denominator floor matching the precision of the analytic side.
pub fn grad_floor<T: Real>() -> f64 {
    if std::mem::size_of::<T>() < 8 {
        GRAD_FLOOR_F32
    } else {
        GRAD_FLOOR
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst: Option<usize>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub(crate) fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>, tol: f64, floor: f64) -> Self {
        let mut r = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: None,
            checked: 0,
            tol,
        };
        for (i, (a, n)) in pairs.into_iter().enumerate() {
            let rel = relative_error_floor(a, n, floor);
            r.max_abs_err = r.max_abs_err.max((a - n).abs());
            if rel > r.max_rel_err || r.worst.is_none() {
                r.max_rel_err = rel.max(r.max_rel_err);
                r.worst = Some(i);
            }
            r.checked += 1;
        }
        r
    }
}

/// Fixed projection so tensor-valued functions reduce to a scalar with
/// non-degenerate gradients (a plain sum would zero out softmax gradients).
fn projection<T: Real>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9a11);
    // multiples of 1/64 in [0.5, 1.5): exact in both precisions
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(32..96) as f64 / 64.0).collect();
    Tensor::from_f64(shape, &w).expect("projection shape")
}

fn eval_scalar<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let w = tape.constant(projection(tape.shape(y)));
    let p = tape.mul(y, w)?;
    let l = tape.sum(p);
    Ok(tape.values(l)[0].f64())
}

/// Checks the gradient of `f` with respect to every input tensor.
///
/// `f` may return any shape; it is reduced with a fixed positive projection.
/// Returns one report per input.
pub fn grad_check_many<T: Real, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let y = f(&mut tape, &vars)?;
    let w = tape.constant(projection(tape.shape(y)));
    let p = tape.mul(y, w)?;
    let l = tape.sum(p);
    tape.backward(l)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(*var).iter().map(|g| g.f64()).collect();
        let mut pairs = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = inputs[idx].values()[k];
            probe[idx].values_mut()[k] = T::of(orig.f64() + h);
            let up = eval_scalar(&f, &probe)?;
            probe[idx].values_mut()[k] = T::of(orig.f64() - h);
            let down = eval_scalar(&f, &probe)?;
            probe[idx].values_mut()[k] = orig;
            pairs.push((a, (up - down) / (2.0 * h)));
        }
        reports.push(GradCheckReport::from_pairs(pairs, tol, grad_floor::<T>()));
    }
    Ok(reports)
}

/// Like [`grad_check_many`], but the analytic gradient comes from `f` in
/// precision `T` (on a tape carrying `fault`, if any) while the finite
/// differences are taken on `reference` in f64. `f` and `reference` must
/// compute the same function. Inputs are first rounded to `T` so both
/// sides see the same point.
pub fn grad_check_against<T: Real, F, G>(
    f: F,
    reference: G,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let rounded: Vec<Tensor<T>> = inputs.iter().map(Tensor::cast).collect();
    let point: Vec<Tensor<f64>> = rounded.iter().map(Tensor::cast).collect();
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let vars: Vec<Var> = rounded
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let y = f(&mut tape, &vars)?;
    let w = tape.constant(projection(tape.shape(y)));
    let p = tape.mul(y, w)?;
    let l = tape.sum(p);
    tape.backward(l)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = point.clone();
    for (idx, var) in vars.iter().enumerate() {
        let mut pairs = Vec::new();
        for (k, a) in tape.grad(*var).iter().enumerate() {
            let orig = point[idx].values()[k];
            probe[idx].values_mut()[k] = orig + h;
            let up = eval_scalar(&reference, &probe)?;
            probe[idx].values_mut()[k] = orig - h;
            let down = eval_scalar(&reference, &probe)?;
            probe[idx].values_mut()[k] = orig;
            pairs.push((a.f64(), (up - down) / (2.0 * h)));
        }
        reports.push(GradCheckReport::from_pairs(pairs, tol, grad_floor::<T>()));
    }
    Ok(reports)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<T: Real, F>(f: F, input: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut r = grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(input), h, tol)?;
    Ok(r.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn identity_has_zero_error() {
        // dyadic inputs and step keep every probe exactly representable
        let x = Tensor::<f64>::from_f64(&[4], &[0.5, -0.25, 0.75, -1.0]).unwrap();
        let r = grad_check(|_, x| Ok(x), &x, 2f64.powi(-14), 1e-12).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        let r = grad_check(|_, x| Ok(x), &random(&[5], 1), 1e-4, 1e-10).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn prelu_passes() {
        let alpha = Tensor::<f64>::scalar(0.25);
        let r = grad_check_many(
            |t, v| t.prelu(v[0], v[1]),
            &[random(&[2, 3, 4], 2), alpha],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(r.iter().all(|r| r.passed()), "{r:?}");
    }

    #[test]
    fn softmax_after_conv_passes() {
        let inputs = [random(&[1, 2, 4, 3], 3), random(&[2, 3, 3, 1], 4), random(&[3], 5)];
        let r = grad_check_many(
            |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], (1, 0))?;
                t.softmax(c, 2)
            },
            &inputs,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.iter().all(|r| r.passed()), "{r:?}");
    }

    #[test]
    fn batch_norm_train_mode_passes() {
        let inputs = [random(&[1, 2, 8, 3], 6), random(&[2], 7), random(&[2], 8)];
        let r = grad_check_many(
            |t, v| {
                let (mut m, mut s) = (vec![0.0; 2], vec![1.0; 2]);
                t.batch_norm2d(v[0], v[1], v[2], &mut m, &mut s, Mode::Train, 1e-5, 0.1)
            },
            &inputs,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.iter().all(|r| r.passed()), "{r:?}");
    }
}
