//! Node attributes and normalized per-step adjacency for a scene history.

use ndarray::{Array2, Array3, ArrayView2};

use crate::dataset::History;

/// Kernel entries between agents whose relative motions are closer than this are zeroed.
pub const COINCIDENT_EPS: f64 = 1e-6;

/// Graph input of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSequence {
    /// Relative motions, `[2, t_in, K]`.
    pub v: Array3<f64>,
    /// Normalized adjacency, `[t_in, K, K]`.
    pub a: Array3<f64>,
}

impl GraphSequence {
    pub fn num_agents(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn steps(&self) -> usize {
        self.v.shape()[1]
    }
}

/// `v[:, t, k] = x_t - x_{t-1}`, zero at the first observed step.
pub fn relative_motion(history: &History) -> Array3<f64> {
    let (k, t_in) = (history.num_agents(), history.len());
    let p = &history.positions;
    let mut v = Array3::zeros((2, t_in, k));
    for a in 0..k {
        for t in 1..t_in {
            for d in 0..2 {
                v[[d, t, a]] = p[[a, t, d]] - p[[a, t - 1, d]];
            }
        }
    }
    v
}

/// Inverse-distance kernel between node attributes `[2, K]`, with self-connections.
///
/// Off-diagonal entries are `1 / |v_i - v_j|`, or 0 when the motions coincide
/// (distance below [`COINCIDENT_EPS`]); the diagonal is 1.
pub fn raw_adjacency(v_t: ArrayView2<'_, f64>) -> Array2<f64> {
    let k = v_t.shape()[1];
    let mut a = Array2::eye(k);
    for i in 0..k {
        for j in (i + 1)..k {
            let dx = v_t[[0, i]] - v_t[[0, j]];
            let dy = v_t[[1, i]] - v_t[[1, j]];
            let dist = dx.hypot(dy);
            let w = if dist < COINCIDENT_EPS { 0.0 } else { 1.0 / dist };
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    a
}

/// Symmetric degree normalization `D^-1/2 Â D^-1/2`, `D = diag(row sums of Â)`.
pub fn normalize(a_hat: &Array2<f64>) -> Array2<f64> {
    let degree: Vec<f64> = a_hat.rows().into_iter().map(|r| r.sum()).collect();
    let mut out = a_hat.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v /= (degree[i] * degree[j]).sqrt();
    }
    out
}

pub fn build(history: &History) -> GraphSequence {
    let v = relative_motion(history);
    let (t_in, k) = (v.shape()[1], v.shape()[2]);
    let mut a = Array3::zeros((t_in, k, k));
    for t in 0..t_in {
        let v_t = v.index_axis(ndarray::Axis(1), t);
        let norm = normalize(&raw_adjacency(v_t));
        a.index_axis_mut(ndarray::Axis(0), t).assign(&norm);
    }
    GraphSequence { v, a }
}
