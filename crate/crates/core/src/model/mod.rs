//! The forecasting network.
//!
//! Layout of one forward pass for a scene with `K` agents (batch of one):
//!
//! | rows  | stage                              | output            |
//! |-------|------------------------------------|-------------------|
//! | 0–6   | BN, PReLU, conv 3×1, BN, dropout, conv 1×1, PReLU | `[1, 2, T_in, K]` |
//! | 7     | per-step adjacency contraction     | `[1, 2, T_in, K]` |
//! | 8–12  | BN, PReLU, conv 3×1, BN, softmax over time | `[1, 2, T_in, K]` |
//! | 13    | `F * phi(F) + F`                   | `[1, 2, T_in, K]` |
//! | 14–16a| conv 3×3, PReLU, conv 3×3 on `[1, T_in, 2, K]` | `[1, M*T_out, 2, K]` |
//! | 16b   | conv 3×3 on `[1, 2*T_in, 1, K]`    | `[1, M, 1, K]`    |
//! | 17a   | reshape                            | `[1, M, T_out, 2, K]` |
//!
//! Convolution weights are stored `[Cin, Cout, kh, kw]`.

mod checkpoint;
mod params;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::History;
use crate::error::{Error, Result};
use crate::graph::{self, GraphSequence};
use crate::tensor::{Mode, Real, Tape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ParamId, ParamStore};

/// Axis of the `[1, 2, T_in, K]` attention logits that the softmax normalizes.
pub const ATTENTION_AXIS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modes: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub dropout_rate: f64,
    pub prelu_init: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modes: 2,
            t_in: crate::dataset::T_IN,
            t_out: crate::dataset::T_OUT,
            d_in: 2,
            d_out: 2,
            dropout_rate: 0.1,
            prelu_init: 0.25,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_modes(modes: usize) -> Self {
        Self {
            modes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Parameter("mode count must be at least 1".into()));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Parameter("time horizons must be positive".into()));
        }
        if self.d_in != 2 || self.d_out != 2 {
            return Err(Error::Parameter(
                "only two-dimensional inputs and outputs are supported".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels of the trajectory stream, one per (mode, future step).
    pub fn traj_channels(&self) -> usize {
        self.modes * self.t_out
    }
}

/// Predicted futures for every agent of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Per-step relative motions, `[M, T_out, 2, K]`.
    pub displacements: Array4<f64>,
    /// Mode probabilities, `[M, K]`.
    pub probs: Array2<f64>,
}

impl PredictionSet {
    pub fn modes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn num_agents(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// Absolute future positions `[M, T_out, 2, K]`: last observed position plus
/// the running sum of predicted displacements.
pub fn to_absolute(pred: &PredictionSet, history: &History) -> Array4<f64> {
    let (m, t_out, _, k) = pred.displacements.dim();
    let mut out = Array4::zeros((m, t_out, 2, k));
    for a in 0..k {
        let last = history.last(a);
        for mode in 0..m {
            for d in 0..2 {
                let mut acc = last[d];
                for t in 0..t_out {
                    acc += pred.displacements[[mode, t, d, a]];
                    out[[mode, t, d, a]] = acc;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    pad: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    gcn_bn_in: BatchNorm,
    gcn_prelu_in: ParamId,
    gcn_conv_t: Conv,
    gcn_bn_out: BatchNorm,
    gcn_conv_1x1: Conv,
    gcn_prelu_out: ParamId,
    attn_bn_in: BatchNorm,
    attn_prelu: ParamId,
    attn_conv: Conv,
    attn_bn_out: BatchNorm,
    dec_conv: Conv,
    dec_prelu: ParamId,
    traj_conv: Conv,
    prob_conv: Conv,
}

/// One recorded forward pass; loss construction and `backward` happen on `tape`.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// `[M, T_out, 2, K]`.
    pub displacements: Var,
    /// `[M, K]`.
    pub probs: Var,
    /// Output shape of every layer-table row, in execution order.
    pub trace: Vec<(&'static str, Vec<usize>)>,
    bindings: Vec<(ParamId, Var)>,
    stat_updates: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> ForwardPass<T> {
    pub fn prediction(&self) -> PredictionSet {
        let d = self.tape.value(self.displacements);
        let p = self.tape.value(self.probs);
        let ds = d.shape();
        PredictionSet {
            displacements: Array4::from_shape_vec((ds[0], ds[1], ds[2], ds[3]), d.to_f64())
                .expect("displacement shape"),
            probs: Array2::from_shape_vec((p.shape()[0], p.shape()[1]), p.to_f64())
                .expect("probability shape"),
        }
    }

    /// Tape handle of a bound parameter.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bindings.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct StageModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layers: Layers,
}

fn conv_layer<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 4],
    pad: (usize, usize),
    rng: &mut R,
) -> Conv {
    let fan_in = (shape[0] * shape[2] * shape[3]) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Conv {
        weight: store.add(
            &format!("{name}.weight"),
            Tensor::from_f64(&shape, &w).unwrap(),
            true,
        ),
        bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[shape[1]]), true),
        pad,
    }
}

fn bn_layer<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> BatchNorm {
    BatchNorm {
        gamma: store.add(&format!("{name}.weight"), Tensor::full(&[c], T::one()), true),
        beta: store.add(&format!("{name}.bias"), Tensor::zeros(&[c]), true),
        mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
        var: store.add(&format!("{name}.running_var"), Tensor::full(&[c], T::one()), false),
    }
}

fn prelu_layer<T: Real>(store: &mut ParamStore<T>, name: &str, init: f64) -> ParamId {
    store.add(&format!("{name}.alpha"), Tensor::scalar(T::of(init)), true)
}

impl<T: Real> StageModel<T> {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = config.d_in;
        let (t_in, traj) = (config.t_in, config.traj_channels());
        let a = config.prelu_init;
        let layers = Layers {
            gcn_bn_in: bn_layer(&mut s, "gcn.l1.bn_in", c),
            gcn_prelu_in: prelu_layer(&mut s, "gcn.l1.prelu", a),
            gcn_conv_t: conv_layer(&mut s, "gcn.l1.conv", [c, c, 3, 1], (1, 0), &mut rng),
            gcn_bn_out: bn_layer(&mut s, "gcn.l1.bn_out", c),
            gcn_conv_1x1: conv_layer(&mut s, "gcn.l2.conv", [c, c, 1, 1], (0, 0), &mut rng),
            gcn_prelu_out: prelu_layer(&mut s, "gcn.l2.prelu", a),
            attn_bn_in: bn_layer(&mut s, "attn.bn_in", c),
            attn_prelu: prelu_layer(&mut s, "attn.prelu", a),
            attn_conv: conv_layer(&mut s, "attn.conv", [c, c, 3, 1], (1, 0), &mut rng),
            attn_bn_out: bn_layer(&mut s, "attn.bn_out", c),
            dec_conv: conv_layer(&mut s, "dec.conv", [t_in, traj, 3, 3], (1, 1), &mut rng),
            dec_prelu: prelu_layer(&mut s, "dec.prelu", a),
            traj_conv: conv_layer(&mut s, "traj.conv", [traj, traj, 3, 3], (1, 1), &mut rng),
            prob_conv: conv_layer(
                &mut s,
                "prob.conv",
                [c * t_in, config.modes, 3, 3],
                (1, 1),
                &mut rng,
            ),
        };
        Ok(Self {
            config,
            store: s,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> StageModel<U> {
        StageModel {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers,
        }
    }

    /// Records a forward pass on `tape`.
    ///
    /// Train mode uses batch statistics and dropout; the resulting running
    /// statistics are applied by [`StageModel::absorb`].
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        mut tape: Tape<T>,
        graph: &GraphSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let (t_in, k) = (graph.steps(), graph.num_agents());
        if t_in != cfg.t_in {
            return Err(Error::dim(
                "time",
                format!("model expects {} observed steps, graph has {t_in}", cfg.t_in),
            ));
        }
        if graph.a.shape() != [t_in, k, k] {
            return Err(Error::dim(
                "agents",
                format!("node attributes have {k} agents but adjacency is {:?}", graph.a.shape()),
            ));
        }
        if k == 0 {
            return Err(Error::dim("agents", "scene has no agents"));
        }

        let bindings: Vec<(ParamId, Var)> = self
            .store
            .trainable()
            .map(|(id, p)| (id, tape.param(&p.tensor)))
            .collect();
        let mut run = Run {
            model: self,
            tape,
            bindings: &bindings,
            trace: Vec::new(),
            stat_updates: Vec::new(),
            mode,
        };

        let v = Tensor::from_f64(&[1, 2, t_in, k], graph.v.as_slice().expect("contiguous V"))?;
        let x = run.tape.constant(v);
        // A[t]^T for the batched product [T, C, K] x [T, K, K]
        let a_t = graph.a.clone().permuted_axes([0, 2, 1]);
        let a_t: Vec<f64> = a_t.iter().copied().collect();
        let adj = run.tape.constant(Tensor::from_f64(&[t_in, k, k], &a_t)?);

        let l = self.layers;
        // graph convolution block
        let h = run.bn(x, l.gcn_bn_in, "0 gcn.l1.BatchNorm2d")?;
        let h = run.prelu(h, l.gcn_prelu_in, "1 gcn.l1.PReLU")?;
        let h = run.conv(h, l.gcn_conv_t, "2 gcn.l1.Conv2d")?;
        let h = run.bn(h, l.gcn_bn_out, "3 gcn.l1.BatchNorm2d")?;
        let h = run.tape.dropout(h, cfg.dropout_rate, mode, rng)?;
        run.record("4 gcn.l1.Dropout", h);
        let h = run.conv(h, l.gcn_conv_1x1, "5 gcn.l2.Conv2d")?;
        let h = run.prelu(h, l.gcn_prelu_out, "6 gcn.l2.PReLU")?;
        let c = cfg.d_in;
        let h = run.tape.permute(h, &[0, 2, 1, 3])?;
        let h = run.tape.reshape(h, &[t_in, c, k])?;
        let h = run.tape.matmul(h, adj)?;
        let h = run.tape.reshape(h, &[1, t_in, c, k])?;
        let feat = run.tape.permute(h, &[0, 2, 1, 3])?;
        run.record("7 graph conv update", feat);

        // multi-attention
        let phi = run.bn(feat, l.attn_bn_in, "8 attn.BatchNorm2d")?;
        let phi = run.prelu(phi, l.attn_prelu, "9 attn.PReLU")?;
        let phi = run.conv(phi, l.attn_conv, "10 attn.Conv2d")?;
        let phi = run.bn(phi, l.attn_bn_out, "11 attn.BatchNorm2d")?;
        let phi = run.tape.softmax(phi, ATTENTION_AXIS)?;
        run.record("12 attn.Softmax", phi);
        let weighted = run.tape.mul(phi, feat)?;
        let attended = run.tape.add(weighted, feat)?;
        run.record("13 multi-attention", attended);

        // trajectory stream
        let d = run.tape.permute(attended, &[0, 2, 1, 3])?;
        let d = run.conv(d, l.dec_conv, "14a d.Conv2d")?;
        let d = run.prelu(d, l.dec_prelu, "15a d.PReLU")?;
        let d = run.conv(d, l.traj_conv, "16a traj.Conv2d")?;

        // probability stream
        let p = run.tape.reshape(attended, &[1, c * t_in, 1, k])?;
        let p = run.conv(p, l.prob_conv, "16b prob.Conv2d")?;

        let d = run.tape.reshape(d, &[1, cfg.modes, cfg.t_out, 2, k])?;
        run.record("17a traj.reshape", d);
        let displacements = run.tape.reshape(d, &[cfg.modes, cfg.t_out, 2, k])?;
        let p = run.tape.softmax(p, 1)?;
        let probs = run.tape.reshape(p, &[cfg.modes, k])?;

        let Run {
            tape,
            trace,
            stat_updates,
            ..
        } = run;
        Ok(ForwardPass {
            tape,
            displacements,
            probs,
            trace,
            bindings,
            stat_updates,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        graph: &GraphSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        self.forward_on(Tape::new(), graph, mode, rng)
    }

    /// Eval-mode prediction for one scene history.
    pub fn predict(&self, history: &History) -> Result<PredictionSet> {
        let graph = graph::build(history);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(&graph, Mode::Eval, &mut rng)?.prediction())
    }

    /// Applies the running statistics of a train-mode pass and accumulates
    /// the gradients `backward` left on its tape into the parameter buffers.
    pub fn absorb(&mut self, pass: &ForwardPass<T>) {
        for (id, stats) in &pass.stat_updates {
            self.store
                .get_mut(*id)
                .tensor
                .values_mut()
                .copy_from_slice(stats);
        }
        for (id, var) in &pass.bindings {
            let g = pass.tape.grad(*var);
            let dst = self.store.get_mut(*id).tensor.grad_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d = *d + s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.store.zero_grad();
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_checkpoint(&self.store)
    }

    /// Rebuilds a model from checkpoint bytes; the mode count and horizons
    /// are read off the stored decoder weights.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let entries = decode_checkpoint(bytes)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
        };
        let prob = find("prob.conv.weight")?;
        let dec = find("dec.conv.weight")?;
        if prob.shape.len() != 4 || dec.shape.len() != 4 {
            return Err(Error::Checkpoint("decoder weights must be rank 4".into()));
        }
        let modes = prob.shape[1];
        let t_in = dec.shape[0];
        if modes == 0 || dec.shape[1] % modes != 0 {
            return Err(Error::Checkpoint(format!(
                "decoder channels {} not divisible by {modes} modes",
                dec.shape[1]
            )));
        }
        let config = ModelConfig {
            modes,
            t_in,
            t_out: dec.shape[1] / modes,
            ..ModelConfig::default()
        };
        let mut model = Self::new(config, 0)?;
        if entries.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                model.store.len()
            )));
        }
        for e in &entries {
            let values: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
            model.store.assign(&e.name, &e.shape, &values)?;
        }
        Ok(model)
    }
}

struct Run<'a, T: Real> {
    model: &'a StageModel<T>,
    tape: Tape<T>,
    bindings: &'a [(ParamId, Var)],
    trace: Vec<(&'static str, Vec<usize>)>,
    stat_updates: Vec<(ParamId, Vec<T>)>,
    mode: Mode,
}

impl<T: Real> Run<'_, T> {
    fn var(&self, id: ParamId) -> Var {
        self.bindings
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| *v)
            .expect("trainable parameter bound")
    }

    fn record(&mut self, row: &'static str, v: Var) {
        self.trace.push((row, self.tape.shape(v).to_vec()));
    }

    fn conv(&mut self, x: Var, c: Conv, row: &'static str) -> Result<Var> {
        let (w, b) = (self.var(c.weight), self.var(c.bias));
        let y = self.tape.conv2d(x, w, b, c.pad)?;
        self.record(row, y);
        Ok(y)
    }

    fn prelu(&mut self, x: Var, alpha: ParamId, row: &'static str) -> Result<Var> {
        let a = self.var(alpha);
        let y = self.tape.prelu(x, a)?;
        self.record(row, y);
        Ok(y)
    }

    fn bn(&mut self, x: Var, bn: BatchNorm, row: &'static str) -> Result<Var> {
        let store = &self.model.store;
        let mut mean = store.get(bn.mean).tensor.values().to_vec();
        let mut var = store.get(bn.var).tensor.values().to_vec();
        let cfg = &self.model.config;
        let (g, b) = (self.var(bn.gamma), self.var(bn.beta));
        let y = self.tape.batch_norm2d(
            x,
            g,
            b,
            &mut mean,
            &mut var,
            self.mode,
            cfg.bn_eps,
            cfg.bn_momentum,
        )?;
        if self.mode == Mode::Train {
            self.stat_updates.push((bn.mean, mean));
            self.stat_updates.push((bn.var, var));
        }
        self.record(row, y);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn history(k: usize, seed: u64) -> History {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array3::zeros((k, 8, 2));
        for a in 0..k {
            let (mut x, mut y) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let (vx, vy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            for t in 0..8 {
                x += vx + rng.gen_range(-0.05..0.05);
                y += vy + rng.gen_range(-0.05..0.05);
                p[[a, t, 0]] = x;
                p[[a, t, 1]] = y;
            }
        }
        History {
            agent_ids: (0..k as i64).collect(),
            positions: p,
        }
    }

    #[test]
    fn default_shapes() {
        let model = StageModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let pred = model.predict(&history(4, 2)).unwrap();
        assert_eq!(pred.displacements.shape(), &[2, 12, 2, 4]);
        assert_eq!(pred.probs.shape(), &[2, 4]);
    }

    #[test]
    fn single_mode_shapes() {
        let model = StageModel::<f32>::new(ModelConfig::with_modes(1), 1).unwrap();
        let g = graph::build(&history(3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&g, Mode::Train, &mut rng).unwrap();
        let last = pass.trace.iter().find(|(r, _)| r.starts_with("17a")).unwrap();
        assert_eq!(last.1, vec![1, 1, 12, 2, 3]);
        assert!(pass.prediction().probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn eval_is_deterministic() {
        let model = StageModel::<f32>::new(ModelConfig::default(), 3).unwrap();
        let h = history(3, 4);
        assert_eq!(model.predict(&h).unwrap(), model.predict(&h).unwrap());
    }

    #[test]
    fn zero_mode_config_rejected() {
        assert!(StageModel::<f32>::new(ModelConfig::with_modes(0), 0).is_err());
    }

    #[test]
    fn to_absolute_cases() {
        let h = history(2, 5);
        let zero = PredictionSet {
            displacements: Array4::zeros((2, 12, 2, 2)),
            probs: Array2::from_elem((2, 2), 0.5),
        };
        let abs = to_absolute(&zero, &h);
        for k in 0..2 {
            for t in 0..12 {
                assert_eq!(abs[[1, t, 0, k]], h.last(k)[0]);
                assert_eq!(abs[[1, t, 1, k]], h.last(k)[1]);
            }
        }
        let mut line = zero.clone();
        line.displacements.index_axis_mut(ndarray::Axis(2), 0).fill(1.0);
        let abs = to_absolute(&line, &h);
        for t in 0..12 {
            assert_eq!(abs[[0, t, 0, 0]], h.last(0)[0] + (t + 1) as f64);
            assert_eq!(abs[[0, t, 1, 0]], h.last(0)[1]);
        }
    }

    #[test]
    fn train_pass_updates_running_stats_only_through_absorb() {
        let mut model = StageModel::<f32>::new(ModelConfig::default(), 3).unwrap();
        let g = graph::build(&history(3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = model.params().by_name("gcn.l1.bn_in.running_mean").unwrap().clone();
        let pass = model.forward(&g, Mode::Train, &mut rng).unwrap();
        assert_eq!(model.params().by_name("gcn.l1.bn_in.running_mean").unwrap(), &before);
        model.absorb(&pass);
        assert_ne!(model.params().by_name("gcn.l1.bn_in.running_mean").unwrap(), &before);
    }
}
