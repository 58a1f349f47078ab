use rand::Rng;

use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used to prove the gradient suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate the convolution weight gradient.
    FlipConvWeightGrad,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    SumAxis(Var, Split),
    Cumsum(Var, Split),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PRelu(Var, Var),
    Dropout(Var, Vec<T>),
    Softmax(Var, Split),
    L2Norm(Var, usize),
    LnClamped(Var, T),
}

/// `outer × len × inner` view of a shape around one axis.
#[derive(Debug, Clone, Copy)]
struct Split {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Split {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

fn shape_err<T>(axis: &str, detail: String) -> Result<T> {
    Err(Error::dim(axis, detail))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Copy of a parameter tensor that does receive a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone().with_grad(true);
        t.zero_grad();
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].tensor.requires_grad());
        self.nodes.push(Node {
            tensor: Tensor::from_parts(shape, values, requires_grad),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("all", format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.values(a), self.values(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.values(a), self.values(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.values(a), self.values(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.values(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return shape_err(
                "all",
                format!("reshape {:?} -> {shape:?} changes element count", self.shape(a)),
            );
        }
        let v = self.values(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("perm", format!("{perm:?} is not a permutation of {rank} axes"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let v = permute_buf(self.values(a), &in_shape, perm);
        Ok(self.push(out_shape, v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Batched product `[..., m, k] x [..., k, n] -> [..., m, n]` with equal batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() {
            return shape_err("rank", format!("matmul needs equal ranks >= 2, got {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] {
            return shape_err("batch", format!("matmul batch axes differ: {sa:?} vs {sb:?}"));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return shape_err(
                &format!("{}", r - 1),
                format!("matmul inner extents differ: {k} vs {}", sb[r - 2]),
            );
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (va, vb) = (self.values(a), self.values(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let (pa, pb) = (&va[bi * m * k..], &vb[bi * k * n..]);
            for i in 0..m {
                for j in 0..n {
                    let s: f64 = (0..k).map(|p| pa[i * k + p].f64() * pb[p * n + j].f64()).sum();
                    out.push(T::of(s));
                }
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.values(a).iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![T::of(s)], Op::Sum(a), &[a])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let sp = Split::new(&shape, axis);
        let x = self.values(a);
        let mut out = Vec::with_capacity(sp.outer * sp.inner);
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let s: f64 = (0..sp.len).map(|l| x[sp.at(o, l, i)].f64()).sum();
                out.push(T::of(s));
            }
        }
        Ok(self.push(drop_axis(&shape, axis), out, Op::SumAxis(a, sp), &[a]))
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let sp = Split::new(&shape, axis);
        let x = self.values(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let mut acc = 0.0;
                for l in 0..sp.len {
                    acc += x[sp.at(o, l, i)].f64();
                    out[sp.at(o, l, i)] = T::of(acc);
                }
            }
        }
        Ok(self.push(shape, out, Op::Cumsum(a, sp), &[a]))
    }

    /// Cross-correlation of `x[B,Cin,H,W]` with `w[Cin,Cout,kh,kw]` plus `b[Cout]`,
    /// zero-padded by `pad = (ph, pw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: (usize, usize)) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 {
            return shape_err("input", format!("conv2d input must be rank 4, got {xs:?}"));
        }
        if ws.len() != 4 {
            return shape_err("weight", format!("conv2d weight must be rank 4, got {ws:?}"));
        }
        let [nb, cin, h, wd] = [xs[0], xs[1], xs[2], xs[3]];
        let [wcin, cout, kh, kw] = [ws[0], ws[1], ws[2], ws[3]];
        if wcin != cin {
            return shape_err("1", format!("conv2d input has {cin} channels, weight expects {wcin}"));
        }
        if bs != [cout] {
            return shape_err("bias", format!("conv2d bias {bs:?} does not match {cout} output channels"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!("conv2d kernel {kh}x{kw} must have odd extents")));
        }
        let (ho, wo) = match (
            (h + 2 * pad.0 + 1).checked_sub(kh),
            (wd + 2 * pad.1 + 1).checked_sub(kw),
        ) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return shape_err(
                    "2,3",
                    format!("conv2d kernel {kh}x{kw} with padding {pad:?} exceeds input {h}x{wd}"),
                )
            }
        };
        let geo = ConvGeom { nb, cin, h, wd, cout, kh, kw, ho, wo, ph: pad.0, pw: pad.1 };
        let (xv, wv, bv) = (self.values(x), self.values(w), self.values(b));
        let mut out = Vec::with_capacity(nb * cout * ho * wo);
        for bi in 0..nb {
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bv[co].f64();
                        for ci in 0..cin {
                            for di in 0..kh {
                                let Some(ii) = geo.src_row(i, di) else { continue };
                                for dj in 0..kw {
                                    let Some(jj) = geo.src_col(j, dj) else { continue };
                                    acc += xv[geo.x_at(bi, ci, ii, jj)].f64()
                                        * wv[geo.w_at(ci, co, di, dj)].f64();
                                }
                            }
                        }
                        out.push(T::of(acc));
                    }
                }
            }
        }
        Ok(self.push(vec![nb, cout, ho, wo], out, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    /// Per-channel batch normalization of `x[B,C,H,W]`.
    ///
    /// Train mode normalizes with the batch statistics over `(B,H,W)` and
    /// folds them into the running buffers; eval mode uses the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("input", format!("batch_norm2d input must be rank 4, got {xs:?}"));
        }
        let c = xs[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return shape_err(name, format!("expected [{c}], got {:?}", self.shape(v)));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("running_stats", format!("expected {c} channels"));
        }
        let sp = Split::new(&xs, 1);
        let count = (sp.outer * sp.inner) as f64;
        let xv = self.values(x);
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            s += xv[sp.at(o, ch, i)].f64();
                        }
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let d = xv[sp.at(o, ch, i)].f64() - mu;
                            ss += d * d;
                        }
                    }
                    let var = ss / count;
                    mean[ch] = mu;
                    inv_std[ch] = 1.0 / (var + eps).sqrt();
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
                    running_mean[ch] =
                        T::of((1.0 - momentum) * running_mean[ch].f64() + momentum * mu);
                    running_var[ch] =
                        T::of((1.0 - momentum) * running_var[ch].f64() + momentum * unbiased);
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = running_mean[ch].f64();
                    inv_std[ch] = 1.0 / (running_var[ch].f64() + eps).sqrt();
                }
            }
        }
        let (gv, bv) = (self.values(gamma), self.values(beta));
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..sp.outer {
            for ch in 0..c {
                let (g, b) = (gv[ch].f64(), bv[ch].f64());
                for i in 0..sp.inner {
                    let at = sp.at(o, ch, i);
                    out[at] = T::of(g * (xv[at].f64() - mean[ch]) * inv_std[ch] + b);
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(self.push(xs, out, op, &[x, gamma, beta]))
    }

    /// `x` where non-negative, `alpha * x` otherwise; `alpha` is a single shared slope.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.shape(alpha) != [1] {
            return shape_err("alpha", format!("prelu slope must be [1], got {:?}", self.shape(alpha)));
        }
        let a = self.values(alpha)[0];
        let v = self
            .values(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { a * v })
            .collect();
        Ok(self.push(self.shape(x).to_vec(), v, Op::PRelu(x, alpha), &[x, alpha]))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = zip_map(self.values(x), &mask, |a, m| a * m);
        Ok(self.push(self.shape(x).to_vec(), v, Op::Dropout(x, mask), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let sp = Split::new(&shape, axis);
        let xv = self.values(x);
        let mut out = vec![T::zero(); xv.len()];
        let mut e = vec![0.0; sp.len];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let mx = (0..sp.len)
                    .map(|l| xv[sp.at(o, l, i)].f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (l, el) in e.iter_mut().enumerate() {
                    *el = (xv[sp.at(o, l, i)].f64() - mx).exp();
                    z += *el;
                }
                for (l, el) in e.iter().enumerate() {
                    out[sp.at(o, l, i)] = T::of(el / z);
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax(x, sp), &[x]))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let out: Vec<T> = self
            .values(x)
            .chunks(len)
            .map(|c| T::of(c.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()))
            .collect();
        let out_shape = drop_axis(&shape, shape.len() - 1);
        self.push(out_shape, out, Op::L2Norm(x, len), &[x])
    }

    /// Natural log with the argument clamped from below at `floor`.
    pub fn ln_clamped(&mut self, x: Var, floor: T) -> Var {
        let v = self.values(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push(self.shape(x).to_vec(), v, Op::LnClamped(x, floor), &[x])
    }

    /// Accumulates d`loss`/d(node) into the gradient buffer of every
    /// gradient-requiring node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            self.backprop(i, &g, &mut adj);
            for (dst, src) in self.nodes[i].tensor.grad_mut().iter_mut().zip(&g) {
                *dst = *dst + *src;
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.tensor.values();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values(*a), self.values(*b));
                if let Some(da) = self.slot(adj, *a) {
                    for k in 0..g.len() {
                        da[k] = da[k] + g[k] * vb[k];
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for k in 0..g.len() {
                        db[k] = db[k] + g[k] * va[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(da) = self.slot(adj, *a) {
                    let mut inv = vec![0; perm.len()];
                    for (o, &p) in perm.iter().enumerate() {
                        inv[p] = o;
                    }
                    let back = permute_buf(g, node.tensor.shape(), &inv);
                    add_into(da, &back);
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.values(*a), self.values(*b));
                if let Some(da) = self.slot(adj, *a) {
                    for bi in 0..*batch {
                        for r in 0..m {
                            for p in 0..k {
                                let s: f64 = (0..n)
                                    .map(|c| g[bi * m * n + r * n + c].f64() * vb[bi * k * n + p * n + c].f64())
                                    .sum();
                                let at = bi * m * k + r * k + p;
                                da[at] = da[at] + T::of(s);
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for bi in 0..*batch {
                        for p in 0..k {
                            for c in 0..n {
                                let s: f64 = (0..m)
                                    .map(|r| va[bi * m * k + r * k + p].f64() * g[bi * m * n + r * n + c].f64())
                                    .sum();
                                let at = bi * k * n + p * n + c;
                                db[at] = db[at] + T::of(s);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SumAxis(a, sp) => {
                if let Some(da) = self.slot(adj, *a) {
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let gv = g[o * sp.inner + i];
                            for l in 0..sp.len {
                                let at = sp.at(o, l, i);
                                da[at] = da[at] + gv;
                            }
                        }
                    }
                }
            }
            Op::Cumsum(a, sp) => {
                if let Some(da) = self.slot(adj, *a) {
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let mut acc = 0.0;
                            for l in (0..sp.len).rev() {
                                acc += g[sp.at(o, l, i)].f64();
                                let at = sp.at(o, l, i);
                                da[at] = da[at] + T::of(acc);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, node.tensor.shape(), g, adj),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let sp = Split::new(xs, 1);
                let c = sp.len;
                let count = (sp.outer * sp.inner) as f64;
                let xv = self.values(*x);
                let gv = self.values(*gamma);
                let xhat = |at: usize, ch: usize| (xv[at].f64() - mean[ch]) * inv_std[ch];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..sp.outer {
                    for ch in 0..c {
                        for i in 0..sp.inner {
                            let at = sp.at(o, ch, i);
                            sum_g[ch] += g[at].f64();
                            sum_gx[ch] += g[at].f64() * xhat(at, ch);
                        }
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    for o in 0..sp.outer {
                        for ch in 0..c {
                            let scale = gv[ch].f64() * inv_std[ch];
                            for i in 0..sp.inner {
                                let at = sp.at(o, ch, i);
                                let d = if *batch_stats {
                                    scale / count
                                        * (count * g[at].f64() - sum_g[ch] - xhat(at, ch) * sum_gx[ch])
                                } else {
                                    scale * g[at].f64()
                                };
                                dx[at] = dx[at] + T::of(d);
                            }
                        }
                    }
                }
                if let Some(dg) = self.slot(adj, *gamma) {
                    for ch in 0..c {
                        dg[ch] = dg[ch] + T::of(sum_gx[ch]);
                    }
                }
                if let Some(db) = self.slot(adj, *beta) {
                    for ch in 0..c {
                        db[ch] = db[ch] + T::of(sum_g[ch]);
                    }
                }
            }
            Op::PRelu(x, alpha) => {
                let xv = self.values(*x);
                let a = self.values(*alpha)[0];
                if let Some(dx) = self.slot(adj, *x) {
                    for k in 0..g.len() {
                        let slope = if xv[k] >= T::zero() { T::one() } else { a };
                        dx[k] = dx[k] + g[k] * slope;
                    }
                }
                if let Some(da) = self.slot(adj, *alpha) {
                    let s: f64 = xv
                        .iter()
                        .zip(g)
                        .filter(|(v, _)| **v < T::zero())
                        .map(|(v, gk)| v.f64() * gk.f64())
                        .sum();
                    da[0] = da[0] + T::of(s);
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for k in 0..g.len() {
                        dx[k] = dx[k] + g[k] * mask[k];
                    }
                }
            }
            Op::Softmax(x, sp) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let dot: f64 = (0..sp.len)
                                .map(|l| g[sp.at(o, l, i)].f64() * out[sp.at(o, l, i)].f64())
                                .sum();
                            for l in 0..sp.len {
                                let at = sp.at(o, l, i);
                                dx[at] = dx[at] + T::of(out[at].f64() * (g[at].f64() - dot));
                            }
                        }
                    }
                }
            }
            Op::L2Norm(x, len) => {
                let xv = self.values(*x);
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, (&norm, &gr)) in out.iter().zip(g).enumerate() {
                        if norm == T::zero() {
                            continue;
                        }
                        let s = gr.f64() / norm.f64();
                        for c in 0..*len {
                            let at = r * len + c;
                            dx[at] = dx[at] + T::of(s * xv[at].f64());
                        }
                    }
                }
            }
            Op::LnClamped(x, floor) => {
                let xv = self.values(*x);
                if let Some(dx) = self.slot(adj, *x) {
                    for k in 0..g.len() {
                        if xv[k] > *floor {
                            dx[k] = dx[k] + g[k] / xv[k];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad: (usize, usize),
        out_shape: &[usize],
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geo = ConvGeom {
            nb: xs[0],
            cin: xs[1],
            h: xs[2],
            wd: xs[3],
            cout: ws[1],
            kh: ws[2],
            kw: ws[3],
            ho: out_shape[2],
            wo: out_shape[3],
            ph: pad.0,
            pw: pad.1,
        };
        let (xv, wv) = (self.values(x), self.values(w));
        if let Some(dx) = self.slot(adj, x) {
            let mut acc = vec![0.0; dx.len()];
            for bi in 0..geo.nb {
                for co in 0..geo.cout {
                    for i in 0..geo.ho {
                        for j in 0..geo.wo {
                            let gv = g[geo.o_at(bi, co, i, j)].f64();
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..geo.cin {
                                for di in 0..geo.kh {
                                    let Some(ii) = geo.src_row(i, di) else { continue };
                                    for dj in 0..geo.kw {
                                        let Some(jj) = geo.src_col(j, dj) else { continue };
                                        acc[geo.x_at(bi, ci, ii, jj)] +=
                                            gv * wv[geo.w_at(ci, co, di, dj)].f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx.iter_mut().zip(acc).for_each(|(d, a)| *d = *d + T::of(a));
        }
        if let Some(dw) = self.slot(adj, w) {
            let sign = if self.fault == Some(Fault::FlipConvWeightGrad) { -1.0 } else { 1.0 };
            for ci in 0..geo.cin {
                for co in 0..geo.cout {
                    for di in 0..geo.kh {
                        for dj in 0..geo.kw {
                            let mut s = 0.0;
                            for bi in 0..geo.nb {
                                for i in 0..geo.ho {
                                    let Some(ii) = geo.src_row(i, di) else { continue };
                                    for j in 0..geo.wo {
                                        let Some(jj) = geo.src_col(j, dj) else { continue };
                                        s += g[geo.o_at(bi, co, i, j)].f64() * xv[geo.x_at(bi, ci, ii, jj)].f64();
                                    }
                                }
                            }
                            let at = geo.w_at(ci, co, di, dj);
                            dw[at] = dw[at] + T::of(sign * s);
                        }
                    }
                }
            }
        }
        if let Some(db) = self.slot(adj, b) {
            for co in 0..geo.cout {
                let mut s = 0.0;
                for bi in 0..geo.nb {
                    for i in 0..geo.ho {
                        for j in 0..geo.wo {
                            s += g[geo.o_at(bi, co, i, j)].f64();
                        }
                    }
                }
                db[co] = db[co] + T::of(s);
            }
        }
    }

    /// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let t = &self.nodes[v.0].tensor;
        if !t.requires_grad() {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); t.numel()]))
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    nb: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    #[inline]
    fn src_row(&self, i: usize, di: usize) -> Option<usize> {
        (i + di).checked_sub(self.ph).filter(|&r| r < self.h)
    }
    #[inline]
    fn src_col(&self, j: usize, dj: usize) -> Option<usize> {
        (j + dj).checked_sub(self.pw).filter(|&c| c < self.wd)
    }
    #[inline]
    fn x_at(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.cin + c) * self.h + i) * self.wd + j
    }
    #[inline]
    fn w_at(&self, ci: usize, co: usize, di: usize, dj: usize) -> usize {
        ((ci * self.cout + co) * self.kh + di) * self.kw + dj
    }
    #[inline]
    fn o_at(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.cout + c) * self.ho + i) * self.wo + j
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(
            &axis.to_string(),
            format!("axis out of range for shape {shape:?}"),
        );
    }
    Ok(())
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders a row-major buffer so output axis `i` is input axis `perm[i]`.
fn permute_buf<T: Copy>(src: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(src.len());
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
