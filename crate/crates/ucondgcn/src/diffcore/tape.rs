use std::rc::Rc;

use rand::Rng;

use super::tensor::{numel_of, Tensor};
use crate::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics produced by [`Tape::batch_norm`], used by the
/// caller to maintain running averages for inference.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) variance.
    pub var: Vec<f64>,
}

/// One recorded primitive. Inputs always precede outputs in the arena, so a
/// single reverse sweep visits every use after its producer.
#[derive(Clone, Debug)]
enum Op {
    Affine { x: Var, w: Var, b: Var, out: Var },
    Conv1d { x: Var, w: Var, b: Var, out: Var, stride: usize, pad: usize },
    ConcatChannels { xs: Vec<Var>, out: Var },
    Relu { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Abs { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    MeanAxes { x: Var, out: Var, reduce: Vec<bool>, count: usize },
    GatherAvg { x: Var, out: Var, groups: Rc<Vec<Vec<usize>>> },
    AdjacencyBlend { x: Var, a: Var, out: Var, child_side: bool },
    BlendBases { alpha: Var, bases: Var, out: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, out: Var, mean: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    NormalizeFixed { x: Var, gamma: Var, beta: Var, out: Var, mean: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    Dropout { x: Var, out: Var, mask: Rc<Vec<f64>> },
    UpsampleLinear { x: Var, out: Var },
    SliceTime { x: Var, out: Var, start: usize },
    EuclidNormChannels { x: Var, out: Var },
    L1Norm { x: Var, out: Var },
    L2Norm { x: Var, out: Var },
    Reshape { x: Var, out: Var },
}

/// Gradients produced by one backward pass, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a leaf, zeros if the loss does not reach it.
    pub fn grad_or_zero(&self, v: Var, numel: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

/// Records primitives eagerly; values live in an arena indexed by [`Var`].
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a tensor as a leaf. Gradients flow to it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let id = self.values.len();
        self.values.push(t);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.values[v.0].data()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, t: Tensor, op: impl FnOnce(Var) -> Op) -> Var {
        let out = Var(self.values.len());
        self.values.push(t);
        let rec = op(out);
        self.ops.push(rec);
        out
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// `out[b, o, s...] = sum_c w[o, c] * x[b, c, s...] + bias[o]`.
    ///
    /// `x` has rank >= 2 with channels at axis 1; trailing axes are treated
    /// as flat spatial positions sharing the map.
    pub fn affine(&mut self, x: Var, w: Var, b: Var, op_name: &'static str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(shape_err(op_name, format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, in_c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let (out_c, w_in) = (ws[0], ws[1]);
        if w_in != in_c || bs[0] != out_c {
            return Err(shape_err(
                op_name,
                format!("x {xs:?} (C={in_c}) vs w {ws:?}, b {bs:?}"),
            ));
        }
        let mut out_shape = xs.clone();
        out_shape[1] = out_c;
        let mut out = vec![0.0; batch * out_c * spatial];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = self.data(b);
            for bi in 0..batch {
                for o in 0..out_c {
                    let row = &mut out[(bi * out_c + o) * spatial..(bi * out_c + o + 1) * spatial];
                    let bias = bd[o];
                    row.iter_mut().for_each(|v| *v = bias);
                    for c in 0..in_c {
                        let wv = wd[o * in_c + c];
                        if wv == 0.0 {
                            continue;
                        }
                        let xr = &xd[(bi * in_c + c) * spatial..(bi * in_c + c + 1) * spatial];
                        row.iter_mut().zip(xr).for_each(|(v, xv)| *v += wv * xv);
                    }
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, |out| Op::Affine { x, w, b, out }))
    }

    /// 1D convolution along the time axis of a `(B, C, T, N)` tensor with
    /// kernel `(O, C, K)` (odd `K`), symmetric zero padding, output length
    /// `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 3 || bs.len() != 1 {
            return Err(shape_err("conv1d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, in_c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, w_c, k) = (ws[0], ws[1], ws[2]);
        if w_c != in_c || bs[0] != out_c {
            return Err(shape_err("conv1d", format!("x {xs:?} vs w {ws:?}, b {bs:?}")));
        }
        if k % 2 == 0 {
            return Err(shape_err("conv1d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(shape_err("conv1d", "stride must be >= 1".into()));
        }
        let pad = (k - 1) / 2;
        let t_out = t_in.div_ceil(stride);
        let mut out = vec![0.0; batch * out_c * t_out * n];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = self.data(b);
            for bi in 0..batch {
                for o in 0..out_c {
                    let plane =
                        &mut out[(bi * out_c + o) * t_out * n..(bi * out_c + o + 1) * t_out * n];
                    plane.iter_mut().for_each(|v| *v = bd[o]);
                    for c in 0..in_c {
                        let xp = &xd[(bi * in_c + c) * t_in * n..(bi * in_c + c + 1) * t_in * n];
                        for tau in 0..k {
                            let wv = wd[(o * in_c + c) * k + tau];
                            if wv == 0.0 {
                                continue;
                            }
                            for tp in 0..t_out {
                                let ti = (tp * stride + tau) as isize - pad as isize;
                                if ti < 0 || ti >= t_in as isize {
                                    continue;
                                }
                                let src = &xp[ti as usize * n..(ti as usize + 1) * n];
                                let dst = &mut plane[tp * n..(tp + 1) * n];
                                dst.iter_mut().zip(src).for_each(|(v, s)| *v += wv * s);
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[batch, out_c, t_out, n], out)?;
        Ok(self.push(t, |out| Op::Conv1d { x, w, b, out, stride, pad }))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat_channels", format!("rank < 2: {first:?}")));
        }
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", first, s),
                ));
            }
            total_c += s[1];
        }
        let batch = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut out_shape = first.clone();
        out_shape[1] = total_c;
        let mut out = vec![0.0; batch * total_c * spatial];
        let mut c_off = 0;
        for &v in xs {
            let c = self.shape(v)[1];
            let xd = self.data(v);
            for bi in 0..batch {
                let src = &xd[bi * c * spatial..(bi + 1) * c * spatial];
                let dst = &mut out
                    [(bi * total_c + c_off) * spatial..(bi * total_c + c_off + c) * spatial];
                dst.copy_from_slice(src);
            }
            c_off += c;
        }
        let t = Tensor::new(&out_shape, out)?;
        let xs = xs.to_vec();
        Ok(self.push(t, |out| Op::ConcatChannels { xs, out }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let d: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), d).expect("same shape");
        self.push(t, |out| Op::Relu { x, out })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let d: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = Tensor::new(self.shape(x), d).expect("same shape");
        self.push(t, |out| Op::Sigmoid { x, out })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let d: Vec<f64> = self.data(x).iter().map(|&v| v.abs()).collect();
        let t = Tensor::new(self.shape(x), d).expect("same shape");
        self.push(t, |out| Op::Abs { x, out })
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let d: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), d)?;
        Ok(self.push(t, |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let d: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a), d)?;
        Ok(self.push(t, |out| Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let d: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), d)?;
        Ok(self.push(t, |out| Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let d: Vec<f64> = self.data(x).iter().map(|&v| c * v).collect();
        let t = Tensor::new(self.shape(x), d).expect("same shape");
        self.push(t, |out| Op::Scale { x, c, out })
    }

    /// Arithmetic mean over the listed axes; the output keeps the remaining
    /// axes (scalar shape `[]` when all axes reduce).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut reduce = vec![false; xs.len()];
        for &a in axes {
            if a >= xs.len() {
                return Err(shape_err("mean_axes", format!("axis {a} of {xs:?}")));
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> =
            xs.iter().zip(&reduce).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let count: usize = xs.iter().zip(&reduce).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        let mut out = vec![0.0; numel_of(&out_shape)];
        {
            let xd = self.data(x);
            let mut idx = vec![0usize; xs.len()];
            for &v in xd {
                let mut oi = 0;
                for (d, (&i, &r)) in idx.iter().zip(&reduce).enumerate() {
                    if !r {
                        oi = oi * xs[d] + i;
                    }
                }
                out[oi] += v;
                for d in (0..xs.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < xs[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, |out| Op::MeanAxes { x, out, reduce, count }))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    /// Regroups the last axis: `out[..., i] = mean over g in groups[i] of
    /// x[..., g]`, zero for empty groups. Covers incidence gathers (singleton
    /// groups), out-edge pooling, and index permutations.
    pub fn gather_avg(&mut self, x: Var, groups: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(shape_err("gather_avg", "scalar input".into()));
        }
        let l_in = *xs.last().unwrap();
        for (i, g) in groups.iter().enumerate() {
            if let Some(&bad) = g.iter().find(|&&e| e >= l_in) {
                return Err(shape_err(
                    "gather_avg",
                    format!("group {i} references index {bad} >= {l_in}"),
                ));
            }
        }
        let l_out = groups.len();
        let lead: usize = xs[..xs.len() - 1].iter().product();
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = l_out;
        let mut out = vec![0.0; lead * l_out];
        {
            let xd = self.data(x);
            for r in 0..lead {
                let src = &xd[r * l_in..(r + 1) * l_in];
                let dst = &mut out[r * l_out..(r + 1) * l_out];
                for (i, g) in groups.iter().enumerate() {
                    if g.is_empty() {
                        continue;
                    }
                    let s: f64 = g.iter().map(|&e| src[e]).sum();
                    dst[i] = s / g.len() as f64;
                }
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, |out| Op::GatherAvg { x, out, groups }))
    }

    /// Weighted aggregation over a per-sample connection matrix `a (B, J, J)`
    /// applied to `x (B, C, T, J)`:
    ///
    /// - `child_side = true`:  `out[b,c,t,i] = sum_j a[b,i,j] * x[b,c,t,j]`
    /// - `child_side = false`: `out[b,c,t,i] = sum_j a[b,j,i] * x[b,c,t,j]`
    pub fn adjacency_blend(&mut self, x: Var, a: Var, child_side: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let as_ = self.shape(a).to_vec();
        if xs.len() != 4 || as_.len() != 3 {
            return Err(shape_err("adjacency_blend", format!("x {xs:?}, a {as_:?}")));
        }
        let (batch, c, t, j) = (xs[0], xs[1], xs[2], xs[3]);
        if as_[0] != batch || as_[1] != j || as_[2] != j {
            return Err(shape_err(
                "adjacency_blend",
                format!("x {xs:?} (B={batch}, J={j}) vs a {as_:?}"),
            ));
        }
        let mut out = vec![0.0; batch * c * t * j];
        {
            let xd = self.data(x);
            let ad = self.data(a);
            for bi in 0..batch {
                let am = &ad[bi * j * j..(bi + 1) * j * j];
                for ci in 0..c {
                    for ti in 0..t {
                        let base = ((bi * c + ci) * t + ti) * j;
                        let xr = &xd[base..base + j];
                        let or = &mut out[base..base + j];
                        for i in 0..j {
                            let mut acc = 0.0;
                            if child_side {
                                let row = &am[i * j..(i + 1) * j];
                                for jj in 0..j {
                                    acc += row[jj] * xr[jj];
                                }
                            } else {
                                for jj in 0..j {
                                    acc += am[jj * j + i] * xr[jj];
                                }
                            }
                            or[i] = acc;
                        }
                    }
                }
            }
        }
        let tns = Tensor::new(&xs, out)?;
        Ok(self.push(tns, |out| Op::AdjacencyBlend { x, a, out, child_side }))
    }

    /// Linear blend of connection-matrix bases:
    /// `out[b, :, :] = sum_k alpha[b, k] * bases[k, :, :]`.
    pub fn blend_bases(&mut self, alpha: Var, bases: Var) -> Result<Var> {
        let al = self.shape(alpha).to_vec();
        let bs = self.shape(bases).to_vec();
        if al.len() != 2 || bs.len() != 3 || al[1] != bs[0] || bs[1] != bs[2] {
            return Err(shape_err("blend_bases", format!("alpha {al:?}, bases {bs:?}")));
        }
        let (batch, m) = (al[0], al[1]);
        let j = bs[1];
        let mut out = vec![0.0; batch * j * j];
        {
            let ad = self.data(alpha);
            let bd = self.data(bases);
            for bi in 0..batch {
                let dst = &mut out[bi * j * j..(bi + 1) * j * j];
                for k in 0..m {
                    let w = ad[bi * m + k];
                    if w == 0.0 {
                        continue;
                    }
                    let basis = &bd[k * j * j..(k + 1) * j * j];
                    dst.iter_mut().zip(basis).for_each(|(v, e)| *v += w * e);
                }
            }
        }
        let t = Tensor::new(&[batch, j, j], out)?;
        Ok(self.push(t, |out| Op::BlendBases { alpha, bases, out }))
    }

    /// Train-mode per-channel batch normalization over all axes but axis 1,
    /// returning the normalized output and the batch statistics so the caller
    /// can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("rank < 2: {xs:?}")));
        }
        let (batch, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("x {:?} vs gamma {:?}, beta {:?}", xs, self.shape(gamma), self.shape(beta)),
            ));
        }
        let n_red = batch * spatial;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xd = self.data(x);
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..batch {
                    let row = &xd[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    s += row.iter().sum::<f64>();
                }
                let m = s / n_red as f64;
                let mut v = 0.0;
                for bi in 0..batch {
                    let row = &xd[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    v += row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = v / n_red as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; batch * c * spatial];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for bi in 0..batch {
                for ci in 0..c {
                    let row = &xd[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    let dst = &mut out[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    let (m, is, g, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                    dst.iter_mut().zip(row).for_each(|(o, &v)| *o = g * (v - m) * is + be);
                }
            }
        }
        let stats = BatchStats { mean: mean.clone(), var };
        let mean = Rc::new(mean);
        let inv_std = Rc::new(inv_std);
        let t = Tensor::new(&xs, out)?;
        let v = self.push(t, |out| Op::BatchNorm { x, gamma, beta, out, mean, inv_std });
        Ok((v, stats))
    }

    /// Inference-mode normalization with fixed (running) statistics.
    pub fn normalize_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("normalize_fixed", format!("rank < 2: {xs:?}")));
        }
        let (batch, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if mean.len() != c || var.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c]
        {
            return Err(shape_err(
                "normalize_fixed",
                format!("x {xs:?} vs stats len {}/{}", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; batch * c * spatial];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for bi in 0..batch {
                for ci in 0..c {
                    let row = &xd[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    let dst = &mut out[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    let (m, is, g, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                    dst.iter_mut().zip(row).for_each(|(o, &v)| *o = g * (v - m) * is + be);
                }
            }
        }
        let mean = Rc::new(mean.to_vec());
        let inv_std = Rc::new(inv_std);
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, |out| Op::NormalizeFixed { x, gamma, beta, out, mean, inv_std }))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and the
    /// survivors are scaled by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let d: Vec<f64> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x), d)?;
        let mask = Rc::new(mask);
        Ok(self.push(t, |out| Op::Dropout { x, out, mask }))
    }

    /// Linear interpolation along the time axis of `(B, C, T, N)` to length
    /// `t_out`, endpoints aligned.
    pub fn upsample_linear(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample_linear", format!("rank != 4: {xs:?}")));
        }
        if t_out == 0 {
            return Err(shape_err("upsample_linear", "t_out == 0".into()));
        }
        let (batch, c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; batch * c * t_out * n];
        {
            let xd = self.data(x);
            let factor = if t_out > 1 && t_in > 1 {
                (t_in - 1) as f64 / (t_out - 1) as f64
            } else {
                0.0
            };
            for bc in 0..batch * c {
                let src = &xd[bc * t_in * n..(bc + 1) * t_in * n];
                let dst = &mut out[bc * t_out * n..(bc + 1) * t_out * n];
                for tp in 0..t_out {
                    let pos = tp as f64 * factor;
                    let t0 = pos.floor() as usize;
                    let t1 = (t0 + 1).min(t_in - 1);
                    let w1 = pos - t0 as f64;
                    let w0 = 1.0 - w1;
                    let s0 = &src[t0 * n..(t0 + 1) * n];
                    let s1 = &src[t1 * n..(t1 + 1) * n];
                    let d = &mut dst[tp * n..(tp + 1) * n];
                    for i in 0..n {
                        d[i] = w0 * s0[i] + w1 * s1[i];
                    }
                }
            }
        }
        let t = Tensor::new(&[batch, c, t_out, n], out)?;
        Ok(self.push(t, |out| Op::UpsampleLinear { x, out }))
    }

    /// Contiguous slice `[start, start+len)` along the time axis of
    /// `(B, C, T, N)`.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("slice_time", format!("rank != 4: {xs:?}")));
        }
        let (batch, c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
        if len == 0 || start + len > t_in {
            return Err(shape_err(
                "slice_time",
                format!("[{start}, {}) of T={t_in}", start + len),
            ));
        }
        let mut out = vec![0.0; batch * c * len * n];
        {
            let xd = self.data(x);
            for bc in 0..batch * c {
                let src = &xd[(bc * t_in + start) * n..(bc * t_in + start + len) * n];
                out[bc * len * n..(bc + 1) * len * n].copy_from_slice(src);
            }
        }
        let t = Tensor::new(&[batch, c, len, n], out)?;
        Ok(self.push(t, |out| Op::SliceTime { x, out, start }))
    }

    /// Per-position Euclidean norm over channels: `(B, C, T, N) -> (B, T, N)`
    /// with `out[b,t,n] = sqrt(sum_c x[b,c,t,n]^2)`. Subgradient 0 at 0.
    pub fn euclid_norm_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("euclid_norm_channels", format!("rank != 4: {xs:?}")));
        }
        let (batch, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; batch * t * n];
        {
            let xd = self.data(x);
            for bi in 0..batch {
                for ci in 0..c {
                    let plane = &xd[(bi * c + ci) * t * n..(bi * c + ci + 1) * t * n];
                    let acc = &mut out[bi * t * n..(bi + 1) * t * n];
                    acc.iter_mut().zip(plane).for_each(|(a, &v)| *a += v * v);
                }
            }
            out.iter_mut().for_each(|v| *v = v.sqrt());
        }
        let t = Tensor::new(&[batch, t, n], out)?;
        Ok(self.push(t, |out| Op::EuclidNormChannels { x, out }))
    }

    /// Sum of absolute values, a scalar.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), |out| Op::L1Norm { x, out })
    }

    /// Euclidean norm of all elements, a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s.sqrt()), |out| Op::L2Norm { x, out })
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, |out| Op::Reshape { x, out }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`: every recorded op adds its
    /// vector-Jacobian product into its inputs' accumulators.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        // Leaves marked requires_grad but unreachable from the loss get zeros.
        for (i, t) in self.values.iter().enumerate() {
            if t.requires_grad() && grads[i].is_none() {
                grads[i] = Some(vec![0.0; t.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Affine { x, w, b, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, in_c) = (xs[0], xs[1]);
                let out_c = self.shape(*w)[0];
                let spatial: usize = xs[2..].iter().product();
                let xd = self.data(*x);
                let wd = self.data(*w);
                {
                    let dx = Self::accumulate(grads, *x, xd.len());
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyr = &dy[(bi * out_c + o) * spatial..(bi * out_c + o + 1) * spatial];
                            for c in 0..in_c {
                                let wv = wd[o * in_c + c];
                                if wv == 0.0 {
                                    continue;
                                }
                                let dxr = &mut dx
                                    [(bi * in_c + c) * spatial..(bi * in_c + c + 1) * spatial];
                                dxr.iter_mut().zip(dyr).for_each(|(g, d)| *g += wv * d);
                            }
                        }
                    }
                }
                {
                    let dw = Self::accumulate(grads, *w, out_c * in_c);
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyr = &dy[(bi * out_c + o) * spatial..(bi * out_c + o + 1) * spatial];
                            for c in 0..in_c {
                                let xr = &xd
                                    [(bi * in_c + c) * spatial..(bi * in_c + c + 1) * spatial];
                                let dot: f64 = dyr.iter().zip(xr).map(|(d, x)| d * x).sum();
                                dw[o * in_c + c] += dot;
                            }
                        }
                    }
                }
                {
                    let db = Self::accumulate(grads, *b, out_c);
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyr = &dy[(bi * out_c + o) * spatial..(bi * out_c + o + 1) * spatial];
                            db[o] += dyr.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, out, stride, pad } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, in_c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(*w);
                let (out_c, k) = (ws[0], ws[2]);
                let t_out = t_in.div_ceil(*stride);
                let xd = self.data(*x);
                let wd = self.data(*w);
                {
                    let dx = Self::accumulate(grads, *x, xd.len());
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyp = &dy
                                [(bi * out_c + o) * t_out * n..(bi * out_c + o + 1) * t_out * n];
                            for c in 0..in_c {
                                let dxp = &mut dx
                                    [(bi * in_c + c) * t_in * n..(bi * in_c + c + 1) * t_in * n];
                                for tau in 0..k {
                                    let wv = wd[(o * in_c + c) * k + tau];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for tp in 0..t_out {
                                        let ti = (tp * stride + tau) as isize - *pad as isize;
                                        if ti < 0 || ti >= t_in as isize {
                                            continue;
                                        }
                                        let dst = &mut dxp
                                            [ti as usize * n..(ti as usize + 1) * n];
                                        let src = &dyp[tp * n..(tp + 1) * n];
                                        dst.iter_mut().zip(src).for_each(|(g, d)| *g += wv * d);
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dw = Self::accumulate(grads, *w, wd.len());
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyp = &dy
                                [(bi * out_c + o) * t_out * n..(bi * out_c + o + 1) * t_out * n];
                            for c in 0..in_c {
                                let xp = &xd
                                    [(bi * in_c + c) * t_in * n..(bi * in_c + c + 1) * t_in * n];
                                for tau in 0..k {
                                    let mut acc = 0.0;
                                    for tp in 0..t_out {
                                        let ti = (tp * stride + tau) as isize - *pad as isize;
                                        if ti < 0 || ti >= t_in as isize {
                                            continue;
                                        }
                                        let xr = &xp[ti as usize * n..(ti as usize + 1) * n];
                                        let dr = &dyp[tp * n..(tp + 1) * n];
                                        acc += dr.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>();
                                    }
                                    dw[(o * in_c + c) * k + tau] += acc;
                                }
                            }
                        }
                    }
                }
                {
                    let db = Self::accumulate(grads, *b, out_c);
                    for bi in 0..batch {
                        for o in 0..out_c {
                            let dyp = &dy
                                [(bi * out_c + o) * t_out * n..(bi * out_c + o + 1) * t_out * n];
                            db[o] += dyp.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ConcatChannels { xs, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let os = self.shape(*out);
                let batch = os[0];
                let total_c = os[1];
                let spatial: usize = os[2..].iter().product();
                let mut c_off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let numel = self.value(v).numel();
                    let dx = Self::accumulate(grads, v, numel);
                    for bi in 0..batch {
                        let src = &dy[(bi * total_c + c_off) * spatial
                            ..(bi * total_c + c_off + c) * spatial];
                        let dst = &mut dx[bi * c * spatial..(bi + 1) * c * spatial];
                        dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                    c_off += c;
                }
            }
            Op::Relu { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xd = self.data(*x);
                let dx = Self::accumulate(grads, *x, xd.len());
                dx.iter_mut()
                    .zip(xd)
                    .zip(&dy)
                    .for_each(|((g, &v), d)| *g += if v > 0.0 { *d } else { 0.0 });
            }
            Op::Sigmoid { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let yd = self.data(*out);
                let dx = Self::accumulate(grads, *x, yd.len());
                dx.iter_mut()
                    .zip(yd)
                    .zip(&dy)
                    .for_each(|((g, &y), d)| *g += d * y * (1.0 - y));
            }
            Op::Abs { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xd = self.data(*x);
                let dx = Self::accumulate(grads, *x, xd.len());
                dx.iter_mut().zip(xd).zip(&dy).for_each(|((g, &v), d)| {
                    *g += d * if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Add { a, b, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let n = dy.len();
                Self::accumulate(grads, *a, n)
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(g, d)| *g += d);
                Self::accumulate(grads, *b, n)
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::Sub { a, b, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let n = dy.len();
                Self::accumulate(grads, *a, n)
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(g, d)| *g += d);
                Self::accumulate(grads, *b, n)
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(g, d)| *g -= d);
            }
            Op::Mul { a, b, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let ad = self.data(*a);
                let bd = self.data(*b);
                Self::accumulate(grads, *a, ad.len())
                    .iter_mut()
                    .zip(bd)
                    .zip(&dy)
                    .for_each(|((g, &bv), d)| *g += d * bv);
                Self::accumulate(grads, *b, bd.len())
                    .iter_mut()
                    .zip(ad)
                    .zip(&dy)
                    .for_each(|((g, &av), d)| *g += d * av);
            }
            Op::Scale { x, c, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let n = dy.len();
                Self::accumulate(grads, *x, n)
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(g, d)| *g += c * d);
            }
            Op::MeanAxes { x, out, reduce, count } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x).to_vec();
                let inv = 1.0 / *count as f64;
                let numel = self.value(*x).numel();
                let dx = Self::accumulate(grads, *x, numel);
                let mut idx = vec![0usize; xs.len()];
                for g in dx.iter_mut() {
                    let mut oi = 0;
                    for (d, (&i, &r)) in idx.iter().zip(reduce).enumerate() {
                        if !r {
                            oi = oi * xs[d] + i;
                        }
                    }
                    *g += dy[oi] * inv;
                    for d in (0..xs.len()).rev() {
                        idx[d] += 1;
                        if idx[d] < xs[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
            }
            Op::GatherAvg { x, out, groups } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let l_in = *xs.last().unwrap();
                let l_out = groups.len();
                let lead: usize = xs[..xs.len() - 1].iter().product();
                let numel = self.value(*x).numel();
                let dx = Self::accumulate(grads, *x, numel);
                for r in 0..lead {
                    let dyr = &dy[r * l_out..(r + 1) * l_out];
                    let dxr = &mut dx[r * l_in..(r + 1) * l_in];
                    for (i, g) in groups.iter().enumerate() {
                        if g.is_empty() {
                            continue;
                        }
                        let share = dyr[i] / g.len() as f64;
                        for &e in g {
                            dxr[e] += share;
                        }
                    }
                }
            }
            Op::AdjacencyBlend { x, a, out, child_side } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c, t, j) = (xs[0], xs[1], xs[2], xs[3]);
                let xd = self.data(*x);
                let ad = self.data(*a);
                {
                    let dx = Self::accumulate(grads, *x, xd.len());
                    for bi in 0..batch {
                        let am = &ad[bi * j * j..(bi + 1) * j * j];
                        for ci in 0..c {
                            for ti in 0..t {
                                let base = ((bi * c + ci) * t + ti) * j;
                                let dyr = &dy[base..base + j];
                                let dxr = &mut dx[base..base + j];
                                for i in 0..j {
                                    let d = dyr[i];
                                    if d == 0.0 {
                                        continue;
                                    }
                                    if *child_side {
                                        let row = &am[i * j..(i + 1) * j];
                                        dxr.iter_mut()
                                            .zip(row)
                                            .for_each(|(g, &w)| *g += d * w);
                                    } else {
                                        for jj in 0..j {
                                            dxr[jj] += d * am[jj * j + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let da = Self::accumulate(grads, *a, ad.len());
                    for bi in 0..batch {
                        let dam = &mut da[bi * j * j..(bi + 1) * j * j];
                        for ci in 0..c {
                            for ti in 0..t {
                                let base = ((bi * c + ci) * t + ti) * j;
                                let dyr = &dy[base..base + j];
                                let xr = &xd[base..base + j];
                                for i in 0..j {
                                    let d = dyr[i];
                                    if d == 0.0 {
                                        continue;
                                    }
                                    if *child_side {
                                        let row = &mut dam[i * j..(i + 1) * j];
                                        row.iter_mut()
                                            .zip(xr)
                                            .for_each(|(g, &xv)| *g += d * xv);
                                    } else {
                                        for jj in 0..j {
                                            dam[jj * j + i] += d * xr[jj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BlendBases { alpha, bases, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let al = self.shape(*alpha);
                let (batch, m) = (al[0], al[1]);
                let j = self.shape(*bases)[1];
                let ad = self.data(*alpha);
                let bd = self.data(*bases);
                {
                    let da = Self::accumulate(grads, *alpha, batch * m);
                    for bi in 0..batch {
                        let dyb = &dy[bi * j * j..(bi + 1) * j * j];
                        for k in 0..m {
                            let basis = &bd[k * j * j..(k + 1) * j * j];
                            let dot: f64 = dyb.iter().zip(basis).map(|(d, e)| d * e).sum();
                            da[bi * m + k] += dot;
                        }
                    }
                }
                {
                    let db = Self::accumulate(grads, *bases, bd.len());
                    for bi in 0..batch {
                        let dyb = &dy[bi * j * j..(bi + 1) * j * j];
                        for k in 0..m {
                            let w = ad[bi * m + k];
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut db[k * j * j..(k + 1) * j * j];
                            dst.iter_mut().zip(dyb).for_each(|(g, d)| *g += w * d);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, out, mean, inv_std } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let n_red = (batch * spatial) as f64;
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                // Per channel: sum_dy, sum_dy_xhat.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..batch {
                    for ci in 0..c {
                        let off = (bi * c + ci) * spatial;
                        let (m, is) = (mean[ci], inv_std[ci]);
                        for s in 0..spatial {
                            let d = dy[off + s];
                            sum_dy[ci] += d;
                            sum_dy_xhat[ci] += d * (xd[off + s] - m) * is;
                        }
                    }
                }
                {
                    let dx = Self::accumulate(grads, *x, xd.len());
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let (m, is, g) = (mean[ci], inv_std[ci], gd[ci]);
                            let mdy = sum_dy[ci] / n_red;
                            let mdyx = sum_dy_xhat[ci] / n_red;
                            for s in 0..spatial {
                                let xhat = (xd[off + s] - m) * is;
                                dx[off + s] += g * is * (dy[off + s] - mdy - xhat * mdyx);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *gamma, c)
                    .iter_mut()
                    .zip(&sum_dy_xhat)
                    .for_each(|(g, d)| *g += d);
                Self::accumulate(grads, *beta, c)
                    .iter_mut()
                    .zip(&sum_dy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::NormalizeFixed { x, gamma, beta, out, mean, inv_std } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                {
                    let dx = Self::accumulate(grads, *x, xd.len());
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let gis = gd[ci] * inv_std[ci];
                            for s in 0..spatial {
                                dx[off + s] += dy[off + s] * gis;
                            }
                        }
                    }
                }
                {
                    let dg = Self::accumulate(grads, *gamma, c);
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let (m, is) = (mean[ci], inv_std[ci]);
                            for s in 0..spatial {
                                dg[ci] += dy[off + s] * (xd[off + s] - m) * is;
                            }
                        }
                    }
                }
                {
                    let db = Self::accumulate(grads, *beta, c);
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            for s in 0..spatial {
                                db[ci] += dy[off + s];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, out, mask } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let dx = Self::accumulate(grads, *x, mask.len());
                dx.iter_mut()
                    .zip(mask.iter())
                    .zip(&dy)
                    .for_each(|((g, &m), d)| *g += d * m);
            }
            Op::UpsampleLinear { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
                let t_out = self.shape(*out)[2];
                let numel = self.value(*x).numel();
                let dx = Self::accumulate(grads, *x, numel);
                let factor = if t_out > 1 && t_in > 1 {
                    (t_in - 1) as f64 / (t_out - 1) as f64
                } else {
                    0.0
                };
                for bc in 0..batch * c {
                    let dyp = &dy[bc * t_out * n..(bc + 1) * t_out * n];
                    let dxp = &mut dx[bc * t_in * n..(bc + 1) * t_in * n];
                    for tp in 0..t_out {
                        let pos = tp as f64 * factor;
                        let t0 = pos.floor() as usize;
                        let t1 = (t0 + 1).min(t_in - 1);
                        let w1 = pos - t0 as f64;
                        let w0 = 1.0 - w1;
                        let src = &dyp[tp * n..(tp + 1) * n];
                        for i in 0..n {
                            dxp[t0 * n + i] += w0 * src[i];
                        }
                        if w1 != 0.0 {
                            for i in 0..n {
                                dxp[t1 * n + i] += w1 * src[i];
                            }
                        }
                    }
                }
            }
            Op::SliceTime { x, out, start } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c, t_in, n) = (xs[0], xs[1], xs[2], xs[3]);
                let len = self.shape(*out)[2];
                let numel = self.value(*x).numel();
                let dx = Self::accumulate(grads, *x, numel);
                for bc in 0..batch * c {
                    let src = &dy[bc * len * n..(bc + 1) * len * n];
                    let dst = &mut dx[(bc * t_in + start) * n..(bc * t_in + start + len) * n];
                    dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            }
            Op::EuclidNormChannels { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let xs = self.shape(*x);
                let (batch, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
                let xd = self.data(*x);
                let yd = self.data(*out);
                let dx = Self::accumulate(grads, *x, xd.len());
                for bi in 0..batch {
                    for ci in 0..c {
                        let off = (bi * c + ci) * t * n;
                        let yoff = bi * t * n;
                        for s in 0..t * n {
                            let y = yd[yoff + s];
                            if y > 0.0 {
                                dx[off + s] += dy[yoff + s] * xd[off + s] / y;
                            }
                        }
                    }
                }
            }
            Op::L1Norm { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let d = dy[0];
                let xd = self.data(*x);
                let dx = Self::accumulate(grads, *x, xd.len());
                dx.iter_mut().zip(xd).for_each(|(g, &v)| {
                    *g += d * if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::L2Norm { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let d = dy[0];
                let norm = self.data(*out)[0];
                if norm == 0.0 {
                    return;
                }
                let xd = self.data(*x);
                let dx = Self::accumulate(grads, *x, xd.len());
                dx.iter_mut().zip(xd).for_each(|(g, &v)| *g += d * v / norm);
            }
            Op::Reshape { x, out } => {
                let Some(dy) = grads[out.0].clone() else { return };
                let dx = Self::accumulate(grads, *x, dy.len());
                dx.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
            }
        }
    }
}
