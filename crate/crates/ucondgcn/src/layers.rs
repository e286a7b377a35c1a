//! Building blocks: directed graph convolution (DGConv) and its conditional
//! variant (CondDGConv), the routing function over connection-matrix bases,
//! temporal convolution, spatial-temporal blocks, temporal resampling, and
//! the fully-connected output head.
//!
//! A DGConv is two steps applied at every (batch, time) position:
//!
//! 1. node update — each node is recomputed from `[in-edge feature; own
//!    feature; mean of out-edge features]` through a shared affine map and
//!    ReLU (the root's in-edge slot and leaves' out-edge slot are zeros);
//! 2. edge update — each edge is recomputed from `[source node; own feature;
//!    target node]` the same way.
//!
//! CondDGConv inserts a conditional node update between them: a routing
//! function (global average pool → affine → sigmoid) predicts per-sample
//! blend weights α over trainable J×J bases, A = Σᵢ αᵢ·𝓔ᵢ, and each node
//! aggregates `[Σⱼ A[j,i]·f(n′ⱼ); f(n′ᵢ); Σⱼ A[i,j]·f(n′ⱼ)]` — column
//! reads collect from parents, row reads collect from children, and signed
//! weights express signed dependence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{BatchStats, Tape, Tensor, Var};
use crate::params::{ParamBinding, ParamId, ParamStore};
use crate::skeleton::IncidenceMaps;
use crate::{Error, Result};

/// Epsilon inside normalization denominators.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum for running-statistic updates (`new = (1-m)*old + m*batch`).
pub const NORM_MOMENTUM: f64 = 0.1;

/// Everything a layer needs to evaluate itself on one tape.
pub struct FwdCtx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub binding: &'a ParamBinding,
    /// Train mode: batch statistics for normalization, dropout active.
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    /// Batch statistics recorded during the pass, to be folded into running
    /// statistics by the caller after the step.
    pub stat_updates: Vec<StatUpdate>,
    /// Parameter ids rerouted to externally supplied tape variables
    /// (used by the gradient checker to make one parameter the probe).
    pub overrides: Vec<(ParamId, Var)>,
}

impl<'a> FwdCtx<'a> {
    pub fn new(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        binding: &'a ParamBinding,
        train: bool,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        FwdCtx { tape, store, binding, train, rng, stat_updates: Vec::new(), overrides: Vec::new() }
    }

    /// The tape variable carrying parameter `id`.
    pub fn var(&self, id: ParamId) -> Var {
        self.overrides
            .iter()
            .find(|(o, _)| *o == id)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| self.binding.var(id))
    }
}

/// One pending running-statistics update.
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub stats: BatchStats,
}

/// Folds recorded batch statistics into the store's running statistics.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let mean = store.get_mut(u.mean_id).data_mut();
        for (m, &b) in mean.iter_mut().zip(&u.stats.mean) {
            *m = (1.0 - NORM_MOMENTUM) * *m + NORM_MOMENTUM * b;
        }
        let var = store.get_mut(u.var_id).data_mut();
        for (v, &b) in var.iter_mut().zip(&u.stats.var) {
            *v = (1.0 - NORM_MOMENTUM) * *v + NORM_MOMENTUM * b;
        }
    }
}

// ── parameter groups ───────────────────────────────────────────────────

/// Per-channel normalization parameters plus running statistics.
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c])),
            running_mean: store.add_state(format!("{prefix}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add_state(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }
}

/// Normalizes `x` per channel: batch statistics in train mode (recording a
/// running-stat update), running statistics in eval mode.
pub fn apply_norm(ctx: &mut FwdCtx, x: Var, p: &NormParams) -> Result<Var> {
    let gamma = ctx.var(p.gamma);
    let beta = ctx.var(p.beta);
    if ctx.train {
        let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, NORM_EPS)?;
        ctx.stat_updates.push(StatUpdate {
            mean_id: p.running_mean,
            var_id: p.running_var,
            stats,
        });
        Ok(y)
    } else {
        let mean = ctx.store.get(p.running_mean).data().to_vec();
        let var = ctx.store.get(p.running_var).data().to_vec();
        ctx.tape.normalize_fixed(x, gamma, beta, &mean, &var, NORM_EPS)
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Affine map of one graph-convolution step: weight over three concatenated
/// feature slots, bias, optional normalization before the ReLU.
pub struct StepParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormParams>,
}

impl StepParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        out_c: usize,
        norm: bool,
    ) -> Self {
        let bound = 1.0 / (in_width as f64).sqrt();
        StepParams {
            weight: store
                .add(format!("{prefix}.weight"), uniform_tensor(rng, &[out_c, in_width], bound)),
            bias: store.add(format!("{prefix}.bias"), uniform_tensor(rng, &[out_c], bound)),
            norm: norm.then(|| NormParams::new(store, prefix, out_c)),
        }
    }
}

/// Shared core of all three steps: concat slots → affine → (norm) → ReLU.
fn apply_step(ctx: &mut FwdCtx, slots: &[Var], p: &StepParams) -> Result<Var> {
    let x = ctx.tape.concat_channels(slots)?;
    let w = ctx.var(p.weight);
    let b = ctx.var(p.bias);
    let mut y = ctx.tape.affine(x, w, b, "graph_step")?;
    if let Some(norm) = &p.norm {
        y = apply_norm(ctx, y, norm)?;
    }
    Ok(ctx.tape.relu(y))
}

/// Parameters of one DGConv/CondDGConv layer: node step, optional
/// conditional step, edge step.
pub struct GraphConvParams {
    pub node_step: StepParams,
    pub cond_step: Option<StepParams>,
    pub edge_step: StepParams,
}

impl GraphConvParams {
    /// `c_node_in`/`c_edge_in` are the incoming stream widths; both streams
    /// leave with `c_out` channels. `cond` adds the conditional node step.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_node_in: usize,
        c_edge_in: usize,
        c_out: usize,
        cond: bool,
        norm: bool,
    ) -> Self {
        let node_in = 2 * c_edge_in + c_node_in;
        let cond_in = 3 * c_out;
        let edge_in = 2 * c_out + c_edge_in;
        GraphConvParams {
            node_step: StepParams::new(store, rng, &format!("{prefix}.node"), node_in, c_out, norm),
            cond_step: cond.then(|| {
                StepParams::new(store, rng, &format!("{prefix}.cond"), cond_in, c_out, norm)
            }),
            edge_step: StepParams::new(store, rng, &format!("{prefix}.edge"), edge_in, c_out, norm),
        }
    }
}

// ── conditional connections ────────────────────────────────────────────

/// Trainable connection-matrix bases plus the routing affine map.
pub struct CondConnectionBank {
    /// `(m, J, J)` bases.
    pub bases: ParamId,
    pub routing_weight: ParamId,
    pub routing_bias: ParamId,
    pub m: usize,
}

impl CondConnectionBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        j: usize,
        c_node: usize,
        c_edge: usize,
        m: usize,
        k: usize,
        sigma_init: f64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("connection bank needs m >= 1".into()));
        }
        let bases = sparse_bases(rng, j, m, k, sigma_init)?;
        let in_c = c_node + c_edge;
        let bound = 1.0 / (in_c as f64).sqrt();
        Ok(CondConnectionBank {
            bases: store.add(format!("{prefix}.bases"), bases),
            routing_weight: store
                .add(format!("{prefix}.routing_weight"), uniform_tensor(rng, &[m, in_c], bound)),
            routing_bias: store
                .add(format!("{prefix}.routing_bias"), uniform_tensor(rng, &[m], bound)),
            m,
        })
    }
}

/// Sparse initialization of `(m, J, J)` bases: per basis, per column, exactly
/// `k` rows chosen uniformly without replacement receive draws from
/// `Normal(0, sigma²)`; everything else is zero.
pub fn sparse_bases(
    rng: &mut ChaCha8Rng,
    j: usize,
    m: usize,
    k: usize,
    sigma: f64,
) -> Result<Tensor> {
    if k > j {
        return Err(Error::Config(format!("sparse init wants {k} nonzeros per column, J = {j}")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("bad sparse-init sigma {sigma}: {e}")))?;
    let mut data = vec![0.0; m * j * j];
    for basis in 0..m {
        for col in 0..j {
            for row in rand::seq::index::sample(rng, j, k) {
                data[(basis * j + row) * j + col] = normal.sample(rng);
            }
        }
    }
    Tensor::new(&[m, j, j], data)
}

/// Routing: global average pool of node and edge features → affine →
/// sigmoid → blend weights α, then `A = Σᵢ αᵢ·𝓔ᵢ`.
///
/// Returns `(A (B,J,J), α (B,m))`.
pub fn routing(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    bank: &CondConnectionBank,
) -> Result<(Var, Var)> {
    let pooled_n = ctx.tape.mean_axes(node, &[2, 3])?;
    let pooled_e = ctx.tape.mean_axes(edge, &[2, 3])?;
    let pooled = ctx.tape.concat_channels(&[pooled_n, pooled_e])?;
    let w = ctx.var(bank.routing_weight);
    let b = ctx.var(bank.routing_bias);
    let z = ctx.tape.affine(pooled, w, b, "routing")?;
    let alpha = ctx.tape.sigmoid(z);
    let a = ctx.tape.blend_bases(alpha, ctx.var(bank.bases))?;
    Ok((a, alpha))
}

// ── graph convolution steps ────────────────────────────────────────────

/// Node update over the fixed topology: per node, concatenate
/// `[in-edge feature; node feature; mean of out-edge features]`, then
/// affine → (norm) → ReLU. Missing slots (root / leaves) are zeros.
pub fn dgconv_step_nodes(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    inc: &IncidenceMaps,
    p: &StepParams,
) -> Result<Var> {
    let in_slot = ctx.tape.gather_avg(edge, inc.in_edge_groups.clone())?;
    let out_slot = ctx.tape.gather_avg(edge, inc.out_edge_groups.clone())?;
    apply_step(ctx, &[in_slot, node, out_slot], p)
}

/// Conditional node update: per node, concatenate the A-weighted parent
/// aggregate, the node's own feature, and the A-weighted child aggregate.
pub fn cond_step_nodes(ctx: &mut FwdCtx, node: Var, a: Var, p: &StepParams) -> Result<Var> {
    let parent_slot = ctx.tape.adjacency_blend(node, a, false)?;
    let child_slot = ctx.tape.adjacency_blend(node, a, true)?;
    apply_step(ctx, &[parent_slot, node, child_slot], p)
}

/// Edge update: per edge, concatenate `[source node; edge feature; target
/// node]` using the final node features.
pub fn dgconv_step_edges(
    ctx: &mut FwdCtx,
    node_final: Var,
    edge: Var,
    inc: &IncidenceMaps,
    p: &StepParams,
) -> Result<Var> {
    let src = ctx.tape.gather_avg(node_final, inc.source_groups.clone())?;
    let tgt = ctx.tape.gather_avg(node_final, inc.target_groups.clone())?;
    apply_step(ctx, &[src, edge, tgt], p)
}

/// Directed graph convolution: node update then edge update.
pub fn dgconv(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    inc: &IncidenceMaps,
    p: &GraphConvParams,
) -> Result<(Var, Var)> {
    let n = dgconv_step_nodes(ctx, node, edge, inc, &p.node_step)?;
    let e = dgconv_step_edges(ctx, n, edge, inc, &p.edge_step)?;
    Ok((n, e))
}

/// Conditional directed graph convolution: routing, node update,
/// conditional node update, edge update. Also returns the per-sample
/// connection matrix A for inspection.
pub fn cond_dgconv(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    inc: &IncidenceMaps,
    bank: &CondConnectionBank,
    p: &GraphConvParams,
) -> Result<(Var, Var, Var)> {
    let cond_step = p
        .cond_step
        .as_ref()
        .ok_or_else(|| Error::Invalid("cond_dgconv on parameters without a cond step".into()))?;
    let (a, _alpha) = routing(ctx, node, edge, bank)?;
    let n1 = dgconv_step_nodes(ctx, node, edge, inc, &p.node_step)?;
    let n2 = cond_step_nodes(ctx, n1, a, cond_step)?;
    let e = dgconv_step_edges(ctx, n2, edge, inc, &p.edge_step)?;
    Ok((n2, e, a))
}

// ── temporal convolution and blocks ────────────────────────────────────

/// Separate 1D temporal convolutions for the node and edge streams.
pub struct TemporalConvParams {
    pub node_weight: ParamId,
    pub node_bias: ParamId,
    pub edge_weight: ParamId,
    pub edge_bias: ParamId,
    pub stride: usize,
}

impl TemporalConvParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((c * kernel) as f64).sqrt();
        TemporalConvParams {
            node_weight: store
                .add(format!("{prefix}.node_weight"), uniform_tensor(rng, &[c, c, kernel], bound)),
            node_bias: store.add(format!("{prefix}.node_bias"), uniform_tensor(rng, &[c], bound)),
            edge_weight: store
                .add(format!("{prefix}.edge_weight"), uniform_tensor(rng, &[c, c, kernel], bound)),
            edge_bias: store.add(format!("{prefix}.edge_bias"), uniform_tensor(rng, &[c], bound)),
            stride,
        }
    }
}

/// Applies the temporal convolutions; stride 1 preserves T (same padding),
/// stride 2 halves it.
pub fn temporal_conv(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    p: &TemporalConvParams,
) -> Result<(Var, Var)> {
    let nw = ctx.var(p.node_weight);
    let nb = ctx.var(p.node_bias);
    let ew = ctx.var(p.edge_weight);
    let eb = ctx.var(p.edge_bias);
    let n = ctx.tape.conv1d(node, nw, nb, p.stride)?;
    let e = ctx.tape.conv1d(edge, ew, eb, p.stride)?;
    Ok((n, e))
}

/// One spatial-temporal block: graph convolution (conditional when a bank is
/// present) followed by a temporal convolution, with dropout at train time.
pub struct StBlockParams {
    pub conv: GraphConvParams,
    pub bank: Option<CondConnectionBank>,
    pub temporal: TemporalConvParams,
    pub dropout: f64,
}

/// Static configuration for one block, independent of widths.
#[derive(Clone, Copy)]
pub struct BlockSpec {
    pub kernel: usize,
    pub stride: usize,
    pub cond: bool,
    pub norm: bool,
    pub dropout: f64,
    pub m: usize,
    pub k: usize,
    pub sigma_init: f64,
}

impl StBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        j: usize,
        c_node_in: usize,
        c_edge_in: usize,
        c_out: usize,
        spec: BlockSpec,
    ) -> Result<Self> {
        let conv = GraphConvParams::new(
            store,
            rng,
            &format!("{prefix}.gconv"),
            c_node_in,
            c_edge_in,
            c_out,
            spec.cond,
            spec.norm,
        );
        let bank = if spec.cond {
            Some(CondConnectionBank::new(
                store,
                rng,
                &format!("{prefix}.bank"),
                j,
                c_node_in,
                c_edge_in,
                spec.m,
                spec.k,
                spec.sigma_init,
            )?)
        } else {
            None
        };
        let temporal = TemporalConvParams::new(
            store,
            rng,
            &format!("{prefix}.tconv"),
            c_out,
            spec.kernel,
            spec.stride,
        );
        Ok(StBlockParams { conv, bank, temporal, dropout: spec.dropout })
    }
}

/// Output of one ST block; `cond` carries the connection matrix when the
/// block is conditional.
pub struct StBlockOut {
    pub node: Var,
    pub edge: Var,
    pub cond: Option<Var>,
}

pub fn st_block(
    ctx: &mut FwdCtx,
    node: Var,
    edge: Var,
    inc: &IncidenceMaps,
    p: &StBlockParams,
) -> Result<StBlockOut> {
    let (n, e, cond) = match &p.bank {
        Some(bank) => {
            let (n, e, a) = cond_dgconv(ctx, node, edge, inc, bank, &p.conv)?;
            (n, e, Some(a))
        }
        None => {
            let (n, e) = dgconv(ctx, node, edge, inc, &p.conv)?;
            (n, e, None)
        }
    };
    let (mut n, mut e) = temporal_conv(ctx, n, e, &p.temporal)?;
    if ctx.train && p.dropout > 0.0 {
        n = ctx.tape.dropout(n, p.dropout, ctx.rng)?;
        e = ctx.tape.dropout(e, p.dropout, ctx.rng)?;
    }
    Ok(StBlockOut { node: n, edge: e, cond })
}

/// Linear interpolation of both streams along the time axis to `t_out`,
/// endpoints aligned.
pub fn temporal_upsample(ctx: &mut FwdCtx, node: Var, edge: Var, t_out: usize) -> Result<(Var, Var)> {
    let n = ctx.tape.upsample_linear(node, t_out)?;
    let e = ctx.tape.upsample_linear(edge, t_out)?;
    Ok((n, e))
}

/// Final fully-connected head: shared affine `C → 3` at every (t, j).
pub struct FcHeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl FcHeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        FcHeadParams {
            weight: store.add(format!("{prefix}.weight"), uniform_tensor(rng, &[3, c_in], bound)),
            bias: store.add(format!("{prefix}.bias"), uniform_tensor(rng, &[3], bound)),
        }
    }
}

/// Maps node features `(B, C, T, J)` to 3D coordinates `(B, 3, T, J)`.
pub fn fc_head(ctx: &mut FwdCtx, node: Var, p: &FcHeadParams) -> Result<Var> {
    let w = ctx.var(p.weight);
    let b = ctx.var(p.bias);
    ctx.tape.affine(node, w, b, "fc_head")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind_all;
    use crate::skeleton::{incidence, DirectedSkeleton};
    use rand::SeedableRng;

    fn chain(n: usize) -> DirectedSkeleton {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parent = (0..n).map(|i| if i == 0 { None } else { Some(i - 1) }).collect();
        DirectedSkeleton::from_parents(names, parent).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Runs `f` with a context over `store` in the given mode.
    fn with_ctx<T>(
        store: &ParamStore,
        train: bool,
        f: impl FnOnce(&mut FwdCtx) -> Result<T>,
    ) -> T {
        let mut tape = Tape::new();
        let binding = bind_all(store, &mut tape);
        let mut r = rng(7);
        let mut ctx = FwdCtx::new(&mut tape, store, &binding, train, &mut r);
        f(&mut ctx).unwrap()
    }

    fn step_with(store: &mut ParamStore, name: &str, w: &[f64], out_c: usize, b: &[f64]) -> StepParams {
        let in_w = w.len() / out_c;
        StepParams {
            weight: store.add(format!("{name}.w"), Tensor::new(&[out_c, in_w], w.to_vec()).unwrap()),
            bias: store.add(format!("{name}.b"), Tensor::new(&[out_c], b.to_vec()).unwrap()),
            norm: None,
        }
    }

    #[test]
    fn node_step_three_chain_hand_case() {
        // Chain 0→1→2; C=1, T=1. Nodes [1, 2, -1], edges [0.5, -0.25].
        // Slot weights [in, node, out] = [0.3, -0.2, 0.5], bias 0.1.
        let skel = chain(3);
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let p = step_with(&mut store, "s", &[0.3, -0.2, 0.5], 1, &[0.1]);
        let got = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, -1.0]).unwrap());
            let edge = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.5, -0.25]).unwrap());
            let out = dgconv_step_nodes(ctx, node, edge, &inc, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        for (g, w) in got.iter().zip([0.15, 0.0, 0.225]) {
            assert!((g - w).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn edge_step_three_chain_hand_case() {
        // Final node feats [0.15, 0, 0.225]; edges [0.5, -0.25];
        // slot weights [src, edge, tgt] = [0.4, 0.2, -0.3], bias -0.05.
        let skel = chain(3);
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let p = step_with(&mut store, "s", &[0.4, 0.2, -0.3], 1, &[-0.05]);
        let got = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 3], vec![0.15, 0.0, 0.225]).unwrap());
            let edge = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.5, -0.25]).unwrap());
            let out = dgconv_step_edges(ctx, node, edge, &inc, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        assert!((got[0] - 0.11).abs() < 1e-15, "{got:?}");
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn edge_step_two_joint_hand_case() {
        // Single edge; nodes [2, -3], edge [1.5], w = [0.1, 0.2, 0.3], b = 0.5:
        // 0.1*2 + 0.2*1.5 + 0.3*(-3) + 0.5 = 0.1.
        let skel = chain(2);
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let p = step_with(&mut store, "s", &[0.1, 0.2, 0.3], 1, &[0.5]);
        let got = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![2.0, -3.0]).unwrap());
            let edge = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.5]).unwrap());
            let out = dgconv_step_edges(ctx, node, edge, &inc, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        assert!((got[0] - 0.1).abs() < 1e-15, "{got:?}");
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let skel = chain(3);
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let p = step_with(&mut store, "s", &[0.0, 0.0, 0.0], 1, &[0.0]);
        let got = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64 - 2.0));
            let edge = ctx.tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| 0.3 * i as f64));
            let out = dgconv_step_nodes(ctx, node, edge, &inc, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        assert!(got.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn middle_slot_selection_is_relu_of_input() {
        // C=1: weight [0, 1, 0] selects the node slot.
        let skel = chain(3);
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let p = step_with(&mut store, "s", &[0.0, 1.0, 0.0], 1, &[0.0]);
        let vals = vec![1.0, -2.0, 0.5, -0.25, 3.0, -1.0];
        let got = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 2, 3], vals.clone()).unwrap());
            let edge = ctx.tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
            let out = dgconv_step_nodes(ctx, node, edge, &inc, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        let want: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn cond_step_zero_and_identity_a() {
        let mut store = ParamStore::new();
        // C=1, slots [parent, node, child]; w = [0.5, 1.0, -0.25], b = 0.
        let p = step_with(&mut store, "s", &[0.5, 1.0, -0.25], 1, &[0.0]);
        let vals = vec![1.0, 2.0, -1.0];
        // A = 0: only the middle slot contributes.
        let got0 = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 3], vals.clone()).unwrap());
            let a = ctx.tape.leaf(Tensor::zeros(&[1, 3, 3]));
            let out = cond_step_nodes(ctx, node, a, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        let want0: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(got0, want0);
        // A = I: parent and child slots both equal the node feature.
        let got1 = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::new(&[1, 1, 1, 3], vals.clone()).unwrap());
            let mut eye = vec![0.0; 9];
            for i in 0..3 {
                eye[i * 3 + i] = 1.0;
            }
            let a = ctx.tape.leaf(Tensor::new(&[1, 3, 3], eye).unwrap());
            let out = cond_step_nodes(ctx, node, a, &p)?;
            Ok(ctx.tape.data(out).to_vec())
        });
        let want1: Vec<f64> = vals.iter().map(|&v| (0.5 * v + v - 0.25 * v).max(0.0)).collect();
        assert_eq!(got1, want1);
    }

    #[test]
    fn sparse_bases_column_counts_and_determinism() {
        let j = 17;
        let (m, k) = (16, 3);
        let t1 = sparse_bases(&mut rng(3), j, m, k, 0.01).unwrap();
        let t2 = sparse_bases(&mut rng(3), j, m, k, 0.01).unwrap();
        assert_eq!(t1.data(), t2.data());
        assert_eq!(t1.shape(), &[m, j, j]);
        for basis in 0..m {
            let mut nonzeros = 0;
            for col in 0..j {
                let in_col =
                    (0..j).filter(|&row| t1.data()[(basis * j + row) * j + col] != 0.0).count();
                assert_eq!(in_col, k, "basis {basis} column {col}");
                nonzeros += in_col;
            }
            assert_eq!(nonzeros, k * j);
        }
        // Degenerate and invalid configurations.
        let zero = sparse_bases(&mut rng(0), 5, 2, 0, 0.01).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(sparse_bases(&mut rng(0), 3, 2, 4, 0.01).is_err());
    }

    #[test]
    fn routing_alpha_open_interval_and_blend() {
        let skel = chain(4);
        let j = skel.joint_count();
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let bank = CondConnectionBank::new(&mut store, &mut r, "bank", j, 2, 2, 5, 2, 0.01).unwrap();
        let (a, alpha, bases) = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(Tensor::from_fn(&[2, 2, 3, 4], |i| (i as f64).sin()));
            let edge = ctx.tape.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64).cos()));
            let (a, alpha) = routing(ctx, node, edge, &bank)?;
            let bases = ctx.tape.data(ctx.var(bank.bases)).to_vec();
            Ok((ctx.tape.data(a).to_vec(), ctx.tape.data(alpha).to_vec(), bases))
        });
        assert!(alpha.iter().all(|&v| v > 0.0 && v < 1.0));
        // A equals the alpha-blend of bases, computed independently.
        for b in 0..2 {
            for ij in 0..j * j {
                let mut want = 0.0;
                for kk in 0..bank.m {
                    want += alpha[b * bank.m + kk] * bases[kk * j * j + ij];
                }
                let got = a[b * j * j + ij];
                assert!((got - want).abs() <= 1e-15 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn routing_same_inputs_same_a_zero_bases_zero_a() {
        let skel = chain(3);
        let j = skel.joint_count();
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let mut bank =
            CondConnectionBank::new(&mut store, &mut r, "bank", j, 2, 2, 4, 1, 0.01).unwrap();
        let run = |store: &ParamStore, bank: &CondConnectionBank, scale: f64| {
            with_ctx(store, false, |ctx| {
                // Two identical samples: the second batch entry repeats the first.
                let node =
                    ctx.tape.leaf(Tensor::from_fn(&[2, 2, 2, 3], |i| scale * (i % 12) as f64));
                let edge =
                    ctx.tape.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| scale - (i % 8) as f64));
                let (a, _) = routing(ctx, node, edge, bank)?;
                Ok(ctx.tape.data(a).to_vec())
            })
        };
        let a = run(&store, &bank, 1.0);
        // Two identical samples in the batch get identical A.
        assert_eq!(a[..j * j], a[j * j..], "batch entries built identically must match");
        // Zero bases force A = 0 no matter the routing input.
        *store.get_mut(bank.bases) = Tensor::zeros(&[4, j, j]);
        bank.m = 4;
        let a0 = run(&store, &bank, 1.0);
        let a1 = run(&store, &bank, -2.5);
        assert!(a0.iter().all(|&v| v == 0.0));
        assert_eq!(a0, a1);
    }

    #[test]
    fn blend_linearity_exact_on_dyadic_values() {
        // Dyadic rationals make the linearity identity exact in f64.
        let mut tape = Tape::new();
        let bases =
            tape.leaf(Tensor::from_fn(&[2, 2, 2], |i| [0.25, -0.5, 0.75, 0.0][i % 4] * 2.0));
        let a1 = tape.leaf(Tensor::new(&[1, 2], vec![0.25, 0.5]).unwrap());
        let a2 = tape.leaf(Tensor::new(&[1, 2], vec![0.75, 0.125]).unwrap());
        let blend_in = tape.leaf(Tensor::new(&[1, 2], vec![0.5, 0.3125]).unwrap());
        // blend_in = 0.5*a1 + 0.5*a2 exactly.
        let m1 = tape.blend_bases(a1, bases).unwrap();
        let m2 = tape.blend_bases(a2, bases).unwrap();
        let mixed = tape.blend_bases(blend_in, bases).unwrap();
        let half1 = tape.scale(m1, 0.5);
        let half2 = tape.scale(m2, 0.5);
        let sum = tape.add(half1, half2).unwrap();
        assert_eq!(tape.data(mixed), tape.data(sum));
    }

    #[test]
    fn cond_dgconv_matches_dgconv_when_step_two_is_identity_passthrough() {
        // With the cond step's A = 0 and weights selecting the middle slot,
        // step (ii) reduces to ReLU of step (i)'s (already nonnegative)
        // output, so the composite equals plain dgconv bitwise.
        let skel = chain(4);
        let inc = incidence(&skel);
        let j = skel.joint_count();
        let mut store = ParamStore::new();
        let mut r = rng(21);
        let c = 3;
        let mut p = GraphConvParams::new(&mut store, &mut r, "g", c, c, c, true, false);
        // Identity cond step: weight = [0 | I | 0], bias = 0.
        let mut w = vec![0.0; c * 3 * c];
        for o in 0..c {
            w[o * 3 * c + c + o] = 1.0;
        }
        *store.get_mut(p.cond_step.as_ref().unwrap().weight) =
            Tensor::new(&[c, 3 * c], w).unwrap();
        *store.get_mut(p.cond_step.as_ref().unwrap().bias) = Tensor::zeros(&[c]);
        let bank = CondConnectionBank::new(&mut store, &mut r, "bank", j, c, c, 4, 2, 0.01).unwrap();
        *store.get_mut(bank.bases) = Tensor::zeros(&[4, j, j]);

        let node_t = Tensor::from_fn(&[2, c, 3, j], |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
        let edge_t = Tensor::from_fn(&[2, c, 3, j - 1], |i| ((i * 5 + 1) % 13) as f64 / 6.0 - 1.0);
        let (cn, ce) = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(node_t.clone());
            let edge = ctx.tape.leaf(edge_t.clone());
            let (n, e, _a) = cond_dgconv(ctx, node, edge, &inc, &bank, &p)?;
            Ok((ctx.tape.data(n).to_vec(), ctx.tape.data(e).to_vec()))
        });
        p.cond_step = None;
        let (dn, de) = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(node_t.clone());
            let edge = ctx.tape.leaf(edge_t.clone());
            let (n, e) = dgconv(ctx, node, edge, &inc, &p)?;
            Ok((ctx.tape.data(n).to_vec(), ctx.tape.data(e).to_vec()))
        });
        assert_eq!(cn, dn);
        assert_eq!(ce, de);
    }

    #[test]
    fn temporal_conv_identity_kernel_and_stride() {
        let mut store = ParamStore::new();
        let c = 2;
        // Kernel [0, 1, 0] per channel (diagonal): identity at stride 1.
        let mut w = vec![0.0; c * c * 3];
        for o in 0..c {
            w[(o * c + o) * 3 + 1] = 1.0;
        }
        let p = TemporalConvParams {
            node_weight: store.add("n.w", Tensor::new(&[c, c, 3], w.clone()).unwrap()),
            node_bias: store.add("n.b", Tensor::zeros(&[c])),
            edge_weight: store.add("e.w", Tensor::new(&[c, c, 3], w).unwrap()),
            edge_bias: store.add("e.b", Tensor::zeros(&[c])),
            stride: 1,
        };
        let node_t = Tensor::from_fn(&[1, c, 5, 3], |i| (i as f64).sin());
        let edge_t = Tensor::from_fn(&[1, c, 5, 2], |i| (i as f64).cos());
        let (n, e) = with_ctx(&store, false, |ctx| {
            let node = ctx.tape.leaf(node_t.clone());
            let edge = ctx.tape.leaf(edge_t.clone());
            let (n, e) = temporal_conv(ctx, node, edge, &p)?;
            Ok((ctx.tape.value(n).clone(), ctx.tape.value(e).clone()))
        });
        assert_eq!(n.data(), node_t.data());
        assert_eq!(e.data(), edge_t.data());
    }

    #[test]
    fn temporal_conv_random_matches_loop_oracle() {
        let mut r = rng(40);
        let (b, c_in, c_out, t, n, k, stride) = (2, 3, 2, 7, 4, 3, 2);
        let x = Tensor::from_fn(&[b, c_in, t, n], |_| r.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[c_out, c_in, k], |_| r.random_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[c_out], |_| r.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(bias.clone());
        let out = tape.conv1d(xv, wv, bv, stride).unwrap();
        let t_out = t.div_ceil(stride);
        assert_eq!(tape.shape(out), &[b, c_out, t_out, n]);
        let pad = (k - 1) / 2;
        for bi in 0..b {
            for o in 0..c_out {
                for tp in 0..t_out {
                    for ni in 0..n {
                        let mut want = bias.data()[o];
                        for c in 0..c_in {
                            for tau in 0..k {
                                let ti = (tp * stride + tau) as isize - pad as isize;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                want += w.data()[(o * c_in + c) * k + tau]
                                    * x.data()[((bi * c_in + c) * t + ti as usize) * n + ni];
                            }
                        }
                        let got = tape.data(out)[((bi * c_out + o) * t_out + tp) * n + ni];
                        assert!((got - want).abs() < 1e-12, "({bi},{o},{tp},{ni})");
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::new();
        // [0, 2] upsampled to length 3 → [0, 1, 2].
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 1], vec![0.0, 2.0]).unwrap());
        let up = tape.upsample_linear(x, 3).unwrap();
        assert_eq!(tape.data(up), &[0.0, 1.0, 2.0]);
        // Constant stays constant.
        let c = tape.leaf(Tensor::full(&[1, 2, 3, 2], 4.25));
        let upc = tape.upsample_linear(c, 7).unwrap();
        assert!(tape.data(upc).iter().all(|&v| v == 4.25));
        // Down-then-up of a ramp reproduces the ramp away from the tail.
        let ramp = tape.leaf(Tensor::from_fn(&[1, 1, 8, 1], |i| i as f64));
        let down = tape.slice_time(ramp, 0, 8).unwrap();
        let _ = down;
        let half = {
            // Stride-2 subsample via conv with kernel [1] is overkill here;
            // emulate by gathering even frames through slicing.
            let mut vals = Vec::new();
            for i in (0..8).step_by(2) {
                vals.push(i as f64);
            }
            tape.leaf(Tensor::new(&[1, 1, 4, 1], vals).unwrap())
        };
        let up2 = tape.upsample_linear(half, 8).unwrap();
        let got = tape.data(up2);
        for i in 0..7 {
            assert!((got[i] - i as f64 * 6.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_head_cases() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let c = 3;
        let p = FcHeadParams::new(&mut store, &mut r, "head", c);
        // Zero weights → zero output.
        *store.get_mut(p.weight) = Tensor::zeros(&[3, c]);
        *store.get_mut(p.bias) = Tensor::zeros(&[3]);
        let x = Tensor::from_fn(&[2, c, 4, 5], |i| (i as f64).sin());
        let zero = with_ctx(&store, false, |ctx| {
            let xv = ctx.tape.leaf(x.clone());
            let y = fc_head(ctx, xv, &p)?;
            Ok(ctx.tape.data(y).to_vec())
        });
        assert!(zero.iter().all(|&v| v == 0.0));
        // C=3 identity → passthrough.
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        *store.get_mut(p.weight) = Tensor::new(&[3, 3], eye).unwrap();
        let same = with_ctx(&store, false, |ctx| {
            let xv = ctx.tape.leaf(x.clone());
            let y = fc_head(ctx, xv, &p)?;
            Ok(ctx.tape.data(y).to_vec())
        });
        assert_eq!(same, x.data());
        // Random case vs per-position matrix multiply.
        let mut r2 = rng(9);
        let w = Tensor::from_fn(&[3, c], |_| r2.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3], |_| r2.random_range(-1.0..1.0));
        *store.get_mut(p.weight) = w.clone();
        *store.get_mut(p.bias) = b.clone();
        let got = with_ctx(&store, false, |ctx| {
            let xv = ctx.tape.leaf(x.clone());
            let y = fc_head(ctx, xv, &p)?;
            Ok(ctx.tape.data(y).to_vec())
        });
        let (bsz, t, n) = (2, 4, 5);
        for bi in 0..bsz {
            for o in 0..3 {
                for s in 0..t * n {
                    let mut want = b.data()[o];
                    for ci in 0..c {
                        want += w.data()[o * c + ci] * x.data()[(bi * c + ci) * t * n + s];
                    }
                    let gotv = got[(bi * 3 + o) * t * n + s];
                    assert!((gotv - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn st_block_shapes_and_dropout_determinism() {
        let skel = chain(5);
        let inc = incidence(&skel);
        let j = skel.joint_count();
        let mut store = ParamStore::new();
        let mut r = rng(17);
        let spec = BlockSpec {
            kernel: 3,
            stride: 2,
            cond: true,
            norm: true,
            dropout: 0.3,
            m: 4,
            k: 2,
            sigma_init: 0.01,
        };
        let p = StBlockParams::new(&mut store, &mut r, "blk", j, 2, 2, 6, spec).unwrap();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let binding = bind_all(&store, &mut tape);
            let mut rr = rng(seed);
            let mut ctx = FwdCtx::new(&mut tape, &store, &binding, true, &mut rr);
            let node = ctx.tape.leaf(Tensor::from_fn(&[2, 2, 8, j], |i| (i as f64 * 0.1).sin()));
            let edge =
                ctx.tape.leaf(Tensor::from_fn(&[2, 2, 8, j - 1], |i| (i as f64 * 0.2).cos()));
            let out = st_block(&mut ctx, node, edge, &inc, &p).unwrap();
            assert_eq!(ctx.tape.shape(out.node), &[2, 6, 4, j]);
            assert_eq!(ctx.tape.shape(out.edge), &[2, 6, 4, j - 1]);
            let a = out.cond.expect("cond block returns its connection matrix");
            assert_eq!(ctx.tape.shape(a), &[2, j, j]);
            (ctx.tape.data(out.node).to_vec(), ctx.stat_updates.len())
        };
        let (o1, stats1) = run(123);
        let (o2, _) = run(123);
        let (o3, _) = run(124);
        assert_eq!(o1, o2, "same dropout seed must reproduce bitwise");
        assert_ne!(o1, o3, "different dropout seed should differ");
        // Three steps with norm → three stat updates (node, cond, edge).
        assert_eq!(stats1, 3);
    }
}
