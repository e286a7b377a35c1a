//! U-shaped network assembly: an embedding block, a strided encoder, a
//! linear-upsampling decoder with skip connections, a multi-scale merging
//! stage, and a fully-connected output head.
//!
//! Both the node stream `(B, C, T, J)` and the edge stream `(B, C, T, E)`
//! flow through every stage; only the node stream feeds the head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::layers::{
    apply_norm, cond_step_nodes, dgconv_step_edges, dgconv_step_nodes, fc_head, routing, st_block,
    temporal_conv, temporal_upsample, BlockSpec, CondConnectionBank, FcHeadParams, FwdCtx,
    GraphConvParams, StBlockParams, StatUpdate, StepParams, TemporalConvParams,
};
use crate::params::{bind_all, collect_gradients, ParamBinding, ParamStore};
use crate::skeleton::{incidence, init_features, DirectedSkeleton, IncidenceMaps};
use crate::{Error, Result};

/// Where conditional (input-dependent) connection blocks are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondPlacement {
    /// Only the merging stage is conditional (the default).
    Merge,
    /// Only the encoder blocks are conditional.
    Down,
    /// Only the decoder blocks are conditional.
    Up,
    /// Every block after the embedding is conditional.
    All,
    /// No conditional blocks anywhere (plain directed graph convolutions).
    Off,
}

impl CondPlacement {
    pub fn as_str(&self) -> &'static str {
        match self {
            CondPlacement::Merge => "merge",
            CondPlacement::Down => "down",
            CondPlacement::Up => "up",
            CondPlacement::All => "all",
            CondPlacement::Off => "off",
        }
    }
}

impl FromStr for CondPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" => Ok(CondPlacement::Merge),
            "down" => Ok(CondPlacement::Down),
            "up" => Ok(CondPlacement::Up),
            "all" => Ok(CondPlacement::All),
            "off" => Ok(CondPlacement::Off),
            other => Err(Error::Config(format!(
                "unknown cond placement {other:?} (expected merge|down|up|all|off)"
            ))),
        }
    }
}

impl fmt::Display for CondPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Skeleton layout name (`h36m17`).
    pub layout: String,
    /// Input window length in frames; must be divisible by `2^depth`.
    pub t: usize,
    /// Channel width of the embedding / encoder / decoder blocks.
    pub channels: usize,
    /// Channel width of the merging stage.
    pub merge_channels: usize,
    /// Number of stride-2 encoder blocks (and matching decoder stages).
    pub depth: usize,
    /// Temporal convolution kernel size (odd).
    pub kernel: usize,
    /// Number of connection-matrix bases per conditional block.
    pub m: usize,
    /// Nonzero rows per basis column at initialization.
    pub k: usize,
    /// Standard deviation of the sparse basis initialization.
    pub sigma_init: f64,
    /// Dropout probability applied after every block at train time.
    pub dropout: f64,
    /// Whether blocks normalize activations between the affine map and the
    /// nonlinearity.
    pub norm: bool,
    /// Number of blocks in the merging stage.
    pub merge_blocks: usize,
    /// Placement of conditional blocks.
    pub cond: CondPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: "h36m17".into(),
            t: 96,
            channels: 64,
            merge_channels: 128,
            depth: 2,
            kernel: 3,
            m: 16,
            k: 3,
            sigma_init: 0.01,
            dropout: 0.3,
            norm: true,
            merge_blocks: 2,
            cond: CondPlacement::Merge,
        }
    }
}

impl ModelConfig {
    /// Applies one `key = value` setting; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("bad value {value:?} for {key}"))
            })
        }
        match key {
            "layout" => self.layout = value.to_string(),
            "t" => self.t = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "merge_channels" => self.merge_channels = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "sigma_init" => self.sigma_init = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "norm" => self.norm = parse(key, value)?,
            "merge_blocks" => self.merge_blocks = parse(key, value)?,
            "cond" => self.cond = value.parse()?,
            other => return Err(Error::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    /// Serializes as `key = value` lines (the checkpoint header format).
    pub fn to_kv_lines(&self) -> String {
        format!(
            "layout = {}\nt = {}\nchannels = {}\nmerge_channels = {}\ndepth = {}\nkernel = {}\nm = {}\nk = {}\nsigma_init = {}\ndropout = {}\nnorm = {}\nmerge_blocks = {}\ncond = {}\n",
            self.layout,
            self.t,
            self.channels,
            self.merge_channels,
            self.depth,
            self.kernel,
            self.m,
            self.k,
            self.sigma_init,
            self.dropout,
            self.norm,
            self.merge_blocks,
            self.cond,
        )
    }

    /// Parses `key = value` lines produced by [`Self::to_kv_lines`].
    pub fn from_kv_lines(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got {line:?}")))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn validate(&self, joints: usize) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return err("depth must be >= 1".into());
        }
        if self.depth >= usize::BITS as usize {
            return err(format!("depth {} is absurdly large", self.depth));
        }
        let factor = 1usize << self.depth;
        if self.t == 0 || !self.t.is_multiple_of(factor) {
            return err(format!(
                "window length t = {} must be a positive multiple of 2^depth = {factor}",
                self.t
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return err(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.channels == 0 || self.merge_channels == 0 {
            return err("channel widths must be >= 1".into());
        }
        if self.merge_blocks == 0 {
            return err("merge_blocks must be >= 1".into());
        }
        if self.m == 0 {
            return err("m (number of bases) must be >= 1".into());
        }
        if self.k > joints {
            return err(format!("k = {} exceeds joint count {joints}", self.k));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !self.sigma_init.is_finite() || self.sigma_init < 0.0 {
            return err(format!("sigma_init must be finite and >= 0, got {}", self.sigma_init));
        }
        Ok(())
    }

    fn block_spec(&self, stride: usize, cond: bool) -> BlockSpec {
        BlockSpec {
            kernel: self.kernel,
            stride,
            cond,
            norm: self.norm,
            dropout: self.dropout,
            m: self.m,
            k: self.k,
            sigma_init: self.sigma_init,
        }
    }
}

/// Everything produced by one traced forward pass.
pub struct ForwardArtifacts {
    /// Predicted coordinates, `(B, 3, T, J)`.
    pub pred: Var,
    /// `(block name, connection matrix (B, J, J))` for each conditional
    /// block, in execution order.
    pub cond_mats: Vec<(String, Var)>,
    /// Pending running-statistics updates (train mode only).
    pub stat_updates: Vec<StatUpdate>,
    /// Bindings of the parameter store onto this tape.
    pub binding: ParamBinding,
}

/// The full pose-lifting network together with its parameters.
pub struct Model {
    cfg: ModelConfig,
    skel: DirectedSkeleton,
    inc: IncidenceMaps,
    store: ParamStore,
    embed: StBlockParams,
    down: Vec<StBlockParams>,
    up: Vec<StBlockParams>,
    merge: Vec<StBlockParams>,
    head: FcHeadParams,
}

impl Model {
    /// Builds a model with parameters initialized from `seed`, resolving the
    /// skeleton from `cfg.layout`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let skel = DirectedSkeleton::layout(&cfg.layout)?;
        Self::with_skeleton(cfg, skel, seed)
    }

    /// Builds a model over an explicitly supplied skeleton (for layouts
    /// without a registered name).
    pub fn with_skeleton(cfg: ModelConfig, skel: DirectedSkeleton, seed: u64) -> Result<Self> {
        let j = skel.joint_count();
        cfg.validate(j)?;
        let inc = incidence(&skel);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;

        let embed = StBlockParams::new(
            &mut store,
            &mut rng,
            "embed",
            j,
            2,
            2,
            c,
            cfg.block_spec(1, false),
        )?;
        let cond_down = matches!(cfg.cond, CondPlacement::Down | CondPlacement::All);
        let cond_up = matches!(cfg.cond, CondPlacement::Up | CondPlacement::All);
        let cond_merge = matches!(cfg.cond, CondPlacement::Merge | CondPlacement::All);

        let mut down = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            down.push(StBlockParams::new(
                &mut store,
                &mut rng,
                &format!("down{d}"),
                j,
                c,
                c,
                c,
                cfg.block_spec(2, cond_down),
            )?);
        }
        let mut up = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            up.push(StBlockParams::new(
                &mut store,
                &mut rng,
                &format!("up{i}"),
                j,
                2 * c,
                2 * c,
                c,
                cfg.block_spec(1, cond_up),
            )?);
        }
        let mut merge = Vec::with_capacity(cfg.merge_blocks);
        for i in 0..cfg.merge_blocks {
            let c_in = if i == 0 { (cfg.depth + 1) * c } else { cfg.merge_channels };
            merge.push(StBlockParams::new(
                &mut store,
                &mut rng,
                &format!("merge{i}"),
                j,
                c_in,
                c_in,
                cfg.merge_channels,
                cfg.block_spec(1, cond_merge),
            )?);
        }
        let head = FcHeadParams::new(&mut store, &mut rng, "head", cfg.merge_channels);

        Ok(Model { cfg, skel, inc, store, embed, down, up, merge, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn skeleton(&self) -> &DirectedSkeleton {
        &self.skel
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.trainable_scalar_count()
    }

    /// Traces one forward pass onto `tape`.
    ///
    /// `input2d` is `(B, T, J, 2)` with `T == cfg.t`. In train mode,
    /// normalization uses batch statistics (recording running-stat updates)
    /// and dropout is active, drawing masks from `rng`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        input2d: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardArtifacts> {
        if input2d.shape().len() == 4 && input2d.shape()[1] != self.cfg.t {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "window length {} != configured t = {}",
                    input2d.shape()[1],
                    self.cfg.t
                ),
            });
        }
        let feats = init_features(input2d, &self.skel)?;
        let node0 = tape.leaf(feats.node_feats);
        let edge0 = tape.leaf(feats.edge_feats);
        let binding = bind_all(&self.store, tape);
        let mut ctx = FwdCtx::new(tape, &self.store, &binding, train, rng);
        let mut cond_mats = Vec::new();

        let embed = st_block(&mut ctx, node0, edge0, &self.inc, &self.embed)?;
        // Skip connections: skips[d] holds the streams at resolution T/2^d.
        let mut skips = vec![(embed.node, embed.edge)];
        let (mut n, mut e) = (embed.node, embed.edge);
        for (d, blk) in self.down.iter().enumerate() {
            let out = st_block(&mut ctx, n, e, &self.inc, blk)?;
            if let Some(a) = out.cond {
                cond_mats.push((format!("down{d}"), a));
            }
            n = out.node;
            e = out.edge;
            if d + 1 < self.down.len() {
                skips.push((n, e));
            }
        }

        // `n`/`e` is now the bottleneck at T/2^depth. The merging stage sees
        // the bottleneck plus every decoder output, coarsest first.
        let mut merge_inputs = vec![(n, e)];
        for (i, blk) in self.up.iter().enumerate() {
            let d = self.cfg.depth - 1 - i;
            let t_out = self.cfg.t >> d;
            let (un, ue) = temporal_upsample(&mut ctx, n, e, t_out)?;
            let (sn, se) = skips[d];
            let cn = ctx.tape.concat_channels(&[un, sn])?;
            let ce = ctx.tape.concat_channels(&[ue, se])?;
            let out = st_block(&mut ctx, cn, ce, &self.inc, blk)?;
            if let Some(a) = out.cond {
                cond_mats.push((format!("up{i}"), a));
            }
            n = out.node;
            e = out.edge;
            merge_inputs.push((n, e));
        }

        let mut cat_n = Vec::with_capacity(merge_inputs.len());
        let mut cat_e = Vec::with_capacity(merge_inputs.len());
        for (mn, me) in merge_inputs {
            if ctx.tape.shape(mn)[2] == self.cfg.t {
                cat_n.push(mn);
                cat_e.push(me);
            } else {
                let (un, ue) = temporal_upsample(&mut ctx, mn, me, self.cfg.t)?;
                cat_n.push(un);
                cat_e.push(ue);
            }
        }
        let mut mn = ctx.tape.concat_channels(&cat_n)?;
        let mut me = ctx.tape.concat_channels(&cat_e)?;
        for (i, blk) in self.merge.iter().enumerate() {
            let out = st_block(&mut ctx, mn, me, &self.inc, blk)?;
            if let Some(a) = out.cond {
                cond_mats.push((format!("merge{i}"), a));
            }
            mn = out.node;
            me = out.edge;
        }

        let pred = fc_head(&mut ctx, mn, &self.head)?;
        let stat_updates = std::mem::take(&mut ctx.stat_updates);
        Ok(ForwardArtifacts { pred, cond_mats, stat_updates, binding })
    }

    /// Evaluation-mode forward pass: `(B, T, J, 2)` → `(B, T, J, 3)`.
    pub fn forward(&self, input2d: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let art = self.forward_vars(&mut tape, input2d, false, &mut rng)?;
        let out = tape.value(art.pred);
        let s = out.shape();
        let (b, t, j) = (s[0], s[2], s[3]);
        let src = out.data();
        // (B, 3, T, J) → (B, T, J, 3)
        let mut data = vec![0.0; b * t * j * 3];
        for bi in 0..b {
            for c in 0..3 {
                for ti in 0..t {
                    for ji in 0..j {
                        data[((bi * t + ti) * j + ji) * 3 + c] =
                            src[((bi * 3 + c) * t + ti) * j + ji];
                    }
                }
            }
        }
        Tensor::new(&[b, t, j, 3], data)
    }
}

// ── checkpoints ────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"UCDG";
const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in header".into()))
    }
}

impl Model {
    /// Serializes the configuration, skeleton, and every parameter/state
    /// tensor, with a trailing checksum.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut header = self.cfg.to_kv_lines();
        header.push_str(&format!("joints = {}\n", self.skel.joint_names().join(",")));
        let parents: Vec<String> = self
            .skel
            .parents()
            .iter()
            .map(|p| p.map_or("-".to_string(), |i| i.to_string()))
            .collect();
        header.push_str(&format!("parents = {}\n", parents.join(",")));
        push_str(&mut buf, &header);
        push_u64(&mut buf, self.store.len() as u64);
        for entry in self.store.entries() {
            push_str(&mut buf, &entry.name);
            buf.push(entry.trainable as u8);
            push_u64(&mut buf, entry.value.shape().len() as u64);
            for &d in entry.value.shape() {
                push_u64(&mut buf, d as u64);
            }
            for &v in entry.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a(&buf);
        push_u64(&mut buf, checksum);
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Self::save`], verifying the checksum
    /// and that the stored tensors match the rebuilt architecture.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic (not a model checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header = r.string()?;
        let mut cfg_lines = String::new();
        let mut joints: Option<Vec<String>> = None;
        let mut parents: Option<Vec<Option<usize>>> = None;
        for line in header.lines() {
            let Some((key, value)) = line.split_once('=') else {
                cfg_lines.push_str(line);
                cfg_lines.push('\n');
                continue;
            };
            match key.trim() {
                "joints" => {
                    joints = Some(value.trim().split(',').map(str::to_string).collect());
                }
                "parents" => {
                    let mut ps = Vec::new();
                    for tok in value.trim().split(',') {
                        ps.push(if tok == "-" {
                            None
                        } else {
                            Some(tok.parse().map_err(|_| {
                                Error::Checkpoint(format!("bad parent index {tok:?}"))
                            })?)
                        });
                    }
                    parents = Some(ps);
                }
                _ => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        let cfg = ModelConfig::from_kv_lines(&cfg_lines)
            .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))?;
        let skel = match (joints, parents) {
            (Some(j), Some(p)) => DirectedSkeleton::from_parents(j, p)
                .map_err(|e| Error::Checkpoint(format!("bad skeleton header: {e}")))?,
            _ => DirectedSkeleton::layout(&cfg.layout)?,
        };
        let mut model = Model::with_skeleton(cfg, skel, 0)?;

        let count = r.u64()? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, architecture expects {}",
                model.store.len()
            )));
        }
        for entry in model.store.entries_mut() {
            let name = r.string()?;
            if name != entry.name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: found {name:?}, expected {:?}",
                    entry.name
                )));
            }
            let trainable = r.take(1)?[0] != 0;
            if trainable != entry.trainable {
                return Err(Error::Checkpoint(format!("trainable flag mismatch for {name:?}")));
            }
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name:?}: checkpoint {shape:?}, architecture {:?}",
                    entry.value.shape()
                )));
            }
            let data = entry.value.data_mut();
            let raw = r.take(data.len() * 8)?;
            for (i, v) in data.iter_mut().enumerate() {
                *v = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(model)
    }
}

// ── gradient spot checks ───────────────────────────────────────────────

/// Result of an end-to-end finite-difference spot check.
#[derive(Clone, Debug)]
pub struct SpotCheck {
    /// Max over checked coordinates of `|analytic - fd| / max(1, |analytic|)`.
    pub max_err: f64,
    pub coords_checked: usize,
    /// Parameter and coordinate where the worst error occurred.
    pub worst: String,
}

/// Compares analytic parameter gradients of `loss_fn(pred, gt)` against
/// central finite differences, probing `coords_per_param` coordinates of
/// every trainable tensor.
///
/// The forward pass runs in train mode with dropout masks drawn from a
/// generator reseeded identically for every evaluation, so the perturbed
/// losses see the same masks and the comparison is exact.
pub fn spot_check_gradients<L>(
    model: &mut Model,
    input2d: &Tensor,
    gt3d: &Tensor,
    loss_fn: &L,
    coords_per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<SpotCheck>
where
    L: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    if eps <= 0.0 || coords_per_param == 0 {
        return Err(Error::Config("spot check needs eps > 0 and coords_per_param >= 1".into()));
    }
    let eval = |model: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let art = model.forward_vars(&mut tape, input2d, true, &mut rng)?;
        let gt = tape.leaf(gt3d.clone());
        let loss = loss_fn(&mut tape, art.pred, gt)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::Shape { op: "spot_check", detail: "loss must be scalar".into() });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let art = model.forward_vars(&mut tape, input2d, true, &mut rng)?;
    let gt = tape.leaf(gt3d.clone());
    let loss = loss_fn(&mut tape, art.pred, gt)?;
    let grads = tape.backward(loss)?;
    let grad_vecs = collect_gradients(&model.store, &art.binding, &grads)?;
    drop(tape);

    let ids = model.store.trainable_ids();
    let mut max_err = 0.0f64;
    let mut worst = String::new();
    let mut coords_checked = 0;
    for (gi, id) in ids.iter().enumerate() {
        let numel = model.store.get(*id).numel();
        let picks: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            (0..coords_per_param).map(|i| i * numel / coords_per_param).collect()
        };
        for c in picks {
            let analytic = grad_vecs[gi][c];
            let orig = model.store.get(*id).data()[c];
            model.store.get_mut(*id).data_mut()[c] = orig + eps;
            let up = eval(model)?;
            model.store.get_mut(*id).data_mut()[c] = orig - eps;
            let down = eval(model)?;
            model.store.get_mut(*id).data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic - fd).abs() / analytic.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!(
                    "spot check produced non-finite comparison at {}[{c}]",
                    model.store.name(*id)
                )));
            }
            if err > max_err {
                max_err = err;
                worst = format!("{}[{c}]", model.store.name(*id));
            }
            coords_checked += 1;
        }
    }
    Ok(SpotCheck { max_err, coords_checked, worst })
}

// ── per-layer gradient battery ─────────────────────────────────────────

/// One named finite-difference comparison.
#[derive(Clone, Debug)]
pub struct BatteryItem {
    pub name: &'static str,
    pub max_err: f64,
}

/// Runs finite-difference checks of every layer primitive with respect to
/// its inputs and parameters on small shapes. Each returned error is the
/// worst relative deviation for that item.
pub fn layer_gradient_battery(seed: u64) -> Result<Vec<BatteryItem>> {
    use crate::diffcore::finite_diff_check;

    let skel = chain_skeleton(4);
    let inc = incidence(&skel);
    let (b, t, j, e) = (2usize, 4usize, 4usize, 3usize);
    let c = 3usize;
    let eps = 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |shape: &[usize]| -> Tensor {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(rng.random());
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    };

    let node_t = sample(&[b, c, t, j]);
    let edge_t = sample(&[b, c, t, e]);
    let a_t = sample(&[b, j, j]);
    let mut items = Vec::new();

    // Node update step wrt its input streams and parameters.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let p = StepParams::new(&mut store, &mut prng, "step", 3 * c, c, true);
        let run = |tape: &mut Tape,
                   probe: Var,
                   target: Probe,
                   store: &ParamStore,
                   p: &StepParams,
                   node_t: &Tensor,
                   edge_t: &Tensor|
         -> Result<Var> {
            let binding = bind_all(store, tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = FwdCtx::new(tape, store, &binding, true, &mut rng);
            let node = if target == Probe::Node { probe } else { ctx.tape.leaf(node_t.clone()) };
            let edge = if target == Probe::Edge { probe } else { ctx.tape.leaf(edge_t.clone()) };
            match target {
                Probe::Weight => ctx.overrides.push((p.weight, probe)),
                Probe::Bias => ctx.overrides.push((p.bias, probe)),
                _ => {}
            }
            let y = dgconv_step_nodes(&mut ctx, node, edge, &inc, p)?;
            ctx.tape.mean_all(y)
        };
        for (name, target, point) in [
            ("node_step/input", Probe::Node, &node_t),
            ("node_step/edges", Probe::Edge, &edge_t),
            ("node_step/weight", Probe::Weight, store.get(p.weight)),
            ("node_step/bias", Probe::Bias, store.get(p.bias)),
        ] {
            let point = point.clone();
            let err = finite_diff_check(
                |tape, v| run(tape, v, target, &store, &p, &node_t, &edge_t),
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // Conditional node update wrt input and connection matrix.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let p = StepParams::new(&mut store, &mut prng, "cond", 3 * c, c, true);
        for (name, probe_a) in [("cond_step/input", false), ("cond_step/matrix", true)] {
            let point = if probe_a { a_t.clone() } else { node_t.clone() };
            let err = finite_diff_check(
                |tape, v| {
                    let binding = bind_all(&store, tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                    let node = if probe_a { ctx.tape.leaf(node_t.clone()) } else { v };
                    let a = if probe_a { v } else { ctx.tape.leaf(a_t.clone()) };
                    let y = cond_step_nodes(&mut ctx, node, a, &p)?;
                    ctx.tape.mean_all(y)
                },
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // Edge update step wrt the final node features.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let p = StepParams::new(&mut store, &mut prng, "edge", 3 * c, c, true);
        let err = finite_diff_check(
            |tape, v| {
                let binding = bind_all(&store, tape);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                let edge = ctx.tape.leaf(edge_t.clone());
                let y = dgconv_step_edges(&mut ctx, v, edge, &inc, &p)?;
                ctx.tape.mean_all(y)
            },
            &node_t,
            eps,
        )?;
        items.push(BatteryItem { name: "edge_step/input", max_err: err });
    }

    // Routing wrt the pooled features, the routing affine, and the bases.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let bank = CondConnectionBank::new(&mut store, &mut prng, "bank", j, c, c, 2, 2, 0.5)?;
        for (name, target) in [
            ("routing/input", Probe::Node),
            ("routing/weight", Probe::Weight),
            ("routing/bases", Probe::Bias),
        ] {
            let point = match target {
                Probe::Node => node_t.clone(),
                Probe::Weight => store.get(bank.routing_weight).clone(),
                _ => store.get(bank.bases).clone(),
            };
            let err = finite_diff_check(
                |tape, v| {
                    let binding = bind_all(&store, tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                    let node = if target == Probe::Node { v } else { ctx.tape.leaf(node_t.clone()) };
                    let edge = ctx.tape.leaf(edge_t.clone());
                    match target {
                        Probe::Weight => ctx.overrides.push((bank.routing_weight, v)),
                        Probe::Bias => ctx.overrides.push((bank.bases, v)),
                        _ => {}
                    }
                    let (a, _alpha) = routing(&mut ctx, node, edge, &bank)?;
                    Ok(ctx.tape.l2_norm(a))
                },
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // Temporal convolution wrt input and kernel, stride 2.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let p = TemporalConvParams::new(&mut store, &mut prng, "t", c, 3, 2);
        for (name, probe_w) in [("temporal/input", false), ("temporal/kernel", true)] {
            let point =
                if probe_w { store.get(p.node_weight).clone() } else { node_t.clone() };
            let err = finite_diff_check(
                |tape, v| {
                    let binding = bind_all(&store, tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                    let node = if probe_w { ctx.tape.leaf(node_t.clone()) } else { v };
                    let edge = ctx.tape.leaf(edge_t.clone());
                    if probe_w {
                        ctx.overrides.push((p.node_weight, v));
                    }
                    let (yn, ye) = temporal_conv(&mut ctx, node, edge, &p)?;
                    let both = ctx.tape.concat_channels(&[yn, yn])?;
                    let _ = ye;
                    ctx.tape.mean_all(both)
                },
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // Normalization wrt input and gamma (train mode, batch statistics).
    {
        let mut store = ParamStore::new();
        let p = crate::layers::NormParams::new(&mut store, "norm", c);
        for (name, probe_gamma) in [("norm/input", false), ("norm/gamma", true)] {
            let point =
                if probe_gamma { store.get(p.gamma).clone() } else { node_t.clone() };
            let err = finite_diff_check(
                |tape, v| {
                    let binding = bind_all(&store, tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                    let x = if probe_gamma { ctx.tape.leaf(node_t.clone()) } else { v };
                    if probe_gamma {
                        ctx.overrides.push((p.gamma, v));
                    }
                    let y = apply_norm(&mut ctx, x, &p)?;
                    Ok(ctx.tape.l2_norm(y))
                },
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // A full conditional spatial-temporal block wrt its node input.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let spec = BlockSpec {
            kernel: 3,
            stride: 2,
            cond: true,
            norm: true,
            dropout: 0.0,
            m: 2,
            k: 2,
            sigma_init: 0.5,
        };
        let blk = StBlockParams::new(&mut store, &mut prng, "blk", j, c, c, c, spec)?;
        let err = finite_diff_check(
            |tape, v| {
                let binding = bind_all(&store, tape);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                let edge = ctx.tape.leaf(edge_t.clone());
                let out = st_block(&mut ctx, v, edge, &inc, &blk)?;
                let y = ctx.tape.concat_channels(&[out.node, out.node])?;
                ctx.tape.mean_all(y)
            },
            &node_t,
            eps,
        )?;
        items.push(BatteryItem { name: "st_block/input", max_err: err });
    }

    // Output head wrt input and weight.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let p = FcHeadParams::new(&mut store, &mut prng, "head", c);
        for (name, probe_w) in [("fc_head/input", false), ("fc_head/weight", true)] {
            let point = if probe_w { store.get(p.weight).clone() } else { node_t.clone() };
            let err = finite_diff_check(
                |tape, v| {
                    let binding = bind_all(&store, tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                    let x = if probe_w { ctx.tape.leaf(node_t.clone()) } else { v };
                    if probe_w {
                        ctx.overrides.push((p.weight, v));
                    }
                    let y = fc_head(&mut ctx, x, &p)?;
                    Ok(ctx.tape.l2_norm(y))
                },
                &point,
                eps,
            )?;
            items.push(BatteryItem { name, max_err: err });
        }
    }

    // A directed graph convolution pair (node + edge update) end to end.
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 8);
        let p = GraphConvParams::new(&mut store, &mut prng, "g", c, c, c, false, true);
        let err = finite_diff_check(
            |tape, v| {
                let binding = bind_all(&store, tape);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = FwdCtx::new(tape, &store, &binding, true, &mut rng);
                let edge = ctx.tape.leaf(edge_t.clone());
                let (n, e) = crate::layers::dgconv(&mut ctx, v, edge, &inc, &p)?;
                let sn = ctx.tape.mean_all(n)?;
                let se = ctx.tape.mean_all(e)?;
                ctx.tape.add(sn, se)
            },
            &node_t,
            eps,
        )?;
        items.push(BatteryItem { name: "dgconv/input", max_err: err });
    }

    Ok(items)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Probe {
    Node,
    Edge,
    Weight,
    Bias,
}

fn chain_skeleton(n: usize) -> DirectedSkeleton {
    let names = (0..n).map(|i| format!("j{i}")).collect();
    let parents = (0..n).map(|i| if i == 0 { None } else { Some(i - 1) }).collect();
    DirectedSkeleton::from_parents(names, parents).expect("valid chain")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            t: 8,
            channels: 4,
            merge_channels: 6,
            depth: 2,
            m: 2,
            k: 2,
            merge_blocks: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_input(seed: u64, b: usize, t: usize, j: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, t, j, 2], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_shape_contract_tiny() {
        let model = Model::new(tiny_cfg(), 7).unwrap();
        let x = random_input(0, 2, 8, 17);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 17, 3]);
        assert!(y.is_finite());
        assert_eq!(model.skeleton().edge_count(), 16);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let model = Model::new(tiny_cfg(), 3).unwrap();
        let x = random_input(1, 2, 8, 17);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cond_placement_controls_conditional_blocks() {
        let counts = [
            (CondPlacement::Off, 0usize),
            (CondPlacement::Merge, 1),
            (CondPlacement::Down, 2),
            (CondPlacement::Up, 2),
            (CondPlacement::All, 5),
        ];
        let x = random_input(2, 1, 8, 17);
        for (placement, want) in counts {
            let cfg = ModelConfig { cond: placement, ..tiny_cfg() };
            let model = Model::new(cfg, 1).unwrap();
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let art = model.forward_vars(&mut tape, &x, false, &mut rng).unwrap();
            assert_eq!(art.cond_mats.len(), want, "placement {placement}");
            for (_, a) in &art.cond_mats {
                assert_eq!(tape.shape(*a), &[1, 17, 17]);
            }
            let has_bank = model.store().entries().iter().any(|e| e.name.contains(".bank."));
            assert_eq!(has_bank, want > 0);
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(Model::new(ModelConfig { t: 10, ..tiny_cfg() }, 0).is_err());
        assert!(Model::new(ModelConfig { kernel: 4, ..tiny_cfg() }, 0).is_err());
        assert!(Model::new(ModelConfig { k: 18, ..tiny_cfg() }, 0).is_err());
        assert!(Model::new(ModelConfig { depth: 0, ..tiny_cfg() }, 0).is_err());
        assert!(Model::new(ModelConfig { dropout: 1.0, ..tiny_cfg() }, 0).is_err());
        assert!(Model::new(ModelConfig { layout: "unknown".into(), ..tiny_cfg() }, 0).is_err());
        // Window length differing from the configured t is rejected at use.
        let model = Model::new(tiny_cfg(), 0).unwrap();
        assert!(model.forward(&random_input(0, 1, 16, 17)).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig {
            t: 32,
            channels: 12,
            sigma_init: 0.125,
            dropout: 0.25,
            cond: CondPlacement::All,
            norm: false,
            ..ModelConfig::default()
        };
        let text = cfg.to_kv_lines();
        let back = ModelConfig::from_kv_lines(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(ModelConfig::from_kv_lines("nonsense_key = 3").is_err());
        assert!(ModelConfig::from_kv_lines("t : 3").is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::new(tiny_cfg(), 42).unwrap();
        let b = Model::new(tiny_cfg(), 42).unwrap();
        let c = Model::new(tiny_cfg(), 43).unwrap();
        assert!(a.param_count() > 0);
        assert_eq!(a.param_count(), b.param_count());
        for (ea, eb) in a.store().entries().iter().zip(b.store().entries()) {
            assert_eq!(ea.value.data(), eb.value.data(), "{}", ea.name);
        }
        let any_diff = a
            .store()
            .entries()
            .iter()
            .zip(c.store().entries())
            .any(|(ea, ec)| ea.trainable && ea.value.data() != ec.value.data());
        assert!(any_diff, "different seeds must give different parameters");
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ucdg");
        let model = Model::new(tiny_cfg(), 11).unwrap();
        let x = random_input(3, 2, 8, 17);
        let before = model.forward(&x).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (ea, eb) in model.store().entries().iter().zip(loaded.store().entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value.data(), eb.value.data(), "{}", ea.name);
        }
        let after = loaded.forward(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ucdg");
        let model = Model::new(tiny_cfg(), 5).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Flip one payload byte.
        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x40;
        let bad = dir.path().join("bad.ucdg");
        std::fs::write(&bad, &corrupt).unwrap();
        let err = match Model::load(&bad) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected load failure"),
        };
        assert!(err.contains("checksum"), "{err}");

        // Truncate.
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Model::load(&bad).is_err());

        // Wrong magic.
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let tail = wrong.len() - 8;
        let sum = fnv1a(&wrong[..tail]);
        wrong[tail..].copy_from_slice(&sum.to_le_bytes());
        std::fs::write(&bad, &wrong).unwrap();
        let err = match Model::load(&bad) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected load failure"),
        };
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn spot_check_matches_finite_differences() {
        let cfg = ModelConfig {
            t: 8,
            channels: 3,
            merge_channels: 4,
            depth: 1,
            m: 2,
            k: 2,
            merge_blocks: 1,
            dropout: 0.2,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 9).unwrap();
        let x = random_input(4, 2, 8, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = Tensor::from_fn(&[2, 3, 8, 17], |_| rng.random_range(-0.5..0.5));
        let loss = |tape: &mut Tape, pred: Var, gt: Var| -> Result<Var> {
            let d = tape.sub(pred, gt)?;
            let n = tape.euclid_norm_channels(d)?;
            tape.mean_all(n)
        };
        let report = spot_check_gradients(&mut model, &x, &gt, &loss, 2, 1e-4, 77).unwrap();
        assert!(report.coords_checked > 20);
        assert!(
            report.max_err < 1e-3,
            "worst {} at {}",
            report.max_err,
            report.worst
        );
    }

    #[test]
    fn layer_battery_passes_tolerance() {
        let items = layer_gradient_battery(123).unwrap();
        assert!(items.len() >= 12);
        for item in items {
            assert!(item.max_err < 1e-4, "{}: {}", item.name, item.max_err);
        }
    }
}
