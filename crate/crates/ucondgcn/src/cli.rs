//! The command surface behind the `ucondgcn` binary: corpus synthesis,
//! training, inference, evaluation, gradient checking, the conditional
//! ablation, and connection-matrix inspection.
//!
//! Every command is an ordinary function taking a [`RunConfig`], so tests
//! and examples can drive the exact code paths the binary runs. All
//! randomness flows from the `--seed` flag; fixed seeds give bit-identical
//! numeric outputs.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    make_samples, normalize_2d, sliding_window_infer, synth_generate, PoseSequence, SynthConfig,
};
use crate::diffcore::{Tape, Tensor};
use crate::metrics;
use crate::network::{
    layer_gradient_battery, spot_check_gradients, CondPlacement, Model, ModelConfig,
};
use crate::skeleton::DirectedSkeleton;
use crate::train::{fit, total_loss, FitConfig, LossConfig};
use crate::{Error, Result};

/// Largest acceptable relative gradient error for individual layers.
pub const LAYER_GRAD_TOL: f64 = 1e-4;
/// Largest acceptable relative gradient error for the end-to-end check.
pub const E2E_GRAD_TOL: f64 = 1e-3;

// ── argument surface ───────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "ucondgcn",
    version,
    about = "Lift 2D human pose sequences to 3D with a conditional directed graph network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic 2D/3D pose corpus as .dgp files.
    Synth(RunConfig),
    /// Train a model on a corpus of .dgp files.
    Train(RunConfig),
    /// Lift a 2D .dgp file to 3D with a trained checkpoint.
    Infer(RunConfig),
    /// Compare predicted 3D poses against ground truth.
    Eval(RunConfig),
    /// Verify analytic gradients against finite differences.
    Gradcheck(RunConfig),
    /// Train conditional and unconditional variants and tabulate held-out error.
    Ablate(RunConfig),
    /// Write the per-sample connection matrices a checkpoint produces on an input.
    Inspect(RunConfig),
}

/// Shared command-line surface (a command ignores flags it does not use).
#[derive(Args, Clone, Debug)]
pub struct RunConfig {
    /// Key-value config file (`section.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides seeds from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint to write (train) or read (infer, inspect).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input: corpus directory or .dgp file (train), 2D .dgp (infer,
    /// inspect), predicted 3D .dgp (eval).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ground-truth 3D .dgp file (eval).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Conditional-connection placement: merge, down, up, all, or off.
    #[arg(long)]
    pub cond: Option<String>,
    /// Sliding-window stride in frames (infer).
    #[arg(long)]
    pub window_step: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config: None,
            seed: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            input: None,
            gt: None,
            cond: None,
            window_step: None,
        }
    }
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

// ── config files ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Train,
    Ablate,
    Other,
}

/// Everything a command can be configured with. Defaults are sized for a
/// single CPU core; the full-scale architecture defaults stay available via
/// `model.*` keys.
#[derive(Clone, Debug)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub fit: FitConfig,
    pub synth: SynthConfig,
    /// Stride between training windows cut from each sequence.
    pub window_stride: usize,
    /// Fraction of sequences held out for validation.
    pub val_fraction: f64,
    /// Seeds per variant in the ablation.
    pub ablate_seeds: usize,
    /// Placements compared by the ablation.
    pub ablate_placements: Vec<CondPlacement>,
}

impl AppConfig {
    fn defaults(kind: Kind) -> Self {
        let mut model = ModelConfig::default();
        let mut fit = FitConfig::default();
        let mut synth = SynthConfig::default();
        let mut window_stride = 8;
        let mut val_fraction = 0.25;
        match kind {
            Kind::Train => {
                model.t = 32;
                model.channels = 16;
                model.merge_channels = 32;
                model.m = 8;
                fit.epochs = 20;
            }
            Kind::Ablate => {
                model.t = 16;
                model.channels = 8;
                model.merge_channels = 16;
                model.depth = 1;
                model.m = 4;
                model.dropout = 0.1;
                model.merge_blocks = 1;
                fit.epochs = 120;
                fit.loss.deltas = vec![1, 2, 4, 8];
                // The step-bound EMA relaxes far too slowly for runs this
                // short; a smaller beta3 lets desk-scale training move.
                fit.opt.beta3 = 0.99;
                synth.sequences = 10;
                synth.frames = 48;
                window_stride = 8;
                val_fraction = 0.3;
            }
            Kind::Other => {}
        }
        AppConfig {
            model,
            fit,
            synth,
            window_stride,
            val_fraction,
            ablate_seeds: 2,
            ablate_placements: vec![CondPlacement::Merge, CondPlacement::Off],
        }
    }

    /// Applies one `section.key = value` setting; unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("model.") {
            return self.model.apply_kv(rest, value);
        }
        match key {
            "train.epochs" => self.fit.epochs = parse_as(key, value)?,
            "train.batch_size" => self.fit.batch_size = parse_as(key, value)?,
            "train.seed" => self.fit.seed = parse_as(key, value)?,
            "train.lr" => self.fit.lr_override = Some(parse_as(key, value)?),
            "train.max_steps" => self.fit.max_steps = Some(parse_as(key, value)?),
            "train.stop_loss" => self.fit.stop_loss = Some(parse_as(key, value)?),
            "train.window_stride" => self.window_stride = parse_as(key, value)?,
            "train.val_fraction" => {
                let v: f64 = parse_as(key, value)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "train.val_fraction must be in [0, 1), got {v}"
                    )));
                }
                self.val_fraction = v;
            }
            "loss.lambda" => self.fit.loss.lambda = parse_as(key, value)?,
            "loss.deltas" => self.fit.loss.deltas = parse_list(key, value)?,
            "opt.beta1" => self.fit.opt.beta1 = parse_as(key, value)?,
            "opt.beta2" => self.fit.opt.beta2 = parse_as(key, value)?,
            "opt.beta3" => self.fit.opt.beta3 = parse_as(key, value)?,
            "opt.eps" => self.fit.opt.eps = parse_as(key, value)?,
            "opt.weight_decay" => self.fit.opt.weight_decay = parse_as(key, value)?,
            "synth.layout" => self.synth.layout = value.to_string(),
            "synth.sequences" => self.synth.sequences = parse_as(key, value)?,
            "synth.frames" => self.synth.frames = parse_as(key, value)?,
            "synth.fps" => self.synth.fps = parse_as(key, value)?,
            "synth.seed" => self.synth.seed = parse_as(key, value)?,
            "synth.noise_std" => self.synth.noise_std = parse_as(key, value)?,
            "synth.width" => self.synth.width = parse_as(key, value)?,
            "synth.height" => self.synth.height = parse_as(key, value)?,
            "synth.focal_px" => self.synth.camera.focal_px = parse_as(key, value)?,
            "synth.cx" => self.synth.camera.cx = parse_as(key, value)?,
            "synth.cy" => self.synth.camera.cy = parse_as(key, value)?,
            "synth.classes" => self.synth.classes = parse_list(key, value)?,
            "synth.max_sinusoids" => self.synth.trajectory.max_sinusoids = parse_as(key, value)?,
            "synth.freq_min" => self.synth.trajectory.freq_hz.0 = parse_as(key, value)?,
            "synth.freq_max" => self.synth.trajectory.freq_hz.1 = parse_as(key, value)?,
            "synth.amp_min" => self.synth.trajectory.amp_rad.0 = parse_as(key, value)?,
            "synth.amp_max" => self.synth.trajectory.amp_rad.1 = parse_as(key, value)?,
            "ablate.seeds" => self.ablate_seeds = parse_as(key, value)?,
            "ablate.placements" => self.ablate_placements = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a whole config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            self.apply_kv(k.trim(), v.trim())
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|tok| parse_as(key, tok.trim())).collect()
}

/// Resolves the effective configuration: per-command defaults, then the
/// config file, then explicit flags.
fn configure(kind: Kind, args: &RunConfig) -> Result<AppConfig> {
    let mut cfg = AppConfig::defaults(kind);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = args.seed {
        cfg.fit.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(cond) = &args.cond {
        cfg.model.cond = CondPlacement::from_str(cond)?;
    }
    Ok(cfg)
}

/// The effective configuration the `ablate` command runs with (defaults,
/// then config file, then flags); public so examples and tests can reuse
/// the desk-scale ablation setup.
pub fn ablate_defaults(args: &RunConfig) -> Result<AppConfig> {
    configure(Kind::Ablate, args)
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str, purpose: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required: {purpose}")))
}

// ── corpus plumbing ────────────────────────────────────────────────────

/// Loads one .dgp file, or every .dgp file in a directory (sorted by name).
pub fn load_corpus(path: &Path) -> Result<Vec<PoseSequence>> {
    if path.is_file() {
        return Ok(vec![PoseSequence::load(path)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "dgp"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no .dgp files under {}", path.display())));
    }
    files.iter().map(|f| PoseSequence::load(f)).collect()
}

struct SplitSamples {
    train: Vec<crate::train::Sample>,
    val: Vec<crate::train::Sample>,
    train_seqs: usize,
    val_seqs: usize,
}

/// Windows a corpus into train/validation samples, holding out whole
/// sequences (the last ones, after the deterministic name sort).
fn split_corpus(
    seqs: &[PoseSequence],
    skel: &DirectedSkeleton,
    t: usize,
    stride: usize,
    val_fraction: f64,
) -> Result<SplitSamples> {
    let mut val_n = (seqs.len() as f64 * val_fraction).round() as usize;
    if val_n >= seqs.len() {
        val_n = seqs.len() - 1;
    }
    let cut = seqs.len() - val_n;
    let mut out = SplitSamples { train: Vec::new(), val: Vec::new(), train_seqs: cut, val_seqs: val_n };
    for (i, seq) in seqs.iter().enumerate() {
        let samples = make_samples(seq, skel, t, stride)?;
        if i < cut {
            out.train.extend(samples);
        } else {
            out.val.extend(samples);
        }
    }
    Ok(out)
}

// ── commands ───────────────────────────────────────────────────────────

/// Writes a synthetic corpus of `.dgp` sequence files into `--out`.
pub fn cmd_synth(args: &RunConfig) -> Result<()> {
    let cfg = configure(Kind::Other, args)?;
    std::fs::create_dir_all(&args.out)?;
    let seqs = synth_generate(&cfg.synth)?;
    let mut first_path = None;
    for (i, s) in seqs.iter().enumerate() {
        let path = args.out.join(format!("seq_{i:03}.dgp"));
        s.save(&path)?;
        first_path.get_or_insert(path);
    }
    // Postcondition: the files reload to the exact sequences generated.
    let reloaded = PoseSequence::load(first_path.as_ref().expect("at least one sequence"))?;
    if Some(&reloaded) != seqs.first() {
        return Err(Error::Invalid("written corpus did not reload identically".into()));
    }
    let classes: Vec<&str> = cfg.synth.classes.iter().map(|c| c.as_str()).collect();
    println!(
        "wrote {} sequences x {} frames (classes: {}, noise {} px, seed {}) to {}",
        seqs.len(),
        cfg.synth.frames,
        classes.join(","),
        cfg.synth.noise_std,
        cfg.synth.seed,
        args.out.display()
    );
    Ok(())
}

/// Trains a model on a corpus and writes a checkpoint plus a CSV report.
pub fn cmd_train(args: &RunConfig) -> Result<()> {
    let cfg = configure(Kind::Train, args)?;
    let input = require(&args.input, "--input", "corpus directory or .dgp file to train on")?;
    std::fs::create_dir_all(&args.out)?;
    let seqs = load_corpus(input)?;
    let skel = seqs[0].skeleton()?;
    let split = split_corpus(&seqs, &skel, cfg.model.t, cfg.window_stride, cfg.val_fraction)?;
    println!(
        "training on {} windows from {} sequences ({} windows from {} sequences held out)",
        split.train.len(),
        split.train_seqs,
        split.val.len(),
        split.val_seqs,
    );
    let mut model = Model::with_skeleton(cfg.model.clone(), skel, cfg.fit.seed)?;
    println!(
        "model: T={} C={} merge={} depth={} cond={} ({} parameters)",
        cfg.model.t,
        cfg.model.channels,
        cfg.model.merge_channels,
        cfg.model.depth,
        cfg.model.cond,
        model.param_count()
    );
    let csv_path = args.out.join("train_report.csv");
    let fit_cfg = FitConfig { verbose: true, ..cfg.fit.clone() };
    let report = fit(&mut model, &split.train, &split.val, &fit_cfg, Some(&csv_path))?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join("model.ckpt"));
    model.save(&ckpt)?;
    match (report.best_epoch, report.best_val_mpjpe) {
        (Some(e), Some(v)) => {
            println!("best validation mpjpe {v:.2} mm at epoch {e}; kept those weights")
        }
        _ => println!("no validation set; kept final weights"),
    }
    println!("checkpoint: {}", ckpt.display());
    println!("report: {}", csv_path.display());
    Ok(())
}

/// Lifts a 2D sequence file to 3D with sliding-window averaging.
pub fn cmd_infer(args: &RunConfig) -> Result<()> {
    let ckpt = require(&args.checkpoint, "--checkpoint", "trained model to run")?;
    let input = require(&args.input, "--input", "2D .dgp sequence to lift")?;
    std::fs::create_dir_all(&args.out)?;
    let model = Model::load(ckpt)?;
    let seq = PoseSequence::load(input)?;
    let Some(p2) = &seq.poses2d else {
        return Err(Error::Invalid(format!("{} has no 2D poses to lift", input.display())));
    };
    let normalized = normalize_2d(p2, seq.width.unwrap_or(0.0), seq.height.unwrap_or(0.0))?;
    let x = Tensor::new(&[seq.frames, seq.joints, 2], normalized)?;
    let step = args.window_step.unwrap_or(5);
    let pred = sliding_window_infer(&model, &x, step, 8)?;
    let out_seq = PoseSequence {
        layout: seq.layout.clone(),
        fps: seq.fps,
        frames: seq.frames,
        joints: seq.joints,
        poses2d: None,
        poses3d: Some(pred.data().to_vec()),
        width: None,
        height: None,
        action: seq.action.clone(),
        parents: seq.parents.clone(),
    };
    let path = args.out.join("pred.dgp");
    out_seq.save(&path)?;
    println!(
        "lifted {} frames (window {} step {}) -> {}",
        seq.frames,
        model.config().t,
        step,
        path.display()
    );
    Ok(())
}

/// Compares predicted 3D poses against ground truth and writes the report
/// and a PCK curve plot.
pub fn cmd_eval(args: &RunConfig) -> Result<()> {
    let pred_path = require(&args.input, "--input", "predicted 3D .dgp file")?;
    let gt_path = require(&args.gt, "--gt", "ground-truth 3D .dgp file")?;
    std::fs::create_dir_all(&args.out)?;
    let pred = PoseSequence::load(pred_path)?;
    let gt = PoseSequence::load(gt_path)?;
    let (Some(p), Some(g)) = (&pred.poses3d, &gt.poses3d) else {
        return Err(Error::Invalid("eval needs 3D poses in both files".into()));
    };
    if pred.frames != gt.frames || pred.joints != gt.joints {
        return Err(Error::Invalid(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.frames, pred.joints, gt.frames, gt.joints
        )));
    }
    let skel = gt.skeleton()?;
    let report = metrics::evaluate(p, g, gt.joints, Some(skel.root()))?;
    print!("{report}");
    let report_path = args.out.join("eval.txt");
    std::fs::write(&report_path, report.kv_lines())?;
    let svg_path = args.out.join("pck_curve.svg");
    std::fs::write(&svg_path, pck_curve_svg(p, g, gt.joints, skel.root())?)?;
    println!("report: {}", report_path.display());
    println!("plot: {}", svg_path.display());
    Ok(())
}

/// Checks every layer's gradients and an end-to-end tiny model against
/// central finite differences; fails on any violation.
pub fn cmd_gradcheck(args: &RunConfig) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let mut failures = 0;
    println!("layer gradient checks (central differences, tolerance {LAYER_GRAD_TOL:.0e}):");
    for item in layer_gradient_battery(seed)? {
        let ok = item.max_err <= LAYER_GRAD_TOL;
        failures += usize::from(!ok);
        println!(
            "  {}  {:<24} max rel err {:.3e}",
            if ok { "pass" } else { "FAIL" },
            item.name,
            item.max_err
        );
    }

    let check = e2e_gradcheck(seed)?;
    let ok = check.max_err <= E2E_GRAD_TOL;
    failures += usize::from(!ok);
    println!("end-to-end check (5 joints, 8-frame window, full loss, dropout on):");
    println!(
        "  {}  {:<24} max rel err {:.3e} over {} coordinates (worst: {})",
        if ok { "pass" } else { "FAIL" },
        "tiny conditional model",
        check.max_err,
        check.coords_checked,
        check.worst
    );
    if failures > 0 {
        return Err(Error::Invalid(format!("{failures} gradient check(s) failed")));
    }
    println!("gradcheck: all checks passed");
    Ok(())
}

/// The end-to-end finite-difference check: a 5-joint, 8-frame conditional
/// model under the full position + motion loss.
pub fn e2e_gradcheck(seed: u64) -> Result<crate::network::SpotCheck> {
    let skel = tiny_tree_skeleton()?;
    let cfg = ModelConfig {
        t: 8,
        channels: 3,
        merge_channels: 4,
        depth: 1,
        m: 2,
        k: 2,
        sigma_init: 0.05,
        dropout: 0.2,
        merge_blocks: 1,
        cond: CondPlacement::All,
        ..ModelConfig::default()
    };
    let mut model = Model::with_skeleton(cfg, skel, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
    let x = Tensor::from_fn(&[2, 8, 5, 2], |_| rng.random_range(-1.0..1.0));
    let gt = Tensor::from_fn(&[2, 3, 8, 5], |_| rng.random_range(-50.0..50.0));
    let loss_cfg = LossConfig { lambda: 0.1, deltas: vec![1, 2, 4] };
    let loss = move |tape: &mut Tape, pred, gt| total_loss(tape, pred, gt, &loss_cfg);
    spot_check_gradients(&mut model, &x, &gt, &loss, 2, 1e-4, seed)
}

/// A 5-joint rooted tree with two branches: 0 -> 1 -> 2 and 0 -> 3 -> 4.
pub fn tiny_tree_skeleton() -> Result<DirectedSkeleton> {
    DirectedSkeleton::from_parents(
        vec!["hip".into(), "j1".into(), "j2".into(), "j3".into(), "j4".into()],
        vec![None, Some(0), Some(1), Some(0), Some(3)],
    )
}

/// Row of the ablation table: one placement's held-out error per seed.
#[derive(Clone, Debug)]
pub struct AblateRow {
    pub placement: CondPlacement,
    pub per_seed_mpjpe: Vec<f64>,
    pub mean_mpjpe: f64,
}

/// Trains each placement variant over several seeds on a fresh two-class
/// corpus and reports held-out MPJPE (library entry point behind
/// [`cmd_ablate`]).
pub fn run_ablation(cfg: &AppConfig) -> Result<Vec<AblateRow>> {
    let seqs = synth_generate(&cfg.synth)?;
    let skel = DirectedSkeleton::layout(&cfg.synth.layout)?;
    let split = split_corpus(&seqs, &skel, cfg.model.t, cfg.window_stride, cfg.val_fraction)?;
    if split.val.is_empty() {
        return Err(Error::Config("ablation needs a nonempty held-out split".into()));
    }
    let mut rows = Vec::new();
    for placement in &cfg.ablate_placements {
        let mut per_seed = Vec::new();
        for s in 0..cfg.ablate_seeds {
            let seed = cfg.fit.seed + s as u64;
            let mut m_cfg = cfg.model.clone();
            m_cfg.cond = *placement;
            let mut model = Model::with_skeleton(m_cfg, skel.clone(), seed)?;
            let fit_cfg = FitConfig { seed, ..cfg.fit.clone() };
            let report = fit(&mut model, &split.train, &split.val, &fit_cfg, None)?;
            let mpjpe = report
                .best_val_mpjpe
                .ok_or_else(|| Error::Invalid("ablation run produced no validation score".into()))?;
            per_seed.push(mpjpe);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblateRow { placement: *placement, per_seed_mpjpe: per_seed, mean_mpjpe: mean });
    }
    Ok(rows)
}

/// Compares conditional placements against the unconditional baseline on a
/// synthetic two-class corpus.
pub fn cmd_ablate(args: &RunConfig) -> Result<()> {
    let cfg = configure(Kind::Ablate, args)?;
    std::fs::create_dir_all(&args.out)?;
    println!(
        "ablation: {} sequences x {} frames, {} seeds per variant, placements: {}",
        cfg.synth.sequences,
        cfg.synth.frames,
        cfg.ablate_seeds,
        cfg.ablate_placements
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let rows = run_ablation(&cfg)?;
    let mut csv = String::from("placement,seed,heldout_mpjpe_mm\n");
    println!("{:<10} {:>14} per-seed mpjpe (mm)", "placement", "mean mpjpe(mm)");
    for row in &rows {
        let per: Vec<String> = row.per_seed_mpjpe.iter().map(|v| format!("{v:.2}")).collect();
        println!("{:<10} {:>14.2} {}", row.placement.to_string(), row.mean_mpjpe, per.join(" "));
        for (s, v) in row.per_seed_mpjpe.iter().enumerate() {
            csv.push_str(&format!("{},{},{v}\n", row.placement, cfg.fit.seed + s as u64));
        }
    }
    let find = |p: CondPlacement| rows.iter().find(|r| r.placement == p).map(|r| r.mean_mpjpe);
    if let (Some(c), Some(off)) = (find(CondPlacement::Merge), find(CondPlacement::Off)) {
        println!("conditional/unconditional mean ratio: {:.4}", c / off);
    }
    let path = args.out.join("ablate.csv");
    std::fs::write(&path, csv)?;
    println!("table: {}", path.display());
    Ok(())
}

/// Writes the conditional connection matrices a checkpoint produces on the
/// first window of an input sequence: a text grid per block, plus PPM
/// heatmaps.
pub fn cmd_inspect(args: &RunConfig) -> Result<()> {
    let ckpt = require(&args.checkpoint, "--checkpoint", "model whose connections to inspect")?;
    let input = require(&args.input, "--input", "2D .dgp sequence to probe with")?;
    std::fs::create_dir_all(&args.out)?;
    let model = Model::load(ckpt)?;
    let seq = PoseSequence::load(input)?;
    let Some(p2) = &seq.poses2d else {
        return Err(Error::Invalid(format!("{} has no 2D poses", input.display())));
    };
    let t = model.config().t;
    if seq.frames < t {
        return Err(Error::Invalid(format!(
            "sequence has {} frames, the model window is {t}; pad the input",
            seq.frames
        )));
    }
    let j = seq.joints;
    let normalized = normalize_2d(p2, seq.width.unwrap_or(0.0), seq.height.unwrap_or(0.0))?;
    let x = Tensor::new(&[1, t, j, 2], normalized[..t * j * 2].to_vec())?;
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    let art = model.forward_vars(&mut tape, &x, false, &mut rng)?;
    if art.cond_mats.is_empty() {
        return Err(Error::Invalid(
            "checkpoint has no conditional blocks (cond = off); nothing to inspect".into(),
        ));
    }
    let mut text = format!(
        "# conditional connection matrices for the first {t}-frame window of {}\n",
        input.display()
    );
    for (name, var) in &art.cond_mats {
        let grid = tape.data(*var);
        if let Some(bad) = grid.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("connection matrix {name} contains {bad}")));
        }
        let (min, max) = grid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        text.push_str(&format!("\nblock {name} ({j}x{j}, min {min:.4}, max {max:.4})\n"));
        for r in 0..j {
            let row: Vec<String> =
                (0..j).map(|c| format!("{:>9.4}", grid[r * j + c])).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        let ppm_path = args.out.join(format!("conn_{name}.ppm"));
        std::fs::write(&ppm_path, heatmap_ppm(grid, j))?;
        println!("block {name}: {j}x{j} matrix, values in [{min:.4}, {max:.4}] -> {}", ppm_path.display());
    }
    let path = args.out.join("connections.txt");
    std::fs::write(&path, text)?;
    println!("grids: {}", path.display());
    Ok(())
}

// ── plots ──────────────────────────────────────────────────────────────

/// PCK-vs-threshold curve over the standard AUC grid as a standalone SVG.
fn pck_curve_svg(pred: &[f64], gt: &[f64], joints: usize, root: usize) -> Result<String> {
    let pc = metrics::root_center(pred, joints, root);
    let gc = metrics::root_center(gt, joints, root);
    let thresholds: Vec<usize> = metrics::AUC_THRESHOLDS_MM.step_by(metrics::AUC_STEP_MM).collect();
    let mut points = Vec::with_capacity(thresholds.len());
    for &mm in &thresholds {
        points.push((mm as f64, metrics::pck(&pc, &gc, joints, mm as f64)?));
    }
    let (w, h, ml, mb) = (640.0, 440.0, 60.0, 50.0);
    let (pw, ph) = (w - ml - 30.0, h - mb - 30.0);
    let x = |mm: f64| ml + pw * (mm - 5.0) / 145.0;
    let y = |pct: f64| (h - mb) - ph * pct / 100.0;
    let path: Vec<String> = points.iter().map(|&(mm, p)| format!("{:.1},{:.1}", x(mm), y(p))).collect();
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<line x1="{ml}" y1="{y0}" x2="{xr}" y2="{y0}" stroke="black"/>
<line x1="{ml}" y1="{y0}" x2="{ml}" y2="30" stroke="black"/>
"#,
        y0 = h - mb,
        xr = w - 30.0,
    );
    for pct in [0, 25, 50, 75, 100] {
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="end">{pct}</text>
"#,
            ml - 8.0,
            y(pct as f64) + 4.0
        ));
    }
    for mm in [5, 50, 100, 150] {
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{mm}</text>
"#,
            x(mm as f64),
            h - mb + 18.0
        ));
    }
    svg.push_str(&format!(
        r##"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">threshold (mm)</text>
<text x="16" y="{mid_y:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {mid_y:.1})">PCK (%)</text>
<polyline points="{pts}" fill="none" stroke="#1f6fb2" stroke-width="2"/>
</svg>
"##,
        ml + pw / 2.0,
        h - 8.0,
        mid_y = 30.0 + ph / 2.0,
        pts = path.join(" "),
    ));
    Ok(svg)
}

/// A J x J heatmap as plain-text PPM (P3): blue = low, red = high.
fn heatmap_ppm(grid: &[f64], j: usize) -> String {
    let (min, max) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if max > min { max - min } else { 1.0 };
    let mut out = format!("P3\n{j} {j}\n255\n");
    for v in grid {
        let t = (v - min) / span;
        let r = (255.0 * t).round() as u8;
        let b = (255.0 * (1.0 - t)).round() as u8;
        out.push_str(&format!("{r} 48 {b}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MotionClass;
    use tempfile::tempdir;

    #[test]
    fn config_unknown_keys_are_rejected() {
        let mut cfg = AppConfig::defaults(Kind::Train);
        assert!(cfg.apply_kv("model.channels", "8").is_ok());
        assert_eq!(cfg.model.channels, 8);
        assert!(cfg.apply_kv("model.nonsense", "1").is_err());
        assert!(cfg.apply_kv("mystery.key", "1").is_err());
        assert!(cfg.apply_kv("train.epochs", "oops").is_err());
        cfg.apply_kv("loss.deltas", "1, 2, 4").unwrap();
        assert_eq!(cfg.fit.loss.deltas, vec![1, 2, 4]);
        cfg.apply_kv("synth.classes", "reach,gait").unwrap();
        assert_eq!(cfg.synth.classes, vec![MotionClass::Reach, MotionClass::Gait]);
        cfg.apply_kv("ablate.placements", "all,off").unwrap();
        assert_eq!(cfg.ablate_placements, vec![CondPlacement::All, CondPlacement::Off]);
    }

    #[test]
    fn config_text_reports_line_numbers() {
        let mut cfg = AppConfig::defaults(Kind::Train);
        let err = cfg.apply_text("model.channels = 8\nnot a kv line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
        let err = cfg.apply_text("# comment\n\nmodel.depth = x\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train.seed = 7\nsynth.seed = 7\nmodel.cond = off\n").unwrap();
        let args = RunConfig {
            config: Some(path),
            seed: Some(99),
            cond: Some("all".into()),
            ..RunConfig::default()
        };
        let cfg = configure(Kind::Train, &args).unwrap();
        assert_eq!(cfg.fit.seed, 99);
        assert_eq!(cfg.synth.seed, 99);
        assert_eq!(cfg.model.cond, CondPlacement::All);
    }

    #[test]
    fn cli_parses_subcommands_and_flags() {
        let cli = Cli::try_parse_from([
            "ucondgcn", "infer", "--checkpoint", "m.ckpt", "--input", "x.dgp", "--window-step",
            "3", "--out", "results",
        ])
        .unwrap();
        match cli.command {
            Command::Infer(a) => {
                assert_eq!(a.window_step, Some(3));
                assert_eq!(a.out, PathBuf::from("results"));
                assert_eq!(a.checkpoint.as_deref(), Some(Path::new("m.ckpt")));
            }
            other => panic!("parsed wrong command {other:?}"),
        }
        assert!(Cli::try_parse_from(["ucondgcn", "bogus"]).is_err());
    }

    #[test]
    fn heatmap_ppm_is_well_formed() {
        let ppm = heatmap_ppm(&[0.0, 0.5, 1.0, 0.25], 2);
        let mut lines = ppm.lines();
        assert_eq!(lines.next(), Some("P3"));
        assert_eq!(lines.next(), Some("2 2"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(ppm.lines().count(), 3 + 4);
        assert_eq!(ppm.lines().nth(3), Some("0 48 255"));
        assert_eq!(ppm.lines().nth(5), Some("255 48 0"));
    }
}
