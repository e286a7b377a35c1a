//! The whole command pipeline, end to end, through the same functions the
//! binary runs: synth -> train -> infer -> eval -> inspect.
//!
//! ```text
//! cargo run -p ucondgcn --example full_pipeline
//! ```
//!
//! Artifacts land in a temp directory that is printed at the end: the
//! corpus, the checkpoint, the per-epoch CSV, the predicted 3D file, the
//! evaluation report with a PCK-curve SVG, and connection-matrix grids
//! with PPM heatmaps. Everything is seeded, so rerunning reproduces every
//! file bit for bit.

use std::fs;

use ucondgcn::cli::{cmd_eval, cmd_infer, cmd_inspect, cmd_synth, cmd_train, RunConfig};

fn main() -> ucondgcn::Result<()> {
    let root = std::env::temp_dir().join("ucondgcn_pipeline_example");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root)?;

    // Small-but-real settings so the whole pipeline finishes in a couple of
    // minutes: 6 sequences, a 16-frame window, narrow channels. The
    // optimizer's step-bound memory is relaxed (opt.beta3) so a run this
    // short actually trains; the library default is tuned for runs of tens
    // of thousands of steps.
    let cfg_path = root.join("run.cfg");
    fs::write(
        &cfg_path,
        "synth.sequences = 6\n\
         synth.frames = 48\n\
         model.t = 16\n\
         model.channels = 8\n\
         model.merge_channels = 16\n\
         model.depth = 1\n\
         model.m = 4\n\
         model.dropout = 0.1\n\
         model.merge_blocks = 1\n\
         train.epochs = 60\n\
         train.lr = 0.005\n\
         train.window_stride = 4\n\
         train.val_fraction = 0.34\n\
         opt.beta3 = 0.99\n\
         loss.deltas = 1,2,4,8\n",
    )?;
    let base = RunConfig { config: Some(cfg_path), seed: Some(1), ..RunConfig::default() };

    println!("── synth ──");
    let corpus = root.join("corpus");
    cmd_synth(&RunConfig { out: corpus.clone(), ..base.clone() })?;

    println!("\n── train ──");
    let train_out = root.join("train");
    cmd_train(&RunConfig {
        input: Some(corpus.clone()),
        out: train_out.clone(),
        ..base.clone()
    })?;
    let ckpt = train_out.join("model.ckpt");

    println!("\n── infer (held-out sequence) ──");
    let infer_out = root.join("infer");
    let held_out = corpus.join("seq_005.dgp");
    cmd_infer(&RunConfig {
        checkpoint: Some(ckpt.clone()),
        input: Some(held_out.clone()),
        out: infer_out.clone(),
        window_step: Some(5),
        ..base.clone()
    })?;

    println!("\n── eval (prediction vs ground truth) ──");
    cmd_eval(&RunConfig {
        input: Some(infer_out.join("pred.dgp")),
        gt: Some(held_out.clone()),
        out: root.join("eval"),
        ..base.clone()
    })?;

    println!("\n── inspect (conditional connections) ──");
    cmd_inspect(&RunConfig {
        checkpoint: Some(ckpt),
        input: Some(held_out),
        out: root.join("inspect"),
        ..base.clone()
    })?;

    println!("\nall artifacts under {}", root.display());
    Ok(())
}
