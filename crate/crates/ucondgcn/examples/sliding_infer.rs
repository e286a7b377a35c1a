//! Lift a sequence longer than the model window by averaging overlapping
//! window predictions.
//!
//! ```text
//! cargo run -p ucondgcn --example sliding_infer
//! ```
//!
//! Windows start every `step` frames, with one final window right-aligned
//! so the tail is always covered; each frame's prediction is the arithmetic
//! mean of every window that covers it. Three properties hold by
//! construction and are demonstrated below:
//!
//! 1. every frame is covered at least once;
//! 2. when the sequence length equals the window, the result is exactly a
//!    single forward pass;
//! 3. a constant-output model yields predictions independent of the step.

use ucondgcn::data::{coverage_counts, sliding_window_infer, synth_generate, SynthConfig};
use ucondgcn::data::normalize_2d;
use ucondgcn::network::{Model, ModelConfig};
use ucondgcn::Tensor;

fn tiny_model() -> ucondgcn::Result<Model> {
    let cfg = ModelConfig {
        t: 16,
        channels: 4,
        merge_channels: 8,
        depth: 1,
        m: 2,
        k: 2,
        dropout: 0.0,
        merge_blocks: 1,
        ..ModelConfig::default()
    };
    Model::new(cfg, 7)
}

fn main() -> ucondgcn::Result<()> {
    let synth = SynthConfig { sequences: 1, frames: 100, noise_std: 0.5, ..SynthConfig::default() };
    let seq = synth_generate(&synth)?.remove(0);
    let model = tiny_model()?;
    let t = model.config().t;

    let counts = coverage_counts(seq.frames, t, 5)?;
    println!(
        "windowing {} frames with T={t}, step 5: {} windows, coverage {}..{} per frame",
        seq.frames,
        ucondgcn::data::window_starts(seq.frames, t, 5)?.len(),
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    );
    assert!(counts.iter().all(|&c| c >= 1), "full coverage");

    let normalized = normalize_2d(seq.poses2d.as_ref().unwrap(), synth.width, synth.height)?;
    let x = Tensor::new(&[seq.frames, seq.joints, 2], normalized)?;
    let pred = sliding_window_infer(&model, &x, 5, 8)?;
    println!("prediction shape: {:?} (root-relative mm)", pred.shape());

    // Property 2: exact equality with forward() on a window-sized input.
    let xd = x.data();
    let one = Tensor::new(&[1, t, seq.joints, 2], xd[..t * seq.joints * 2].to_vec())?;
    let direct = model.forward(&one)?;
    let windowed = sliding_window_infer(
        &model,
        &Tensor::new(&[t, seq.joints, 2], xd[..t * seq.joints * 2].to_vec())?,
        5,
        8,
    )?;
    assert_eq!(direct.data(), windowed.data());
    println!("single-window inference == forward(): exact");

    // Property 3: different steps agree wherever the model ignores its
    // input. Zeroing all parameters makes the network constant (batch norm
    // maps zero activations to zero, and the head bias is zero too).
    let mut constant = tiny_model()?;
    for entry in constant.store_mut().entries_mut() {
        if entry.trainable {
            entry.value.data_mut().fill(0.0);
        }
    }
    let p3 = sliding_window_infer(&constant, &x, 3, 8)?;
    let p5 = sliding_window_infer(&constant, &x, 5, 8)?;
    let p7 = sliding_window_infer(&constant, &x, 7, 8)?;
    assert_eq!(p3.data(), p5.data());
    assert_eq!(p5.data(), p7.data());
    println!("constant model: steps 3, 5, 7 give bitwise-identical predictions");
    Ok(())
}
