//! The evaluation metrics and the properties that pin their semantics:
//! MPJPE, Procrustes-aligned MPJPE, PCK, and AUC.
//!
//! ```text
//! cargo run -p ucondgcn --example evaluate_metrics
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucondgcn::metrics::{auc, evaluate, mpjpe, p_mpjpe, pck};

fn main() -> ucondgcn::Result<()> {
    let joints = 17;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let frames = 24;
    let gt: Vec<f64> =
        (0..frames * joints * 3).map(|_| rng.random_range(-500.0..500.0)).collect();

    // MPJPE is the mean Euclidean distance per joint: a single (3,4)
    // offset on one joint of one frame contributes exactly 5mm / (F*J).
    let mut pred = gt.clone();
    pred[0] += 3.0;
    pred[1] += 4.0;
    let e = mpjpe(&pred, &gt, joints)?;
    println!("single 3-4-5 offset: mpjpe = {:.6} mm (exact {:.6})", e, 5.0 / (frames * joints) as f64);

    // P-MPJPE removes similarity transforms: rotate, scale, and translate
    // the prediction arbitrarily and the aligned error stays zero.
    let angle = 0.7_f64;
    let (s, c) = angle.sin_cos();
    let transformed: Vec<f64> = gt
        .chunks(3)
        .flat_map(|p| {
            let (x, y, z) = (p[0], p[1], p[2]);
            [1.3 * (c * x - s * y) + 250.0, 1.3 * (s * x + c * y) - 80.0, 1.3 * z + 40.0]
        })
        .collect();
    println!(
        "rotated+scaled+shifted copy: mpjpe = {:.1} mm, p-mpjpe = {:.2e} mm",
        mpjpe(&transformed, &gt, joints)?,
        p_mpjpe(&transformed, &gt, joints)?
    );

    // PCK counts joints within a threshold; AUC averages PCK over
    // thresholds 5..=150mm, so AUC <= PCK@150 always.
    let noisy: Vec<f64> = gt
        .iter()
        .map(|v| v + rng.random_range(-60.0..60.0))
        .collect();
    let p150 = pck(&noisy, &gt, joints, 150.0)?;
    let p50 = pck(&noisy, &gt, joints, 50.0)?;
    let a = auc(&noisy, &gt, joints)?;
    println!("noisy copy: pck@50 = {p50:.1}%, pck@150 = {p150:.1}%, auc = {a:.1}%");
    assert!(p50 <= p150 && a <= p150);

    // evaluate() root-centers both arrays (hip to origin) before scoring,
    // so global translation does not count as error.
    let shifted: Vec<f64> = gt.iter().enumerate().map(|(i, v)| v + [10.0, -20.0, 5.0][i % 3]).collect();
    let report = evaluate(&shifted, &gt, joints, Some(0))?;
    println!("globally shifted copy, root-centered evaluation:\n{report}");
    assert!(report.mpjpe_mm < 1e-9);
    Ok(())
}
