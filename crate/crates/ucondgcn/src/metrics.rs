//! Evaluation protocols for 3D pose estimates, all in millimeters.
//!
//! - [`mpjpe`]: mean per-joint position error (Protocol 1 when fed
//!   root-centered poses, as [`evaluate`] does);
//! - [`p_mpjpe`]: MPJPE after per-frame least-squares similarity alignment
//!   of the prediction onto the ground truth (Protocol 2);
//! - [`pck`]: percentage of joints with error strictly below a threshold
//!   (150mm by default);
//! - [`auc`]: mean PCK over the 5..150mm threshold grid in steps of 5.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Threshold grid for [`auc`]: 5, 10, …, 150 mm.
pub const AUC_THRESHOLDS_MM: std::ops::RangeInclusive<usize> = 5..=150;
pub const AUC_STEP_MM: usize = 5;
/// Default PCK threshold.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

fn frame_count(op: &'static str, pred: &[f64], gt: &[f64], joints: usize) -> Result<usize> {
    if joints == 0 {
        return Err(Error::Shape { op, detail: "zero joints".into() });
    }
    if pred.len() != gt.len() || pred.is_empty() || !pred.len().is_multiple_of(joints * 3) {
        return Err(Error::Shape {
            op,
            detail: format!(
                "pred has {} values, gt has {}, expected equal nonzero multiples of {}",
                pred.len(),
                gt.len(),
                joints * 3
            ),
        });
    }
    Ok(pred.len() / (joints * 3))
}

fn joint_error(pred: &[f64], gt: &[f64]) -> f64 {
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let dz = pred[2] - gt[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Mean Euclidean distance over all (frame, joint) pairs of `(F, J, 3)`
/// poses.
pub fn mpjpe(pred: &[f64], gt: &[f64], joints: usize) -> Result<f64> {
    let frames = frame_count("mpjpe", pred, gt, joints)?;
    let mut sum = 0.0;
    for i in 0..frames * joints {
        sum += joint_error(&pred[i * 3..i * 3 + 3], &gt[i * 3..i * 3 + 3]);
    }
    Ok(sum / (frames * joints) as f64)
}

/// Least-squares similarity alignment (rotation, uniform scale, translation)
/// of one `(J, 3)` predicted frame onto the ground-truth frame.
///
/// Returns the aligned frame and a degeneracy flag: when the predicted
/// joints all coincide, only the translation is compensated and the flag is
/// set.
pub fn procrustes_align(pred_frame: &[f64], gt_frame: &[f64]) -> Result<(Vec<f64>, bool)> {
    if pred_frame.len() != gt_frame.len() || pred_frame.is_empty() || !pred_frame.len().is_multiple_of(3) {
        return Err(Error::Shape {
            op: "procrustes_align",
            detail: format!("{} vs {} values", pred_frame.len(), gt_frame.len()),
        });
    }
    let n = pred_frame.len() / 3;
    let p = |i: usize| Vector3::new(pred_frame[i * 3], pred_frame[i * 3 + 1], pred_frame[i * 3 + 2]);
    let g = |i: usize| Vector3::new(gt_frame[i * 3], gt_frame[i * 3 + 1], gt_frame[i * 3 + 2]);
    let inv_n = 1.0 / n as f64;
    let mut mu_p = Vector3::zeros();
    let mut mu_g = Vector3::zeros();
    for i in 0..n {
        mu_p += p(i);
        mu_g += g(i);
    }
    mu_p *= inv_n;
    mu_g *= inv_n;

    let mut var_p = 0.0;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let pc = p(i) - mu_p;
        let gc = g(i) - mu_g;
        var_p += pc.norm_squared();
        cov += gc * pc.transpose();
    }
    var_p *= inv_n;
    cov *= inv_n;

    if var_p < 1e-12 {
        // All predicted joints coincide: translation-only alignment.
        let shift = mu_g - mu_p;
        let mut out = pred_frame.to_vec();
        for i in 0..n {
            out[i * 3] += shift.x;
            out[i * 3 + 1] += shift.y;
            out[i * 3 + 2] += shift.z;
        }
        return Ok((out, true));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NonFinite("procrustes SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::NonFinite("procrustes SVD failed".into()))?;
    let d = svd.singular_values;
    // Reflection correction: flip the smallest singular direction if needed.
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * s * v_t;
    let scale = (d[0] + d[1] + sign * d[2]) / var_p;
    let t = mu_g - r * mu_p * scale;

    let mut out = vec![0.0; pred_frame.len()];
    for i in 0..n {
        let aligned = r * p(i) * scale + t;
        out[i * 3] = aligned.x;
        out[i * 3 + 1] = aligned.y;
        out[i * 3 + 2] = aligned.z;
    }
    Ok((out, false))
}

/// MPJPE after per-frame Procrustes alignment of pred onto gt.
pub fn p_mpjpe(pred: &[f64], gt: &[f64], joints: usize) -> Result<f64> {
    let (err, _) = p_mpjpe_with_flags(pred, gt, joints)?;
    Ok(err)
}

/// [`p_mpjpe`] plus the number of frames that fell back to translation-only
/// alignment.
pub fn p_mpjpe_with_flags(pred: &[f64], gt: &[f64], joints: usize) -> Result<(f64, usize)> {
    let frames = frame_count("p_mpjpe", pred, gt, joints)?;
    let stride = joints * 3;
    let mut sum = 0.0;
    let mut degenerate = 0;
    for f in 0..frames {
        let (aligned, flag) =
            procrustes_align(&pred[f * stride..(f + 1) * stride], &gt[f * stride..(f + 1) * stride])?;
        if flag {
            degenerate += 1;
        }
        for j in 0..joints {
            sum += joint_error(&aligned[j * 3..j * 3 + 3], &gt[f * stride + j * 3..f * stride + j * 3 + 3]);
        }
    }
    Ok((sum / (frames * joints) as f64, degenerate))
}

/// Percentage of (frame, joint) pairs with error strictly below
/// `threshold_mm`.
pub fn pck(pred: &[f64], gt: &[f64], joints: usize, threshold_mm: f64) -> Result<f64> {
    let frames = frame_count("pck", pred, gt, joints)?;
    let mut hits = 0usize;
    for i in 0..frames * joints {
        if joint_error(&pred[i * 3..i * 3 + 3], &gt[i * 3..i * 3 + 3]) < threshold_mm {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / (frames * joints) as f64)
}

/// Mean PCK over thresholds 5, 10, …, 150 mm.
pub fn auc(pred: &[f64], gt: &[f64], joints: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for thr in AUC_THRESHOLDS_MM.step_by(AUC_STEP_MM) {
        sum += pck(pred, gt, joints, thr as f64)?;
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pmpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    pub frames: usize,
    pub joints: usize,
    /// Frames where Procrustes fell back to translation-only alignment.
    pub degenerate_frames: usize,
}

impl EvalReport {
    /// Machine-readable `key = value` lines.
    pub fn kv_lines(&self) -> String {
        format!(
            "mpjpe_mm = {}\npmpjpe_mm = {}\npck_percent = {}\nauc_percent = {}\nframes = {}\njoints = {}\ndegenerate_frames = {}\n",
            self.mpjpe_mm,
            self.pmpjpe_mm,
            self.pck_percent,
            self.auc_percent,
            self.frames,
            self.joints,
            self.degenerate_frames
        )
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames: {}  joints: {}", self.frames, self.joints)?;
        writeln!(f, "MPJPE   (protocol 1): {:9.3} mm", self.mpjpe_mm)?;
        writeln!(f, "P-MPJPE (protocol 2): {:9.3} mm", self.pmpjpe_mm)?;
        writeln!(f, "PCK@150mm:            {:9.3} %", self.pck_percent)?;
        writeln!(f, "AUC (5..150mm):       {:9.3} %", self.auc_percent)?;
        if self.degenerate_frames > 0 {
            writeln!(f, "degenerate alignment frames: {}", self.degenerate_frames)?;
        }
        Ok(())
    }
}

/// Root-centers both poses (when `root` is given) and computes all metrics.
pub fn evaluate(pred: &[f64], gt: &[f64], joints: usize, root: Option<usize>) -> Result<EvalReport> {
    let frames = frame_count("evaluate", pred, gt, joints)?;
    let (pred, gt) = match root {
        Some(r) if r >= joints => {
            return Err(Error::Shape {
                op: "evaluate",
                detail: format!("root index {r} out of {joints} joints"),
            })
        }
        Some(r) => (root_center(pred, joints, r), root_center(gt, joints, r)),
        None => (pred.to_vec(), gt.to_vec()),
    };
    let (pmpjpe_mm, degenerate_frames) = p_mpjpe_with_flags(&pred, &gt, joints)?;
    Ok(EvalReport {
        mpjpe_mm: mpjpe(&pred, &gt, joints)?,
        pmpjpe_mm,
        pck_percent: pck(&pred, &gt, joints, PCK_THRESHOLD_MM)?,
        auc_percent: auc(&pred, &gt, joints)?,
        frames,
        joints,
        degenerate_frames,
    })
}

/// Translates each frame so the root joint sits at the origin.
pub fn root_center(poses: &[f64], joints: usize, root: usize) -> Vec<f64> {
    let stride = joints * 3;
    let mut out = poses.to_vec();
    for f in 0..poses.len() / stride {
        let frame = &mut out[f * stride..(f + 1) * stride];
        let (rx, ry, rz) = (frame[root * 3], frame[root * 3 + 1], frame[root * 3 + 2]);
        for j in 0..joints {
            frame[j * 3] -= rx;
            frame[j * 3 + 1] -= ry;
            frame[j * 3 + 2] -= rz;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, frames: usize, joints: usize, spread: f64) -> Vec<f64> {
        (0..frames * joints * 3).map(|_| rng.random_range(-spread..spread)).collect()
    }

    fn apply_similarity(
        pose: &[f64],
        scale: f64,
        rot: &Rotation3<f64>,
        t: [f64; 3],
    ) -> Vec<f64> {
        pose.chunks(3)
            .flat_map(|p| {
                let v = rot * Vector3::new(p[0], p[1], p[2]) * scale;
                [v.x + t[0], v.y + t[1], v.z + t[2]]
            })
            .collect()
    }

    #[test]
    fn mpjpe_hand_cases() {
        // Single joint off by (3, 4, 0) → exactly 5.0.
        let gt = vec![0.0, 0.0, 0.0];
        let pred = vec![3.0, 4.0, 0.0];
        assert_eq!(mpjpe(&pred, &gt, 1).unwrap(), 5.0);
        // Identical → 0; uniform (0, 0, 10) offset → 10.
        let gt2 = vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0];
        assert_eq!(mpjpe(&gt2, &gt2, 2).unwrap(), 0.0);
        let off: Vec<f64> =
            gt2.iter().enumerate().map(|(i, &v)| if i % 3 == 2 { v + 10.0 } else { v }).collect();
        assert_eq!(mpjpe(&off, &gt2, 2).unwrap(), 10.0);
        // Random case against an independent accumulation.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_pose(&mut rng, 4, 5, 100.0);
        let b = random_pose(&mut rng, 4, 5, 100.0);
        let mut want = 0.0;
        for i in 0..20 {
            let d: f64 = (0..3).map(|c| (a[i * 3 + c] - b[i * 3 + c]).powi(2)).sum();
            want += d.sqrt();
        }
        want /= 20.0;
        assert!((mpjpe(&a, &b, 5).unwrap() - want).abs() < 1e-12);
        // Symmetry.
        assert_eq!(mpjpe(&a, &b, 5).unwrap(), mpjpe(&b, &a, 5).unwrap());
    }

    #[test]
    fn procrustes_recovers_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let gt = random_pose(&mut rng, 1, 8, 500.0);
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let scale = rng.random_range(0.5..2.0);
            let t = [
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            ];
            let pred = apply_similarity(&gt, scale, &rot, t);
            let (aligned, flag) = procrustes_align(&pred, &gt).unwrap();
            assert!(!flag);
            let err = mpjpe(&aligned, &gt, 8).unwrap();
            assert!(err < 1e-9, "exact recovery expected, got {err}");
        }
    }

    #[test]
    fn procrustes_identity_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_pose(&mut rng, 1, 10, 300.0);
        let (aligned, flag) = procrustes_align(&gt, &gt).unwrap();
        assert!(!flag);
        assert!(mpjpe(&aligned, &gt, 10).unwrap() < 1e-9);
        // Aligned error never exceeds unaligned error on noisy data.
        for _ in 0..10 {
            let noisy: Vec<f64> =
                gt.iter().map(|&v| v + rng.random_range(-50.0..50.0)).collect();
            let before = mpjpe(&noisy, &gt, 10).unwrap();
            let (aligned, _) = procrustes_align(&noisy, &gt).unwrap();
            let after = mpjpe(&aligned, &gt, 10).unwrap();
            assert!(after <= before + 1e-9, "{after} > {before}");
        }
    }

    #[test]
    fn procrustes_degenerate_prediction_translates_only() {
        let pred = [7.0, -2.0, 4.0].repeat(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng, 1, 5, 100.0);
        let (aligned, flag) = procrustes_align(&pred, &gt).unwrap();
        assert!(flag, "coincident prediction must be flagged");
        // The aligned centroid matches gt's centroid; geometry unchanged.
        let centroid = |p: &[f64], c: usize| -> f64 {
            p.chunks(3).map(|v| v[c]).sum::<f64>() / (p.len() / 3) as f64
        };
        for c in 0..3 {
            assert!((centroid(&aligned, c) - centroid(&gt, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn p_mpjpe_invariant_under_similarity_and_bounded_by_mpjpe() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let gt = random_pose(&mut rng, 3, 6, 400.0);
            let pred: Vec<f64> = gt.iter().map(|&v| v + rng.random_range(-30.0..30.0)).collect();
            let base = p_mpjpe(&pred, &gt, 6).unwrap();
            let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
            let moved = apply_similarity(&pred, 1.7, &rot, [250.0, -80.0, 31.0]);
            let again = p_mpjpe(&moved, &gt, 6).unwrap();
            assert!((base - again).abs() <= 1e-9, "{base} vs {again}");
            assert!(base <= mpjpe(&pred, &gt, 6).unwrap() + 1e-9);
        }
    }

    #[test]
    fn pck_hand_cases_and_monotonicity() {
        let gt = vec![0.0; 4 * 3];
        assert_eq!(pck(&gt, &gt, 4, 150.0).unwrap(), 100.0);
        // All errors exactly 200mm → 0 at the 150mm threshold.
        let pred200: Vec<f64> =
            gt.chunks(3).flat_map(|p| [p[0] + 200.0, p[1], p[2]]).collect();
        assert_eq!(pck(&pred200, &gt, 4, 150.0).unwrap(), 0.0);
        // Half at 100mm, half at 200mm → 50.
        let mixed: Vec<f64> = (0..4)
            .flat_map(|j| if j % 2 == 0 { [100.0, 0.0, 0.0] } else { [200.0, 0.0, 0.0] })
            .collect();
        assert_eq!(pck(&mixed, &gt, 4, 150.0).unwrap(), 50.0);
        // Monotone non-decreasing in the threshold.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = random_pose(&mut rng, 5, 6, 120.0);
        let gt = random_pose(&mut rng, 5, 6, 120.0);
        let mut last = 0.0;
        for thr in (5..=300).step_by(5) {
            let v = pck(&pred, &gt, 6, thr as f64).unwrap();
            assert!(v >= last, "pck must not decrease with threshold");
            last = v;
        }
    }

    #[test]
    fn auc_hand_cases_and_bound() {
        let gt = vec![0.0; 6];
        assert_eq!(auc(&gt, &gt, 2).unwrap(), 100.0);
        // All errors 151mm → above every threshold in the grid → 0.
        let p151: Vec<f64> = gt.chunks(3).flat_map(|p| [p[0] + 151.0, p[1], p[2]]).collect();
        assert_eq!(auc(&p151, &gt, 2).unwrap(), 0.0);
        // All errors exactly 75mm → hit for thresholds 80..150, 15 of 30 → 50.
        let p75: Vec<f64> = gt.chunks(3).flat_map(|p| [p[0] + 75.0, p[1], p[2]]).collect();
        assert_eq!(auc(&p75, &gt, 2).unwrap(), 50.0);
        // auc ≤ pck@150 on random data.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let pred = random_pose(&mut rng, 3, 5, 180.0);
            let gt = random_pose(&mut rng, 3, 5, 180.0);
            assert!(auc(&pred, &gt, 5).unwrap() <= pck(&pred, &gt, 5, 150.0).unwrap() + 1e-12);
        }
    }

    #[test]
    fn evaluate_root_centers_before_protocol_one() {
        // Prediction = gt + constant offset: raw error 10mm, but Protocol 1
        // (root-relative) sees zero.
        let gt = vec![
            0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 200.0, 0.0,
        ];
        let pred: Vec<f64> = gt.iter().enumerate().map(|(i, &v)| if i % 3 == 2 { v + 10.0 } else { v }).collect();
        let raw = evaluate(&pred, &gt, 3, None).unwrap();
        assert!((raw.mpjpe_mm - 10.0).abs() < 1e-12);
        let rooted = evaluate(&pred, &gt, 3, Some(0)).unwrap();
        assert_eq!(rooted.mpjpe_mm, 0.0);
        assert_eq!(rooted.pck_percent, 100.0);
        assert!(rooted.kv_lines().contains("mpjpe_mm = 0"));
        assert!(evaluate(&pred, &gt, 3, Some(7)).is_err());
    }
}
