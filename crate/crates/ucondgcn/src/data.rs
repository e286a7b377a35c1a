//! Pose-sequence files, the synthetic forward-kinematics corpus, input
//! normalization, and sliding-window inference over long sequences.
//!
//! The on-disk format ("DGP") is line-oriented text: a JSON header object on
//! the first line, then one line of space-separated decimal coordinates per
//! frame, 2D columns first, 3D columns after.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::network::Model;
use crate::skeleton::DirectedSkeleton;
use crate::train::Sample;
use crate::{Error, Result};

// ── sequences and the DGP file format ──────────────────────────────────

/// One motion sequence: 2D pixel poses and/or 3D millimeter poses.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub layout: String,
    pub fps: f64,
    pub frames: usize,
    pub joints: usize,
    /// `(frames, J, 2)` pixel coordinates.
    pub poses2d: Option<Vec<f64>>,
    /// `(frames, J, 3)` millimeter coordinates.
    pub poses3d: Option<Vec<f64>>,
    /// Image size; required when 2D poses are present.
    pub width: Option<f64>,
    pub height: Option<f64>,
    /// Motion class tag, when known.
    pub action: Option<String>,
    /// Parent table for layouts without a registered name.
    pub parents: Option<Vec<Option<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct DgpHeader {
    format: String,
    version: u32,
    layout: String,
    fps: f64,
    frames: usize,
    joints: usize,
    fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parents: Option<Vec<Option<usize>>>,
}

impl PoseSequence {
    /// Resolves the skeleton this sequence refers to.
    pub fn skeleton(&self) -> Result<DirectedSkeleton> {
        if let Some(parents) = &self.parents {
            let names = (0..self.joints).map(|i| format!("j{i}")).collect();
            return DirectedSkeleton::from_parents(names, parents.clone());
        }
        DirectedSkeleton::layout(&self.layout)
    }

    fn check(&self) -> Result<()> {
        if self.poses2d.is_none() && self.poses3d.is_none() {
            return Err(Error::Invalid("sequence has neither 2D nor 3D poses".into()));
        }
        if self.frames == 0 || self.joints == 0 {
            return Err(Error::Invalid("sequence needs frames >= 1 and joints >= 1".into()));
        }
        if let Some(p) = &self.poses2d {
            if p.len() != self.frames * self.joints * 2 {
                return Err(Error::Invalid(format!(
                    "poses2d has {} values, expected {}",
                    p.len(),
                    self.frames * self.joints * 2
                )));
            }
            if self.width.is_none() || self.height.is_none() {
                return Err(Error::Invalid("2D poses require width and height".into()));
            }
        }
        if let Some(p) = &self.poses3d {
            if p.len() != self.frames * self.joints * 3 {
                return Err(Error::Invalid(format!(
                    "poses3d has {} values, expected {}",
                    p.len(),
                    self.frames * self.joints * 3
                )));
            }
        }
        Ok(())
    }

    /// Writes the sequence as DGP text.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        let mut fields = Vec::new();
        if self.poses2d.is_some() {
            fields.push("pose2d".to_string());
        }
        if self.poses3d.is_some() {
            fields.push("pose3d".to_string());
        }
        let header = DgpHeader {
            format: "DGP".into(),
            version: 1,
            layout: self.layout.clone(),
            fps: self.fps,
            frames: self.frames,
            joints: self.joints,
            fields,
            width: self.width,
            height: self.height,
            action: self.action.clone(),
            parents: self.parents.clone(),
        };
        let mut out = serde_json::to_string(&header)
            .map_err(|e| Error::Invalid(format!("header serialization failed: {e}")))?;
        out.push('\n');
        let j = self.joints;
        for f in 0..self.frames {
            let mut tokens: Vec<String> = Vec::with_capacity(j * 5);
            if let Some(p2) = &self.poses2d {
                tokens.extend(p2[f * j * 2..(f + 1) * j * 2].iter().map(|v| v.to_string()));
            }
            if let Some(p3) = &self.poses3d {
                tokens.extend(p3[f * j * 3..(f + 1) * j * 3].iter().map(|v| v.to_string()));
            }
            out.push_str(&tokens.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a DGP file, reporting failures with 1-based line numbers.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header_line = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file (missing header)".into(),
        })?;
        let header: DgpHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
        if header.format != "DGP" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("format {:?} is not \"DGP\"", header.format),
            });
        }
        if header.version != 1 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported version {}", header.version),
            });
        }
        if header.frames == 0 || header.joints == 0 {
            return Err(Error::Parse { line: 1, msg: "frames and joints must be >= 1".into() });
        }
        let mut has2d = false;
        let mut has3d = false;
        for f in &header.fields {
            match f.as_str() {
                "pose2d" => has2d = true,
                "pose3d" => has3d = true,
                other => {
                    return Err(Error::Parse { line: 1, msg: format!("unknown field {other:?}") })
                }
            }
        }
        if !has2d && !has3d {
            return Err(Error::Parse { line: 1, msg: "header lists no pose fields".into() });
        }
        if has2d && (header.width.is_none() || header.height.is_none()) {
            return Err(Error::Parse {
                line: 1,
                msg: "pose2d requires width and height".into(),
            });
        }
        // The layout must be resolvable, via its name or an explicit
        // parent table.
        if header.parents.is_none() {
            let skel = DirectedSkeleton::layout(&header.layout)
                .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
            if skel.joint_count() != header.joints {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!(
                        "layout {} has {} joints, header says {}",
                        header.layout,
                        skel.joint_count(),
                        header.joints
                    ),
                });
            }
        }

        let j = header.joints;
        let per_line = if has2d { j * 2 } else { 0 } + if has3d { j * 3 } else { 0 };
        let mut p2 = has2d.then(|| Vec::with_capacity(header.frames * j * 2));
        let mut p3 = has3d.then(|| Vec::with_capacity(header.frames * j * 3));
        let mut frame = 0usize;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            if frame >= header.frames {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("more data lines than the {} frames declared", header.frames),
                });
            }
            let mut values = Vec::with_capacity(per_line);
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("non-numeric token {tok:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-finite value {tok:?}"),
                    });
                }
                values.push(v);
            }
            if values.len() != per_line {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {per_line} values, found {}", values.len()),
                });
            }
            let mut offset = 0;
            if let Some(p) = &mut p2 {
                p.extend_from_slice(&values[..j * 2]);
                offset = j * 2;
            }
            if let Some(p) = &mut p3 {
                p.extend_from_slice(&values[offset..offset + j * 3]);
            }
            frame += 1;
        }
        if frame != header.frames {
            return Err(Error::Parse {
                line: frame + 2,
                msg: format!("file ends after {frame} frames, header declares {}", header.frames),
            });
        }
        let seq = PoseSequence {
            layout: header.layout,
            fps: header.fps,
            frames: header.frames,
            joints: j,
            poses2d: p2,
            poses3d: p3,
            width: header.width,
            height: header.height,
            action: header.action,
            parents: header.parents,
        };
        seq.check().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        Ok(seq)
    }
}

/// Maps pixel coordinates into `[-1, 1]`: `x → 2x/width − 1`,
/// `y → 2y/height − 1`.
pub fn normalize_2d(poses2d: &[f64], width: f64, height: f64) -> Result<Vec<f64>> {
    if width <= 0.0 || height <= 0.0 {
        return Err(Error::Invalid(format!("image size {width}x{height} must be positive")));
    }
    Ok(poses2d
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % 2 == 0 { 2.0 * v / width - 1.0 } else { 2.0 * v / height - 1.0 })
        .collect())
}

// ── synthetic corpus ───────────────────────────────────────────────────

/// One bone: unit-ish direction from parent at rest, and length.
#[derive(Clone, Debug)]
pub struct BoneSpec {
    pub dir: [f64; 3],
    pub len_mm: f64,
}

/// Pinhole camera: axis-aligned, positioned at `position`, looking along
/// −z. Projection: `u = focal·(X−pₓ)/depth + cx`, `v = cy − focal·(Y−p_y)/depth`,
/// `depth = p_z − Z`.
#[derive(Clone, Debug)]
pub struct CameraConfig {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub position: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { focal_px: 1100.0, cx: 500.0, cy: 500.0, position: [0.0, 900.0, 4200.0] }
    }
}

/// Background joint-wiggle parameters for joints without a class prior.
#[derive(Clone, Debug)]
pub struct TrajectoryConfig {
    pub max_sinusoids: usize,
    pub freq_hz: (f64, f64),
    pub amp_rad: (f64, f64),
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { max_sinusoids: 3, freq_hz: (0.2, 1.2), amp_rad: (0.0, 0.05) }
    }
}

/// Motion classes with distinct joint-dependence structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionClass {
    /// Phase-locked leg swings with counter-phase arm swings (the left
    /// hand moves with the right foot).
    Gait,
    /// Arms raised toward the head while the legs stay put.
    Reach,
    /// No class-specific motion (background wiggle only).
    Static,
}

impl MotionClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotionClass::Gait => "gait",
            MotionClass::Reach => "reach",
            MotionClass::Static => "static",
        }
    }
}

impl std::str::FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gait" => Ok(MotionClass::Gait),
            "reach" => Ok(MotionClass::Reach),
            "static" => Ok(MotionClass::Static),
            other => Err(Error::Config(format!(
                "unknown motion class {other:?} (expected gait|reach|static)"
            ))),
        }
    }
}

/// Synthetic-corpus settings.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub layout: String,
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    /// Gaussian pixel noise added to the projected 2D poses.
    pub noise_std: f64,
    pub width: f64,
    pub height: f64,
    pub camera: CameraConfig,
    /// Per-edge bone table, indexed like the skeleton's edges.
    pub bones: Vec<BoneSpec>,
    pub trajectory: TrajectoryConfig,
    /// Classes cycled round-robin over the generated sequences.
    pub classes: Vec<MotionClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            layout: "h36m17".into(),
            sequences: 8,
            frames: 128,
            fps: 50.0,
            seed: 0,
            noise_std: 1.0,
            width: 1000.0,
            height: 1000.0,
            camera: CameraConfig::default(),
            bones: h36m17_bones(),
            trajectory: TrajectoryConfig::default(),
            classes: vec![MotionClass::Gait, MotionClass::Reach],
        }
    }
}

/// Rest-pose bone table for the 17-joint layout: directions from the parent
/// and lengths in millimeters (arms hang with a slight outward slope).
pub fn h36m17_bones() -> Vec<BoneSpec> {
    let b = |x: f64, y: f64, z: f64, len: f64| BoneSpec { dir: [x, y, z], len_mm: len };
    vec![
        b(-1.0, 0.0, 0.0, 130.0),  // r_hip
        b(0.0, -1.0, 0.0, 440.0),  // r_knee
        b(0.0, -1.0, 0.0, 440.0),  // r_ankle
        b(1.0, 0.0, 0.0, 130.0),   // l_hip
        b(0.0, -1.0, 0.0, 440.0),  // l_knee
        b(0.0, -1.0, 0.0, 440.0),  // l_ankle
        b(0.0, 1.0, 0.0, 230.0),   // spine
        b(0.0, 1.0, 0.0, 230.0),   // thorax
        b(0.0, 1.0, 0.0, 110.0),   // neck
        b(0.0, 1.0, 0.0, 120.0),   // head
        b(1.0, 0.0, 0.0, 150.0),   // l_shoulder
        b(0.3, -1.0, 0.0, 280.0),  // l_elbow
        b(0.2, -1.0, 0.0, 250.0),  // l_wrist
        b(-1.0, 0.0, 0.0, 150.0),  // r_shoulder
        b(-0.3, -1.0, 0.0, 280.0), // r_elbow
        b(-0.2, -1.0, 0.0, 250.0), // r_wrist
    ]
}

/// Projects `(frames, J, 3)` world millimeters through `cam` into
/// `(frames, J, 2)` pixels. Fails when any joint comes within 10mm of the
/// camera plane or behind it.
pub fn project_sequence(poses3d: &[f64], cam: &CameraConfig) -> Result<Vec<f64>> {
    const NEAR_MM: f64 = 10.0;
    if !poses3d.len().is_multiple_of(3) {
        return Err(Error::Invalid("3D pose array length not a multiple of 3".into()));
    }
    let mut out = Vec::with_capacity(poses3d.len() / 3 * 2);
    for p in poses3d.chunks(3) {
        let depth = cam.position[2] - p[2];
        if depth < NEAR_MM {
            return Err(Error::Invalid(format!(
                "joint at depth {depth:.1}mm is behind or too close to the camera"
            )));
        }
        out.push(cam.focal_px * (p[0] - cam.position[0]) / depth + cam.cx);
        out.push(cam.cy - cam.focal_px * (p[1] - cam.position[1]) / depth);
    }
    Ok(out)
}

/// One sinusoidal term of a joint-angle trajectory.
#[derive(Clone, Debug)]
struct Sinusoid {
    axis: usize,
    amp: f64,
    freq_hz: f64,
    phase: f64,
}

/// A joint's full angle trajectory: constant bias plus sinusoids.
#[derive(Clone, Debug, Default)]
struct JointMotion {
    bias: [f64; 3],
    terms: Vec<Sinusoid>,
}

impl JointMotion {
    fn angles(&self, t_sec: f64) -> (f64, f64, f64) {
        let mut a = self.bias;
        for s in &self.terms {
            a[s.axis] += s.amp * (std::f64::consts::TAU * s.freq_hz * t_sec + s.phase).sin();
        }
        (a[0], a[1], a[2])
    }
}

/// Root translation: base position plus sinusoidal bob/sway.
#[derive(Clone, Debug)]
struct RootMotion {
    base: [f64; 3],
    terms: Vec<Sinusoid>,
}

impl RootMotion {
    fn position(&self, t_sec: f64) -> Vector3<f64> {
        let mut p = Vector3::new(self.base[0], self.base[1], self.base[2]);
        for s in &self.terms {
            p[s.axis] += s.amp * (std::f64::consts::TAU * s.freq_hz * t_sec + s.phase).sin();
        }
        p
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Per-class trajectory priors for the named joints, plus background wiggle
/// for everything else.
fn class_motions(
    class: MotionClass,
    skel: &DirectedSkeleton,
    traj: &TrajectoryConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<JointMotion>, RootMotion) {
    let j = skel.joint_count();
    let mut motions = vec![JointMotion::default(); j];
    // Background wiggle on every joint.
    for m in motions.iter_mut() {
        let n = if traj.max_sinusoids == 0 { 0 } else { rng.random_range(0..=traj.max_sinusoids) };
        for _ in 0..n {
            m.terms.push(Sinusoid {
                axis: rng.random_range(0..3),
                amp: draw(rng, traj.amp_rad),
                freq_hz: draw(rng, traj.freq_hz),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            });
        }
    }
    let mut root = RootMotion { base: [0.0, 900.0, 0.0], terms: Vec::new() };
    let idx = |name: &str| skel.joint_index(name);
    let push = |motions: &mut Vec<JointMotion>, joint: Option<usize>, s: Sinusoid| {
        if let Some(ji) = joint {
            motions[ji].terms.push(s);
        }
    };
    match class {
        MotionClass::Static => {}
        MotionClass::Gait => {
            let f = rng.random_range(0.7..1.3);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let leg_amp = rng.random_range(0.4..0.7);
            let arm_amp = rng.random_range(0.2..0.4);
            let pi = std::f64::consts::PI;
            // Sagittal leg swings in counter phase; knees lag by a quarter
            // cycle.
            push(&mut motions, idx("r_hip"), Sinusoid { axis: 0, amp: leg_amp, freq_hz: f, phase: phi });
            push(&mut motions, idx("l_hip"), Sinusoid { axis: 0, amp: leg_amp, freq_hz: f, phase: phi + pi });
            push(&mut motions, idx("r_knee"), Sinusoid { axis: 0, amp: 0.8 * leg_amp, freq_hz: f, phase: phi - pi / 2.0 });
            push(&mut motions, idx("l_knee"), Sinusoid { axis: 0, amp: 0.8 * leg_amp, freq_hz: f, phase: phi + pi / 2.0 });
            // Arms counter their own side: the left arm (and hand) is phase
            // locked to the right leg.
            push(&mut motions, idx("l_shoulder"), Sinusoid { axis: 0, amp: arm_amp, freq_hz: f, phase: phi });
            push(&mut motions, idx("l_elbow"), Sinusoid { axis: 0, amp: 0.5 * arm_amp, freq_hz: f, phase: phi });
            push(&mut motions, idx("r_shoulder"), Sinusoid { axis: 0, amp: arm_amp, freq_hz: f, phase: phi + pi });
            push(&mut motions, idx("r_elbow"), Sinusoid { axis: 0, amp: 0.5 * arm_amp, freq_hz: f, phase: phi + pi });
            // Vertical bob at double the stride frequency, light sway.
            root.terms.push(Sinusoid { axis: 1, amp: 25.0, freq_hz: 2.0 * f, phase: 2.0 * phi });
            root.terms.push(Sinusoid { axis: 0, amp: 15.0, freq_hz: f, phase: phi });
        }
        MotionClass::Reach => {
            let f = rng.random_range(0.2..0.5);
            let raise = rng.random_range(0.6..1.1);
            let flex = rng.random_range(0.3..0.6);
            for (shoulder, elbow, sign) in
                [("l_shoulder", "l_elbow", 1.0), ("r_shoulder", "r_elbow", -1.0)]
            {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                // Oscillate between hanging and raised: bias + half-amp sine
                // about the z axis lifts the arm laterally toward the head.
                if let Some(ji) = idx(shoulder) {
                    motions[ji].bias[2] = sign * raise * 0.5;
                    motions[ji].terms.push(Sinusoid {
                        axis: 2,
                        amp: sign * raise * 0.5,
                        freq_hz: f,
                        phase,
                    });
                }
                push(&mut motions, idx(elbow), Sinusoid {
                    axis: 0,
                    amp: flex,
                    freq_hz: 2.0 * f,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                });
            }
            root.terms.push(Sinusoid { axis: 0, amp: 5.0, freq_hz: f, phase: 0.0 });
        }
    }
    (motions, root)
}

/// Forward kinematics over the directed tree: each joint's local rotation
/// turns its outgoing bones; world rotations accumulate root-to-leaf.
fn fk_sequence(
    skel: &DirectedSkeleton,
    bones: &[BoneSpec],
    motions: &[JointMotion],
    root: &RootMotion,
    frames: usize,
    fps: f64,
) -> Result<Vec<f64>> {
    let j = skel.joint_count();
    if bones.len() != skel.edge_count() {
        return Err(Error::Config(format!(
            "bone table has {} entries for {} edges",
            bones.len(),
            skel.edge_count()
        )));
    }
    for (i, b) in bones.iter().enumerate() {
        let norm = (b.dir[0].powi(2) + b.dir[1].powi(2) + b.dir[2].powi(2)).sqrt();
        if b.len_mm <= 0.0 || norm == 0.0 {
            return Err(Error::Config(format!("bone {i} needs positive length and direction")));
        }
    }
    // Dense edge index: non-root joints in joint order.
    let mut edge_of_joint = vec![usize::MAX; j];
    let mut e = 0;
    for ji in 0..j {
        if skel.parent(ji).is_some() {
            edge_of_joint[ji] = e;
            e += 1;
        }
    }
    let mut out = vec![0.0; frames * j * 3];
    let mut world_rot = vec![Rotation3::identity(); j];
    let mut world_pos = vec![Vector3::zeros(); j];
    for f in 0..frames {
        let t_sec = f as f64 / fps;
        for ji in 0..j {
            let (rx, ry, rz) = motions[ji].angles(t_sec);
            let local = Rotation3::from_euler_angles(rx, ry, rz);
            match skel.parent(ji) {
                None => {
                    world_pos[ji] = root.position(t_sec);
                    world_rot[ji] = local;
                }
                Some(p) => {
                    let bone = &bones[edge_of_joint[ji]];
                    let norm =
                        (bone.dir[0].powi(2) + bone.dir[1].powi(2) + bone.dir[2].powi(2)).sqrt();
                    let offset = Vector3::new(bone.dir[0], bone.dir[1], bone.dir[2])
                        * (bone.len_mm / norm);
                    world_pos[ji] = world_pos[p] + world_rot[p] * offset;
                    world_rot[ji] = world_rot[p] * local;
                }
            }
            let base = (f * j + ji) * 3;
            out[base] = world_pos[ji].x;
            out[base + 1] = world_pos[ji].y;
            out[base + 2] = world_pos[ji].z;
        }
    }
    Ok(out)
}

/// Generates a deterministic corpus: per sequence, class-conditioned
/// sinusoidal joint trajectories → forward kinematics → pinhole projection
/// → optional pixel noise. Sequences whose motion leaves the camera frustum
/// are redrawn a bounded number of times.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<PoseSequence>> {
    const MAX_ATTEMPTS: usize = 20;
    if cfg.sequences == 0 || cfg.frames == 0 {
        return Err(Error::Config("synth needs sequences >= 1 and frames >= 1".into()));
    }
    if cfg.classes.is_empty() {
        return Err(Error::Config("synth needs at least one motion class".into()));
    }
    if cfg.fps <= 0.0 {
        return Err(Error::Config(format!("fps must be positive, got {}", cfg.fps)));
    }
    if !cfg.noise_std.is_finite() || cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", cfg.noise_std)));
    }
    let skel = DirectedSkeleton::layout(&cfg.layout)?;
    let mut out = Vec::with_capacity(cfg.sequences);
    for i in 0..cfg.sequences {
        let class = cfg.classes[i % cfg.classes.len()];
        let seq_seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
        let mut projected = None;
        for _ in 0..MAX_ATTEMPTS {
            let (motions, root) = class_motions(class, &skel, &cfg.trajectory, &mut rng);
            let p3 = fk_sequence(&skel, &cfg.bones, &motions, &root, cfg.frames, cfg.fps)?;
            match project_sequence(&p3, &cfg.camera) {
                Ok(p2) => {
                    projected = Some((p3, p2));
                    break;
                }
                Err(_) => continue,
            }
        }
        let (p3, mut p2) = projected.ok_or_else(|| {
            Error::Invalid(format!(
                "sequence {i} ({}) kept leaving the camera frustum after {MAX_ATTEMPTS} attempts",
                class.as_str()
            ))
        })?;
        if cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_std)
                .map_err(|e| Error::Config(format!("bad noise_std: {e}")))?;
            for v in p2.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        out.push(PoseSequence {
            layout: cfg.layout.clone(),
            fps: cfg.fps,
            frames: cfg.frames,
            joints: skel.joint_count(),
            poses2d: Some(p2),
            poses3d: Some(p3),
            width: Some(cfg.width),
            height: Some(cfg.height),
            action: Some(class.as_str().to_string()),
            parents: None,
        });
    }
    Ok(out)
}

// ── windowing ──────────────────────────────────────────────────────────

/// Window start offsets: `0, step, 2·step, …` plus a right-aligned tail
/// window, covering every frame.
pub fn window_starts(t_full: usize, t: usize, step: usize) -> Result<Vec<usize>> {
    if t == 0 || t_full < t {
        return Err(Error::Invalid(format!(
            "sequence of {t_full} frames is shorter than the {t}-frame window; pad the input \
             or use a shorter window"
        )));
    }
    if step == 0 || step > t {
        return Err(Error::Config(format!(
            "window step must be in 1..={t} (window length) to cover every frame, got {step}"
        )));
    }
    let mut starts: Vec<usize> = (0..=t_full - t).step_by(step).collect();
    let tail = t_full - t;
    if *starts.last().expect("at least one window") != tail {
        starts.push(tail);
    }
    Ok(starts)
}

/// Converts one sequence into training windows: normalized 2D inputs and
/// root-centered millimeter 3D targets.
pub fn make_samples(
    seq: &PoseSequence,
    skel: &DirectedSkeleton,
    t: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    let (Some(p2), Some(p3)) = (&seq.poses2d, &seq.poses3d) else {
        return Err(Error::Invalid("training windows need both 2D and 3D poses".into()));
    };
    if seq.joints != skel.joint_count() {
        return Err(Error::Invalid(format!(
            "sequence has {} joints, skeleton has {}",
            seq.joints,
            skel.joint_count()
        )));
    }
    let (width, height) = (seq.width.unwrap_or(0.0), seq.height.unwrap_or(0.0));
    let normalized = normalize_2d(p2, width, height)?;
    let centered = crate::metrics::root_center(p3, seq.joints, skel.root());
    let j = seq.joints;
    let starts = window_starts(seq.frames, t, stride)?;
    Ok(starts
        .into_iter()
        .map(|s| Sample {
            input2d: normalized[s * j * 2..(s + t) * j * 2].to_vec(),
            gt3d: centered[s * j * 3..(s + t) * j * 3].to_vec(),
        })
        .collect())
}

/// Lifts an arbitrary-length `(F, J, 2)` normalized 2D sequence to
/// `(F, J, 3)` by averaging overlapping window predictions.
pub fn sliding_window_infer(
    model: &Model,
    input2d: &Tensor,
    step: usize,
    batch_size: usize,
) -> Result<Tensor> {
    let s = input2d.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Shape {
            op: "sliding_window_infer",
            detail: format!("expected (frames, joints, 2), got {s:?}"),
        });
    }
    let (f_full, j) = (s[0], s[1]);
    if j != model.skeleton().joint_count() {
        return Err(Error::Shape {
            op: "sliding_window_infer",
            detail: format!("{} joints vs model's {}", j, model.skeleton().joint_count()),
        });
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let t = model.config().t;
    let starts = window_starts(f_full, t, step)?;
    let data = input2d.data();
    let mut acc = vec![0.0; f_full * j * 3];
    let mut weight = vec![0usize; f_full];
    for chunk in starts.chunks(batch_size) {
        let mut batch = Vec::with_capacity(chunk.len() * t * j * 2);
        for &st in chunk {
            batch.extend_from_slice(&data[st * j * 2..(st + t) * j * 2]);
        }
        let x = Tensor::new(&[chunk.len(), t, j, 2], batch)?;
        let y = model.forward(&x)?; // (B, T, J, 3)
        let yd = y.data();
        for (bi, &st) in chunk.iter().enumerate() {
            let src = &yd[bi * t * j * 3..(bi + 1) * t * j * 3];
            for ti in 0..t {
                weight[st + ti] += 1;
                let dst = &mut acc[(st + ti) * j * 3..(st + ti + 1) * j * 3];
                for (d, v) in dst.iter_mut().zip(&src[ti * j * 3..(ti + 1) * j * 3]) {
                    *d += v;
                }
            }
        }
    }
    for (fi, &w) in weight.iter().enumerate() {
        if w == 0 {
            return Err(Error::Invalid(format!("frame {fi} not covered by any window")));
        }
        let inv = 1.0 / w as f64;
        for v in &mut acc[fi * j * 3..(fi + 1) * j * 3] {
            *v *= inv;
        }
    }
    Tensor::new(&[f_full, j, 3], acc)
}

/// Per-frame window coverage counts for the given windowing (the weights of
/// the prediction average, before normalization).
pub fn coverage_counts(t_full: usize, t: usize, step: usize) -> Result<Vec<usize>> {
    let starts = window_starts(t_full, t, step)?;
    let mut counts = vec![0usize; t_full];
    for s in starts {
        for c in &mut counts[s..s + t] {
            *c += 1;
        }
    }
    Ok(counts)
}
