//! Synthetic motion benchmark: smooth sinusoidal pose trajectories driven
//! through the body model, and a reconstruction-noise simulator that
//! re-poses each frame with perturbed joint angles.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::cuboid::{sample_clip, ClipManifest, JointSeq, MeshCuboid, SampleMode};
use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, Mesh, Vec3};
use crate::skeleton::Skeleton;
use crate::metrics::mpjpe_frames;

/// One sinusoid `amplitude * sin(2 pi frequency t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Wave {
    fn at(&self, seconds: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * seconds + self.phase).sin()
    }
}

/// Per-joint, per-axis sinusoid bank plus a root translation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// `[joint][axis]` constant axis-angle offsets (radians).
    pub offsets: Vec<[f64; 3]>,
    /// `[joint][axis]` waves (radians).
    pub waves: Vec<[Vec<Wave>; 3]>,
    /// Root translation waves per axis (meters).
    pub translation: [Vec<Wave>; 3],
    pub frame_rate: f64,
    pub duration_frames: usize,
    pub seed: u64,
}

/// Per-joint amplitude scale of the humanoid's motion, radians per axis.
#[rustfmt::skip]
const HUMANOID_RANGE: [[f64; 3]; 24] = [
    [0.15, 0.6, 0.1],
    [0.6, 0.15, 0.2], [0.6, 0.15, 0.2],
    [0.15, 0.15, 0.1],
    [0.7, 0.0, 0.0], [0.7, 0.0, 0.0],
    [0.15, 0.15, 0.1],
    [0.25, 0.05, 0.1], [0.25, 0.05, 0.1],
    [0.15, 0.15, 0.1],
    [0.1, 0.0, 0.0], [0.1, 0.0, 0.0],
    [0.2, 0.2, 0.1],
    [0.05, 0.1, 0.15], [0.05, 0.1, 0.15],
    [0.2, 0.3, 0.1],
    [0.4, 0.4, 0.7], [0.4, 0.4, 0.7],
    [0.1, 0.8, 0.1], [0.1, 0.8, 0.1],
    [0.2, 0.2, 0.3], [0.2, 0.2, 0.3],
    [0.1, 0.1, 0.1], [0.1, 0.1, 0.1],
];

const FREQ_RANGE: (f64, f64) = (0.04, 0.16);

impl MotionSpec {
    /// Validates the bank: positive frequencies and axis-angle vectors that
    /// stay below pi in norm for every time.
    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.waves.len() {
            return Err(Error::dim("motion offsets and waves disagree on joint count"));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::invalid("motion frame rate must be positive"));
        }
        let all = self.waves.iter().flatten().chain(self.translation.iter()).flatten();
        for w in all {
            if !(w.frequency.is_finite() && w.frequency > 0.0 && w.amplitude.is_finite() && w.phase.is_finite()) {
                return Err(Error::invalid(format!("invalid wave {w:?}")));
            }
        }
        for (j, (off, axes)) in self.offsets.iter().zip(&self.waves).enumerate() {
            let bound: f64 = (0..3)
                .map(|a| {
                    let c = off[a].abs() + axes[a].iter().map(|w| w.amplitude.abs()).sum::<f64>();
                    c * c
                })
                .sum::<f64>()
                .sqrt();
            if bound >= PI {
                return Err(Error::invalid(format!(
                    "joint {j}: rotation amplitude bound {bound:.3} reaches pi"
                )));
            }
        }
        Ok(())
    }

    /// Random action for a `num_joints` skeleton. The humanoid's joints get
    /// anatomical ranges; other skeletons a uniform 0.2 rad.
    pub fn random(num_joints: usize, frame_rate: f64, duration_frames: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets = Vec::with_capacity(num_joints);
        let mut waves = Vec::with_capacity(num_joints);
        let wave = |rng: &mut ChaCha8Rng, scale: f64| Wave {
            amplitude: scale * rng.random_range(0.3..1.0),
            frequency: rng.random_range(FREQ_RANGE.0..FREQ_RANGE.1),
            phase: rng.random_range(0.0..TAU),
        };
        for j in 0..num_joints {
            let range = if num_joints == HUMANOID_RANGE.len() {
                HUMANOID_RANGE[j]
            } else {
                [0.2; 3]
            };
            let mut off = [0.0; 3];
            let axes: [Vec<Wave>; 3] = std::array::from_fn(|a| {
                off[a] = range[a] * rng.random_range(-0.3..0.3);
                if range[a] == 0.0 {
                    Vec::new()
                } else {
                    vec![wave(&mut rng, range[a]), wave(&mut rng, range[a])]
                }
            });
            offsets.push(off);
            waves.push(axes);
        }
        let translation = std::array::from_fn(|_| vec![wave(&mut rng, 0.3)]);
        let spec = Self {
            offsets,
            waves,
            translation,
            frame_rate,
            duration_frames,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A motionless spec: every frame is the rest pose.
    pub fn still(num_joints: usize, frame_rate: f64, duration_frames: usize) -> Self {
        Self {
            offsets: vec![[0.0; 3]; num_joints],
            waves: vec![[Vec::new(), Vec::new(), Vec::new()]; num_joints],
            translation: [Vec::new(), Vec::new(), Vec::new()],
            frame_rate,
            duration_frames,
            seed: 0,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.offsets.len()
    }

    /// Pose at source frame `frame`.
    pub fn pose_at(&self, frame: usize) -> PoseParams {
        let seconds = frame as f64 / self.frame_rate;
        let rotations = self
            .offsets
            .iter()
            .zip(&self.waves)
            .map(|(off, axes)| {
                Vec3::from_fn(|a, _| off[a] + axes[a].iter().map(|w| w.at(seconds)).sum::<f64>())
            })
            .collect();
        let translation = Vec3::from_fn(|a, _| self.translation[a].iter().map(|w| w.at(seconds)).sum());
        PoseParams {
            rotations,
            translation,
        }
    }

    /// Upper bound on the per-second rate of each joint's axis-angle vector.
    pub fn rotation_rate_bound(&self, joint: usize) -> f64 {
        (0..3)
            .map(|a| {
                let r: f64 = self.waves[joint][a].iter().map(|w| TAU * w.frequency * w.amplitude.abs()).sum();
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Upper bound on the per-second speed of the root translation.
    pub fn translation_rate_bound(&self) -> f64 {
        (0..3)
            .map(|a| {
                let r: f64 = self.translation[a].iter().map(|w| TAU * w.frequency * w.amplitude.abs()).sum();
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A ground-truth clip at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub shape: ShapeParams,
    pub poses: Vec<PoseParams>,
    /// Source frame index of each clip frame.
    pub frames: Vec<usize>,
    pub vertices: Vec<Vec<Vec3>>,
    pub joints: Vec<Vec<Vec3>>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn cuboid(&self) -> Result<MeshCuboid> {
        MeshCuboid::from_frames(&self.vertices)
    }

    pub fn joint_seq(&self) -> Result<JointSeq> {
        JointSeq::from_frames(&self.joints)
    }
}

/// Poses the shaped body at the given source frames of `motion`.
pub fn gen_clip_frames(model: &BodyModel, motion: &MotionSpec, shape: &ShapeParams, frames: &[usize]) -> Result<Clip> {
    motion.validate()?;
    if motion.num_joints() != model.num_joints() {
        return Err(Error::dim(format!(
            "motion drives {} joints, model has {}",
            motion.num_joints(),
            model.num_joints()
        )));
    }
    if frames.is_empty() {
        return Err(Error::invalid("clip needs at least one frame"));
    }
    let rest = model.shape_mesh(shape)?.vertices;
    let mut clip = Clip {
        shape: shape.clone(),
        poses: Vec::with_capacity(frames.len()),
        frames: frames.to_vec(),
        vertices: Vec::with_capacity(frames.len()),
        joints: Vec::with_capacity(frames.len()),
    };
    for &f in frames {
        let pose = motion.pose_at(f);
        let v = model.pose_vertices(&rest, &pose, None)?;
        clip.joints.push(model.regress_joints(&v)?);
        clip.vertices.push(v);
        clip.poses.push(pose);
    }
    Ok(clip)
}

/// The first `len` consecutive source frames.
pub fn gen_clip(model: &BodyModel, motion: &MotionSpec, shape: &ShapeParams, len: usize) -> Result<Clip> {
    gen_clip_frames(model, motion, shape, &(0..len).collect::<Vec<_>>())
}

/// Reconstruction-noise model, all in pose-parameter space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Stationary standard deviation of per-frame joint-angle noise (rad).
    pub jitter_std: f64,
    /// AR(1) coefficient of that noise across frames; 0 is white.
    pub drift: f64,
    /// Chance that a frame is an outlier.
    pub outlier_prob: f64,
    /// Standard deviation of extra joint-angle error on outlier frames (rad).
    pub outlier_std: f64,
    /// Standard deviation of per-clip relative limb-bone length error.
    pub limb_std: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            jitter_std: 0.08,
            drift: 0.3,
            outlier_prob: 0.1,
            outlier_std: 0.25,
            limb_std: 0.03,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            jitter_std: 0.0,
            drift: 0.0,
            outlier_prob: 0.0,
            outlier_std: 0.0,
            limb_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [self.jitter_std, self.outlier_std, self.limb_std];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("noise standard deviations must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::invalid("outlier probability must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.drift) {
            return Err(Error::invalid("drift coefficient must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Joints whose incoming bone is a limb segment (thighs, shins, feet,
/// upper arms, forearms, hands) on the humanoid.
const HUMANOID_LIMBS: [usize; 12] = [4, 5, 7, 8, 10, 11, 18, 19, 20, 21, 22, 23];

/// Which frames of a corrupted clip were replaced by outliers, plus the
/// per-joint bone scales used.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub cuboid: MeshCuboid,
    pub outliers: Vec<bool>,
    pub bone_scales: Vec<f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(gauss(rng), gauss(rng), gauss(rng))
}

/// Re-poses every frame of `clip` with perturbed joint angles and limb
/// lengths. Zero noise reproduces the clip exactly.
pub fn corrupt(clip: &Clip, model: &BodyModel, noise: &NoiseSpec) -> Result<Corruption> {
    noise.validate()?;
    let k = model.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let limbs: Vec<usize> = if k == 24 { HUMANOID_LIMBS.to_vec() } else { (1..k).collect() };
    let mut bone_scales = vec![1.0; k];
    for &j in &limbs {
        bone_scales[j] = (1.0 + noise.limb_std * gauss(&mut rng)).max(0.5);
    }
    let rest = model.shape_mesh(&clip.shape)?.vertices;
    let innovation = (1.0 - noise.drift * noise.drift).sqrt() * noise.jitter_std;
    let mut state = vec![Vec3::zeros(); k];
    let mut frames = Vec::with_capacity(clip.len());
    let mut outliers = Vec::with_capacity(clip.len());
    for (t, pose) in clip.poses.iter().enumerate() {
        for s in state.iter_mut() {
            let xi = gauss3(&mut rng);
            *s = if t == 0 { xi * noise.jitter_std } else { *s * noise.drift + xi * innovation };
        }
        let outlier = rng.random::<f64>() < noise.outlier_prob;
        let mut noisy = pose.clone();
        for (r, s) in noisy.rotations.iter_mut().zip(&state) {
            *r += s;
            if outlier {
                *r += gauss3(&mut rng) * noise.outlier_std;
            }
        }
        frames.push(model.pose_vertices(&rest, &noisy, Some(&bone_scales))?);
        outliers.push(outlier);
    }
    Ok(Corruption {
        cuboid: MeshCuboid::from_frames(&frames)?,
        outliers,
        bone_scales,
    })
}

const CLOTH_CLEARANCE: f64 = 0.6;

/// A loose garment over a shaped body: subdivided body surface pushed
/// away from the nearest bone by a smoothly varying amount.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClothSpec {
    pub subdivisions: usize,
    /// Offset everywhere (meters).
    pub thickness: f64,
    /// Extra offset at the loosest places (meters).
    pub looseness: f64,
}

impl Default for ClothSpec {
    fn default() -> Self {
        Self {
            subdivisions: 1,
            thickness: 0.01,
            looseness: 0.12,
        }
    }
}

/// A clothed identity with the skinning it moves by: each garment vertex
/// carries the blended body weights of the surface point under it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothedIdentity {
    pub mesh: Mesh,
    pub skeleton: Skeleton,
    /// `N x k` row-major.
    pub weights: Vec<f64>,
}

pub fn clothed_identity(model: &BodyModel, shape: &ShapeParams, spec: &ClothSpec) -> Result<ClothedIdentity> {
    if !(spec.thickness >= 0.0 && spec.looseness >= 0.0) {
        return Err(Error::invalid("cloth offsets must be nonnegative"));
    }
    let body = model.shape_mesh(shape)?;
    let k = model.num_joints();
    let mut mesh = body;
    let mut weights = model.skinning_weights().to_vec();
    for _ in 0..spec.subdivisions {
        let (finer, parents) = mesh.subdivide();
        weights = parents
            .iter()
            .flat_map(|&(a, b)| {
                let (a, b) = (a as usize, b as usize);
                (0..k).map(|j| 0.5 * (weights[a * k + j] + weights[b * k + j])).collect::<Vec<_>>()
            })
            .collect();
        mesh = finer;
    }
    let skeleton = model.skeleton_of(&model.shape_mesh(shape)?.vertices)?;
    let joints = skeleton.joints();
    let bones: Vec<(usize, usize)> = skeleton
        .parents()
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (p, c)))
        .collect();
    let distances = |v: &Vec3| -> Vec<(f64, Vec3)> {
        bones
            .iter()
            .map(|&(p, c)| {
                let (d, u) = point_segment_distance(v, &joints[p], &joints[c]);
                (d, joints[p] + (joints[c] - joints[p]) * u)
            })
            .collect()
    };
    let own = |d: &[(f64, Vec3)]| (0..d.len()).fold(0, |b, i| if d[i].0 < d[b].0 { i } else { b });
    // Worst ratio of distance to the own bone over distance to a bone it
    // shares no joint with. Cloth must not push this past CLOTH_CLEARANCE.
    let crowding = |v: &Vec3, bone: usize| {
        let d = distances(v);
        let (p, c) = bones[bone];
        bones
            .iter()
            .zip(&d)
            .filter(|(&(q, r), _)| q != p && q != c && r != p && r != c)
            .map(|(_, other)| d[bone].0 / other.0)
            .fold(0.0, f64::max)
    };
    for v in mesh.vertices.iter_mut() {
        let d = distances(v);
        let bone = own(&d);
        let out = *v - d[bone].1;
        if out.norm() <= 1e-9 {
            continue;
        }
        let dir = out.normalize();
        let wave = 0.5 + 0.5 * (7.0 * v.x + 3.0 * v.y + 5.0 * v.z).sin();
        let mut offset = spec.thickness + spec.looseness * wave;
        while offset > 1e-4 && crowding(&(*v + dir * offset), bone) > CLOTH_CLEARANCE {
            offset *= 0.5;
        }
        *v += dir * offset;
    }
    Ok(ClothedIdentity {
        mesh,
        skeleton,
        weights,
    })
}

impl ClothedIdentity {
    /// Ground-truth garment under `pose`, skinned with the body's own
    /// kinematics.
    pub fn pose(&self, model: &BodyModel, pose: &PoseParams) -> Result<Vec<Vec3>> {
        let k = model.num_joints();
        let transforms = model.forward_kinematics(self.skeleton.joints(), pose, None)?;
        Ok(self
            .mesh
            .vertices
            .iter()
            .zip(self.weights.chunks(k))
            .map(|(v, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .fold(Vec3::zeros(), |acc, (j, w)| acc + transforms[j].apply(v) * *w)
                    + pose.translation
            })
            .collect())
    }
}

/// Sizes and seeds of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub actions: usize,
    /// Length of each source sequence at `frame_rate`.
    pub source_frames: usize,
    pub frame_rate: f64,
    pub stride: usize,
    pub clip_len: usize,
    /// Standard deviation of subject shape coefficients.
    pub shape_std: f64,
    pub noise: NoiseSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_clips: 64,
            test_clips: 16,
            train_subjects: 4,
            test_subjects: 2,
            actions: 8,
            source_frames: 1000,
            frame_rate: 50.0,
            stride: 25,
            clip_len: 16,
            shape_std: 0.7,
            noise: NoiseSpec::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_subjects == 0 || self.test_subjects == 0 || self.actions == 0 {
            return Err(Error::invalid("benchmark needs at least one subject per split and one action"));
        }
        if !(self.shape_std.is_finite() && self.shape_std >= 0.0) {
            return Err(Error::invalid("shape standard deviation must be nonnegative"));
        }
        self.noise.validate()?;
        sample_clip(self.source_frames, self.stride, self.clip_len, SampleMode::Test, 0)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Mixes `parts` into `base` (SplitMix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Manifest entry for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchClipEntry {
    pub split: Split,
    pub subject: usize,
    pub action: usize,
    /// Ground-truth shape coefficients of the subject.
    pub shape: Vec<f64>,
    pub motion_seed: u64,
    pub window_seed: u64,
    pub noise_seed: u64,
    /// Noisy input cuboid and ground-truth joints.
    pub clip: ClipManifest,
    pub gt_cuboid_path: PathBuf,
    pub input_mpjpe_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub config: BenchmarkConfig,
    pub model_path: PathBuf,
    pub num_vertices: usize,
    pub num_joints: usize,
    /// Action motion banks per split and subject, keyed as listed in the
    /// clip entries by `motion_seed`.
    pub motions: Vec<MotionSpec>,
    /// Mean root-aligned MPJPE of the noisy inputs, frozen at creation.
    pub reference_input_mpjpe_mm: SplitMean,
    pub train: Vec<BenchClipEntry>,
    pub test: Vec<BenchClipEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMean {
    pub train: f64,
    pub test: f64,
}

/// One generated clip with its noisy input.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchClip {
    pub entry: BenchClipEntry,
    pub gt: Clip,
    pub noisy: MeshCuboid,
}

impl BenchClip {
    pub fn sample(&self) -> Result<crate::smoother::SmootherSample> {
        Ok(crate::smoother::SmootherSample {
            noisy: self.noisy.clone(),
            gt: self.gt.joint_seq()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub model: BodyModel,
    pub manifest: BenchmarkManifest,
    pub train: Vec<BenchClip>,
    pub test: Vec<BenchClip>,
}

/// Subject/action/repeat indices of clip `i` of a split: clips cycle over
/// actions, then subjects, then repeats.
fn clip_slot(i: usize, subjects: usize, actions: usize) -> (usize, usize, usize) {
    (i / actions % subjects, i % actions, i / (actions * subjects))
}

/// Generates the benchmark in memory.
pub fn generate_benchmark(model: &BodyModel, config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    let mut motions = Vec::new();
    let mut splits: [Vec<BenchClip>; 2] = [Vec::new(), Vec::new()];
    for (slot, split) in [Split::Train, Split::Test].into_iter().enumerate() {
        let (count, subjects, mode) = match split {
            Split::Train => (config.train_clips, config.train_subjects, SampleMode::Train),
            Split::Test => (config.test_clips, config.test_subjects, SampleMode::Test),
        };
        let shapes: Vec<ShapeParams> = (0..subjects)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split.tag(), 10, s as u64]));
                ShapeParams::new((0..model.num_shapes()).map(|_| config.shape_std * gauss(&mut rng)).collect())
            })
            .collect();
        for i in 0..count {
            let (subject, action, repeat) = clip_slot(i, subjects, config.actions);
            let motion_seed = derive_seed(config.seed, &[split.tag(), 20, subject as u64, action as u64]);
            let window_seed = derive_seed(config.seed, &[split.tag(), 30, i as u64]);
            let noise_seed = derive_seed(config.seed, &[split.tag(), 40, i as u64]);
            let motion = match motions.iter().find(|m: &&MotionSpec| m.seed == motion_seed) {
                Some(m) => m.clone(),
                None => {
                    let m = MotionSpec::random(model.num_joints(), config.frame_rate, config.source_frames, motion_seed)?;
                    motions.push(m.clone());
                    m
                }
            };
            let frames = sample_clip(config.source_frames, config.stride, config.clip_len, mode, window_seed)?;
            let gt = gen_clip_frames(model, &motion, &shapes[subject], &frames)?;
            let noise = NoiseSpec {
                seed: noise_seed,
                ..config.noise
            };
            let noisy = corrupt(&gt, model, &noise)?.cuboid;
            let gt_joints = gt.joint_seq()?;
            let noisy_joints: Vec<Vec3> = (0..noisy.frames())
                .map(|t| model.regress_joints(&noisy.frame(t)))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let input_mpjpe_mm = mpjpe_frames(&noisy_joints, &gt_joints.to_frames().concat(), model.num_joints(), true)?;
            let dir = PathBuf::from(split.name()).join(format!("clip_{i:03}"));
            let entry = BenchClipEntry {
                split,
                subject,
                action,
                shape: shapes[subject].coefficients.clone(),
                motion_seed,
                window_seed,
                noise_seed,
                clip: ClipManifest {
                    source_id: format!("{}/s{subject}/a{action}/r{repeat}", split.name()),
                    frame_rate: config.frame_rate,
                    stride: config.stride,
                    start: frames[0],
                    length: frames.len(),
                    cuboid_path: dir.join("noisy.mcub"),
                    joints_path: dir.join("gt.mjnt"),
                },
                gt_cuboid_path: dir.join("gt.mcub"),
                input_mpjpe_mm,
            };
            splits[slot].push(BenchClip { entry, gt, noisy });
        }
    }
    let [train, test] = splits;
    let mean = |clips: &[BenchClip]| {
        if clips.is_empty() {
            0.0
        } else {
            clips.iter().map(|c| c.entry.input_mpjpe_mm).sum::<f64>() / clips.len() as f64
        }
    };
    let manifest = BenchmarkManifest {
        config: config.clone(),
        model_path: PathBuf::from("model.mbdy"),
        num_vertices: model.num_vertices(),
        num_joints: model.num_joints(),
        motions,
        reference_input_mpjpe_mm: SplitMean {
            train: mean(&train),
            test: mean(&test),
        },
        train: train.iter().map(|c| c.entry.clone()).collect(),
        test: test.iter().map(|c| c.entry.clone()).collect(),
    };
    Ok(Benchmark {
        model: model.clone(),
        manifest,
        train,
        test,
    })
}

impl Benchmark {
    /// Writes `manifest.json`, `model.mbdy` and per-clip files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(&self.manifest.model_path))?;
        for c in self.train.iter().chain(&self.test) {
            let clip_dir = dir.join(c.entry.clip.cuboid_path.parent().unwrap_or(Path::new("")));
            std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
            c.noisy.write(&dir.join(&c.entry.clip.cuboid_path))?;
            c.gt.joint_seq()?.write(&dir.join(&c.entry.clip.joints_path))?;
            c.gt.cuboid()?.write(&dir.join(&c.entry.gt_cuboid_path))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Generates and writes a benchmark.
pub fn make_benchmark(model: &BodyModel, config: &BenchmarkConfig, dir: &Path) -> Result<Benchmark> {
    let b = generate_benchmark(model, config)?;
    b.write(dir)?;
    Ok(b)
}

/// A benchmark clip read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedClip {
    pub entry: BenchClipEntry,
    pub noisy: MeshCuboid,
    pub gt_joints: JointSeq,
    pub gt_cuboid: MeshCuboid,
}

impl LoadedClip {
    pub fn sample(&self) -> crate::smoother::SmootherSample {
        crate::smoother::SmootherSample {
            noisy: self.noisy.clone(),
            gt: self.gt_joints.clone(),
        }
    }
}

/// A benchmark directory read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedBenchmark {
    pub manifest: BenchmarkManifest,
    pub model: BodyModel,
    pub train: Vec<LoadedClip>,
    pub test: Vec<LoadedClip>,
}

impl LoadedBenchmark {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BenchmarkManifest = serde_json::from_str(&text)?;
        let model = BodyModel::load(&dir.join(&manifest.model_path))?;
        let load = |entries: &[BenchClipEntry]| -> Result<Vec<LoadedClip>> {
            entries
                .iter()
                .map(|e| {
                    let (noisy, gt_joints) = e.clip.load(dir)?;
                    let gt_cuboid = MeshCuboid::read(&dir.join(&e.gt_cuboid_path))?;
                    if noisy.vertices() != model.num_vertices() || gt_joints.joints() != model.num_joints() {
                        return Err(Error::dim(format!("clip {} does not match the model", e.clip.source_id)));
                    }
                    Ok(LoadedClip {
                        entry: e.clone(),
                        noisy,
                        gt_joints,
                        gt_cuboid,
                    })
                })
                .collect()
        };
        let train = load(&manifest.train)?;
        let test = load(&manifest.test)?;
        Ok(Self {
            manifest,
            model,
            train,
            test,
        })
    }

    pub fn samples(&self, split: Split) -> Vec<crate::smoother::SmootherSample> {
        let clips = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        clips.iter().map(LoadedClip::sample).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            train_clips: 4,
            test_clips: 2,
            train_subjects: 2,
            test_subjects: 1,
            actions: 2,
            source_frames: 500,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn still_motion_copies_rest_mesh() {
        let model = BodyModel::humanoid();
        let shape = ShapeParams::new(vec![0.5, -0.3, 0.2, 0.1]);
        let clip = gen_clip(&model, &MotionSpec::still(24, 50.0, 100), &shape, 5).unwrap();
        let rest = model.shape_mesh(&shape).unwrap().vertices;
        for frame in &clip.vertices {
            for (a, b) in frame.iter().zip(&rest) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let model = BodyModel::humanoid();
        let shape = ShapeParams::zeros(4);
        let a = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 3).unwrap(), &shape, 4).unwrap();
        let b = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 3).unwrap(), &shape, 4).unwrap();
        assert_eq!(a, b);
        let c = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 4).unwrap(), &shape, 4).unwrap();
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn amplitude_past_pi_is_rejected() {
        let mut m = MotionSpec::still(2, 50.0, 10);
        m.waves[1][0].push(Wave {
            amplitude: 2.0,
            frequency: 0.1,
            phase: 0.0,
        });
        m.offsets[1] = [1.2, 0.0, 0.0];
        assert!(m.validate().is_err());
        m.offsets[1] = [0.0; 3];
        assert!(m.validate().is_ok());
        m.waves[1][0][0].frequency = 0.0;
        assert!(m.validate().is_err());
    }

    /// Speed bound from the wave bank: rotation rates accumulate down the
    /// chain, skinned vertices move no faster than their fastest bone and the
    /// regressor averages vertices.
    fn joint_speed_bounds(model: &BodyModel, motion: &MotionSpec, rest: &[Vec3]) -> Vec<f64> {
        let k = model.num_joints();
        let rest_joints = model.regress_joints(rest).unwrap();
        let mut omega = vec![0.0; k];
        let mut speed = vec![0.0; k];
        let order = crate::skeleton::tree_order(model.parents()).unwrap();
        for &j in &order {
            let rate = motion.rotation_rate_bound(j);
            match model.parents()[j] {
                None => omega[j] = rate,
                Some(p) => {
                    omega[j] = omega[p] + rate;
                    speed[j] = speed[p] + omega[p] * (rest_joints[j] - rest_joints[p]).norm();
                }
            }
        }
        let w = model.skinning_weights();
        let vertex: Vec<f64> = rest
            .iter()
            .enumerate()
            .map(|(v, x)| {
                let fastest = (0..k)
                    .filter(|&b| w[v * k + b] > 0.0)
                    .map(|b| omega[b] * (x - rest_joints[b]).norm() + speed[b])
                    .fold(0.0, f64::max);
                fastest + motion.translation_rate_bound()
            })
            .collect();
        model
            .regressor_rows()
            .iter()
            .map(|row| row.iter().map(|&(v, _)| vertex[v]).fold(0.0, f64::max))
            .collect()
    }

    #[test]
    fn joint_displacement_within_wave_envelope() {
        let model = BodyModel::humanoid();
        for seed in 0..3 {
            let motion = MotionSpec::random(24, 50.0, 400, seed).unwrap();
            let shape = ShapeParams::new(vec![0.3 * seed as f64, 0.0, -0.2, 0.1]);
            let clip = gen_clip(&model, &motion, &shape, 400).unwrap();
            let rest = model.shape_mesh(&shape).unwrap().vertices;
            let bound = joint_speed_bounds(&model, &motion, &rest);
            let dt = 1.0 / motion.frame_rate;
            for w in clip.joints.windows(2) {
                for j in 0..24 {
                    assert!((w[1][j] - w[0][j]).norm() <= bound[j] * dt * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let model = BodyModel::humanoid();
        let clip = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 1).unwrap(), &ShapeParams::zeros(4), 6).unwrap();
        let noisy = corrupt(&clip, &model, &NoiseSpec::zero()).unwrap();
        for t in 0..6 {
            for (a, b) in noisy.cuboid.frame(t).iter().zip(&clip.vertices[t]) {
                // the cuboid stores f32
                assert!((a - b).norm() < 1e-6);
            }
        }
        assert!(noisy.outliers.iter().all(|&o| !o));
        let exact = model.pose_vertices(&model.shape_mesh(&clip.shape).unwrap().vertices, &clip.poses[2], Some(&noisy.bone_scales)).unwrap();
        for (a, b) in exact.iter().zip(&clip.vertices[2]) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn certain_outliers_hit_every_frame() {
        let model = BodyModel::humanoid();
        let clip = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 1).unwrap(), &ShapeParams::zeros(4), 8).unwrap();
        let noise = NoiseSpec {
            outlier_prob: 1.0,
            outlier_std: 0.3,
            ..NoiseSpec::zero()
        };
        let out = corrupt(&clip, &model, &noise).unwrap();
        assert!(out.outliers.iter().all(|&o| o));
        for t in 0..8 {
            let moved = out.cuboid.frame(t).iter().zip(&clip.vertices[t]).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(moved > 0.01, "frame {t} moved only {moved}");
        }
    }

    #[test]
    fn corrupt_is_deterministic_and_scales_limbs_only() {
        let model = BodyModel::humanoid();
        let clip = gen_clip(&model, &MotionSpec::random(24, 50.0, 100, 2).unwrap(), &ShapeParams::zeros(4), 4).unwrap();
        let noise = NoiseSpec { seed: 9, ..NoiseSpec::default() };
        let a = corrupt(&clip, &model, &noise).unwrap();
        assert_eq!(a, corrupt(&clip, &model, &noise).unwrap());
        for j in 0..24 {
            if !HUMANOID_LIMBS.contains(&j) {
                assert_eq!(a.bone_scales[j], 1.0);
            }
        }
        assert!(NoiseSpec { drift: 1.0, ..noise }.validate().is_err());
        assert!(NoiseSpec { outlier_prob: 1.5, ..noise }.validate().is_err());
        assert!(NoiseSpec { jitter_std: -0.1, ..noise }.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_between_splits() {
        let c = BenchmarkConfig::default();
        let b = generate_benchmark(&BodyModel::humanoid(), &small_config()).unwrap();
        let seeds = |clips: &[BenchClip]| -> std::collections::BTreeSet<u64> {
            clips.iter().flat_map(|c| [c.entry.motion_seed, c.entry.window_seed, c.entry.noise_seed]).collect()
        };
        assert!(seeds(&b.train).is_disjoint(&seeds(&b.test)));
        assert_ne!(derive_seed(c.seed, &[1, 2]), derive_seed(c.seed, &[2, 1]));
    }

    #[test]
    fn benchmark_ground_truth_is_consistent() {
        let model = BodyModel::humanoid();
        let b = generate_benchmark(&model, &small_config()).unwrap();
        assert_eq!(b.train.len(), 4);
        assert_eq!(b.test.len(), 2);
        for c in b.train.iter().chain(&b.test) {
            assert_eq!(c.noisy.frames(), 16);
            for (v, j) in c.gt.vertices.iter().zip(&c.gt.joints) {
                let r = model.regress_joints(v).unwrap();
                for (a, b) in r.iter().zip(j) {
                    assert!((a - b).norm() <= 1e-9);
                }
            }
            assert!(c.entry.input_mpjpe_mm > 0.0);
        }
        let subjects: Vec<usize> = b.train.iter().map(|c| c.entry.subject).collect();
        assert_eq!(subjects, vec![0, 0, 1, 1]);
    }

    #[test]
    fn benchmark_directory_is_reproducible_and_loads() {
        let model = BodyModel::humanoid();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let bench = make_benchmark(&model, &small_config(), a.path()).unwrap();
        make_benchmark(&model, &small_config(), b.path()).unwrap();
        for e in bench.manifest.train.iter().chain(&bench.manifest.test) {
            for p in [&e.clip.cuboid_path, &e.clip.joints_path, &e.gt_cuboid_path] {
                assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
            }
        }
        for f in ["manifest.json", "model.mbdy"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let loaded = LoadedBenchmark::load(a.path()).unwrap();
        assert_eq!(loaded.manifest, bench.manifest);
        assert_eq!(loaded.train.len(), 4);
        assert_eq!(loaded.test[1].noisy, bench.test[1].noisy);
        assert_eq!(loaded.samples(Split::Train).len(), 4);
    }

    #[test]
    fn clothed_identity_follows_body_and_keeps_clear_of_other_limbs() {
        let model = BodyModel::humanoid();
        let shape = ShapeParams::new(vec![0.3, 0.5, -0.2, 0.1]);
        let spec = ClothSpec::default();
        let clothed = clothed_identity(&model, &shape, &spec).unwrap();
        let body = model.shape_mesh(&shape).unwrap();
        assert!(clothed.mesh.len() > body.len());
        assert_eq!(clothed.weights.len(), clothed.mesh.len() * model.num_joints());

        let bare = clothed_identity(
            &model,
            &shape,
            &ClothSpec {
                thickness: 0.0,
                looseness: 0.0,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(bare.mesh.vertices[..body.len()], body.vertices[..]);
        let lifted: Vec<f64> = clothed
            .mesh
            .vertices
            .iter()
            .zip(&bare.mesh.vertices)
            .map(|(a, b)| (a - b).norm())
            .collect();
        assert!(lifted.iter().all(|&d| d <= spec.thickness + spec.looseness + 1e-12));
        let mut sorted = lifted.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[sorted.len() / 2] > spec.thickness);
        assert!(sorted[sorted.len() * 9 / 10] > 0.05);

        // rest pose reproduces the garment; a posed bare garment is the posed body
        let rest = clothed.pose(&model, &PoseParams::zeros(model.num_joints())).unwrap();
        for (a, b) in rest.iter().zip(&clothed.mesh.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
        let pose = MotionSpec::random(model.num_joints(), 50.0, 100, 3).unwrap().pose_at(40);
        let posed = bare.pose(&model, &pose).unwrap();
        let want = model.pose_mesh(&shape, &pose).unwrap();
        for (a, b) in posed.iter().zip(&want.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn negative_cloth_offsets_are_rejected() {
        let model = BodyModel::humanoid();
        let spec = ClothSpec {
            thickness: -0.01,
            ..ClothSpec::default()
        };
        assert!(clothed_identity(&model, &ShapeParams::zeros(4), &spec).is_err());
    }
}
