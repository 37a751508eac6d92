//! The mesh-to-mesh smoother: a stack of 3D convolutions over a mesh cuboid
//! viewed as a one-channel `(T, N, 3)` volume, trained on joint positions
//! with a keypoint loss and a motion loss.
//!
//! Per frame the input is shifted so the regressed root joint sits at the
//! origin, the network predicts a residual, and the shift is undone.

pub mod conv;

use std::hash::{DefaultHasher, Hasher};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::cuboid::{JointSeq, MeshCuboid};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::metrics::mpjpe_frames;
use crate::optim::{adam_step, grad_check_piecewise, AdamConfig, EpochLog, GradCheckReport, ParamStore, TrainStatus};

use conv::{conv3d, conv3d_backward, Kernel, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Euclidean distance per keypoint.
    Norm,
    /// Squared Euclidean distance per keypoint.
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub motion_loss: bool,
    pub norm: LossNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            motion_loss: true,
            norm: LossNorm::Norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Identity,
}

impl Activation {
    /// Slope on the negative half-line.
    fn negative_slope(self) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => slope,
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    /// Kernel extent over (time, vertex, coordinate).
    pub kernel: [usize; 3],
    pub layers: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Hidden channel width.
    pub channels: usize,
    pub residual: bool,
    pub activation: Activation,
    pub root_center: bool,
    /// The last layer's output is multiplied by this before use, so early
    /// Adam steps move vertices by millimetres rather than decimetres.
    pub output_scale: f64,
    pub loss: LossConfig,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            kernel: [5, 1, 3],
            layers: 8,
            stride: [1, 1, 1],
            padding: [2, 0, 1],
            channels: 8,
            residual: true,
            activation: Activation::LeakyRelu { slope: 0.1 },
            root_center: true,
            output_scale: 0.05,
            loss: LossConfig::default(),
        }
    }
}

impl SmootherConfig {
    /// Default configuration with another kernel and its volume-preserving
    /// padding. Kernel extents must be odd.
    pub fn with_kernel(kernel: [usize; 3]) -> Result<Self> {
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!("kernel {kernel:?} has an even extent")));
        }
        let cfg = Self {
            kernel,
            padding: kernel.map(|k| (k - 1) / 2),
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 {
            return Err(Error::invalid("smoother needs at least one layer and one channel"));
        }
        if self.kernel.contains(&0) {
            return Err(Error::invalid(format!("kernel {:?} has a zero extent", self.kernel)));
        }
        for axis in 0..3 {
            if self.stride[axis] != 1 || 2 * self.padding[axis] + 1 != self.kernel[axis] {
                return Err(Error::invalid(format!(
                    "kernel {:?} with stride {:?} and padding {:?} does not preserve volume on axis {axis}",
                    self.kernel, self.stride, self.padding
                )));
            }
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::invalid(format!("output scale {} must be positive", self.output_scale)));
        }
        let slope = self.activation.negative_slope();
        if !(slope.is_finite() && slope >= 0.0) {
            return Err(Error::invalid(format!("activation slope {slope} must be nonnegative")));
        }
        Ok(())
    }

    fn layer_channels(&self, l: usize) -> (usize, usize) {
        let c_in = if l == 0 { 1 } else { self.channels };
        let c_out = if l + 1 == self.layers { 1 } else { self.channels };
        (c_in, c_out)
    }

    /// True when no layer mixes vertices, so each vertex is processed
    /// independently.
    pub fn vertex_local(&self) -> bool {
        self.kernel[1] == 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmootherParams {
    config: SmootherConfig,
    store: ParamStore,
}

fn weight_name(l: usize) -> String {
    format!("conv{}.weight", l + 1)
}

fn bias_name(l: usize) -> String {
    format!("conv{}.bias", l + 1)
}

impl SmootherParams {
    /// He-style normal initialization; with the residual flag on, the final
    /// layer starts at zero so the network is the identity map.
    pub fn init(config: SmootherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.activation.negative_slope();
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut store = ParamStore::new();
        let [kt, kn, kk] = config.kernel;
        for l in 0..config.layers {
            let (c_in, c_out) = config.layer_channels(l);
            let fan_in = (c_in * kt * kn * kk) as f64;
            let count = c_out * c_in * kt * kn * kk;
            let weights = if l + 1 == config.layers && config.residual {
                vec![0.0; count]
            } else {
                let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
                (0..count).map(|_| normal.sample(&mut rng)).collect()
            };
            store.add(&weight_name(l), &[c_out, c_in, kt, kn, kk], weights)?;
            store.add(&bias_name(l), &[c_out], vec![0.0; c_out])?;
        }
        Ok(Self { config, store })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_store(config: SmootherConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        for t in reference.store.tensors() {
            let got = store.tensor(&t.name)?;
            if got.shape != t.shape {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, configuration needs {:?}",
                    t.name, got.shape, t.shape
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, configuration needs {}",
                store.len(),
                reference.store.len()
            )));
        }
        let mut params = reference;
        params.store.load_values(&store)?;
        Ok(params)
    }

    pub fn config(&self) -> &SmootherConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn kernels(&self) -> Vec<Kernel> {
        (0..self.config.layers)
            .map(|l| {
                let (c_in, c_out) = self.config.layer_channels(l);
                let mut k = Kernel::zeros(c_in, c_out, self.config.kernel);
                k.weights.copy_from_slice(self.store.value(2 * l));
                k.bias.copy_from_slice(self.store.value(2 * l + 1));
                k
            })
            .collect()
    }

    /// Replaces the final layer's weights with small random values. Used
    /// before gradient checks, since a zero final layer blocks every
    /// upstream gradient.
    pub fn perturb_final_layer(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive std");
        let slot = 2 * (self.config.layers - 1);
        for w in self.store.value_mut(slot) {
            *w = normal.sample(&mut rng);
        }
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.store.save(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(meta)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let store = ParamStore::load(path)?;
        Ok((Self::from_store(meta.config, store)?, meta))
    }
}

/// JSON sidecar describing a smoother checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: SmootherConfig,
    pub seed: u64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub num_joints: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Runs the convolution stack. Returns the final layer output and, when
/// `keep` is set, the input of every layer for the backward pass.
fn run(kernels: &[Kernel], cfg: &SmootherConfig, x: &Volume, keep: bool) -> Result<(Volume, Vec<Volume>)> {
    let slope = cfg.activation.negative_slope();
    let mut trace = Vec::new();
    let mut a = x.clone();
    for (l, k) in kernels.iter().enumerate() {
        let mut z = conv3d(&a, k, cfg.stride, cfg.padding)?;
        if l + 1 < kernels.len() && slope != 1.0 {
            z.raw_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            });
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("activation of layer {}", l + 1)));
        }
        if keep {
            trace.push(std::mem::replace(&mut a, z));
        } else {
            a = z;
        }
    }
    Ok((a, trace))
}

type LayerGrads = Vec<(Vec<f64>, Vec<f64>)>;

fn backward(kernels: &[Kernel], cfg: &SmootherConfig, trace: &[Volume], d_out: Volume) -> LayerGrads {
    let slope = cfg.activation.negative_slope();
    let mut grads = vec![(Vec::new(), Vec::new()); kernels.len()];
    let mut g = d_out;
    for l in (0..kernels.len()).rev() {
        let cg = conv3d_backward(&trace[l], &kernels[l], cfg.padding, &g, l > 0);
        grads[l] = (cg.weights, cg.bias);
        if l > 0 {
            g = cg.input;
            for (gi, ai) in g.raw_mut().iter_mut().zip(trace[l].raw()) {
                if *ai <= 0.0 {
                    *gi *= slope;
                }
            }
        }
    }
    grads
}

fn check_pair(pred: &JointSeq, gt: &JointSeq) -> Result<()> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(Error::dim(format!(
            "prediction is {} x {}, ground truth is {} x {}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    Ok(())
}

fn flat(seq: &JointSeq) -> Vec<Vec3> {
    seq.to_frames().concat()
}

#[inline]
fn penalty(d: &Vec3, norm: LossNorm) -> (f64, Vec3) {
    match norm {
        LossNorm::Squared => (d.norm_squared(), d * 2.0),
        LossNorm::Norm => {
            let n = d.norm();
            if n > 0.0 {
                (n, d / n)
            } else {
                (0.0, Vec3::zeros())
            }
        }
    }
}

/// Keypoint term over `frames x k` flattened joints; accumulates its
/// gradient into `grad` when given.
fn j3d_term(pred: &[Vec3], gt: &[Vec3], frames: usize, norm: LossNorm, grad: Option<&mut [Vec3]>) -> f64 {
    let inv_t = 1.0 / frames as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let (v, d) = penalty(&(p - g), norm);
        total += v;
        if let Some(gr) = grad.as_deref_mut() {
            gr[i] += d * inv_t;
        }
    }
    total * inv_t
}

/// Motion term: frame-to-frame displacement mismatch, divided by `frames`.
fn motion_term(pred: &[Vec3], gt: &[Vec3], frames: usize, k: usize, norm: LossNorm, grad: Option<&mut [Vec3]>) -> f64 {
    let inv_t = 1.0 / frames as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for t in 1..frames {
        for j in 0..k {
            let (c, p) = (t * k + j, (t - 1) * k + j);
            let e = (pred[c] - pred[p]) - (gt[c] - gt[p]);
            let (v, d) = penalty(&e, norm);
            total += v;
            if let Some(gr) = grad.as_deref_mut() {
                gr[c] += d * inv_t;
                gr[p] -= d * inv_t;
            }
        }
    }
    total * inv_t
}

fn combined(pred: &[Vec3], gt: &[Vec3], frames: usize, k: usize, cfg: &LossConfig, mut grad: Option<&mut [Vec3]>) -> Result<f64> {
    let mut loss = j3d_term(pred, gt, frames, cfg.norm, grad.as_deref_mut());
    if cfg.motion_loss {
        if frames < 2 {
            return Err(Error::invalid("motion loss needs at least two frames"));
        }
        loss += motion_term(pred, gt, frames, k, cfg.norm, grad);
    }
    Ok(loss)
}

/// Mean over frames of the summed per-keypoint distance.
pub fn j3d_loss(pred: &JointSeq, gt: &JointSeq, norm: LossNorm) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(j3d_term(&flat(pred), &flat(gt), pred.frames(), norm, None))
}

/// Summed per-keypoint displacement mismatch between adjacent frames,
/// divided by the frame count `T`.
pub fn motion_loss(pred: &JointSeq, gt: &JointSeq, norm: LossNorm) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.frames() < 2 {
        return Err(Error::invalid("motion loss needs at least two frames"));
    }
    Ok(motion_term(&flat(pred), &flat(gt), pred.frames(), pred.joints(), norm, None))
}

/// Keypoint loss plus (unless disabled) motion loss on joints regressed
/// from `pred`.
pub fn total_loss(pred: &MeshCuboid, gt: &JointSeq, model: &BodyModel, cfg: &LossConfig) -> Result<f64> {
    let joints: Vec<Vec3> = (0..pred.frames())
        .map(|t| model.regress_joints(&pred.frame(t)))
        .collect::<Result<Vec<_>>>()?
        .concat();
    if pred.frames() != gt.frames() || model.num_joints() != gt.joints() {
        return Err(Error::dim(format!(
            "prediction has {} frames of {} joints, ground truth {} x {}",
            pred.frames(),
            model.num_joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    combined(&joints, &flat(gt), pred.frames(), gt.joints(), cfg, None)
}

/// Which vertices the network runs on during training and how joints are
/// regressed from them.
struct Layout {
    columns: Vec<usize>,
    /// Per joint: `(column, weight)`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Layout {
    fn new(model: &BodyModel, cfg: &SmootherConfig) -> Self {
        let columns: Vec<usize> = if cfg.vertex_local() {
            model.regressor_support()
        } else {
            (0..model.num_vertices()).collect()
        };
        let mut position = vec![usize::MAX; model.num_vertices()];
        for (c, &v) in columns.iter().enumerate() {
            position[v] = c;
        }
        let rows = model
            .regressor_rows()
            .iter()
            .map(|row| row.iter().map(|&(v, w)| (position[v], w)).collect())
            .collect();
        Self { columns, rows }
    }
}

/// A root-centered clip restricted to the layout's vertices.
struct Prepared {
    x: Volume,
    roots: Vec<Vec3>,
    gt: Vec<Vec3>,
    frames: usize,
}

fn roots_of(cuboid: &MeshCuboid, model: &BodyModel, center: bool) -> Vec<Vec3> {
    let root_row = &model.regressor_rows()[0];
    (0..cuboid.frames())
        .map(|t| {
            if center {
                root_row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + cuboid.get(t, v) * w)
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

fn centered_volume(cuboid: &MeshCuboid, columns: &[usize], roots: &[Vec3]) -> Volume {
    let mut x = Volume::zeros(1, [cuboid.frames(), columns.len(), 3]);
    for (t, root) in roots.iter().enumerate() {
        for k in 0..3 {
            let row = x.row_mut(0, t, k);
            for (dst, &v) in row.iter_mut().zip(columns) {
                *dst = cuboid.data()[(t * cuboid.vertices() + v) * 3 + k] as f64 - root[k];
            }
        }
    }
    x
}

fn prepare(sample: &SmootherSample, model: &BodyModel, layout: &Layout, cfg: &SmootherConfig) -> Result<Prepared> {
    let (noisy, gt) = (&sample.noisy, &sample.gt);
    if noisy.vertices() != model.num_vertices() {
        return Err(Error::dim(format!(
            "clip has {} vertices, model has {}",
            noisy.vertices(),
            model.num_vertices()
        )));
    }
    if gt.frames() != noisy.frames() || gt.joints() != model.num_joints() {
        return Err(Error::dim(format!(
            "joints are {} x {}, clip has {} frames and the model {} joints",
            gt.frames(),
            gt.joints(),
            noisy.frames(),
            model.num_joints()
        )));
    }
    let roots = roots_of(noisy, model, cfg.root_center);
    Ok(Prepared {
        x: centered_volume(noisy, &layout.columns, &roots),
        roots,
        gt: flat(gt),
        frames: noisy.frames(),
    })
}

fn output_volume(cfg: &SmootherConfig, x: &Volume, delta: Volume) -> Volume {
    let mut out = delta;
    let s = cfg.output_scale;
    if cfg.residual {
        out.raw_mut().iter_mut().zip(x.raw()).for_each(|(o, i)| *o = i + s * *o);
    } else {
        out.raw_mut().iter_mut().for_each(|o| *o *= s);
    }
    out
}

fn regress(out: &Volume, layout: &Layout, roots: &[Vec3]) -> Vec<Vec3> {
    let frames = out.dims()[0];
    let mut joints = Vec::with_capacity(frames * layout.rows.len());
    for (t, root) in roots.iter().enumerate().take(frames) {
        let rows = [out.row(0, t, 0), out.row(0, t, 1), out.row(0, t, 2)];
        for r in &layout.rows {
            let mut j = *root;
            for &(c, w) in r {
                j += Vec3::new(rows[0][c], rows[1][c], rows[2][c]) * w;
            }
            joints.push(j);
        }
    }
    joints
}

/// Loss of one prepared clip and, if requested, per-layer gradients.
fn clip_loss(
    kernels: &[Kernel],
    cfg: &SmootherConfig,
    layout: &Layout,
    clip: &Prepared,
    with_grad: bool,
) -> Result<(f64, Option<LayerGrads>)> {
    let (delta, trace) = run(kernels, cfg, &clip.x, with_grad)?;
    let out = output_volume(cfg, &clip.x, delta);
    let joints = regress(&out, layout, &clip.roots);
    let k = layout.rows.len();
    if !with_grad {
        return Ok((combined(&joints, &clip.gt, clip.frames, k, &cfg.loss, None)?, None));
    }
    let mut dj = vec![Vec3::zeros(); joints.len()];
    let loss = combined(&joints, &clip.gt, clip.frames, k, &cfg.loss, Some(&mut dj))?;
    let mut d_out = Volume::zeros(1, out.dims());
    for t in 0..clip.frames {
        for c in 0..3 {
            let row = d_out.row_mut(0, t, c);
            for (j, r) in layout.rows.iter().enumerate() {
                let g = dj[t * k + j][c] * cfg.output_scale;
                for &(col, w) in r {
                    row[col] += w * g;
                }
            }
        }
    }
    Ok((loss, Some(backward(kernels, cfg, &trace, d_out))))
}

fn predict_joints(kernels: &[Kernel], cfg: &SmootherConfig, layout: &Layout, clip: &Prepared) -> Result<Vec<Vec3>> {
    let (delta, _) = run(kernels, cfg, &clip.x, false)?;
    Ok(regress(&output_volume(cfg, &clip.x, delta), layout, &clip.roots))
}

/// Smooths a full cuboid. Root centering uses `model`'s root regressor.
pub fn smooth(params: &SmootherParams, input: &MeshCuboid, model: &BodyModel) -> Result<MeshCuboid> {
    if input.vertices() != model.num_vertices() {
        return Err(Error::dim(format!(
            "cuboid has {} vertices, model has {}",
            input.vertices(),
            model.num_vertices()
        )));
    }
    let roots = roots_of(input, model, params.config.root_center);
    run_shifted(params, input, &roots)
}

/// Runs the network on a cuboid of any vertex count, without root
/// centering. The output has the input's shape.
pub fn apply(params: &SmootherParams, input: &MeshCuboid) -> Result<MeshCuboid> {
    run_shifted(params, input, &vec![Vec3::zeros(); input.frames()])
}

fn run_shifted(params: &SmootherParams, input: &MeshCuboid, roots: &[Vec3]) -> Result<MeshCuboid> {
    let cfg = &params.config;
    let columns: Vec<usize> = (0..input.vertices()).collect();
    let x = centered_volume(input, &columns, roots);
    let (delta, _) = run(&params.kernels(), cfg, &x, false)?;
    let out = output_volume(cfg, &x, delta);
    let (frames, n) = (input.frames(), input.vertices());
    let mut data = vec![0f32; frames * n * 3];
    for (t, root) in roots.iter().enumerate() {
        for k in 0..3 {
            for (v, &val) in out.row(0, t, k).iter().enumerate() {
                data[(t * n + v) * 3 + k] = (val + root[k]) as f32;
            }
        }
    }
    MeshCuboid::new(frames, n, data)
}

/// One training example: a noisy cuboid and its ground-truth joints.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherSample {
    pub noisy: MeshCuboid,
    pub gt: JointSeq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held-out MPJPE is measured every this many epochs (and at the last).
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmootherTraining {
    pub params: SmootherParams,
    pub log: Vec<EpochLog>,
    pub status: TrainStatus,
}

fn mean_mpjpe(kernels: &[Kernel], cfg: &SmootherConfig, layout: &Layout, clips: &[Prepared]) -> Result<f64> {
    let k = layout.rows.len();
    let mut total = 0.0;
    for clip in clips {
        let pred = predict_joints(kernels, cfg, layout, clip)?;
        total += mpjpe_frames(&pred, &clip.gt, k, true)?;
    }
    Ok(total / clips.len() as f64)
}

/// Trains with Adam on mini-batches of clips, averaging clip losses within a
/// batch. Divergence stops training and returns the last parameters that
/// completed an epoch.
pub fn train_smoother(
    config: SmootherConfig,
    model: &BodyModel,
    train: &[SmootherSample],
    heldout: &[SmootherSample],
    opts: &TrainOptions,
) -> Result<SmootherTraining> {
    config.validate()?;
    opts.adam.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let layout = Layout::new(model, &config);
    let clips = train
        .iter()
        .map(|s| prepare(s, model, &layout, &config))
        .collect::<Result<Vec<_>>>()?;
    let held = heldout
        .iter()
        .map(|s| prepare(s, model, &layout, &config))
        .collect::<Result<Vec<_>>>()?;
    let mut params = SmootherParams::init(config, opts.seed)?;
    let mut last_good = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    info!(
        "training smoother on {} clips ({} vertices per clip in the network)",
        clips.len(),
        layout.columns.len()
    );
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut failure = None;
        'batches: for batch in order.chunks(opts.batch_size) {
            let kernels = params.kernels();
            let scale = 1.0 / batch.len() as f64;
            params.store.zero_grads();
            for &i in batch {
                let (loss, grads) = match clip_loss(&kernels, &config, &layout, &clips[i], true) {
                    Ok(r) => r,
                    Err(e) => {
                        failure = Some(e.to_string());
                        break 'batches;
                    }
                };
                if !loss.is_finite() {
                    failure = Some(format!("loss {loss} on clip {i}"));
                    break 'batches;
                }
                epoch_loss += loss;
                for (l, (gw, gb)) in grads.unwrap().into_iter().enumerate() {
                    axpy(params.store.grad_mut(2 * l), &gw, scale);
                    axpy(params.store.grad_mut(2 * l + 1), &gb, scale);
                }
            }
            adam_step(&mut params.store, &opts.adam)?;
            if !params.store.is_finite() {
                failure = Some("non-finite parameter after update".into());
                break;
            }
        }
        if let Some(reason) = failure {
            info!("smoother diverged at epoch {epoch}: {reason}");
            return Ok(SmootherTraining {
                params: last_good,
                log,
                status: TrainStatus::Diverged { epoch, reason },
            });
        }
        let train_loss = epoch_loss / clips.len() as f64;
        let eval_now = !held.is_empty() && opts.eval_every > 0 && (epoch % opts.eval_every == 0 || epoch == opts.epochs);
        let heldout_mpjpe_mm = if eval_now {
            Some(mean_mpjpe(&params.kernels(), &config, &layout, &held)?)
        } else {
            None
        };
        debug!("epoch {epoch}: loss {train_loss:.6} heldout {heldout_mpjpe_mm:?}");
        log.push(EpochLog {
            epoch,
            train_loss,
            heldout_mpjpe_mm,
        });
        last_good = params.clone();
    }
    Ok(SmootherTraining {
        params,
        log,
        status: TrainStatus::Completed,
    })
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

/// Mean loss and gradient over `samples` at the current parameters, as
/// used by one training batch.
pub fn batch_loss(params: &mut SmootherParams, model: &BodyModel, samples: &[SmootherSample], with_grad: bool) -> Result<f64> {
    let config = params.config;
    let layout = Layout::new(model, &config);
    let kernels = params.kernels();
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut total = 0.0;
    if with_grad {
        params.store.zero_grads();
    }
    for s in samples {
        let clip = prepare(s, model, &layout, &config)?;
        let (loss, grads) = clip_loss(&kernels, &config, &layout, &clip, with_grad)?;
        total += loss * scale;
        if let Some(grads) = grads {
            for (l, (gw, gb)) in grads.into_iter().enumerate() {
                axpy(params.store.grad_mut(2 * l), &gw, scale);
                axpy(params.store.grad_mut(2 * l + 1), &gb, scale);
            }
        }
    }
    Ok(total)
}

/// Fingerprint of which hidden activations are negative.
fn sign_pattern(kernels: &[Kernel], cfg: &SmootherConfig, clip: &Prepared, hasher: &mut DefaultHasher) -> Result<()> {
    let (_, trace) = run(kernels, cfg, &clip.x, true)?;
    for a in trace.iter().skip(1) {
        for chunk in a.raw().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |b, (i, &v)| b | (u64::from(v <= 0.0) << i));
            hasher.write_u64(bits);
        }
    }
    Ok(())
}

/// Finite-difference check of the training loss gradient. Probes whose
/// step flips an activation sign are redrawn.
pub fn grad_check_smoother(
    params: &mut SmootherParams,
    model: &BodyModel,
    samples: &[SmootherSample],
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let config = params.config;
    let layout = Layout::new(model, &config);
    let clips = samples
        .iter()
        .map(|s| prepare(s, model, &layout, &config))
        .collect::<Result<Vec<_>>>()?;
    let mut store = params.store.clone();
    let report = grad_check_piecewise(&mut store, probes, seed, |store, with_grad| {
        let mut p = SmootherParams {
            config,
            store: store.clone(),
        };
        let loss = batch_loss(&mut p, model, samples, with_grad)?;
        let kernels = p.kernels();
        let mut hasher = DefaultHasher::new();
        for clip in &clips {
            sign_pattern(&kernels, &config, clip, &mut hasher)?;
        }
        if with_grad {
            *store = p.store;
        }
        Ok((loss, hasher.finish()))
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{PoseParams, ShapeParams};
    use rand::Rng;

    fn seq(frames: usize, k: usize, f: impl Fn(usize, usize) -> Vec3) -> JointSeq {
        let rows: Vec<Vec<Vec3>> = (0..frames).map(|t| (0..k).map(|j| f(t, j)).collect()).collect();
        JointSeq::from_frames(&rows).unwrap()
    }

    #[test]
    fn j3d_hand_case() {
        let pred = seq(1, 2, |_, j| if j == 0 { Vec3::new(3.0, 4.0, 0.0) } else { Vec3::zeros() });
        let gt = seq(1, 2, |_, _| Vec3::zeros());
        assert_eq!(j3d_loss(&pred, &gt, LossNorm::Norm).unwrap(), 5.0);
        assert_eq!(j3d_loss(&pred, &gt, LossNorm::Squared).unwrap(), 25.0);
        assert_eq!(j3d_loss(&gt, &gt, LossNorm::Norm).unwrap(), 0.0);
    }

    #[test]
    fn motion_hand_case_divides_by_frame_count() {
        let gt = seq(2, 1, |t, _| Vec3::new(t as f64, 0.0, 0.0));
        let pred = seq(2, 1, |t, _| Vec3::new(2.0 * t as f64, 0.0, 0.0));
        assert_eq!(motion_loss(&pred, &gt, LossNorm::Norm).unwrap(), 0.5);
        assert!(motion_loss(&seq(1, 1, |_, _| Vec3::zeros()), &seq(1, 1, |_, _| Vec3::zeros()), LossNorm::Norm).is_err());
    }

    #[test]
    fn motion_loss_ignores_constant_offsets() {
        let gt = seq(5, 3, |t, j| Vec3::new(t as f64 * 0.5, j as f64, (t * j) as f64 * 0.25));
        let pred = seq(5, 3, |t, j| gt.get(t, j) + Vec3::new(j as f64 + 1.0, -2.0, 0.5));
        assert_eq!(motion_loss(&pred, &gt, LossNorm::Norm).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = seq(2, 3, |_, _| Vec3::zeros());
        let b = seq(2, 2, |_, _| Vec3::zeros());
        assert!(matches!(j3d_loss(&a, &b, LossNorm::Norm), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_rejects_volume_changing_padding() {
        let mut cfg = SmootherConfig::default();
        cfg.padding = [1, 0, 1];
        assert!(cfg.validate().is_err());
        for (k, p) in [([5, 3, 3], [2, 1, 1]), ([3, 1, 3], [1, 0, 1]), ([5, 1, 1], [2, 0, 0])] {
            assert_eq!(SmootherConfig::with_kernel(k).unwrap().padding, p);
        }
    }

    fn random_cuboid(rng: &mut ChaCha8Rng, frames: usize, n: usize) -> MeshCuboid {
        MeshCuboid::new(frames, n, (0..frames * n * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn fresh_network_is_identity() {
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_cuboid(&mut rng, 6, model.num_vertices());
        let params = SmootherParams::init(SmootherConfig::default(), 3).unwrap();
        let out = smooth(&params, &input, &model).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn clip_sample(model: &BodyModel, rng: &mut ChaCha8Rng, frames: usize) -> SmootherSample {
        let shape = ShapeParams::zeros(model.num_shapes());
        let rest = model.shape_mesh(&shape).unwrap().vertices;
        let mut noisy = Vec::new();
        let mut gt = Vec::new();
        for t in 0..frames {
            let mut pose = PoseParams::zeros(model.num_joints());
            pose.rotations[18].z = 0.1 * t as f64;
            let clean = model.pose_vertices(&rest, &pose, None).unwrap();
            gt.push(model.regress_joints(&clean).unwrap());
            noisy.push(
                clean
                    .iter()
                    .map(|v| v + Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0))
                    .collect(),
            );
        }
        SmootherSample {
            noisy: MeshCuboid::from_frames(&noisy).unwrap(),
            gt: JointSeq::from_frames(&gt).unwrap(),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn apply_keeps_the_cuboid_shape(frames in 1usize..12, n in 10usize..80, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..frames * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let input = MeshCuboid::new(frames, n, data).unwrap();
            let mut params = SmootherParams::init(SmootherConfig::default(), seed).unwrap();
            params.perturb_final_layer(0.1, seed);
            let out = apply(&params, &input).unwrap();
            proptest::prop_assert_eq!((out.frames(), out.vertices()), (frames, n));
        }
    }

    #[test]
    fn initial_loss_equals_input_loss() {
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = clip_sample(&model, &mut rng, 8);
        let mut params = SmootherParams::init(SmootherConfig::default(), 0).unwrap();
        let loss = batch_loss(&mut params, &model, std::slice::from_ref(&sample), false).unwrap();
        let direct = total_loss(&sample.noisy, &sample.gt, &model, &LossConfig::default()).unwrap();
        assert!((loss - direct).abs() < 1e-9, "{loss} vs {direct}");
    }

    #[test]
    fn gathered_training_matches_full_network() {
        // vertex-local kernels let training run on the regressor's support only
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = clip_sample(&model, &mut rng, 5);
        let mut params = SmootherParams::init(SmootherConfig::default(), 9).unwrap();
        params.perturb_final_layer(0.05, 1);
        let gathered = batch_loss(&mut params, &model, std::slice::from_ref(&sample), false).unwrap();
        let smoothed = smooth(&params, &sample.noisy, &model).unwrap();
        let full = total_loss(&smoothed, &sample.gt, &model, &LossConfig::default()).unwrap();
        assert!((gathered - full).abs() < 1e-5, "{gathered} vs {full}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = vec![clip_sample(&model, &mut rng, 4), clip_sample(&model, &mut rng, 4)];
        for cfg in [SmootherConfig::default(), SmootherConfig::with_kernel([3, 3, 3]).unwrap()] {
            let mut params = SmootherParams::init(SmootherConfig { layers: 3, ..cfg }, 1).unwrap();
            params.perturb_final_layer(0.1, 2);
            let report = grad_check_smoother(&mut params, &model, &samples, 20, 3).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = vec![clip_sample(&model, &mut rng, 4)];
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let out = train_smoother(SmootherConfig::default(), &model, &samples, &[], &opts).unwrap();
        assert_eq!(out.params, SmootherParams::init(SmootherConfig::default(), 0).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let model = BodyModel::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<_> = (0..4).map(|_| clip_sample(&model, &mut rng, 8)).collect();
        let opts = TrainOptions {
            epochs: 15,
            seed: 11,
            ..TrainOptions::default()
        };
        let cfg = SmootherConfig {
            layers: 4,
            ..SmootherConfig::default()
        };
        let a = train_smoother(cfg, &model, &samples, &samples[..1], &opts).unwrap();
        let b = train_smoother(cfg, &model, &samples, &samples[..1], &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.status, TrainStatus::Completed);
        assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("smoother.mprm");
        let params = SmootherParams::init(SmootherConfig::with_kernel([3, 1, 3]).unwrap(), 5).unwrap();
        let meta = CheckpointMeta {
            config: *params.config(),
            seed: 5,
            epochs: 0,
            adam: AdamConfig::default(),
            batch_size: 4,
            num_joints: 24,
        };
        params.save(&path, &meta).unwrap();
        let (back, meta_back) = SmootherParams::load(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.config(), params.config());
        for (a, b) in back.store().tensors().iter().zip(params.store().tensors()) {
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}
