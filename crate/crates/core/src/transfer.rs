//! Vertex-count-agnostic pose transfer.
//!
//! A shared per-vertex MLP encodes the pose mesh; a max over vertices gives
//! the pose latent `z`. Each identity vertex then runs through decoder
//! blocks whose scale and shift come from `[z; x_v]`, and a final head
//! predicts a displacement of the identity vertex. Nothing depends on the
//! vertex count or order of either mesh.

use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::cuboid::MeshCuboid;
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::optim::{adam_step, grad_check_piecewise, AdamConfig, EpochLog, GradCheckReport, ParamStore, TrainStatus};
use crate::smoother::{sidecar_path, smooth, SmootherParams};
use crate::synth::{derive_seed, MotionSpec};

const NEGATIVE_SLOPE: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Width of the first encoder layer.
    pub encoder_hidden: usize,
    /// Pose latent length P.
    pub latent: usize,
    /// Decoder feature width.
    pub hidden: usize,
    pub blocks: usize,
    /// Weight of the edge-length term in the training loss.
    pub edge_weight: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            latent: 128,
            hidden: 64,
            blocks: 3,
            edge_weight: 0.1,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden == 0 || self.latent == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::invalid(format!("transfer widths and block count must be positive: {self:?}")));
        }
        if !(self.edge_weight >= 0.0 && self.edge_weight.is_finite()) {
            return Err(Error::invalid("edge weight must be finite and nonnegative"));
        }
        Ok(())
    }

    fn block_input(&self, b: usize) -> usize {
        if b == 0 {
            3
        } else {
            self.hidden
        }
    }
}

/// Slots of one decoder block in the parameter store.
#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    gamma_z: usize,
    gamma_x: usize,
    gamma_b: usize,
    beta_z: usize,
    beta_x: usize,
    beta_b: usize,
    weight: usize,
    bias: usize,
    skip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferParams {
    config: TransferConfig,
    store: ParamStore,
}

impl TransferParams {
    /// He-normal weights, small conditioning weights and a zero head, so a
    /// fresh model returns the identity mesh unchanged.
    pub fn init(config: TransferConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + NEGATIVE_SLOPE * NEGATIVE_SLOPE)).sqrt();
        let mut normal = |count: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..count).map(|_| d.sample(&mut rng)).collect()
        };
        let (eh, p, h) = (config.encoder_hidden, config.latent, config.hidden);
        let mut s = ParamStore::new();
        s.add("enc1.weight", &[3, eh], normal(3 * eh, gain / 3f64.sqrt()))?;
        s.add("enc1.bias", &[eh], vec![0.0; eh])?;
        s.add("enc2.weight", &[eh, p], normal(eh * p, gain / (eh as f64).sqrt()))?;
        s.add("enc2.bias", &[p], vec![0.0; p])?;
        for b in 0..config.blocks {
            let d = config.block_input(b);
            let cond = 0.1 / ((p + 3) as f64).sqrt();
            for g in ["gamma", "beta"] {
                s.add(&format!("block{b}.{g}_z"), &[p, d], normal(p * d, cond))?;
                s.add(&format!("block{b}.{g}_x"), &[3, d], normal(3 * d, cond))?;
                s.add(&format!("block{b}.{g}_b"), &[d], vec![0.0; d])?;
            }
            s.add(&format!("block{b}.weight"), &[d, h], normal(d * h, gain / (d as f64).sqrt()))?;
            s.add(&format!("block{b}.bias"), &[h], vec![0.0; h])?;
            if d != h {
                s.add(&format!("block{b}.skip"), &[d, h], normal(d * h, 1.0 / (d as f64).sqrt()))?;
            }
        }
        s.add("head.weight", &[h, 3], vec![0.0; h * 3])?;
        s.add("head.bias", &[3], vec![0.0; 3])?;
        Ok(Self { config, store: s })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_store(config: TransferConfig, store: ParamStore) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        if store.len() != params.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, configuration needs {}",
                store.len(),
                params.store.len()
            )));
        }
        params.store.load_values(&store)?;
        Ok(params)
    }

    pub fn config(&self) -> &TransferConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Small random head weights. A zero head blocks every upstream
    /// gradient, so gradient checks call this first.
    pub fn perturb_head(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, scale).expect("positive std");
        let slot = self.store.slot("head.weight").expect("head exists");
        for w in self.store.value_mut(slot) {
            *w = d.sample(&mut rng);
        }
    }

    fn block_slots(&self, b: usize) -> BlockSlots {
        let slot = |name: &str| self.store.slot(&format!("block{b}.{name}")).expect("block parameter exists");
        BlockSlots {
            gamma_z: slot("gamma_z"),
            gamma_x: slot("gamma_x"),
            gamma_b: slot("gamma_b"),
            beta_z: slot("beta_z"),
            beta_x: slot("beta_x"),
            beta_b: slot("beta_b"),
            weight: slot("weight"),
            bias: slot("bias"),
            skip: self.store.slot(&format!("block{b}.skip")).ok(),
        }
    }

    fn value(&self, name: &str) -> &[f64] {
        self.store.value(self.store.slot(name).expect("parameter exists"))
    }

    pub fn save(&self, path: &Path, meta: &TransferMeta) -> Result<()> {
        self.store.save(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(meta)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, TransferMeta)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: TransferMeta = serde_json::from_str(&text)?;
        let store = ParamStore::load(path)?;
        Ok((Self::from_store(meta.config, store)?, meta))
    }
}

/// JSON sidecar of a transfer checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMeta {
    pub config: TransferConfig,
    pub seed: u64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub data: TransferDataSpec,
}

/// A pose mesh, an identity mesh and, for training, the identity in the
/// pose. The two meshes may have any vertex counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferPair {
    pub pose: Vec<Vec3>,
    pub identity: Mesh,
    pub target: Option<Vec<Vec3>>,
}

impl TransferPair {
    pub fn validate(&self) -> Result<()> {
        if self.pose.is_empty() || self.identity.vertices.is_empty() {
            return Err(Error::invalid("pose and identity meshes need at least one vertex"));
        }
        let finite = |v: &[Vec3]| v.iter().all(|p| p.iter().all(|x| x.is_finite()));
        if !finite(&self.pose) || !finite(&self.identity.vertices) {
            return Err(Error::NonFinite("transfer input vertex".into()));
        }
        if let Some(t) = &self.target {
            if t.len() != self.identity.len() {
                return Err(Error::dim(format!(
                    "target has {} vertices, identity has {}",
                    t.len(),
                    self.identity.len()
                )));
            }
            if !finite(t) {
                return Err(Error::NonFinite("transfer target vertex".into()));
            }
        }
        Ok(())
    }
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        NEGATIVE_SLOPE * x
    }
}

fn lrelu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        NEGATIVE_SLOPE
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c (k x n) += a^T * b` with `a (m x k)` and `b (m x n)`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as in `gemm`, with `a` read transposed.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c (m x k) = a * b^T` with `a (m x n)` and `b (k x n)`.
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as in `gemm`, with `b` read transposed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        )
    }
}

fn add_rows(x: &mut [f64], row: &[f64]) {
    for chunk in x.chunks_mut(row.len()) {
        chunk.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

fn column_sums(x: &[f64], width: usize, into: &mut [f64]) {
    for chunk in x.chunks(width) {
        into.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
}

/// Center of the axis-aligned bounding box. Unlike the mean it does not
/// depend on vertex order, so the encoder stays exactly permutation
/// invariant.
fn box_center(points: &[Vec3]) -> Vec3 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo + hi) * 0.5
}

fn centered_rows(points: &[Vec3]) -> Vec<f64> {
    let c = box_center(points);
    points.iter().flat_map(|p| [p.x - c.x, p.y - c.y, p.z - c.z]).collect()
}

struct Encoded {
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    /// Winning vertex per latent channel.
    argmax: Vec<usize>,
    z: Vec<f64>,
}

fn encode(params: &TransferParams, pose: &[Vec3]) -> Result<Encoded> {
    if pose.is_empty() {
        return Err(Error::invalid("pose mesh has no vertices"));
    }
    let cfg = &params.config;
    let (n, eh, p) = (pose.len(), cfg.encoder_hidden, cfg.latent);
    let x = centered_rows(pose);
    let mut a1 = vec![0.0; n * eh];
    gemm(n, 3, eh, &x, params.value("enc1.weight"), 0.0, &mut a1);
    add_rows(&mut a1, params.value("enc1.bias"));
    let h1: Vec<f64> = a1.iter().map(|&v| lrelu(v)).collect();
    let mut a2 = vec![0.0; n * p];
    gemm(n, eh, p, &h1, params.value("enc2.weight"), 0.0, &mut a2);
    add_rows(&mut a2, params.value("enc2.bias"));
    let mut argmax = vec![0; p];
    let mut z = a2[..p].to_vec();
    for (v, row) in a2.chunks(p).enumerate().skip(1) {
        for c in 0..p {
            if row[c] > z[c] {
                z[c] = row[c];
                argmax[c] = v;
            }
        }
    }
    Ok(Encoded { x, a1, h1, argmax, z })
}

/// Max-pooled pose latent of length `latent`.
pub fn encode_pose(params: &TransferParams, pose: &[Vec3]) -> Result<Vec<f64>> {
    Ok(encode(params, pose)?.z)
}

struct BlockTrace {
    input: Vec<f64>,
    normed: Vec<f64>,
    /// Per-vertex inverse standard deviation; empty for the first block.
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Decoded {
    x: Vec<f64>,
    blocks: Vec<BlockTrace>,
    last: Vec<f64>,
    delta: Vec<f64>,
}

fn layer_norm(input: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut normed = vec![0.0; input.len()];
    let mut inv = Vec::with_capacity(input.len() / width);
    for (row, out) in input.chunks(width).zip(normed.chunks_mut(width)) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        out.iter_mut().zip(row).for_each(|(o, v)| *o = (v - mean) * s);
        inv.push(s);
    }
    (normed, inv)
}

/// Per-vertex `z W_z + x_v W_x + b` as an `n x d` matrix.
fn condition(params: &TransferParams, z: &[f64], x: &[f64], n: usize, wz: usize, wx: usize, b: usize, d: usize) -> Vec<f64> {
    let mut shared = params.store.value(b).to_vec();
    gemm(1, z.len(), d, z, params.store.value(wz), 1.0, &mut shared);
    let mut out = vec![0.0; n * d];
    gemm(n, 3, d, x, params.store.value(wx), 0.0, &mut out);
    add_rows(&mut out, &shared);
    out
}

fn decode(params: &TransferParams, z: &[f64], identity: &[Vec3]) -> Decoded {
    let cfg = &params.config;
    let (n, h) = (identity.len(), cfg.hidden);
    let x = centered_rows(identity);
    let mut f = x.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let d = cfg.block_input(b);
        let s = params.block_slots(b);
        let (normed, inv_std) = if b == 0 { (f.clone(), Vec::new()) } else { layer_norm(&f, d) };
        let mut gamma = condition(params, z, &x, n, s.gamma_z, s.gamma_x, s.gamma_b, d);
        gamma.iter_mut().for_each(|g| *g += 1.0);
        let beta = condition(params, z, &x, n, s.beta_z, s.beta_x, s.beta_b, d);
        let pre: Vec<f64> = normed.iter().zip(&gamma).zip(&beta).map(|((v, g), b)| v * g + b).collect();
        let act: Vec<f64> = pre.iter().map(|&v| lrelu(v)).collect();
        let mut out = vec![0.0; n * h];
        match s.skip {
            Some(skip) => gemm(n, d, h, &f, params.store.value(skip), 0.0, &mut out),
            None => out.copy_from_slice(&f),
        }
        gemm(n, d, h, &act, params.store.value(s.weight), 1.0, &mut out);
        add_rows(&mut out, params.store.value(s.bias));
        blocks.push(BlockTrace {
            input: std::mem::replace(&mut f, out),
            normed,
            inv_std,
            gamma,
            pre,
            act,
        });
    }
    let mut delta = vec![0.0; n * 3];
    gemm(n, h, 3, &f, params.value("head.weight"), 0.0, &mut delta);
    add_rows(&mut delta, params.value("head.bias"));
    Decoded {
        x,
        blocks,
        last: f,
        delta,
    }
}

fn displaced(identity: &[Vec3], delta: &[f64]) -> Vec<Vec3> {
    identity
        .iter()
        .zip(delta.chunks(3))
        .map(|(v, d)| v + Vec3::new(d[0], d[1], d[2]))
        .collect()
}

/// Poses the identity mesh like the pose mesh. The output keeps the
/// identity's vertex count and faces.
pub fn transfer(params: &TransferParams, pair: &TransferPair) -> Result<Mesh> {
    pair.validate()?;
    let z = encode_pose(params, &pair.pose)?;
    let dec = decode(params, &z, &pair.identity.vertices);
    let vertices = displaced(&pair.identity.vertices, &dec.delta);
    if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("transfer output".into()));
    }
    Ok(Mesh {
        vertices,
        faces: pair.identity.faces.clone(),
    })
}

/// Unique undirected edges of a triangle list.
pub fn mesh_edges(faces: &[[u32; 3]]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| (a.min(b) as usize, a.max(b) as usize))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Mean squared vertex distance plus `edge_weight` times the mean squared
/// edge-length deviation. Returns the loss and its gradient with respect
/// to the predicted vertices.
pub fn transfer_loss(pred: &[Vec3], target: &[Vec3], edges: &[(usize, usize)], edge_weight: f64) -> Result<(f64, Vec<Vec3>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim(format!(
            "prediction has {} vertices, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut grad: Vec<Vec3> = pred.iter().zip(target).map(|(p, t)| (p - t) * (2.0 / n)).collect();
    let mut loss = pred.iter().zip(target).map(|(p, t)| (p - t).norm_squared()).sum::<f64>() / n;
    if edge_weight > 0.0 && !edges.is_empty() {
        let e = edges.len() as f64;
        let mut edge_loss = 0.0;
        for &(a, b) in edges {
            let d = pred[a] - pred[b];
            let len = d.norm();
            let dev = len - (target[a] - target[b]).norm();
            edge_loss += dev * dev;
            if len > 0.0 {
                let g = d * (edge_weight * 2.0 * dev / (e * len));
                grad[a] += g;
                grad[b] -= g;
            }
        }
        loss += edge_weight * edge_loss / e;
    }
    Ok((loss, grad))
}

/// Loss of one pair; with `grads` the parameter gradients are accumulated
/// scaled by `scale`.
fn pair_loss(params: &TransferParams, pair: &TransferPair, edges: &[(usize, usize)], grads: Option<(&mut ParamStore, f64)>) -> Result<f64> {
    let target = pair
        .target
        .as_ref()
        .ok_or_else(|| Error::invalid("training pair has no target"))?;
    let enc = encode(params, &pair.pose)?;
    let dec = decode(params, &enc.z, &pair.identity.vertices);
    let pred = displaced(&pair.identity.vertices, &dec.delta);
    let (loss, d_pred) = transfer_loss(&pred, target, edges, params.config.edge_weight)?;
    if let Some((store, scale)) = grads {
        let d_delta: Vec<f64> = d_pred.iter().flat_map(|g| [g.x * scale, g.y * scale, g.z * scale]).collect();
        backward(params, &enc, &dec, &d_delta, store);
    }
    Ok(loss)
}

fn accumulate(store: &mut ParamStore, slot: usize, f: impl FnOnce(&mut [f64])) {
    f(store.grad_mut(slot));
}

fn backward(params: &TransferParams, enc: &Encoded, dec: &Decoded, d_delta: &[f64], store: &mut ParamStore) {
    let cfg = &params.config;
    let (h, p, eh) = (cfg.hidden, cfg.latent, cfg.encoder_hidden);
    let n = d_delta.len() / 3;
    let slot = |name: &str| params.store.slot(name).expect("parameter exists");

    accumulate(store, slot("head.weight"), |g| gemm_tn(n, h, 3, &dec.last, d_delta, g));
    accumulate(store, slot("head.bias"), |g| column_sums(d_delta, 3, g));
    let mut d_f = vec![0.0; n * h];
    gemm_nt(n, 3, h, d_delta, params.value("head.weight"), &mut d_f);

    let mut d_z = vec![0.0; p];
    for b in (0..cfg.blocks).rev() {
        let t = &dec.blocks[b];
        let d = cfg.block_input(b);
        let s = params.block_slots(b);
        accumulate(store, s.weight, |g| gemm_tn(n, d, h, &t.act, &d_f, g));
        accumulate(store, s.bias, |g| column_sums(&d_f, h, g));
        let mut d_in = vec![0.0; n * d];
        match s.skip {
            Some(skip) => {
                accumulate(store, skip, |g| gemm_tn(n, d, h, &t.input, &d_f, g));
                gemm_nt(n, h, d, &d_f, params.store.value(skip), &mut d_in);
            }
            None => d_in.copy_from_slice(&d_f),
        }
        let mut d_pre = vec![0.0; n * d];
        gemm_nt(n, h, d, &d_f, params.store.value(s.weight), &mut d_pre);
        d_pre.iter_mut().zip(&t.pre).for_each(|(g, &v)| *g *= lrelu_grad(v));
        // pre = normed * gamma + beta
        let d_gamma: Vec<f64> = d_pre.iter().zip(&t.normed).map(|(g, v)| g * v).collect();
        let d_normed: Vec<f64> = d_pre.iter().zip(&t.gamma).map(|(g, v)| g * v).collect();
        for (d_cond, wz, wx, bias) in [(&d_gamma, s.gamma_z, s.gamma_x, s.gamma_b), (&d_pre, s.beta_z, s.beta_x, s.beta_b)] {
            let mut sums = vec![0.0; d];
            column_sums(d_cond, d, &mut sums);
            accumulate(store, bias, |g| g.iter_mut().zip(&sums).for_each(|(a, b)| *a += b));
            accumulate(store, wz, |g| gemm_tn(1, p, d, &enc.z, &sums, g));
            accumulate(store, wx, |g| gemm_tn(n, 3, d, &dec.x, d_cond, g));
            let wz = params.store.value(wz);
            for (c, dz) in d_z.iter_mut().enumerate() {
                *dz += wz[c * d..(c + 1) * d].iter().zip(&sums).map(|(w, s)| w * s).sum::<f64>();
            }
        }
        if b == 0 {
            d_in.iter_mut().zip(&d_normed).for_each(|(a, g)| *a += g);
        } else {
            let w = d as f64;
            for (v, ((din, dn), nm)) in d_in.chunks_mut(d).zip(d_normed.chunks(d)).zip(t.normed.chunks(d)).enumerate() {
                let mean_dn = dn.iter().sum::<f64>() / w;
                let mean_dn_n = dn.iter().zip(nm).map(|(a, b)| a * b).sum::<f64>() / w;
                let s = t.inv_std[v];
                for i in 0..d {
                    din[i] += s * (dn[i] - mean_dn - nm[i] * mean_dn_n);
                }
            }
        }
        d_f = d_in;
    }

    // The max routes each channel's gradient to its winning vertex only.
    let w2 = params.value("enc2.weight");
    let mut rows: Vec<usize> = enc.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let mut d_h1 = vec![0.0; rows.len() * eh];
    {
        let slot2 = slot("enc2.weight");
        let g2 = store.grad_mut(slot2);
        for (c, &v) in enc.argmax.iter().enumerate() {
            let r = rows.binary_search(&v).expect("winning row listed");
            let h1 = &enc.h1[v * eh..(v + 1) * eh];
            for i in 0..eh {
                g2[i * p + c] += h1[i] * d_z[c];
                d_h1[r * eh + i] += w2[i * p + c] * d_z[c];
            }
        }
    }
    accumulate(store, slot("enc2.bias"), |g| g.iter_mut().zip(&d_z).for_each(|(a, b)| *a += b));
    let g1 = slot("enc1.weight");
    let gb1 = slot("enc1.bias");
    for (r, &v) in rows.iter().enumerate() {
        let d_a1: Vec<f64> = (0..eh)
            .map(|i| d_h1[r * eh + i] * lrelu_grad(enc.a1[v * eh + i]))
            .collect();
        let x = &enc.x[v * 3..v * 3 + 3];
        accumulate(store, g1, |g| {
            for k in 0..3 {
                for i in 0..eh {
                    g[k * eh + i] += x[k] * d_a1[i];
                }
            }
        });
        accumulate(store, gb1, |g| g.iter_mut().zip(&d_a1).for_each(|(a, b)| *a += b));
    }
}

/// Mean training loss over `pairs` and, with `with_grad`, its gradient in
/// the parameter store.
pub fn transfer_batch_loss(params: &mut TransferParams, pairs: &[TransferPair], with_grad: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no transfer pairs"));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grads = params.store.clone();
    grads.zero_grads();
    let mut total = 0.0;
    for pair in pairs {
        pair.validate()?;
        let edges = mesh_edges(&pair.identity.faces);
        let g = if with_grad { Some((&mut grads, scale)) } else { None };
        total += pair_loss(params, pair, &edges, g)? * scale;
    }
    if with_grad {
        params.store = grads;
    }
    Ok(total)
}

fn hash_signs(values: &[f64], hasher: &mut DefaultHasher) {
    for chunk in values.chunks(64) {
        hasher.write_u64(chunk.iter().enumerate().fold(0u64, |b, (i, &v)| b | (u64::from(v <= 0.0) << i)));
    }
}

/// Fingerprint of the activation signs and max-pool winners for one pair.
fn activation_pattern(params: &TransferParams, pair: &TransferPair, hasher: &mut DefaultHasher) -> Result<()> {
    let enc = encode(params, &pair.pose)?;
    hash_signs(&enc.a1, hasher);
    enc.argmax.iter().for_each(|&v| hasher.write_usize(v));
    for block in decode(params, &enc.z, &pair.identity.vertices).blocks {
        hash_signs(&block.pre, hasher);
    }
    Ok(())
}

/// Finite-difference check of the training loss gradient. Probes whose
/// step flips an activation sign or a max-pool winner are redrawn.
pub fn grad_check_transfer(params: &TransferParams, pairs: &[TransferPair], probes: usize, seed: u64) -> Result<GradCheckReport> {
    let config = params.config;
    let mut store = params.store.clone();
    grad_check_piecewise(&mut store, probes, seed, |store, with_grad| {
        let mut p = TransferParams {
            config,
            store: store.clone(),
        };
        let loss = transfer_batch_loss(&mut p, pairs, with_grad)?;
        let mut hasher = DefaultHasher::new();
        for pair in pairs {
            activation_pattern(&p, pair, &mut hasher)?;
        }
        if with_grad {
            *store = p.store;
        }
        Ok((loss, hasher.finish()))
    })
}

/// Sizes and seed of a synthetic transfer dataset: every identity in every
/// pose, each pose shown on a different identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferDataSpec {
    pub identities: usize,
    pub poses: usize,
    pub shape_std: f64,
    pub seed: u64,
}

impl Default for TransferDataSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            poses: 100,
            shape_std: 0.7,
            seed: 11,
        }
    }
}

/// Generates pairs whose targets come straight from the body model.
pub fn make_transfer_pairs(model: &BodyModel, spec: &TransferDataSpec) -> Result<Vec<TransferPair>> {
    if spec.identities == 0 || spec.poses == 0 {
        return Err(Error::invalid("transfer dataset needs identities and poses"));
    }
    if !(spec.shape_std >= 0.0 && spec.shape_std.is_finite()) {
        return Err(Error::invalid("shape std must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[50]));
    let normal = Normal::new(0.0, spec.shape_std).map_err(|e| Error::invalid(e.to_string()))?;
    let shapes: Vec<ShapeParams> = (0..spec.identities)
        .map(|_| ShapeParams::new((0..model.num_shapes()).map(|_| normal.sample(&mut rng)).collect()))
        .collect();
    let poses = (0..spec.poses)
        .map(|p| {
            let motion = MotionSpec::random(model.num_joints(), 50.0, 1000, derive_seed(spec.seed, &[60, p as u64]))?;
            let pose = motion.pose_at(rng.random_range(0..1000));
            Ok(PoseParams {
                rotations: pose.rotations,
                translation: Vec3::zeros(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rests = shapes.iter().map(|s| model.shape_mesh(s)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(spec.identities * spec.poses);
    for (i, shape) in shapes.iter().enumerate() {
        for pose in &poses {
            let source = if spec.identities > 1 {
                (i + rng.random_range(1..spec.identities)) % spec.identities
            } else {
                i
            };
            pairs.push(TransferPair {
                pose: model.pose_mesh(&shapes[source], pose)?.vertices,
                identity: rests[i].clone(),
                target: Some(model.pose_mesh(shape, pose)?.vertices),
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held-out error is measured every this many epochs (and at the last).
    pub eval_every: usize,
}

impl Default for TransferTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            eval_every: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransferTraining {
    pub params: TransferParams,
    pub log: Vec<EpochLog>,
    pub status: TrainStatus,
}

/// Mean per-vertex error of the model and of the untouched identity mesh,
/// both in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferEval {
    pub mean_vertex_error_mm: f64,
    pub copy_identity_mm: f64,
    pub pairs: usize,
}

pub fn evaluate_transfer(params: &TransferParams, pairs: &[TransferPair]) -> Result<TransferEval> {
    if pairs.is_empty() {
        return Err(Error::invalid("no transfer pairs to evaluate"));
    }
    let (mut model_err, mut copy_err) = (0.0, 0.0);
    for pair in pairs {
        let target = pair
            .target
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluation pair has no target"))?;
        let out = transfer(params, pair)?;
        let n = target.len() as f64;
        model_err += out.vertices.iter().zip(target).map(|(a, b)| (a - b).norm()).sum::<f64>() / n;
        copy_err += pair.identity.vertices.iter().zip(target).map(|(a, b)| (a - b).norm()).sum::<f64>() / n;
    }
    let m = pairs.len() as f64;
    Ok(TransferEval {
        mean_vertex_error_mm: model_err / m * 1000.0,
        copy_identity_mm: copy_err / m * 1000.0,
        pairs: pairs.len(),
    })
}

/// Trains with Adam on shuffled mini-batches. Divergence stops training and
/// returns the parameters of the last completed epoch.
pub fn train_transfer(
    config: TransferConfig,
    train: &[TransferPair],
    heldout: &[TransferPair],
    opts: &TransferTrainOptions,
) -> Result<TransferTraining> {
    config.validate()?;
    opts.adam.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for pair in train {
        pair.validate()?;
        if pair.target.is_none() {
            return Err(Error::invalid("every training pair needs a target"));
        }
    }
    let edges: Vec<Vec<(usize, usize)>> = train.iter().map(|p| mesh_edges(&p.identity.faces)).collect();
    let mut params = TransferParams::init(config, opts.seed)?;
    let mut last_good = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a4e_5fe4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    info!("training pose transfer on {} pairs", train.len());
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut failure = None;
        for batch in order.chunks(opts.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = params.store.clone();
            grads.zero_grads();
            for &i in batch {
                let loss = pair_loss(&params, &train[i], &edges[i], Some((&mut grads, scale)))?;
                if !loss.is_finite() {
                    failure = Some(format!("loss {loss} on pair {i}"));
                    break;
                }
                epoch_loss += loss;
            }
            if failure.is_some() {
                break;
            }
            params.store = grads;
            adam_step(&mut params.store, &opts.adam)?;
            if !params.store.is_finite() {
                failure = Some("non-finite parameter after update".into());
                break;
            }
        }
        if let Some(reason) = failure {
            info!("pose transfer diverged at epoch {epoch}: {reason}");
            return Ok(TransferTraining {
                params: last_good,
                log,
                status: TrainStatus::Diverged { epoch, reason },
            });
        }
        let train_loss = epoch_loss / train.len() as f64;
        let eval_now = !heldout.is_empty() && opts.eval_every > 0 && (epoch % opts.eval_every == 0 || epoch == opts.epochs);
        let heldout_mpjpe_mm = if eval_now {
            Some(evaluate_transfer(&params, heldout)?.mean_vertex_error_mm)
        } else {
            None
        };
        debug!("epoch {epoch}: loss {train_loss:.3e} heldout {heldout_mpjpe_mm:?}");
        log.push(EpochLog {
            epoch,
            train_loss,
            heldout_mpjpe_mm,
        });
        last_good = params.clone();
    }
    Ok(TransferTraining {
        params,
        log,
        status: TrainStatus::Completed,
    })
}

/// Smooths a body-model cuboid and transfers every frame onto `identity`.
/// The output follows the source's root motion relative to its first frame.
pub fn imitate(
    smoother: &SmootherParams,
    transfer_params: &TransferParams,
    model: &BodyModel,
    source: &MeshCuboid,
    identity: &Mesh,
) -> Result<MeshCuboid> {
    let smoothed = smooth(smoother, source, model)?;
    let root = |t: usize| -> Result<Vec3> { Ok(model.regress_joints(&smoothed.frame(t))?[0]) };
    let origin = root(0)?;
    let frames = (0..smoothed.frames())
        .map(|t| {
            let pair = TransferPair {
                pose: smoothed.frame(t),
                identity: identity.clone(),
                target: None,
            };
            let shift = root(t)? - origin;
            Ok(transfer(transfer_params, &pair)?.vertices.into_iter().map(|v| v + shift).collect())
        })
        .collect::<Result<Vec<Vec<Vec3>>>>()?;
    MeshCuboid::from_frames(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn small_config() -> TransferConfig {
        TransferConfig {
            encoder_hidden: 8,
            latent: 12,
            hidden: 6,
            blocks: 3,
            edge_weight: 0.1,
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn strip(n: usize, seed: u64) -> Mesh {
        let vertices = cloud(n, seed);
        let faces = (0..n as u32 - 2).map(|i| [i, i + 1, i + 2]).collect();
        Mesh { vertices, faces }
    }

    fn trained_like(seed: u64) -> TransferParams {
        let mut p = TransferParams::init(small_config(), seed).unwrap();
        p.perturb_head(0.3, seed + 1);
        // nonzero conditioning biases exercise every gradient path
        for name in ["block0.gamma_b", "block1.beta_b", "enc2.bias"] {
            let slot = p.store.slot(name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            p.store.value_mut(slot).iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        p
    }

    #[test]
    fn fresh_model_returns_the_identity() {
        let p = TransferParams::init(TransferConfig::default(), 3).unwrap();
        let identity = strip(30, 1);
        let out = transfer(
            &p,
            &TransferPair {
                pose: cloud(50, 2),
                identity: identity.clone(),
                target: None,
            },
        )
        .unwrap();
        assert_eq!(out, identity);
    }

    #[test]
    fn latent_ignores_order_and_duplicates() {
        let p = trained_like(4);
        let pose = cloud(40, 5);
        let z = encode_pose(&p, &pose).unwrap();
        let mut shuffled = pose.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(encode_pose(&p, &shuffled).unwrap(), z);
        let doubled: Vec<Vec3> = pose.iter().chain(&pose).copied().collect();
        assert_eq!(encode_pose(&p, &doubled).unwrap(), z);
    }

    #[test]
    fn single_vertex_latent_is_its_feature() {
        let p = trained_like(6);
        let v = Vec3::new(0.3, -0.2, 0.9);
        let z = encode_pose(&p, &[v]).unwrap();
        // a single vertex is its own box center, so the encoder sees zero
        let cfg = p.config;
        let h1: Vec<f64> = p.value("enc1.bias").iter().map(|&b| lrelu(b)).collect();
        let w2 = p.value("enc2.weight");
        for c in 0..cfg.latent {
            let want = p.value("enc2.bias")[c] + (0..cfg.encoder_hidden).map(|i| h1[i] * w2[i * cfg.latent + c]).sum::<f64>();
            assert!((z[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_pose_is_rejected() {
        let p = trained_like(1);
        assert!(encode_pose(&p, &[]).is_err());
    }

    #[test]
    fn gemm_variants_match_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (5, 4, 3);
        let mut rand = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let a = rand(m * k);
        let b = rand(k * n);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T c has shape k x n
        let mut t = vec![0.0; k * n];
        gemm_tn(m, k, n, &a, &c, &mut t);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|l| a[l * k + i] * c[l * n + j]).sum();
                assert!((t[i * n + j] - want).abs() < 1e-12);
            }
        }
        // c b^T has shape m x k
        let mut u = vec![0.0; m * k];
        gemm_nt(m, n, k, &c, &b, &mut u);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|l| c[i * n + l] * b[j * n + l]).sum();
                assert!((u[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_hand_values() {
        let target = vec![Vec3::zeros(), Vec3::x()];
        let pred = vec![Vec3::new(0.0, 0.1, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let (loss, _) = transfer_loss(&pred, &target, &[(0, 1)], 0.5).unwrap();
        // squared distances 0.01 and 1.0; edge length 2.0049... vs 1
        let edge = (4.0f64 + 0.01).sqrt() - 1.0;
        assert!((loss - (1.01 / 2.0 + 0.5 * edge * edge)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pairs: Vec<TransferPair> = (0..2)
            .map(|i| {
                let identity = strip(9 + i, 20 + i as u64);
                let target = identity.vertices.iter().map(|v| v * 1.1 + Vec3::new(0.0, 0.2, 0.0)).collect();
                TransferPair {
                    pose: cloud(7 + 3 * i, 30 + i as u64),
                    identity,
                    target: Some(target),
                }
            })
            .collect();
        for seed in 0..3 {
            let p = trained_like(seed);
            let report = grad_check_transfer(&p, &pairs, 40, seed).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transfer.mprm");
        let p = trained_like(2);
        let meta = TransferMeta {
            config: p.config,
            seed: 2,
            epochs: 0,
            adam: AdamConfig::default(),
            batch_size: 8,
            data: TransferDataSpec::default(),
        };
        p.save(&path, &meta).unwrap();
        let (q, m) = TransferParams::load(&path).unwrap();
        assert_eq!(m, meta);
        for (a, b) in p.store.tensors().iter().zip(q.store.tensors()) {
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| *x as f32 == *y as f32));
        }
        let mut other = small_config();
        other.latent += 1;
        assert!(TransferParams::from_store(other, q.store.clone()).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let pairs = vec![TransferPair {
            pose: cloud(5, 1),
            identity: strip(6, 2),
            target: Some(cloud(6, 3)),
        }];
        let opts = TransferTrainOptions {
            epochs: 0,
            ..TransferTrainOptions::default()
        };
        let t = train_transfer(small_config(), &pairs, &[], &opts).unwrap();
        assert_eq!(t.params, TransferParams::init(small_config(), opts.seed).unwrap());
        assert!(t.log.is_empty());
    }

    #[test]
    fn dataset_targets_come_from_the_body_model() {
        let model = BodyModel::humanoid();
        let spec = TransferDataSpec {
            identities: 3,
            poses: 2,
            ..TransferDataSpec::default()
        };
        let pairs = make_transfer_pairs(&model, &spec).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs, make_transfer_pairs(&model, &spec).unwrap());
        for p in &pairs {
            assert_eq!(p.identity.faces, model.faces());
            // a different identity supplies the pose
            assert_ne!(p.pose, p.target.clone().unwrap());
        }
        // same pose index, different identities share the joint rotations
        assert_ne!(pairs[0].identity, pairs[2].identity);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_keeps_identity_size_and_faces(np in 1usize..80, ni in 3usize..120, seed in 0u64..1000) {
            let p = trained_like(seed % 7);
            let identity = strip(ni, seed);
            let out = transfer(&p, &TransferPair { pose: cloud(np, seed + 1), identity: identity.clone(), target: None }).unwrap();
            prop_assert_eq!(out.vertices.len(), ni);
            prop_assert_eq!(out.faces, identity.faces);
        }

        #[test]
        fn pose_order_never_changes_the_output(np in 2usize..60, seed in 0u64..1000) {
            let p = trained_like(seed % 5);
            let pose = cloud(np, seed);
            let mut shuffled = pose.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let identity = strip(12, seed + 3);
            let a = transfer(&p, &TransferPair { pose, identity: identity.clone(), target: None }).unwrap();
            let b = transfer(&p, &TransferPair { pose: shuffled, identity, target: None }).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
