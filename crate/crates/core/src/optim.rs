//! Named parameter tensors, the Adam optimizer and finite-difference gradient
//! checking.

use std::collections::HashMap;
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MPRM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    grad_ready: bool,
}

/// Parameters with gradient and Adam moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; returns its slot.
    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<usize> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::dim(format!(
                "parameter {name}: {} values for shape {shape:?}",
                value.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            value,
            grad_ready: false,
        });
        Ok(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.slot(name)?])
    }

    pub fn value(&self, slot: usize) -> &[f64] {
        &self.tensors[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.tensors[slot].value
    }

    /// Gradient buffer of `slot`, marked as populated.
    pub fn grad_mut(&mut self, slot: usize) -> &mut [f64] {
        let t = &mut self.tensors[slot];
        t.grad_ready = true;
        &mut t.grad
    }

    pub fn grad(&self, slot: usize) -> &[f64] {
        &self.tensors[slot].grad
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
            t.grad_ready = false;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.value.len() {
                return (i, flat);
            }
            flat -= t.value.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|x| x.is_finite()))
    }

    /// Copies values from a store with the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for t in &mut self.tensors {
            let src = other.tensor(&t.name)?;
            if src.shape != t.shape {
                return Err(Error::dim(format!(
                    "parameter {}: shape {:?} does not match {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            t.value.copy_from_slice(&src.value);
        }
        Ok(())
    }

    /// Serializes names, shapes and single-precision values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.magic(MAGIC).u32(VERSION).len_u32(self.tensors.len())?;
        for t in &self.tensors {
            w.len_u32(t.name.len())?.bytes(t.name.as_bytes());
            w.len_u32(t.shape.len())?;
            for &d in &t.shape {
                w.len_u32(d)?;
            }
            w.f32s(t.value.iter().map(|&x| x as f32));
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new("MPRM", data);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos();
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|_| r.error_at(at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = r.u32s(rank)?.into_iter().map(|d| d as usize).collect();
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error("tensor size overflows"))?;
            let value = r.f32s(len)?.into_iter().map(f64::from).collect();
            store.add(&name, &shape, value).map_err(|e| r.error_at(at, e.to_string()))?;
        }
        r.finish()?;
        if !store.is_finite() {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty added to the gradient; off by default.
    pub weight_decay: f64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// One bias-corrected Adam update. Every tensor must have a populated
/// gradient; gradients are cleared afterwards.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(t) = store.tensors.iter().find(|t| !t.grad_ready) {
        return Err(Error::invalid(format!("parameter {} has no gradient", t.name)));
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let norm = store
                .tensors
                .iter()
                .flat_map(|t| &t.grad)
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    store.step += 1;
    let step = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    for t in &mut store.tensors {
        for i in 0..t.value.len() {
            let g = t.grad[i] * clip + cfg.weight_decay * t.value[i];
            t.m[i] = cfg.beta1 * t.m[i] + (1.0 - cfg.beta1) * g;
            t.v[i] = cfg.beta2 * t.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = t.m[i] / c1;
            let v_hat = t.v[i] / c2;
            t.value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Central-difference comparison for one scalar parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
    /// Candidates dropped because the step crossed a kink.
    pub kink_skips: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares analytic gradients with central finite differences on `probes`
/// randomly chosen scalars.
///
/// `loss(store, with_grad)` returns the loss at the store's current values
/// and, when `with_grad` is set, fills the store's gradient buffers.
pub fn grad_check<F>(store: &mut ParamStore, probes: usize, seed: u64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    grad_check_piecewise(store, probes, seed, |s, g| Ok((loss(s, g)?, 0)))
}

/// As [`grad_check`] for piecewise-smooth losses. `loss` also returns a
/// fingerprint of its activation pattern (signs, argmax choices). A
/// candidate whose `±h` evaluations change the pattern straddles a kink,
/// where central differences say nothing about the gradient; it is dropped
/// and another scalar drawn in its place.
pub fn grad_check_piecewise<F>(store: &mut ParamStore, probes: usize, seed: u64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<(f64, u64)>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: Vec::with_capacity(probes),
        kink_skips: 0,
    };
    if probes == 0 {
        warn!("gradient check with zero probes checks nothing");
        return Ok(report);
    }
    store.zero_grads();
    let (base, pattern) = loss(store, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base} at the check point")));
    }
    let total = store.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..total).collect();
    candidates.shuffle(&mut rng);
    for flat in candidates {
        if report.probes.len() == probes {
            break;
        }
        let (slot, i) = store.locate(flat);
        let analytic = store.tensors[slot].grad[i];
        let x = store.tensors[slot].value[i];
        store.tensors[slot].value[i] = x + GRAD_CHECK_STEP;
        let (up, up_pattern) = loss(store, false)?;
        store.tensors[slot].value[i] = x - GRAD_CHECK_STEP;
        let (down, down_pattern) = loss(store, false)?;
        store.tensors[slot].value[i] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss near {}[{i}]",
                store.tensors[slot].name
            )));
        }
        if up_pattern != pattern || down_pattern != pattern {
            report.kink_skips += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let rel_error = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.probes.push(Probe {
            name: store.tensors[slot].name.clone(),
            index: i,
            analytic,
            numeric,
            rel_error,
        });
    }
    if report.kink_skips > 0 {
        debug!("gradient check skipped {} candidates straddling kinks", report.kink_skips);
    }
    Ok(report)
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean held-out error in millimeters, when measured this epoch.
    pub heldout_mpjpe_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    /// Training stopped early; the returned parameters are from the last
    /// completed epoch.
    Diverged { epoch: usize, reason: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", &[1], vec![p]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        s.grad_mut(a);
        let before = s.value(a).to_vec();
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(a), &before[..]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let mut s = scalar_store(1.0);
        s.grad_mut(0)[0] = 0.5;
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        // m = 0.05, v = 0.00025; bias-corrected m_hat = 0.5, v_hat = 0.25
        let expected = 1.0 - 3e-3 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((s.value(0)[0] - expected).abs() < 1e-15);
        assert!(s.grad(0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_one_updates_for_opposite_gradients_are_negations() {
        let mut a = scalar_store(2.0);
        let mut b = scalar_store(2.0);
        a.grad_mut(0)[0] = 0.7;
        b.grad_mut(0)[0] = -0.7;
        let cfg = AdamConfig::default();
        adam_step(&mut a, &cfg).unwrap();
        adam_step(&mut b, &cfg).unwrap();
        assert_eq!(a.value(0)[0] - 2.0, -(b.value(0)[0] - 2.0));
    }

    #[test]
    fn identical_stores_stay_identical() {
        let mut a = scalar_store(0.3);
        a.add("w", &[3], vec![1.0, -1.0, 0.5]).unwrap();
        let mut b = a.clone();
        let cfg = AdamConfig::default();
        for k in 0..5 {
            for s in [&mut a, &mut b] {
                s.grad_mut(0)[0] = k as f64 * 0.1;
                s.grad_mut(1).copy_from_slice(&[0.2, -0.1, k as f64]);
                adam_step(s, &cfg).unwrap();
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        s.add("bias", &[1], vec![0.0]).unwrap();
        s.grad_mut(0);
        let e = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(e.to_string().contains("bias"));
    }

    #[test]
    fn quadratic_gradient_check_is_exact() {
        let mut s = ParamStore::new();
        s.add("x", &[4, 5], (0..20).map(|i| i as f64 * 0.37 - 3.0).collect()).unwrap();
        let report = grad_check(&mut s, 10, 1, |s, with_grad| {
            let v = s.value(0).to_vec();
            if with_grad {
                s.grad_mut(0).copy_from_slice(&v);
            }
            Ok(0.5 * v.iter().map(|x| x * x).sum::<f64>())
        })
        .unwrap();
        assert_eq!(report.probes.len(), 10);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn probes_straddling_a_kink_are_redrawn() {
        // leaky ReLU summed over entries; entry 0 sits closer to zero than the step
        let mut s = ParamStore::new();
        s.add("x", &[3], vec![5e-5, 0.7, -0.4]).unwrap();
        let leaky = |v: f64| if v > 0.0 { v } else { 0.1 * v };
        let mut f = |s: &mut ParamStore, with_grad: bool| {
            let v = s.value(0).to_vec();
            if with_grad {
                let g: Vec<f64> = v.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.1 }).collect();
                s.grad_mut(0).copy_from_slice(&g);
            }
            let pattern = v.iter().enumerate().fold(0u64, |b, (i, &x)| b | (u64::from(x <= 0.0) << i));
            Ok((v.iter().map(|&x| leaky(x)).sum::<f64>(), pattern))
        };
        let plain = grad_check(&mut s, 3, 0, |s, g| Ok(f(s, g)?.0)).unwrap();
        assert!(plain.max_rel_error > 0.1, "{}", plain.max_rel_error);
        let report = grad_check_piecewise(&mut s, 3, 0, &mut f).unwrap();
        assert_eq!(report.kink_skips, 1);
        assert_eq!(report.probes.len(), 2);
        assert!(report.probes.iter().all(|p| p.index != 0));
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn zero_probes_is_vacuous() {
        let mut s = scalar_store(1.0);
        let r = grad_check(&mut s, 0, 0, |_, _| Ok(1.0)).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut s = scalar_store(1.0);
        assert!(grad_check(&mut s, 1, 0, |_, _| Ok(f64::NAN)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("conv1.weight", &[2, 1, 5, 1, 3], (0..30).map(|i| (i as f32 * 0.1) as f64).collect())
            .unwrap();
        s.add("conv1.bias", &[2], vec![0.5, -0.25]).unwrap();
        let bytes = s.to_bytes().unwrap();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensor("conv1.weight").unwrap().value, s.tensor("conv1.weight").unwrap().value);
        assert_eq!(back.tensor("conv1.bias").unwrap().shape, vec![2]);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }
}
