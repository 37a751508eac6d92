//! Mean per-joint position error, evaluation reports and the ablation
//! harness.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::cuboid::{JointSeq, MeshCuboid};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::optim::TrainStatus;
use crate::smoother::{smooth, train_smoother, SmootherConfig, SmootherSample, TrainOptions};

/// MPJPE in millimeters over flattened `frames x k` joints (meters). With
/// `align_root`, joint 0 of each frame is subtracted from both sides first.
pub fn mpjpe_frames(pred: &[Vec3], gt: &[Vec3], k: usize, align_root: bool) -> Result<f64> {
    if pred.len() != gt.len() || k == 0 || pred.len() % k != 0 || pred.is_empty() {
        return Err(Error::dim(format!(
            "cannot compare {} and {} joints in frames of {k}",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.chunks(k).zip(gt.chunks(k)) {
        let (rp, rg) = if align_root { (p[0], g[0]) } else { (Vec3::zeros(), Vec3::zeros()) };
        for (a, b) in p.iter().zip(g) {
            total += ((a - rp) - (b - rg)).norm();
        }
    }
    Ok(total / pred.len() as f64 * 1000.0)
}

/// MPJPE in millimeters between two joint sequences of the same shape.
pub fn mpjpe(pred: &JointSeq, gt: &JointSeq, align_root: bool) -> Result<f64> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(Error::dim(format!(
            "prediction is {} x {}, ground truth {} x {}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    mpjpe_frames(&pred.to_frames().concat(), &gt.to_frames().concat(), gt.joints(), align_root)
}

/// Joints regressed from every frame of a mesh cuboid.
pub fn regress_cuboid(model: &BodyModel, cuboid: &MeshCuboid) -> Result<JointSeq> {
    if cuboid.vertices() != model.num_vertices() {
        return Err(Error::dim(format!(
            "cuboid has {} vertices, model has {}",
            cuboid.vertices(),
            model.num_vertices()
        )));
    }
    let frames = (0..cuboid.frames())
        .map(|t| model.regress_joints(&cuboid.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    JointSeq::from_frames(&frames)
}

/// 64-bit FNV-1a of a string, printed as hex. Used to tie reports to the
/// configuration that produced them.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// One clip to evaluate. `video` groups clips cut from the same sequence;
/// `input`, when given, adds the unsmoothed error and the improvement.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub video: &'a str,
    pub pred: &'a MeshCuboid,
    pub gt: &'a JointSeq,
    pub input: Option<&'a MeshCuboid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub id: String,
    pub video: String,
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub input_mpjpe_mm: Option<f64>,
    /// Input error minus prediction error.
    pub improvement_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub video: String,
    pub clips: usize,
    pub mpjpe_mm: f64,
    pub input_mpjpe_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipEval>,
    /// In order of first appearance.
    pub videos: Vec<VideoEval>,
    /// Frame-weighted mean of the per-clip values.
    pub overall_mm: f64,
    pub input_overall_mm: Option<f64>,
    pub align_root: bool,
    pub fingerprint: String,
    pub seed: u64,
}

fn weighted_mean(values: impl Iterator<Item = (usize, f64)>) -> f64 {
    let (mut total, mut weight) = (0.0, 0usize);
    for (w, v) in values {
        total += w as f64 * v;
        weight += w;
    }
    total / weight.max(1) as f64
}

/// Regresses joints from each prediction and aggregates MPJPE per clip,
/// per video and overall.
pub fn evaluate(items: &[EvalItem], model: &BodyModel, align_root: bool, fingerprint: &str, seed: u64) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut clips = Vec::with_capacity(items.len());
    for item in items {
        let pred = regress_cuboid(model, item.pred)?;
        let mpjpe_mm = mpjpe(&pred, item.gt, align_root)?;
        let input_mpjpe_mm = item
            .input
            .map(|c| mpjpe(&regress_cuboid(model, c)?, item.gt, align_root))
            .transpose()?;
        clips.push(ClipEval {
            id: item.id.to_string(),
            video: item.video.to_string(),
            frames: item.gt.frames(),
            mpjpe_mm,
            input_mpjpe_mm,
            improvement_mm: input_mpjpe_mm.map(|i| i - mpjpe_mm),
        });
    }
    let with_input = clips.iter().all(|c| c.input_mpjpe_mm.is_some());
    let mut names: Vec<&str> = Vec::new();
    for c in &clips {
        if !names.contains(&c.video.as_str()) {
            names.push(&c.video);
        }
    }
    let videos = names
        .iter()
        .map(|&v| {
            let members: Vec<&ClipEval> = clips.iter().filter(|c| c.video == v).collect();
            VideoEval {
                video: v.to_string(),
                clips: members.len(),
                mpjpe_mm: weighted_mean(members.iter().map(|c| (c.frames, c.mpjpe_mm))),
                input_mpjpe_mm: with_input.then(|| {
                    weighted_mean(members.iter().map(|c| (c.frames, c.input_mpjpe_mm.unwrap_or(0.0))))
                }),
            }
        })
        .collect();
    let overall_mm = weighted_mean(clips.iter().map(|c| (c.frames, c.mpjpe_mm)));
    let input_overall_mm =
        with_input.then(|| weighted_mean(clips.iter().map(|c| (c.frames, c.input_mpjpe_mm.unwrap_or(0.0)))));
    Ok(EvalReport {
        clips,
        videos,
        overall_mm,
        input_overall_mm,
        align_root,
        fingerprint: fingerprint.to_string(),
        seed,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// One row per clip, for plotting per-clip improvements.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,video,frames,mpjpe_mm,input_mpjpe_mm,improvement_mm\n");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{},{}",
                c.id,
                c.video,
                c.frames,
                c.mpjpe_mm,
                opt(c.input_mpjpe_mm),
                opt(c.improvement_mm)
            );
        }
        s
    }

    /// Plain-text per-video table with an overall row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "MPJPE (mm), {} alignment, config {}",
            if self.align_root { "root" } else { "no" },
            self.fingerprint
        );
        let _ = writeln!(s, "{:<24} {:>6} {:>10} {:>10}", "video", "clips", "input", "output");
        for v in &self.videos {
            let input = v.input_mpjpe_mm.map_or("-".to_string(), |x| format!("{x:.1}"));
            let _ = writeln!(s, "{:<24} {:>6} {:>10} {:>10.1}", v.video, v.clips, input, v.mpjpe_mm);
        }
        let input = self.input_overall_mm.map_or("-".to_string(), |x| format!("{x:.1}"));
        let _ = writeln!(s, "{:<24} {:>6} {:>10} {:>10.1}", "overall", self.clips.len(), input, self.overall_mm);
        s
    }
}

/// A labelled benchmark clip for smoothing experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSample {
    pub id: String,
    pub video: String,
    pub sample: SmootherSample,
}

/// Smooths every clip and evaluates the result against its ground truth,
/// with the noisy input as the reference column.
pub fn evaluate_smoother(
    params: &crate::smoother::SmootherParams,
    model: &BodyModel,
    clips: &[LabelledSample],
    align_root: bool,
    fingerprint: &str,
    seed: u64,
) -> Result<EvalReport> {
    let preds = clips
        .iter()
        .map(|c| smooth(params, &c.sample.noisy, model))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<EvalItem> = clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| EvalItem {
            id: &c.id,
            video: &c.video,
            pred: p,
            gt: &c.sample.gt,
            input: Some(&c.sample.noisy),
        })
        .collect();
    evaluate(&items, model, align_root, fingerprint, seed)
}

/// One row of an ablation: a smoother configuration, optionally trained
/// and tested on vertex-shuffled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: SmootherConfig,
    pub shuffle_vertices: bool,
    /// Trained for this many times the study's epoch budget.
    pub epoch_factor: usize,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: SmootherConfig) -> Self {
        Self {
            name: name.into(),
            config,
            shuffle_vertices: false,
            epoch_factor: 1,
        }
    }

    pub fn shuffled(mut self) -> Self {
        self.shuffle_vertices = true;
        self
    }

    pub fn with_epoch_factor(mut self, factor: usize) -> Self {
        self.epoch_factor = factor;
        self
    }
}

/// Standard comparison studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    MotionLoss,
    Kernel,
    Layers,
}

impl Study {
    pub fn title(self) -> &'static str {
        match self {
            Study::MotionLoss => "Ablation of the motion loss",
            Study::Kernel => "Ablation of the kernel size",
            Study::Layers => "Ablation of the layer count",
        }
    }

    /// Variants in table order. The 5x3x3 kernel mixes neighbouring vertex
    /// indices, so it runs on vertex-shuffled data where neighbours are
    /// arbitrary.
    pub fn variants(self, base: &SmootherConfig) -> Result<Vec<Variant>> {
        let kernel = |k: [usize; 3]| -> Result<SmootherConfig> {
            let mut c = SmootherConfig::with_kernel(k)?;
            c.layers = base.layers;
            c.channels = base.channels;
            c.loss = base.loss;
            Ok(c)
        };
        Ok(match self {
            Study::MotionLoss => {
                let mut with = *base;
                with.loss.motion_loss = true;
                let mut without = *base;
                without.loss.motion_loss = false;
                vec![Variant::new("with motion loss", with), Variant::new("without motion loss", without)]
            }
            Study::Kernel => vec![
                Variant::new("5x3x3 (shuffled vertices)", kernel([5, 3, 3])?).shuffled(),
                Variant::new("3x1x3", kernel([3, 1, 3])?),
                Variant::new("5x1x1", kernel([5, 1, 1])?),
                Variant::new("5x1x3", kernel([5, 1, 3])?),
            ],
            Study::Layers => [3, 8, 12]
                .into_iter()
                .map(|l| {
                    let mut c = *base;
                    c.layers = l;
                    // the deepest stack gets a second round of training
                    Variant::new(format!("{l} layers"), c).with_epoch_factor(if l == 12 { 2 } else { 1 })
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Held-out MPJPE of the final parameters; `None` if training diverged.
    pub mpjpe_mm: Option<f64>,
    pub status: TrainStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<AblationRun>,
    pub mean_mm: Option<f64>,
    pub std_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub input_mpjpe_mm: f64,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (zero for one value).
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

fn shuffle_samples(samples: &[SmootherSample], order: &[usize]) -> Result<Vec<SmootherSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(SmootherSample {
                noisy: s.noisy.select_items(order)?,
                gt: s.gt.clone(),
            })
        })
        .collect()
}

/// Vertex order used for shuffled variants.
pub fn shuffled_order(num_vertices: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_vertices).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5bff_1e));
    order
}

/// Trains every variant with every seed and reports held-out MPJPE as
/// mean and standard deviation over seeds. A diverged run is recorded and
/// left out of the statistics.
pub fn ablate(
    title: &str,
    model: &BodyModel,
    train: &[SmootherSample],
    test: &[LabelledSample],
    variants: &[Variant],
    seeds: &[u64],
    opts: &TrainOptions,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() || test.is_empty() {
        return Err(Error::invalid("ablation needs variants, seeds and test clips"));
    }
    let input_mpjpe_mm = weighted_mean(test.iter().map(|c| {
        let value = regress_cuboid(model, &c.sample.noisy).and_then(|j| mpjpe(&j, &c.sample.gt, true));
        (c.sample.gt.frames(), value.unwrap_or(f64::NAN))
    }));
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (m, tr, te);
            let (model_v, train_v, test_v) = if variant.shuffle_vertices {
                let order = shuffled_order(model.num_vertices(), seed);
                m = model.permute_vertices(&order)?;
                tr = shuffle_samples(train, &order)?;
                te = test
                    .iter()
                    .map(|c| {
                        Ok(LabelledSample {
                            id: c.id.clone(),
                            video: c.video.clone(),
                            sample: SmootherSample {
                                noisy: c.sample.noisy.select_items(&order)?,
                                gt: c.sample.gt.clone(),
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (&m, tr.as_slice(), te.as_slice())
            } else {
                (model, train, test)
            };
            let run_opts = TrainOptions {
                seed,
                epochs: opts.epochs * variant.epoch_factor,
                eval_every: 0,
                ..*opts
            };
            let trained = train_smoother(variant.config, model_v, train_v, &[], &run_opts)?;
            let mpjpe_mm = match trained.status {
                TrainStatus::Completed => {
                    Some(evaluate_smoother(&trained.params, model_v, test_v, true, "", seed)?.overall_mm)
                }
                TrainStatus::Diverged { .. } => None,
            };
            info!("{title}: {} seed {seed}: {mpjpe_mm:?}", variant.name);
            runs.push(AblationRun {
                seed,
                mpjpe_mm,
                status: trained.status,
            });
        }
        let values: Vec<f64> = runs.iter().filter_map(|r| r.mpjpe_mm).collect();
        let (mean_mm, std_mm) = mean_std(&values);
        rows.push(AblationRow {
            variant: variant.clone(),
            runs,
            mean_mm,
            std_mm,
        });
    }
    Ok(AblationTable {
        title: title.to_string(),
        input_mpjpe_mm,
        epochs: opts.epochs,
        rows,
    })
}

/// Per-seed comparison of two rows: how many seeds have `a` no worse than
/// `b`. Seeds where either run diverged count against `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub a: String,
    pub b: String,
    pub a_not_worse: usize,
    pub seeds: usize,
    /// At least four fifths of the seeds agree.
    pub majority: bool,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn compare(&self, a: &str, b: &str) -> Result<SeedVerdict> {
        let (ra, rb) = match (self.row(a), self.row(b)) {
            (Some(ra), Some(rb)) => (ra, rb),
            _ => return Err(Error::invalid(format!("no rows named {a:?} and {b:?}"))),
        };
        let a_not_worse = ra
            .runs
            .iter()
            .zip(&rb.runs)
            .filter(|(x, y)| matches!((x.mpjpe_mm, y.mpjpe_mm), (Some(p), Some(q)) if p <= q))
            .count();
        let seeds = ra.runs.len().min(rb.runs.len());
        Ok(SeedVerdict {
            a: a.to_string(),
            b: b.to_string(),
            a_not_worse,
            seeds,
            majority: seeds > 0 && 5 * a_not_worse >= 4 * seeds,
        })
    }

    /// Rows are variants, the value column is mean ± std MPJPE over seeds.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds = self.rows.first().map_or(0, |r| r.runs.len());
        let _ = writeln!(s, "{} ({} epochs, {} seeds)", self.title, self.epochs, seeds);
        let _ = writeln!(s, "{:<28} {:>18}", "variant", "MPJPE (mm)");
        let _ = writeln!(s, "{:<28} {:>18.1}", "noisy input", self.input_mpjpe_mm);
        for r in &self.rows {
            let value = match (r.mean_mm, r.std_mm) {
                (Some(m), Some(sd)) => format!("{m:.1} ± {sd:.1}"),
                _ => "diverged".to_string(),
            };
            let diverged = r.runs.iter().filter(|x| x.mpjpe_mm.is_none()).count();
            let note = if diverged > 0 && r.mean_mm.is_some() {
                format!("  ({diverged} diverged)")
            } else {
                String::new()
            };
            let _ = writeln!(s, "{:<28} {:>18}{note}", r.variant.name, value);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, k: usize) -> JointSeq {
        let frames: Vec<Vec<Vec3>> = (0..t)
            .map(|_| (0..k).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
            .collect();
        JointSeq::from_frames(&frames).unwrap()
    }

    /// Double loop over frames and joints with explicit coordinates.
    fn brute_force(p: &JointSeq, g: &JointSeq, align: bool) -> f64 {
        let mut sum = 0.0;
        for t in 0..p.frames() {
            for j in 0..p.joints() {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let (mut a, mut b) = (p.get(t, j)[c], g.get(t, j)[c]);
                    if align {
                        a -= p.get(t, 0)[c];
                        b -= g.get(t, 0)[c];
                    }
                    d2 += (a - b) * (a - b);
                }
                sum += d2.sqrt();
            }
        }
        1000.0 * sum / (p.frames() * p.joints()) as f64
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (a, b) = (random_seq(&mut rng, 4, 5), random_seq(&mut rng, 4, 5));
            for align in [false, true] {
                assert!((mpjpe(&a, &b, align).unwrap() - brute_force(&a, &b, align)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_offset_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_seq(&mut rng, 3, 4);
        let mut frames = gt.to_frames();
        for f in &mut frames {
            f[2].x += 0.010;
        }
        let pred = JointSeq::from_frames(&frames).unwrap();
        // f32 storage rounds the 10 mm offset slightly
        assert!((mpjpe(&pred, &gt, false).unwrap() - 10.0 / 4.0).abs() < 1e-4);
        let one = JointSeq::from_frames(&[vec![Vec3::new(0.01, 0.0, 0.0)]]).unwrap();
        let zero = JointSeq::from_frames(&[vec![Vec3::zeros()]]).unwrap();
        assert!((mpjpe(&one, &zero, false).unwrap() - 10.0).abs() < 1e-6);
        assert_eq!(mpjpe(&gt, &gt, true).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(mpjpe(&random_seq(&mut rng, 3, 4), &random_seq(&mut rng, 2, 4), true).is_err());
        assert!(mpjpe(&random_seq(&mut rng, 3, 4), &random_seq(&mut rng, 3, 5), true).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_translation_invariant(seed in 0u64..1000, t in 1usize..5, k in 1usize..6,
                                               shift in prop::array::uniform3(-2.0f64..2.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_seq(&mut rng, t, k), random_seq(&mut rng, t, k));
            let ab = mpjpe_frames(&a.to_frames().concat(), &b.to_frames().concat(), k, false).unwrap();
            let ba = mpjpe_frames(&b.to_frames().concat(), &a.to_frames().concat(), k, false).unwrap();
            prop_assert_eq!(ab, ba);
            let s = Vec3::from(shift);
            let moved = |x: &JointSeq| x.to_frames().concat().iter().map(|v| v + s).collect::<Vec<_>>();
            let common = mpjpe_frames(&moved(&a), &moved(&b), k, false).unwrap();
            prop_assert!((common - ab).abs() < 1e-9);
            // independent per-frame shifts of one side vanish under root alignment
            let per_frame: Vec<Vec3> = a.to_frames().iter().enumerate()
                .flat_map(|(f, row)| row.iter().map(move |v| v + s * f as f64).collect::<Vec<_>>())
                .collect();
            let aligned = mpjpe_frames(&a.to_frames().concat(), &b.to_frames().concat(), k, true).unwrap();
            let shifted = mpjpe_frames(&per_frame, &b.to_frames().concat(), k, true).unwrap();
            prop_assert!((aligned - shifted).abs() < 1e-9);
        }
    }

    fn clip_set(model: &BodyModel) -> Vec<LabelledSample> {
        use crate::body_model::ShapeParams;
        use crate::synth::{corrupt, gen_clip, MotionSpec, NoiseSpec};
        (0..3)
            .map(|i| {
                let clip = gen_clip(model, &MotionSpec::random(24, 50.0, 100, i).unwrap(), &ShapeParams::zeros(4), 2 + i as usize).unwrap();
                let noise = NoiseSpec { seed: i, ..NoiseSpec::default() };
                LabelledSample {
                    id: format!("clip{i}"),
                    video: format!("video{}", i % 2),
                    sample: SmootherSample {
                        noisy: corrupt(&clip, model, &noise).unwrap().cuboid,
                        gt: clip.joint_seq().unwrap(),
                    },
                }
            })
            .collect()
    }

    #[test]
    fn evaluate_ground_truth_is_zero_and_aggregates() {
        let model = BodyModel::humanoid();
        let set = clip_set(&model);
        let gt_meshes: Vec<MeshCuboid> = (0..3)
            .map(|i| {
                use crate::body_model::ShapeParams;
                use crate::synth::{gen_clip, MotionSpec};
                gen_clip(&model, &MotionSpec::random(24, 50.0, 100, i).unwrap(), &ShapeParams::zeros(4), 2 + i as usize)
                    .unwrap()
                    .cuboid()
                    .unwrap()
            })
            .collect();
        let gts: Vec<JointSeq> = gt_meshes.iter().map(|m| regress_cuboid(&model, m).unwrap()).collect();
        let items: Vec<EvalItem> = set
            .iter()
            .zip(&gt_meshes)
            .zip(&gts)
            .map(|((c, m), g)| EvalItem {
                id: &c.id,
                video: &c.video,
                pred: m,
                gt: g,
                input: None,
            })
            .collect();
        let zero = evaluate(&items, &model, true, "x", 0).unwrap();
        assert!(zero.clips.iter().all(|c| c.mpjpe_mm == 0.0));
        assert_eq!(zero.overall_mm, 0.0);

        let items: Vec<EvalItem> = set
            .iter()
            .map(|c| EvalItem {
                id: &c.id,
                video: &c.video,
                pred: &c.sample.noisy,
                gt: &c.sample.gt,
                input: Some(&c.sample.noisy),
            })
            .collect();
        let r = evaluate(&items, &model, true, "x", 0).unwrap();
        let frames = [2.0, 3.0, 4.0];
        let hand = (0..3).map(|i| frames[i] * r.clips[i].mpjpe_mm).sum::<f64>() / 9.0;
        assert!((r.overall_mm - hand).abs() < 1e-9);
        assert_eq!(r.videos.len(), 2);
        let v0 = (2.0 * r.clips[0].mpjpe_mm + 4.0 * r.clips[2].mpjpe_mm) / 6.0;
        assert!((r.videos[0].mpjpe_mm - v0).abs() < 1e-9);
        assert!(r.clips.iter().all(|c| c.improvement_mm == Some(0.0)));
        assert_eq!(r, evaluate(&items, &model, true, "x", 0).unwrap());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(r.to_text().contains("overall"));
    }

    #[test]
    fn single_cell_ablation_equals_plain_evaluation() {
        let model = BodyModel::humanoid();
        let set = clip_set(&model);
        let train: Vec<SmootherSample> = set.iter().map(|c| c.sample.clone()).collect();
        let opts = TrainOptions {
            epochs: 2,
            ..TrainOptions::default()
        };
        let variant = Variant::new("default", SmootherConfig::default());
        let table = ablate("t", &model, &train, &set, &[variant.clone()], &[5], &opts).unwrap();
        assert_eq!(table.rows.len(), 1);
        let trained = train_smoother(variant.config, &model, &train, &[], &TrainOptions { seed: 5, eval_every: 0, ..opts }).unwrap();
        let plain = evaluate_smoother(&trained.params, &model, &set, true, "", 5).unwrap();
        assert_eq!(table.rows[0].mean_mm, Some(plain.overall_mm));
        assert_eq!(table.rows[0].std_mm, Some(0.0));
        assert!(table.to_text().contains("default"));
    }

    #[test]
    fn shuffled_model_regresses_the_same_joints() {
        let model = BodyModel::humanoid();
        let set = clip_set(&model);
        let order = shuffled_order(model.num_vertices(), 3);
        let shuffled = model.permute_vertices(&order).unwrap();
        let a = regress_cuboid(&model, &set[0].sample.noisy).unwrap();
        let b = regress_cuboid(&shuffled, &set[0].sample.noisy.select_items(&order).unwrap()).unwrap();
        assert!(mpjpe(&a, &b, false).unwrap() < 1e-9);
        assert!(model.permute_vertices(&[0; 602]).is_err());
    }

    #[test]
    fn verdict_counts_seed_majority() {
        let run = |seed, v: Option<f64>| AblationRun {
            seed,
            mpjpe_mm: v,
            status: TrainStatus::Completed,
        };
        let row = |name: &str, vals: [Option<f64>; 5]| AblationRow {
            variant: Variant::new(name, SmootherConfig::default()),
            runs: vals.iter().enumerate().map(|(i, v)| run(i as u64, *v)).collect(),
            mean_mm: None,
            std_mm: None,
        };
        let table = AblationTable {
            title: "t".into(),
            input_mpjpe_mm: 0.0,
            epochs: 0,
            rows: vec![
                row("a", [Some(1.0), Some(2.0), Some(3.0), Some(4.0), None]),
                row("b", [Some(1.0), Some(3.0), Some(4.0), Some(5.0), Some(1.0)]),
            ],
        };
        let v = table.compare("a", "b").unwrap();
        assert_eq!((v.a_not_worse, v.seeds, v.majority), (4, 5, true));
        assert!(!table.compare("b", "a").unwrap().majority);
        assert!(table.compare("a", "c").is_err());
    }
}
