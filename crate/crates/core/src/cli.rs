//! Command-line front end.
//!
//! Settings for each command start from defaults, are overlaid by an
//! optional JSON config file and then by explicit flags. Unknown keys and
//! invalid values are usage errors. Every command writes `run.json` into
//! its output directory before doing any work.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::body_model::{BodyModel, ShapeParams};
use crate::cuboid::{unflatten, MeshCuboid};
use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::metrics::{ablate, evaluate, fingerprint, AblationTable, EvalItem, LabelledSample, SeedVerdict, Study};
use crate::obj::{read_obj, write_obj};
use crate::optim::{AdamConfig, GradCheckReport, TrainStatus};
use crate::sapd::{sapd_imitate, BindConfig, SapdRig};
use crate::smoother::{grad_check_smoother, smooth, train_smoother, CheckpointMeta, SmootherConfig, SmootherParams, SmootherSample, TrainOptions};
use crate::synth::{corrupt, gen_clip, make_benchmark, BenchmarkConfig, LoadedBenchmark, LoadedClip, MotionSpec, NoiseSpec, Split};
use crate::transfer::{
    evaluate_transfer, grad_check_transfer, imitate, make_transfer_pairs, train_transfer, transfer, TransferConfig, TransferDataSpec, TransferMeta,
    TransferPair, TransferParams, TransferTrainOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mesh-imitate", version, about = "Smooth reconstructed body-mesh sequences and transfer their motion to new identities")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// JSON settings for the command; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark directory.
    GenData(GenDataArgs),
    /// Train the mesh-sequence smoother on a benchmark.
    TrainSmoother(TrainSmootherArgs),
    /// Train the pose-transfer network on synthetic identity/pose pairs.
    TrainTransfer(TrainTransferArgs),
    /// Smooth one mesh cuboid with a trained smoother.
    Smooth(SmoothArgs),
    /// Pose one identity mesh like one pose mesh.
    Transfer(TransferArgs),
    /// Smooth a source sequence and carry its motion over to an identity.
    Imitate(ImitateArgs),
    /// Report MPJPE on a benchmark split.
    Evaluate(EvaluateArgs),
    /// Train smoother variants over several seeds and tabulate them.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write every frame of a mesh cuboid as an OBJ file.
    ExportObj(ExportObjArgs),
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    match parts.as_slice() {
        [a, b, c] => {
            let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
            Ok([p(a)?, p(b)?, p(c)?])
        }
        _ => Err(format!("expected three sizes like 5x1x3, got {s:?}")),
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
    #[arg(long)]
    train_subjects: Option<usize>,
    #[arg(long)]
    test_subjects: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    source_frames: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Frames per clip.
    #[arg(long = "T", visible_alias = "clip-len")]
    clip_len: Option<usize>,
    #[arg(long)]
    shape_std: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    outlier_prob: Option<f64>,
    #[arg(long)]
    outlier_std: Option<f64>,
    #[arg(long)]
    limb_std: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainSmootherArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per clip; must match the benchmark.
    #[arg(long = "T")]
    clip_len: Option<usize>,
    /// Kernel extent over time, vertex and coordinate, e.g. 5x1x3.
    #[arg(long, value_parser = parse_triple)]
    kernel: Option<[usize; 3]>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    no_motion_loss: bool,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainTransferArgs {
    #[arg(long)]
    out: PathBuf,
    /// Body model (MBDY); the built-in humanoid when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    poses: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct SmoothArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    smoother: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    transfer: PathBuf,
    /// OBJ mesh supplying the pose.
    #[arg(long)]
    pose: PathBuf,
    /// OBJ mesh supplying the body.
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImitateArgs {
    /// Source mesh cuboid (MCUB) in the body model's topology.
    #[arg(long)]
    source: PathBuf,
    /// Identity mesh (OBJ).
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    smoother: Option<PathBuf>,
    #[arg(long)]
    transfer: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// `sapd` animates the identity by skeleton retargeting instead.
    #[arg(long)]
    baseline: Option<String>,
    /// Ground-truth cuboid of the identity to score the output against.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    smoother: Option<PathBuf>,
    /// smoother, input or ground-truth.
    #[arg(long)]
    predictions: Option<String>,
    /// train or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    no_align_root: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Clips smoothed in parallel; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// motion-loss, kernel or layers.
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use only the first this many training clips.
    #[arg(long)]
    train_clips: Option<usize>,
    /// Use only the first this many test clips.
    #[arg(long)]
    test_clips: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// smoother, transfer or all.
    #[arg(long)]
    module: Option<String>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportObjArgs {
    #[arg(long)]
    input: PathBuf,
    /// Body model supplying the faces; the built-in humanoid by default.
    #[arg(long)]
    model: Option<PathBuf>,
    /// OBJ file supplying the faces instead of a body model.
    #[arg(long, conflicts_with = "model")]
    faces: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSmootherSettings {
    pub smoother: SmootherConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub clip_len: usize,
}

impl Default for TrainSmootherSettings {
    fn default() -> Self {
        let opts = TrainOptions::default();
        Self {
            smoother: SmootherConfig::default(),
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            adam: opts.adam,
            seed: opts.seed,
            eval_every: 10,
            clip_len: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTransferSettings {
    pub transfer: TransferConfig,
    pub data: TransferDataSpec,
    pub heldout: TransferDataSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainTransferSettings {
    fn default() -> Self {
        let opts = TransferTrainOptions::default();
        Self {
            transfer: TransferConfig::default(),
            data: TransferDataSpec::default(),
            heldout: TransferDataSpec {
                identities: 4,
                poses: 25,
                seed: 911,
                ..TransferDataSpec::default()
            },
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            adam: opts.adam,
            seed: opts.seed,
            eval_every: opts.eval_every,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    Sapd,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImitateSettings {
    pub baseline: Baseline,
    pub bind: BindConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictions {
    #[default]
    Smoother,
    Input,
    GroundTruth,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSettings {
    pub predictions: Predictions,
    pub split: Split,
    pub align_root: bool,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            predictions: Predictions::Smoother,
            split: Split::Test,
            align_root: true,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSettings {
    pub study: Study,
    pub seeds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub train_clips: Option<usize>,
    pub test_clips: Option<usize>,
    /// Configuration the study's variants are derived from.
    pub base: SmootherConfig,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            study: Study::MotionLoss,
            seeds: 5,
            epochs: 200,
            batch_size: 4,
            adam: AdamConfig::default(),
            train_clips: None,
            test_clips: None,
            base: SmootherConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradModule {
    #[default]
    All,
    Smoother,
    Transfer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    pub module: GradModule,
    pub probes: usize,
    pub seeds: usize,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            module: GradModule::All,
            probes: 20,
            seeds: 5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoSettings {}

/// Written to every output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunMeta<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub settings: Value,
    pub paths: BTreeMap<&'a str, String>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Flag values keyed by dotted settings path; absent flags are skipped.
#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn set<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut node = &mut self.0;
            let mut keys = path.split('.').peekable();
            while let Some(key) = keys.next() {
                if keys.peek().is_none() {
                    node.insert(key.to_string(), v);
                    break;
                }
                node = node
                    .entry(key)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("settings paths nest objects");
            }
        }
        self
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Defaults, then the config file, then flags.
fn resolve<T: Serialize + DeserializeOwned + Default>(config: Option<&Path>, flags: Overrides) -> Outcome<(T, Value)> {
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::Usage(format!("config {} must hold a JSON object", path.display())));
        }
        merge(&mut value, file);
    }
    merge(&mut value, Value::Object(flags.0));
    let settings: T = serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid settings: {e}")))?;
    let canonical = serde_json::to_value(&settings).expect("settings serialize");
    Ok((settings, canonical))
}

fn usage_check(result: Result<()>) -> Outcome {
    result.map_err(|e| Failure::Usage(e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_meta(out: &Path, command: &str, settings: &Value, paths: &[(&'static str, &Path)]) -> Result<()> {
    create_dir(out)?;
    let meta = RunMeta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        settings: settings.clone(),
        paths: paths.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
    };
    write_json(&out.join("run.json"), &meta)
}

fn load_model(path: Option<&Path>) -> Result<BodyModel> {
    match path {
        Some(p) => BodyModel::load(p),
        None => Ok(BodyModel::humanoid()),
    }
}

fn write_frames(out: &Path, cuboid: &MeshCuboid, faces: &[[u32; 3]]) -> Result<()> {
    for (t, mesh) in unflatten(cuboid, faces)?.iter().enumerate() {
        write_obj(&out.join(format!("frame_{t:04}.obj")), mesh)?;
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match dispatch(cli.command, cli.config.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command, config: Option<&Path>) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a, config),
        Command::TrainSmoother(a) => cmd_train_smoother(a, config),
        Command::TrainTransfer(a) => cmd_train_transfer(a, config),
        Command::Smooth(a) => cmd_smooth(a, config),
        Command::Transfer(a) => cmd_transfer(a, config),
        Command::Imitate(a) => cmd_imitate(a, config),
        Command::Evaluate(a) => cmd_evaluate(a, config),
        Command::Ablate(a) => cmd_ablate(a, config),
        Command::Gradcheck(a) => cmd_gradcheck(a, config),
        Command::ExportObj(a) => cmd_export_obj(a, config),
    }
}

fn gen_data(a: GenDataArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("seed", a.seed)
        .set("train_clips", a.train_clips)
        .set("test_clips", a.test_clips)
        .set("train_subjects", a.train_subjects)
        .set("test_subjects", a.test_subjects)
        .set("actions", a.actions)
        .set("source_frames", a.source_frames)
        .set("stride", a.stride)
        .set("clip_len", a.clip_len)
        .set("shape_std", a.shape_std)
        .set("noise.jitter_std", a.jitter)
        .set("noise.drift", a.drift)
        .set("noise.outlier_prob", a.outlier_prob)
        .set("noise.outlier_std", a.outlier_std)
        .set("noise.limb_std", a.limb_std);
    let (cfg, value): (BenchmarkConfig, _) = resolve(config, f)?;
    usage_check(cfg.validate())?;
    write_run_meta(&a.out, "gen-data", &value, &[("out", &a.out)])?;
    let bench = make_benchmark(&BodyModel::humanoid(), &cfg, &a.out)?;
    let m = &bench.manifest;
    println!(
        "wrote {} train and {} test clips to {}; input MPJPE train {:.1} mm, test {:.1} mm",
        m.train.len(),
        m.test.len(),
        a.out.display(),
        m.reference_input_mpjpe_mm.train,
        m.reference_input_mpjpe_mm.test
    );
    Ok(())
}

fn cmd_train_smoother(a: TrainSmootherArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("adam.lr", a.lr)
        .set("seed", a.seed)
        .set("clip_len", a.clip_len)
        .set("smoother.kernel", a.kernel)
        .set("smoother.padding", a.kernel.map(|k| k.map(|x| x / 2)))
        .set("smoother.layers", a.layers)
        .set("smoother.channels", a.channels)
        .set("smoother.loss.motion_loss", a.no_motion_loss.then_some(false))
        .set("eval_every", a.eval_every);
    let (s, value): (TrainSmootherSettings, _) = resolve(config, f)?;
    usage_check(s.smoother.validate())?;
    usage_check(s.adam.validate())?;
    write_run_meta(&a.out, "train-smoother", &value, &[("bench", &a.bench), ("out", &a.out)])?;
    let bench = LoadedBenchmark::load(&a.bench)?;
    if bench.manifest.config.clip_len != s.clip_len {
        return Err(Error::invalid(format!(
            "benchmark clips have {} frames, settings ask for T = {}",
            bench.manifest.config.clip_len, s.clip_len
        ))
        .into());
    }
    let opts = TrainOptions {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: s.adam,
        seed: s.seed,
        eval_every: s.eval_every,
    };
    let trained = train_smoother(s.smoother, &bench.model, &bench.samples(Split::Train), &bench.samples(Split::Test), &opts)?;
    let ckpt = a.out.join("smoother.mprm");
    let meta = CheckpointMeta {
        config: s.smoother,
        seed: s.seed,
        epochs: s.epochs,
        adam: s.adam,
        batch_size: s.batch_size,
        num_joints: bench.model.num_joints(),
    };
    trained.params.save(&ckpt, &meta)?;
    write_json(
        &a.out.join("train_log.json"),
        &serde_json::json!({ "status": trained.status, "log": trained.log }),
    )?;
    if let TrainStatus::Diverged { epoch, reason } = trained.status {
        return Err(Error::Diverged { epoch, msg: reason }.into());
    }
    let last = trained.log.iter().rev().find_map(|l| l.heldout_mpjpe_mm);
    println!(
        "saved {} ({} epochs); held-out MPJPE {} (input {:.1} mm)",
        ckpt.display(),
        s.epochs,
        last.map_or("not measured".into(), |v| format!("{v:.1} mm")),
        bench.manifest.reference_input_mpjpe_mm.test
    );
    Ok(())
}

fn cmd_train_transfer(a: TrainTransferArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("adam.lr", a.lr)
        .set("seed", a.seed)
        .set("data.identities", a.identities)
        .set("data.poses", a.poses)
        .set("transfer.latent", a.latent)
        .set("eval_every", a.eval_every);
    let (s, value): (TrainTransferSettings, _) = resolve(config, f)?;
    usage_check(s.transfer.validate())?;
    usage_check(s.adam.validate())?;
    let mut paths = vec![("out", a.out.as_path())];
    if let Some(m) = &a.model {
        paths.push(("model", m));
    }
    write_run_meta(&a.out, "train-transfer", &value, &paths)?;
    let model = load_model(a.model.as_deref())?;
    let train = make_transfer_pairs(&model, &s.data)?;
    let heldout = make_transfer_pairs(&model, &s.heldout)?;
    let opts = TransferTrainOptions {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: s.adam,
        seed: s.seed,
        eval_every: s.eval_every,
    };
    let trained = train_transfer(s.transfer, &train, &heldout, &opts)?;
    let ckpt = a.out.join("transfer.mprm");
    let meta = TransferMeta {
        config: s.transfer,
        seed: s.seed,
        epochs: s.epochs,
        adam: s.adam,
        batch_size: s.batch_size,
        data: s.data,
    };
    trained.params.save(&ckpt, &meta)?;
    write_json(
        &a.out.join("train_log.json"),
        &serde_json::json!({ "status": trained.status, "log": trained.log }),
    )?;
    if let TrainStatus::Diverged { epoch, reason } = trained.status {
        return Err(Error::Diverged { epoch, msg: reason }.into());
    }
    let eval = evaluate_transfer(&trained.params, &heldout)?;
    write_json(&a.out.join("eval.json"), &eval)?;
    println!(
        "saved {}; held-out vertex error {:.1} mm (copying the identity: {:.1} mm)",
        ckpt.display(),
        eval.mean_vertex_error_mm,
        eval.copy_identity_mm
    );
    Ok(())
}

fn cmd_smooth(a: SmoothArgs, config: Option<&Path>) -> Outcome {
    let (_, value): (NoSettings, _) = resolve(config, Overrides::default())?;
    let mut paths = vec![("input", a.input.as_path()), ("smoother", &a.smoother), ("out", &a.out)];
    if let Some(m) = &a.model {
        paths.push(("model", m));
    }
    write_run_meta(&a.out, "smooth", &value, &paths)?;
    let model = load_model(a.model.as_deref())?;
    let (params, _) = SmootherParams::load(&a.smoother)?;
    let input = MeshCuboid::read(&a.input)?;
    let out = smooth(&params, &input, &model)?;
    let path = a.out.join("smoothed.mcub");
    out.write(&path)?;
    println!("wrote {} ({} frames)", path.display(), out.frames());
    Ok(())
}

fn cmd_transfer(a: TransferArgs, config: Option<&Path>) -> Outcome {
    let (_, value): (NoSettings, _) = resolve(config, Overrides::default())?;
    write_run_meta(
        &a.out,
        "transfer",
        &value,
        &[("transfer", &a.transfer), ("pose", &a.pose), ("identity", &a.identity), ("out", &a.out)],
    )?;
    let (params, _) = TransferParams::load(&a.transfer)?;
    let pair = TransferPair {
        pose: read_obj(&a.pose)?.vertices,
        identity: read_obj(&a.identity)?,
        target: None,
    };
    let mesh = transfer(&params, &pair)?;
    let path = a.out.join("transferred.obj");
    write_obj(&path, &mesh)?;
    println!("wrote {} ({} vertices)", path.display(), mesh.len());
    Ok(())
}

/// Mean per-vertex distance between two cuboids of equal shape, in mm.
pub fn mean_vertex_error_mm(a: &MeshCuboid, b: &MeshCuboid) -> Result<f64> {
    if a.frames() != b.frames() || a.vertices() != b.vertices() {
        return Err(Error::dim(format!(
            "cuboids are {}x{} and {}x{}",
            a.frames(),
            a.vertices(),
            b.frames(),
            b.vertices()
        )));
    }
    let total: f64 = (0..a.frames())
        .flat_map(|t| (0..a.vertices()).map(move |v| (t, v)))
        .map(|(t, v)| (a.get(t, v) - b.get(t, v)).norm())
        .sum();
    Ok(total / (a.frames() * a.vertices()).max(1) as f64 * 1000.0)
}

/// As [`mean_vertex_error_mm`] after moving each frame of `a` so its
/// regressed root joint coincides with that of `b`. Both cuboids must be
/// in `model`'s topology.
pub fn root_aligned_error_mm(model: &BodyModel, a: &MeshCuboid, b: &MeshCuboid) -> Result<f64> {
    mean_vertex_error_mm(a, b)?;
    let frames = (0..a.frames())
        .map(|t| {
            let (fa, fb) = (a.frame(t), b.frame(t));
            let shift = model.regress_joints(&fb)?[0] - model.regress_joints(&fa)?[0];
            Ok(fa.into_iter().map(|v| v + shift).collect())
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    mean_vertex_error_mm(&MeshCuboid::from_frames(&frames)?, b)
}

fn cmd_imitate(a: ImitateArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("baseline", a.baseline.clone());
    let (s, value): (ImitateSettings, _) = resolve(config, f)?;
    if s.baseline == Baseline::None && (a.smoother.is_none() || a.transfer.is_none()) {
        return Err(Failure::Usage("imitate needs --smoother and --transfer (or --baseline sapd)".into()));
    }
    let mut paths = vec![("source", a.source.as_path()), ("identity", &a.identity), ("out", &a.out)];
    for (k, p) in [("smoother", &a.smoother), ("transfer", &a.transfer), ("model", &a.model), ("target", &a.target)] {
        if let Some(p) = p {
            paths.push((k, p));
        }
    }
    write_run_meta(&a.out, "imitate", &value, &paths)?;
    let model = load_model(a.model.as_deref())?;
    let source = MeshCuboid::read(&a.source)?;
    let identity: Mesh = read_obj(&a.identity)?;
    let smoother = a.smoother.as_deref().map(SmootherParams::load).transpose()?.map(|(p, _)| p);
    let output = match s.baseline {
        Baseline::None => {
            let (tp, _) = TransferParams::load(a.transfer.as_deref().expect("checked above"))?;
            imitate(smoother.as_ref().expect("checked above"), &tp, &model, &source, &identity)?
        }
        Baseline::Sapd => {
            if identity.len() != model.num_vertices() {
                return Err(Error::dim(format!(
                    "SA-PD needs the identity in the body model's topology ({} vertices), got {}",
                    model.num_vertices(),
                    identity.len()
                ))
                .into());
            }
            let smoothed = match &smoother {
                Some(p) => smooth(p, &source, &model)?,
                None => source.clone(),
            };
            let rig = SapdRig::from_body(&model, identity.clone(), &s.bind)?;
            sapd_imitate(&smoothed, &rig, &model)?
        }
    };
    output.write(&a.out.join("output.mcub"))?;
    write_frames(&a.out, &output, &identity.faces)?;
    if let Some(t) = &a.target {
        let target = MeshCuboid::read(t)?;
        let err = mean_vertex_error_mm(&output, &target)?;
        let aligned = if output.vertices() == model.num_vertices() {
            Some(root_aligned_error_mm(&model, &output, &target)?)
        } else {
            None
        };
        write_json(
            &a.out.join("eval.json"),
            &serde_json::json!({ "mean_vertex_error_mm": err, "root_aligned_error_mm": aligned }),
        )?;
        println!("mean vertex error against the target: {err:.1} mm");
        if let Some(v) = aligned {
            println!("with roots aligned per frame: {v:.1} mm");
        }
    }
    println!("wrote {} frames to {}", output.frames(), a.out.display());
    Ok(())
}

fn clip_video(c: &LoadedClip) -> String {
    format!("s{}/a{}", c.entry.subject, c.entry.action)
}

fn cmd_evaluate(a: EvaluateArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("predictions", a.predictions.clone())
        .set("split", a.split.clone())
        .set("align_root", a.no_align_root.then_some(false))
        .set("seed", a.seed)
        .set("jobs", a.jobs);
    let (s, value): (EvaluateSettings, _) = resolve(config, f)?;
    if s.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    if s.predictions == Predictions::Smoother && a.smoother.is_none() {
        return Err(Failure::Usage("evaluating smoother predictions needs --smoother".into()));
    }
    let mut paths = vec![("bench", a.bench.as_path()), ("out", &a.out)];
    if let Some(p) = &a.smoother {
        paths.push(("smoother", p));
    }
    write_run_meta(&a.out, "evaluate", &value, &paths)?;
    let bench = LoadedBenchmark::load(&a.bench)?;
    let clips = match s.split {
        Split::Train => &bench.train,
        Split::Test => &bench.test,
    };
    let preds: Vec<MeshCuboid> = match s.predictions {
        Predictions::Smoother => {
            let (params, _) = SmootherParams::load(a.smoother.as_deref().expect("checked above"))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(s.jobs)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            // collect keeps clip order whatever the thread count
            pool.install(|| clips.par_iter().map(|c| smooth(&params, &c.noisy, &bench.model)).collect::<Result<_>>())?
        }
        Predictions::Input => clips.iter().map(|c| c.noisy.clone()).collect(),
        Predictions::GroundTruth => clips.iter().map(|c| c.gt_cuboid.clone()).collect(),
    };
    let videos: Vec<String> = clips.iter().map(clip_video).collect();
    let items: Vec<EvalItem> = clips
        .iter()
        .zip(&preds)
        .zip(&videos)
        .map(|((c, p), v)| EvalItem {
            id: &c.entry.clip.source_id,
            video: v,
            pred: p,
            gt: &c.gt_joints,
            input: Some(&c.noisy),
        })
        .collect();
    let fp = fingerprint(&serde_json::to_string(&bench.manifest).map_err(Error::from)?);
    let report = evaluate(&items, &bench.model, s.align_root, &fp, s.seed)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_text(&a.out.join("report.txt"), &report.to_text())?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

/// The comparisons each study is read by: the first row should be no worse
/// than the second in most seeds.
pub fn study_verdicts(study: Study, table: &AblationTable) -> Result<Vec<SeedVerdict>> {
    let pairs: &[(&str, &str)] = match study {
        Study::MotionLoss => &[("with motion loss", "without motion loss")],
        Study::Kernel => &[("5x1x3", "5x3x3 (shuffled vertices)")],
        Study::Layers => &[("8 layers", "3 layers"), ("8 layers", "12 layers")],
    };
    pairs.iter().map(|(a, b)| table.compare(a, b)).collect()
}

pub fn verdict_line(v: &SeedVerdict) -> String {
    format!(
        "{} no worse than {} in {}/{} seeds: {}",
        v.a,
        v.b,
        v.a_not_worse,
        v.seeds,
        if v.majority { "majority" } else { "no majority" }
    )
}

fn labelled(clips: &[LoadedClip]) -> Vec<LabelledSample> {
    clips
        .iter()
        .map(|c| LabelledSample {
            id: c.entry.clip.source_id.clone(),
            video: clip_video(c),
            sample: c.sample(),
        })
        .collect()
}

fn cmd_ablate(a: AblateArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("study", a.study.clone())
        .set("seeds", a.seeds)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("adam.lr", a.lr)
        .set("train_clips", a.train_clips)
        .set("test_clips", a.test_clips);
    let (s, value): (AblateSettings, _) = resolve(config, f)?;
    usage_check(s.base.validate())?;
    usage_check(s.adam.validate())?;
    if s.seeds == 0 {
        return Err(Failure::Usage("ablation needs at least one seed".into()));
    }
    write_run_meta(&a.out, "ablate", &value, &[("bench", &a.bench), ("out", &a.out)])?;
    let bench = LoadedBenchmark::load(&a.bench)?;
    let ntrain = s.train_clips.unwrap_or(bench.train.len()).min(bench.train.len());
    let ntest = s.test_clips.unwrap_or(bench.test.len()).min(bench.test.len());
    let train: Vec<SmootherSample> = bench.train[..ntrain].iter().map(LoadedClip::sample).collect();
    let test = labelled(&bench.test[..ntest]);
    let variants = s.study.variants(&s.base)?;
    let seeds: Vec<u64> = (0..s.seeds as u64).collect();
    let opts = TrainOptions {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: s.adam,
        seed: 0,
        eval_every: 0,
    };
    info!("ablation {:?}: {} variants x {} seeds", s.study, variants.len(), seeds.len());
    let table = ablate(s.study.title(), &bench.model, &train, &test, &variants, &seeds, &opts)?;
    let verdicts = study_verdicts(s.study, &table)?;
    write_json(&a.out.join("table.json"), &serde_json::json!({ "table": table, "verdicts": verdicts }))?;
    let mut text = table.to_text();
    for v in &verdicts {
        text.push_str(&verdict_line(v));
        text.push('\n');
    }
    write_text(&a.out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Gradient check of the default smoother on one short noisy clip, with
/// the zero-initialized last layer perturbed so every layer gets gradient.
///
/// Leaky ReLU kinks make central differences wrong whenever a probe step
/// carries a pre-activation across zero; a small check problem keeps those
/// crossings rare.
pub fn smoother_gradcheck(model: &BodyModel, seed: u64, probes: usize) -> Result<GradCheckReport> {
    let motion = MotionSpec::random(model.num_joints(), 50.0, 8, seed)?;
    let clip = gen_clip(model, &motion, &ShapeParams::zeros(model.num_shapes()), 4)?;
    let noise = NoiseSpec {
        seed,
        ..NoiseSpec::default()
    };
    let sample = SmootherSample {
        noisy: corrupt(&clip, model, &noise)?.cuboid,
        gt: clip.joint_seq()?,
    };
    let mut params = SmootherParams::init(SmootherConfig::default(), seed)?;
    params.perturb_final_layer(0.1, seed + 1);
    grad_check_smoother(&mut params, model, std::slice::from_ref(&sample), probes, seed)
}

/// Restricts a pair's identity (and target) to the `size` vertices nearest
/// one of its vertices, keeping the faces among them.
pub fn identity_patch(pair: &TransferPair, centre: usize, size: usize) -> Result<TransferPair> {
    let verts = &pair.identity.vertices;
    let c = *verts
        .get(centre)
        .ok_or_else(|| Error::invalid(format!("patch centre {centre} outside {} vertices", verts.len())))?;
    let mut order: Vec<usize> = (0..verts.len()).collect();
    order.sort_by(|&a, &b| (verts[a] - c).norm().total_cmp(&(verts[b] - c).norm()).then(a.cmp(&b)));
    order.truncate(size.max(1));
    let mut remap = vec![u32::MAX; verts.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let faces = pair
        .identity
        .faces
        .iter()
        .filter_map(|f| {
            let g = f.map(|i| remap[i as usize]);
            g.iter().all(|&i| i != u32::MAX).then_some(g)
        })
        .collect();
    Ok(TransferPair {
        pose: pair.pose.clone(),
        identity: Mesh {
            vertices: order.iter().map(|&i| verts[i]).collect(),
            faces,
        },
        target: pair.target.as_ref().map(|t| order.iter().map(|&i| t[i]).collect()),
    })
}

/// Gradient check of the default transfer network on a patch of one
/// body-model pair, with the zero-initialized head perturbed.
pub fn transfer_gradcheck(model: &BodyModel, seed: u64, probes: usize) -> Result<GradCheckReport> {
    let pairs = make_transfer_pairs(
        model,
        &TransferDataSpec {
            identities: 1,
            poses: 1,
            seed,
            ..TransferDataSpec::default()
        },
    )?;
    let centre = (seed as usize * 97) % pairs[0].identity.len();
    let patch = identity_patch(&pairs[0], centre, 48)?;
    let mut params = TransferParams::init(TransferConfig::default(), seed)?;
    params.perturb_head(0.1, seed + 1);
    grad_check_transfer(&params, &[patch], probes, seed)
}

fn cmd_gradcheck(a: GradcheckArgs, config: Option<&Path>) -> Outcome {
    let mut f = Overrides::default();
    f.set("module", a.module.clone())
        .set("probes", a.probes)
        .set("seeds", a.seeds)
        .set("tolerance", a.tolerance);
    let (s, value): (GradcheckSettings, _) = resolve(config, f)?;
    if s.probes == 0 || s.seeds == 0 {
        return Err(Failure::Usage("gradient check needs probes and seeds".into()));
    }
    if let Some(out) = &a.out {
        write_run_meta(out, "gradcheck", &value, &[("out", out)])?;
    }
    let model = BodyModel::humanoid();
    let mut results = Vec::new();
    for seed in 0..s.seeds as u64 {
        if matches!(s.module, GradModule::All | GradModule::Smoother) {
            results.push(("smoother", seed, smoother_gradcheck(&model, seed, s.probes)?));
        }
        if matches!(s.module, GradModule::All | GradModule::Transfer) {
            results.push(("transfer", seed, transfer_gradcheck(&model, seed, s.probes)?));
        }
    }
    let mut worst: f64 = 0.0;
    for (module, seed, r) in &results {
        println!("{module} seed {seed}: max relative error {:.3e} over {} probes", r.max_rel_error, r.probes.len());
        worst = worst.max(r.max_rel_error);
    }
    if let Some(out) = &a.out {
        let json: Vec<Value> = results
            .iter()
            .map(|(m, seed, r)| serde_json::json!({ "module": m, "seed": seed, "report": r }))
            .collect();
        write_json(&out.join("gradcheck.json"), &json)?;
    }
    if worst >= s.tolerance {
        return Err(Error::invalid(format!("gradient check failed: {worst:.3e} >= {:.1e}", s.tolerance)).into());
    }
    println!("all gradients within {:.1e}", s.tolerance);
    Ok(())
}

fn cmd_export_obj(a: ExportObjArgs, config: Option<&Path>) -> Outcome {
    let (_, value): (NoSettings, _) = resolve(config, Overrides::default())?;
    let mut paths = vec![("input", a.input.as_path()), ("out", &a.out)];
    for (k, p) in [("model", &a.model), ("faces", &a.faces)] {
        if let Some(p) = p {
            paths.push((k, p));
        }
    }
    write_run_meta(&a.out, "export-obj", &value, &paths)?;
    let cuboid = MeshCuboid::read(&a.input)?;
    let faces = match &a.faces {
        Some(p) => read_obj(p)?.faces,
        None => load_model(a.model.as_deref())?.faces().to_vec(),
    };
    write_frames(&a.out, &cuboid, &faces)?;
    println!("wrote {} frames to {}", cuboid.frames(), a.out.display());
    Ok(())
}
