//! The whole pipeline on synthetic data: a noisy source performance is
//! smoothed, its motion carried over to another body by the transfer
//! network, and the result compared with the skeleton-aware baseline.
//!
//! Training is kept short so this runs in a couple of minutes; the numbers
//! improve with the CLI defaults.

use mesh_imitate::body_model::{BodyModel, ShapeParams};
use mesh_imitate::cli::{mean_vertex_error_mm, root_aligned_error_mm};
use mesh_imitate::cuboid::MeshCuboid;
use mesh_imitate::sapd::{sapd_imitate, BindConfig, SapdRig};
use mesh_imitate::smoother::{train_smoother, SmootherConfig, TrainOptions};
use mesh_imitate::synth::{corrupt, gen_clip, generate_benchmark, BenchmarkConfig, MotionSpec, NoiseSpec};
use mesh_imitate::transfer::{imitate, make_transfer_pairs, train_transfer, TransferConfig, TransferDataSpec, TransferTrainOptions};

fn main() -> mesh_imitate::error::Result<()> {
    let model = BodyModel::humanoid();

    let bench = generate_benchmark(
        &model,
        &BenchmarkConfig {
            train_clips: 16,
            test_clips: 4,
            ..BenchmarkConfig::default()
        },
    )?;
    let train = bench.train.iter().map(|c| c.sample()).collect::<Result<Vec<_>, _>>()?;
    let smoother = train_smoother(
        SmootherConfig::default(),
        &model,
        &train,
        &[],
        &TrainOptions {
            epochs: 40,
            ..TrainOptions::default()
        },
    )?
    .params;

    let pairs = make_transfer_pairs(
        &model,
        &TransferDataSpec {
            identities: 4,
            poses: 40,
            ..TransferDataSpec::default()
        },
    )?;
    let transfer = train_transfer(
        TransferConfig::default(),
        &pairs,
        &[],
        &TransferTrainOptions {
            epochs: 10,
            ..TransferTrainOptions::default()
        },
    )?
    .params;

    // source performer and target body
    let motion = MotionSpec::random(model.num_joints(), 50.0, 400, 42)?;
    let source_shape = ShapeParams::new(vec![-0.6, 0.2, 0.4, -0.1]);
    let target_shape = ShapeParams::new(vec![0.9, -0.4, 0.1, 0.3]);
    let clip = gen_clip(&model, &motion, &source_shape, 16)?;
    let noisy = corrupt(&clip, &model, &NoiseSpec::default())?.cuboid;
    let identity = model.shape_mesh(&target_shape)?;
    let oracle = MeshCuboid::from_frames(&gen_clip(&model, &motion, &target_shape, 16)?.vertices)?;

    let ours = imitate(&smoother, &transfer, &model, &noisy, &identity)?;
    let rig = SapdRig::from_body(&model, identity, &BindConfig::default())?;
    let baseline = sapd_imitate(&noisy, &rig, &model)?;
    // the identity starts at the origin while the oracle starts wherever the
    // performer was, so the root-aligned column is the one to compare
    println!("                      raw      roots aligned");
    for (name, out) in [("smoother + transfer", &ours), ("SA-PD on noisy input", &baseline)] {
        println!(
            "{name:20}  {:6.1} mm  {:6.1} mm",
            mean_vertex_error_mm(out, &oracle)?,
            root_aligned_error_mm(&model, out, &oracle)?
        );
    }
    Ok(())
}
