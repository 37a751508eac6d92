//! Train the pose-transfer network briefly and pose a new body like a
//! pose mesh from a different body.

use mesh_imitate::body_model::{BodyModel, PoseParams, ShapeParams};
use mesh_imitate::geometry::Vec3;
use mesh_imitate::transfer::{
    evaluate_transfer, make_transfer_pairs, train_transfer, transfer, TransferConfig, TransferDataSpec, TransferPair, TransferTrainOptions,
};

fn main() -> mesh_imitate::error::Result<()> {
    let model = BodyModel::humanoid();
    let train = make_transfer_pairs(
        &model,
        &TransferDataSpec {
            identities: 4,
            poses: 40,
            ..TransferDataSpec::default()
        },
    )?;
    let heldout = make_transfer_pairs(
        &model,
        &TransferDataSpec {
            identities: 2,
            poses: 10,
            seed: 911,
            ..TransferDataSpec::default()
        },
    )?;
    let opts = TransferTrainOptions {
        epochs: 10,
        ..TransferTrainOptions::default()
    };
    let trained = train_transfer(TransferConfig::default(), &train, &heldout, &opts)?;
    let eval = evaluate_transfer(&trained.params, &heldout)?;
    println!(
        "held-out vertex error {:.1} mm, copying the identity {:.1} mm",
        eval.mean_vertex_error_mm, eval.copy_identity_mm
    );

    let mut pose = PoseParams::zeros(model.num_joints());
    pose.rotations[16] = Vec3::new(0.0, 0.0, -1.2);
    pose.rotations[17] = Vec3::new(0.0, 0.0, 1.2);
    let pose_mesh = model.pose_mesh(&ShapeParams::new(vec![-0.5, 0.4, 0.0, 0.2]), &pose)?;
    let identity = model.shape_mesh(&ShapeParams::new(vec![1.0, -0.6, 0.3, 0.0]))?;
    let oracle = model.pose_mesh(&ShapeParams::new(vec![1.0, -0.6, 0.3, 0.0]), &pose)?;

    let out = transfer(
        &trained.params,
        &TransferPair {
            pose: pose_mesh.vertices,
            identity,
            target: None,
        },
    )?;
    let err = out.vertices.iter().zip(&oracle.vertices).map(|(a, b)| (a - b).norm()).sum::<f64>() / out.len() as f64;
    println!("arms-out pose on a new body: {:.1} mm from the body model", err * 1000.0);
    Ok(())
}
