//! Skeleton-aware retargeting of a loosely clothed identity, and how its
//! error grows with distance from the skeleton.

use mesh_imitate::body_model::{BodyModel, ShapeParams};
use mesh_imitate::sapd::{clothed_error_profile, BindConfig};
use mesh_imitate::synth::{clothed_identity, ClothSpec, MotionSpec};

fn main() -> mesh_imitate::error::Result<()> {
    let model = BodyModel::humanoid();
    let shape = ShapeParams::new(vec![0.3, 0.5, -0.2, 0.1]);
    let clothed = clothed_identity(&model, &shape, &ClothSpec::default())?;
    println!("clothed identity: {} vertices", clothed.mesh.len());

    let motion = MotionSpec::random(model.num_joints(), 50.0, 400, 0)?;
    let poses: Vec<_> = (0..16)
        .map(|i| {
            let mut p = motion.pose_at(i * 25);
            p.translation = Default::default();
            p
        })
        .collect();
    let profile = clothed_error_profile(&model, &shape, &clothed, &poses, &BindConfig::default(), 5)?;
    println!("distance to skeleton      vertices  mean error");
    for bin in &profile {
        println!(
            "{:6.1} - {:6.1} mm  {:10}  {:8.1} mm",
            bin.lo * 1000.0,
            bin.hi * 1000.0,
            bin.count,
            bin.mean_error * 1000.0
        );
    }
    Ok(())
}
