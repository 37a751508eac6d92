//! Shape and pose the built-in humanoid, regress its joints and write the
//! posed mesh as OBJ.
//!
//!     cargo run --release --example body_model -- out.obj

use mesh_imitate::body_model::{BodyModel, PoseParams, ShapeParams};
use mesh_imitate::geometry::Vec3;
use mesh_imitate::obj::write_obj;

fn main() -> mesh_imitate::error::Result<()> {
    let model = BodyModel::humanoid();
    println!(
        "humanoid: {} vertices, {} faces, {} joints, {} shape coefficients",
        model.num_vertices(),
        model.faces().len(),
        model.num_joints(),
        model.num_shapes()
    );

    let shape = ShapeParams::new(vec![0.8, -0.3, 0.2, 0.0]);
    let mut pose = PoseParams::zeros(model.num_joints());
    pose.rotations[1] = Vec3::new(-0.6, 0.0, 0.0); // left hip forward
    pose.rotations[4] = Vec3::new(0.9, 0.0, 0.0); // left knee
    pose.rotations[17] = Vec3::new(0.0, 0.0, 1.1); // right shoulder
    pose.translation = Vec3::new(0.0, 0.0, 0.3);

    let mesh = model.pose_mesh(&shape, &pose)?;
    let joints = model.regress_joints(&mesh.vertices)?;
    for (j, p) in joints.iter().enumerate().take(6) {
        println!("joint {j:2}: ({:+.3}, {:+.3}, {:+.3})", p.x, p.y, p.z);
    }

    let out = std::env::args().nth(1).unwrap_or_else(|| "posed.obj".into());
    write_obj(out.as_ref(), &mesh)?;
    println!("wrote {out}");
    Ok(())
}
