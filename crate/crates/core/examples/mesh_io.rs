//! Mesh cuboids and OBJ files: build a cuboid from posed meshes, write and
//! read it back, and export its frames as OBJ.

use mesh_imitate::body_model::{BodyModel, ShapeParams};
use mesh_imitate::cuboid::{make_cuboid, unflatten, MeshCuboid};
use mesh_imitate::obj::{read_obj, write_obj};
use mesh_imitate::synth::MotionSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = BodyModel::humanoid();
    let motion = MotionSpec::random(model.num_joints(), 50.0, 100, 3)?;
    let shape = ShapeParams::zeros(model.num_shapes());
    let meshes = (0..4)
        .map(|t| model.pose_mesh(&shape, &motion.pose_at(t * 25)))
        .collect::<mesh_imitate::error::Result<Vec<_>>>()?;
    let cuboid = make_cuboid(&meshes)?;

    let dir = std::env::temp_dir().join("mesh-imitate-example-io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("clip.mcub");
    cuboid.write(&path)?;
    let back = MeshCuboid::read(&path)?;
    assert_eq!(back, cuboid);
    println!("{} frames x {} vertices round-tripped through {}", back.frames(), back.vertices(), path.display());

    for (t, mesh) in unflatten(&back, model.faces())?.iter().enumerate() {
        let obj = dir.join(format!("frame_{t:04}.obj"));
        write_obj(&obj, mesh)?;
        assert_eq!(read_obj(&obj)?.faces.len(), model.faces().len());
    }
    println!("exported OBJ frames to {}", dir.display());
    Ok(())
}
