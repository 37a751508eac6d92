//! Skeleton-alignment pose deformation: retarget a pose skeleton onto an
//! identity's bone lengths, turn the result into per-joint rigid transforms
//! and skin the identity mesh with them.

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, JointTransform};
use crate::cuboid::MeshCuboid;
use crate::error::{Error, Result};
use crate::geometry::{bind_segments, fit_rotation, inverse_distance_weights, minimal_rotation, point_segment_distance, Mat3, Mesh, Vec3};
use crate::skeleton::Skeleton;

/// Places the identity's bones along the pose's bone directions, starting at
/// the identity's root. A zero-length pose bone takes its parent bone's
/// direction (the identity's own direction below the root).
pub fn align_skeleton(pose: &Skeleton, identity: &Skeleton) -> Result<Skeleton> {
    if !pose.same_topology(identity) {
        return Err(Error::invalid("pose and identity skeletons have different joint trees"));
    }
    let (p, id) = (pose.joints(), identity.joints());
    let mut out = vec![Vec3::zeros(); p.len()];
    let mut dirs = vec![Vec3::zeros(); p.len()];
    for &j in pose.order() {
        let Some(parent) = pose.parents()[j] else {
            out[j] = id[j];
            continue;
        };
        let bone = p[j] - p[parent];
        let len = bone.norm();
        dirs[j] = if len > 0.0 {
            bone / len
        } else if pose.parents()[parent].is_some() {
            dirs[parent]
        } else {
            let rest = id[j] - id[parent];
            if rest.norm() > 0.0 {
                rest.normalize()
            } else {
                Vec3::zeros()
            }
        };
        out[j] = out[parent] + dirs[j] * identity.bone_length(j);
    }
    Skeleton::new(out, pose.parents().to_vec())
}

/// Per-joint world rotations and the rest/aligned joint positions they
/// pivot about. Joint `j` maps `x` to `R_j (x - rest_j) + aligned_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneTransforms {
    pub transforms: Vec<JointTransform>,
}

impl BoneTransforms {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Transforms that leave every point where it is.
    pub fn identity(rest: &Skeleton) -> Self {
        Self {
            transforms: rest
                .joints()
                .iter()
                .map(|&p| JointTransform {
                    rotation: Mat3::identity(),
                    rest: p,
                    posed: p,
                })
                .collect(),
        }
    }

    pub fn rotation(&self, j: usize) -> &Mat3 {
        &self.transforms[j].rotation
    }

    /// World translation `t_j` with `x -> R_j x + t_j`.
    pub fn translation(&self, j: usize) -> Vec3 {
        let t = &self.transforms[j];
        t.posed - t.rotation * t.rest
    }

    pub fn apply(&self, j: usize, x: &Vec3) -> Vec3 {
        self.transforms[j].apply(x)
    }
}

/// Rotations taking the rest skeleton's bones onto the aligned skeleton's,
/// composed from the root down. Each joint's local rotation acts in its
/// parent's already rotated frame: the minimal rotation for a single child
/// bone, the best-fit rotation over all child bones at a branch, and none at
/// a leaf.
pub fn bone_transforms(rest: &Skeleton, aligned: &Skeleton) -> Result<BoneTransforms> {
    if !rest.same_topology(aligned) {
        return Err(Error::invalid("rest and aligned skeletons have different joint trees"));
    }
    let k = rest.len();
    let (r, a) = (rest.joints(), aligned.joints());
    let mut world = vec![Mat3::identity(); k];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, p) in rest.parents().iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(c);
        }
    }
    for &j in rest.order() {
        let inherited = rest.parents()[j].map_or(Mat3::identity(), |p| world[p]);
        let bones: Vec<(Vec3, Vec3)> = children[j]
            .iter()
            .map(|&c| (inherited * (r[c] - r[j]), a[c] - a[j]))
            .filter(|(from, to)| from.norm() > 0.0 && to.norm() > 0.0)
            .collect();
        let local = match bones.len() {
            0 => Mat3::identity(),
            1 => minimal_rotation(&bones[0].0, &bones[0].1),
            _ => {
                let (from, to): (Vec<Vec3>, Vec<Vec3>) =
                    bones.iter().map(|(f, t)| (f.normalize(), t.normalize())).unzip();
                fit_rotation(&from, &to)
            }
        };
        world[j] = local * inherited;
    }
    Ok(BoneTransforms {
        transforms: (0..k)
            .map(|j| JointTransform {
                rotation: world[j],
                rest: r[j],
                posed: a[j],
            })
            .collect(),
    })
}

/// Skinning-weight binding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindConfig {
    pub power: f64,
    pub k_nearest: usize,
    /// Leaf joints get a stub bone this fraction of their incoming bone long.
    pub leaf_extension: f64,
}

impl Default for BindConfig {
    fn default() -> Self {
        Self {
            power: 2.0,
            k_nearest: 2,
            leaf_extension: 0.75,
        }
    }
}

/// Inverse-distance-to-bone weights, `N x k` row-major.
pub fn bind_weights(mesh: &Mesh, rest: &Skeleton, cfg: &BindConfig) -> Result<Vec<f64>> {
    let segments = bind_segments(rest.joints(), rest.parents(), cfg.leaf_extension);
    inverse_distance_weights(&mesh.vertices, &segments, rest.len(), cfg.power, cfg.k_nearest)
}

/// Linear blend skinning of `mesh` with `weights` (`N x k`), written as
/// `v + sum_j w_j ((R_j - I) v + t_j)` so identity transforms return the
/// mesh bit for bit.
pub fn deform(mesh: &Mesh, weights: &[f64], transforms: &BoneTransforms) -> Result<Mesh> {
    let k = transforms.len();
    if weights.len() != mesh.len() * k {
        return Err(Error::dim(format!(
            "{} weights for {} vertices and {k} joints",
            weights.len(),
            mesh.len()
        )));
    }
    let affine: Vec<(Mat3, Vec3)> = (0..k)
        .map(|j| (transforms.rotation(j) - Mat3::identity(), transforms.translation(j)))
        .collect();
    let vertices = mesh
        .vertices
        .iter()
        .zip(weights.chunks(k))
        .map(|(v, row)| {
            let shift = row
                .iter()
                .zip(&affine)
                .filter(|(w, _)| **w != 0.0)
                .fold(Vec3::zeros(), |acc, (w, (a, t))| acc + (a * v + t) * *w);
            v + shift
        })
        .collect();
    Ok(Mesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// A rigged identity: its mesh, rest skeleton and binding.
#[derive(Clone, Debug, PartialEq)]
pub struct SapdRig {
    pub mesh: Mesh,
    pub rest: Skeleton,
    pub weights: Vec<f64>,
}

impl SapdRig {
    pub fn new(mesh: Mesh, rest: Skeleton, cfg: &BindConfig) -> Result<Self> {
        let weights = bind_weights(&mesh, &rest, cfg)?;
        Ok(Self { mesh, rest, weights })
    }

    /// Rig for a mesh in the body model's topology, with the skeleton
    /// regressed from it.
    pub fn from_body(model: &BodyModel, mesh: Mesh, cfg: &BindConfig) -> Result<Self> {
        let rest = model.skeleton_of(&mesh.vertices)?;
        Self::new(mesh, rest, cfg)
    }

    /// The identity posed like one source frame.
    pub fn pose_frame(&self, model: &BodyModel, source: &[Vec3]) -> Result<Mesh> {
        let pose = model.skeleton_of(source)?;
        let aligned = align_skeleton(&pose, &self.rest)?;
        deform(&self.mesh, &self.weights, &bone_transforms(&self.rest, &aligned)?)
    }
}

/// Deforms the rigged identity to follow every frame of `source`.
pub fn sapd_imitate(source: &MeshCuboid, rig: &SapdRig, model: &BodyModel) -> Result<MeshCuboid> {
    if source.vertices() != model.num_vertices() {
        return Err(Error::dim(format!(
            "source has {} vertices, model has {}",
            source.vertices(),
            model.num_vertices()
        )));
    }
    let frames = (0..source.frames())
        .map(|t| Ok(rig.pose_frame(model, &source.frame(t))?.vertices))
        .collect::<Result<Vec<_>>>()?;
    MeshCuboid::from_frames(&frames)
}

/// Distance from each vertex to the nearest bone of `skeleton`.
pub fn distance_to_skeleton(vertices: &[Vec3], skeleton: &Skeleton) -> Vec<f64> {
    let j = skeleton.joints();
    let bones: Vec<(Vec3, Vec3)> = skeleton
        .parents()
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (j[p], j[c])))
        .collect();
    vertices
        .iter()
        .map(|v| {
            if bones.is_empty() {
                return (v - j[0]).norm();
            }
            bones.iter().map(|(a, b)| point_segment_distance(v, a, b).0).fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Mean error over vertices whose distance falls in `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_error: f64,
}

/// Groups `(distance, error)` pairs into `bins` bins of equal count by
/// distance and averages the error in each.
pub fn error_profile(distances: &[f64], errors: &[f64], bins: usize) -> Result<Vec<ProfileBin>> {
    if distances.len() != errors.len() {
        return Err(Error::dim("distances and errors differ in length"));
    }
    if bins == 0 || distances.len() < bins {
        return Err(Error::invalid(format!("cannot split {} values into {bins} bins", distances.len())));
    }
    let mut pairs: Vec<(f64, f64)> = distances.iter().copied().zip(errors.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    Ok((0..bins)
        .map(|b| {
            let chunk = &pairs[b * n / bins..(b + 1) * n / bins];
            ProfileBin {
                lo: chunk[0].0,
                hi: chunk[chunk.len() - 1].0,
                count: chunk.len(),
                mean_error: chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64,
            }
        })
        .collect())
}

/// Per-vertex SA-PD error on a clothed identity against its skinned
/// ground truth, binned by rest distance to the skeleton. The source bodies
/// are posed from `poses` with the clothed identity's own shape, without
/// root translation.
pub fn clothed_error_profile(
    model: &BodyModel,
    shape: &crate::body_model::ShapeParams,
    clothed: &crate::synth::ClothedIdentity,
    poses: &[crate::body_model::PoseParams],
    bind: &BindConfig,
    bins: usize,
) -> Result<Vec<ProfileBin>> {
    let rig = SapdRig::new(clothed.mesh.clone(), clothed.skeleton.clone(), bind)?;
    let rest_body = model.shape_mesh(shape)?.vertices;
    let n = clothed.mesh.len();
    let mut errors = vec![0.0; n];
    for pose in poses {
        let pose = crate::body_model::PoseParams {
            rotations: pose.rotations.clone(),
            translation: Vec3::zeros(),
        };
        let source = model.pose_vertices(&rest_body, &pose, None)?;
        let out = rig.pose_frame(model, &source)?;
        let truth = clothed.pose(model, &pose)?;
        for ((e, a), b) in errors.iter_mut().zip(&out.vertices).zip(&truth) {
            *e += (a - b).norm() / poses.len() as f64;
        }
    }
    error_profile(&distance_to_skeleton(&clothed.mesh.vertices, &clothed.skeleton), &errors, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rodrigues;
    use crate::body_model::ShapeParams;
    use crate::synth::{clothed_identity, ClothSpec, MotionSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(points: &[[f64; 3]]) -> Skeleton {
        let joints = points.iter().map(|p| Vec3::from(*p)).collect();
        let parents = (0..points.len()).map(|i| i.checked_sub(1)).collect();
        Skeleton::new(joints, parents).unwrap()
    }

    fn random_skeleton(rng: &mut ChaCha8Rng, parents: &[Option<usize>]) -> Skeleton {
        let mut joints = vec![Vec3::zeros(); parents.len()];
        for (j, p) in parents.iter().enumerate() {
            let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            joints[j] = match p {
                Some(p) => joints[*p] + r,
                None => r,
            };
        }
        Skeleton::new(joints, parents.to_vec()).unwrap()
    }

    #[test]
    fn aligning_to_itself_is_exact() {
        let s = BodyModel::humanoid();
        let sk = s.skeleton_of(s.template()).unwrap();
        let aligned = align_skeleton(&sk, &sk).unwrap();
        for (a, b) in aligned.joints().iter().zip(sk.joints()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn scaled_identity_scales_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parents = BodyModel::humanoid().parents().to_vec();
        let pose = random_skeleton(&mut rng, &parents);
        let root = pose.joints()[0];
        let doubled: Vec<Vec3> = pose.joints().iter().map(|j| root + (j - root) * 2.0).collect();
        let identity = Skeleton::new(doubled.clone(), parents).unwrap();
        let aligned = align_skeleton(&pose, &identity).unwrap();
        for (a, b) in aligned.joints().iter().zip(&doubled) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn three_joint_chain_by_hand() {
        let pose = chain(&[[0.0, 0.0, 0.0], [0.0, 3.0, 0.0], [4.0, 3.0, 0.0]]);
        let identity = chain(&[[1.0, 1.0, 1.0], [1.0, 1.0, 3.0], [1.0, 1.0, 8.0]]);
        let aligned = align_skeleton(&pose, &identity).unwrap();
        // root at (1,1,1); first bone up y with length 2; second along x, length 5
        let want = [Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, 3.0, 1.0), Vec3::new(6.0, 3.0, 1.0)];
        for (a, b) in aligned.joints().iter().zip(&want) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_length_bone_inherits_parent_direction() {
        let pose = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let identity = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let aligned = align_skeleton(&pose, &identity).unwrap();
        assert!((aligned.joints()[2] - Vec3::new(0.0, 3.0, 0.0)).norm() < 1e-12);
        let stub = chain(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let aligned = align_skeleton(&stub, &chain(&[[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])).unwrap();
        assert!((aligned.joints()[1] - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        let a = chain(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = Skeleton::new(a.joints().to_vec(), vec![None, Some(0), Some(0)]).unwrap();
        assert!(align_skeleton(&a, &b).is_err());
        assert!(bone_transforms(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn aligned_lengths_and_directions(seed in 0u64..500, shift in prop::array::uniform3(-5.0f64..5.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parents = BodyModel::humanoid().parents().to_vec();
            let pose = random_skeleton(&mut rng, &parents);
            let identity = random_skeleton(&mut rng, &parents);
            let aligned = align_skeleton(&pose, &identity).unwrap();
            prop_assert!((aligned.joints()[0] - identity.joints()[0]).norm() < 1e-12);
            for (j, p) in parents.iter().enumerate() {
                let Some(p) = p else { continue };
                prop_assert!((aligned.bone_length(j) - identity.bone_length(j)).abs() < 1e-6);
                let d = (aligned.joints()[j] - aligned.joints()[*p]).normalize();
                let e = (pose.joints()[j] - pose.joints()[*p]).normalize();
                prop_assert!((d - e).norm() < 1e-6);
            }
            let moved = Skeleton::new(pose.joints().iter().map(|j| j + Vec3::from(shift)).collect(), parents.clone()).unwrap();
            let again = align_skeleton(&moved, &identity).unwrap();
            for (a, b) in again.joints().iter().zip(aligned.joints()) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }

        #[test]
        fn transforms_are_rotations_that_carry_bones(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parents = BodyModel::humanoid().parents().to_vec();
            let rest = random_skeleton(&mut rng, &parents);
            let aligned = align_skeleton(&random_skeleton(&mut rng, &parents), &rest).unwrap();
            let t = bone_transforms(&rest, &aligned).unwrap();
            for j in 0..parents.len() {
                let r = t.rotation(j);
                prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
                prop_assert!((t.apply(j, &rest.joints()[j]) - aligned.joints()[j]).norm() < 1e-12);
                prop_assert!((r * rest.joints()[j] + t.translation(j) - aligned.joints()[j]).norm() < 1e-9);
            }
            // a joint with one child carries that bone onto its aligned position
            for (c, p) in parents.iter().enumerate() {
                let Some(p) = *p else { continue };
                if parents.iter().filter(|q| **q == Some(p)).count() == 1 {
                    prop_assert!((t.apply(p, &rest.joints()[c]) - aligned.joints()[c]).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_skeletons_give_identity_transforms() {
        let model = BodyModel::humanoid();
        let sk = model.skeleton_of(model.template()).unwrap();
        let t = bone_transforms(&sk, &sk).unwrap();
        for j in 0..sk.len() {
            assert!((t.rotation(j) - Mat3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn single_bone_quarter_turn_about_z() {
        let rest = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let aligned = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let t = bone_transforms(&rest, &aligned).unwrap();
        let rz = rodrigues(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!((t.rotation(0) - rz).abs().max() < 1e-12);
        // the leaf inherits its parent's rotation
        assert!((t.rotation(1) - rz).abs().max() < 1e-12);
    }

    #[test]
    fn antiparallel_bone_uses_fallback_axis() {
        let rest = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let aligned = chain(&[[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let t = bone_transforms(&rest, &aligned).unwrap();
        // x is parallel to the bone, so the turn is about y
        let want = rodrigues(&Vec3::new(0.0, std::f64::consts::PI, 0.0));
        assert!((t.rotation(0) - want).abs().max() < 1e-12);
    }

    #[test]
    fn midpoint_vertex_binds_to_its_bone() {
        let rest = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [5.0, 2.0, 0.0]]);
        let mesh = Mesh::new(vec![Vec3::new(0.0, 0.5, 0.0), Vec3::new(0.01, 1.5, 0.0)], vec![]).unwrap();
        let w = bind_weights(&mesh, &rest, &BindConfig::default()).unwrap();
        assert!(w[0] > 1.0 - 1e-9);
        assert!(w[4 + 1] > 0.99);
        for row in w.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Exhaustive distances to every bone and leaf stub, two nearest kept.
    #[test]
    fn toy_rig_matches_distance_oracle() {
        let rest = Skeleton::new(
            vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            vec![None, Some(0), Some(0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let verts: Vec<Vec3> = (0..5)
            .map(|_| Vec3::new(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random_range(-0.5..0.5)))
            .collect();
        let mesh = Mesh::new(verts.clone(), vec![]).unwrap();
        let w = bind_weights(&mesh, &rest, &BindConfig::default()).unwrap();
        // bones 0-1 and 0-2 belong to joint 0; stubs past joints 1 and 2
        let segs = [
            (Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), 0),
            (Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), 0),
            (Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 1.75, 0.0), 1),
            (Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.75, 0.0, 0.0), 2),
        ];
        for (v, p) in verts.iter().enumerate() {
            let mut d: Vec<(f64, usize)> = segs
                .iter()
                .map(|(a, b, j)| {
                    let mut best = f64::INFINITY;
                    for s in 0..=10000 {
                        let q = a + (b - a) * (s as f64 / 10000.0);
                        best = best.min((p - q).norm());
                    }
                    (best, *j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut want = [0.0; 3];
            for &(dist, j) in &d[..2] {
                want[j] += 1.0 / (dist * dist);
            }
            let total: f64 = want.iter().sum();
            for j in 0..3 {
                assert!((w[v * 3 + j] - want[j] / total).abs() < 1e-3, "vertex {v} joint {j}");
            }
        }
    }

    #[test]
    fn deform_identity_and_rigid_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rest = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]);
        let verts: Vec<Vec3> = (0..20).map(|_| Vec3::new(rng.random(), rng.random::<f64>() * 2.0, rng.random())).collect();
        let mesh = Mesh::new(verts, vec![[0, 1, 2]]).unwrap();
        let w = bind_weights(&mesh, &rest, &BindConfig::default()).unwrap();
        assert_eq!(deform(&mesh, &w, &BoneTransforms::identity(&rest)).unwrap(), mesh);
        assert_eq!(deform(&mesh, &w, &bone_transforms(&rest, &rest).unwrap()).unwrap(), mesh);

        let rigid = rodrigues(&Vec3::new(0.3, -0.2, 0.9));
        let shift = Vec3::new(0.5, 0.1, -2.0);
        let mut t = BoneTransforms::identity(&rest);
        t.transforms[0].rotation = rigid;
        t.transforms[0].posed = rigid * rest.joints()[0] + shift;
        let one_bone: Vec<f64> = (0..20).flat_map(|_| [1.0, 0.0, 0.0]).collect();
        let out = deform(&mesh, &one_bone, &t).unwrap();
        for (a, b) in out.vertices.iter().zip(&mesh.vertices) {
            assert!((a - (rigid * b + shift)).norm() < 1e-9);
        }
        assert_eq!(out.faces, mesh.faces);
    }

    #[test]
    fn knee_vertex_blends_two_transforms() {
        let rest = chain(&[[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -2.0, 0.0]]);
        let bent = chain(&[[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 1.0]]);
        let t = bone_transforms(&rest, &bent).unwrap();
        // just below the knee: the thigh leaves it alone, the knee turns it a
        // quarter turn about x
        let v = Vec3::new(0.1, -1.5, 0.0);
        let thigh = v;
        let shin = Vec3::new(0.1, -1.0, 0.5);
        let mesh = Mesh::new(vec![v], vec![]).unwrap();
        let out = deform(&mesh, &[0.25, 0.75, 0.0], &t).unwrap();
        assert!((out.vertices[0] - (thigh * 0.25 + shin * 0.75)).norm() < 1e-12);
        assert!(deform(&mesh, &[1.0], &t).is_err());
    }

    #[test]
    fn imitating_own_rest_mesh_is_identity() {
        let model = BodyModel::humanoid();
        let rest = model.shape_mesh(&crate::body_model::ShapeParams::new(vec![0.4, 0.0, -0.3, 0.2])).unwrap();
        let rig = SapdRig::from_body(&model, rest.clone(), &BindConfig::default()).unwrap();
        let source = MeshCuboid::from_frames(&[rest.vertices.clone(), rest.vertices.clone()]).unwrap();
        let out = sapd_imitate(&source, &rig, &model).unwrap();
        assert_eq!(out.frames(), 2);
        for t in 0..2 {
            for (a, b) in out.frame(t).iter().zip(&rest.vertices) {
                // source frames pass through single precision
                assert!((a - b).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn profile_bins_split_evenly() {
        let d: Vec<f64> = (0..10).map(|i| i as f64).rev().collect();
        let e: Vec<f64> = d.iter().map(|x| x * 2.0).collect();
        let p = error_profile(&d, &e, 2).unwrap();
        assert_eq!(p[0].count, 5);
        assert_eq!(p[0].mean_error, 4.0);
        assert_eq!(p[1].mean_error, 14.0);
        assert!(error_profile(&d, &e, 11).is_err());
    }

    #[test]
    fn clothed_error_grows_with_distance_from_the_skeleton() {
        let model = BodyModel::humanoid();
        let shape = ShapeParams::new(vec![0.3, 0.5, -0.2, 0.1]);
        let clothed = clothed_identity(&model, &shape, &ClothSpec::default()).unwrap();
        let motion = MotionSpec::random(model.num_joints(), 50.0, 1000, 0).unwrap();
        let poses: Vec<_> = (0..16).map(|i| motion.pose_at(i * 25)).collect();
        let bins = clothed_error_profile(&model, &shape, &clothed, &poses, &BindConfig::default(), 5).unwrap();
        assert_eq!(bins.len(), 5);
        for w in bins.windows(2) {
            assert!(w[1].mean_error > w[0].mean_error, "{bins:?}");
        }
    }
}
