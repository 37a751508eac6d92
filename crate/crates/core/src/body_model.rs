//! Parametric human body model: a rest template deformed by a linear shape
//! space and posed by linear blend skinning over a 24-joint kinematic tree.
//!
//! The default [`BodyModel::humanoid`] is a procedural capsule figure with
//! 602 vertices. Every operation is generic in `N`, `k` and `S`, so a model
//! with the original 6890-vertex topology loads through [`BodyModel::load`]
//! unchanged.
//!
//! Posing follows the usual skinning convention: joint `j` carries a world
//! rotation `R_j` composed from the root down, its rest location `p_j` is
//! regressed from the shaped rest mesh, and a vertex moves to
//! `sum_j w_vj * (R_j (v - p_j) + p'_j)` before the root translation.

use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{bind_segments, inverse_distance_weights, rodrigues, validate_faces, Mat3, Mesh, Vec3};
use crate::skeleton::{tree_order, Skeleton};

const MAGIC: &[u8; 4] = b"MBDY";
const VERSION: u32 = 1;
const ROOT_SENTINEL: u32 = u32::MAX;

/// Row-sum tolerance for skinning weights and the joint regressor.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub rotations: Vec<Vec3>,
    pub translation: Vec3,
}

impl PoseParams {
    pub fn zeros(num_joints: usize) -> Self {
        Self {
            rotations: vec![Vec3::zeros(); num_joints],
            translation: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotations.iter().chain(std::iter::once(&self.translation)).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Linear shape-space coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub coefficients: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(num_shapes: usize) -> Self {
        Self {
            coefficients: vec![0.0; num_shapes],
        }
    }

    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }
}

/// World-space transform of one joint after forward kinematics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTransform {
    pub rotation: Mat3,
    /// Rest location the rotation pivots about.
    pub rest: Vec3,
    /// Posed location, before root translation.
    pub posed: Vec3,
}

impl JointTransform {
    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.rotation * (v - self.rest) + self.posed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel {
    template: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    shape_basis: Vec<Vec<Vec3>>,
    /// Row-major `N x k`.
    skinning_weights: Vec<f64>,
    /// Row-major `k x N`.
    joint_regressor: Vec<f64>,
    parents: Vec<Option<usize>>,
    order: Vec<usize>,
    skin_sparse: Vec<Vec<(usize, f64)>>,
    regressor_sparse: Vec<Vec<(usize, f64)>>,
}

impl BodyModel {
    pub fn new(
        template: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        shape_basis: Vec<Vec<Vec3>>,
        skinning_weights: Vec<f64>,
        joint_regressor: Vec<f64>,
        parents: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = template.len();
        let k = parents.len();
        if n == 0 {
            return Err(Error::invalid("template has no vertices"));
        }
        if template.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("template vertex".into()));
        }
        validate_faces(&faces, n)?;
        let order = tree_order(&parents)?;
        for (s, b) in shape_basis.iter().enumerate() {
            if b.len() != n {
                return Err(Error::dim(format!("shape basis {s} has {} rows, expected {n}", b.len())));
            }
            if b.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite(format!("shape basis {s}")));
            }
        }
        if skinning_weights.len() != n * k {
            return Err(Error::dim(format!(
                "skinning weights have {} entries, expected {n} x {k}",
                skinning_weights.len()
            )));
        }
        if joint_regressor.len() != k * n {
            return Err(Error::dim(format!(
                "joint regressor has {} entries, expected {k} x {n}",
                joint_regressor.len()
            )));
        }
        check_convex_rows("skinning weights", &skinning_weights, k)?;
        check_convex_rows("joint regressor", &joint_regressor, n)?;
        let skin_sparse = sparse_rows(&skinning_weights, k);
        let regressor_sparse = sparse_rows(&joint_regressor, n);
        Ok(Self {
            template,
            faces,
            shape_basis,
            skinning_weights,
            joint_regressor,
            parents,
            order,
            skin_sparse,
            regressor_sparse,
        })
    }

    /// The same model with vertex `i` taken from old vertex `order[i]`.
    pub fn permute_vertices(&self, order: &[usize]) -> Result<Self> {
        let (n, k) = (self.num_vertices(), self.num_joints());
        let mut inverse = vec![usize::MAX; n];
        if order.len() != n {
            return Err(Error::dim(format!("permutation of {} entries for {n} vertices", order.len())));
        }
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::invalid("vertex order is not a permutation"));
            }
            inverse[old] = new;
        }
        let take = |v: &[Vec3]| order.iter().map(|&o| v[o]).collect::<Vec<_>>();
        let skin = order.iter().flat_map(|&o| self.skinning_weights[o * k..(o + 1) * k].iter().copied()).collect();
        let regressor = (0..k)
            .flat_map(|j| order.iter().map(move |&o| self.joint_regressor[j * n + o]))
            .collect();
        let faces = self
            .faces
            .iter()
            .map(|f| f.map(|v| inverse[v as usize] as u32))
            .collect();
        Self::new(
            take(&self.template),
            faces,
            self.shape_basis.iter().map(|b| take(b)).collect(),
            skin,
            regressor,
            self.parents.clone(),
        )
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_shapes(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn shape_basis(&self) -> &[Vec<Vec3>] {
        &self.shape_basis
    }

    pub fn skinning_weights(&self) -> &[f64] {
        &self.skinning_weights
    }

    pub fn joint_regressor(&self) -> &[f64] {
        &self.joint_regressor
    }

    /// Nonzero `(vertex, weight)` pairs of each regressor row.
    pub fn regressor_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.regressor_sparse
    }

    /// Sorted vertices with nonzero weight in any regressor row. Joint-space
    /// losses only see these vertices.
    pub fn regressor_support(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.regressor_sparse.iter().flatten().map(|&(i, _)| i).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn check_shape(&self, shape: &ShapeParams) -> Result<()> {
        if shape.coefficients.len() != self.num_shapes() {
            return Err(Error::dim(format!(
                "shape has {} coefficients, model has {}",
                shape.coefficients.len(),
                self.num_shapes()
            )));
        }
        if shape.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("shape coefficient".into()));
        }
        Ok(())
    }

    /// Rest-pose mesh for a shape: template plus the weighted shape basis.
    pub fn shape_mesh(&self, shape: &ShapeParams) -> Result<Mesh> {
        self.check_shape(shape)?;
        let mut vertices = self.template.clone();
        for (c, basis) in shape.coefficients.iter().zip(&self.shape_basis) {
            if *c == 0.0 {
                continue;
            }
            for (v, d) in vertices.iter_mut().zip(basis) {
                *v += d * *c;
            }
        }
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// `joint_regressor * vertices`.
    pub fn regress_joints(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        if vertices.len() != self.num_vertices() {
            return Err(Error::dim(format!(
                "mesh has {} vertices, model has {}",
                vertices.len(),
                self.num_vertices()
            )));
        }
        Ok(self
            .regressor_sparse
            .iter()
            .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + vertices[v] * w))
            .collect())
    }

    /// World transforms of every joint. `bone_scales`, when given, stretches
    /// the bone ending at each joint by that factor.
    pub fn forward_kinematics(
        &self,
        rest_joints: &[Vec3],
        pose: &PoseParams,
        bone_scales: Option<&[f64]>,
    ) -> Result<Vec<JointTransform>> {
        let k = self.num_joints();
        if pose.rotations.len() != k || rest_joints.len() != k {
            return Err(Error::dim(format!(
                "pose has {} rotations and {} rest joints, model has {k} joints",
                pose.rotations.len(),
                rest_joints.len()
            )));
        }
        if !pose.is_finite() {
            return Err(Error::NonFinite("pose parameter".into()));
        }
        if let Some(s) = bone_scales {
            if s.len() != k {
                return Err(Error::dim(format!("{} bone scales for {k} joints", s.len())));
            }
        }
        let mut out = vec![
            JointTransform {
                rotation: Mat3::identity(),
                rest: Vec3::zeros(),
                posed: Vec3::zeros(),
            };
            k
        ];
        for &j in &self.order {
            let local = rodrigues(&pose.rotations[j]);
            out[j] = match self.parents[j] {
                None => JointTransform {
                    rotation: local,
                    rest: rest_joints[j],
                    posed: rest_joints[j],
                },
                Some(p) => {
                    let scale = bone_scales.map_or(1.0, |s| s[j]);
                    let parent = out[p];
                    JointTransform {
                        rotation: parent.rotation * local,
                        rest: rest_joints[j],
                        posed: parent.posed + parent.rotation * (rest_joints[j] - rest_joints[p]) * scale,
                    }
                }
            };
        }
        Ok(out)
    }

    /// Skins `rest` vertices with precomputed joint transforms.
    pub fn skin(&self, rest: &[Vec3], transforms: &[JointTransform], translation: &Vec3) -> Vec<Vec3> {
        rest.iter()
            .zip(&self.skin_sparse)
            .map(|(v, row)| {
                row.iter().fold(Vec3::zeros(), |acc, &(j, w)| acc + transforms[j].apply(v) * w) + translation
            })
            .collect()
    }

    /// Poses an already shaped rest mesh.
    pub fn pose_vertices(&self, rest: &[Vec3], pose: &PoseParams, bone_scales: Option<&[f64]>) -> Result<Vec<Vec3>> {
        let rest_joints = self.regress_joints(rest)?;
        let transforms = self.forward_kinematics(&rest_joints, pose, bone_scales)?;
        Ok(self.skin(rest, &transforms, &pose.translation))
    }

    pub fn pose_mesh(&self, shape: &ShapeParams, pose: &PoseParams) -> Result<Mesh> {
        let rest = self.shape_mesh(shape)?;
        let vertices = self.pose_vertices(&rest.vertices, pose, None)?;
        Ok(Mesh {
            vertices,
            faces: rest.faces,
        })
    }

    pub fn skeleton_of(&self, vertices: &[Vec3]) -> Result<Skeleton> {
        Skeleton::new(self.regress_joints(vertices)?, self.parents.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, k) = (self.num_vertices(), self.num_joints());
        let mut w = Writer::new();
        w.magic(MAGIC).u32(VERSION);
        w.len_u32(n)?.len_u32(self.faces.len())?.len_u32(self.num_shapes())?.len_u32(k)?;
        w.f32s(self.template.iter().flat_map(|v| v.iter().map(|&x| x as f32)));
        for f in &self.faces {
            f.iter().for_each(|&i| {
                w.u32(i);
            });
        }
        for b in &self.shape_basis {
            w.f32s(b.iter().flat_map(|v| v.iter().map(|&x| x as f32)));
        }
        w.f32s(self.skinning_weights.iter().map(|&x| x as f32));
        w.f32s(self.joint_regressor.iter().map(|&x| x as f32));
        for p in &self.parents {
            w.u32(p.map_or(ROOT_SENTINEL, |p| p as u32));
        }
        Ok(w.into_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Parses a model file. Weight rows stored at float precision are
    /// re-normalized onto an exactly summing dyadic grid before validation.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new("MBDY", data);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let n = r.u32()? as usize;
        let f = r.u32()? as usize;
        let s = r.u32()? as usize;
        let k = r.u32()? as usize;
        let vec3s = |xs: Vec<f32>| -> Vec<Vec3> {
            xs.chunks_exact(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect()
        };
        let template = vec3s(r.f32s(n * 3)?);
        let faces: Vec<[u32; 3]> = r.u32s(f * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut shape_basis = Vec::with_capacity(s);
        for _ in 0..s {
            shape_basis.push(vec3s(r.f32s(n * 3)?));
        }
        let weights_at = r.error("skinning weight rows do not sum to 1");
        let mut skinning: Vec<f64> = r.f32s(n * k)?.into_iter().map(f64::from).collect();
        let regressor_at = r.error("joint regressor rows do not sum to 1");
        let mut regressor: Vec<f64> = r.f32s(k * n)?.into_iter().map(f64::from).collect();
        let parents: Vec<Option<usize>> = r
            .u32s(k)?
            .into_iter()
            .map(|p| (p != ROOT_SENTINEL).then_some(p as usize))
            .collect();
        r.finish()?;
        dyadic_normalize_rows(&mut skinning, k.max(1), 1e-5).map_err(|_| weights_at)?;
        dyadic_normalize_rows(&mut regressor, n.max(1), 1e-5).map_err(|_| regressor_at)?;
        Self::new(template, faces, shape_basis, skinning, regressor, parents)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn check_convex_rows(what: &str, m: &[f64], width: usize) -> Result<()> {
    for (i, row) in m.chunks(width).enumerate() {
        if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("{what} row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!("{what} row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

fn sparse_rows(m: &[f64], width: usize) -> Vec<Vec<(usize, f64)>> {
    m.chunks(width)
        .map(|row| row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i, *w)).collect())
        .collect()
}

const DYADIC_SCALE: f64 = (1u64 << 24) as f64;

/// Rounds every row onto multiples of 2^-24 with largest-remainder
/// apportionment so each row sums to exactly 1 and every entry is exact in
/// single precision. Rows whose sum is off by more than `tolerance` are
/// rejected.
pub fn dyadic_normalize_rows(m: &mut [f64], width: usize, tolerance: f64) -> Result<()> {
    for (i, row) in m.chunks_mut(width).enumerate() {
        let s: f64 = row.iter().sum();
        if !((s - 1.0).abs() <= tolerance) || row.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid(format!("row {i} sums to {s}")));
        }
        let scaled: Vec<f64> = row.iter().map(|w| w / s * DYADIC_SCALE).collect();
        let mut units: Vec<u64> = scaled.iter().map(|x| x.floor() as u64).collect();
        let mut missing = (1u64 << 24) - units.iter().sum::<u64>();
        let mut by_remainder: Vec<usize> = (0..row.len()).collect();
        by_remainder.sort_by(|&a, &b| {
            (scaled[b] - scaled[b].floor())
                .total_cmp(&(scaled[a] - scaled[a].floor()))
                .then(a.cmp(&b))
        });
        for &j in by_remainder.iter().cycle() {
            if missing == 0 {
                break;
            }
            if scaled[j] > 0.0 {
                units[j] += 1;
                missing -= 1;
            }
        }
        for (w, u) in row.iter_mut().zip(units) {
            *w = u as f64 / DYADIC_SCALE;
        }
    }
    Ok(())
}

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

const PARENTS: [i8; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

#[rustfmt::skip]
const REST_JOINTS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0], [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.48, 0.01], [-0.10, -0.48, 0.01],
    [0.0, 0.24, -0.01],
    [0.10, -0.88, -0.02], [-0.10, -0.88, -0.02],
    [0.0, 0.30, 0.0],
    [0.11, -0.94, 0.10], [-0.11, -0.94, 0.10],
    [0.0, 0.50, -0.01],
    [0.07, 0.42, -0.01], [-0.07, 0.42, -0.01],
    [0.0, 0.60, 0.02],
    [0.18, 0.45, -0.01], [-0.18, 0.45, -0.01],
    [0.44, 0.45, -0.02], [-0.44, 0.45, -0.02],
    [0.68, 0.45, -0.01], [-0.68, 0.45, -0.01],
    [0.77, 0.45, -0.01], [-0.77, 0.45, -0.01],
];

#[rustfmt::skip]
const RADII: [f64; 24] = [
    0.12,
    0.085, 0.085,
    0.115,
    0.055, 0.055,
    0.12,
    0.04, 0.04,
    0.125,
    0.03, 0.03,
    0.05,
    0.06, 0.06,
    0.07,
    0.05, 0.05,
    0.04, 0.04,
    0.03, 0.03,
    0.025, 0.025,
];

const RING: usize = 6;
const BONE_RINGS: [f64; 3] = [0.25, 0.5, 0.75];
const TORSO: [usize; 12] = [0, 1, 2, 3, 6, 9, 12, 13, 14, 15, 16, 17];

/// Where a generated vertex hangs on the skeleton: interpolated between
/// joints `a` and `b` at parameter `u`, offset radially from `axis`.
struct Anchor {
    a: usize,
    b: usize,
    u: f64,
    axis: Vec3,
}

fn ring_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let n = normal.normalize();
    let reference = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let u = (reference - n * n.dot(&reference)).normalize();
    (u, n.cross(&u))
}

struct Builder {
    vertices: Vec<Vec3>,
    anchors: Vec<Anchor>,
    faces: Vec<[u32; 3]>,
    joint_rings: Vec<usize>,
}

impl Builder {
    fn ring(&mut self, center: Vec3, normal: Vec3, radius: f64, anchor: (usize, usize, f64)) -> usize {
        let start = self.vertices.len();
        let (e1, e2) = ring_basis(&normal);
        for i in 0..RING {
            let angle = std::f64::consts::TAU * i as f64 / RING as f64;
            self.vertices.push(center + (e1 * angle.cos() + e2 * angle.sin()) * radius);
            self.anchors.push(Anchor {
                a: anchor.0,
                b: anchor.1,
                u: anchor.2,
                axis: center,
            });
        }
        start
    }

    fn point(&mut self, p: Vec3, joint: usize) -> usize {
        self.vertices.push(p);
        self.anchors.push(Anchor {
            a: joint,
            b: joint,
            u: 0.0,
            axis: p,
        });
        self.vertices.len() - 1
    }

    fn stitch(&mut self, a: usize, b: usize) {
        for i in 0..RING {
            let j = (i + 1) % RING;
            let (a0, a1, b0, b1) = ((a + i) as u32, (a + j) as u32, (b + i) as u32, (b + j) as u32);
            self.faces.push([a0, a1, b1]);
            self.faces.push([a0, b1, b0]);
        }
    }

    fn fan(&mut self, ring: usize, apex: usize) {
        for i in 0..RING {
            let j = (i + 1) % RING;
            self.faces.push([(ring + i) as u32, (ring + j) as u32, apex as u32]);
        }
    }
}

impl BodyModel {
    /// The desk-scale procedural humanoid: 602 vertices, 24 joints with the
    /// SMPL kinematic tree, and four shape directions (height, girth, limb
    /// length, torso scale).
    ///
    /// Each joint is surrounded by a six-vertex ring that is also its
    /// regressor support, so rest joints regress exactly onto the skeleton.
    pub fn humanoid() -> Self {
        let parents: Vec<Option<usize>> = PARENTS.iter().map(|&p| (p >= 0).then_some(p as usize)).collect();
        let joints: Vec<Vec3> = REST_JOINTS.iter().map(|j| Vec3::new(j[0], j[1], j[2])).collect();
        let incoming = |j: usize| match parents[j] {
            Some(p) => joints[j] - joints[p],
            None => Vec3::y(),
        };
        let mut b = Builder {
            vertices: Vec::new(),
            anchors: Vec::new(),
            faces: Vec::new(),
            joint_rings: Vec::new(),
        };
        for j in 0..joints.len() {
            let start = b.ring(joints[j], incoming(j), RADII[j], (j, j, 0.0));
            b.joint_rings.push(start);
        }
        for c in 1..joints.len() {
            let p = parents[c].unwrap();
            let dir = joints[c] - joints[p];
            let mut prev = b.joint_rings[p];
            for &u in &BONE_RINGS {
                let radius = RADII[p] * (1.0 - u) + RADII[c] * u;
                let r = b.ring(joints[p] + dir * u, dir, radius, (p, c, u));
                b.stitch(prev, r);
                prev = r;
            }
            b.stitch(prev, b.joint_rings[c]);
        }
        // head cap
        let head = 15;
        let mut prev = b.joint_rings[head];
        for (h, r) in [(0.06, 0.09), (0.13, 0.085), (0.19, 0.06)] {
            let ring = b.ring(joints[head] + Vec3::y() * h, Vec3::y(), r, (head, head, 0.0));
            b.stitch(prev, ring);
            prev = ring;
        }
        let apex = b.point(joints[head] + Vec3::y() * 0.23, head);
        b.fan(prev, apex);
        // hand and foot extensions
        for leaf in [22, 23, 10, 11] {
            let dir = incoming(leaf);
            let ring = b.ring(joints[leaf] + dir * 0.5, dir, RADII[leaf] * 0.8, (leaf, leaf, 0.0));
            b.stitch(b.joint_rings[leaf], ring);
        }
        let crotch = b.point(Vec3::new(0.0, -0.12, 0.0), 0);
        b.fan(b.joint_rings[0], crotch);

        let n = b.vertices.len();
        let k = joints.len();
        let template: Vec<Vec3> = b.vertices.iter().map(round_f32).collect();

        let mut regressor = vec![0.0; k * n];
        for (j, &start) in b.joint_rings.iter().enumerate() {
            let inv: Vec<f64> = (start..start + RING)
                .map(|v| 1.0 / ((template[v] - joints[j]).norm() + 1e-12))
                .collect();
            let total: f64 = inv.iter().sum();
            for (i, w) in inv.iter().enumerate() {
                regressor[j * n + start + i] = w / total;
            }
        }
        dyadic_normalize_rows(&mut regressor, n, 1e-9).expect("regressor rows are normalized");

        let rest_joints: Vec<Vec3> = (0..k)
            .map(|j| (0..n).fold(Vec3::zeros(), |acc, v| acc + template[v] * regressor[j * n + v]))
            .collect();
        let segments = bind_segments(&rest_joints, &parents, 0.75);
        let mut skinning =
            inverse_distance_weights(&template, &segments, k, 2.0, 2).expect("humanoid bind segments are valid");
        dyadic_normalize_rows(&mut skinning, k, 1e-9).expect("skinning rows are normalized");

        let shape_basis = humanoid_shape_basis(&joints, &parents, &b.vertices, &b.anchors)
            .into_iter()
            .map(|basis| basis.iter().map(round_f32).collect())
            .collect();

        Self::new(template, b.faces, shape_basis, skinning, regressor, parents)
            .expect("procedural humanoid satisfies model invariants")
    }
}

fn round_f32(v: &Vec3) -> Vec3 {
    v.map(|x| x as f32 as f64)
}

fn humanoid_shape_basis(joints: &[Vec3], parents: &[Option<usize>], vertices: &[Vec3], anchors: &[Anchor]) -> Vec<Vec<Vec3>> {
    let k = joints.len();
    let root = joints[0];

    // limb length: arm and leg joints move away from the limb's base joint
    let mut limb = vec![Vec3::zeros(); k];
    for (base, chain) in [(16, [18, 20, 22]), (17, [19, 21, 23]), (1, [4, 7, 10]), (2, [5, 8, 11])] {
        for j in chain {
            limb[j] = (joints[j] - joints[base]) * 0.15;
        }
    }

    // torso scale: torso joints spread from the pelvis, limbs follow rigidly
    let mut torso = vec![Vec3::zeros(); k];
    let order = tree_order(parents).expect("humanoid tree is valid");
    for &j in &order {
        torso[j] = if TORSO.contains(&j) {
            (joints[j] - root) * 0.12
        } else {
            torso[parents[j].unwrap()]
        };
    }

    let interp = |field: &[Vec3], a: &Anchor| field[a.a] * (1.0 - a.u) + field[a.b] * a.u;
    let height: Vec<Vec3> = vertices.iter().map(|v| Vec3::new(0.0, 0.1 * (v.y - root.y), 0.0)).collect();
    let girth: Vec<Vec3> = vertices.iter().zip(anchors).map(|(v, a)| (v - a.axis) * 0.25).collect();
    let limb_basis: Vec<Vec3> = anchors.iter().map(|a| interp(&limb, a)).collect();
    let torso_basis: Vec<Vec3> = vertices
        .iter()
        .zip(anchors)
        .map(|(v, a)| {
            let radial = if TORSO.contains(&a.a) && TORSO.contains(&a.b) {
                (v - a.axis) * 0.1
            } else {
                Vec3::zeros()
            };
            interp(&torso, a) + radial
        })
        .collect();
    vec![height, girth, limb_basis, torso_basis]
}
