//! Small geometric helpers shared by the body model and the skeleton baseline.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// A triangle mesh: vertex positions in meters and triangular faces.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        validate_faces(&faces, vertices.len())?;
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        Ok(Self { vertices, faces })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Unique undirected edges of the face set, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

impl Mesh {
    /// Splits every triangle into four at its edge midpoints. Also returns,
    /// per output vertex, the two input vertices it sits between (the same
    /// index twice for an original vertex).
    pub fn subdivide(&self) -> (Mesh, Vec<(u32, u32)>) {
        let n = self.vertices.len() as u32;
        let mut parents: Vec<(u32, u32)> = (0..n).map(|v| (v, v)).collect();
        let mut vertices = self.vertices.clone();
        let mut midpoint = std::collections::HashMap::new();
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>, parents: &mut Vec<(u32, u32)>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                vertices.push((vertices[a as usize] + vertices[b as usize]) * 0.5);
                parents.push(key);
                vertices.len() as u32 - 1
            })
        };
        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        for &[a, b, c] in &self.faces {
            let ab = mid(a, b, &mut vertices, &mut parents);
            let bc = mid(b, c, &mut vertices, &mut parents);
            let ca = mid(c, a, &mut vertices, &mut parents);
            faces.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        (Mesh { vertices, faces }, parents)
    }
}

pub(crate) fn validate_faces(faces: &[[u32; 3]], n: usize) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v as usize >= n) {
            return Err(Error::invalid(format!(
                "face {i} references vertex outside 0..{n}: {f:?}"
            )));
        }
    }
    Ok(())
}

/// Rotation matrix of an axis-angle vector (Rodrigues' formula).
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta = axis_angle.norm();
    if theta < 1e-12 {
        // first-order expansion keeps tiny angles smooth
        let k = cross_matrix(axis_angle);
        return Mat3::identity() + k;
    }
    let k = cross_matrix(&(axis_angle / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

pub fn cross_matrix(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The smallest rotation taking direction `from` onto direction `to`.
///
/// Antiparallel inputs rotate by pi about the lowest-index coordinate axis
/// that is not parallel to `from`, projected orthogonal to it.
pub fn minimal_rotation(from: &Vec3, to: &Vec3) -> Mat3 {
    let a = from.normalize();
    let b = to.normalize();
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    let axis = a.cross(&b);
    let sin = axis.norm();
    if sin < 1e-12 {
        if cos > 0.0 {
            return Mat3::identity();
        }
        let fallback = fallback_axis(&a);
        return rodrigues(&(fallback * std::f64::consts::PI));
    }
    let angle = sin.atan2(cos);
    rodrigues(&(axis / sin * angle))
}

fn fallback_axis(dir: &Vec3) -> Vec3 {
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = 1.0;
        let ortho = e - dir * dir.dot(&e);
        if ortho.norm() > 1e-6 {
            return ortho.normalize();
        }
    }
    unreachable!("a unit vector is parallel to at most one coordinate axis")
}

/// Best-fit rotation (Kabsch) taking unit directions `from[i]` onto `to[i]`.
pub fn fit_rotation(from: &[Vec3], to: &[Vec3]) -> Mat3 {
    let mut h = Mat3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += b * a.transpose();
    }
    orthonormalize(&h)
}

/// Nearest proper rotation to `m` (SVD projection with determinant fix-up).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Distance from `p` to the segment `a`-`b`, together with the segment
/// parameter of the closest point.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let u = if len2 <= 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    ((p - (a + ab * u)).norm(), u)
}

/// A bone segment used for binding skin weights, owned by `joint`.
#[derive(Clone, Debug, PartialEq)]
pub struct BindSegment {
    pub start: Vec3,
    pub end: Vec3,
    pub joint: usize,
}

/// Distance floor so vertices sitting exactly on a segment get finite weight.
pub const BIND_EPSILON: f64 = 1e-6;

/// Bone segments of a joint tree: each parent-child bone is owned by the
/// parent joint (its rotation moves the bone), and each leaf joint owns a
/// stub extending its incoming bone by `leaf_extension` of that bone's length.
pub fn bind_segments(joints: &[Vec3], parents: &[Option<usize>], leaf_extension: f64) -> Vec<BindSegment> {
    let mut has_child = vec![false; joints.len()];
    let mut segments = Vec::new();
    for (c, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            has_child[p] = true;
            segments.push(BindSegment {
                start: joints[p],
                end: joints[c],
                joint: p,
            });
        }
    }
    for (l, p) in parents.iter().enumerate() {
        if has_child[l] {
            continue;
        }
        let dir = match p {
            Some(p) => joints[l] - joints[*p],
            None => Vec3::zeros(),
        };
        segments.push(BindSegment {
            start: joints[l],
            end: joints[l] + dir * leaf_extension,
            joint: l,
        });
    }
    segments
}

/// Inverse-distance skinning weights: each vertex is bound to its
/// `k_nearest` closest segments with weight `1 / max(d, eps)^power`, summed
/// per owning joint and normalized. Returns a row-major `N x k` matrix.
pub fn inverse_distance_weights(
    vertices: &[Vec3],
    segments: &[BindSegment],
    num_joints: usize,
    power: f64,
    k_nearest: usize,
) -> Result<Vec<f64>> {
    if segments.is_empty() {
        return Err(Error::invalid("no bone segments to bind to"));
    }
    if k_nearest == 0 {
        return Err(Error::invalid("k_nearest must be at least 1"));
    }
    if !(power.is_finite() && power > 0.0) {
        return Err(Error::invalid(format!("binding power must be positive, got {power}")));
    }
    let mut weights = vec![0.0; vertices.len() * num_joints];
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(segments.len());
    for (v, p) in vertices.iter().enumerate() {
        dists.clear();
        dists.extend(
            segments
                .iter()
                .enumerate()
                .map(|(i, s)| (point_segment_distance(p, &s.start, &s.end).0, i)),
        );
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let row = &mut weights[v * num_joints..(v + 1) * num_joints];
        let mut total = 0.0;
        for &(d, i) in dists.iter().take(k_nearest) {
            let w = d.max(BIND_EPSILON).powf(-power);
            row[segments[i].joint] += w;
            total += w;
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    Ok(weights)
}
