//! Mesh cuboids (`T x N x 3` vertex stacks), joint sequences (`T x k x 3`),
//! clip sampling and their binary files.
//!
//! Both containers store single-precision coordinates so that reading a
//! written file reproduces the value bit for bit. Arithmetic elsewhere is
//! done in `f64` after widening.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

const VERSION: u32 = 1;
const CHANNELS: u32 = 3;
pub const HEADER_BYTES: usize = 20;

/// Shared `frames x items x 3` storage.
#[derive(Clone, Debug, PartialEq)]
struct Frames {
    frames: usize,
    items: usize,
    data: Vec<f32>,
}

impl Frames {
    fn new(what: &str, frames: usize, items: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || items == 0 {
            return Err(Error::invalid(format!("{what} needs at least one frame and one row, got {frames} x {items}")));
        }
        if data.len() != frames * items * 3 {
            return Err(Error::dim(format!(
                "{what} data has {} values, expected {frames} x {items} x 3",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{what} entry {i}")));
        }
        Ok(Self { frames, items, data })
    }

    fn from_rows(what: &str, rows: &[Vec<Vec3>]) -> Result<Self> {
        let items = rows.first().map_or(0, Vec::len);
        if let Some(t) = rows.iter().position(|r| r.len() != items) {
            return Err(Error::dim(format!(
                "{what} frame {t} has {} rows, frame 0 has {items}",
                rows[t].len()
            )));
        }
        let data = rows.iter().flatten().flat_map(|v| v.iter().map(|&x| x as f32)).collect();
        Self::new(what, rows.len(), items, data)
    }

    #[inline]
    fn get(&self, t: usize, i: usize) -> Vec3 {
        let o = (t * self.items + i) * 3;
        Vec3::new(self.data[o] as f64, self.data[o + 1] as f64, self.data[o + 2] as f64)
    }

    fn frame(&self, t: usize) -> Vec<Vec3> {
        (0..self.items).map(|i| self.get(t, i)).collect()
    }

    fn to_bytes(&self, magic: &[u8; 4]) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.magic(magic).u32(VERSION).len_u32(self.frames)?.len_u32(self.items)?.u32(CHANNELS);
        w.f32s(self.data.iter().copied());
        Ok(w.into_bytes())
    }

    fn from_bytes(kind: &'static str, magic: &[u8; 4], data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(kind, data);
        r.expect_magic(magic)?;
        r.expect_version(VERSION)?;
        let frames = r.u32()? as usize;
        let items = r.u32()? as usize;
        let at = r.pos();
        let channels = r.u32()?;
        if channels != CHANNELS {
            return Err(r.error_at(at, format!("channel count {channels}, expected {CHANNELS}")));
        }
        if frames == 0 || items == 0 {
            return Err(r.error(format!("empty {frames} x {items} payload")));
        }
        let values = frames
            .checked_mul(items)
            .and_then(|x| x.checked_mul(3))
            .ok_or_else(|| r.error("dimensions overflow"))?;
        let payload = r.f32s(values)?;
        r.finish()?;
        if let Some(i) = payload.iter().position(|x| !x.is_finite()) {
            return Err(r.error_at(HEADER_BYTES + 4 * i, "non-finite coordinate"));
        }
        Self::new(kind, frames, items, payload)
    }
}

macro_rules! frame_stack {
    ($name:ident, $what:literal, $magic:literal, $items:ident) => {
        impl $name {
            /// Builds from raw `frames x items x 3` single-precision data.
            pub fn new(frames: usize, $items: usize, data: Vec<f32>) -> Result<Self> {
                Ok(Self(Frames::new($what, frames, $items, data)?))
            }

            /// Builds from per-frame rows, rounding to single precision.
            pub fn from_frames(rows: &[Vec<Vec3>]) -> Result<Self> {
                Ok(Self(Frames::from_rows($what, rows)?))
            }

            pub fn frames(&self) -> usize {
                self.0.frames
            }

            pub fn $items(&self) -> usize {
                self.0.items
            }

            pub fn data(&self) -> &[f32] {
                &self.0.data
            }

            #[inline]
            pub fn get(&self, t: usize, i: usize) -> Vec3 {
                self.0.get(t, i)
            }

            pub fn frame(&self, t: usize) -> Vec<Vec3> {
                self.0.frame(t)
            }

            pub fn to_frames(&self) -> Vec<Vec<Vec3>> {
                (0..self.frames()).map(|t| self.frame(t)).collect()
            }

            /// Frames `indices` in the given order.
            pub fn select(&self, indices: &[usize]) -> Result<Self> {
                if let Some(&t) = indices.iter().find(|&&t| t >= self.frames()) {
                    return Err(Error::invalid(format!("frame {t} outside 0..{}", self.frames())));
                }
                let width = self.0.items * 3;
                let data = indices
                    .iter()
                    .flat_map(|&t| self.0.data[t * width..(t + 1) * width].iter().copied())
                    .collect();
                Self::new(indices.len(), self.0.items, data)
            }

            /// Every frame restricted to items `indices`, in that order.
            pub fn select_items(&self, indices: &[usize]) -> Result<Self> {
                let items = self.0.items;
                if let Some(&i) = indices.iter().find(|&&i| i >= items) {
                    return Err(Error::invalid(format!("item {i} outside 0..{items}")));
                }
                let data = (0..self.frames())
                    .flat_map(|t| indices.iter().flat_map(move |&i| {
                        let at = (t * items + i) * 3;
                        self.0.data[at..at + 3].iter().copied()
                    }))
                    .collect();
                Self::new(self.frames(), indices.len(), data)
            }

            pub fn to_bytes(&self) -> Result<Vec<u8>> {
                self.0.to_bytes($magic)
            }

            pub fn from_bytes(data: &[u8]) -> Result<Self> {
                let kind = std::str::from_utf8($magic).unwrap();
                Ok(Self(Frames::from_bytes(kind, $magic, data)?))
            }

            pub fn write(&self, path: &Path) -> Result<()> {
                let bytes = self.to_bytes()?;
                std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
            }

            pub fn read(path: &Path) -> Result<Self> {
                Self::from_bytes(&read_file(path)?)
            }
        }
    };
}

/// `T x N x 3` stack of mesh vertex positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshCuboid(Frames);

/// `T x k x 3` stack of joint positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSeq(Frames);

frame_stack!(MeshCuboid, "MCUB", b"MCUB", vertices);
frame_stack!(JointSeq, "MJNT", b"MJNT", joints);

/// Stacks meshes sharing a vertex count into a cuboid.
pub fn make_cuboid(meshes: &[Mesh]) -> Result<MeshCuboid> {
    if meshes.is_empty() {
        return Err(Error::invalid("cannot build a cuboid from zero meshes"));
    }
    let rows: Vec<Vec<Vec3>> = meshes.iter().map(|m| m.vertices.clone()).collect();
    MeshCuboid::from_frames(&rows)
}

/// Splits a cuboid back into one mesh per frame sharing `faces`.
pub fn unflatten(cuboid: &MeshCuboid, faces: &[[u32; 3]]) -> Result<Vec<Mesh>> {
    (0..cuboid.frames())
        .map(|t| Mesh::new(cuboid.frame(t), faces.to_vec()))
        .collect()
}

pub fn write_cuboid(path: &Path, cuboid: &MeshCuboid) -> Result<()> {
    cuboid.write(path)
}

pub fn read_cuboid(path: &Path) -> Result<MeshCuboid> {
    MeshCuboid::read(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Uniformly random window.
    Train,
    /// The centered window.
    Test,
}

/// Source frame indices of a `len`-frame clip taken from every `stride`-th
/// frame of a `total_frames` sequence.
pub fn sample_clip(total_frames: usize, stride: usize, len: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>> {
    if stride == 0 || len == 0 {
        return Err(Error::invalid(format!("stride ({stride}) and clip length ({len}) must be positive")));
    }
    let strided = total_frames.div_ceil(stride);
    if strided < len {
        return Err(Error::invalid(format!(
            "{total_frames} frames at stride {stride} leave {strided} samples, fewer than the {len} required"
        )));
    }
    let start = match mode {
        SampleMode::Test => (strided - len) / 2,
        SampleMode::Train => ChaCha8Rng::seed_from_u64(seed).random_range(0..=strided - len),
    };
    Ok((start..start + len).map(|i| i * stride).collect())
}

/// Provenance of one clip on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub source_id: String,
    pub frame_rate: f64,
    pub stride: usize,
    pub start: usize,
    pub length: usize,
    pub cuboid_path: PathBuf,
    pub joints_path: PathBuf,
}

impl ClipManifest {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid(format!("clip {}: stride must be at least 1", self.source_id)));
        }
        if self.length == 0 {
            return Err(Error::invalid(format!("clip {}: length must be at least 1", self.source_id)));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::invalid(format!("clip {}: frame rate must be positive", self.source_id)));
        }
        Ok(())
    }

    /// Loads the referenced cuboid and joints, resolving relative paths
    /// against `root`, and checks their frame counts against `length`.
    pub fn load(&self, root: &Path) -> Result<(MeshCuboid, JointSeq)> {
        self.validate()?;
        let cuboid = MeshCuboid::read(&root.join(&self.cuboid_path))?;
        let joints = JointSeq::read(&root.join(&self.joints_path))?;
        for (what, t) in [("cuboid", cuboid.frames()), ("joints", joints.frames())] {
            if t != self.length {
                return Err(Error::dim(format!(
                    "clip {}: {what} has {t} frames, manifest says {}",
                    self.source_id, self.length
                )));
            }
        }
        Ok((cuboid, joints))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mesh(n: usize, offset: f64) -> Mesh {
        Mesh::new((0..n).map(|i| Vec3::new(i as f64 * 0.5, offset, -offset)).collect(), vec![]).unwrap()
    }

    #[test]
    fn single_mesh_cuboid() {
        let m = mesh(5, 0.25);
        let c = make_cuboid(std::slice::from_ref(&m)).unwrap();
        assert_eq!((c.frames(), c.vertices()), (1, 5));
        assert_eq!(c.frame(0), m.vertices);
    }

    #[test]
    fn full_resolution_cuboid_dimensions() {
        let meshes: Vec<Mesh> = (0..16).map(|t| mesh(6890, t as f64)).collect();
        let c = make_cuboid(&meshes).unwrap();
        assert_eq!((c.frames(), c.vertices(), c.data().len()), (16, 6890, 16 * 6890 * 3));
        assert_eq!(unflatten(&c, &[]).unwrap(), meshes);
    }

    #[test]
    fn inconsistent_or_empty_sequences_rejected() {
        assert!(make_cuboid(&[]).is_err());
        assert!(matches!(make_cuboid(&[mesh(3, 0.0), mesh(4, 0.0)]), Err(Error::Dimension(_))));
        assert!(MeshCuboid::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn test_window_exact_fit() {
        let idx = sample_clip(400, 25, 16, SampleMode::Test, 0).unwrap();
        assert_eq!(idx, (0..16).map(|i| i * 25).collect::<Vec<_>>());
    }

    #[test]
    fn test_window_is_centered() {
        let idx = sample_clip(1000, 25, 16, SampleMode::Test, 3).unwrap();
        assert_eq!(idx.len(), 16);
        assert_eq!(idx[0], 300);
        assert_eq!(idx[15], 675);
        assert_eq!(idx, sample_clip(1000, 25, 16, SampleMode::Test, 99).unwrap());
    }

    #[test]
    fn train_window_reproducible() {
        let a = sample_clip(1000, 25, 16, SampleMode::Train, 5).unwrap();
        assert_eq!(a, sample_clip(1000, 25, 16, SampleMode::Train, 5).unwrap());
        assert!(a.windows(2).all(|w| w[1] - w[0] == 25));
    }

    #[test]
    fn too_short_sequence_names_counts() {
        let e = sample_clip(300, 25, 16, SampleMode::Test, 0).unwrap_err().to_string();
        assert!(e.contains("12 samples") && e.contains("16"), "{e}");
    }

    #[test]
    fn file_size_matches_header_plus_payload() {
        let c = MeshCuboid::new(2, 3, (0..18).map(|i| i as f32).collect()).unwrap();
        assert_eq!(c.to_bytes().unwrap().len(), HEADER_BYTES + 72);
    }

    #[test]
    fn wrong_magic_and_truncation_report_offsets() {
        let c = MeshCuboid::new(2, 3, (0..18).map(|i| i as f32).collect()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"MJNT");
        assert!(matches!(MeshCuboid::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            MeshCuboid::from_bytes(&bytes[..30]),
            Err(Error::Format { offset: 20, .. })
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(MeshCuboid::from_bytes(&bad_version), Err(Error::Format { offset: 4, .. })));
        let mut bad_channels = bytes;
        bad_channels[16] = 4;
        assert!(matches!(MeshCuboid::from_bytes(&bad_channels), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mcub");
        let c = MeshCuboid::new(2, 2, vec![0.1, 0.2, 0.3, 1e-30, -5.5, 7.0, 0.0, -0.0, 3.25, 1.0, 2.0, 3.0]).unwrap();
        write_cuboid(&path, &c).unwrap();
        let back = read_cuboid(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.data()[7].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn manifest_json_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let c = MeshCuboid::new(2, 1, vec![0.0; 6]).unwrap();
        let j = JointSeq::new(2, 1, vec![0.0; 6]).unwrap();
        c.write(&dir.path().join("a.mcub")).unwrap();
        j.write(&dir.path().join("a.mjnt")).unwrap();
        let mut m = ClipManifest {
            source_id: "s1/walk".into(),
            frame_rate: 50.0,
            stride: 25,
            start: 300,
            length: 2,
            cuboid_path: "a.mcub".into(),
            joints_path: "a.mjnt".into(),
        };
        assert_eq!(ClipManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
        assert!(m.load(dir.path()).is_ok());
        m.length = 3;
        assert!(m.load(dir.path()).is_err());
        m.stride = 0;
        assert!(m.validate().is_err());
    }

    proptest! {
        #[test]
        fn cuboid_file_round_trip_is_identity(t in 1usize..6, n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..t * n * 3).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let c = MeshCuboid::new(t, n, data).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = MeshCuboid::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let j = JointSeq::new(t, n, c.data().to_vec()).unwrap();
            prop_assert_eq!(JointSeq::from_bytes(&j.to_bytes().unwrap()).unwrap(), j);
        }

        #[test]
        fn frames_extract_exactly(t in 1usize..5, n in 1usize..10) {
            let meshes: Vec<Mesh> = (0..t).map(|i| mesh(n, i as f64 * 0.125)).collect();
            let c = make_cuboid(&meshes).unwrap();
            for (i, m) in meshes.iter().enumerate() {
                prop_assert_eq!(&c.frame(i), &m.vertices);
            }
        }
    }
}
