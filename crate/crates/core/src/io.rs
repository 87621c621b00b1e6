//! Binary artifact formats, all little-endian with a four-byte magic and
//! a u32 version:
//!
//! * `A3PC` scene: point count, label flag, class count, `N x 3` f64
//!   coordinates, then (if labelled) `N` u16 labels.
//! * `A3FR` frame: intrinsics as 6 f64 (fx, fy, cx, cy, width, height),
//!   pose as 12 f64 (row-major rotation then translation), u32
//!   width/height, then the f32 depth map row-major.
//! * `A3FM` feature map: u32 width, height, dim, then f32 values
//!   row-major with the channel fastest.
//! * `A3FB` fused bank: u32 point count, u32 teacher count, per-teacher
//!   u32 dims, per-teacher `N x dim` f32 values, then `N` u32 view counts.
//! * `A3CK` checkpoint: JSON-serialized student config, the step counter,
//!   then every parameter tensor as f64 with declared shapes (raw sigma
//!   values included).
//!
//! Readers report malformed input with the byte offset where parsing
//! failed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusedFeatureBank;
use crate::geometry::{CameraIntrinsics, DepthMap, Frame, Pose};
use crate::linalg::{Mat3, Matrix, Vec3};
use crate::scene::PointCloud;
use crate::student::{Layer, StudentConfig, StudentModel};
use crate::teachers::FeatureMap;

pub const VERSION: u32 = 1;

const MAGIC_SCENE: &[u8; 4] = b"A3PC";
const MAGIC_FRAME: &[u8; 4] = b"A3FR";
const MAGIC_FEATURE_MAP: &[u8; 4] = b"A3FM";
const MAGIC_BANK: &[u8; 4] = b"A3FB";
const MAGIC_CHECKPOINT: &[u8; 4] = b"A3CK";

struct Reader {
    data: Vec<u8>,
    offset: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        Ok(Reader {
            data: fs::read(path).map_err(|e| Error::io(path, e))?,
            offset: 0,
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.data.len() {
            return Err(self.fail(format!(
                "truncated: need {n} more bytes, only {} remain of {}",
                self.data.len() - self.offset,
                self.data.len()
            )));
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            let got: Vec<u8> = got.to_vec();
            self.offset -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION {
            self.offset -= 4;
            return Err(self.fail(format!("unsupported version {v}, expected {VERSION}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.offset != self.data.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: format!("{} trailing bytes", self.data.len() - self.offset),
            });
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC_SCENE);
    w.u32(VERSION);
    w.u32(cloud.len() as u32);
    w.u8(u8::from(cloud.labels.is_some()));
    w.u32(cloud.num_classes);
    for p in &cloud.points {
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.z);
    }
    if let Some(ref labels) = cloud.labels {
        for &l in labels {
            w.u16(l);
        }
    }
    w.save(path)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_SCENE)?;
    r.version()?;
    let n = r.u32()? as usize;
    let has_labels = r.u8()? != 0;
    let k = r.u32()?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u16()?);
        }
        Some(l)
    } else {
        None
    };
    r.done()?;
    let scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    PointCloud::new(points, labels, k, scene_id)
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC_FRAME);
    w.u32(VERSION);
    let intr = &frame.intrinsics;
    for v in [
        intr.fx,
        intr.fy,
        intr.cx,
        intr.cy,
        f64::from(intr.width),
        f64::from(intr.height),
    ] {
        w.f64(v);
    }
    for row in &frame.pose.rotation.rows {
        for &v in row {
            w.f64(v);
        }
    }
    w.f64(frame.pose.translation.x);
    w.f64(frame.pose.translation.y);
    w.f64(frame.pose.translation.z);
    w.u32(frame.depth.width);
    w.u32(frame.depth.height);
    for &d in &frame.depth.values {
        w.f32(d);
    }
    w.save(path)
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_FRAME)?;
    r.version()?;
    let fx = r.f64()?;
    let fy = r.f64()?;
    let cx = r.f64()?;
    let cy = r.f64()?;
    let iw = r.f64()?;
    let ih = r.f64()?;
    let mut rows = [[0.0; 3]; 3];
    for row in &mut rows {
        for v in row.iter_mut() {
            *v = r.f64()?;
        }
    }
    let translation = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let width = r.u32()?;
    let height = r.u32()?;
    if f64::from(width) != iw || f64::from(height) != ih {
        return Err(Error::validation(format!(
            "frame depth {width}x{height} disagrees with intrinsics {iw}x{ih}"
        )));
    }
    let values = r.f32_vec(width as usize * height as usize)?;
    r.done()?;
    let intrinsics = CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
    };
    intrinsics.validate()?;
    let pose = Pose {
        rotation: Mat3 { rows },
        translation,
    };
    pose.validate()?;
    Ok(Frame {
        pose,
        intrinsics,
        depth: DepthMap {
            width,
            height,
            values,
        },
    })
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    map.validate()?;
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC_FEATURE_MAP);
    w.u32(VERSION);
    w.u32(map.width);
    w.u32(map.height);
    w.u32(map.dim as u32);
    for &v in &map.values {
        w.f32(v);
    }
    w.save(path)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_FEATURE_MAP)?;
    r.version()?;
    let width = r.u32()?;
    let height = r.u32()?;
    let dim = r.u32()? as usize;
    let values = r.f32_vec(width as usize * height as usize * dim)?;
    r.done()?;
    let map = FeatureMap {
        width,
        height,
        dim,
        values,
    };
    map.validate()?;
    Ok(map)
}

/// Bank values are f64 in memory but stored as f32; saving rounds.
pub fn write_bank(path: &Path, bank: &FusedFeatureBank) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC_BANK);
    w.u32(VERSION);
    w.u32(bank.num_points() as u32);
    w.u32(bank.num_teachers() as u32);
    for slice in &bank.slices {
        w.u32(slice.cols() as u32);
    }
    for slice in &bank.slices {
        for &v in slice.data() {
            w.f32(v as f32);
        }
    }
    for &c in &bank.counts {
        w.u32(c);
    }
    w.save(path)
}

pub fn read_bank(path: &Path) -> Result<FusedFeatureBank> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_BANK)?;
    r.version()?;
    let n = r.u32()? as usize;
    let teachers = r.u32()? as usize;
    let mut dims = Vec::with_capacity(teachers);
    for _ in 0..teachers {
        dims.push(r.u32()? as usize);
    }
    let mut slices = Vec::with_capacity(teachers);
    for &d in &dims {
        let raw = r.f32_vec(n * d)?;
        slices.push(Matrix::from_vec(
            n,
            d,
            raw.into_iter().map(f64::from).collect(),
        ));
    }
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        counts.push(r.u32()?);
    }
    r.done()?;
    let mask = counts.iter().map(|&c| c > 0).collect();
    Ok(FusedFeatureBank {
        slices,
        counts,
        mask,
    })
}

fn write_layer(w: &mut Writer, layer: &Layer) {
    w.u32(layer.in_dim as u32);
    w.u32(layer.out_dim as u32);
    for &v in &layer.weights {
        w.f64(v);
    }
    for &v in &layer.biases {
        w.f64(v);
    }
}

fn read_layer(r: &mut Reader) -> Result<Layer> {
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let weights = r.f64_vec(in_dim * out_dim)?;
    let biases = r.f64_vec(out_dim)?;
    Ok(Layer {
        in_dim,
        out_dim,
        weights,
        biases,
    })
}

pub fn write_checkpoint(path: &Path, model: &StudentModel, step: u64) -> Result<()> {
    let config_json =
        serde_json::to_vec(&model.config).map_err(|e| Error::validation(e.to_string()))?;
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC_CHECKPOINT);
    w.u32(VERSION);
    w.u32(config_json.len() as u32);
    w.buf.extend_from_slice(&config_json);
    w.u64(step);
    w.u32(model.trunk.len() as u32);
    for layer in &model.trunk {
        write_layer(&mut w, layer);
    }
    w.u32(model.heads.len() as u32);
    for layer in &model.heads {
        write_layer(&mut w, layer);
    }
    w.u32(model.raw_sigma.len() as u32);
    for &s in &model.raw_sigma {
        w.f64(s);
    }
    w.save(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(StudentModel, u64)> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC_CHECKPOINT)?;
    r.version()?;
    let config_len = r.u32()? as usize;
    let config_offset = r.offset;
    let config_bytes = r.take(config_len)?.to_vec();
    let config: StudentConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| Error::Format {
            offset: config_offset as u64,
            message: format!("config JSON: {e}"),
        })?;
    let step = r.u64()?;
    let n_trunk = r.u32()? as usize;
    let mut trunk = Vec::with_capacity(n_trunk);
    for _ in 0..n_trunk {
        trunk.push(read_layer(&mut r)?);
    }
    let n_heads = r.u32()? as usize;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        heads.push(read_layer(&mut r)?);
    }
    let n_sigma = r.u32()? as usize;
    let raw_sigma = r.f64_vec(n_sigma)?;
    r.done()?;
    config.validate()?;
    if n_heads != config.heads.len() || n_sigma != config.heads.len() {
        return Err(Error::validation(
            "checkpoint tensor counts disagree with its config",
        ));
    }
    Ok((
        StudentModel {
            config,
            trunk,
            heads,
            raw_sigma,
        },
        step,
    ))
}

/// FNV-1a 64-bit content digest, reported as fixed-width hex.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_hex(&bytes))
}
