//! Pinhole camera model, world/pixel projection in homogeneous
//! coordinates, z-buffer depth rendering, and point-pixel correspondence
//! extraction with an occlusion test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{Mat3, Vec3};
use crate::scene::PointCloud;

/// Minimum camera-space depth for a projection to count as in front of
/// the camera.
pub const EPS_Z: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::validation("image size must be at least 1x1"));
        }
        Ok(())
    }
}

/// World-to-camera rigid transform: `q = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    /// Checks orthonormality (`||R^T R - I||_inf < 1e-9`) and unit
    /// determinant.
    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((rtr.rows[i][j] - target).abs());
            }
        }
        if max_dev >= 1e-9 {
            return Err(Error::validation(format!(
                "rotation not orthonormal (deviation {max_dev:.3e})"
            )));
        }
        if (self.rotation.det() - 1.0).abs() >= 1e-9 {
            return Err(Error::validation("rotation determinant must be 1"));
        }
        Ok(())
    }

    /// The inverse transform (camera-to-world as a world-to-camera pose).
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// Camera at `eye` looking at `target`, with +z forward and `up`
    /// resolving the roll (defaults to world +z when nearly parallel).
    pub fn look_at(eye: Vec3, target: Vec3) -> Pose {
        let forward = (target - eye).normalized();
        let up_hint = if forward.z.abs() > 0.999 {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let right = forward.cross(up_hint).normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        Pose {
            rotation,
            translation: -rotation.mul_vec(eye),
        }
    }
}

/// Row-major depth image; values are meters, zero or negative means
/// "no depth".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn empty(width: u32, height: u32) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn at(&self, u: u32, v: u32) -> f32 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.at(u, v) > 0.0
    }
}

/// One posed view: camera intrinsics, world-to-camera pose, and the
/// rendered depth map used for visibility tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthMap,
}

/// A point-pixel match that survived the occlusion test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correspondence {
    pub point_index: usize,
    pub pixel: (u32, u32),
    /// Camera-space depth in meters; always positive.
    pub cam_depth_bits: u64,
}

impl Correspondence {
    pub fn cam_depth(&self) -> f64 {
        f64::from_bits(self.cam_depth_bits)
    }
}

/// Projects a world point. Returns `None` when the camera-space depth is
/// at or below [`EPS_Z`]; otherwise `(u, v, depth)` in pixels and meters.
pub fn project_point(p: Vec3, pose: &Pose, intr: &CameraIntrinsics) -> Option<(f64, f64, f64)> {
    let q = pose.rotation.mul_vec(p) + pose.translation;
    if q.z <= EPS_Z {
        return None;
    }
    let u = intr.fx * q.x / q.z + intr.cx;
    let v = intr.fy * q.y / q.z + intr.cy;
    Some((u, v, q.z))
}

/// Lifts a pixel at a known depth back to world space. Exact inverse of
/// [`project_point`] for positive depths.
pub fn backproject_pixel(
    u: f64,
    v: f64,
    depth: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::validation("backprojection requires positive depth"));
    }
    let q = Vec3::new(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    );
    Ok(pose.rotation.transpose().mul_vec(q - pose.translation))
}

/// Pixel column range hit by a splat centered at real coordinate `c` with
/// Chebyshev radius `r`: all integers within `[c - r, c + r]`.
fn splat_range(c: f64, r: f64, size: u32) -> Option<(u32, u32)> {
    let lo = (c - r).ceil().max(0.0);
    let hi = (c + r).floor().min(size as f64 - 1.0);
    if lo > hi {
        return None;
    }
    Some((lo as u32, hi as u32))
}

/// Z-buffer render: each pixel holds the minimum camera depth over all
/// points whose projection falls within `splat_radius` (Chebyshev) of it;
/// pixels hit by no point hold zero.
///
/// Parallel execution folds fixed chunks of points into local buffers and
/// merges them with per-pixel `min`, which is order-independent, so the
/// output is bit-identical to a serial render.
pub fn render_depth(
    cloud: &PointCloud,
    pose: &Pose,
    intr: &CameraIntrinsics,
    splat_radius: u32,
) -> DepthMap {
    let w = intr.width as usize;
    let h = intr.height as usize;
    let r = splat_radius as f64;
    let splat_point = |buf: &mut Vec<f32>, p: Vec3| {
        if let Some((u, v, depth)) = project_point(p, pose, intr) {
            if let (Some((u0, u1)), Some((v0, v1))) = (
                splat_range(u, r, intr.width),
                splat_range(v, r, intr.height),
            ) {
                let d = depth as f32;
                for py in v0..=v1 {
                    for px in u0..=u1 {
                        let idx = py as usize * w + px as usize;
                        if buf[idx] <= 0.0 || d < buf[idx] {
                            buf[idx] = d;
                        }
                    }
                }
            }
        }
    };
    let merged = exec::chunked_reduce(
        cloud.len(),
        || vec![0.0f32; w * h],
        |mut buf, i| {
            splat_point(&mut buf, cloud.points[i]);
            buf
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                if *x <= 0.0 || (y > 0.0 && y < *x) {
                    *x = y;
                }
            }
            a
        },
    )
    .unwrap_or_else(|| vec![0.0f32; w * h]);
    DepthMap {
        width: intr.width,
        height: intr.height,
        values: merged,
    }
}

/// Extracts point-pixel correspondences. A point matches iff its rounded
/// projection lands inside the image, its camera depth is positive, and
/// the depth map agrees within `depth_tol` (the occlusion test). Output
/// is ordered by point index.
pub fn compute_correspondences(
    cloud: &PointCloud,
    pose: &Pose,
    intr: &CameraIntrinsics,
    depth: &DepthMap,
    depth_tol: f64,
) -> Result<Vec<Correspondence>> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::validation(format!(
            "depth map {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    if !(depth_tol > 0.0) {
        return Err(Error::validation("depth tolerance must be positive"));
    }
    let per_point = exec::map_slice(&cloud.points, |&p| {
        correspondence_for_point(p, pose, intr, depth, depth_tol)
    });
    Ok(per_point
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.map(|(pixel, cam_depth)| Correspondence {
                point_index: i,
                pixel,
                cam_depth_bits: cam_depth.to_bits(),
            })
        })
        .collect())
}

/// Single-point correspondence test; shared with the fusion stage.
pub(crate) fn correspondence_for_point(
    p: Vec3,
    pose: &Pose,
    intr: &CameraIntrinsics,
    depth: &DepthMap,
    depth_tol: f64,
) -> Option<((u32, u32), f64)> {
    let (u, v, cam_depth) = project_point(p, pose, intr)?;
    let pu = u.round();
    let pv = v.round();
    if pu < 0.0 || pv < 0.0 || pu > f64::from(intr.width - 1) || pv > f64::from(intr.height - 1) {
        return None;
    }
    let (pu, pv) = (pu as u32, pv as u32);
    let stored = f64::from(depth.at(pu, pv));
    if (cam_depth - stored).abs() <= depth_tol {
        Some(((pu, pv), cam_depth))
    } else {
        None
    }
}
