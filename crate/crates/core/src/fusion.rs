//! Multi-view feature fusion into per-point supervision targets, the
//! de-mean re-centering, and feature-value histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{correspondence_for_point, Frame};
use crate::linalg::Matrix;
use crate::scene::PointCloud;
use crate::teachers::{FeatureMap, TeacherSpec};

/// One posed view bundled with the per-teacher feature maps rendered
/// from it. `features[i]` belongs to `teachers[i]` at the fusion call.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub frame: Frame,
    pub features: Vec<FeatureMap>,
}

/// Per-teacher fused point features with shared observation bookkeeping.
///
/// Rows of unobserved points (mask off) are all-zero with a zero count.
/// Visibility is shared across teachers: a point either sees a frame (and
/// receives every teacher's pixel feature) or it does not.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureBank {
    /// One N x D_i matrix per teacher.
    pub slices: Vec<Matrix>,
    /// Number of views that contributed to each point.
    pub counts: Vec<u32>,
    /// `counts[i] > 0`.
    pub mask: Vec<bool>,
}

impl FusedFeatureBank {
    pub fn num_points(&self) -> usize {
        self.counts.len()
    }

    pub fn num_teachers(&self) -> usize {
        self.slices.len()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Histogram bin layout over a scalar value range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::validation("histogram range requires lo < hi"));
        }
        if self.bins < 1 {
            return Err(Error::validation("histogram needs at least one bin"));
        }
        Ok(())
    }
}

/// Bin counts plus the two out-of-range counters. The total across
/// `counts`, `underflow`, and `overflow` equals the number of values seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Mass in the out-of-range counters plus the first and last bin.
    pub fn tail_mass(&self) -> u64 {
        let outer = match self.counts.len() {
            0 => 0,
            1 => self.counts[0],
            n => self.counts[0] + self.counts[n - 1],
        };
        self.underflow + self.overflow + outer
    }
}

/// Fuses multi-view 2D features into per-point, per-teacher targets.
///
/// A point's target for teacher `i` is the arithmetic mean of that
/// teacher's feature at the corresponding pixel over all frames where the
/// point passes the visibility test (rounded projection inside the image
/// and depth agreement within `depth_tol`). Frames are accumulated in
/// ascending index order per point, so the result is independent of
/// parallel scheduling.
pub fn fuse_views(
    cloud: &PointCloud,
    frames: &[FrameFeatures],
    teachers: &[TeacherSpec],
    depth_tol: f64,
) -> Result<FusedFeatureBank> {
    if teachers.is_empty() {
        return Err(Error::validation("fusion requires at least one teacher"));
    }
    for (fi, ff) in frames.iter().enumerate() {
        if ff.features.len() != teachers.len() {
            return Err(Error::validation(format!(
                "frame {fi} has {} feature maps for {} teachers",
                ff.features.len(),
                teachers.len()
            )));
        }
        for (ti, (map, teacher)) in ff.features.iter().zip(teachers).enumerate() {
            if map.dim != teacher.dim {
                return Err(Error::validation(format!(
                    "frame {fi} teacher {ti}: map dim {} != teacher dim {}",
                    map.dim, teacher.dim
                )));
            }
            if map.width != ff.frame.intrinsics.width || map.height != ff.frame.intrinsics.height {
                return Err(Error::validation(format!(
                    "frame {fi} teacher {ti}: map {}x{} != frame {}x{}",
                    map.width, map.height, ff.frame.intrinsics.width, ff.frame.intrinsics.height
                )));
            }
        }
    }

    let n = cloud.len();
    let dims: Vec<usize> = teachers.iter().map(|t| t.dim).collect();
    struct PointAcc {
        sums: Vec<Vec<f64>>,
        count: u32,
    }
    let fused: Vec<PointAcc> = exec::map_range(n, |pi| {
        let mut acc = PointAcc {
            sums: dims.iter().map(|&d| vec![0.0; d]).collect(),
            count: 0,
        };
        for ff in frames {
            if let Some(((u, v), _)) = correspondence_for_point(
                cloud.points[pi],
                &ff.frame.pose,
                &ff.frame.intrinsics,
                &ff.frame.depth,
                depth_tol,
            ) {
                for (sum, map) in acc.sums.iter_mut().zip(&ff.features) {
                    for (s, &x) in sum.iter_mut().zip(map.pixel(u, v)) {
                        *s += f64::from(x);
                    }
                }
                acc.count += 1;
            }
        }
        acc
    });

    let mut slices: Vec<Matrix> = dims.iter().map(|&d| Matrix::zeros(n, d)).collect();
    let mut counts = vec![0u32; n];
    let mut mask = vec![false; n];
    for (pi, acc) in fused.into_iter().enumerate() {
        counts[pi] = acc.count;
        mask[pi] = acc.count > 0;
        if acc.count > 0 {
            let inv = 1.0 / f64::from(acc.count);
            for (slice, sum) in slices.iter_mut().zip(acc.sums) {
                for (dst, s) in slice.row_mut(pi).iter_mut().zip(sum) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(FusedFeatureBank {
        slices,
        counts,
        mask,
    })
}

/// Subtracts each row's scalar channel mean: `f - mean(f) * 1`.
pub fn de_mean(slice: &Matrix) -> Matrix {
    let mut out = slice.clone();
    let cols = out.cols();
    if cols == 0 {
        return out;
    }
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mu = row.iter().sum::<f64>() / cols as f64;
        row.iter_mut().for_each(|v| *v -= mu);
    }
    out
}

/// Subtracts the per-channel mean taken over all rows (the dataset-level
/// alternative reading of the re-centering).
pub fn de_mean_per_channel(slice: &Matrix) -> Matrix {
    let mut out = slice.clone();
    let (rows, cols) = (out.rows(), out.cols());
    if rows == 0 || cols == 0 {
        return out;
    }
    let mut mu = vec![0.0; cols];
    for i in 0..rows {
        for (m, v) in mu.iter_mut().zip(out.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= rows as f64);
    for i in 0..rows {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    out
}

/// Which mean the de-mean re-centering subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeMeanMode {
    /// Scalar mean across channels, per point.
    #[default]
    PerPoint,
    /// Per-channel mean across the dataset.
    PerChannel,
}

pub fn de_mean_with_mode(slice: &Matrix, mode: DeMeanMode) -> Matrix {
    match mode {
        DeMeanMode::PerPoint => de_mean(slice),
        DeMeanMode::PerChannel => de_mean_per_channel(slice),
    }
}

/// Histogram over every scalar entry of the slice. Values below `lo` and
/// at or above `hi` land in the underflow/overflow counters.
pub fn feature_histogram(slice: &Matrix, spec: &HistogramSpec) -> Result<Histogram> {
    spec.validate()?;
    let mut counts = vec![0u64; spec.bins];
    let mut underflow = 0u64;
    let mut overflow = 0u64;
    let scale = spec.bins as f64 / (spec.hi - spec.lo);
    for &v in slice.data() {
        if v < spec.lo {
            underflow += 1;
        } else if v >= spec.hi {
            overflow += 1;
        } else {
            let bin = ((v - spec.lo) * scale) as usize;
            counts[bin.min(spec.bins - 1)] += 1;
        }
    }
    Ok(Histogram {
        counts,
        underflow,
        overflow,
    })
}
