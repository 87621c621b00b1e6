//! Point clouds, labels, synthetic scene generation, voxel downsampling,
//! point sampling, and geometric augmentations.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::rng::{stage, Rng};

/// A 3D point cloud with optional per-point class labels.
///
/// Coordinates are meters. When labels are present they have the same
/// length as `points`, every id is below `num_classes`, and
/// `num_classes >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<u16>>,
    pub num_classes: u32,
    pub scene_id: String,
}

impl PointCloud {
    pub fn new(
        points: Vec<Vec3>,
        labels: Option<Vec<u16>>,
        num_classes: u32,
        scene_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite coordinate in point cloud: {p:?}"
            )));
        }
        if let Some(ref lab) = labels {
            if lab.len() != points.len() {
                return Err(Error::validation(format!(
                    "labels length {} != point count {}",
                    lab.len(),
                    points.len()
                )));
            }
            if num_classes < 2 {
                return Err(Error::validation(
                    "labelled cloud requires at least 2 classes",
                ));
            }
            if let Some(&bad) = lab.iter().find(|&&l| u32::from(l) >= num_classes) {
                return Err(Error::validation(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(PointCloud {
            points,
            labels,
            num_classes,
            scene_id: scene_id.into(),
        })
    }

    pub fn unlabelled(points: Vec<Vec3>, scene_id: impl Into<String>) -> Result<Self> {
        Self::new(points, None, 0, scene_id)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box, or `None` for an empty cloud.
    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        Some((lo, hi))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let mut sum = Vec3::ZERO;
        for p in &self.points {
            sum = sum + *p;
        }
        Some(sum * (1.0 / self.points.len() as f64))
    }
}

/// Recipe for one deterministic synthetic scene.
///
/// The same spec (seed included) always generates a bit-identical cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Scene extent (dx, dy, dz) in meters; all components positive.
    pub extent: [f64; 3],
    pub num_objects: usize,
    pub num_classes: u32,
    pub points_per_object: usize,
    pub floor_and_walls: bool,
    /// Multiplier on object half-sizes; 1.0 is the nominal distribution.
    /// Used by the cross-domain harness to shift geometry only.
    #[serde(default = "default_size_scale")]
    pub size_scale: f64,
}

fn default_size_scale() -> f64 {
    1.0
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::validation(format!(
                "scene extent must be positive, got {:?}",
                self.extent
            )));
        }
        if self.num_objects < 1 {
            return Err(Error::validation("num_objects must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be >= 2"));
        }
        if self.points_per_object < 1 {
            return Err(Error::validation("points_per_object must be >= 1"));
        }
        if !(self.size_scale > 0.0) {
            return Err(Error::validation("size_scale must be positive"));
        }
        Ok(())
    }
}

/// Number of floor points generated when `floor_and_walls` is on.
pub fn floor_point_budget(points_per_object: usize) -> usize {
    2 * points_per_object
}

/// Number of wall points generated when `floor_and_walls` is on
/// (four walls, each with `points_per_object / 2` points).
pub fn wall_point_budget(points_per_object: usize) -> usize {
    4 * (points_per_object / 2)
}

/// Quantized voxel coordinate: `floor(coordinate / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn from_point(p: Vec3, voxel_size: f64) -> Self {
        VoxelKey {
            ix: (p.x / voxel_size).floor() as i64,
            iy: (p.y / voxel_size).floor() as i64,
            iz: (p.z / voxel_size).floor() as i64,
        }
    }
}

/// Generates a labelled synthetic scene: `num_objects` primitives plus
/// optional floor and wall planes. Even class ids become boxes, odd ids
/// ellipsoids, so labels are exact by construction. Floor points take
/// class 0 and wall points class 1.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let ext = Vec3::new(spec.extent[0], spec.extent[1], spec.extent[2]);
    let k = u64::from(spec.num_classes);
    let mut points = Vec::new();
    let mut labels: Vec<u16> = Vec::new();

    for obj in 0..spec.num_objects {
        let mut rng = Rng::from_stream(spec.seed, &[stage::SCENE, 1, obj as u64]);
        let class = rng.below(k) as u16;
        let center = Vec3::new(
            rng.uniform_range(0.2 * ext.x, 0.8 * ext.x),
            rng.uniform_range(0.2 * ext.y, 0.8 * ext.y),
            rng.uniform_range(0.2 * ext.z, 0.8 * ext.z),
        );
        let min_ext = ext.x.min(ext.y).min(ext.z);
        let half = Vec3::new(
            rng.uniform_range(0.05, 0.12) * min_ext * spec.size_scale,
            rng.uniform_range(0.05, 0.12) * min_ext * spec.size_scale,
            rng.uniform_range(0.05, 0.12) * min_ext * spec.size_scale,
        );
        let is_box = class % 2 == 0;
        for _ in 0..spec.points_per_object {
            let p = if is_box {
                Vec3::new(
                    center.x + rng.uniform_range(-half.x, half.x),
                    center.y + rng.uniform_range(-half.y, half.y),
                    center.z + rng.uniform_range(-half.z, half.z),
                )
            } else {
                // Uniform in the ellipsoid: random direction, cube-root radius.
                let dir = Vec3::new(rng.normal(), rng.normal(), rng.normal());
                let dir = if dir.norm() > 1e-12 {
                    dir.normalized()
                } else {
                    Vec3::new(1.0, 0.0, 0.0)
                };
                let r = rng.uniform().cbrt();
                Vec3::new(
                    center.x + dir.x * r * half.x,
                    center.y + dir.y * r * half.y,
                    center.z + dir.z * r * half.z,
                )
            };
            points.push(p);
            labels.push(class);
        }
    }

    if spec.floor_and_walls {
        let mut rng = Rng::from_stream(spec.seed, &[stage::SCENE, 2]);
        for _ in 0..floor_point_budget(spec.points_per_object) {
            points.push(Vec3::new(
                rng.uniform_range(0.0, ext.x),
                rng.uniform_range(0.0, ext.y),
                rng.uniform_range(0.0, 0.01),
            ));
            labels.push(0);
        }
        let per_wall = spec.points_per_object / 2;
        for wall in 0..4u64 {
            let mut rng = Rng::from_stream(spec.seed, &[stage::SCENE, 3, wall]);
            for _ in 0..per_wall {
                let a = rng.uniform();
                let z = rng.uniform_range(0.0, ext.z);
                let p = match wall {
                    0 => Vec3::new(0.0, a * ext.y, z),
                    1 => Vec3::new(ext.x, a * ext.y, z),
                    2 => Vec3::new(a * ext.x, 0.0, z),
                    _ => Vec3::new(a * ext.x, ext.y, z),
                };
                points.push(p);
                labels.push(1);
            }
        }
    }

    PointCloud::new(
        points,
        Some(labels),
        spec.num_classes,
        format!("syn-{:016x}", spec.seed),
    )
}

/// Collapses the cloud to at most one point per occupied voxel. The output
/// point is the centroid of the voxel's members; the label is the majority
/// label (ties broken toward the smallest class id). Output voxels appear
/// in first-occurrence order, which makes the operation idempotent.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) {
        return Err(Error::validation("voxel_size must be positive"));
    }
    struct Acc {
        sum: Vec3,
        count: u64,
        label_counts: BTreeMap<u16, u64>,
    }
    let mut order: Vec<VoxelKey> = Vec::new();
    let mut cells: HashMap<VoxelKey, Acc> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = VoxelKey::from_point(*p, voxel_size);
        let acc = cells.entry(key).or_insert_with(|| {
            order.push(key);
            Acc {
                sum: Vec3::ZERO,
                count: 0,
                label_counts: BTreeMap::new(),
            }
        });
        acc.sum = acc.sum + *p;
        acc.count += 1;
        if let Some(ref lab) = cloud.labels {
            *acc.label_counts.entry(lab[i]).or_insert(0) += 1;
        }
    }
    let mut points = Vec::with_capacity(order.len());
    let mut labels = cloud
        .labels
        .as_ref()
        .map(|_| Vec::with_capacity(order.len()));
    for key in order {
        let acc = &cells[&key];
        points.push(acc.sum * (1.0 / acc.count as f64));
        if let Some(ref mut out) = labels {
            let mut best = (0u64, 0u16);
            for (&id, &count) in &acc.label_counts {
                if count > best.0 {
                    best = (count, id);
                }
            }
            out.push(best.1);
        }
    }
    PointCloud::new(points, labels, cloud.num_classes, cloud.scene_id.clone())
}

/// Uniform index sample from `0..total`: a shuffled prefix (without
/// replacement) when `n <= total`, independent draws otherwise.
pub fn sample_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::from_stream(seed, &[stage::SAMPLE]);
    if n <= total {
        let mut all: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        all
    } else {
        (0..n).map(|_| rng.below(total as u64) as usize).collect()
    }
}

/// Samples `n` points uniformly: without replacement when `n <= N`,
/// with replacement otherwise. Deterministic under `seed`.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 1 {
        return Err(Error::validation("sample size must be >= 1"));
    }
    if cloud.is_empty() {
        return Err(Error::validation("cannot sample from an empty cloud"));
    }
    let indices = sample_indices(cloud.len(), n, seed);
    let points = indices.iter().map(|&i| cloud.points[i]).collect();
    let labels = cloud
        .labels
        .as_ref()
        .map(|lab| indices.iter().map(|&i| lab[i]).collect());
    PointCloud::new(points, labels, cloud.num_classes, cloud.scene_id.clone())
}

/// Mirror axis for [`augment_flip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    X,
    Y,
}

/// Reflects the cloud about its centroid along the chosen horizontal axis.
/// Labels are untouched. `apply = false` returns the cloud unchanged.
pub fn augment_flip(cloud: &PointCloud, axis: FlipAxis, apply: bool) -> PointCloud {
    if !apply || cloud.is_empty() {
        return cloud.clone();
    }
    let c = cloud.centroid().expect("non-empty");
    let mut out = cloud.clone();
    for p in &mut out.points {
        match axis {
            FlipAxis::X => p.x = 2.0 * c.x - p.x,
            FlipAxis::Y => p.y = 2.0 * c.y - p.y,
        }
    }
    out
}

/// Smooth random displacement field: per-node Gaussian noise on a regular
/// grid, trilinearly interpolated between nodes. Node noise is clipped to
/// a Euclidean norm of `8 * magnitude`, so every interpolated displacement
/// (a convex combination of node vectors) obeys the same bound.
#[derive(Debug, Clone)]
pub struct ElasticField {
    origin: Vec3,
    granularity: f64,
    nodes: [usize; 3],
    disp: Vec<Vec3>,
}

impl ElasticField {
    /// Builds the field covering `[lo, hi]` with one cell of margin.
    pub fn build(lo: Vec3, hi: Vec3, granularity: f64, magnitude: f64, seed: u64) -> Self {
        let origin = Vec3::new(lo.x - granularity, lo.y - granularity, lo.z - granularity);
        let count = |span: f64| ((span / granularity).ceil() as usize).max(1) + 2;
        let nodes = [
            count(hi.x - origin.x),
            count(hi.y - origin.y),
            count(hi.z - origin.z),
        ];
        let mut disp = Vec::with_capacity(nodes[0] * nodes[1] * nodes[2]);
        for ix in 0..nodes[0] {
            for iy in 0..nodes[1] {
                for iz in 0..nodes[2] {
                    let mut rng =
                        Rng::from_stream(seed, &[stage::ELASTIC, ix as u64, iy as u64, iz as u64]);
                    let mut v = Vec3::new(
                        rng.normal() * magnitude,
                        rng.normal() * magnitude,
                        rng.normal() * magnitude,
                    );
                    let cap = 8.0 * magnitude;
                    let n = v.norm();
                    if n > cap && n > 0.0 {
                        v = v * (cap / n);
                    }
                    disp.push(v);
                }
            }
        }
        ElasticField {
            origin,
            granularity,
            nodes,
            disp,
        }
    }

    fn node(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        self.disp[(ix * self.nodes[1] + iy) * self.nodes[2] + iz]
    }

    /// Grid cell and fractional position of `p`, clamped into the grid.
    pub fn cell_of(&self, p: Vec3) -> ([usize; 3], [f64; 3]) {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..3 {
            let local = (p.component(axis) - self.origin.component(axis)) / self.granularity;
            let max_cell = self.nodes[axis] - 2;
            let cell = local.floor().clamp(0.0, max_cell as f64);
            idx[axis] = cell as usize;
            frac[axis] = (local - cell).clamp(0.0, 1.0);
        }
        (idx, frac)
    }

    /// Trilinear interpolation of the node displacements at `p`.
    pub fn eval(&self, p: Vec3) -> Vec3 {
        let ([ix, iy, iz], [tx, ty, tz]) = self.cell_of(p);
        let mut out = Vec3::ZERO;
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    let w = wx * wy * wz;
                    out = out + self.node(ix + dx, iy + dy, iz + dz) * w;
                }
            }
        }
        out
    }

    /// Per-component slack bound for two positions in the same grid cell:
    /// sums, per axis, the largest node difference along that axis times
    /// the positional delta. Derived from the actual node values, so it is
    /// a sound Lipschitz bound for this field on this cell.
    pub fn cell_lipschitz_bound(&self, cell: [usize; 3], delta: Vec3) -> f64 {
        let [ix, iy, iz] = cell;
        let mut bound = 0.0;
        for (axis, d) in [(0, delta.x), (1, delta.y), (2, delta.z)] {
            let mut max_edge = 0.0f64;
            for a in 0..2 {
                for b in 0..2 {
                    let (near, far) = match axis {
                        0 => (
                            self.node(ix, iy + a, iz + b),
                            self.node(ix + 1, iy + a, iz + b),
                        ),
                        1 => (
                            self.node(ix + a, iy, iz + b),
                            self.node(ix + a, iy + 1, iz + b),
                        ),
                        _ => (
                            self.node(ix + a, iy + b, iz),
                            self.node(ix + a, iy + b, iz + 1),
                        ),
                    };
                    max_edge = max_edge.max((far - near).norm());
                }
            }
            bound += max_edge / self.granularity * d.abs();
        }
        bound
    }
}

/// Applies a seeded elastic distortion. Labels and point count are
/// preserved; `magnitude = 0` is the identity.
pub fn augment_elastic(
    cloud: &PointCloud,
    granularity: f64,
    magnitude: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(granularity > 0.0) {
        return Err(Error::validation("elastic granularity must be positive"));
    }
    if magnitude < 0.0 {
        return Err(Error::validation("elastic magnitude must be >= 0"));
    }
    if magnitude == 0.0 || cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let (lo, hi) = cloud.bbox().expect("non-empty");
    let field = ElasticField::build(lo, hi, granularity, magnitude, seed);
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = *p + field.eval(*p);
    }
    Ok(out)
}
