//! Synthetic 2D teachers.
//!
//! Each teacher owns a deterministic class-prototype matrix and renders
//! per-frame feature maps by looking up the ground-truth class of the
//! nearest visible point at each pixel, then corrupting the prototype with
//! view-dependent confusion, Gaussian channel noise, a constant mean
//! shift, and occasional single-channel spikes. The three default
//! teachers differ in dimension and corruption profile, standing in for
//! heterogeneous foundation models. Precomputed maps can also be ingested
//! from feature-map files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{project_point, Frame};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::{mix, stage, Rng};
use crate::scene::PointCloud;

/// Chebyshev pixel radius used when attributing a ground-truth class to a
/// pixel; matches the default depth-render splat radius.
const CLASS_SPLAT_RADIUS: f64 = 1.0;

/// Maximum rejection-sampling attempts per prototype row.
const PROTOTYPE_ATTEMPTS: usize = 10_000;

/// Distribution profile of one synthetic teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    pub dim: usize,
    #[serde(default)]
    pub text_aligned: bool,
    #[serde(default)]
    pub prototype_seed: u64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub mean_shift: f64,
    #[serde(default)]
    pub spike_prob: f64,
    #[serde(default)]
    pub spike_scale: f64,
    #[serde(default)]
    pub view_confusion_prob: f64,
    /// Optional distillation-loss override; defaults are looked up by
    /// teacher name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<crate::objective::LossKind>,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::validation(format!(
                "teacher '{}' dim must be >= 2",
                self.name
            )));
        }
        if self.noise_std < 0.0 || self.spike_scale < 0.0 {
            return Err(Error::validation(format!(
                "teacher '{}' noise parameters must be nonnegative",
                self.name
            )));
        }
        for (label, v) in [
            ("spike_prob", self.spike_prob),
            ("view_confusion_prob", self.view_confusion_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "teacher '{}' {label} must be in [0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// The default teacher trio: a text-aligned low-noise teacher, a
    /// cleaner mid-dimensional one, and a shifted heavy-tailed one.
    /// Dimensions are deliberately unequal so each needs its own head.
    pub fn default_trio() -> Vec<TeacherSpec> {
        vec![
            TeacherSpec {
                name: "lseg-like".into(),
                dim: 32,
                text_aligned: true,
                prototype_seed: 0xa1,
                noise_std: 0.15,
                mean_shift: 0.0,
                spike_prob: 0.0,
                spike_scale: 0.0,
                view_confusion_prob: 0.10,
                loss: None,
            },
            TeacherSpec {
                name: "dino-like".into(),
                dim: 24,
                text_aligned: false,
                prototype_seed: 0xa2,
                noise_std: 0.10,
                mean_shift: 0.0,
                spike_prob: 0.0,
                spike_scale: 0.0,
                view_confusion_prob: 0.05,
                loss: None,
            },
            TeacherSpec {
                name: "sd-like".into(),
                dim: 48,
                text_aligned: false,
                prototype_seed: 0xa3,
                noise_std: 0.20,
                mean_shift: 0.30,
                spike_prob: 0.02,
                spike_scale: 3.0,
                view_confusion_prob: 0.15,
                loss: None,
            },
        ]
    }
}

/// Dense per-pixel feature image, row-major with the channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: u32, height: u32, dim: usize) -> Self {
        FeatureMap {
            width,
            height,
            dim,
            values: vec![0.0; width as usize * height as usize * dim],
        }
    }

    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let idx = (v as usize * self.width as usize + u as usize) * self.dim;
        &self.values[idx..idx + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.width as usize * self.height as usize * self.dim;
        if self.values.len() != expected {
            return Err(Error::validation(format!(
                "feature map has {} values, expected {expected}",
                self.values.len()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("feature map contains non-finite values"));
        }
        Ok(())
    }
}

/// Per-class text-space prototypes used for open-vocabulary labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularySet {
    pub num_classes: u32,
    pub dim: usize,
    /// One unit-norm row per class.
    pub embeddings: Matrix,
}

/// Deterministic unit-norm class prototypes with pairwise |cosine| < 0.5,
/// found by rejection sampling. Fails with a capacity error when the
/// dimension cannot accommodate the requested class count.
pub fn teacher_prototypes(spec: &TeacherSpec, num_classes: u32) -> Result<Matrix> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(Error::validation("prototype matrix requires K >= 2"));
    }
    let k = num_classes as usize;
    let d = spec.dim;
    let mut rng = Rng::from_stream(spec.prototype_seed, &[stage::PROTOTYPE]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for row_idx in 0..k {
        let mut accepted = None;
        for _ in 0..PROTOTYPE_ATTEMPTS {
            let mut row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = norm(&row);
            if n < 1e-12 {
                continue;
            }
            row.iter_mut().for_each(|x| *x /= n);
            if rows.iter().all(|prev| dot(prev, &row).abs() < 0.5) {
                accepted = Some(row);
                break;
            }
        }
        match accepted {
            Some(row) => rows.push(row),
            None => {
                return Err(Error::Capacity(format!(
                    "could not place prototype {row_idx} of {k} in {d} dims \
                     after {PROTOTYPE_ATTEMPTS} attempts"
                )))
            }
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for row in rows {
        data.extend(row);
    }
    Ok(Matrix::from_vec(k, d, data))
}

/// The text-aligned teacher's prototypes, repackaged as the class
/// vocabulary (the synthetic text encoder is the prototype table itself).
pub fn vocabulary_from_teacher(spec: &TeacherSpec, num_classes: u32) -> Result<VocabularySet> {
    if !spec.text_aligned {
        return Err(Error::contract(format!(
            "teacher '{}' is not text-aligned; it cannot provide a vocabulary",
            spec.name
        )));
    }
    Ok(VocabularySet {
        num_classes,
        dim: spec.dim,
        embeddings: teacher_prototypes(spec, num_classes)?,
    })
}

/// Minimum-depth visible point per pixel, used to attribute ground-truth
/// classes. Ties resolve to the smaller point index, making the parallel
/// reduction order-independent.
fn best_point_per_pixel(scene: &PointCloud, frame: &Frame) -> Vec<Option<(f32, usize)>> {
    let w = frame.intrinsics.width as usize;
    let h = frame.intrinsics.height as usize;
    let better = |a: (f32, usize), b: (f32, usize)| -> (f32, usize) {
        if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
            b
        } else {
            a
        }
    };
    exec::chunked_reduce(
        scene.len(),
        || vec![None; w * h],
        |mut buf: Vec<Option<(f32, usize)>>, i| {
            if let Some((u, v, depth)) =
                project_point(scene.points[i], &frame.pose, &frame.intrinsics)
            {
                let r = CLASS_SPLAT_RADIUS;
                let u0 = (u - r).ceil().max(0.0);
                let u1 = (u + r).floor().min(w as f64 - 1.0);
                let v0 = (v - r).ceil().max(0.0);
                let v1 = (v + r).floor().min(h as f64 - 1.0);
                if u0 <= u1 && v0 <= v1 {
                    let cand = (depth as f32, i);
                    for py in v0 as usize..=v1 as usize {
                        for px in u0 as usize..=u1 as usize {
                            let cell = &mut buf[py * w + px];
                            *cell = Some(match *cell {
                                Some(cur) => better(cur, cand),
                                None => cand,
                            });
                        }
                    }
                }
            }
            buf
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x = match (*x, y) {
                    (Some(p), Some(q)) => Some(better(p, q)),
                    (Some(p), None) => Some(p),
                    (None, q) => q,
                };
            }
            a
        },
    )
    .unwrap_or_else(|| vec![None; w * h])
}

/// Ground-truth class per pixel (before view confusion), or `None` where
/// the depth map is invalid or no point covers the pixel.
pub fn pixel_classes(scene: &PointCloud, frame: &Frame) -> Result<Vec<Option<u16>>> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::validation("teacher rendering requires a labelled scene"))?;
    let best = best_point_per_pixel(scene, frame);
    let w = frame.intrinsics.width as usize;
    Ok(exec::map_range(best.len(), |idx| {
        let (u, v) = ((idx % w) as u32, (idx / w) as u32);
        if !frame.depth.is_valid(u, v) {
            return None;
        }
        best[idx].map(|(_, point)| labels[point])
    }))
}

/// Renders one teacher's feature map for one frame.
///
/// Per valid pixel: look up the ground-truth class, flip it to a random
/// other class with probability `view_confusion_prob` (seeded per frame
/// and pixel, so multi-view inconsistency is reproducible), then emit
/// `prototype[class] + N(0, noise_std^2) + mean_shift`, with probability
/// `spike_prob` adding `spike_scale` on one random signed channel.
/// Invalid pixels emit zero vectors, the "no observation" sentinel.
pub fn render_feature_map(
    scene: &PointCloud,
    frame: &Frame,
    spec: &TeacherSpec,
    frame_seed: u64,
) -> Result<FeatureMap> {
    spec.validate()?;
    let classes = pixel_classes(scene, frame)?;
    let prototypes = teacher_prototypes(spec, scene.num_classes)?;
    let k = u64::from(scene.num_classes);
    let d = spec.dim;
    let pixels = exec::map_range(classes.len(), |idx| {
        let mut out = vec![0.0f32; d];
        if let Some(gt) = classes[idx] {
            let mut rng = Rng::new(mix(frame_seed, &[stage::PIXEL, idx as u64]));
            let mut class = gt;
            if spec.view_confusion_prob > 0.0 && rng.uniform() < spec.view_confusion_prob {
                let other = rng.below(k - 1) as u16;
                class = if other >= gt { other + 1 } else { other };
            }
            let proto = prototypes.row(class as usize);
            for (o, &p) in out.iter_mut().zip(proto) {
                let mut v = p + spec.mean_shift;
                if spec.noise_std > 0.0 {
                    v += rng.normal() * spec.noise_std;
                }
                *o = v as f32;
            }
            if spec.spike_prob > 0.0 && rng.uniform() < spec.spike_prob {
                let channel = rng.below(d as u64) as usize;
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                out[channel] += (sign * spec.spike_scale) as f32;
            }
        }
        out
    });
    let mut values = Vec::with_capacity(classes.len() * d);
    for px in pixels {
        values.extend(px);
    }
    Ok(FeatureMap {
        width: frame.intrinsics.width,
        height: frame.intrinsics.height,
        dim: d,
        values,
    })
}

/// Reads a feature-map file. See [`crate::io`] for the binary layout.
pub fn load_feature_map(path: &std::path::Path) -> Result<FeatureMap> {
    crate::io::read_feature_map(path)
}

/// Reads a feature-map file and checks it against the teacher that is
/// supposed to have produced it.
pub fn load_feature_map_checked(path: &std::path::Path, spec: &TeacherSpec) -> Result<FeatureMap> {
    let map = crate::io::read_feature_map(path)?;
    if map.dim != spec.dim {
        return Err(Error::validation(format!(
            "feature map dim {} does not match teacher '{}' dim {}",
            map.dim, spec.name, spec.dim
        )));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_depth, CameraIntrinsics, Pose};
    use crate::linalg::Vec3;
    use crate::scene::{generate_scene, SyntheticSceneSpec};

    fn toy_teacher(dim: usize) -> TeacherSpec {
        TeacherSpec {
            name: "toy".into(),
            dim,
            text_aligned: true,
            prototype_seed: 7,
            noise_std: 0.0,
            mean_shift: 0.0,
            spike_prob: 0.0,
            spike_scale: 0.0,
            view_confusion_prob: 0.0,
            loss: None,
        }
    }

    fn labelled_scene(seed: u64) -> PointCloud {
        // Dense enough that a single render yields >= 10k valid pixels.
        generate_scene(&SyntheticSceneSpec {
            seed,
            extent: [3.0, 3.0, 2.0],
            num_objects: 3,
            num_classes: 4,
            points_per_object: 1600,
            floor_and_walls: true,
            size_scale: 1.0,
        })
        .unwrap()
    }

    fn frame_for(scene: &PointCloud) -> Frame {
        let intr = CameraIntrinsics {
            fx: 170.0,
            fy: 170.0,
            cx: 80.0,
            cy: 80.0,
            width: 160,
            height: 160,
        };
        let pose = Pose::look_at(Vec3::new(1.5, -2.5, 2.2), Vec3::new(1.5, 1.5, 0.8));
        let depth = render_depth(scene, &pose, &intr, 1);
        Frame {
            pose,
            intrinsics: intr,
            depth,
        }
    }

    #[test]
    fn prototypes_unit_norm_and_separated() {
        let spec = toy_teacher(16);
        let p = teacher_prototypes(&spec, 2).unwrap();
        for i in 0..2 {
            assert!((norm(p.row(i)) - 1.0).abs() < 1e-9);
        }
        assert!(dot(p.row(0), p.row(1)).abs() < 0.5);
    }

    #[test]
    fn prototypes_deterministic() {
        let spec = toy_teacher(16);
        let a = teacher_prototypes(&spec, 5).unwrap();
        let b = teacher_prototypes(&spec, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prototype_capacity_error() {
        let spec = toy_teacher(4);
        match teacher_prototypes(&spec, 40) {
            Err(Error::Capacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_render_emits_exact_prototypes() {
        let scene = labelled_scene(11);
        let frame = frame_for(&scene);
        let spec = toy_teacher(8);
        let map = render_feature_map(&scene, &frame, &spec, 99).unwrap();
        let prototypes = teacher_prototypes(&spec, scene.num_classes).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        let mut checked = 0;
        for (idx, class) in classes.iter().enumerate() {
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            let px = map.pixel(u, v);
            match class {
                Some(c) => {
                    let proto = prototypes.row(*c as usize);
                    for (a, b) in px.iter().zip(proto) {
                        assert_eq!(*a, *b as f32);
                    }
                    checked += 1;
                }
                None => assert!(px.iter().all(|&x| x == 0.0)),
            }
        }
        assert!(
            checked > 1000,
            "scene should cover many pixels, got {checked}"
        );
    }

    #[test]
    fn noiseless_argmax_recovers_class() {
        let scene = labelled_scene(13);
        let frame = frame_for(&scene);
        let spec = toy_teacher(12);
        let map = render_feature_map(&scene, &frame, &spec, 3).unwrap();
        let prototypes = teacher_prototypes(&spec, scene.num_classes).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        for (idx, class) in classes.iter().enumerate() {
            let Some(c) = class else { continue };
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            let px: Vec<f64> = map.pixel(u, v).iter().map(|&x| f64::from(x)).collect();
            let best = (0..scene.num_classes as usize)
                .max_by(|&a, &b| {
                    dot(&px, prototypes.row(a))
                        .partial_cmp(&dot(&px, prototypes.row(b)))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(best as u16, *c);
        }
    }

    #[test]
    fn mean_shift_adds_constant() {
        let scene = labelled_scene(17);
        let frame = frame_for(&scene);
        let mut spec = toy_teacher(8);
        let base = render_feature_map(&scene, &frame, &spec, 5).unwrap();
        spec.mean_shift = 0.5;
        let shifted = render_feature_map(&scene, &frame, &spec, 5).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        for (idx, class) in classes.iter().enumerate() {
            if class.is_none() {
                continue;
            }
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            for (a, b) in base.pixel(u, v).iter().zip(shifted.pixel(u, v)) {
                assert!((f64::from(*b) - f64::from(*a) - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn confusion_rate_matches_probability() {
        let scene = labelled_scene(19);
        let frame = frame_for(&scene);
        let mut spec = toy_teacher(8);
        spec.view_confusion_prob = 0.3;
        let map = render_feature_map(&scene, &frame, &spec, 77).unwrap();
        let prototypes = teacher_prototypes(&spec, scene.num_classes).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        let mut valid = 0u64;
        let mut confused = 0u64;
        for (idx, class) in classes.iter().enumerate() {
            let Some(c) = class else { continue };
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            let px: Vec<f64> = map.pixel(u, v).iter().map(|&x| f64::from(x)).collect();
            let best = (0..scene.num_classes as usize)
                .max_by(|&a, &b| {
                    dot(&px, prototypes.row(a))
                        .partial_cmp(&dot(&px, prototypes.row(b)))
                        .unwrap()
                })
                .unwrap() as u16;
            valid += 1;
            if best != *c {
                confused += 1;
            }
        }
        assert!(valid >= 10_000, "need ~10k valid pixels, got {valid}");
        let rate = confused as f64 / valid as f64;
        assert!(
            (rate - 0.3).abs() < 0.02,
            "confusion rate {rate} outside 0.3 +/- 0.02 over {valid} pixels"
        );
    }

    #[test]
    fn unlabelled_scene_rejected() {
        let scene = PointCloud::unlabelled(vec![Vec3::new(0.0, 0.0, 1.0)], "u").unwrap();
        let frame = frame_for(&labelled_scene(1));
        assert!(matches!(
            render_feature_map(&scene, &frame, &toy_teacher(4), 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn vocabulary_requires_text_alignment() {
        let mut spec = toy_teacher(8);
        spec.text_aligned = false;
        assert!(matches!(
            vocabulary_from_teacher(&spec, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn vocabulary_equals_prototypes() {
        let spec = toy_teacher(8);
        let vocab = vocabulary_from_teacher(&spec, 3).unwrap();
        assert_eq!(vocab.embeddings, teacher_prototypes(&spec, 3).unwrap());
        assert_eq!(vocab.embeddings.rows(), 3);
        for i in 0..3 {
            assert!((norm(vocab.embeddings.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    fn residual_kurtosis(spec: &TeacherSpec, frame_seed: u64) -> (f64, usize) {
        let scene = labelled_scene(23);
        let frame = frame_for(&scene);
        let map = render_feature_map(&scene, &frame, spec, frame_seed).unwrap();
        let prototypes = teacher_prototypes(spec, scene.num_classes).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        let mut residuals = Vec::new();
        for (idx, class) in classes.iter().enumerate() {
            let Some(c) = class else { continue };
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            let proto = prototypes.row(*c as usize);
            for (x, p) in map.pixel(u, v).iter().zip(proto) {
                residuals.push(f64::from(*x) - p - spec.mean_shift);
            }
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let m2 = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let m4 = residuals.iter().map(|r| (r - mean).powi(4)).sum::<f64>() / n;
        (m4 / (m2 * m2), residuals.len())
    }

    #[test]
    fn channel_residuals_gaussian_without_spikes() {
        let mut spec = toy_teacher(12);
        spec.noise_std = 0.2;
        spec.mean_shift = 0.3;
        let (kurtosis, n) = residual_kurtosis(&spec, 41);
        assert!(n >= 100_000, "need >= 1e5 samples, got {n}");
        assert!(
            (2.5..=3.5).contains(&kurtosis),
            "kurtosis {kurtosis} outside Gaussian window"
        );
    }

    #[test]
    fn spikes_fatten_the_tails() {
        let mut spec = toy_teacher(12);
        spec.noise_std = 0.2;
        spec.spike_prob = 0.02;
        spec.spike_scale = 3.0;
        let (kurtosis, n) = residual_kurtosis(&spec, 41);
        assert!(n >= 100_000);
        assert!(
            kurtosis > 3.5,
            "spiked kurtosis {kurtosis} should exceed 3.5"
        );
    }

    #[test]
    fn mean_shift_recovered_from_grand_mean() {
        let scene = labelled_scene(29);
        let frame = frame_for(&scene);
        let mut spec = toy_teacher(8);
        spec.noise_std = 0.15;
        spec.mean_shift = 0.3;
        let map = render_feature_map(&scene, &frame, &spec, 51).unwrap();
        let prototypes = teacher_prototypes(&spec, scene.num_classes).unwrap();
        let classes = pixel_classes(&scene, &frame).unwrap();
        let mut sum = 0.0;
        let mut proto_sum = 0.0;
        let mut count = 0usize;
        for (idx, class) in classes.iter().enumerate() {
            let Some(c) = class else { continue };
            let (u, v) = (
                (idx % frame.intrinsics.width as usize) as u32,
                (idx / frame.intrinsics.width as usize) as u32,
            );
            sum += map.pixel(u, v).iter().map(|&x| f64::from(x)).sum::<f64>();
            proto_sum += prototypes.row(*c as usize).iter().sum::<f64>();
            count += spec.dim;
        }
        let grand_mean = sum / count as f64;
        let proto_mean = proto_sum / count as f64;
        let est_sigma = spec.noise_std / (count as f64).sqrt();
        assert!(
            (grand_mean - proto_mean - spec.mean_shift).abs() < 3.0 * est_sigma + 1e-6,
            "grand mean {grand_mean} vs prototype mean {proto_mean} + shift"
        );
    }
}
