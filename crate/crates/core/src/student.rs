//! The trainable 3D student: a coordinate-based tanh trunk shared by one
//! linear projection head per teacher, plus one raw weighting scalar per
//! teacher (`sigma_i = exp(s_i)`, so sigma stays positive by
//! construction). Forward evaluation is pointwise; gradients are exact
//! reverse-mode, accumulated over fixed point chunks so parallel and
//! serial training produce identical bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{Matrix, Vec3};
use crate::rng::{stage, Rng};

/// One projection head: name and output dimension copied from the teacher
/// it aligns to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub name: String,
    pub dim: usize,
    pub text_aligned: bool,
}

/// Architecture plus the scene bounds used to normalize coordinates for
/// the positional encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    /// Number of sin/cos frequency bands L; trunk input is `3 + 6 L`.
    pub pe_frequencies: usize,
    pub trunk_widths: Vec<usize>,
    pub heads: Vec<HeadConfig>,
    pub init_seed: u64,
    /// Axis-aligned bounds `[lo, hi]` mapping coordinates into [-1, 1]^3.
    pub bounds: [[f64; 3]; 2],
}

impl StudentConfig {
    pub fn input_dim(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_widths.is_empty() {
            return Err(Error::validation("trunk needs at least one layer"));
        }
        if self.trunk_widths.iter().any(|&w| w == 0) {
            return Err(Error::validation("zero-width trunk layer"));
        }
        if self.heads.is_empty() {
            return Err(Error::validation("student needs at least one head"));
        }
        if self.heads.iter().any(|h| h.dim == 0) {
            return Err(Error::validation("zero-dimensional head"));
        }
        for axis in 0..3 {
            if !(self.bounds[1][axis] > self.bounds[0][axis]) {
                return Err(Error::validation(format!(
                    "degenerate bounds on axis {axis}: [{}, {}]",
                    self.bounds[0][axis], self.bounds[1][axis]
                )));
            }
        }
        Ok(())
    }
}

/// A dense layer, `out x in` row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Layer {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| rng.uniform_range(-scale, scale))
                .collect(),
            biases: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(crate::linalg::dot(row, input) + self.biases[o]);
        }
    }

    pub fn param_count(&self) -> usize {
        (self.in_dim + 1) * self.out_dim
    }
}

/// Trainable parameters: trunk layers, per-teacher heads, and the raw
/// weighting scalars. All values stay finite throughout training; the
/// trainer aborts on the first non-finite parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub trunk: Vec<Layer>,
    pub heads: Vec<Layer>,
    /// Raw scalars s_i. Sigma-weighted objectives read `sigma = exp(s)`;
    /// the auto-weight ablation reads `w = exp(s)`.
    pub raw_sigma: Vec<f64>,
}

impl StudentModel {
    pub fn sigmas(&self) -> Vec<f64> {
        self.raw_sigma.iter().map(|s| s.exp()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(&self.heads)
            .map(Layer::param_count)
            .sum::<usize>()
            + self.raw_sigma.len()
    }

    pub fn all_finite(&self) -> bool {
        self.trunk.iter().chain(&self.heads).all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite())
        }) && self.raw_sigma.iter().all(|v| v.is_finite())
    }

    /// Index of the unique text-aligned head, if any.
    pub fn text_head(&self) -> Option<usize> {
        self.config.heads.iter().position(|h| h.text_aligned)
    }
}

/// Gradient buffers, shape-congruent with a [`StudentModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<Layer>,
    pub heads: Vec<Layer>,
    pub raw_sigma: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &StudentModel) -> Self {
        Gradients {
            trunk: model
                .trunk
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
            heads: model
                .heads
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
            raw_sigma: vec![0.0; model.raw_sigma.len()],
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        let add_layer = |a: &mut Layer, b: &Layer| {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        };
        for (a, b) in self.trunk.iter_mut().zip(&other.trunk) {
            add_layer(a, b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            add_layer(a, b);
        }
        for (x, y) in self.raw_sigma.iter_mut().zip(&other.raw_sigma) {
            *x += y;
        }
    }
}

/// Normalizes `p` into [-1, 1]^3 by the bounds and emits
/// `[p_norm, sin(2^k pi p_norm), cos(2^k pi p_norm)]` for `k = 0..L-1`.
pub fn positional_encode(p: Vec3, l: usize, lo: [f64; 3], hi: [f64; 3]) -> Result<Vec<f64>> {
    for axis in 0..3 {
        if !(hi[axis] > lo[axis]) {
            return Err(Error::validation(format!(
                "degenerate bounds on axis {axis}"
            )));
        }
    }
    Ok(encode_unchecked(p, l, &lo, &hi))
}

fn encode_unchecked(p: Vec3, l: usize, lo: &[f64; 3], hi: &[f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * l);
    let norm = [
        2.0 * (p.x - lo[0]) / (hi[0] - lo[0]) - 1.0,
        2.0 * (p.y - lo[1]) / (hi[1] - lo[1]) - 1.0,
        2.0 * (p.z - lo[2]) / (hi[2] - lo[2]) - 1.0,
    ];
    out.extend_from_slice(&norm);
    for k in 0..l {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for &c in &norm {
            out.push((f * c).sin());
        }
        for &c in &norm {
            out.push((f * c).cos());
        }
    }
    out
}

/// Fresh model: fan-in-scaled uniform weights, zero biases, raw scalars
/// zero (sigma = 1). Deterministic under `init_seed`.
pub fn init_student(config: &StudentConfig) -> Result<StudentModel> {
    config.validate()?;
    let mut rng = Rng::from_stream(config.init_seed, &[stage::STUDENT_INIT]);
    let mut trunk = Vec::with_capacity(config.trunk_widths.len());
    let mut in_dim = config.input_dim();
    for &w in &config.trunk_widths {
        trunk.push(Layer::init(in_dim, w, &mut rng));
        in_dim = w;
    }
    let heads = config
        .heads
        .iter()
        .map(|h| Layer::init(in_dim, h.dim, &mut rng))
        .collect();
    Ok(StudentModel {
        raw_sigma: vec![0.0; config.heads.len()],
        config: config.clone(),
        trunk,
        heads,
    })
}

/// Trunk activations for one point; `hidden[0]` is the encoded input and
/// `hidden.last()` feeds the heads.
fn trunk_forward(model: &StudentModel, p: Vec3) -> Vec<Vec<f64>> {
    let lo = &model.config.bounds[0];
    let hi = &model.config.bounds[1];
    let mut hidden = Vec::with_capacity(model.trunk.len() + 1);
    hidden.push(encode_unchecked(p, model.config.pe_frequencies, lo, hi));
    for layer in &model.trunk {
        let mut z = Vec::new();
        layer.apply(hidden.last().unwrap(), &mut z);
        z.iter_mut().for_each(|v| *v = v.tanh());
        hidden.push(z);
    }
    hidden
}

/// Evaluates every head on every point: one `N x D_i` matrix per head.
pub fn forward(model: &StudentModel, points: &[Vec3]) -> Result<Vec<Matrix>> {
    model.config.validate()?;
    let per_point: Vec<Vec<Vec<f64>>> = exec::map_slice(points, |&p| {
        let hidden = trunk_forward(model, p);
        let top = hidden.last().unwrap();
        model
            .heads
            .iter()
            .map(|head| {
                let mut y = Vec::new();
                head.apply(top, &mut y);
                y
            })
            .collect()
    });
    let mut outputs: Vec<Matrix> = model
        .heads
        .iter()
        .map(|h| Matrix::zeros(points.len(), h.out_dim))
        .collect();
    for (pi, heads_out) in per_point.into_iter().enumerate() {
        for (hi, y) in heads_out.into_iter().enumerate() {
            outputs[hi].row_mut(pi).copy_from_slice(&y);
        }
    }
    Ok(outputs)
}

/// Exact reverse-mode gradients of `sum_i <outputs_i, cotangents_i>` with
/// respect to every trunk and head parameter. The raw-sigma slots are left
/// zero; the trainer routes the objective's sigma partials into them.
pub fn backward(model: &StudentModel, points: &[Vec3], cotangents: &[Matrix]) -> Result<Gradients> {
    if cotangents.len() != model.heads.len() {
        return Err(Error::contract(format!(
            "{} cotangent matrices for {} heads",
            cotangents.len(),
            model.heads.len()
        )));
    }
    for (i, (ct, head)) in cotangents.iter().zip(&model.heads).enumerate() {
        if ct.rows() != points.len() || ct.cols() != head.out_dim {
            return Err(Error::contract(format!(
                "cotangent {i} is {}x{}, expected {}x{}",
                ct.rows(),
                ct.cols(),
                points.len(),
                head.out_dim
            )));
        }
    }
    let accumulate_point = |acc: &mut Gradients, pi: usize| {
        let hidden = trunk_forward(model, points[pi]);
        let top = hidden.last().unwrap();
        let mut d_top = vec![0.0; top.len()];
        for (hi, head) in model.heads.iter().enumerate() {
            let g = cotangents[hi].row(pi);
            let grad_head = &mut acc.heads[hi];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &mut grad_head.weights[o * head.in_dim..(o + 1) * head.in_dim];
                for (w, &t) in row.iter_mut().zip(top) {
                    *w += go * t;
                }
                grad_head.biases[o] += go;
                let wrow = &head.weights[o * head.in_dim..(o + 1) * head.in_dim];
                for (d, &w) in d_top.iter_mut().zip(wrow) {
                    *d += go * w;
                }
            }
        }
        let mut d_h = d_top;
        for (li, layer) in model.trunk.iter().enumerate().rev() {
            let h = &hidden[li + 1];
            let input = &hidden[li];
            // d z = d h * tanh'(z) = d h * (1 - h^2)
            let dz: Vec<f64> = d_h
                .iter()
                .zip(h)
                .map(|(&dh, &hv)| dh * (1.0 - hv * hv))
                .collect();
            let grad_layer = &mut acc.trunk[li];
            let mut d_in = vec![0.0; layer.in_dim];
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                let row = &mut grad_layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += dzo * x;
                }
                grad_layer.biases[o] += dzo;
                let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (d, &w) in d_in.iter_mut().zip(wrow) {
                    *d += dzo * w;
                }
            }
            d_h = d_in;
        }
    };
    let grads = exec::chunked_reduce(
        points.len(),
        || Gradients::zeros_like(model),
        |mut acc, pi| {
            accumulate_point(&mut acc, pi);
            acc
        },
        |mut a, b| {
            a.add_assign(&b);
            a
        },
    )
    .unwrap_or_else(|| Gradients::zeros_like(model));
    Ok(grads)
}
