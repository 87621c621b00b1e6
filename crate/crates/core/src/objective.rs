//! Distillation losses and the uncertainty-weighted training objective,
//! with analytic gradients for both the student features and the learned
//! weighting scalars.
//!
//! Per-teacher raw losses are combined in one of four ways: a plain sum,
//! the Gaussian-likelihood weighting `L_i / (2 sigma_i^2) + log sigma_i`
//! (unbounded below as a loss approaches zero), the stabilized variant
//! with `log(1 + sigma_i)` (nonnegative for all sigma > 0), or a learned
//! positive per-teacher weight with no regularizer (which degenerates, and
//! exists to demonstrate exactly that).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::teachers::TeacherSpec;

/// Student rows with a norm below this contribute a constant loss of 1
/// with zero gradient in the cosine loss, keeping random-init training
/// finite instead of dividing by zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Per-teacher distillation loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cosine,
    L1,
    L2,
    /// Cosine similarity against targets re-centered by the de-mean
    /// operation.
    CosineDeMean,
}

/// How per-teacher losses are combined into the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// `sum L_i / (2 sigma_i^2) + log(1 + sigma_i)`; bounded below by 0.
    #[default]
    Stabilized,
    /// `sum L_i / (2 sigma_i^2) + log sigma_i`; unbounded below.
    NaiveLogSigma,
    /// `sum w_i L_i` with learnable `w_i = exp(a_i)` and no regularizer.
    AutoWeight,
    /// `sum L_i`.
    Unweighted,
}

impl ObjectiveMode {
    /// Modes that learn per-teacher sigma scalars.
    pub fn is_sigma_weighted(self) -> bool {
        matches!(
            self,
            ObjectiveMode::Stabilized | ObjectiveMode::NaiveLogSigma
        )
    }
}

/// One teacher's contribution to the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTerm {
    /// Raw distillation loss L_i.
    pub raw: f64,
    /// Weighted term actually added to the total.
    pub weighted: f64,
    /// Regularizer added for this teacher (zero in unweighted/auto modes).
    pub regularizer: f64,
}

/// Decomposition of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_teacher: Vec<TeacherTerm>,
    pub total: f64,
    /// Snapshot of the weighting scalars (sigma, or w in auto mode).
    pub sigmas: Vec<f64>,
}

fn check_shapes(f3d: &Matrix, f2d: &Matrix, mask: &[bool]) -> Result<usize> {
    if f3d.rows() != f2d.rows() || f3d.cols() != f2d.cols() {
        return Err(Error::contract(format!(
            "feature shape mismatch: {}x{} vs {}x{}",
            f3d.rows(),
            f3d.cols(),
            f2d.rows(),
            f2d.cols()
        )));
    }
    if mask.len() != f3d.rows() {
        return Err(Error::contract("mask length must equal row count"));
    }
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::contract("no masked-in rows: nothing to supervise"));
    }
    Ok(m)
}

/// Mean cosine distance `1 - cos(f3, f2)` over masked rows, with the
/// analytic gradient with respect to `f3d` (targets are frozen).
pub fn cosine_loss(f3d: &Matrix, f2d: &Matrix, mask: &[bool]) -> Result<(f64, Matrix)> {
    let m = check_shapes(f3d, f2d, mask)? as f64;
    let mut grad = Matrix::zeros(f3d.rows(), f3d.cols());
    let mut loss = 0.0;
    for i in 0..f3d.rows() {
        if !mask[i] {
            continue;
        }
        let a = f3d.row(i);
        let b = f2d.row(i);
        let nb = norm(b);
        if nb < DEGENERATE_NORM {
            return Err(Error::contract(format!(
                "cosine target row {i} has (near-)zero norm"
            )));
        }
        let na = norm(a);
        if na < DEGENERATE_NORM {
            // Declared degenerate handling: constant loss, no gradient.
            loss += 1.0;
            continue;
        }
        let s = dot(a, b);
        loss += 1.0 - s / (na * nb);
        let g = grad.row_mut(i);
        let c1 = 1.0 / (na * nb * m);
        let c2 = s / (na.powi(3) * nb * m);
        for j in 0..a.len() {
            g[j] = -b[j] * c1 + a[j] * c2;
        }
    }
    Ok((loss / m, grad))
}

/// Mean absolute error over masked entries; the subgradient at zero is
/// taken as zero.
pub fn l1_loss(f3d: &Matrix, f2d: &Matrix, mask: &[bool]) -> Result<(f64, Matrix)> {
    let m_rows = check_shapes(f3d, f2d, mask)?;
    let m = (m_rows * f3d.cols()) as f64;
    let mut grad = Matrix::zeros(f3d.rows(), f3d.cols());
    let mut loss = 0.0;
    for i in 0..f3d.rows() {
        if !mask[i] {
            continue;
        }
        let g = grad.row_mut(i);
        for (j, (&a, &b)) in f3d.row(i).iter().zip(f2d.row(i)).enumerate() {
            let d = a - b;
            loss += d.abs();
            g[j] = if d > 0.0 {
                1.0 / m
            } else if d < 0.0 {
                -1.0 / m
            } else {
                0.0
            };
        }
    }
    Ok((loss / m, grad))
}

/// Mean squared error over masked entries.
pub fn l2_loss(f3d: &Matrix, f2d: &Matrix, mask: &[bool]) -> Result<(f64, Matrix)> {
    let m_rows = check_shapes(f3d, f2d, mask)?;
    let m = (m_rows * f3d.cols()) as f64;
    let mut grad = Matrix::zeros(f3d.rows(), f3d.cols());
    let mut loss = 0.0;
    for i in 0..f3d.rows() {
        if !mask[i] {
            continue;
        }
        let g = grad.row_mut(i);
        for (j, (&a, &b)) in f3d.row(i).iter().zip(f2d.row(i)).enumerate() {
            let d = a - b;
            loss += d * d;
            g[j] = 2.0 * d / m;
        }
    }
    Ok((loss / m, grad))
}

pub fn apply_loss(
    kind: LossKind,
    f3d: &Matrix,
    f2d: &Matrix,
    mask: &[bool],
) -> Result<(f64, Matrix)> {
    match kind {
        // De-meaned targets are prepared ahead of training; at this level
        // both cosine variants reduce to the same computation.
        LossKind::Cosine | LossKind::CosineDeMean => cosine_loss(f3d, f2d, mask),
        LossKind::L1 => l1_loss(f3d, f2d, mask),
        LossKind::L2 => l2_loss(f3d, f2d, mask),
    }
}

/// Combines per-teacher raw losses under the chosen mode.
///
/// `scales` holds sigma_i in the sigma-weighted modes, w_i in auto mode,
/// and is ignored (but must be the same length) in unweighted mode.
/// Returns the breakdown plus `d total / d L_i` and `d total / d scale_i`.
pub fn distill_total(
    losses: &[f64],
    scales: &[f64],
    mode: ObjectiveMode,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    if losses.len() != scales.len() {
        return Err(Error::contract(format!(
            "{} losses but {} weighting scalars",
            losses.len(),
            scales.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::contract("objective needs at least one teacher"));
    }
    if let Some(bad) = losses.iter().find(|&&l| !(l >= 0.0)) {
        return Err(Error::contract(format!("negative or NaN raw loss {bad}")));
    }
    if mode.is_sigma_weighted() {
        if let Some(bad) = scales.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::contract(format!(
                "sigma must be positive in weighted modes, got {bad}"
            )));
        }
    }
    let n = losses.len();
    let mut per_teacher = Vec::with_capacity(n);
    let mut d_loss = vec![0.0; n];
    let mut d_scale = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let (l, s) = (losses[i], scales[i]);
        let term = match mode {
            ObjectiveMode::Unweighted => {
                d_loss[i] = 1.0;
                TeacherTerm {
                    raw: l,
                    weighted: l,
                    regularizer: 0.0,
                }
            }
            ObjectiveMode::NaiveLogSigma => {
                d_loss[i] = 1.0 / (2.0 * s * s);
                d_scale[i] = -l / (s * s * s) + 1.0 / s;
                TeacherTerm {
                    raw: l,
                    weighted: l / (2.0 * s * s),
                    regularizer: s.ln(),
                }
            }
            ObjectiveMode::Stabilized => {
                d_loss[i] = 1.0 / (2.0 * s * s);
                d_scale[i] = -l / (s * s * s) + 1.0 / (1.0 + s);
                TeacherTerm {
                    raw: l,
                    weighted: l / (2.0 * s * s),
                    regularizer: (1.0 + s).ln(),
                }
            }
            ObjectiveMode::AutoWeight => {
                d_loss[i] = s;
                d_scale[i] = l;
                TeacherTerm {
                    raw: l,
                    weighted: s * l,
                    regularizer: 0.0,
                }
            }
        };
        total += term.weighted + term.regularizer;
        per_teacher.push(term);
    }
    Ok((
        LossBreakdown {
            per_teacher,
            total,
            sigmas: scales.to_vec(),
        },
        d_loss,
        d_scale,
    ))
}

/// Default loss family per teacher: the text-aligned low-noise teacher
/// uses cosine, the clean mid-dimensional one L1, and the shifted
/// heavy-tailed one cosine over de-meaned targets. An explicit `loss` on
/// the spec overrides; unknown names without an override are a
/// configuration error.
pub fn map_teacher_loss(spec: &TeacherSpec) -> Result<LossKind> {
    if let Some(kind) = spec.loss {
        return Ok(kind);
    }
    match spec.name.as_str() {
        "lseg-like" => Ok(LossKind::Cosine),
        "dino-like" => Ok(LossKind::L1),
        "sd-like" => Ok(LossKind::CosineDeMean),
        other => Err(Error::config(format!(
            "teacher '{other}' has no default loss; set `loss` in its config entry"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    fn finite_diff_feature_grad<F>(f3d: &Matrix, eval: F) -> Matrix
    where
        F: Fn(&Matrix) -> f64,
    {
        let h = 1e-5;
        let mut grad = Matrix::zeros(f3d.rows(), f3d.cols());
        for i in 0..f3d.rows() {
            for j in 0..f3d.cols() {
                let mut plus = f3d.clone();
                plus.set(i, j, plus.get(i, j) + h);
                let mut minus = f3d.clone();
                minus.set(i, j, minus.get(i, j) - h);
                grad.set(i, j, (eval(&plus) - eval(&minus)) / (2.0 * h));
            }
        }
        grad
    }

    fn assert_grad_close(analytic: &Matrix, numeric: &Matrix, rel_tol: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let scale = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / scale < rel_tol,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn cosine_identical_rows_zero_loss() {
        let mut rng = Rng::new(1);
        let f = random_matrix(&mut rng, 6, 4);
        let mask = vec![true; 6];
        let (loss, _) = cosine_loss(&f, &f, &mask).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn cosine_antipodal_rows_loss_two() {
        let mut rng = Rng::new(2);
        let f = random_matrix(&mut rng, 5, 3);
        let mut neg = f.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        let mask = vec![true; 5];
        let (loss, _) = cosine_loss(&neg, &f, &mask).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let f3d = random_matrix(&mut rng, 8, 4);
        let f2d = random_matrix(&mut rng, 8, 4);
        let mut mask = vec![true; 8];
        mask[2] = false;
        let (_, grad) = cosine_loss(&f3d, &f2d, &mask).unwrap();
        let numeric = finite_diff_feature_grad(&f3d, |m| cosine_loss(m, &f2d, &mask).unwrap().0);
        assert_grad_close(&grad, &numeric, 1e-4);
    }

    #[test]
    fn cosine_range_bounded() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 4, 5);
            let b = random_matrix(&mut rng, 4, 5);
            let (loss, _) = cosine_loss(&a, &b, &vec![true; 4]).unwrap();
            assert!((0.0..=2.0 + 1e-12).contains(&loss));
        }
    }

    #[test]
    fn cosine_scale_invariant() {
        let mut rng = Rng::new(5);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_matrix(&mut rng, 6, 4);
        let mask = vec![true; 6];
        let (base, _) = cosine_loss(&a, &b, &mask).unwrap();
        let mut scaled = a.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 7.3);
        let (loss, _) = cosine_loss(&scaled, &b, &mask).unwrap();
        assert!((loss - base).abs() < 1e-12);
    }

    #[test]
    fn cosine_empty_mask_is_contract_error() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(
            cosine_loss(&m, &m, &vec![false; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_degenerate_student_row() {
        let f2d = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut f3d = Matrix::zeros(2, 2);
        f3d.set(1, 0, 1.0);
        let (loss, grad) = cosine_loss(&f3d, &f2d, &vec![true; 2]).unwrap();
        // Row 0 is degenerate (loss 1, zero grad); row 1 is orthogonal
        // to its target (loss 1).
        assert!((loss - 1.0).abs() < 1e-12);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
        assert!(grad.row(1).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn l1_basics() {
        let mut rng = Rng::new(6);
        let f = random_matrix(&mut rng, 4, 3);
        let mask = vec![true; 4];
        assert!(l1_loss(&f, &f, &mask).unwrap().0.abs() < 1e-15);
        let mut shifted = f.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let (loss, _) = l1_loss(&shifted, &f, &mask).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_gradient_signs() {
        let f2d = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let f3d = Matrix::from_vec(2, 2, vec![0.5, -0.5, 1.0, 3.0]);
        let (_, grad) = l1_loss(&f3d, &f2d, &vec![true; 2]).unwrap();
        let m = 4.0;
        assert_eq!(grad.get(0, 0), 1.0 / m);
        assert_eq!(grad.get(0, 1), -1.0 / m);
        assert_eq!(grad.get(1, 0), 0.0);
        assert_eq!(grad.get(1, 1), 1.0 / m);
    }

    #[test]
    fn l2_basics_and_gradient() {
        let mut rng = Rng::new(7);
        let f = random_matrix(&mut rng, 5, 3);
        let mask = vec![true; 5];
        assert!(l2_loss(&f, &f, &mask).unwrap().0.abs() < 1e-15);
        let mut shifted = f.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 2.0);
        let (loss, _) = l2_loss(&shifted, &f, &mask).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);

        let f3d = random_matrix(&mut rng, 6, 4);
        let f2d = random_matrix(&mut rng, 6, 4);
        let mask6 = vec![true; 6];
        let (_, grad) = l2_loss(&f3d, &f2d, &mask6).unwrap();
        let numeric = finite_diff_feature_grad(&f3d, |m| l2_loss(m, &f2d, &mask6).unwrap().0);
        assert_grad_close(&grad, &numeric, 1e-6);
    }

    #[test]
    fn stabilized_total_direct_substitution() {
        let (breakdown, _, _) = distill_total(
            &[1.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0],
            ObjectiveMode::Stabilized,
        )
        .unwrap();
        let expected = 1.5 + 3.0 * std::f64::consts::LN_2;
        assert!((breakdown.total - expected).abs() < 1e-12);
        assert!((breakdown.total - 3.5794).abs() < 1e-4);
        // Decomposition identity.
        let sum: f64 = breakdown
            .per_teacher
            .iter()
            .map(|t| t.weighted + t.regularizer)
            .sum();
        assert!((breakdown.total - sum).abs() < 1e-12);
    }

    #[test]
    fn naive_minimum_matches_closed_form() {
        // min over sigma of L/(2 s^2) + ln s is at s = sqrt(L) with value
        // 1/2 + ln(L)/2.
        for &l in &[1.0, 1e-2, 1e-4, 1e-8] {
            let mut best = f64::INFINITY;
            let mut s = 1e-6;
            while s < 10.0 {
                let (b, _, _) = distill_total(&[l], &[s], ObjectiveMode::NaiveLogSigma).unwrap();
                best = best.min(b.total);
                s *= 1.0005;
            }
            let closed = 0.5 + 0.5 * l.ln();
            assert!(
                (best - closed).abs() < 1e-6,
                "L={l}: scanned min {best} vs closed form {closed}"
            );
        }
        assert!((0.5 + 0.5 * (1e-8f64).ln() + 8.7103).abs() < 1e-4);
    }

    #[test]
    fn stabilized_nonnegative_on_grid() {
        let mut rng = Rng::new(8);
        for _ in 0..10_000 {
            let l = rng.uniform() * 10.0;
            let s = rng.uniform() * 5.0 + 1e-6;
            let (b, _, _) = distill_total(&[l], &[s], ObjectiveMode::Stabilized).unwrap();
            assert!(
                b.total >= 0.0,
                "stabilized total {} < 0 at L={l} s={s}",
                b.total
            );
        }
    }

    #[test]
    fn stabilized_minimizer_satisfies_cubic() {
        // Stationarity of L/(2 s^2) + ln(1+s): s^3 = L (1 + s).
        for &l in &[0.5, 0.1, 1e-3] {
            let eval = |s: f64| {
                distill_total(&[l], &[s], ObjectiveMode::Stabilized)
                    .unwrap()
                    .0
                    .total
            };
            let (mut lo, mut hi) = (1e-9, 50.0);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if eval(m1) < eval(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let s = 0.5 * (lo + hi);
            assert!(
                (s.powi(3) - l * (1.0 + s)).abs() < 1e-6,
                "L={l}: minimizer {s} violates cubic"
            );
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = Rng::new(9);
        let h = 1e-6;
        for mode in [
            ObjectiveMode::Stabilized,
            ObjectiveMode::NaiveLogSigma,
            ObjectiveMode::AutoWeight,
            ObjectiveMode::Unweighted,
        ] {
            for _ in 0..200 {
                let losses: Vec<f64> = (0..3).map(|_| rng.uniform() * 4.0).collect();
                let scales: Vec<f64> = (0..3).map(|_| rng.uniform() * 3.0 + 0.05).collect();
                let (_, dl, ds) = distill_total(&losses, &scales, mode).unwrap();
                for i in 0..3 {
                    let mut lp = losses.clone();
                    lp[i] += h;
                    let mut lm = losses.clone();
                    lm[i] -= h;
                    let fd = (distill_total(&lp, &scales, mode).unwrap().0.total
                        - distill_total(&lm, &scales, mode).unwrap().0.total)
                        / (2.0 * h);
                    let scale = dl[i].abs().max(fd.abs()).max(1e-6);
                    assert!((dl[i] - fd).abs() / scale < 1e-4);

                    let mut sp = scales.clone();
                    sp[i] += h;
                    let mut sm = scales.clone();
                    sm[i] -= h;
                    let fd = (distill_total(&losses, &sp, mode).unwrap().0.total
                        - distill_total(&losses, &sm, mode).unwrap().0.total)
                        / (2.0 * h);
                    let scale = ds[i].abs().max(fd.abs()).max(1e-6);
                    assert!((ds[i] - fd).abs() / scale < 1e-4);
                }
            }
        }
    }

    #[test]
    fn larger_sigma_downweights_teacher() {
        let mut prev = f64::INFINITY;
        for &s in &[0.5, 1.0, 2.0, 4.0] {
            let (_, dl, _) = distill_total(&[1.0], &[s], ObjectiveMode::Stabilized).unwrap();
            assert!(
                dl[0] < prev,
                "d total / d L must strictly decrease in sigma"
            );
            prev = dl[0];
        }
    }

    #[test]
    fn nonpositive_sigma_rejected_in_weighted_modes() {
        assert!(matches!(
            distill_total(&[1.0], &[0.0], ObjectiveMode::Stabilized),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            distill_total(&[1.0], &[-1.0], ObjectiveMode::NaiveLogSigma),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn default_trio_loss_mapping() {
        let trio = TeacherSpec::default_trio();
        let kinds: Vec<LossKind> = trio.iter().map(|t| map_teacher_loss(t).unwrap()).collect();
        assert_eq!(
            kinds,
            vec![LossKind::Cosine, LossKind::L1, LossKind::CosineDeMean]
        );
    }

    #[test]
    fn loss_override_wins() {
        let mut t = TeacherSpec::default_trio().remove(1);
        t.loss = Some(LossKind::L2);
        assert_eq!(map_teacher_loss(&t).unwrap(), LossKind::L2);
    }

    #[test]
    fn unknown_teacher_without_override_errors() {
        let mut t = TeacherSpec::default_trio().remove(0);
        t.name = "mystery".into();
        t.loss = None;
        assert!(matches!(map_teacher_loss(&t), Err(Error::Config(_))));
    }
}
