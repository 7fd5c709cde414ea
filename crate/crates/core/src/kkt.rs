//! Per-pixel attention QPs on the simplex.
//!
//! Each pixel distributes attention over the background token (index 0) and
//! `K` instance tokens. The reward loss pulls the pixel's own token towards
//! `alpha`; the penalty loss charges every token that does not belong to the
//! pixel. Closed-form stationary points are checked against projected
//! gradient descent.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 0.1;
pub const DEFAULT_ITERS: usize = 5000;
/// Consecutive loss increases tolerated before the step is declared too large.
pub const MAX_INCREASES: usize = 10;
/// Descent stops once no coordinate moves further than this.
pub const MOVE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAttentionProblem {
    k: usize,
    alpha: f64,
    /// 0 for background pixels, `i` for pixels of instance `i` (1-based).
    labels: Vec<usize>,
}

impl PixelAttentionProblem {
    pub fn new(k: usize, alpha: f64, labels: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("need at least one instance token".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
        }
        if labels.is_empty() {
            return Err(Error::Config("need at least one pixel".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > k) {
            return Err(Error::Config(format!("pixel label {l} exceeds K = {k}")));
        }
        Ok(Self { k, alpha, labels })
    }

    /// From an `n × K` binary membership matrix; each row may hold at most
    /// one 1.
    pub fn from_masks(masks: &Array2<u8>, alpha: f64) -> Result<Self> {
        let labels = masks
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(p, row)| {
                let ones: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(i, _)| i + 1)
                    .collect();
                if row.iter().any(|&v| v > 1) {
                    return Err(Error::Config(format!("pixel {p}: mask entries must be 0 or 1")));
                }
                match ones.as_slice() {
                    [] => Ok(0),
                    [i] => Ok(*i),
                    _ => Err(Error::Config(format!("pixel {p} belongs to more than one instance"))),
                }
            })
            .collect::<Result<_>>()?;
        Self::new(masks.ncols(), alpha, labels)
    }

    /// One background pixel followed by one pixel per instance.
    pub fn canonical(k: usize, alpha: f64) -> Result<Self> {
        Self::new(k, alpha, (0..=k).collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    /// `m_p` over tokens `0..=K`, with the background entry always 0.
    fn membership(&self, p: usize) -> Array1<f64> {
        let mut m = Array1::zeros(self.k + 1);
        if self.labels[p] > 0 {
            m[self.labels[p]] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `Σ_{i=0..K} (a_i − α·m_i)²`: the background coordinate also pays.
    RewardCosted,
    /// `Σ_{i=1..K} (a_i − α·m_i)²`: background is free.
    RewardFree,
    /// `Σ_{i=1..K} (1 − m_i)·a_i² + S·a_0²`.
    Penalty,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::RewardCosted => "reward-costed",
            LossKind::RewardFree => "reward-free",
            LossKind::Penalty => "penalty",
        }
    }
}

/// Loss of one pixel row and its gradient.
fn pixel_loss(kind: LossKind, alpha: f64, m: &Array1<f64>, a: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let s: f64 = m.sum();
    let mut value = 0.0;
    let mut grad = Array1::zeros(a.len());
    for i in 0..a.len() {
        let (w, target) = match (kind, i) {
            (LossKind::RewardCosted, _) => (1.0, alpha * m[i]),
            (LossKind::RewardFree, 0) => (0.0, 0.0),
            (LossKind::RewardFree, _) => (1.0, alpha * m[i]),
            (LossKind::Penalty, 0) => (s, 0.0),
            (LossKind::Penalty, _) => (1.0 - m[i], 0.0),
        };
        let r = a[i] - target;
        value += w * r * r;
        grad[i] = 2.0 * w * r;
    }
    (value, grad)
}

pub fn total_loss(problem: &PixelAttentionProblem, kind: LossKind, rows: &Array2<f64>) -> Result<f64> {
    check_rows(problem, rows)?;
    Ok((0..problem.pixels())
        .map(|p| pixel_loss(kind, problem.alpha, &problem.membership(p), rows.row(p)).0)
        .sum())
}

fn check_rows(problem: &PixelAttentionProblem, rows: &Array2<f64>) -> Result<()> {
    if rows.dim() != (problem.pixels(), problem.k + 1) {
        return Err(Error::Shape(format!(
            "rows are {:?}, problem needs ({}, {})",
            rows.dim(),
            problem.pixels(),
            problem.k + 1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardVariant {
    Costed,
    Free,
}

impl RewardVariant {
    pub fn loss_kind(&self) -> LossKind {
        match self {
            RewardVariant::Costed => LossKind::RewardCosted,
            RewardVariant::Free => LossKind::RewardFree,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    /// `n × (K+1)`, background column first.
    pub rows: Array2<f64>,
    /// Normalization multiplier per pixel.
    pub multipliers: Vec<f64>,
    /// Pixels whose unconstrained optimum lies off the simplex.
    pub infeasible: Vec<bool>,
}

pub fn reward_stationary_point(problem: &PixelAttentionProblem, variant: RewardVariant) -> StationaryPoint {
    let (n, k, alpha) = (problem.pixels(), problem.k, problem.alpha);
    let mut rows = Array2::zeros((n, k + 1));
    let mut multipliers = Vec::with_capacity(n);
    let mut infeasible = Vec::with_capacity(n);
    for p in 0..n {
        let m = problem.membership(p);
        let s = m.sum();
        match variant {
            RewardVariant::Costed => {
                let lambda = (2.0 * alpha * s - 2.0) / (k + 1) as f64;
                for i in 0..=k {
                    rows[[p, i]] = alpha * m[i] - lambda / 2.0;
                }
                multipliers.push(lambda);
                infeasible.push(false);
            }
            RewardVariant::Free => {
                for i in 1..=k {
                    rows[[p, i]] = alpha * m[i];
                }
                rows[[p, 0]] = 1.0 - alpha * s;
                multipliers.push(0.0);
                infeasible.push(alpha * s > 1.0);
            }
        }
    }
    StationaryPoint {
        rows,
        multipliers,
        infeasible,
    }
}

/// One-hot on the pixel's own token; background pixels go to token 0.
pub fn penalty_optimum(problem: &PixelAttentionProblem) -> Array2<f64> {
    let mut rows = Array2::zeros((problem.pixels(), problem.k + 1));
    for (p, &l) in problem.labels.iter().enumerate() {
        rows[[p, l]] = 1.0;
    }
    rows
}

/// Euclidean projection onto `{x ≥ 0, Σx = 1}` by sorting.
pub fn simplex_project(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidValue("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidValue("cannot project a non-finite vector".into()));
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.mapv(|x| (x - theta).max(0.0)))
}

/// Uniform draw from the simplex in `dim` coordinates.
pub fn random_simplex_point<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    let e: Array1<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let s = e.sum();
    e / s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub rows: Array2<f64>,
    /// Total loss before the first step and after each step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Projected gradient descent on every pixel at once.
pub fn projected_descent(
    problem: &PixelAttentionProblem,
    kind: LossKind,
    init: &Array2<f64>,
    step: f64,
    iters: usize,
) -> Result<DescentResult> {
    check_rows(problem, init)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("step {step} must be positive")));
    }
    for (p, row) in init.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|&x| x < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("initial row {p} is not on the simplex")));
        }
    }
    let members: Vec<Array1<f64>> = (0..problem.pixels()).map(|p| problem.membership(p)).collect();
    let mut rows = init.clone();
    let mut trace = vec![total_loss(problem, kind, &rows)?];
    let mut increases = 0;
    let mut iterations = 0;
    while iterations < iters {
        iterations += 1;
        let mut moved = 0.0f64;
        let mut value = 0.0;
        for (p, m) in members.iter().enumerate() {
            let (_, g) = pixel_loss(kind, problem.alpha, m, rows.row(p));
            let next = simplex_project((&rows.row(p) - &(g * step)).view())?;
            moved = moved.max(
                next.iter()
                    .zip(rows.row(p))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
            rows.row_mut(p).assign(&next);
            value += pixel_loss(kind, problem.alpha, m, rows.row(p)).0;
        }
        let prev = *trace.last().expect("trace starts nonempty");
        trace.push(value);
        increases = if value > prev { increases + 1 } else { 0 };
        if increases >= MAX_INCREASES {
            return Err(Error::StepTooLarge(iterations));
        }
        if moved < MOVE_TOL {
            break;
        }
    }
    Ok(DescentResult {
        rows,
        trace,
        iterations,
    })
}

/// Multiplier implied by a costed-reward solution: `−2·a_0`.
pub fn costed_multipliers(rows: &Array2<f64>) -> Vec<f64> {
    rows.column(0).iter().map(|a0| -2.0 * a0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelReport {
    pub pixel: usize,
    pub label: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiplier_analytic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiplier_numeric: Option<f64>,
    pub infeasible: bool,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub loss: LossKind,
    pub iterations: usize,
    pub pixels: Vec<PixelReport>,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub k: usize,
    pub alpha: f64,
    pub variant: RewardVariant,
    /// Attention an instance pixel gives to each other instance token.
    pub off_target: f64,
    /// Attention an instance pixel gives to its own token.
    pub target: f64,
    pub reward: LossReport,
    pub penalty: LossReport,
}

fn loss_report(
    problem: &PixelAttentionProblem,
    kind: LossKind,
    analytic: &Array2<f64>,
    multipliers: Option<&[f64]>,
    infeasible: Option<&[bool]>,
) -> Result<LossReport> {
    let k1 = problem.k + 1;
    let init = Array2::from_elem((problem.pixels(), k1), 1.0 / k1 as f64);
    let run = projected_descent(problem, kind, &init, DEFAULT_STEP, DEFAULT_ITERS)?;
    let numeric_mult = (kind == LossKind::RewardCosted).then(|| costed_multipliers(&run.rows));
    let pixels: Vec<PixelReport> = (0..problem.pixels())
        .map(|p| {
            let dev = analytic
                .row(p)
                .iter()
                .zip(run.rows.row(p))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            PixelReport {
                pixel: p,
                label: problem.labels[p],
                analytic: analytic.row(p).to_vec(),
                numeric: run.rows.row(p).to_vec(),
                multiplier_analytic: multipliers.map(|m| m[p]),
                multiplier_numeric: numeric_mult.as_ref().map(|m| m[p]),
                infeasible: infeasible.is_some_and(|f| f[p]),
                max_deviation: dev,
            }
        })
        .collect();
    let max_deviation = pixels.iter().map(|p| p.max_deviation).fold(0.0, f64::max);
    Ok(LossReport {
        loss: kind,
        iterations: run.iterations,
        pixels,
        max_deviation,
    })
}

/// Analytic and numeric solutions on the canonical problem: one background
/// pixel and one pixel per instance.
pub fn oracle_report(k: usize, alpha: f64, variant: RewardVariant) -> Result<OracleReport> {
    let problem = PixelAttentionProblem::canonical(k, alpha)?;
    let sp = reward_stationary_point(&problem, variant);
    let reward = loss_report(
        &problem,
        variant.loss_kind(),
        &sp.rows,
        (variant == RewardVariant::Costed).then_some(sp.multipliers.as_slice()),
        Some(&sp.infeasible),
    )?;
    let penalty = loss_report(&problem, LossKind::Penalty, &penalty_optimum(&problem), None, None)?;
    // Pixel 1 belongs to instance 1. With a single instance there is no
    // other instance token, so report the background column instead.
    let off_target = if k >= 2 { sp.rows[[1, 2]] } else { sp.rows[[1, 0]] };
    Ok(OracleReport {
        k,
        alpha,
        variant,
        off_target,
        target: sp.rows[[1, 1]],
        reward,
        penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut rows = Array2::zeros((n, dim));
        for p in 0..n {
            rows.row_mut(p).assign(&random_simplex_point(dim, rng));
        }
        rows
    }

    #[test]
    fn costed_instance_pixel_values() {
        let pr = PixelAttentionProblem::new(2, 0.5, vec![1]).unwrap();
        let sp = reward_stationary_point(&pr, RewardVariant::Costed);
        assert_abs_diff_eq!(sp.multipliers[0], -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sp.rows[[0, 2]], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sp.rows[[0, 1]], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sp.rows[[0, 0]], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn costed_background_pixel_values() {
        let pr = PixelAttentionProblem::new(2, 0.5, vec![0]).unwrap();
        let sp = reward_stationary_point(&pr, RewardVariant::Costed);
        assert_abs_diff_eq!(sp.multipliers[0], -2.0 / 3.0, epsilon = 1e-15);
        for i in 0..3 {
            assert_abs_diff_eq!(sp.rows[[0, i]], 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn free_variant_has_zero_loss() {
        let pr = PixelAttentionProblem::new(3, 0.5, vec![2, 0]).unwrap();
        let sp = reward_stationary_point(&pr, RewardVariant::Free);
        assert_eq!(sp.rows.row(0).to_vec(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(sp.rows.row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(total_loss(&pr, LossKind::RewardFree, &sp.rows).unwrap(), 0.0);
        assert!(sp.infeasible.iter().all(|&f| !f));
    }

    #[test]
    fn penalty_examples() {
        let pr = PixelAttentionProblem::new(2, 0.5, vec![1, 0]).unwrap();
        let opt = penalty_optimum(&pr);
        assert_eq!(opt, arr2(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]));
        assert_eq!(total_loss(&pr, LossKind::Penalty, &opt).unwrap(), 0.0);
    }

    #[test]
    fn projection_examples() {
        let on = arr1(&[0.2, 0.3, 0.5]);
        assert_eq!(simplex_project(on.view()).unwrap(), on);
        assert_eq!(simplex_project(arr1(&[1.0, 1.0]).view()).unwrap(), arr1(&[0.5, 0.5]));
        assert_eq!(simplex_project(arr1(&[2.0, 0.0]).view()).unwrap(), arr1(&[1.0, 0.0]));
        assert!(simplex_project(arr1(&[f64::NAN]).view()).is_err());
    }

    #[test]
    fn masks_with_two_memberships_rejected() {
        assert!(PixelAttentionProblem::from_masks(&arr2(&[[1u8, 1]]), 0.5).is_err());
        let pr = PixelAttentionProblem::from_masks(&arr2(&[[0u8, 1], [0, 0]]), 0.5).unwrap();
        assert_eq!(pr.labels(), &[2, 0]);
        assert!(PixelAttentionProblem::new(2, 0.0, vec![0]).is_err());
        assert!(PixelAttentionProblem::new(2, 0.5, vec![3]).is_err());
    }

    #[test]
    fn penalty_descent_converges_from_random_inits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pr = PixelAttentionProblem::canonical(2, 0.5).unwrap();
        let opt = penalty_optimum(&pr);
        for _ in 0..20 {
            let init = random_rows(pr.pixels(), 3, &mut rng);
            let out = projected_descent(&pr, LossKind::Penalty, &init, DEFAULT_STEP, DEFAULT_ITERS).unwrap();
            for (a, b) in out.rows.iter().zip(&opt) {
                assert!((a - b).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn costed_descent_reaches_stationary_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pr = PixelAttentionProblem::new(2, 0.5, vec![1]).unwrap();
        let init = random_rows(1, 3, &mut rng);
        let out = projected_descent(&pr, LossKind::RewardCosted, &init, DEFAULT_STEP, DEFAULT_ITERS).unwrap();
        assert_abs_diff_eq!(out.rows[[0, 2]], 1.0 / 6.0, epsilon = 1e-3);
        assert_abs_diff_eq!(costed_multipliers(&out.rows)[0], -1.0 / 3.0, epsilon = 1e-3);
    }

    #[test]
    fn analytic_start_does_not_move() {
        let pr = PixelAttentionProblem::canonical(3, 0.5).unwrap();
        let sp = reward_stationary_point(&pr, RewardVariant::Costed);
        let out = projected_descent(&pr, LossKind::RewardCosted, &sp.rows, DEFAULT_STEP, DEFAULT_ITERS).unwrap();
        assert_eq!(out.iterations, 1);
        for (a, b) in out.rows.iter().zip(&sp.rows) {
            assert!((a - b).abs() < 1e-15);
        }
        let opt = penalty_optimum(&pr);
        let out = projected_descent(&pr, LossKind::Penalty, &opt, DEFAULT_STEP, DEFAULT_ITERS).unwrap();
        assert_eq!(out.rows, opt);
    }

    #[test]
    fn oversized_step_aborts() {
        // Step 1.1 maps the error e to -1.2e, so the loss grows until the
        // boundary stops it.
        let pr = PixelAttentionProblem::new(1, 0.5, vec![0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = random_rows(1, 2, &mut rng);
        let err = projected_descent(&pr, LossKind::RewardCosted, &init, 1.1, DEFAULT_ITERS);
        assert!(matches!(err, Err(Error::StepTooLarge(_))), "{err:?}");
    }

    #[test]
    fn oracle_report_contains_paper_value() {
        let r = oracle_report(2, 0.5, RewardVariant::Costed).unwrap();
        assert_abs_diff_eq!(r.off_target, 1.0 / 6.0, epsilon = 1e-15);
        assert!(r.reward.max_deviation < 1e-9);
        assert!(r.penalty.max_deviation < 1e-9);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"variant\":\"costed\""));
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let x = simplex_project(Array1::from(v.clone()).view()).unwrap();
            prop_assert!((x.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(x.iter().all(|&c| c >= 0.0));
            // Optimality: no other simplex point from a few random draws is closer.
            let d = |y: &Array1<f64>| y.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(v.len() as u64);
            for _ in 0..20 {
                prop_assert!(d(&x) <= d(&random_simplex_point(v.len(), &mut rng)) + 1e-12);
            }
        }

        #[test]
        fn descent_stays_on_simplex_and_descends(seed in 0u64..200, k in 1usize..5, label in 0usize..5, kind in 0usize..3) {
            let kind = [LossKind::RewardCosted, LossKind::RewardFree, LossKind::Penalty][kind];
            let pr = PixelAttentionProblem::new(k, 0.5, vec![label.min(k)]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = random_rows(1, k + 1, &mut rng);
            let mut prev = total_loss(&pr, kind, &rows).unwrap();
            for _ in 0..50 {
                rows = projected_descent(&pr, kind, &rows, DEFAULT_STEP, 1).unwrap().rows;
                prop_assert!((rows.sum() - 1.0).abs() <= 1e-9);
                prop_assert!(rows.iter().all(|&c| c >= 0.0));
                let now = total_loss(&pr, kind, &rows).unwrap();
                prop_assert!(now <= prev + 1e-12);
                prev = now;
            }
        }

        #[test]
        fn penalty_optimum_is_strict(seed in 0u64..200, k in 1usize..5, label in 0usize..5, eps in 1e-4f64..0.5) {
            let pr = PixelAttentionProblem::new(k, 0.5, vec![label.min(k)]).unwrap();
            let opt = penalty_optimum(&pr);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let other = random_rows(1, k + 1, &mut rng);
            let mixed = &opt * (1.0 - eps) + &other * eps;
            prop_assert!(total_loss(&pr, LossKind::Penalty, &mixed).unwrap() > 0.0);
        }

        #[test]
        fn costed_point_beats_random_points(seed in 0u64..100, k in 1usize..5, label in 0usize..5) {
            let pr = PixelAttentionProblem::new(k, 0.5, vec![label.min(k)]).unwrap();
            let sp = reward_stationary_point(&pr, RewardVariant::Costed);
            let best = total_loss(&pr, LossKind::RewardCosted, &sp.rows).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let r = random_rows(1, k + 1, &mut rng);
                prop_assert!(best <= total_loss(&pr, LossKind::RewardCosted, &r).unwrap() + 1e-15);
            }
        }
    }
}
