//! The uncertainty-penalized likelihood loss and its gradients.
//!
//! A labeled node with diagonal-Gaussian message `N(m, diag(var))` and label
//! `c*` is correctly ranked when every difference `tau_c = theta_c -
//! theta_c*` (for `c != c*`) is negative. The exact likelihood is the
//! orthant probability of the `(C-1)`-dimensional Gaussian of `tau`;
//! training uses the factorized form obtained by dropping the off-diagonal
//! entries of its covariance:
//!
//! `L ~= prod_{c != c*} 1/2 [1 + erf((m_c* - m_c) / sqrt(2 (var_c + var_c*)))]`
//!
//! Everything runs in log space so confidently-wrong predictions (erf near
//! -1) stay finite. The exact orthant probability is estimated here only by
//! a plain Monte Carlo oracle used in tests.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

const LN_SQRT_PI: f64 = 0.572364942924700087071713675677; // ln(sqrt(pi))

/// `ln(0.5 * erfc(x))` for any finite `x`, without underflow.
///
/// Three regimes: `ln1p` of the mirrored tail for negative `x`, direct
/// `erfc` while it is representable, and the asymptotic expansion
/// `erfc(x) = exp(-x^2) / (x sqrt(pi)) * (1 - u/2 + 3u^2/4 - ...)`,
/// `u = 1/x^2`, deep in the tail.
fn log_half_erfc(x: f64) -> f64 {
    if x < 0.0 {
        (-0.5 * libm::erfc(-x)).ln_1p()
    } else if x <= 25.0 {
        (0.5 * libm::erfc(x)).ln()
    } else {
        let u = 1.0 / (x * x);
        let series = 1.0 + u * (-0.5 + u * (0.75 + u * (-1.875 + u * 6.5625)));
        -x * x - x.ln() - LN_SQRT_PI + series.ln() - std::f64::consts::LN_2
    }
}

/// `ln Phi(z)` where `Phi(z) = 1/2 (1 + erf(z))` is one likelihood factor.
fn log_factor(z: f64) -> f64 {
    log_half_erfc(-z)
}

/// `exp(-z^2) / (sqrt(pi) Phi(z))`, the derivative of `ln Phi` with respect
/// to `z`. Stable over the whole range: tends to `-2z` as `z -> -inf` and
/// underflows to 0 as `z -> +inf`.
fn factor_ratio(z: f64, log_phi: f64) -> f64 {
    (-z * z - LN_SQRT_PI - log_phi).exp()
}

fn check_mean_var(m: ArrayView1<f64>, var: ArrayView1<f64>, label: usize) -> Result<()> {
    let c = m.len();
    if c < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if var.len() != c {
        return Err(Error::input(format!(
            "mean has {c} entries but variance has {}",
            var.len()
        )));
    }
    if label >= c {
        return Err(Error::input(format!("label {label} out of range for {c} classes")));
    }
    if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invariant("variance entries must be strictly positive"));
    }
    Ok(())
}

/// Negative log of the factorized likelihood, plus the likelihood itself.
/// The likelihood may underflow to zero for extreme inputs; the returned
/// `nll` is always finite.
pub fn loss_diag_approx(
    m: ArrayView1<f64>,
    var: ArrayView1<f64>,
    label: usize,
) -> Result<(f64, f64)> {
    check_mean_var(m, var, label)?;
    let mut nll = 0.0;
    for c in 0..m.len() {
        if c == label {
            continue;
        }
        let z = (m[label] - m[c]) / (2.0 * (var[c] + var[label])).sqrt();
        nll -= log_factor(z);
    }
    Ok((nll, (-nll).exp()))
}

/// Loss and analytic gradients with respect to the means and variances.
///
/// With `z_c = (m_c* - m_c) / sqrt(2 v_c)`, `v_c = var_c + var_c*`, and
/// `r_c = exp(-z_c^2) / (sqrt(pi) Phi(z_c))`:
///   d nll / d m_c    =  r_c / sqrt(2 v_c)
///   d nll / d m_c*   = -sum_c d nll / d m_c        (exact by construction)
///   d nll / d var_c  =  r_c z_c / (2 v_c)          (also added to var_c*)
pub fn loss_and_grad(
    m: ArrayView1<f64>,
    var: ArrayView1<f64>,
    label: usize,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    check_mean_var(m, var, label)?;
    let c_total = m.len();
    let mut nll = 0.0;
    let mut d_m = Array1::<f64>::zeros(c_total);
    let mut d_var = Array1::<f64>::zeros(c_total);
    let mut d_m_label = 0.0;
    for c in 0..c_total {
        if c == label {
            continue;
        }
        let v = var[c] + var[label];
        let scale = 1.0 / (2.0 * v).sqrt();
        let z = (m[label] - m[c]) * scale;
        let log_phi = log_factor(z);
        nll -= log_phi;
        let ratio = factor_ratio(z, log_phi);
        let dm = ratio * scale;
        d_m[c] = dm;
        d_m_label -= dm;
        let dv = ratio * z / (2.0 * v);
        d_var[c] += dv;
        d_var[label] += dv;
    }
    d_m[label] = d_m_label;
    Ok((nll, d_m, d_var))
}

/// The Gaussian of the pairwise differences `tau_c = theta_c - theta_c*`:
/// mean `m_c - m_c*` and covariance `diag(var_c) + var_c* * ones`, both over
/// the `C-1` classes `c != c*` in ascending order.
#[derive(Debug, Clone)]
pub struct PairwiseGaussianDiff {
    pub mu: Array1<f64>,
    pub cov: Array2<f64>,
}

impl PairwiseGaussianDiff {
    pub fn new(m: ArrayView1<f64>, var: ArrayView1<f64>, label: usize) -> Result<Self> {
        check_mean_var(m, var, label)?;
        let c_total = m.len();
        let others: Vec<usize> = (0..c_total).filter(|&c| c != label).collect();
        let k = others.len();
        let mu = Array1::from_iter(others.iter().map(|&c| m[c] - m[label]));
        let mut cov = Array2::from_elem((k, k), var[label]);
        for (a, &c) in others.iter().enumerate() {
            cov[[a, a]] += var[c];
        }
        Ok(PairwiseGaussianDiff { mu, cov })
    }
}

/// A Monte Carlo orthant-probability estimate with its binomial standard
/// error.
#[derive(Debug, Clone, Copy)]
pub struct OrthantEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub num_samples: usize,
}

/// Estimates `P(tau < 0 componentwise)` by sampling `tau = L xi + mu` with
/// `L` the Cholesky factor of the covariance and `xi` standard normal.
pub fn mvn_orthant_mc(
    diff: &PairwiseGaussianDiff,
    num_samples: usize,
    seed: u64,
) -> Result<OrthantEstimate> {
    if num_samples < 1000 {
        return Err(Error::input("orthant estimate needs at least 1000 samples"));
    }
    let k = diff.mu.len();
    let l = linalg::cholesky(diff.cov.view()).ok_or_else(|| {
        Error::invariant("pairwise-difference covariance is not positive definite")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut hits = 0usize;
    let mut xi = vec![0.0f64; k];
    for _ in 0..num_samples {
        for x in xi.iter_mut() {
            *x = normal.sample(&mut rng);
        }
        let mut all_negative = true;
        for row in 0..k {
            let mut t = diff.mu[row];
            for col in 0..=row {
                t += l[[row, col]] * xi[col];
            }
            if t >= 0.0 {
                all_negative = false;
                break;
            }
        }
        if all_negative {
            hits += 1;
        }
    }
    let p = hits as f64 / num_samples as f64;
    let std_error = (p * (1.0 - p) / num_samples as f64).sqrt();
    Ok(OrthantEstimate {
        probability: p,
        std_error,
        num_samples,
    })
}

/// Log-sum-exp-stable cross entropy with analytic gradient
/// (`softmax(logits) - onehot(label)`).
pub fn cross_entropy_loss(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if label >= c {
        return Err(Error::input(format!("label {label} out of range for {c} classes")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = lse - logits[label];
    let mut grad = Array1::from_iter(logits.iter().map(|&z| (z - lse).exp()));
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Result of a central-finite-difference comparison against an analytic
/// gradient.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Coordinate where the largest relative error occurred.
    pub worst_index: usize,
    pub pass: bool,
}

/// Compares `analytic` against central differences of `f` at `point`.
/// The relative error denominator is `max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(
    f: F,
    analytic: &[f64],
    point: &[f64],
    h: f64,
    tol: f64,
) -> FiniteDiffReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    assert_eq!(analytic.len(), point.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    FiniteDiffReport {
        max_rel_error,
        worst_index,
        pass: max_rel_error < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn log_half_erfc_matches_reference_values() {
        // Reference values computed with 30-digit arithmetic.
        assert!((log_half_erfc(0.0) - 0.5f64.ln()).abs() < 1e-15);
        let direct = log_half_erfc(30.0);
        assert!(
            (direct - (-904.667264291203823)).abs() < 1e-9,
            "tail value {direct}"
        );
        let deep = log_half_erfc(50_000.0);
        assert!((deep - (-2_500_000_012.085_290_4)).abs() / 2.5e9 < 1e-12);
    }

    #[test]
    fn log_half_erfc_is_continuous_at_the_asymptotic_seam() {
        // Both branches must agree near x = 25.
        let direct = (0.5 * libm::erfc(24.999)).ln();
        let asym = {
            let x: f64 = 24.999;
            let u = 1.0 / (x * x);
            let series = 1.0 + u * (-0.5 + u * (0.75 + u * (-1.875 + u * 6.5625)));
            -x * x - x.ln() - LN_SQRT_PI + series.ln() - std::f64::consts::LN_2
        };
        assert!(((direct - asym) / direct).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_class_case_is_coin_flip() {
        let (nll, lik) = loss_diag_approx(
            array![0.0, 0.0].view(),
            array![1.0, 1.0].view(),
            0,
        )
        .unwrap();
        assert!((lik - 0.5).abs() < 1e-15);
        assert!((nll - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_two_class_case_matches_erf_evaluation() {
        // z = 3 / sqrt(2 * 2) = 1.5; 0.5 (1 + erf(1.5)) computed at high
        // precision is 0.983052573237655364.
        let (nll, lik) = loss_diag_approx(
            array![3.0, 0.0].view(),
            array![1.0, 1.0].view(),
            0,
        )
        .unwrap();
        assert!((lik - 0.983052573237655364).abs() < 1e-12);
        assert!((nll + lik.ln()).abs() < 1e-12);
    }

    #[test]
    fn widening_variance_decreases_likelihood_of_correct_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = 2 + rng.random_range(0..5);
            let label = rng.random_range(0..c);
            let mut m = vec![0.0f64; c];
            for (i, v) in m.iter_mut().enumerate() {
                *v = if i == label {
                    1.0 + rng.random::<f64>() * 3.0
                } else {
                    rng.random::<f64>() - 1.0
                };
            }
            let var: Vec<f64> = (0..c).map(|_| 0.1 + rng.random::<f64>()).collect();
            let doubled: Vec<f64> = var.iter().map(|v| 2.0 * v).collect();
            let (_, lik) = loss_diag_approx(
                ArrayView1::from(&m),
                ArrayView1::from(&var),
                label,
            )
            .unwrap();
            let (_, lik2) = loss_diag_approx(
                ArrayView1::from(&m),
                ArrayView1::from(&doubled),
                label,
            )
            .unwrap();
            assert!(
                lik2 < lik,
                "doubling variance should shrink likelihood: {lik} -> {lik2}"
            );
        }
    }

    #[test]
    fn loss_is_finite_for_extreme_gaps_and_tiny_variances() {
        for &gap in &[100.0, -100.0] {
            let (nll, _) = loss_diag_approx(
                array![gap, 0.0].view(),
                array![1e-6, 1e-6].view(),
                0,
            )
            .unwrap();
            assert!(nll.is_finite(), "gap {gap} gave nll {nll}");
            assert!(nll >= 0.0);
        }
    }

    #[test]
    fn nonpositive_variance_is_an_invariant_violation() {
        let err = loss_diag_approx(array![0.0, 1.0].view(), array![1.0, -1.0].view(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn pairwise_diff_covariance_is_spd_for_random_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let c = 2 + rng.random_range(0..6);
            let label = rng.random_range(0..c);
            let m: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let var: Vec<f64> = (0..c).map(|_| 1e-3 + rng.random::<f64>() * 9.0).collect();
            let diff = PairwiseGaussianDiff::new(
                ArrayView1::from(&m),
                ArrayView1::from(&var),
                label,
            )
            .unwrap();
            assert!(
                linalg::cholesky(diff.cov.view()).is_some(),
                "covariance must be SPD"
            );
        }
    }

    #[test]
    fn orthant_one_dimensional_symmetric_case() {
        let diff = PairwiseGaussianDiff {
            mu: array![0.0],
            cov: array![[2.0]],
        };
        let est = mvn_orthant_mc(&diff, 200_000, 11).unwrap();
        assert!((est.probability - 0.5).abs() < 3.0 * est.std_error);
    }

    #[test]
    fn orthant_matches_diag_approx_for_two_classes() {
        // With C = 2 the difference vector is one-dimensional, so the
        // diagonal approximation is exact.
        let m = array![1.2, -0.4];
        let var = array![0.7, 1.9];
        let (_, lik) = loss_diag_approx(m.view(), var.view(), 0).unwrap();
        let diff = PairwiseGaussianDiff::new(m.view(), var.view(), 0).unwrap();
        let est = mvn_orthant_mc(&diff, 1_000_000, 5).unwrap();
        assert!(
            (est.probability - lik).abs() < 3.0 * est.std_error,
            "MC {} vs closed form {lik}",
            est.probability
        );
    }

    #[test]
    fn orthant_rejects_tiny_sample_counts() {
        let diff = PairwiseGaussianDiff {
            mu: array![0.0],
            cov: array![[1.0]],
        };
        assert!(mvn_orthant_mc(&diff, 10, 0).is_err());
    }

    #[test]
    fn four_class_gap_between_approximation_and_oracle_is_bounded() {
        // The diagonal form drops the shared var_c* correlation, so for
        // C > 2 it is an approximation. On this fixed instance the measured
        // gap is +0.0836 (oracle 0.5078 vs approximation 0.4241): ignoring
        // the positive correlations understates the probability that all
        // differences are negative at once. Assert the documented bound.
        let m = array![1.0, 0.2, -0.5, 0.4];
        let var = array![0.8, 1.1, 0.6, 1.4];
        let (_, lik) = loss_diag_approx(m.view(), var.view(), 0).unwrap();
        let diff = PairwiseGaussianDiff::new(m.view(), var.view(), 0).unwrap();
        let est = mvn_orthant_mc(&diff, 1_000_000, 23).unwrap();
        let gap = est.probability - lik;
        assert!(
            gap > 0.0 && gap < 0.1,
            "gap {gap} (oracle {} vs approx {lik})",
            est.probability
        );
    }

    #[test]
    fn gradients_match_finite_differences_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..200 {
            let c = [2, 3, 7][trial % 3];
            let label = rng.random_range(0..c);
            let m: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.05 + rng.random::<f64>() * 4.0).collect();
            let (_, d_m, d_var) = loss_and_grad(
                ArrayView1::from(&m),
                ArrayView1::from(&var),
                label,
            )
            .unwrap();

            let point: Vec<f64> = m.iter().chain(var.iter()).copied().collect();
            let analytic: Vec<f64> = d_m.iter().chain(d_var.iter()).copied().collect();
            let report = finite_diff_check(
                |p| {
                    let (mm, vv) = p.split_at(c);
                    loss_diag_approx(ArrayView1::from(mm), ArrayView1::from(vv), label)
                        .unwrap()
                        .0
                },
                &analytic,
                &point,
                1e-5,
                1e-4,
            );
            assert!(
                report.pass,
                "trial {trial}: max rel error {} at coordinate {}",
                report.max_rel_error, report.worst_index
            );
        }
    }

    #[test]
    fn gradient_sum_rule_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4321);
        for _ in 0..50 {
            let c = 2 + rng.random_range(0..6);
            let label = rng.random_range(0..c);
            let m: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.1 + rng.random::<f64>()).collect();
            let (_, d_m, _) = loss_and_grad(
                ArrayView1::from(&m),
                ArrayView1::from(&var),
                label,
            )
            .unwrap();
            assert!(d_m.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_gradients_have_equal_magnitude_opposite_sign() {
        let (_, d_m, _) = loss_and_grad(
            array![0.5, 0.5].view(),
            array![1.0, 1.0].view(),
            0,
        )
        .unwrap();
        assert!(d_m[0] < 0.0);
        assert!(d_m[1] > 0.0);
        assert!((d_m[0] + d_m[1]).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradients() {
        // Gap of 20 standard deviations: all factors are ~1 and every
        // gradient collapses.
        let (_, d_m, d_var) = loss_and_grad(
            array![20.0, 0.0, 0.0].view(),
            array![1.0, 1.0, 1.0].view(),
            0,
        )
        .unwrap();
        for g in d_m.iter().chain(d_var.iter()) {
            assert!(g.abs() < 1e-6, "gradient {g} should be saturated");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let (loss, _) = cross_entropy_loss(Array1::zeros(7).view(), 3).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_prediction_is_tiny() {
        let (loss, _) = cross_entropy_loss(array![10.0, 0.0].view(), 0).unwrap();
        assert!(loss < 1e-4);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        for _ in 0..50 {
            let c = 2 + rng.random_range(0..6);
            let label = rng.random_range(0..c);
            let logits: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let (_, grad) = cross_entropy_loss(ArrayView1::from(&logits), label).unwrap();
            let report = finite_diff_check(
                |p| cross_entropy_loss(ArrayView1::from(p), label).unwrap().0,
                grad.as_slice().unwrap(),
                &logits,
                1e-6,
                1e-6,
            );
            assert!(report.pass, "max rel error {}", report.max_rel_error);
        }
    }

    #[test]
    fn finite_diff_check_accepts_correct_gradient() {
        let point = [1.7, -0.3, 2.2];
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let report = finite_diff_check(
            |p| p.iter().map(|x| x * x).sum(),
            &analytic,
            &point,
            1e-6,
            1e-8,
        );
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn finite_diff_check_rejects_wrong_gradient() {
        let point = [1.7, -0.3, 2.2];
        let wrong: Vec<f64> = point.iter().map(|x| 3.0 * x).collect();
        let report = finite_diff_check(
            |p| p.iter().map(|x| x * x).sum(),
            &wrong,
            &point,
            1e-6,
            1e-8,
        );
        assert!(!report.pass);
    }
}
