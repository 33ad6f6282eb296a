//! Pseudo-Voigt peak profile and the two-peak correlation fit.
//!
//! A coincidence histogram is modelled as
//!
//! ```text
//! c(tau) = a0 + bw * [ a1 * V(tau - tau_ab) + a2 * V(tau - tau_ba) ]
//! ```
//!
//! where `V` is a unit-area pseudo-Voigt profile, `a0` the background per
//! bin, `a1`/`a2` the detected pair counts of the two sources and `bw`
//! the bin width. The shape `(f, sigma)` is pre-characterized and held
//! fixed during fitting; only the five linear/position parameters are
//! free. The clock offset is the midpoint of the fitted centers and the
//! round-trip time their separation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::xcorr::{CorrelationHistogram, PeakCandidates};

/// Parameter indices in the fit vector and covariance matrix.
pub const P_BG: usize = 0;
pub const P_AMP_AB: usize = 1;
pub const P_AMP_BA: usize = 2;
pub const P_TAU_AB: usize = 3;
pub const P_TAU_BA: usize = 4;
const NP: usize = 5;

const MAX_ITER: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("invalid peak shape: f = {f}, sigma = {sigma_ps} ps")]
    BadShape { f: f64, sigma_ps: f64 },
    #[error("histogram window does not cover both peaks with a {0} ps margin")]
    BadWindow(f64),
    #[error("peaks closer than half a FWHM are unresolvable")]
    DegenerateOverlap,
    #[error("fit did not converge")]
    NotConverged,
}

/// Pseudo-Voigt shape: Lorentzian fraction `f` and width `sigma_ps`.
///
/// The profile is `(1-f) G(tau; sigma/sqrt(2 ln 2)) + f L(tau; sigma)`
/// with a unit-area Gaussian `G` of the given standard deviation and a
/// unit-area Lorentzian `L` of half-width `sigma`, so both components
/// share the same FWHM of `2 sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakShape<F> {
    pub f: F,
    pub sigma_ps: F,
}

impl<F: Real> PeakShape<F> {
    pub fn new(f: F, sigma_ps: F) -> Result<Self, FitError> {
        let shape = PeakShape { f, sigma_ps };
        shape.validate()?;
        Ok(shape)
    }

    /// The detector response used throughout: f = 0.2, sigma = 290 ps.
    pub fn detector_default() -> Self {
        PeakShape {
            f: F::of(0.2),
            sigma_ps: F::of(290.0),
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let ok = self.f >= F::zero()
            && self.f <= F::one()
            && self.sigma_ps > F::zero()
            && self.f.is_finite()
            && self.sigma_ps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(FitError::BadShape {
                f: self.f.as_f64(),
                sigma_ps: self.sigma_ps.as_f64(),
            })
        }
    }

    /// Standard deviation of the Gaussian component,
    /// `sigma / sqrt(2 ln 2)`.
    pub fn gauss_sigma_ps(&self) -> F {
        self.sigma_ps / (F::of(2.0) * F::LN_2()).sqrt()
    }

    /// Full width at half maximum, `2 sigma` for both components.
    pub fn fwhm_ps(&self) -> F {
        F::of(2.0) * self.sigma_ps
    }
}

/// Unit-area pseudo-Voigt density at `tau_ps`, in 1/ps.
pub fn pseudo_voigt_density<F: Real>(tau_ps: F, shape: &PeakShape<F>) -> F {
    let s = shape.gauss_sigma_ps();
    let two = F::of(2.0);
    let gauss = (-tau_ps * tau_ps / (two * s * s)).exp() / (s * (two * F::PI()).sqrt());
    let g = shape.sigma_ps;
    let lorentz = g / (F::PI() * (tau_ps * tau_ps + g * g));
    (F::one() - shape.f) * gauss + shape.f * lorentz
}

/// Derivative `dV/dtau` of the pseudo-Voigt density, in 1/ps^2.
pub fn pseudo_voigt_slope<F: Real>(tau_ps: F, shape: &PeakShape<F>) -> F {
    let s = shape.gauss_sigma_ps();
    let two = F::of(2.0);
    let gauss = (-tau_ps * tau_ps / (two * s * s)).exp() / (s * (two * F::PI()).sqrt());
    let dgauss = -tau_ps / (s * s) * gauss;
    let g = shape.sigma_ps;
    let denom = tau_ps * tau_ps + g * g;
    let dlorentz = -two * tau_ps * g / (F::PI() * denom * denom);
    (F::one() - shape.f) * dgauss + shape.f * dlorentz
}

/// Result of fitting the two-peak model to a fine histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoublePeakFit<F> {
    /// Background per bin.
    pub a0: F,
    /// Pair counts in the right (`tau_ab`) and left (`tau_ba`) peaks.
    pub a1: F,
    pub a2: F,
    /// Fitted centers, `tau_ab_ps >= tau_ba_ps`.
    pub tau_ab_ps: F,
    pub tau_ba_ps: F,
    /// Covariance over `[a0, a1, a2, tau_ab, tau_ba]`.
    pub covariance: [[F; 5]; 5],
    /// Weighted sum of squares per degree of freedom.
    pub chi2_red: F,
    pub converged: bool,
    /// Bins used by the fit.
    pub n_bins: usize,
}

impl<F: Real> DoublePeakFit<F> {
    pub fn var_tau_ab(&self) -> F {
        self.covariance[P_TAU_AB][P_TAU_AB]
    }

    pub fn var_tau_ba(&self) -> F {
        self.covariance[P_TAU_BA][P_TAU_BA]
    }

    pub fn cov_tau(&self) -> F {
        self.covariance[P_TAU_AB][P_TAU_BA]
    }
}

/// Clock offset and round-trip time derived from one fitted block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate<F> {
    /// Clock offset delta (Bob minus Alice), ps.
    pub delta_ps: F,
    /// Round-trip time `tau_ab - tau_ba`, ps; non-negative.
    pub round_trip_ps: F,
    /// One-standard-deviation uncertainty of `delta_ps`.
    pub sigma_delta_ps: F,
    pub block_index: u64,
    /// Midpoint of the block interval, ps since epoch.
    pub epoch_mid_ps: i64,
}

/// Fit the two-peak model, starting from located candidates.
///
/// Damped least squares with analytic Jacobian; weights are
/// `1/max(count, 1)` (Poisson variance, floored for empty bins); the
/// shape is held fixed. Converged when the largest relative parameter
/// step falls below 1e-8 (or 100x the scalar epsilon), with at most 200
/// iterations. The covariance comes from the inverse of the final normal
/// matrix.
pub fn fit_double_peak<F: Real>(
    h: &CorrelationHistogram,
    shape: &PeakShape<F>,
    init: &PeakCandidates,
) -> Result<DoublePeakFit<F>, FitError> {
    shape.validate()?;
    let fwhm = shape.fwhm_ps();
    let margin = F::of(3.0) * fwhm;
    let lo = F::of_i64(h.tau_start_ps);
    let hi = F::of_i64(h.tau_end_ps());
    let right = F::of(init.tau_right_ps);
    let left = F::of(init.tau_left_ps);
    if left - margin < lo || right + margin > hi {
        return Err(FitError::BadWindow(margin.as_f64()));
    }
    let bw = F::of_i64(h.bin_width_ps);
    if (right - left).abs() <= bw {
        return Err(FitError::DegenerateOverlap);
    }
    if h.counts.len() <= NP {
        return Err(FitError::BadWindow(margin.as_f64()));
    }

    // Bin centers, counts and initial Poisson weights.
    let n = h.counts.len();
    let problem = FitProblem {
        taus: (0..n).map(|k| F::of(h.bin_center(k))).collect(),
        counts: h.counts.iter().map(|&c| F::of_usize(c as usize)).collect(),
        bw,
        shape,
    };
    let weights: Vec<F> = problem
        .counts
        .iter()
        .map(|&c| F::one() / c.max(F::one()))
        .collect();

    // Initialization: background from the median bin, amplitudes from the
    // candidate bin heights above background.
    let v0 = pseudo_voigt_density(F::zero(), shape);
    let a0_init = F::of(h.baseline());
    let amp = |tau: F| -> F {
        let k = ((tau - lo) / bw).to_usize().unwrap_or(0).min(n - 1);
        ((problem.counts[k] - a0_init) / (v0 * bw)).max(F::one() / (v0 * bw))
    };
    let p0 = [a0_init, amp(right), amp(left), right, left];

    let mut p = problem.levenberg_marquardt(p0, &weights)?;

    // Order the peaks: tau_ab is the right one by convention.
    if p[P_TAU_AB] < p[P_TAU_BA] {
        p.swap(P_TAU_AB, P_TAU_BA);
        p.swap(P_AMP_AB, P_AMP_BA);
    }
    if (p[P_TAU_AB] - p[P_TAU_BA]).abs() < fwhm / F::of(2.0) {
        return Err(FitError::DegenerateOverlap);
    }

    let (a, _) = problem.normal(&p, &weights);
    let cov = crate::linalg::invert(&a).ok_or(FitError::NotConverged)?;
    let mut covariance = [[F::zero(); NP]; NP];
    for i in 0..NP {
        for k in 0..NP {
            covariance[i][k] = cov[i][k];
        }
    }
    // Background and amplitudes are reported non-negative. The
    // count-valued weights bias the free background a fraction of a count
    // below zero in high-statistics windows; the clamp keeps the model
    // physical and leaves the centers untouched. A fit whose peak
    // amplitudes collapse entirely is no two-peak fit at all.
    for i in [P_BG, P_AMP_AB, P_AMP_BA] {
        p[i] = p[i].max(F::zero());
    }
    if p[P_AMP_AB] == F::zero() || p[P_AMP_BA] == F::zero() {
        return Err(FitError::NotConverged);
    }
    let dof = F::of_usize(n - NP);
    Ok(DoublePeakFit {
        a0: p[P_BG],
        a1: p[P_AMP_AB],
        a2: p[P_AMP_BA],
        tau_ab_ps: p[P_TAU_AB],
        tau_ba_ps: p[P_TAU_BA],
        covariance,
        chi2_red: problem.chi2(&p, &weights) / dof,
        converged: true,
        n_bins: n,
    })
}

/// The weighted least-squares problem for one histogram and shape.
struct FitProblem<'a, F> {
    taus: Vec<F>,
    counts: Vec<F>,
    bw: F,
    shape: &'a PeakShape<F>,
}

impl<F: Real> FitProblem<'_, F> {
    fn model(&self, p: &[F; NP], tau: F) -> F {
        p[P_BG]
            + self.bw
                * (p[P_AMP_AB] * pseudo_voigt_density(tau - p[P_TAU_AB], self.shape)
                    + p[P_AMP_BA] * pseudo_voigt_density(tau - p[P_TAU_BA], self.shape))
    }

    fn jacobian_row(&self, p: &[F; NP], tau: F) -> [F; NP] {
        [
            F::one(),
            self.bw * pseudo_voigt_density(tau - p[P_TAU_AB], self.shape),
            self.bw * pseudo_voigt_density(tau - p[P_TAU_BA], self.shape),
            -self.bw * p[P_AMP_AB] * pseudo_voigt_slope(tau - p[P_TAU_AB], self.shape),
            -self.bw * p[P_AMP_BA] * pseudo_voigt_slope(tau - p[P_TAU_BA], self.shape),
        ]
    }

    fn chi2(&self, p: &[F; NP], weights: &[F]) -> F {
        self.taus
            .iter()
            .zip(&self.counts)
            .zip(weights)
            .map(|((&tau, &c), &w)| {
                let r = c - self.model(p, tau);
                w * r * r
            })
            .sum()
    }

    /// Normal matrix `J^T W J` and gradient `J^T W r`.
    fn normal(&self, p: &[F; NP], weights: &[F]) -> (Vec<Vec<F>>, Vec<F>) {
        let mut a = vec![vec![F::zero(); NP]; NP];
        let mut g = vec![F::zero(); NP];
        for ((&tau, &c), &w) in self.taus.iter().zip(&self.counts).zip(weights) {
            let j = self.jacobian_row(p, tau);
            let r = c - self.model(p, tau);
            for i in 0..NP {
                g[i] = g[i] + w * j[i] * r;
                for k in i..NP {
                    a[i][k] = a[i][k] + w * j[i] * j[k];
                }
            }
        }
        for i in 0..NP {
            for k in 0..i {
                a[i][k] = a[k][i];
            }
        }
        (a, g)
    }

    /// Damped least squares from `p0` to convergence: relative step below
    /// 1e-8 (or 100x the scalar epsilon) within 200 iterations.
    fn levenberg_marquardt(&self, p0: [F; NP], weights: &[F]) -> Result<[F; NP], FitError> {
        let step_tol = F::of(1e-8).max(F::epsilon() * F::of(100.0));
        let mut p = p0;
        let mut chi2 = self.chi2(&p, weights);
        let mut lambda = F::of(1e-3);
        let lambda_max = F::of(1e12);

        for _ in 0..MAX_ITER {
            let (a, g) = self.normal(&p, weights);
            let mut damped = a.clone();
            for i in 0..NP {
                damped[i][i] = a[i][i] * (F::one() + lambda);
            }
            let step = match crate::linalg::solve(damped, g) {
                Some(s) => s,
                None => {
                    lambda = lambda * F::of(10.0);
                    if lambda > lambda_max {
                        return Err(FitError::NotConverged);
                    }
                    continue;
                }
            };
            let mut trial = p;
            for i in 0..NP {
                trial[i] = p[i] + step[i];
            }
            let chi2_trial = self.chi2(&trial, weights);
            let rel_step = (0..NP)
                .map(|i| (step[i] / p[i].abs().max(F::one())).abs())
                .fold(F::zero(), F::max);
            #[cfg(feature = "lm-trace")]
            eprintln!(
                "lm: chi2={:?} trial={:?} lambda={:?} rel_step={:?} p={:?} step={:?}",
                chi2, chi2_trial, lambda, rel_step, p, step
            );
            if chi2_trial <= chi2 {
                p = trial;
                chi2 = chi2_trial;
                lambda = (lambda / F::of(10.0)).max(F::of(1e-12));
                if rel_step < step_tol {
                    return Ok(p);
                }
            } else {
                // Rejected but already at the step tolerance: the damped
                // step cannot improve chi2 within floating-point
                // resolution.
                if rel_step < step_tol {
                    return Ok(p);
                }
                lambda = lambda * F::of(10.0);
                if lambda > lambda_max {
                    return Err(FitError::NotConverged);
                }
            }
        }
        Err(FitError::NotConverged)
    }
}

/// Offset and round-trip time from a converged fit:
/// `delta = (tau_ab + tau_ba)/2`, `round_trip = tau_ab - tau_ba`.
pub fn estimate_sync<F: Real>(fit: &DoublePeakFit<F>) -> Result<SyncEstimate<F>, FitError> {
    estimate_sync_at(fit, 0, 0)
}

/// [`estimate_sync`] with the block position filled in.
pub fn estimate_sync_at<F: Real>(
    fit: &DoublePeakFit<F>,
    block_index: u64,
    epoch_mid_ps: i64,
) -> Result<SyncEstimate<F>, FitError> {
    if !fit.converged {
        return Err(FitError::NotConverged);
    }
    let two = F::of(2.0);
    let var =
        (fit.var_tau_ab() + fit.var_tau_ba() + two * fit.cov_tau()).max(F::zero());
    Ok(SyncEstimate {
        delta_ps: (fit.tau_ab_ps + fit.tau_ba_ps) / two,
        round_trip_ps: fit.tau_ab_ps - fit.tau_ba_ps,
        sigma_delta_ps: var.sqrt() / two,
        block_index,
        epoch_mid_ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xcorr::CorrelationHistogram;

    type Shape = PeakShape<f64>;

    fn shape() -> Shape {
        Shape::detector_default()
    }

    /// Composite Simpson quadrature, the independent area oracle.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + k as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn density_at_zero_matches_closed_form() {
        // V(0) = (1-f)/(s sqrt(2 pi)) + f/(pi sigma), s = sigma/sqrt(2 ln 2)
        let s = 290.0 / (2.0 * std::f64::consts::LN_2).sqrt();
        let expected = 0.8 / (s * (2.0 * std::f64::consts::PI).sqrt())
            + 0.2 / (std::f64::consts::PI * 290.0);
        let got = pseudo_voigt_density(0.0, &shape());
        assert!((got - expected).abs() / expected < 1e-12);
        // ~1.515e-3 / ps, i.e. ~1.5 / ns as measured for the detectors
        assert!((got - 1.515e-3).abs() / 1.515e-3 < 5e-4, "{got}");
    }

    #[test]
    fn density_is_even() {
        for tau in [1.0, 17.0, 290.0, 2_000.0, 123_456.0] {
            let v = pseudo_voigt_density(tau, &shape());
            let m = pseudo_voigt_density(-tau, &shape());
            assert_eq!(v, m);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let sh = shape();
        let f = |x: f64| pseudo_voigt_density(x, &sh);
        // Lorentzian tails hold ~2.5e-3 of the mass outside +-50 sigma:
        // 1 - area(+-50 s) = f * (2/pi) atan(1/50) up to quadrature error.
        let within_50 = simpson(f, -50.0 * 290.0, 50.0 * 290.0, 400_000);
        let tail = 0.2 * (2.0 / std::f64::consts::PI) * (1.0f64 / 50.0).atan();
        assert!((1.0 - within_50 - tail).abs() < 1e-6, "{within_50}");
        // A window wide enough for the wings integrates to 1 within 1e-3.
        let wide = simpson(f, -2_000.0 * 290.0, 2_000.0 * 290.0, 4_000_000);
        assert!((wide - 1.0).abs() < 1e-3, "{wide}");
    }

    #[test]
    fn slope_matches_finite_differences() {
        let sh = shape();
        for tau in [-900.0, -290.0, -31.0, 0.0, 55.5, 246.3, 1_234.0] {
            let h = 1e-3;
            let fd = (pseudo_voigt_density(tau + h, &sh) - pseudo_voigt_density(tau - h, &sh))
                / (2.0 * h);
            let an = pseudo_voigt_slope(tau, &sh);
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1e-9),
                "tau={tau}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(Shape::new(-0.1, 290.0).is_err());
        assert!(Shape::new(1.1, 290.0).is_err());
        assert!(Shape::new(0.2, 0.0).is_err());
        assert!(Shape::new(0.2, -1.0).is_err());
    }

    /// Histogram generated exactly from the model.
    fn model_histogram(
        a0: f64,
        a1: f64,
        a2: f64,
        tau_ab: f64,
        tau_ba: f64,
        bin: i64,
        lo: i64,
        hi: i64,
        noise_seed: Option<u64>,
    ) -> CorrelationHistogram {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let sh = shape();
        let n = ((hi - lo) / bin) as usize;
        let mut rng = noise_seed.map(rand_chacha::ChaCha12Rng::seed_from_u64);
        let counts: Vec<u64> = (0..n)
            .map(|k| {
                let tau = lo as f64 + (k as f64 + 0.5) * bin as f64;
                let mean = a0
                    + bin as f64
                        * (a1 * pseudo_voigt_density(tau - tau_ab, &sh)
                            + a2 * pseudo_voigt_density(tau - tau_ba, &sh));
                match &mut rng {
                    Some(r) if mean > 0.0 => Poisson::new(mean).unwrap().sample(r) as u64,
                    _ => mean.round() as u64,
                }
            })
            .collect();
        CorrelationHistogram {
            bin_width_ps: bin,
            tau_start_ps: lo,
            counts,
            n_a: 0,
            n_b: 0,
            duration_ps: 20_000_000_000_000,
        }
    }

    fn candidates(right: f64, left: f64) -> PeakCandidates {
        PeakCandidates {
            tau_right_ps: right,
            tau_left_ps: left,
            prominence_right: 1.0,
            prominence_left: 1.0,
        }
    }

    #[test]
    fn recovers_noiseless_model() {
        // a0 = 2, a1 = a2 = 500, peaks at +50 ns / -30 ns.
        let h = model_histogram(
            2.0, 500.0, 500.0, 50_000.0, -30_000.0, 16, -40_000, 60_000, None,
        );
        let fit =
            fit_double_peak(&h, &shape(), &candidates(50_010.0, -29_990.0)).unwrap();
        assert!(fit.converged);
        assert!((fit.tau_ab_ps - 50_000.0).abs() < 0.1, "{}", fit.tau_ab_ps);
        assert!((fit.tau_ba_ps - -30_000.0).abs() < 0.1, "{}", fit.tau_ba_ps);
        assert!((fit.a1 - 500.0).abs() / 500.0 < 1e-3);
        assert!((fit.a2 - 500.0).abs() / 500.0 < 1e-3);
        // rounding the model to integer counts keeps the background close
        assert!((fit.a0 - 2.0).abs() < 0.1);
    }

    #[test]
    fn shift_moves_centers_exactly() {
        let h0 = model_histogram(
            3.0, 400.0, 300.0, 10_000.0, -12_000.0, 16, -30_000, 30_000, Some(5),
        );
        let shift = 7_136;
        let mut h1 = h0.clone();
        h1.tau_start_ps += shift;
        let f0 = fit_double_peak(&h0, &shape(), &candidates(10_000.0, -12_000.0)).unwrap();
        let f1 = fit_double_peak(
            &h1,
            &shape(),
            &candidates(10_000.0 + shift as f64, -12_000.0 + shift as f64),
        )
        .unwrap();
        assert!((f1.tau_ab_ps - f0.tau_ab_ps - shift as f64).abs() < 0.1);
        assert!((f1.tau_ba_ps - f0.tau_ba_ps - shift as f64).abs() < 0.1);
        let d0 = estimate_sync(&f0).unwrap();
        let d1 = estimate_sync(&f1).unwrap();
        assert!((d1.round_trip_ps - d0.round_trip_ps).abs() < 0.1);
        assert!((d1.delta_ps - d0.delta_ps - shift as f64).abs() < 0.1);
    }

    #[test]
    fn swapped_candidates_leave_midpoint_invariant() {
        let h = model_histogram(
            2.0, 350.0, 420.0, 8_000.0, -9_000.0, 16, -25_000, 25_000, Some(11),
        );
        let sh = shape();
        let f_rl = fit_double_peak(&h, &sh, &candidates(8_000.0, -9_000.0)).unwrap();
        // hand the same points in with the labels flipped
        let f_lr = fit_double_peak(
            &h,
            &sh,
            &PeakCandidates {
                tau_right_ps: -9_000.0,
                tau_left_ps: 8_000.0,
                prominence_right: 1.0,
                prominence_left: 1.0,
            },
        )
        .unwrap();
        // ordering convention restores tau_ab >= tau_ba either way
        assert!((f_rl.tau_ab_ps - f_lr.tau_ab_ps).abs() < 1e-6);
        assert!((f_rl.tau_ba_ps - f_lr.tau_ba_ps).abs() < 1e-6);
        let d_rl = estimate_sync(&f_rl).unwrap();
        let d_lr = estimate_sync(&f_lr).unwrap();
        assert!((d_rl.delta_ps - d_lr.delta_ps).abs() < 1e-6);
        assert!(d_rl.round_trip_ps >= 0.0 && d_lr.round_trip_ps >= 0.0);
    }

    #[test]
    fn overlapping_candidates_degenerate() {
        let h = model_histogram(2.0, 500.0, 500.0, 50.0, -50.0, 16, -20_000, 20_000, None);
        // candidates 100 ps apart, far below the 580 ps FWHM
        let err = fit_double_peak(&h, &shape(), &candidates(50.0, -50.0)).unwrap_err();
        assert_eq!(err, FitError::DegenerateOverlap);
    }

    #[test]
    fn window_margin_enforced() {
        let h = model_histogram(2.0, 500.0, 500.0, 9_000.0, -9_000.0, 16, -10_000, 10_000, None);
        let err = fit_double_peak(&h, &shape(), &candidates(9_000.0, -9_000.0)).unwrap_err();
        assert!(matches!(err, FitError::BadWindow(_)));
    }

    #[test]
    fn residuals_are_white_on_model_data() {
        // Runs test on residual signs: no bin-to-bin correlation beyond 3
        // sigma of the runs-statistic expectation.
        let h = model_histogram(
            5.0, 2_000.0, 2_000.0, 6_000.0, -6_000.0, 16, -20_000, 20_000, Some(17),
        );
        let sh = shape();
        let fit = fit_double_peak(&h, &sh, &candidates(6_000.0, -6_000.0)).unwrap();
        let mut signs = Vec::new();
        for (k, &c) in h.counts.iter().enumerate() {
            let tau = h.bin_center(k);
            let m = fit.a0
                + h.bin_width_ps as f64
                    * (fit.a1 * pseudo_voigt_density(tau - fit.tau_ab_ps, &sh)
                        + fit.a2 * pseudo_voigt_density(tau - fit.tau_ba_ps, &sh));
            let r = c as f64 - m;
            if r != 0.0 {
                signs.push(r > 0.0);
            }
        }
        let n_pos = signs.iter().filter(|&&s| s).count() as f64;
        let n_neg = signs.len() as f64 - n_pos;
        let runs = 1 + signs.windows(2).filter(|w| w[0] != w[1]).count();
        let mu = 2.0 * n_pos * n_neg / (n_pos + n_neg) + 1.0;
        let var = (mu - 1.0) * (mu - 2.0) / (n_pos + n_neg - 1.0);
        let z = (runs as f64 - mu) / var.sqrt();
        assert!(z.abs() < 3.0, "runs test z = {z}");
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        // Relative 1e-6 agreement at random parameter points.
        use rand::{Rng, SeedableRng};
        let sh = shape();
        let bw = 16.0;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        let model = |p: &[f64; 5], tau: f64| -> f64 {
            p[P_BG]
                + bw * (p[P_AMP_AB] * pseudo_voigt_density(tau - p[P_TAU_AB], &sh)
                    + p[P_AMP_BA] * pseudo_voigt_density(tau - p[P_TAU_BA], &sh))
        };
        for _ in 0..50 {
            let p = [
                rng.gen_range(0.0..10.0),
                rng.gen_range(10.0..2_000.0),
                rng.gen_range(10.0..2_000.0),
                rng.gen_range(-5_000.0..5_000.0),
                rng.gen_range(-5_000.0..5_000.0),
            ];
            let tau: f64 = rng.gen_range(-8_000.0..8_000.0);
            let v_ab = pseudo_voigt_density(tau - p[P_TAU_AB], &sh);
            let v_ba = pseudo_voigt_density(tau - p[P_TAU_BA], &sh);
            let analytic = [
                1.0,
                bw * v_ab,
                bw * v_ba,
                -bw * p[P_AMP_AB] * pseudo_voigt_slope(tau - p[P_TAU_AB], &sh),
                -bw * p[P_AMP_BA] * pseudo_voigt_slope(tau - p[P_TAU_BA], &sh),
            ];
            for i in 0..5 {
                let h = 1e-6 * p[i].abs().max(1e-3);
                let mut hi_p = p;
                hi_p[i] += h;
                let mut lo_p = p;
                lo_p[i] -= h;
                let fd = (model(&hi_p, tau) - model(&lo_p, tau)) / (2.0 * h);
                let scale = analytic[i].abs().max(1e-9);
                assert!(
                    (fd - analytic[i]).abs() / scale < 1e-5,
                    "param {i}: {fd} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn sync_estimate_arithmetic() {
        let mut fit = DoublePeakFit {
            a0: 1.0,
            a1: 10.0,
            a2: 10.0,
            tau_ab_ps: 50_000.0,
            tau_ba_ps: -30_000.0,
            covariance: [[0.0; 5]; 5],
            chi2_red: 1.0,
            converged: true,
            n_bins: 100,
        };
        let e = estimate_sync(&fit).unwrap();
        assert_eq!(e.delta_ps, 10_000.0);
        assert_eq!(e.round_trip_ps, 80_000.0);

        // degenerate midpoint: both centers equal
        fit.tau_ab_ps = 4_200.0;
        fit.tau_ba_ps = 4_200.0;
        let e = estimate_sync(&fit).unwrap();
        assert_eq!(e.delta_ps, 4_200.0);
        assert_eq!(e.round_trip_ps, 0.0);

        // independent equal variances: sigma_delta = sigma / sqrt(2)
        fit.covariance[P_TAU_AB][P_TAU_AB] = 9.0;
        fit.covariance[P_TAU_BA][P_TAU_BA] = 9.0;
        let e = estimate_sync(&fit).unwrap();
        assert!((e.sigma_delta_ps - 3.0 / 2.0f64.sqrt()).abs() < 1e-12);

        fit.converged = false;
        assert_eq!(estimate_sync(&fit).unwrap_err(), FitError::NotConverged);
    }
}
