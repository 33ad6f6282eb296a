//! Block-wise offset tracking and the downstream analyses: parabolic
//! clock-model fit, Allan/time deviation, precision prediction and
//! delay-attack statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::peakfit::{estimate_sync_at, fit_double_peak, FitError, PeakShape, SyncEstimate};
use crate::scalar::Real;
use crate::timetag::{split_blocks, TagStream, TimeTag};
use crate::xcorr::{cross_correlate_tags, locate_peaks_with, CorrError, PeakSearchConfig};

const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum PipeError {
    #[error("no block produced a usable estimate")]
    TrackingFailed,
    #[error("series too short: need at least {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("design matrix is rank deficient (epochs not distinct)")]
    RankDeficient,
    #[error("all distances are equal; slope undefined")]
    AllDistancesEqual,
    #[error("lengths differ: {0} estimates vs {1} values")]
    LengthMismatch(usize, usize),
    #[error("invalid precision model: all parameters must be positive")]
    BadPrecisionModel,
    #[error("streams do not overlap in time")]
    NoOverlap,
    #[error("invalid block duration")]
    BadBlockDuration,
}

/// Why one block produced no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGap {
    pub block_index: u64,
    pub reason: String,
}

/// Ordered per-block offset estimates for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSeries<F> {
    pub estimates: Vec<SyncEstimate<F>>,
    pub t_a_ps: i64,
    /// Blocks that failed peak location or fitting; never interpolated.
    pub gaps: Vec<BlockGap>,
    /// Optional per-estimate segment labels (fiber in use, etc.),
    /// either empty or aligned with `estimates`.
    pub labels: Vec<String>,
}

impl<F: Real> SyncSeries<F> {
    pub fn deltas_ps(&self) -> Vec<F> {
        self.estimates.iter().map(|e| e.delta_ps).collect()
    }

    pub fn epochs_s(&self) -> Vec<F> {
        self.estimates
            .iter()
            .map(|e| F::of_i64(e.epoch_mid_ps) / F::of(PS_PER_S))
            .collect()
    }
}

/// Per-block pipeline: locate the peaks, fit the double-peak model,
/// derive the offset. Shared by offline tracking and the live session.
pub fn sync_block(
    cfg: &PeakSearchConfig,
    a_tags: &[TimeTag],
    b_tags: &[TimeTag],
    block_index: u64,
    epoch_mid_ps: i64,
    shape: &PeakShape<f64>,
) -> Result<SyncEstimate<f64>, BlockFailure> {
    let candidates = locate_peaks_with(cfg, a_tags, b_tags).map_err(BlockFailure::Locate)?;
    let margin = 4.0 * shape.fwhm_ps();
    let lo = (candidates.tau_left_ps - margin).floor() as i64;
    let hi = (candidates.tau_right_ps + margin).ceil() as i64;
    let fine = cross_correlate_tags(a_tags, b_tags, cfg.fine_bin_ps, (lo, hi))
        .map_err(BlockFailure::Locate)?;
    let fit = fit_double_peak(&fine, shape, &candidates).map_err(BlockFailure::Fit)?;
    estimate_sync_at(&fit, block_index, epoch_mid_ps).map_err(BlockFailure::Fit)
}

#[derive(Debug, Error, PartialEq)]
pub enum BlockFailure {
    #[error("peak location: {0}")]
    Locate(CorrError),
    #[error("peak fit: {0}")]
    Fit(FitError),
}

/// Track the clock offset block by block over two streams.
pub fn track(
    a: &TagStream,
    b: &TagStream,
    t_a_ps: i64,
    shape: &PeakShape<f64>,
) -> Result<SyncSeries<f64>, PipeError> {
    track_with(&PeakSearchConfig::default(), a, b, t_a_ps, shape)
}

/// [`track`] with explicit peak-search tuning.
///
/// Both streams are segmented on the same block grid in their local
/// times; blocks run in parallel and failures become gaps.
pub fn track_with(
    cfg: &PeakSearchConfig,
    a: &TagStream,
    b: &TagStream,
    t_a_ps: i64,
    shape: &PeakShape<f64>,
) -> Result<SyncSeries<f64>, PipeError> {
    let blocks_a = split_blocks(a, t_a_ps).map_err(|_| PipeError::BadBlockDuration)?;
    let blocks_b = split_blocks(b, t_a_ps).map_err(|_| PipeError::BadBlockDuration)?;
    if blocks_a.is_empty() || blocks_b.is_empty() {
        return Err(PipeError::NoOverlap);
    }
    let n = blocks_a.len().min(blocks_b.len());

    let results: Vec<(u64, Result<SyncEstimate<f64>, BlockFailure>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (ba, bb) = (&blocks_a[k], &blocks_b[k]);
            (
                ba.index,
                sync_block(cfg, ba.tags, bb.tags, ba.index, ba.epoch_mid_ps(), shape),
            )
        })
        .collect();

    let mut estimates = Vec::new();
    let mut gaps = Vec::new();
    for (index, r) in results {
        match r {
            Ok(e) => estimates.push(e),
            Err(f) => gaps.push(BlockGap {
                block_index: index,
                reason: f.to_string(),
            }),
        }
    }
    if estimates.is_empty() {
        return Err(PipeError::TrackingFailed);
    }
    Ok(SyncSeries {
        estimates,
        t_a_ps,
        gaps,
        labels: Vec::new(),
    })
}

/// Parabolic clock-model fit `delta(t) = b + d t + a t^2` over a series,
/// coefficients in the session-epoch convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFit<F> {
    /// Relative aging, 1/s.
    pub a_per_s: F,
    /// Relative frequency offset, dimensionless.
    pub d: F,
    /// Bias at the session epoch, ps.
    pub b_ps: F,
    pub sigma_a_per_s: F,
    pub sigma_d: F,
    pub sigma_b_ps: F,
    /// Per-estimate residuals `delta - fit(t)`, ps.
    pub residuals_ps: Vec<F>,
}

/// Unweighted least-squares parabola through `(block epoch, delta)`.
pub fn fit_drift<F: Real>(series: &SyncSeries<F>) -> Result<DriftFit<F>, PipeError> {
    let n = series.estimates.len();
    if n < 3 {
        return Err(PipeError::TooShort { need: 3, got: n });
    }
    let ts: Vec<F> = series.epochs_s();
    let ys: Vec<F> = series.deltas_ps();

    // Center the epochs for conditioning, fit in (ps, s) units, then
    // shift the coefficients back to the session epoch.
    let t_mean = ts.iter().copied().sum::<F>() / F::of_usize(n);
    let mut xtx = vec![vec![F::zero(); 3]; 3];
    let mut xty = vec![F::zero(); 3];
    for (&t, &y) in ts.iter().zip(&ys) {
        let u = t - t_mean;
        let row = [u * u, u, F::one()];
        for i in 0..3 {
            xty[i] = xty[i] + row[i] * y;
            for k in 0..3 {
                xtx[i][k] = xtx[i][k] + row[i] * row[k];
            }
        }
    }
    let coef = crate::linalg::solve(xtx.clone(), xty).ok_or(PipeError::RankDeficient)?;
    let (ac, dc, bc) = (coef[0], coef[1], coef[2]);

    let residuals_ps: Vec<F> = ts
        .iter()
        .zip(&ys)
        .map(|(&t, &y)| {
            let u = t - t_mean;
            y - (ac * u * u + dc * u + bc)
        })
        .collect();
    let rss: F = residuals_ps.iter().map(|&r| r * r).sum();
    let s2 = if n > 3 {
        rss / F::of_usize(n - 3)
    } else {
        F::zero()
    };

    let cov_centered = crate::linalg::invert(&xtx).ok_or(PipeError::RankDeficient)?;
    // Transform (a~, d~, b~) at the centered epoch to epoch zero:
    //   a = a~, d = d~ - 2 a~ tm, b = b~ - d~ tm + a~ tm^2
    let two = F::of(2.0);
    let l = [
        [F::one(), F::zero(), F::zero()],
        [-two * t_mean, F::one(), F::zero()],
        [t_mean * t_mean, -t_mean, F::one()],
    ];
    let mut var = [F::zero(); 3];
    for i in 0..3 {
        let mut v = F::zero();
        for p in 0..3 {
            for q in 0..3 {
                v = v + l[i][p] * cov_centered[p][q] * l[i][q];
            }
        }
        var[i] = (v * s2).max(F::zero());
    }

    let per_s = F::of(1e-12); // ps/s -> dimensionless, ps/s^2 -> 1/s
    Ok(DriftFit {
        a_per_s: ac * per_s,
        d: (dc - two * ac * t_mean) * per_s,
        b_ps: bc - dc * t_mean + ac * t_mean * t_mean,
        sigma_a_per_s: var[0].sqrt() * per_s,
        sigma_d: var[1].sqrt() * per_s,
        sigma_b_ps: var[2].sqrt(),
        residuals_ps,
    })
}

/// Overlapping Allan deviation of fractional frequency from a phase
/// series (`x` in ps, sample spacing `tau0_s`, averaging factor `m`).
pub fn allan_deviation<F: Real>(x: &[F], tau0_s: F, m: usize) -> Result<F, PipeError> {
    let n = x.len();
    if m == 0 || n < 2 * m + 1 {
        return Err(PipeError::TooShort {
            need: 2 * m + 1,
            got: n,
        });
    }
    let tau = tau0_s * F::of_usize(m);
    let to_s = F::of(1e-12);
    let mut acc = F::zero();
    for i in 0..n - 2 * m {
        let d = (x[i + 2 * m] - x[i + m] - x[i + m] + x[i]) * to_s;
        acc = acc + d * d;
    }
    let denom = F::of(2.0) * F::of_usize(n - 2 * m) * tau * tau;
    Ok((acc / denom).sqrt())
}

/// Time deviation from a phase series, in ps:
/// `TDEV(m tau0) = (m tau0 / sqrt(3)) * ModADEV(m tau0)` with the
/// phase-averaged overlapping second-difference estimator.
pub fn time_deviation<F: Real>(x: &[F], tau0_s: F, m: usize) -> Result<F, PipeError> {
    let n = x.len();
    if m == 0 || n < 3 * m + 1 {
        return Err(PipeError::TooShort {
            need: 3 * m + 1,
            got: n,
        });
    }
    let to_s = F::of(1e-12);
    let second = |i: usize| (x[i + 2 * m] - x[i + m] - x[i + m] + x[i]) * to_s;
    // running inner sum over windows of m consecutive second differences
    let mut window = F::zero();
    for i in 0..m {
        window = window + second(i);
    }
    let mut acc = window * window;
    for j in 1..=n - 3 * m {
        window = window + second(j + m - 1) - second(j - 1);
        acc = acc + window * window;
    }
    let tau = tau0_s * F::of_usize(m);
    let m4 = F::of_usize(m * m) * F::of_usize(m * m);
    let terms = F::of_usize(n - 3 * m + 1);
    let mod_var = acc / (F::of(2.0) * m4 * tau0_s * tau0_s * terms);
    let tdev_s = tau / F::of(3.0).sqrt() * mod_var.sqrt();
    Ok(tdev_s / to_s)
}

/// Stability of a residual series over octave-spaced averaging times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport<F> {
    /// `(tau_s, Allan deviation)` pairs, tau increasing.
    pub adev: Vec<(F, F)>,
    /// `(tau_s, time deviation ps)` pairs, tau increasing.
    pub tdev: Vec<(F, F)>,
    pub residual_std_ps: F,
}

/// ADEV/TDEV at `m = 1, 2, 4, ...` for a phase series in ps.
pub fn stability_report<F: Real>(
    phase_ps: &[F],
    tau0_s: F,
) -> Result<StabilityReport<F>, PipeError> {
    let n = phase_ps.len();
    if n < 3 {
        return Err(PipeError::TooShort { need: 3, got: n });
    }
    let mut adev = Vec::new();
    let mut tdev = Vec::new();
    let mut m = 1usize;
    while 2 * m + 1 <= n {
        let tau = tau0_s * F::of_usize(m);
        adev.push((tau, allan_deviation(phase_ps, tau0_s, m)?));
        if 3 * m + 1 <= n {
            tdev.push((tau, time_deviation(phase_ps, tau0_s, m)?));
        }
        m *= 2;
    }
    let mean = phase_ps.iter().copied().sum::<F>() / F::of_usize(n);
    let var = phase_ps
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<F>()
        / F::of_usize(n.saturating_sub(1).max(1));
    Ok(StabilityReport {
        adev,
        tdev,
        residual_std_ps: var.sqrt(),
    })
}

/// Inputs of the synchronization-precision law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionModel<F> {
    /// Detector timing response V(tau = 0), 1/ns.
    pub v0_per_ns: F,
    /// Detected pair rate, Hz.
    pub rate_hz: F,
    /// Acquisition time, s.
    pub t_a_s: F,
}

/// Predicted one-standard-deviation offset precision, ps:
/// `dt = (1/sqrt(2)) * 1/(2 V(0)) * 1/sqrt(R T_a)`.
pub fn predict_precision<F: Real>(model: &PrecisionModel<F>) -> Result<F, PipeError> {
    if model.v0_per_ns <= F::zero() || model.rate_hz <= F::zero() || model.t_a_s <= F::zero() {
        return Err(PipeError::BadPrecisionModel);
    }
    let v0_per_ps = model.v0_per_ns * F::of(1e-3);
    let two = F::of(2.0);
    Ok(F::one() / two.sqrt() / (two * v0_per_ps) / (model.rate_hz * model.t_a_s).sqrt())
}

/// Least-squares line with the slope uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression<F> {
    pub slope: F,
    pub sigma_slope: F,
    pub intercept: F,
}

/// Simple linear regression of `y` on `x`.
pub fn linear_regression<F: Real>(x: &[F], y: &[F]) -> Result<Regression<F>, PipeError> {
    if x.len() != y.len() {
        return Err(PipeError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(PipeError::TooShort { need: 2, got: n });
    }
    let nf = F::of_usize(n);
    let x_mean = x.iter().copied().sum::<F>() / nf;
    let y_mean = y.iter().copied().sum::<F>() / nf;
    let mut sxx = F::zero();
    let mut sxy = F::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        sxx = sxx + (xi - x_mean) * (xi - x_mean);
        sxy = sxy + (xi - x_mean) * (yi - y_mean);
    }
    if sxx <= F::zero() {
        return Err(PipeError::AllDistancesEqual);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: F = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (intercept + slope * xi);
            r * r
        })
        .sum();
    let sigma_slope = if n > 2 {
        (rss / F::of_usize(n - 2) / sxx).sqrt()
    } else {
        F::zero()
    };
    Ok(Regression {
        slope,
        sigma_slope,
        intercept,
    })
}

/// Slope of the per-block offset against the per-block path length, ps/m.
///
/// A channel-independent protocol shows a slope consistent with zero.
pub fn delay_correlation<F: Real>(
    series: &SyncSeries<F>,
    distances_m: &[F],
) -> Result<Regression<F>, PipeError> {
    if distances_m.len() != series.estimates.len() {
        return Err(PipeError::LengthMismatch(
            series.estimates.len(),
            distances_m.len(),
        ));
    }
    linear_regression(distances_m, &series.deltas_ps())
}

/// Midpoint correction under an asymmetric channel,
/// `-(dt_ab - dt_ba) / 2`.
///
/// The two peaks sit at `delta + dt_ab` and `delta - dt_ba`, so the
/// midpoint estimator reads `delta + (dt_ab - dt_ba)/2`; adding the
/// returned value to a measured midpoint recovers the true offset.
pub fn asymmetry_bias<F: Real>(delta_ab_ps: F, delta_ba_ps: F) -> F {
    -(delta_ab_ps - delta_ba_ps) / F::of(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    const SEC_PS: i64 = 1_000_000_000_000;

    fn series_from(epochs_s: &[f64], deltas_ps: &[f64]) -> SyncSeries<f64> {
        let estimates = epochs_s
            .iter()
            .zip(deltas_ps)
            .enumerate()
            .map(|(k, (&t, &d))| SyncEstimate {
                delta_ps: d,
                round_trip_ps: 0.0,
                sigma_delta_ps: 1.0,
                block_index: k as u64,
                epoch_mid_ps: (t * 1e12) as i64,
            })
            .collect();
        SyncSeries {
            estimates,
            t_a_ps: SEC_PS,
            gaps: Vec::new(),
            labels: Vec::new(),
        }
    }

    #[test]
    fn drift_fit_constant_series() {
        let epochs: Vec<f64> = (0..100).map(|k| k as f64 * 2.0).collect();
        let deltas = vec![123.0; 100];
        let fit = fit_drift(&series_from(&epochs, &deltas)).unwrap();
        assert!(fit.a_per_s.abs() < 1e-20);
        assert!(fit.d.abs() < 1e-18);
        assert!((fit.b_ps - 123.0).abs() < 1e-9);
        assert!(fit.residuals_ps.iter().all(|r| r.abs() < 1e-9));
        assert_eq!(fit.residuals_ps.len(), 100);
    }

    #[test]
    fn drift_fit_recovers_exact_parabola() {
        // delta(t) = b + d t + a t^2 in the clock-model convention
        let (a_per_s, d, b_ps) = (5e-13, 4.05e-11, 250_000.0);
        let epochs: Vec<f64> = (0..900).map(|k| 1.0 + k as f64 * 2.0).collect();
        let deltas: Vec<f64> = epochs
            .iter()
            .map(|t| {
                let t_ps = t * 1e12;
                b_ps + d * t_ps + a_per_s * t_ps * t_ps * 1e-12
            })
            .collect();
        let fit = fit_drift(&series_from(&epochs, &deltas)).unwrap();
        assert!((fit.a_per_s - a_per_s).abs() / a_per_s < 1e-6, "{}", fit.a_per_s);
        assert!((fit.d - d).abs() / d < 1e-6, "{}", fit.d);
        assert!((fit.b_ps - b_ps).abs() / b_ps < 1e-6, "{}", fit.b_ps);
        let max_r = fit.residuals_ps.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(max_r < 0.1, "{max_r}");
    }

    #[test]
    fn drift_fit_guards() {
        let s = series_from(&[0.0, 1.0], &[0.0, 1.0]);
        assert_eq!(fit_drift(&s).unwrap_err(), PipeError::TooShort { need: 3, got: 2 });
        let s = series_from(&[5.0, 5.0, 5.0, 5.0], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(fit_drift(&s).unwrap_err(), PipeError::RankDeficient);
    }

    #[test]
    fn allan_zero_cases() {
        let constant = vec![42.0; 50];
        assert_eq!(allan_deviation(&constant, 1.0, 1).unwrap(), 0.0);
        // dyadic ramp increments are exact in binary floating point
        let ramp: Vec<f64> = (0..50).map(|k| 0.25 * k as f64).collect();
        assert_eq!(allan_deviation(&ramp, 1.0, 1).unwrap(), 0.0);
        assert_eq!(time_deviation(&constant, 1.0, 1).unwrap(), 0.0);
        assert_eq!(time_deviation(&ramp, 1.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn allan_white_phase_level() {
        // white phase noise sigma_x: ADEV(tau0) = sqrt(3) sigma_x / tau0
        let sigma_x_ps = 51.0;
        let tau0 = 2.0;
        let normal = Normal::new(0.0, sigma_x_ps).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let adev = allan_deviation(&x, tau0, 1).unwrap();
        let expect = 3.0f64.sqrt() * sigma_x_ps * 1e-12 / tau0;
        assert!((adev - expect).abs() / expect < 0.10, "{adev} vs {expect}");

        let tdev = time_deviation(&x, tau0, 1).unwrap();
        assert!((tdev - sigma_x_ps).abs() / sigma_x_ps < 0.10, "{tdev}");
    }

    #[test]
    fn tdev_matches_naive_definition() {
        // brute-force evaluation of the phase-averaged estimator
        fn naive_tdev(x: &[f64], tau0: f64, m: usize) -> f64 {
            let n = x.len();
            let mut acc = 0.0;
            for j in 0..=(n - 3 * m) {
                let mut inner = 0.0;
                for i in j..j + m {
                    inner += (x[i + 2 * m] - 2.0 * x[i + m] + x[i]) * 1e-12;
                }
                acc += inner * inner;
            }
            let m_f = m as f64;
            let mod_var = acc
                / (2.0 * m_f.powi(4) * tau0 * tau0 * (n - 3 * m + 1) as f64);
            (m_f * tau0 / 3.0f64.sqrt()) * mod_var.sqrt() * 1e12
        }
        let normal = Normal::new(0.0, 33.0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
        for m in [1, 2, 3, 7, 16] {
            let fast = time_deviation(&x, 2.0, m).unwrap();
            let slow = naive_tdev(&x, 2.0, m);
            assert!((fast - slow).abs() / slow < 1e-9, "m={m}: {fast} vs {slow}");
        }
    }

    #[test]
    fn estimator_length_guards() {
        let x = vec![1.0; 6];
        assert!(allan_deviation(&x, 1.0, 3).is_err()); // needs 2m+1 = 7
        assert!(time_deviation(&x, 1.0, 2).is_err()); // needs 3m+1 = 7
        assert!(time_deviation(&vec![1.0; 7], 1.0, 2).is_ok());
        assert!(allan_deviation(&x, 1.0, 0).is_err());
    }

    #[test]
    fn precision_prediction_values() {
        // V(0) = 1.65/ns, R = 200/s, Ta = 100 s -> 1.52 ps
        let m = PrecisionModel::<f64> {
            v0_per_ns: 1.65,
            rate_hz: 200.0,
            t_a_s: 100.0,
        };
        let dt = predict_precision(&m).unwrap();
        assert!((dt - 1.5152).abs() < 1e-3, "{dt}");
        // Ta = 1 s -> 15.2 ps
        let m1 = PrecisionModel { t_a_s: 1.0, ..m };
        let dt1 = predict_precision(&m1).unwrap();
        assert!((dt1 - 15.152).abs() < 1e-2, "{dt1}");
        // quadrupling R halves dt
        let m4 = PrecisionModel {
            rate_hz: 800.0,
            ..m
        };
        let ratio = predict_precision(&m4).unwrap() / dt;
        assert!((ratio - 0.5).abs() < 1e-12);
        assert!(predict_precision(&PrecisionModel {
            v0_per_ns: 0.0,
            ..m
        })
        .is_err());
    }

    #[test]
    fn regression_recovers_injected_slope() {
        // delta depends on distance as 1 ps/m plus noise
        let normal = Normal::new(0.0, 5.0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let dists: Vec<f64> = (0..200).map(|k| [1.7, 6.7, 31.7, 51.7][k % 4]).collect();
        let deltas: Vec<f64> = dists.iter().map(|&d| d + normal.sample(&mut rng)).collect();
        let s = series_from(
            &(0..200).map(|k| k as f64).collect::<Vec<_>>(),
            &deltas,
        );
        let reg = delay_correlation(&s, &dists).unwrap();
        assert!((reg.slope - 1.0).abs() < 0.1, "{}", reg.slope);
        assert!(reg.sigma_slope < 0.05);

        // independent of distance: slope consistent with zero
        let flat: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
        let s = series_from(&(0..200).map(|k| k as f64).collect::<Vec<_>>(), &flat);
        let reg = delay_correlation(&s, &dists).unwrap();
        assert!(reg.slope.abs() < 3.0 * reg.sigma_slope, "{reg:?}");
    }

    #[test]
    fn regression_guards() {
        let s = series_from(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        assert_eq!(
            delay_correlation(&s, &[1.0, 1.0, 1.0]).unwrap_err(),
            PipeError::AllDistancesEqual
        );
        assert_eq!(
            delay_correlation(&s, &[1.0]).unwrap_err(),
            PipeError::LengthMismatch(3, 1)
        );
    }

    #[test]
    fn asymmetry_bias_values() {
        // 100 ns / 60 ns: correction is -20 ns
        assert_eq!(asymmetry_bias(100_000.0, 60_000.0), -20_000.0);
        assert_eq!(asymmetry_bias(8_333.0, 8_333.0), 0.0);
        assert_eq!(asymmetry_bias(60_000.0, 100_000.0), 20_000.0);
    }

    #[test]
    fn stability_report_octaves() {
        let normal = Normal::new(0.0, 10.0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(14);
        let x: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
        let rep = stability_report(&x, 2.0).unwrap();
        assert!(rep.adev.len() >= 5);
        assert!(rep.tdev.len() >= 5);
        assert!(rep.adev.windows(2).all(|w| w[0].0 < w[1].0));
        assert!((rep.residual_std_ps - 10.0).abs() < 1.5);
    }
}
