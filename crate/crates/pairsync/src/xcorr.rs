//! Cross-correlation histograms of two tag streams and two-stage
//! coincidence-peak location.
//!
//! The histogram counts timestamp differences `tau = t_b - t_a` over a
//! window, computed with a sort-merge two-pointer sweep that is
//! `O(n_a + n_b + matches)`. Peak location runs the correlation twice:
//! a coarse pass (2 us bins) finds the coincidence cluster anywhere in a
//! wide ambiguity window, a fine pass (16 ps bins) around the cluster
//! resolves the two peaks.

use thiserror::Error;

use crate::timetag::{TagStream, TimeTag};

#[derive(Debug, Error, PartialEq)]
pub enum CorrError {
    #[error("bin width must be positive, got {0} ps")]
    BadBin(i64),
    #[error("empty correlation window [{0}, {1})")]
    EmptyWindow(i64, i64),
    #[error("stream has no tags")]
    EmptyStream,
    #[error("no coincidence peak above baseline + {k} sqrt(baseline)")]
    NoPeak { k: f64 },
    #[error("normalization undefined (zero rate or duration)")]
    NormalizationUndefined,
}

/// Binned cross-correlation `c_ab(tau)` of two streams.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_width_ps: i64,
    /// Left edge of bin 0.
    pub tau_start_ps: i64,
    pub counts: Vec<u64>,
    /// Tag counts that contributed to the correlation.
    pub n_a: u64,
    pub n_b: u64,
    /// Observed acquisition span (union of both streams), for
    /// normalization.
    pub duration_ps: i64,
}

impl CorrelationHistogram {
    /// Center of bin `k`, as a real tau in ps.
    pub fn bin_center(&self, k: usize) -> f64 {
        self.tau_start_ps as f64 + (k as f64 + 0.5) * self.bin_width_ps as f64
    }

    /// One past the right edge of the last bin.
    pub fn tau_end_ps(&self) -> i64 {
        self.tau_start_ps + self.bin_width_ps * self.counts.len() as i64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Median bin count, the baseline estimate used by the peak search.
    pub fn baseline(&self) -> f64 {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        }
    }

    /// Sub-histogram covering `[lo_ps, hi_ps)`, snapped to bin edges.
    pub fn slice(&self, lo_ps: i64, hi_ps: i64) -> CorrelationHistogram {
        let w = self.bin_width_ps;
        let lo_bin = ((lo_ps - self.tau_start_ps).div_euclid(w)).max(0) as usize;
        let hi_bin = (((hi_ps - self.tau_start_ps) + w - 1).div_euclid(w)).max(0) as usize;
        let hi_bin = hi_bin.min(self.counts.len());
        let lo_bin = lo_bin.min(hi_bin);
        CorrelationHistogram {
            bin_width_ps: w,
            tau_start_ps: self.tau_start_ps + w * lo_bin as i64,
            counts: self.counts[lo_bin..hi_bin].to_vec(),
            n_a: self.n_a,
            n_b: self.n_b,
            duration_ps: self.duration_ps,
        }
    }
}

/// The two candidate peak centers found by [`locate_peaks`],
/// `tau_right >= tau_left`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidates {
    pub tau_right_ps: f64,
    pub tau_left_ps: f64,
    /// Peak-bin counts above baseline.
    pub prominence_right: f64,
    pub prominence_left: f64,
}

/// Tuning of the two-stage peak search.
#[derive(Debug, Clone)]
pub struct PeakSearchConfig {
    /// Coarse histogram bin (default 2 us).
    pub coarse_bin_ps: i64,
    /// Coarse search half-window around tau = 0 (default 10 ms); bounds
    /// the resolvable |offset| + delay.
    pub coarse_half_window_ps: i64,
    /// Fine histogram bin (default 16 ps).
    pub fine_bin_ps: i64,
    /// Fine half-window around the coarse cluster (default 4 us, two
    /// coarse bins, so a cluster straddling a coarse edge stays covered).
    pub fine_half_window_ps: i64,
    /// Peak threshold in units of sqrt(baseline) above baseline
    /// (default 6). The sqrt is floored at 1 count so an empty baseline
    /// does not accept stray accidentals.
    pub threshold_sigma: f64,
    /// Half-width of the exclusion zone around the first maximum when
    /// searching for the second (default 5 ns). Must exceed the peak
    /// tails but stay below the smallest round-trip time of interest.
    pub exclusion_ps: i64,
    /// Half-width of the centroid refinement window around each maximum
    /// (default 600 ps, about one FWHM of the detector response).
    pub centroid_half_ps: i64,
}

impl Default for PeakSearchConfig {
    fn default() -> Self {
        PeakSearchConfig {
            coarse_bin_ps: 2_000_000,
            coarse_half_window_ps: 10_000_000_000,
            fine_bin_ps: 16,
            fine_half_window_ps: 4_000_000,
            threshold_sigma: 6.0,
            exclusion_ps: 5_000,
            centroid_half_ps: 600,
        }
    }
}

/// Cross-correlate two streams over `window = [tau_min, tau_max)` with the
/// given bin width.
///
/// `counts[k]` is the number of pairs `(i, j)` with
/// `t_b[j] - t_a[i]` in `[tau_min + k*w, tau_min + (k+1)*w)`. The window
/// is extended to a whole number of bins.
pub fn cross_correlate(
    a: &TagStream,
    b: &TagStream,
    bin_width_ps: i64,
    window: (i64, i64),
) -> Result<CorrelationHistogram, CorrError> {
    cross_correlate_tags(a.tags(), b.tags(), bin_width_ps, window)
}

/// [`cross_correlate`] over raw tag slices (both sorted by time).
pub fn cross_correlate_tags(
    a: &[TimeTag],
    b: &[TimeTag],
    bin_width_ps: i64,
    (tau_min, tau_max): (i64, i64),
) -> Result<CorrelationHistogram, CorrError> {
    if bin_width_ps <= 0 {
        return Err(CorrError::BadBin(bin_width_ps));
    }
    if tau_min >= tau_max {
        return Err(CorrError::EmptyWindow(tau_min, tau_max));
    }
    let n_bins = ((tau_max - tau_min) + bin_width_ps - 1) / bin_width_ps;
    let tau_end = tau_min + n_bins * bin_width_ps;
    let mut counts = vec![0u64; n_bins as usize];

    let mut lo = 0usize;
    for ta in a {
        let t = ta.time_ps;
        while lo < b.len() && b[lo].time_ps - t < tau_min {
            lo += 1;
        }
        for tb in &b[lo..] {
            let tau = tb.time_ps - t;
            if tau >= tau_end {
                break;
            }
            counts[((tau - tau_min) / bin_width_ps) as usize] += 1;
        }
    }

    let span = |s: &[TimeTag]| s.first().map(|f| (f.time_ps, s.last().unwrap().time_ps));
    let duration_ps = match (span(a), span(b)) {
        (Some((a0, a1)), Some((b0, b1))) => a1.max(b1) - a0.min(b0),
        (Some((s0, s1)), None) | (None, Some((s0, s1))) => s1 - s0,
        (None, None) => 0,
    };

    Ok(CorrelationHistogram {
        bin_width_ps,
        tau_start_ps: tau_min,
        counts,
        n_a: a.len() as u64,
        n_b: b.len() as u64,
        duration_ps,
    })
}

/// Normalize a histogram to the accidental-coincidence level:
/// `g2[k] = counts[k] / (rate_a * rate_b * duration * bin)`.
pub fn normalize_g2(
    h: &CorrelationHistogram,
    rate_a_hz: f64,
    rate_b_hz: f64,
) -> Result<Vec<f64>, CorrError> {
    if rate_a_hz <= 0.0 || rate_b_hz <= 0.0 || h.duration_ps <= 0 {
        return Err(CorrError::NormalizationUndefined);
    }
    let accidental = rate_a_hz
        * rate_b_hz
        * (h.duration_ps as f64 * 1e-12)
        * (h.bin_width_ps as f64 * 1e-12);
    Ok(h.counts.iter().map(|&c| c as f64 / accidental).collect())
}

/// Locate the two coincidence peaks with the default configuration.
pub fn locate_peaks(a: &TagStream, b: &TagStream) -> Result<PeakCandidates, CorrError> {
    locate_peaks_with(&PeakSearchConfig::default(), a.tags(), b.tags())
}

/// Two-stage peak search over raw tag slices.
///
/// Stage 1 correlates at coarse resolution over the ambiguity window and
/// takes the strongest bin as the cluster position (the two peaks are far
/// closer together than a coarse bin and merge into one cluster). Stage 2
/// correlates at fine resolution around the cluster and returns the two
/// strongest maxima, each refined by a background-subtracted centroid
/// over `+-exclusion_ps`.
pub fn locate_peaks_with(
    cfg: &PeakSearchConfig,
    a: &[TimeTag],
    b: &[TimeTag],
) -> Result<PeakCandidates, CorrError> {
    if a.is_empty() || b.is_empty() {
        return Err(CorrError::EmptyStream);
    }

    let coarse = cross_correlate_tags(
        a,
        b,
        cfg.coarse_bin_ps,
        (-cfg.coarse_half_window_ps, cfg.coarse_half_window_ps),
    )?;
    let (k_star, &c_max) = coarse
        .counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .expect("window is non-empty");
    let base_c = coarse.baseline();
    if (c_max as f64) < threshold(base_c, cfg.threshold_sigma) {
        return Err(CorrError::NoPeak {
            k: cfg.threshold_sigma,
        });
    }
    let coarse_center = coarse.tau_start_ps + (k_star as i64) * cfg.coarse_bin_ps
        + cfg.coarse_bin_ps / 2;

    let fine = cross_correlate_tags(
        a,
        b,
        cfg.fine_bin_ps,
        (
            coarse_center - cfg.fine_half_window_ps,
            coarse_center + cfg.fine_half_window_ps,
        ),
    )?;
    let base_f = fine.baseline();
    let thr = threshold(base_f, cfg.threshold_sigma);
    let excl_bins = (cfg.exclusion_ps / cfg.fine_bin_ps).max(1) as usize;
    let cen_bins = (cfg.centroid_half_ps / cfg.fine_bin_ps).max(1) as usize;

    let k1 = argmax(&fine, |_| true);
    let (k1, c1) = match k1 {
        Some((k, c)) if c as f64 >= thr => (k, c),
        _ => {
            return Err(CorrError::NoPeak {
                k: cfg.threshold_sigma,
            })
        }
    };
    let k2 = argmax(&fine, |k| k.abs_diff(k1) > excl_bins);
    let (k2, c2) = match k2 {
        Some((k, c)) if c as f64 >= thr => (k, c),
        _ => {
            return Err(CorrError::NoPeak {
                k: cfg.threshold_sigma,
            })
        }
    };

    let tau1 = centroid(&fine, k1, cen_bins, base_f);
    let tau2 = centroid(&fine, k2, cen_bins, base_f);
    let (p1, p2) = (c1 as f64 - base_f, c2 as f64 - base_f);
    let (right, left) = if tau1 >= tau2 {
        ((tau1, p1), (tau2, p2))
    } else {
        ((tau2, p2), (tau1, p1))
    };
    Ok(PeakCandidates {
        tau_right_ps: right.0,
        tau_left_ps: left.0,
        prominence_right: right.1,
        prominence_left: left.1,
    })
}

fn threshold(baseline: f64, k: f64) -> f64 {
    baseline + k * baseline.max(1.0).sqrt()
}

/// Strongest bin among those `keep` allows; ties break toward smaller
/// |tau| of the bin center.
fn argmax(h: &CorrelationHistogram, keep: impl Fn(usize) -> bool) -> Option<(usize, u64)> {
    let mut best: Option<(usize, u64)> = None;
    for (k, &c) in h.counts.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        let better = match best {
            None => true,
            Some((kb, cb)) => c > cb || (c == cb && h.bin_center(k).abs() < h.bin_center(kb).abs()),
        };
        if better {
            best = Some((k, c));
        }
    }
    best
}

/// Background-subtracted centroid of the bins within `+-half_bins` of the
/// peak bin.
fn centroid(h: &CorrelationHistogram, k_peak: usize, half_bins: usize, baseline: f64) -> f64 {
    let lo = k_peak.saturating_sub(half_bins);
    let hi = (k_peak + half_bins + 1).min(h.counts.len());
    let mut mass = 0.0;
    let mut moment = 0.0;
    for k in lo..hi {
        let w = (h.counts[k] as f64 - baseline).max(0.0);
        mass += w;
        moment += w * h.bin_center(k);
    }
    if mass > 0.0 {
        moment / mass
    } else {
        h.bin_center(k_peak)
    }
}
