//! Deterministic two-party detection-stream simulator.
//!
//! Each party runs a photon-pair source; one photon of every pair is
//! detected locally and the twin is sent through the channel and detected
//! on the remote side. The simulator draws pair emissions as a
//! homogeneous Poisson process, thins them by detection efficiencies and
//! channel transmission, applies detector/tagger jitter, adds dark-count
//! background, and timestamps every detection on the observing party's
//! local clock. A fixed seed reproduces the output streams bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Cauchy, Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::peakfit::PeakShape;
use crate::timetag::{Party, TagStream, TimeTag};

/// Jitter samples are clamped to this magnitude so a pathological
/// Lorentzian tail cannot throw a detection outside its sort window.
pub const JITTER_CLAMP_PS: f64 = 50_000.0;

const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("time {0} ps precedes the delay schedule")]
    BeforeSchedule(i64),
    #[error("clock reading overflows the 64-bit picosecond range")]
    ClockOverflow,
}

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

/// Deterministic quadratic clock model: a reading of true time `t` is
/// `t + b + d t + a t^2`, plus an optional white phase step per noise
/// block when `white_phase_sigma_ps > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Bias: offset at the session epoch, ps.
    pub b_ps: f64,
    /// Relative frequency offset, dimensionless.
    pub d: f64,
    /// Relative aging, 1/s.
    pub a_per_s: f64,
    /// White phase noise of the reference, one step per noise block, ps.
    pub white_phase_sigma_ps: f64,
    /// Duration of one noise block, ps.
    pub noise_block_ps: i64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            b_ps: 0.0,
            d: 0.0,
            a_per_s: 0.0,
            white_phase_sigma_ps: 0.0,
            noise_block_ps: 2_000_000_000_000, // 2 s
        }
    }
}

impl ClockModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.d.abs() < 1e-6) {
            return Err(config_err(format!("|d| = {} not < 1e-6", self.d.abs())));
        }
        if !(self.a_per_s.abs() < 1e-12) {
            return Err(config_err(format!(
                "|a_per_s| = {} not < 1e-12",
                self.a_per_s.abs()
            )));
        }
        if self.white_phase_sigma_ps < 0.0 || !self.white_phase_sigma_ps.is_finite() {
            return Err(config_err("white_phase_sigma_ps must be >= 0"));
        }
        if self.noise_block_ps <= 0 {
            return Err(config_err("noise_block_ps must be positive"));
        }
        if !self.b_ps.is_finite() {
            return Err(config_err("b_ps must be finite"));
        }
        Ok(())
    }

    /// Deterministic part of the clock error at true time `t` (f64 ps).
    pub fn offset_at(&self, t_ps: f64) -> f64 {
        self.b_ps + self.d * t_ps + self.a_per_s * t_ps * t_ps * 1e-12
    }
}

/// Read a local clock at an exact true time, rounded to 1 ps.
pub fn local_clock_reading(clock: &ClockModel, true_time_ps: i64) -> Result<i64, SimError> {
    let corr = clock.offset_at(true_time_ps as f64);
    if !corr.is_finite() || corr.abs() >= 9e18 {
        return Err(SimError::ClockOverflow);
    }
    true_time_ps
        .checked_add(corr.round() as i64)
        .ok_or(SimError::ClockOverflow)
}

/// One segment of the piecewise-constant channel-delay schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySegment {
    pub t_switch_ps: i64,
    pub delta_ab_ps: f64,
    pub delta_ba_ps: f64,
}

/// Optical channel: delay schedule plus per-direction transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Half-open segments `[t_switch_k, t_switch_{k+1})`; the first entry
    /// is at t = 0.
    pub segments: Vec<DelaySegment>,
    pub transmission_ab: f64,
    pub transmission_ba: f64,
}

impl ChannelModel {
    /// Symmetric channel with a fixed fiber length and propagation speed.
    pub fn fixed_length(length_m: f64, velocity_mps: f64) -> Result<Self, SimError> {
        Self::from_lengths(&[(0, length_m)], velocity_mps, 1.0, 1.0)
    }

    /// Symmetric schedule given as `(switch time ps, fiber length m)`.
    pub fn from_lengths(
        schedule: &[(i64, f64)],
        velocity_mps: f64,
        transmission_ab: f64,
        transmission_ba: f64,
    ) -> Result<Self, SimError> {
        if velocity_mps <= 0.0 {
            return Err(config_err("propagation velocity must be positive"));
        }
        let segments = schedule
            .iter()
            .map(|&(t, l)| {
                let delay = l / velocity_mps * PS_PER_S;
                DelaySegment {
                    t_switch_ps: t,
                    delta_ab_ps: delay,
                    delta_ba_ps: delay,
                }
            })
            .collect();
        let ch = ChannelModel {
            segments,
            transmission_ab,
            transmission_ba,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.segments.is_empty() {
            return Err(config_err("delay schedule is empty"));
        }
        if self.segments[0].t_switch_ps != 0 {
            return Err(config_err("first delay segment must start at t = 0"));
        }
        for w in self.segments.windows(2) {
            if w[1].t_switch_ps <= w[0].t_switch_ps {
                return Err(config_err("switch times must be strictly increasing"));
            }
        }
        for s in &self.segments {
            if s.delta_ab_ps < 0.0 || s.delta_ba_ps < 0.0 {
                return Err(config_err("delays must be non-negative"));
            }
        }
        for t in [self.transmission_ab, self.transmission_ba] {
            if !(0.0..=1.0).contains(&t) {
                return Err(config_err("transmissions must be within [0, 1]"));
            }
        }
        Ok(())
    }

    /// Segment index active at `t` (half-open segments).
    fn segment_at(&self, true_time_ps: i64) -> Result<usize, SimError> {
        if true_time_ps < self.segments[0].t_switch_ps {
            return Err(SimError::BeforeSchedule(true_time_ps));
        }
        Ok(self
            .segments
            .partition_point(|s| s.t_switch_ps <= true_time_ps)
            - 1)
    }
}

/// Channel delays `(delta_ab, delta_ba)` in effect at a true time.
pub fn delay_at(channel: &ChannelModel, true_time_ps: i64) -> Result<(f64, f64), SimError> {
    let s = &channel.segments[channel.segment_at(true_time_ps)?];
    Ok((s.delta_ab_ps, s.delta_ba_ps))
}

/// One party's pair source and detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Pair rate offered to the detectors; equals the detected pair rate
    /// at unit efficiencies and transmission.
    pub pair_rate_hz: f64,
    pub local_eff: f64,
    pub remote_eff: f64,
    /// Dark counts per detector, Hz.
    pub background_rate_hz: f64,
    /// Combined detection/tagging jitter shape.
    pub jitter: PeakShape<f64>,
}

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel {
            pair_rate_hz: 200.0,
            local_eff: 1.0,
            remote_eff: 1.0,
            background_rate_hz: 500.0,
            jitter: PeakShape::detector_default(),
        }
    }
}

impl SourceModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.pair_rate_hz < 0.0 || self.background_rate_hz < 0.0 {
            return Err(config_err("rates must be non-negative"));
        }
        for e in [self.local_eff, self.remote_eff] {
            if !(0.0..=1.0).contains(&e) {
                return Err(config_err("efficiencies must be within [0, 1]"));
            }
        }
        self.jitter
            .validate()
            .map_err(|e| config_err(e.to_string()))
    }
}

/// How the combined pair jitter is distributed over the two detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterSplit {
    /// One draw of the full shape per pair, split evenly between the two
    /// detections, so the correlation peak has exactly the configured
    /// shape. The default: the shape characterizes the combined
    /// two-detector response.
    #[default]
    CombinedPerPair,
    /// Independent per-detection draws with the widths scaled down
    /// (Gaussian by sqrt(2), Lorentzian by 2) so the convolved pair
    /// response approximates the configured shape.
    PerDetector,
}

/// Full simulation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub duration_ps: i64,
    pub seed: u64,
    pub clock_a: ClockModel,
    pub clock_b: ClockModel,
    pub channel: ChannelModel,
    pub source_a: SourceModel,
    pub source_b: SourceModel,
    /// Optional tagger granularity; timestamps are floored to this grid.
    pub quantize_ps: Option<i64>,
    pub jitter_split: JitterSplit,
}

impl ExperimentConfig {
    /// A symmetric desk-scale default: both clocks ideal, 1.7 m of fiber,
    /// 200 pairs/s per source.
    pub fn symmetric_default(duration_ps: i64, seed: u64) -> Self {
        ExperimentConfig {
            duration_ps,
            seed,
            clock_a: ClockModel::default(),
            clock_b: ClockModel::default(),
            channel: ChannelModel::fixed_length(1.7, 2.04e8).expect("valid"),
            source_a: SourceModel::default(),
            source_b: SourceModel::default(),
            quantize_ps: None,
            jitter_split: JitterSplit::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.duration_ps <= 0 {
            return Err(config_err("duration must be positive"));
        }
        self.clock_a.validate()?;
        self.clock_b.validate()?;
        self.channel.validate()?;
        self.source_a.validate()?;
        self.source_b.validate()?;
        if let Some(q) = self.quantize_ps {
            if q <= 0 {
                return Err(config_err("quantize_ps must be positive"));
            }
        }
        Ok(())
    }
}

/// What actually happened in a simulation: the realized clock error
/// tables, the delay schedule and the event counts, enough to evaluate
/// the true offset and delays at any time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub duration_ps: i64,
    pub seed: u64,
    pub clock_a: ClockModel,
    pub clock_b: ClockModel,
    pub segments: Vec<DelaySegment>,
    /// Realized white-phase steps per noise block, one table per party.
    pub noise_a: Vec<f64>,
    pub noise_b: Vec<f64>,
    pub emitted_pairs_a: u64,
    pub emitted_pairs_b: u64,
    /// Pairs with both photons detected.
    pub detected_pairs_a: u64,
    pub detected_pairs_b: u64,
    pub background_a: u64,
    pub background_b: u64,
}

impl GroundTruth {
    fn noise_of(table: &[f64], block_ps: i64, t_ps: f64) -> f64 {
        if table.is_empty() {
            return 0.0;
        }
        let idx = (t_ps / block_ps as f64).floor().max(0.0) as usize;
        table[idx.min(table.len() - 1)]
    }

    /// True clock offset delta(t) = (clock B reading) - (clock A reading)
    /// at true time `t`, including realized reference noise.
    pub fn offset_at(&self, t_ps: f64) -> f64 {
        let det = self.clock_b.offset_at(t_ps) - self.clock_a.offset_at(t_ps);
        det + Self::noise_of(&self.noise_b, self.clock_b.noise_block_ps, t_ps)
            - Self::noise_of(&self.noise_a, self.clock_a.noise_block_ps, t_ps)
    }

    /// Channel delays in effect at true time `t`.
    pub fn delays_at(&self, t_ps: i64) -> (f64, f64) {
        let k = self
            .segments
            .partition_point(|s| s.t_switch_ps <= t_ps)
            .saturating_sub(1);
        (self.segments[k].delta_ab_ps, self.segments[k].delta_ba_ps)
    }

    /// Expected correlation-peak positions at true time `t`:
    /// `tau_ab = delta + dt_ab`, `tau_ba = delta - dt_ba`.
    pub fn expected_peaks_at(&self, t_ps: i64) -> (f64, f64) {
        let delta = self.offset_at(t_ps as f64);
        let (dab, dba) = self.delays_at(t_ps);
        (delta + dab, delta - dba)
    }
}

/// Homogeneous Poisson process on `[0, duration_ps)`, sorted, integer ps.
pub fn sample_pair_times<R: Rng>(rate_hz: f64, duration_ps: i64, rng: &mut R) -> Vec<i64> {
    if rate_hz <= 0.0 || duration_ps <= 0 {
        return Vec::new();
    }
    let exp = Exp::new(rate_hz / PS_PER_S).expect("positive rate");
    let mut times = Vec::with_capacity((rate_hz * duration_ps as f64 / PS_PER_S * 1.1) as usize);
    let mut t = 0i64;
    loop {
        let gap: f64 = exp.sample(rng);
        t = t.saturating_add(gap.round() as i64);
        if t >= duration_ps {
            return times;
        }
        times.push(t);
    }
}

/// One draw of the pseudo-Voigt jitter: Gaussian of standard deviation
/// `sigma/sqrt(2 ln 2)` with probability `1 - f`, Lorentzian of
/// half-width `sigma` with probability `f`, clamped to
/// [`JITTER_CLAMP_PS`].
pub fn sample_jitter<R: Rng>(shape: &PeakShape<f64>, rng: &mut R) -> Result<f64, SimError> {
    shape.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(sample_components(shape.f, shape.gauss_sigma_ps(), shape.sigma_ps, rng))
}

fn sample_components<R: Rng>(f: f64, gauss_sigma: f64, lorentz_gamma: f64, rng: &mut R) -> f64 {
    let branch: f64 = rng.gen();
    let x = if branch < f {
        Cauchy::new(0.0, lorentz_gamma).expect("valid scale").sample(rng)
    } else {
        Normal::new(0.0, gauss_sigma).expect("valid sigma").sample(rng)
    };
    x.clamp(-JITTER_CLAMP_PS, JITTER_CLAMP_PS)
}

/// Timestamping machinery of one party: clock plus realized noise table.
struct Stamper<'a> {
    clock: &'a ClockModel,
    noise: &'a [f64],
    quantize_ps: Option<i64>,
}

impl Stamper<'_> {
    fn stamp(&self, t_true_ps: f64) -> Result<i64, SimError> {
        let noise = GroundTruth::noise_of(self.noise, self.clock.noise_block_ps, t_true_ps);
        let reading = t_true_ps + self.clock.offset_at(t_true_ps) + noise;
        if !reading.is_finite() || reading.abs() >= 9e18 {
            return Err(SimError::ClockOverflow);
        }
        let mut r = reading.round() as i64;
        if let Some(q) = self.quantize_ps {
            r = r.div_euclid(q) * q;
        }
        Ok(r)
    }
}

/// Run the full two-party simulation.
///
/// Deterministic for a fixed config: every random stream (emissions,
/// thinning, jitter, background, reference noise) draws from its own
/// seeded substream, so the two parties' outputs are reproducible bit
/// for bit.
pub fn simulate_two_party(
    config: &ExperimentConfig,
) -> Result<(TagStream, TagStream, GroundTruth), SimError> {
    config.validate()?;

    let substream = |id: u64| {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(id);
        rng
    };

    let noise_table = |clock: &ClockModel, stream: u64| -> Vec<f64> {
        if clock.white_phase_sigma_ps == 0.0 {
            return Vec::new();
        }
        let n = (config.duration_ps + clock.noise_block_ps - 1) / clock.noise_block_ps;
        let normal = Normal::new(0.0, clock.white_phase_sigma_ps).expect("valid sigma");
        let mut rng = substream(stream);
        (0..n.max(1)).map(|_| normal.sample(&mut rng)).collect()
    };
    let noise_a = noise_table(&config.clock_a, 9);
    let noise_b = noise_table(&config.clock_b, 10);

    let stamper_a = Stamper {
        clock: &config.clock_a,
        noise: &noise_a,
        quantize_ps: config.quantize_ps,
    };
    let stamper_b = Stamper {
        clock: &config.clock_b,
        noise: &noise_b,
        quantize_ps: config.quantize_ps,
    };

    let mut tags_a: Vec<i64> = Vec::new();
    let mut tags_b: Vec<i64> = Vec::new();
    // (emitted, detected) per origin, background per party
    let mut pair_counts = [(0u64, 0u64); 2];
    let mut background = [0u64; 2];

    for origin in [Party::Alice, Party::Bob] {
        let (source, transmission, emit_stream, thin_stream, jit_stream) = match origin {
            Party::Alice => (&config.source_a, config.channel.transmission_ab, 1u64, 3, 5),
            Party::Bob => (&config.source_b, config.channel.transmission_ba, 2, 4, 6),
        };
        let emissions =
            sample_pair_times(source.pair_rate_hz, config.duration_ps, &mut substream(emit_stream));
        let mut thin_rng = substream(thin_stream);
        let mut jit_rng = substream(jit_stream);
        let shape = &source.jitter;
        let (emitted, mut detected) = (emissions.len() as u64, 0u64);

        let (local_tags, remote_tags, local_stamper, remote_stamper) = match origin {
            Party::Alice => (&mut tags_a, &mut tags_b, &stamper_a, &stamper_b),
            Party::Bob => (&mut tags_b, &mut tags_a, &stamper_b, &stamper_a),
        };

        for &t_emit in &emissions {
            let keep_local = thin_rng.gen::<f64>() < source.local_eff;
            let keep_remote = thin_rng.gen::<f64>() < source.remote_eff * transmission;
            let (j_local, j_remote) = match config.jitter_split {
                JitterSplit::CombinedPerPair => {
                    let j = sample_components(
                        shape.f,
                        shape.gauss_sigma_ps(),
                        shape.sigma_ps,
                        &mut jit_rng,
                    );
                    (-j / 2.0, j / 2.0)
                }
                JitterSplit::PerDetector => {
                    let s = shape.gauss_sigma_ps() / 2.0f64.sqrt();
                    let g = shape.sigma_ps / 2.0;
                    (
                        sample_components(shape.f, s, g, &mut jit_rng),
                        sample_components(shape.f, s, g, &mut jit_rng),
                    )
                }
            };
            if keep_local {
                local_tags.push(local_stamper.stamp(t_emit as f64 + j_local)?);
            }
            if keep_remote {
                // photons in flight across a switch keep the delay at
                // emission time
                let (dab, dba) = delay_at(&config.channel, t_emit)?;
                let delay = match origin {
                    Party::Alice => dab,
                    Party::Bob => dba,
                };
                remote_tags.push(remote_stamper.stamp(t_emit as f64 + delay + j_remote)?);
            }
            if keep_local && keep_remote {
                detected += 1;
            }
        }
        pair_counts[if origin == Party::Alice { 0 } else { 1 }] = (emitted, detected);
    }

    // Dark counts, timestamped through the same clock (no optical jitter).
    for (i, (party, stream_id)) in [(Party::Alice, 7u64), (Party::Bob, 8)].into_iter().enumerate() {
        let (source, stamper, tags) = match party {
            Party::Alice => (&config.source_a, &stamper_a, &mut tags_a),
            Party::Bob => (&config.source_b, &stamper_b, &mut tags_b),
        };
        let darks = sample_pair_times(
            source.background_rate_hz,
            config.duration_ps,
            &mut substream(stream_id),
        );
        background[i] = darks.len() as u64;
        for t in darks {
            tags.push(stamper.stamp(t as f64)?);
        }
    }

    tags_a.sort_unstable();
    tags_b.sort_unstable();
    let build = |party, times: Vec<i64>| {
        TagStream::new(party, times.into_iter().map(|t| TimeTag::new(t, 0)).collect())
            .expect("sorted by construction")
    };
    let truth = GroundTruth {
        duration_ps: config.duration_ps,
        seed: config.seed,
        clock_a: config.clock_a,
        clock_b: config.clock_b,
        segments: config.channel.segments.clone(),
        noise_a,
        noise_b,
        emitted_pairs_a: pair_counts[0].0,
        emitted_pairs_b: pair_counts[1].0,
        detected_pairs_a: pair_counts[0].1,
        detected_pairs_b: pair_counts[1].1,
        background_a: background[0],
        background_b: background[1],
    };
    Ok((build(Party::Alice, tags_a), build(Party::Bob, tags_b), truth))
}
