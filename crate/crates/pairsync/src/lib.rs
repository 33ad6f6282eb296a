//! Two-party clock synchronization from bidirectionally exchanged
//! time-correlated photon pairs.
//!
//! Both parties run a photon-pair source; one photon of every pair is
//! detected locally and the other is sent to the remote side. The cross
//! correlation of the two time-tag streams shows two coincidence peaks,
//! one per source, at `tau_ab = delta + dt_ab` and `tau_ba = delta - dt_ba`.
//! The inter-peak separation gives the round-trip time and, for a
//! symmetric channel, the midpoint gives the clock offset `delta`
//! independently of the propagation delay.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`timetag`] — picosecond time tags, block segmentation and the
//!   bit-exact `PTAG` tag-file format,
//! * [`sim`] — a deterministic, seedable two-party detection simulator,
//! * [`xcorr`] — coincidence histograms and coarse/fine peak location,
//! * [`peakfit`] — pseudo-Voigt double-peak fitting and sync estimates,
//! * [`syncpipe`] — block-wise offset tracking, drift fits, stability
//!   statistics, precision prediction and delay-attack analysis,
//! * [`wire`] — the framed, optionally authenticated TCP exchange of
//!   timestamp blocks between the two parties.
//!
//! Scalar math (`peakfit`, the estimators in `syncpipe`) is generic over
//! the floating type via [`scalar::Real`]; time tags themselves are
//! always integer picoseconds.

pub(crate) mod linalg;
pub mod peakfit;
pub mod ptag;
pub mod scalar;
pub mod sim;
pub mod syncpipe;
pub mod timetag;
pub mod wire;
pub mod xcorr;

pub use timetag::{Block, Party, TagStream, TimeTag};

/// Default scalar type for the whole pipeline.
pub type Real = f64;

/// Peak shape with the default scalar.
pub type PeakShape = peakfit::PeakShape<Real>;
/// Double-peak fit result with the default scalar.
pub type DoublePeakFit = peakfit::DoublePeakFit<Real>;
/// Per-block synchronization estimate with the default scalar.
pub type SyncEstimate = peakfit::SyncEstimate<Real>;
/// Offset series with the default scalar.
pub type SyncSeries = syncpipe::SyncSeries<Real>;
/// Parabolic clock-model fit with the default scalar.
pub type DriftFit = syncpipe::DriftFit<Real>;
/// Stability statistics with the default scalar.
pub type StabilityReport = syncpipe::StabilityReport<Real>;
/// Precision model with the default scalar.
pub type PrecisionModel = syncpipe::PrecisionModel<Real>;
