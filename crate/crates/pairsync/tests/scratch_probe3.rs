use pairsync::sim::{simulate_two_party, ExperimentConfig};
use pairsync::syncpipe::sync_block;
use pairsync::xcorr::{locate_peaks, PeakSearchConfig};
use pairsync::PeakShape;

const SEC: i64 = 1_000_000_000_000;

#[test]
#[ignore]
fn probe_block_failure() {
    let shape = PeakShape::detector_default();
    let mut cfg = ExperimentConfig::symmetric_default(100 * SEC, 40_000);
    cfg.source_a.background_rate_hz = 200.0;
    cfg.source_b.background_rate_hz = 200.0;
    let (a, b, truth) = simulate_two_party(&cfg).unwrap();
    println!("expected peaks: {:?}", truth.expected_peaks_at(SEC));
    println!("locate: {:?}", locate_peaks(&a, &b));
    let r = sync_block(
        &PeakSearchConfig::default(),
        a.tags(),
        b.tags(),
        0,
        50 * SEC,
        &shape,
    );
    println!("sync_block: {r:?}");
}
