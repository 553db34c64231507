//! Shared fixtures for the benchmark suite.

use calib_core::synth::{generate, SynthSpec};
use calib_core::Dataset;

/// A biased clustered dataset sized for benchmarking.
pub fn bench_dataset(n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n,
        d: 5,
        clusters: 4,
        seed,
        bias_amplitude: 0.2,
        bias_length_scale: 0.3,
    };
    generate(&spec).expect("generator accepts the benchmark spec").0
}
