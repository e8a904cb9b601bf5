//! Shared fixtures for the criterion benches.

use sia_core::synth::{SynthConfig, SyntheticTask};

/// Small synthetic task sized so one bench iteration stays in the microsecond range.
pub fn bench_task(samples_per_class_per_bin: usize) -> SyntheticTask {
    SyntheticTask::generate(&SynthConfig {
        samples_per_class_per_bin,
        seed: 7,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid")
}
