//! Shared fixtures for the benchmark suite.

use tif_core::datagen::{self, GeneratorSpec};
use tif_core::TemporalDataset;

/// A mid-size drifting dataset: 2,000 dimensions, 6 months, 300 samples per
/// month.
pub fn bench_dataset() -> TemporalDataset {
    let mut spec: GeneratorSpec = datagen::default_spec(1);
    spec.n_train_months = 6;
    spec.n_test_months = 0;
    spec.family_schedule.truncate(6);
    // drop the open-world family from the truncated schedule
    for row in &mut spec.family_schedule {
        let active: f64 = row[..4].iter().sum();
        for w in row[..4].iter_mut() {
            *w /= active;
        }
        row[4] = 0.0;
    }
    spec.samples_per_month = 300;
    datagen::generate(&spec).expect("valid spec")
}
