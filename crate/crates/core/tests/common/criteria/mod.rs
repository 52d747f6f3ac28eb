//! Checks behind the acceptance criteria, shared by the per-topic test
//! targets and the acceptance harness.

pub mod gradients;
pub mod tiling;
pub mod algebra;
pub mod refinement;
pub mod metric_oracles;

/// A named check; failure panics.
pub type Check = (&'static str, fn());

/// Proptest settings for `n` cases. These checks run outside the usual test
/// layout, so failures are not persisted to regression files.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}
