//! Memory-accounting and metrics-format properties.

#![allow(dead_code)]

use kbt_harness::experiment::SampleBuffer;
use kbt_harness::metrics::{read_csv, write_csv, MetricsRow};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub type Outcome = Result<(), TestCaseError>;

/// Buffer operation: `Some(x)` pushes, `None` clears.
pub fn ops() -> impl Strategy<Value = (usize, Vec<Option<u32>>)> {
    (1usize..=12, proptest::collection::vec(proptest::option::weighted(0.85, any::<u32>()), 0..80))
}

/// The buffer never holds more than its capacity, refuses pushes exactly
/// when full and reports the largest size it reached.
pub fn buffer_respects_capacity(capacity: usize, ops: &[Option<u32>]) -> Outcome {
    let mut b = SampleBuffer::new(capacity);
    let mut model: Vec<u32> = Vec::new();
    let mut high = 0;
    for op in ops {
        match op {
            Some(x) => {
                let full = model.len() == capacity;
                prop_assert_eq!(b.push(*x).is_err(), full);
                if !full {
                    model.push(*x);
                }
            }
            None => {
                b.clear();
                model.clear();
            }
        }
        high = high.max(model.len());
        prop_assert!(b.len() <= capacity);
        prop_assert_eq!(b.items().copied().collect::<Vec<_>>(), model.clone());
        prop_assert_eq!(b.high_water(), high);
    }
    Ok(())
}

pub fn rows() -> impl Strategy<Value = Vec<MetricsRow>> {
    let row = (
        "[a-z_0-9]{1,12}",
        0usize..20,
        0usize..100_000,
        proptest::option::of(0.0..=1.0f64),
        proptest::option::of(0.0..10.0f64),
        proptest::option::of(-1.0..1e3f64),
        proptest::option::of(0.0..100.0f64),
    )
        .prop_map(|(method, trial, seen, s, t, v, sigma)| MetricsRow {
            method,
            trial,
            samples_seen: seen,
            success_rate: s,
            time_per_sample_s: t,
            mean_pred_variance: v,
            sigma_data: sigma,
        });
    proptest::collection::vec(row, 0..20)
}

/// Written rows read back identically up to the printed precision.
pub fn csv_round_trips(rows: &[MetricsRow]) -> Outcome {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    prop_assert_eq!(back.len(), rows.len());
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * y.abs().max(1e-300),
        (None, None) => true,
        _ => false,
    };
    for (a, b) in back.iter().zip(rows) {
        prop_assert_eq!(&a.method, &b.method);
        prop_assert_eq!((a.trial, a.samples_seen), (b.trial, b.samples_seen));
        prop_assert!(close(a.success_rate, b.success_rate));
        prop_assert!(close(a.time_per_sample_s, b.time_per_sample_s));
        prop_assert!(close(a.mean_pred_variance, b.mean_pred_variance));
        prop_assert!(close(a.sigma_data, b.sigma_data));
    }
    Ok(())
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Outcome) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("buffer memory accounting", run(cases, ops(), |(c, o)| buffer_respects_capacity(c, &o))),
        ("metrics csv round trip", run(cases, rows(), |r| csv_round_trips(&r))),
    ]
}
