mod support;

use std::time::Instant;

use support::gradcases::{run_suite, REL_TOL};

#[test]
fn composite_graphs_match_finite_differences() {
    let start = Instant::now();
    let results = run_suite(2024);
    for (name, err) in &results {
        println!("{name}: max relative error {err:.2e}");
    }
    assert!(results.len() >= 20);
    let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e <= REL_TOL)).collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:?}");
    assert!(start.elapsed().as_secs_f64() < 60.0, "took {:?}", start.elapsed());
}
