mod support;

use support::gradsuite::{run_all, F32_TOL, F64_TOL};

#[test]
fn every_op_and_both_losses_match_finite_differences() {
    let results = run_all().unwrap();
    let mut bad = Vec::new();
    for (name, e32, e64) in &results {
        println!("{name:<28} f32 {e32:.2e}  f64 {e64:.2e}");
        if !(*e32 < F32_TOL && *e64 < F64_TOL) {
            bad.push(format!("{name}: f32 {e32:.2e}, f64 {e64:.2e}"));
        }
    }
    assert!(bad.is_empty(), "gradient mismatches:\n{}", bad.join("\n"));
}
