//! Record a small computation on the gradient tape, pull gradients back
//! through it, and verify them against central differences.
//!
//! ```bash
//! cargo run -p dwff --example autodiff_basics
//! ```

use dwff::gradcheck::{grad_check, GradCheckOptions};
use dwff::tape::GradTape;
use dwff::tensor::Tensor;

fn main() {
    // f(w, b) = mean(relu(x·wᵀ + b))  for a fixed input x.
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.05]).unwrap();

    let mut tape = GradTape::new();
    let x_id = tape.constant(x.clone());
    let w_id = tape.param("w", w.clone());
    let b_id = tape.param("b", b.clone());
    let h = tape.linear(x_id, w_id, b_id).unwrap();
    let r = tape.relu(h);
    let loss = tape.reduce_mean(r, &[0, 1]).unwrap();
    println!("loss = {:.6}", tape.value(loss).data()[0]);

    tape.backward(loss);
    let dw = tape.grad(w_id).unwrap().to_vec();
    let db = tape.grad(b_id).unwrap().to_vec();
    println!("d loss / d b = {db:?}");

    // Independent check: central differences on a fresh evaluation.
    let eval = |params: &[Tensor]| -> f64 {
        let mut tape = GradTape::new();
        let x_id = tape.constant(x.clone());
        let w_id = tape.constant(params[0].clone());
        let b_id = tape.constant(params[1].clone());
        let h = tape.linear(x_id, w_id, b_id).unwrap();
        let r = tape.relu(h);
        let loss = tape.reduce_mean(r, &[0, 1]).unwrap();
        tape.value(loss).data()[0]
    };
    let report =
        grad_check(eval, &[w, b], &[dw, db], &GradCheckOptions::default()).unwrap();
    println!(
        "finite-difference check over {} coordinates: max relative error {:.3e}",
        report.coords_checked, report.max_rel_err
    );
    assert!(report.max_rel_err < 1e-7);
    println!("analytic gradients agree with central differences");
}
