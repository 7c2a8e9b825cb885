mod common;

use common::ops::{grad_instance, OPS};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for op in OPS {
        for seed in 0..6 {
            let r = grad_instance(op, seed);
            assert!(r.coords > 0, "{op}: no coordinates checked");
            assert!(r.max_rel <= TOL, "{op} seed {seed}: relative error {:.3e}", r.max_rel);
        }
    }
}

#[test]
fn checker_rejects_a_wrong_gradient() {
    // a sanity check of the harness: perturbing the loss outside the tape
    // (a constant scale the backward pass cannot see) must be flagged
    use glyphembed::tensor::{ParamStore, Tensor};
    let mut s = ParamStore::<f64>::new();
    s.insert("x", Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap());
    let calls = std::cell::Cell::new(0usize);
    let r = common::check_gradients(&s, 3, 1, |t, p| {
        calls.set(calls.get() + 1);
        let x = p.get("x")?;
        let sq = t.mul(x, x)?;
        let total = t.sum(sq)?;
        // numeric probes see 2·sum(x²); the analytic pass sees sum(x²)
        if calls.get() > 1 {
            t.scale(total, 2.0)
        } else {
            Ok(total)
        }
    });
    assert!(r.max_rel > 0.3, "harness missed a factor-two error: {:.3e}", r.max_rel);
}
