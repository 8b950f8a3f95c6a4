use kprompt_core::trainer::{desk_config, model_grad_check};

#[test]
fn full_model_gradients_match_finite_differences() {
    let t = std::time::Instant::now();
    let r = model_grad_check(&desk_config(), 2, 7).unwrap();
    for p in &r.params {
        eprintln!("{:40} {:>6} {:.3e}", p.name, p.elements_checked, p.max_rel_error);
    }
    eprintln!("{:?}", t.elapsed());
    assert!(r.passed, "max rel error {:.3e}", r.max_rel_error);
}
