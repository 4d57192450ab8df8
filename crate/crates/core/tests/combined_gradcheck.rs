use personvit::pretrain::{combined_loss_gradcheck, CombinedCheck, LossWeights};

#[test]
fn combined_objective_matches_finite_differences() {
    for seed in 0..3 {
        let r = combined_loss_gradcheck(&CombinedCheck { seed, ..CombinedCheck::default() }).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.checked > 250);
    }
}

#[test]
fn dino_only_and_no_locals_variants_pass() {
    let c = CombinedCheck {
        weights: LossWeights { lambda_dino: 1.0, lambda_mim: 0.0, student_temp: 0.1 },
        local_views: 0,
        ..CombinedCheck::default()
    };
    let r = combined_loss_gradcheck(&c).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
