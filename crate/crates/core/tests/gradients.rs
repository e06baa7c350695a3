mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seea_core::mgrm::LabelGroup;
use seea_core::optim::{grpo_loss_and_grad, tree_grpo_loss_and_grad, OptimConfig};
use seea_core::params::ParamVector;

const COORDS: usize = 24;

fn assert_fd(name: &str, report: FdReport) {
    assert!(
        report.worst < FD_REL_TOL,
        "{name}: worst relative error {:.3e} over {} coordinates",
        report.worst,
        report.coordinates
    );
}

#[test]
fn policy_logprob_gradient_matches_differences() {
    for seed in 0..4 {
        let f = policy_fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &f.batch[0];
        let action = &g.actions[0];
        let weights: Vec<f64> = (0..action.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = f.policy.grad_logprob(&f.params, &g.state, action, &weights).unwrap();
        let loss = |p: &ParamVector| {
            let lp = f.policy.logprob(p, &g.state, action).unwrap().0;
            lp.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>()
        };
        let coords = probe_coordinates(&analytic, COORDS, &mut rng);
        assert_fd("policy log-prob", fd_compare(&loss, &f.params, &analytic, &coords));
    }
}

#[test]
fn tree_grpo_gradient_matches_differences() {
    for seed in 10..14 {
        let f = policy_fixture(seed);
        let (_, analytic, stats) =
            tree_grpo_loss_and_grad(&f.batch, &f.policy, &f.params, &f.reference, &f.config).unwrap();
        assert!(stats.clip_frac > 0.0, "fixture should exercise the clipped branch");
        let loss = |p: &ParamVector| {
            tree_grpo_loss_and_grad(&f.batch, &f.policy, p, &f.reference, &f.config).unwrap().0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = probe_coordinates(&analytic, COORDS, &mut rng);
        assert_fd("tree GRPO", fd_compare(&loss, &f.params, &analytic, &coords));
    }
}

#[test]
fn reward_model_cross_entropy_gradient_matches_differences() {
    for seed in 20..24 {
        let f = reward_fixture(seed);
        let (_, analytic) = f.rm.ce_loss_and_grad(&f.params, &f.labelled).unwrap();
        let loss = |p: &ParamVector| f.rm.ce_loss_and_grad(p, &f.labelled).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = probe_coordinates(&analytic, COORDS, &mut rng);
        assert_fd("reward-model CE", fd_compare(&loss, &f.params, &analytic, &coords));
    }
}

#[test]
fn reward_model_group_gradient_matches_differences() {
    for seed in 30..34 {
        let f = reward_fixture(seed);
        let config = OptimConfig { beta: 0.0, ..f.config.clone() };
        let (_, analytic, _) =
            grpo_loss_and_grad(&f.groups, &f.rm, &f.params, &f.params, &config).unwrap();
        let loss = |p: &ParamVector| grpo_loss_and_grad(&f.groups, &f.rm, p, p, &config).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = probe_coordinates(&analytic, COORDS, &mut rng);
        assert_fd("reward-model GRPO", fd_compare(&loss, &f.params, &analytic, &coords));
    }
}

#[test]
fn on_policy_loss_is_minus_mean_length_weighted_advantage() {
    let mut f = policy_fixture(40);
    f.config.beta = 0.0;
    for g in &mut f.batch {
        g.old_logprobs = g
            .actions
            .iter()
            .map(|a| f.policy.logprob(&f.params, &g.state, a).unwrap().0)
            .collect();
    }
    let (loss, _, stats) =
        tree_grpo_loss_and_grad(&f.batch, &f.policy, &f.params, &f.params, &f.config).unwrap();
    assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
    // Independent evaluation of −mean_g Σ_i |a_i|·Â_i / Σ_i |a_i|.
    let expected = -f
        .batch
        .iter()
        .map(|g| {
            let n = g.pr.len() as f64;
            let mean = g.pr.iter().sum::<f64>() / n;
            let std = (g.pr.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
            let lens: Vec<f64> = g.actions.iter().map(|a| a.len() as f64).collect();
            let num: f64 = g.pr.iter().zip(&lens).map(|(p, l)| l * (p - mean) / std).sum();
            num / lens.iter().sum::<f64>()
        })
        .sum::<f64>()
        / f.batch.len() as f64;
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

#[test]
fn equal_length_on_policy_loss_is_zero() {
    let f = reward_fixture(41);
    let groups: Vec<LabelGroup> = f
        .groups
        .iter()
        .map(|g| LabelGroup {
            old_logprobs: g
                .labels
                .iter()
                .map(|l| vec![f.rm.label_logprob(&f.params, &g.state, *l).unwrap()])
                .collect(),
            ..g.clone()
        })
        .collect();
    let (loss, _, _) = grpo_loss_and_grad(&groups, &f.rm, &f.params, &f.params, &f.config).unwrap();
    assert!(loss.abs() < 1e-9, "{loss}");
}

#[test]
fn tokens_above_the_clip_band_carry_no_gradient() {
    let leak = clipped_gradient_leak(42);
    assert!(leak < 1e-12, "gradient leaked through clipped tokens: {leak:e}");
}
