use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdlab_core::ot_stage2::{
    matching_loss_against, sample_prior, sinkhorn, CostMatrix, DiscreteDistribution, PriorSpec, SinkhornConfig,
};

fn cfg() -> SinkhornConfig {
    SinkhornConfig {
        eps: 0.01,
        max_iter: 100_000,
        tol: 1e-9,
    }
}

#[test]
fn identical_sorted_supports_cost_about_zero() {
    let x = vec![1.0, 4.0, 9.0, 16.0];
    let m = matching_loss_against(&x, &x, &cfg()).unwrap();
    assert!(m.converged);
    assert!(m.loss < 1e-6, "{}", m.loss);
    assert!(m.grad.iter().all(|g| g.abs() < 1e-4));
}

#[test]
fn matching_gradient_pulls_towards_the_prior() {
    let preds = [10.0, 2.0, 5.0];
    let prior = [3.0, 6.0, 11.0];
    let m = matching_loss_against(&preds, &prior, &cfg()).unwrap();
    // sorted matching 2->3, 5->6, 10->11: every prediction is below its partner
    assert!(m.grad.iter().all(|&g| g < 0.0), "{:?}", m.grad);
    assert_abs_diff_eq!(m.loss, 1.0, epsilon = 1e-2);
    let h = 1e-5;
    for i in 0..3 {
        let mut up = preds;
        up[i] += h;
        let mut down = preds;
        down[i] -= h;
        let fd = (matching_loss_against(&up, &prior, &cfg()).unwrap().loss
            - matching_loss_against(&down, &prior, &cfg()).unwrap().loss)
            / (2.0 * h);
        assert_abs_diff_eq!(fd, m.grad[i], epsilon = 1e-3);
    }
}

#[test]
fn plan_marginals_match_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (n, m) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let a = DiscreteDistribution::uniform((0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        let b = DiscreteDistribution::uniform((0..m).map(|j| j as f64 / m as f64).collect()).unwrap();
        let cost = CostMatrix::squared_difference(a.support(), b.support());
        let res = sinkhorn(&a, &b, &cost, &cfg()).unwrap();
        assert!(res.converged);
        assert!(res.plan.marginal_violation(a.weights(), b.weights()) < 1e-8);
        assert!(res.plan.data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn mismatched_cost_is_rejected() {
    let a = DiscreteDistribution::uniform(vec![0.0, 1.0]).unwrap();
    let cost = CostMatrix::new(3, 2, vec![0.0; 6]).unwrap();
    assert!(sinkhorn(&a, &a, &cost, &cfg()).is_err());
}

#[test]
fn prior_draws_stay_in_range_and_match_the_mean() {
    let spec = PriorSpec {
        alpha: 2.0,
        cmin: 1.0,
        cmax: 100.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = sample_prior(&spec, 20_000, &mut rng).unwrap();
    assert!(d.support().windows(2).all(|w| w[0] <= w[1]));
    assert!(d.support().iter().all(|&c| (1.0..=100.0).contains(&c)));
    let mean = d.support().iter().sum::<f64>() / d.len() as f64;
    assert_abs_diff_eq!(mean, spec.mean(), epsilon = 0.1);
    assert_abs_diff_eq!(spec.quantile(spec.cdf(7.5)), 7.5, epsilon = 1e-9);
    let bad = PriorSpec { cmin: 0.0, ..spec };
    assert!(sample_prior(&bad, 4, &mut rng).is_err());
}
