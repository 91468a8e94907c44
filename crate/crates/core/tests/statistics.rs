use std::sync::Arc;

use memlab::dataset::{self, DatasetSpec};
use memlab::kernel_score::{residual_draws, KernelScoreModel};
use memlab::memorization::bootstrap_verdicts;
use memlab::schedule::NoiseSchedule;
use memlab::score_net::{NetConfig, ParamVector, ScoreNet};
use memlab::trainer::{evaluate_dsm_loss, LossWeighting, TimeSampling};
use memlab::rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn bootstrap_std_follows_binomial_rate() {
    let verdicts: Vec<bool> = (0..2000).map(|i| i % 2 == 0).collect();
    for m in [10, 100, 1000] {
        let b = bootstrap_verdicts(&verdicts, m, 400, 3).unwrap();
        let want = 0.5 / (m as f64).sqrt();
        assert!(b.std > want / 1.5 && b.std < want * 1.5, "M={m}: {} vs {want}", b.std);
        assert!((b.mean - 0.5).abs() < 3.0 * want);
    }
}

#[test]
fn any_network_sits_above_the_optimum_residual() {
    let set = dataset::generate(&DatasetSpec::mixture(8, 5)).unwrap();
    let schedule = NoiseSchedule::edm();
    let draws = residual_draws(&set, &schedule, TimeSampling::Uniform, 20_000, 1);
    let kernel = KernelScoreModel::new(Arc::new(set.clone()), schedule).unwrap();
    let c = evaluate_dsm_loss(&kernel, &set, &draws, LossWeighting::Sigma2).unwrap();
    let net = ScoreNet::new(NetConfig { hidden_width: 16, ..NetConfig::new(2) }, schedule).unwrap();
    for seed in 0..4 {
        let mut r = rng::stream(seed, 0);
        let p = ParamVector::from_vec(
            (0..net.param_count())
                .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r))
                .collect(),
        );
        let loss = evaluate_dsm_loss(&net.bind(p).unwrap(), &set, &draws, LossWeighting::Sigma2).unwrap();
        assert!(loss >= c, "loss {loss} below optimum residual {c}");
    }
}
