use nalgebra::DMatrix;
use tdac::actor_critic::{step, AgentState, AlgoConfig};
use tdac::harness::{aggregate, run_batch, run_single, Experiment};
use tdac::oracle::{average_reward, stationary_distribution};
use tdac::policy::{FeatureMode, FeatureSet};
use tdac::rng::RunStreams;
use tdac::{GarnetSpec, Mdp};

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn initial_snapshot_matches_uniform_chain_across_instances() {
    let spec = GarnetSpec::small();
    for seed in 0..5 {
        let mdp = Mdp::garnet(&spec, seed).unwrap();
        let fs = FeatureSet::build(&spec, seed, FeatureMode::Garnet).unwrap();
        let record = run_single(&mdp, &fs, &AlgoConfig::default(), seed, 1, 1).unwrap();
        let uniform = DMatrix::from_element(spec.states, spec.actions, 1.0 / spec.actions as f64);
        let pi = stationary_distribution(&mdp.transition_under_policy(&uniform).unwrap()).unwrap();
        assert!((record.samples[0].eta_exact - average_reward(&pi, mdp.state_reward())).abs() < 1e-12);
    }
}

#[test]
fn uniform_policy_reward_is_centered_over_instances() {
    // Rewards are standard normal per state, so η(0) has mean zero over
    // the instance draw.
    let spec = GarnetSpec::small();
    let etas: Vec<f64> = (0..400)
        .map(|seed| {
            let mdp = Mdp::garnet(&spec, 10_000 + seed).unwrap();
            let fs = FeatureSet::build(&spec, 10_000 + seed, FeatureMode::Garnet).unwrap();
            run_single(&mdp, &fs, &AlgoConfig::default(), seed, 1, 1).unwrap().samples[0].eta_exact
        })
        .collect();
    let (mean, se) = mean_se(&etas);
    assert!(mean.abs() <= 4.0 * se, "mean {mean} se {se}");
}

#[test]
fn arms_share_instances_and_reward_noise() {
    let exp = Experiment::new(GarnetSpec::small(), AlgoConfig::default(), 77);
    let (mdp, fs) = exp.instance(3).unwrap();
    let (mdp_again, fs_again) = exp.instance(3).unwrap();
    assert_eq!(mdp, mdp_again);
    assert_eq!(fs, fs_again);

    // Noise residuals r - r̄(x) observed by each arm are the same sequence
    // even though the arms visit different states.
    let noise_trace = |config: &AlgoConfig| {
        let mut state = AgentState::new(&fs, 0);
        let mut streams = RunStreams::new(exp.run_seed(3));
        (0..500)
            .map(|_| {
                let x = state.x;
                let out = step(&mut state, &mdp, &fs, config, &mut streams).unwrap();
                out.reward - mdp.state_reward()[x]
            })
            .collect::<Vec<f64>>()
    };
    let single = noise_trace(&AlgoConfig::default());
    let two = noise_trace(&AlgoConfig::two_scale());
    for (a, b) in single.iter().zip(&two) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batch_statistics_agree_with_direct_computation() {
    let mut exp = Experiment::new(GarnetSpec::new(12, 3, 2, 0.1, 6, 2).unwrap(), AlgoConfig::default(), 5);
    exp.n_runs = 6;
    exp.n_steps = 3000;
    exp.record_stride = 300;
    let batch = run_batch(&exp).unwrap();
    let again = aggregate(&batch.records, &exp.hash()).unwrap();
    assert_eq!(again.rows, batch.summary.rows);
    for (k, row) in batch.summary.rows.iter().enumerate() {
        let column = |f: fn(&tdac::harness::Sample) -> f64| {
            batch.records.iter().map(|r| f(&r.samples[k])).collect::<Vec<_>>()
        };
        let (eta, se) = mean_se(&column(|s| s.eta_exact));
        assert!((row.eta_exact_mean - eta).abs() <= 1e-12);
        assert!((row.eta_exact_se.unwrap() - se).abs() <= 1e-12);
        assert!((row.eta_tilde_mean - mean_se(&column(|s| s.eta_tilde)).0).abs() <= 1e-12);
        assert!((row.grad_norm_mean - mean_se(&column(|s| s.grad_norm)).0).abs() <= 1e-12);
        assert!((row.w_dist_mean - mean_se(&column(|s| s.w_dist)).0).abs() <= 1e-12);
    }
}

#[test]
fn standard_error_over_hundred_small_instances() {
    // A hundred fresh GARNET(30,4,2,0.1) runs give a standard error of the
    // mean exact η of about 0.04.
    let mut exp = Experiment::new(GarnetSpec::small(), AlgoConfig::default(), 300);
    exp.n_runs = 100;
    exp.n_steps = 50_000;
    exp.record_stride = 10_000;
    let batch = run_batch(&exp).unwrap();
    let se = batch.summary.rows.last().unwrap().eta_exact_se.unwrap();
    assert!((0.015..0.1).contains(&se), "se {se}");
}

#[test]
fn shared_instance_batches_differ_only_in_streams() {
    let mut exp = Experiment::new(GarnetSpec::new(10, 4, 2, 0.1, 8, 3).unwrap(), AlgoConfig::default(), 9);
    exp.n_runs = 3;
    exp.n_steps = 2000;
    exp.record_stride = 1000;
    exp.shared_instance = true;
    let batch = run_batch(&exp).unwrap();
    let first: Vec<f64> = batch.records.iter().map(|r| r.samples[0].eta_exact).collect();
    assert!(first.iter().all(|&v| v == first[0]));
    assert!(batch.records[0].samples[2] != batch.records[1].samples[2]);
}
