use fedism_core::config::parse_config;
use fedism_core::data::{gen_task, TaskSpec};
use fedism_core::experiment::prepare_seed;
use fedism_core::federation::{aggregate, fedavg_weights, local_train, MethodSpec};
use fedism_core::metrics::evaluate;
use fedism_core::nn::{adjust_logits, ce_loss, init_params, Activation, ClassPriors};
use fedism_core::rng::derive_seed;
use fedism_core::strategy::PlainRule;
use fedism_core::{run_experiment, MlpArchitecture, StrategyRegistry};
use proptest::prelude::*;

const SMALL: &str = r#"
[task]
classes = 3
features = 6
n_per_class = 40
separation = 4.0
latent_dim = 3

[model]
hidden = [8]

[partition]
clients = 4
corrupted_ratio = 0.25

[method]
name = "fedavg"
local_rule = "plain"
agg_rule = "size"
eta = 0.1

[run]
rounds = 4
seeds = 2
eval_window = 2
"#;

/// Rebuilds the FedAvg round loop from its parts and formats the metrics
/// rows by hand; the experiment runner must produce the same text.
#[test]
fn fedavg_run_matches_hand_composed_loop() {
    let config = parse_config(SMALL, &[]).unwrap();
    let result = run_experiment(&config, &StrategyRegistry::with_builtins()).unwrap();
    for run in &result.runs {
        let setup = prepare_seed(&config, run.seed).unwrap();
        let method = MethodSpec::fedavg().recompose("fedavg", "plain", "size");
        let method = MethodSpec { eta: 0.1, ..method };
        let mut params = setup.init.clone();
        let mut expected = String::from(
            "round,acc_clean,auc_clean,acc_corrupted,auc_corrupted,acc_avg,auc_avg,sharpness_mean,sharpness_std,w_0,w_1,w_2,w_3\n",
        );
        for t in 1..=config.run.rounds {
            let round_seed = derive_seed(run.seed, "round", t as u64);
            let reports: Vec<_> = setup
                .clients
                .iter()
                .map(|c| local_train(&setup.arch, c, &params, &method, &PlainRule, round_seed).unwrap())
                .collect();
            let sizes: Vec<usize> = reports.iter().map(|r| r.n_samples).collect();
            let w = fedavg_weights(&sizes).unwrap();
            params = aggregate(&reports, &w).unwrap();
            let e = evaluate(&setup.arch, &params, &setup.clean_test, &setup.corrupted_test).unwrap();
            let s: Vec<f64> = reports.iter().map(|r| r.sharpness.value).collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            let mut row = format!(
                "{t},{},{},{},{},{},{},{mean},{std}",
                e.acc_clean, e.auc_clean, e.acc_corrupted, e.auc_corrupted, e.acc_avg, e.auc_avg
            );
            for v in w.as_slice() {
                row.push_str(&format!(",{v}"));
            }
            expected.push_str(&row);
            expected.push('\n');
        }
        assert_eq!(run.metrics_csv(), expected, "seed {}", run.seed);
        assert_eq!(run.final_params, params);
    }
}

#[test]
fn random_parameter_model_auc_is_near_chance_on_average() {
    let task = TaskSpec {
        classes: 2,
        features: 4,
        n_per_class: 250,
        separation: 2.0,
        latent_dim: None,
    };
    let arch = MlpArchitecture::new(vec![4, 8, 2], Activation::Relu).unwrap();
    let mut aucs = Vec::new();
    for seed in 0..20 {
        let (_, test) = gen_task(&task, seed).unwrap();
        let params = init_params(&arch, 5000 + seed);
        let e = evaluate(&arch, &params, &test, &test).unwrap();
        aucs.push(e.auc_clean);
        aucs.push(e.auc_corrupted);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean AUC {mean}: {aucs:?}");
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0_f64, 2..6)
}

proptest! {
    #[test]
    fn ce_loss_is_nonnegative(z in logits_strategy(), pick in 0usize..6) {
        let y = pick % z.len();
        prop_assert!(ce_loss(&z, y) >= 0.0);
    }

    #[test]
    fn uniform_prior_adjustment_keeps_argmax(z in logits_strategy(), tau in 0.0..3.0_f64) {
        let priors = ClassPriors::uniform(z.len());
        let adj = adjust_logits(&z, &priors, tau);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        prop_assert_eq!(argmax(&z), argmax(&adj));
        let shift = adj[0] - z[0];
        for (a, b) in adj.iter().zip(&z) {
            prop_assert!((a - b - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_adjustment_is_exact_log_prior_shift(z in logits_strategy(), tau in 0.0..3.0_f64, seed in 0u64..1000) {
        let raw: Vec<f64> = (0..z.len()).map(|i| 1.0 + ((seed as usize * 31 + i * 17) % 13) as f64).collect();
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let adj = adjust_logits(&z, &ClassPriors::new(pi.clone()).unwrap(), tau);
        for ((a, b), p) in adj.iter().zip(&z).zip(&pi) {
            prop_assert!((a - (b + tau * p.ln())).abs() < 1e-12);
        }
    }
}

#[test]
fn data_is_shared_across_methods() {
    let config = parse_config(SMALL, &[]).unwrap();
    let registry = StrategyRegistry::with_builtins();
    let hashes: Vec<Vec<String>> = config
        .method
        .ablation_set()
        .into_iter()
        .map(|m| {
            run_experiment(&config.with_method(m), &registry)
                .unwrap()
                .runs
                .iter()
                .map(|r| r.data_hash.clone())
                .collect()
        })
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}
