//! Multi-seed experiment orchestration and result serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    assign_and_corrupt, dataset_hash, dirichlet_partition, feature_std, gen_task, make_corrupted_test, CorruptionKind,
    CorruptionSpec, PartitionSpec, Sample, TaskSpec,
};
use crate::error::{Error, Result};
use crate::federation::{run_round, FederatedClient, FederationState, MethodSpec};
use crate::metrics::{evaluate, mean_std, RoundMetrics, METRIC_NAMES};
use crate::nn::{init_params, Activation, MlpArchitecture, ParameterVector};
use crate::rng::derive_seed;
use crate::strategy::{ResolvedMethod, StrategyRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means a linear softmax classifier.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub corrupted_ratio: f64,
    #[serde(default = "default_severity")]
    pub severity: f64,
    #[serde(default)]
    pub corruption: CorruptionKind,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_severity() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: usize,
    /// Number of seeds; seed `i` is `master_seed + i`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Summary metrics average the last `eval_window` rounds.
    #[serde(default = "default_eval_window")]
    pub eval_window: usize,
}

fn default_seeds() -> usize {
    3
}

fn default_eval_window() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub method: MethodSpec,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.rounds == 0 {
            return bad("run.rounds must be >= 1".into());
        }
        if self.run.eval_window == 0 || self.run.eval_window > self.run.rounds {
            return bad(format!(
                "run.eval_window must lie in [1, run.rounds = {}], got {}",
                self.run.rounds, self.run.eval_window
            ));
        }
        if self.run.seeds == 0 {
            return bad("run.seeds must be >= 1".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be >= 1".into());
        }
        self.method.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.partition_spec(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.run.seeds as u64)
            .map(|i| self.run.master_seed.wrapping_add(i))
            .collect()
    }

    pub fn architecture(&self) -> Result<MlpArchitecture> {
        let mut widths = vec![self.task.features];
        widths.extend(&self.model.hidden);
        widths.push(self.task.classes);
        MlpArchitecture::new(widths, self.model.activation)
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            clients: self.partition.clients,
            alpha: self.partition.alpha,
            corrupted_ratio: self.partition.corrupted_ratio,
            corruption: CorruptionSpec {
                kind: self.partition.corruption,
                severity: self.partition.severity,
            },
            seed: derive_seed(seed, "partition", 0),
        }
    }

    /// Same config with a different method.
    pub fn with_method(&self, method: MethodSpec) -> Self {
        Self { method, ..self.clone() }
    }
}

/// Everything a seed needs before round 1. Method-independent, so every
/// method run on a seed sees identical data and initialization.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub arch: MlpArchitecture,
    pub clients: Vec<FederatedClient>,
    pub clean_test: Vec<Sample>,
    pub corrupted_test: Vec<Sample>,
    pub init: ParameterVector,
    pub data_hash: String,
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let arch = config.architecture()?;
    let (train, test) = gen_task(&config.task, derive_seed(seed, "task", 0))?;
    let spec = config.partition_spec(seed);
    let train_std = feature_std(&train);
    let shards = assign_and_corrupt(dirichlet_partition(&train, &spec)?, &spec)?;
    let corrupted_test = make_corrupted_test(&test, &spec, &train_std);
    let data_hash = dataset_hash(
        shards
            .iter()
            .flat_map(|d| d.samples.iter())
            .chain(&test)
            .chain(&corrupted_test),
    );
    let clients = shards
        .into_iter()
        .map(|d| FederatedClient::new(d, config.task.classes))
        .collect();
    Ok(SeedSetup {
        seed,
        init: init_params(&arch, derive_seed(seed, "init", 0)),
        arch,
        clients,
        clean_test: test,
        corrupted_test,
        data_hash,
    })
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data_hash: String,
    pub rounds: Vec<RoundMetrics>,
    pub final_params: ParameterVector,
    /// Per-client sharpness at the last round, by client id.
    pub final_sharpness: Vec<f64>,
}

impl SeedRun {
    /// Metric means over the last `window` rounds, in [`METRIC_NAMES`] order.
    pub fn window_means(&self, window: usize) -> [f64; 8] {
        let tail = &self.rounds[self.rounds.len() - window..];
        let mut acc = [0.0; 8];
        for r in tail {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        acc.map(|v| v / tail.len() as f64)
    }

    /// `round,<metrics>,w_0,...,w_{K-1}`.
    pub fn metrics_csv(&self) -> String {
        let k = self.rounds.first().map_or(0, |r| r.weights.len());
        let mut out = String::from("round");
        for name in METRIC_NAMES {
            out.push(',');
            out.push_str(name);
        }
        for i in 0..k {
            let _ = write!(out, ",w_{i}");
        }
        out.push('\n');
        for r in &self.rounds {
            let _ = write!(out, "{}", r.round);
            for v in r.values() {
                let _ = write!(out, ",{v}");
            }
            for w in r.weights.as_slice() {
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: BTreeMap<String, f64>,
}

impl Summary {
    pub fn from_runs(method: &str, runs: &[SeedRun], window: usize) -> Self {
        let per_seed: Vec<[f64; 8]> = runs.iter().map(|r| r.window_means(window)).collect();
        let n = per_seed.len() as f64;
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let m = per_seed.iter().map(|v| v[i]).sum::<f64>() / n;
            let var = if per_seed.len() > 1 {
                per_seed.iter().map(|v| (v[i] - m) * (v[i] - m)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean.insert((*name).to_owned(), m);
            std.insert((*name).to_owned(), var.sqrt());
        }
        Self {
            method: method.to_owned(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean,
            std,
        }
    }

    pub fn mean_of(&self, metric: &str) -> f64 {
        self.mean[metric]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub method: String,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

/// Runs all rounds for one seed, evaluating after every round.
pub fn run_seed(config: &ExperimentConfig, rules: &ResolvedMethod, setup: &SeedSetup) -> Result<SeedRun> {
    let method = &config.method;
    let mut state = FederationState::new(setup.init.clone());
    let mut rounds = Vec::with_capacity(config.run.rounds);
    let mut final_sharpness = Vec::new();
    for t in 1..=config.run.rounds {
        let round_seed = derive_seed(setup.seed, "round", t as u64);
        let outcome =
            run_round(&setup.arch, &state, method, rules, &setup.clients, round_seed).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    seed: setup.seed,
                    round: t,
                    what,
                },
                other => other,
            })?;
        if !outcome.params.is_finite() {
            return Err(Error::Diverged {
                seed: setup.seed,
                round: t,
                what: "global parameters",
            });
        }
        let (next, weights, reports) = outcome.into_state(&state);
        state = next;
        let sharp: Vec<f64> = reports.iter().map(|r| r.sharpness.value).collect();
        let (sharpness_mean, sharpness_std) = mean_std(&sharp);
        let eval = evaluate(&setup.arch, &state.params, &setup.clean_test, &setup.corrupted_test)?;
        rounds.push(RoundMetrics {
            round: t,
            eval,
            sharpness_mean,
            sharpness_std,
            weights,
        });
        final_sharpness = sharp;
    }
    Ok(SeedRun {
        seed: setup.seed,
        data_hash: setup.data_hash.clone(),
        rounds,
        final_params: state.params,
        final_sharpness,
    })
}

/// Runs every seed of `config` (in parallel on the ambient rayon pool) and
/// summarizes the last `eval_window` rounds.
pub fn run_experiment(config: &ExperimentConfig, registry: &StrategyRegistry) -> Result<ExperimentResult> {
    config.validate()?;
    let rules = registry.resolve(&config.method)?;
    let runs = config
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let setup = prepare_seed(config, seed)?;
            run_seed(config, &rules, &setup)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_runs(&config.method.name, &runs, config.run.eval_window);
    Ok(ExperimentResult {
        method: config.method.name.clone(),
        runs,
        summary,
    })
}

/// [`run_experiment`] on a dedicated pool with `threads` workers.
pub fn run_experiment_with_threads(
    config: &ExperimentConfig,
    registry: &StrategyRegistry,
    threads: usize,
) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(config, registry))
}
