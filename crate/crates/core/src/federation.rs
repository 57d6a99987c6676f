//! Round orchestration: local training on every client, report collection,
//! and global aggregation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LocalDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{ClassPriors, MlpArchitecture, MlpObjective, ParameterVector};
use crate::rng::stream;
use crate::sharpness::{sharpness_and_loss, SharpnessValue};
use crate::strategy::{LocalRule, ResolvedMethod};

const SIMPLEX_TOL: f64 = 1e-12;

/// Local update rule, aggregation rule and their hyperparameters.
///
/// Named compositions: FedAvg = (plain, size), FedAvg+SALT = (sam, size),
/// FedAvg+SAGA = (plain, sharpness_q), FedISM = (sam, sharpness_q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    /// Label used for output directories and summaries.
    pub name: String,
    pub local_rule: String,
    pub agg_rule: String,
    #[serde(default = "defaults::q")]
    pub q: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    /// Logit-adjustment temperature for training losses.
    #[serde(default = "defaults::tau")]
    pub tau: f64,
}

mod defaults {
    pub fn q() -> f64 {
        2.0
    }
    pub fn beta() -> f64 {
        0.5
    }
    pub fn rho() -> f64 {
        0.05
    }
    pub fn eta() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn local_epochs() -> usize {
        1
    }
    pub fn tau() -> f64 {
        1.0
    }
}

impl MethodSpec {
    fn with_rules(name: &str, local_rule: &str, agg_rule: &str) -> Self {
        Self {
            name: name.into(),
            local_rule: local_rule.into(),
            agg_rule: agg_rule.into(),
            q: defaults::q(),
            beta: defaults::beta(),
            rho: defaults::rho(),
            eta: defaults::eta(),
            batch_size: defaults::batch_size(),
            local_epochs: defaults::local_epochs(),
            tau: defaults::tau(),
        }
    }

    pub fn fedavg() -> Self {
        Self::with_rules("fedavg", "plain", "size")
    }

    pub fn fedavg_salt() -> Self {
        Self::with_rules("fedavg_salt", "sam", "size")
    }

    pub fn fedavg_saga() -> Self {
        Self::with_rules("fedavg_saga", "plain", "sharpness_q")
    }

    pub fn fedism() -> Self {
        Self::with_rules("fedism", "sam", "sharpness_q")
    }

    pub fn loss_q() -> Self {
        Self::with_rules("loss_q", "plain", "loss_q")
    }

    /// The same hyperparameters under another (local, aggregation) pair.
    pub fn recompose(&self, name: &str, local_rule: &str, agg_rule: &str) -> Self {
        Self {
            name: name.into(),
            local_rule: local_rule.into(),
            agg_rule: agg_rule.into(),
            ..self.clone()
        }
    }

    /// FedAvg, +SALT, +SAGA and FedISM sharing this spec's hyperparameters.
    pub fn ablation_set(&self) -> Vec<MethodSpec> {
        vec![
            self.recompose("fedavg", "plain", "size"),
            self.recompose("fedavg_salt", "sam", "size"),
            self.recompose("fedavg_saga", "plain", "sharpness_q"),
            self.recompose("fedism", "sam", "sharpness_q"),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.q > 0.0 && self.q.is_finite()) {
            return bad(format!("method.q must be > 0, got {}", self.q));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("method.beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("method.rho must be > 0, got {}", self.rho));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("method.eta must be >= 0, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("method.batch_size must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("method.local_epochs must be >= 1".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("method.tau must be >= 0, got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub updated_params: ParameterVector,
    pub n_samples: usize,
    pub sharpness: SharpnessValue,
    pub mean_loss: f64,
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    w: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_simplex(&w)?;
        Ok(Self { w })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            w: vec![1.0 / k as f64; k],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::NotOnSimplex("empty weight vector".into()));
    }
    if let Some(v) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::NotOnSimplex(format!("entry {v} is negative or non-finite")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotOnSimplex(format!("entries sum to {total}")));
    }
    Ok(())
}

/// `N_k / sum N`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<AggregationWeights> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no client sizes".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("client sizes must be >= 1".into()));
    }
    let total: usize = sizes.iter().sum();
    Ok(AggregationWeights {
        w: sizes.iter().map(|&n| n as f64 / total as f64).collect(),
    })
}

/// `v_k^q / sum v^q`, computed on `v / max v` so large `q` cannot underflow.
/// An all-zero input falls back to uniform weights.
fn power_weights(values: &[f64], q: f64, what: &str) -> Result<AggregationWeights> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("no client {what} values")));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::InvalidArgument(format!("q must be > 0, got {q}")));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "{what} values must be finite and >= 0, got {v}"
        )));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        log::warn!("all client {what} values are zero; using uniform aggregation weights");
        return Ok(AggregationWeights::uniform(values.len()));
    }
    let powered: Vec<f64> = values.iter().map(|v| (v / max).powf(q)).collect();
    let total: f64 = powered.iter().sum();
    Ok(AggregationWeights {
        w: powered.into_iter().map(|v| v / total).collect(),
    })
}

/// Sharpness-aware weights `S_k^q / sum S^q`.
pub fn sharpness_weights(sharpness: &[f64], q: f64) -> Result<AggregationWeights> {
    power_weights(sharpness, q, "sharpness")
}

/// Loss-reweighting baseline `L_k^q / sum L^q`.
pub fn loss_weights(losses: &[f64], q: f64) -> Result<AggregationWeights> {
    power_weights(losses, q, "loss")
}

/// Moving average `beta * raw + (1 - beta) * prev` for rounds after the
/// first; round 1 returns `raw` unchanged.
pub fn smooth_weights(
    raw: &AggregationWeights,
    prev: Option<&AggregationWeights>,
    beta: f64,
    t: usize,
) -> Result<AggregationWeights> {
    check_simplex(&raw.w)?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1], got {beta}")));
    }
    match (t, prev) {
        (0, _) => Err(Error::InvalidArgument("rounds are numbered from 1".into())),
        (1, None) => Ok(raw.clone()),
        (1, Some(_)) => Err(Error::InvalidArgument("round 1 has no previous weights".into())),
        (_, None) => Err(Error::InvalidArgument(format!("round {t} needs previous weights"))),
        (_, Some(prev)) => {
            check_simplex(&prev.w)?;
            if prev.len() != raw.len() {
                return Err(Error::DimensionMismatch {
                    expected: raw.len(),
                    actual: prev.len(),
                    context: "previous weights",
                });
            }
            let w: Vec<f64> = raw
                .w
                .iter()
                .zip(&prev.w)
                .map(|(r, p)| beta * r + (1.0 - beta) * p)
                .collect();
            AggregationWeights::new(w)
        }
    }
}

/// Coordinate-wise `sum_k w_k * theta_k`, accumulated in report order.
pub fn aggregate(reports: &[ClientReport], w: &AggregationWeights) -> Result<ParameterVector> {
    if reports.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: reports.len(),
            actual: w.len(),
            context: "aggregation weights",
        });
    }
    let dim = reports[0].updated_params.len();
    let mut out = vec![0.0; dim];
    for (r, &wk) in reports.iter().zip(w.as_slice()) {
        if r.updated_params.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: r.updated_params.len(),
                context: "client parameters",
            });
        }
        for (o, p) in out.iter_mut().zip(r.updated_params.as_slice()) {
            *o += wk * p;
        }
    }
    Ok(ParameterVector::new(out))
}

/// A client's shard together with its logit-adjustment priors.
#[derive(Debug, Clone)]
pub struct FederatedClient {
    pub data: LocalDataset,
    pub priors: ClassPriors,
}

impl FederatedClient {
    /// Priors from the shard's own label frequencies.
    pub fn new(data: LocalDataset, num_classes: usize) -> Self {
        let priors = ClassPriors::from_labels(data.samples.iter().map(|s| s.y), num_classes);
        Self { data, priors }
    }
}

/// Copies the global model, runs `local_epochs` passes of shuffled
/// mini-batches through `rule`, then measures full-shard sharpness and loss
/// on the result.
pub fn local_train(
    arch: &MlpArchitecture,
    client: &FederatedClient,
    global: &ParameterVector,
    method: &MethodSpec,
    rule: &dyn LocalRule,
    round_seed: u64,
) -> Result<ClientReport> {
    let data = &client.data;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream(round_seed, "local-shuffle", data.client_id as u64);
    for _ in 0..method.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(method.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let objective = MlpObjective::new(arch, batch, &client.priors, method.tau);
            params = rule.step(&objective, &params, method)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("local parameters"));
    }
    let full = MlpObjective::new(arch, data.refs(), &client.priors, method.tau);
    let (sharpness, mean_loss) = sharpness_and_loss(&full, &params, method.rho, data.len())?;
    Ok(ClientReport {
        client_id: data.client_id,
        updated_params: params,
        n_samples: data.len(),
        sharpness,
        mean_loss,
    })
}

/// Global model plus the smoothed weights carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub params: ParameterVector,
    pub prev_weights: Option<AggregationWeights>,
    /// Number of completed rounds.
    pub round: usize,
}

impl FederationState {
    pub fn new(params: ParameterVector) -> Self {
        Self {
            params,
            prev_weights: None,
            round: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub params: ParameterVector,
    pub weights: AggregationWeights,
    /// Sorted by client id.
    pub reports: Vec<ClientReport>,
}

/// One communication round `t = state.round + 1`.
///
/// Clients train in parallel on the ambient rayon pool. Reports are sorted by
/// client id before weighting and aggregation, so the result does not depend
/// on client order or scheduling.
pub fn run_round(
    arch: &MlpArchitecture,
    state: &FederationState,
    method: &MethodSpec,
    rules: &ResolvedMethod,
    clients: &[FederatedClient],
    round_seed: u64,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let t = state.round + 1;
    let mut reports = clients
        .par_iter()
        .map(|c| local_train(arch, c, &state.params, method, rules.local.as_ref(), round_seed))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by_key(|r| r.client_id);

    let raw = rules.aggregation.raw_weights(&reports, method.q)?;
    let weights = if rules.aggregation.smoothed() {
        smooth_weights(&raw, state.prev_weights.as_ref(), method.beta, t)?
    } else {
        raw
    };
    let params = aggregate(&reports, &weights)?;
    Ok(RoundOutcome {
        params,
        weights,
        reports,
    })
}

impl RoundOutcome {
    pub fn into_state(self, prev: &FederationState) -> (FederationState, AggregationWeights, Vec<ClientReport>) {
        let state = FederationState {
            params: self.params,
            prev_weights: Some(self.weights.clone()),
            round: prev.round + 1,
        };
        (state, self.weights, self.reports)
    }
}
