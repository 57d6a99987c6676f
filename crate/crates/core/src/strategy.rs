//! Local update rules and aggregation rules, registered by name.
//!
//! A [`MethodSpec`](crate::federation::MethodSpec) names one rule of each kind;
//! [`StrategyRegistry::resolve`] turns those names into trait objects. New
//! variants (a GSAM-style local optimizer, another fairness reweighting) are
//! added by implementing the trait and calling `register_*`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::federation::{
    fedavg_weights, loss_weights, sharpness_weights, AggregationWeights, ClientReport, MethodSpec,
};
use crate::nn::{Objective, ParameterVector};
use crate::sharpness::{plain_step, sam_step};

/// One optimizer step on a mini-batch objective.
pub trait LocalRule: Send + Sync {
    fn name(&self) -> &str;
    fn step(&self, objective: &dyn Objective, params: &ParameterVector, method: &MethodSpec)
        -> Result<ParameterVector>;
}

/// Turns the round's client reports into raw aggregation weights.
pub trait AggregationRule: Send + Sync {
    fn name(&self) -> &str;
    fn raw_weights(&self, reports: &[ClientReport], q: f64) -> Result<AggregationWeights>;
    /// Whether raw weights pass through the moving average across rounds.
    fn smoothed(&self) -> bool;
}

pub struct PlainRule;

impl LocalRule for PlainRule {
    fn name(&self) -> &str {
        "plain"
    }

    fn step(
        &self,
        objective: &dyn Objective,
        params: &ParameterVector,
        method: &MethodSpec,
    ) -> Result<ParameterVector> {
        plain_step(objective, params, method.eta)
    }
}

pub struct SamRule;

impl LocalRule for SamRule {
    fn name(&self) -> &str {
        "sam"
    }

    fn step(
        &self,
        objective: &dyn Objective,
        params: &ParameterVector,
        method: &MethodSpec,
    ) -> Result<ParameterVector> {
        sam_step(objective, params, method.rho, method.eta)
    }
}

/// Dataset-size weights, never smoothed.
pub struct SizeRule;

impl AggregationRule for SizeRule {
    fn name(&self) -> &str {
        "size"
    }

    fn raw_weights(&self, reports: &[ClientReport], _q: f64) -> Result<AggregationWeights> {
        let sizes: Vec<usize> = reports.iter().map(|r| r.n_samples).collect();
        fedavg_weights(&sizes)
    }

    fn smoothed(&self) -> bool {
        false
    }
}

/// Weights proportional to `loss^q`: the loss-reweighting fairness baseline.
pub struct LossRule;

impl AggregationRule for LossRule {
    fn name(&self) -> &str {
        "loss_q"
    }

    fn raw_weights(&self, reports: &[ClientReport], q: f64) -> Result<AggregationWeights> {
        let losses: Vec<f64> = reports.iter().map(|r| r.mean_loss.max(0.0)).collect();
        loss_weights(&losses, q)
    }

    fn smoothed(&self) -> bool {
        true
    }
}

/// Weights proportional to `sharpness^q`.
pub struct SharpnessRule;

impl AggregationRule for SharpnessRule {
    fn name(&self) -> &str {
        "sharpness_q"
    }

    fn raw_weights(&self, reports: &[ClientReport], q: f64) -> Result<AggregationWeights> {
        // The first-order estimate can dip below zero on locally concave
        // stretches; such clients get zero weight.
        let s: Vec<f64> = reports
            .iter()
            .map(|r| {
                if r.sharpness.value < 0.0 {
                    log::debug!("client {} sharpness {} clamped to 0", r.client_id, r.sharpness.value);
                }
                r.sharpness.value.max(0.0)
            })
            .collect();
        sharpness_weights(&s, q)
    }

    fn smoothed(&self) -> bool {
        true
    }
}

#[derive(Clone)]
pub struct StrategyRegistry {
    local: BTreeMap<String, Arc<dyn LocalRule>>,
    aggregation: BTreeMap<String, Arc<dyn AggregationRule>>,
}

/// The pair of rules a method runs with.
#[derive(Clone)]
pub struct ResolvedMethod {
    pub local: Arc<dyn LocalRule>,
    pub aggregation: Arc<dyn AggregationRule>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            local: BTreeMap::new(),
            aggregation: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_local(Arc::new(PlainRule));
        r.register_local(Arc::new(SamRule));
        r.register_aggregation(Arc::new(SizeRule));
        r.register_aggregation(Arc::new(LossRule));
        r.register_aggregation(Arc::new(SharpnessRule));
        r
    }

    /// Replaces any rule already registered under the same name.
    pub fn register_local(&mut self, rule: Arc<dyn LocalRule>) {
        self.local.insert(rule.name().to_owned(), rule);
    }

    pub fn register_aggregation(&mut self, rule: Arc<dyn AggregationRule>) {
        self.aggregation.insert(rule.name().to_owned(), rule);
    }

    pub fn local(&self, name: &str) -> Result<Arc<dyn LocalRule>> {
        self.local.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "local",
            name: name.to_owned(),
            registered: self.local_names().join(", "),
        })
    }

    pub fn aggregation(&self, name: &str) -> Result<Arc<dyn AggregationRule>> {
        self.aggregation
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "aggregation",
                name: name.to_owned(),
                registered: self.aggregation_names().join(", "),
            })
    }

    pub fn local_names(&self) -> Vec<&str> {
        self.local.keys().map(String::as_str).collect()
    }

    pub fn aggregation_names(&self) -> Vec<&str> {
        self.aggregation.keys().map(String::as_str).collect()
    }

    pub fn resolve(&self, method: &MethodSpec) -> Result<ResolvedMethod> {
        Ok(ResolvedMethod {
            local: self.local(&method.local_rule)?,
            aggregation: self.aggregation(&method.agg_rule)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered() {
        let r = StrategyRegistry::with_builtins();
        assert_eq!(r.local_names(), vec!["plain", "sam"]);
        assert_eq!(r.aggregation_names(), vec!["loss_q", "sharpness_q", "size"]);
        assert!(!r.aggregation("size").unwrap().smoothed());
        assert!(r.aggregation("sharpness_q").unwrap().smoothed());
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let r = StrategyRegistry::with_builtins();
        let err = r.local("gsam").err().unwrap().to_string();
        assert!(err.contains("gsam") && err.contains("plain, sam"), "{err}");
    }

    struct Frozen;

    impl LocalRule for Frozen {
        fn name(&self) -> &str {
            "frozen"
        }
        fn step(&self, _: &dyn Objective, params: &ParameterVector, _: &MethodSpec) -> Result<ParameterVector> {
            Ok(params.clone())
        }
    }

    #[test]
    fn custom_rules_can_be_registered() {
        let mut r = StrategyRegistry::with_builtins();
        r.register_local(Arc::new(Frozen));
        let method = MethodSpec {
            local_rule: "frozen".into(),
            ..MethodSpec::fedavg()
        };
        assert_eq!(r.resolve(&method).unwrap().local.name(), "frozen");
    }
}
