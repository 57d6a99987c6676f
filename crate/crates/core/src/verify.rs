//! Self-checks run by `fedism verify`: gradient checks, sharpness laws,
//! weight-simplex laws and the minimax equivalence on random instances.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};

use crate::data::Sample;
use crate::error::Result;
use crate::federation::{
    check_simplex, fedavg_weights, loss_weights, sharpness_weights, smooth_weights, AggregationWeights,
};
use crate::minimax::verify_minimax_equivalence;
use crate::nn::{
    batch_loss, batch_loss_and_grad, compare_gradients, finite_diff_grad, init_params, Activation, ClassPriors,
    GradientVector, MlpArchitecture, MlpObjective, Objective, ParameterVector,
};
use crate::rng::SimRng;
use crate::sharpness::sharpness;
use crate::sharpness::toys::{Linear, Quadratic};

/// Source of analytic loss gradients under test.
pub trait GradientSource: Sync {
    fn loss_and_grad(
        &self,
        arch: &MlpArchitecture,
        params: &ParameterVector,
        batch: &[&Sample],
        priors: &ClassPriors,
        tau: f64,
    ) -> Result<(f64, GradientVector)>;
}

/// The library's backpropagation.
pub struct Backprop;

impl GradientSource for Backprop {
    fn loss_and_grad(
        &self,
        arch: &MlpArchitecture,
        params: &ParameterVector,
        batch: &[&Sample],
        priors: &ClassPriors,
        tau: f64,
    ) -> Result<(f64, GradientVector)> {
        batch_loss_and_grad(arch, params, batch, priors, tau)
    }
}

/// An MLP objective whose loss is exact but whose gradient comes from the
/// source under test.
struct CheckedObjective<'a> {
    inner: MlpObjective<'a>,
    source: &'a dyn GradientSource,
}

impl Objective for CheckedObjective<'_> {
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn loss(&self, params: &ParameterVector) -> Result<f64> {
        batch_loss(
            self.inner.arch,
            params,
            &self.inner.samples,
            self.inner.priors,
            self.inner.tau,
        )
    }

    fn loss_and_grad(&self, params: &ParameterVector) -> Result<(f64, GradientVector)> {
        self.source.loss_and_grad(
            self.inner.arch,
            params,
            &self.inner.samples,
            self.inner.priors,
            self.inner.tau,
        )
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub tolerance: String,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {} [tolerance: {}] {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.tolerance,
                c.detail
            );
        }
        let _ = writeln!(
            out,
            "{} of {} checks passed",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        );
        out
    }
}

/// A random classification instance: widths, params, batch and priors.
pub struct RandomInstance {
    pub arch: MlpArchitecture,
    pub params: ParameterVector,
    pub batch: Vec<Sample>,
    pub priors: ClassPriors,
}

/// `d <= 5`, `C <= 4`, one hidden layer `<= 8`, batch `<= 8`.
pub fn random_instance(seed: u64, activation: Option<Activation>) -> RandomInstance {
    let mut rng = SimRng::seed_from_u64(seed);
    let d = rng.random_range(1..=5);
    let c = rng.random_range(2..=4);
    let h = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let activation = activation.unwrap_or(if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    });
    let arch = MlpArchitecture::new(vec![d, h, c], activation).expect("valid widths");
    let mut params = init_params(&arch, rng.random());
    for v in params.as_mut_slice() {
        *v += rng.random_range(-0.1..0.1);
    }
    let batch = (0..n)
        .map(|_| Sample {
            x: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: rng.random_range(0..c),
            quality: 0,
        })
        .collect();
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let priors = ClassPriors::new(raw.into_iter().map(|v| v / total).collect()).expect("positive priors");
    RandomInstance {
        arch,
        params,
        batch,
        priors,
    }
}

pub fn gradient_check(source: &dyn GradientSource, instances: usize, seed: u64) -> CheckResult {
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut error = None;
    for i in 0..instances {
        let inst = random_instance(seed.wrapping_add(i as u64), None);
        let refs: Vec<&Sample> = inst.batch.iter().collect();
        let objective = CheckedObjective {
            inner: MlpObjective::new(&inst.arch, refs, &inst.priors, 1.0),
            source,
        };
        let analytic = objective.loss_and_grad(&inst.params);
        let numeric = finite_diff_grad(&objective, &inst.params, 1e-5);
        match (analytic, numeric) {
            (Ok((_, g)), Ok(fd)) => {
                let d = compare_gradients(g.as_slice(), fd.as_slice(), 1e-8);
                worst_rel = worst_rel.max(d.max_relative);
                worst_abs = worst_abs.max(d.max_absolute_small);
            }
            (Err(e), _) | (_, Err(e)) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    CheckResult {
        name: "gradient_check",
        passed: error.is_none() && worst_rel < 1e-4 && worst_abs < 1e-7,
        tolerance: "max relative error < 1e-4 (|g| >= 1e-8), absolute < 1e-7 otherwise; h = 1e-5".into(),
        detail: error.unwrap_or_else(|| {
            format!("{instances} instances, worst relative {worst_rel:.3e}, worst absolute {worst_abs:.3e}")
        }),
    }
}

pub fn sharpness_first_order(source: &dyn GradientSource, instances: usize, seed: u64) -> CheckResult {
    let mut worst_ratio_dev: f64 = 0.0;
    let mut worst_shrink = f64::INFINITY;
    let mut error = None;
    for i in 0..instances {
        let inst = random_instance(seed.wrapping_add(i as u64), Some(Activation::Tanh));
        let refs: Vec<&Sample> = inst.batch.iter().collect();
        let objective = CheckedObjective {
            inner: MlpObjective::new(&inst.arch, refs, &inst.priors, 1.0),
            source,
        };
        let run = || -> Result<(f64, f64)> {
            // reference gradient norm from the exact backprop
            let (_, g) = batch_loss_and_grad(&inst.arch, &inst.params, &objective.inner.samples, &inst.priors, 1.0)?;
            let gn = g.norm();
            let s4 = sharpness(&objective, &inst.params, 1e-4, inst.batch.len())?.value;
            let s3 = sharpness(&objective, &inst.params, 1e-3, inst.batch.len())?.value;
            let ratio = s4 / (1e-4 * gn);
            let shrink = (s3 - 1e-3 * gn).abs() / (s4 - 1e-4 * gn).abs().max(f64::MIN_POSITIVE);
            Ok((ratio, shrink))
        };
        match run() {
            Ok((ratio, shrink)) => {
                worst_ratio_dev = worst_ratio_dev.max((ratio - 1.0).abs());
                worst_shrink = worst_shrink.min(shrink);
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    CheckResult {
        name: "sharpness_first_order",
        passed: error.is_none() && worst_ratio_dev <= 0.01 && worst_shrink >= 5.0,
        tolerance: "S/(rho |g|) in [0.99, 1.01] at rho = 1e-4; |S - rho |g|| shrinks >= 5x from rho = 1e-3".into(),
        detail: error.unwrap_or_else(|| {
            format!(
                "{instances} instances, worst |ratio - 1| {worst_ratio_dev:.3e}, smallest shrink {worst_shrink:.1}x"
            )
        }),
    }
}

pub fn sharpness_closed_form() -> CheckResult {
    let quad = sharpness(
        &Quadratic { dim: 1, curvature: 1.0 },
        &ParameterVector::new(vec![1.0]),
        0.1,
        1,
    );
    let lin = sharpness(&Linear { slope: vec![-2.0] }, &ParameterVector::new(vec![0.0]), 0.25, 1);
    let (passed, detail) = match (quad, lin) {
        (Ok(q), Ok(l)) => (
            (q.value - 0.105).abs() <= 1e-12 && l.value == 0.25 * 2.0,
            format!("quadratic S = {}, linear S = {}", q.value, l.value),
        ),
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    };
    CheckResult {
        name: "sharpness_closed_form",
        passed,
        tolerance: "quadratic 0.105 +- 1e-12; linear rho |a| exact".into(),
        detail,
    }
}

pub fn weight_laws(instances: usize, seed: u64) -> CheckResult {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut problems = Vec::new();
    let mut check = |label: &str, w: Result<AggregationWeights>| match w {
        Ok(w) => {
            if let Err(e) = check_simplex(w.as_slice()) {
                problems.push(format!("{label}: {e}"));
            }
        }
        Err(e) => problems.push(format!("{label}: {e}")),
    };
    for _ in 0..instances {
        let k = rng.random_range(1..=20);
        let q = rng.random_range(0.1..10.0);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..500)).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let prev = sharpness_weights(&(0..k).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), 1.0);
        check("size", fedavg_weights(&sizes));
        check("sharpness", sharpness_weights(&s, q));
        check("loss", loss_weights(&s, q));
        if let (Ok(raw), Ok(prev)) = (sharpness_weights(&s, q), prev) {
            check(
                "smoothed",
                smooth_weights(&raw, Some(&prev), rng.random_range(0.01..=1.0), 2),
            );
        }
    }
    let close = |w: &[f64], e: &[f64]| w.len() == e.len() && w.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-12);
    let examples = [
        sharpness_weights(&[1.0, 2.0], 2.0).is_ok_and(|w| close(w.as_slice(), &[0.2, 0.8])),
        sharpness_weights(&[1.0, 2.0, 3.0], 50.0).is_ok_and(|w| w.as_slice()[2] > 0.999),
        AggregationWeights::new(vec![0.6, 0.4])
            .and_then(|raw| smooth_weights(&raw, Some(&AggregationWeights::new(vec![0.2, 0.8])?), 0.5, 2))
            .is_ok_and(|w| close(w.as_slice(), &[0.4, 0.6])),
        AggregationWeights::new(vec![0.6, 0.4])
            .and_then(|raw| smooth_weights(&raw, None, 0.5, 1))
            .is_ok_and(|w| w.as_slice() == [0.6, 0.4]),
    ];
    if examples.iter().any(|ok| !ok) {
        problems.push(format!("worked examples {examples:?}"));
    }
    CheckResult {
        name: "weight_laws",
        passed: problems.is_empty(),
        tolerance: "simplex within 1e-12; worked examples within 1e-12".into(),
        detail: if problems.is_empty() {
            format!("{instances} random instances and 4 worked examples")
        } else {
            problems.join("; ")
        },
    }
}

/// A random risk table where clients in the same quality group share a row.
pub fn random_risk_instance(rng: &mut SimRng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = rng.random_range(2..=4);
    let m = rng.random_range(1..=5);
    let mut attributes: Vec<usize> = (0..k).map(|_| rng.random_range(0..2)).collect();
    // both groups must be present
    attributes[0] = 0;
    attributes[1] = 1;
    let group_rows: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect())
        .collect();
    let table = attributes.iter().map(|&a| group_rows[a].clone()).collect();
    (table, attributes)
}

pub fn minimax_equivalence(instances: usize, seed: u64) -> CheckResult {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for i in 0..instances {
        let (table, attributes) = random_risk_instance(&mut rng);
        match verify_minimax_equivalence(&table, &attributes, 0.01) {
            Ok(r) => {
                worst_gap = worst_gap.max((r.client_value - r.group_value).abs());
                if !(r.holds() && (r.client_value - r.group_value).abs() <= 1e-2) {
                    failures.push(i);
                }
            }
            Err(_) => failures.push(i),
        }
    }
    CheckResult {
        name: "minimax_equivalence",
        passed: failures.is_empty(),
        tolerance: "grid 0.01; minimax values within 1e-2; argmin columns equal; mu* attains the group max".into(),
        detail: if failures.is_empty() {
            format!("{instances} instances, worst value gap {worst_gap:.3e}")
        } else {
            format!("failing instances {failures:?}")
        },
    }
}

pub fn run_all(source: &dyn GradientSource) -> VerifyReport {
    VerifyReport {
        checks: vec![
            gradient_check(source, 100, 1000),
            sharpness_first_order(source, 50, 2000),
            sharpness_closed_form(),
            weight_laws(200, 3000),
            minimax_equivalence(200, 4000),
        ],
    }
}
