//! Functionals of the empirical measure and Monte Carlo estimators of the
//! scaled Laplace functional `-(1/N) log E exp(-N F(μ^N))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlPolicy;
use crate::error::{Error, Result};
use crate::measures::{ControlRecord, PathMeasure};
use crate::model::{CoefficientModel, SimConfig};
use crate::rng::{derive_seed, domain};
use crate::sim::{simulate_controlled, simulate_uncontrolled, PathEnsemble, SimOutput};

/// Label attached to estimates whose functional is not bounded.
pub const UNBOUNDED_LABEL: &str = "unbounded functional: outside the bounded-continuous hypotheses";

/// Pointwise test functions on `ℝ^d` used by time averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointFunction {
    /// `c · x`
    Linear { c: Vec<f64> },
    /// `|x|²`
    NormSquared,
    /// `tanh(c · x)`
    Tanh { c: Vec<f64> },
    /// `cos(c · x)`
    Cos { c: Vec<f64> },
}

fn dot(c: &[f64], x: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl PointFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            PointFunction::Linear { c } => dot(c, x),
            PointFunction::NormSquared => x.iter().map(|v| v * v).sum(),
            PointFunction::Tanh { c } => dot(c, x).tanh(),
            PointFunction::Cos { c } => dot(c, x).cos(),
        }
    }

    fn bounded(&self) -> bool {
        matches!(self, PointFunction::Tanh { .. } | PointFunction::Cos { .. })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            PointFunction::Linear { c } | PointFunction::Tanh { c } | PointFunction::Cos { c } if c.len() != d => {
                Err(Error::dim(format!("coefficient vector has length {} but state dimension is {d}", c.len())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Combine {
    WeightedSum { weights: Vec<f64> },
    Product,
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalKind {
    Zero,
    Constant { value: f64 },
    /// `∫ c · x(T) m(dx)`
    TerminalLinear { c: Vec<f64> },
    /// `∫ |x(T)|^power m(dx)`
    TerminalMoment { power: f64 },
    /// `(1/T) ∫₀ᵀ ∫ f(x(t)) m(dx) dt`, left-endpoint rule on the grid.
    TimeAverage { f: PointFunction },
    /// A combination of other functionals evaluated on the same measure.
    Composite { terms: Vec<Functional>, combine: Combine },
}

/// `F : P(path space) → ℝ`, saturated at `±clip` when a clip is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    #[serde(flatten)]
    pub kind: FunctionalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl Functional {
    pub fn new(kind: FunctionalKind) -> Self {
        Self { kind, clip: None }
    }

    pub fn zero() -> Self {
        Self::new(FunctionalKind::Zero)
    }

    pub fn constant(value: f64) -> Self {
        Self::new(FunctionalKind::Constant { value })
    }

    pub fn terminal_linear(c: Vec<f64>) -> Self {
        Self::new(FunctionalKind::TerminalLinear { c })
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    /// `sup |F|` if finite.
    pub fn bound(&self) -> Option<f64> {
        let inner = match &self.kind {
            FunctionalKind::Zero => Some(0.0),
            FunctionalKind::Constant { value } => Some(value.abs()),
            FunctionalKind::TimeAverage { f } if f.bounded() => Some(1.0),
            FunctionalKind::Composite { terms, combine } => {
                let bounds: Option<Vec<f64>> = terms.iter().map(|t| t.bound()).collect();
                bounds.map(|b| match combine {
                    Combine::WeightedSum { weights } => weights.iter().zip(&b).map(|(w, v)| w.abs() * v).sum(),
                    Combine::Product => b.iter().product(),
                    Combine::Max | Combine::Min => b.iter().cloned().fold(0.0, f64::max),
                })
            }
            _ => None,
        };
        match (inner, self.clip) {
            (Some(a), Some(c)) => Some(a.min(c.abs())),
            (a, c) => a.or(c.map(f64::abs)),
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.bound().is_some()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(c) = self.clip {
            if !(c >= 0.0) {
                return Err(Error::config("clip must be nonnegative"));
            }
        }
        match &self.kind {
            FunctionalKind::TerminalLinear { c } if c.len() != dim => Err(Error::dim(format!(
                "terminal_linear has {} coefficients but state dimension is {dim}",
                c.len()
            ))),
            FunctionalKind::TimeAverage { f } => f.check_dim(dim),
            FunctionalKind::Composite { terms, combine } => {
                if terms.is_empty() {
                    return Err(Error::config("composite functional needs at least one term"));
                }
                if let Combine::WeightedSum { weights } = combine {
                    if weights.len() != terms.len() {
                        return Err(Error::config("composite weights and terms differ in length"));
                    }
                }
                terms.iter().try_for_each(|t| t.validate(dim))
            }
            _ => Ok(()),
        }
    }

    fn raw(&self, m: &PathMeasure<'_>) -> f64 {
        let ens = m.ensemble();
        let (d, steps) = (ens.dim(), ens.steps());
        match &self.kind {
            FunctionalKind::Zero => 0.0,
            FunctionalKind::Constant { value } => *value,
            FunctionalKind::TerminalLinear { c } => m.iter().map(|(p, w)| w * dot(c, &p[steps * d..])).sum(),
            FunctionalKind::TerminalMoment { power } => m
                .iter()
                .map(|(p, w)| {
                    let r: f64 = p[steps * d..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    w * r.powf(*power)
                })
                .sum(),
            FunctionalKind::TimeAverage { f } => {
                m.iter()
                    .map(|(p, w)| w * (0..steps).map(|k| f.eval(&p[k * d..(k + 1) * d])).sum::<f64>())
                    .sum::<f64>()
                    / steps as f64
            }
            FunctionalKind::Composite { terms, combine } => {
                let vals: Vec<f64> = terms.iter().map(|t| t.eval(m)).collect();
                match combine {
                    Combine::WeightedSum { weights } => weights.iter().zip(&vals).map(|(w, v)| w * v).sum(),
                    Combine::Product => vals.iter().product(),
                    Combine::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    Combine::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                }
            }
        }
    }

    fn eval(&self, m: &PathMeasure<'_>) -> f64 {
        let v = self.raw(m);
        match self.clip {
            Some(c) => v.clamp(-c, c),
            None => v,
        }
    }
}

/// `F(m)`; deterministic, saturated at the clip level.
pub fn evaluate_functional(f: &Functional, m: &PathMeasure<'_>) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::config("functional needs a nonempty measure"));
    }
    f.validate(m.ensemble().dim())?;
    Ok(f.eval(m))
}

fn empirical_value(f: &Functional, ens: &PathEnsemble) -> f64 {
    f.eval(&PathMeasure::empirical(ens))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Naive,
    ImportanceSampled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub ci95: [f64; 2],
    pub reps: usize,
    pub method: EstimateMethod,
    /// Replicates dropped because they blew up or produced non-finite values.
    pub excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Estimate {
    fn new(value: f64, std_error: f64, reps: usize, method: EstimateMethod, excluded: usize) -> Self {
        // normalize -0.0
        let value = value + 0.0;
        Self {
            value,
            std_error,
            ci95: [value - 1.96 * std_error, value + 1.96 * std_error],
            reps,
            method,
            excluded,
            label: None,
        }
    }

    fn labeled_for(mut self, f: &Functional) -> Self {
        if !f.is_bounded() {
            self.label = Some(UNBOUNDED_LABEL.to_string());
        }
        self
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed of replicate `r`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, domain::REPLICATE, r as u64)
}

fn replicate_cfg(cfg: &SimConfig, r: usize) -> SimConfig {
    let mut c = cfg.clone();
    c.seed = replicate_seed(cfg.seed, r);
    c
}

/// Runs `job` for replicates `0..reps` in parallel and returns the results
/// in replicate order; the first failing replicate's error wins.
pub(crate) fn run_replicates<T: Send>(reps: usize, job: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let out: Vec<Result<T>> = (0..reps).into_par_iter().map(job).collect();
    out.into_iter().collect()
}

/// Log-mean-exp of the finite entries with the delta-method standard error
/// of the log. Returns `(log mean, se of log, finite count)`.
fn log_mean_exp(ys: &[f64]) -> Option<(f64, f64, usize)> {
    let finite: Vec<f64> = ys.iter().copied().filter(|y| y.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let m = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = finite.iter().map(|y| (y - m).exp()).collect();
    let (mean_w, se_w) = mean_and_se(&w);
    Some((m + mean_w.ln(), se_w / mean_w, finite.len()))
}

fn laplace_from_exponents(ys: &[f64], n: usize, method: EstimateMethod) -> Result<Estimate> {
    let (lme, se, finite) =
        log_mean_exp(ys).ok_or_else(|| Error::NoFiniteReplicate(format!("all {} replicates were non-finite", ys.len())))?;
    let nf = n as f64;
    Ok(Estimate::new(-lme / nf, se / nf, ys.len(), method, ys.len() - finite))
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < 2 {
        return Err(Error::config("at least two replicates are required"));
    }
    Ok(())
}

/// Exponents `-N F(μ^N)` of the naive estimator, one per replicate.
fn naive_exponents(cfg: &SimConfig, model: &CoefficientModel, f: &Functional, reps: usize) -> Result<Vec<f64>> {
    let n = cfg.particles as f64;
    run_replicates(reps, |r| {
        let out = simulate_uncontrolled(&replicate_cfg(cfg, r), model)?;
        if out.blown_up() {
            return Ok(f64::NAN);
        }
        Ok(-n * empirical_value(f, &out.states))
    })
}

/// Naive Monte Carlo estimate of `-(1/N) log E exp(-N F(μ^N))`.
pub fn estimate_laplace(cfg: &SimConfig, model: &CoefficientModel, f: &Functional, reps: usize) -> Result<Estimate> {
    check_reps(reps)?;
    cfg.validate()?;
    f.validate(cfg.dim)?;
    let ys = naive_exponents(cfg, model, f, reps)?;
    Ok(laplace_from_exponents(&ys, cfg.particles, EstimateMethod::Naive)?.labeled_for(f))
}

/// `(1/N) Σ_i Σ_k |u_i(t_k)|² Δt`, summed in particle then step order.
pub fn control_energy(rec: &ControlRecord) -> f64 {
    let d1 = rec.noise_dim();
    let mut total = 0.0;
    for i in 0..rec.particles() {
        let mut particle = 0.0;
        for k in 0..rec.steps() {
            let u = rec.value(i, k);
            let mut sq = 0.0;
            for l in 0..d1 {
                sq += u[l] * u[l];
            }
            particle += sq * rec.dt();
        }
        total += particle;
    }
    total / rec.particles() as f64
}

/// Running-cost term `½ (1/N) Σ_i ∫ |u_i|² dt` of one controlled run.
pub fn running_cost(out: &SimOutput) -> Result<f64> {
    let rec = out.controls.as_ref().ok_or(Error::MissingControls)?;
    Ok(0.5 * control_energy(rec))
}

/// Per-replicate pieces of the control cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSamples {
    pub running: Vec<f64>,
    pub terminal: Vec<f64>,
    pub excluded: usize,
}

impl CostSamples {
    pub fn totals(&self) -> Vec<f64> {
        self.running.iter().zip(&self.terminal).map(|(a, b)| a + b).collect()
    }
}

pub fn cost_samples(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: &ControlPolicy,
    f: &Functional,
    reps: usize,
) -> Result<CostSamples> {
    let per: Vec<Option<(f64, f64)>> = run_replicates(reps, |r| {
        let out = simulate_controlled(&replicate_cfg(cfg, r), model, policy, None)?;
        if out.blown_up() {
            return Ok(None);
        }
        let pair = (running_cost(&out)?, empirical_value(f, &out.states));
        Ok((pair.0.is_finite() && pair.1.is_finite()).then_some(pair))
    })?;
    let mut s = CostSamples {
        running: Vec::with_capacity(reps),
        terminal: Vec::with_capacity(reps),
        excluded: 0,
    };
    for p in per {
        match p {
            Some((a, b)) => {
                s.running.push(a);
                s.terminal.push(b);
            }
            None => s.excluded += 1,
        }
    }
    Ok(s)
}

/// Monte Carlo estimate of `½ E[(1/N) Σ ∫ |u_i|² dt] + E[F(μ̄^N)]`.
pub fn estimate_cost(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: &ControlPolicy,
    f: &Functional,
    reps: usize,
) -> Result<Estimate> {
    check_reps(reps)?;
    cfg.validate()?;
    f.validate(cfg.dim)?;
    let s = cost_samples(cfg, model, policy, f, reps)?;
    if s.running.is_empty() {
        return Err(Error::NoFiniteReplicate(format!("all {reps} controlled replicates blew up")));
    }
    let (mean, se) = mean_and_se(&s.totals());
    Ok(Estimate::new(mean, se, reps, EstimateMethod::Naive, s.excluded).labeled_for(f))
}

/// Log of the tilted integrand for one controlled run:
/// `-N F - Σ_i Σ_k u_i(t_k)·ΔW_i(t_k) - ½ Σ_i Σ_k |u_i(t_k)|² Δt`.
pub fn girsanov_exponent(out: &SimOutput, f: &Functional) -> Result<f64> {
    let rec = out.controls.as_ref().ok_or(Error::MissingControls)?;
    let n = out.states.particles();
    let (mut stoch, mut quad) = (0.0, 0.0);
    for i in 0..n {
        for k in 0..rec.steps() {
            let u = rec.value(i, k);
            let dw = out.noise.increment(i, k);
            for l in 0..u.len() {
                stoch += u[l] * dw[l];
                quad += u[l] * u[l] * rec.dt();
            }
        }
    }
    Ok(-(n as f64) * empirical_value(f, &out.states) - stoch - 0.5 * quad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub estimate: Estimate,
    /// Naive estimator on the same replicate seeds.
    pub naive: Estimate,
    /// Sample variance of the tilted integrand (common shift removed).
    pub weight_variance: f64,
    /// Sample variance of the naive integrand with the same shift.
    pub naive_variance: f64,
    /// `weight_variance / naive_variance`.
    pub variance_ratio: f64,
}

fn shifted_variance(ys: &[f64], shift: f64) -> f64 {
    let w: Vec<f64> = ys.iter().filter(|y| y.is_finite()).map(|y| (y - shift).exp()).collect();
    if w.len() < 2 {
        return 0.0;
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64
}

/// Girsanov-tilted estimator of the Laplace functional under `policy`,
/// reported next to the naive estimator on identical seeds.
pub fn importance_sample_laplace(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: &ControlPolicy,
    f: &Functional,
    reps: usize,
) -> Result<ImportanceReport> {
    check_reps(reps)?;
    cfg.validate()?;
    f.validate(cfg.dim)?;
    let tilted = run_replicates(reps, |r| {
        let out = simulate_controlled(&replicate_cfg(cfg, r), model, policy, None)?;
        if out.blown_up() {
            return Ok(f64::NAN);
        }
        girsanov_exponent(&out, f)
    })?;
    let naive = naive_exponents(cfg, model, f, reps)?;
    let estimate = laplace_from_exponents(&tilted, cfg.particles, EstimateMethod::ImportanceSampled)?.labeled_for(f);
    let naive_est = laplace_from_exponents(&naive, cfg.particles, EstimateMethod::Naive)?.labeled_for(f);
    let shift = tilted
        .iter()
        .chain(&naive)
        .copied()
        .filter(|y| y.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let weight_variance = shifted_variance(&tilted, shift);
    let naive_variance = shifted_variance(&naive, shift);
    Ok(ImportanceReport {
        estimate,
        naive: naive_est,
        weight_variance,
        naive_variance,
        variance_ratio: weight_variance / naive_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitialCondition;

    fn ensemble_with_terminals(ends: &[f64]) -> PathEnsemble {
        let mut v = Vec::new();
        for &e in ends {
            v.extend_from_slice(&[0.0, e]);
        }
        PathEnsemble::from_values(ends.len(), 1, 1, 1.0, v).unwrap()
    }

    #[test]
    fn functional_examples() {
        let one = ensemble_with_terminals(&[2.0]);
        let two = ensemble_with_terminals(&[0.0, 4.0]);
        let m1 = PathMeasure::empirical(&one);
        let m2 = PathMeasure::empirical(&two);
        assert_eq!(evaluate_functional(&Functional::zero(), &m1).unwrap(), 0.0);
        assert_eq!(evaluate_functional(&Functional::terminal_linear(vec![1.0]), &m1).unwrap(), 2.0);
        assert_eq!(evaluate_functional(&Functional::terminal_linear(vec![1.0]), &m2).unwrap(), 2.0);
        let clipped = Functional::terminal_linear(vec![1.0]).with_clip(1.5);
        assert_eq!(evaluate_functional(&clipped, &m2).unwrap(), 1.5);
        let moment = Functional::new(FunctionalKind::TerminalMoment { power: 2.0 });
        assert_eq!(evaluate_functional(&moment, &m2).unwrap(), 8.0);
        let avg = Functional::new(FunctionalKind::TimeAverage {
            f: PointFunction::NormSquared,
        });
        // left endpoint: only x(0) = 0 enters
        assert_eq!(evaluate_functional(&avg, &m2).unwrap(), 0.0);
        let comp = Functional::new(FunctionalKind::Composite {
            terms: vec![Functional::constant(3.0), Functional::terminal_linear(vec![1.0])],
            combine: Combine::Product,
        });
        assert_eq!(evaluate_functional(&comp, &m2).unwrap(), 6.0);
        assert!(evaluate_functional(&Functional::terminal_linear(vec![1.0, 2.0]), &m1).is_err());
    }

    #[test]
    fn clip_is_monotone() {
        let ens = ensemble_with_terminals(&[-3.0, 7.0, 1.0]);
        let m = PathMeasure::empirical(&ens);
        let mut prev = 0.0;
        for clip in [0.0, 0.5, 1.0, 2.0, 5.0, 100.0] {
            let f = Functional::new(FunctionalKind::TerminalMoment { power: 1.5 }).with_clip(clip);
            let v = evaluate_functional(&f, &m).unwrap().abs();
            assert!(v >= prev && v <= clip);
            prev = v;
        }
    }

    #[test]
    fn functional_serde_round_trip() {
        let f = Functional::terminal_linear(vec![1.0]).with_clip(10.0);
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"kind":"terminal_linear","c":[1.0],"clip":10.0}"#);
        assert_eq!(serde_json::from_str::<Functional>(&s).unwrap(), f);
        let t: Functional = toml::from_str("kind = \"time_average\"\nf = { fn = \"tanh\", c = [2.0] }\n").unwrap();
        assert!(t.is_bounded());
        assert!(!Functional::terminal_linear(vec![1.0]).is_bounded());
    }

    fn schilder(n: usize, steps: usize, seed: u64) -> (SimConfig, CoefficientModel) {
        (SimConfig::scalar(n, 1.0, steps, 0.0, seed), CoefficientModel::zero_drift(1, 1, 1.0))
    }

    #[test]
    fn laplace_trivial_functionals() {
        let (cfg, model) = schilder(5, 4, 1);
        let e = estimate_laplace(&cfg, &model, &Functional::zero(), 8).unwrap();
        assert_eq!(e.value.to_bits(), 0f64.to_bits());
        assert_eq!(e.std_error, 0.0);
        let k = estimate_laplace(&cfg, &model, &Functional::constant(0.7), 8).unwrap();
        assert!((k.value - 0.7).abs() < 1e-14);
        assert!(k.label.is_none());
        assert!(estimate_laplace(&cfg, &model, &Functional::zero(), 1).is_err());
    }

    #[test]
    fn laplace_gaussian_oracle_and_jensen() {
        let (cfg, model) = schilder(2, 4, 3);
        let f = Functional::terminal_linear(vec![1.0]);
        let e = estimate_laplace(&cfg, &model, &f, 200_000).unwrap();
        assert!((e.value + 0.5).abs() < 4.0 * e.std_error + 1e-3, "{e:?}");
        assert_eq!(e.label.as_deref(), Some(UNBOUNDED_LABEL));
        let plain = estimate_cost(&cfg, &model, &ControlPolicy::zero(1), &f, 20_000).unwrap();
        assert!(e.value <= plain.value + 3.0 * plain.std_error);
    }

    #[test]
    fn cost_examples() {
        let (cfg, model) = schilder(4, 10, 5);
        let c = 0.8;
        let e = estimate_cost(&cfg, &model, &ControlPolicy::constant(vec![c]), &Functional::zero(), 16).unwrap();
        assert!((e.value - 0.5 * c * c).abs() < 1e-12);
        assert!(e.std_error < 1e-12);
        let f = Functional::terminal_linear(vec![1.0]);
        let s = estimate_cost(&cfg, &model, &ControlPolicy::constant(vec![-1.0]), &f, 4000).unwrap();
        assert!((s.value + 0.5).abs() <= 3.0 * s.std_error, "{s:?}");
    }

    #[test]
    fn zero_policy_cost_is_plain_mean() {
        let (cfg, model) = schilder(3, 6, 8);
        let f = Functional::terminal_linear(vec![1.0]);
        let e = estimate_cost(&cfg, &model, &ControlPolicy::zero(1), &f, 50).unwrap();
        let plain: Vec<f64> = (0..50)
            .map(|r| empirical_value(&f, &simulate_uncontrolled(&replicate_cfg(&cfg, r), &model).unwrap().states))
            .collect();
        assert_eq!(e.value, mean_and_se(&plain).0 + 0.0);
    }

    #[test]
    fn importance_sampling_zero_policy_is_naive() {
        let (cfg, model) = schilder(3, 6, 2);
        let f = Functional::terminal_linear(vec![1.0]);
        let r = importance_sample_laplace(&cfg, &model, &ControlPolicy::zero(1), &f, 500).unwrap();
        assert_eq!(r.estimate.value, r.naive.value);
        assert_eq!(r.variance_ratio, 1.0);
        let naive = estimate_laplace(&cfg, &model, &f, 500).unwrap();
        assert_eq!(naive.value, r.naive.value);
    }

    #[test]
    fn importance_sampling_exact_tilt() {
        let (cfg, model) = schilder(5, 8, 4);
        let f = Functional::terminal_linear(vec![1.0]);
        let r = importance_sample_laplace(&cfg, &model, &ControlPolicy::constant(vec![-1.0]), &f, 1000).unwrap();
        assert!((r.estimate.value + 0.5).abs() < 1e-9);
        assert!(r.variance_ratio < 1e-12);
    }

    #[test]
    fn importance_sampling_agrees_on_interacting_model() {
        let cfg = SimConfig::new(4, 1, 1, 1.0, 16, InitialCondition::Constant { value: vec![0.5] }, 6);
        let model = CoefficientModel::mean_field_ou(1, 1.0, 0.5, 1.0);
        let f = Functional::terminal_linear(vec![1.0]).with_clip(3.0);
        let policy = ControlPolicy::constant(vec![-0.4]);
        let r = importance_sample_laplace(&cfg, &model, &policy, &f, 40_000).unwrap();
        let joint = (r.estimate.std_error.powi(2) + r.naive.std_error.powi(2)).sqrt();
        assert!((r.estimate.value - r.naive.value).abs() <= 3.0 * joint, "{r:?}");
        assert!(r.variance_ratio < 1.0);
    }
}
