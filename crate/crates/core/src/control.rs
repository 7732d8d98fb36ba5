//! Control policies, derivative-free minimization of the control cost,
//! rate-function evaluation by marginal matching, and gradient-field
//! controls.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::laplace::{cost_samples, control_energy, estimate_cost, mean_and_se, replicate_seed, run_replicates, Estimate, Functional};
use crate::measures::{wasserstein1, ControlRecord, DiscreteMeasure};
use crate::model::{CoefficientModel, MeasureFeatures, SimConfig};
use crate::rng::{derive_seed, domain, CounterRng};
use crate::sim::{simulate_with, MeasureSource, PathEnsemble, SimOutput};

/// Everything a policy may look at when producing `u_i(t_k)`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyContext<'a> {
    pub particle: usize,
    pub step: usize,
    pub time: f64,
    pub state: &'a [f64],
    pub features: &'a MeasureFeatures,
}

pub type FieldValueFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
pub type FieldGradientFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// User-supplied scalar field with its analytic gradient.
#[derive(Clone)]
pub struct CustomField {
    pub value: Arc<FieldValueFn>,
    pub gradient: Arc<FieldGradientFn>,
}

impl fmt::Debug for CustomField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomField")
    }
}

/// Scalar field `v(t, x)` whose gradient drives a Markov control.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Zero,
    /// `v = c · x`
    Linear { c: Vec<f64> },
    /// `v = scale · |x|² / 2`
    Quadratic { scale: f64 },
    #[serde(skip)]
    Custom(CustomField),
}

impl ScalarField {
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarField::Zero => 0.0,
            ScalarField::Linear { c } => c.iter().zip(x).map(|(a, b)| a * b).sum(),
            ScalarField::Quadratic { scale } => 0.5 * scale * x.iter().map(|v| v * v).sum::<f64>(),
            ScalarField::Custom(f) => (f.value)(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ScalarField::Zero => out.fill(0.0),
            ScalarField::Linear { c } => out.copy_from_slice(c),
            ScalarField::Quadratic { scale } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = scale * v;
                }
            }
            ScalarField::Custom(f) => (f.gradient)(t, x, out),
        }
    }
}

/// A control law `u_i(t) = policy(t, X_i(t), μ^N(t))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlPolicy {
    /// Piecewise constant in time: `values[c * d1 + l]` on cell `c`.
    OpenLoop { horizon: f64, cells: usize, values: Vec<f64> },
    /// `u = A_c x + b_c` on cell `c`; `matrices` holds the `d1 × d` blocks
    /// row-major, `offsets` the `d1` vectors.
    FeedbackAffine {
        horizon: f64,
        cells: usize,
        matrices: Vec<f64>,
        offsets: Vec<f64>,
    },
    /// `u = ∇v(t, x)`; needs the identity diffusion.
    GradientField { field: ScalarField },
    /// Replays per-particle realized values.
    #[serde(skip)]
    Recorded(ControlRecord),
}

fn cell_of(time: f64, horizon: f64, cells: usize) -> usize {
    let c = ((time / horizon) * cells as f64 + 1e-9).floor();
    if c <= 0.0 {
        0
    } else {
        (c as usize).min(cells - 1)
    }
}

impl ControlPolicy {
    pub fn zero(noise_dim: usize) -> Self {
        Self::constant(vec![0.0; noise_dim])
    }

    /// `u ≡ value`.
    pub fn constant(value: Vec<f64>) -> Self {
        ControlPolicy::OpenLoop {
            horizon: 1.0,
            cells: 1,
            values: value,
        }
    }

    /// Checks that the policy fits the model and grid it will drive.
    pub fn bind(&self, model: &CoefficientModel, cfg: &SimConfig) -> Result<()> {
        let (d, d1) = (cfg.dim, cfg.noise_dim);
        let horizon_ok = |h: f64, cells: usize| cells == 1 || (h - cfg.horizon).abs() <= 1e-9 * cfg.horizon;
        let fail = |m: String| Err(Error::PolicyBinding(m));
        match self {
            ControlPolicy::OpenLoop { horizon, cells, values } => {
                if *cells == 0 || values.len() != cells * d1 {
                    return fail(format!("open-loop policy needs {} values for {cells} cells", cells * d1));
                }
                if !horizon_ok(*horizon, *cells) {
                    return fail(format!("policy horizon {horizon} differs from run horizon {}", cfg.horizon));
                }
            }
            ControlPolicy::FeedbackAffine {
                horizon,
                cells,
                matrices,
                offsets,
            } => {
                if *cells == 0 || matrices.len() != cells * d1 * d || offsets.len() != cells * d1 {
                    return fail("feedback policy blocks do not match the dimensions".into());
                }
                if !horizon_ok(*horizon, *cells) {
                    return fail(format!("policy horizon {horizon} differs from run horizon {}", cfg.horizon));
                }
            }
            ControlPolicy::GradientField { field } => {
                if !model.diffusion_is_identity() {
                    return fail("gradient-field controls need the identity diffusion matrix".into());
                }
                if let ScalarField::Linear { c } = field {
                    if c.len() != d {
                        return fail("linear field coefficients do not match the state dimension".into());
                    }
                }
            }
            ControlPolicy::Recorded(rec) => {
                if rec.particles() != cfg.particles || rec.steps() != cfg.steps || rec.noise_dim() != d1 {
                    return fail("recorded controls do not match the run's shape".into());
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, ctx: &PolicyContext<'_>, out: &mut [f64]) -> std::result::Result<(), String> {
        let d1 = out.len();
        match self {
            ControlPolicy::OpenLoop { horizon, cells, values } => {
                let c = cell_of(ctx.time, *horizon, *cells);
                out.copy_from_slice(&values[c * d1..(c + 1) * d1]);
            }
            ControlPolicy::FeedbackAffine {
                horizon,
                cells,
                matrices,
                offsets,
            } => {
                let c = cell_of(ctx.time, *horizon, *cells);
                let d = ctx.state.len();
                let a = &matrices[c * d1 * d..(c + 1) * d1 * d];
                for l in 0..d1 {
                    let row = &a[l * d..(l + 1) * d];
                    out[l] = offsets[c * d1 + l] + row.iter().zip(ctx.state).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            ControlPolicy::GradientField { field } => field.gradient(ctx.time, ctx.state, out),
            ControlPolicy::Recorded(rec) => {
                if ctx.particle >= rec.particles() || ctx.step >= rec.steps() {
                    return Err("recorded control has no entry for this particle and step".into());
                }
                out.copy_from_slice(rec.value(ctx.particle, ctx.step));
            }
        }
        Ok(())
    }
}

/// Parametric families searched by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyFamily {
    OpenLoop { cells: usize },
    FeedbackAffine { cells: usize },
}

impl PolicyFamily {
    pub fn param_len(&self, dim: usize, noise_dim: usize) -> usize {
        match *self {
            PolicyFamily::OpenLoop { cells } => cells * noise_dim,
            PolicyFamily::FeedbackAffine { cells } => cells * noise_dim * (dim + 1),
        }
    }

    /// Feedback parameters are laid out as all matrices, then all offsets.
    pub fn instantiate(&self, params: &[f64], horizon: f64, dim: usize, noise_dim: usize) -> Result<ControlPolicy> {
        if params.len() != self.param_len(dim, noise_dim) {
            return Err(Error::config(format!(
                "family needs {} parameters, got {}",
                self.param_len(dim, noise_dim),
                params.len()
            )));
        }
        Ok(match *self {
            PolicyFamily::OpenLoop { cells } => ControlPolicy::OpenLoop {
                horizon,
                cells,
                values: params.to_vec(),
            },
            PolicyFamily::FeedbackAffine { cells } => {
                let split = cells * noise_dim * dim;
                ControlPolicy::FeedbackAffine {
                    horizon,
                    cells,
                    matrices: params[..split].to_vec(),
                    offsets: params[split..].to_vec(),
                }
            }
        })
    }

    fn cells(&self) -> usize {
        match *self {
            PolicyFamily::OpenLoop { cells } | PolicyFamily::FeedbackAffine { cells } => cells,
        }
    }
}

/// Replaces realized controls by their time-cell averages. With `collapse`
/// the particles are averaged too and a single open-loop policy results;
/// otherwise each particle keeps its own cell averages.
pub fn canonicalize_policy(rec: &ControlRecord, cells: usize, collapse: bool) -> Result<ControlPolicy> {
    if cells == 0 {
        return Err(Error::config("cells must be positive"));
    }
    if rec.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::config("control record must be finite"));
    }
    let (n, steps, d1) = (rec.particles(), rec.steps(), rec.noise_dim());
    let cell_of_step = |k: usize| ((k * cells) / steps).min(cells - 1);
    let mut counts = vec![0usize; cells];
    for k in 0..steps {
        counts[cell_of_step(k)] += 1;
    }
    let averages = |i: usize| -> Vec<f64> {
        let mut sums = vec![0.0; cells * d1];
        for k in 0..steps {
            let c = cell_of_step(k);
            for (s, u) in sums[c * d1..(c + 1) * d1].iter_mut().zip(rec.value(i, k)) {
                *s += u;
            }
        }
        for c in 0..cells {
            if counts[c] > 0 {
                for s in &mut sums[c * d1..(c + 1) * d1] {
                    *s /= counts[c] as f64;
                }
            }
        }
        sums
    };
    let horizon = steps as f64 * rec.dt();
    if collapse {
        let mut values = vec![0.0; cells * d1];
        for i in 0..n {
            for (v, a) in values.iter_mut().zip(averages(i)) {
                *v += a;
            }
        }
        for v in &mut values {
            *v /= n as f64;
        }
        return Ok(ControlPolicy::OpenLoop { horizon, cells, values });
    }
    let mut out = ControlRecord::zeros(n, steps, d1, rec.dt());
    let row = out.row_len();
    for i in 0..n {
        let a = averages(i);
        let dst = &mut out.values_mut()[i * row..(i + 1) * row];
        for k in 0..steps {
            let c = cell_of_step(k);
            dst[k * d1..(k + 1) * d1].copy_from_slice(&a[c * d1..(c + 1) * d1]);
        }
    }
    Ok(ControlPolicy::Recorded(out))
}

/// `u = ∇v(t, x)`.
pub fn gradient_field_control(field: ScalarField) -> ControlPolicy {
    ControlPolicy::GradientField { field }
}

/// Tuning of the cross-entropy search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    /// Candidates per generation, the current mean included.
    pub population: usize,
    pub elite_fraction: f64,
    pub init_std: f64,
    /// Weight of the new elite mean in the mean update.
    pub smoothing: f64,
    /// Weight of the new elite spread in the std update.
    pub std_smoothing: f64,
    /// Extra spread added each generation, decaying geometrically; keeps the
    /// search from freezing before the mean has arrived.
    pub exploration: f64,
    pub exploration_decay: f64,
    /// The search stops once every coordinate's spread falls below this.
    pub min_std: f64,
    /// Replicates for the final re-evaluation on fresh seeds.
    pub final_reps: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            population: 20,
            elite_fraction: 0.25,
            init_std: 1.0,
            smoothing: 0.8,
            std_smoothing: 0.5,
            exploration: 0.2,
            exploration_decay: 0.93,
            min_std: 1e-3,
            final_reps: 16384,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best_params: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<f64>,
    pub evals: usize,
    pub converged: bool,
    pub mean: Vec<f64>,
}

/// Minimizes `objective(params, crn_seed)` by an elite-fraction
/// cross-entropy search. All candidates of one generation share `crn_seed`;
/// `None` marks a rejected candidate. Generation 0 starts at `init_mean`,
/// and the current mean is always candidate 0.
pub fn cross_entropy_search<F>(
    init_mean: Vec<f64>,
    init_std: f64,
    budget: usize,
    settings: &SearchSettings,
    seed: u64,
    objective: F,
) -> Result<SearchOutcome>
where
    F: Fn(&[f64], u64) -> Option<f64> + Sync,
{
    if budget < 1 {
        return Err(Error::config("budget must be at least 1"));
    }
    if settings.population < 2 || !(settings.elite_fraction > 0.0 && settings.elite_fraction <= 1.0) {
        return Err(Error::config("population must be at least 2 and elite_fraction in (0, 1]"));
    }
    let p = init_mean.len();
    let mut mean = init_mean;
    let mut std = vec![init_std; p];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::new();
    let mut evals = 0;
    let mut converged = false;
    let mut generation = 0u64;
    while evals < budget {
        let count = settings.population.min(budget - evals);
        let crn = derive_seed(seed, domain::OPTIMIZER, generation);
        let mut rng = CounterRng::new(seed, domain::SAMPLING, generation);
        let mut z = vec![0.0; (count - 1) * p];
        rng.fill_normals(&mut z);
        let mut candidates = vec![mean.clone()];
        for c in 0..count - 1 {
            candidates.push((0..p).map(|j| mean[j] + std[j] * z[c * p + j]).collect());
        }
        let values: Vec<Option<f64>> = candidates
            .par_iter()
            .map(|c| objective(c, crn).filter(|v| v.is_finite()))
            .collect();
        evals += count;
        let extra = settings.exploration * settings.exploration_decay.powi(generation as i32);
        generation += 1;

        let mut ranked: Vec<(usize, f64)> = values.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some(&(i, v)) = ranked.first() {
            if best.as_ref().map_or(true, |(_, b)| v < *b) {
                best = Some((candidates[i].clone(), v));
            }
        }
        if let Some((_, b)) = &best {
            trace.push(*b);
        }
        let n_elite = ((settings.elite_fraction * count as f64).ceil() as usize).max(2).min(ranked.len());
        if n_elite >= 2 {
            let elites = &ranked[..n_elite];
            let (a, b) = (settings.smoothing, settings.std_smoothing);
            for j in 0..p {
                let m = elites.iter().map(|&(i, _)| candidates[i][j]).sum::<f64>() / n_elite as f64;
                let v = elites.iter().map(|&(i, _)| (candidates[i][j] - m).powi(2)).sum::<f64>() / (n_elite - 1) as f64;
                mean[j] = a * m + (1.0 - a) * mean[j];
                std[j] = b * v.sqrt() + (1.0 - b) * std[j] + extra;
            }
        }
        if std.iter().all(|s| *s < settings.min_std) {
            converged = true;
            break;
        }
    }
    let (best_params, best_value) = best.ok_or(Error::NoSuccessfulEvaluation)?;
    Ok(SearchOutcome {
        best_params,
        best_value,
        trace,
        evals,
        converged,
        mean,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationReport {
    pub family: PolicyFamily,
    pub best_params: Vec<f64>,
    /// Cost of the best policy re-estimated on fresh seeds.
    pub best_cost: Estimate,
    /// Best-so-far search objective after each generation.
    pub trace: Vec<f64>,
    pub evals: usize,
    pub converged: bool,
    /// Values are upper bounds: the infimum is taken over a finite family.
    pub note: String,
    #[serde(skip)]
    pub best_policy: ControlPolicy,
}

/// Minimizes the control cost over `family` with a common-random-number
/// cross-entropy search. With a finite clip, candidates whose mean running
/// cost exceeds `2 · clip` are rejected.
#[allow(clippy::too_many_arguments)]
pub fn optimize_control(
    cfg: &SimConfig,
    model: &CoefficientModel,
    f: &Functional,
    family: PolicyFamily,
    budget: usize,
    reps_per_eval: usize,
    settings: &SearchSettings,
) -> Result<OptimizationReport> {
    cfg.validate()?;
    f.validate(cfg.dim)?;
    if reps_per_eval < 2 {
        return Err(Error::config("reps_per_eval must be at least 2"));
    }
    let box_limit = f.clip.map(|c| 2.0 * c.abs());
    let (d, d1) = (cfg.dim, cfg.noise_dim);
    let init = vec![0.0; family.param_len(d, d1)];
    let outcome = cross_entropy_search(init, settings.init_std, budget, settings, cfg.seed, |params, crn| {
        let policy = family.instantiate(params, cfg.horizon, d, d1).ok()?;
        let mut c = cfg.clone();
        c.seed = crn;
        let s = cost_samples(&c, model, &policy, f, reps_per_eval).ok()?;
        if s.running.is_empty() {
            return None;
        }
        let running = s.running.iter().sum::<f64>() / s.running.len() as f64;
        if box_limit.is_some_and(|b| running > b) {
            return None;
        }
        Some(mean_and_se(&s.totals()).0)
    })?;
    let best_policy = family.instantiate(&outcome.best_params, cfg.horizon, d, d1)?;
    let mut fresh = cfg.clone();
    fresh.seed = derive_seed(cfg.seed, domain::OPTIMIZER, u64::MAX);
    let best_cost = estimate_cost(&fresh, model, &best_policy, f, settings.final_reps.max(2))?;
    Ok(OptimizationReport {
        family,
        best_params: outcome.best_params,
        best_cost,
        trace: outcome.trace,
        evals: outcome.evals,
        converged: outcome.converged,
        note: "upper bound: infimum over a finite-dimensional policy family".into(),
        best_policy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    FromEnsemble,
    Analytic,
}

/// A flow of marginals `θ(t_k)` on a run's grid.
#[derive(Clone, Debug)]
pub struct TargetFlow {
    pub marginals: Vec<DiscreteMeasure>,
    pub source: FlowSource,
}

impl TargetFlow {
    pub fn new(marginals: Vec<DiscreteMeasure>, source: FlowSource) -> Result<Self> {
        let d = marginals.first().map(|m| m.dim()).ok_or_else(|| Error::config("empty target flow"))?;
        if marginals.iter().any(|m| m.dim() != d) {
            return Err(Error::dim("target marginals differ in dimension"));
        }
        Ok(Self { marginals, source })
    }

    pub fn from_ensemble(ens: &PathEnsemble) -> Result<Self> {
        let m = (0..=ens.steps()).map(|k| ens.marginal(k)).collect::<Result<Vec<_>>>()?;
        Self::new(m, FlowSource::FromEnsemble)
    }

    /// One-dimensional Gaussian flow `N(mean(t), std(t)²)` represented by
    /// `atoms` equal-weight quantile points at each grid time.
    pub fn gaussian_1d(grid: &[f64], atoms: usize, mean: impl Fn(f64) -> f64, std: impl Fn(f64) -> f64) -> Result<Self> {
        if atoms == 0 {
            return Err(Error::config("atoms must be positive"));
        }
        let z = Normal::new(0.0, 1.0).map_err(|e| Error::config(e.to_string()))?;
        let q: Vec<f64> = (0..atoms).map(|j| z.inverse_cdf((j as f64 + 0.5) / atoms as f64)).collect();
        let marginals = grid
            .iter()
            .map(|&t| DiscreteMeasure::uniform(1, q.iter().map(|v| mean(t) + std(t) * v).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(marginals, FlowSource::Analytic)
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSettings {
    pub penalty_schedule: Vec<f64>,
    /// Evaluation budget per penalty level.
    pub budget_per_level: usize,
    /// Ensembles averaged per objective evaluation.
    pub reps_per_eval: usize,
    /// Ensembles for the final estimate on fresh seeds.
    pub final_reps: usize,
    pub match_threshold: f64,
    pub search: SearchSettings,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self {
            penalty_schedule: vec![1.0, 4.0, 16.0, 64.0],
            budget_per_level: 200,
            reps_per_eval: 2,
            final_reps: 32,
            match_threshold: 0.15,
            search: SearchSettings {
                population: 16,
                ..SearchSettings::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFunctionReport {
    /// `½ E (1/N) Σ ∫ |u|² dt` of the best policy on fresh seeds.
    pub i_hat: Estimate,
    /// `Σ_k W1(μ̄^N(t_k), θ(t_k)) Δt` of the best policy on fresh seeds.
    pub match_error: f64,
    pub match_threshold: f64,
    pub unreachable: bool,
    pub best_params: Vec<f64>,
    pub penalty_schedule: Vec<f64>,
    pub trace: Vec<Vec<f64>>,
    pub evals: usize,
    pub note: String,
}

struct RateSample {
    half_energy: f64,
    mismatch: f64,
}

fn rate_sample(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: &ControlPolicy,
    target: &TargetFlow,
    frozen: &[MeasureFeatures],
) -> Result<Option<RateSample>> {
    let out: SimOutput = simulate_with(cfg, model, Some(policy), None, MeasureSource::Frozen(frozen))?;
    if out.blown_up() {
        return Ok(None);
    }
    let dt = cfg.dt();
    let mut mismatch = 0.0;
    for k in 1..=cfg.steps {
        mismatch += wasserstein1(&out.states.marginal(k)?, &target.marginals[k])? * dt;
    }
    let rec = out.controls.as_ref().ok_or(Error::MissingControls)?;
    Ok(Some(RateSample {
        half_energy: 0.5 * control_energy(rec),
        mismatch,
    }))
}

/// Estimates the rate of a marginal flow as the least control energy that
/// steers the particle system onto it. Coefficients see the target flow's
/// features; the flow constraint is a Wasserstein penalty whose weight runs
/// up `penalty_schedule`, each level warm-started from the previous one.
pub fn rate_function_estimate(
    target: &TargetFlow,
    cfg: &SimConfig,
    model: &CoefficientModel,
    family: PolicyFamily,
    settings: &RateSettings,
) -> Result<RateFunctionReport> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if target.marginals.len() != cfg.steps + 1 || target.dim() != cfg.dim {
        return Err(Error::dim("target flow is not on the run's grid"));
    }
    if settings.penalty_schedule.is_empty() || settings.penalty_schedule.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("penalty schedule must be nonempty and increasing"));
    }
    let frozen: Vec<MeasureFeatures> = target.marginals[..cfg.steps]
        .iter()
        .map(|m| {
            let f = MeasureFeatures::from_measure(m);
            if model.needs_sample() {
                f.with_sample(m.clone())
            } else {
                f
            }
        })
        .collect();
    let (d, d1) = (cfg.dim, cfg.noise_dim);
    let mut mean = vec![0.0; family.param_len(d, d1)];
    let mut best = mean.clone();
    let mut traces = Vec::new();
    let mut evals = 0;
    for (level, &lambda) in settings.penalty_schedule.iter().enumerate() {
        let std = if level == 0 {
            settings.search.init_std
        } else {
            0.5 * settings.search.init_std
        };
        let seed = derive_seed(cfg.seed, domain::OPTIMIZER, level as u64);
        let outcome = cross_entropy_search(mean.clone(), std, settings.budget_per_level, &settings.search, seed, |params, crn| {
            let policy = family.instantiate(params, cfg.horizon, d, d1).ok()?;
            let mut total = 0.0;
            for r in 0..settings.reps_per_eval.max(1) {
                let mut c = cfg.clone();
                c.seed = replicate_seed(crn, r);
                let s = rate_sample(&c, model, &policy, target, &frozen).ok()??;
                total += s.half_energy + lambda * s.mismatch;
            }
            Some(total / settings.reps_per_eval.max(1) as f64)
        })?;
        evals += outcome.evals;
        traces.push(outcome.trace);
        best = outcome.best_params;
        mean = best.clone();
    }
    let policy = family.instantiate(&best, cfg.horizon, d, d1)?;
    let fresh = derive_seed(cfg.seed, domain::OPTIMIZER, u64::MAX);
    let samples = run_replicates(settings.final_reps.max(2), |r| {
        let mut c = cfg.clone();
        c.seed = replicate_seed(fresh, r);
        rate_sample(&c, model, &policy, target, &frozen)
    })?;
    let kept: Vec<RateSample> = samples.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::NoFiniteReplicate("every final rate-function ensemble blew up".into()));
    }
    let energies: Vec<f64> = kept.iter().map(|s| s.half_energy).collect();
    let (value, se) = mean_and_se(&energies);
    let match_error = kept.iter().map(|s| s.mismatch).sum::<f64>() / kept.len() as f64;
    let reps = settings.final_reps.max(2);
    let i_hat = Estimate {
        value,
        std_error: se,
        ci95: [value - 1.96 * se, value + 1.96 * se],
        reps,
        method: crate::laplace::EstimateMethod::Naive,
        excluded: reps - kept.len(),
        label: None,
    };
    Ok(RateFunctionReport {
        i_hat,
        match_error,
        match_threshold: settings.match_threshold,
        unreachable: match_error > settings.match_threshold,
        best_params: best,
        penalty_schedule: settings.penalty_schedule.clone(),
        trace: traces,
        evals,
        note: format!(
            "upper bound over a {}-cell policy family; only time marginals of the path law are matched",
            family.cells()
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DawsonGartnerReport {
    /// `(1/N) Σ_i |∇v(t_k, X_i(t_k))|²` for `k < steps`.
    pub lhs: Vec<f64>,
    /// `(1/N) Σ_i |u_i(t_k)|²` from the recorded controls.
    pub rhs: Vec<f64>,
    pub max_gap: f64,
}

/// Compares the field-gradient energy along the ensemble with the recorded
/// control energy at each grid time.
pub fn dawson_gartner_check(out: &SimOutput, field: &ScalarField) -> Result<DawsonGartnerReport> {
    let rec = out.controls.as_ref().ok_or(Error::MissingControls)?;
    let s = &out.states;
    if rec.particles() != s.particles() || rec.steps() != s.steps() || rec.noise_dim() != s.dim() {
        return Err(Error::dim("controls and states are on different grids"));
    }
    let n = s.particles();
    let mut g = vec![0.0; s.dim()];
    let (mut lhs, mut rhs) = (Vec::with_capacity(s.steps()), Vec::with_capacity(s.steps()));
    for k in 0..s.steps() {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..n {
            field.gradient(s.time(k), s.state(i, k), &mut g);
            a += g.iter().map(|v| v * v).sum::<f64>();
            b += rec.value(i, k).iter().map(|v| v * v).sum::<f64>();
        }
        lhs.push(a / n as f64);
        rhs.push(b / n as f64);
    }
    let max_gap = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DawsonGartnerReport { lhs, rhs, max_gap })
}
