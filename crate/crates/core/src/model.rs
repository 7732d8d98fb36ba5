//! Coefficient models `(b, σ)`, initial conditions and run configuration.
//!
//! A coefficient sees the particle through a [`PathPrefix`] (the already
//! computed part of its trajectory) and the population through
//! [`MeasureFeatures`]. Markovian models only ever read the last point of the
//! prefix; path-dependent ones may look back in time, never forward.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::rng::{domain, CounterRng};

/// Finite-dimensional view of the measure argument of `b` and `σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFeatures {
    /// Weighted mean, one entry per coordinate.
    pub mean: Vec<f64>,
    /// Weighted raw second moment `E[x_j^2]`, one entry per coordinate.
    pub second: Vec<f64>,
    /// Full weighted sample, only attached for models that ask for it.
    pub sample: Option<Arc<DiscreteMeasure>>,
}

impl MeasureFeatures {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            second: vec![0.0; dim],
            sample: None,
        }
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            mean: x.to_vec(),
            second: x.iter().map(|v| v * v).collect(),
            sample: None,
        }
    }

    /// Equal-weight features of `n` points stored contiguously in `points`
    /// (`n * dim` values). Summation runs in index order.
    pub fn from_points(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for p in points.chunks_exact(dim) {
            for j in 0..dim {
                mean[j] += p[j];
                second[j] += p[j] * p[j];
            }
        }
        let inv = 1.0 / n as f64;
        for j in 0..dim {
            mean[j] *= inv;
            second[j] *= inv;
        }
        Self {
            mean,
            second,
            sample: None,
        }
    }

    pub fn from_measure(m: &DiscreteMeasure) -> Self {
        let dim = m.dim();
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for (x, w) in m.iter() {
            for j in 0..dim {
                mean[j] += w * x[j];
                second[j] += w * x[j] * x[j];
            }
        }
        Self {
            mean,
            second,
            sample: None,
        }
    }

    pub fn with_sample(mut self, sample: DiscreteMeasure) -> Self {
        self.sample = Some(Arc::new(sample));
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// The computed part `φ(t_0), …, φ(t_k)` of one particle's trajectory.
#[derive(Clone, Copy, Debug)]
pub struct PathPrefix<'a> {
    data: &'a [f64],
    dim: usize,
    dt: f64,
    time: f64,
}

impl<'a> PathPrefix<'a> {
    /// Prefix on a uniform grid with spacing `dt`; `data` holds `k + 1` points.
    pub fn new(data: &'a [f64], dim: usize, dt: f64) -> Self {
        assert!(dim > 0 && !data.is_empty() && data.len() % dim == 0);
        let k = data.len() / dim - 1;
        Self {
            data,
            dim,
            dt,
            time: k as f64 * dt,
        }
    }

    /// Single point at time `time`, with constant history behind it.
    pub fn point(x: &'a [f64], time: f64) -> Self {
        Self {
            data: x,
            dim: x.len(),
            dt: 0.0,
            time,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn last_step(&self) -> usize {
        self.data.len() / self.dim - 1
    }

    pub fn current(&self) -> &'a [f64] {
        &self.data[self.data.len() - self.dim..]
    }

    pub fn initial(&self) -> &'a [f64] {
        &self.data[..self.dim]
    }

    pub fn at_step(&self, j: usize) -> &'a [f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// State at time `s`, linearly interpolated between grid points. Times
    /// before 0 see the initial state (constant history).
    pub fn state_at(&self, s: f64, out: &mut [f64]) -> Result<()> {
        let tol = 1e-9 * self.time.abs().max(1.0);
        if s > self.time + tol {
            return Err(Error::Anticipating {
                requested: s,
                current: self.time,
            });
        }
        let last = self.last_step();
        if s <= 0.0 || last == 0 || self.dt <= 0.0 {
            let src = if s <= 0.0 { self.initial() } else { self.current() };
            out.copy_from_slice(src);
            return Ok(());
        }
        let pos = s / self.dt;
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        if j >= last || frac <= 1e-9 {
            out.copy_from_slice(self.at_step(j.min(last)));
            return Ok(());
        }
        if frac >= 1.0 - 1e-9 {
            out.copy_from_slice(self.at_step(j + 1));
            return Ok(());
        }
        let (a, b) = (self.at_step(j), self.at_step(j + 1));
        for i in 0..self.dim {
            out[i] = a[i] + frac * (b[i] - a[i]);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Markovian,
    PathDependent,
}

pub type DriftFn =
    dyn Fn(f64, &PathPrefix<'_>, &MeasureFeatures, &mut [f64]) -> Result<()> + Send + Sync;
pub type DiffusionFn = DriftFn;

#[derive(Clone)]
pub enum DriftLaw {
    Zero,
    /// `b(x, μ) = -rate · (x - couple · mean(μ))`
    MeanFieldOu { rate: f64, couple: f64 },
    /// `b(x, μ) = -β (x³ - x) - κ (x - mean(μ))`, coordinatewise.
    CurieWeiss { beta: f64, kappa: f64 },
    /// `b(t, φ) = -gain · φ(t - lag)`
    DelayedLinear { lag: f64, gain: f64 },
    Custom(Arc<DriftFn>),
}

impl fmt::Debug for DriftLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftLaw::Zero => write!(f, "Zero"),
            DriftLaw::MeanFieldOu { rate, couple } => {
                write!(f, "MeanFieldOu {{ rate: {rate}, couple: {couple} }}")
            }
            DriftLaw::CurieWeiss { beta, kappa } => {
                write!(f, "CurieWeiss {{ beta: {beta}, kappa: {kappa} }}")
            }
            DriftLaw::DelayedLinear { lag, gain } => {
                write!(f, "DelayedLinear {{ lag: {lag}, gain: {gain} }}")
            }
            DriftLaw::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Clone)]
pub enum DiffusionLaw {
    /// `σ0` times the rectangular identity.
    Constant(f64),
    /// Fixed `d × d1` matrix, row-major.
    Matrix(Vec<f64>),
    Custom(Arc<DiffusionFn>),
}

impl fmt::Debug for DiffusionLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionLaw::Constant(s) => write!(f, "Constant({s})"),
            DiffusionLaw::Matrix(m) => write!(f, "Matrix({m:?})"),
            DiffusionLaw::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// The pair `(b, σ)` together with its dimensions.
#[derive(Clone, Debug)]
pub struct CoefficientModel {
    dim: usize,
    noise_dim: usize,
    kind: ModelKind,
    needs_sample: bool,
    drift: DriftLaw,
    diffusion: DiffusionLaw,
}

impl CoefficientModel {
    pub fn new(dim: usize, noise_dim: usize, drift: DriftLaw, diffusion: DiffusionLaw) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::dim("model dimensions must be positive"));
        }
        if let DiffusionLaw::Matrix(m) = &diffusion {
            if m.len() != dim * noise_dim {
                return Err(Error::dim(format!(
                    "diffusion matrix has {} entries, expected {}x{}",
                    m.len(),
                    dim,
                    noise_dim
                )));
            }
        }
        let kind = match drift {
            DriftLaw::DelayedLinear { .. } => ModelKind::PathDependent,
            _ => ModelKind::Markovian,
        };
        Ok(Self {
            dim,
            noise_dim,
            kind,
            needs_sample: false,
            drift,
            diffusion,
        })
    }

    pub fn zero_drift(dim: usize, noise_dim: usize, sigma0: f64) -> Self {
        Self::new(dim, noise_dim, DriftLaw::Zero, DiffusionLaw::Constant(sigma0)).unwrap()
    }

    pub fn mean_field_ou(dim: usize, rate: f64, couple: f64, sigma0: f64) -> Self {
        Self::new(
            dim,
            dim,
            DriftLaw::MeanFieldOu { rate, couple },
            DiffusionLaw::Constant(sigma0),
        )
        .unwrap()
    }

    pub fn curie_weiss(dim: usize, beta: f64, kappa: f64, sigma0: f64) -> Self {
        Self::new(
            dim,
            dim,
            DriftLaw::CurieWeiss { beta, kappa },
            DiffusionLaw::Constant(sigma0),
        )
        .unwrap()
    }

    pub fn delayed_linear(dim: usize, lag: f64, gain: f64, sigma0: f64) -> Self {
        Self::new(
            dim,
            dim,
            DriftLaw::DelayedLinear { lag, gain },
            DiffusionLaw::Constant(sigma0),
        )
        .unwrap()
    }

    /// Overrides the declared kind; needed for custom path-dependent laws.
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    /// Requests the full weighted sample in [`MeasureFeatures::sample`].
    pub fn with_sample_access(mut self) -> Self {
        self.needs_sample = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn needs_sample(&self) -> bool {
        self.needs_sample
    }

    pub fn drift_law(&self) -> &DriftLaw {
        &self.drift
    }

    pub fn diffusion_law(&self) -> &DiffusionLaw {
        &self.diffusion
    }

    pub fn drift(&self, t: f64, path: &PathPrefix<'_>, m: &MeasureFeatures, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.dim);
        match &self.drift {
            DriftLaw::Zero => out.fill(0.0),
            DriftLaw::MeanFieldOu { rate, couple } => {
                let x = path.current();
                for j in 0..self.dim {
                    out[j] = -rate * (x[j] - couple * m.mean[j]);
                }
            }
            DriftLaw::CurieWeiss { beta, kappa } => {
                let x = path.current();
                for j in 0..self.dim {
                    out[j] = -beta * (x[j] * x[j] * x[j] - x[j]) - kappa * (x[j] - m.mean[j]);
                }
            }
            DriftLaw::DelayedLinear { lag, gain } => {
                path.state_at(t - lag, out)?;
                for v in out.iter_mut() {
                    *v *= -gain;
                }
            }
            DriftLaw::Custom(f) => f(t, path, m, out)?,
        }
        Ok(())
    }

    /// Writes `σ` as a row-major `d × d1` matrix.
    pub fn diffusion(&self, t: f64, path: &PathPrefix<'_>, m: &MeasureFeatures, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.dim * self.noise_dim);
        match &self.diffusion {
            DiffusionLaw::Constant(s) => {
                out.fill(0.0);
                for j in 0..self.dim.min(self.noise_dim) {
                    out[j * self.noise_dim + j] = *s;
                }
            }
            DiffusionLaw::Matrix(mat) => out.copy_from_slice(mat),
            DiffusionLaw::Custom(f) => f(t, path, m, out)?,
        }
        Ok(())
    }

    /// True when `σ` is the identity matrix at a handful of probe points.
    pub fn diffusion_is_identity(&self) -> bool {
        if self.dim != self.noise_dim {
            return false;
        }
        if let DiffusionLaw::Constant(s) = self.diffusion {
            return s == 1.0;
        }
        let d = self.dim;
        let mut sigma = vec![0.0; d * d];
        let probes = [0.0, 1.0, -2.5];
        for &p in &probes {
            let x = vec![p; d];
            let prefix = PathPrefix::point(&x, 0.0);
            let m = MeasureFeatures::dirac(&x);
            if self.diffusion(0.0, &prefix, &m, &mut sigma).is_err() {
                return false;
            }
            for j in 0..d {
                for l in 0..d {
                    let want = if j == l { 1.0 } else { 0.0 };
                    if sigma[j * d + l] != want {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Law of the i.i.d. initial states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InitialLaw {
    Dirac { at: Vec<f64> },
    Normal { mean: Vec<f64>, std: Vec<f64> },
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Every particle starts at the same point.
    Constant { value: Vec<f64> },
    /// One point per particle.
    List { points: Vec<Vec<f64>> },
    /// Independent draws, reproducible from `(seed, particle)`.
    Iid(InitialLaw),
}

impl InitialCondition {
    /// Returns `n * dim` initial coordinates, particle-major.
    pub fn sample(&self, n: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
        let check = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != dim {
                return Err(Error::dim(format!("{what} has length {}, expected {dim}", v.len())));
            }
            Ok(())
        };
        let mut out = Vec::with_capacity(n * dim);
        match self {
            InitialCondition::Constant { value } => {
                check(value, "initial value")?;
                for _ in 0..n {
                    out.extend_from_slice(value);
                }
            }
            InitialCondition::List { points } => {
                if points.len() != n {
                    return Err(Error::dim(format!(
                        "initial list has {} points but the run has {n} particles",
                        points.len()
                    )));
                }
                for p in points {
                    check(p, "initial point")?;
                    out.extend_from_slice(p);
                }
            }
            InitialCondition::Iid(law) => {
                match law {
                    InitialLaw::Dirac { at } => check(at, "dirac location")?,
                    InitialLaw::Normal { mean, std } => {
                        check(mean, "normal mean")?;
                        check(std, "normal std")?;
                    }
                    InitialLaw::Uniform { low, high } => {
                        check(low, "uniform low")?;
                        check(high, "uniform high")?;
                    }
                }
                let mut z = vec![0.0; dim];
                for i in 0..n {
                    let mut rng = CounterRng::new(seed, domain::INITIAL, i as u64);
                    match law {
                        InitialLaw::Dirac { at } => out.extend_from_slice(at),
                        InitialLaw::Normal { mean, std } => {
                            rng.fill_normals(&mut z);
                            for j in 0..dim {
                                out.push(mean[j] + std[j] * z[j]);
                            }
                        }
                        InitialLaw::Uniform { low, high } => {
                            for j in 0..dim {
                                out.push(low[j] + (high[j] - low[j]) * rng.uniform());
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Discretization and run parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub particles: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "one")]
    pub noise_dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub initial: InitialCondition,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn new(particles: usize, dim: usize, noise_dim: usize, horizon: f64, steps: usize, initial: InitialCondition, seed: u64) -> Self {
        Self {
            particles,
            dim,
            noise_dim,
            horizon,
            steps,
            initial,
            seed,
        }
    }

    /// One-dimensional config started from a single point.
    pub fn scalar(particles: usize, horizon: f64, steps: usize, x0: f64, seed: u64) -> Self {
        Self::new(
            particles,
            1,
            1,
            horizon,
            steps,
            InitialCondition::Constant { value: vec![x0] },
            seed,
        )
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles < 1 {
            return Err(Error::config("particle count must be at least 1"));
        }
        if self.steps < 1 {
            return Err(Error::config("step count must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon must be positive and finite"));
        }
        if self.dim < 1 || self.noise_dim < 1 {
            return Err(Error::config("dimensions must be positive"));
        }
        Ok(())
    }

    pub fn check_model(&self, model: &CoefficientModel) -> Result<()> {
        if model.dim() != self.dim || model.noise_dim() != self.noise_dim {
            return Err(Error::dim(format!(
                "model is {}x{} but config is {}x{}",
                model.dim(),
                model.noise_dim(),
                self.dim,
                self.noise_dim
            )));
        }
        Ok(())
    }

    /// Grid index of `t`, or an error if `t` is not a grid point.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let pos = t / self.dt();
        let k = pos.round();
        if k < 0.0 || k > self.steps as f64 || (pos - k).abs() > 1e-8 {
            return Err(Error::OffGrid(t));
        }
        Ok(k as usize)
    }
}

/// Declarative model description as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    /// Optional state dimension the family was written for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

fn default_sigma0() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn family(name: &str) -> Self {
        Self {
            family: name.to_string(),
            sigma0: 1.0,
            rate: None,
            couple: None,
            beta: None,
            kappa: None,
            lag: None,
            gain: None,
            dim: None,
        }
    }
}

fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Named custom models that configs may refer to by `family`.
#[derive(Clone, Debug, Default)]
pub struct ModelRegistry {
    models: HashMap<String, CoefficientModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, model: CoefficientModel) {
        self.models.insert(normalize(name), model);
    }

    pub fn get(&self, name: &str) -> Option<&CoefficientModel> {
        self.models.get(&normalize(name))
    }
}

/// Builds a model from its declarative description.
pub fn build_model(spec: &ModelSpec, cfg: &SimConfig, registry: &ModelRegistry) -> Result<CoefficientModel> {
    if let Some(d) = spec.dim {
        if d != cfg.dim {
            return Err(Error::dim(format!(
                "family `{}` declared for dimension {d} but config has dimension {}",
                spec.family, cfg.dim
            )));
        }
    }
    let (d, d1) = (cfg.dim, cfg.noise_dim);
    let sigma = DiffusionLaw::Constant(spec.sigma0);
    let model = match normalize(&spec.family).as_str() {
        "zerodrift" | "constantdiffusion" => CoefficientModel::new(d, d1, DriftLaw::Zero, sigma)?,
        "meanfieldou" => CoefficientModel::new(
            d,
            d1,
            DriftLaw::MeanFieldOu {
                rate: spec.rate.unwrap_or(1.0),
                couple: spec.couple.unwrap_or(1.0),
            },
            sigma,
        )?,
        "curieweissdoublewell" | "curieweiss" => CoefficientModel::new(
            d,
            d1,
            DriftLaw::CurieWeiss {
                beta: spec.beta.unwrap_or(1.0),
                kappa: spec.kappa.unwrap_or(1.0),
            },
            sigma,
        )?,
        "delayedlinear" => {
            let lag = spec.lag.unwrap_or(0.5);
            if lag < 0.0 {
                return Err(Error::config("delay lag must be nonnegative"));
            }
            CoefficientModel::new(
                d,
                d1,
                DriftLaw::DelayedLinear {
                    lag,
                    gain: spec.gain.unwrap_or(1.0),
                },
                sigma,
            )?
        }
        other => match registry.get(other) {
            Some(m) => {
                cfg.check_model(m)?;
                m.clone()
            }
            None => return Err(Error::UnknownFamily(spec.family.clone())),
        },
    };
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoercivityViolation {
    pub x: Vec<f64>,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoercivityReport {
    /// Smallest `C` with `2<b,x> + tr(σσᵀ) ≤ C (1 + |x|²)` on every finite sample.
    pub c_estimate: f64,
    pub violations: Vec<CoercivityViolation>,
    /// Ratio on the outer shell grows superlinearly relative to the half shell.
    pub non_coercive: bool,
    pub samples: usize,
}

fn coercivity_ratio(model: &CoefficientModel, x: &[f64], m: &MeasureFeatures) -> Result<f64> {
    let (d, d1) = (model.dim(), model.noise_dim());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d1];
    let prefix = PathPrefix::point(x, 0.0);
    model.drift(0.0, &prefix, m, &mut b)?;
    model.diffusion(0.0, &prefix, m, &mut s)?;
    let inner: f64 = b.iter().zip(x).map(|(b, x)| b * x).sum();
    let trace: f64 = s.iter().map(|v| v * v).sum();
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    Ok((2.0 * inner + trace) / (1.0 + norm2))
}

/// Spot-checks the coercivity inequality on points of the ball of the given
/// radius. The sample sequence is fixed, so more samples extend a prefix.
pub fn validate_coercivity(model: &CoefficientModel, radius: f64, samples: usize) -> Result<CoercivityReport> {
    if !(radius > 0.0) || samples < 1 {
        return Err(Error::config("coercivity check needs radius > 0 and samples >= 1"));
    }
    let d = model.dim();
    let mut points: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(samples);
    points.push((vec![0.0; d], vec![0.0; d]));
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut x = vec![0.0; d];
            x[j] = sign * radius;
            points.push((x.clone(), x));
        }
    }
    let mut rng = CounterRng::new(0x636f_6572_6369_7665, domain::SAMPLING, 0);
    let ball_point = |rng: &mut CounterRng| {
        let mut z = vec![0.0; d];
        rng.fill_normals(&mut z);
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r = radius * rng.uniform().powf(1.0 / d as f64);
        z.iter().map(|v| v / n * r).collect::<Vec<f64>>()
    };
    while points.len() < samples {
        let x = ball_point(&mut rng);
        let y = ball_point(&mut rng);
        points.push((x, y));
    }
    points.truncate(samples);

    let mut c_estimate = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for (x, y) in &points {
        let m = MeasureFeatures::dirac(y);
        match coercivity_ratio(model, x, &m) {
            Ok(r) if r.is_finite() => c_estimate = c_estimate.max(r),
            Ok(r) => violations.push(CoercivityViolation {
                x: x.clone(),
                reason: format!("non-finite ratio {r}"),
            }),
            Err(e) => violations.push(CoercivityViolation {
                x: x.clone(),
                reason: e.to_string(),
            }),
        }
    }

    let shell_max = |r: f64| -> f64 {
        let mut best = f64::NEG_INFINITY;
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut x = vec![0.0; d];
                x[j] = sign * r;
                if let Ok(v) = coercivity_ratio(model, &x, &MeasureFeatures::dirac(&x)) {
                    best = best.max(v);
                }
            }
        }
        best
    };
    let outer = shell_max(radius);
    let half = shell_max(radius / 2.0);
    let non_coercive = !outer.is_finite() || (outer > 1.0 && outer > 1.5 * half.max(0.0));

    Ok(CoercivityReport {
        c_estimate,
        violations,
        non_coercive,
        samples: points.len(),
    })
}
