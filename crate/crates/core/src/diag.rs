//! Generator of the controlled particle dynamics acting on test functions of
//! `(state, Brownian path)`, truncation times, and the empirical martingale
//! residuals built from them.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::mean_and_se;
use crate::measures::ControlRecord;
use crate::model::{CoefficientModel, MeasureFeatures, PathPrefix};
use crate::sim::SimOutput;

/// Derivatives of a general `C²` test function at `(x, z)`.
pub trait SmoothFunction: Send + Sync {
    fn value(&self, x: &[f64], z: &[f64]) -> f64;
    fn grad_x(&self, x: &[f64], z: &[f64], out: &mut [f64]);
    /// `d × d`, row-major.
    fn hess_xx(&self, x: &[f64], z: &[f64], out: &mut [f64]);
    /// Diagonal of the `d1 × d1` Hessian in `z`.
    fn hess_zz_diag(&self, x: &[f64], z: &[f64], out: &mut [f64]);
    /// `d × d1`, row-major.
    fn hess_xz(&self, x: &[f64], z: &[f64], out: &mut [f64]);
}

/// Test functions `f(x, z)`: the first- and second-order monomials plus
/// arbitrary smooth functions.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "f", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// `x_k`
    X { k: usize },
    /// `x_j x_k`
    XX { j: usize, k: usize },
    /// `z_l`
    Z { l: usize },
    /// `z_j z_l`
    ZZ { j: usize, l: usize },
    /// `x_k z_l`
    XZ { k: usize, l: usize },
    #[serde(skip)]
    General(Arc<dyn SmoothFunction>),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl TestFunction {
    pub fn label(&self) -> String {
        match self {
            TestFunction::X { k } => format!("x{k}"),
            TestFunction::XX { j, k } => format!("x{j}*x{k}"),
            TestFunction::Z { l } => format!("z{l}"),
            TestFunction::ZZ { j, l } => format!("z{j}*z{l}"),
            TestFunction::XZ { k, l } => format!("x{k}*z{l}"),
            TestFunction::General(_) => "general".into(),
        }
    }

    /// The five monomial families on coordinate 0.
    pub fn monomials() -> Vec<TestFunction> {
        vec![
            TestFunction::X { k: 0 },
            TestFunction::XX { j: 0, k: 0 },
            TestFunction::Z { l: 0 },
            TestFunction::ZZ { j: 0, l: 0 },
            TestFunction::XZ { k: 0, l: 0 },
        ]
    }

    fn check(&self, d: usize, d1: usize) -> Result<()> {
        let ok = match *self {
            TestFunction::X { k } => k < d,
            TestFunction::XX { j, k } => j < d && k < d,
            TestFunction::Z { l } => l < d1,
            TestFunction::ZZ { j, l } => j < d1 && l < d1,
            TestFunction::XZ { k, l } => k < d && l < d1,
            TestFunction::General(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!("test function {} is out of range for d={d}, d1={d1}", self.label())))
        }
    }

    pub fn value(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            TestFunction::X { k } => x[k],
            TestFunction::XX { j, k } => x[j] * x[k],
            TestFunction::Z { l } => z[l],
            TestFunction::ZZ { j, l } => z[j] * z[l],
            TestFunction::XZ { k, l } => x[k] * z[l],
            TestFunction::General(ref g) => g.value(x, z),
        }
    }

    fn derivatives(&self, x: &[f64], z: &[f64], s: &mut Derivs) {
        s.gx.fill(0.0);
        s.hxx.fill(0.0);
        s.hzz.fill(0.0);
        s.hxz.fill(0.0);
        let (d, d1) = (x.len(), z.len());
        match *self {
            TestFunction::X { k } => s.gx[k] = 1.0,
            TestFunction::XX { j, k } => {
                s.gx[j] += x[k];
                s.gx[k] += x[j];
                s.hxx[j * d + k] += 1.0;
                s.hxx[k * d + j] += 1.0;
            }
            TestFunction::Z { .. } => {}
            TestFunction::ZZ { j, l } => {
                if j == l {
                    s.hzz[l] = 2.0;
                }
            }
            TestFunction::XZ { k, l } => {
                s.gx[k] = z[l];
                s.hxz[k * d1 + l] = 1.0;
            }
            TestFunction::General(ref g) => {
                g.grad_x(x, z, &mut s.gx);
                g.hess_xx(x, z, &mut s.hxx);
                g.hess_zz_diag(x, z, &mut s.hzz);
                g.hess_xz(x, z, &mut s.hxz);
            }
        }
        debug_assert_eq!(s.hxx.len(), d * d);
    }
}

struct Derivs {
    gx: Vec<f64>,
    hxx: Vec<f64>,
    hzz: Vec<f64>,
    hxz: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
}

impl Derivs {
    fn new(d: usize, d1: usize) -> Self {
        Self {
            gx: vec![0.0; d],
            hxx: vec![0.0; d * d],
            hzz: vec![0.0; d1],
            hxz: vec![0.0; d * d1],
            b: vec![0.0; d],
            sigma: vec![0.0; d * d1],
        }
    }
}

/// Four-term generator sum given coefficients already stored in `s.b`,
/// `s.sigma`.
fn generator_sum(f: &TestFunction, x: &[f64], y: &[f64], z: &[f64], s: &mut Derivs) -> f64 {
    let (d, d1) = (x.len(), z.len());
    f.derivatives(x, z, s);
    let sig = &s.sigma;
    let mut drift = 0.0;
    for k in 0..d {
        let sy: f64 = (0..d1).map(|l| sig[k * d1 + l] * y[l]).sum();
        drift += (s.b[k] + sy) * s.gx[k];
    }
    let mut diffusion = 0.0;
    for j in 0..d {
        for k in 0..d {
            let h = s.hxx[j * d + k];
            if h != 0.0 {
                let a: f64 = (0..d1).map(|l| sig[j * d1 + l] * sig[k * d1 + l]).sum();
                diffusion += a * h;
            }
        }
    }
    let wiener: f64 = s.hzz.iter().sum();
    let mut cross = 0.0;
    for k in 0..d {
        for l in 0..d1 {
            cross += sig[k * d1 + l] * s.hxz[k * d1 + l];
        }
    }
    drift + 0.5 * diffusion + 0.5 * wiener + cross
}

fn check_dims(model: &CoefficientModel, f: &TestFunction, x: &[f64], y: &[f64], z: &[f64], m: &MeasureFeatures) -> Result<()> {
    let (d, d1) = (model.dim(), model.noise_dim());
    if x.len() != d || y.len() != d1 || z.len() != d1 || m.dim() != d {
        return Err(Error::dim(format!(
            "generator inputs have x:{}, y:{}, z:{}, m:{} but the model is {d}x{d1}",
            x.len(),
            y.len(),
            z.len(),
            m.dim()
        )));
    }
    f.check(d, d1)
}

/// `A f(x, y, z) = ⟨b + σy, ∇ₓf⟩ + ½ tr(σσᵀ ∇ₓ²f) + ½ Δ_z f + Σ σ_{kl} ∂²f/∂x_k∂z_l`
/// for a Markovian model at state `x`, control value `y` and Brownian value `z`.
#[allow(clippy::too_many_arguments)]
pub fn generator_apply(
    model: &CoefficientModel,
    f: &TestFunction,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    m: &MeasureFeatures,
) -> Result<f64> {
    check_dims(model, f, x, y, z, m)?;
    let mut s = Derivs::new(model.dim(), model.noise_dim());
    let p = PathPrefix::point(x, t);
    model.drift(t, &p, m, &mut s.b)?;
    model.diffusion(t, &p, m, &mut s.sigma)?;
    Ok(generator_sum(f, x, y, z, &mut s))
}

/// Same four terms with coefficients evaluated on a path prefix; the
/// derivatives of `f` are taken at the prefix's current point.
#[allow(clippy::too_many_arguments)]
pub fn generator_apply_delay(
    model: &CoefficientModel,
    f: &TestFunction,
    t: f64,
    prefix: &PathPrefix<'_>,
    y: &[f64],
    z: &[f64],
    m: &MeasureFeatures,
) -> Result<f64> {
    let x = prefix.current();
    check_dims(model, f, x, y, z, m)?;
    if prefix.time() + 1e-9 * t.abs().max(1.0) < t {
        return Err(Error::config(format!(
            "path prefix ends at t={} but the generator was asked at t={t}",
            prefix.time()
        )));
    }
    let mut s = Derivs::new(model.dim(), model.noise_dim());
    model.drift(t, prefix, m, &mut s.b)?;
    model.diffusion(t, prefix, m, &mut s.sigma)?;
    Ok(generator_sum(f, x, y, z, &mut s))
}

/// Level `k + a` of the truncation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSpec {
    pub k: f64,
    #[serde(default)]
    pub a: f64,
}

impl TruncationSpec {
    pub fn new(k: f64, a: f64) -> Result<Self> {
        let s = Self { k, a };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0) || !(0.0..=1.0).contains(&self.a) {
            return Err(Error::config("truncation needs k >= 1 and 0 <= a <= 1"));
        }
        Ok(())
    }

    pub fn level(&self) -> f64 {
        self.k + self.a
    }
}

/// One particle's aligned `(state path, control row, noise path)` on a grid
/// of `steps + 1` points.
#[derive(Clone, Copy, Debug)]
pub struct Triple<'a> {
    pub path: &'a [f64],
    pub controls: &'a [f64],
    pub noise: &'a [f64],
    pub dim: usize,
    pub noise_dim: usize,
    pub dt: f64,
}

impl Triple<'_> {
    pub fn steps(&self) -> usize {
        self.path.len() / self.dim - 1
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// First grid index where
/// `Σ_{j<k} |u_j| Δt + max_{j≤k} |x_j| + max_{j≤k} |w_j|` reaches `spec.level()`,
/// or `steps` if it never does.
pub fn truncation_index(tr: &Triple<'_>, spec: &TruncationSpec) -> usize {
    let (d, d1) = (tr.dim, tr.noise_dim);
    let steps = tr.steps();
    let (mut first, mut sup_x, mut sup_w) = (0.0, 0.0f64, 0.0f64);
    for k in 0..=steps {
        if k > 0 {
            first += Triple::norm(&tr.controls[(k - 1) * d1..k * d1]) * tr.dt;
        }
        sup_x = sup_x.max(Triple::norm(&tr.path[k * d..(k + 1) * d]));
        sup_w = sup_w.max(Triple::norm(&tr.noise[k * d1..(k + 1) * d1]));
        if first + sup_x + sup_w >= spec.level() {
            return k;
        }
    }
    steps
}

/// Grid time of [`truncation_index`].
pub fn truncation_time(tr: &Triple<'_>, spec: &TruncationSpec) -> f64 {
    truncation_index(tr, spec) as f64 * tr.dt
}

/// Information available at `t0`: the triple restricted to `[0, t0]`.
#[derive(Clone, Copy, Debug)]
pub struct PrefixView<'a> {
    pub path: &'a [f64],
    pub controls: &'a [f64],
    pub noise: &'a [f64],
    pub dim: usize,
    pub noise_dim: usize,
    pub dt: f64,
}

impl PrefixView<'_> {
    fn last_state(&self) -> &[f64] {
        &self.path[self.path.len() - self.dim..]
    }

    fn last_noise(&self) -> &[f64] {
        &self.noise[self.noise.len() - self.noise_dim..]
    }
}

/// Bounded weights that only see the triple up to `t0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stat", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrefixStatistic {
    Constant { value: f64 },
    /// `tanh(scale · x_coord(t0))`
    TanhState { coord: usize, scale: f64 },
    /// `tanh(scale · w_coord(t0))`
    TanhNoise { coord: usize, scale: f64 },
    /// `cos(freq · x_coord(t0))`
    CosState { coord: usize, freq: f64 },
    /// `min(∫₀^{t0} |u| dt, cap)`
    ControlFirstMoment { cap: f64 },
}

impl PrefixStatistic {
    pub fn evaluate(&self, p: &PrefixView<'_>) -> f64 {
        match *self {
            PrefixStatistic::Constant { value } => value,
            PrefixStatistic::TanhState { coord, scale } => (scale * p.last_state()[coord]).tanh(),
            PrefixStatistic::TanhNoise { coord, scale } => (scale * p.last_noise()[coord]).tanh(),
            PrefixStatistic::CosState { coord, freq } => (freq * p.last_state()[coord]).cos(),
            PrefixStatistic::ControlFirstMoment { cap } => {
                let s: f64 = p.controls.chunks_exact(p.noise_dim).map(|u| Triple::norm(u) * p.dt).sum();
                s.min(cap)
            }
        }
    }

    fn check(&self, d: usize, d1: usize) -> Result<()> {
        let ok = match *self {
            PrefixStatistic::TanhState { coord, .. } | PrefixStatistic::CosState { coord, .. } => coord < d,
            PrefixStatistic::TanhNoise { coord, .. } => coord < d1,
            PrefixStatistic::Constant { value } => value.is_finite(),
            PrefixStatistic::ControlFirstMoment { cap } => cap.is_finite() && cap >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("weight statistic is out of range"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub f: String,
    pub t0: f64,
    pub t1: f64,
    pub k: f64,
    pub a: f64,
    pub residual: f64,
    pub std_error: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub steps: usize,
}

impl ResidualReport {
    /// `|residual| ≤ z · SE`, counting an exactly zero residual as inside.
    pub fn within(&self, z: f64) -> bool {
        self.residual.abs() <= z * self.std_error || self.residual == 0.0
    }
}

/// Mean over particles of `Ψ · (M_f(t1 ∧ τ) − M_f(t0 ∧ τ))`, where
/// `M_f(t) = f(X(t), W(t)) − f(X(0), W(0)) − ∫₀ᵗ A f ds` with left-endpoint
/// quadrature and the control values as the `y` argument.
pub fn martingale_residual(
    out: &SimOutput,
    model: &CoefficientModel,
    f: &TestFunction,
    t0: f64,
    t1: f64,
    spec: &TruncationSpec,
    weight: &PrefixStatistic,
) -> Result<ResidualReport> {
    spec.validate()?;
    let s = &out.states;
    let (n, steps, d, d1, dt) = (s.particles(), s.steps(), s.dim(), out.noise.noise_dim(), s.dt());
    if model.dim() != d || model.noise_dim() != d1 {
        return Err(Error::dim("model does not match the run"));
    }
    f.check(d, d1)?;
    weight.check(d, d1)?;
    if let Some(step) = out.blow_up {
        return Err(Error::BlowUp { step });
    }
    let (k0, k1) = (s.grid_index(t0)?, s.grid_index(t1)?);
    if k0 > k1 {
        return Err(Error::config("t0 must not exceed t1"));
    }
    if out.features.len() < steps {
        return Err(Error::dim("run did not record its measure features"));
    }
    let zeros;
    let rec: &ControlRecord = match &out.controls {
        Some(r) => r,
        None => {
            zeros = ControlRecord::zeros(n, steps, d1, dt);
            &zeros
        }
    };
    let per_particle = |i: usize| -> Result<f64> {
        let path = s.path(i);
        let noise = out.noise.path(i);
        let controls = rec.row(i);
        let tr = Triple {
            path,
            controls,
            noise: &noise,
            dim: d,
            noise_dim: d1,
            dt,
        };
        let tau = truncation_index(&tr, spec);
        let (a0, a1) = (k0.min(tau), k1.min(tau));
        let at = |k: usize| f.value(&path[k * d..(k + 1) * d], &noise[k * d1..(k + 1) * d1]);
        let mut scratch = Derivs::new(d, d1);
        let mut integral = 0.0;
        for j in a0..a1 {
            let t = j as f64 * dt;
            let prefix = PathPrefix::new(&path[..(j + 1) * d], d, dt);
            let m = &out.features[j];
            model.drift(t, &prefix, m, &mut scratch.b)?;
            model.diffusion(t, &prefix, m, &mut scratch.sigma)?;
            let x = prefix.current();
            integral += generator_sum(f, x, &controls[j * d1..(j + 1) * d1], &noise[j * d1..(j + 1) * d1], &mut scratch) * dt;
        }
        let increment = at(a1) - at(a0) - integral;
        let view = PrefixView {
            path: &path[..(k0 + 1) * d],
            controls: &controls[..k0 * d1],
            noise: &noise[..(k0 + 1) * d1],
            dim: d,
            noise_dim: d1,
            dt,
        };
        Ok(weight.evaluate(&view) * increment)
    };
    let contributions: Vec<Result<f64>> = (0..n).into_par_iter().map(per_particle).collect();
    let values = contributions.into_iter().collect::<Result<Vec<f64>>>()?;
    let (residual, std_error) = mean_and_se(&values);
    Ok(ResidualReport {
        f: f.label(),
        t0,
        t1,
        k: spec.k,
        a: spec.a,
        residual,
        std_error,
        n,
        steps,
    })
}

/// Residuals of every monomial at the three time pairs `(0, T/2)`,
/// `(T/2, T)` and `(0, T)`.
pub fn monomial_suite(out: &SimOutput, model: &CoefficientModel, spec: &TruncationSpec, weight: &PrefixStatistic) -> Result<Vec<ResidualReport>> {
    let horizon = out.states.horizon();
    let half = out.states.time(out.states.steps() / 2);
    let pairs = [(0.0, half), (half, horizon), (0.0, horizon)];
    let mut reports = Vec::new();
    for f in TestFunction::monomials() {
        for &(t0, t1) in &pairs {
            reports.push(martingale_residual(out, model, &f, t0, t1, spec, weight)?);
        }
    }
    Ok(reports)
}
