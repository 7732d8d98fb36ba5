//! Empirical measures, transport metrics and control functionals.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{NoiseEnsemble, PathEnsemble, SimOutput};

/// Atom count per side up to which multi-dimensional transport is solved exactly.
pub const EXACT_TRANSPORT_LIMIT: usize = 512;

/// Weighted point masses on `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// `atoms` holds `weights.len() * dim` coordinates, atom-major.
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.len() != weights.len() * dim {
            return Err(Error::dim(format!(
                "{} coordinates do not form {} atoms of dimension {dim}",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::config("measure needs at least one atom"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("weights sum to {total}, not 1")));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("atoms must be finite"));
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Equal weights on `atoms.len() / dim` points.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        let n = atoms.len() / dim.max(1);
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // absorb rounding so the total is within tolerance for any n
        if n > 0 {
            let rest: f64 = weights[1..].iter().sum();
            weights[0] = 1.0 - rest;
        }
        Self::new(dim, atoms, weights)
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self {
            dim: x.len(),
            atoms: x.to_vec(),
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.atoms.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for j in 0..self.dim {
                m[j] += w * x[j];
            }
        }
        m
    }

    /// Weighted variance of each coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for j in 0..self.dim {
                v[j] += w * (x[j] - m[j]).powi(2);
            }
        }
        v
    }

    /// Projection onto the direction `u` (not necessarily normalized).
    fn project(&self, u: &[f64]) -> DiscreteMeasure {
        let atoms = self
            .atoms
            .chunks_exact(self.dim)
            .map(|x| x.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect();
        DiscreteMeasure {
            dim: 1,
            atoms,
            weights: self.weights.clone(),
        }
    }

    /// CSV with columns `x_1..x_d,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x_{j}")).collect();
        writeln!(w, "{},weight", header.join(","))?;
        for (x, wt) in self.iter() {
            let row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{wt:?}", row.join(","))?;
        }
        Ok(())
    }
}

/// Weighted trajectories of an ensemble.
#[derive(Clone, Debug)]
pub struct PathMeasure<'a> {
    ensemble: &'a PathEnsemble,
    atoms: Vec<usize>,
    weights: Vec<f64>,
}

impl<'a> PathMeasure<'a> {
    pub fn new(ensemble: &'a PathEnsemble, atoms: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::config("path measure needs matching, nonempty atoms and weights"));
        }
        if atoms.iter().any(|&i| i >= ensemble.particles()) {
            return Err(Error::config("path measure atom out of range"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("path measure weights must be a probability vector"));
        }
        Ok(Self {
            ensemble,
            atoms,
            weights,
        })
    }

    /// Empirical measure of all trajectories.
    pub fn empirical(ensemble: &'a PathEnsemble) -> Self {
        let n = ensemble.particles();
        Self {
            ensemble,
            atoms: (0..n).collect(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn ensemble(&self) -> &'a PathEnsemble {
        self.ensemble
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], f64)> + '_ {
        let ens = self.ensemble;
        self.atoms.iter().zip(&self.weights).map(move |(&i, &w)| (ens.path(i), w))
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Realized control values `u_i(t_k)`, piecewise constant on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlRecord {
    particles: usize,
    steps: usize,
    noise_dim: usize,
    dt: f64,
    values: Vec<f64>,
}

impl ControlRecord {
    pub fn zeros(particles: usize, steps: usize, noise_dim: usize, dt: f64) -> Self {
        Self {
            particles,
            steps,
            noise_dim,
            dt,
            values: vec![0.0; particles * steps * noise_dim],
        }
    }

    pub fn from_values(particles: usize, steps: usize, noise_dim: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != particles * steps * noise_dim {
            return Err(Error::dim("control record size does not match its shape"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("control record entries must be finite"));
        }
        Ok(Self {
            particles,
            steps,
            noise_dim,
            dt,
            values,
        })
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let len = self.steps * self.noise_dim;
        &self.values[i * len..(i + 1) * len]
    }

    pub fn value(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.steps + k) * self.noise_dim;
        &self.values[start..start + self.noise_dim]
    }

    pub(crate) fn from_raw(particles: usize, steps: usize, noise_dim: usize, dt: f64, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), particles * steps * noise_dim);
        Self {
            particles,
            steps,
            noise_dim,
            dt,
            values,
        }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn row_len(&self) -> usize {
        self.steps * self.noise_dim
    }
}

/// First and second time-integrated moments of one particle's control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RelaxedMoments {
    pub first: f64,
    pub second: f64,
}

pub fn relaxed_moments(rec: &ControlRecord, particle: usize) -> Result<RelaxedMoments> {
    if particle >= rec.particles {
        return Err(Error::config(format!(
            "particle {particle} out of range for {} particles",
            rec.particles
        )));
    }
    let (mut first, mut second) = (0.0, 0.0);
    for u in rec.row(particle).chunks_exact(rec.noise_dim) {
        let sq: f64 = u.iter().map(|v| v * v).sum();
        first += sq.sqrt() * rec.dt;
        second += sq * rec.dt;
    }
    Ok(RelaxedMoments { first, second })
}

/// Equal-weight empirical measure over `(state path, control, noise path)`
/// triples sharing one time grid.
#[derive(Clone, Copy, Debug)]
pub struct OccupationMeasure<'a> {
    states: &'a PathEnsemble,
    controls: &'a ControlRecord,
    noise: &'a NoiseEnsemble,
}

impl<'a> OccupationMeasure<'a> {
    pub fn particles(&self) -> usize {
        self.states.particles()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.particles() as f64
    }

    pub fn triple(&self, i: usize) -> (&'a [f64], &'a [f64], Vec<f64>) {
        (self.states.path(i), self.controls.row(i), self.noise.path(i))
    }

    pub fn controls(&self) -> &'a ControlRecord {
        self.controls
    }

    /// `∫ g dQ` with `g(r) = ∫|y|² r(dy × dt)`: the mean quadratic control energy.
    pub fn control_cost(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.particles() {
            total += relaxed_moments(self.controls, i).map(|m| m.second).unwrap_or(f64::NAN);
        }
        total / self.particles() as f64
    }
}

pub fn occupation_measure(out: &SimOutput) -> Result<OccupationMeasure<'_>> {
    let controls = out.controls.as_ref().ok_or(Error::MissingControls)?;
    let (s, n) = (&out.states, &out.noise);
    if controls.particles() != s.particles()
        || n.particles() != s.particles()
        || controls.steps() != s.steps()
        || n.steps() != s.steps()
    {
        return Err(Error::dim("occupation measure components are not aligned"));
    }
    Ok(OccupationMeasure {
        states: s,
        controls,
        noise: n,
    })
}

/// Marginal of the ensemble's empirical measure at grid time `t`.
pub fn empirical_marginal(ens: &PathEnsemble, t: f64) -> Result<DiscreteMeasure> {
    let k = ens.grid_index(t)?;
    ens.marginal(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TransportMethod {
    ExactQuantile,
    ExactTransport,
    /// Plan cost of an entropic approximation; overshoots the true value by
    /// at most `error_bound`.
    Entropic { regularization: f64, error_bound: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransportReport {
    pub value: f64,
    pub method: TransportMethod,
}

pub fn wasserstein1(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> Result<f64> {
    wasserstein1_report(m1, m2).map(|r| r.value)
}

pub fn wasserstein1_report(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> Result<TransportReport> {
    if m1.dim() != m2.dim() {
        return Err(Error::dim(format!(
            "cannot compare measures of dimension {} and {}",
            m1.dim(),
            m2.dim()
        )));
    }
    let (m1, m2) = canonical_pair(m1, m2);
    if m1.dim() == 1 {
        return Ok(TransportReport {
            value: w1_quantile(m1, m2),
            method: TransportMethod::ExactQuantile,
        });
    }
    let cost = |i: usize, j: usize| euclid(m1.atom(i), m2.atom(j));
    if m1.len() <= EXACT_TRANSPORT_LIMIT && m2.len() <= EXACT_TRANSPORT_LIMIT {
        return Ok(TransportReport {
            value: transport_exact(m1.weights(), m2.weights(), cost),
            method: TransportMethod::ExactTransport,
        });
    }
    let (value, regularization, error_bound) = transport_entropic(m1.weights(), m2.weights(), cost);
    Ok(TransportReport {
        value,
        method: TransportMethod::Entropic {
            regularization,
            error_bound,
        },
    })
}

/// Orders the arguments so that metric evaluations are bitwise symmetric.
fn canonical_pair<'a>(a: &'a DiscreteMeasure, b: &'a DiscreteMeasure) -> (&'a DiscreteMeasure, &'a DiscreteMeasure) {
    let key = |m: &DiscreteMeasure| {
        (m.len(), m.atoms.iter().chain(&m.weights).map(|v| v.to_bits()).collect::<Vec<u64>>())
    };
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `∫ |F1 - F2| dx` on the merged support.
fn w1_quantile(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> f64 {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(m1.len() + m2.len());
    events.extend(m1.atoms.iter().zip(&m1.weights).map(|(&x, &w)| (x, w)));
    events.extend(m2.atoms.iter().zip(&m2.weights).map(|(&x, &w)| (x, -w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut area = 0.0;
    let mut cdf_gap = 0.0;
    for pair in events.windows(2) {
        cdf_gap += pair[0].1;
        area += cdf_gap.abs() * (pair[1].0 - pair[0].0);
    }
    area
}

/// Exact discrete transport by successive shortest augmenting paths with
/// node potentials (dense Dijkstra).
fn transport_exact(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    const EPS: f64 = 1e-15;
    let (n, m) = (a.len(), b.len());
    let c: Vec<f64> = (0..n * m).map(|idx| cost(idx / m, idx % m)).collect();
    let mut flow = vec![0.0; n * m];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    // sources with remaining supply always sit at distance 0, so their
    // potential never moves from 0
    let mut pot_src = vec![0.0; n];
    let mut pot_snk = vec![0.0; m];
    let mut dist = vec![f64::INFINITY; n + m];
    let mut parent = vec![usize::MAX; n + m];
    let mut done = vec![false; n + m];

    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= 1e-13 || demand.iter().all(|d| *d <= EPS) {
            break;
        }
        dist.fill(f64::INFINITY);
        parent.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n + m {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                let i = u;
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (c[i * m + j] + pot_src[i] - pot_snk[j]).max(0.0);
                    if best + rc < dist[v] {
                        dist[v] = best + rc;
                        parent[v] = i;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= EPS {
                        continue;
                    }
                    let rc = (-c[i * m + j] + pot_snk[j] - pot_src[i]).max(0.0);
                    if best + rc < dist[i] {
                        dist[i] = best + rc;
                        parent[i] = u;
                    }
                }
            }
        }
        let target = (0..m)
            .filter(|&j| demand[j] > EPS && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]));
        let Some(t) = target else { break };
        let cap = dist[n + t];
        for i in 0..n {
            pot_src[i] += dist[i].min(cap);
        }
        for j in 0..m {
            pot_snk[j] += dist[n + j].min(cap);
        }

        // walk back to the originating source and find the bottleneck
        let mut delta = demand[t];
        let mut v = n + t;
        loop {
            let p = parent[v];
            if p == usize::MAX {
                delta = delta.min(supply[v]);
                break;
            }
            if v < n {
                // backward arc sink p -> source v
                delta = delta.min(flow[v * m + (p - n)]);
            }
            v = p;
        }
        let origin = v;
        let mut v = n + t;
        while v != origin {
            let p = parent[v];
            if v >= n {
                flow[p * m + (v - n)] += delta;
            } else {
                flow[v * m + (p - n)] -= delta;
            }
            v = p;
        }
        supply[origin] -= delta;
        demand[t] -= delta;
    }
    flow.iter().zip(&c).map(|(f, c)| f * c).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn. Returns `(plan cost, regularization, error bound)`.
fn transport_entropic(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64 + Sync) -> (f64, f64, f64) {
    let (n, m) = (a.len(), b.len());
    let mut max_cost: f64 = 0.0;
    for i in (0..n).step_by((n / 64).max(1)) {
        for j in (0..m).step_by((m / 64).max(1)) {
            max_cost = max_cost.max(cost(i, j));
        }
    }
    let eps = (0.01 * max_cost).max(1e-12);
    let log_a: Vec<f64> = a.iter().map(|w| w.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.max(1e-300).ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..500 {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost(i, j)) / eps + log_b[j]));
            f[i] = -eps * lse;
        }
        let mut marginal_err = 0.0;
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost(i, j)) / eps + log_a[i]));
            let new = -eps * lse;
            marginal_err += ((new - g[j]) / eps).abs().min(1.0) * b[j];
            g[j] = new;
        }
        if marginal_err < 1e-9 {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let p = ((f[i] + g[j] - c) / eps + log_a[i] + log_b[j]).exp();
            total += p * c;
        }
    }
    (total, eps, eps * ((n * m) as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundedLipschitzReport {
    pub value: f64,
    /// False when `value` is only a certified lower bound (d > 1).
    pub exact: bool,
}

pub fn bounded_lipschitz(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> Result<f64> {
    bounded_lipschitz_report(m1, m2).map(|r| r.value)
}

/// Bounded-Lipschitz distance. Exact in one dimension; in higher dimension
/// the maximum of the exact distances between projections onto the
/// coordinate axes and the normalized pairwise diagonals `(e_j ± e_l)/√2`,
/// which is a lower bound.
pub fn bounded_lipschitz_report(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> Result<BoundedLipschitzReport> {
    if m1.dim() != m2.dim() {
        return Err(Error::dim(format!(
            "cannot compare measures of dimension {} and {}",
            m1.dim(),
            m2.dim()
        )));
    }
    let (m1, m2) = canonical_pair(m1, m2);
    let d = m1.dim();
    if d == 1 {
        return Ok(BoundedLipschitzReport {
            value: bl_1d(m1, m2),
            exact: true,
        });
    }
    let mut dirs = Vec::new();
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        dirs.push(e);
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..d {
        for l in j + 1..d {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[j] = h;
                e[l] = s * h;
                dirs.push(e);
            }
        }
    }
    let value = dirs
        .iter()
        .map(|u| bl_1d(&m1.project(u), &m2.project(u)))
        .fold(0.0, f64::max);
    Ok(BoundedLipschitzReport { value, exact: false })
}

/// Exact one-dimensional bounded-Lipschitz distance.
///
/// Maximizes `Σ w_i f_i` over `|f_i| ≤ 1`, `|f_i - f_{i-1}| ≤ z_i - z_{i-1}`
/// on the merged support, by dynamic programming over concave piecewise
/// linear value functions on `[-1, 1]`.
fn bl_1d(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> f64 {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(m1.len() + m2.len());
    events.extend(m1.atoms.iter().zip(&m1.weights).map(|(&x, &w)| (x, w)));
    events.extend(m2.atoms.iter().zip(&m2.weights).map(|(&x, &w)| (x, -w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut support: Vec<(f64, f64)> = Vec::new();
    for (x, w) in events {
        match support.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => support.push((x, w)),
        }
    }

    // breakpoints (f, value), strictly increasing in f, covering [-1, 1]
    let mut v: Vec<(f64, f64)> = vec![(-1.0, -support[0].1), (1.0, support[0].1)];
    for idx in 1..support.len() {
        let gap = support[idx].0 - support[idx - 1].0;
        v = dilate(&v, gap);
        let w = support[idx].1;
        for p in v.iter_mut() {
            p.1 += w * p.0;
        }
    }
    v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(0.0)
}

/// `f ↦ max_{|f' - f| ≤ g} V(f')` restricted to `[-1, 1]`, for concave `V`.
fn dilate(v: &[(f64, f64)], g: f64) -> Vec<(f64, f64)> {
    let peak = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap_or(Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut shifted: Vec<(f64, f64)> = Vec::with_capacity(v.len() + 2);
    for p in &v[..=peak] {
        shifted.push((p.0 - g, p.1));
    }
    for p in &v[peak..] {
        shifted.push((p.0 + g, p.1));
    }
    let eval = |x: f64| -> f64 {
        if x <= shifted[0].0 {
            return shifted[0].1;
        }
        for w in shifted.windows(2) {
            if x <= w[1].0 {
                let span = w[1].0 - w[0].0;
                if span <= 0.0 {
                    return w[1].1.max(w[0].1);
                }
                return w[0].1 + (x - w[0].0) / span * (w[1].1 - w[0].1);
            }
        }
        shifted[shifted.len() - 1].1
    };
    let mut out = vec![(-1.0, eval(-1.0))];
    for p in &shifted {
        if p.0 > -1.0 && p.0 < 1.0 && p.0 - out[out.len() - 1].0 > 1e-15 {
            out.push(*p);
        }
    }
    if 1.0 - out[out.len() - 1].0 > 1e-15 {
        out.push((1.0, eval(1.0)));
    } else {
        let last = out.len() - 1;
        out[last] = (1.0, eval(1.0));
    }
    out
}

/// Finite-sample stand-in for the distance between relaxed controls: the
/// transport distance between the time-stamped control samples `(t_k, u_k)`
/// plus the gap between first moments. A surrogate, not a metric for the
/// weak-plus-first-moment topology itself.
pub fn relaxed_control_surrogate(a: &ControlRecord, i: usize, b: &ControlRecord, j: usize) -> Result<f64> {
    if a.noise_dim() != b.noise_dim() {
        return Err(Error::dim("control records have different noise dimensions"));
    }
    let sample = |rec: &ControlRecord, p: usize| -> Result<DiscreteMeasure> {
        let d = rec.noise_dim() + 1;
        let mut atoms = Vec::with_capacity(rec.steps() * d);
        for k in 0..rec.steps() {
            atoms.push(k as f64 * rec.dt());
            atoms.extend_from_slice(rec.value(p, k));
        }
        DiscreteMeasure::uniform(d, atoms)
    };
    let w = wasserstein1(&sample(a, i)?, &sample(b, j)?)?;
    let gap = (relaxed_moments(a, i)?.first - relaxed_moments(b, j)?.first).abs();
    Ok(w + gap)
}
