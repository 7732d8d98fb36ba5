//! Euler-Maruyama engines for the particle system, its controlled version,
//! the mean-field limit and the delay variants.
//!
//! All engines share one integrator. Per step the measure features are
//! reduced once, in particle order, from the states at `t_k`; afterwards the
//! particles are advanced independently (in parallel for large ensembles).
//! Brownian increments come from counter-based streams keyed by
//! `(seed, stream label, step)`, so the thread schedule never changes a bit
//! of the output.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::control::{ControlPolicy, PolicyContext};
use crate::error::{Error, Result};
use crate::measures::{wasserstein1, ControlRecord, DiscreteMeasure};
use crate::model::{CoefficientModel, MeasureFeatures, ModelKind, PathPrefix, SimConfig};
use crate::rng::{domain, NormalStream};

/// Below this many particles a step runs sequentially.
const PARALLEL_THRESHOLD: usize = 256;

const GRID_MAGIC: &[u8; 8] = b"MVLGRID\0";
const GRID_VERSION: u32 = 1;
const DTYPE_F64_LE: u32 = 1;

/// `N` trajectories of dimension `d` on a uniform grid of `steps + 1` points.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    particles: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn from_values(particles: usize, steps: usize, dim: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != particles * (steps + 1) * dim {
            return Err(Error::dim("ensemble size does not match its shape"));
        }
        Ok(Self {
            particles,
            steps,
            dim,
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

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn row_len(&self) -> usize {
        (self.steps + 1) * self.dim
    }

    /// Whole trajectory of particle `i`, `(steps + 1) * dim` values.
    pub fn path(&self, i: usize) -> &[f64] {
        let r = self.row_len();
        &self.values[i * r..(i + 1) * r]
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let start = i * self.row_len() + k * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn prefix(&self, i: usize, k: usize) -> PathPrefix<'_> {
        PathPrefix::new(&self.path(i)[..(k + 1) * self.dim], self.dim, self.dt)
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        self.state(i, self.steps)
    }

    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let pos = t / self.dt;
        let k = pos.round();
        if !(k >= 0.0 && k <= self.steps as f64) || (pos - k).abs() > 1e-8 {
            return Err(Error::OffGrid(t));
        }
        Ok(k as usize)
    }

    /// States at step `k` stacked particle-major.
    pub fn states_at(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.particles * self.dim);
        for i in 0..self.particles {
            out.extend_from_slice(self.state(i, k));
        }
        out
    }

    /// Equal-weight marginal at step `k`.
    pub fn marginal(&self, k: usize) -> Result<DiscreteMeasure> {
        DiscreteMeasure::uniform(self.dim, self.states_at(k))
    }

    /// CSV with columns `particle,step,time,x_1..x_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (1..=self.dim).map(|j| format!("x_{j}")).collect();
        writeln!(w, "particle,step,time,{}", cols.join(","))?;
        for i in 0..self.particles {
            for k in 0..=self.steps {
                let x: Vec<String> = self.state(i, k).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{i},{k},{:?},{}", self.time(k), x.join(","))?;
            }
        }
        Ok(())
    }

    /// Binary grid: 8-byte magic `MVLGRID\0`, then little-endian `u32`
    /// version, dtype code (1 = f64), rank (3) and a reserved zero, then
    /// the `u64` extents `[particles, steps + 1, dim]`, the `f64` step size,
    /// and finally the values in row-major order (particle, step, coordinate).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for v in [GRID_VERSION, DTYPE_F64_LE, 3, 0] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.particles as u64, (self.steps + 1) as u64, self.dim as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::config("not a path grid file"));
        }
        let mut u32s = [0u32; 4];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        if u32s[0] != GRID_VERSION || u32s[1] != DTYPE_F64_LE || u32s[2] != 3 {
            return Err(Error::config("unsupported path grid header"));
        }
        let mut dims = [0usize; 3];
        for v in dims.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b) as usize;
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let dt = f64::from_le_bytes(b);
        if dims[1] == 0 {
            return Err(Error::config("path grid needs at least one time point"));
        }
        let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
        for v in values.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Self::from_values(dims[0], dims[1] - 1, dims[2], dt, values)
    }
}

/// Brownian increments `ΔW_i(t_k)`, one counter-based stream per particle.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseEnsemble {
    particles: usize,
    steps: usize,
    noise_dim: usize,
    dt: f64,
    increments: Vec<f64>,
    stream_ids: Vec<u64>,
}

impl NoiseEnsemble {
    /// Draws `N(0, dt)` increments; particle `i` uses stream `stream_ids[i]`.
    pub fn generate(seed: u64, stream_ids: Vec<u64>, steps: usize, noise_dim: usize, dt: f64) -> Self {
        let particles = stream_ids.len();
        let row = steps * noise_dim;
        let mut increments = vec![0.0; particles * row];
        let scale = dt.sqrt();
        let fill = |(chunk, &label): (&mut [f64], &u64)| {
            let mut stream = NormalStream::new(seed, domain::BROWNIAN, label, noise_dim);
            for (k, slot) in chunk.chunks_exact_mut(noise_dim).enumerate() {
                stream.fill_at(k as u64, slot);
                for v in slot.iter_mut() {
                    *v *= scale;
                }
            }
        };
        if row > 0 {
            if particles >= PARALLEL_THRESHOLD {
                increments.par_chunks_mut(row).zip(stream_ids.par_iter()).for_each(fill);
            } else {
                increments.chunks_mut(row).zip(stream_ids.iter()).for_each(fill);
            }
        }
        Self {
            particles,
            steps,
            noise_dim,
            dt,
            increments,
            stream_ids,
        }
    }

    /// Default labels `0..particles`.
    pub fn standard(seed: u64, particles: usize, steps: usize, noise_dim: usize, dt: f64) -> Self {
        Self::generate(seed, (0..particles as u64).collect(), steps, noise_dim, dt)
    }

    pub fn zeros(particles: usize, steps: usize, noise_dim: usize, dt: f64) -> Self {
        Self {
            particles,
            steps,
            noise_dim,
            dt,
            increments: vec![0.0; particles * steps * noise_dim],
            stream_ids: (0..particles as u64).collect(),
        }
    }

    pub fn from_increments(particles: usize, steps: usize, noise_dim: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != particles * steps * noise_dim {
            return Err(Error::dim("noise size does not match its shape"));
        }
        Ok(Self {
            particles,
            steps,
            noise_dim,
            dt,
            increments,
            stream_ids: (0..particles as u64).collect(),
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

    pub fn stream_ids(&self) -> &[u64] {
        &self.stream_ids
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.steps + k) * self.noise_dim;
        &self.increments[start..start + self.noise_dim]
    }

    /// `W_i(t_0), …, W_i(t_steps)` with `W_i(0) = 0`.
    pub fn path(&self, i: usize) -> Vec<f64> {
        let d1 = self.noise_dim;
        let mut out = vec![0.0; (self.steps + 1) * d1];
        for k in 0..self.steps {
            let dw = self.increment(i, k);
            for l in 0..d1 {
                out[(k + 1) * d1 + l] = out[k * d1 + l] + dw[l];
            }
        }
        out
    }

    /// Same Brownian paths on a grid with half as many steps.
    pub fn coarsen(&self) -> Result<Self> {
        if self.steps % 2 != 0 {
            return Err(Error::config("cannot coarsen an odd number of steps"));
        }
        let steps = self.steps / 2;
        let d1 = self.noise_dim;
        let mut increments = Vec::with_capacity(self.particles * steps * d1);
        for i in 0..self.particles {
            for k in 0..steps {
                let (a, b) = (self.increment(i, 2 * k), self.increment(i, 2 * k + 1));
                increments.extend(a.iter().zip(b).map(|(x, y)| x + y));
            }
        }
        Ok(Self {
            particles: self.particles,
            steps,
            noise_dim: d1,
            dt: self.dt * 2.0,
            increments,
            stream_ids: self.stream_ids.clone(),
        })
    }
}

/// Result of one engine run.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub states: PathEnsemble,
    pub noise: NoiseEnsemble,
    /// Present exactly when a policy drove the run.
    pub controls: Option<ControlRecord>,
    /// Measure features the coefficients saw at `t_0, …, t_{steps-1}`.
    pub features: Vec<MeasureFeatures>,
    /// First grid index holding a non-finite state.
    pub blow_up: Option<usize>,
}

impl SimOutput {
    pub fn blown_up(&self) -> bool {
        self.blow_up.is_some()
    }
}

/// Where the coefficients take their measure argument from.
#[derive(Clone, Copy, Debug)]
pub enum MeasureSource<'a> {
    /// Empirical measure of the simulated particles at the current step.
    Empirical,
    /// A fixed flow of features, one per step (frozen measure flow).
    Frozen(&'a [MeasureFeatures]),
}

struct Scratch {
    b: Vec<f64>,
    sigma: Vec<f64>,
    u: Vec<f64>,
}

fn features_at(values: &[f64], n: usize, row: usize, k: usize, d: usize, with_sample: bool) -> Result<MeasureFeatures> {
    let mut pts = Vec::with_capacity(n * d);
    for i in 0..n {
        pts.extend_from_slice(&values[i * row + k * d..i * row + (k + 1) * d]);
    }
    let f = MeasureFeatures::from_points(&pts, d);
    if with_sample {
        Ok(f.with_sample(DiscreteMeasure::uniform(d, pts)?))
    } else {
        Ok(f)
    }
}

/// General engine behind all `simulate_*` entry points.
pub fn simulate_with(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: Option<&ControlPolicy>,
    noise: Option<NoiseEnsemble>,
    source: MeasureSource<'_>,
) -> Result<SimOutput> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if let Some(p) = policy {
        p.bind(model, cfg)?;
    }
    let (n, steps, d, d1, dt) = (cfg.particles, cfg.steps, cfg.dim, cfg.noise_dim, cfg.dt());
    let noise = match noise {
        Some(z) => {
            if z.particles() != n || z.steps() != steps || z.noise_dim() != d1 {
                return Err(Error::dim(format!(
                    "noise is {}x{}x{} but the run needs {n}x{steps}x{d1}",
                    z.particles(),
                    z.steps(),
                    z.noise_dim()
                )));
            }
            z
        }
        None => NoiseEnsemble::standard(cfg.seed, n, steps, d1, dt),
    };
    if let MeasureSource::Frozen(f) = source {
        if f.len() < steps || f.iter().any(|m| m.dim() != d) {
            return Err(Error::dim("frozen measure flow does not cover the grid"));
        }
    }

    let x0 = cfg.initial.sample(n, d, cfg.seed)?;
    let row = (steps + 1) * d;
    let mut values = vec![f64::NAN; n * row];
    for i in 0..n {
        values[i * row..i * row + d].copy_from_slice(&x0[i * d..(i + 1) * d]);
    }
    let crow = if policy.is_some() { steps * d1 } else { 1 };
    let mut ctrl = vec![0.0; n * crow];
    let mut features = Vec::with_capacity(steps);
    let mut blow_up = None;
    if x0.iter().any(|v| !v.is_finite()) {
        blow_up = Some(0);
    }

    for k in 0..steps {
        if blow_up.is_some() {
            break;
        }
        let t = k as f64 * dt;
        let feats = match source {
            MeasureSource::Empirical => features_at(&values, n, row, k, d, model.needs_sample())?,
            MeasureSource::Frozen(f) => f[k].clone(),
        };
        let noise_ref = &noise;
        let feats_ref = &feats;
        let advance = |scratch: &mut Scratch, (i, (path_row, ctrl_row)): (usize, (&mut [f64], &mut [f64]))| -> Result<()> {
            let (done, rest) = path_row.split_at_mut((k + 1) * d);
            let path = PathPrefix::new(&*done, d, dt);
            let wrap = |e: Error| Error::Model {
                particle: i,
                step: k,
                source: Box::new(e),
            };
            model.drift(t, &path, feats_ref, &mut scratch.b).map_err(wrap)?;
            model.diffusion(t, &path, feats_ref, &mut scratch.sigma).map_err(wrap)?;
            if let Some(p) = policy {
                let ctx = PolicyContext {
                    particle: i,
                    step: k,
                    time: t,
                    state: path.current(),
                    features: feats_ref,
                };
                p.evaluate(&ctx, &mut scratch.u).map_err(|reason| Error::Policy {
                    particle: i,
                    step: k,
                    reason,
                })?;
                if scratch.u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Policy {
                        particle: i,
                        step: k,
                        reason: "non-finite control value".into(),
                    });
                }
                ctrl_row[k * d1..(k + 1) * d1].copy_from_slice(&scratch.u);
            }
            let x = path.current();
            let dw = noise_ref.increment(i, k);
            let next = &mut rest[..d];
            for j in 0..d {
                let s = &scratch.sigma[j * d1..(j + 1) * d1];
                let mut drift = scratch.b[j];
                if policy.is_some() {
                    let su: f64 = s.iter().zip(&scratch.u).map(|(a, b)| a * b).sum();
                    if su != 0.0 {
                        drift += su;
                    }
                }
                let diffusion: f64 = s.iter().zip(dw).map(|(a, b)| a * b).sum();
                next[j] = x[j] + drift * dt + diffusion;
            }
            Ok(())
        };
        let init = || Scratch {
            b: vec![0.0; d],
            sigma: vec![0.0; d * d1],
            u: vec![0.0; d1],
        };
        let outcomes: Vec<Result<()>> = if n >= PARALLEL_THRESHOLD {
            values
                .par_chunks_mut(row)
                .zip(ctrl.par_chunks_mut(crow))
                .enumerate()
                .map_init(init, advance)
                .collect()
        } else {
            let mut scratch = init();
            values
                .chunks_mut(row)
                .zip(ctrl.chunks_mut(crow))
                .enumerate()
                .map(|item| advance(&mut scratch, item))
                .collect()
        };
        if let Some(err) = outcomes.into_iter().find_map(|r| r.err()) {
            return Err(err);
        }
        features.push(feats);
        if (0..n).any(|i| values[i * row + (k + 1) * d..i * row + (k + 2) * d].iter().any(|v| !v.is_finite())) {
            blow_up = Some(k + 1);
        }
    }

    let controls = match policy {
        Some(_) => Some(ControlRecord::from_raw(n, steps, d1, dt, ctrl)),
        None => None,
    };
    Ok(SimOutput {
        states: PathEnsemble::from_values(n, steps, d, dt, values)?,
        noise,
        controls,
        features,
        blow_up,
    })
}

/// Particle system driven by its own empirical measure.
pub fn simulate_uncontrolled(cfg: &SimConfig, model: &CoefficientModel) -> Result<SimOutput> {
    simulate_with(cfg, model, None, None, MeasureSource::Empirical)
}

/// Controlled particle system; the control enters through `σ u`. A supplied
/// noise ensemble replaces the internally generated one.
pub fn simulate_controlled(
    cfg: &SimConfig,
    model: &CoefficientModel,
    policy: &ControlPolicy,
    noise_override: Option<NoiseEnsemble>,
) -> Result<SimOutput> {
    simulate_with(cfg, model, Some(policy), noise_override, MeasureSource::Empirical)
}

/// Delay (path-dependent) particle system, optionally controlled.
pub fn simulate_delay(cfg: &SimConfig, model: &CoefficientModel, policy: Option<&ControlPolicy>) -> Result<SimOutput> {
    if model.kind() != ModelKind::PathDependent {
        return Err(Error::config("simulate_delay needs a path-dependent model"));
    }
    simulate_with(cfg, model, policy, None, MeasureSource::Empirical)
}

#[derive(Clone, Debug)]
pub struct McKeanVlasovFlow {
    /// Marginal law at every grid time.
    pub flow: Vec<DiscreteMeasure>,
    /// Features of `flow` at `t_0, …, t_steps`.
    pub features: Vec<MeasureFeatures>,
    pub ensemble: PathEnsemble,
    /// Max-over-time `W1` between the last two iterates.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Residuals stopped decreasing over the final three iterates.
    pub non_convergence: bool,
}

fn flow_features(ens: &PathEnsemble, with_sample: bool) -> Result<Vec<MeasureFeatures>> {
    let row = (ens.steps() + 1) * ens.dim();
    (0..=ens.steps())
        .map(|k| features_at(ens.values(), ens.particles(), row, k, ens.dim(), with_sample))
        .collect()
}

/// Mean-field limit by Picard iteration on the marginal flow.
///
/// `cfg.particles` is the sample size `M`. Iterate 0 freezes the measure at
/// the initial law (no interaction); iterate `j` simulates `M` copies whose
/// coefficients see the frozen flow of iterate `j - 1`. All iterates share
/// the initial sample and the Brownian increments, so the residual measures
/// the fixed-point defect rather than sampling noise.
pub fn simulate_mckean_vlasov(cfg: &SimConfig, model: &CoefficientModel, picard_iters: usize) -> Result<McKeanVlasovFlow> {
    if picard_iters < 1 {
        return Err(Error::config("picard_iters must be at least 1"));
    }
    cfg.validate()?;
    cfg.check_model(model)?;
    let (m, steps, d1, dt) = (cfg.particles, cfg.steps, cfg.noise_dim, cfg.dt());
    let noise = NoiseEnsemble::standard(cfg.seed, m, steps, d1, dt);
    let x0 = cfg.initial.sample(m, cfg.dim, cfg.seed)?;
    let mut initial = MeasureFeatures::from_points(&x0, cfg.dim);
    if model.needs_sample() {
        initial = initial.with_sample(DiscreteMeasure::uniform(cfg.dim, x0.clone())?);
    }
    let mut frozen = vec![initial; steps];

    let run = |frozen: &[MeasureFeatures]| -> Result<PathEnsemble> {
        let out = simulate_with(cfg, model, None, Some(noise.clone()), MeasureSource::Frozen(frozen))?;
        if let Some(step) = out.blow_up {
            return Err(Error::BlowUp { step });
        }
        Ok(out.states)
    };

    let mut ensemble = run(&frozen)?;
    let mut features = flow_features(&ensemble, model.needs_sample())?;
    let mut history = Vec::with_capacity(picard_iters);
    for _ in 0..picard_iters {
        frozen = features[..steps].to_vec();
        let next = run(&frozen)?;
        let mut residual: f64 = 0.0;
        for k in 0..=steps {
            residual = residual.max(wasserstein1(&ensemble.marginal(k)?, &next.marginal(k)?)?);
        }
        history.push(residual);
        ensemble = next;
        features = flow_features(&ensemble, model.needs_sample())?;
    }
    let residual = *history.last().unwrap();
    let non_convergence = history.len() >= 3 && {
        let tail = &history[history.len() - 3..];
        tail[0] <= tail[1] && tail[1] <= tail[2] && tail[2] > 1e-10
    };
    let flow = (0..=steps).map(|k| ensemble.marginal(k)).collect::<Result<Vec<_>>>()?;
    Ok(McKeanVlasovFlow {
        flow,
        features,
        ensemble,
        residual,
        residual_history: history,
        non_convergence,
    })
}
