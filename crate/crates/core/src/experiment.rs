//! Declarative experiments: parse a spec, run it, write `manifest.json`,
//! `results.json` and optional path dumps, and re-run bundles to check that
//! results reproduce byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::control::{
    optimize_control, rate_function_estimate, ControlPolicy, PolicyFamily, RateSettings, SearchSettings, TargetFlow,
};
use crate::diag::{monomial_suite, PrefixStatistic, ResidualReport, TruncationSpec};
use crate::error::{Error, Result};
use crate::laplace::{estimate_cost, estimate_laplace, importance_sample_laplace, replicate_seed, run_replicates, Functional};
use crate::measures::wasserstein1;
use crate::model::{build_model, CoefficientModel, ModelKind, ModelRegistry, ModelSpec, SimConfig};
use crate::rng::{derive_seed, domain};
use crate::sim::{simulate_controlled, simulate_delay, simulate_mckean_vlasov, simulate_uncontrolled, PathEnsemble, SimOutput};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Versions of the individual modules recorded in every manifest.
pub const MODULE_VERSIONS: [(&str, &str); 7] = [
    ("model", "1"),
    ("sim", "1"),
    ("measures", "1"),
    ("laplace", "1"),
    ("control", "1"),
    ("diag", "1"),
    ("experiment", "1"),
];

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const BLOW_UP: i32 = 3;
    pub const ACCEPTANCE: i32 = 4;
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnknownFamily(_)
        | Error::Dimension(_)
        | Error::PolicyBinding(_)
        | Error::OffGrid(_)
        | Error::Json(_)
        | Error::Toml(_) => exit::CONFIG,
        Error::BlowUp { .. } => exit::BLOW_UP,
        Error::Acceptance(_) => exit::ACCEPTANCE,
        _ => exit::FAILURE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Simulate,
    MvLimit,
    LaplaceEstimate,
    CostEstimate,
    OptimizeControl,
    RateFunction,
    ImportanceSample,
    MartingaleSuite,
    LlnSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Simulate,
        ExperimentKind::MvLimit,
        ExperimentKind::LaplaceEstimate,
        ExperimentKind::CostEstimate,
        ExperimentKind::OptimizeControl,
        ExperimentKind::RateFunction,
        ExperimentKind::ImportanceSample,
        ExperimentKind::MartingaleSuite,
        ExperimentKind::LlnSweep,
    ];
}

/// Target flows for rate-function experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Law of `x0 + sigma W(t) + drift t` (one-dimensional, constant start).
    TiltedWiener {
        drift: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_atoms")]
        atoms: usize,
    },
    /// Flow of the uncontrolled mean-field limit of the configured model.
    MvLimit {
        #[serde(default = "default_mv_particles")]
        particles: usize,
        #[serde(default = "default_picard")]
        picard_iters: usize,
    },
}

fn default_sigma() -> f64 {
    1.0
}
fn default_atoms() -> usize {
    500
}
fn default_mv_particles() -> usize {
    20_000
}
fn default_picard() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentOptions {
    pub reps: usize,
    pub budget: usize,
    pub reps_per_eval: usize,
    pub picard_iters: usize,
    pub search: SearchSettings,
    pub rate: RateSettings,
    pub target: Option<TargetSpec>,
    pub particle_counts: Vec<usize>,
    pub replicates: usize,
    pub mv_particles: usize,
    pub truncation: TruncationSpec,
    pub weight: PrefixStatistic,
    /// Martingale suites are repeated under this constant control.
    pub constant_control: Option<Vec<f64>>,
    /// Acceptance band of martingale residuals in standard errors.
    pub z_threshold: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            reps: 1000,
            budget: 400,
            reps_per_eval: 32,
            picard_iters: default_picard(),
            search: SearchSettings::default(),
            rate: RateSettings::default(),
            target: None,
            particle_counts: vec![50, 200, 800],
            replicates: 20,
            mv_particles: default_mv_particles(),
            truncation: TruncationSpec { k: 10.0, a: 0.0 },
            weight: PrefixStatistic::Constant { value: 1.0 },
            constant_control: None,
            z_threshold: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub sim: SimConfig,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<Functional>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<ControlPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<PolicyFamily>,
    #[serde(default)]
    pub options: ExperimentOptions,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// `sha256` of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    BlowUp { step: usize },
    AcceptanceFailed(String),
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Ok => exit::OK,
            RunStatus::BlowUp { .. } => exit::BLOW_UP,
            RunStatus::AcceptanceFailed(_) => exit::ACCEPTANCE,
        }
    }
}

/// Outcome of one experiment before anything is written.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub results: Value,
    pub status: RunStatus,
    pub warnings: Vec<String>,
    /// File name and contents of bulk dumps.
    pub dumps: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    pub fn results_bytes(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(&self.results)?;
        s.push('\n');
        Ok(s.into_bytes())
    }
}

fn need<T: Clone>(opt: &Option<T>, what: &str) -> Result<T> {
    opt.clone().ok_or_else(|| Error::config(format!("this experiment kind needs `{what}`")))
}

fn moments_by_step(ens: &PathEnsemble, upto: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, d) = (ens.particles() as f64, ens.dim());
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for k in 0..=upto {
        let mut m = vec![0.0; d];
        for i in 0..ens.particles() {
            for (a, x) in m.iter_mut().zip(ens.state(i, k)) {
                *a += x;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        let mut v = vec![0.0; d];
        for i in 0..ens.particles() {
            for ((a, x), mu) in v.iter_mut().zip(ens.state(i, k)).zip(&m) {
                *a += (x - mu) * (x - mu);
            }
        }
        v.iter_mut().for_each(|a| *a /= n);
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

fn path_dumps(ens: &PathEnsemble, csv: bool, binary: bool) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    if csv {
        let mut buf = Vec::new();
        ens.write_csv(&mut buf)?;
        out.push(("paths.csv".to_string(), buf));
    }
    if binary {
        let mut buf = Vec::new();
        ens.write_binary(&mut buf)?;
        out.push(("paths.bin".to_string(), buf));
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn simulate_any(cfg: &SimConfig, model: &CoefficientModel, policy: Option<&ControlPolicy>) -> Result<SimOutput> {
    match (model.kind(), policy) {
        (ModelKind::PathDependent, p) => simulate_delay(cfg, model, p),
        (_, Some(p)) => simulate_controlled(cfg, model, p, None),
        (_, None) => simulate_uncontrolled(cfg, model),
    }
}

/// Runs an experiment in memory. Nothing here reads the clock or the
/// environment, so equal specs give equal results.
pub fn run_experiment(spec: &ExperimentSpec, registry: &ModelRegistry, dump_paths: bool) -> Result<RunOutput> {
    let cfg = &spec.sim;
    cfg.validate()?;
    let model = build_model(&spec.model, cfg, registry)?;
    let o = &spec.options;
    let mut warnings = Vec::new();
    let mut dumps = Vec::new();
    let mut status = RunStatus::Ok;
    let config_hash = spec.config_hash()?;
    let body: Value = match spec.kind {
        ExperimentKind::Simulate => {
            let out = simulate_any(cfg, &model, spec.policy.as_ref())?;
            let last = out.blow_up.map_or(cfg.steps, |k| k.saturating_sub(1));
            if let Some(step) = out.blow_up {
                status = RunStatus::BlowUp { step };
            }
            let (mean, variance) = moments_by_step(&out.states, last);
            dumps = path_dumps(&out.states, true, dump_paths)?;
            json!({
                "particles": cfg.particles,
                "steps": cfg.steps,
                "dt": cfg.dt(),
                "blow_up": out.blow_up,
                "mean": mean,
                "variance": variance,
            })
        }
        ExperimentKind::MvLimit => {
            let r = simulate_mckean_vlasov(cfg, &model, o.picard_iters)?;
            let (mean, variance) = moments_by_step(&r.ensemble, cfg.steps);
            if dump_paths {
                dumps = path_dumps(&r.ensemble, true, true)?;
            }
            if r.non_convergence {
                warnings.push("Picard residuals stopped decreasing".into());
            }
            json!({
                "residual": r.residual,
                "residual_history": r.residual_history,
                "non_convergence": r.non_convergence,
                "mean": mean,
                "variance": variance,
            })
        }
        ExperimentKind::LaplaceEstimate => {
            let f = need(&spec.functional, "functional")?;
            if cfg.particles > 20 {
                warnings.push(format!(
                    "naive Laplace estimation with N = {} > 20: relative variance grows exponentially in N",
                    cfg.particles
                ));
            }
            json!({ "estimate": estimate_laplace(cfg, &model, &f, o.reps)? })
        }
        ExperimentKind::CostEstimate => {
            let f = need(&spec.functional, "functional")?;
            let policy = spec.policy.clone().unwrap_or_else(|| ControlPolicy::zero(cfg.noise_dim));
            json!({ "estimate": estimate_cost(cfg, &model, &policy, &f, o.reps)? })
        }
        ExperimentKind::OptimizeControl => {
            let f = need(&spec.functional, "functional")?;
            let family = spec.family.unwrap_or(PolicyFamily::OpenLoop { cells: 8 });
            let report = optimize_control(cfg, &model, &f, family, o.budget, o.reps_per_eval, &o.search)?;
            serde_json::to_value(report)?
        }
        ExperimentKind::RateFunction => {
            let target = match need(&o.target, "options.target")? {
                TargetSpec::TiltedWiener { drift, sigma, atoms } => {
                    if cfg.dim != 1 {
                        return Err(Error::config("tilted_wiener targets are one-dimensional"));
                    }
                    let x0 = match &cfg.initial {
                        crate::model::InitialCondition::Constant { value } => value[0],
                        _ => return Err(Error::config("tilted_wiener targets need a constant initial condition")),
                    };
                    let grid: Vec<f64> = (0..=cfg.steps).map(|k| cfg.time(k)).collect();
                    TargetFlow::gaussian_1d(&grid, atoms, |t| x0 + drift * t, |t| sigma * t.sqrt())?
                }
                TargetSpec::MvLimit { particles, picard_iters } => {
                    let mut c = cfg.clone();
                    c.particles = particles;
                    c.seed = derive_seed(cfg.seed, domain::SAMPLING, 0);
                    let r = simulate_mckean_vlasov(&c, &model, picard_iters)?;
                    TargetFlow::new(r.flow, crate::control::FlowSource::FromEnsemble)?
                }
            };
            let family = spec.family.unwrap_or(PolicyFamily::OpenLoop { cells: 8 });
            serde_json::to_value(rate_function_estimate(&target, cfg, &model, family, &o.rate)?)?
        }
        ExperimentKind::ImportanceSample => {
            let f = need(&spec.functional, "functional")?;
            let policy = need(&spec.policy, "policy")?;
            serde_json::to_value(importance_sample_laplace(cfg, &model, &policy, &f, o.reps)?)?
        }
        ExperimentKind::MartingaleSuite => {
            o.truncation.validate()?;
            let mut runs: Vec<(&str, SimOutput)> = vec![("zero", simulate_any(cfg, &model, None)?)];
            if let Some(c) = &o.constant_control {
                runs.push(("constant", simulate_any(cfg, &model, Some(&ControlPolicy::constant(c.clone())))?));
            }
            let mut all: Vec<(String, Vec<ResidualReport>)> = Vec::new();
            let mut failures = Vec::new();
            for (name, out) in &runs {
                if let Some(step) = out.blow_up {
                    return Err(Error::BlowUp { step });
                }
                let reports = monomial_suite(out, &model, &o.truncation, &o.weight)?;
                for r in &reports {
                    if !r.within(o.z_threshold) {
                        failures.push(format!("{name}: {} on [{}, {}]", r.f, r.t0, r.t1));
                    }
                }
                all.push((name.to_string(), reports));
            }
            if !failures.is_empty() {
                status = RunStatus::AcceptanceFailed(format!("residuals outside the band: {}", failures.join("; ")));
            }
            json!({
                "z_threshold": o.z_threshold,
                "all_within": failures.is_empty(),
                "controls": all.into_iter().map(|(n, r)| json!({"control": n, "residuals": r})).collect::<Vec<_>>(),
            })
        }
        ExperimentKind::LlnSweep => {
            if o.particle_counts.is_empty() || o.replicates == 0 {
                return Err(Error::config("lln_sweep needs particle counts and replicates"));
            }
            let mut c = cfg.clone();
            c.particles = o.mv_particles;
            let limit = simulate_mckean_vlasov(&c, &model, o.picard_iters)?;
            let terminal = &limit.flow[cfg.steps];
            let mut medians = Vec::new();
            let mut distances = Vec::new();
            for &n in &o.particle_counts {
                let base = derive_seed(cfg.seed, domain::SAMPLING, n as u64);
                let ds = run_replicates(o.replicates, |r| {
                    let mut c = cfg.clone();
                    c.particles = n;
                    c.seed = replicate_seed(base, r);
                    let out = simulate_uncontrolled(&c, &model)?;
                    if let Some(step) = out.blow_up {
                        return Err(Error::BlowUp { step });
                    }
                    wasserstein1(&out.states.marginal(cfg.steps)?, terminal)
                })?;
                medians.push(median(ds.clone()));
                distances.push(ds);
            }
            let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
            let halved = medians.last().unwrap() < &(0.5 * medians[0]);
            if !(decreasing && halved) {
                status = RunStatus::AcceptanceFailed(format!("medians {medians:?} do not shrink as required"));
            }
            json!({
                "particle_counts": o.particle_counts,
                "medians": medians,
                "distances": distances,
                "strictly_decreasing": decreasing,
                "last_below_half_first": halved,
                "limit_residual": limit.residual,
            })
        }
    };
    let mut results = json!({
        "kind": spec.kind,
        "config_hash": config_hash,
        "seed": cfg.seed,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut results, body) {
        dst.extend(src);
    }
    if !spec.functional.as_ref().map_or(true, Functional::is_bounded) {
        results["functional_label"] = json!(crate::laplace::UNBOUNDED_LABEL);
    }
    Ok(RunOutput {
        results,
        status,
        warnings,
        dumps,
    })
}

/// How to execute a spec on disk.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub dump_paths: bool,
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// What [`execute`] did.
#[derive(Clone, Debug)]
pub struct ExecutionSummary {
    pub exit_code: i32,
    pub warnings: Vec<String>,
    pub message: Option<String>,
}

fn write_error(dir: &Path, e: &Error) {
    let record = json!({
        "error": e.to_string(),
        "exit_code": exit_code(e),
        "kind": format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or("").to_string(),
    });
    let _ = fs::create_dir_all(dir);
    let _ = fs::write(dir.join("error.json"), serde_json::to_string_pretty(&record).unwrap_or_default() + "\n");
}

/// Runs `spec` and writes the bundle into `opts.out_dir`. Errors are
/// recorded in `error.json` and mapped to exit codes.
pub fn execute(mut spec: ExperimentSpec, opts: &RunOptions) -> ExecutionSummary {
    if let Some(seed) = opts.seed_override {
        spec.sim.seed = seed;
    }
    let started = Instant::now();
    let outcome = with_threads(opts.threads, || run_experiment(&spec, &ModelRegistry::new(), opts.dump_paths)).and_then(|r| r);
    let result = outcome.and_then(|out| {
        fs::create_dir_all(&opts.out_dir)?;
        fs::write(opts.out_dir.join("results.json"), out.results_bytes()?)?;
        for (name, bytes) in &out.dumps {
            fs::write(opts.out_dir.join(name), bytes)?;
        }
        let manifest = json!({
            "config_hash": spec.config_hash()?,
            "seed": spec.sim.seed,
            "version": VERSION,
            "wall_time_seconds": started.elapsed().as_secs_f64(),
            "threads": opts.threads,
            "module_versions": MODULE_VERSIONS.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "spec": serde_json::to_value(&spec)?,
        });
        fs::write(opts.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            let message = match &out.status {
                RunStatus::Ok => None,
                RunStatus::BlowUp { step } => Some(format!("numerical blow-up at step {step}; partial results kept")),
                RunStatus::AcceptanceFailed(m) => Some(m.clone()),
            };
            if out.status != RunStatus::Ok {
                let err = match &out.status {
                    RunStatus::BlowUp { step } => Error::BlowUp { step: *step },
                    _ => Error::Acceptance(message.clone().unwrap_or_default()),
                };
                write_error(&opts.out_dir, &err);
            }
            ExecutionSummary {
                exit_code: out.status.exit_code(),
                warnings: out.warnings,
                message,
            }
        }
        Err(e) => {
            write_error(&opts.out_dir, &e);
            ExecutionSummary {
                exit_code: exit_code(&e),
                warnings: Vec::new(),
                message: Some(e.to_string()),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub matched: bool,
    /// JSON pointer paths of differing leaves.
    pub differences: Vec<String>,
}

fn diff_values(a: &Value, b: &Value, path: String, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => diff_values(p, q, format!("{path}/{k}"), out),
                    _ => out.push(format!("{path}/{k}")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                diff_values(p, q, format!("{path}/{i}"), out);
            }
        }
        _ => {
            if a != b {
                out.push(if path.is_empty() { "/".into() } else { path });
            }
        }
    }
}

/// Re-runs the spec stored in a bundle's manifest with the manifest's seed
/// and compares the fresh `results.json` with the stored one byte for byte.
pub fn verify_bundle(dir: &Path, threads: Option<usize>) -> Result<VerifyReport> {
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut spec: ExperimentSpec = serde_json::from_value(
        manifest
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::config("manifest has no embedded spec"))?,
    )?;
    if let Some(seed) = manifest.get("seed").and_then(Value::as_u64) {
        spec.sim.seed = seed;
    }
    let stored = fs::read(dir.join("results.json"))?;
    let fresh = with_threads(threads, || run_experiment(&spec, &ModelRegistry::new(), false))??.results_bytes()?;
    if fresh == stored {
        return Ok(VerifyReport {
            matched: true,
            differences: Vec::new(),
        });
    }
    let mut differences = Vec::new();
    match (serde_json::from_slice::<Value>(&stored), serde_json::from_slice::<Value>(&fresh)) {
        (Ok(a), Ok(b)) => diff_values(&a, &b, String::new(), &mut differences),
        _ => differences.push("/".into()),
    }
    if differences.is_empty() {
        differences.push("(formatting)".into());
    }
    Ok(VerifyReport {
        matched: false,
        differences,
    })
}
