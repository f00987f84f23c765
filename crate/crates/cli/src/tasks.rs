use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dipole_id::averaging::{averaging_error, conjugation_check, k_matrix};
use dipole_id::identify::{
    alpha_convexity, local_identify, log_log_slope, noise_study, noiseless_records, with_noise, IdentifyOptions,
    MeasurementRecord,
};
use dipole_id::propagate::{evolve_state, propagator, ControlWaveform, Model, StepPolicy};
use dipole_id::qsys::{DipoleMatrix, Pair, QuantumState, SystemSpec};
use dipole_id::ramsey::{build_control_set, build_discriminating_control, DiscriminatingControl, RamseyConfig};
use dipole_id::sensitivity::{fd_oracle, measure};

use crate::CliError;

fn parse_pair(s: &str) -> Result<Pair, String> {
    let (a, b) = s
        .trim_matches(|c| c == '(' || c == ')')
        .split_once(',')
        .ok_or_else(|| format!("expected a 1-based pair like 1,2, got {s:?}"))?;
    let a = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Pair::from_one_based(a, b).map_err(|e| e.to_string())
}

/// Integrator grid.
#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyArgs {
    /// Integrator steps per period of the fastest transition.
    #[arg(long, default_value_t = 20.0)]
    pub samples_per_period: f64,
    /// Upper bound on the step length (normalized time).
    #[arg(long)]
    pub max_step: Option<f64>,
}

impl PolicyArgs {
    pub fn policy(&self) -> StepPolicy {
        StepPolicy { samples_per_period: self.samples_per_period, max_step: self.max_step, ..StepPolicy::default() }
    }
}

macro_rules! defaults_from_clap {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                <$t>::parse_from(["dipole-id"])
            }
        }
    )*};
}

defaults_from_clap!(
    PolicyArgs,
    SimulateArgs,
    SensitivityArgs,
    SynthesizeArgs,
    VerifyLemmaArgs,
    IdentifyArgs,
    NoiseStudyArgs,
    CertifyAlphaArgs
);

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Control file; without one the field is zero.
    #[arg(long)]
    pub control: Option<PathBuf>,
    /// Horizon for the zero-field run (normalized time).
    #[arg(long, default_value_t = 10.0)]
    pub horizon: f64,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityArgs {
    /// Control file (required).
    #[arg(long)]
    pub control: Option<PathBuf>,
    /// Also report central differences with this step.
    #[arg(long)]
    pub fd_step: Option<f64>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeArgs {
    /// Drive strength of the resonant middle segment.
    #[arg(long, default_value_t = 0.02)]
    pub xi: f64,
    /// Target pair, 1-based (e.g. 2,3). Without it one control per support pair is built.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<Pair>,
    /// Steer the closing segment for fidelity only.
    #[arg(long)]
    pub plain: bool,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyLemmaArgs {
    /// Pair to check, 1-based; all support pairs by default.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<Pair>,
    /// Strengths to compare.
    #[arg(long, value_delimiter = ',', default_values_t = [0.04, 0.02, 0.01])]
    pub xi: Vec<f64>,
    /// Only compare full and averaged propagators; skip control synthesis.
    #[arg(long)]
    pub averaging_only: bool,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyArgs {
    /// Control files, one per record group. Synthesized at --xi when absent.
    #[arg(long = "control")]
    pub controls: Vec<PathBuf>,
    /// Measurement records (JSON list). Generated from the system's dipole when absent.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Starting dipole (JSON rows). Defaults to the system's dipole shifted by --perturbation.
    #[arg(long)]
    pub start: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub xi: f64,
    /// Euclidean size of the default start offset on the support.
    #[arg(long, default_value_t = 1e-3)]
    pub perturbation: f64,
    /// Noise variance added to generated records.
    #[arg(long, default_value_t = 0.0)]
    pub variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub gradient_tol: f64,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseStudyArgs {
    /// Control files; synthesized at --xi when absent.
    #[arg(long = "control")]
    pub controls: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.04)]
    pub xi: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-8, 1e-6, 1e-4])]
    pub variances: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyAlphaArgs {
    /// Control files; synthesized at --xi when absent.
    #[arg(long = "control")]
    pub controls: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub xi: f64,
    /// Required smallest Hessian eigenvalue; defaults to 0.8/(4ξ²).
    #[arg(long)]
    pub alpha_target: Option<f64>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone)]
pub enum Task {
    Simulate(SimulateArgs),
    Sensitivity(SensitivityArgs),
    Synthesize(SynthesizeArgs),
    VerifyLemma(VerifyLemmaArgs),
    Identify(IdentifyArgs),
    NoiseStudy(NoiseStudyArgs),
    CertifyAlpha(CertifyAlphaArgs),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Simulate(_) => "simulate",
            Task::Sensitivity(_) => "sensitivity",
            Task::Synthesize(_) => "synthesize",
            Task::VerifyLemma(_) => "verify-lemma",
            Task::Identify(_) => "identify",
            Task::NoiseStudy(_) => "noise-study",
            Task::CertifyAlpha(_) => "certify-alpha",
        }
    }

    /// Builds a task from its scenario name and parameter object.
    pub fn from_scenario(name: &str, params: Value) -> Result<Task, CliError> {
        let params = if params.is_null() { json!({}) } else { params };
        fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, CliError> {
            serde_json::from_value(v).map_err(|e| CliError::new("invalid_scenario", format!("params: {e}")))
        }
        Ok(match name {
            "simulate" => Task::Simulate(parse(params)?),
            "sensitivity" => Task::Sensitivity(parse(params)?),
            "synthesize" => Task::Synthesize(parse(params)?),
            "verify-lemma" => Task::VerifyLemma(parse(params)?),
            "identify" => Task::Identify(parse(params)?),
            "noise-study" => Task::NoiseStudy(parse(params)?),
            "certify-alpha" => Task::CertifyAlpha(parse(params)?),
            other => return Err(CliError::new("invalid_scenario", format!("unknown task {other:?}"))),
        })
    }

    pub fn parameters(&self) -> Value {
        let v = match self {
            Task::Simulate(a) => serde_json::to_value(a),
            Task::Sensitivity(a) => serde_json::to_value(a),
            Task::Synthesize(a) => serde_json::to_value(a),
            Task::VerifyLemma(a) => serde_json::to_value(a),
            Task::Identify(a) => serde_json::to_value(a),
            Task::NoiseStudy(a) => serde_json::to_value(a),
            Task::CertifyAlpha(a) => serde_json::to_value(a),
        };
        v.expect("parameters serialize")
    }
}

/// A file produced by a task, written into the output directory.
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub struct Output {
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
}

/// Loaded system plus bookkeeping of every file a task reads.
pub struct Context {
    pub spec: SystemSpec,
    pub dipole: DipoleMatrix,
    base: PathBuf,
    pub inputs: Vec<PathBuf>,
}

impl Context {
    pub fn new(spec: SystemSpec, dipole: DipoleMatrix, base: PathBuf, inputs: Vec<PathBuf>) -> Self {
        Context { spec, dipole, base, inputs }
    }

    fn resolve(&mut self, path: &Path) -> PathBuf {
        let p = self.base.join(path);
        self.inputs.push(p.clone());
        p
    }

    fn control(&mut self, path: &Path) -> Result<ControlWaveform, CliError> {
        let p = self.resolve(path);
        ControlWaveform::load(&p).map_err(|e| CliError::from_core(e).at(&p))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T, CliError> {
        let p = self.resolve(path);
        crate::read_json(&p)
    }

    /// Given control files, or a control set synthesized at `xi` for the system's dipole.
    fn controls(&mut self, files: &[PathBuf], xi: f64, policy: StepPolicy) -> Result<(Vec<ControlWaveform>, Option<f64>), CliError> {
        if files.is_empty() {
            let config = RamseyConfig { policy, ..RamseyConfig::default() };
            let set = build_control_set(&self.spec, &self.dipole, xi, &config)?;
            Ok((set.into_iter().map(|dc| dc.control).collect(), Some(xi)))
        } else {
            let controls = files.iter().map(|f| self.control(f)).collect::<Result<Vec<_>, _>>()?;
            Ok((controls, None))
        }
    }
}

fn json_artifact(name: &str, value: &impl Serialize) -> Artifact {
    Artifact { name: name.into(), bytes: serde_json::to_vec_pretty(value).expect("serializable") }
}

pub fn run(task: &Task, ctx: &mut Context) -> Result<Output, CliError> {
    match task {
        Task::Simulate(a) => simulate(a, ctx),
        Task::Sensitivity(a) => sensitivity(a, ctx),
        Task::Synthesize(a) => synthesize(a, ctx),
        Task::VerifyLemma(a) => verify_lemma(a, ctx),
        Task::Identify(a) => identify(a, ctx),
        Task::NoiseStudy(a) => noise(a, ctx),
        Task::CertifyAlpha(a) => certify(a, ctx),
    }
}

fn simulate(a: &SimulateArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let control = match &a.control {
        Some(p) => ctx.control(p)?,
        None => ControlWaveform::zero(a.horizon),
    };
    let policy = a.policy.policy();
    let model = Model::new(&ctx.spec, &ctx.dipole)?;
    let psi0 = QuantumState::basis(ctx.spec.dimension(), ctx.spec.initial());
    let ev = evolve_state(&model, &control, &psi0, 0.0, control.horizon(), &policy, None)?;
    let u = propagator(&model, &control, 0.0, control.horizon(), &policy)?;
    let populations = ev.state.populations();
    let summary = json!({
        "horizon": control.horizon(),
        "initial": ctx.spec.initial() + 1,
        "measured": ctx.spec.measured() + 1,
        "population": populations[ctx.spec.measured()],
        "final_populations": populations,
        "steps": ev.steps,
        "unitarity_defect": u.unitarity_defect(),
        "norm_drift": ev.max_norm_drift,
    });
    Ok(Output { artifacts: vec![json_artifact("simulate.json", &summary)], summary })
}

fn sensitivity(a: &SensitivityArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let path = a.control.as_ref().ok_or_else(|| CliError::new("invalid_argument", "sensitivity needs a control file"))?;
    let control = ctx.control(path)?;
    let policy = a.policy.policy();
    let m = measure(&ctx.spec, &ctx.dipole, &control, &policy)?;
    let fd = match a.fd_step {
        Some(h) => Some(
            m.sensitivity
                .pairs
                .iter()
                .map(|&p| fd_oracle(&ctx.spec, &ctx.dipole, &control, p, h, &policy))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let summary = json!({
        "population": m.population,
        "pairs": m.sensitivity.pairs,
        "values": m.sensitivity.values,
        "finite_difference": fd,
    });
    Ok(Output { artifacts: vec![json_artifact("sensitivity.json", &summary)], summary })
}

#[derive(Serialize)]
struct SynthesisRow<'a> {
    pair: Pair,
    xi: f64,
    entry: usize,
    tau1: f64,
    tau2: f64,
    horizon: f64,
    f1: f64,
    f2: f64,
    file: &'a str,
}

fn synthesize(a: &SynthesizeArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let config = RamseyConfig { policy: a.policy.policy(), desensitize: !a.plain, ..RamseyConfig::default() };
    let built: Vec<DiscriminatingControl> = match a.pair {
        Some(pair) => vec![build_discriminating_control(&ctx.spec, &ctx.dipole, pair, a.xi, &config)?],
        None => build_control_set(&ctx.spec, &ctx.dipole, a.xi, &config)?,
    };
    let names: Vec<String> = built.iter().map(|dc| format!("control_{}_{}.json", dc.pair.l + 1, dc.pair.k + 1)).collect();
    let rows: Vec<SynthesisRow> = built
        .iter()
        .zip(&names)
        .map(|(dc, file)| SynthesisRow {
            pair: dc.pair,
            xi: dc.xi,
            entry: dc.entry + 1,
            tau1: dc.tau1,
            tau2: dc.tau2,
            horizon: dc.horizon,
            f1: dc.f1,
            f2: dc.f2,
            file,
        })
        .collect();
    let summary = json!({ "controls": rows });
    let mut artifacts: Vec<Artifact> = built.iter().zip(&names).map(|(dc, n)| json_artifact(n, &dc.control)).collect();
    artifacts.push(json_artifact("synthesis.json", &summary));
    Ok(Output { summary, artifacts })
}

fn verify_lemma(a: &VerifyLemmaArgs, ctx: &mut Context) -> Result<Output, CliError> {
    if a.xi.is_empty() {
        return Err(CliError::new("invalid_argument", "empty ξ grid"));
    }
    let policy = a.policy.policy();
    let pairs: Vec<Pair> = match a.pair {
        Some(p) => vec![p],
        None => ctx.dipole.support().to_vec(),
    };
    let config = RamseyConfig { policy, ..RamseyConfig::default() };
    let mut reports = Vec::new();
    for pair in pairs {
        let k = k_matrix(&ctx.spec, &ctx.dipole, pair)?;
        let mut rows = Vec::new();
        for &xi in &a.xi {
            let avg = averaging_error(&ctx.spec, &ctx.dipole, pair, xi, &policy)?;
            let samples: Vec<f64> = (0..=400).map(|j| j as f64 / 400.0 / (xi * xi)).collect();
            let conj = conjugation_check(&ctx.dipole, &k, xi, &samples);
            let mut row = json!({
                "xi": xi,
                "sup_error": avg.sup_error,
                "error_over_xi": avg.error_over_xi,
                "conjugation_deviation": conj,
            });
            if !a.averaging_only {
                let dc = build_discriminating_control(&ctx.spec, &ctx.dipole, pair, xi, &config)?;
                let s = measure(&ctx.spec, &ctx.dipole, &dc.control, &policy)?.sensitivity;
                let on = s.get(pair).expect("pair in support");
                let off = s.pairs.iter().zip(&s.values).filter(|(p, _)| **p != pair).fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
                row["scaled_sensitivity"] = json!(2.0 * xi * on);
                row["scaled_off_target"] = json!(2.0 * xi * off);
            }
            rows.push(row);
        }
        let ratios: Vec<f64> = rows.iter().map(|r| r["error_over_xi"].as_f64().unwrap()).collect();
        let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let re: Vec<Vec<f64>> = k.matrix.row_iter().map(|r| r.iter().map(|z| z.re).collect()).collect();
        let im: Vec<Vec<f64>> = k.matrix.row_iter().map(|r| r.iter().map(|z| z.im).collect()).collect();
        reports.push(json!({
            "pair": pair,
            "k": { "re": re, "im": im },
            "k_hermiticity_defect": k.hermiticity_defect(),
            "error_over_xi_spread": spread,
            "rows": rows,
        }));
    }
    let summary = json!({ "pairs": reports });
    Ok(Output { artifacts: vec![json_artifact("lemma.json", &summary)], summary })
}

fn identify(a: &IdentifyArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let policy = a.policy.policy();
    let (controls, _) = ctx.controls(&a.controls, a.xi, policy)?;
    let records: Vec<MeasurementRecord> = match &a.records {
        Some(p) => ctx.json(p)?,
        None => {
            let clean = noiseless_records(&ctx.spec, &ctx.dipole, &controls, &policy)?;
            if a.variance > 0.0 {
                with_noise(&clean, a.variance, a.seed)?
            } else {
                clean
            }
        }
    };
    let start = match &a.start {
        Some(p) => {
            let rows: Vec<Vec<f64>> = ctx.json(p)?;
            DipoleMatrix::from_rows(&rows)?
        }
        None => {
            // alternating signs, so every support entry moves
            let m = ctx.dipole.support_len() as f64;
            let shifted: Vec<f64> = ctx
                .dipole
                .support_values()
                .iter()
                .enumerate()
                .map(|(p, v)| v + if p % 2 == 0 { 1.0 } else { -1.0 } * a.perturbation / m.sqrt())
                .collect();
            ctx.dipole.with_support_values(&shifted)?
        }
    };
    let options = IdentifyOptions { max_iterations: a.max_iterations, gradient_tol: a.gradient_tol, policy, ..IdentifyOptions::default() };
    let result = local_identify(&ctx.spec, &controls, &records, &start, &options)?;
    let mut summary = serde_json::to_value(&result).expect("serializable");
    summary["reference_max_error"] = json!(result.max_error(&ctx.dipole));
    Ok(Output { artifacts: vec![json_artifact("identification.json", &summary)], summary })
}

#[derive(Serialize)]
struct CsvRow {
    var: f64,
    rms_error: f64,
    predicted_radius: f64,
    nonconverged: usize,
}

fn noise(a: &NoiseStudyArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let policy = a.policy.policy();
    let (controls, _) = ctx.controls(&a.controls, a.xi, policy)?;
    let options = IdentifyOptions { policy, ..IdentifyOptions::default() };
    let rows = noise_study(&ctx.spec, &ctx.dipole, &controls, &a.variances, a.trials, a.seed, &options)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(CsvRow { var: r.variance, rms_error: r.rms_error, predicted_radius: r.predicted_radius, nonconverged: r.nonconverged })
            .map_err(|e| CliError::new("io", e.to_string()))?;
    }
    let bytes = csv.into_inner().map_err(|e| CliError::new("io", e.to_string()))?;
    let positive: Vec<(f64, f64)> = rows.iter().filter(|r| r.variance > 0.0 && r.rms_error > 0.0).map(|r| (r.variance, r.rms_error)).collect();
    let slope = (positive.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
        log_log_slope(&x, &y)
    });
    let summary = json!({
        "rows": rows.iter().map(|r| json!({
            "var": r.variance,
            "rms_error": r.rms_error,
            "predicted_radius": r.predicted_radius,
            "nonconverged": r.nonconverged,
            "fraction_within_3_radii": r.fraction_within(3.0),
        })).collect::<Vec<_>>(),
        "log_log_slope": slope,
    });
    Ok(Output {
        artifacts: vec![Artifact { name: "noise_study.csv".into(), bytes }, json_artifact("noise_study.json", &summary)],
        summary,
    })
}

fn certify(a: &CertifyAlphaArgs, ctx: &mut Context) -> Result<Output, CliError> {
    let policy = a.policy.policy();
    let (controls, xi) = ctx.controls(&a.controls, a.xi, policy)?;
    let target = a.alpha_target.unwrap_or(0.8 / (4.0 * a.xi * a.xi));
    let report = alpha_convexity(&ctx.spec, &ctx.dipole, &controls, xi, target, &policy)?;
    let summary = serde_json::to_value(&report).expect("serializable");
    Ok(Output { artifacts: vec![json_artifact("alpha.json", &summary)], summary })
}
