use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dipole_id::qsys::SystemFile;

mod tasks;

use tasks::*;

const ENVIRONMENT_HELP: &str = "\
Environment:
  RAYON_NUM_THREADS  worker threads for parallel propagation and noise trials
                     (default: one per core). Results do not depend on it.

On failure a JSON object {\"error\": {\"kind\", \"message\"}} is written to stderr
and the exit status is 1.";

#[derive(Parser)]
#[command(
    name = "dipole-id",
    version,
    about = "Simulate N-level systems under control fields, synthesize discriminating controls and identify dipole couplings",
    after_help = ENVIRONMENT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// System file (JSON): energies, dipole rows, 1-based initial and measured levels.
    #[arg(long)]
    system: PathBuf,
    /// Dipole file (JSON rows) replacing the matrix in the system file.
    #[arg(long)]
    dipole: Option<PathBuf>,
    /// Directory for result files and manifest.json. Results go to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate |i⟩ under a control and report P_if.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SimulateArgs,
    },
    /// ∂P_if/∂μ'_p for every support pair, optionally with finite differences.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SensitivityArgs,
    },
    /// Build discriminating controls and write them as control files.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SynthesizeArgs,
    },
    /// Check averaging error, secular correction and sensitivity scaling over a ξ grid.
    VerifyLemma {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: VerifyLemmaArgs,
    },
    /// Local least-squares identification of the support entries.
    Identify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: IdentifyArgs,
    },
    /// Identification error against measurement noise; writes a CSV table.
    NoiseStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: NoiseStudyArgs,
    },
    /// Smallest Hessian eigenvalue of the misfit cost for a control set.
    CertifyAlpha {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: CertifyAlphaArgs,
    },
    /// Run a scenario file. Paths inside it are relative to the file.
    Run {
        scenario: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError { kind: kind.into(), message: message.into() }
    }

    pub fn from_core(e: dipole_id::Error) -> Self {
        // a file that parses as JSON but breaks the schema is an input problem
        let kind = match e.kind() {
            "json" => "invalid_input",
            k => k,
        };
        CliError::new(kind, e.to_string())
    }

    pub fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl From<dipole_id::Error> for CliError {
    fn from(e: dipole_id::Error) -> Self {
        CliError::from_core(e)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new("io", e.to_string()).at(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("invalid_input", e.to_string()).at(path))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    system: PathBuf,
    #[serde(default)]
    dipole: Option<PathBuf>,
    task: String,
    #[serde(default)]
    params: Value,
    output_dir: PathBuf,
}

struct Job {
    system: PathBuf,
    dipole: Option<PathBuf>,
    out: Option<PathBuf>,
    base: PathBuf,
    task: Task,
}

impl Job {
    fn direct(common: Common, task: Task) -> Job {
        Job { system: common.system, dipole: common.dipole, out: common.out, base: PathBuf::new(), task }
    }

    fn from_scenario(path: &Path) -> Result<Job, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::new("io", e.to_string()).at(path))?;
        let s: Scenario =
            serde_json::from_str(&text).map_err(|e| CliError::new("invalid_scenario", e.to_string()).at(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Job {
            system: base.join(&s.system),
            dipole: s.dipole.map(|d| base.join(d)),
            out: Some(base.join(&s.output_dir)),
            task: Task::from_scenario(&s.task, s.params)?,
            base,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn execute(job: Job) -> Result<Value, CliError> {
    let mut inputs = vec![job.system.clone()];
    let mut file = SystemFile::load(&job.system).map_err(|e| CliError::from_core(e).at(&job.system))?;
    if let Some(d) = &job.dipole {
        file.dipole = read_json(d)?;
        inputs.push(d.clone());
    }
    let (spec, dipole) = file.build().map_err(|e| CliError::from_core(e).at(&job.system))?;
    let mut ctx = Context::new(spec, dipole, job.base.clone(), inputs);
    let output = tasks::run(&job.task, &mut ctx)?;

    if let Some(out) = &job.out {
        let io = |e: std::io::Error| CliError::new("io", e.to_string()).at(out);
        std::fs::create_dir_all(out).map_err(io)?;
        let mut hashed_inputs = Vec::new();
        let mut all = Sha256::new();
        for p in &ctx.inputs {
            let bytes = std::fs::read(p).map_err(io)?;
            let h = sha256_hex(&bytes);
            all.update(h.as_bytes());
            hashed_inputs.push(json!({ "path": p.display().to_string(), "sha256": h }));
        }
        let parameters = job.task.parameters();
        all.update(parameters.to_string().as_bytes());
        let mut outputs = Vec::new();
        for a in &output.artifacts {
            std::fs::write(out.join(&a.name), &a.bytes).map_err(io)?;
            outputs.push(json!({ "file": a.name, "sha256": sha256_hex(&a.bytes) }));
        }
        let manifest = json!({
            "tool": "dipole-id",
            "version": env!("CARGO_PKG_VERSION"),
            "task": job.task.name(),
            "parameters": parameters,
            "inputs": hashed_inputs,
            "inputs_hash": hex::encode(all.finalize()),
            "outputs": outputs,
        });
        std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("serializable"))
            .map_err(io)?;
    }
    Ok(output.summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let job = match cli.command {
        Command::Simulate { common, args } => Ok(Job::direct(common, Task::Simulate(args))),
        Command::Sensitivity { common, args } => Ok(Job::direct(common, Task::Sensitivity(args))),
        Command::Synthesize { common, args } => Ok(Job::direct(common, Task::Synthesize(args))),
        Command::VerifyLemma { common, args } => Ok(Job::direct(common, Task::VerifyLemma(args))),
        Command::Identify { common, args } => Ok(Job::direct(common, Task::Identify(args))),
        Command::NoiseStudy { common, args } => Ok(Job::direct(common, Task::NoiseStudy(args))),
        Command::CertifyAlpha { common, args } => Ok(Job::direct(common, Task::CertifyAlpha(args))),
        Command::Run { scenario } => Job::from_scenario(&scenario),
    };
    match job.and_then(execute) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("serializable");
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind, "message": e.message } }));
            ExitCode::FAILURE
        }
    }
}
