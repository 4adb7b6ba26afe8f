//! Command-line front end: `dhipf run <experiment> [options]`.
//!
//! Exit codes: 0 on success, 1 when any filter run failed, 2 on usage or
//! configuration errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiments::{
    double_well_case, gap_sweep_entry, preset, render_table, report, run_experiment, write_outputs, ExperimentSpec,
};
use crate::filters::FilterKind;
use crate::implicit::WeightMode;
use crate::model::NoiseScaling;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FILTER_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dhipf", version, about = "Nonlinear filtering benchmarks: bootstrap, APF, EnKF, IPF, DHPF, DHIPF")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a built-in experiment or a JSON experiment file.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Case1,
    Case2,
    Case3,
    LorenzTrack,
    LorenzSwitch,
    GapSweep,
    Custom,
}

impl ExperimentName {
    fn preset_name(self) -> Option<&'static str> {
        Some(match self {
            Self::Case1 => "case1",
            Self::Case2 => "case2",
            Self::Case3 => "case3",
            Self::LorenzTrack => "lorenz-track",
            Self::LorenzSwitch => "lorenz-switch",
            Self::GapSweep => "gap-sweep",
            Self::Custom => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightModeArg {
    Jacobian,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseScalingArg {
    #[value(name = "sqrt_dt")]
    SqrtDt,
    #[value(name = "per_step")]
    PerStep,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub experiment: ExperimentName,
    /// Base seed (overrides the experiment's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Experiment file (required by `custom`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated filter subset, e.g. `dhipf,ipf`.
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<String>>,
    /// Particle count for every particle filter.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Homotopy levels for DHPF and DHIPF.
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_enum)]
    pub weight_mode: Option<WeightModeArg>,
    #[arg(long, value_enum)]
    pub noise_scaling: Option<NoiseScalingArg>,
    /// Suppress the summary table.
    #[arg(long)]
    pub quiet: bool,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Expands `case`, `preset` or a bare model name into the built-in spec and
/// overlays the remaining keys.
fn expand_preset(mut value: Value) -> Result<Value> {
    let Value::Object(obj) = &mut value else {
        return Ok(value);
    };
    let case = obj.remove("case");
    let preset_name = obj.remove("preset");
    let model_name = match obj.get("model") {
        Some(Value::String(s)) => {
            let s = s.clone();
            obj.remove("model");
            Some(s)
        }
        _ => None,
    };
    if case.is_none() && preset_name.is_none() && model_name.is_none() {
        return Ok(value);
    }
    let base = match (case, preset_name, model_name.as_deref()) {
        (Some(c), None, None | Some("doublewell" | "double_well")) => {
            let n = c.as_u64().filter(|n| (1..=3).contains(n)).ok_or_else(|| {
                Error::InvalidConfig(format!("case: expected 1, 2 or 3, got {c}"))
            })?;
            double_well_case(n as u8)?
        }
        (Some(_), None, Some(m)) => {
            return Err(Error::InvalidConfig(format!("case: only defined for model doublewell, not `{m}`")))
        }
        (None, Some(Value::String(p)), _) if p == "gap-sweep" => {
            let gap = obj.get("gap").and_then(Value::as_u64).unwrap_or(1) as usize;
            gap_sweep_entry(gap)
        }
        (None, Some(Value::String(p)), _) => preset(&p).map_err(|e| Error::InvalidConfig(format!("preset: {e}")))?.remove(0),
        (None, Some(other), _) => return Err(Error::InvalidConfig(format!("preset: expected a name, got {other}"))),
        (None, None, Some("doublewell" | "double_well")) => double_well_case(1)?,
        (None, None, Some("lorenz" | "lorenz63")) => preset("lorenz-track")?.remove(0),
        (None, None, Some(m)) => return Err(Error::InvalidConfig(format!("model: unknown model `{m}`"))),
        (Some(_), Some(_), _) => return Err(Error::InvalidConfig("case and preset are mutually exclusive".into())),
        (None, None, None) => unreachable!(),
    };
    let mut base = serde_json::to_value(base)?;
    merge(&mut base, value);
    Ok(base)
}

/// Parses and validates an experiment from JSON text.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let raw: Value = serde_json::from_str(text)?;
    let expanded = expand_preset(raw)?;
    let spec: ExperimentSpec = serde_path_to_error::deserialize(expanded).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::InvalidConfig(e.inner().to_string())
        } else {
            Error::InvalidConfig(format!("{path}: {}", e.inner()))
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Loads an experiment file; defaults fill in everything not given.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    parse_spec(&std::fs::read_to_string(path)?)
}

fn apply_overrides(specs: &mut [ExperimentSpec], args: &RunArgs) -> Result<()> {
    let kinds = match &args.filters {
        Some(list) => Some(list.iter().map(|s| s.parse::<FilterKind>()).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    for spec in specs.iter_mut() {
        if let Some(seed) = args.seed {
            spec.seed = seed;
        }
        if let Some(k) = &kinds {
            spec.retain_filters(k);
            if spec.filters.is_empty() {
                return Err(Error::InvalidConfig(format!("--filters selects nothing from {}", spec.name)));
            }
        }
        if let Some(s) = args.noise_scaling {
            spec.model.set_noise_scaling(match s {
                NoiseScalingArg::SqrtDt => NoiseScaling::SqrtDt,
                NoiseScalingArg::PerStep => NoiseScaling::PerStep,
            });
        }
        for f in &mut spec.filters {
            if let Some(n) = args.particles {
                if f.kind != FilterKind::Enkf {
                    f.n_particles = n;
                }
            }
            if let Some(l) = args.levels {
                if f.kind.uses_homotopy() {
                    f.homotopy = Some(crate::filters::HomotopyConfig::linear(l));
                }
            }
            if let Some(w) = args.weight_mode {
                f.sampler.weight_mode = match w {
                    WeightModeArg::Jacobian => WeightMode::Jacobian,
                    WeightModeArg::Paper => WeightMode::PaperLiteral,
                };
            }
        }
        spec.validate()?;
    }
    Ok(())
}

/// Resolves the experiment list for `args`.
pub fn resolve_specs(args: &RunArgs) -> Result<Vec<ExperimentSpec>> {
    let mut specs = match (args.experiment.preset_name(), &args.config) {
        (None, Some(path)) => vec![load_spec(path)?],
        (None, None) => return Err(Error::InvalidConfig("`run custom` requires --config <path>".into())),
        (Some(_), Some(_)) => return Err(Error::InvalidConfig("--config is only accepted by `run custom`".into())),
        (Some(name), None) => preset(name)?,
    };
    apply_overrides(&mut specs, args)?;
    Ok(specs)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let Command::Run(args) = cli.command;
    let specs = match resolve_specs(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut results = Vec::with_capacity(specs.len());
    for spec in &specs {
        match run_experiment(spec) {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("error: {}: {e}", spec.name);
                return EXIT_USAGE;
            }
        }
    }
    if let Err(e) = write_outputs(&args.out, &results) {
        eprintln!("error: writing {}: {e}", args.out.display());
        return EXIT_USAGE;
    }
    let rows = report(&results);
    if !args.quiet {
        print!("{}", render_table(&rows));
    }
    let failures: Vec<&crate::experiments::RunResult> =
        results.iter().flat_map(|r| r.runs.iter()).filter(|r| r.failed()).collect();
    for f in &failures {
        eprintln!("{} / {} / repeat {}: {}", f.experiment, f.filter, f.repeat, f.failure.as_deref().unwrap_or(""));
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_FILTER_FAILURE
    }
}
