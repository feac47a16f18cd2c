//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys. Optional fields left out of a file are
//! filled from the scenario defaults by [`ExperimentConfig::resolve`]; the
//! resolved form is what gets echoed next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};
use crate::federation::{Participation, ScheduleSpec};
use crate::gp::GradScaling;
use crate::kernels::{KernelFamily, KernelSpec, LengthscaleMode, ParamBox};
use crate::metrics::ErrorComponents;
use crate::synth::{Benchmark, NoiseReading, WorldRanges};

/// Scenario keys understood by the experiment driver, with a short description.
pub const SCENARIOS: [(&str, &str); 12] = [
    ("gp-homogeneous", "K clients with equal shares of data drawn from one random GP world"),
    ("gp-imbalanced", "one random GP world, client sizes log-uniform in [min_points, max_points]"),
    ("gp-heterogeneous", "every client draws its own GP world (shared input dimension)"),
    ("bad-init", "two clients observing sin(x) + noise, started from theta = (1, 10, 1)"),
    ("sin-mirror", "two clients observing sin(x) and -sin(x) on [0, 10]"),
    ("linear", "two-level linear multi-fidelity example on [0, 1]"),
    ("nonlinear", "two-level nonlinear multi-fidelity example on [0, 2]"),
    ("currin", "CURRIN two-level benchmark on [0, 1]^2"),
    ("park", "PARK two-level benchmark on (0, 1]^4"),
    ("branin", "three-level BRANIN benchmark"),
    ("hartmann3", "three-level Hartmann-3D benchmark on [0, 1]^3"),
    ("borehole", "two-level Borehole benchmark in 8 dimensions"),
];

/// Misspellings and synonyms that map onto a real key.
const ALIASES: [(&str, &str); 14] = [
    ("learningrate", "lr_schedule"),
    ("learning_rate", "lr_schedule"),
    ("lr", "lr_schedule"),
    ("eta", "lr_schedule"),
    ("schedule", "lr_schedule"),
    ("steps", "local_steps"),
    ("e", "local_steps"),
    ("local_epochs", "local_steps"),
    ("clip", "clip_norm"),
    ("batch", "batch_size"),
    ("m", "batch_size"),
    ("bounds", "box"),
    ("freeze", "freeze_lengthscales"),
    ("out", "output_dir"),
];

const FEDERATION_KEYS: [&str; 6] = ["lr_schedule", "local_steps", "clip_norm", "batch_size", "box", "freeze_lengthscales"];

fn one() -> usize {
    1
}

fn default_rounds() -> usize {
    200
}

fn default_local_steps() -> usize {
    5
}

fn default_batch_size() -> usize {
    64
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_test_points() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in scenario key; exclusive with `datasets`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// One CSV file per client; exclusive with `scenario`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datasets: Option<Vec<PathBuf>>,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Held-out share of every CSV client, used for RMSE.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Also train the HF-only `Separate` baseline (multi-fidelity scenarios).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separate_baseline: Option<bool>,
    /// Standardize every client's outputs to mean 0, variance 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub options: ScenarioOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    /// Mini-batch cap; client `k` uses `min(batch_size, N_k)`.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub participation: Participation,
    #[serde(default)]
    pub lr_schedule: ScheduleSpec,
    #[serde(default)]
    pub scaling: GradScaling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub freeze_lengthscales: bool,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub param_box: Option<BoxSpec>,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            local_steps: default_local_steps(),
            batch_size: default_batch_size(),
            participation: Participation::default(),
            lr_schedule: ScheduleSpec::default(),
            scaling: GradScaling::default(),
            clip_norm: None,
            freeze_lengthscales: false,
            param_box: None,
        }
    }
}

/// One `[lower, upper]` range per parameter kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub theta1: (f64, f64),
    pub theta2: (f64, f64),
    pub lengthscale: (f64, f64),
}

impl BoxSpec {
    pub const DEFAULT: BoxSpec = BoxSpec {
        theta1: (0.1, 10.0),
        theta2: (0.01, 1.0),
        lengthscale: (0.01, 1.0),
    };

    pub fn to_param_box(&self, n_lengthscales: usize) -> Result<ParamBox> {
        ParamBox::from_ranges(self.theta1, self.theta2, self.lengthscale, n_lengthscales)
    }
}

/// Initial parameters. Missing entries are drawn uniformly from the box.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscales: Option<InitLengthscales>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitLengthscales {
    /// Explicit values; a single value is repeated across ARD dimensions.
    Values(Vec<f64>),
    Keyword(LengthscaleKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthscaleKeyword {
    /// The generating world's length-scales (single-world GP scenarios only).
    Truth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseTarget {
    /// Noisy held-out observations.
    #[default]
    Observed,
    /// The noise-free latent function, where the scenario knows it.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Compute metrics every `every` rounds (round 0 and the last round are
    /// always included). 0 means only those two.
    #[serde(default = "one")]
    pub every: usize,
    #[serde(default)]
    pub rmse_target: RmseTarget,
    #[serde(default)]
    pub error_components: ErrorComponents,
    #[serde(default)]
    pub global_nll: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<bool>,
    /// Size of generated test sets for `bad-init` and `sin-mirror`.
    #[serde(default = "default_test_points")]
    pub test_points: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            every: 1,
            rmse_target: RmseTarget::default(),
            error_components: ErrorComponents::default(),
            global_nll: false,
            grad_norm: None,
            test_points: default_test_points(),
        }
    }
}

/// Scenario knobs. Each scenario reads only the fields that apply to it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_reading: Option<NoiseReading>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldRanges>,
    /// Draw all clients of a single-world scenario from one joint prior sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_draw: Option<bool>,
}

/// What the config asks the driver to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    GpHomogeneous,
    GpImbalanced,
    GpHeterogeneous,
    BadInit,
    SinMirror,
    Fidelity(Benchmark),
    Csv,
}

impl ScenarioKind {
    pub fn from_key(key: &str) -> Result<Self> {
        Ok(match key {
            "gp-homogeneous" => ScenarioKind::GpHomogeneous,
            "gp-imbalanced" => ScenarioKind::GpImbalanced,
            "gp-heterogeneous" => ScenarioKind::GpHeterogeneous,
            "bad-init" => ScenarioKind::BadInit,
            "sin-mirror" => ScenarioKind::SinMirror,
            other => match other.parse::<Benchmark>() {
                Ok(b) => ScenarioKind::Fidelity(b),
                Err(_) => {
                    let keys: Vec<&str> = SCENARIOS.iter().map(|(k, _)| *k).collect();
                    let hint = closest(other, &keys)
                        .map(|s| format!(" (did you mean \"{s}\"?)"))
                        .unwrap_or_default();
                    return Err(FedGpError::config(format!("scenario: unknown key \"{other}\"{hint}")));
                }
            },
        })
    }

    pub fn is_fidelity(&self) -> bool {
        matches!(self, ScenarioKind::Fidelity(_))
    }

    fn default_box(&self) -> BoxSpec {
        match self {
            ScenarioKind::BadInit => BoxSpec {
                theta1: (0.1, 10.0),
                theta2: (0.01, 10.0),
                lengthscale: (0.01, 10.0),
            },
            ScenarioKind::SinMirror | ScenarioKind::Fidelity(_) => BoxSpec {
                lengthscale: (0.01, 3.0),
                ..BoxSpec::DEFAULT
            },
            _ => BoxSpec::DEFAULT,
        }
    }

    fn default_kernel(&self) -> KernelSpec {
        match self {
            ScenarioKind::Fidelity(_) => KernelSpec::ard(KernelFamily::Rbf),
            _ => KernelSpec::new(KernelFamily::Rbf, LengthscaleMode::Isotropic),
        }
    }
}

impl ExperimentConfig {
    /// A config for a built-in scenario with every other field at its default.
    pub fn for_scenario(key: &str) -> Self {
        Self {
            scenario: Some(key.to_string()),
            datasets: None,
            repeats: 1,
            seed: 0,
            output_dir: None,
            test_fraction: default_test_fraction(),
            separate_baseline: None,
            standardize: None,
            kernel: None,
            federation: FederationSection::default(),
            init: None,
            metrics: MetricsSection::default(),
            options: ScenarioOptions::default(),
        }
    }

    pub fn scenario_kind(&self) -> Result<ScenarioKind> {
        match (&self.scenario, &self.datasets) {
            (Some(key), None) => ScenarioKind::from_key(key),
            (None, Some(_)) => Ok(ScenarioKind::Csv),
            (Some(_), Some(_)) => Err(FedGpError::config("set either `scenario` or `datasets`, not both")),
            (None, None) => Err(FedGpError::config("one of `scenario` or `datasets` is required")),
        }
    }

    /// Fills scenario-dependent defaults (kernel, box, baseline and
    /// standardization switches, gradient-norm metric).
    pub fn resolve(&self) -> Result<Self> {
        let kind = self.scenario_kind()?;
        let mut out = self.clone();
        out.kernel.get_or_insert(kind.default_kernel());
        out.federation.param_box.get_or_insert(kind.default_box());
        out.separate_baseline.get_or_insert(kind.is_fidelity());
        out.standardize.get_or_insert(kind.is_fidelity());
        out.metrics
            .grad_norm
            .get_or_insert(kind == ScenarioKind::GpHeterogeneous);
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.scenario_kind()?;
        if self.repeats == 0 {
            return Err(FedGpError::config("repeats: must be at least 1"));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(FedGpError::config(format!(
                "test_fraction: must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        let fed = &self.federation;
        if fed.rounds == 0 {
            return Err(FedGpError::config("federation.rounds: must be at least 1"));
        }
        if fed.local_steps == 0 {
            return Err(FedGpError::config("federation.local_steps: must be at least 1"));
        }
        if fed.batch_size == 0 {
            return Err(FedGpError::config("federation.batch_size: must be at least 1"));
        }
        fed.lr_schedule
            .validate()
            .map_err(|e| FedGpError::config(format!("federation.lr_schedule: {}", inner(&e))))?;
        fed.scaling
            .validate()
            .map_err(|e| FedGpError::config(format!("federation.scaling: {}", inner(&e))))?;
        if let Some(g) = fed.clip_norm {
            if !(g > 0.0 && g.is_finite()) {
                return Err(FedGpError::config(format!(
                    "federation.clip_norm: must be positive, got {g}"
                )));
            }
        }
        if let Some(b) = &fed.param_box {
            b.to_param_box(1)
                .map_err(|e| FedGpError::config(format!("federation.box: {}", inner(&e))))?;
        }
        if let Participation::Asynchronous { sample_clients } = fed.participation {
            if let Some(k) = self.known_client_count(kind) {
                if sample_clients == 0 || sample_clients >= k {
                    return Err(FedGpError::config(format!(
                        "federation.participation.sample_clients: need 1 <= sample_clients < {k} clients, got {sample_clients}"
                    )));
                }
            }
        }
        if let Some(paths) = &self.datasets {
            if paths.is_empty() {
                return Err(FedGpError::config("datasets: list is empty"));
            }
            if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                return Err(FedGpError::config(format!("datasets: file {} does not exist", p.display())));
            }
        }
        if let Some(init) = &self.init {
            for (name, v) in [("init.theta1", init.theta1), ("init.theta2", init.theta2)] {
                if let Some(v) = v {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(FedGpError::config(format!("{name}: must be positive, got {v}")));
                    }
                }
            }
            match &init.lengthscales {
                Some(InitLengthscales::Values(v)) if v.is_empty() || v.iter().any(|l| !(*l > 0.0 && l.is_finite())) => {
                    return Err(FedGpError::config("init.lengthscales: need positive values"));
                }
                Some(InitLengthscales::Keyword(LengthscaleKeyword::Truth))
                    if !matches!(kind, ScenarioKind::GpHomogeneous | ScenarioKind::GpImbalanced) =>
                {
                    return Err(FedGpError::config(
                        "init.lengthscales: \"truth\" needs a single-world GP scenario",
                    ));
                }
                _ => {}
            }
        }
        if self.metrics.test_points == 0 {
            return Err(FedGpError::config("metrics.test_points: must be at least 1"));
        }
        Ok(())
    }

    /// Client count implied by the config, when it is known without data.
    pub fn known_client_count(&self, kind: ScenarioKind) -> Option<usize> {
        match kind {
            ScenarioKind::GpHomogeneous | ScenarioKind::GpImbalanced => Some(self.options.clients.unwrap_or(20)),
            ScenarioKind::GpHeterogeneous => Some(self.options.clients.unwrap_or(10)),
            ScenarioKind::BadInit | ScenarioKind::SinMirror => Some(2),
            ScenarioKind::Fidelity(b) => Some(if b.has_mid_level() && self.options.mid != Some(0) { 3 } else { 2 }),
            ScenarioKind::Csv => self.datasets.as_ref().map(Vec::len),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedGpError::config(format!("cannot serialize config: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| FedGpError::io(path, e))
    }
}

fn inner(e: &FedGpError) -> String {
    match e {
        FedGpError::Config(m) | FedGpError::Domain(m) | FedGpError::Shape(m) | FedGpError::Input(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Reads, parses and validates a config file. Relative dataset paths are
/// taken relative to the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| FedGpError::io(path, e))?;
    let mut config = parse_config(&text).map_err(|message| FedGpError::ConfigFile {
        path: path.to_path_buf(),
        message,
    })?;
    if let (Some(paths), Some(dir)) = (config.datasets.as_mut(), path.parent()) {
        for p in paths.iter_mut() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    config.validate().map_err(|e| FedGpError::ConfigFile {
        path: path.to_path_buf(),
        message: inner(&e),
    })?;
    Ok(config)
}

/// Parses config text without validating it. Errors carry line context and,
/// for unknown keys, a suggested replacement.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| describe_toml_error(text, &e))
}

fn describe_toml_error(text: &str, err: &toml::de::Error) -> String {
    let mut msg = err.message().trim().to_string();
    if let Some(field) = unknown_field(&msg) {
        let expected = expected_fields(&msg);
        if let Some(s) = suggest(&field, &expected) {
            msg = format!("unknown key \"{field}\" (did you mean \"{s}\"?)");
        } else {
            msg = format!("unknown key \"{field}\"");
        }
    }
    match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let src = text.lines().nth(line - 1).unwrap_or("").trim();
            format!("line {line}: {msg}\n    {src}")
        }
        None => msg,
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn expected_fields(msg: &str) -> Vec<String> {
    let Some(pos) = msg.find("expected") else {
        return Vec::new();
    };
    msg[pos..]
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect()
}

/// Suggestion for an unknown key: the alias table first, then the nearest
/// valid key by edit similarity.
pub fn suggest(field: &str, expected: &[String]) -> Option<String> {
    let lower = field.to_ascii_lowercase();
    if let Some((_, target)) = ALIASES.iter().find(|(alias, _)| *alias == lower) {
        if expected.is_empty() || expected.iter().any(|e| e == target) {
            return Some(target.to_string());
        }
        if FEDERATION_KEYS.contains(target) {
            return Some(format!("federation.{target}"));
        }
    }
    let keys: Vec<&str> = expected.iter().map(String::as_str).collect();
    closest(&lower, &keys).map(str::to_string)
}

fn closest<'a>(word: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(word, c), *c))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}
