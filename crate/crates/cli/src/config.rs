//! Run configuration files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use forge_core::demo::NoiseStrategy;
use forge_core::forward::ForwardOptions;
use forge_core::inverse::{GridSpec, KktOptions};
use forge_core::linalg::serde_mat;
use forge_core::linalg::Mat;
use forge_core::opt::SolverSettings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "fig2-sls")]
    Fig2Sls,
    #[serde(rename = "fig3-fixed-gain")]
    Fig3FixedGain,
    #[serde(rename = "fig4-sweep")]
    Fig4Sweep,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2Sls => "fig2-sls",
            Preset::Fig3FixedGain => "fig3-fixed-gain",
            Preset::Fig4Sweep => "fig4-sweep",
        }
    }

    /// Last stage of the preset's pipeline.
    pub fn final_stage(self) -> Stage {
        match self {
            Preset::Fig2Sls | Preset::Fig3FixedGain => Stage::Classify,
            Preset::Fig4Sweep => Stage::Sweep,
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fig2-sls" => Ok(Preset::Fig2Sls),
            "fig3-fixed-gain" => Ok(Preset::Fig3FixedGain),
            "fig4-sweep" => Ok(Preset::Fig4Sweep),
            _ => Err(format!("unknown preset {s:?} (fig2-sls, fig3-fixed-gain, fig4-sweep)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Demos,
    Recover,
    Infer,
    Classify,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Demos => "demos",
            Stage::Recover => "recover",
            Stage::Infer => "infer",
            Stage::Classify => "classify",
            Stage::Sweep => "sweep",
        }
    }

    /// Stages executed to reach `self`; classify and sweep are alternative endings.
    pub fn path(self) -> Vec<Stage> {
        let chain = [Stage::Forward, Stage::Demos, Stage::Recover, Stage::Infer];
        match self {
            Stage::Classify | Stage::Sweep => chain.iter().copied().chain([self]).collect(),
            s => chain.iter().copied().take_while(|c| *c <= s).collect(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeSpec {
    #[default]
    Joint,
    /// Externally designed gain: one block `K_{t,t}` repeated over the horizon,
    /// or a full `FeedbackGain` JSON file.
    FixedGain {
        #[serde(default, with = "opt_mat", skip_serializing_if = "Option::is_none")]
        static_block: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
    },
}

mod opt_mat {
    use super::{serde_mat, Mat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(serde_mat::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mat>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|rows| serde_mat::from_rows(&rows).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ForwardConfig {
    pub mode: ModeSpec,
    pub options: ForwardOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub count: usize,
    pub strategy: NoiseStrategy,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            count: 100,
            strategy: NoiseStrategy::UniformBall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub trials: usize,
    /// Demonstrations per trial; defaults to the demos stage count.
    pub demos: Option<usize>,
    pub infer: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1],
            trials: 20,
            demos: None,
            infer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Problem file, relative to the config file.
    pub problem: PathBuf,
    /// Root of every random stream; there is no clock-based fallback.
    pub seed: u64,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Applied to every solver call when present.
    #[serde(default)]
    pub solver: Option<SolverSettings>,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub demos: DemoConfig,
    #[serde(default)]
    pub kkt: KktOptions,
    #[serde(default)]
    pub classify: Option<GridSpec>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check_files().map_err(|message| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn problem_path(&self) -> PathBuf {
        self.resolve(&self.problem)
    }

    fn check_files(&self) -> Result<(), String> {
        let mut files = vec![self.problem_path()];
        if let ModeSpec::FixedGain { file, static_block } = &self.forward.mode {
            match (file, static_block) {
                (Some(f), None) => files.push(self.resolve(f)),
                (None, Some(_)) => {}
                _ => return Err("fixed_gain needs exactly one of static_block or file".into()),
            }
        }
        for f in files {
            if !f.is_file() {
                return Err(format!("referenced file {} does not exist", f.display()));
            }
        }
        Ok(())
    }

    /// Forward, inference and sweep settings with the global solver override applied.
    pub fn forward_options(&self) -> ForwardOptions {
        let mut o = self.forward.options;
        if let Some(s) = self.solver {
            o.solver = s;
        }
        o
    }

    pub fn kkt_options(&self) -> KktOptions {
        let mut o = self.kkt;
        if let Some(s) = self.solver {
            o.solver = s;
        }
        o
    }
}
