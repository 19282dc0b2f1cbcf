//! Experiment configuration: TOML `key = value` lines grouped in sections.
//! Every field has a default; the fully resolved config is written next to
//! the results.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unida_core::eval::UnkMode;
use unida_core::losses::{LossConfig, LossWeights, OemMode};
use unida_core::memory::MemoryConfig;
use unida_core::scenario::{self, Scenario, SplitSpec, SyntheticSpec};
use unida_core::trainer::{OptimConfig, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::variant::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    /// shared/source-private/target-private
    pub split: String,
    pub dim: usize,
    pub n_per_class: usize,
    pub shift: f64,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Synthetic,
            split: "5/2/3".into(),
            dim: 16,
            n_per_class: 60,
            shift: 2.0,
            spread: 1.0,
            source: None,
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub d_feat: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            d_feat: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule_a: f64,
    pub schedule_b: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            lr_backbone: o.lr_backbone,
            lr_heads: o.lr_heads,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            schedule_a: o.schedule.0,
            schedule_b: o.schedule.1,
            epochs: o.epochs,
            batch: o.batch,
        }
    }
}

impl OptimSection {
    /// First key that fails validation, for anchoring messages.
    fn offending_key(&self) -> &'static str {
        if !(self.lr_backbone > 0.0) {
            "lr_backbone"
        } else if !(self.lr_heads > 0.0) {
            "lr_heads"
        } else if !(0.0..1.0).contains(&self.momentum) {
            "momentum"
        } else if !(self.weight_decay >= 0.0) {
            "weight_decay"
        } else if self.schedule_a < 0.0 {
            "schedule_a"
        } else if self.schedule_b < 0.0 {
            "schedule_b"
        } else if self.epochs == 0 {
            "epochs"
        } else {
            "batch"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// "uniform" or "weighted"
    pub oem: String,
    pub detach_weights: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            beta1: w.beta1,
            beta2: w.beta2,
            eta: w.eta,
            gamma: w.gamma,
            alpha: w.alpha,
            oem: OemMode::default().to_string(),
            detach_weights: false,
        }
    }
}

impl LossSection {
    fn offending_key(&self) -> &'static str {
        let named = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eta", self.eta),
            ("gamma", self.gamma),
        ];
        named
            .into_iter()
            .find(|(_, v)| !(*v >= 0.0 && v.is_finite()))
            .map_or("alpha", |(k, _)| k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub k_nn: usize,
    pub temperature: f64,
    pub momentum: f64,
}

impl Default for MemorySection {
    fn default() -> Self {
        let m = MemoryConfig::default();
        Self {
            k_nn: m.k_nn,
            temperature: m.temperature,
            momentum: m.momentum,
        }
    }
}

impl MemorySection {
    fn offending_key(&self) -> &'static str {
        if self.k_nn == 0 {
            "k_nn"
        } else if !(self.temperature > 0.0) {
            "temperature"
        } else {
            "momentum"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    /// "pooled" or "per_class"
    pub unk: String,
    /// thresholds for the `sweep` verb
    pub grid: Vec<f64>,
    /// evaluate after every epoch rather than only after the last
    pub every_epoch: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            unk: UnkMode::Pooled.to_string(),
            grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            every_epoch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// worker threads for independent runs; 0 uses every core
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("runs/default"),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// method variants, e.g. "source_only", "uniform", "weighted", "weighted-no_nil"
    pub variants: Vec<String>,
    /// splits of the synthetic tasks; empty means the scenario's own split
    pub tasks: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: vec!["source_only".into(), "uniform".into(), "weighted".into()],
            tasks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub loss: LossSection,
    pub memory: MemorySection,
    pub eval: EvalSection,
    pub run: RunSection,
    pub ablate: AblateSection,
}

/// 1-based line of `key` inside `[section]`, else of the section header, else 1.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = "";
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header.unwrap_or(1)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Reads, defaults, validates and resolves relative file paths against
    /// the config's directory.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Like [`load`](Self::load) but from text; `path` anchors messages and
    /// relative paths.
    pub fn parse(path: &Path, text: &str) -> CliResult<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: e.span().map_or(1, |s| line_of_offset(text, s.start)),
            msg: e.message().trim().to_string(),
        })?;
        cfg.validate()
            .map_err(|(section, key, msg)| CliError::Config {
                path: path.to_path_buf(),
                line: locate(text, section, key),
                msg,
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.scenario.source, &mut cfg.scenario.target]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks every field; errors name the offending `(section, key)`.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let s = &self.scenario;
        let split = s
            .split
            .parse::<SplitSpec>()
            .map_err(|e| ("scenario", "split", e.to_string()))?;
        match s.kind {
            ScenarioKind::Synthetic => {
                self.synthetic_spec(split)
                    .and_then(|spec| {
                        if spec.dim < 2 || spec.n_per_class < 4 {
                            Err(unida_core::Error::InvalidArgument(
                                "synthetic scenarios need dim >= 2 and n_per_class >= 4".into(),
                            ))
                        } else if !(spec.spread > 0.0) || !(spec.shift_magnitude >= 0.0) {
                            Err(unida_core::Error::InvalidArgument(
                                "spread must be positive and shift non-negative".into(),
                            ))
                        } else {
                            Ok(())
                        }
                    })
                    .map_err(|e| ("scenario", "kind", e.to_string()))?;
            }
            ScenarioKind::Files => {
                if s.source.is_none() {
                    return Err((
                        "scenario",
                        "kind",
                        "kind = \"files\" needs a 'source' path".into(),
                    ));
                }
                if s.target.is_none() {
                    return Err((
                        "scenario",
                        "kind",
                        "kind = \"files\" needs a 'target' path".into(),
                    ));
                }
            }
        }
        if self.model.d_feat == 0 || self.model.hidden.contains(&0) {
            return Err(("model", "hidden", "layer widths must be positive".into()));
        }
        let tc = self
            .train_config()
            .map_err(|(k, m)| (section_of(k), k, m))?;
        tc.optim
            .validate()
            .map_err(|e| ("optim", self.optim.offending_key(), e.to_string()))?;
        tc.loss
            .weights
            .validate()
            .map_err(|e| ("loss", self.loss.offending_key(), e.to_string()))?;
        tc.memory
            .validate()
            .map_err(|e| ("memory", self.memory.offending_key(), e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err((
                "eval",
                "threshold",
                format!("threshold {} outside [0, 1]", self.eval.threshold),
            ));
        }
        if self.eval.grid.is_empty() || self.eval.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err((
                "eval",
                "grid",
                "grid must be non-empty and inside [0, 1]".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(("run", "seeds", "at least one seed is required".into()));
        }
        for v in &self.ablate.variants {
            v.parse::<Variant>()
                .map_err(|e| ("ablate", "variants", e))?;
        }
        for t in &self.ablate.tasks {
            t.parse::<SplitSpec>()
                .map_err(|e| ("ablate", "tasks", e.to_string()))?;
        }
        if self.scenario.kind == ScenarioKind::Files && !self.ablate.tasks.is_empty() {
            return Err((
                "ablate",
                "tasks",
                "tasks require a synthetic scenario".into(),
            ));
        }
        Ok(())
    }

    pub fn split(&self) -> CliResult<SplitSpec> {
        Ok(self.scenario.split.parse::<SplitSpec>()?)
    }

    pub fn synthetic_spec(&self, split: SplitSpec) -> unida_core::Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            split,
            dim: self.scenario.dim,
            n_per_class: self.scenario.n_per_class,
            shift_magnitude: self.scenario.shift,
            spread: self.scenario.spread,
        })
    }

    /// Scenario for `split` (synthetic) or from the configured files.
    pub fn build_scenario(&self, split: SplitSpec, seed: u64) -> CliResult<Scenario> {
        match self.scenario.kind {
            ScenarioKind::Synthetic => Ok(scenario::generate_scenario(
                &self.synthetic_spec(split)?,
                seed,
            )?),
            ScenarioKind::Files => {
                let (Some(src), Some(tgt)) = (&self.scenario.source, &self.scenario.target) else {
                    return Err(CliError::Usage(
                        "file scenario without source/target".into(),
                    ));
                };
                Ok(scenario::load_domains(src, tgt, split)?)
            }
        }
    }

    /// Trainer settings; errors name the offending key.
    pub fn train_config(&self) -> Result<TrainConfig, (&'static str, String)> {
        let o = &self.optim;
        let l = &self.loss;
        let oem_mode = l
            .oem
            .parse::<OemMode>()
            .map_err(|e| ("oem", e.to_string()))?;
        let unk_mode = self
            .eval
            .unk
            .parse::<UnkMode>()
            .map_err(|e| ("unk", e.to_string()))?;
        Ok(TrainConfig {
            hidden: self.model.hidden.clone(),
            d_feat: self.model.d_feat,
            optim: OptimConfig {
                lr_backbone: o.lr_backbone,
                lr_heads: o.lr_heads,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                schedule: (o.schedule_a, o.schedule_b),
                epochs: o.epochs,
                batch: o.batch,
            },
            loss: LossConfig {
                weights: LossWeights {
                    beta1: l.beta1,
                    beta2: l.beta2,
                    eta: l.eta,
                    gamma: l.gamma,
                    alpha: l.alpha,
                },
                oem_mode,
                detach_weights: l.detach_weights,
            },
            memory: MemoryConfig {
                k_nn: self.memory.k_nn,
                temperature: self.memory.temperature,
                momentum: self.memory.momentum,
            },
            threshold: self.eval.threshold,
            unk_mode,
            eval_every_epoch: self.eval.every_epoch,
        })
    }

    /// Task splits for ablation; the scenario split when none are listed.
    pub fn tasks(&self) -> CliResult<Vec<SplitSpec>> {
        if self.ablate.tasks.is_empty() {
            return Ok(vec![self.split()?]);
        }
        let tasks: Vec<SplitSpec> = self
            .ablate
            .tasks
            .iter()
            .map(|t| t.parse::<SplitSpec>())
            .collect::<unida_core::Result<_>>()?;
        let distinct: BTreeSet<String> = tasks.iter().map(|t| t.to_string()).collect();
        if distinct.len() != tasks.len() {
            return Err(CliError::Usage("ablation tasks must be distinct".into()));
        }
        Ok(tasks)
    }

    pub fn variants(&self) -> CliResult<Vec<Variant>> {
        self.ablate
            .variants
            .iter()
            .map(|v| v.parse::<Variant>().map_err(CliError::Usage))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }
}

fn section_of(key: &str) -> &'static str {
    match key {
        "unk" => "eval",
        _ => "loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::parse(Path::new("dir/exp.cfg"), text)
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.optim, OptimConfig::default());
        assert_eq!(tc.loss, LossConfig::default());
    }

    #[test]
    fn resolved_dump_round_trips() {
        let cfg = parse("[loss]\noem = \"uniform\"\n[run]\nseeds = [1, 2]\n").unwrap();
        let again = parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let err = parse("[optim]\nepochs = 3\nbatch = = 4\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
        let err = parse("[optim]\nepochs = 3\n\nwat = 1\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 4, .. }), "{err}");
    }

    #[test]
    fn semantic_errors_carry_lines() {
        let err = parse("[run]\nseeds = [0]\n[optim]\nepochs = 3\nbatch = 7\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 5, .. }), "{err}");
        let err = parse("[optim]\nepochs = 0\nbatch = 8\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 2, .. }), "{err}");
        let err = parse("[memory]\nk_nn = 3\ntemperature = -1.0\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
        let err = parse("\n[loss]\noem = \"sideways\"\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
        let err = parse("[scenario]\nsplit = \"1/0\"\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 2, .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn file_paths_resolve_against_config_dir() {
        let cfg =
            parse("[scenario]\nkind = \"files\"\nsource = \"s.txt\"\ntarget = \"/abs/t.txt\"\n")
                .unwrap();
        assert_eq!(cfg.scenario.source.unwrap(), Path::new("dir/s.txt"));
        assert_eq!(cfg.scenario.target.unwrap(), Path::new("/abs/t.txt"));
        assert!(parse("[scenario]\nkind = \"files\"\n").is_err());
    }
}
