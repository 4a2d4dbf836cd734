//! Experiment configuration: one TOML file per experiment with a section per
//! pipeline stage.
//!
//! ```toml
//! format_version = 1
//! seed = 7
//! tasks = ["mortality"]
//!
//! [cohort]
//! preset = "mimic-like"
//! n_patients = 4000
//!
//! [encoder]
//! latent_dim = 64
//!
//! [pretrain]
//! lr_grid = [1e-3]
//! ```
//!
//! Every section and field is optional and falls back to its default.
//! Unknown fields are rejected. `key.path=value` overrides are applied to the
//! parsed document before typing, so they are validated like file content.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::PretrainConfig;
use crate::cohort::{GeneratorConfig, Preset};
use crate::decoder::{DecoderConfig, FinetuneConfig, Task};
use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Cohort preset plus optional overrides of its generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub preset: Preset,
    pub n_patients: usize,
    pub orphan_fraction: Option<f64>,
    pub stays_per_patient: Option<[usize; 2]>,
    pub events_per_modality: Option<[usize; 2]>,
    pub stay_correlation: Option<f64>,
    pub label_noise: Option<f64>,
    /// Nuisance scale applied to every modality.
    pub nuisance: Option<f64>,
    /// Per-modality presence rates, keyed by modality name.
    pub presence: BTreeMap<String, f64>,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            preset: Preset::MimicLike,
            n_patients: 2000,
            orphan_fraction: None,
            stays_per_patient: None,
            events_per_modality: None,
            stay_correlation: None,
            label_noise: None,
            nuisance: None,
            presence: BTreeMap::new(),
        }
    }
}

impl CohortSection {
    pub fn generator(&self, seed: u64) -> Result<GeneratorConfig> {
        let mut g = self.preset.config(self.n_patients, seed);
        if let Some(v) = self.orphan_fraction {
            g.orphan_fraction = v;
        }
        if let Some(v) = self.stays_per_patient {
            g.stays_per_patient = v;
        }
        if let Some(v) = self.events_per_modality {
            g.events_per_modality = v;
        }
        if let Some(v) = self.stay_correlation {
            g.stay_correlation = v;
        }
        if let Some(v) = self.label_noise {
            g.label_model.label_noise = v;
        }
        if let Some(v) = self.nuisance {
            g.modalities.iter_mut().for_each(|m| m.nuisance = v);
        }
        for (name, &p) in &self.presence {
            let m = g
                .modalities
                .iter_mut()
                .find(|m| &m.name == name)
                .ok_or_else(|| CoreError::config(format!("cohort.presence: preset has no modality {name:?}")))?;
            m.presence = p;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub retrieval_k: Vec<usize>,
    pub ace_bins: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { retrieval_k: vec![1, 5, 10], ace_bins: 10, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpSection {
    /// Number of test stays traced per initialization.
    pub n_stays: usize,
    /// Modality removed in the ablation; the first time-varying modality
    /// when unset.
    pub ablate: Option<String>,
    /// Modality whose attention gain is reported as the sink score.
    pub sink: String,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self { n_stays: 8, ablate: None, sink: "demographics".into() }
    }
}

/// Missingness sweep: for each modality and rate, that share of the
/// modality is removed from the cohort before pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub rates: Vec<f64>,
    /// Modalities to sweep; all when empty.
    pub modalities: Vec<String>,
    pub max_epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { rates: vec![0.0, 0.25, 0.5, 0.75], modalities: Vec::new(), max_epochs: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub cohort: CohortSection,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub decoder: DecoderConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
    pub interp: InterpSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            tasks: vec![Task::Mortality],
            cohort: CohortSection::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            decoder: DecoderConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
            interp: InterpSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Applies `key.path=value` to a TOML document. Values parse as TOML
/// (numbers, booleans, arrays, quoted strings) and fall back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CoreError::config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::config(format!("override key {key:?} is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CoreError::config(format!("override {key}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text with overrides applied, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CoreError::config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| CoreError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CoreError::config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CoreError::config("seed must fit in a signed 64-bit integer"));
        }
        if self.tasks.is_empty() {
            return Err(CoreError::config("tasks must list at least one task"));
        }
        let generator = self.cohort.generator(self.seed)?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.decoder.validate()?;
        self.finetune.validate()?;
        if self.eval.retrieval_k.is_empty() || self.eval.retrieval_k.contains(&0) {
            return Err(CoreError::config("eval.retrieval_k must be nonempty with entries >= 1"));
        }
        if self.eval.ace_bins == 0 || self.eval.batch_size == 0 {
            return Err(CoreError::config("eval.ace_bins and eval.batch_size must be >= 1"));
        }
        let known = |name: &str| generator.modalities.iter().any(|m| m.name == name);
        if let Some(a) = &self.interp.ablate {
            if !known(a) {
                return Err(CoreError::config(format!("interp.ablate: unknown modality {a:?}")));
            }
        }
        if !known(&self.interp.sink) {
            return Err(CoreError::config(format!("interp.sink: unknown modality {:?}", self.interp.sink)));
        }
        if self.sweep.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(CoreError::config("sweep.rates must lie in [0, 1)"));
        }
        if let Some(m) = self.sweep.modalities.iter().find(|m| !known(m)) {
            return Err(CoreError::config(format!("sweep.modalities: unknown modality {m:?}")));
        }
        if self.sweep.max_epochs == 0 {
            return Err(CoreError::config("sweep.max_epochs must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\n[pretrain]\nbatch_size = 8\n",
            &["pretrain.batch_size=16".into(), "cohort.preset=eicu-like".into(), "pretrain.lr_grid=[0.01]".into()],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.batch_size, 16);
        assert_eq!(cfg.pretrain.lr_grid, vec![0.01]);
        assert_eq!(cfg.cohort.preset, Preset::EicuLike);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn bad_fields_name_the_field() {
        let err = ExperimentConfig::from_toml("[pretrain]\nbatch_sise = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
        let err = ExperimentConfig::from_toml("", &["decoder.heads=3".into()]).unwrap_err().to_string();
        assert!(err.contains("decoder.heads"), "{err}");
        assert!(ExperimentConfig::from_toml("format_version = 2", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["no_equals".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.cohort.presence.insert("cxr".into(), 0.5);
        cfg.interp.ablate = Some("cxr".into());
        cfg.tasks = vec![Task::Los, Task::Phenotyping];
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), cfg);
    }
}
