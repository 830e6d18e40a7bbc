//! Run configuration: one JSON document covering model, training, probing
//! and data paths. Every field has a default so a minimal config is `{}`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use recon_core::analysis::GroupDimension;
use recon_core::model::ModelConfig;
use recon_core::probe::{ComparisonSpec, ProbeCondition};
use recon_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    pub conditions: Vec<ProbeCondition>,
    pub comparisons: Vec<ComparisonSpec>,
    pub dimensions: Vec<GroupDimension>,
    pub bootstrap_resamples: usize,
    /// Fold direct head relations into the ancestor categories.
    pub ancestors_include_direct: bool,
    pub top_k: usize,
    pub extreme_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub sentences: PathBuf,
    pub parses: PathBuf,
    pub vocab: PathBuf,
    pub weights: PathBuf,
    pub records: PathBuf,
    pub ranks: PathBuf,
    /// Optional grammar override for gen-corpus.
    pub grammar: Option<PathBuf>,
    /// Optional functional-relation table override for aggregate.
    pub functional_table: Option<PathBuf>,
    pub corpus_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            model: default_model(),
            train: TrainConfig::default(),
            probe: ProbeSection::default(),
            data: DataSection::default(),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        hidden: 32,
        ff_dim: 64,
        // 0 means: take the size of the vocab file.
        vocab: 0,
        max_positions: 32,
        layernorm_eps: 1e-12,
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            conditions: ProbeCondition::ALL.to_vec(),
            comparisons: ComparisonSpec::standard_six(),
            dimensions: GroupDimension::ALL.to_vec(),
            bootstrap_resamples: 1000,
            ancestors_include_direct: false,
            top_k: 10,
            extreme_n: 100,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            sentences: "corpus.txt".into(),
            parses: "corpus.conllu".into(),
            vocab: "vocab.txt".into(),
            weights: "model.rpw".into(),
            records: "records.csv".into(),
            ranks: "ranks.csv".into(),
            grammar: None,
            functional_table: None,
            corpus_count: 1000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let six = ComparisonSpec::standard_six();
        for c in &self.probe.comparisons {
            if !six
                .iter()
                .any(|s| s.base == c.base && s.augmented == c.augmented)
            {
                bail!("comparison {} is not one of the shipped six", c.key());
            }
        }
        if self.probe.conditions.is_empty() {
            bail!("no probe conditions configured");
        }
        for c in &self.probe.comparisons {
            for side in [c.base, c.augmented] {
                if !self.probe.conditions.contains(&side) {
                    bail!("comparison {} needs condition {}", c.key(), side.label());
                }
            }
        }
        if self.probe.bootstrap_resamples == 0 {
            bail!("bootstrap_resamples must be >= 1");
        }
        if self.probe.top_k == 0 {
            bail!("top_k must be >= 1");
        }
        if self.data.corpus_count == 0 {
            bail!("corpus_count must be >= 1");
        }
        Ok(())
    }

    /// Resolve a data path against the run directory unless absolute.
    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        c.validate().unwrap();
        assert_eq!(c.probe.conditions.len(), 5);
        assert_eq!(c.probe.comparisons.len(), 6);
        assert_eq!(c.probe.bootstrap_resamples, 1000);
    }

    #[test]
    fn condition_labels_are_snake_case_in_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"fully_contextualized\""));
        assert!(text.contains("\"all_mask_minus_pos\""));
    }

    #[test]
    fn unknown_comparison_rejected() {
        let text = r#"{"probe": {"comparisons": [
            {"base": "fully_contextualized", "augmented": "static_plus_pos",
             "description": "backwards"}]}}"#;
        let c: RunConfig = serde_json::from_str(text).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn comparison_requires_its_conditions() {
        let text = r#"{"probe": {"conditions": ["all_mask_minus_pos"],
            "comparisons": [{"base": "all_mask_minus_pos",
             "augmented": "fully_contextualized", "description": "x"}]}}"#;
        let c: RunConfig = serde_json::from_str(text).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolve_keeps_absolute_paths() {
        let c = RunConfig::default();
        let out = Path::new("/tmp/run");
        assert_eq!(c.resolve(out, Path::new("v.txt")), PathBuf::from("/tmp/run/v.txt"));
        assert_eq!(c.resolve(out, Path::new("/abs/v.txt")), PathBuf::from("/abs/v.txt"));
    }
}
