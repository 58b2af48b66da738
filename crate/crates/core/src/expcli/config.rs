//! Run configuration: strict JSON, validated before anything executes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, GenerateConfig};
use crate::cat::CatConfig;
use crate::cdcl::CdclConfig;
use crate::clustering::{ClusterAlgorithm, HdbscanParams};
use crate::error::{Error, Result};
use crate::expcli::data::VocabConfig;
use crate::nnet;
use crate::topics::TopicAlgorithm;
use crate::training::{EpochBasis, Selection, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Uda,
    Cat,
    Cdcl,
    ClusterUda,
    TopicUda,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Uda => "uda",
            Method::Cat => "cat",
            Method::Cdcl => "cdcl",
            Method::ClusterUda => "cluster_uda",
            Method::TopicUda => "topic_uda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Dataset {
    Synth {
        n: usize,
        shift: f64,
        #[serde(default)]
        seed: u64,
    },
    /// JSONL corpora; relative paths resolve against the working directory.
    Files { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdaSection {
    pub lambda: f64,
    /// Encoder layer feeding the discriminator; the last one when absent.
    #[serde(default)]
    pub tap_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    pub algorithm: ClusterAlgorithm,
    /// Number of clusters. When absent the elbow rule picks it from
    /// `elbow_ks` (HDBSCAN ignores both).
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_elbow_ks")]
    pub elbow_ks: Vec<usize>,
    #[serde(default)]
    pub hdbscan: Option<HdbscanParams>,
    /// K-Means restarts; the lowest-distortion fit is kept.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

fn default_n_init() -> usize {
    10
}

fn default_elbow_ks() -> Vec<usize> {
    (2..=8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicSection {
    pub algorithm: TopicAlgorithm,
    pub k: usize,
    #[serde(default)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// TF-IDF word replacement applied to the source training split.
    #[serde(default)]
    pub replace: Option<AugmentConfig>,
    /// Classifier-filtered generation seeded from the source training split.
    #[serde(default)]
    pub generate: Option<GenerateConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneSection {
    #[serde(default = "default_perplexity")]
    pub perplexity: f64,
    #[serde(default = "default_tsne_iters")]
    pub iters: usize,
}

fn default_perplexity() -> f64 {
    30.0
}

fn default_tsne_iters() -> usize {
    1000
}

impl Default for TsneSection {
    fn default() -> Self {
        TsneSection {
            perplexity: default_perplexity(),
            iters: default_tsne_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub dataset: Dataset,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to 10 for the cluster and topic pipelines, 3 otherwise.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_encoder_dims")]
    pub encoder_dims: Vec<usize>,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub epoch_basis: EpochBasis,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub uda: Option<UdaSection>,
    #[serde(default)]
    pub cat: Option<CatConfig>,
    #[serde(default)]
    pub cdcl: Option<CdclConfig>,
    #[serde(default)]
    pub clustering: Option<ClusteringSection>,
    #[serde(default)]
    pub topics: Option<TopicSection>,
    #[serde(default)]
    pub augmentation: Option<AugmentationSpec>,
    #[serde(default)]
    pub tsne: Option<TsneSection>,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

fn default_batch_size() -> usize {
    64
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_warmup() -> f64 {
    TrainConfig::default().warmup_fraction
}

fn default_weight_decay() -> f64 {
    TrainConfig::default().weight_decay
}

fn default_dropout() -> f64 {
    TrainConfig::default().dropout
}

fn default_encoder_dims() -> Vec<usize> {
    nnet::DEFAULT_ENCODER_DIMS.to_vec()
}

fn default_head_hidden() -> usize {
    nnet::DEFAULT_HEAD_HIDDEN
}

fn default_true() -> bool {
    true
}

fn require<T>(section: &Option<T>, name: &str, method: Method) -> Result<()> {
    if section.is_none() {
        return Err(Error::config(name, format!("required by method `{}`", method.as_str())));
    }
    Ok(())
}

fn forbid<T>(section: &Option<T>, name: &str, method: Method) -> Result<()> {
    if section.is_some() {
        return Err(Error::config(name, format!("not used by method `{}`", method.as_str())));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        match &self.dataset {
            Dataset::Synth { n, shift, .. } => {
                if *n < 20 {
                    return Err(Error::config("dataset.synth.n", "must be at least 20"));
                }
                if !(0.0..=1.0).contains(shift) {
                    return Err(Error::config("dataset.synth.shift", "must lie in [0, 1]"));
                }
            }
            Dataset::Files { .. } => {
                if self.selection == Selection::TargetValidation {
                    return Err(Error::config(
                        "selection",
                        "target_validation is only available for synthetic datasets",
                    ));
                }
            }
        }
        let m = self.method;
        let adversarial = matches!(m, Method::Uda | Method::ClusterUda | Method::TopicUda);
        if adversarial {
            require(&self.uda, "uda", m)?;
        } else {
            forbid(&self.uda, "uda", m)?;
        }
        if m == Method::Cat {
            require(&self.cat, "cat", m)?;
        } else {
            forbid(&self.cat, "cat", m)?;
        }
        if m == Method::Cdcl {
            require(&self.cdcl, "cdcl", m)?;
        } else {
            forbid(&self.cdcl, "cdcl", m)?;
        }
        if m == Method::ClusterUda {
            require(&self.clustering, "clustering", m)?;
        } else {
            forbid(&self.clustering, "clustering", m)?;
        }
        if m == Method::TopicUda {
            require(&self.topics, "topics", m)?;
        } else {
            forbid(&self.topics, "topics", m)?;
        }

        if let Some(u) = &self.uda {
            if !(u.lambda >= 0.0 && u.lambda.is_finite()) {
                return Err(Error::config("uda.lambda", "must be a finite non-negative number"));
            }
            if let Some(t) = u.tap_layer {
                if t >= self.encoder_dims.len() {
                    return Err(Error::config(
                        "uda.tap_layer",
                        format!("encoder has {} layers", self.encoder_dims.len()),
                    ));
                }
            }
        }
        if let Some(c) = &self.cat {
            c.validate()?;
        }
        if let Some(c) = &self.cdcl {
            c.validate()?;
        }
        if let Some(c) = &self.clustering {
            match c.k {
                Some(k) if k < 2 && c.algorithm != ClusterAlgorithm::Hdbscan => {
                    return Err(Error::config("clustering.k", "needs at least 2 clusters"));
                }
                None if c.algorithm != ClusterAlgorithm::Hdbscan && c.elbow_ks.len() < 3 => {
                    return Err(Error::config(
                        "clustering.elbow_ks",
                        "the elbow rule needs at least 3 candidate k values",
                    ));
                }
                _ => {}
            }
            if c.n_init == 0 {
                return Err(Error::config("clustering.n_init", "must be positive"));
            }
            if c.hdbscan.is_some() && c.algorithm != ClusterAlgorithm::Hdbscan {
                return Err(Error::config("clustering.hdbscan", "only used by the hdbscan algorithm"));
            }
        }
        if let Some(t) = &self.topics {
            if t.k < 2 {
                return Err(Error::config("topics.k", "needs at least 2 topics"));
            }
            if t.iters == Some(0) {
                return Err(Error::config("topics.iters", "must be positive"));
            }
        }
        if let Some(a) = &self.augmentation {
            if let Some(r) = &a.replace {
                r.validate()?;
            }
            if let Some(g) = &a.generate {
                if g.strategies.is_empty() {
                    return Err(Error::config("augmentation.generate.strategies", "needs at least one strategy"));
                }
                if g.prompt_tokens.is_empty() {
                    return Err(Error::config("augmentation.generate.prompt_tokens", "needs at least one length"));
                }
            }
        }
        if let Some(t) = &self.tsne {
            if !(t.perplexity >= 1.0) {
                return Err(Error::config("tsne.perplexity", "must be at least 1"));
            }
            if t.iters == 0 {
                return Err(Error::config("tsne.iters", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.method {
            Method::ClusterUda | Method::TopicUda => 10,
            _ => 3,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs(),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            encoder_dims: self.encoder_dims.clone(),
            head_hidden: self.head_hidden,
            seed: self.seed,
            selection: self.selection,
            epoch_basis: self.epoch_basis,
        }
    }

    /// Canonical serialization: every default spelled out, fixed key order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// `<method>-<seed>-<first 12 hex digits of the hash>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}-{}", self.method.as_str(), self.seed, &self.hash()[..12])
    }
}

/// Sets `value` at a dotted path such as `uda.lambda`, creating
/// intermediate objects as needed.
pub fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed parameter path"));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    const UDA: &str = r#"{"method": "uda", "dataset": {"synth": {"n": 40, "shift": 0.5}}, "uda": {"lambda": 0.1}}"#;

    #[test]
    fn minimal_uda_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(UDA).unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs(), 3);
        assert_eq!(cfg.uda.unwrap().lambda, 0.1);
        assert!(cfg.checkpoints);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = UDA.replace("\"method\"", "\"seeed\": 1, \"method\"");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Json(_))));
        let nested = UDA.replace("\"lambda\": 0.1", "\"lambda\": 0.1, \"lamda\": 1");
        assert!(RunConfig::from_json(&nested).is_err());
    }

    #[test]
    fn odd_batch_size_is_a_field_error() {
        let text = UDA.replace("\"method\"", "\"batch_size\": 63, \"method\"");
        match RunConfig::from_json(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn method_sections_are_checked() {
        let missing = r#"{"method": "cat", "dataset": {"synth": {"n": 40, "shift": 0.5}}}"#;
        match RunConfig::from_json(missing) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "cat"),
            other => panic!("{other:?}"),
        }
        let stray = r#"{"method": "baseline", "dataset": {"synth": {"n": 40, "shift": 0.5}}, "uda": {"lambda": 1}}"#;
        assert!(RunConfig::from_json(stray).is_err());
    }

    #[test]
    fn hash_ignores_spelling_of_defaults() {
        let a = RunConfig::from_json(UDA).unwrap();
        let b = RunConfig::from_json(&UDA.replace("\"method\"", "\"batch_size\": 64, \"method\"")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert!(a.run_name().starts_with("uda-0-"));
        let c = RunConfig::from_json(&UDA.replace("0.1", "1.0")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn set_path_builds_nested_objects() {
        let mut v: serde_json::Value = serde_json::from_str(UDA).unwrap();
        set_path(&mut v, "uda.lambda", 5.0.into()).unwrap();
        set_path(&mut v, "cdcl.tau", 0.3.into()).unwrap();
        assert_eq!(v["uda"]["lambda"], 5.0);
        assert_eq!(v["cdcl"]["tau"], 0.3);
        assert!(set_path(&mut v, "method.x", 1.into()).is_err());
    }
}
