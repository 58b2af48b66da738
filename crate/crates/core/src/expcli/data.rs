//! Turning a source and a target corpus into vectorized train/validation/test
//! splits.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, split, tfidf, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::training::{AdaptationData, EvalSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    #[serde(default = "default_v_max")]
    pub v_max: usize,
    #[serde(default = "default_min_df")]
    pub min_df: usize,
}

fn default_v_max() -> usize {
    5000
}

fn default_min_df() -> usize {
    2
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            v_max: default_v_max(),
            min_df: default_min_df(),
        }
    }
}

/// The three splits of one domain.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn of(corpus: &Corpus, seed: u64) -> Result<Self> {
        let (train, validation, test) = split(corpus, seed)?;
        Ok(Splits {
            train,
            validation,
            test,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub source: Splits,
    pub target: Splits,
    pub data: AdaptationData,
}

fn eval_set(corpus: &Corpus, vocab: &Vocabulary) -> EvalSet {
    EvalSet {
        features: tfidf(corpus, vocab),
        labels: corpus.maybe_labels(),
    }
}

/// Cleans and splits both corpora, builds the vocabulary on the union of the
/// two training splits, and vectorizes everything with it. Target labels,
/// when present, only reach evaluation and diagnostics.
pub fn prepare(source: &Corpus, target: &Corpus, seed: u64, vocab_cfg: VocabConfig) -> Result<Prepared> {
    let source = source.clone().cleaned();
    let target = target.clone().cleaned();
    source.validate()?;
    target.validate()?;
    let source = Splits::of(&source, crate::rng::derive(seed, "split/source", &[]))?;
    let target = Splits::of(&target, crate::rng::derive(seed, "split/target", &[]))?;
    let pooled = source.train.concat(&target.train);
    let vocab = build_vocab(&pooled, vocab_cfg.v_max, vocab_cfg.min_df)?;
    if vocab.len() < 2 {
        return Err(Error::invalid("vocabulary is empty after min_df filtering"));
    }
    let data = AdaptationData {
        source_train: tfidf(&source.train, &vocab),
        source_labels: source.train.labels()?,
        target_train: tfidf(&target.train, &vocab),
        target_train_labels: target.train.maybe_labels(),
        target_train_ids: target.train.ids(),
        source_val: eval_set(&source.validation, &vocab),
        target_val: eval_set(&target.validation, &vocab),
        source_test: eval_set(&source.test, &vocab),
        target_test: eval_set(&target.test, &vocab),
    };
    Ok(Prepared {
        vocab,
        source,
        target,
        data,
    })
}
