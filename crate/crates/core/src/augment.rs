//! Data augmentation: TF-IDF-guided word replacement, and conditional
//! generation from a language model with classifier filtering.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{capped_tokens, word_tokens, Corpus, Document, TokenizedDoc, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::argmax;
use crate::rng;
use crate::training::Classifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// One augmented copy of the corpus is produced per level.
    pub levels: Vec<f64>,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("augment.levels", "needs at least one level"));
        }
        if self.levels.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::config("augment.levels", "every level must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Corpus-level statistics for [`tfidf_replace`]: idf per vocabulary id and
/// the sampler over non-keyword replacement tokens.
#[derive(Debug, Clone)]
pub struct Replacer {
    idf: Vec<f64>,
    candidates: Vec<usize>,
    sampler: WeightedIndex<f64>,
}

impl Replacer {
    /// Global TF-IDF mass of a token is its summed row-normalized TF-IDF
    /// over `corpus`. Tokens below the median mass are the non-keywords,
    /// weighted by `max_mass - mass`.
    pub fn fit(corpus: &Corpus, vocab: &Vocabulary) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let x = crate::corpus::tfidf(corpus, vocab);
        let mut mass = vec![0.0; vocab.len()];
        for row in x.iter_rows() {
            for (m, v) in mass.iter_mut().zip(row) {
                *m += v;
            }
        }
        let mut sorted: Vec<f64> = mass[1..].to_vec();
        if sorted.is_empty() {
            return Err(Error::invalid("vocabulary has no tokens"));
        }
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let max = *sorted.last().unwrap();
        let mut candidates: Vec<usize> = (1..vocab.len()).filter(|&id| mass[id] < median).collect();
        if candidates.is_empty() {
            // flat mass: every token is equally uninformative
            candidates = (1..vocab.len()).collect();
        }
        let weights: Vec<f64> = candidates.iter().map(|&id| (max - mass[id]).max(f64::MIN_POSITIVE)).collect();
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Replacer {
            idf: (0..vocab.len()).map(|id| vocab.idf(id)).collect(),
            candidates,
            sampler,
        })
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    /// Replacement probability per position: `min(1, p (z_max - z_i) / z̄)`
    /// with `z` the in-document TF-IDF and `z̄` the mean of `z_max - z`.
    pub fn probabilities(&self, doc: &TokenizedDoc, p: f64) -> Vec<f64> {
        let n = doc.tokens.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for &t in &doc.tokens {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        let z: Vec<f64> = doc.tokens.iter().map(|t| tf[t] * self.idf[*t]).collect();
        let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z_bar = z.iter().map(|v| z_max - v).sum::<f64>() / n as f64;
        if z_bar <= 0.0 {
            return vec![0.0; n];
        }
        z.iter().map(|v| (p * (z_max - v) / z_bar).min(1.0)).collect()
    }

    pub fn sample_replacement(&self, rng: &mut rng::Rng) -> usize {
        self.candidates[self.sampler.sample(rng)]
    }
}

/// Replaces each token independently with the probability from
/// [`Replacer::probabilities`]. Length is preserved; single-token
/// documents come back unchanged.
pub fn tfidf_replace(doc: &TokenizedDoc, replacer: &Replacer, p: f64, seed: u64) -> TokenizedDoc {
    let mut rng = rng::derived(seed, "tfidf_replace", &[]);
    replace_with(doc, replacer, p, &mut rng)
}

fn replace_with(doc: &TokenizedDoc, replacer: &Replacer, p: f64, rng: &mut rng::Rng) -> TokenizedDoc {
    let probs = replacer.probabilities(doc, p);
    let tokens = doc
        .tokens
        .iter()
        .zip(&probs)
        .map(|(&t, &pi)| {
            if pi > 0.0 && rng.gen::<f64>() < pi {
                replacer.sample_replacement(rng)
            } else {
                t
            }
        })
        .collect();
    TokenizedDoc { tokens }
}

/// The original corpus followed by one augmented copy per level, with ids
/// `<orig>#aug<n>` (n from 1). Untouched words keep their surface form.
pub fn augment_corpus(corpus: &Corpus, vocab: &Vocabulary, cfg: &AugmentConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let replacer = Replacer::fit(corpus, vocab)?;
    let mut docs = corpus.documents.clone();
    for (level, &p) in cfg.levels.iter().enumerate() {
        for (i, d) in corpus.documents.iter().enumerate() {
            let words = capped_tokens(&d.text);
            let ids = TokenizedDoc {
                tokens: words.iter().map(|w| vocab.id(w)).collect(),
            };
            let mut rng = rng::derived(seed, "augment", &[level as u64, i as u64]);
            let new = replace_with(&ids, &replacer, p, &mut rng);
            let text: Vec<&str> = words
                .iter()
                .zip(ids.tokens.iter().zip(&new.tokens))
                .map(|(w, (old, new))| if old == new { w.as_str() } else { vocab.token(*new) })
                .collect();
            docs.push(Document {
                id: format!("{}#aug{}", d.id, level + 1),
                text: text.join(" "),
                label: d.label,
                domain: d.domain,
            });
        }
    }
    Ok(Corpus {
        documents: docs,
        split: corpus.split,
    })
}

/// Next-token distributions over a fixed token set whose last id is the
/// end-of-sequence token.
pub trait LanguageModel {
    /// Number of ids including the end token.
    fn size(&self) -> usize;

    fn end_token(&self) -> usize {
        self.size() - 1
    }

    fn next_distribution(&self, context: &[usize]) -> Vec<f64>;
}

pub const NGRAM_DISCOUNT: f64 = 0.75;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u32,
    next: BTreeMap<usize, u32>,
}

/// Interpolated absolute-discounting n-gram model.
#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    discount: f64,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// `levels[n]` maps contexts of length `n` to their continuations.
    levels: Vec<HashMap<Vec<usize>, ContextCounts>>,
}

impl NgramLm {
    /// Fits on token sequences; every distinct token gets an id in order of
    /// first appearance and each sequence implicitly ends with the end token.
    pub fn fit(sequences: &[Vec<String>], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be positive"));
        }
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for s in sequences {
            for t in s {
                if !index.contains_key(t) {
                    index.insert(t.clone(), tokens.len());
                    tokens.push(t.clone());
                }
            }
        }
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let end = tokens.len();
        let mut levels = vec![HashMap::new(); order];
        for s in sequences {
            let ids: Vec<usize> = s.iter().map(|t| index[t]).chain(std::iter::once(end)).collect();
            for (i, &w) in ids.iter().enumerate() {
                for (n, level) in levels.iter_mut().enumerate() {
                    if n > i {
                        break;
                    }
                    let ctx = ids[i - n..i].to_vec();
                    let c: &mut ContextCounts = level.entry(ctx).or_default();
                    c.total += 1;
                    *c.next.entry(w).or_insert(0) += 1;
                }
            }
        }
        Ok(NgramLm {
            order,
            discount: NGRAM_DISCOUNT,
            tokens,
            index,
            levels,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token string for an id; the end token renders as `</s>`.
    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("</s>", String::as_str)
    }

    /// Ids of known tokens; unknown tokens are dropped.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.id(t)).collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.end_token())
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl LanguageModel for NgramLm {
    fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    fn next_distribution(&self, context: &[usize]) -> Vec<f64> {
        let v = self.size();
        let mut dist = vec![1.0 / v as f64; v];
        let max_n = (self.order - 1).min(context.len());
        for n in 0..=max_n {
            let ctx = &context[context.len() - n..];
            let Some(c) = self.levels[n].get(ctx) else {
                // unseen context: keep the lower-order estimate
                continue;
            };
            let total = c.total as f64;
            let backoff = self.discount * c.next.len() as f64 / total;
            let mut next = dist.iter().map(|p| backoff * p).collect::<Vec<_>>();
            for (&w, &cnt) in &c.next {
                next[w] += (cnt as f64 - self.discount).max(0.0) / total;
            }
            dist = next;
        }
        dist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    TopK,
    TopP,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::TopK => "top_k",
            Strategy::TopP => "top_p",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    #[serde(default = "default_beams")]
    pub beams: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_beams() -> usize {
    5
}
fn default_k() -> usize {
    30
}
fn default_p() -> f64 {
    0.99
}
fn default_max_len() -> usize {
    40
}

impl DecodeConfig {
    pub fn new(strategy: Strategy) -> Self {
        DecodeConfig {
            strategy,
            beams: default_beams(),
            k: default_k(),
            p: default_p(),
            max_len: default_max_len(),
        }
    }
}

/// Token ids sorted by decreasing probability, ties to the lower id.
fn ranked(dist: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..dist.len()).collect();
    ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    ids
}

/// Smallest probability-sorted prefix whose mass reaches `p`.
pub fn nucleus(dist: &[f64], p: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut mass = 0.0;
    for id in ranked(dist) {
        if dist[id] <= 0.0 {
            break;
        }
        out.push(id);
        mass += dist[id];
        if mass >= p {
            break;
        }
    }
    out
}

fn sample_from(ids: &[usize], dist: &[f64], rng: &mut rng::Rng) -> usize {
    let total: f64 = ids.iter().map(|&i| dist[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in ids {
        if u < dist[i] {
            return i;
        }
        u -= dist[i];
    }
    *ids.last().expect("non-empty candidate set")
}

/// Length-normalized log-probability of `tokens` following `prompt`.
pub fn sequence_score(lm: &dyn LanguageModel, prompt: &[usize], tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut ctx = prompt.to_vec();
    let mut lp = 0.0;
    for &t in tokens {
        lp += lm.next_distribution(&ctx)[t].ln();
        ctx.push(t);
    }
    lp / tokens.len() as f64
}

/// Generates a continuation of `prompt`. The returned ids include the end
/// token when one was produced.
pub fn decode(lm: &dyn LanguageModel, prompt: &[usize], cfg: &DecodeConfig, seed: u64) -> Vec<usize> {
    match cfg.strategy {
        Strategy::Beam => beam_search(lm, prompt, cfg.beams.max(1), cfg.max_len),
        _ => {
            let mut rng = rng::derived(seed, "decode", &[]);
            let end = lm.end_token();
            let mut ctx = prompt.to_vec();
            let mut out = Vec::new();
            while out.len() < cfg.max_len {
                let dist = lm.next_distribution(&ctx);
                let next = match cfg.strategy {
                    Strategy::Greedy => argmax(&dist),
                    Strategy::TopK => {
                        let ids: Vec<usize> = ranked(&dist).into_iter().take(cfg.k.max(1)).collect();
                        sample_from(&ids, &dist, &mut rng)
                    }
                    Strategy::TopP => sample_from(&nucleus(&dist, cfg.p), &dist, &mut rng),
                    Strategy::Beam => unreachable!(),
                };
                out.push(next);
                ctx.push(next);
                if next == end {
                    break;
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

fn beam_search(lm: &dyn LanguageModel, prompt: &[usize], beams: usize, max_len: usize) -> Vec<usize> {
    let end = lm.end_token();
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for h in &active {
            let ctx: Vec<usize> = prompt.iter().chain(&h.tokens).copied().collect();
            for (t, &p) in lm.next_distribution(&ctx).iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + p.ln(),
                });
            }
        }
        // all candidates share one length, so raw and normalized order agree
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        active.clear();
        for c in candidates.into_iter().take(beams) {
            if c.tokens.last() == Some(&end) {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
        if active.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .chain(active)
        .max_by(|a, b| a.score().total_cmp(&b.score()).then_with(|| b.tokens.cmp(&a.tokens)))
        .map(|h| h.tokens)
        .unwrap_or_default()
}

/// Prompt labels of the generation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLabel {
    Left,
    Right,
    Mainstream,
}

impl PromptLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptLabel::Left => "left",
            PromptLabel::Right => "right",
            PromptLabel::Mainstream => "mainstream",
        }
    }
}

impl FromStr for PromptLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(PromptLabel::Left),
            "right" => Ok(PromptLabel::Right),
            "mainstream" => Ok(PromptLabel::Mainstream),
            other => Err(Error::invalid(format!("unknown prompt label {other:?}"))),
        }
    }
}

/// `News type : <LABEL> Text :` followed by the first `t` prefix tokens,
/// tokenized like corpus text.
pub fn build_prompt(label: &str, prefix: &[String], t: usize) -> Result<Vec<String>> {
    let label: PromptLabel = label.parse()?;
    let mut tokens = word_tokens(&format!("News type : {} Text :", label.as_str()));
    tokens.extend(prefix.iter().take(t).cloned());
    Ok(tokens)
}

/// Splits text on sentence-final tokens and joins every three sentences.
pub fn group_sentences(text: &str) -> Vec<String> {
    let mut sentences: Vec<Vec<String>> = vec![Vec::new()];
    for tok in word_tokens(text) {
        let last = matches!(tok.as_str(), "." | "!" | "?");
        sentences.last_mut().unwrap().push(tok);
        if last {
            sentences.push(Vec::new());
        }
    }
    sentences.retain(|s| !s.is_empty());
    sentences.chunks(3).map(|c| c.concat().join(" ")).collect()
}

/// Labels generated texts; the pipeline keeps a text only when the label
/// equals the prompted class.
pub trait TextClassifier {
    fn classify(&self, texts: &[String]) -> Result<Vec<usize>>;
}

/// A trained classifier behind the corpus vectorizer.
pub struct VectorizedClassifier<'a> {
    pub model: &'a Classifier,
    pub vocab: &'a Vocabulary,
}

impl TextClassifier for VectorizedClassifier<'_> {
    fn classify(&self, texts: &[String]) -> Result<Vec<usize>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.model.predict(&crate::corpus::tfidf_texts(&refs, self.vocab))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub strategies: Vec<DecodeConfig>,
    /// Prompt prefix lengths.
    #[serde(default = "default_prompt_tokens")]
    pub prompt_tokens: Vec<usize>,
    /// Prompt label for class 0 and class 1.
    #[serde(default = "default_class_labels")]
    pub class_labels: [PromptLabel; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_prompt_tokens() -> Vec<usize> {
    vec![3, 5, 10]
}

fn default_class_labels() -> [PromptLabel; 2] {
    [PromptLabel::Mainstream, PromptLabel::Right]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReportRow {
    pub strategy: Strategy,
    pub t: usize,
    pub generated: usize,
    pub retained: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub corpus: Corpus,
    pub report: Vec<GenerationReportRow>,
    pub warnings: Vec<String>,
}

pub fn report_csv(rows: &[GenerationReportRow]) -> String {
    let mut out = String::from("strategy,T,generated,retained\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.strategy, r.t, r.generated, r.retained));
    }
    out
}

/// Fits the generation model on labeled documents: every group of three
/// sentences becomes one prompt-formatted training sequence.
pub fn fit_generation_lm(corpus: &Corpus, class_labels: [PromptLabel; 2]) -> Result<NgramLm> {
    let mut sequences = Vec::new();
    for d in &corpus.documents {
        let Some(label) = d.label else { continue };
        for group in group_sentences(&d.text) {
            let words = word_tokens(&group);
            sequences.push(build_prompt(class_labels[label as usize].as_str(), &words, words.len())?);
        }
    }
    NgramLm::fit(&sequences, 3)
}

/// Prompts the model with every labeled seed document, strategy and prefix
/// length, and keeps generations whose predicted class equals the prompted
/// one.
pub fn generate_filtered(
    lm: &NgramLm,
    seeds: &Corpus,
    classifier: &dyn TextClassifier,
    cfg: &GenerateConfig,
) -> Result<Generated> {
    let mut docs = Vec::new();
    let mut report = Vec::new();
    for (si, strategy) in cfg.strategies.iter().enumerate() {
        for &t in &cfg.prompt_tokens {
            let mut texts = Vec::new();
            let mut meta = Vec::new();
            for (di, d) in seeds.documents.iter().enumerate() {
                let Some(label) = d.label else { continue };
                let prefix = word_tokens(&d.text);
                let prompt = build_prompt(cfg.class_labels[label as usize].as_str(), &prefix, t)?;
                let ids = lm.encode(&prompt);
                let seed = rng::derive(cfg.seed, "generate", &[si as u64, t as u64, di as u64]);
                let out = decode(lm, &ids, strategy, seed);
                let continuation = lm.decode_text(&out);
                let text = prefix.iter().take(t).cloned().chain(std::iter::once(continuation)).collect::<Vec<_>>();
                texts.push(text.join(" ").trim().to_string());
                meta.push((d, label));
            }
            let predicted = if texts.is_empty() {
                Vec::new()
            } else {
                classifier.classify(&texts)?
            };
            let mut retained = 0;
            for ((text, (d, label)), pred) in texts.into_iter().zip(meta).zip(predicted) {
                if pred != label as usize {
                    continue;
                }
                retained += 1;
                docs.push(Document {
                    id: format!("{}#gen-{}-t{}", d.id, strategy.strategy, t),
                    text,
                    label: Some(label),
                    domain: d.domain,
                });
            }
            report.push(GenerationReportRow {
                strategy: strategy.strategy,
                t,
                generated: report_generated(seeds),
                retained,
            });
        }
    }
    let mut warnings = Vec::new();
    if docs.is_empty() {
        let w = "generation: no generated sample matched its prompted label".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Generated {
        corpus: Corpus::new(docs),
        report,
        warnings,
    })
}

fn report_generated(seeds: &Corpus) -> usize {
    seeds.documents.iter().filter(|d| d.label.is_some()).count()
}
