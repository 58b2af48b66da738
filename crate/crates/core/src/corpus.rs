//! Corpus ingestion: cleaning, tokenization, vocabulary, TF-IDF, splitting,
//! and a synthetic two-domain generator.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::rng;

/// Hard cap on tokens per document.
pub const MAX_TOKENS: usize = 128;

/// Vocabulary id shared by out-of-vocabulary tokens and padding.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Class label. Always present for source documents; for target
    /// documents it is only ever read by evaluation code.
    pub label: Option<u8>,
    /// 0 = source, 1 = target, or a cluster/topic id.
    pub domain: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub split: Option<Split>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        Corpus {
            documents,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Labels as class ids, failing if any document is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.documents
            .iter()
            .map(|d| {
                d.label
                    .map(usize::from)
                    .ok_or_else(|| Error::invalid(format!("document `{}` has no label", d.id)))
            })
            .collect()
    }

    /// Labels if every document carries one.
    pub fn maybe_labels(&self) -> Option<Vec<usize>> {
        self.documents
            .iter()
            .map(|d| d.label.map(usize::from))
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    /// Documents of `self` followed by those of `other`.
    pub fn concat(&self, other: &Corpus) -> Corpus {
        let mut documents = self.documents.clone();
        documents.extend(other.documents.iter().cloned());
        Corpus {
            documents,
            split: if self.split == other.split { self.split } else { None },
        }
    }

    /// Cleans every text and drops documents that end up empty.
    pub fn cleaned(mut self) -> Corpus {
        self.documents.retain_mut(|d| {
            d.text = clean(&d.text);
            !d.text.is_empty()
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for d in &self.documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::invalid(format!("duplicate document id `{}`", d.id)));
            }
            if let Some(l) = d.label {
                if l > 1 {
                    return Err(Error::InvalidLabel {
                        label: usize::from(l),
                        classes: 2,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Corpus> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut documents = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            documents.push(serde_json::from_str(&line)?);
        }
        let corpus = Corpus::new(documents);
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for d in &self.documents {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>").unwrap())
}

fn entity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"&(?:#[0-9]+|#[xX][0-9a-fA-F]+|[a-zA-Z][a-zA-Z0-9]*);").unwrap())
}

fn dots_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\.{3,}").unwrap())
}

/// Strips non-ASCII characters, HTML tags and entities, collapses runs of
/// three or more dots and normalizes whitespace. Returns an empty string
/// when nothing survives.
pub fn clean(text: &str) -> String {
    let ascii: String = text
        .chars()
        .filter(char::is_ascii)
        .map(|c| if c.is_ascii_control() { ' ' } else { c })
        .collect();

    // removing one tag can expose another ("<<a>b>")
    let mut s = ascii;
    loop {
        let next = tag_re().replace_all(&s, " ");
        if next == s {
            break;
        }
        s = next.into_owned();
    }
    let s = entity_re().replace_all(&s, " ");
    let s = dots_re().replace_all(&s, ". ");
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased word tokens: runs of ASCII alphanumerics, and every other
/// non-whitespace character as a token of its own.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.extend(std::iter::once(c.to_lowercase().collect::<String>()));
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Word tokens capped at [`MAX_TOKENS`].
pub fn capped_tokens(text: &str) -> Vec<String> {
    let mut t = word_tokens(text);
    t.truncate(MAX_TOKENS);
    t
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<usize>,
    n_docs: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from `(token, df)` pairs in id order, ids starting at 1.
    pub fn from_entries(entries: Vec<(String, usize)>, n_docs: usize) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut df = vec![0];
        let mut index = HashMap::new();
        for (tok, d) in entries {
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
            df.push(d);
        }
        Vocabulary {
            tokens,
            index,
            df,
            n_docs,
        }
    }

    /// Number of ids including the reserved one.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn df(&self, id: usize) -> usize {
        self.df[id]
    }

    /// Documents the vocabulary was counted over.
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// `ln((1+N)/(1+df)) + 1`; the reserved id scores 0.
    pub fn idf(&self, id: usize) -> f64 {
        if id == UNK_ID {
            return 0.0;
        }
        ((1.0 + self.n_docs as f64) / (1.0 + self.df[id] as f64)).ln() + 1.0
    }

    /// `token<TAB>id<TAB>df` lines sorted by id, reserved id omitted.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for id in 1..self.tokens.len() {
            out.push_str(&format!("{}\t{}\t{}\n", self.tokens[id], id, self.df[id]));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Inverse of [`Vocabulary::to_tsv`]; `n_docs` is not part of the file.
    pub fn from_tsv(text: &str, n_docs: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = || Error::invalid(format!("vocab.tsv line {}: `{line}`", lineno + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let id: usize = parts[1].parse().map_err(|_| bad())?;
            if id != entries.len() + 1 {
                return Err(bad());
            }
            entries.push((parts[0].to_string(), parts[2].parse().map_err(|_| bad())?));
        }
        Ok(Vocabulary::from_entries(entries, n_docs))
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenizedDoc {
    TokenizedDoc {
        tokens: capped_tokens(text).iter().map(|t| vocab.id(t)).collect(),
    }
}

/// Keeps the `v_max` most document-frequent tokens with `df ≥ min_df`;
/// ties go to the lexicographically smaller token.
pub fn build_vocab(corpus: &Corpus, v_max: usize, min_df: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for d in &corpus.documents {
        let mut toks = capped_tokens(&d.text);
        toks.sort_unstable();
        toks.dedup();
        for t in toks {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().filter(|(_, c)| *c >= min_df).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(v_max);
    Ok(Vocabulary::from_entries(ranked, corpus.len()))
}

/// Raw-count term frequency per vocabulary id, reserved id excluded.
pub fn term_counts(doc: &TokenizedDoc, vocab_len: usize) -> Vec<f64> {
    let mut tf = vec![0.0; vocab_len];
    for &id in &doc.tokens {
        if id != UNK_ID {
            tf[id] += 1.0;
        }
    }
    tf
}

/// Row-L2-normalized TF-IDF with one column per vocabulary id (column 0,
/// the reserved id, is always zero).
pub fn tfidf(corpus: &Corpus, vocab: &Vocabulary) -> FeatureMatrix {
    let texts: Vec<&str> = corpus.documents.iter().map(|d| d.text.as_str()).collect();
    tfidf_texts(&texts, vocab)
}

pub fn tfidf_texts(texts: &[&str], vocab: &Vocabulary) -> FeatureMatrix {
    let v = vocab.len();
    let idf: Vec<f64> = (0..v).map(|id| vocab.idf(id)).collect();
    let mut m = FeatureMatrix::zeros(texts.len(), v);
    for (i, text) in texts.iter().enumerate() {
        let doc = tokenize(text, vocab);
        let row = m.row_mut(i);
        for &id in &doc.tokens {
            if id != UNK_ID {
                row[id] += 1.0;
            }
        }
        for (x, w) in row.iter_mut().zip(&idf) {
            *x *= w;
        }
        let n = crate::matrix::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    m
}

/// Seeded shuffle then a 70/10/20 partition; remainders go to train.
pub fn split(corpus: &Corpus, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let n = corpus.len();
    if n < 10 {
        return Err(Error::CorpusTooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(seed, "split", &[]));
    let n_val = n / 10;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let part = |range: std::ops::Range<usize>, split: Split| Corpus {
        documents: order[range]
            .iter()
            .map(|&i| corpus.documents[i].clone())
            .collect(),
        split: Some(split),
    };
    Ok((
        part(0..n_train, Split::Train),
        part(n_train..n_train + n_val, Split::Validation),
        part(n_train + n_val..n, Split::Test),
    ))
}

/// Word pools of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthVocabulary {
    pub class_words: [Vec<String>; 2],
    /// Style markers of class-1 documents in each register.
    pub source_style: Vec<String>,
    pub target_style: Vec<String>,
    /// Class-independent topics covered by both domains.
    pub shared_topics: Vec<Vec<String>>,
    /// Topic of every document in the target's own register, and of a few
    /// source-register documents.
    pub target_topic: Vec<String>,
    pub filler: Vec<String>,
}

impl SynthVocabulary {
    pub fn standard() -> Self {
        let pool = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        SynthVocabulary {
            class_words: [pool("cza", 30), pool("czb", 30)],
            source_style: pool("sa", 20),
            target_style: pool("ta", 20),
            shared_topics: vec![pool("pa", 30), pool("pb", 30)],
            target_topic: pool("pc", 30),
            filler: pool("fw", 60),
        }
    }
}

// token-slot mixture of a synthetic document
const P_TOPIC: f64 = 0.30;
const P_CLASS: f64 = 0.20;
const P_STYLE: f64 = 0.20;
const P_OWN_CLASS: f64 = 0.70;
const SENTENCE_LEN: usize = 12;
// share of source-register documents on the target-leaning topic
const P_TARGET_TOPIC: f64 = 0.10;

/// Two labeled two-class corpora. Every document carries class words
/// (mildly informative), words of one class-independent topic, and filler;
/// class-1 documents also carry style markers (strongly informative),
/// class-0 documents filler in their place.
///
/// With probability `shift` a target document is written in the target's own
/// register: style markers the source never uses, always on the topic the
/// source rarely covers. Otherwise it is drawn exactly like a source document,
/// so `shift = 0` makes both domains identically distributed. Target labels
/// are kept for evaluation only.
pub fn synth_corpus(n_per_domain: usize, shift: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if n_per_domain < 20 {
        return Err(Error::invalid(format!(
            "n_per_domain must be at least 20, got {n_per_domain}"
        )));
    }
    if !(0.0..=1.0).contains(&shift) {
        return Err(Error::invalid(format!("shift must lie in [0, 1], got {shift}")));
    }
    let words = SynthVocabulary::standard();
    let make = |domain: i64| {
        let tag = if domain == 0 { "src" } else { "tgt" };
        let mut rng = rng::derived(seed, "synth", &[domain as u64]);
        let documents = (0..n_per_domain)
            .map(|i| {
                let label = (i % 2) as u8;
                let y = usize::from(label);
                let own_register = domain == 1 && rng.gen_bool(shift);
                let (style, topic) = if own_register {
                    (&words.target_style, &words.target_topic)
                } else if rng.gen_bool(P_TARGET_TOPIC) {
                    (&words.source_style, &words.target_topic)
                } else {
                    let t = rng.gen_range(0..words.shared_topics.len());
                    (&words.source_style, &words.shared_topics[t])
                };
                let len = rng.gen_range(40..=70);
                let mut text = String::new();
                for t in 0..len {
                    let u: f64 = rng.gen();
                    let pool = if u < P_TOPIC {
                        topic
                    } else if u < P_TOPIC + P_CLASS {
                        let own = rng.gen_bool(P_OWN_CLASS);
                        &words.class_words[if own { y } else { 1 - y }]
                    } else if u < P_TOPIC + P_CLASS + P_STYLE && y == 1 {
                        style
                    } else {
                        &words.filler
                    };
                    if t > 0 {
                        text.push(' ');
                    }
                    text.push_str(&pool[rng.gen_range(0..pool.len())]);
                    if (t + 1) % SENTENCE_LEN == 0 || t + 1 == len {
                        text.push_str(" .");
                    }
                }
                Document {
                    id: format!("{tag}-{i:05}"),
                    text,
                    label: Some(label),
                    domain,
                }
            })
            .collect();
        Corpus::new(documents)
    };
    let source = make(0);
    let target = make(1);
    Ok((source, target))
}
