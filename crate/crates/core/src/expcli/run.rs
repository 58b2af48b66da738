//! Executing one configured run and persisting its directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::adversarial::{sweep_domain_pairs, train_uda, PooledData, UdaConfig};
use crate::augment::{augment_corpus, fit_generation_lm, generate_filtered, report_csv, VectorizedClassifier};
use crate::cat::train_cat;
use crate::cdcl::train_cdcl;
use crate::clustering::{self, domains_csv, elbow_k, hdbscan, ClusterAlgorithm, HdbscanParams};
use crate::corpus::{synth_corpus, tfidf, Corpus};
use crate::error::{Error, Result};
use crate::expcli::config::{Dataset, Method, RunConfig, TsneSection};
use crate::expcli::data::{prepare, Prepared};
use crate::expcli::tsne::{tsne_project, TsneConfig};
use crate::matrix::Matrix;
use crate::nnet::{save_checkpoint, Network};
use crate::rng;
use crate::topics::{self, assign_domains, topics_report, CountMatrix, LdaParams, TopicAlgorithm};
use crate::training::{train_baseline, Classifier, RunResult};

/// Everything a run produces before it touches the filesystem.
#[derive(Debug, Clone)]
pub struct Execution {
    pub result: RunResult,
    /// Extra files, by name relative to the run directory.
    pub artifacts: Vec<(String, String)>,
    /// Networks of the selected checkpoint, by name.
    pub networks: Vec<(String, Network)>,
    /// Method-specific facts recorded in `result.json`.
    pub details: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub result: RunResult,
}

pub fn load_corpora(dataset: &Dataset) -> Result<(Corpus, Corpus)> {
    match dataset {
        Dataset::Synth { n, shift, seed } => synth_corpus(*n, *shift, *seed),
        Dataset::Files { source, target } => Ok((Corpus::read_jsonl(source)?, Corpus::read_jsonl(target)?)),
    }
}

fn classifier_networks(clf: &Classifier) -> Vec<(String, Network)> {
    vec![
        ("encoder".to_string(), clf.encoder.clone()),
        ("label_head".to_string(), clf.label_head.clone()),
    ]
}

/// Grows the source training split with augmented and generated documents
/// and re-vectorizes it with the unchanged vocabulary.
fn apply_augmentation(cfg: &RunConfig, prepared: &mut Prepared, artifacts: &mut Vec<(String, String)>) -> Result<Vec<String>> {
    let Some(spec) = &cfg.augmentation else {
        return Ok(Vec::new());
    };
    let mut warnings = Vec::new();
    let original = prepared.source.train.clone();
    let mut train = original.clone();
    if let Some(replace) = &spec.replace {
        train = augment_corpus(&original, &prepared.vocab, replace, rng::derive(cfg.seed, "augment", &[]))?;
    }
    if let Some(generate) = &spec.generate {
        let (filter, _) = train_baseline(&prepared.data, &cfg.train_config())?;
        let lm = fit_generation_lm(&original, generate.class_labels)?;
        let classifier = VectorizedClassifier {
            model: &filter,
            vocab: &prepared.vocab,
        };
        let generated = generate_filtered(&lm, &original, &classifier, generate)?;
        artifacts.push(("generation.csv".into(), report_csv(&generated.report)));
        warnings.extend(generated.warnings);
        train = train.concat(&generated.corpus);
    }
    prepared.data.source_train = tfidf(&train, &prepared.vocab);
    prepared.data.source_labels = train.labels()?;
    prepared.source.train = train;
    Ok(warnings)
}

fn pooled(prepared: &Prepared) -> Result<(PooledData, Corpus)> {
    let data = &prepared.data;
    let corpus = prepared.source.train.concat(&prepared.target.train);
    let labels = data
        .source_labels
        .iter()
        .map(|&y| Some(y))
        .chain(std::iter::repeat_n(None, data.target_train.rows()))
        .collect();
    let pooled = PooledData {
        features: data.source_train.vstack(&data.target_train)?,
        labels,
        source_val: data.source_val.clone(),
        target_val: data.target_val.clone(),
        source_test: data.source_test.clone(),
        target_test: data.target_test.clone(),
    };
    Ok((pooled, corpus))
}

struct Domains {
    labels: Vec<usize>,
    artifacts: Vec<(String, String)>,
    details: serde_json::Value,
    warnings: Vec<String>,
}

fn cluster_domains(cfg: &RunConfig, features: &Matrix, ids: &[String]) -> Result<Domains> {
    let section = cfg.clustering.as_ref().expect("validated");
    let seed = rng::derive(cfg.seed, "domains", &[]);
    let mut details = json!({ "algorithm": section.algorithm });
    let mut warnings = Vec::new();
    let model = if section.algorithm == ClusterAlgorithm::Hdbscan {
        let params = section.hdbscan.unwrap_or_else(|| HdbscanParams::defaults_for(features.rows()));
        hdbscan(features, params)?
    } else {
        let k = match section.k {
            Some(k) => k,
            None => {
                let elbow = elbow_k(features, section.algorithm, &section.elbow_ks, seed)?;
                details["elbow_distortions"] = json!(elbow.distortions);
                warnings.extend(elbow.warning);
                elbow.k
            }
        };
        clustering::fit_restarts(features, section.algorithm, k, seed, section.n_init)?
    };
    details["k"] = json!(model.k);
    details["noise"] = json!(model.n_noise());
    warnings.extend(model.warnings.iter().cloned());
    let labels = assign_domains(&model)?;
    let as_ids: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    Ok(Domains {
        artifacts: vec![("domains.csv".into(), domains_csv(ids, &as_ids))],
        labels,
        details,
        warnings,
    })
}

fn topic_domains(cfg: &RunConfig, prepared: &Prepared, features: &Matrix, corpus: &Corpus) -> Result<Domains> {
    let section = cfg.topics.expect("validated");
    let seed = rng::derive(cfg.seed, "domains", &[]);
    let k = section.k;
    let model = match section.algorithm {
        TopicAlgorithm::Lda => {
            let mut params = LdaParams::defaults_for(k);
            if let Some(it) = section.iters {
                params.iters = it;
            }
            topics::lda_gibbs(&CountMatrix::from_corpus(corpus, &prepared.vocab), k, params, seed)?
        }
        TopicAlgorithm::Plsa => topics::plsa_em(
            &CountMatrix::from_corpus(corpus, &prepared.vocab),
            k,
            section.iters.unwrap_or(300),
            1e-6,
            seed,
        )?,
        TopicAlgorithm::Nmf => topics::nmf(features, k, section.iters.unwrap_or(500), 1e-6, seed)?,
        TopicAlgorithm::Lsa => topics::lsa(features, k)?,
    };
    let labels = assign_domains(&model)?;
    let as_ids: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    Ok(Domains {
        artifacts: vec![
            ("domains.csv".into(), domains_csv(&corpus.ids(), &as_ids)),
            ("topics.txt".into(), topics_report(&model, &prepared.vocab)),
        ],
        labels,
        details: json!({ "algorithm": section.algorithm, "k": k }),
        warnings: model.warnings.clone(),
    })
}

fn pairs_csv(sweep: &crate::adversarial::PairSweep) -> String {
    let mut out = String::from("from,to,status,best_epoch,source_test_acc,target_test_acc,target_test_f1,selected\n");
    let best = sweep.best.as_ref().map(|(i, _)| *i);
    for (i, o) in sweep.outcomes.iter().enumerate() {
        let (from, to) = o.pair;
        let selected = u8::from(best == Some(i));
        match &o.result {
            Ok(r) => {
                let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{from},{to},ok,{},{},{},{},{selected}\n",
                    r.best_epoch,
                    fmt(r.source_test.map(|m| m.accuracy)),
                    fmt(r.target_test.map(|m| m.accuracy)),
                    fmt(r.target_test.map(|m| m.f1)),
                ));
            }
            Err(e) => out.push_str(&format!("{from},{to},\"failed: {}\",,,,,0\n", e.replace('"', "'"))),
        }
    }
    out
}

fn tsne_artifact(section: &TsneSection, seed: u64, clf: &Classifier, prepared: &Prepared) -> Result<String> {
    let sets = [
        ("source", &prepared.source.test, &prepared.data.source_test.features),
        ("target", &prepared.target.test, &prepared.data.target_test.features),
    ];
    let mut rows: Vec<(String, &str, String)> = Vec::new();
    let mut features: Option<Matrix> = None;
    for (domain, corpus, x) in sets {
        let f = clf.features(x)?;
        features = Some(match features {
            None => f,
            Some(acc) => acc.vstack(&f)?,
        });
        for d in &corpus.documents {
            rows.push((d.id.clone(), domain, d.label.map(|l| l.to_string()).unwrap_or_default()));
        }
    }
    let cfg = TsneConfig {
        perplexity: section.perplexity,
        iters: section.iters,
        seed: rng::derive(seed, "tsne", &[]),
        ..TsneConfig::default()
    };
    let out = tsne_project(&features.expect("two sets"), &cfg)?;
    let mut text = String::from("id,domain,label,x,y\n");
    for ((id, domain, label), xy) in rows.iter().zip(out.coords.iter_rows()) {
        text.push_str(&format!("{id},{domain},{label},{:.6},{:.6}\n", xy[0], xy[1]));
    }
    Ok(text)
}

/// Runs the configured method end to end without writing anything.
pub fn execute(cfg: &RunConfig) -> Result<Execution> {
    cfg.validate()?;
    let (source, target) = load_corpora(&cfg.dataset)?;
    let mut prepared = prepare(&source, &target, cfg.seed, cfg.vocab)?;
    let mut artifacts = Vec::new();
    let mut warnings = apply_augmentation(cfg, &mut prepared, &mut artifacts)?;
    let tc = cfg.train_config();
    let data = &prepared.data;
    let mut details = json!({ "vocab_size": prepared.vocab.len(), "source_train": data.source_train.rows() });

    let (clf, mut networks, mut result) = match cfg.method {
        Method::Baseline => {
            let (clf, r) = train_baseline(data, &tc)?;
            (clf, Vec::new(), r)
        }
        Method::Uda => {
            let u = cfg.uda.expect("validated");
            let (model, r) = train_uda(data, &tc, UdaConfig {
                lambda: u.lambda,
                tap_layer: u.tap_layer,
            })?;
            (model.classifier, vec![("domain_head".to_string(), model.domain_head)], r)
        }
        Method::Cat => {
            let run = train_cat(data, &tc, cfg.cat.as_ref().expect("validated"))?;
            for (epoch, csv) in run.pseudo_dumps {
                artifacts.push((format!("pseudo_epoch{epoch}.csv"), csv));
            }
            (run.model, Vec::new(), run.result)
        }
        Method::Cdcl => {
            let (clf, r) = train_cdcl(data, &tc, cfg.cdcl.as_ref().expect("validated"))?;
            (clf, Vec::new(), r)
        }
        Method::ClusterUda | Method::TopicUda => {
            let (pool, corpus) = pooled(&prepared)?;
            let domains = if cfg.method == Method::ClusterUda {
                cluster_domains(cfg, &pool.features, &corpus.ids())?
            } else {
                topic_domains(cfg, &prepared, &pool.features, &corpus)?
            };
            artifacts.extend(domains.artifacts);
            warnings.extend(domains.warnings);
            details["domains"] = domains.details;
            let u = cfg.uda.expect("validated");
            let sweep = sweep_domain_pairs(&pool, &domains.labels, &tc, UdaConfig {
                lambda: u.lambda,
                tap_layer: u.tap_layer,
            })?;
            artifacts.push(("pairs.csv".into(), pairs_csv(&sweep)));
            let Some((best, model)) = sweep.best else {
                return Err(Error::DegenerateDomainSplit("every domain pair failed".into()));
            };
            let outcome = &sweep.outcomes[best];
            details["pair"] = json!([outcome.pair.0, outcome.pair.1]);
            let r = outcome.result.clone().expect("best pair succeeded");
            (model.classifier, vec![("domain_head".to_string(), model.domain_head)], r)
        }
    };
    if let Some(section) = &cfg.tsne {
        artifacts.push(("tsne.csv".into(), tsne_artifact(section, cfg.seed, &clf, &prepared)?));
    }
    result.warnings.splice(0..0, warnings);
    let mut nets = classifier_networks(&clf);
    nets.append(&mut networks);
    details["best_epoch"] = json!(result.best_epoch);
    Ok(Execution {
        result,
        artifacts,
        networks: nets,
        details,
    })
}

/// Path of the run directory `cfg` maps to.
pub fn run_dir(cfg: &RunConfig, runs_dir: &Path) -> PathBuf {
    runs_dir.join(cfg.run_name())
}

/// A run is complete once `result.json` exists; it is written last.
pub fn is_complete(dir: &Path) -> bool {
    dir.join("result.json").is_file()
}

pub fn persist(cfg: &RunConfig, exec: &Execution, runs_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir(cfg, runs_dir);
    fs::create_dir_all(&dir)?;
    let stale = dir.join("result.json");
    if stale.exists() {
        fs::remove_file(stale)?;
    }
    fs::write(dir.join("config.json"), cfg.canonical_json() + "\n")?;
    fs::write(dir.join("metrics.csv"), exec.result.metrics_csv())?;
    for (name, contents) in &exec.artifacts {
        fs::write(dir.join(name), contents)?;
    }
    if cfg.checkpoints {
        for (name, net) in &exec.networks {
            save_checkpoint(net, exec.result.best_epoch, &dir.join("checkpoints").join(name))?;
        }
    }
    let summary = json!({
        "run": cfg.run_name(),
        "method": cfg.method,
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "checkpoint_epoch": exec.result.best_epoch,
        "details": exec.details,
        "result": exec.result,
    });
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(dir)
}

/// Executes `cfg` and writes `runs_dir/<method>-<seed>-<hash>`.
pub fn run(cfg: &RunConfig, runs_dir: &Path) -> Result<RunOutcome> {
    let exec = execute(cfg)?;
    for w in &exec.result.warnings {
        log::warn!("{w}");
    }
    let dir = persist(cfg, &exec, runs_dir)?;
    Ok(RunOutcome {
        dir,
        result: exec.result,
    })
}

/// Reads the `result` block back from a completed run directory.
pub fn load_result(dir: &Path) -> Result<RunResult> {
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("result.json"))?)?;
    Ok(serde_json::from_value(summary["result"].clone())?)
}
