//! Subcommand implementations. Validation failures (bad config, malformed
//! inputs) and runtime failures (compute or write errors) are distinguished
//! so the driver can map them to different exit codes.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use recon_core::analysis::{
    aggregate, annotate_pair, extreme_pairs, top_k_hit_rate, AggregateOptions, ExtremeDirection,
    GroupStat, PairAnnotation,
};
use recon_core::corpus::{sample_corpus, Grammar};
use recon_core::model::{ModelConfig, WeightSet};
use recon_core::probe::{collect_records, collect_recon_ranks, PairKey, ProbeRecord};
use recon_core::rng::Rng;
use recon_core::syntax::{parse_conllu, Alignment, DepSentence, FunctionalRelationTable};
use recon_core::tokenizer::{tokenize, TokenizedSentence, Vocab, UNK};
use recon_core::trainer::train;

use crate::config::RunConfig;
use crate::formats;
use crate::svg::render_bar_chart;
use crate::weights_io::{load_weights, save_weights};

/// Failure class deciding the process exit code.
#[derive(Debug)]
pub enum PipelineError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Validation(e) => write!(f, "{e:#}"),
            PipelineError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type PResult<T> = std::result::Result<T, PipelineError>;

fn validation<T>(r: Result<T>) -> PResult<T> {
    r.map_err(PipelineError::Validation)
}

fn runtime<T>(r: Result<T>) -> PResult<T> {
    r.map_err(PipelineError::Runtime)
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>, jobs: Option<usize>) -> PResult<RunConfig> {
    let mut config: RunConfig = match path {
        Some(p) => validation(formats::read_json(p))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(j) = jobs {
        config.workers = j.max(1);
    }
    validation(config.validate())?;
    Ok(config)
}

fn ensure_out(out: &Path) -> PResult<()> {
    validation(
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())),
    )
}

pub fn gen_corpus(config: &RunConfig, out: &Path, count: Option<usize>) -> PResult<()> {
    ensure_out(out)?;
    let grammar = match &config.data.grammar {
        Some(p) => {
            let g: Grammar = validation(formats::read_json(&config.resolve(out, p)))?;
            validation(g.validate().map_err(|e| anyhow!("{e}")))?;
            g
        }
        None => Grammar::toy_default(),
    };
    let count = count.unwrap_or(config.data.corpus_count);
    let corpus = runtime(sample_corpus(&grammar, count, config.seed).map_err(|e| anyhow!("{e}")))?;
    let vocab = runtime(grammar.derive_vocab().map_err(|e| anyhow!("{e}")))?;
    let (sentences, parses): (Vec<Vec<String>>, Vec<DepSentence>) = corpus.into_iter().unzip();
    runtime(formats::write_sentences(&sentences, &config.resolve(out, &config.data.sentences)))?;
    runtime(formats::write_conllu(&parses, &config.resolve(out, &config.data.parses)))?;
    runtime(formats::write_vocab(&vocab, &config.resolve(out, &config.data.vocab)))?;
    runtime(formats::write_json(&grammar, &out.join("grammar.json")))?;
    eprintln!("wrote {count} sentences to {}", out.display());
    Ok(())
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .filter(|w: &Vec<String>| !w.is_empty())
        .collect())
}

/// Tokenize the corpus, rejecting sentences the model cannot represent.
fn tokenize_corpus(
    sentences: &[Vec<String>],
    vocab: &Vocab,
    max_positions: usize,
) -> Result<Vec<TokenizedSentence>> {
    let mut out = Vec::with_capacity(sentences.len());
    for (i, words) in sentences.iter().enumerate() {
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let ts = tokenize(&refs, vocab);
        if ts.ids.contains(&UNK) {
            bail!("sentence {} contains out-of-vocabulary words: {:?}", i + 1, words);
        }
        if ts.len() > max_positions {
            bail!(
                "sentence {} has {} subwords, model allows {}",
                i + 1,
                ts.len(),
                max_positions
            );
        }
        out.push(ts);
    }
    Ok(out)
}

fn model_config_for(config: &RunConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut mc = config.model.clone();
    if mc.vocab == 0 {
        mc.vocab = vocab.len();
    } else if mc.vocab != vocab.len() {
        bail!("config says vocab={}, vocab file has {} tokens", mc.vocab, vocab.len());
    }
    mc.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(mc)
}

pub fn train_model(config: &RunConfig, out: &Path) -> PResult<()> {
    ensure_out(out)?;
    let vocab = validation(formats::read_vocab(&config.resolve(out, &config.data.vocab)))?;
    let sentences = validation(read_sentences(&config.resolve(out, &config.data.sentences)))?;
    let mc = validation(model_config_for(config, &vocab))?;
    let corpus = validation(tokenize_corpus(&sentences, &vocab, mc.max_positions))?;

    let mut train_config = config.train.clone();
    train_config.seed = config.seed;
    let mut weights = runtime(
        WeightSet::random(&mc, &mut Rng::derive(config.seed, "init")).map_err(|e| anyhow!("{e}")),
    )?;
    let trace = runtime(
        train(&mut weights, &mc, &corpus, &train_config).map_err(|e| anyhow!("{e}")),
    )?;
    runtime(save_weights(&mc, &weights, &config.resolve(out, &config.data.weights)))?;
    runtime(formats::write_loss_trace(&trace, &out.join("loss.csv")))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!("trained {} steps, loss {first:.4} -> {last:.4}", trace.len());
    }
    Ok(())
}

/// Probe every sentence under the configured conditions. Sentences are
/// independent work units; records are merged in sentence order so the
/// output is identical for any worker count.
pub fn probe(config: &RunConfig, out: &Path) -> PResult<()> {
    ensure_out(out)?;
    let vocab = validation(formats::read_vocab(&config.resolve(out, &config.data.vocab)))?;
    let sentences = validation(read_sentences(&config.resolve(out, &config.data.sentences)))?;
    let (mc, weights) = validation(load_weights(&config.resolve(out, &config.data.weights)))?;
    if mc.vocab != vocab.len() {
        return validation(Err(anyhow!(
            "weights were trained with vocab={}, vocab file has {}",
            mc.vocab,
            vocab.len()
        )));
    }
    let corpus = validation(tokenize_corpus(&sentences, &vocab, mc.max_positions))?;

    let want_ranks = config
        .probe
        .conditions
        .contains(&recon_core::probe::ProbeCondition::FullyContextualized);
    let pool = runtime(
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .context("building worker pool"),
    )?;
    type SentenceOut = (Vec<ProbeRecord>, Vec<(String, usize, usize, usize)>);
    let per_sentence: Vec<Result<SentenceOut>> = pool.install(|| {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, ts)| {
                let id = format!("s{}", i + 1);
                let records = collect_records(&id, ts, &weights, &mc, &config.probe.conditions)
                    .map_err(|e| anyhow!("sentence {id}: {e}"))?;
                let ranks = if want_ranks {
                    collect_recon_ranks(ts, &weights, &mc)
                        .map_err(|e| anyhow!("sentence {id}: {e}"))?
                        .into_iter()
                        .map(|(s, r, rank)| (id.clone(), s, r, rank))
                        .collect()
                } else {
                    Vec::new()
                };
                Ok((records, ranks))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut ranks = Vec::new();
    for r in per_sentence {
        let (recs, rks) = runtime(r)?;
        records.extend(recs);
        ranks.extend(rks);
    }
    runtime(formats::write_records(&records, &config.resolve(out, &config.data.records)))?;
    if want_ranks {
        runtime(formats::write_ranks(&ranks, &config.resolve(out, &config.data.ranks)))?;
    }
    eprintln!("wrote {} records for {} sentences", records.len(), corpus.len());
    Ok(())
}

#[derive(Serialize)]
pub struct ExtremePair {
    pub sentence_id: String,
    pub source_idx: Option<usize>,
    pub recon_idx: usize,
    pub source_form: String,
    pub recon_form: String,
    pub sentence: String,
    pub lor: f64,
}

#[derive(Serialize)]
pub struct ComparisonSummary {
    pub comparison: String,
    pub description: String,
    pub pair_count: usize,
    pub skipped: usize,
    pub mean_lor: f64,
}

#[derive(Serialize)]
pub struct AggregateOutput {
    pub comparisons: Vec<ComparisonSummary>,
    pub groups: Vec<GroupStat>,
    pub top_k: usize,
    pub top_k_hit_rate: Option<f64>,
}

fn sentence_index(id: &str) -> Result<usize> {
    id.strip_prefix('s')
        .and_then(|n| n.parse::<usize>().ok())
        .and_then(|n| n.checked_sub(1))
        .ok_or_else(|| anyhow!("unrecognized sentence id {id}"))
}

pub fn aggregate_cmd(config: &RunConfig, out: &Path) -> PResult<()> {
    ensure_out(out)?;
    let vocab = validation(formats::read_vocab(&config.resolve(out, &config.data.vocab)))?;
    let sentences = validation(read_sentences(&config.resolve(out, &config.data.sentences)))?;
    let parses_path = config.resolve(out, &config.data.parses);
    let conllu = validation(
        fs::read_to_string(&parses_path).with_context(|| format!("reading {}", parses_path.display())),
    )?;
    let parses = validation(parse_conllu(&conllu).map_err(|e| anyhow!("{e}")))?;
    if parses.len() != sentences.len() {
        return validation(Err(anyhow!(
            "{} sentences but {} parses",
            sentences.len(),
            parses.len()
        )));
    }
    let records = validation(formats::read_records(&config.resolve(out, &config.data.records)))?;
    let table = match &config.data.functional_table {
        Some(p) => validation(formats::read_json(&config.resolve(out, p)))?,
        None => FunctionalRelationTable::default_table(),
    };

    let tokenized: Vec<TokenizedSentence> = {
        let mut v = Vec::with_capacity(sentences.len());
        for words in &sentences {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            v.push(tokenize(&refs, &vocab));
        }
        v
    };
    let alignments: Vec<Alignment> = tokenized.iter().map(Alignment::from_tokenized).collect();

    let options = AggregateOptions {
        ancestors_include_direct: config.probe.ancestors_include_direct,
    };
    let mut groups = Vec::new();
    let mut summaries = Vec::new();
    let mut extremes: Vec<(String, &'static str, Vec<ExtremePair>)> = Vec::new();
    for spec in &config.probe.comparisons {
        let result = recon_core::probe::run_comparison(&records, spec);
        let mean = if result.rows.is_empty() {
            f64::NAN
        } else {
            result.rows.iter().map(|(_, l)| l).sum::<f64>() / result.rows.len() as f64
        };
        summaries.push(ComparisonSummary {
            comparison: spec.key(),
            description: spec.description.clone(),
            pair_count: result.rows.len(),
            skipped: result.skipped,
            mean_lor: mean,
        });
        // Syntactic breakdowns need a source token; comparisons whose
        // augmented condition is all-mask have none and get no groups.
        if spec.augmented.requires_source() {
            let mut annotated: Vec<(f64, PairAnnotation)> = Vec::with_capacity(result.rows.len());
            for (key, lor_value) in &result.rows {
                let idx = runtime(sentence_index(&key.sentence_id))?;
                let source = key.source.ok_or_else(|| {
                    PipelineError::Runtime(anyhow!(
                        "comparison {} produced a sourceless pair",
                        spec.key()
                    ))
                })?;
                let ann = runtime(
                    annotate_pair(source, key.recon, &alignments[idx], &parses[idx], &table)
                        .map_err(|e| anyhow!("{}: {e}", key.sentence_id)),
                )?;
                annotated.push((*lor_value, ann));
            }
            for dimension in &config.probe.dimensions {
                let stats = runtime(
                    aggregate(
                        &annotated,
                        *dimension,
                        &spec.key(),
                        options,
                        config.probe.bootstrap_resamples,
                        config.seed,
                    )
                    .map_err(|e| anyhow!("{e}")),
                )?;
                groups.extend(stats);
            }
        }
        for direction in [ExtremeDirection::Helpful, ExtremeDirection::Harmful] {
            let name = match direction {
                ExtremeDirection::Helpful => "helpful",
                ExtremeDirection::Harmful => "harmful",
            };
            let top = extreme_pairs(&result.rows, direction, config.probe.extreme_n);
            let mut rows = Vec::with_capacity(top.len());
            for (key, lor_value) in top {
                rows.push(runtime(describe_pair(
                    &key, lor_value, &tokenized, &sentences,
                ))?);
            }
            extremes.push((spec.key(), name, rows));
        }
    }

    let ranks_path = config.resolve(out, &config.data.ranks);
    let hit_rate = if ranks_path.exists() {
        let text = runtime(
            fs::read_to_string(&ranks_path)
                .with_context(|| format!("reading {}", ranks_path.display())),
        )?;
        let ranks: Vec<usize> = validation(
            text.lines()
                .skip(1)
                .map(|l| {
                    l.rsplit(',')
                        .next()
                        .and_then(|f| f.parse().ok())
                        .ok_or_else(|| anyhow!("bad rank line: {l}"))
                })
                .collect::<Result<Vec<usize>>>(),
        )?;
        if ranks.is_empty() {
            None
        } else {
            Some(runtime(
                top_k_hit_rate(&ranks, config.probe.top_k).map_err(|e| anyhow!("{e}")),
            )?)
        }
    } else {
        None
    };

    let output = AggregateOutput {
        comparisons: summaries,
        groups,
        top_k: config.probe.top_k,
        top_k_hit_rate: hit_rate,
    };
    runtime(formats::write_json(&output, &out.join("aggregates.json")))?;
    let extreme_doc: Vec<serde_json::Value> = extremes
        .into_iter()
        .map(|(comparison, direction, pairs)| {
            serde_json::json!({
                "comparison": comparison,
                "direction": direction,
                "pairs": pairs,
            })
        })
        .collect();
    runtime(formats::write_json(&extreme_doc, &out.join("extremes.json")))?;
    eprintln!("wrote aggregates.json and extremes.json to {}", out.display());
    Ok(())
}

fn describe_pair(
    key: &PairKey,
    lor_value: f64,
    tokenized: &[TokenizedSentence],
    sentences: &[Vec<String>],
) -> Result<ExtremePair> {
    let idx = sentence_index(&key.sentence_id)?;
    let ts = &tokenized[idx];
    let form = |pos: usize| -> Result<String> {
        ts.subwords
            .get(pos)
            .cloned()
            .ok_or_else(|| anyhow!("{}: position {pos} out of range", key.sentence_id))
    };
    Ok(ExtremePair {
        sentence_id: key.sentence_id.clone(),
        source_idx: key.source,
        recon_idx: key.recon,
        source_form: key.source.map(form).transpose()?.unwrap_or_default(),
        recon_form: form(key.recon)?,
        sentence: sentences[idx].join(" "),
        lor: lor_value,
    })
}

pub fn report(_config: &RunConfig, out: &Path) -> PResult<()> {
    ensure_out(out)?;
    let aggregates: serde_json::Value = validation(formats::read_json(&out.join("aggregates.json")))?;
    let groups: Vec<GroupStat> = validation(
        serde_json::from_value(aggregates["groups"].clone()).context("parsing aggregates.json"),
    )?;
    if groups.is_empty() {
        return validation(Err(anyhow!("aggregates.json has no groups")));
    }

    // One chart per (comparison, dimension); one CSV with every number.
    let mut csv = String::from("comparison,dimension,value,count,mean_lor,ci_low,ci_high\n");
    for g in &groups {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            g.comparison,
            g.key.dimension.label(),
            g.key.value,
            g.count,
            formats::fmt_f64(g.mean_lor),
            formats::fmt_f64(g.ci_low),
            formats::fmt_f64(g.ci_high)
        ));
    }
    runtime(
        fs::write(out.join("group_stats.csv"), csv).context("writing group_stats.csv"),
    )?;

    let mut keys: Vec<(String, String)> = groups
        .iter()
        .map(|g| (g.comparison.clone(), g.key.dimension.label().to_string()))
        .collect();
    keys.sort();
    keys.dedup();
    let mut written = 0usize;
    for (comparison, dimension) in keys {
        let stats: Vec<GroupStat> = groups
            .iter()
            .filter(|g| g.comparison == comparison && g.key.dimension.label() == dimension)
            .cloned()
            .collect();
        let title = format!("{comparison} by {dimension}");
        let svg = runtime(render_bar_chart(&title, "mean log odds ratio", &stats))?;
        let file = format!(
            "chart_{}_{dimension}.svg",
            comparison.replace("->", "_to_")
        );
        runtime(fs::write(out.join(&file), svg).with_context(|| format!("writing {file}")))?;
        written += 1;
    }
    eprintln!("wrote group_stats.csv and {written} charts to {}", out.display());
    Ok(())
}
