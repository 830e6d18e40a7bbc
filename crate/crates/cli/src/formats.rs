//! Text file formats: vocab lists, CSV tables, CoNLL-U output, JSON configs.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use recon_core::probe::{ProbeCondition, ProbeRecord};
use recon_core::syntax::DepSentence;
use recon_core::tokenizer::Vocab;

/// 17 significant digits: enough for exact f64 round trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::new(tokens).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub const RECORDS_HEADER: &str = "sentence_id,condition,source_idx,recon_idx,log_p,log_1mp";

pub fn write_records(records: &[ProbeRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 64);
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let source = r.source.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sentence_id,
            r.condition.label(),
            source,
            r.recon,
            fmt_f64(r.log_p),
            fmt_f64(r.log_1mp)
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_records(path: &Path) -> Result<Vec<ProbeRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORDS_HEADER => {}
        other => bail!("{}: bad header {:?}", path.display(), other),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            bail!("{} line {}: expected 6 fields", path.display(), i + 2);
        }
        let parse_err = |what: &str| anyhow::anyhow!("{} line {}: bad {what}", path.display(), i + 2);
        records.push(ProbeRecord {
            sentence_id: fields[0].to_string(),
            condition: ProbeCondition::from_label(fields[1])
                .map_err(|_| parse_err("condition"))?,
            source: if fields[2].is_empty() {
                None
            } else {
                Some(fields[2].parse().map_err(|_| parse_err("source_idx"))?)
            },
            recon: fields[3].parse().map_err(|_| parse_err("recon_idx"))?,
            log_p: fields[4].parse().map_err(|_| parse_err("log_p"))?,
            log_1mp: fields[5].parse().map_err(|_| parse_err("log_1mp"))?,
        });
    }
    Ok(records)
}

pub fn write_loss_trace(trace: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{step},{}\n", fmt_f64(*loss)));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_ranks(ranks: &[(String, usize, usize, usize)], path: &Path) -> Result<()> {
    let mut out = String::from("sentence_id,source_idx,recon_idx,rank\n");
    for (id, source, recon, rank) in ranks {
        out.push_str(&format!("{id},{source},{recon},{rank}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_sentences(sentences: &[Vec<String>], path: &Path) -> Result<()> {
    let mut out = String::new();
    for words in sentences {
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_conllu(parses: &[DepSentence], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in parses {
        out.push_str(&format!("# sent_id = {}\n", p.id));
        for (i, w) in p.words.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_\n",
                i + 1,
                w.form,
                w.head,
                w.deprel
            ));
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
