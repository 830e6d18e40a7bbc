//! Probe-input construction for the five ablation conditions, reconstruction
//! probability collection, and log-odds-ratio comparisons.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_injected, forward_plain, CapturedStates, ModelConfig, WeightSet};
use crate::tokenizer::{TokenizedSentence, MASK};

/// The five ablated input constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCondition {
    FullyContextualized,
    StaticPlusPos,
    StaticMinusPos,
    AllMaskPlusPos,
    AllMaskMinusPos,
}

impl ProbeCondition {
    pub const ALL: [ProbeCondition; 5] = [
        ProbeCondition::FullyContextualized,
        ProbeCondition::StaticPlusPos,
        ProbeCondition::StaticMinusPos,
        ProbeCondition::AllMaskPlusPos,
        ProbeCondition::AllMaskMinusPos,
    ];

    pub fn requires_source(self) -> bool {
        !matches!(
            self,
            ProbeCondition::AllMaskPlusPos | ProbeCondition::AllMaskMinusPos
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            ProbeCondition::FullyContextualized => "fully_contextualized",
            ProbeCondition::StaticPlusPos => "static_plus_pos",
            ProbeCondition::StaticMinusPos => "static_minus_pos",
            ProbeCondition::AllMaskPlusPos => "all_mask_plus_pos",
            ProbeCondition::AllMaskMinusPos => "all_mask_minus_pos",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Condition(alloc::format!("unknown condition {s}")))
    }
}

/// One reconstruction-probability measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub sentence_id: String,
    pub condition: ProbeCondition,
    /// Source subword position; None for the all-mask conditions.
    pub source: Option<usize>,
    /// Recon subword position.
    pub recon: usize,
    pub log_p: f64,
    pub log_1mp: f64,
}

/// A (base, augmented) condition pair to compare with the log odds ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub base: ProbeCondition,
    pub augmented: ProbeCondition,
    pub description: String,
}

impl ComparisonSpec {
    pub fn new(base: ProbeCondition, augmented: ProbeCondition, description: &str) -> Result<Self> {
        if base == augmented {
            return Err(Error::Condition("base and augmented must differ".into()));
        }
        Ok(ComparisonSpec { base, augmented, description: description.to_string() })
    }

    /// The six shipped comparisons.
    pub fn standard_six() -> Vec<ComparisonSpec> {
        use ProbeCondition::*;
        [
            (AllMaskMinusPos, AllMaskPlusPos,
             "positional information without lexical information"),
            (AllMaskMinusPos, StaticMinusPos,
             "static lexical information without positional information"),
            (AllMaskPlusPos, StaticPlusPos,
             "static lexical information with positional information"),
            (StaticMinusPos, StaticPlusPos,
             "positional information with full lexical information"),
            (StaticPlusPos, FullyContextualized,
             "contextualization through the layers, beyond the input layer"),
            (AllMaskMinusPos, FullyContextualized,
             "overall change induced by contextualization over the lexical priors"),
        ]
        .iter()
        .map(|&(b, a, d)| ComparisonSpec::new(b, a, d).expect("distinct conditions"))
        .collect()
    }

    pub fn key(&self) -> String {
        alloc::format!("{}->{}", self.base.label(), self.augmented.label())
    }
}

/// A built probe input, ready for a forward pass.
pub struct ProbeInput<'a> {
    pub ids: Vec<usize>,
    pub use_positions: bool,
    /// (source position, captured states) when the pass must inject.
    pub injection: Option<(usize, &'a CapturedStates)>,
}

/// Construct the model input for one condition. All positions are masked,
/// including [CLS]/[SEP]; source-bearing conditions reveal exactly the
/// source token. FullyContextualized additionally injects captures from the
/// unmasked pass.
pub fn build_probe_input<'a>(
    sentence: &TokenizedSentence,
    condition: ProbeCondition,
    source: Option<usize>,
    captured: Option<&'a CapturedStates>,
) -> Result<ProbeInput<'a>> {
    if condition.requires_source() != source.is_some() {
        return Err(Error::Condition(alloc::format!(
            "condition {} {} a source index",
            condition.label(),
            if condition.requires_source() { "requires" } else { "does not take" }
        )));
    }
    let mut ids = alloc::vec![MASK; sentence.len()];
    if let Some(s) = source {
        if s >= sentence.len() || sentence.is_special(s) {
            return Err(Error::Condition(alloc::format!(
                "source position {s} is special or out of range"
            )));
        }
        ids[s] = sentence.ids[s];
    }
    let (use_positions, injection) = match condition {
        ProbeCondition::FullyContextualized => {
            let cap = captured.ok_or_else(|| {
                Error::Condition("fully contextualized condition needs captured states".into())
            })?;
            if cap.seq_len() != sentence.len() {
                return Err(Error::Injection("captured length mismatch".into()));
            }
            (true, Some((source.expect("checked above"), cap)))
        }
        ProbeCondition::StaticPlusPos | ProbeCondition::AllMaskPlusPos => (true, None),
        ProbeCondition::StaticMinusPos | ProbeCondition::AllMaskMinusPos => (false, None),
    };
    Ok(ProbeInput { ids, use_positions, injection })
}

/// Collect one record per ordered (source, recon) pair for source-bearing
/// conditions, and one per recon position for the all-mask conditions. The
/// probability is always read at the recon position for the original token.
pub fn collect_records(
    sentence_id: &str,
    sentence: &TokenizedSentence,
    weights: &WeightSet,
    config: &ModelConfig,
    conditions: &[ProbeCondition],
) -> Result<Vec<ProbeRecord>> {
    let content = sentence.content_positions();
    let mut records = Vec::new();
    let needs_capture = conditions.contains(&ProbeCondition::FullyContextualized);
    let captured = if needs_capture {
        Some(forward_plain(&sentence.ids, true, weights, config)?.1)
    } else {
        None
    };

    for &condition in conditions {
        if condition.requires_source() {
            for &source in &content {
                let input = build_probe_input(sentence, condition, Some(source), captured.as_ref())?;
                let output = match input.injection {
                    Some((pos, cap)) => forward_injected(&input.ids, pos, cap, weights, config)?,
                    None => forward_plain(&input.ids, input.use_positions, weights, config)?.0,
                };
                for &recon in &content {
                    if recon == source {
                        continue;
                    }
                    let target = sentence.ids[recon];
                    records.push(ProbeRecord {
                        sentence_id: sentence_id.to_string(),
                        condition,
                        source: Some(source),
                        recon,
                        log_p: output.log_probs.get(recon, target),
                        log_1mp: output.log_one_minus_p(recon, target)?,
                    });
                }
            }
        } else {
            let input = build_probe_input(sentence, condition, None, None)?;
            let output = forward_plain(&input.ids, input.use_positions, weights, config)?.0;
            for &recon in &content {
                let target = sentence.ids[recon];
                records.push(ProbeRecord {
                    sentence_id: sentence_id.to_string(),
                    condition,
                    source: None,
                    recon,
                    log_p: output.log_probs.get(recon, target),
                    log_1mp: output.log_one_minus_p(recon, target)?,
                });
            }
        }
    }
    Ok(records)
}

/// Token-identity recovery ranks for the fully contextualized condition:
/// for each ordered (source, recon) pair, the 1-based rank of the true recon
/// token in the predicted distribution at the recon position. Ties rank the
/// lower token id first.
pub fn collect_recon_ranks(
    sentence: &TokenizedSentence,
    weights: &WeightSet,
    config: &ModelConfig,
) -> Result<Vec<(usize, usize, usize)>> {
    let content = sentence.content_positions();
    let (_, captured) = forward_plain(&sentence.ids, true, weights, config)?;
    let mut out = Vec::new();
    for &source in &content {
        let input = build_probe_input(
            sentence,
            ProbeCondition::FullyContextualized,
            Some(source),
            Some(&captured),
        )?;
        let (pos, cap) = input.injection.expect("fully contextualized injects");
        let output = forward_injected(&input.ids, pos, cap, weights, config)?;
        for &recon in &content {
            if recon == source {
                continue;
            }
            let target = sentence.ids[recon];
            let row = output.logits.row(recon);
            let target_logit = row[target];
            let rank = 1 + row
                .iter()
                .enumerate()
                .filter(|&(id, &l)| l > target_logit || (l == target_logit && id < target))
                .count();
            out.push((source, recon, rank));
        }
    }
    Ok(out)
}

/// Log odds ratio of Eq. 1, computed wholly in log space:
/// (log p - log(1-p)) - (log q - log(1-q)).
pub fn lor(p_rec: (f64, f64), q_rec: (f64, f64)) -> f64 {
    (p_rec.0 - p_rec.1) - (q_rec.0 - q_rec.1)
}

/// Identity of one compared pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairKey {
    pub sentence_id: String,
    /// Source of the augmented condition's record; None when it is all-mask.
    pub source: Option<usize>,
    pub recon: usize,
}

/// LOR rows for one comparison plus the number of augmented records that had
/// no base counterpart.
#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub rows: Vec<(PairKey, f64)>,
    pub skipped: usize,
}

/// Join augmented records against base records. All-mask baselines are keyed
/// by recon position only, so one baseline row serves every source.
pub fn run_comparison(records: &[ProbeRecord], spec: &ComparisonSpec) -> ComparisonResult {
    let base_keyed_by_source = spec.base.requires_source();
    let mut base: BTreeMap<(&str, Option<usize>, usize), (f64, f64)> = BTreeMap::new();
    for r in records {
        if r.condition == spec.base {
            let key = (
                r.sentence_id.as_str(),
                if base_keyed_by_source { r.source } else { None },
                r.recon,
            );
            base.insert(key, (r.log_p, r.log_1mp));
        }
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in records {
        if r.condition != spec.augmented {
            continue;
        }
        let base_key = (
            r.sentence_id.as_str(),
            if base_keyed_by_source { r.source } else { None },
            r.recon,
        );
        match base.get(&base_key) {
            Some(&q) => rows.push((
                PairKey {
                    sentence_id: r.sentence_id.clone(),
                    source: r.source,
                    recon: r.recon,
                },
                lor((r.log_p, r.log_1mp), q),
            )),
            None => skipped += 1,
        }
    }
    ComparisonResult { rows, skipped }
}
