//! Aggregation of LOR rows into syntactic breakdowns with bootstrap
//! confidence intervals, plus top-k identity recovery and extreme-pair
//! extraction.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::PairKey;
use crate::rng::Rng;
use crate::syntax::{
    classify_relation, functional_direction, linear_distance, structural_distance, Alignment,
    DepSentence, FunctionalDirection, FunctionalRelationTable, RelationCategory,
};

/// Linear distances are bucketed 1..15 then "16+"; structural 1..8 then "9+".
pub const LINEAR_DISTANCE_CAP: usize = 16;
pub const STRUCTURAL_DISTANCE_CAP: usize = 9;

/// Analysis breakdown dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupDimension {
    RelationCategory,
    DeprelLabel,
    FunctionalRelation,
    LinearDistance,
    StructuralDistance,
}

impl GroupDimension {
    pub const ALL: [GroupDimension; 5] = [
        GroupDimension::RelationCategory,
        GroupDimension::DeprelLabel,
        GroupDimension::FunctionalRelation,
        GroupDimension::LinearDistance,
        GroupDimension::StructuralDistance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            GroupDimension::RelationCategory => "relation_category",
            GroupDimension::DeprelLabel => "deprel_label",
            GroupDimension::FunctionalRelation => "functional_relation",
            GroupDimension::LinearDistance => "linear_distance",
            GroupDimension::StructuralDistance => "structural_distance",
        }
    }
}

/// One cell of a breakdown.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub dimension: GroupDimension,
    pub value: String,
}

/// Aggregated statistics for one group under one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub key: GroupKey,
    pub comparison: String,
    pub count: usize,
    pub mean_lor: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Syntactic measurements of one ordered (source, recon) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub relation: RelationCategory,
    /// Dependency label when exactly one arc joins the pair.
    pub deprel: Option<String>,
    pub functional: FunctionalDirection,
    pub linear: usize,
    pub structural: Option<usize>,
}

/// Annotate one pair against its gold parse.
pub fn annotate_pair(
    source: usize,
    recon: usize,
    align: &Alignment,
    parse: &DepSentence,
    table: &FunctionalRelationTable,
) -> Result<PairAnnotation> {
    let relation = classify_relation(source, recon, align, parse)?;
    let deprel = match relation {
        RelationCategory::SourceIsHead => {
            Some(parse.words[align.word_of(recon)?].deprel.clone())
        }
        RelationCategory::ReconIsHead => {
            Some(parse.words[align.word_of(source)?].deprel.clone())
        }
        _ => None,
    };
    let structural = if relation == RelationCategory::Subword {
        None
    } else {
        structural_distance(source, recon, align, parse)?
    };
    Ok(PairAnnotation {
        relation,
        deprel,
        functional: functional_direction(source, recon, align, parse, table)?,
        linear: linear_distance(source, recon)?,
        structural,
    })
}

/// Aggregation toggles. With `ancestors_include_direct` set, the single-arc
/// head categories are folded into the ancestor categories, matching the
/// broader reading of "ancestor".
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub ancestors_include_direct: bool,
}

fn group_value(
    dimension: GroupDimension,
    ann: &PairAnnotation,
    options: AggregateOptions,
) -> String {
    match dimension {
        GroupDimension::RelationCategory => {
            let rel = if options.ancestors_include_direct {
                match ann.relation {
                    RelationCategory::SourceIsHead => RelationCategory::SourceIsAncestor,
                    RelationCategory::ReconIsHead => RelationCategory::ReconIsAncestor,
                    other => other,
                }
            } else {
                ann.relation
            };
            rel.label().to_string()
        }
        GroupDimension::DeprelLabel => {
            ann.deprel.clone().unwrap_or_else(|| "(none)".to_string())
        }
        GroupDimension::FunctionalRelation => match (&ann.deprel, ann.functional) {
            (Some(label), FunctionalDirection::FwIsSource) => {
                alloc::format!("{label}:fw_is_source")
            }
            (Some(label), FunctionalDirection::FwIsRecon) => {
                alloc::format!("{label}:fw_is_recon")
            }
            _ => "not_functional".to_string(),
        },
        GroupDimension::LinearDistance => {
            if ann.linear >= LINEAR_DISTANCE_CAP {
                alloc::format!("{LINEAR_DISTANCE_CAP}+")
            } else {
                alloc::format!("{}", ann.linear)
            }
        }
        GroupDimension::StructuralDistance => match ann.structural {
            None => "undefined".to_string(),
            Some(d) if d >= STRUCTURAL_DISTANCE_CAP => {
                alloc::format!("{STRUCTURAL_DISTANCE_CAP}+")
            }
            Some(d) => alloc::format!("{d}"),
        },
    }
}

/// 95% percentile bootstrap CI of the mean, B resamples, nearest-rank
/// percentiles. Deterministic for a fixed rng stream.
pub fn bootstrap_ci(values: &[f64], resamples: usize, rng: &mut Rng) -> (f64, f64) {
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[rng.index(n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let rank = |q: f64| -> f64 {
        let idx = libm::round(q * (resamples - 1) as f64) as usize;
        means[idx.min(resamples - 1)]
    };
    (rank(0.025), rank(0.975))
}

/// Group LOR rows by one dimension and compute per-group mean and bootstrap
/// CI. Every row lands in exactly one group, so group counts sum to the
/// input length. Groups are returned in key order.
pub fn aggregate(
    rows: &[(f64, PairAnnotation)],
    dimension: GroupDimension,
    comparison: &str,
    options: AggregateOptions,
    resamples: usize,
    seed: u64,
) -> Result<Vec<GroupStat>> {
    if resamples == 0 {
        return Err(Error::Config("bootstrap resamples must be >= 1".into()));
    }
    let mut groups: alloc::collections::BTreeMap<String, Vec<f64>> =
        alloc::collections::BTreeMap::new();
    for (lor, ann) in rows {
        groups
            .entry(group_value(dimension, ann, options))
            .or_default()
            .push(*lor);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (value, lors) in groups {
        let count = lors.len();
        let mean = lors.iter().sum::<f64>() / count as f64;
        let label = alloc::format!("{comparison}/{}/{}", dimension.label(), value);
        let mut rng = Rng::derive(seed, &label);
        let (ci_low, ci_high) = bootstrap_ci(&lors, resamples, &mut rng);
        out.push(GroupStat {
            key: GroupKey { dimension, value },
            comparison: comparison.to_string(),
            count,
            mean_lor: mean,
            ci_low,
            ci_high,
        });
    }
    Ok(out)
}

/// Fraction of pairs whose true recon token ranks within the top k.
/// Ranks are 1-based.
pub fn top_k_hit_rate(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Domain("no ranks to score".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtremeDirection {
    Helpful,
    Harmful,
}

/// Top-N pairs by signed LOR: descending for helpful, ascending for harmful.
/// Ties break on the pair key so output order is deterministic.
pub fn extreme_pairs(
    rows: &[(PairKey, f64)],
    direction: ExtremeDirection,
    n: usize,
) -> Vec<(PairKey, f64)> {
    let mut sorted: Vec<(PairKey, f64)> = rows.to_vec();
    sorted.sort_by(|a, b| {
        let ord = match direction {
            ExtremeDirection::Helpful => b.1.partial_cmp(&a.1),
            ExtremeDirection::Harmful => a.1.partial_cmp(&b.1),
        };
        ord.expect("finite LOR").then_with(|| a.0.cmp(&b.0))
    });
    sorted.truncate(n);
    sorted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(relation: RelationCategory, linear: usize) -> PairAnnotation {
        PairAnnotation {
            relation,
            deprel: None,
            functional: FunctionalDirection::NotFunctional,
            linear,
            structural: None,
        }
    }

    #[test]
    fn single_group_mean_is_arithmetic_mean() {
        let rows: Vec<(f64, PairAnnotation)> = (1..=4)
            .map(|i| (i as f64, ann(RelationCategory::NoRelation, 1)))
            .collect();
        let stats = aggregate(
            &rows,
            GroupDimension::RelationCategory,
            "c",
            AggregateOptions::default(),
            100,
            0,
        )
        .unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].count, 4);
        assert_eq!(stats[0].mean_lor, 2.5);
        assert!(stats[0].ci_low <= stats[0].mean_lor && stats[0].mean_lor <= stats[0].ci_high);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let rows: Vec<(f64, PairAnnotation)> = (0..50)
            .map(|i| ((i as f64).sin(), ann(RelationCategory::NoRelation, 1)))
            .collect();
        let run = || {
            aggregate(
                &rows,
                GroupDimension::RelationCategory,
                "c",
                AggregateOptions::default(),
                1000,
                42,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn synthetic_separated_groups_have_disjoint_cis() {
        let mut rows = Vec::new();
        for i in 0..200 {
            let jitter = 0.01 * ((i as f64).sin());
            rows.push((1.0 + jitter, ann(RelationCategory::SourceIsHead, 1)));
            rows.push((jitter, ann(RelationCategory::NoRelation, 3)));
        }
        let stats = aggregate(
            &rows,
            GroupDimension::RelationCategory,
            "c",
            AggregateOptions::default(),
            1000,
            1,
        )
        .unwrap();
        let head = stats.iter().find(|s| s.key.value == "source_is_head").unwrap();
        let none = stats.iter().find(|s| s.key.value == "no_relation").unwrap();
        assert!((head.mean_lor - 1.0).abs() < 0.05);
        assert!(none.mean_lor.abs() < 0.05);
        assert!(head.ci_low > none.ci_high);
    }

    #[test]
    fn group_counts_sum_to_total_for_every_dimension() {
        let mut rows = Vec::new();
        for i in 0..30 {
            let rel = match i % 3 {
                0 => RelationCategory::Subword,
                1 => RelationCategory::SourceIsHead,
                _ => RelationCategory::NoRelation,
            };
            let mut a = ann(rel, (i % 20) + 1);
            if rel == RelationCategory::SourceIsHead {
                a.deprel = Some("det".into());
                a.structural = Some(1);
            }
            rows.push((i as f64 * 0.1, a));
        }
        for dim in GroupDimension::ALL {
            let stats = aggregate(&rows, dim, "c", AggregateOptions::default(), 50, 0).unwrap();
            let total: usize = stats.iter().map(|s| s.count).sum();
            assert_eq!(total, rows.len(), "{dim:?}");
        }
    }

    #[test]
    fn ancestor_toggle_folds_head_categories() {
        let rows = [
            (1.0, ann(RelationCategory::SourceIsHead, 1)),
            (2.0, ann(RelationCategory::SourceIsAncestor, 2)),
        ];
        let stats = aggregate(
            &rows,
            GroupDimension::RelationCategory,
            "c",
            AggregateOptions { ancestors_include_direct: true },
            50,
            0,
        )
        .unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].key.value, "source_is_ancestor");
        assert_eq!(stats[0].count, 2);
    }

    #[test]
    fn distance_buckets_cap() {
        let a = ann(RelationCategory::NoRelation, 20);
        assert_eq!(
            group_value(GroupDimension::LinearDistance, &a, AggregateOptions::default()),
            "16+"
        );
        let mut b = ann(RelationCategory::SourceIsAncestor, 2);
        b.structural = Some(12);
        assert_eq!(
            group_value(GroupDimension::StructuralDistance, &b, AggregateOptions::default()),
            "9+"
        );
    }

    #[test]
    fn top_k_basics() {
        let ranks = [1, 4, 12];
        assert_eq!(top_k_hit_rate(&ranks, 10).unwrap(), 2.0 / 3.0);
        assert_eq!(top_k_hit_rate(&ranks, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(top_k_hit_rate(&ranks, 100).unwrap(), 1.0);
        assert!(top_k_hit_rate(&ranks, 0).is_err());
    }

    #[test]
    fn top_k_nondecreasing_in_k() {
        let ranks = [3, 1, 7, 7, 2, 9, 15];
        let mut prev = 0.0;
        for k in 1..20 {
            let rate = top_k_hit_rate(&ranks, k).unwrap();
            assert!(rate >= prev);
            prev = rate;
        }
    }

    fn key(recon: usize) -> PairKey {
        PairKey { sentence_id: "s1".into(), source: Some(0), recon }
    }

    #[test]
    fn extreme_pairs_order_and_truncation() {
        let rows = [
            (key(1), 10.0),
            (key(2), -3.0),
            (key(3), 5.0),
        ];
        let helpful = extreme_pairs(&rows, ExtremeDirection::Helpful, 2);
        assert_eq!(helpful[0].1, 10.0);
        assert_eq!(helpful[1].1, 5.0);
        let harmful = extreme_pairs(&rows, ExtremeDirection::Harmful, 100);
        assert_eq!(harmful.len(), 3);
        assert_eq!(harmful[0].1, -3.0);
        assert!(extreme_pairs(&rows, ExtremeDirection::Helpful, 0).is_empty());
    }

    #[test]
    fn extreme_pairs_ties_break_on_key() {
        let rows = [(key(3), 1.0), (key(1), 1.0), (key(2), 1.0)];
        let got = extreme_pairs(&rows, ExtremeDirection::Helpful, 3);
        let recons: Vec<usize> = got.iter().map(|(k, _)| k.recon).collect();
        assert_eq!(recons, vec![1, 2, 3]);
    }
}
