//! Seeded PCFG generator for a toy language with gold dependency parses.
//!
//! Every rule designates a head child; the other children attach to a
//! sibling (by default the head) with a fixed arc label, so each derivation
//! yields a dependency tree alongside the word string.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::syntax::{DepSentence, DepWord};
use crate::tokenizer::{Vocab, RESERVED};

/// Dependency annotation of one non-head child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildDep {
    pub label: String,
    /// Index of the sibling child whose head word governs this child.
    pub parent: usize,
}

/// One production. `deps[i]` must be None exactly for the head child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub prob: f64,
    pub children: Vec<String>,
    pub head: usize,
    pub deps: Vec<Option<ChildDep>>,
}

/// PCFG with per-rule dependency annotations and a POS-keyed lexicon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub start: String,
    pub rules: BTreeMap<String, Vec<Rule>>,
    pub lexicon: BTreeMap<String, Vec<String>>,
    /// POS tags whose words are kept out of the vocabulary as whole tokens,
    /// forcing multi-subword tokenization.
    pub subword_pos: Vec<String>,
}

const MAX_DEPTH: usize = 12;
const MAX_RESAMPLES: usize = 100;

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if !self.rules.contains_key(&self.start) {
            return Err(Error::Config(alloc::format!(
                "start symbol {} has no rules",
                self.start
            )));
        }
        for (nt, alts) in &self.rules {
            if alts.is_empty() {
                return Err(Error::Config(alloc::format!("{nt} has no alternatives")));
            }
            let total: f64 = alts.iter().map(|r| r.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(alloc::format!(
                    "{nt} rule probabilities sum to {total}, not 1"
                )));
            }
            for r in alts {
                if r.children.is_empty() || r.head >= r.children.len() {
                    return Err(Error::Config(alloc::format!("{nt}: bad head index")));
                }
                if r.deps.len() != r.children.len() {
                    return Err(Error::Config(alloc::format!("{nt}: deps length mismatch")));
                }
                for (i, d) in r.deps.iter().enumerate() {
                    match d {
                        None if i != r.head => {
                            return Err(Error::Config(alloc::format!(
                                "{nt}: child {i} has no dependency annotation"
                            )))
                        }
                        Some(_) if i == r.head => {
                            return Err(Error::Config(alloc::format!(
                                "{nt}: head child {i} must not carry an arc"
                            )))
                        }
                        Some(c) if c.parent >= r.children.len() || c.parent == i => {
                            return Err(Error::Config(alloc::format!(
                                "{nt}: child {i} has bad parent index"
                            )))
                        }
                        _ => {}
                    }
                }
                for c in &r.children {
                    if !self.rules.contains_key(c) && !self.lexicon.contains_key(c) {
                        return Err(Error::Config(alloc::format!("unknown symbol {c}")));
                    }
                }
            }
        }
        for (pos, words) in &self.lexicon {
            if words.is_empty() {
                return Err(Error::Config(alloc::format!("empty lexicon for {pos}")));
            }
        }
        Ok(())
    }

    /// The shipped toy grammar: transitive clauses with optional auxiliaries
    /// and prepositional objects, multi-subword proper names, and arcs
    /// exercising det, amod, nsubj, dobj, aux, prep and pobj. Auxiliaries
    /// always pair with base verb forms, finite clauses with past forms.
    pub fn toy_default() -> Grammar {
        let dep = |label: &str, parent: usize| {
            Some(ChildDep { label: label.to_string(), parent })
        };
        let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        let mut rules = BTreeMap::new();
        rules.insert(
            "S".to_string(),
            alloc::vec![Rule {
                prob: 1.0,
                children: strs(&["NP", "VP"]),
                head: 1,
                deps: alloc::vec![dep("nsubj", 1), None],
            }],
        );
        rules.insert(
            "NP".to_string(),
            alloc::vec![
                Rule {
                    prob: 0.45,
                    children: strs(&["Det", "N"]),
                    head: 1,
                    deps: alloc::vec![dep("det", 1), None],
                },
                Rule {
                    prob: 0.30,
                    children: strs(&["PropN"]),
                    head: 0,
                    deps: alloc::vec![None],
                },
                Rule {
                    prob: 0.25,
                    children: strs(&["Det", "Adj", "N"]),
                    head: 2,
                    deps: alloc::vec![dep("det", 2), dep("amod", 2), None],
                },
            ],
        );
        rules.insert(
            "VP".to_string(),
            alloc::vec![
                Rule {
                    prob: 0.40,
                    children: strs(&["Vpast", "NP"]),
                    head: 0,
                    deps: alloc::vec![None, dep("dobj", 0)],
                },
                Rule {
                    prob: 0.35,
                    children: strs(&["Aux", "Vbase", "NP"]),
                    head: 1,
                    deps: alloc::vec![dep("aux", 1), None, dep("dobj", 1)],
                },
                Rule {
                    prob: 0.25,
                    children: strs(&["Vpast", "P", "NP"]),
                    head: 0,
                    deps: alloc::vec![None, dep("prep", 0), dep("pobj", 1)],
                },
            ],
        );

        let mut lexicon = BTreeMap::new();
        lexicon.insert("Det".to_string(), strs(&["the", "a"]));
        lexicon.insert(
            "N".to_string(),
            strs(&["dog", "cat", "bird", "fish", "bone", "ball", "park", "house"]),
        );
        lexicon.insert("PropN".to_string(), strs(&["Buddy", "Cookie", "Muffin", "Pepper"]));
        lexicon.insert("Adj".to_string(), strs(&["big", "small", "old", "red"]));
        lexicon.insert("Vpast".to_string(), strs(&["chased", "saw", "wanted", "found"]));
        lexicon.insert("Vbase".to_string(), strs(&["chase", "see", "want", "find"]));
        lexicon.insert("Aux".to_string(), strs(&["will", "can", "must"]));
        lexicon.insert("P".to_string(), strs(&["in", "near", "with"]));

        Grammar {
            start: "S".to_string(),
            rules,
            lexicon,
            subword_pos: alloc::vec!["PropN".to_string()],
        }
    }

    /// Derive the matching vocabulary: reserved tokens, all whole-word
    /// lexicon entries except `subword_pos` words (those contribute a
    /// two-piece split instead), plus every corpus character in both plain
    /// and continuation form so no word can fall to [UNK].
    pub fn derive_vocab(&self) -> Result<Vocab> {
        let subword: BTreeSet<&String> = self
            .subword_pos
            .iter()
            .flat_map(|pos| self.lexicon.get(pos).into_iter().flatten())
            .collect();
        let mut tokens: BTreeSet<String> = BTreeSet::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for words in self.lexicon.values() {
            for w in words {
                chars.extend(w.chars());
                if subword.contains(w) {
                    let split = w.chars().count().min(3);
                    let prefix: String = w.chars().take(split).collect();
                    let rest: String = w.chars().skip(split).collect();
                    tokens.insert(prefix);
                    if !rest.is_empty() {
                        tokens.insert(alloc::format!("##{rest}"));
                    }
                } else {
                    tokens.insert(w.clone());
                }
            }
        }
        for c in chars {
            tokens.insert(c.to_string());
            tokens.insert(alloc::format!("##{c}"));
        }
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Vocab::new(all)
    }
}

struct Subtree {
    /// (form, head word index within sentence or usize::MAX for pending,
    /// deprel) collected in surface order — heads fixed up after expansion.
    words: Vec<(String, Option<usize>, String)>,
    head_word: usize,
}

fn expand(grammar: &Grammar, symbol: &str, depth: usize, offset: usize, rng: &mut Rng) -> Result<Subtree> {
    if depth > MAX_DEPTH {
        return Err(Error::Domain("derivation exceeded depth cap".into()));
    }
    if let Some(words) = grammar.lexicon.get(symbol) {
        let form = words[rng.index(words.len())].clone();
        return Ok(Subtree {
            words: alloc::vec![(form, None, String::new())],
            head_word: offset,
        });
    }
    let alts = grammar
        .rules
        .get(symbol)
        .ok_or_else(|| Error::Config(alloc::format!("unknown symbol {symbol}")))?;
    let mut pick = rng.f64();
    let mut rule = &alts[alts.len() - 1];
    for r in alts {
        if pick < r.prob {
            rule = r;
            break;
        }
        pick -= r.prob;
    }
    let mut words = Vec::new();
    let mut child_heads = Vec::with_capacity(rule.children.len());
    for child in &rule.children {
        let sub = expand(grammar, child, depth + 1, offset + words.len(), rng)?;
        child_heads.push(sub.head_word);
        words.extend(sub.words);
    }
    for (i, dep) in rule.deps.iter().enumerate() {
        if let Some(d) = dep {
            let child_word = child_heads[i] - offset;
            words[child_word].1 = Some(child_heads[d.parent]);
            words[child_word].2 = d.label.clone();
        }
    }
    Ok(Subtree { words, head_word: child_heads[rule.head] })
}

/// Sample `count` sentences with aligned gold parses. Identical seeds give
/// identical corpora.
pub fn sample_corpus(
    grammar: &Grammar,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, DepSentence)>> {
    grammar.validate()?;
    let mut rng = Rng::from_seed(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut tree = None;
        for _ in 0..MAX_RESAMPLES {
            match expand(grammar, &grammar.start, 0, 0, &mut rng) {
                Ok(t) => {
                    tree = Some(t);
                    break;
                }
                Err(Error::Domain(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let tree = tree.ok_or_else(|| {
            Error::Config("grammar failed to terminate within the depth cap".into())
        })?;
        let root = tree.head_word;
        let words: Vec<String> = tree.words.iter().map(|(f, _, _)| f.clone()).collect();
        let dep_words: Vec<DepWord> = tree
            .words
            .iter()
            .enumerate()
            .map(|(w, (form, head, deprel))| DepWord {
                form: form.clone(),
                head: match head {
                    Some(h) => h + 1,
                    None => {
                        debug_assert_eq!(w, root);
                        0
                    }
                },
                deprel: if head.is_some() { deprel.clone() } else { "root".to_string() },
            })
            .collect();
        let parse = DepSentence {
            id: alloc::format!("s{}", i + 1),
            words: dep_words,
        };
        parse.validate()?;
        out.push((words, parse));
    }
    Ok(out)
}
