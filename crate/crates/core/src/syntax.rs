//! Dependency-parse ingestion and the syntactic measurements used to
//! partition probe results: relation categories, dependency labels,
//! functional relations, linear and structural distance.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedSentence;

/// One word of a dependency tree. `head` is the 1-based index of the
/// governing word, 0 for the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DepWord {
    pub form: String,
    pub head: usize,
    pub deprel: String,
}

/// A gold dependency parse: a single tree rooted at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepSentence {
    pub id: String,
    pub words: Vec<DepWord>,
}

impl DepSentence {
    /// Head of word `w` (0-based), or None for the root.
    pub fn head_of(&self, w: usize) -> Option<usize> {
        match self.words[w].head {
            0 => None,
            h => Some(h - 1),
        }
    }

    /// Number of arcs from `descendant` up to `ancestor`, if on one chain.
    fn chain_length(&self, ancestor: usize, descendant: usize) -> Option<usize> {
        let mut cur = descendant;
        let mut arcs = 0;
        while let Some(h) = self.head_of(cur) {
            arcs += 1;
            if h == ancestor {
                return Some(arcs);
            }
            cur = h;
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        let mut roots = 0;
        for (i, w) in self.words.iter().enumerate() {
            if w.head > n {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: alloc::format!("head {} out of range for {n} words", w.head),
                });
            }
            if w.head == 0 {
                roots += 1;
            }
        }
        if roots != 1 {
            return Err(Error::Parse {
                line: 0,
                msg: alloc::format!("expected exactly one root, found {roots}"),
            });
        }
        // cycle check: every word must reach the root in <= n arcs
        for w in 0..n {
            let mut cur = w;
            let mut steps = 0;
            while let Some(h) = self.head_of(cur) {
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(Error::Parse {
                        line: w + 1,
                        msg: String::from("cyclic heads"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Parse CoNLL-U text. Comment lines and multiword range lines are skipped;
/// blank lines end sentences. Only ID, FORM, HEAD, DEPREL are read.
pub fn parse_conllu(text: &str) -> Result<Vec<DepSentence>> {
    let mut sentences = Vec::new();
    let mut words: Vec<DepWord> = Vec::new();
    let mut sent_id = String::new();
    let mut counter = 0usize;

    let mut flush = |words: &mut Vec<DepWord>, sent_id: &mut String, counter: &mut usize| -> Result<()> {
        if words.is_empty() {
            return Ok(());
        }
        let id = if sent_id.is_empty() {
            *counter += 1;
            alloc::format!("s{counter}")
        } else {
            core::mem::take(sent_id)
        };
        let s = DepSentence { id, words: core::mem::take(words) };
        s.validate()?;
        sentences.push(s);
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            flush(&mut words, &mut sent_id, &mut counter)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("sent_id") {
                sent_id = v.trim_start_matches([' ', '=']).trim().to_string();
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: alloc::format!("expected 10 columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') {
            // multiword token range line
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: alloc::format!("non-integer ID {}", cols[0]),
        })?;
        if id != words.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: alloc::format!("ID {id} out of sequence"),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: alloc::format!("non-integer HEAD {}", cols[6]),
        })?;
        words.push(DepWord {
            form: cols[1].to_string(),
            head,
            deprel: cols[7].to_string(),
        });
    }
    flush(&mut words, &mut sent_id, &mut counter)?;
    Ok(sentences)
}

/// Subword-to-word alignment, taken directly from the tokenizer.
#[derive(Debug, Clone)]
pub struct Alignment {
    word_of: Vec<Option<usize>>,
}

impl Alignment {
    pub fn from_tokenized(sentence: &TokenizedSentence) -> Self {
        Alignment { word_of: sentence.word_of.clone() }
    }

    /// Word of a non-special subword position.
    pub fn word_of(&self, subword: usize) -> Result<usize> {
        self.word_of
            .get(subword)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Domain(alloc::format!("position {subword} is a special token")))
    }
}

/// Syntactic relation between an ordered (source, recon) subword pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationCategory {
    Subword,
    SourceIsHead,
    ReconIsHead,
    SourceIsAncestor,
    ReconIsAncestor,
    NoRelation,
}

impl RelationCategory {
    pub fn label(self) -> &'static str {
        match self {
            RelationCategory::Subword => "subword",
            RelationCategory::SourceIsHead => "source_is_head",
            RelationCategory::ReconIsHead => "recon_is_head",
            RelationCategory::SourceIsAncestor => "source_is_ancestor",
            RelationCategory::ReconIsAncestor => "recon_is_ancestor",
            RelationCategory::NoRelation => "no_relation",
        }
    }
}

/// Classify the relation of an ordered subword pair. Precedence: same word,
/// then single-arc head relations, then longer ancestor chains, then none.
pub fn classify_relation(
    source: usize,
    recon: usize,
    align: &Alignment,
    parse: &DepSentence,
) -> Result<RelationCategory> {
    let ws = align.word_of(source)?;
    let wr = align.word_of(recon)?;
    if ws == wr {
        return Ok(RelationCategory::Subword);
    }
    if parse.head_of(wr) == Some(ws) {
        return Ok(RelationCategory::SourceIsHead);
    }
    if parse.head_of(ws) == Some(wr) {
        return Ok(RelationCategory::ReconIsHead);
    }
    if parse.chain_length(ws, wr).is_some() {
        return Ok(RelationCategory::SourceIsAncestor);
    }
    if parse.chain_length(wr, ws).is_some() {
        return Ok(RelationCategory::ReconIsAncestor);
    }
    Ok(RelationCategory::NoRelation)
}

/// |i - j| in subword positions.
pub fn linear_distance(i: usize, j: usize) -> Result<usize> {
    if i == j {
        return Err(Error::Domain("linear distance of a position with itself".into()));
    }
    Ok(i.abs_diff(j))
}

/// Arc count on the directed chain between the two words, when one is an
/// ancestor of the other. Subword pairs (same word) have no structural
/// distance.
pub fn structural_distance(
    source: usize,
    recon: usize,
    align: &Alignment,
    parse: &DepSentence,
) -> Result<Option<usize>> {
    let ws = align.word_of(source)?;
    let wr = align.word_of(recon)?;
    if ws == wr {
        return Err(Error::Domain("structural distance within one word".into()));
    }
    Ok(parse
        .chain_length(ws, wr)
        .or_else(|| parse.chain_length(wr, ws)))
}

/// Which side of a functional arc carries the function word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionWordSide {
    Head,
    Dependent,
}

/// Configurable table of dependency labels denoting functional relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalRelationTable {
    pub rows: Vec<(String, FunctionWordSide)>,
}

impl FunctionalRelationTable {
    /// The seven default rows: aux/auxpass/case/det/mark with the function
    /// word as dependent, pcomp/pobj with it as head.
    pub fn default_table() -> Self {
        use FunctionWordSide::*;
        let rows = [
            ("aux", Dependent),
            ("auxpass", Dependent),
            ("case", Dependent),
            ("det", Dependent),
            ("mark", Dependent),
            ("pcomp", Head),
            ("pobj", Head),
        ]
        .iter()
        .map(|&(l, s)| (l.to_string(), s))
        .collect();
        FunctionalRelationTable { rows }
    }

    pub fn side_of(&self, deprel: &str) -> Option<FunctionWordSide> {
        self.rows
            .iter()
            .find(|(l, _)| l == deprel)
            .map(|&(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionalDirection {
    FwIsSource,
    FwIsRecon,
    NotFunctional,
}

impl FunctionalDirection {
    pub fn label(self) -> &'static str {
        match self {
            FunctionalDirection::FwIsSource => "fw_is_source",
            FunctionalDirection::FwIsRecon => "fw_is_recon",
            FunctionalDirection::NotFunctional => "not_functional",
        }
    }
}

/// If the word pair is joined by one arc whose label is in the table,
/// report which of source/recon is the function word.
pub fn functional_direction(
    source: usize,
    recon: usize,
    align: &Alignment,
    parse: &DepSentence,
    table: &FunctionalRelationTable,
) -> Result<FunctionalDirection> {
    let ws = align.word_of(source)?;
    let wr = align.word_of(recon)?;
    if ws == wr {
        return Ok(FunctionalDirection::NotFunctional);
    }
    // (head word, dependent word) when exactly one arc joins the pair
    let arc = if parse.head_of(wr) == Some(ws) {
        Some((ws, wr))
    } else if parse.head_of(ws) == Some(wr) {
        Some((wr, ws))
    } else {
        None
    };
    let Some((head, dependent)) = arc else {
        return Ok(FunctionalDirection::NotFunctional);
    };
    let Some(side) = table.side_of(&parse.words[dependent].deprel) else {
        return Ok(FunctionalDirection::NotFunctional);
    };
    let fw = match side {
        FunctionWordSide::Head => head,
        FunctionWordSide::Dependent => dependent,
    };
    Ok(if fw == ws {
        FunctionalDirection::FwIsSource
    } else {
        FunctionalDirection::FwIsRecon
    })
}
