//! Relation vocabularies, candidate pairs, datasets and word tables.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

pub use io::{
    load_dataset, load_triplet_list, load_vocabulary, load_word_table, read_word_table, write_dataset,
    write_triplet_list, write_vocabulary, write_word_table, DatasetFiles, from_file_token, to_file_token,
    write_text,
};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

use crate::error::{Error, Result};

/// Default minimum training occurrence count of a non-rare triplet.
pub const DEFAULT_RARE_THRESHOLD: usize = 10;

/// A relation `(subject, predicate, object)` as vocabulary indices.
/// Ordered by `(s, p, o)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub s: usize,
    pub p: usize,
    pub o: usize,
}

impl Triplet {
    pub const fn new(s: usize, p: usize, o: usize) -> Self {
        Self { s, p, o }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.s, self.p, self.o)
    }
}

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) && x_min < x_max && y_min < y_max;
        if !ok {
            return Err(Error::Validation(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Ordered token list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::Validation(format!("empty token at vocabulary index {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.get(token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// The three relation vocabularies V_s, V_p, V_o.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub subjects: Vocabulary,
    pub predicates: Vocabulary,
    pub objects: Vocabulary,
}

impl Vocabularies {
    pub fn contains(&self, t: Triplet) -> bool {
        t.s < self.subjects.len() && t.p < self.predicates.len() && t.o < self.objects.len()
    }

    pub fn triplet(&self, s: &str, p: &str, o: &str) -> Result<Triplet> {
        Ok(Triplet::new(
            self.subjects.index_of(s)?,
            self.predicates.index_of(p)?,
            self.objects.index_of(o)?,
        ))
    }

    pub fn names(&self, t: Triplet) -> (&str, &str, &str) {
        (
            self.subjects.token(t.s),
            self.predicates.token(t.p),
            self.objects.token(t.o),
        )
    }

    /// Every token of the three vocabularies, first occurrence order.
    pub fn all_tokens(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for v in [&self.subjects, &self.predicates, &self.objects] {
            for t in v.tokens() {
                if seen.insert(t.as_str()) {
                    out.push(t.as_str());
                }
            }
        }
        out
    }
}

/// One (subject box, object box) proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub id: u64,
    pub image: String,
    pub sub_box: BoundingBox,
    pub obj_box: BoundingBox,
    pub sub_category: usize,
    pub obj_category: usize,
    pub sub_appearance: Vec<f64>,
    pub obj_appearance: Vec<f64>,
    /// Predicates with `y = 1`, sorted and unique. Empty for a non-interacting pair.
    pub predicates: Vec<usize>,
}

impl CandidatePair {
    pub fn is_positive(&self) -> bool {
        !self.predicates.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.predicates
            .iter()
            .map(|&p| Triplet::new(self.sub_category, p, self.obj_category))
    }

    pub fn has_label(&self, t: Triplet) -> bool {
        t.s == self.sub_category && t.o == self.obj_category && self.predicates.binary_search(&t.p).is_ok()
    }

    pub fn categories(&self) -> (usize, usize) {
        (self.sub_category, self.obj_category)
    }
}

/// Validated collection of candidate pairs with per-triplet counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabularies,
    pub appearance_dim: usize,
    pairs: Vec<CandidatePair>,
    counts: BTreeMap<Triplet, usize>,
}

impl Dataset {
    pub fn new(vocab: Vocabularies, appearance_dim: usize, mut pairs: Vec<CandidatePair>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for pair in &mut pairs {
            if !ids.insert(pair.id) {
                return Err(Error::Validation(format!("duplicate pair id {}", pair.id)));
            }
            if pair.sub_appearance.len() != appearance_dim || pair.obj_appearance.len() != appearance_dim {
                return Err(Error::Validation(format!(
                    "pair {}: appearance dims ({}, {}) differ from declared {appearance_dim}",
                    pair.id,
                    pair.sub_appearance.len(),
                    pair.obj_appearance.len()
                )));
            }
            if pair.sub_category >= vocab.subjects.len() || pair.obj_category >= vocab.objects.len() {
                return Err(Error::Validation(format!("pair {}: category out of range", pair.id)));
            }
            if pair.predicates.iter().any(|&p| p >= vocab.predicates.len()) {
                return Err(Error::Validation(format!("pair {}: predicate out of range", pair.id)));
            }
            pair.predicates.sort_unstable();
            pair.predicates.dedup();
        }
        let counts = count_triplets(&pairs);
        Ok(Self {
            vocab,
            appearance_dim,
            pairs,
            counts,
        })
    }

    pub fn pairs(&self) -> &[CandidatePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of positive pairs per observed triplet.
    pub fn counts(&self) -> &BTreeMap<Triplet, usize> {
        &self.counts
    }

    pub fn count(&self, t: Triplet) -> usize {
        self.counts.get(&t).copied().unwrap_or(0)
    }

    /// Triplets with at least one positive pair.
    pub fn observed(&self) -> BTreeSet<Triplet> {
        self.counts.keys().copied().collect()
    }
}

fn count_triplets(pairs: &[CandidatePair]) -> BTreeMap<Triplet, usize> {
    let mut counts = BTreeMap::new();
    for pair in pairs {
        for t in pair.positives() {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-triplet counts and the set of triplets counted at least `threshold` times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccurrenceStats {
    pub counts: BTreeMap<Triplet, usize>,
    pub non_rare: BTreeSet<Triplet>,
}

pub fn occurrence_rank(counts: &BTreeMap<Triplet, usize>, threshold: usize) -> OccurrenceStats {
    let non_rare = counts
        .iter()
        .filter(|(_, &c)| c >= threshold)
        .map(|(&t, _)| t)
        .collect();
    OccurrenceStats {
        counts: counts.clone(),
        non_rare,
    }
}

/// Word vectors for a set of tokens, all of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl WordTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape {
                context: "WordTable::insert",
                expected: self.dim,
                got: vector.len(),
            });
        }
        match self.index.get(token) {
            Some(&row) => self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.row_of(token).map(|r| self.row(r))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Keeps only `tokens`, in the given order; fails listing every absent token.
    pub fn restrict(&self, tokens: &[&str]) -> Result<WordTable> {
        let missing: Vec<String> = tokens
            .iter()
            .filter(|t| self.row_of(t).is_none())
            .map(|t| t.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTokens(missing));
        }
        let mut out = WordTable::new(self.dim);
        for t in tokens {
            out.insert(t, self.get(t).unwrap())?;
        }
        Ok(out)
    }
}

/// Word-table rows of every vocabulary entry, per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordRows {
    pub subjects: Vec<usize>,
    pub predicates: Vec<usize>,
    pub objects: Vec<usize>,
}

impl WordRows {
    pub fn resolve(table: &WordTable, vocab: &Vocabularies) -> Result<Self> {
        let mut missing = Vec::new();
        let mut rows = |v: &Vocabulary| -> Vec<usize> {
            v.tokens()
                .iter()
                .map(|t| {
                    table.row_of(t).unwrap_or_else(|| {
                        missing.push(t.clone());
                        usize::MAX
                    })
                })
                .collect()
        };
        let out = Self {
            subjects: rows(&vocab.subjects),
            predicates: rows(&vocab.predicates),
            objects: rows(&vocab.objects),
        };
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::MissingTokens(missing));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabularies {
        Vocabularies {
            subjects: Vocabulary::new(["person", "dog"]).unwrap(),
            predicates: Vocabulary::new(["ride", "hold", "feed"]).unwrap(),
            objects: Vocabulary::new(["horse", "cup"]).unwrap(),
        }
    }

    fn pair(id: u64, s: usize, o: usize, preds: Vec<usize>) -> CandidatePair {
        CandidatePair {
            id,
            image: format!("img{id}"),
            sub_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            obj_box: BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            sub_category: s,
            obj_category: o,
            sub_appearance: vec![0.0; 2],
            obj_appearance: vec![0.0; 2],
            predicates: preds,
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empty() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["a", " "]).is_err());
        let v = Vocabulary::new(["a", "b c"]).unwrap();
        assert_eq!(v.get("b c"), Some(1));
        assert!(matches!(v.index_of("z"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn empty_dataset() {
        let d = Dataset::new(vocab(), 2, vec![]).unwrap();
        assert_eq!(d.len(), 0);
        assert!(d.observed().is_empty());
    }

    #[test]
    fn counts_and_multi_label() {
        let d = Dataset::new(
            vocab(),
            2,
            vec![pair(0, 0, 0, vec![0]), pair(1, 0, 0, vec![1, 0]), pair(2, 1, 1, vec![])],
        )
        .unwrap();
        assert_eq!(d.count(Triplet::new(0, 0, 0)), 2);
        assert_eq!(d.count(Triplet::new(0, 1, 0)), 1);
        assert_eq!(d.observed().len(), 2);
        assert_eq!(d.pairs()[1].predicates, vec![0, 1]);
        assert!(d.pairs()[1].has_label(Triplet::new(0, 1, 0)));
        assert!(!d.pairs()[1].has_label(Triplet::new(1, 1, 0)));
    }

    #[test]
    fn dataset_validation() {
        let mut bad = pair(0, 0, 0, vec![0]);
        bad.obj_appearance.push(1.0);
        assert!(Dataset::new(vocab(), 2, vec![bad]).is_err());
        assert!(Dataset::new(vocab(), 2, vec![pair(0, 0, 0, vec![]), pair(0, 0, 0, vec![])]).is_err());
        assert!(Dataset::new(vocab(), 2, vec![pair(0, 5, 0, vec![])]).is_err());
        assert!(Dataset::new(vocab(), 2, vec![pair(0, 0, 0, vec![9])]).is_err());
    }

    #[test]
    fn non_rare_threshold_boundary() {
        let mut counts = BTreeMap::new();
        counts.insert(Triplet::new(0, 0, 0), 9);
        counts.insert(Triplet::new(0, 1, 0), 9);
        assert!(occurrence_rank(&counts, DEFAULT_RARE_THRESHOLD).non_rare.is_empty());

        let mut counts = BTreeMap::new();
        counts.insert(Triplet::new(0, 0, 0), 5);
        counts.insert(Triplet::new(0, 1, 0), 10);
        counts.insert(Triplet::new(0, 2, 0), 11);
        let st = occurrence_rank(&counts, DEFAULT_RARE_THRESHOLD);
        assert_eq!(
            st.non_rare.into_iter().collect::<Vec<_>>(),
            vec![Triplet::new(0, 1, 0), Triplet::new(0, 2, 0)]
        );
    }

    #[test]
    fn word_rows_report_all_missing() {
        let mut t = WordTable::new(2);
        t.insert("person", &[1.0, 0.0]).unwrap();
        t.insert("ride", &[0.0, 1.0]).unwrap();
        match WordRows::resolve(&t, &vocab()) {
            Err(Error::MissingTokens(m)) => {
                assert_eq!(m, vec!["cup", "dog", "feed", "hold", "horse"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
