//! Modality combinations, token sequence layout and the combination-aware
//! attention mask.
//!
//! A sample's sequence is laid out as
//! `[task | combination tokens | t tokens | i tokens | n tokens]`, with only
//! the combinations whose members are all present. The mask lets the task
//! token read everything while nothing reads the task token, lets each
//! combination token read itself and its member modalities, and confines
//! modality tokens to their own modality.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive value standing in for `-inf` on masked attention logits.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    #[serde(rename = "t")]
    TimeSeries,
    #[serde(rename = "i")]
    Image,
    #[serde(rename = "n")]
    Note,
}

impl ModalityId {
    /// Canonical order `(t, i, n)`.
    pub const ALL: [ModalityId; 3] = [ModalityId::TimeSeries, ModalityId::Image, ModalityId::Note];

    pub fn index(self) -> usize {
        match self {
            ModalityId::TimeSeries => 0,
            ModalityId::Image => 1,
            ModalityId::Note => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<ModalityId> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> char {
        match self {
            ModalityId::TimeSeries => 't',
            ModalityId::Image => 'i',
            ModalityId::Note => 'n',
        }
    }
}

/// Bitmask over modality indices. May be empty; see [`ModalityCombination`]
/// for the nonempty variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b111);

    pub fn from_bits(bits: u8) -> Self {
        ModalitySet(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_modalities(ms: &[ModalityId]) -> Self {
        ms.iter().fold(Self::EMPTY, |s, &m| s.with(m))
    }

    pub fn with(self, m: ModalityId) -> Self {
        ModalitySet(self.0 | (1 << m.index()))
    }

    pub fn contains(self, m: ModalityId) -> bool {
        self.contains_index(m.index())
    }

    pub fn contains_index(self, i: usize) -> bool {
        i < 8 && self.0 & (1 << i) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Member bit positions in ascending order.
    pub fn indices(self) -> Vec<usize> {
        (0..8).filter(|&i| self.contains_index(i)).collect()
    }

    pub fn modalities(self) -> impl Iterator<Item = ModalityId> {
        ModalityId::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in self.indices() {
            match ModalityId::from_index(i) {
                Some(m) => write!(f, "{}", m.code())?,
                None => write!(f, "m{i}")?,
            }
        }
        Ok(())
    }
}

/// A nonempty subset of modalities; one learnable token exists per combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ModalitySet", into = "ModalitySet")]
pub struct ModalityCombination(ModalitySet);

impl ModalityCombination {
    pub fn new(members: ModalitySet) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("modality combination"));
        }
        Ok(ModalityCombination(members))
    }

    pub fn members(self) -> ModalitySet {
        self.0
    }

    pub fn contains(self, m: ModalityId) -> bool {
        self.0.contains(m)
    }

    /// Position of this combination in the canonical enumeration of all
    /// combinations over the full three-modality set.
    pub fn canonical_index(self) -> usize {
        enumerate_combinations(ModalitySet::FULL)
            .expect("full set is nonempty")
            .iter()
            .position(|c| *c == self)
            .expect("combination over canonical modalities")
    }
}

impl TryFrom<ModalitySet> for ModalityCombination {
    type Error = Error;
    fn try_from(s: ModalitySet) -> Result<Self> {
        ModalityCombination::new(s)
    }
}

impl From<ModalityCombination> for ModalitySet {
    fn from(c: ModalityCombination) -> Self {
        c.0
    }
}

impl fmt::Display for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// All nonempty subsets of `modalities`, ordered by cardinality and then
/// lexicographically by member index.
pub fn enumerate_combinations(modalities: ModalitySet) -> Result<Vec<ModalityCombination>> {
    if modalities.is_empty() {
        return Err(Error::Empty("modality set"));
    }
    let members = modalities.indices();
    let n = members.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| {
            (0..n)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| members[b])
                .collect()
        })
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(subsets
        .into_iter()
        .map(|s| ModalityCombination(ModalitySet(s.iter().fold(0u8, |acc, &i| acc | (1 << i)))))
        .collect())
}

/// Number of combination slots for the full modality set.
pub fn full_combination_count() -> usize {
    (1 << ModalityId::ALL.len()) - 1
}

/// Token counts per modality, indexed by [`ModalityId::index`].
pub type TokenCounts = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }
}

/// What a sequence position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Task,
    Combination(ModalityCombination),
    Modality(ModalityId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    present: ModalitySet,
    combinations: Vec<ModalityCombination>,
    spans: [Option<Span>; 3],
    total_len: usize,
}

impl SequenceLayout {
    pub fn task_slot(&self) -> usize {
        0
    }

    pub fn present(&self) -> ModalitySet {
        self.present
    }

    /// Combinations in slot order; slot of the `k`-th is `1 + k`.
    pub fn combinations(&self) -> &[ModalityCombination] {
        &self.combinations
    }

    pub fn comb_slots(&self) -> impl Iterator<Item = (ModalityCombination, usize)> + '_ {
        self.combinations.iter().enumerate().map(|(k, c)| (*c, 1 + k))
    }

    pub fn comb_slot(&self, c: ModalityCombination) -> Option<usize> {
        self.combinations.iter().position(|x| *x == c).map(|k| 1 + k)
    }

    pub fn n_combinations(&self) -> usize {
        self.combinations.len()
    }

    pub fn span(&self, m: ModalityId) -> Option<Span> {
        self.spans[m.index()]
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn kind(&self, index: usize) -> Option<TokenKind> {
        if index >= self.total_len {
            return None;
        }
        if index == 0 {
            return Some(TokenKind::Task);
        }
        if index <= self.combinations.len() {
            return Some(TokenKind::Combination(self.combinations[index - 1]));
        }
        ModalityId::ALL
            .into_iter()
            .find(|m| self.spans[m.index()].is_some_and(|s| s.contains(index)))
            .map(TokenKind::Modality)
    }
}

/// Lay out the sequence for one sample. Only combinations made entirely of
/// present modalities receive a slot.
pub fn build_layout(present: ModalitySet, token_counts: TokenCounts) -> Result<SequenceLayout> {
    layout_impl(present, token_counts, true)
}

/// Layout with no combination slots at all, used when combination tokens
/// are ablated.
pub fn build_layout_without_combinations(
    present: ModalitySet,
    token_counts: TokenCounts,
) -> Result<SequenceLayout> {
    layout_impl(present, token_counts, false)
}

fn layout_impl(present: ModalitySet, counts: TokenCounts, with_comb: bool) -> Result<SequenceLayout> {
    if present.is_empty() {
        return Err(Error::Empty("present modality set"));
    }
    if present.indices().iter().any(|&i| i >= 3) {
        return Err(Error::OutOfRange(format!("modality set {present} has unknown members")));
    }
    let combinations = if with_comb {
        enumerate_combinations(present)?
    } else {
        Vec::new()
    };
    let mut next = 1 + combinations.len();
    let mut spans = [None; 3];
    for m in ModalityId::ALL {
        if !present.contains(m) {
            continue;
        }
        let len = counts[m.index()];
        if len == 0 {
            return Err(Error::OutOfRange(format!(
                "modality {} is present but has zero tokens",
                m.code()
            )));
        }
        spans[m.index()] = Some(Span { start: next, len });
        next += len;
    }
    Ok(SequenceLayout {
        present,
        combinations,
        spans,
        total_len: next,
    })
}

/// Square attention mask over a layout: `true` where attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// Additive entry: `0` when allowed, [`MASK_NEG`] otherwise.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.allowed(i, j) {
            0.0
        } else {
            MASK_NEG
        }
    }

    pub fn additive<T: num_traits::Float>(&self) -> ndarray::Array2<T> {
        let neg = T::from(MASK_NEG).unwrap();
        ndarray::Array2::from_shape_fn((self.n, self.n), |(i, j)| {
            if self.allowed(i, j) {
                T::zero()
            } else {
                neg
            }
        })
    }
}

pub fn build_mask(layout: &SequenceLayout) -> MaskMatrix {
    let n = layout.total_len();
    let kinds: Vec<TokenKind> = (0..n).map(|i| layout.kind(i).expect("index in range")).collect();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = match (kinds[i], kinds[j]) {
                (TokenKind::Task, _) => true,
                (_, TokenKind::Task) => false,
                (TokenKind::Combination(_), TokenKind::Combination(_)) => i == j,
                (TokenKind::Combination(c), TokenKind::Modality(m)) => c.contains(m),
                (TokenKind::Modality(a), TokenKind::Modality(b)) => a == b,
                (TokenKind::Modality(_), TokenKind::Combination(_)) => false,
            };
        }
    }
    MaskMatrix { n, allowed }
}
