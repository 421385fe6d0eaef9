//! Generation of program pairs that differ only in their secret cells.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Program, Word};

/// Upper bound on enumerated assignments per public variant.
pub const MAX_ASSIGNMENTS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairError {
    #[error("secret value {0} is outside the 16-bit word range")]
    DomainOutOfRange(u64),
    #[error("empty value domain {0}..{1}")]
    EmptyDomain(u64, u64),
    #[error("malformed domain `{0}` (expected LO..HI)")]
    BadDomain(String),
    #[error("{0} secret assignments exceed the enumeration limit")]
    TooManyAssignments(u128),
    #[error("public variant sets address {0}, which is secret or outside the data segment")]
    BadVariant(Word),
}

/// Inclusive range of values a secret cell may take. Serialized as `"LO..HI"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Domain {
    pub lo: u64,
    pub hi: u64,
}

impl Default for Domain {
    fn default() -> Self {
        Domain { lo: 0, hi: 3 }
    }
}

impl Domain {
    pub fn size(&self) -> u64 {
        self.hi - self.lo + 1
    }

    fn validate(&self) -> Result<(), PairError> {
        if self.hi < self.lo {
            return Err(PairError::EmptyDomain(self.lo, self.hi));
        }
        if self.hi > Word::MAX as u64 {
            return Err(PairError::DomainOutOfRange(self.hi));
        }
        Ok(())
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

impl FromStr for Domain {
    type Err = PairError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PairError::BadDomain(s.to_string());
        let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        let d = Domain { lo, hi };
        d.validate()?;
        Ok(d)
    }
}

impl TryFrom<String> for Domain {
    type Error = PairError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    /// Every unordered pair of distinct secret assignments.
    Exhaustive,
    /// `n` pseudorandom pairs of distinct assignments.
    Sampled { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub domain: Domain,
    pub strategy: Strategy,
    /// Alternative public-cell assignments; each is swept in addition to the
    /// program's own data segment.
    pub public_variants: Vec<BTreeMap<Word, Word>>,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec { domain: Domain::default(), strategy: Strategy::Exhaustive, public_variants: Vec::new() }
    }
}

/// One pair: public variant index and two assignment indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairIndex {
    pub variant: usize,
    pub left: u64,
    pub right: u64,
}

/// Materialized pair plan: every pair is addressed by assignment indices so
/// per-assignment executions can be shared between pairs.
#[derive(Debug, Clone)]
pub struct PairPlan {
    /// Secret addresses, ascending. The first is the most significant digit.
    pub cells: Vec<Word>,
    pub domain: Domain,
    /// Full data segment per public variant (index 0 is the program's own).
    pub bases: Vec<Vec<Word>>,
    pub pairs: Vec<PairIndex>,
}

impl PairPlan {
    pub fn new(prog: &Program, spec: &PairSpec) -> Result<PairPlan, PairError> {
        spec.domain.validate()?;
        let cells: Vec<Word> = prog.secret_region.iter().copied().collect();
        let mut bases = vec![prog.data.clone()];
        for variant in &spec.public_variants {
            let mut data = prog.data.clone();
            for (&a, &v) in variant {
                if prog.secret_region.contains(&a) || a as usize >= data.len() {
                    return Err(PairError::BadVariant(a));
                }
                data[a as usize] = v;
            }
            bases.push(data);
        }
        let mut plan = PairPlan { cells, domain: spec.domain, bases, pairs: Vec::new() };
        if plan.cells.is_empty() {
            return Ok(plan);
        }
        let total = (spec.domain.size() as u128).checked_pow(plan.cells.len() as u32).unwrap_or(u128::MAX);
        if total > MAX_ASSIGNMENTS as u128 {
            return Err(PairError::TooManyAssignments(total));
        }
        let total = total as u64;
        match spec.strategy {
            Strategy::Exhaustive => {
                for variant in 0..plan.bases.len() {
                    for left in 0..total {
                        for right in left + 1..total {
                            plan.pairs.push(PairIndex { variant, left, right });
                        }
                    }
                }
            }
            Strategy::Sampled { n, seed } => {
                if total >= 2 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for _ in 0..n {
                        let variant = rng.gen_range(0..plan.bases.len());
                        let left = rng.gen_range(0..total);
                        let mut right = rng.gen_range(0..total - 1);
                        if right >= left {
                            right += 1;
                        }
                        plan.pairs.push(PairIndex { variant, left, right });
                    }
                }
            }
        }
        Ok(plan)
    }

    /// Secret cell values of assignment `index`, in cell order.
    pub fn assignment(&self, index: u64) -> Vec<Word> {
        let base = self.domain.size();
        let mut values = vec![0; self.cells.len()];
        let mut rest = index;
        for slot in values.iter_mut().rev() {
            *slot = (self.domain.lo + rest % base) as Word;
            rest /= base;
        }
        values
    }

    /// Full data segment for an assignment under a public variant.
    pub fn data(&self, variant: usize, index: u64) -> Vec<Word> {
        let mut data = self.bases[variant].clone();
        for (cell, value) in self.cells.iter().zip(self.assignment(index)) {
            data[*cell as usize] = value;
        }
        data
    }

    pub fn data_pairs(&self) -> impl Iterator<Item = (Vec<Word>, Vec<Word>)> + '_ {
        self.pairs.iter().map(|p| (self.data(p.variant, p.left), self.data(p.variant, p.right)))
    }
}

/// Left and right data segments of one pair.
pub type DataPair = (Vec<Word>, Vec<Word>);

/// The stream of data-segment pairs for `prog` under `spec`.
pub fn gen_pairs(prog: &Program, spec: &PairSpec) -> Result<Vec<DataPair>, PairError> {
    let plan = PairPlan::new(prog, spec)?;
    Ok(plan.data_pairs().collect())
}
