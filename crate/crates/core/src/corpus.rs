//! Bundled example programs and their expected verdicts.
//!
//! Expectations live in `corpus/expectations.toml`, one table per program.
//! Keys name a check cell:
//!
//! - `"hw MODEL CONTRACT"`
//! - `"compiler CONTRACT POLICY"`
//! - `"e2e MODEL CONTRACT POLICY"`
//!
//! and values are verdicts (`pass`, `fail`, `vacuous`, `inconclusive`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::checker::{CheckError, CheckKind, Check, CheckReport, PairSpec, Verdict};
use crate::compiler::CompilerPolicy;
use crate::config::Config;
use crate::contracts::ContractId;
use crate::hardware::HardwareModelId;
use crate::isa::{parse_program, Program};

pub struct CorpusEntry {
    pub name: &'static str,
    pub file: &'static str,
    pub source: &'static str,
}

impl CorpusEntry {
    pub fn program(&self) -> Program {
        parse_program(self.source).unwrap_or_else(|e| panic!("bundled {} does not parse: {e}", self.file))
    }

    /// First comment block of the file.
    pub fn note(&self) -> String {
        self.source
            .lines()
            .map_while(|l| l.strip_prefix('#'))
            .map(str::trim)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

macro_rules! entry {
    ($name:literal) => {
        CorpusEntry { name: $name, file: concat!($name, ".casm"), source: include_str!(concat!("../corpus/", $name, ".casm")) }
    };
}

pub const ENTRIES: [CorpusEntry; 6] = [
    entry!("sp1"),
    entry!("sp1-trained"),
    entry!("straightline"),
    entry!("ct-select"),
    entry!("branchy-noleak"),
    entry!("empty-secret"),
];

pub const EXPECTATIONS_TOML: &str = include_str!("../corpus/expectations.toml");

pub fn entry(name: &str) -> Option<&'static CorpusEntry> {
    let name = name.strip_suffix(".casm").unwrap_or(name);
    ENTRIES.iter().find(|e| e.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed expectation key `{0}`")]
pub struct BadCell(pub String);

/// One cell of the verdict matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub kind: CheckKind,
    pub model: Option<HardwareModelId>,
    pub contract: ContractId,
    pub policy: Option<CompilerPolicy>,
}

impl Cell {
    /// Every cell, in matrix order.
    pub fn all() -> Vec<Cell> {
        let mut cells = Vec::new();
        for model in HardwareModelId::ALL {
            for contract in ContractId::ALL {
                cells.push(Cell { kind: CheckKind::Hw, model: Some(model), contract, policy: None });
            }
        }
        for contract in ContractId::ALL {
            for policy in CompilerPolicy::ALL {
                cells.push(Cell { kind: CheckKind::Compiler, model: None, contract, policy: Some(policy) });
            }
        }
        for model in HardwareModelId::ALL {
            for contract in ContractId::ALL {
                for policy in CompilerPolicy::ALL {
                    cells.push(Cell { kind: CheckKind::E2e, model: Some(model), contract, policy: Some(policy) });
                }
            }
        }
        cells
    }

    pub fn check(&self, config: &Config) -> Check {
        let mut hardware = config.hardware;
        if let Some(m) = self.model {
            hardware.model = m;
        }
        Check {
            kind: self.kind,
            contract: self.contract,
            contract_config: config.contract,
            hardware,
            policy: self.policy,
            parallel: false,
        }
    }

    pub fn run(&self, prog: &Program, config: &Config, spec: &PairSpec) -> Result<CheckReport, CheckError> {
        self.check(config).run(prog, spec)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(m) = self.model {
            write!(f, " {m}")?;
        }
        write!(f, " {}", self.contract)?;
        if let Some(p) = self.policy {
            write!(f, " {}", p.name())?;
        }
        Ok(())
    }
}

impl FromStr for Cell {
    type Err = BadCell;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadCell(s.to_string());
        let words: Vec<&str> = s.split_whitespace().collect();
        let model = |w: &str| w.parse::<HardwareModelId>().map_err(|_| bad());
        let contract = |w: &str| w.parse::<ContractId>().map_err(|_| bad());
        let policy = |w: &str| w.parse::<CompilerPolicy>().map_err(|_| bad());
        match words.as_slice() {
            ["hw", m, c] => Ok(Cell { kind: CheckKind::Hw, model: Some(model(m)?), contract: contract(c)?, policy: None }),
            ["compiler", c, p] => {
                Ok(Cell { kind: CheckKind::Compiler, model: None, contract: contract(c)?, policy: Some(policy(p)?) })
            }
            ["e2e", m, c, p] => Ok(Cell {
                kind: CheckKind::E2e,
                model: Some(model(m)?),
                contract: contract(c)?,
                policy: Some(policy(p)?),
            }),
            _ => Err(bad()),
        }
    }
}

/// Expected verdict per program, per cell.
pub type Expectations = BTreeMap<String, BTreeMap<String, Verdict>>;

pub fn expectations() -> Expectations {
    toml::from_str(EXPECTATIONS_TOML).expect("bundled expectations parse")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub program: String,
    pub cell: String,
    pub expected: Verdict,
    pub actual: Verdict,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown corpus program `{0}` in expectations")]
    UnknownProgram(String),
    #[error(transparent)]
    Cell(#[from] BadCell),
    #[error("{program} / {cell}: {source}")]
    Check { program: String, cell: String, source: CheckError },
}

/// Runs every expectation. Cells run in parallel when `parallel` is set;
/// outcomes are returned in file order either way.
pub fn verify(config: &Config, parallel: bool) -> Result<Vec<Outcome>, VerifyError> {
    use rayon::prelude::*;

    let spec = config.pairs.to_spec();
    let mut jobs = Vec::new();
    for (program, cells) in expectations() {
        let e = entry(&program).ok_or_else(|| VerifyError::UnknownProgram(program.clone()))?;
        for (key, expected) in cells {
            jobs.push((program.clone(), e, key.parse::<Cell>()?, key, expected));
        }
    }
    let run = |(program, e, cell, key, expected): &(String, &CorpusEntry, Cell, String, Verdict)| {
        cell.run(&e.program(), config, &spec)
            .map(|r| Outcome { program: program.clone(), cell: key.clone(), expected: *expected, actual: r.verdict })
            .map_err(|source| VerifyError::Check { program: program.clone(), cell: key.clone(), source })
    };
    if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}
