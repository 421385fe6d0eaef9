//! Leakage contracts: labeled semantics over architectural executions.
//!
//! The speculative contracts explore, at every branch, the successor the
//! branch does *not* take, for a bounded window and bounded nesting depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{branch_successors, exec_instruction, Effect, ExecError, Instruction, Pc, Program, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContractId {
    #[serde(rename = "seq-ct")]
    SeqCt,
    #[serde(rename = "spec-ct")]
    SpecCt,
    #[serde(rename = "arch-seq")]
    ArchSeq,
    #[serde(rename = "ct-pc-spec")]
    CtPcSpec,
}

impl ContractId {
    pub const ALL: [ContractId; 4] = [ContractId::SeqCt, ContractId::SpecCt, ContractId::ArchSeq, ContractId::CtPcSpec];

    pub fn name(self) -> &'static str {
        match self {
            ContractId::SeqCt => "seq-ct",
            ContractId::SpecCt => "spec-ct",
            ContractId::ArchSeq => "arch-seq",
            ContractId::CtPcSpec => "ct-pc-spec",
        }
    }

    /// Whether the contract exposes anything about speculatively executed paths.
    pub fn is_speculative(self) -> bool {
        matches!(self, ContractId::SpecCt | ContractId::CtPcSpec)
    }
}

impl fmt::Display for ContractId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown contract `{0}` (expected seq-ct, spec-ct, arch-seq or ct-pc-spec)")]
pub struct UnknownContract(pub String);

impl FromStr for ContractId {
    type Err = UnknownContract;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContractId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownContract(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContractLabel {
    Pc { pc: usize },
    Load { addr: Word },
    Store { addr: Word },
    #[serde(rename = "loadv")]
    LoadV { addr: Word, value: Word },
    Start { branch: usize },
    Rollback { branch: usize },
}

impl ContractLabel {
    /// `loadv a v` becomes `load a`; everything else is unchanged.
    pub fn erase_value(self) -> ContractLabel {
        match self {
            ContractLabel::LoadV { addr, .. } => ContractLabel::Load { addr },
            other => other,
        }
    }
}

impl fmt::Display for ContractLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContractLabel::Pc { pc } => write!(f, "pc {pc}"),
            ContractLabel::Load { addr } => write!(f, "load {addr}"),
            ContractLabel::Store { addr } => write!(f, "store {addr}"),
            ContractLabel::LoadV { addr, value } => write!(f, "loadv {addr} {value}"),
            ContractLabel::Start { branch } => write!(f, "start {branch}"),
            ContractLabel::Rollback { branch } => write!(f, "rollback {branch}"),
        }
    }
}

/// Parameters of the speculative exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractConfig {
    /// Instructions executed per speculative exploration.
    pub window: usize,
    /// Maximum number of simultaneously open explorations; 0 disables speculation.
    pub nesting: usize,
    /// Sequential step budget.
    pub max_steps: usize,
}

impl Default for ContractConfig {
    fn default() -> Self {
        ContractConfig { window: 16, nesting: 2, max_steps: 10_000 }
    }
}

impl ContractConfig {
    pub fn validate(&self) -> Result<(), ContractError> {
        if self.window == 0 {
            return Err(ContractError::InvalidConfig("contract window must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(ContractError::InvalidConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContractTrace {
    pub labels: Vec<ContractLabel>,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("invalid contract configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkerError {
    #[error("label {index}: rollback {branch} closes nothing")]
    UnmatchedRollback { index: usize, branch: usize },
    #[error("label {index}: rollback {got} does not match start {expected}")]
    Mismatched { index: usize, expected: usize, got: usize },
    #[error("{0} speculative span(s) left open")]
    Unclosed(usize),
}

struct Explorer<'a> {
    prog: &'a Program,
    contract: ContractId,
    cfg: ContractConfig,
    labels: Vec<ContractLabel>,
}

impl Explorer<'_> {
    fn observe(&mut self, pc: usize, effect: Effect, speculative: bool) {
        self.labels.push(ContractLabel::Pc { pc });
        let label = match (self.contract, effect, speculative) {
            (_, Effect::None, _) => None,
            (ContractId::ArchSeq, Effect::Load { addr, value }, _) => Some(ContractLabel::LoadV { addr, value }),
            (ContractId::CtPcSpec, _, true) => None,
            (ContractId::CtPcSpec, Effect::Store { .. }, false) => None,
            (_, Effect::Load { addr, .. }, _) => Some(ContractLabel::Load { addr }),
            (_, Effect::Store { addr }, _) => Some(ContractLabel::Store { addr }),
        };
        self.labels.extend(label);
    }

    /// Explores the mispredicted successor of the branch at `branch`, given the
    /// state right after the branch executed and the budget left to the
    /// enclosing exploration.
    fn mispredict(&mut self, branch: usize, actual: Pc, regs: &[Word], mem: &[Word], budget: usize, depth: usize) {
        if !self.contract.is_speculative() || depth >= self.cfg.nesting {
            return;
        }
        let (taken, fall) = branch_successors(self.prog, branch).expect("branch");
        let wrong = if actual == taken { fall } else { taken };
        self.labels.push(ContractLabel::Start { branch });
        self.explore(regs.to_vec(), mem.to_vec(), wrong, budget.min(self.cfg.window), depth + 1);
        self.labels.push(ContractLabel::Rollback { branch });
    }

    fn explore(&mut self, mut regs: Vec<Word>, mut mem: Vec<Word>, mut pc: Pc, budget: usize, depth: usize) {
        let mut remaining = budget;
        while remaining > 0 {
            let Pc::At(i) = pc else { return };
            if self.prog.code[i].is_fence() {
                self.labels.push(ContractLabel::Pc { pc: i });
                return;
            }
            match exec_instruction(self.prog, &mut regs, &mut mem, i) {
                // Transient faults end the exploration at the faulting instruction.
                Err(_) => {
                    self.labels.push(ContractLabel::Pc { pc: i });
                    return;
                }
                Ok((next, effect)) => {
                    self.observe(i, effect, true);
                    remaining -= 1;
                    if self.prog.code[i].is_branch() {
                        // Nested explorations do not consume the enclosing budget.
                        self.mispredict(i, next, &regs, &mem, remaining, depth);
                    }
                    pc = next;
                }
            }
        }
    }
}

/// Computes the contract trace of `prog` under contract `contract`.
pub fn contract_trace(contract: ContractId, prog: &Program, cfg: &ContractConfig) -> Result<ContractTrace, ContractError> {
    cfg.validate()?;
    let mut ex = Explorer { prog, contract, cfg: *cfg, labels: Vec::new() };
    let mut state = prog.initial_state();
    let mut steps = 0;
    while let Pc::At(i) = state.pc {
        if steps >= cfg.max_steps {
            return Ok(ContractTrace { labels: ex.labels, terminated: false });
        }
        let (next, effect) = exec_instruction(prog, &mut state.regs, &mut state.mem, i)?;
        ex.observe(i, effect, false);
        if matches!(prog.code[i], Instruction::Beqz { .. }) {
            ex.mispredict(i, next, &state.regs, &state.mem, cfg.window, 0);
        }
        state.pc = next;
        steps += 1;
    }
    Ok(ContractTrace { labels: ex.labels, terminated: true })
}

/// Removes every `start`..`rollback` span (inclusive), innermost spans included.
pub fn erase_speculation(trace: &ContractTrace) -> Result<ContractTrace, MarkerError> {
    let mut open: Vec<usize> = Vec::new();
    let mut labels = Vec::new();
    for (index, label) in trace.labels.iter().enumerate() {
        match *label {
            ContractLabel::Start { branch } => open.push(branch),
            ContractLabel::Rollback { branch } => match open.pop() {
                None => return Err(MarkerError::UnmatchedRollback { index, branch }),
                Some(expected) if expected != branch => {
                    return Err(MarkerError::Mismatched { index, expected, got: branch })
                }
                Some(_) => {}
            },
            other if open.is_empty() => labels.push(other),
            _ => {}
        }
    }
    if !open.is_empty() {
        return Err(MarkerError::Unclosed(open.len()));
    }
    Ok(ContractTrace { labels, terminated: trace.terminated })
}
