//! Relational checks over pairs of data segments that agree on public cells.
//!
//! Each check has a premise trace (two runs must agree) and a conclusion trace
//! (two runs must then also agree). Traces are computed once per distinct
//! secret assignment and shared between the pairs that use it.

mod pairs;

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pairs::{gen_pairs, Domain, PairError, PairIndex, PairPlan, PairSpec, Strategy, MAX_ASSIGNMENTS};

use crate::compiler::{compile, CompilerPolicy};
use crate::contracts::{contract_trace, ContractConfig, ContractError, ContractId};
use crate::hardware::{hw_trace, HwConfig, HwError};
use crate::isa::{arch_trace, ExecError, Program, ProgramError, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// No pair satisfied the premise.
    Vacuous,
    /// Some pair hit a step budget before terminating.
    Inconclusive,
}

impl Verdict {
    /// Process exit code for the CLI.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Vacuous | Verdict::Inconclusive => 2,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Vacuous => "vacuous",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    /// Hardware satisfies a contract.
    Hw,
    /// Compiled code is secure w.r.t. a contract.
    Compiler,
    /// Compiled code is constant-time on the hardware.
    E2e,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Hw => "hw",
            CheckKind::Compiler => "compiler",
            CheckKind::E2e => "e2e",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Hardware(#[from] HwError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(
        "contract exploration (window {cw}, nesting {cn}) must cover the hardware's (window {hw}, nesting {hn})"
    )]
    WindowMismatch { cw: usize, cn: usize, hw: usize, hn: usize },
    #[error("the {0} check needs a compiler policy")]
    MissingPolicy(CheckKind),
}

/// An observation trace of any of the semantics, compared for equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trace {
    Arch(Vec<crate::isa::ArchObs>),
    Contract(Vec<crate::contracts::ContractLabel>),
    Hw(Vec<crate::hardware::HwObs>),
}

impl Trace {
    pub fn lines(&self) -> Vec<String> {
        match self {
            Trace::Arch(v) => v.iter().map(ToString::to_string).collect(),
            Trace::Contract(v) => v.iter().map(ToString::to_string).collect(),
            Trace::Hw(v) => v.iter().map(ToString::to_string).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Trace::Arch(v) => v.len(),
            Trace::Contract(v) => v.len(),
            Trace::Hw(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Run {
    Done(Trace),
    Budget(Trace),
    Trap(ExecError),
}

/// First index at which two sequences differ. `None` on a side means that
/// trace ended there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence<T> {
    pub index: usize,
    pub left: Option<T>,
    pub right: Option<T>,
}

pub fn first_divergence<T: PartialEq + Clone>(a: &[T], b: &[T]) -> Option<Divergence<T>> {
    let n = a.len().max(b.len());
    (0..n).find(|&i| a.get(i) != b.get(i)).map(|index| Divergence {
        index,
        left: a.get(index).cloned(),
        right: b.get(index).cloned(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub variant: usize,
    /// `(address, value)` of each secret cell.
    pub left_secrets: Vec<(Word, Word)>,
    pub right_secrets: Vec<(Word, Word)>,
    pub left_data: Vec<Word>,
    pub right_data: Vec<Word>,
    /// The (shared) premise trace.
    pub premise: Vec<String>,
    pub left_conclusion: Vec<String>,
    pub right_conclusion: Vec<String>,
    pub divergence: Divergence<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub kind: CheckKind,
    pub contract: ContractId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hardware: Option<HwConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub policy: Option<CompilerPolicy>,
    pub contract_config: ContractConfig,
    pub verdict: Verdict,
    pub pairs_examined: usize,
    pub premise_pairs: usize,
    pub trapped_pairs: usize,
    pub inconclusive_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counterexample: Option<Counterexample>,
    /// Wall-clock time; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check {}: contract {}", self.kind, self.contract)?;
        if let Some(hw) = &self.hardware {
            write!(f, ", hardware {}", hw.model.name())?;
        }
        if let Some(p) = self.policy {
            write!(f, ", policy {}", p.name())?;
        }
        writeln!(f)?;
        writeln!(f, "verdict: {}", self.verdict)?;
        writeln!(
            f,
            "pairs: {} examined, {} premise-equal, {} trapped, {} inconclusive",
            self.pairs_examined, self.premise_pairs, self.trapped_pairs, self.inconclusive_pairs
        )?;
        if let Some(cx) = &self.counterexample {
            let cells = |s: &[(Word, Word)]| s.iter().map(|(a, v)| format!("[{a}]={v}")).collect::<Vec<_>>().join(" ");
            writeln!(f, "counterexample (public variant {}):", cx.variant)?;
            writeln!(f, "  left  secrets: {}", cells(&cx.left_secrets))?;
            writeln!(f, "  right secrets: {}", cells(&cx.right_secrets))?;
            writeln!(f, "  premise traces agree ({} observations)", cx.premise.len())?;
            let side = |o: &Option<String>| o.clone().unwrap_or_else(|| "<end of trace>".into());
            writeln!(
                f,
                "  first divergence at observation {}: left `{}`, right `{}`",
                cx.divergence.index,
                side(&cx.divergence.left),
                side(&cx.divergence.right)
            )?;
            let from = cx.divergence.index.saturating_sub(3);
            for i in from..=cx.divergence.index {
                let l = cx.left_conclusion.get(i).map_or("", String::as_str);
                let r = cx.right_conclusion.get(i).map_or("", String::as_str);
                writeln!(f, "    {i:>4}  {l:<40} | {r}")?;
            }
        }
        Ok(())
    }
}

/// Parameters of a check, independent of the program and the pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Check {
    pub kind: CheckKind,
    pub contract: ContractId,
    pub contract_config: ContractConfig,
    pub hardware: HwConfig,
    pub policy: Option<CompilerPolicy>,
    /// Compute per-assignment traces on the rayon pool. Results are identical.
    pub parallel: bool,
}

impl Check {
    fn validate(&self) -> Result<(), CheckError> {
        self.contract_config.validate()?;
        if self.kind != CheckKind::Compiler {
            self.hardware.validate()?;
        }
        if self.kind != CheckKind::Hw && self.policy.is_none() {
            return Err(CheckError::MissingPolicy(self.kind));
        }
        let (c, h) = (&self.contract_config, &self.hardware);
        if self.kind != CheckKind::Compiler
            && self.contract.is_speculative()
            && h.model.speculates()
            && (c.window < h.window || c.nesting < h.nesting)
        {
            return Err(CheckError::WindowMismatch { cw: c.window, cn: c.nesting, hw: h.window, hn: h.nesting });
        }
        Ok(())
    }

    /// The program whose traces form the conclusion. Compilation reads only
    /// the code, so it is done once and the data segment swapped in per run.
    fn target(&self, prog: &Program) -> Program {
        match (self.kind, self.policy) {
            (CheckKind::Hw, _) | (_, None) => prog.clone(),
            (_, Some(policy)) => compile(self.contract, policy, prog, &self.contract_config),
        }
    }

    fn premise(&self, prog: &Program) -> Run {
        match self.kind {
            CheckKind::Hw => contract_run(self.contract, prog, &self.contract_config),
            CheckKind::Compiler | CheckKind::E2e => match arch_trace(prog, self.contract_config.max_steps) {
                Ok(t) if t.terminated => Run::Done(Trace::Arch(t.obs)),
                Ok(t) => Run::Budget(Trace::Arch(t.obs)),
                Err(e) => Run::Trap(e),
            },
        }
    }

    fn conclusion(&self, target: &Program) -> Run {
        match self.kind {
            CheckKind::Hw | CheckKind::E2e => match hw_trace(target, &self.hardware) {
                Ok(t) if t.terminated => Run::Done(Trace::Hw(t.obs)),
                Ok(t) => Run::Budget(Trace::Hw(t.obs)),
                Err(HwError::Exec(e)) => Run::Trap(e),
                Err(e) => unreachable!("validated configuration rejected: {e}"),
            },
            CheckKind::Compiler => contract_run(self.contract, target, &self.contract_config),
        }
    }

    /// Runs the check on all pairs of `spec`.
    pub fn run(&self, prog: &Program, spec: &PairSpec) -> Result<CheckReport, CheckError> {
        let started = Instant::now();
        self.validate()?;
        let plan = PairPlan::new(prog, spec)?;
        let target = self.target(prog);

        let mut keys: Vec<(usize, u64)> =
            plan.pairs.iter().flat_map(|p| [(p.variant, p.left), (p.variant, p.right)]).collect();
        keys.sort_unstable();
        keys.dedup();
        type Keyed = ((usize, u64), (Run, Run));
        let eval = |&(variant, index): &(usize, u64)| -> Result<Keyed, CheckError> {
            let data = plan.data(variant, index);
            let source = prog.with_data(data.clone())?;
            let compiled = target.with_data(data)?;
            Ok(((variant, index), (self.premise(&source), self.conclusion(&compiled))))
        };
        let runs: BTreeMap<(usize, u64), (Run, Run)> = if self.parallel {
            keys.par_iter().map(eval).collect::<Result<_, _>>()?
        } else {
            keys.iter().map(eval).collect::<Result<_, _>>()?
        };

        let mut report = CheckReport {
            kind: self.kind,
            contract: self.contract,
            hardware: (self.kind != CheckKind::Compiler).then_some(self.hardware),
            policy: if self.kind == CheckKind::Hw { None } else { self.policy },
            contract_config: self.contract_config,
            verdict: Verdict::Pass,
            pairs_examined: plan.pairs.len(),
            premise_pairs: 0,
            trapped_pairs: 0,
            inconclusive_pairs: 0,
            counterexample: None,
            elapsed: Duration::ZERO,
        };
        for pair in &plan.pairs {
            let (pl, cl) = &runs[&(pair.variant, pair.left)];
            let (pr, cr) = &runs[&(pair.variant, pair.right)];
            let premise = match (pl, pr) {
                (Run::Trap(_), _) | (_, Run::Trap(_)) => {
                    report.trapped_pairs += 1;
                    continue;
                }
                (Run::Done(a), Run::Done(b)) => {
                    if a != b {
                        continue;
                    }
                    a
                }
                _ => {
                    report.inconclusive_pairs += 1;
                    continue;
                }
            };
            report.premise_pairs += 1;
            match (cl, cr) {
                (Run::Trap(_), _) | (_, Run::Trap(_)) => report.trapped_pairs += 1,
                (Run::Done(a), Run::Done(b)) => {
                    if a != b && report.counterexample.is_none() {
                        report.counterexample = Some(counterexample(&plan, pair, premise, a, b));
                    }
                }
                _ => report.inconclusive_pairs += 1,
            }
        }
        report.verdict = if report.counterexample.is_some() {
            Verdict::Fail
        } else if report.inconclusive_pairs > 0 {
            Verdict::Inconclusive
        } else if report.premise_pairs == 0 {
            Verdict::Vacuous
        } else {
            Verdict::Pass
        };
        report.elapsed = started.elapsed();
        Ok(report)
    }

    /// Re-executes a counterexample from its data segments alone. Returns true
    /// if the premise traces agree, the conclusion traces differ, and both
    /// match what was recorded.
    pub fn replay(&self, prog: &Program, cx: &Counterexample) -> Result<bool, CheckError> {
        self.validate()?;
        let target = self.target(prog);
        let side = |data: &Vec<Word>| -> Result<(Run, Run), CheckError> {
            Ok((self.premise(&prog.with_data(data.clone())?), self.conclusion(&target.with_data(data.clone())?)))
        };
        let (pl, cl) = side(&cx.left_data)?;
        let (pr, cr) = side(&cx.right_data)?;
        Ok(match (pl, pr, cl, cr) {
            (Run::Done(pl), Run::Done(pr), Run::Done(cl), Run::Done(cr)) => {
                pl == pr
                    && pl.lines() == cx.premise
                    && cl != cr
                    && cl.lines() == cx.left_conclusion
                    && cr.lines() == cx.right_conclusion
            }
            _ => false,
        })
    }
}

fn contract_run(c: ContractId, prog: &Program, cfg: &ContractConfig) -> Run {
    match contract_trace(c, prog, cfg) {
        Ok(t) if t.terminated => Run::Done(Trace::Contract(t.labels)),
        Ok(t) => Run::Budget(Trace::Contract(t.labels)),
        Err(ContractError::Exec(e)) => Run::Trap(e),
        Err(e) => unreachable!("validated configuration rejected: {e}"),
    }
}

fn counterexample(plan: &PairPlan, pair: &PairIndex, premise: &Trace, a: &Trace, b: &Trace) -> Counterexample {
    let secrets = |i| plan.cells.iter().copied().zip(plan.assignment(i)).collect();
    let (left, right) = (a.lines(), b.lines());
    Counterexample {
        variant: pair.variant,
        left_secrets: secrets(pair.left),
        right_secrets: secrets(pair.right),
        left_data: plan.data(pair.variant, pair.left),
        right_data: plan.data(pair.variant, pair.right),
        premise: premise.lines(),
        divergence: first_divergence(&left, &right).expect("traces differ"),
        left_conclusion: left,
        right_conclusion: right,
    }
}

/// Does `hw` satisfy contract `c` on `prog` over the given pairs?
pub fn check_hw_contract(
    hw: &HwConfig,
    contract: ContractId,
    cfg: &ContractConfig,
    prog: &Program,
    spec: &PairSpec,
) -> Result<CheckReport, CheckError> {
    Check { kind: CheckKind::Hw, contract, contract_config: *cfg, hardware: *hw, policy: None, parallel: false }
        .run(prog, spec)
}

/// Is the compiled program secure with respect to contract `c`?
pub fn check_compiler(
    contract: ContractId,
    policy: CompilerPolicy,
    cfg: &ContractConfig,
    prog: &Program,
    spec: &PairSpec,
) -> Result<CheckReport, CheckError> {
    Check {
        kind: CheckKind::Compiler,
        contract,
        contract_config: *cfg,
        hardware: HwConfig::default(),
        policy: Some(policy),
        parallel: false,
    }
    .run(prog, spec)
}

/// Do sources with equal architectural traces compile to programs with equal
/// hardware traces on `hw`?
pub fn check_end_to_end(
    hw: &HwConfig,
    contract: ContractId,
    policy: CompilerPolicy,
    cfg: &ContractConfig,
    prog: &Program,
    spec: &PairSpec,
) -> Result<CheckReport, CheckError> {
    Check { kind: CheckKind::E2e, contract, contract_config: *cfg, hardware: *hw, policy: Some(policy), parallel: false }
        .run(prog, spec)
}
