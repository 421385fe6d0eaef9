//! Contract-aware fence insertion.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{ContractConfig, ContractId};
use crate::isa::{Instruction, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompilerPolicy {
    /// No transformation.
    Identity,
    /// A fence at both successors of every branch.
    Baseline,
    /// Fences only where the leak analysis flags a successor.
    Optimized,
}

impl CompilerPolicy {
    pub const ALL: [CompilerPolicy; 3] = [CompilerPolicy::Identity, CompilerPolicy::Baseline, CompilerPolicy::Optimized];

    pub fn name(self) -> &'static str {
        match self {
            CompilerPolicy::Identity => "identity",
            CompilerPolicy::Baseline => "baseline",
            CompilerPolicy::Optimized => "optimized",
        }
    }
}

impl fmt::Display for CompilerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy `{0}` (expected identity, baseline or optimized)")]
pub struct UnknownPolicy(pub String);

impl FromStr for CompilerPolicy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CompilerPolicy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessorKind {
    Taken,
    FallThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakReason {
    /// A load or store whose address may depend on speculatively loaded data.
    TaintedAddress,
    /// A branch whose condition may depend on speculatively loaded data.
    TaintedCondition,
}

/// A branch successor that needs a fence, with the instruction that justifies it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakFlag {
    pub branch: usize,
    pub successor: SuccessorKind,
    /// Index of the successor's first instruction (the code length for a
    /// fall-through off the end of the program).
    pub site: usize,
    pub witness: usize,
    pub reason: LeakReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub flags: Vec<LeakFlag>,
}

impl LeakReport {
    pub fn sites(&self) -> BTreeSet<usize> {
        self.flags.iter().map(|f| f.site).collect()
    }
}

/// Successor sites of every branch, each tagged with its kind.
pub fn branch_sites(prog: &Program) -> Vec<(usize, SuccessorKind, usize)> {
    let mut out = Vec::new();
    for (i, instr) in prog.code.iter().enumerate() {
        if let Instruction::Beqz { target, .. } = instr {
            out.push((i, SuccessorKind::FallThrough, i + 1));
            out.push((i, SuccessorKind::Taken, *target));
        }
    }
    out
}

/// Walks every path from `start` for `budget` instructions, through both
/// successors of any branch met, with registers initially untainted and every
/// load result tainted. Returns the first instruction that would expose tainted
/// data under `contract`.
fn walk(prog: &Program, start: usize, budget: usize, contract: ContractId) -> Option<(usize, LeakReason)> {
    let len = prog.code.len();
    let mut seen: HashSet<(usize, usize, Vec<bool>)> = HashSet::new();
    let mut work = vec![(start, budget, vec![false; prog.registers.len()])];
    while let Some((pc, left, taint)) = work.pop() {
        if left == 0 || pc >= len || !seen.insert((pc, left, taint.clone())) {
            continue;
        }
        let tainted = |r: crate::isa::Reg| taint[r.0 as usize];
        let mut next = taint.clone();
        match &prog.code[pc] {
            Instruction::Fence => continue,
            Instruction::Skip => {}
            Instruction::Assign { dst, expr } => next[dst.0 as usize] = expr.reads_any(&tainted),
            Instruction::Load { dst, addr } => {
                if contract == ContractId::SpecCt && addr.reads_any(&tainted) {
                    return Some((pc, LeakReason::TaintedAddress));
                }
                next[dst.0 as usize] = true;
            }
            Instruction::Store { addr, .. } => {
                if contract == ContractId::SpecCt && addr.reads_any(&tainted) {
                    return Some((pc, LeakReason::TaintedAddress));
                }
            }
            Instruction::Jmp { target } => {
                work.push((*target, left - 1, next));
                continue;
            }
            Instruction::Beqz { cond, target } => {
                if tainted(*cond) {
                    return Some((pc, LeakReason::TaintedCondition));
                }
                work.push((*target, left - 1, next.clone()));
            }
        }
        work.push((pc + 1, left - 1, next));
    }
    None
}

/// Flags the branch successors from which a speculative exploration could
/// expose data loaded during that exploration.
///
/// spec-ct exposes speculative addresses and control flow; ct-pc-spec only
/// speculative control flow; seq-ct and arch-seq expose nothing speculative.
pub fn speculative_leak_analysis(prog: &Program, cfg: &ContractConfig, contract: ContractId) -> LeakReport {
    let mut report = LeakReport::default();
    if !contract.is_speculative() || cfg.nesting == 0 {
        return report;
    }
    for (branch, successor, site) in branch_sites(prog) {
        if let Some((witness, reason)) = walk(prog, site, cfg.window, contract) {
            report.flags.push(LeakFlag { branch, successor, site, witness, reason });
        }
    }
    report
}

pub fn fence_count(prog: &Program) -> usize {
    prog.code.iter().filter(|i| i.is_fence()).count()
}

/// Inserts a fence in front of each site, ahead of any label bound there, so
/// every jump to the site executes the fence. Sites already holding a fence
/// are skipped.
pub fn insert_fences(prog: &Program, sites: &BTreeSet<usize>) -> Program {
    let len = prog.code.len();
    let sites: BTreeSet<usize> =
        sites.iter().copied().filter(|&s| s <= len && !prog.code.get(s).is_some_and(Instruction::is_fence)).collect();
    if sites.is_empty() {
        return prog.clone();
    }
    // Position of the fence at a site, or of the instruction itself elsewhere.
    let remap = |k: usize| k + sites.range(..k).count();
    let mut code = Vec::with_capacity(len + sites.len());
    for k in 0..=len {
        if sites.contains(&k) {
            code.push(Instruction::Fence);
        }
        if let Some(instr) = prog.code.get(k) {
            let mut instr = instr.clone();
            if let Some(t) = instr.target_mut() {
                *t = remap(*t);
            }
            code.push(instr);
        }
    }
    Program {
        code,
        labels: prog.labels.iter().map(|(n, i)| (n.clone(), remap(*i))).collect(),
        entry: remap(prog.entry),
        ..prog.clone()
    }
}

/// A fence placed by the compiler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertedFence {
    pub branch: usize,
    pub successor: SuccessorKind,
    /// Site index in the source program.
    pub site: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub justification: Option<LeakFlag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileReport {
    pub contract: ContractId,
    pub policy: CompilerPolicy,
    pub fences_before: usize,
    pub fences_after: usize,
    pub inserted: Vec<InsertedFence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis: Option<LeakReport>,
}

/// Compiles `prog` for `contract`, returning the target program and a report of
/// what was inserted and why.
pub fn compile_with_report(
    contract: ContractId,
    policy: CompilerPolicy,
    prog: &Program,
    cfg: &ContractConfig,
) -> (Program, CompileReport) {
    let all_sites = branch_sites(prog);
    type Site = (usize, SuccessorKind, usize, Option<LeakFlag>);
    let (chosen, analysis): (Vec<Site>, Option<LeakReport>) =
        match (contract, policy) {
            (_, CompilerPolicy::Identity) | (ContractId::ArchSeq, _) | (ContractId::CtPcSpec, CompilerPolicy::Baseline) => {
                (Vec::new(), None)
            }
            (ContractId::SpecCt | ContractId::SeqCt, CompilerPolicy::Baseline) => {
                (all_sites.iter().map(|&(b, k, s)| (b, k, s, None)).collect(), None)
            }
            (_, CompilerPolicy::Optimized) => {
                let report = speculative_leak_analysis(prog, cfg, contract);
                let chosen = report.flags.iter().map(|f| (f.branch, f.successor, f.site, Some(f.clone()))).collect();
                (chosen, Some(report))
            }
        };
    let len = prog.code.len();
    let needs_fence = |s: usize| !prog.code.get(s).is_some_and(Instruction::is_fence) && s <= len;
    let mut placed = BTreeSet::new();
    let mut inserted = Vec::new();
    for (branch, successor, site, justification) in chosen {
        if needs_fence(site) {
            placed.insert(site);
            inserted.push(InsertedFence { branch, successor, site, justification });
        }
    }
    let out = insert_fences(prog, &placed);
    let report = CompileReport {
        contract,
        policy,
        fences_before: fence_count(prog),
        fences_after: fence_count(&out),
        inserted,
        analysis,
    };
    (out, report)
}

/// The compiled program.
pub fn compile(contract: ContractId, policy: CompilerPolicy, prog: &Program, cfg: &ContractConfig) -> Program {
    compile_with_report(contract, policy, prog, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{arch_trace, parse_program};

    fn prog(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    const GADGET: &str = "\
.data
0: 4
1: 4
4..7: 1
8: 2
32..47: 0
.secret 8
.registers x size c v
.text
      load x, 1
      load size, 0
      assign c, x < size
      beqz c, Lend
      load v, x + 4
      load v, v * 4 + 32
Lend: skip
";

    #[test]
    fn baseline_without_branches_is_identity() {
        let p = prog(".data\n0: 1\n.registers a\n.text\nload a, 0\nassign a, a + 1\n");
        assert_eq!(compile(ContractId::SpecCt, CompilerPolicy::Baseline, &p, &Default::default()), p);
    }

    #[test]
    fn baseline_fences_both_successors() {
        let p = prog(GADGET);
        let (out, report) = compile_with_report(ContractId::SpecCt, CompilerPolicy::Baseline, &p, &Default::default());
        assert_eq!(fence_count(&out), 2);
        assert_eq!(report.inserted.len(), 2);
        // The branch now sits at 3, its fall-through fence at 4, and Lend binds the second fence.
        assert_eq!(out.code[3], Instruction::Beqz { cond: crate::isa::Reg(2), target: 7 });
        assert!(out.code[4].is_fence() && out.code[7].is_fence());
        assert_eq!(out.labels["Lend"], 7);
    }

    #[test]
    fn contracts_with_hardware_protection_get_no_baseline_fences() {
        let p = prog(GADGET);
        for policy in CompilerPolicy::ALL {
            assert_eq!(compile(ContractId::ArchSeq, policy, &p, &Default::default()), p);
        }
        assert_eq!(compile(ContractId::CtPcSpec, CompilerPolicy::Baseline, &p, &Default::default()), p);
    }

    #[test]
    fn analysis_flags_double_indexed_load() {
        let p = prog(GADGET);
        let r = speculative_leak_analysis(&p, &Default::default(), ContractId::SpecCt);
        assert_eq!(
            r.flags,
            vec![LeakFlag {
                branch: 3,
                successor: SuccessorKind::FallThrough,
                site: 4,
                witness: 5,
                reason: LeakReason::TaintedAddress
            }]
        );
        assert!(speculative_leak_analysis(&p, &Default::default(), ContractId::CtPcSpec).flags.is_empty());
        assert!(speculative_leak_analysis(&p, &Default::default(), ContractId::SeqCt).flags.is_empty());
    }

    #[test]
    fn register_only_successors_not_flagged() {
        let p = prog(".data\n0: 1\n.registers a b\n.text\nload a, 0\nbeqz a, L\nassign b, a * 3\nL: assign b, b + a\n");
        assert!(speculative_leak_analysis(&p, &Default::default(), ContractId::SpecCt).flags.is_empty());
    }

    #[test]
    fn ct_pc_spec_flags_tainted_speculative_branch() {
        let p = prog(".data\n0..3: 0\n.registers a b\n.text\nbeqz a, L\nload b, 2\nbeqz b, L\nskip\nL: skip\n");
        let r = speculative_leak_analysis(&p, &Default::default(), ContractId::CtPcSpec);
        assert_eq!(r.flags.len(), 1);
        assert_eq!(r.flags[0].reason, LeakReason::TaintedCondition);
        assert_eq!(r.flags[0].witness, 2);
        let out = compile(ContractId::CtPcSpec, CompilerPolicy::Optimized, &p, &Default::default());
        assert_eq!(fence_count(&out), 1);
    }

    #[test]
    fn fence_count_arithmetic() {
        let p = prog(GADGET);
        assert_eq!(fence_count(&p), 0);
        assert_eq!(fence_count(&compile(ContractId::SpecCt, CompilerPolicy::Identity, &p, &Default::default())), 0);
        let once = compile(ContractId::SpecCt, CompilerPolicy::Baseline, &p, &Default::default());
        assert_eq!(fence_count(&once), 2);
        let twice = compile(ContractId::SpecCt, CompilerPolicy::Baseline, &once, &Default::default());
        assert_eq!(twice, once);
    }

    #[test]
    fn fall_through_off_the_end_gets_appended_fence() {
        let p = prog(".registers a\n.text\nL: skip\nbeqz a, L\n");
        let out = compile(ContractId::SpecCt, CompilerPolicy::Baseline, &p, &Default::default());
        assert_eq!(out.code, vec![Instruction::Fence, Instruction::Skip, Instruction::Beqz { cond: crate::isa::Reg(0), target: 0 }, Instruction::Fence]);
        assert_eq!(out.labels["L"], 0);
        let t = arch_trace(&out, 100).unwrap();
        assert!(!t.terminated); // a = 0 loops forever, same as the source
    }

    #[test]
    fn policy_names() {
        for p in CompilerPolicy::ALL {
            assert_eq!(p.name().parse::<CompilerPolicy>().unwrap(), p);
        }
    }
}
