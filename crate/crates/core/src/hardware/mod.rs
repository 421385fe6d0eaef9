//! Hardware semantics: architectural state plus microarchitectural state,
//! four execution models, and the attacker's view of the cache.
//!
//! Speculation is modeled as in-order execution down the predicted successor
//! of a branch with a checkpoint that is resolved after a bounded window of
//! micro-steps or at a `fence`. All checkpoints on the stack lose one unit of
//! window per micro-step, so an inner checkpoint always expires no later than
//! the one it is nested in, and the stack always resolves innermost first.

mod cache;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::CacheState;

use crate::isa::{branch_successors, exec_instruction, Effect, ExecError, Instruction, Pc, Program, Word, ArchState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HardwareModelId {
    /// In-order, non-speculative.
    #[serde(rename = "hw-seq")]
    HwSeq,
    /// Branch speculation; wrong-path accesses touch the cache.
    #[serde(rename = "hw-spec")]
    HwSpec,
    /// Branch speculation; speculative memory accesses wait for resolution.
    #[serde(rename = "hw-loaddelay")]
    HwLoadDelay,
    /// Branch speculation with speculative taint tracking.
    #[serde(rename = "hw-tt")]
    HwTt,
}

impl HardwareModelId {
    pub const ALL: [HardwareModelId; 4] =
        [HardwareModelId::HwSeq, HardwareModelId::HwSpec, HardwareModelId::HwLoadDelay, HardwareModelId::HwTt];

    pub fn name(self) -> &'static str {
        match self {
            HardwareModelId::HwSeq => "hw-seq",
            HardwareModelId::HwSpec => "hw-spec",
            HardwareModelId::HwLoadDelay => "hw-loaddelay",
            HardwareModelId::HwTt => "hw-tt",
        }
    }

    pub fn speculates(self) -> bool {
        self != HardwareModelId::HwSeq
    }
}

impl fmt::Display for HardwareModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HardwareModelId {
    type Err = HwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HardwareModelId::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            HwError::InvalidConfig(format!(
                "unknown hardware model `{s}` (expected hw-seq, hw-spec, hw-loaddelay or hw-tt)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackerMode {
    #[serde(rename = "cache")]
    Cache,
    #[serde(rename = "cache+pc")]
    CachePc,
}

impl fmt::Display for AttackerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackerMode::Cache => "cache",
            AttackerMode::CachePc => "cache+pc",
        })
    }
}

impl FromStr for AttackerMode {
    type Err = HwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache" => Ok(AttackerMode::Cache),
            "cache+pc" => Ok(AttackerMode::CachePc),
            _ => Err(HwError::InvalidConfig(format!("unknown attacker mode `{s}` (expected cache or cache+pc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwConfig {
    pub model: HardwareModelId,
    pub sets: usize,
    pub ways: usize,
    /// Line size in words.
    pub line: usize,
    pub window: usize,
    pub nesting: usize,
    pub attacker: AttackerMode,
    pub max_micro_steps: usize,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            model: HardwareModelId::HwSpec,
            sets: 4,
            ways: 2,
            line: 4,
            window: 8,
            nesting: 2,
            attacker: AttackerMode::CachePc,
            max_micro_steps: 100_000,
        }
    }
}

impl HwConfig {
    pub fn with_model(model: HardwareModelId) -> Self {
        HwConfig { model, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), HwError> {
        for (name, v) in [("sets", self.sets), ("ways", self.ways), ("line", self.line)] {
            if !v.is_power_of_two() {
                return Err(HwError::InvalidConfig(format!("{name} must be a power of two, got {v}")));
            }
        }
        if self.window == 0 {
            return Err(HwError::InvalidConfig("hardware window must be at least 1".into()));
        }
        if self.max_micro_steps == 0 {
            return Err(HwError::InvalidConfig("max_micro_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HwError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("invalid hardware configuration: {0}")]
    InvalidConfig(String),
}

/// A speculation checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub branch: usize,
    pub predicted: Pc,
    pub actual: Pc,
    pub saved_regs: Vec<Word>,
    pub saved_mem: Vec<Word>,
    pub saved_taint: Vec<bool>,
    /// Micro-steps left before this checkpoint must resolve.
    pub remaining: usize,
    /// Instructions executed under this checkpoint, committed with it.
    executed: Vec<usize>,
    /// Branch outcomes (index, taken) resolved under this checkpoint.
    outcomes: Vec<(usize, bool)>,
}

/// Microarchitectural state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroArchState {
    pub cache: CacheState,
    /// Per-branch 1-bit last outcome (`true` = taken). `None` predicts fall-through.
    pub predictor: Vec<Option<bool>>,
    pub spec_stack: Vec<Checkpoint>,
    /// Tainted registers (hw-tt).
    pub taint: Vec<bool>,
    /// Whether the last micro-step stalled.
    pub stalled: bool,
}

/// What the attacker sees of one microarchitectural state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HwObs {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pc: Option<Pc>,
    pub sets: Vec<Vec<Word>>,
}

impl fmt::Display for HwObs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(pc) = self.pc {
            write!(f, "pc={pc} |")?;
        }
        for (i, set) in self.sets.iter().enumerate() {
            let tags: Vec<String> = set.iter().map(|t| t.to_string()).collect();
            if i > 0 || self.pc.is_some() {
                f.write_str(" ")?;
            }
            write!(f, "s{i}:{{{}}}", tags.join(","))?;
        }
        Ok(())
    }
}

/// Projects a state onto what the attacker observes: cache tags, plus the fetch pc in
/// `cache+pc` mode. Predictor, taint and checkpoints are never exposed.
pub fn attacker_view(micro: &MicroArchState, mode: AttackerMode, fetch_pc: Pc) -> HwObs {
    HwObs {
        pc: match mode {
            AttackerMode::Cache => None,
            AttackerMode::CachePc => Some(fetch_pc),
        },
        sets: micro.cache.sets.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HwTrace {
    pub obs: Vec<HwObs>,
    pub terminated: bool,
}

impl HwTrace {
    /// One line per view: `[k] pc=P | s0:{..} s1:{..} ...`.
    pub fn dump_lines(&self) -> Vec<String> {
        self.obs.iter().enumerate().map(|(k, o)| format!("[{k}] {o}")).collect()
    }
}

/// A checkpoint resolution, recorded with the architectural state right after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub branch: usize,
    /// Stack depth of the resolved checkpoint (1 = outermost).
    pub depth: usize,
    pub mispredicted: bool,
    pub state: ArchState,
}

/// Full result of a hardware run, with instrumentation used by tests.
#[derive(Debug, Clone)]
pub struct HwRun {
    pub trace: HwTrace,
    /// Committed architectural state at the end of the run.
    pub final_state: ArchState,
    /// Committed instruction indices in commit order.
    pub committed: Vec<usize>,
    /// Every `(set, tag)` inserted into the cache, in order.
    pub inserted: Vec<(usize, Word)>,
    pub resolutions: Vec<Resolution>,
    pub micro: MicroArchState,
}

struct Core<'p> {
    prog: &'p Program,
    cfg: HwConfig,
    regs: Vec<Word>,
    mem: Vec<Word>,
    pc: Pc,
    micro: MicroArchState,
    committed: Vec<usize>,
    inserted: Vec<(usize, Word)>,
    resolutions: Vec<Resolution>,
}

impl<'p> Core<'p> {
    fn new(prog: &'p Program, cfg: HwConfig) -> Self {
        let init = prog.initial_state();
        Core {
            prog,
            cfg,
            regs: init.regs,
            mem: init.mem,
            pc: init.pc,
            micro: MicroArchState {
                cache: CacheState::new(cfg.sets, cfg.ways, cfg.line),
                predictor: vec![None; prog.code.len()],
                spec_stack: Vec::new(),
                taint: vec![false; prog.registers.len()],
                stalled: false,
            },
            committed: Vec::new(),
            inserted: Vec::new(),
            resolutions: Vec::new(),
        }
    }

    fn done(&self) -> bool {
        self.pc == Pc::Halted && self.micro.spec_stack.is_empty()
    }

    fn view(&self) -> HwObs {
        attacker_view(&self.micro, self.cfg.attacker, self.pc)
    }

    fn arch_state(&self) -> ArchState {
        ArchState { regs: self.regs.clone(), mem: self.mem.clone(), pc: self.pc }
    }

    /// Consumes one micro-step of window from the `n` oldest checkpoints.
    fn tick(&mut self, n: usize) {
        for cp in self.micro.spec_stack.iter_mut().take(n) {
            cp.remaining = cp.remaining.saturating_sub(1);
        }
    }

    fn touch(&mut self, addr: Word) {
        if let Some(ins) = self.micro.cache.access(addr) {
            self.inserted.push(ins);
        }
    }

    fn record_executed(&mut self, pc: usize) {
        match self.micro.spec_stack.last_mut() {
            Some(cp) => cp.executed.push(pc),
            None => self.committed.push(pc),
        }
    }

    fn record_outcome(&mut self, branch: usize, taken: bool) {
        match self.micro.spec_stack.last_mut() {
            Some(cp) => cp.outcomes.push((branch, taken)),
            None => self.micro.predictor[branch] = Some(taken),
        }
    }

    fn predict(&self, branch: usize) -> Pc {
        let (taken, fall) = branch_successors(self.prog, branch).expect("branch");
        match self.micro.predictor[branch] {
            Some(true) => taken,
            _ => fall,
        }
    }

    fn resolve(&mut self) {
        let depth = self.micro.spec_stack.len();
        let cp = self.micro.spec_stack.pop().expect("resolve with empty stack");
        let (taken_pc, _) = branch_successors(self.prog, cp.branch).expect("branch");
        let mispredicted = cp.predicted != cp.actual;
        if mispredicted {
            self.regs = cp.saved_regs;
            self.mem = cp.saved_mem;
            self.micro.taint = cp.saved_taint;
            self.pc = cp.actual;
        } else {
            for pc in cp.executed {
                self.record_executed(pc);
            }
            for (b, t) in cp.outcomes {
                self.record_outcome(b, t);
            }
        }
        self.record_outcome(cp.branch, cp.actual == taken_pc);
        if self.micro.spec_stack.is_empty() {
            self.micro.taint.iter_mut().for_each(|t| *t = false);
        }
        self.resolutions.push(Resolution { branch: cp.branch, depth, mispredicted, state: self.arch_state() });
    }

    fn tainted(&self, r: crate::isa::Reg) -> bool {
        self.micro.taint[r.0 as usize]
    }

    /// Whether the instruction at `i` must wait for the enclosing speculation to resolve.
    fn must_stall(&self, i: usize, remaining: usize) -> bool {
        let model = self.cfg.model;
        let taint = |r| self.tainted(r);
        match &self.prog.code[i] {
            Instruction::Load { addr, .. } | Instruction::Store { addr, .. } => match model {
                HardwareModelId::HwLoadDelay => true,
                HardwareModelId::HwTt => addr.reads_any(&taint),
                _ => false,
            },
            // A branch needs one micro-step of window after it to be worth predicting.
            Instruction::Beqz { cond, .. } => remaining < 2 || (model == HardwareModelId::HwTt && taint(*cond)),
            _ => false,
        }
    }

    fn step(&mut self) -> Result<(), HwError> {
        self.micro.stalled = false;
        let depth = self.micro.spec_stack.len();
        let Some(top) = self.micro.spec_stack.last() else {
            return self.step_committed();
        };
        let remaining = top.remaining;
        let at = self.pc.index();
        if remaining == 0 || at.is_some_and(|i| self.prog.code[i].is_fence()) {
            self.resolve();
            self.tick(self.micro.spec_stack.len());
            return Ok(());
        }
        let stall = match at {
            None => true,
            Some(i) => self.must_stall(i, remaining),
        };
        if stall {
            self.micro.stalled = true;
            self.tick(depth);
            return Ok(());
        }
        let i = at.expect("pc");
        match exec_instruction(self.prog, &mut self.regs, &mut self.mem, i) {
            // Transient faults are held until the path is resolved.
            Err(_) => {
                self.micro.stalled = true;
                self.tick(depth);
            }
            Ok((next, effect)) => {
                self.apply_effect(effect);
                if self.cfg.model == HardwareModelId::HwTt {
                    self.propagate_taint(i);
                }
                self.record_executed(i);
                self.tick(depth);
                self.after_exec(i, next);
            }
        }
        Ok(())
    }

    fn step_committed(&mut self) -> Result<(), HwError> {
        let i = self.pc.index().expect("step on halted core");
        let (next, effect) = exec_instruction(self.prog, &mut self.regs, &mut self.mem, i)?;
        self.apply_effect(effect);
        self.record_executed(i);
        self.after_exec(i, next);
        Ok(())
    }

    fn apply_effect(&mut self, effect: Effect) {
        match effect {
            Effect::None => {}
            Effect::Load { addr, .. } | Effect::Store { addr } => self.touch(addr),
        }
    }

    fn propagate_taint(&mut self, i: usize) {
        match &self.prog.code[i] {
            Instruction::Assign { dst, expr } => {
                let t = expr.reads_any(&|r| self.tainted(r));
                self.micro.taint[dst.0 as usize] = t;
            }
            Instruction::Load { dst, .. } => self.micro.taint[dst.0 as usize] = true,
            _ => {}
        }
    }

    /// Sets the next pc; at a branch, either speculates or resolves on the spot.
    fn after_exec(&mut self, i: usize, actual: Pc) {
        if !self.prog.code[i].is_branch() {
            self.pc = actual;
            return;
        }
        let depth = self.micro.spec_stack.len();
        if !self.cfg.model.speculates() || depth >= self.cfg.nesting {
            let (taken, _) = branch_successors(self.prog, i).expect("branch");
            self.record_outcome(i, actual == taken);
            self.pc = actual;
            return;
        }
        let remaining = match self.micro.spec_stack.last() {
            Some(top) => top.remaining.min(self.cfg.window),
            None => self.cfg.window,
        };
        let predicted = self.predict(i);
        self.micro.spec_stack.push(Checkpoint {
            branch: i,
            predicted,
            actual,
            saved_regs: self.regs.clone(),
            saved_mem: self.mem.clone(),
            saved_taint: self.micro.taint.clone(),
            remaining,
            executed: Vec::new(),
            outcomes: Vec::new(),
        });
        self.pc = predicted;
    }
}

/// Runs `prog` on the configured hardware model, returning the trace together
/// with committed-state instrumentation.
pub fn simulate(prog: &Program, cfg: &HwConfig) -> Result<HwRun, HwError> {
    cfg.validate()?;
    let mut core = Core::new(prog, *cfg);
    let mut obs = vec![core.view()];
    let mut steps = 0;
    let mut terminated = true;
    while !core.done() {
        if steps >= cfg.max_micro_steps {
            terminated = false;
            break;
        }
        core.step()?;
        steps += 1;
        obs.push(core.view());
    }
    let final_state = core.arch_state();
    Ok(HwRun {
        trace: HwTrace { obs, terminated },
        final_state,
        committed: core.committed,
        inserted: core.inserted,
        resolutions: core.resolutions,
        micro: core.micro,
    })
}

/// The hardware trace of `prog`: one attacker view per micro-step.
pub fn hw_trace(prog: &Program, cfg: &HwConfig) -> Result<HwTrace, HwError> {
    simulate(prog, cfg).map(|run| run.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_program;

    fn prog(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    fn empty_sets(n: usize) -> Vec<Vec<Word>> {
        vec![Vec::new(); n]
    }

    #[test]
    fn hw_seq_skip_has_two_empty_views() {
        let cfg = HwConfig { attacker: AttackerMode::Cache, ..HwConfig::with_model(HardwareModelId::HwSeq) };
        let t = hw_trace(&prog(".text\nskip\n"), &cfg).unwrap();
        let empty = HwObs { pc: None, sets: empty_sets(4) };
        assert_eq!(t.obs, vec![empty.clone(), empty]);
        assert!(t.terminated);
    }

    #[test]
    fn hw_seq_load_fills_set_one_tag_zero() {
        let cfg = HwConfig::with_model(HardwareModelId::HwSeq);
        let run = simulate(&prog(".data\n4: 7\n.registers r1\n.text\nload r1, 4\n"), &cfg).unwrap();
        assert_eq!(run.micro.cache.sets, vec![vec![], vec![0], vec![], vec![]]);
        assert_eq!(run.final_state.regs, vec![7]);
    }

    const GADGET: &str = ".data\n8: 5\n.registers r1 r2\n.text\nbeqz r1, L2\nload r2, 8\nL2: skip\n";

    #[test]
    fn spec_leaks_where_loaddelay_does_not() {
        // r1 = 0 so the branch is taken; the cold predictor guesses fall-through.
        let p = prog(GADGET);
        let spec = simulate(&p, &HwConfig::with_model(HardwareModelId::HwSpec)).unwrap();
        let delay = simulate(&p, &HwConfig::with_model(HardwareModelId::HwLoadDelay)).unwrap();
        assert!(spec.micro.cache.contains(8));
        assert!(!delay.micro.cache.contains(8));
        // Rollback restores the register the wrong path wrote.
        assert_eq!(spec.final_state.regs, vec![0, 0]);
        assert_eq!(spec.resolutions.len(), 1);
        assert!(spec.resolutions[0].mispredicted);
        assert_eq!(spec.committed, vec![0, 2]);
        assert_eq!(spec.micro.predictor[0], Some(true));
    }

    #[test]
    fn hw_spec_gadget_micro_steps() {
        // Hand-run: step 1 branch (push, pc=1); step 2 load 8 (window 8->7);
        // step 3 skip (pc=halt); steps 4..9 stall at halt until the window is 0;
        // step 10 resolves to pc 2; step 11 executes the skip.
        let cfg = HwConfig::with_model(HardwareModelId::HwSpec);
        let t = hw_trace(&prog(GADGET), &cfg).unwrap();
        assert_eq!(t.obs.len(), 12);
        let pcs: Vec<Pc> = t.obs.iter().map(|o| o.pc.unwrap()).collect();
        assert_eq!(pcs[..4], [Pc::At(0), Pc::At(1), Pc::At(2), Pc::Halted]);
        assert_eq!(pcs[10], Pc::At(2));
        assert_eq!(pcs[11], Pc::Halted);
        assert_eq!(t.obs[2].sets[2], vec![0]);
    }

    #[test]
    fn tt_blocks_dependent_load() {
        let p = prog(".data\n8: 1\n32..47: 0\n.registers r1 r2 r3\n.text\nbeqz r1, E\nload r2, 8\nload r3, r2 * 4 + 32\nE: skip\n");
        let run = simulate(&p, &HwConfig::with_model(HardwareModelId::HwTt)).unwrap();
        assert!(run.micro.cache.contains(8));
        assert!(!run.micro.cache.contains(36));
        let spec = simulate(&p, &HwConfig::with_model(HardwareModelId::HwSpec)).unwrap();
        assert!(spec.micro.cache.contains(36));
    }

    #[test]
    fn correct_prediction_commits() {
        // r1 = 1: fall-through is both predicted and actual.
        let p = prog(".data\n0: 1\n8: 3\n.registers r1 r2\n.text\nload r1, 0\nbeqz r1, E\nload r2, 8\nE: skip\n");
        for model in HardwareModelId::ALL {
            let run = simulate(&p, &HwConfig::with_model(model)).unwrap();
            assert_eq!(run.final_state.regs, vec![1, 3], "{model}");
            assert_eq!(run.committed, vec![0, 1, 2, 3], "{model}");
        }
    }

    #[test]
    fn fence_resolves_immediately() {
        let p = prog(".registers r1\n.text\nbeqz r1, L\nfence\nL: fence\nskip\n");
        let t = hw_trace(&p, &HwConfig::with_model(HardwareModelId::HwSpec)).unwrap();
        let pcs: Vec<Pc> = t.obs.iter().map(|o| o.pc.unwrap()).collect();
        // branch -> predicted fence (1) -> resolve to 2 -> fence -> skip -> halt
        assert_eq!(pcs, vec![Pc::At(0), Pc::At(1), Pc::At(2), Pc::At(3), Pc::Halted]);
    }

    #[test]
    fn committed_trap_is_error_speculative_is_not() {
        let p = prog(".data\n0: 0\n.registers r1 r2\n.text\nbeqz r1, E\nload r2, 500\nE: skip\n");
        for model in HardwareModelId::ALL {
            assert!(hw_trace(&p, &HwConfig::with_model(model)).is_ok(), "{model}");
        }
        let p = prog(".data\n0: 0\n.registers r1\n.text\nload r1, 500\n");
        assert!(matches!(
            hw_trace(&p, &HwConfig::with_model(HardwareModelId::HwSpec)),
            Err(HwError::Exec(ExecError::Trap { pc: 0, addr: 500 }))
        ));
    }

    #[test]
    fn budget_exhaustion() {
        let cfg = HwConfig { max_micro_steps: 10, ..HwConfig::with_model(HardwareModelId::HwSeq) };
        let t = hw_trace(&prog(".text\nL: jmp L\n"), &cfg).unwrap();
        assert!(!t.terminated);
        assert_eq!(t.obs.len(), 11);
    }

    #[test]
    fn attacker_view_projection() {
        let mut micro = MicroArchState {
            cache: CacheState::new(4, 2, 4),
            predictor: vec![None],
            spec_stack: Vec::new(),
            taint: Vec::new(),
            stalled: false,
        };
        assert_eq!(attacker_view(&micro, AttackerMode::Cache, Pc::At(0)), HwObs { pc: None, sets: empty_sets(4) });
        micro.cache.access(4);
        let v = attacker_view(&micro, AttackerMode::CachePc, Pc::At(3));
        assert_eq!(v, HwObs { pc: Some(Pc::At(3)), sets: vec![vec![], vec![0], vec![], vec![]] });
        assert_eq!(v.to_string(), "pc=3 | s0:{} s1:{0} s2:{} s3:{}");
        let mut other = micro.clone();
        other.predictor[0] = Some(true);
        assert_eq!(attacker_view(&other, AttackerMode::CachePc, Pc::At(3)), v);
    }

    #[test]
    fn cache_mode_dump_has_no_pc() {
        let cfg = HwConfig { attacker: AttackerMode::Cache, ..HwConfig::with_model(HardwareModelId::HwSeq) };
        let t = hw_trace(&prog(".text\nskip\n"), &cfg).unwrap();
        assert_eq!(t.dump_lines()[0], "[0] s0:{} s1:{} s2:{} s3:{}");
    }

    #[test]
    fn config_validation() {
        assert!(HwConfig { sets: 3, ..Default::default() }.validate().is_err());
        assert!(HwConfig { window: 0, ..Default::default() }.validate().is_err());
        assert!(HwConfig::default().validate().is_ok());
    }
}
