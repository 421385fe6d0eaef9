//! The toy ISA: programs, architectural states and the sequential semantics.

mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_program, ParseError};

/// Machine word. Arithmetic wraps modulo 2^16.
pub type Word = u16;

/// Index into [`Program::registers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Lt,
}

impl BinOp {
    fn apply(self, lhs: Word, rhs: Word) -> Word {
        match self {
            BinOp::Add => lhs.wrapping_add(rhs),
            BinOp::Sub => lhs.wrapping_sub(rhs),
            BinOp::Mul => lhs.wrapping_mul(rhs),
            BinOp::Eq => Word::from(lhs == rhs),
            BinOp::Lt => Word::from(lhs < rhs),
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Eq => "=",
            BinOp::Lt => "<",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Eq | BinOp::Lt => 0,
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul => 2,
        }
    }
}

/// Expressions over registers and word constants. `Not` is logical negation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(Word),
    Reg(Reg),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, regs: &[Word]) -> Word {
        match self {
            Expr::Const(c) => *c,
            Expr::Reg(r) => regs[r.0 as usize],
            Expr::Bin(op, l, r) => op.apply(l.eval(regs), r.eval(regs)),
            Expr::Not(e) => Word::from(e.eval(regs) == 0),
        }
    }

    /// True if any register read by the expression satisfies `pred`.
    pub fn reads_any(&self, pred: &impl Fn(Reg) -> bool) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Reg(r) => pred(*r),
            Expr::Bin(_, l, r) => l.reads_any(pred) || r.reads_any(pred),
            Expr::Not(e) => e.reads_any(pred),
        }
    }

    pub fn registers(&self, out: &mut Vec<Reg>) {
        match self {
            Expr::Const(_) => {}
            Expr::Reg(r) => out.push(*r),
            Expr::Bin(_, l, r) => {
                l.registers(out);
                r.registers(out);
            }
            Expr::Not(e) => e.registers(out),
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, names: &[String], min_prec: u8) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Reg(r) => f.write_str(&names[r.0 as usize]),
            Expr::Not(e) => {
                f.write_str("!")?;
                e.write(f, names, 3)
            }
            Expr::Bin(op, l, r) => {
                let prec = op.precedence();
                let paren = prec < min_prec;
                if paren {
                    f.write_str("(")?;
                }
                // Comparisons do not chain, so both sides bind tighter.
                let (lp, rp) = if prec == 0 { (1, 1) } else { (prec, prec + 1) };
                l.write(f, names, lp)?;
                write!(f, " {} ", op.symbol())?;
                r.write(f, names, rp)?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

/// One ISA instruction. Branch and jump targets are resolved instruction indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    Skip,
    Assign { dst: Reg, expr: Expr },
    Load { dst: Reg, addr: Expr },
    Store { src: Reg, addr: Expr },
    Jmp { target: usize },
    Beqz { cond: Reg, target: usize },
    Fence,
}

impl Instruction {
    pub fn is_branch(&self) -> bool {
        matches!(self, Instruction::Beqz { .. })
    }

    pub fn is_fence(&self) -> bool {
        matches!(self, Instruction::Fence)
    }

    /// Control-flow targets referenced by this instruction.
    pub fn target(&self) -> Option<usize> {
        match self {
            Instruction::Jmp { target } | Instruction::Beqz { target, .. } => Some(*target),
            _ => None,
        }
    }

    pub fn target_mut(&mut self) -> Option<&mut usize> {
        match self {
            Instruction::Jmp { target } | Instruction::Beqz { target, .. } => Some(target),
            _ => None,
        }
    }
}

/// Program counter: an instruction index or the halted state.
///
/// Serialized as the index, or the string `"halt"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "PcRepr", try_from = "PcRepr")]
pub enum Pc {
    At(usize),
    Halted,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PcRepr {
    At(usize),
    Halt(String),
}

impl From<Pc> for PcRepr {
    fn from(pc: Pc) -> Self {
        match pc {
            Pc::At(i) => PcRepr::At(i),
            Pc::Halted => PcRepr::Halt("halt".into()),
        }
    }
}

impl TryFrom<PcRepr> for Pc {
    type Error = String;

    fn try_from(r: PcRepr) -> Result<Self, Self::Error> {
        match r {
            PcRepr::At(i) => Ok(Pc::At(i)),
            PcRepr::Halt(s) if s == "halt" => Ok(Pc::Halted),
            PcRepr::Halt(s) => Err(format!("invalid pc `{s}`")),
        }
    }
}

impl Pc {
    pub fn index(self) -> Option<usize> {
        match self {
            Pc::At(i) => Some(i),
            Pc::Halted => None,
        }
    }

    /// The pc following `index` in a program of `len` instructions.
    pub fn next(index: usize, len: usize) -> Pc {
        Pc::to(index + 1, len)
    }

    pub fn to(index: usize, len: usize) -> Pc {
        if index < len {
            Pc::At(index)
        } else {
            Pc::Halted
        }
    }
}

impl fmt::Display for Pc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pc::At(i) => write!(f, "{i}"),
            Pc::Halted => f.write_str("halt"),
        }
    }
}

/// A program: code, dense data segment, register names and the secret region.
///
/// The address space is `0..data.len()`; every cell up to the highest declared
/// address exists, undeclared cells starting at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub code: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub data: Vec<Word>,
    pub registers: Vec<String>,
    pub secret_region: BTreeSet<Word>,
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("program has no instructions")]
    EmptyCode,
    #[error("instruction {index} targets {target}, outside the code segment")]
    BadTarget { index: usize, target: usize },
    #[error("instruction {index} uses undeclared register index {reg}")]
    BadRegister { index: usize, reg: u8 },
    #[error("secret address {0} lies outside the data segment")]
    SecretOutsideData(Word),
    #[error("entry point {0} is outside the code segment")]
    BadEntry(usize),
    #[error("data segment of {0} cells exceeds the address space")]
    DataTooLarge(usize),
    #[error("data segment has {got} cells, expected {expected}")]
    DataShape { expected: usize, got: usize },
}

impl Program {
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.code.is_empty() {
            return Err(ProgramError::EmptyCode);
        }
        if self.data.len() > 1 << 16 {
            return Err(ProgramError::DataTooLarge(self.data.len()));
        }
        if self.entry >= self.code.len() {
            return Err(ProgramError::BadEntry(self.entry));
        }
        let nregs = self.registers.len();
        let mut regs = Vec::new();
        for (index, instr) in self.code.iter().enumerate() {
            if let Some(target) = instr.target() {
                if target >= self.code.len() {
                    return Err(ProgramError::BadTarget { index, target });
                }
            }
            regs.clear();
            match instr {
                Instruction::Assign { dst, expr } | Instruction::Load { dst, addr: expr } => {
                    regs.push(*dst);
                    expr.registers(&mut regs);
                }
                Instruction::Store { src, addr } => {
                    regs.push(*src);
                    addr.registers(&mut regs);
                }
                Instruction::Beqz { cond, .. } => regs.push(*cond),
                _ => {}
            }
            if let Some(r) = regs.iter().find(|r| r.0 as usize >= nregs) {
                return Err(ProgramError::BadRegister { index, reg: r.0 });
            }
        }
        if let Some(a) = self.secret_region.iter().find(|a| **a as usize >= self.data.len()) {
            return Err(ProgramError::SecretOutsideData(*a));
        }
        Ok(())
    }

    /// True iff `self` and `other` differ at most in their data segments.
    pub fn same_code(&self, other: &Program) -> bool {
        self.code == other.code
            && self.registers == other.registers
            && self.secret_region == other.secret_region
            && self.entry == other.entry
    }

    /// A copy of this program with its data segment replaced.
    pub fn with_data(&self, data: Vec<Word>) -> Result<Program, ProgramError> {
        if data.len() != self.data.len() {
            return Err(ProgramError::DataShape { expected: self.data.len(), got: data.len() });
        }
        Ok(Program { data, ..self.clone() })
    }

    pub fn branch_count(&self) -> usize {
        self.code.iter().filter(|i| i.is_branch()).count()
    }

    pub fn initial_state(&self) -> ArchState {
        ArchState {
            regs: vec![0; self.registers.len()],
            mem: self.data.clone(),
            pc: Pc::At(self.entry),
        }
    }

    pub fn register_name(&self, r: Reg) -> &str {
        &self.registers[r.0 as usize]
    }

    /// Renders an instruction in source syntax.
    pub fn display_instruction<'a>(&'a self, instr: &'a Instruction) -> impl fmt::Display + 'a {
        InstrDisplay { prog: self, instr }
    }

    /// Name of some label bound to `index`, synthesizing one if none exists.
    pub fn label_for(&self, index: usize) -> String {
        self.labels
            .iter()
            .find(|(_, i)| **i == index)
            .map(|(name, _)| name.clone())
            .unwrap_or_else(|| format!("_L{index}"))
    }
}

struct InstrDisplay<'a> {
    prog: &'a Program,
    instr: &'a Instruction,
}

impl fmt::Display for InstrDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = &self.prog.registers;
        let reg = |r: &Reg| &names[r.0 as usize];
        match self.instr {
            Instruction::Skip => f.write_str("skip"),
            Instruction::Fence => f.write_str("fence"),
            Instruction::Assign { dst, expr } => {
                write!(f, "assign {}, ", reg(dst))?;
                expr.write(f, names, 0)
            }
            Instruction::Load { dst, addr } => {
                write!(f, "load {}, ", reg(dst))?;
                addr.write(f, names, 0)
            }
            Instruction::Store { src, addr } => {
                write!(f, "store {}, ", reg(src))?;
                addr.write(f, names, 0)
            }
            Instruction::Jmp { target } => write!(f, "jmp {}", self.prog.label_for(*target)),
            Instruction::Beqz { cond, target } => {
                write!(f, "beqz {}, {}", reg(cond), self.prog.label_for(*target))
            }
        }
    }
}

/// Architectural state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchState {
    pub regs: Vec<Word>,
    pub mem: Vec<Word>,
    pub pc: Pc,
}

/// Architectural observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchObs {
    Pc { pc: usize },
    #[serde(rename = "loadv")]
    LoadV { addr: Word, value: Word },
    Store { addr: Word },
}

impl fmt::Display for ArchObs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchObs::Pc { pc } => write!(f, "pc {pc}"),
            ArchObs::LoadV { addr, value } => write!(f, "loadv {addr} {value}"),
            ArchObs::Store { addr } => write!(f, "store {addr}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchTrace {
    pub obs: Vec<ArchObs>,
    pub final_state: ArchState,
    pub steps: usize,
    pub terminated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ExecError {
    #[error("trap at pc {pc}: address {addr} is outside the data segment")]
    Trap { pc: usize, addr: Word },
    #[error("machine is halted")]
    Halted,
}

/// Memory effect of one executed instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    None,
    Load { addr: Word, value: Word },
    Store { addr: Word },
}

/// Executes the instruction at `pc` over raw register and memory slices.
///
/// This is the single source of instruction semantics; the contract and
/// hardware layers call it for every instruction they commit or speculate.
pub fn exec_instruction(
    prog: &Program,
    regs: &mut [Word],
    mem: &mut [Word],
    pc: usize,
) -> Result<(Pc, Effect), ExecError> {
    let len = prog.code.len();
    let fetch = |addr: &Expr, regs: &[Word]| -> Result<Word, ExecError> {
        let a = addr.eval(regs);
        if (a as usize) < mem.len() {
            Ok(a)
        } else {
            Err(ExecError::Trap { pc, addr: a })
        }
    };
    match &prog.code[pc] {
        Instruction::Skip | Instruction::Fence => Ok((Pc::next(pc, len), Effect::None)),
        Instruction::Assign { dst, expr } => {
            regs[dst.0 as usize] = expr.eval(regs);
            Ok((Pc::next(pc, len), Effect::None))
        }
        Instruction::Load { dst, addr } => {
            let a = fetch(addr, regs)?;
            let v = mem[a as usize];
            regs[dst.0 as usize] = v;
            Ok((Pc::next(pc, len), Effect::Load { addr: a, value: v }))
        }
        Instruction::Store { src, addr } => {
            let a = fetch(addr, regs)?;
            mem[a as usize] = regs[src.0 as usize];
            Ok((Pc::next(pc, len), Effect::Store { addr: a }))
        }
        Instruction::Jmp { target } => Ok((Pc::At(*target), Effect::None)),
        Instruction::Beqz { cond, target } => {
            let next = if regs[cond.0 as usize] == 0 { Pc::At(*target) } else { Pc::next(pc, len) };
            Ok((next, Effect::None))
        }
    }
}

/// The two successors of the branch at `index`: (taken target, fall-through).
pub fn branch_successors(prog: &Program, index: usize) -> Option<(Pc, Pc)> {
    match prog.code.get(index)? {
        Instruction::Beqz { target, .. } => Some((Pc::At(*target), Pc::next(index, prog.code.len()))),
        _ => None,
    }
}

/// One architectural step. Emits `pc` first, then the memory observation.
pub fn arch_step(prog: &Program, state: &ArchState) -> Result<(ArchState, Vec<ArchObs>), ExecError> {
    let mut next = state.clone();
    let mut obs = Vec::with_capacity(2);
    arch_step_in_place(prog, &mut next, &mut obs)?;
    Ok((next, obs))
}

fn arch_step_in_place(prog: &Program, state: &mut ArchState, obs: &mut Vec<ArchObs>) -> Result<(), ExecError> {
    let Pc::At(pc) = state.pc else {
        return Err(ExecError::Halted);
    };
    let (next, effect) = exec_instruction(prog, &mut state.regs, &mut state.mem, pc)?;
    obs.push(ArchObs::Pc { pc });
    match effect {
        Effect::None => {}
        Effect::Load { addr, value } => obs.push(ArchObs::LoadV { addr, value }),
        Effect::Store { addr } => obs.push(ArchObs::Store { addr }),
    }
    state.pc = next;
    Ok(())
}

/// Runs `prog` from its initial state for at most `max_steps` instructions.
pub fn arch_trace(prog: &Program, max_steps: usize) -> Result<ArchTrace, ExecError> {
    let mut state = prog.initial_state();
    let mut obs = Vec::new();
    let mut steps = 0;
    while state.pc != Pc::Halted && steps < max_steps {
        arch_step_in_place(prog, &mut state, &mut obs)?;
        steps += 1;
    }
    let terminated = state.pc == Pc::Halted;
    Ok(ArchTrace { obs, final_state: state, steps, terminated })
}

impl fmt::Display for Program {
    /// Canonical `.casm` text; re-parses to an equal program.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, ".data")?;
        let mut i = 0;
        while i < self.data.len() {
            let v = self.data[i];
            let mut j = i;
            while j + 1 < self.data.len() && self.data[j + 1] == v {
                j += 1;
            }
            if i == j {
                writeln!(f, "  {i}: {v}")?;
            } else {
                writeln!(f, "  {i}..{j}: {v}")?;
            }
            i = j + 1;
        }
        if !self.secret_region.is_empty() {
            let addrs: Vec<String> = self.secret_region.iter().map(|a| a.to_string()).collect();
            writeln!(f, ".secret {}", addrs.join(" "))?;
        }
        if !self.registers.is_empty() {
            writeln!(f, ".registers {}", self.registers.join(" "))?;
        }
        if self.entry != 0 {
            writeln!(f, ".entry {}", self.entry)?;
        }
        writeln!(f, ".text")?;
        let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (name, idx) in &self.labels {
            by_index.entry(*idx).or_default().push(name);
        }
        // Targets with no named label get a synthesized one.
        for instr in &self.code {
            if let Some(t) = instr.target() {
                by_index.entry(t).or_default();
            }
        }
        for (idx, instr) in self.code.iter().enumerate() {
            let mut prefix = String::new();
            match by_index.get(&idx) {
                Some(names) if names.is_empty() => prefix = format!("_L{idx}: "),
                Some(names) => {
                    for n in names {
                        prefix.push_str(n);
                        prefix.push_str(": ");
                    }
                }
                None => {}
            }
            writeln!(f, "{prefix}{}", self.display_instruction(instr))?;
        }
        Ok(())
    }
}
