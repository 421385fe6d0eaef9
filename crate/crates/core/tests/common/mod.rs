//! Seeded generator of small terminating programs.
//!
//! Control flow only moves forward, so every program halts within
//! `code.len()` steps. Programs are emitted as source text and parsed, which
//! keeps the generator independent of the internal representation.

#![allow(dead_code)]

use std::fmt::Write;

use casco::isa::{parse_program, Program, Word};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_INSTRUCTIONS: usize = 30;
pub const MAX_BRANCHES: usize = 4;
pub const DATA_LEN: usize = 48;
const REGS: [&str; 4] = ["r0", "r1", "r2", "r3"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn atom(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.6) {
        REGS.choose(rng).unwrap().to_string()
    } else {
        rng.gen_range(0..16).to_string()
    }
}

fn expr(rng: &mut ChaCha8Rng, depth: u32) -> String {
    if depth == 0 || rng.gen_bool(0.4) {
        return atom(rng);
    }
    match rng.gen_range(0..6) {
        0 => format!("!{}", atom(rng)),
        k => {
            let op = ["+", "-", "*", "=", "<"][k - 1];
            format!("({} {op} {})", expr(rng, depth - 1), expr(rng, depth - 1))
        }
    }
}

/// Addresses are mostly in range: a constant, or a register masked by a
/// comparison, plus a small offset.
fn address(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..4) {
        0 | 1 => rng.gen_range(0..DATA_LEN).to_string(),
        2 => format!("{} + {}", REGS.choose(rng).unwrap(), rng.gen_range(0..16)),
        _ => format!("({} < 8) * 4 + {}", REGS.choose(rng).unwrap(), rng.gen_range(0..40)),
    }
}

/// Source text of a random program with 1..=MAX_INSTRUCTIONS instructions and
/// at most MAX_BRANCHES conditional branches.
pub fn random_source(rng: &mut ChaCha8Rng) -> String {
    // The final `skip` is the shared exit target.
    let n = rng.gen_range(1..MAX_INSTRUCTIONS);
    let mut src = String::from(".data\n");
    for a in 0..DATA_LEN {
        writeln!(src, "{a}: {}", rng.gen_range(0..12)).unwrap();
    }
    let secrets: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..DATA_LEN)).collect();
    for s in secrets {
        writeln!(src, ".secret {s}").unwrap();
    }
    writeln!(src, ".registers {}\n.text", REGS.join(" ")).unwrap();

    let mut body = Vec::with_capacity(n);
    let mut branches = 0;
    for i in 0..n {
        let target = rng.gen_range(i + 1..=n);
        let reg = REGS.choose(rng).unwrap();
        let line = match rng.gen_range(0..12) {
            0 => "skip".to_string(),
            1 | 2 => format!("assign {reg}, {}", expr(rng, 2)),
            3..=5 => format!("load {reg}, {}", address(rng)),
            6 | 7 => format!("store {reg}, {}", address(rng)),
            8 => format!("jmp L{target}"),
            9 | 10 if branches < MAX_BRANCHES => {
                branches += 1;
                format!("beqz {reg}, L{target}")
            }
            11 => "fence".to_string(),
            _ => format!("assign {reg}, {}", expr(rng, 1)),
        };
        body.push(line);
    }
    for (i, line) in body.iter().enumerate() {
        writeln!(src, "L{i}: {line}").unwrap();
    }
    writeln!(src, "L{n}: skip").unwrap();
    src
}

pub fn random_program(rng: &mut ChaCha8Rng) -> Program {
    let src = random_source(rng);
    parse_program(&src).unwrap_or_else(|e| panic!("generated program does not parse: {e}\n{src}"))
}

pub fn random_data(rng: &mut ChaCha8Rng, prog: &Program) -> Program {
    let data: Vec<Word> = (0..prog.data.len()).map(|_| rng.gen_range(0..12)).collect();
    prog.with_data(data).unwrap()
}

pub fn program_from_seed(seed: u64) -> Program {
    random_program(&mut rng(seed))
}
