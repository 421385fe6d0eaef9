use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use casco::checker::{Check, CheckKind, Domain, PairSpec, Verdict};
use casco::compiler::{compile_with_report, CompilerPolicy};
use casco::config::Config;
use casco::contracts::{contract_trace, ContractId};
use casco::corpus::{self, ENTRIES};
use casco::hardware::{hw_trace, AttackerMode, HardwareModelId};
use casco::isa::{arch_trace, parse_program, Program, Word};

/// Usage, parse, I/O and execution errors.
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "casco", version, about = "Contract-aware secure compilation workbench")]
struct Cli {
    /// TOML configuration file (see corpus/defaults.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for sampled pair generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trace of a program under one semantics.
    Trace(TraceArgs),
    /// Insert speculation barriers for a contract.
    Compile(CompileArgs),
    /// Run a relational check.
    Check {
        #[command(subcommand)]
        kind: CheckCommand,
    },
    /// Bundled example programs.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Semantics {
    /// Architectural (sequential) trace.
    #[arg(long)]
    arch: bool,
    /// Contract trace.
    #[arg(long, value_name = "ID")]
    contract: Option<ContractId>,
    /// Hardware trace of the given model.
    #[arg(long, value_name = "MODEL")]
    hw: Option<HardwareModelId>,
}

#[derive(Args)]
struct TraceArgs {
    /// Program file, or the name of a bundled program.
    file: String,
    #[command(flatten)]
    semantics: Semantics,
    #[command(flatten)]
    contract: ContractFlags,
    #[command(flatten)]
    hardware: HwFlags,
}

#[derive(Args)]
struct CompileArgs {
    file: String,
    #[arg(long)]
    contract: ContractId,
    #[arg(long)]
    policy: CompilerPolicy,
    /// Output program; printed to stdout if omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the JSON compile report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: ContractFlags,
}

#[derive(Args, Default)]
struct ContractFlags {
    /// Contract speculation window.
    #[arg(long)]
    window: Option<usize>,
    /// Contract nesting depth.
    #[arg(long)]
    nesting: Option<usize>,
    /// Sequential step budget.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Default)]
struct HwFlags {
    #[arg(long)]
    hw_window: Option<usize>,
    #[arg(long)]
    hw_nesting: Option<usize>,
    #[arg(long)]
    sets: Option<usize>,
    #[arg(long)]
    ways: Option<usize>,
    /// Cache line size in words.
    #[arg(long)]
    line: Option<usize>,
    /// `cache` or `cache+pc`.
    #[arg(long)]
    attacker: Option<AttackerMode>,
    #[arg(long)]
    max_micro_steps: Option<usize>,
}

#[derive(Args)]
struct PairFlags {
    /// Secret value range, e.g. 0..3.
    #[arg(long)]
    domain: Option<Domain>,
    /// Sample N pairs instead of enumerating all.
    #[arg(long, value_name = "N")]
    sampled: Option<usize>,
    /// Extra public assignment to sweep, e.g. `1=2,3=0`. Repeatable.
    #[arg(long, value_name = "ADDR=VAL,..", value_parser = parse_variant)]
    public: Vec<Vec<(Word, Word)>>,
    /// Evaluate executions on all cores.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CheckArgs {
    file: String,
    #[arg(long)]
    contract: ContractId,
    #[command(flatten)]
    pairs: PairFlags,
    #[command(flatten)]
    contract_flags: ContractFlags,
    #[command(flatten)]
    hardware: HwFlags,
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Hardware satisfies a contract.
    Hw {
        #[arg(long, value_name = "MODEL")]
        hw: HardwareModelId,
        #[command(flatten)]
        args: CheckArgs,
    },
    /// Compiled programs are secure for a contract.
    Compiler {
        #[arg(long)]
        policy: CompilerPolicy,
        #[command(flatten)]
        args: CheckArgs,
    },
    /// Compiled programs run constant-time on hardware.
    E2e {
        #[arg(long, value_name = "MODEL")]
        hw: HardwareModelId,
        #[arg(long)]
        policy: CompilerPolicy,
        #[command(flatten)]
        args: CheckArgs,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// List bundled programs.
    List,
    /// Re-run every expected verdict.
    Verify {
        #[arg(long)]
        parallel: bool,
        /// Print every cell, not only mismatches.
        #[arg(long)]
        verbose: bool,
    },
    /// Print a bundled program.
    Show { name: String },
}

fn parse_variant(s: &str) -> Result<Vec<(Word, Word)>, String> {
    s.split(',')
        .map(|kv| {
            let (a, v) = kv.split_once('=').ok_or_else(|| format!("expected ADDR=VAL, got `{kv}`"))?;
            let num = |t: &str| t.trim().parse::<Word>().map_err(|e| format!("`{t}`: {e}"));
            Ok((num(a)?, num(v)?))
        })
        .collect()
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.pairs.seed = seed;
    }
    match cli.command {
        Command::Trace(args) => trace(&config, cli.json, args),
        Command::Compile(args) => compile(&config, cli.json, args),
        Command::Check { kind } => check(config, cli.json, kind),
        Command::Corpus { command } => corpus_cmd(&config, cli.json, command),
    }
}

/// Reads a program from `file`, falling back to the bundled corpus by name.
fn load_program(file: &str) -> Result<Program, Failure> {
    let path = Path::new(file);
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => match corpus::entry(path.file_name().and_then(|n| n.to_str()).unwrap_or(file)) {
            Some(entry) if !path.exists() => entry.source.to_string(),
            _ => return Err(Failure(format!("cannot read {file}: {e}"))),
        },
    };
    parse_program(&text).map_err(|e| Failure(format!("{file}: {e}")))
}

impl ContractFlags {
    fn apply(&self, config: &mut Config) {
        let c = &mut config.contract;
        c.window = self.window.unwrap_or(c.window);
        c.nesting = self.nesting.unwrap_or(c.nesting);
        c.max_steps = self.max_steps.unwrap_or(c.max_steps);
    }
}

impl HwFlags {
    fn apply(&self, config: &mut Config) {
        let h = &mut config.hardware;
        h.window = self.hw_window.unwrap_or(h.window);
        h.nesting = self.hw_nesting.unwrap_or(h.nesting);
        h.sets = self.sets.unwrap_or(h.sets);
        h.ways = self.ways.unwrap_or(h.ways);
        h.line = self.line.unwrap_or(h.line);
        h.attacker = self.attacker.unwrap_or(h.attacker);
        h.max_micro_steps = self.max_micro_steps.unwrap_or(h.max_micro_steps);
    }
}

/// A closed stdout (e.g. piped into `head`) ends output quietly.
fn quiet_pipe(r: std::io::Result<()>) -> Result<(), Failure> {
    match r {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    quiet_pipe(writeln!(std::io::stdout().lock(), "{text}"))
}

fn print_lines(lines: impl IntoIterator<Item = String>) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    quiet_pipe(lines.into_iter().try_for_each(|line| writeln!(out, "{line}")))
}

/// Exit code for a trace: 0 when it ran to completion, 2 when a budget cut it off.
fn budget_code(terminated: bool) -> u8 {
    if terminated {
        0
    } else {
        eprintln!("warning: step budget exhausted before the program halted");
        2
    }
}

#[derive(Serialize)]
struct HwRecord<'a> {
    step: usize,
    #[serde(flatten)]
    obs: &'a casco::hardware::HwObs,
}

fn trace(config: &Config, json: bool, args: TraceArgs) -> Outcome {
    let mut config = *config;
    args.contract.apply(&mut config);
    args.hardware.apply(&mut config);
    let prog = load_program(&args.file)?;
    let s = &args.semantics;
    if let Some(c) = s.contract {
        let t = contract_trace(c, &prog, &config.contract)?;
        if json { print_json(&t.labels)? } else { print_lines(t.labels.iter().map(ToString::to_string))? }
        Ok(budget_code(t.terminated))
    } else if let Some(model) = s.hw {
        config.hardware.model = model;
        let t = hw_trace(&prog, &config.hardware)?;
        if json {
            let records: Vec<HwRecord> = t.obs.iter().enumerate().map(|(step, obs)| HwRecord { step, obs }).collect();
            print_json(&records)?
        } else {
            print_lines(t.dump_lines())?
        }
        Ok(budget_code(t.terminated))
    } else {
        let t = arch_trace(&prog, config.contract.max_steps)?;
        if json { print_json(&t.obs)? } else { print_lines(t.obs.iter().map(ToString::to_string))? }
        Ok(budget_code(t.terminated))
    }
}

fn compile(config: &Config, json: bool, args: CompileArgs) -> Outcome {
    let mut config = *config;
    args.flags.apply(&mut config);
    config.contract.validate()?;
    let prog = load_program(&args.file)?;
    let (out, report) = compile_with_report(args.contract, args.policy, &prog, &config.contract);
    let text = out.to_string();
    let summary = format!(
        "fences: {} -> {} (+{})",
        report.fences_before,
        report.fences_after,
        report.fences_after - report.fences_before
    );
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))?;
    }
    match &args.output {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))?;
            if json { print_json(&report)? } else { println!("{summary}") }
        }
        None => {
            print!("{text}");
            eprintln!("{summary}");
        }
    }
    Ok(0)
}

fn check(mut config: Config, json: bool, command: CheckCommand) -> Outcome {
    let (kind, model, policy, args) = match command {
        CheckCommand::Hw { hw, args } => (CheckKind::Hw, Some(hw), None, args),
        CheckCommand::Compiler { policy, args } => (CheckKind::Compiler, None, Some(policy), args),
        CheckCommand::E2e { hw, policy, args } => (CheckKind::E2e, Some(hw), Some(policy), args),
    };
    args.contract_flags.apply(&mut config);
    args.hardware.apply(&mut config);
    if let Some(m) = model {
        config.hardware.model = m;
    }
    let pairs = &args.pairs;
    if let Some(d) = pairs.domain {
        config.pairs.domain = d;
    }
    if pairs.sampled.is_some() {
        config.pairs.samples = pairs.sampled;
    }
    let spec = PairSpec {
        public_variants: pairs.public.iter().map(|v| v.iter().copied().collect()).collect(),
        ..config.pairs.to_spec()
    };
    let prog = load_program(&args.file)?;
    let check = Check {
        kind,
        contract: args.contract,
        contract_config: config.contract,
        hardware: config.hardware,
        policy,
        parallel: pairs.parallel,
    };
    let report = check.run(&prog, &spec)?;
    if json {
        print_json(&report)?;
    } else {
        print!("{report}");
        if report.verdict == Verdict::Pass {
            println!("(no counterexample within the tested pairs; this is not a proof)");
        }
    }
    eprintln!("elapsed: {:.1} ms", report.elapsed.as_secs_f64() * 1e3);
    Ok(report.verdict.exit_code() as u8)
}

#[derive(Serialize)]
struct ListEntry {
    name: &'static str,
    file: &'static str,
    secret_cells: usize,
    instructions: usize,
    note: String,
}

fn corpus_cmd(config: &Config, json: bool, command: CorpusCommand) -> Outcome {
    match command {
        CorpusCommand::List => {
            let entries: Vec<ListEntry> = ENTRIES
                .iter()
                .map(|e| {
                    let p = e.program();
                    ListEntry {
                        name: e.name,
                        file: e.file,
                        secret_cells: p.secret_region.len(),
                        instructions: p.code.len(),
                        note: e.note(),
                    }
                })
                .collect();
            if json {
                print_json(&entries)?;
            } else {
                for e in entries {
                    println!("{:<20} {:>2} instructions, {} secret cells", e.file, e.instructions, e.secret_cells);
                    println!("    {}", e.note);
                }
            }
            Ok(0)
        }
        CorpusCommand::Show { name } => {
            let e = corpus::entry(&name).ok_or_else(|| Failure(format!("no bundled program `{name}`")))?;
            print!("{}", e.source);
            Ok(0)
        }
        CorpusCommand::Verify { parallel, verbose } => {
            let outcomes = corpus::verify(config, parallel)?;
            let bad = outcomes.iter().filter(|o| !o.ok()).count();
            if json {
                print_json(&outcomes)?;
            } else {
                for o in outcomes.iter().filter(|o| verbose || !o.ok()) {
                    let mark = if o.ok() { "ok  " } else { "FAIL" };
                    println!("{mark} {:<16} {:<36} expected {:<12} got {}", o.program, o.cell, o.expected, o.actual);
                }
                println!("{} of {} expectations reproduced", outcomes.len() - bad, outcomes.len());
            }
            Ok(if bad == 0 { 0 } else { 1 })
        }
    }
}
