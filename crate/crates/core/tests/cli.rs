use std::fs;
use std::process::{Command, Output};

use casco::checker::{CheckReport, Verdict};
use casco::compiler::{compile, fence_count, CompileReport, CompilerPolicy};
use casco::contracts::{ContractId, ContractLabel};
use casco::isa::{parse_program, ArchObs};

fn casco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casco")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn arch_trace_of_skip() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("skip.casm");
    fs::write(&f, ".text\nskip\n").unwrap();
    let o = casco(&["trace", f.to_str().unwrap(), "--arch"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "pc 0\n");
}

#[test]
fn spec_ct_trace_has_one_span_per_executed_branch() {
    let text = stdout(&casco(&["trace", "sp1.casm", "--contract", "spec-ct"]));
    let lines: Vec<&str> = text.lines().collect();
    let starts = lines.iter().filter(|l| l.starts_with("start ")).count();
    let rollbacks = lines.iter().filter(|l| l.starts_with("rollback ")).count();
    let branches = lines.iter().take_while(|l| !l.starts_with("start")).filter(|l| **l == "pc 3").count();
    assert_eq!((starts, rollbacks, branches), (1, 1, 1));
    assert!(lines.contains(&"load 8"), "the speculative secret access is exposed");

    let text = stdout(&casco(&["trace", "sp1-trained.casm", "--contract", "spec-ct", "--nesting", "1"]));
    let seq = stdout(&casco(&["trace", "sp1-trained.casm", "--contract", "seq-ct"]));
    let branch_pcs = ["pc 3", "pc 6"];
    let executed = seq.lines().filter(|l| branch_pcs.contains(l)).count();
    assert_eq!(text.lines().filter(|l| l.starts_with("start ")).count(), executed);
    assert_eq!(text.lines().filter(|l| l.starts_with("rollback ")).count(), executed);
}

#[test]
fn cache_only_attacker_sees_no_pc() {
    let o = casco(&["trace", "sp1.casm", "--hw", "hw-seq", "--attacker", "cache"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().all(|l| !l.contains("pc=")));
    assert!(text.starts_with("[0] s0:{} s1:{} s2:{} s3:{}\n"));
    let with_pc = stdout(&casco(&["trace", "sp1.casm", "--hw", "hw-seq"]));
    assert!(with_pc.lines().all(|l| l.contains("pc=")));
    assert!(with_pc.trim_end().ends_with('}'));
    assert!(with_pc.lines().last().unwrap().contains("pc=halt"));
}

#[test]
fn json_traces_round_trip() {
    let arch: Vec<ArchObs> = serde_json::from_str(&stdout(&casco(&["--json", "trace", "sp1", "--arch"]))).unwrap();
    let text = stdout(&casco(&["trace", "sp1", "--arch"]));
    assert_eq!(arch.iter().map(|o| format!("{o}\n")).collect::<String>(), text);

    let labels: Vec<ContractLabel> =
        serde_json::from_str(&stdout(&casco(&["--json", "trace", "sp1", "--contract", "spec-ct"]))).unwrap();
    let text = stdout(&casco(&["trace", "sp1", "--contract", "spec-ct"]));
    assert_eq!(labels.iter().map(|o| format!("{o}\n")).collect::<String>(), text);

    let hw: serde_json::Value = serde_json::from_str(&stdout(&casco(&["--json", "trace", "sp1", "--hw", "hw-spec"]))).unwrap();
    let steps = hw.as_array().unwrap();
    assert_eq!(steps[0]["step"], 0);
    assert_eq!(steps[0]["pc"], 0);
    assert_eq!(steps.last().unwrap()["pc"], "halt");
}

#[test]
fn check_exit_codes() {
    let o = casco(&["check", "compiler", "sp1.casm", "--contract", "spec-ct", "--policy", "identity", "--domain", "0..3"]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    assert!(text.contains("verdict: fail"));
    assert!(text.contains("first divergence at observation"));

    let o = casco(&["check", "e2e", "sp1.casm", "--contract", "ct-pc-spec", "--policy", "identity", "--hw", "hw-loaddelay"]);
    assert_eq!(code(&o), 0);
    let o = casco(&["check", "hw", "empty-secret.casm", "--contract", "seq-ct", "--hw", "hw-seq"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("verdict: vacuous"));
}

#[test]
fn window_discipline_is_a_usage_error() {
    let o = casco(&["check", "hw", "sp1.casm", "--contract", "spec-ct", "--hw", "hw-spec", "--window", "4"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("must cover the hardware"));
}

#[test]
fn usage_and_parse_errors_exit_3() {
    assert_eq!(code(&casco(&["trace", "sp1.casm"])), 3);
    assert_eq!(code(&casco(&["trace", "sp1.casm", "--contract", "nope"])), 3);
    assert_eq!(code(&casco(&["trace", "/nonexistent/x.casm", "--arch"])), 3);
    assert_eq!(code(&casco(&["check", "compiler", "sp1", "--contract", "spec-ct"])), 3);
    assert_eq!(code(&casco(&["check", "hw", "sp1", "--contract", "seq-ct", "--hw", "hw-seq", "--domain", "0..70000"])), 3);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.casm");
    fs::write(&f, ".text\njmp missing\n").unwrap();
    let o = casco(&["trace", f.to_str().unwrap(), "--arch"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unresolved label"));
    assert_eq!(code(&casco(&["--help"])), 0);
}

#[test]
fn compile_writes_a_reparseable_program() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.casm");
    let report = dir.path().join("report.json");
    let o = casco(&[
        "compile", "sp1.casm", "--contract", "spec-ct", "--policy", "baseline",
        "-o", out.to_str().unwrap(), "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "fences: 0 -> 2 (+2)\n");
    let compiled = parse_program(&fs::read_to_string(&out).unwrap()).unwrap();
    let sp1 = casco::corpus::entry("sp1").unwrap().program();
    let expected = compile(ContractId::SpecCt, CompilerPolicy::Baseline, &sp1, &Default::default());
    assert!(compiled.same_code(&expected));
    assert_eq!(compiled.data, expected.data);
    assert_eq!(fence_count(&compiled), 2);
    let r: CompileReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.inserted.len(), 2);

    // Compiling the output again adds nothing.
    let again = dir.path().join("again.casm");
    let o = casco(&["compile", out.to_str().unwrap(), "--contract", "spec-ct", "--policy", "baseline", "-o", again.to_str().unwrap()]);
    assert_eq!(stdout(&o), "fences: 2 -> 2 (+0)\n");
}

#[test]
fn compile_for_arch_seq_is_the_identity() {
    let o = casco(&["compile", "sp1.casm", "--contract", "arch-seq", "--policy", "baseline"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fences: 0 -> 0 (+0)"));
    let printed = parse_program(&stdout(&o)).unwrap();
    assert_eq!(printed, casco::corpus::entry("sp1").unwrap().program());
}

#[test]
fn json_check_report_round_trips() {
    let o = casco(&["--json", "check", "compiler", "sp1", "--contract", "spec-ct", "--policy", "identity"]);
    let r: CheckReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    assert_eq!(r.pairs_examined, 6);
    let again = serde_json::to_string_pretty(&r).unwrap() + "\n";
    assert_eq!(again, stdout(&o));
}

#[test]
fn config_file_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[pairs]\ndomain = \"0..1\"\n").unwrap();
    let o = casco(&["--config", cfg.to_str().unwrap(), "--json", "check", "hw", "sp1", "--contract", "seq-ct", "--hw", "hw-seq"]);
    let r: CheckReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.pairs_examined, 1);

    let sampled = |seed: &str| {
        stdout(&casco(&["--seed", seed, "check", "hw", "sp1", "--contract", "seq-ct", "--hw", "hw-spec", "--sampled", "5"]))
    };
    assert_eq!(sampled("3"), sampled("3"));
    assert!(sampled("3").contains("5 examined"));

    fs::write(&cfg, "[hardware]\nsets = 3\n").unwrap();
    assert_eq!(code(&casco(&["--config", cfg.to_str().unwrap(), "trace", "sp1", "--hw", "hw-seq"])), 3);
}

#[test]
fn public_variants_extend_the_sweep() {
    let o = casco(&["--json", "check", "hw", "sp1", "--contract", "seq-ct", "--hw", "hw-seq", "--public", "1=2", "--public", "1=0,0=3"]);
    let r: CheckReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.pairs_examined, 18);
    assert_eq!(code(&casco(&["check", "hw", "sp1", "--contract", "seq-ct", "--hw", "hw-seq", "--public", "8=1"])), 3);
}

#[test]
fn corpus_commands() {
    let o = casco(&["corpus", "list"]);
    assert_eq!(code(&o), 0);
    for name in ["sp1.casm", "sp1-trained.casm", "straightline.casm", "ct-select.casm", "branchy-noleak.casm", "empty-secret.casm"] {
        assert!(stdout(&o).contains(name), "{name}");
    }
    let o = casco(&["corpus", "verify", "--parallel"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).ends_with("456 of 456 expectations reproduced\n"));
    let o = casco(&["corpus", "show", "sp1"]);
    assert_eq!(stdout(&o), casco::corpus::entry("sp1").unwrap().source);
}
