//! Parser for the line-oriented `.casm` program format.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::{BinOp, Expr, Instruction, Program, ProgramError, Reg, Word};

const KEYWORDS: &[&str] = &["skip", "assign", "load", "store", "jmp", "beqz", "fence"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, col: usize, label: String },
    #[error("{line}:{col}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, col: usize, label: String },
    #[error("{line}:{col}: {value} is outside the 16-bit word range")]
    OutOfRange { line: usize, col: usize, value: String },
    #[error("{line}:{col}: secret address {addr} is not a declared data address")]
    UndeclaredSecret { line: usize, col: usize, addr: Word },
    #[error("{line}:{col}: undeclared register `{name}`")]
    UndeclaredRegister { line: usize, col: usize, name: String },
    #[error("invalid program: {0}")]
    Invalid(#[from] ProgramError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Directive(String),
    Num(String, Option<Word>),
    DotDot,
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, col, msg: msg.into() }
}

fn parse_number(text: &str) -> Option<Word> {
    let (digits, radix) = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => (hex, 16),
        None => (text, 10),
    };
    u64::from_str_radix(digits, radix).ok().and_then(|v| Word::try_from(v).ok())
}

fn lex(line_no: usize, line: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let word_char = |c: char| c.is_ascii_alphanumeric() || c == '_';
        if c == '.' && chars.get(i + 1) == Some(&'.') {
            out.push(Token { tok: Tok::DotDot, col });
            i += 2;
        } else if c == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_alphabetic()) {
            let start = i + 1;
            i = start;
            while i < chars.len() && word_char(chars[i]) {
                i += 1;
            }
            out.push(Token { tok: Tok::Directive(chars[start..i].iter().collect()), col });
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let valid = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                Some(hex) => !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit()),
                None => text.chars().all(|c| c.is_ascii_digit()),
            };
            if !valid {
                return Err(syntax(line_no, col, format!("malformed number `{text}`")));
            }
            let value = parse_number(&text);
            out.push(Token { tok: Tok::Num(text, value), col });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && word_char(chars[i]) {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), col });
        } else if "+-*=<!¬,:()".contains(c) {
            let c = if c == '¬' { '!' } else { c };
            out.push(Token { tok: Tok::Punct(c), col });
            i += 1;
        } else {
            return Err(syntax(line_no, col, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    end_col: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |t| t.col)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        syntax(self.line, self.col(), msg)
    }

    fn expect_punct(&mut self, p: char) -> Result<(), ParseError> {
        if self.peek() == Some(&Tok::Punct(p)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{p}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize), ParseError> {
        let col = self.col();
        match self.next() {
            Some(Token { tok: Tok::Ident(s), .. }) => Ok((s.clone(), col)),
            _ => Err(syntax(self.line, col, format!("expected {what}"))),
        }
    }

    fn number(&mut self) -> Result<Word, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Token { tok: Tok::Num(_, Some(v)), .. }) => Ok(*v),
            Some(Token { tok: Tok::Num(text, None), .. }) => {
                Err(ParseError::OutOfRange { line: self.line, col, value: text.clone() })
            }
            _ => Err(syntax(self.line, col, "expected a number")),
        }
    }

    fn done(&self) -> Result<(), ParseError> {
        if self.pos < self.toks.len() {
            Err(self.err("unexpected trailing input"))
        } else {
            Ok(())
        }
    }
}

struct ExprParser<'a, 'b> {
    cur: &'b mut Cursor<'a>,
    regs: &'b HashMap<String, Reg>,
}

impl ExprParser<'_, '_> {
    fn reg(&self, name: &str, col: usize) -> Result<Reg, ParseError> {
        self.regs.get(name).copied().ok_or_else(|| ParseError::UndeclaredRegister {
            line: self.cur.line,
            col,
            name: name.to_string(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.sum()?;
        let op = match self.cur.peek() {
            Some(Tok::Punct('=')) => BinOp::Eq,
            Some(Tok::Punct('<')) => BinOp::Lt,
            _ => return Ok(lhs),
        };
        self.cur.pos += 1;
        let rhs = self.sum()?;
        if matches!(self.cur.peek(), Some(Tok::Punct('=' | '<'))) {
            return Err(self.cur.err("comparisons do not chain; add parentheses"));
        }
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.cur.peek() {
                Some(Tok::Punct('+')) => BinOp::Add,
                Some(Tok::Punct('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.cur.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while self.cur.peek() == Some(&Tok::Punct('*')) {
            self.cur.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        let col = self.cur.col();
        match self.cur.peek() {
            Some(Tok::Punct('!')) => {
                self.cur.pos += 1;
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Some(Tok::Punct('(')) => {
                self.cur.pos += 1;
                let e = self.expr()?;
                self.cur.expect_punct(')')?;
                Ok(e)
            }
            Some(Tok::Num(..)) => Ok(Expr::Const(self.cur.number()?)),
            Some(Tok::Ident(name)) => {
                self.cur.pos += 1;
                Ok(Expr::Reg(self.reg(name, col)?))
            }
            _ => Err(self.cur.err("expected an expression")),
        }
    }
}

#[derive(PartialEq)]
enum Section {
    None,
    Data,
    Text,
}

struct PendingRef {
    index: usize,
    label: String,
    line: usize,
    col: usize,
}

/// Parses a `.casm` program. Labels are resolved to instruction indices and the
/// data segment is made dense up to its highest declared address.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let lines: Vec<Vec<Token>> = text
        .lines()
        .enumerate()
        .map(|(i, l)| lex(i + 1, l))
        .collect::<Result<_, _>>()?;

    // Registers first, so `.registers` may appear anywhere.
    let mut registers = Vec::new();
    let mut reg_ids = HashMap::new();
    for (i, toks) in lines.iter().enumerate() {
        if toks.first().map(|t| &t.tok) != Some(&Tok::Directive("registers".into())) {
            continue;
        }
        for t in &toks[1..] {
            let Tok::Ident(name) = &t.tok else {
                return Err(syntax(i + 1, t.col, "expected a register name"));
            };
            if KEYWORDS.contains(&name.as_str()) {
                return Err(syntax(i + 1, t.col, format!("`{name}` is reserved")));
            }
            if reg_ids.contains_key(name) {
                return Err(syntax(i + 1, t.col, format!("register `{name}` declared twice")));
            }
            if registers.len() > u8::MAX as usize {
                return Err(syntax(i + 1, t.col, "too many registers"));
            }
            reg_ids.insert(name.clone(), Reg(registers.len() as u8));
            registers.push(name.clone());
        }
    }

    let mut section = Section::None;
    let mut declared: BTreeMap<Word, Word> = BTreeMap::new();
    let mut secrets: Vec<(Word, usize, usize)> = Vec::new();
    let mut code = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut refs: Vec<PendingRef> = Vec::new();
    let mut entry: Option<(Tok, usize, usize)> = None;

    for (i, toks) in lines.iter().enumerate() {
        let line = i + 1;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor { toks, pos: 0, line, end_col: toks.last().map_or(1, |t| t.col + 1) };
        if let Some(Tok::Directive(d)) = cur.peek() {
            cur.pos += 1;
            match d.as_str() {
                "data" => section = Section::Data,
                "text" => section = Section::Text,
                "registers" => continue,
                "secret" => {
                    while cur.peek().is_some() {
                        let col = cur.col();
                        let lo = cur.number()?;
                        let hi = if cur.peek() == Some(&Tok::DotDot) {
                            cur.pos += 1;
                            cur.number()?
                        } else {
                            lo
                        };
                        if hi < lo {
                            return Err(syntax(line, col, "empty address range"));
                        }
                        secrets.extend((lo..=hi).map(|a| (a, line, col)));
                    }
                }
                "entry" => {
                    let col = cur.col();
                    match cur.next() {
                        Some(t @ Token { tok: Tok::Ident(_) | Tok::Num(..), .. }) => {
                            entry = Some((t.tok.clone(), line, col))
                        }
                        _ => return Err(syntax(line, col, "expected a label or index")),
                    }
                }
                other => return Err(syntax(line, 1, format!("unknown directive `.{other}`"))),
            }
            cur.done()?;
            continue;
        }
        match section {
            Section::None => return Err(cur.err("expected `.data` or `.text` before content")),
            Section::Data => {
                let col = cur.col();
                let lo = cur.number()?;
                let hi = if cur.peek() == Some(&Tok::DotDot) {
                    cur.pos += 1;
                    cur.number()?
                } else {
                    lo
                };
                if hi < lo {
                    return Err(syntax(line, col, "empty address range"));
                }
                cur.expect_punct(':')?;
                let value = cur.number()?;
                cur.done()?;
                for a in lo..=hi {
                    if declared.insert(a, value).is_some() {
                        return Err(syntax(line, col, format!("address {a} declared twice")));
                    }
                }
            }
            Section::Text => {
                // Leading labels.
                while let (Some(Tok::Ident(name)), Some(Tok::Punct(':'))) =
                    (cur.peek(), toks.get(cur.pos + 1).map(|t| &t.tok))
                {
                    let col = cur.col();
                    if labels.insert(name.clone(), code.len()).is_some() {
                        return Err(ParseError::DuplicateLabel { line, col, label: name.clone() });
                    }
                    cur.pos += 2;
                }
                if cur.peek().is_none() {
                    continue;
                }
                let (op, col) = cur.ident("an instruction")?;
                let mut ep = ExprParser { cur: &mut cur, regs: &reg_ids };
                let instr = match op.as_str() {
                    "skip" => Instruction::Skip,
                    "fence" | "lfence" => Instruction::Fence,
                    "assign" | "load" | "store" => {
                        let (name, rcol) = ep.cur.ident("a register")?;
                        let r = ep.reg(&name, rcol)?;
                        ep.cur.expect_punct(',')?;
                        let e = ep.expr()?;
                        match op.as_str() {
                            "assign" => Instruction::Assign { dst: r, expr: e },
                            "load" => Instruction::Load { dst: r, addr: e },
                            _ => Instruction::Store { src: r, addr: e },
                        }
                    }
                    "jmp" => {
                        let (label, lcol) = ep.cur.ident("a label")?;
                        refs.push(PendingRef { index: code.len(), label, line, col: lcol });
                        Instruction::Jmp { target: usize::MAX }
                    }
                    "beqz" => {
                        let (name, rcol) = ep.cur.ident("a register")?;
                        let r = ep.reg(&name, rcol)?;
                        ep.cur.expect_punct(',')?;
                        let (label, lcol) = ep.cur.ident("a label")?;
                        refs.push(PendingRef { index: code.len(), label, line, col: lcol });
                        Instruction::Beqz { cond: r, target: usize::MAX }
                    }
                    other => return Err(syntax(line, col, format!("unknown instruction `{other}`"))),
                };
                cur.done()?;
                code.push(instr);
            }
        }
    }

    for r in refs {
        match labels.get(&r.label) {
            Some(&idx) if idx < code.len() => *code[r.index].target_mut().expect("jump") = idx,
            _ => {
                return Err(ParseError::UnresolvedLabel { line: r.line, col: r.col, label: r.label })
            }
        }
    }
    // A label after the last instruction binds nothing.
    labels.retain(|_, idx| *idx < code.len());

    let mut secret_region = BTreeSet::new();
    for (addr, line, col) in secrets {
        if !declared.contains_key(&addr) {
            return Err(ParseError::UndeclaredSecret { line, col, addr });
        }
        secret_region.insert(addr);
    }

    let size = declared.keys().next_back().map_or(0, |a| *a as usize + 1);
    let mut data = vec![0; size];
    for (a, v) in declared {
        data[a as usize] = v;
    }

    let entry = match entry {
        None => 0,
        Some((Tok::Num(_, Some(i)), _, _)) => i as usize,
        Some((Tok::Num(text, None), line, col)) => {
            return Err(ParseError::OutOfRange { line, col, value: text })
        }
        Some((Tok::Ident(label), line, col)) => *labels
            .get(&label)
            .ok_or(ParseError::UnresolvedLabel { line, col, label: label.clone() })?,
        Some(_) => unreachable!("entry token is a label or number"),
    };

    let prog = Program { code, labels, data, registers, secret_region, entry };
    prog.validate()?;
    Ok(prog)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse_program(".text\nskip\n").unwrap();
        assert_eq!(p.code, vec![Instruction::Skip]);
        assert!(p.data.is_empty());
    }

    #[test]
    fn dangling_label() {
        let err = parse_program(".text\njmp missing\n").unwrap_err();
        assert!(matches!(err, ParseError::UnresolvedLabel { line: 2, col: 5, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_label() {
        let err = parse_program(".text\nA: skip\nA: skip\n").unwrap_err();
        assert!(matches!(err, ParseError::DuplicateLabel { line: 3, .. }));
    }

    #[test]
    fn out_of_range_constant() {
        let err = parse_program(".registers r\n.text\nassign r, 65536\n").unwrap_err();
        assert!(matches!(err, ParseError::OutOfRange { line: 3, col: 11, .. }), "{err:?}");
        let err = parse_program(".data\n0x10000: 1\n.text\nskip\n").unwrap_err();
        assert!(matches!(err, ParseError::OutOfRange { .. }));
    }

    #[test]
    fn secret_must_be_declared() {
        let err = parse_program(".data\n0..3: 0\n.secret 2..4\n.text\nskip\n").unwrap_err();
        assert!(matches!(err, ParseError::UndeclaredSecret { addr: 4, .. }), "{err:?}");
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_program(".registers r1\n.text\nload r1 4\n").unwrap_err();
        assert_eq!(err, ParseError::Syntax { line: 3, col: 9, msg: "expected `,`".into() });
        let err = parse_program(".text\nfrob\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 2, col: 1, .. }));
    }

    #[test]
    fn undeclared_register() {
        let err = parse_program(".registers r1\n.text\nassign r1, r2 + 1\n").unwrap_err();
        assert!(matches!(err, ParseError::UndeclaredRegister { ref name, .. } if name == "r2"));
    }

    #[test]
    fn data_ranges_hex_and_gaps() {
        let p = parse_program(".data\n  4: 0x1f # c\n  8..11: 7\n.secret 8 10..11\n.text\nskip\n").unwrap();
        assert_eq!(p.data, vec![0, 0, 0, 0, 31, 0, 0, 0, 7, 7, 7, 7]);
        assert_eq!(p.secret_region.iter().copied().collect::<Vec<_>>(), vec![8, 10, 11]);
    }

    #[test]
    fn example_file_from_format_description() {
        let src = "\
.data
  4: 0          # address: value
  8..11: 7      # range fill
  16..19: 0
.secret 16..19  # secret region (subset of .data addresses)
.registers r1 r2 r3
.text
L0: load r1, 4
    beqz r1, Ldone
    store r1, 8
Ldone: skip
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.code.len(), 4);
        assert_eq!(p.code[1], Instruction::Beqz { cond: Reg(0), target: 3 });
        assert_eq!(p.labels["Ldone"], 3);
        assert_eq!(p.secret_region.len(), 4);
    }

    #[test]
    fn labels_on_own_line_and_entry() {
        let p = parse_program(".text\nskip\nstart:\n  skip\n.entry start\n").unwrap();
        assert_eq!(p.entry, 1);
        assert_eq!(p.labels["start"], 1);
    }

    #[test]
    fn precedence() {
        let p = parse_program(".registers a\n.text\nassign a, 1 + 2 * 3 < 8\n").unwrap();
        let Instruction::Assign { expr, .. } = &p.code[0] else { panic!() };
        assert_eq!(expr.eval(&[0]), 1);
        assert!(parse_program(".registers a\n.text\nassign a, 1 < 2 < 3\n").is_err());
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(parse_program(".data\n0: 1\n"), Err(ParseError::Invalid(ProgramError::EmptyCode))));
    }
}
