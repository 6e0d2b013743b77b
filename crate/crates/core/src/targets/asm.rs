//! Two-pass MiniRISC assembler.
//!
//! Syntax: one statement per line, `;` starts a comment, `name:` defines a
//! label. Directives are `.org`, `.byte`, `.half`, `.word`, `.ascii`,
//! `.asciz`, `.space`, `.align` and `.equ NAME, value`. Pseudo-ops: `LI rd,
//! value` (MOVI plus MOVHI when needed), `LA rd, label` (always two words),
//! `PUSH rs`, `POP rd`, and `Bcc target` for every condition code.
//!
//! A branch or call operand written with a leading sign is a byte
//! displacement from the next instruction, so `B AL, -4` loops on itself.
//! Any other operand is an absolute target address.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::vmcore::isa::{encode, AluOp, Cond, Insn, REG_LR, REG_SP};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: undefined label `{name}`")]
    UndefinedLabel { line: usize, name: String },
    #[error("line {line}: unknown mnemonic `{name}`")]
    BadMnemonic { line: usize, name: String },
    #[error("line {line}: {msg}")]
    RangeError { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: label `{name}` defined twice")]
    DuplicateLabel { line: usize, name: String },
}

/// Output of [`assemble`]: a flat image loaded at `base`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub base: u32,
    pub bytes: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
}

impl Assembled {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Symbol table text: one `<hex addr> <name>` line per symbol, sorted
    /// by address then name.
    pub fn symbol_table(&self) -> String {
        let mut entries: Vec<(&u32, &String)> = self.symbols.iter().map(|(k, v)| (v, k)).collect();
        entries.sort();
        let mut out = String::new();
        for (addr, name) in entries {
            let _ = writeln!(out, "{addr:08x} {name}");
        }
        out
    }
}

/// Parses symbol table text produced by [`Assembled::symbol_table`].
pub fn parse_symbol_table(text: &str) -> Result<BTreeMap<String, u32>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (addr, name) =
            line.split_once(char::is_whitespace).ok_or_else(|| format!("line {}: expected `<addr> <name>`", i + 1))?;
        let addr =
            u32::from_str_radix(addr.trim_start_matches("0x"), 16).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.insert(name.trim().to_string(), addr);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Stmt {
    Org(String),
    Data { width: u8, items: Vec<String> },
    Bytes(Vec<u8>),
    Space(String),
    Align(String),
    Equ(String, String),
    Op { mnemonic: String, args: Vec<String> },
}

struct Line {
    no: usize,
    labels: Vec<String>,
    stmt: Option<Stmt>,
}

pub fn assemble(src: &str) -> Result<Assembled, AsmError> {
    let lines = parse_lines(src)?;
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();

    // pass 1: addresses and sizes
    let mut sizes = Vec::with_capacity(lines.len());
    let mut pc: u32 = 0;
    let mut base: Option<u32> = None;
    for l in &lines {
        for name in &l.labels {
            if symbols.insert(name.clone(), pc).is_some() {
                return Err(AsmError::DuplicateLabel { line: l.no, name: name.clone() });
            }
        }
        let size = match &l.stmt {
            None => 0,
            Some(Stmt::Org(e)) => {
                let target = eval(e, &symbols, l.no)?;
                if base.is_none() {
                    base = Some(target);
                } else if target < pc {
                    return Err(AsmError::RangeError { line: l.no, msg: format!(".org {target:#x} moves backwards") });
                }
                pc = target;
                0
            }
            Some(Stmt::Equ(name, e)) => {
                let v = eval(e, &symbols, l.no)?;
                if symbols.insert(name.clone(), v).is_some() {
                    return Err(AsmError::DuplicateLabel { line: l.no, name: name.clone() });
                }
                0
            }
            Some(Stmt::Data { width, items }) => u32::from(*width) * items.len() as u32,
            Some(Stmt::Bytes(b)) => b.len() as u32,
            Some(Stmt::Space(e)) => eval(e, &symbols, l.no)?,
            Some(Stmt::Align(e)) => {
                let a = eval(e, &symbols, l.no)?;
                if a == 0 || !a.is_power_of_two() {
                    return Err(AsmError::RangeError { line: l.no, msg: format!(".align {a} is not a power of two") });
                }
                pc.next_multiple_of(a) - pc
            }
            Some(Stmt::Op { mnemonic, args }) => 4 * op_words(mnemonic, args, &symbols, l.no)?,
        };
        if base.is_none() && size > 0 {
            base = Some(0);
        }
        sizes.push(size);
        pc = pc.checked_add(size).ok_or(AsmError::RangeError { line: l.no, msg: "image exceeds 4 GiB".into() })?;
    }

    // pass 2: encoding
    let base = base.unwrap_or(0);
    let mut out: Vec<u8> = Vec::new();
    let mut pc = base;
    for (l, &size) in lines.iter().zip(&sizes) {
        let Some(stmt) = &l.stmt else { continue };
        let at = (pc - base) as usize;
        if out.len() < at {
            out.resize(at, 0);
        }
        match stmt {
            Stmt::Org(e) => {
                pc = eval(e, &symbols, l.no)?;
                continue;
            }
            Stmt::Equ(..) => {}
            Stmt::Data { width, items } => {
                for item in items {
                    let v = eval(item, &symbols, l.no)?;
                    let fits = match width {
                        1 => v <= 0xFF || v >= 0xFFFF_FF80,
                        2 => v <= 0xFFFF || v >= 0xFFFF_8000,
                        _ => true,
                    };
                    if !fits {
                        return Err(AsmError::RangeError {
                            line: l.no,
                            msg: format!("{v:#x} does not fit in {width} byte(s)"),
                        });
                    }
                    out.extend_from_slice(&v.to_le_bytes()[..*width as usize]);
                }
            }
            Stmt::Bytes(b) => out.extend_from_slice(b),
            Stmt::Space(_) | Stmt::Align(_) => out.resize(at + size as usize, 0),
            Stmt::Op { mnemonic, args } => {
                for insn in encode_op(mnemonic, args, &symbols, pc, l.no)? {
                    out.extend_from_slice(&encode(&insn).to_le_bytes());
                }
            }
        }
        pc += size;
    }
    Ok(Assembled { base, bytes: out, symbols })
}

fn parse_lines(src: &str) -> Result<Vec<Line>, AsmError> {
    let mut lines = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let no = i + 1;
        let mut text = strip_comment(raw).trim();
        let mut labels = Vec::new();
        while let Some(colon) = label_end(text) {
            let name = text[..colon].trim();
            if !is_ident(name) {
                return Err(AsmError::Syntax { line: no, msg: format!("bad label `{name}`") });
            }
            labels.push(name.to_string());
            text = text[colon + 1..].trim();
        }
        let stmt = if text.is_empty() { None } else { Some(parse_stmt(text, no)?) };
        lines.push(Line { no, labels, stmt });
    }
    Ok(lines)
}

fn strip_comment(s: &str) -> &str {
    let b = s.as_bytes();
    let mut in_str = false;
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'\\' if in_str => i += 1,
            b'"' => in_str = !in_str,
            // character literal such as ';'
            b'\'' if !in_str && b.get(i + 2) == Some(&b'\'') => i += 2,
            b';' if !in_str => return &s[..i],
            _ => {}
        }
        i += 1;
    }
    s
}

fn label_end(text: &str) -> Option<usize> {
    let colon = text.find(':')?;
    let head = &text[..colon];
    if head.contains('"')
        || head.contains(char::is_whitespace)
            && !head.trim().chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
    {
        return None;
    }
    Some(colon)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0;
    for c in s.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_stmt(text: &str, line: usize) -> Result<Stmt, AsmError> {
    let (head, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let syntax = |msg: String| AsmError::Syntax { line, msg };
    if let Some(dir) = head.strip_prefix('.') {
        let args = split_args(rest);
        let one = |args: &[String]| -> Result<String, AsmError> {
            match args {
                [a] => Ok(a.clone()),
                _ => Err(syntax(format!(".{dir} takes one argument"))),
            }
        };
        return match dir.to_ascii_lowercase().as_str() {
            "org" => Ok(Stmt::Org(one(&args)?)),
            "byte" => Ok(Stmt::Data { width: 1, items: args }),
            "half" => Ok(Stmt::Data { width: 2, items: args }),
            "word" => Ok(Stmt::Data { width: 4, items: args }),
            "space" => Ok(Stmt::Space(one(&args)?)),
            "align" => Ok(Stmt::Align(one(&args)?)),
            "equ" => match args.as_slice() {
                [name, value] if is_ident(name) => Ok(Stmt::Equ(name.clone(), value.clone())),
                _ => Err(syntax(".equ takes NAME, value".into())),
            },
            "ascii" | "asciz" => {
                let mut bytes = parse_string(rest).map_err(syntax)?;
                if dir.eq_ignore_ascii_case("asciz") {
                    bytes.push(0);
                }
                Ok(Stmt::Bytes(bytes))
            }
            _ => Err(AsmError::BadMnemonic { line, name: head.to_string() }),
        };
    }
    Ok(Stmt::Op { mnemonic: head.to_ascii_uppercase(), args: split_args(rest) })
}

fn parse_string(s: &str) -> Result<Vec<u8>, String> {
    let inner = s
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .ok_or_else(|| format!("expected a quoted string, got `{s}`"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            Some('x') => {
                let hex: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&hex, 16).map_err(|_| format!("bad escape \\x{hex}"))?);
            }
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// Evaluates `term (+|- term)*` where a term is a number, a character
/// literal or a symbol. Arithmetic wraps at 32 bits.
fn eval(expr: &str, symbols: &BTreeMap<String, u32>, line: usize) -> Result<u32, AsmError> {
    try_eval(expr, symbols, line)?.ok_or_else(|| AsmError::UndefinedLabel { line, name: first_unknown(expr, symbols) })
}

fn first_unknown(expr: &str, symbols: &BTreeMap<String, u32>) -> String {
    expr.split(['+', '-']).map(str::trim).find(|t| is_ident(t) && !symbols.contains_key(*t)).unwrap_or(expr).to_string()
}

/// Like [`eval`] but returns `Ok(None)` when a symbol is not yet known.
fn try_eval(expr: &str, symbols: &BTreeMap<String, u32>, line: usize) -> Result<Option<u32>, AsmError> {
    let expr = expr.trim();
    if expr.is_empty() {
        return Err(AsmError::Syntax { line, msg: "missing operand".into() });
    }
    let mut total: u32 = 0;
    let mut sign_neg = false;
    let mut term = String::new();
    let mut known = true;
    let mut flush = |term: &mut String, neg: bool, total: &mut u32| -> Result<(), AsmError> {
        let t = term.trim();
        if t.is_empty() {
            term.clear();
            return Ok(());
        }
        let v = match parse_number(t) {
            Some(v) => v,
            None if is_ident(t) => match symbols.get(t) {
                Some(v) => *v,
                None => {
                    known = false;
                    0
                }
            },
            None => return Err(AsmError::Syntax { line, msg: format!("bad operand `{t}`") }),
        };
        *total = if neg { total.wrapping_sub(v) } else { total.wrapping_add(v) };
        term.clear();
        Ok(())
    };
    let mut in_char = false;
    for c in expr.chars() {
        if c == '\'' {
            in_char = !in_char;
        }
        if !in_char && (c == '+' || c == '-') {
            flush(&mut term, sign_neg, &mut total)?;
            sign_neg = c == '-';
            continue;
        }
        term.push(c);
    }
    flush(&mut term, sign_neg, &mut total)?;
    Ok(known.then_some(total))
}

fn parse_number(t: &str) -> Option<u32> {
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return u32::from_str_radix(&h.replace('_', ""), 16).ok();
    }
    if let Some(b) = t.strip_prefix("0b") {
        return u32::from_str_radix(&b.replace('_', ""), 2).ok();
    }
    if t.len() >= 3 && t.starts_with('\'') && t.ends_with('\'') {
        let inner = &t[1..t.len() - 1];
        return match inner {
            "\\n" => Some(10),
            "\\0" => Some(0),
            "\\'" => Some(39),
            _ if inner.chars().count() == 1 => Some(inner.chars().next()? as u32),
            _ => None,
        };
    }
    if t.starts_with(|c: char| c.is_ascii_digit()) {
        return t.replace('_', "").parse().ok();
    }
    None
}

fn reg(s: &str, line: usize) -> Result<u8, AsmError> {
    let l = s.trim().to_ascii_lowercase();
    let r = match l.as_str() {
        "sp" => Some(REG_SP),
        "lr" => Some(REG_LR),
        _ => l.strip_prefix('r').and_then(|n| n.parse::<u8>().ok()).filter(|n| *n < 16),
    };
    r.ok_or_else(|| AsmError::Syntax { line, msg: format!("expected a register, got `{s}`") })
}

/// `[rs]`, `[rs+expr]` or `[rs-expr]`.
fn mem_operand(s: &str, symbols: &BTreeMap<String, u32>, line: usize) -> Result<(u8, i8), AsmError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| AsmError::Syntax { line, msg: format!("expected a memory operand, got `{s}`") })?;
    let split = inner.find(['+', '-']);
    let (base, off) = match split {
        Some(i) => (&inner[..i], eval(&format!("0{}", &inner[i..]), symbols, line)? as i32),
        None => (inner, 0),
    };
    let off = i8::try_from(off)
        .map_err(|_| AsmError::RangeError { line, msg: format!("offset {off} outside -128..=127") })?;
    Ok((reg(base, line)?, off))
}

fn imm16(v: u32, line: usize) -> Result<u16, AsmError> {
    u16::try_from(v).map_err(|_| AsmError::RangeError { line, msg: format!("immediate {v} does not fit in 16 bits") })
}

fn simm8(v: u32, line: usize) -> Result<i8, AsmError> {
    i8::try_from(v as i32)
        .map_err(|_| AsmError::RangeError { line, msg: format!("immediate {} outside -128..=127", v as i32) })
}

fn branch_cond(m: &str) -> Option<Cond> {
    if m == "B" {
        return None;
    }
    m.strip_prefix('B').and_then(Cond::from_name)
}

fn op_words(m: &str, args: &[String], symbols: &BTreeMap<String, u32>, line: usize) -> Result<u32, AsmError> {
    Ok(match m {
        "LA" | "PUSH" | "POP" => 2,
        "LI" => match args {
            [_, v] => match try_eval(v, symbols, line)? {
                Some(v) if v <= 0xFFFF => 1,
                _ => 2,
            },
            _ => return Err(AsmError::Syntax { line, msg: "LI takes rd, value".into() }),
        },
        _ => 1,
    })
}

fn encode_op(
    m: &str,
    args: &[String],
    symbols: &BTreeMap<String, u32>,
    pc: u32,
    line: usize,
) -> Result<Vec<Insn>, AsmError> {
    let want = |n: usize| -> Result<(), AsmError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(AsmError::Syntax { line, msg: format!("{m} takes {n} operand(s), got {}", args.len()) })
        }
    };
    let ev = |s: &str| eval(s, symbols, line);
    let target = |s: &str| -> Result<i16, AsmError> {
        let s = s.trim();
        let disp = if s.starts_with(['+', '-']) {
            ev(&format!("0{s}"))? as i32
        } else {
            ev(s)?.wrapping_sub(pc.wrapping_add(4)) as i32
        };
        if disp % 4 != 0 {
            return Err(AsmError::RangeError { line, msg: format!("branch displacement {disp} not a multiple of 4") });
        }
        i16::try_from(disp / 4)
            .map_err(|_| AsmError::RangeError { line, msg: format!("branch displacement {disp} out of range") })
    };
    let alu = |op| -> Result<Vec<Insn>, AsmError> {
        want(3)?;
        Ok(vec![Insn::Alu { op, rd: reg(&args[0], line)?, rs: reg(&args[1], line)?, rt: reg(&args[2], line)? }])
    };
    let insn = match m {
        "HALT" => {
            want(0)?;
            Insn::Halt
        }
        "RET" => {
            want(0)?;
            Insn::Ret
        }
        "MOVI" | "MOVHI" => {
            want(2)?;
            let rd = reg(&args[0], line)?;
            let imm = imm16(ev(&args[1])?, line)?;
            if m == "MOVI" {
                Insn::Movi { rd, imm }
            } else {
                Insn::Movhi { rd, imm }
            }
        }
        "LI" | "LA" => {
            want(2)?;
            let rd = reg(&args[0], line)?;
            let v = ev(&args[1])?;
            let lo = Insn::Movi { rd, imm: v as u16 };
            let short = m == "LI" && op_words(m, args, symbols, line)? == 1;
            return Ok(if short { vec![lo] } else { vec![lo, Insn::Movhi { rd, imm: (v >> 16) as u16 }] });
        }
        "MOV" => {
            want(2)?;
            Insn::Mov { rd: reg(&args[0], line)?, rs: reg(&args[1], line)? }
        }
        "ADD" => return alu(AluOp::Add),
        "SUB" => return alu(AluOp::Sub),
        "AND" => return alu(AluOp::And),
        "OR" => return alu(AluOp::Or),
        "XOR" => return alu(AluOp::Xor),
        "SHL" | "SHR" => {
            want(3)?;
            let (rd, rs) = (reg(&args[0], line)?, reg(&args[1], line)?);
            let sh = ev(&args[2])?;
            if sh > 31 {
                return Err(AsmError::RangeError { line, msg: format!("shift {sh} outside 0..=31") });
            }
            let sh = sh as u8;
            if m == "SHL" {
                Insn::Shl { rd, rs, sh }
            } else {
                Insn::Shr { rd, rs, sh }
            }
        }
        "ADDI" => {
            want(3)?;
            Insn::Addi { rd: reg(&args[0], line)?, rs: reg(&args[1], line)?, imm: simm8(ev(&args[2])?, line)? }
        }
        "LDB" | "LDW" | "STB" | "STW" => {
            want(2)?;
            let r = reg(&args[0], line)?;
            let (base, off) = mem_operand(&args[1], symbols, line)?;
            match m {
                "LDB" => Insn::Ldb { rd: r, base, off },
                "LDW" => Insn::Ldw { rd: r, base, off },
                "STB" => Insn::Stb { src: r, base, off },
                _ => Insn::Stw { src: r, base, off },
            }
        }
        "CMP" => {
            want(2)?;
            Insn::Cmp { rs: reg(&args[0], line)?, rt: reg(&args[1], line)? }
        }
        "B" => {
            want(2)?;
            let cond = Cond::from_name(&args[0].to_ascii_uppercase())
                .ok_or_else(|| AsmError::Syntax { line, msg: format!("unknown condition `{}`", args[0]) })?;
            Insn::B { cond, off: target(&args[1])? }
        }
        "CALL" => {
            want(1)?;
            Insn::Call { off: target(&args[0])? }
        }
        "CALLR" => {
            want(1)?;
            Insn::Callr { rs: reg(&args[0], line)? }
        }
        "ECALL" => {
            want(1)?;
            let n = ev(&args[0])?;
            if n > 1 {
                return Err(AsmError::RangeError { line, msg: format!("ECALL {n}: only 0 and 1 exist") });
            }
            Insn::Ecall { n: n as u8 }
        }
        "PUSH" => {
            want(1)?;
            let r = reg(&args[0], line)?;
            return Ok(vec![
                Insn::Addi { rd: REG_SP, rs: REG_SP, imm: -4 },
                Insn::Stw { src: r, base: REG_SP, off: 0 },
            ]);
        }
        "POP" => {
            want(1)?;
            let r = reg(&args[0], line)?;
            return Ok(vec![Insn::Ldw { rd: r, base: REG_SP, off: 0 }, Insn::Addi { rd: REG_SP, rs: REG_SP, imm: 4 }]);
        }
        _ => match branch_cond(m) {
            Some(cond) => {
                want(1)?;
                Insn::B { cond, off: target(&args[0])? }
            }
            None => return Err(AsmError::BadMnemonic { line, name: m.to_string() }),
        },
    };
    Ok(vec![insn])
}
