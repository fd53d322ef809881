//! The x86-subset host instruction model: mnemonics, operand forms, a
//! two-pass text parser with labels and named data symbols, and the
//! hardwired execution semantics.
//!
//! Programs address instructions by index (the host `eip` is an instruction
//! index, not a byte address). All register operations are 32-bit.

use std::collections::BTreeMap;

use thiserror::Error;

pub const GPR_NAMES: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"];
pub const EAX: u8 = 0;
pub const ECX: u8 = 1;
pub const EDX: u8 = 2;
pub const EBX: u8 = 3;
pub const ESP: u8 = 4;
pub const EBP: u8 = 5;
pub const ESI: u8 = 6;
pub const EDI: u8 = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum X86Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> X86Error {
    X86Error::Syntax { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mnemonic {
    Mov,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Shrd,
    Cmp,
    Jcc,
    Jmp,
    Push,
    Pop,
    Call,
    Ret,
    Bound,
    Rdtsc,
    Wrmsr,
    Cpuid,
    Xchg,
    Hlt,
}

impl Mnemonic {
    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::And => "and",
            Mnemonic::Or => "or",
            Mnemonic::Xor => "xor",
            Mnemonic::Shl => "shl",
            Mnemonic::Shr => "shr",
            Mnemonic::Shrd => "shrd",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Jcc => "jcc",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Call => "call",
            Mnemonic::Ret => "ret",
            Mnemonic::Bound => "bound",
            Mnemonic::Rdtsc => "rdtsc",
            Mnemonic::Wrmsr => "wrmsr",
            Mnemonic::Cpuid => "cpuid",
            Mnemonic::Xchg => "xchg",
            Mnemonic::Hlt => "hlt",
        }
    }
}

/// Branch condition over the host flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum X86Cond {
    E,
    Ne,
    B,
    Ae,
    S,
    Ns,
}

/// `[base + disp]`, `[base]`, or `[disp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<u8>,
    pub disp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(u32),
    Mem(MemRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct X86Instr {
    pub mnemonic: Mnemonic,
    pub cond: Option<X86Cond>,
    pub operands: Vec<Operand>,
    /// Source text, kept verbatim for traces.
    pub text: String,
}

fn parse_number(s: &str) -> Option<u32> {
    let (neg, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()?
    } else {
        s.parse::<u32>().ok()?
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn reg_index(tok: &str) -> Option<u8> {
    let lower = tok.to_ascii_lowercase();
    GPR_NAMES.iter().position(|n| *n == lower).map(|i| i as u8)
}

fn parse_mem(
    inner: &str,
    symbols: &BTreeMap<String, u32>,
    line: usize,
) -> Result<MemRef, X86Error> {
    let resolve = |tok: &str| -> Result<u32, X86Error> {
        parse_number(tok)
            .or_else(|| symbols.get(tok).copied())
            .ok_or_else(|| syntax(line, format!("unknown symbol or number `{tok}`")))
    };
    if let Some((l, r)) = inner.split_once('+') {
        let (l, r) = (l.trim(), r.trim());
        let base = reg_index(l)
            .ok_or_else(|| syntax(line, format!("bad base register `{l}`")))?;
        Ok(MemRef { base: Some(base), disp: resolve(r)? })
    } else {
        let tok = inner.trim();
        match reg_index(tok) {
            Some(base) => Ok(MemRef { base: Some(base), disp: 0 }),
            None => Ok(MemRef { base: None, disp: resolve(tok)? }),
        }
    }
}

fn parse_operand(
    tok: &str,
    symbols: &BTreeMap<String, u32>,
    labels: &BTreeMap<String, u32>,
    line: usize,
) -> Result<Operand, X86Error> {
    let tok = tok.trim();
    if let Some(inner) = tok.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| syntax(line, "unterminated memory operand"))?;
        return Ok(Operand::Mem(parse_mem(inner, symbols, line)?));
    }
    if let Some(r) = reg_index(tok) {
        return Ok(Operand::Reg(r));
    }
    if let Some(n) = parse_number(tok) {
        return Ok(Operand::Imm(n));
    }
    if let Some(v) = labels.get(tok).or_else(|| symbols.get(tok)) {
        return Ok(Operand::Imm(*v));
    }
    Err(syntax(line, format!("unknown operand `{tok}`")))
}

fn mnemonic_of(tok: &str) -> Option<(Mnemonic, Option<X86Cond>)> {
    let m = match tok {
        "mov" => Mnemonic::Mov,
        "add" => Mnemonic::Add,
        "sub" => Mnemonic::Sub,
        "and" => Mnemonic::And,
        "or" => Mnemonic::Or,
        "xor" => Mnemonic::Xor,
        "shl" => Mnemonic::Shl,
        "shr" => Mnemonic::Shr,
        "shrd" => Mnemonic::Shrd,
        "cmp" => Mnemonic::Cmp,
        "jmp" => Mnemonic::Jmp,
        "push" => Mnemonic::Push,
        "pop" => Mnemonic::Pop,
        "call" => Mnemonic::Call,
        "ret" => Mnemonic::Ret,
        "bound" => Mnemonic::Bound,
        "rdtsc" => Mnemonic::Rdtsc,
        "wrmsr" => Mnemonic::Wrmsr,
        "cpuid" => Mnemonic::Cpuid,
        "xchg" => Mnemonic::Xchg,
        "hlt" => Mnemonic::Hlt,
        "je" => return Some((Mnemonic::Jcc, Some(X86Cond::E))),
        "jne" => return Some((Mnemonic::Jcc, Some(X86Cond::Ne))),
        "jb" => return Some((Mnemonic::Jcc, Some(X86Cond::B))),
        "jae" => return Some((Mnemonic::Jcc, Some(X86Cond::Ae))),
        "js" => return Some((Mnemonic::Jcc, Some(X86Cond::S))),
        "jns" => return Some((Mnemonic::Jcc, Some(X86Cond::Ns))),
        _ => return None,
    };
    Some((m, None))
}

/// Validates the operand shape for a mnemonic.
fn check_shape(instr: &X86Instr, line: usize) -> Result<(), X86Error> {
    use Operand::{Imm, Mem, Reg};
    let ops = &instr.operands[..];
    let ok = match instr.mnemonic {
        Mnemonic::Mov => matches!(
            ops,
            [Reg(_), Imm(_)] | [Reg(_), Reg(_)] | [Reg(_), Mem(_)] | [Mem(_), Reg(_)]
        ),
        Mnemonic::Add | Mnemonic::Sub | Mnemonic::And | Mnemonic::Or | Mnemonic::Xor
        | Mnemonic::Cmp => {
            matches!(ops, [Reg(_), Imm(_)] | [Reg(_), Reg(_)])
        }
        Mnemonic::Shl | Mnemonic::Shr => match ops {
            [Reg(_), Imm(_)] => true,
            [Reg(_), Reg(_)] => {
                return Err(syntax(line, "shift by register is not supported"))
            }
            _ => false,
        },
        Mnemonic::Shrd => matches!(ops, [Reg(_), Reg(_), Imm(_)]),
        Mnemonic::Jcc | Mnemonic::Jmp | Mnemonic::Call => matches!(ops, [Imm(_)]),
        Mnemonic::Push => matches!(ops, [Reg(_)] | [Imm(_)]),
        Mnemonic::Pop => matches!(ops, [Reg(_)]),
        Mnemonic::Ret | Mnemonic::Rdtsc | Mnemonic::Wrmsr | Mnemonic::Cpuid | Mnemonic::Hlt => {
            ops.is_empty()
        }
        Mnemonic::Bound => matches!(ops, [Reg(_), Mem(_)]),
        Mnemonic::Xchg => matches!(ops, [Reg(_), Reg(_)]),
    };
    if ok {
        Ok(())
    } else {
        Err(syntax(line, format!("bad operands for `{}`", instr.mnemonic.name())))
    }
}

/// Parses an x86-subset program. Lexical rules match the RTL assembler:
/// one instruction per line, `;` comments, `label:` lines; `symbols` names
/// data offsets usable in memory operands and immediates.
pub fn parse_program(
    text: &str,
    symbols: &BTreeMap<String, u32>,
) -> Result<Vec<X86Instr>, X86Error> {
    // Pass 1: label table (labels hold instruction indices).
    let mut labels = BTreeMap::new();
    let mut index = 0u32;
    for raw in text.lines() {
        let s = raw.split(';').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_suffix(':') {
            labels.insert(name.trim().to_string(), index);
        } else {
            index += 1;
        }
    }
    // Pass 2: instructions.
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.split(';').next().unwrap_or("").trim();
        if s.is_empty() || s.ends_with(':') {
            continue;
        }
        let mut it = s.splitn(2, char::is_whitespace);
        let mnem_tok = it.next().unwrap().to_ascii_lowercase();
        let rest = it.next().unwrap_or("").trim();
        let (mnemonic, cond) = mnemonic_of(&mnem_tok)
            .ok_or_else(|| syntax(line, format!("unknown mnemonic `{mnem_tok}`")))?;
        let operands = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|p| parse_operand(p, symbols, &labels, line))
                .collect::<Result<Vec<_>, _>>()?
        };
        let instr = X86Instr { mnemonic, cond, operands, text: s.to_string() };
        check_shape(&instr, line)?;
        out.push(instr);
    }
    Ok(out)
}

/// Parses a single instruction (no labels, no symbols).
pub fn parse_instr(text: &str) -> Result<X86Instr, X86Error> {
    let prog = parse_program(text, &BTreeMap::new())?;
    match <[X86Instr; 1]>::try_from(prog) {
        Ok([i]) => Ok(i),
        Err(_) => Err(syntax(1, "expected exactly one instruction")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_memory_forms() {
        let symbols = BTreeMap::from([("msg0".to_string(), 0u32), ("rc".to_string(), 0x18)]);
        let p = parse_program(
            "mov esi, [msg0]\nmov ecx, [rc]\nbound esi, [eax + 0x1]\nmov [0x40], ecx\n",
            &symbols,
        )
        .unwrap();
        assert_eq!(p[0].operands[1], Operand::Mem(MemRef { base: None, disp: 0 }));
        assert_eq!(p[1].operands[1], Operand::Mem(MemRef { base: None, disp: 0x18 }));
        assert_eq!(p[2].operands[1], Operand::Mem(MemRef { base: Some(EAX), disp: 1 }));
        assert_eq!(p[3].operands[0], Operand::Mem(MemRef { base: None, disp: 0x40 }));
    }

    #[test]
    fn labels_resolve_to_instruction_indices() {
        let p = parse_program(
            "xor eax, eax\nloop:\nadd eax, 1\ncmp eax, 5\njne loop\nhlt\n",
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(p[3].mnemonic, Mnemonic::Jcc);
        assert_eq!(p[3].cond, Some(X86Cond::Ne));
        assert_eq!(p[3].operands[0], Operand::Imm(1));
    }

    #[test]
    fn shift_by_register_rejected() {
        assert!(parse_program("shl eax, cl\n", &BTreeMap::new()).is_err());
        assert!(parse_program("shl eax, ecx\n", &BTreeMap::new()).is_err());
    }
}
