//! Micro-op / triad data model, the 64-bit binary encoding, and the textual
//! RTL assembler and disassembler.
//!
//! A triad is the microcode addressing unit: exactly three micro-ops plus one
//! sequence word. Individual ops are not addressable.
//!
//! Binary op layout (64 bits):
//!
//! ```text
//! 63      56 55   50 49   44 43   38 37 36 35  34     16 15       0
//! [ opcode ] [ dst ] [ src1 ] [ src2 ] [sz] [iv] [ zero ] [  imm   ]
//! ```
//!
//! Register field encoding: `eax..edi` = 0..7 (x86 order, `esp`/`ebp`
//! rejected as microcode operands), `t0..t21` = 8..29, `TSC` = 30,
//! `NEXT_X86_IP` = 31, `UFLAGS` = 32. Size field: w32 = 0, w64 = 1,
//! w16 = 2, so the canonical nop is the all-zero word.
//!
//! Sequence word (32 bits): action in bits 31..30 (next = 0, branch = 1,
//! complete = 2), triad target in bits 11..0, everything else zero.

use std::fmt::Write as _;

use thiserror::Error;

/// Highest valid sequence-word target: ROM 0x000..=0xEFF plus patch RAM
/// 0xF00..=0xF1F.
pub const SEQ_TARGET_LIMIT: u16 = 0xF20;
/// `jcc` may additionally name the two fault vectors.
pub const FAULT_VECTOR_ACCESS: u16 = 0xF20;
pub const FAULT_VECTOR_BOUND: u16 = 0xF21;
/// Serialized size of one triad: three u64 op words plus a u32 sequence word.
pub const TRIAD_BYTES: usize = 28;

/// Number of microcode temporaries.
pub const NUM_TEMPS: u8 = 22;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("encoding error: {field} out of range")]
    FieldOverflow { field: &'static str },
    #[error("unrecognized operation in word {word:#018x}: {reason}")]
    UnrecognizedOperation { word: u64, reason: &'static str },
    #[error("invalid sequence word {word:#010x}: {reason}")]
    BadSequenceWord { word: u32, reason: &'static str },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("binary triad stream length {len} is not a multiple of 28")]
    BadStreamLength { len: usize },
}

fn syntax(line: usize, msg: impl Into<String>) -> IsaError {
    IsaError::Syntax { line, msg: msg.into() }
}

/// Operand size of a micro-op. The size selects the written register views
/// (`t9d` vs `t9q`, `eax` vs `rax`); all register operands of one op share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Width {
    W16,
    W32,
    W64,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::W16 => 16,
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W16 => 0xFFFF,
            Width::W32 => 0xFFFF_FFFF,
            Width::W64 => u64::MAX,
        }
    }

    fn encode(self) -> u64 {
        match self {
            Width::W32 => 0,
            Width::W64 => 1,
            Width::W16 => 2,
        }
    }

    fn decode(bits: u64) -> Option<Width> {
        match bits {
            0 => Some(Width::W32),
            1 => Some(Width::W64),
            2 => Some(Width::W16),
            _ => None,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Width::W16 => "w",
            Width::W32 => "d",
            Width::W64 => "q",
        }
    }
}

/// Readable internal registers, accessed with `dbg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Special {
    Tsc,
    NextX86Ip,
    Uflags,
}

impl Special {
    fn encode(self) -> u64 {
        match self {
            Special::Tsc => 30,
            Special::NextX86Ip => 31,
            Special::Uflags => 32,
        }
    }

    fn decode(bits: u64) -> Option<Special> {
        match bits {
            30 => Some(Special::Tsc),
            31 => Some(Special::NextX86Ip),
            32 => Some(Special::Uflags),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Tsc => "TSC",
            Special::NextX86Ip => "NEXT_X86_IP",
            Special::Uflags => "UFLAGS",
        }
    }
}

/// A register operand: one of the six usable x86 GPRs or one of the 22
/// microcode temporaries. `esp`/`ebp` exist on the host but are rejected as
/// microcode operands, so they are unrepresentable here by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    /// x86 GPR in standard encoding order; index in {0,1,2,3,6,7}.
    Gpr(u8),
    /// Microcode temporary t0..t21.
    Temp(u8),
}

pub const EAX: Reg = Reg::Gpr(0);
pub const ECX: Reg = Reg::Gpr(1);
pub const EDX: Reg = Reg::Gpr(2);
pub const EBX: Reg = Reg::Gpr(3);
pub const ESI: Reg = Reg::Gpr(6);
pub const EDI: Reg = Reg::Gpr(7);

/// Shorthand constructor for a temporary.
pub fn t(i: u8) -> Reg {
    assert!(i < NUM_TEMPS);
    Reg::Temp(i)
}

impl Reg {
    pub fn is_valid(self) -> bool {
        match self {
            Reg::Gpr(i) => matches!(i, 0..=3 | 6 | 7),
            Reg::Temp(i) => i < NUM_TEMPS,
        }
    }

    fn encode(self) -> u64 {
        match self {
            Reg::Gpr(i) => i as u64,
            Reg::Temp(i) => 8 + i as u64,
        }
    }

    fn decode(bits: u64) -> Option<Reg> {
        let r = match bits {
            0..=7 => Reg::Gpr(bits as u8),
            8..=29 => Reg::Temp(bits as u8 - 8),
            _ => return None,
        };
        r.is_valid().then_some(r)
    }

    fn name(self, w: Width) -> String {
        const D: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"];
        const Q: [&str; 8] = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi"];
        const W: [&str; 8] = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di"];
        match self {
            Reg::Gpr(i) => match w {
                Width::W16 => W[i as usize].to_string(),
                Width::W32 => D[i as usize].to_string(),
                Width::W64 => Q[i as usize].to_string(),
            },
            Reg::Temp(i) => format!("t{}{}", i, w.suffix()),
        }
    }
}

/// Second source operand: a register or a 16-bit immediate. Loading a full
/// 64-bit constant therefore takes a chain of mov/sll/or ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Src2 {
    Reg(Reg),
    Imm(u16),
}

/// Branch condition, evaluated against the microcode flags (UFLAGS).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cond {
    Always,
    E,
    Ne,
    B,
    Ae,
    S,
    Ns,
}

impl Cond {
    fn encode(self) -> u64 {
        match self {
            Cond::Always => 0,
            Cond::E => 1,
            Cond::Ne => 2,
            Cond::B => 3,
            Cond::Ae => 4,
            Cond::S => 5,
            Cond::Ns => 6,
        }
    }

    fn decode(bits: u64) -> Option<Cond> {
        Some(match bits {
            0 => Cond::Always,
            1 => Cond::E,
            2 => Cond::Ne,
            3 => Cond::B,
            4 => Cond::Ae,
            5 => Cond::S,
            6 => Cond::Ns,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Cond::Always => "always",
            Cond::E => "e",
            Cond::Ne => "ne",
            Cond::B => "b",
            Cond::Ae => "ae",
            Cond::S => "s",
            Cond::Ns => "ns",
        }
    }
}

/// How a `writeout` op leaves the microcode engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WriteoutMode {
    /// Value becomes the result written to the dispatching x86 instruction's
    /// destination operand.
    Result,
    /// Redirect the x86 instruction pointer to the value.
    Jump,
    /// Like Jump, but the next x86 instruction address is pushed first.
    Call,
}

impl WriteoutMode {
    fn encode(self) -> u64 {
        match self {
            WriteoutMode::Result => 0,
            WriteoutMode::Jump => 1,
            WriteoutMode::Call => 2,
        }
    }

    fn decode(bits: u64) -> Option<WriteoutMode> {
        Some(match bits {
            0 => WriteoutMode::Result,
            1 => WriteoutMode::Jump,
            2 => WriteoutMode::Call,
            _ => return None,
        })
    }
}

/// ALU operation selector shared by the arithmetic/logic/shift ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Sll,
    Srl,
}

impl AluOp {
    fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Sll => "sll",
            AluOp::Srl => "srl",
        }
    }
}

/// One micro-op. Three of these plus a sequence word form a triad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MicroOp {
    Nop,
    /// dst = src
    Mov { dst: Reg, src: Src2, size: Width },
    /// dst = src1 <op> src2 (shift counts are masked by the operand width)
    Alu { op: AluOp, dst: Reg, src1: Reg, src2: Src2, size: Width },
    /// dst = mem[base + off]
    Ld { dst: Reg, base: Reg, off: Src2, size: Width },
    /// mem[base + off] = src
    St { src: Reg, base: Reg, off: Src2, size: Width },
    /// set UFLAGS from src1 - src2
    Cmp { src1: Reg, src2: Src2, size: Width },
    /// conditional branch to a triad address (0xF20/0xF21 raise faults)
    Jcc { cond: Cond, target: u16 },
    /// dst = value of an internal register
    Dbg { dst: Reg, src: Special, size: Width },
    /// hand a value back to the x86 world (see WriteoutMode)
    Writeout { mode: WriteoutMode, src: Reg, size: Width },
}

impl MicroOp {
    fn opcode(&self) -> u64 {
        match self {
            MicroOp::Nop => 0x00,
            MicroOp::Mov { .. } => 0x01,
            MicroOp::Alu { op, .. } => match op {
                AluOp::Add => 0x02,
                AluOp::Sub => 0x03,
                AluOp::And => 0x04,
                AluOp::Or => 0x05,
                AluOp::Xor => 0x06,
                AluOp::Sll => 0x07,
                AluOp::Srl => 0x08,
            },
            MicroOp::Ld { .. } => 0x09,
            MicroOp::St { .. } => 0x0A,
            MicroOp::Cmp { .. } => 0x0B,
            MicroOp::Jcc { .. } => 0x0C,
            MicroOp::Dbg { .. } => 0x0D,
            MicroOp::Writeout { .. } => 0x0E,
        }
    }

    /// Checks the field invariants that the encoding cannot express.
    pub fn validate(&self) -> Result<(), IsaError> {
        let bad = |field: &'static str| Err(IsaError::FieldOverflow { field });
        let reg_ok = |r: Reg, field: &'static str| {
            if r.is_valid() {
                Ok(())
            } else {
                Err(IsaError::FieldOverflow { field })
            }
        };
        let src2_ok = |s: Src2, field: &'static str| match s {
            Src2::Reg(r) => {
                if r.is_valid() {
                    Ok(())
                } else {
                    Err(IsaError::FieldOverflow { field })
                }
            }
            Src2::Imm(_) => Ok(()),
        };
        match *self {
            MicroOp::Nop => Ok(()),
            MicroOp::Mov { dst, src, .. } => {
                reg_ok(dst, "dst")?;
                src2_ok(src, "src")
            }
            MicroOp::Alu { dst, src1, src2, .. } => {
                reg_ok(dst, "dst")?;
                reg_ok(src1, "src1")?;
                src2_ok(src2, "src2")
            }
            MicroOp::Ld { dst, base, off, .. } => {
                reg_ok(dst, "dst")?;
                reg_ok(base, "base")?;
                src2_ok(off, "off")
            }
            MicroOp::St { src, base, off, .. } => {
                reg_ok(src, "src")?;
                reg_ok(base, "base")?;
                src2_ok(off, "off")
            }
            MicroOp::Cmp { src1, src2, .. } => {
                reg_ok(src1, "src1")?;
                src2_ok(src2, "src2")
            }
            MicroOp::Jcc { target, .. } => {
                if target > FAULT_VECTOR_BOUND {
                    bad("jcc target")
                } else {
                    Ok(())
                }
            }
            MicroOp::Dbg { dst, .. } => reg_ok(dst, "dst"),
            MicroOp::Writeout { src, .. } => reg_ok(src, "src"),
        }
    }
}

/// Per-triad control word selecting the next triad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SequenceWord {
    /// Fall through to the next triad address.
    Next,
    /// Continue at the given triad address.
    Branch(u16),
    /// The current x86 instruction is finished after this triad.
    Complete,
}

impl SequenceWord {
    pub fn encode(self) -> Result<u32, IsaError> {
        match self {
            SequenceWord::Next => Ok(0),
            SequenceWord::Branch(target) => {
                if target >= SEQ_TARGET_LIMIT {
                    Err(IsaError::FieldOverflow { field: "sequence target" })
                } else {
                    Ok((1 << 30) | target as u32)
                }
            }
            SequenceWord::Complete => Ok(2 << 30),
        }
    }

    pub fn decode(word: u32) -> Result<SequenceWord, IsaError> {
        let action = word >> 30;
        let target = (word & 0xFFF) as u16;
        if word & 0x3FFF_F000 != 0 {
            return Err(IsaError::BadSequenceWord { word, reason: "reserved bits set" });
        }
        match action {
            0 | 2 if target != 0 => {
                Err(IsaError::BadSequenceWord { word, reason: "target set without branch" })
            }
            0 => Ok(SequenceWord::Next),
            1 => {
                if target >= SEQ_TARGET_LIMIT {
                    Err(IsaError::BadSequenceWord { word, reason: "target out of range" })
                } else {
                    Ok(SequenceWord::Branch(target))
                }
            }
            2 => Ok(SequenceWord::Complete),
            _ => Err(IsaError::BadSequenceWord { word, reason: "unknown action" }),
        }
    }
}

/// Three micro-ops plus a sequence word; the unit of microcode addressing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triad {
    pub ops: [MicroOp; 3],
    pub seq: SequenceWord,
}

impl Triad {
    pub fn nop() -> Triad {
        Triad { ops: [MicroOp::Nop; 3], seq: SequenceWord::Next }
    }

    pub fn new(ops: [MicroOp; 3], seq: SequenceWord) -> Triad {
        Triad { ops, seq }
    }
}

// ---------------------------------------------------------------------------
// binary encoding

const OP_SHIFT: u64 = 56;
const DST_SHIFT: u64 = 50;
const SRC1_SHIFT: u64 = 44;
const SRC2_SHIFT: u64 = 38;
const SIZE_SHIFT: u64 = 36;
const IMM_VALID: u64 = 1 << 35;
const FIELD6: u64 = 0x3F;
// Bits 34..=16 must stay clear in every valid word.
const RESERVED_MASK: u64 = 0x0000_0007_FFFF_0000;

fn pack(opcode: u64, dst: u64, src1: u64, src2: u64, size: Width, imm: Option<u16>) -> u64 {
    (opcode << OP_SHIFT)
        | (dst << DST_SHIFT)
        | (src1 << SRC1_SHIFT)
        | (src2 << SRC2_SHIFT)
        | (size.encode() << SIZE_SHIFT)
        | imm.map_or(0, |_| IMM_VALID)
        | imm.unwrap_or(0) as u64
}

fn pack_src2(s: Src2) -> (u64, Option<u16>) {
    match s {
        Src2::Reg(r) => (r.encode(), None),
        Src2::Imm(i) => (0, Some(i)),
    }
}

/// Encodes one micro-op into its 64-bit word. Deterministic;
/// `decode_op(encode_op(x)) == x` for every valid op.
pub fn encode_op(op: &MicroOp) -> Result<u64, IsaError> {
    op.validate()?;
    let word = match *op {
        MicroOp::Nop => 0,
        MicroOp::Mov { dst, src, size } => {
            let (s2, imm) = pack_src2(src);
            pack(op.opcode(), dst.encode(), dst.encode(), s2, size, imm)
        }
        MicroOp::Alu { dst, src1, src2, size, .. } => {
            let (s2, imm) = pack_src2(src2);
            pack(op.opcode(), dst.encode(), src1.encode(), s2, size, imm)
        }
        MicroOp::Ld { dst, base, off, size } => {
            let (s2, imm) = pack_src2(off);
            pack(op.opcode(), dst.encode(), base.encode(), s2, size, imm)
        }
        MicroOp::St { src, base, off, size } => {
            let (s2, imm) = pack_src2(off);
            pack(op.opcode(), src.encode(), base.encode(), s2, size, imm)
        }
        MicroOp::Cmp { src1, src2, size } => {
            let (s2, imm) = pack_src2(src2);
            pack(op.opcode(), src1.encode(), src1.encode(), s2, size, imm)
        }
        MicroOp::Jcc { cond, target } => {
            pack(op.opcode(), 0, 0, cond.encode(), Width::W32, Some(target))
        }
        MicroOp::Dbg { dst, src, size } => {
            pack(op.opcode(), dst.encode(), src.encode(), 0, size, None)
        }
        MicroOp::Writeout { mode, src, size } => {
            pack(op.opcode(), src.encode(), src.encode(), mode.encode(), size, None)
        }
    };
    Ok(word)
}

/// Decodes a 64-bit word back into a micro-op. Total over u64: anything
/// outside the image of `encode_op` is an "unrecognized operation", mirroring
/// the emulation whitelist (unknown ops are excluded, never guessed at).
pub fn decode_op(word: u64) -> Result<MicroOp, IsaError> {
    let err = |reason: &'static str| IsaError::UnrecognizedOperation { word, reason };
    if word & RESERVED_MASK != 0 {
        return Err(err("reserved bits set"));
    }
    let opcode = word >> OP_SHIFT;
    let dst_f = (word >> DST_SHIFT) & FIELD6;
    let src1_f = (word >> SRC1_SHIFT) & FIELD6;
    let src2_f = (word >> SRC2_SHIFT) & FIELD6;
    let size = Width::decode((word >> SIZE_SHIFT) & 0x3).ok_or_else(|| err("bad size"))?;
    let iv = word & IMM_VALID != 0;
    let imm = (word & 0xFFFF) as u16;

    let reg = |f: u64, what: &'static str| {
        Reg::decode(f).ok_or(IsaError::UnrecognizedOperation { word, reason: what })
    };
    // src2 and imm share one slot; with the imm-valid bit clear the imm bits
    // must be zero, and vice versa the src2 field must be zero.
    let src2 = || -> Result<Src2, IsaError> {
        if iv {
            if src2_f != 0 {
                return Err(err("src2 and imm both set"));
            }
            Ok(Src2::Imm(imm))
        } else {
            if imm != 0 {
                return Err(err("imm bits set without imm-valid"));
            }
            Ok(Src2::Reg(reg(src2_f, "bad src2 register")?))
        }
    };
    let no_imm = || if iv || imm != 0 { Err(err("unexpected immediate")) } else { Ok(()) };
    let zero = |f: u64| if f != 0 { Err(err("unused field set")) } else { Ok(()) };

    let op = match opcode {
        0x00 => {
            zero(dst_f)?;
            zero(src1_f)?;
            zero(src2_f)?;
            no_imm()?;
            if size != Width::W32 {
                return Err(err("nop with size bits"));
            }
            MicroOp::Nop
        }
        0x01 => {
            let dst = reg(dst_f, "bad dst register")?;
            if src1_f != dst_f {
                return Err(err("mov src1 must alias dst"));
            }
            MicroOp::Mov { dst, src: src2()?, size }
        }
        0x02..=0x08 => {
            let alu = match opcode {
                0x02 => AluOp::Add,
                0x03 => AluOp::Sub,
                0x04 => AluOp::And,
                0x05 => AluOp::Or,
                0x06 => AluOp::Xor,
                0x07 => AluOp::Sll,
                _ => AluOp::Srl,
            };
            MicroOp::Alu {
                op: alu,
                dst: reg(dst_f, "bad dst register")?,
                src1: reg(src1_f, "bad src1 register")?,
                src2: src2()?,
                size,
            }
        }
        0x09 => MicroOp::Ld {
            dst: reg(dst_f, "bad dst register")?,
            base: reg(src1_f, "bad base register")?,
            off: src2()?,
            size,
        },
        0x0A => MicroOp::St {
            src: reg(dst_f, "bad src register")?,
            base: reg(src1_f, "bad base register")?,
            off: src2()?,
            size,
        },
        0x0B => {
            let src1 = reg(src1_f, "bad src1 register")?;
            if dst_f != src1_f {
                return Err(err("cmp dst must alias src1"));
            }
            MicroOp::Cmp { src1, src2: src2()?, size }
        }
        0x0C => {
            zero(dst_f)?;
            zero(src1_f)?;
            if size != Width::W32 {
                return Err(err("jcc with size bits"));
            }
            if !iv {
                return Err(err("jcc without target"));
            }
            let cond = Cond::decode(src2_f).ok_or_else(|| err("bad condition"))?;
            if imm > FAULT_VECTOR_BOUND {
                return Err(err("jcc target out of range"));
            }
            MicroOp::Jcc { cond, target: imm }
        }
        0x0D => {
            no_imm()?;
            zero(src2_f)?;
            MicroOp::Dbg {
                dst: reg(dst_f, "bad dst register")?,
                src: Special::decode(src1_f).ok_or_else(|| err("bad internal register"))?,
                size,
            }
        }
        0x0E => {
            no_imm()?;
            let src = reg(src1_f, "bad src register")?;
            if dst_f != src1_f {
                return Err(err("writeout dst must alias src"));
            }
            let mode = WriteoutMode::decode(src2_f).ok_or_else(|| err("bad writeout mode"))?;
            MicroOp::Writeout { mode, src, size }
        }
        _ => return Err(err("unknown opcode")),
    };
    Ok(op)
}

/// Serializes triads as the little-endian binary stream: 3 x u64 op words
/// plus one u32 sequence word per triad (28 bytes each).
pub fn triads_to_bytes(triads: &[Triad]) -> Result<Vec<u8>, IsaError> {
    let mut out = Vec::with_capacity(triads.len() * TRIAD_BYTES);
    for t in triads {
        for op in &t.ops {
            out.extend_from_slice(&encode_op(op)?.to_le_bytes());
        }
        out.extend_from_slice(&t.seq.encode()?.to_le_bytes());
    }
    Ok(out)
}

pub fn triads_from_bytes(bytes: &[u8]) -> Result<Vec<Triad>, IsaError> {
    if !bytes.len().is_multiple_of(TRIAD_BYTES) {
        return Err(IsaError::BadStreamLength { len: bytes.len() });
    }
    let mut out = Vec::with_capacity(bytes.len() / TRIAD_BYTES);
    for chunk in bytes.chunks_exact(TRIAD_BYTES) {
        let word = |i: usize| u64::from_le_bytes(chunk[i * 8..i * 8 + 8].try_into().unwrap());
        let ops = [decode_op(word(0))?, decode_op(word(1))?, decode_op(word(2))?];
        let seq = SequenceWord::decode(u32::from_le_bytes(chunk[24..28].try_into().unwrap()))?;
        out.push(Triad { ops, seq });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// RTL assembler

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Reg(Reg, Width),
    Special(Special),
    Num(u16),
}

fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_register(tok: &str) -> Option<Result<(Reg, Width), &'static str>> {
    const D: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"];
    const Q: [&str; 8] = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi"];
    const W: [&str; 8] = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di"];
    let lower = tok.to_ascii_lowercase();
    for (names, width) in [(D, Width::W32), (Q, Width::W64), (W, Width::W16)] {
        if let Some(i) = names.iter().position(|n| *n == lower) {
            let r = Reg::Gpr(i as u8);
            return Some(if r.is_valid() {
                Ok((r, width))
            } else {
                Err("esp/ebp cannot be used as microcode operands")
            });
        }
    }
    if let Some(rest) = lower.strip_prefix('t') {
        if rest.len() >= 2 {
            let (num, suffix) = rest.split_at(rest.len() - 1);
            let width = match suffix {
                "d" => Width::W32,
                "q" => Width::W64,
                "w" => Width::W16,
                _ => return None,
            };
            if let Ok(i) = num.parse::<u8>() {
                if num.len() <= 2 && !num.is_empty() {
                    return Some(if i < NUM_TEMPS {
                        Ok((Reg::Temp(i), width))
                    } else {
                        Err("temporary index out of range (t0..t21)")
                    });
                }
            }
        }
    }
    None
}

fn parse_token(tok: &str, line: usize) -> Result<Token, IsaError> {
    match tok.to_ascii_uppercase().as_str() {
        "TSC" => return Ok(Token::Special(Special::Tsc)),
        "NEXT_X86_IP" => return Ok(Token::Special(Special::NextX86Ip)),
        "UFLAGS" => return Ok(Token::Special(Special::Uflags)),
        _ => {}
    }
    if let Some(res) = parse_register(tok) {
        let (r, w) = res.map_err(|m| syntax(line, m))?;
        return Ok(Token::Reg(r, w));
    }
    if let Some(n) = parse_number(tok) {
        if n > u16::MAX as u64 {
            return Err(syntax(line, format!("immediate {n:#x} does not fit in 16 bits")));
        }
        return Ok(Token::Num(n as u16));
    }
    Err(syntax(line, format!("unknown operand `{tok}`")))
}

struct OpLine {
    base: String,
    size: Option<Width>,
    cond: Option<Cond>,
    wmode: Option<WriteoutMode>,
    toks: Vec<Token>,
}

type MnemonicParts = (String, Option<Width>, Option<Cond>, Option<WriteoutMode>);

fn split_mnemonic(mnem: &str, line: usize) -> Result<MnemonicParts, IsaError> {
    let mut parts = mnem.split('.');
    let base = parts.next().unwrap_or("").to_ascii_lowercase();
    let mut size = None;
    let mut cond = None;
    let mut wmode = None;
    for p in parts {
        match p.to_ascii_lowercase().as_str() {
            "w" => size = put(size, Width::W16, line, "size suffix")?,
            "d" => size = put(size, Width::W32, line, "size suffix")?,
            "q" => size = put(size, Width::W64, line, "size suffix")?,
            "always" => cond = put(cond, Cond::Always, line, "condition")?,
            "e" => cond = put(cond, Cond::E, line, "condition")?,
            "ne" => cond = put(cond, Cond::Ne, line, "condition")?,
            "b" => cond = put(cond, Cond::B, line, "condition")?,
            "ae" => cond = put(cond, Cond::Ae, line, "condition")?,
            "s" => cond = put(cond, Cond::S, line, "condition")?,
            "ns" => cond = put(cond, Cond::Ns, line, "condition")?,
            "jmp" => wmode = put(wmode, WriteoutMode::Jump, line, "writeout mode")?,
            "call" => wmode = put(wmode, WriteoutMode::Call, line, "writeout mode")?,
            other => return Err(syntax(line, format!("unknown mnemonic suffix `.{other}`"))),
        }
    }
    return Ok((base, size, cond, wmode));

    fn put<T>(slot: Option<T>, v: T, line: usize, what: &str) -> Result<Option<T>, IsaError> {
        if slot.is_some() {
            Err(syntax(line, format!("duplicate {what}")))
        } else {
            Ok(Some(v))
        }
    }
}

fn parse_op_line(text: &str, line: usize) -> Result<OpLine, IsaError> {
    let mut it = text.splitn(2, char::is_whitespace);
    let mnem = it.next().unwrap();
    let rest = it.next().unwrap_or("").trim();
    let (base, size, cond, wmode) = split_mnemonic(mnem, line)?;
    let toks = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|p| parse_token(p.trim(), line))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(OpLine { base, size, cond, wmode, toks })
}

/// Resolves the op width: an explicit suffix must agree with every register
/// spelling; without a suffix the register spellings decide (and must agree
/// with each other); with neither, the default is w32.
fn resolve_width(explicit: Option<Width>, regs: &[Width], line: usize) -> Result<Width, IsaError> {
    let mut w = explicit;
    for rw in regs {
        match w {
            None => w = Some(*rw),
            Some(have) if have == *rw => {}
            Some(_) => {
                return Err(syntax(line, "register width does not match operand size"));
            }
        }
    }
    Ok(w.unwrap_or(Width::W32))
}

fn expect_reg(tok: &Token, line: usize) -> Result<(Reg, Width), IsaError> {
    match tok {
        Token::Reg(r, w) => Ok((*r, *w)),
        Token::Special(_) => Err(syntax(line, "internal registers are only readable with dbg")),
        Token::Num(_) => Err(syntax(line, "expected a register operand")),
    }
}

fn build_op(l: OpLine, line: usize) -> Result<MicroOp, IsaError> {
    let n = l.toks.len();
    let wrong = |want: &str| {
        Err(syntax(line, format!("`{}` expects {}", l.base, want)))
    };
    if l.cond.is_some() && l.base != "jcc" {
        return Err(syntax(line, "condition suffix is only valid on jcc"));
    }
    if l.wmode.is_some() && l.base != "writeout" {
        return Err(syntax(line, "jmp/call suffixes are only valid on writeout"));
    }

    // Gathers (registers, widths) then resolves the shared op width.
    macro_rules! reg_at {
        ($i:expr) => {
            expect_reg(&l.toks[$i], line)?
        };
    }
    let src2_of = |tok: &Token, line: usize| -> Result<(Src2, Option<Width>), IsaError> {
        Ok(match tok {
            Token::Reg(r, w) => (Src2::Reg(*r), Some(*w)),
            Token::Num(i) => (Src2::Imm(*i), None),
            Token::Special(_) => {
                return Err(syntax(line, "internal registers are only readable with dbg"))
            }
        })
    };

    let op = match l.base.as_str() {
        "nop" => {
            if n != 0 {
                return wrong("no operands");
            }
            if l.size.is_some() {
                return Err(syntax(line, "nop takes no size suffix"));
            }
            MicroOp::Nop
        }
        "mov" => {
            if n != 2 {
                return wrong("2 operands: dst, src");
            }
            let (dst, dw) = reg_at!(0);
            let (src, sw) = src2_of(&l.toks[1], line)?;
            let mut widths = vec![dw];
            widths.extend(sw);
            MicroOp::Mov { dst, src, size: resolve_width(l.size, &widths, line)? }
        }
        "add" | "sub" | "and" | "or" | "xor" | "sll" | "srl" => {
            let aop = match l.base.as_str() {
                "add" => AluOp::Add,
                "sub" => AluOp::Sub,
                "and" => AluOp::And,
                "or" => AluOp::Or,
                "xor" => AluOp::Xor,
                "sll" => AluOp::Sll,
                _ => AluOp::Srl,
            };
            let (dst, src1, src2, widths) = match n {
                // two-operand form aliases dst as src1
                2 => {
                    let (dst, dw) = reg_at!(0);
                    let (src2, sw) = src2_of(&l.toks[1], line)?;
                    (dst, dst, src2, {
                        let mut v = vec![dw];
                        v.extend(sw);
                        v
                    })
                }
                3 => {
                    let (dst, dw) = reg_at!(0);
                    let (src1, s1w) = reg_at!(1);
                    let (src2, sw) = src2_of(&l.toks[2], line)?;
                    (dst, src1, src2, {
                        let mut v = vec![dw, s1w];
                        v.extend(sw);
                        v
                    })
                }
                _ => return wrong("2 or 3 operands"),
            };
            let size = resolve_width(l.size, &widths, line)?;
            MicroOp::Alu { op: aop, dst, src1, src2, size }
        }
        "ld" | "st" => {
            let (a, aw) = match n {
                2 | 3 => reg_at!(0),
                _ => return wrong("2 or 3 operands"),
            };
            let (base, bw) = reg_at!(1);
            let (off, ow) = if n == 3 {
                src2_of(&l.toks[2], line)?
            } else {
                (Src2::Imm(0), None)
            };
            let mut widths = vec![aw, bw];
            widths.extend(ow);
            let size = resolve_width(l.size, &widths, line)?;
            if l.base == "ld" {
                MicroOp::Ld { dst: a, base, off, size }
            } else {
                MicroOp::St { src: a, base, off, size }
            }
        }
        "cmp" => {
            if n != 2 {
                return wrong("2 operands");
            }
            let (src1, w1) = reg_at!(0);
            let (src2, w2) = src2_of(&l.toks[1], line)?;
            let mut widths = vec![w1];
            widths.extend(w2);
            MicroOp::Cmp { src1, src2, size: resolve_width(l.size, &widths, line)? }
        }
        "jcc" | "jmp" => {
            if n != 1 {
                return wrong("1 operand: target triad address");
            }
            if l.size.is_some() {
                return Err(syntax(line, "jcc takes no size suffix"));
            }
            let cond = match (l.base.as_str(), l.cond) {
                ("jmp", None) => Cond::Always,
                ("jmp", Some(_)) => {
                    return Err(syntax(line, "jmp takes no condition; use jcc"))
                }
                ("jcc", Some(c)) => c,
                ("jcc", None) => {
                    return Err(syntax(line, "jcc needs a condition suffix, e.g. jcc.ne"))
                }
                _ => unreachable!(),
            };
            let target = match l.toks[0] {
                Token::Num(x) => x,
                _ => return Err(syntax(line, "jcc target must be a triad address")),
            };
            if target > FAULT_VECTOR_BOUND {
                return Err(syntax(line, format!("jcc target {target:#x} out of range")));
            }
            MicroOp::Jcc { cond, target }
        }
        "dbg" => {
            if n != 2 {
                return wrong("2 operands: dst, internal register");
            }
            let (dst, dw) = reg_at!(0);
            let src = match l.toks[1] {
                Token::Special(s) => s,
                _ => return Err(syntax(line, "dbg reads an internal register (TSC, NEXT_X86_IP, UFLAGS)")),
            };
            MicroOp::Dbg { dst, src, size: resolve_width(l.size, &[dw], line)? }
        }
        "writeout" => {
            if n != 1 {
                return wrong("1 operand: source register");
            }
            let (src, sw) = reg_at!(0);
            MicroOp::Writeout {
                mode: l.wmode.unwrap_or(WriteoutMode::Result),
                src,
                size: resolve_width(l.size, &[sw], line)?,
            }
        }
        other => return Err(syntax(line, format!("unknown mnemonic `{other}`"))),
    };
    op.validate()?;
    Ok(op)
}

/// Assembles RTL text into triads.
///
/// Grammar: one op per line; `;` starts a comment; `.q`/`.d`/`.w` size
/// suffixes (width may also be implied by register spellings); sequence
/// annotations `.sw_complete` and `.sw_branch <addr>`.
///
/// Ops are packed three per triad in order. A sequence annotation binds to
/// the triad owning the next op slot: the open partial triad when it appears
/// mid-triad, otherwise the triad started by the following op. An annotated
/// or incomplete final triad is padded with nops.
pub fn assemble(rtl_text: &str) -> Result<Vec<Triad>, IsaError> {
    let mut out = Vec::new();
    let mut cur: Vec<MicroOp> = Vec::new();
    let mut pending: Option<SequenceWord> = None;

    let mut close = |cur: &mut Vec<MicroOp>, pending: &mut Option<SequenceWord>| {
        while cur.len() < 3 {
            cur.push(MicroOp::Nop);
        }
        let ops = [cur[0], cur[1], cur[2]];
        cur.clear();
        out.push(Triad { ops, seq: pending.take().unwrap_or(SequenceWord::Next) });
    };

    for (idx, raw) in rtl_text.lines().enumerate() {
        let line = idx + 1;
        let text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix('.') {
            let mut it = rest.split_whitespace();
            let name = it.next().unwrap_or("");
            let seq = match name {
                "sw_complete" => {
                    if it.next().is_some() {
                        return Err(syntax(line, ".sw_complete takes no operand"));
                    }
                    SequenceWord::Complete
                }
                "sw_branch" => {
                    let arg = it
                        .next()
                        .ok_or_else(|| syntax(line, ".sw_branch needs a triad address"))?;
                    if it.next().is_some() {
                        return Err(syntax(line, ".sw_branch takes one operand"));
                    }
                    let target = parse_number(arg)
                        .filter(|n| *n < SEQ_TARGET_LIMIT as u64)
                        .ok_or_else(|| {
                            syntax(line, format!("bad .sw_branch target `{arg}`"))
                        })?;
                    SequenceWord::Branch(target as u16)
                }
                other => return Err(syntax(line, format!("unknown annotation `.{other}`"))),
            };
            if pending.is_some() {
                return Err(syntax(line, "duplicate sequence annotation for one triad"));
            }
            pending = Some(seq);
            continue;
        }
        cur.push(build_op(parse_op_line(text, line)?, line)?);
        if cur.len() == 3 {
            close(&mut cur, &mut pending);
        }
    }
    if !cur.is_empty() || pending.is_some() {
        close(&mut cur, &mut pending);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// disassembler

fn fmt_num(n: u16) -> String {
    if n < 10 {
        n.to_string()
    } else {
        format!("{n:#x}")
    }
}

fn fmt_src2(s: Src2, w: Width) -> String {
    match s {
        Src2::Reg(r) => r.name(w),
        Src2::Imm(i) => fmt_num(i),
    }
}

/// Canonical one-line rendering of a micro-op.
pub fn format_op(op: &MicroOp) -> String {
    // The size suffix is printed only when the register spellings do not
    // already carry it unambiguously, i.e. for non-w32 ops; w32 is default.
    let sized = |mnem: &str, w: Width, extra: Option<&str>| {
        let mut s = mnem.to_string();
        if let Some(e) = extra {
            s.push('.');
            s.push_str(e);
        }
        if w != Width::W32 {
            s.push('.');
            s.push_str(w.suffix());
        }
        s
    };
    match *op {
        MicroOp::Nop => "nop".to_string(),
        MicroOp::Mov { dst, src, size } => {
            format!("{} {}, {}", sized("mov", size, None), dst.name(size), fmt_src2(src, size))
        }
        MicroOp::Alu { op, dst, src1, src2, size } => format!(
            "{} {}, {}, {}",
            sized(op.mnemonic(), size, None),
            dst.name(size),
            src1.name(size),
            fmt_src2(src2, size)
        ),
        MicroOp::Ld { dst, base, off, size } => format!(
            "{} {}, {}, {}",
            sized("ld", size, None),
            dst.name(size),
            base.name(size),
            fmt_src2(off, size)
        ),
        MicroOp::St { src, base, off, size } => format!(
            "{} {}, {}, {}",
            sized("st", size, None),
            src.name(size),
            base.name(size),
            fmt_src2(off, size)
        ),
        MicroOp::Cmp { src1, src2, size } => format!(
            "{} {}, {}",
            sized("cmp", size, None),
            src1.name(size),
            fmt_src2(src2, size)
        ),
        MicroOp::Jcc { cond, target } => format!("jcc.{} {}", cond.name(), fmt_num(target)),
        MicroOp::Dbg { dst, src, size } => {
            format!("{} {}, {}", sized("dbg", size, None), dst.name(size), src.name())
        }
        MicroOp::Writeout { mode, src, size } => {
            let extra = match mode {
                WriteoutMode::Result => None,
                WriteoutMode::Jump => Some("jmp"),
                WriteoutMode::Call => Some("call"),
            };
            format!("{} {}", sized("writeout", size, extra), src.name(size))
        }
    }
}

/// Renders triads as canonical RTL; `assemble(disassemble(t)) == t`.
///
/// Sequence annotations bind forward, so a triad's annotation is printed
/// before its three op lines. Nop padding is rendered explicitly.
pub fn disassemble(triads: &[Triad]) -> String {
    let mut out = String::new();
    for t in triads {
        match t.seq {
            SequenceWord::Next => {}
            SequenceWord::Complete => out.push_str(".sw_complete\n"),
            SequenceWord::Branch(target) => {
                let _ = writeln!(out, ".sw_branch {}", fmt_num(target));
            }
        }
        for op in &t.ops {
            out.push_str(&format_op(op));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nop_is_all_zero() {
        assert_eq!(encode_op(&MicroOp::Nop).unwrap(), 0);
        assert_eq!(decode_op(0).unwrap(), MicroOp::Nop);
    }

    #[test]
    fn field_layout_golden_words() {
        // Derived by hand from the documented bit layout.
        let add = MicroOp::Alu {
            op: AluOp::Add,
            dst: t(1),
            src1: t(1),
            src2: Src2::Imm(1),
            size: Width::W32,
        };
        assert_eq!(encode_op(&add).unwrap(), 0x0224_9008_0000_0001);
        let srl = MicroOp::Alu {
            op: AluOp::Srl,
            dst: EDX,
            src1: t(9),
            src2: Src2::Imm(32),
            size: Width::W64,
        };
        assert_eq!(encode_op(&srl).unwrap(), 0x0809_1018_0000_0020);
        let mov = MicroOp::Mov { dst: t(1), src: Src2::Imm(0xFFFF), size: Width::W32 };
        assert_eq!(encode_op(&mov).unwrap(), 0x0124_9008_0000_FFFF);
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        let e = decode_op(0xFF00_0000_0000_0000).unwrap_err();
        assert!(matches!(e, IsaError::UnrecognizedOperation { .. }));
    }

    #[test]
    fn esp_ebp_rejected_in_text_and_bits() {
        assert!(assemble("mov esp, 1").is_err());
        assert!(assemble("add ebp, ebp, 1").is_err());
        // Register field 4 (= esp) in a mov dst: invalid encoding.
        let word = (0x01u64 << 56) | (4 << 50) | (4 << 44) | (1 << 35) | 1;
        assert!(decode_op(word).is_err());
    }

    #[test]
    fn annotation_binds_forward() {
        // At a triad boundary the annotation marks the *following* triad.
        let t3 = assemble(
            "mov t1d, 1\nmov t2d, 2\nmov t3d, 3\n.sw_complete\nadd t1d, 1\nadd t2d, 2\nadd t3d, 3\n",
        )
        .unwrap();
        assert_eq!(t3.len(), 2);
        assert_eq!(t3[0].seq, SequenceWord::Next);
        assert_eq!(t3[1].seq, SequenceWord::Complete);
        // Mid-triad the annotation marks the open triad.
        let t4 = assemble("mov t1d, 1\n.sw_complete\nmov t2d, 2\nmov t3d, 3\n").unwrap();
        assert_eq!(t4.len(), 1);
        assert_eq!(t4[0].seq, SequenceWord::Complete);
    }

    #[test]
    fn width_inference_from_register_names() {
        let ts = assemble("dbg t9q, TSC").unwrap();
        assert_eq!(
            ts[0].ops[0],
            MicroOp::Dbg { dst: t(9), src: Special::Tsc, size: Width::W64 }
        );
        assert!(assemble("srl.q edx, t9q, 32").is_err());
        assert!(assemble("add t1d, t2q, 3").is_err());
    }
}
