//! The microcode engine emulator coupled to an x86-subset host.
//!
//! A [`Machine`] holds host state (GPRs, flags, flat memory, TSC), engine
//! state (22 temporaries, logical ROM, patch RAM, match registers, entry
//! table), and a deterministic [`CycleModel`]. Microcoded instructions
//! marshal their operands into temporaries, run triads from their entry
//! point, and write results back through `writeout`; everything else
//! executes hardwired.
//!
//! Match registers are consulted before every ROM fetch (entry, fall
//! through, and branch targets alike); a hit redirects fetch into patch RAM
//! at 0xF00 + ram_index. Patch RAM fetches are never redirected.
//!
//! Trace format: `addr | mnemonic | cycles | ucode_triads | flags`, flags
//! rendered as three characters (Z/C/S or `-`), with `*` appended when the
//! instruction redirected x86 control flow.

pub mod x86;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ucode_isa::{
    AluOp, Cond, MicroOp, Reg, SequenceWord, Special, Src2, Triad, Width, WriteoutMode,
    FAULT_VECTOR_ACCESS, FAULT_VECTOR_BOUND, NUM_TEMPS,
};
use x86::{Mnemonic, Operand, X86Cond, X86Instr};

/// Host memory size (flat, based at 0).
pub const MEM_SIZE: usize = 1 << 20;
/// Initial stack pointer.
pub const STACK_TOP: u32 = 0x7_FF00;
/// Default triad budget before a microcode run counts as locked up.
pub const DEFAULT_BUDGET: usize = 4096;
/// Writing this MSR triggers the microcode update loader; the value is the
/// address of the update bytes in host memory.
pub const UPDATE_TRIGGER_MSR: u32 = 0xC001_0020;
/// Number of match registers.
pub const NUM_MATCH_REGS: usize = 4;

/// Stock entry points of the microcoded instructions.
pub const RDTSC_ENTRY: u16 = 0x318;
pub const SHRD_ENTRY: u16 = 0x3C0;
pub const BOUND_ENTRY: u16 = 0x480;
pub const WRMSR_ENTRY: u16 = 0x560;

const ROM_TRIADS: usize = 0xF00;
const PATCH_RAM_BASE: u16 = 0xF00;
const PATCH_RAM_LEN: usize = 32;

/// Registers changed by a triad or microcode run, with their new values.
/// Keys span the six usable GPRs and the 22 temporaries.
pub type Changeset = BTreeMap<Reg, u64>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("microcode lockup: {budget}-triad budget exhausted from entry {entry:#x}")]
    Lockup { entry: u16, budget: usize },
    #[error("no microcode at address {addr:#x}")]
    BadAddress { addr: u16 },
    #[error("x86 parse error: {0}")]
    Parse(#[from] x86::X86Error),
    #[error("measurement harness faulted on `{0}`")]
    MeasureFault(String),
    #[error("update rejected: {0}")]
    UpdateRejected(String),
}

/// Host-visible microcode exception record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub addr: u32,
    pub size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    AccessViolation,
    BoundRange,
}

/// Control transfer out of microcode into x86 flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct X86Redirect {
    pub push_ip: bool,
    pub target: u32,
}

/// Result of one microcode run.
#[derive(Debug, Clone)]
pub struct MicrocodeResult {
    pub changeset: Changeset,
    pub triads_executed: usize,
    pub entered_ram: bool,
    pub fault: Option<Fault>,
    pub redirect: Option<X86Redirect>,
    /// Value handed back by the last result-mode `writeout`.
    pub writeback: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HostFlags {
    pub zf: bool,
    pub cf: bool,
    pub sf: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostState {
    pub gpr: [u32; 8],
    /// Instruction index, not a byte address.
    pub eip: u32,
    pub flags: HostFlags,
    pub memory: Vec<u8>,
    pub tsc: u64,
}

impl HostState {
    pub fn new() -> HostState {
        let mut h = HostState {
            gpr: [0; 8],
            eip: 0,
            flags: HostFlags::default(),
            memory: vec![0; MEM_SIZE],
            tsc: 0,
        };
        h.gpr[x86::ESP as usize] = STACK_TOP;
        h
    }
}

impl Default for HostState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchRegister {
    pub rom_addr: u16,
    pub ram_index: u8,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    pub temps: [u64; NUM_TEMPS as usize],
    /// Logical ROM image, 0xF00 triads.
    pub rom: Vec<Triad>,
    pub patch_ram: [Triad; PATCH_RAM_LEN],
    pub match_regs: [MatchRegister; NUM_MATCH_REGS],
    /// Microcoded entry points; mnemonics absent here are hardwired.
    pub entry_table: BTreeMap<Mnemonic, u16>,
    pub msr: BTreeMap<u32, u64>,
    /// Microcode flags (bit 0 zf, bit 1 cf, bit 2 sf), set by `cmp`.
    pub uflags: u8,
    /// Installed update-verification key (modeling the boot-time update).
    pub verify_key: Option<crate::update::TeaKey>,
}

impl EngineState {
    fn new(rom: Vec<Triad>) -> EngineState {
        assert_eq!(rom.len(), ROM_TRIADS);
        EngineState {
            temps: [0; NUM_TEMPS as usize],
            rom,
            patch_ram: [Triad::nop(); PATCH_RAM_LEN],
            match_regs: [MatchRegister::default(); NUM_MATCH_REGS],
            entry_table: BTreeMap::new(),
            msr: BTreeMap::new(),
            uflags: 0,
            verify_key: None,
        }
    }
}

/// Deterministic cost model. Microcoded instruction cost =
/// dispatch + per_triad * triads + ram_switch (when patch RAM ran);
/// hardwired cost comes from the per-mnemonic table (default 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleModel {
    pub hardwired_cost: BTreeMap<Mnemonic, u64>,
    pub dispatch_cost: u64,
    pub per_triad_cost: u64,
    pub ram_switch_penalty: u64,
    /// Fixed cost of the measurement harness instructions between the two
    /// TSC reads on a stock machine.
    pub measurement_overhead: u64,
}

impl Default for CycleModel {
    fn default() -> CycleModel {
        CycleModel {
            hardwired_cost: BTreeMap::from([(Mnemonic::Cpuid, 57), (Mnemonic::Shrd, 2)]),
            dispatch_cost: 1,
            per_triad_cost: 1,
            ram_switch_penalty: 4,
            measurement_overhead: 65,
        }
    }
}

impl CycleModel {
    fn hardwired(&self, m: Mnemonic) -> u64 {
        self.hardwired_cost.get(&m).copied().unwrap_or(1)
    }
}

/// Outcome of dispatching one x86 instruction.
#[derive(Debug, Clone, Copy)]
pub struct InstrOutcome {
    pub cycles: u64,
    pub ucode_triads: usize,
    pub fault: Option<Fault>,
    pub redirected: bool,
    pub halt: bool,
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub index: u32,
    pub text: String,
    pub cycles: u64,
    pub ucode_triads: usize,
    pub flags: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Halt,
    End,
    Fault,
    InstructionBudget,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceEntry>,
    pub total_cycles: u64,
    pub fault: Option<Fault>,
    pub stop: StopReason,
}

impl RunResult {
    /// `addr | mnemonic | cycles | ucode_triads | flags` per line.
    pub fn format_trace(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&format!(
                "{:04x} | {} | {} | {} | {}\n",
                e.index, e.text, e.cycles, e.ucode_triads, e.flags
            ));
        }
        out
    }
}

#[derive(Default)]
struct MicroOut {
    writeback: Option<u64>,
    redirect: Option<X86Redirect>,
}

/// One engine+host pair with its cycle model.
#[derive(Debug, Clone)]
pub struct Machine {
    pub host: HostState,
    pub engine: EngineState,
    pub cycles: CycleModel,
}

impl Machine {
    /// Machine with the given logical ROM image and an empty entry table
    /// (every instruction hardwired).
    pub fn with_rom(rom: Vec<Triad>) -> Machine {
        Machine { host: HostState::new(), engine: EngineState::new(rom), cycles: CycleModel::default() }
    }

    /// Minimal machine whose ROM is all nop/complete triads.
    pub fn bare() -> Machine {
        let idle = Triad { ops: [MicroOp::Nop; 3], seq: SequenceWord::Complete };
        Machine::with_rom(vec![idle; ROM_TRIADS])
    }

    /// Machine with the stock ROM: rdtsc, shrd, bound, and wrmsr microcoded
    /// at their fixed entry points, everything else hardwired.
    pub fn stock() -> Machine {
        let mut m = Machine::with_rom(stock_rom());
        m.engine.entry_table = BTreeMap::from([
            (Mnemonic::Rdtsc, RDTSC_ENTRY),
            (Mnemonic::Shrd, SHRD_ENTRY),
            (Mnemonic::Bound, BOUND_ENTRY),
            (Mnemonic::Wrmsr, WRMSR_ENTRY),
        ]);
        m
    }

    // -- register access ----------------------------------------------------

    /// Reads a tracked register as a 64-bit value (GPRs zero-extended).
    pub fn get_reg(&self, r: Reg) -> u64 {
        match r {
            Reg::Gpr(i) => self.host.gpr[i as usize] as u64,
            Reg::Temp(i) => self.engine.temps[i as usize],
        }
    }

    /// Writes a tracked register (GPRs truncate to 32 bits).
    pub fn set_reg(&mut self, r: Reg, v: u64) {
        match r {
            Reg::Gpr(i) => self.host.gpr[i as usize] = v as u32,
            Reg::Temp(i) => self.engine.temps[i as usize] = v,
        }
    }

    fn read_width(&self, r: Reg, w: Width) -> u64 {
        self.get_reg(r) & w.mask()
    }

    /// A write at width `w` stores the w-bit value zero-extended.
    fn write_width(&mut self, r: Reg, v: u64, w: Width) {
        self.set_reg(r, v & w.mask());
    }

    fn src2_value(&self, s: Src2, w: Width) -> u64 {
        match s {
            Src2::Reg(r) => self.read_width(r, w),
            Src2::Imm(i) => i as u64,
        }
    }

    fn snapshot_regs(&self) -> ([u32; 8], [u64; NUM_TEMPS as usize]) {
        (self.host.gpr, self.engine.temps)
    }

    fn diff_regs(&self, before: &([u32; 8], [u64; NUM_TEMPS as usize])) -> Changeset {
        let mut cs = Changeset::new();
        for i in [0u8, 1, 2, 3, 6, 7] {
            if self.host.gpr[i as usize] != before.0[i as usize] {
                cs.insert(Reg::Gpr(i), self.host.gpr[i as usize] as u64);
            }
        }
        for j in 0..NUM_TEMPS {
            if self.engine.temps[j as usize] != before.1[j as usize] {
                cs.insert(Reg::Temp(j), self.engine.temps[j as usize]);
            }
        }
        cs
    }

    // -- host memory --------------------------------------------------------

    fn mem_access(&self, addr: u64, bytes: u32) -> Result<usize, Fault> {
        let end = addr.checked_add(bytes as u64);
        match end {
            Some(end) if end <= self.host.memory.len() as u64 => Ok(addr as usize),
            _ => Err(Fault { kind: FaultKind::AccessViolation, addr: addr as u32, size: bytes }),
        }
    }

    pub fn read_mem(&self, addr: u64, w: Width) -> Result<u64, Fault> {
        let bytes = w.bits() / 8;
        let a = self.mem_access(addr, bytes)?;
        let mut buf = [0u8; 8];
        buf[..bytes as usize].copy_from_slice(&self.host.memory[a..a + bytes as usize]);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_mem(&mut self, addr: u64, v: u64, w: Width) -> Result<(), Fault> {
        let bytes = w.bits() / 8;
        let a = self.mem_access(addr, bytes)?;
        self.host.memory[a..a + bytes as usize]
            .copy_from_slice(&v.to_le_bytes()[..bytes as usize]);
        Ok(())
    }

    fn read_mem32(&self, addr: u32) -> Result<u32, Fault> {
        Ok(self.read_mem(addr as u64, Width::W32)? as u32)
    }

    fn write_mem32(&mut self, addr: u32, v: u32) -> Result<(), Fault> {
        self.write_mem(addr as u64, v as u64, Width::W32)
    }

    // -- micro-op execution -------------------------------------------------

    fn ucond(&self, c: Cond) -> bool {
        let zf = self.engine.uflags & 1 != 0;
        let cf = self.engine.uflags & 2 != 0;
        let sf = self.engine.uflags & 4 != 0;
        match c {
            Cond::Always => true,
            Cond::E => zf,
            Cond::Ne => !zf,
            Cond::B => cf,
            Cond::Ae => !cf,
            Cond::S => sf,
            Cond::Ns => !sf,
        }
    }

    fn fault_at_vector(&self, vector: u16) -> Fault {
        let kind = if vector == FAULT_VECTOR_BOUND {
            FaultKind::BoundRange
        } else {
            FaultKind::AccessViolation
        };
        Fault { kind, addr: self.engine.temps[0] as u32, size: self.engine.temps[2] as u32 }
    }

    fn exec_op(&mut self, op: &MicroOp, out: &mut MicroOut) -> Result<Option<u16>, Fault> {
        match *op {
            MicroOp::Nop => {}
            MicroOp::Mov { dst, src, size } => {
                let v = self.src2_value(src, size);
                self.write_width(dst, v, size);
            }
            MicroOp::Alu { op, dst, src1, src2, size } => {
                let a = self.read_width(src1, size);
                let b = self.src2_value(src2, size);
                let shift_mask = (size.bits() - 1) as u64;
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Xor => a ^ b,
                    AluOp::Sll => a << (b & shift_mask),
                    AluOp::Srl => a >> (b & shift_mask),
                };
                self.write_width(dst, v, size);
            }
            MicroOp::Ld { dst, base, off, size } => {
                // Addresses are computed at full register width; the op
                // size selects only the transfer width.
                let addr = self.get_reg(base).wrapping_add(match off {
                    Src2::Reg(r) => self.get_reg(r),
                    Src2::Imm(i) => i as u64,
                });
                let v = self.read_mem(addr, size)?;
                self.write_width(dst, v, size);
            }
            MicroOp::St { src, base, off, size } => {
                let addr = self.get_reg(base).wrapping_add(match off {
                    Src2::Reg(r) => self.get_reg(r),
                    Src2::Imm(i) => i as u64,
                });
                let v = self.read_width(src, size);
                self.write_mem(addr, v, size)?;
            }
            MicroOp::Cmp { src1, src2, size } => {
                let a = self.read_width(src1, size);
                let b = self.src2_value(src2, size);
                let diff = a.wrapping_sub(b) & size.mask();
                let zf = diff == 0;
                let cf = a < b;
                let sf = diff >> (size.bits() - 1) & 1 != 0;
                self.engine.uflags = zf as u8 | (cf as u8) << 1 | (sf as u8) << 2;
            }
            MicroOp::Jcc { cond, target } => {
                if self.ucond(cond) {
                    if target >= FAULT_VECTOR_ACCESS {
                        return Err(self.fault_at_vector(target));
                    }
                    return Ok(Some(target));
                }
            }
            MicroOp::Dbg { dst, src, size } => {
                let v = match src {
                    Special::Tsc => self.host.tsc,
                    Special::NextX86Ip => self.host.eip as u64 + 1,
                    Special::Uflags => self.engine.uflags as u64,
                };
                self.write_width(dst, v, size);
            }
            MicroOp::Writeout { mode, src, size } => {
                let v = self.read_width(src, size);
                match mode {
                    WriteoutMode::Result => out.writeback = Some(v),
                    WriteoutMode::Jump => {
                        out.redirect = Some(X86Redirect { push_ip: false, target: v as u32 })
                    }
                    WriteoutMode::Call => {
                        out.redirect = Some(X86Redirect { push_ip: true, target: v as u32 })
                    }
                }
            }
        }
        Ok(None)
    }

    /// Executes all three ops in order; a fault aborts the remainder. The
    /// first taken `jcc` decides the next fetch, overriding the sequence
    /// word, but later ops in the triad still run.
    fn exec_triad(&mut self, t: &Triad, out: &mut MicroOut) -> Result<Option<u16>, Fault> {
        let mut jump = None;
        for op in &t.ops {
            if let Some(target) = self.exec_op(op, out)? {
                jump.get_or_insert(target);
            }
        }
        Ok(jump)
    }

    /// Executes one triad against a scratch copy of the register state and
    /// returns the strict value diff. Registers are restored afterwards;
    /// memory effects of ld/st persist; a fault stops the remaining ops and
    /// yields the partial diff.
    pub fn step_triad(&mut self, t: &Triad) -> Changeset {
        let before = self.snapshot_regs();
        let uflags = self.engine.uflags;
        let mut out = MicroOut::default();
        let _ = self.exec_triad(t, &mut out);
        let cs = self.diff_regs(&before);
        self.host.gpr = before.0;
        self.engine.temps = before.1;
        self.engine.uflags = uflags;
        cs
    }

    fn fetch(&self, addr: u16) -> Result<Triad, EngineError> {
        if (addr as usize) < ROM_TRIADS {
            Ok(self.engine.rom[addr as usize])
        } else if addr < PATCH_RAM_BASE + PATCH_RAM_LEN as u16 {
            Ok(self.engine.patch_ram[(addr - PATCH_RAM_BASE) as usize])
        } else {
            Err(EngineError::BadAddress { addr })
        }
    }

    /// Match registers intercept ROM fetches only.
    fn match_redirect(&self, addr: u16) -> u16 {
        if addr < PATCH_RAM_BASE {
            for mr in &self.engine.match_regs {
                if mr.enabled && mr.rom_addr == addr {
                    return PATCH_RAM_BASE + mr.ram_index as u16;
                }
            }
        }
        addr
    }

    /// Runs microcode from a logical entry address until a complete
    /// sequence word, a fault, or budget exhaustion (lockup).
    pub fn run_entry(&mut self, entry: u16, budget: usize) -> Result<MicrocodeResult, EngineError> {
        let before = self.snapshot_regs();
        let mut out = MicroOut::default();
        let mut triads = 0usize;
        let mut entered_ram = false;
        let mut fault = None;
        let mut addr = self.match_redirect(entry);
        loop {
            if triads == budget {
                return Err(EngineError::Lockup { entry, budget });
            }
            let triad = self.fetch(addr)?;
            if addr >= PATCH_RAM_BASE {
                entered_ram = true;
            }
            triads += 1;
            match self.exec_triad(&triad, &mut out) {
                Err(f) => {
                    fault = Some(f);
                    break;
                }
                Ok(Some(target)) => addr = self.match_redirect(target),
                Ok(None) => match triad.seq {
                    SequenceWord::Next => addr = self.match_redirect(addr + 1),
                    SequenceWord::Branch(t) => addr = self.match_redirect(t),
                    SequenceWord::Complete => break,
                },
            }
        }
        Ok(MicrocodeResult {
            changeset: self.diff_regs(&before),
            triads_executed: triads,
            entered_ram,
            fault,
            redirect: out.redirect,
            writeback: out.writeback,
        })
    }

    /// Loads the probe state, forces execution of exactly the one triad at
    /// a logical address, and returns its changeset. Addresses that fault,
    /// branch onward, or fall through (budget 1) are excluded as `None`.
    pub fn probe_address(&mut self, addr: u16, probe: &[(Reg, u64)]) -> Option<Changeset> {
        for (r, v) in probe {
            self.set_reg(*r, *v);
        }
        self.engine.uflags = 0;
        match self.run_entry(addr, 1) {
            Ok(res) if res.fault.is_none() => Some(res.changeset),
            _ => None,
        }
    }

    // -- x86 dispatch -------------------------------------------------------

    fn operand_value(&self, op: &Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.host.gpr[*r as usize],
            Operand::Imm(i) => *i,
            Operand::Mem(_) => 0,
        }
    }

    fn mem_ref_addr(&self, m: &x86::MemRef) -> u32 {
        m.base
            .map(|b| self.host.gpr[b as usize])
            .unwrap_or(0)
            .wrapping_add(m.disp)
    }

    fn set_alu_flags(&mut self, result: u32, cf: bool) {
        self.host.flags.zf = result == 0;
        self.host.flags.cf = cf;
        self.host.flags.sf = result >> 31 != 0;
    }

    fn host_cond(&self, c: X86Cond) -> bool {
        let f = &self.host.flags;
        match c {
            X86Cond::E => f.zf,
            X86Cond::Ne => !f.zf,
            X86Cond::B => f.cf,
            X86Cond::Ae => !f.cf,
            X86Cond::S => f.sf,
            X86Cond::Ns => !f.sf,
        }
    }

    fn push32(&mut self, v: u32) -> Result<(), Fault> {
        let esp = self.host.gpr[x86::ESP as usize].wrapping_sub(4);
        self.write_mem32(esp, v)?;
        self.host.gpr[x86::ESP as usize] = esp;
        Ok(())
    }

    fn pop32(&mut self) -> Result<u32, Fault> {
        let esp = self.host.gpr[x86::ESP as usize];
        let v = self.read_mem32(esp)?;
        self.host.gpr[x86::ESP as usize] = esp.wrapping_add(4);
        Ok(v)
    }

    /// Dispatches one instruction: hardwired semantics or a microcode run,
    /// per the entry table. Advances eip and the TSC.
    pub fn dispatch(&mut self, instr: &X86Instr) -> Result<InstrOutcome, EngineError> {
        if let Some(entry) = self.engine.entry_table.get(&instr.mnemonic).copied() {
            self.dispatch_microcoded(instr, entry)
        } else {
            self.dispatch_hardwired(instr)
        }
    }

    fn finish(
        &mut self,
        next_eip: u32,
        cycles: u64,
        triads: usize,
        fault: Option<Fault>,
        redirected: bool,
        halt: bool,
    ) -> Result<InstrOutcome, EngineError> {
        if fault.is_none() {
            self.host.eip = next_eip;
        }
        self.host.tsc += cycles;
        Ok(InstrOutcome { cycles, ucode_triads: triads, fault, redirected, halt })
    }

    fn dispatch_hardwired(&mut self, instr: &X86Instr) -> Result<InstrOutcome, EngineError> {
        use Mnemonic::*;
        let cycles = self.cycles.hardwired(instr.mnemonic);
        let mut next = self.host.eip + 1;
        let mut halt = false;
        let ops = &instr.operands[..];
        let mut fault = None;
        let mut run = || -> Result<(), Fault> {
            match (instr.mnemonic, ops) {
                (Mov, [Operand::Reg(d), src]) => {
                    let v = match src {
                        Operand::Mem(m) => self.read_mem32(self.mem_ref_addr(m))?,
                        _ => self.operand_value(src),
                    };
                    self.host.gpr[*d as usize] = v;
                }
                (Mov, [Operand::Mem(m), Operand::Reg(s)]) => {
                    self.write_mem32(self.mem_ref_addr(m), self.host.gpr[*s as usize])?;
                }
                (Add | Sub | And | Or | Xor | Cmp, [Operand::Reg(d), src]) => {
                    let a = self.host.gpr[*d as usize];
                    let b = self.operand_value(src);
                    let (r, cf) = match instr.mnemonic {
                        Add => a.overflowing_add(b),
                        Sub | Cmp => a.overflowing_sub(b),
                        And => (a & b, false),
                        Or => (a | b, false),
                        _ => (a ^ b, false),
                    };
                    self.set_alu_flags(r, cf);
                    if instr.mnemonic != Cmp {
                        self.host.gpr[*d as usize] = r;
                    }
                }
                (Shl | Shr, [Operand::Reg(d), Operand::Imm(n)]) => {
                    let a = self.host.gpr[*d as usize];
                    let n = n & 31;
                    let r = if instr.mnemonic == Shl { a << n } else { a >> n };
                    self.set_alu_flags(r, false);
                    self.host.gpr[*d as usize] = r;
                }
                (Jmp, [Operand::Imm(t)]) => next = *t,
                (Jcc, [Operand::Imm(t)]) => {
                    if self.host_cond(instr.cond.expect("jcc carries a condition")) {
                        next = *t;
                    }
                }
                (Push, [src]) => self.push32(self.operand_value(src))?,
                (Pop, [Operand::Reg(d)]) => {
                    let v = self.pop32()?;
                    self.host.gpr[*d as usize] = v;
                }
                (Call, [Operand::Imm(t)]) => {
                    self.push32(next)?;
                    next = *t;
                }
                (Ret, []) => next = self.pop32()?,
                (Xchg, [Operand::Reg(a), Operand::Reg(b)]) => {
                    self.host.gpr.swap(*a as usize, *b as usize);
                }
                (Cpuid, []) => {
                    for r in [x86::EAX, x86::EBX, x86::ECX, x86::EDX] {
                        self.host.gpr[r as usize] = 0;
                    }
                }
                (Hlt, []) => halt = true,
                // A hardwired dispatch of a normally microcoded mnemonic
                // (emptied entry table) falls back to direct semantics for
                // rdtsc and is rejected otherwise.
                (Rdtsc, []) => {
                    self.host.gpr[x86::EAX as usize] = self.host.tsc as u32;
                    self.host.gpr[x86::EDX as usize] = (self.host.tsc >> 32) as u32;
                }
                _ => {
                    return Err(Fault {
                        kind: FaultKind::AccessViolation,
                        addr: self.host.eip,
                        size: 0,
                    })
                }
            }
            Ok(())
        };
        if let Err(f) = run() {
            fault = Some(f);
        }
        self.finish(next, cycles, 0, fault, false, halt)
    }

    fn dispatch_microcoded(
        &mut self,
        instr: &X86Instr,
        entry: u16,
    ) -> Result<InstrOutcome, EngineError> {
        let mut next = self.host.eip + 1;

        // Marshal operands: t0 = first operand value, t1 = second register
        // operand value, t2 = immediate or displacement, t3 = t1:t0 packed,
        // t4 = memory base register value. wrmsr uses its implicit
        // ecx/eax/edx operands instead.
        let (t0, t1, mut t2, t4) = if instr.mnemonic == Mnemonic::Wrmsr {
            (
                self.host.gpr[x86::ECX as usize],
                self.host.gpr[x86::EAX as usize],
                self.host.gpr[x86::EDX as usize],
                0,
            )
        } else {
            let mut vals = (0u32, 0u32, 0u32, 0u32);
            if let Some(op) = instr.operands.first() {
                vals.0 = self.operand_value(op);
            }
            for (i, op) in instr.operands.iter().enumerate() {
                match op {
                    Operand::Reg(_) if i == 1 => vals.1 = self.operand_value(op),
                    Operand::Imm(v) if i > 0 => vals.2 = *v,
                    Operand::Mem(m) => {
                        vals.2 = m.disp;
                        vals.3 = m.base.map(|b| self.host.gpr[b as usize]).unwrap_or(0);
                    }
                    _ => {}
                }
            }
            (vals.0, vals.1, vals.2, vals.3)
        };
        if instr.mnemonic == Mnemonic::Shrd {
            t2 &= 31;
        }
        self.engine.temps[0] = t0 as u64;
        self.engine.temps[1] = t1 as u64;
        self.engine.temps[2] = t2 as u64;
        self.engine.temps[3] = (t1 as u64) << 32 | t0 as u64;
        self.engine.temps[4] = t4 as u64;
        let msr_index = self.host.gpr[x86::ECX as usize];

        let res = self.run_entry(entry, DEFAULT_BUDGET)?;
        let mut cycles = self.cycles.dispatch_cost
            + self.cycles.per_triad_cost * res.triads_executed as u64
            + if res.entered_ram { self.cycles.ram_switch_penalty } else { 0 };

        let mut fault = res.fault;
        let mut redirected = false;
        if fault.is_none() {
            if let Some(r) = res.redirect {
                if r.push_ip {
                    if let Err(f) = self.push32(next) {
                        fault = Some(f);
                    }
                }
                if fault.is_none() {
                    next = r.target;
                    redirected = true;
                }
            } else if let Some(wb) = res.writeback {
                if let Some(Operand::Reg(d)) = instr.operands.first() {
                    self.host.gpr[*d as usize] = wb as u32;
                }
            }
        }

        // The wrmsr commit: the microcode leaves the packed value in t3.
        // Writing the trigger MSR points the loader at update bytes in host
        // memory; application cost is added to this dispatch.
        if instr.mnemonic == Mnemonic::Wrmsr && fault.is_none() {
            let value = self.engine.temps[3];
            self.engine.msr.insert(msr_index, value);
            if msr_index == UPDATE_TRIGGER_MSR {
                match crate::update::apply_update_at(self, value as u32) {
                    Ok(c) => cycles += c,
                    Err(_) => {
                        fault = Some(Fault {
                            kind: FaultKind::AccessViolation,
                            addr: value as u32,
                            size: 0,
                        })
                    }
                }
            }
        }

        self.finish(next, cycles, res.triads_executed, fault, redirected, false)
    }

    /// Runs a program (eip = instruction index) until completion, hlt, a
    /// fault, or the instruction budget.
    pub fn run_program(&mut self, program: &[X86Instr], max_instrs: usize) -> RunResult {
        let mut trace = Vec::new();
        let mut total = 0u64;
        for _ in 0..max_instrs {
            let Some(instr) = program.get(self.host.eip as usize) else {
                return RunResult { trace, total_cycles: total, fault: None, stop: StopReason::End };
            };
            let index = self.host.eip;
            let outcome = match self.dispatch(instr) {
                Ok(o) => o,
                Err(e) => {
                    // Engine-level errors (lockup, bad fetch) surface as an
                    // access-violation fault record at the instruction.
                    let _ = e;
                    let fault =
                        Some(Fault { kind: FaultKind::AccessViolation, addr: index, size: 0 });
                    return RunResult { trace, total_cycles: total, fault, stop: StopReason::Fault };
                }
            };
            total += outcome.cycles;
            let f = &self.host.flags;
            let mut flags = format!(
                "{}{}{}",
                if f.zf { 'Z' } else { '-' },
                if f.cf { 'C' } else { '-' },
                if f.sf { 'S' } else { '-' }
            );
            if outcome.redirected {
                flags.push('*');
            }
            trace.push(TraceEntry {
                index,
                text: instr.text.clone(),
                cycles: outcome.cycles,
                ucode_triads: outcome.ucode_triads,
                flags,
            });
            if let Some(f) = outcome.fault {
                return RunResult { trace, total_cycles: total, fault: Some(f), stop: StopReason::Fault };
            }
            if outcome.halt {
                return RunResult { trace, total_cycles: total, fault: None, stop: StopReason::Halt };
            }
        }
        RunResult { trace, total_cycles: total, fault: None, stop: StopReason::InstructionBudget }
    }

    /// Runs a single instruction through the timing harness twice (with and
    /// without it) and returns the cycle delta between the two TSC reads.
    /// On a stock machine the empty-harness delta equals
    /// `measurement_overhead`; measuring against the live baseline keeps
    /// the result equal to the instruction's dispatch cost even when an
    /// update changes the baseline instructions themselves.
    pub fn measure_instruction(&self, instr_text: &str) -> Result<i64, EngineError> {
        let run = |with: bool| -> Result<u32, EngineError> {
            let body = if with { instr_text } else { "" };
            let text = format!(
                "xor eax, eax\nxor edi, edi\ncpuid\nrdtsc\nxchg edi, eax\n{body}\ncpuid\nrdtsc\nsub eax, edi\n"
            );
            let prog = x86::parse_program(&text, &BTreeMap::new())?;
            let mut m = self.clone();
            let res = m.run_program(&prog, 10_000);
            if res.fault.is_some() || res.stop != StopReason::End {
                return Err(EngineError::MeasureFault(instr_text.to_string()));
            }
            Ok(m.host.gpr[x86::EAX as usize])
        };
        Ok(run(true)? as i64 - run(false)? as i64)
    }
}

/// The stock logical ROM: idle triads everywhere except the four microcoded
/// entry points. Triad counts are calibrated so modeled costs land on the
/// stock cycle figures (rdtsc 6 triads -> 7 cycles, shrd 1 triad -> 2).
fn stock_rom() -> Vec<Triad> {
    let idle = Triad { ops: [MicroOp::Nop; 3], seq: SequenceWord::Complete };
    let mut rom = vec![idle; ROM_TRIADS];
    let place = |rom: &mut Vec<Triad>, entry: u16, text: &str| {
        let triads = crate::ucode_isa::assemble(text).expect("stock ROM assembles");
        for (i, t) in triads.into_iter().enumerate() {
            rom[entry as usize + i] = t;
        }
    };
    // rdtsc: TSC -> t9, split into edx:eax, padded to six triads.
    place(
        &mut rom,
        RDTSC_ENTRY,
        "dbg.q t9q, TSC\nnop\nnop\n\
         srl.q rdx, t9q, 32\nsrl.q rax, t9q, 0\nnop\n\
         nop\nnop\nnop\n\
         nop\nnop\nnop\n\
         nop\nnop\nnop\n\
         .sw_complete\nnop\nnop\nnop\n",
    );
    // shrd: t3 = src:dst (marshalled), shifted by the masked count in t2;
    // the low half is the result.
    place(
        &mut rom,
        SHRD_ENTRY,
        ".sw_complete\nsrl.q t3q, t3q, t2q\nwriteout t3d\nnop\n",
    );
    // bound: t5/t7 = lower/upper bound from [t4+t2], value in t0;
    // outside the range raises the bound-range fault vector.
    place(
        &mut rom,
        BOUND_ENTRY,
        "ld t5d, t4d, t2d\nadd t6q, t4q, t2q\nld t7d, t6d, 4\n\
         cmp t0d, t5d\njcc.b 0xf21\ncmp t7d, t0d\n\
         .sw_complete\njcc.b 0xf21\nnop\nnop\n",
    );
    // wrmsr: pack edx:eax into t3; the dispatch commits t3 to the MSR.
    place(
        &mut rom,
        WRMSR_ENTRY,
        ".sw_complete\nsll.q t3q, t2q, 32\nor.q t3q, t3q, t1q\nnop\n",
    );
    rom
}
