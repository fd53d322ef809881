//! ROM geometry, readout-to-triad combination, and the logical/physical
//! address mapping with its recovery procedure.
//!
//! Physical layout: four triad arrays in physical order A1, A3, A4, A2
//! (1024 + 1024 + 1024 + 768 = 3840 triads, physical addresses
//! 0x000..=0xEFF). Patch RAM continues at 0xF00..=0xF1F. Each array stores
//! triads with an eight-line interleave, so a readout lists consecutive
//! addresses eight rows apart.
//!
//! The address mapping is block-wise: per physical 256-triad block an
//! optional group-permutation table (T or L) plus reverse (R) and swap (S)
//! offset flags, and a logical block assignment. Recovery correlates the
//! semantics of emulated physical triads with in-engine probes of logical
//! addresses and brute-forces the per-block combination.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::{Changeset, Machine};
use crate::ucode_isa::{self, Reg, Triad};

/// Array sizes in triads, physical order A1, A3, A4, A2.
pub const ARRAY_SIZES: [usize; 4] = [1024, 1024, 1024, 768];
pub const ARRAY_NAMES: [&str; 4] = ["A1", "A3", "A4", "A2"];
/// Total ROM triads; physical addresses are 0x000..=0xEFF.
pub const ROM_TRIADS: usize = 3840;
/// Triads per mapping block.
pub const BLOCK_TRIADS: usize = 256;
pub const NUM_BLOCKS: usize = ROM_TRIADS / BLOCK_TRIADS;
pub const PATCH_RAM_BASE: u16 = 0xF00;
pub const PATCH_RAM_LEN: usize = 32;

const REGION_MAGIC: &[u8; 4] = b"UCRO";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RomMapError {
    #[error("address {addr:#x} outside mapped ROM range")]
    AddressOutOfRange { addr: u16 },
    #[error("readout size mismatch: region {region} has {got} rows, expected {want}")]
    SizeMismatch { region: u8, got: usize, want: usize },
    #[error("bad readout file: {0}")]
    BadReadoutFile(String),
    #[error("line {line}: {msg}")]
    BadConfigText { line: usize, msg: String },
    #[error("invalid mapping config: {0}")]
    InvalidConfig(String),
    #[error("no permutation combination fits block {block}; offending pairs: {pairs:?}")]
    Contradiction { block: usize, pairs: Vec<(u16, u16)> },
}

// ---------------------------------------------------------------------------
// interleave

fn array_of(addr: usize) -> (usize, usize) {
    let mut base = 0;
    for (i, n) in ARRAY_SIZES.iter().enumerate() {
        if addr < base + n {
            return (i, addr - base);
        }
        base += n;
    }
    unreachable!("address checked against ROM_TRIADS");
}

/// Readout row (within one array) holding the triad at in-array address `a`.
/// Consecutive addresses land eight rows apart.
pub fn interleave_row(a: usize, array_len: usize) -> usize {
    let stride = array_len / 8;
    (a % stride) * 8 + a / stride
}

/// Inverse of [`interleave_row`].
pub fn interleave_addr(row: usize, array_len: usize) -> usize {
    let stride = array_len / 8;
    row / 8 + (row % 8) * stride
}

/// Global readout row (0..3840) of a physical triad address.
pub fn readout_row(addr: usize) -> usize {
    let (array, a) = array_of(addr);
    let base: usize = ARRAY_SIZES[..array].iter().sum();
    base + interleave_row(a, ARRAY_SIZES[array])
}

// ---------------------------------------------------------------------------
// block permutations

/// Group-permutation table selector for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TableKind {
    /// Groups unpermuted.
    None,
    /// Physical groups 0..7 hold logical 0,2,..,14; 8..15 hold 1,3,..,15.
    T,
    /// Lower groups unpermuted; upper groups mirrored (g -> 23-g) with
    /// reverse and swap implied. Only valid for the final logical block.
    L,
}

impl TableKind {
    pub fn name(self) -> &'static str {
        match self {
            TableKind::None => "none",
            TableKind::T => "T",
            TableKind::L => "L",
        }
    }
}

/// Translation directions for [`apply_block_permutation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PhysToLog,
    LogToPhys,
}

/// Per-block address permutation: group table, offset flags, block target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPermutation {
    pub table: TableKind,
    pub reverse: bool,
    pub swap: bool,
    pub logical_block: u8,
}

impl BlockPermutation {
    pub fn identity(block: u8) -> BlockPermutation {
        BlockPermutation { table: TableKind::None, reverse: false, swap: false, logical_block: block }
    }
}

/// Physical group -> logical group.
fn table_group(table: TableKind, g: u8) -> u8 {
    match table {
        TableKind::None => g,
        TableKind::T => {
            if g < 8 {
                2 * g
            } else {
                2 * (g - 8) + 1
            }
        }
        TableKind::L => {
            if g < 8 {
                g
            } else {
                23 - g
            }
        }
    }
}

/// Logical group -> physical group.
fn table_group_inv(table: TableKind, g: u8) -> u8 {
    match table {
        TableKind::None => g,
        TableKind::T => {
            if g.is_multiple_of(2) {
                g / 2
            } else {
                g / 2 + 8
            }
        }
        // L mirrors the upper half onto itself, so it is its own inverse.
        TableKind::L => table_group(TableKind::L, g),
    }
}

/// Translates an in-block address (group*16 + offset) between the physical
/// and logical sides of one block.
///
/// Physical to logical: group through the table, then offset reversed
/// (15 - o) when the R flag is set or the table is L acting on an upper
/// group, then the low offset bit flipped under the same rule for S. The
/// other direction inverts that composition.
pub fn apply_block_permutation(in_block: u8, p: &BlockPermutation, dir: Direction) -> u8 {
    let (g_in, o) = (in_block >> 4, in_block & 0xF);
    let (g_phys, g_out) = match dir {
        Direction::PhysToLog => (g_in, table_group(p.table, g_in)),
        Direction::LogToPhys => {
            let pg = table_group_inv(p.table, g_in);
            (pg, pg)
        }
    };
    let l_upper = p.table == TableKind::L && g_phys >= 8;
    let mut o = o;
    if p.reverse || l_upper {
        o = 15 - o;
    }
    if p.swap || l_upper {
        o ^= 1;
    }
    (g_out << 4) | o
}

/// The full per-ROM mapping: one [`BlockPermutation`] per physical block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingConfig {
    pub blocks: [BlockPermutation; NUM_BLOCKS],
}

impl MappingConfig {
    pub fn identity() -> MappingConfig {
        MappingConfig {
            blocks: std::array::from_fn(|i| BlockPermutation::identity(i as u8)),
        }
    }

    /// Checks the structural invariants: the logical block assignment is a
    /// bijection and L appears only on the final logical block.
    pub fn validate(&self) -> Result<(), RomMapError> {
        let mut seen = [false; NUM_BLOCKS];
        for (i, b) in self.blocks.iter().enumerate() {
            let lb = b.logical_block as usize;
            if lb >= NUM_BLOCKS {
                return Err(RomMapError::InvalidConfig(format!(
                    "block {i}: logical block {lb} out of range"
                )));
            }
            if seen[lb] {
                return Err(RomMapError::InvalidConfig(format!(
                    "logical block {lb} assigned twice"
                )));
            }
            seen[lb] = true;
            if b.table == TableKind::L && lb != NUM_BLOCKS - 1 {
                return Err(RomMapError::InvalidConfig(format!(
                    "block {i}: table L requires the final logical block"
                )));
            }
        }
        Ok(())
    }

    /// Uniformly random valid config.
    pub fn random(rng: &mut impl rand::Rng) -> MappingConfig {
        // Fisher-Yates over the logical block assignment.
        let mut logical: [u8; NUM_BLOCKS] = std::array::from_fn(|i| i as u8);
        for i in (1..NUM_BLOCKS).rev() {
            logical.swap(i, rng.gen_range(0..=i));
        }
        let blocks = std::array::from_fn(|i| {
            let lb = logical[i];
            let table = match rng.gen_range(0..3) {
                0 => TableKind::None,
                1 => TableKind::T,
                _ if lb as usize == NUM_BLOCKS - 1 => TableKind::L,
                _ => TableKind::None,
            };
            BlockPermutation { table, reverse: rng.gen(), swap: rng.gen(), logical_block: lb }
        });
        MappingConfig { blocks }
    }

    /// 15 lines of `block <n>: table=<none|T|L> R=<0|1> S=<0|1> logical=<n>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push_str(&format!(
                "block {}: table={} R={} S={} logical={}\n",
                i,
                b.table.name(),
                b.reverse as u8,
                b.swap as u8,
                b.logical_block
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MappingConfig, RomMapError> {
        let bad = |line: usize, msg: &str| RomMapError::BadConfigText { line, msg: msg.into() };
        let mut blocks: [Option<BlockPermutation>; NUM_BLOCKS] = [None; NUM_BLOCKS];
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            let rest = s
                .strip_prefix("block")
                .ok_or_else(|| bad(line, "expected `block <n>: ...`"))?
                .trim_start();
            let (num, rest) = rest
                .split_once(':')
                .ok_or_else(|| bad(line, "expected `:` after block number"))?;
            let n: usize = num
                .trim()
                .parse()
                .map_err(|_| bad(line, "bad block number"))?;
            if n >= NUM_BLOCKS {
                return Err(bad(line, "block number out of range"));
            }
            if blocks[n].is_some() {
                return Err(bad(line, "duplicate block"));
            }
            let mut table = None;
            let mut reverse = None;
            let mut swap = None;
            let mut logical = None;
            for field in rest.split_whitespace() {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| bad(line, "expected key=value fields"))?;
                match key {
                    "table" => {
                        table = Some(match value {
                            "none" => TableKind::None,
                            "T" => TableKind::T,
                            "L" => TableKind::L,
                            _ => return Err(bad(line, "table must be none, T, or L")),
                        })
                    }
                    "R" | "S" => {
                        let flag = match value {
                            "0" => false,
                            "1" => true,
                            _ => return Err(bad(line, "flags must be 0 or 1")),
                        };
                        if key == "R" {
                            reverse = Some(flag);
                        } else {
                            swap = Some(flag);
                        }
                    }
                    "logical" => {
                        logical = Some(
                            value
                                .parse::<u8>()
                                .ok()
                                .filter(|v| (*v as usize) < NUM_BLOCKS)
                                .ok_or_else(|| bad(line, "bad logical block"))?,
                        )
                    }
                    _ => return Err(bad(line, "unknown field")),
                }
            }
            blocks[n] = Some(BlockPermutation {
                table: table.ok_or_else(|| bad(line, "missing table="))?,
                reverse: reverse.ok_or_else(|| bad(line, "missing R="))?,
                swap: swap.ok_or_else(|| bad(line, "missing S="))?,
                logical_block: logical.ok_or_else(|| bad(line, "missing logical="))?,
            });
        }
        let blocks: Vec<BlockPermutation> = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.ok_or_else(|| RomMapError::InvalidConfig(format!("block {i} missing")))
            })
            .collect::<Result<_, _>>()?;
        let cfg = MappingConfig { blocks: blocks.try_into().unwrap() };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Logical address of a physical ROM address under `cfg`.
pub fn map_physical_to_logical(addr: u16, cfg: &MappingConfig) -> Result<u16, RomMapError> {
    if addr as usize >= ROM_TRIADS {
        return Err(RomMapError::AddressOutOfRange { addr });
    }
    let block = &cfg.blocks[addr as usize / BLOCK_TRIADS];
    let in_block = apply_block_permutation((addr % 256) as u8, block, Direction::PhysToLog);
    Ok(block.logical_block as u16 * 256 + in_block as u16)
}

/// Physical address of a logical ROM address under `cfg`; inverse of
/// [`map_physical_to_logical`].
pub fn map_logical_to_physical(addr: u16, cfg: &MappingConfig) -> Result<u16, RomMapError> {
    if addr as usize >= ROM_TRIADS {
        return Err(RomMapError::AddressOutOfRange { addr });
    }
    let lb = (addr / 256) as u8;
    let (pb, block) = cfg
        .blocks
        .iter()
        .enumerate()
        .find(|(_, b)| b.logical_block == lb)
        .ok_or_else(|| RomMapError::InvalidConfig(format!("no block assigned logical {lb}")))?;
    let in_block = apply_block_permutation((addr % 256) as u8, block, Direction::LogToPhys);
    Ok(pb as u16 * 256 + in_block as u16)
}

// ---------------------------------------------------------------------------
// readout files and region combination

/// Raw per-region readout bitstrings plus the set of unreadable rows.
///
/// Regions 1..3 hold op slot 0..2 (8 bytes per triad row); region 4 holds
/// the sequence words (4 bytes per row). Rows are stored per array in
/// physical array order, interleaved as on the die. The unreadable set
/// contains global row offsets (0..3840).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RomReadout {
    pub op_regions: [Vec<u8>; 3],
    pub seq_region: Vec<u8>,
    pub unreadable: BTreeSet<u16>,
}

/// One combined triad: raw words straight from the readout, the decoded
/// triad when every word decodes, and the unreadable mark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedTriad {
    pub addr: u16,
    pub words: [u64; 3],
    pub seq_word: u32,
    pub triad: Option<Triad>,
    pub unreadable: bool,
}

fn check_region_len(region: u8, bytes: &[u8]) -> Result<(), RomMapError> {
    let stride = if region == 4 { 4 } else { 8 };
    let want = ROM_TRIADS * stride;
    if bytes.len() != want {
        return Err(RomMapError::SizeMismatch { region, got: bytes.len() / stride, want: ROM_TRIADS });
    }
    Ok(())
}

impl RomReadout {
    pub fn validate(&self) -> Result<(), RomMapError> {
        for (i, r) in self.op_regions.iter().enumerate() {
            check_region_len(i as u8 + 1, r)?;
        }
        check_region_len(4, &self.seq_region)?;
        if let Some(off) = self.unreadable.iter().find(|o| **o as usize >= ROM_TRIADS) {
            return Err(RomMapError::AddressOutOfRange { addr: *off });
        }
        Ok(())
    }
}

/// Serializes one region as a readout file: magic, region id, the four
/// array sizes, then the row-major bitstring.
pub fn encode_region_file(region: u8, readout: &RomReadout) -> Result<Vec<u8>, RomMapError> {
    let body = match region {
        1..=3 => &readout.op_regions[region as usize - 1],
        4 => &readout.seq_region,
        _ => return Err(RomMapError::BadReadoutFile(format!("bad region id {region}"))),
    };
    check_region_len(region, body)?;
    let mut out = Vec::with_capacity(13 + body.len());
    out.extend_from_slice(REGION_MAGIC);
    out.push(region);
    for n in ARRAY_SIZES {
        out.extend_from_slice(&(n as u16).to_le_bytes());
    }
    out.extend_from_slice(body);
    Ok(out)
}

/// Parses a region readout file; returns (region id, row bytes).
pub fn parse_region_file(bytes: &[u8]) -> Result<(u8, Vec<u8>), RomMapError> {
    let bad = |msg: &str| RomMapError::BadReadoutFile(msg.into());
    if bytes.len() < 13 || &bytes[..4] != REGION_MAGIC {
        return Err(bad("missing UCRO header"));
    }
    let region = bytes[4];
    if !(1..=4).contains(&region) {
        return Err(bad("bad region id"));
    }
    for (i, want) in ARRAY_SIZES.iter().enumerate() {
        let got = u16::from_le_bytes(bytes[5 + 2 * i..7 + 2 * i].try_into().unwrap());
        if got as usize != *want {
            return Err(bad(&format!(
                "array {} holds {} triads, expected {}",
                ARRAY_NAMES[i], got, want
            )));
        }
    }
    let body = bytes[13..].to_vec();
    check_region_len(region, &body)?;
    Ok((region, body))
}

/// Assembles a [`RomReadout`] from the four region files plus the optional
/// unreadable-offset sidecar.
pub fn readout_from_files(
    region_files: [&[u8]; 4],
    sidecar: Option<&str>,
) -> Result<RomReadout, RomMapError> {
    let mut op_regions: [Option<Vec<u8>>; 3] = [None, None, None];
    let mut seq_region = None;
    for f in region_files {
        let (id, body) = parse_region_file(f)?;
        let slot = match id {
            1..=3 => &mut op_regions[id as usize - 1],
            _ => &mut seq_region,
        };
        if slot.is_some() {
            return Err(RomMapError::BadReadoutFile(format!("region {id} supplied twice")));
        }
        *slot = Some(body);
    }
    let missing = |id: u8| RomMapError::BadReadoutFile(format!("region {id} missing"));
    let readout = RomReadout {
        op_regions: [
            op_regions[0].take().ok_or_else(|| missing(1))?,
            op_regions[1].take().ok_or_else(|| missing(2))?,
            op_regions[2].take().ok_or_else(|| missing(3))?,
        ],
        seq_region: seq_region.ok_or_else(|| missing(4))?,
        unreadable: sidecar.map(parse_unreadable_sidecar).transpose()?.unwrap_or_default(),
    };
    readout.validate()?;
    Ok(readout)
}

/// Sidecar format: one hex row offset per line, `#` comments allowed.
pub fn parse_unreadable_sidecar(text: &str) -> Result<BTreeSet<u16>, RomMapError> {
    let mut set = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
        let off = u16::from_str_radix(digits, 16).map_err(|_| RomMapError::BadConfigText {
            line: idx + 1,
            msg: format!("bad hex offset `{s}`"),
        })?;
        if off as usize >= ROM_TRIADS {
            return Err(RomMapError::AddressOutOfRange { addr: off });
        }
        set.insert(off);
    }
    Ok(set)
}

pub fn format_unreadable_sidecar(set: &BTreeSet<u16>) -> String {
    set.iter().map(|o| format!("{o:#05x}\n")).collect()
}

/// Combines the four regions into the physical triad list, deinterleaving
/// each array. Triads with undecodable words keep `triad: None`; triads on
/// unreadable rows carry the mark.
pub fn combine_regions(readout: &RomReadout) -> Result<Vec<CombinedTriad>, RomMapError> {
    readout.validate()?;
    let mut out = Vec::with_capacity(ROM_TRIADS);
    for addr in 0..ROM_TRIADS {
        let row = readout_row(addr);
        let words: [u64; 3] = std::array::from_fn(|r| {
            let b = &readout.op_regions[r][row * 8..row * 8 + 8];
            u64::from_le_bytes(b.try_into().unwrap())
        });
        let seq_word =
            u32::from_le_bytes(readout.seq_region[row * 4..row * 4 + 4].try_into().unwrap());
        let triad = (|| {
            let ops = [
                ucode_isa::decode_op(words[0]).ok()?,
                ucode_isa::decode_op(words[1]).ok()?,
                ucode_isa::decode_op(words[2]).ok()?,
            ];
            let seq = ucode_isa::SequenceWord::decode(seq_word).ok()?;
            Some(Triad { ops, seq })
        })();
        out.push(CombinedTriad {
            addr: addr as u16,
            words,
            seq_word,
            triad,
            unreadable: readout.unreadable.contains(&(row as u16)),
        });
    }
    Ok(out)
}

/// Inverse of [`combine_regions`]: interleaves a physical triad list into
/// region bitstrings with no unreadable rows. Synthesizes test fixtures and
/// demo readouts.
pub fn build_readout(physical: &[Triad]) -> Result<RomReadout, RomMapError> {
    if physical.len() != ROM_TRIADS {
        return Err(RomMapError::SizeMismatch { region: 0, got: physical.len(), want: ROM_TRIADS });
    }
    let mut op_regions = [
        vec![0u8; ROM_TRIADS * 8],
        vec![0u8; ROM_TRIADS * 8],
        vec![0u8; ROM_TRIADS * 8],
    ];
    let mut seq_region = vec![0u8; ROM_TRIADS * 4];
    for (addr, triad) in physical.iter().enumerate() {
        let row = readout_row(addr);
        for (r, op) in triad.ops.iter().enumerate() {
            let word = ucode_isa::encode_op(op)
                .map_err(|e| RomMapError::BadReadoutFile(e.to_string()))?;
            op_regions[r][row * 8..row * 8 + 8].copy_from_slice(&word.to_le_bytes());
        }
        let seq = triad
            .seq
            .encode()
            .map_err(|e| RomMapError::BadReadoutFile(e.to_string()))?;
        seq_region[row * 4..row * 4 + 4].copy_from_slice(&seq.to_le_bytes());
    }
    Ok(RomReadout { op_regions, seq_region, unreadable: BTreeSet::new() })
}

/// Reorders a logical ROM image into physical storage order under `cfg`.
pub fn physical_image_from_logical(
    logical: &[Triad],
    cfg: &MappingConfig,
) -> Result<Vec<Triad>, RomMapError> {
    if logical.len() != ROM_TRIADS {
        return Err(RomMapError::SizeMismatch { region: 0, got: logical.len(), want: ROM_TRIADS });
    }
    cfg.validate()?;
    let mut physical = vec![Triad::nop(); ROM_TRIADS];
    for (la, t) in logical.iter().enumerate() {
        physical[map_logical_to_physical(la as u16, cfg)? as usize] = *t;
    }
    Ok(physical)
}

/// Reorders combined physical triads into the logical image under `cfg`;
/// unreadable or undecodable triads become `None`.
pub fn logical_image_from_combined(
    combined: &[CombinedTriad],
    cfg: &MappingConfig,
) -> Result<Vec<Option<Triad>>, RomMapError> {
    if combined.len() != ROM_TRIADS {
        return Err(RomMapError::SizeMismatch { region: 0, got: combined.len(), want: ROM_TRIADS });
    }
    cfg.validate()?;
    let mut logical = vec![None; ROM_TRIADS];
    for c in combined {
        let la = map_physical_to_logical(c.addr, cfg)?;
        logical[la as usize] = if c.unreadable { None } else { c.triad };
    }
    Ok(logical)
}

// ---------------------------------------------------------------------------
// semantic correlation and mapping recovery

/// Fixed probe input: a distinct value in every usable GPR and temporary.
pub fn probe_state() -> Vec<(Reg, u64)> {
    let mut regs = Vec::with_capacity(6 + 22);
    for i in [0u8, 1, 2, 3, 6, 7] {
        regs.push((Reg::Gpr(i), 0xA0A0_0000 + i as u64 * 0x0101));
    }
    for j in 0..ucode_isa::NUM_TEMPS {
        regs.push((Reg::Temp(j), 0xB000_0000_0000_0000 + j as u64 * 0x0000_0001_0001_0001));
    }
    regs
}

/// Emulates each decodable, readable triad in isolation against the probe
/// state and records its changeset. Unreadable or unknown-op triads are
/// skipped; the skip count is returned alongside.
pub fn emulate_physical_semantics(
    combined: &[CombinedTriad],
    probe: &[(Reg, u64)],
) -> (BTreeMap<u16, Changeset>, usize) {
    let mut scratch = Machine::bare();
    for (r, v) in probe {
        scratch.set_reg(*r, *v);
    }
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for c in combined {
        let triad = match (&c.triad, c.unreadable) {
            (Some(t), false) => t,
            _ => {
                skipped += 1;
                continue;
            }
        };
        out.insert(c.addr, scratch.step_triad(triad));
    }
    (out, skipped)
}

/// Probes every logical ROM address of a machine whose mapping is unknown
/// to the caller: load the probe state, force execution of exactly that
/// triad, and keep the changeset. Addresses that fault, branch away, or
/// exceed the one-triad budget are excluded.
pub fn probe_logical_semantics(
    machine: &Machine,
    probe: &[(Reg, u64)],
) -> (BTreeMap<u16, Changeset>, usize) {
    let mut machine = machine.clone();
    let mut out = BTreeMap::new();
    let mut skipped = 0;
    for la in 0..ROM_TRIADS as u16 {
        match machine.probe_address(la, probe) {
            Some(cs) => {
                out.insert(la, cs);
            }
            None => skipped += 1,
        }
    }
    (out, skipped)
}

/// Pairs logical and physical addresses whose changesets match uniquely on
/// both sides. Ambiguous semantics pair nothing.
pub fn correlate_changesets(
    phys: &BTreeMap<u16, Changeset>,
    logical: &BTreeMap<u16, Changeset>,
) -> Vec<(u16, u16)> {
    let unique = |m: &BTreeMap<u16, Changeset>| -> BTreeMap<Changeset, u16> {
        let mut by_cs: BTreeMap<Changeset, Vec<u16>> = BTreeMap::new();
        for (addr, cs) in m {
            by_cs.entry(cs.clone()).or_default().push(*addr);
        }
        by_cs
            .into_iter()
            .filter_map(|(cs, addrs)| (addrs.len() == 1).then(|| (cs, addrs[0])))
            .collect()
    };
    let phys_unique = unique(phys);
    let log_unique = unique(logical);
    let mut pairs: Vec<(u16, u16)> = log_unique
        .iter()
        .filter_map(|(cs, la)| phys_unique.get(cs).map(|pa| (*la, *pa)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Recovery state of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockRecovery {
    Determined(BlockPermutation),
    /// No pairs, or several combinations fit.
    Undetermined,
}

/// Brute-forces each block's permutation from correlated address pairs:
/// try every (table, R, S, logical block) combination and keep the one
/// consistent with all pairs. Zero consistent combinations is a
/// contradiction; several leave the block undetermined.
pub fn recover_mapping(pairs: &[(u16, u16)]) -> Result<Vec<BlockRecovery>, RomMapError> {
    let mut by_block: Vec<Vec<(u16, u16)>> = vec![Vec::new(); NUM_BLOCKS];
    for (la, pa) in pairs {
        if (*la as usize) >= ROM_TRIADS || (*pa as usize) >= ROM_TRIADS {
            return Err(RomMapError::AddressOutOfRange { addr: (*la).max(*pa) });
        }
        by_block[*pa as usize / BLOCK_TRIADS].push((*la, *pa));
    }
    let mut out = Vec::with_capacity(NUM_BLOCKS);
    for (block, block_pairs) in by_block.iter().enumerate() {
        if block_pairs.is_empty() {
            out.push(BlockRecovery::Undetermined);
            continue;
        }
        let mut fits = Vec::new();
        for table in [TableKind::None, TableKind::T, TableKind::L] {
            for reverse in [false, true] {
                for swap in [false, true] {
                    for lb in 0..NUM_BLOCKS as u8 {
                        if table == TableKind::L && lb as usize != NUM_BLOCKS - 1 {
                            continue;
                        }
                        let cand =
                            BlockPermutation { table, reverse, swap, logical_block: lb };
                        let ok = block_pairs.iter().all(|(la, pa)| {
                            la / 256 == lb as u16
                                && (la % 256) as u8
                                    == apply_block_permutation(
                                        (pa % 256) as u8,
                                        &cand,
                                        Direction::PhysToLog,
                                    )
                        });
                        if ok {
                            fits.push(cand);
                        }
                    }
                }
            }
        }
        match fits.len() {
            0 => {
                return Err(RomMapError::Contradiction { block, pairs: block_pairs.clone() })
            }
            1 => out.push(BlockRecovery::Determined(fits[0])),
            _ => out.push(BlockRecovery::Undetermined),
        }
    }
    Ok(out)
}

/// Collapses a fully determined recovery into a config.
pub fn recovery_to_config(rec: &[BlockRecovery]) -> Option<MappingConfig> {
    let blocks: Vec<BlockPermutation> = rec
        .iter()
        .map(|r| match r {
            BlockRecovery::Determined(b) => Some(*b),
            BlockRecovery::Undetermined => None,
        })
        .collect::<Option<_>>()?;
    let cfg = MappingConfig { blocks: blocks.try_into().ok()? };
    cfg.validate().ok()?;
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_is_bijective_per_array() {
        for n in [1024usize, 768] {
            let mut seen = vec![false; n];
            for a in 0..n {
                let r = interleave_row(a, n);
                assert!(!seen[r]);
                seen[r] = true;
                assert_eq!(interleave_addr(r, n), a);
            }
        }
    }

    #[test]
    fn a2_tail_rows_are_eight_apart() {
        // In-array addresses 766 and 767 of A2 sit on rows 759 and 767.
        assert_eq!(interleave_row(767, 768), 767);
        assert_eq!(interleave_row(766, 768), 759);
    }

    #[test]
    fn table_t_matches_group_doubling() {
        let p = BlockPermutation { table: TableKind::T, reverse: false, swap: false, logical_block: 0 };
        assert_eq!(apply_block_permutation(0x10, &p, Direction::PhysToLog), 0x20);
        assert_eq!(apply_block_permutation(0x20, &p, Direction::LogToPhys), 0x10);
    }

    #[test]
    fn table_l_upper_groups_imply_reverse_and_swap() {
        let p = BlockPermutation { table: TableKind::L, reverse: false, swap: false, logical_block: 14 };
        assert_eq!(apply_block_permutation(0x80, &p, Direction::PhysToLog), 0xFE);
        assert_eq!(apply_block_permutation(0xFE, &p, Direction::LogToPhys), 0x80);
        // Lower groups stay untouched without explicit flags.
        assert_eq!(apply_block_permutation(0x37, &p, Direction::PhysToLog), 0x37);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = MappingConfig::identity();
        cfg.blocks[3] = BlockPermutation {
            table: TableKind::T,
            reverse: true,
            swap: false,
            logical_block: 3,
        };
        let text = cfg.to_text();
        assert_eq!(MappingConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn l_outside_final_block_rejected() {
        let mut cfg = MappingConfig::identity();
        cfg.blocks[0].table = TableKind::L;
        assert!(cfg.validate().is_err());
        cfg.blocks[0].table = TableKind::None;
        cfg.blocks[14].table = TableKind::L;
        assert!(cfg.validate().is_ok());
    }
}
