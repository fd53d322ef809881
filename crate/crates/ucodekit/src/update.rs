//! Microcode update files: packing, parsing, signing, verification, apply.
//!
//! Layout (little endian, byte-exact):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "UCUP"
//!      4     2  version (1)
//!      6     2  flags (bit 0: authenticated; others reserved zero)
//!      8     1  match_count
//!      9     3  zero padding
//!     12    16  4 x { rom_addr u16, ram_index u16 } (unused slots zero)
//!     28     1  triad_count
//!     29     3  zero padding
//!     32   28n  triads
//!      -     8  tag (authenticated files only)
//! ```
//!
//! Parsing is strict: reserved bits, padding, unused match slots, and triad
//! encodings are all checked, so `pack(parse(bytes)) == bytes` and any
//! corruption is caught either structurally or by the MAC.
//!
//! The MAC is a TEA-CBC construction: the message (all file bytes before the
//! tag) is padded with 0x80 then zeros to an 8-byte multiple, CBC-chained
//! from a zero IV through TEA, and the final block is the tag.
//!
//! Apply verifies everything before touching machine state: a rejected
//! update leaves the machine bit-identical. Once a verification key is
//! installed, unauthenticated updates are rejected outright.

use thiserror::Error;

use crate::engine::{Machine, MatchRegister, NUM_MATCH_REGS};
use crate::ucode_isa::{triads_from_bytes, triads_to_bytes, Triad, TRIAD_BYTES};

pub const UPDATE_MAGIC: [u8; 4] = *b"UCUP";
pub const UPDATE_VERSION: u16 = 1;
/// flags bit 0: the file carries a tag and must pass verification.
pub const FLAG_AUTHENTICATED: u16 = 1;
/// Fixed header size up to the triads.
pub const HEADER_BYTES: usize = 32;
/// Patch RAM capacity; authenticated updates must fill it exactly.
pub const MAX_TRIADS: usize = 32;

/// Modeled cost of applying an update, added to the triggering instruction.
pub const PLAIN_APPLY_CYCLES: u64 = 5377;
pub const AUTH_APPLY_CYCLES: u64 = 68525;

pub const TEA_DELTA: u32 = 0x9E37_79B9;
pub const TEA_ROUNDS: u32 = 32;

/// 128-bit key as four little-endian words.
pub type TeaKey = [u32; 4];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UpdateError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("reserved flag bits set: {0:#06x}")]
    BadFlags(u16),
    #[error("file is {got} bytes, layout requires {want}")]
    BadLength { got: usize, want: usize },
    #[error("nonzero padding")]
    BadPadding,
    #[error("match_count {0} exceeds 4 registers")]
    TooManyMatches(u8),
    #[error("unused match slot {0} is nonzero")]
    DirtyMatchSlot(usize),
    #[error("match register {index} targets {addr:#x}, outside the ROM")]
    BadMatchTarget { index: usize, addr: u16 },
    #[error("match register {index} selects patch line {line}, beyond the RAM")]
    BadRamIndex { index: usize, line: u16 },
    #[error("triad_count {0} exceeds the 32-triad patch RAM")]
    TooManyTriads(usize),
    #[error("triad decode failed: {0}")]
    BadTriad(#[from] crate::ucode_isa::IsaError),
    #[error("machine requires authenticated updates")]
    AuthRequired,
    #[error("no verification key installed")]
    NoKey,
    #[error("authenticated update must carry exactly 32 triads, got {0}")]
    AuthTriadCount(usize),
    #[error("authentication tag mismatch")]
    BadTag,
    #[error("update bytes at {addr:#x}+{len} fall outside host memory")]
    OutOfMemory { addr: u32, len: usize },
}

// -- TEA block cipher --------------------------------------------------------

/// Encrypts one 64-bit block (v0 = high word, v1 = low word).
pub fn tea_encrypt(block: u64, key: &TeaKey) -> u64 {
    let mut v0 = (block >> 32) as u32;
    let mut v1 = block as u32;
    let mut sum = 0u32;
    for _ in 0..TEA_ROUNDS {
        sum = sum.wrapping_add(TEA_DELTA);
        v0 = v0.wrapping_add(
            (v1 << 4).wrapping_add(key[0]) ^ v1.wrapping_add(sum) ^ (v1 >> 5).wrapping_add(key[1]),
        );
        v1 = v1.wrapping_add(
            (v0 << 4).wrapping_add(key[2]) ^ v0.wrapping_add(sum) ^ (v0 >> 5).wrapping_add(key[3]),
        );
    }
    (v0 as u64) << 32 | v1 as u64
}

pub fn tea_decrypt(block: u64, key: &TeaKey) -> u64 {
    let mut v0 = (block >> 32) as u32;
    let mut v1 = block as u32;
    let mut sum = TEA_DELTA.wrapping_mul(TEA_ROUNDS);
    for _ in 0..TEA_ROUNDS {
        v1 = v1.wrapping_sub(
            (v0 << 4).wrapping_add(key[2]) ^ v0.wrapping_add(sum) ^ (v0 >> 5).wrapping_add(key[3]),
        );
        v0 = v0.wrapping_sub(
            (v1 << 4).wrapping_add(key[0]) ^ v1.wrapping_add(sum) ^ (v1 >> 5).wrapping_add(key[1]),
        );
        sum = sum.wrapping_sub(TEA_DELTA);
    }
    (v0 as u64) << 32 | v1 as u64
}

/// CBC-MAC over the message with mandatory 0x80-then-zeros padding to an
/// 8-byte boundary (a full pad block when already aligned) and a zero IV.
/// Blocks are read little endian; the tag is the final cipher state.
pub fn cbc_mac(key: &TeaKey, msg: &[u8]) -> u64 {
    let mut padded = msg.to_vec();
    padded.push(0x80);
    while !padded.len().is_multiple_of(8) {
        padded.push(0);
    }
    let mut state = 0u64;
    for chunk in padded.chunks_exact(8) {
        let block = u64::from_le_bytes(chunk.try_into().unwrap());
        state = tea_encrypt(state ^ block, key);
    }
    state
}

// -- update files -------------------------------------------------------------

/// Parsed update file. `matches` always holds four slots; only the first
/// `match_count` are installed as enabled match registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateFile {
    pub version: u16,
    pub flags: u16,
    pub match_count: u8,
    /// (rom_addr, ram_index) pairs.
    pub matches: [(u16, u16); NUM_MATCH_REGS],
    pub triads: Vec<Triad>,
    pub tag: Option<u64>,
}

impl UpdateFile {
    pub fn new(matches: &[(u16, u16)], triads: Vec<Triad>) -> UpdateFile {
        assert!(matches.len() <= NUM_MATCH_REGS);
        let mut slots = [(0u16, 0u16); NUM_MATCH_REGS];
        slots[..matches.len()].copy_from_slice(matches);
        UpdateFile {
            version: UPDATE_VERSION,
            flags: 0,
            match_count: matches.len() as u8,
            matches: slots,
            triads,
            tag: None,
        }
    }

    pub fn authenticated(&self) -> bool {
        self.flags & FLAG_AUTHENTICATED != 0
    }

    fn packed_without_tag(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.triads.len() * TRIAD_BYTES);
        out.extend_from_slice(&UPDATE_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.push(self.match_count);
        out.extend_from_slice(&[0; 3]);
        for (rom_addr, ram_index) in self.matches {
            out.extend_from_slice(&rom_addr.to_le_bytes());
            out.extend_from_slice(&ram_index.to_le_bytes());
        }
        out.push(self.triads.len() as u8);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&triads_to_bytes(&self.triads).expect("triads encode"));
        out
    }

    pub fn pack(&self) -> Vec<u8> {
        let mut out = self.packed_without_tag();
        if self.authenticated() {
            out.extend_from_slice(&self.tag.unwrap_or(0).to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<UpdateFile, UpdateError> {
        if bytes.len() < HEADER_BYTES {
            return Err(UpdateError::BadLength { got: bytes.len(), want: HEADER_BYTES });
        }
        if bytes[0..4] != UPDATE_MAGIC {
            return Err(UpdateError::BadMagic);
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != UPDATE_VERSION {
            return Err(UpdateError::BadVersion(version));
        }
        let flags = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        if flags & !FLAG_AUTHENTICATED != 0 {
            return Err(UpdateError::BadFlags(flags));
        }
        let match_count = bytes[8];
        if match_count as usize > NUM_MATCH_REGS {
            return Err(UpdateError::TooManyMatches(match_count));
        }
        if bytes[9..12] != [0; 3] || bytes[29..32] != [0; 3] {
            return Err(UpdateError::BadPadding);
        }
        let mut matches = [(0u16, 0u16); NUM_MATCH_REGS];
        for (i, slot) in matches.iter_mut().enumerate() {
            let at = 12 + 4 * i;
            *slot = (
                u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()),
                u16::from_le_bytes(bytes[at + 2..at + 4].try_into().unwrap()),
            );
            if i >= match_count as usize && *slot != (0, 0) {
                return Err(UpdateError::DirtyMatchSlot(i));
            }
        }
        let triad_count = bytes[28] as usize;
        if triad_count > MAX_TRIADS {
            return Err(UpdateError::TooManyTriads(triad_count));
        }
        let authenticated = flags & FLAG_AUTHENTICATED != 0;
        let want = HEADER_BYTES + triad_count * TRIAD_BYTES + if authenticated { 8 } else { 0 };
        if bytes.len() != want {
            return Err(UpdateError::BadLength { got: bytes.len(), want });
        }
        let triad_end = HEADER_BYTES + triad_count * TRIAD_BYTES;
        let triads = triads_from_bytes(&bytes[HEADER_BYTES..triad_end])?;
        let tag = authenticated
            .then(|| u64::from_le_bytes(bytes[triad_end..triad_end + 8].try_into().unwrap()));
        Ok(UpdateFile { version, flags, match_count, matches, triads, tag })
    }

    /// Marks the file authenticated, pads the triads to the full patch RAM
    /// with idle lines, and computes the tag over everything before it.
    pub fn sign(&mut self, key: &TeaKey) -> Result<(), UpdateError> {
        if self.triads.len() > MAX_TRIADS {
            return Err(UpdateError::TooManyTriads(self.triads.len()));
        }
        self.triads.resize(MAX_TRIADS, Triad::nop());
        self.flags |= FLAG_AUTHENTICATED;
        self.tag = Some(cbc_mac(key, &self.packed_without_tag()));
        Ok(())
    }

    /// True when the tag matches the file contents under `key`.
    pub fn verify(&self, key: &TeaKey) -> bool {
        self.authenticated()
            && self.triads.len() == MAX_TRIADS
            && self.tag == Some(cbc_mac(key, &self.packed_without_tag()))
    }

    fn validate_targets(&self) -> Result<(), UpdateError> {
        for i in 0..self.match_count as usize {
            let (rom_addr, ram_index) = self.matches[i];
            if rom_addr as usize >= crate::rom_map::ROM_TRIADS {
                return Err(UpdateError::BadMatchTarget { index: i, addr: rom_addr });
            }
            if ram_index as usize >= MAX_TRIADS {
                return Err(UpdateError::BadRamIndex { index: i, line: ram_index });
            }
        }
        Ok(())
    }
}

/// Verifies and applies an update. All checks run before any state change;
/// on error the machine is untouched. Returns the modeled apply cost.
pub fn apply(m: &mut Machine, file: &UpdateFile) -> Result<u64, UpdateError> {
    if file.version != UPDATE_VERSION {
        return Err(UpdateError::BadVersion(file.version));
    }
    if file.triads.len() > MAX_TRIADS {
        return Err(UpdateError::TooManyTriads(file.triads.len()));
    }
    if file.match_count as usize > NUM_MATCH_REGS {
        return Err(UpdateError::TooManyMatches(file.match_count));
    }
    file.validate_targets()?;
    let cycles = if file.authenticated() {
        let key = m.engine.verify_key.as_ref().ok_or(UpdateError::NoKey)?;
        if file.triads.len() != MAX_TRIADS {
            return Err(UpdateError::AuthTriadCount(file.triads.len()));
        }
        if !file.verify(key) {
            return Err(UpdateError::BadTag);
        }
        AUTH_APPLY_CYCLES
    } else {
        if m.engine.verify_key.is_some() {
            return Err(UpdateError::AuthRequired);
        }
        PLAIN_APPLY_CYCLES
    };

    for (i, line) in m.engine.patch_ram.iter_mut().enumerate() {
        *line = file.triads.get(i).copied().unwrap_or_else(Triad::nop);
    }
    for (i, mr) in m.engine.match_regs.iter_mut().enumerate() {
        *mr = if i < file.match_count as usize {
            MatchRegister {
                rom_addr: file.matches[i].0,
                ram_index: file.matches[i].1 as u8,
                enabled: true,
            }
        } else {
            MatchRegister::default()
        };
    }
    Ok(cycles)
}

pub fn apply_bytes(m: &mut Machine, bytes: &[u8]) -> Result<u64, UpdateError> {
    apply(m, &UpdateFile::parse(bytes)?)
}

/// Loads an update image from host memory (the wrmsr trigger path): the
/// header determines the total length, then the full image is parsed and
/// applied.
pub fn apply_update_at(m: &mut Machine, ptr: u32) -> Result<u64, UpdateError> {
    let mem = &m.host.memory;
    let start = ptr as usize;
    let header_end = start
        .checked_add(HEADER_BYTES)
        .filter(|&e| e <= mem.len())
        .ok_or(UpdateError::OutOfMemory { addr: ptr, len: HEADER_BYTES })?;
    let header = &mem[start..header_end];
    let flags = u16::from_le_bytes(header[6..8].try_into().unwrap());
    let triad_count = header[28] as usize;
    let total = HEADER_BYTES
        + triad_count * TRIAD_BYTES
        + if flags & FLAG_AUTHENTICATED != 0 { 8 } else { 0 };
    let end = start
        .checked_add(total)
        .filter(|&e| e <= mem.len())
        .ok_or(UpdateError::OutOfMemory { addr: ptr, len: total })?;
    let bytes = mem[start..end].to_vec();
    apply_bytes(m, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ucode_isa::assemble;

    const K1: TeaKey = [0x1111_1111, 0x2222_2222, 0x3333_3333, 0x4444_4444];

    #[test]
    fn tea_golden_vectors() {
        assert_eq!(tea_encrypt(0, &[0; 4]), 0x41EA_3A0A_94BA_A940);
        assert_eq!(tea_encrypt(0x0123_4567_89AB_CDEF, &K1), 0xCF62_86D6_E432_DB64);
    }

    #[test]
    fn tea_round_trip() {
        for block in [0u64, 1, 0xDEAD_BEEF, u64::MAX, 0x0123_4567_89AB_CDEF] {
            assert_eq!(tea_decrypt(tea_encrypt(block, &K1), &K1), block);
        }
    }

    #[test]
    fn cbc_mac_golden_vectors() {
        assert_eq!(cbc_mac(&[0; 4], b""), 0xF9CE_9DF9_EE21_F6FE);
        let challenge = 0x1122_3344_5566_7788u64;
        assert_eq!(cbc_mac(&K1, &challenge.to_le_bytes()), 0x6AC5_E289_F6B9_5D9D);
        // An aligned message still gets a full pad block.
        assert_eq!(
            cbc_mac(&[0; 4], &[0u8; 8]),
            tea_encrypt(tea_encrypt(0, &[0; 4]) ^ 0x80, &[0; 4])
        );
    }

    #[test]
    fn minimal_file_is_60_bytes_and_round_trips() {
        let triads = assemble(".sw_complete\nmov t1d, 7\nnop\nnop\n").unwrap();
        let file = UpdateFile::new(&[], triads);
        let bytes = file.pack();
        assert_eq!(bytes.len(), 60);
        assert_eq!(&bytes[0..4], b"UCUP");
        assert_eq!(UpdateFile::parse(&bytes).unwrap(), file);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let triads = assemble(".sw_complete\nnop\nnop\nnop\n").unwrap();
        let mut bytes = UpdateFile::new(&[], triads).pack();
        bytes.push(0);
        assert!(matches!(UpdateFile::parse(&bytes), Err(UpdateError::BadLength { .. })));
    }

    #[test]
    fn sign_pads_and_verifies() {
        let triads = assemble(".sw_complete\nmov t1d, 7\nnop\nnop\n").unwrap();
        let mut file = UpdateFile::new(&[(0x318, 0)], triads);
        file.sign(&K1).unwrap();
        assert_eq!(file.triads.len(), 32);
        assert!(file.verify(&K1));
        assert!(!file.verify(&[9, 9, 9, 9]));
        let reparsed = UpdateFile::parse(&file.pack()).unwrap();
        assert!(reparsed.verify(&K1));
    }

    #[test]
    fn rejected_apply_leaves_machine_identical() {
        let triads = assemble(".sw_complete\nmov t1d, 7\nnop\nnop\n").unwrap();
        let mut file = UpdateFile::new(&[(0x318, 0)], triads);
        file.sign(&K1).unwrap();
        let mut bytes = file.pack();
        bytes[40] ^= 0x01;

        let mut m = Machine::stock();
        m.engine.verify_key = Some(K1);
        let before = m.engine.clone();
        assert!(apply_bytes(&mut m, &bytes).is_err());
        assert_eq!(m.engine, before);

        // The intact file applies and installs the hook.
        assert_eq!(apply_bytes(&mut m, &file.pack()).unwrap(), AUTH_APPLY_CYCLES);
        assert!(m.engine.match_regs[0].enabled);
        assert_eq!(m.engine.match_regs[0].rom_addr, 0x318);
    }

    #[test]
    fn keyed_machine_rejects_plain_updates() {
        let triads = assemble(".sw_complete\nnop\nnop\nnop\n").unwrap();
        let file = UpdateFile::new(&[], triads);
        let mut m = Machine::stock();
        assert_eq!(apply(&mut m, &file).unwrap(), PLAIN_APPLY_CYCLES);
        m.engine.verify_key = Some(K1);
        assert_eq!(apply(&mut m, &file), Err(UpdateError::AuthRequired));
    }
}
