//! Microcode engineering toolkit for a K8-style triad microcode engine.
//!
//! The crate models the full path from RTL text to observable x86 behavior:
//! micro-op encoding ([`ucode_isa`]), ROM geometry and scrambled-address
//! recovery ([`rom_map`]), a cycle-accurate host/engine emulator
//! ([`engine`]), the microcode update container with its authentication
//! scheme ([`update`]), and microcode programs built on top of all of it
//! ([`defenses`]).

pub mod defenses;
pub mod engine;
pub mod rom_map;
pub mod ucode_isa;
pub mod update;
