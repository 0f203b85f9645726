//! A descriptor-tagged virtual machine with layered protection, demand
//! linking and a symbolic namespace.
//!
//! Every memory reference goes through a descriptor that names a segment
//! (by SUID), its length and the permissions each layer holds on it. The
//! [`mmu`] checks bounds and permissions on every byte before touching it.

pub mod asm;
pub mod demos;
pub mod image;
pub mod isa;
pub mod layers;
pub mod linker;
pub mod machine;
pub mod mmu;
pub mod model;
pub mod namespace;
pub mod traps;
pub mod verify;

pub use asm::{assemble, disassemble, ObjectUnit};
pub use image::{build_from_path, build_from_sources, parse_image, render_image, GuardImage};
pub use machine::{Machine, RunOutcome, RunResult, StepOutcome};
pub use mmu::{translate, AccessKind, FaultKind, MemFault};
pub use model::{Descriptor, Layer, LayerPerms, PermSet, Suid};
pub use namespace::{Event, EventKind, EventLog};
pub use traps::{ErrorClass, TrapKind};
