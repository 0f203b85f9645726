//! Demand linking.
//!
//! The assembler emits a [`LinkageTemplate`] per code segment: slot 0 is
//! the scratch declaration, slots `1..=n` hold extern symbols in
//! declaration order. The first time a process enters a code segment the
//! machine copies the template into a [`LinkageInstance`] keyed by
//! `(pid, code suid)`. Slots stay symbolic until an instruction touches
//! them; that fetch raises a LinkFault, and resolution writes a completed
//! descriptor into the slot.

use thiserror::Error;

use crate::machine::{Machine, Pid};
use crate::model::{build_descriptor, Descriptor, Layer, LayerPerms, ModelError, PermSet, Suid};
use crate::namespace::{Event, EventKind, NameError};
use crate::traps::{Trap, TrapKind};

pub const DEFAULT_SCRATCH: u64 = 256;

/// Type-table name of the scratch type for each execute layer.
pub fn scratch_type_name(layer: Layer) -> String {
    format!("$scratch.{}", layer.letter())
}

/// Read/write for `layer` only.
pub fn scratch_perms(layer: Layer) -> LayerPerms {
    LayerPerms::only(
        layer,
        PermSet {
            read: true,
            write: true,
            ..PermSet::NONE
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkageTemplate {
    pub scratch: u64,
    /// Extern symbols; `externs[i]` is slot `i + 1`.
    pub externs: Vec<String>,
}

impl Default for LinkageTemplate {
    fn default() -> Self {
        Self {
            scratch: DEFAULT_SCRATCH,
            externs: Vec::new(),
        }
    }
}

impl LinkageTemplate {
    pub fn slot_count(&self) -> usize {
        self.externs.len() + 1
    }

    /// Slot index of an extern symbol.
    pub fn slot_of(&self, symbol: &str) -> Option<u16> {
        self.externs
            .iter()
            .position(|s| s == symbol)
            .map(|i| (i + 1) as u16)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Unresolved(String),
    Resolved(Descriptor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkageKey {
    pub pid: Pid,
    pub code: Suid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkageInstance {
    pub owner: LinkageKey,
    pub slots: Vec<Slot>,
}

impl LinkageInstance {
    pub fn slot(&self, index: u16) -> Option<&Slot> {
        self.slots.get(usize::from(index))
    }

    pub fn resolved_count(&self) -> usize {
        self.slots
            .iter()
            .skip(1)
            .filter(|s| matches!(s, Slot::Resolved(_)))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error(transparent)]
    Name(#[from] NameError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("slot {slot} of {owner:?} is not awaiting resolution")]
    NotPending { owner: LinkageKey, slot: u16 },
}

impl Machine {
    /// Creates the linkage instance for `(pid, code)` with a fresh,
    /// zero-filled scratch segment bound to slot 0.
    pub fn instantiate_linkage(&mut self, key: LinkageKey, code: &Descriptor) -> &LinkageInstance {
        if !self.linkages.contains_key(&key) {
            let template = self
                .segment_meta(code.suid)
                .and_then(|m| m.template.clone())
                .unwrap_or_default();
            let exec_layer = code.perms.highest_execute().unwrap_or(self.process.layer);
            let scratch_ty = self
                .types
                .by_name(&scratch_type_name(exec_layer))
                .map(|t| t.type_id)
                .expect("images always carry scratch types");
            let label = format!("scratch.{}.{}", key.pid.0, self.label_of(code.suid));
            let scratch =
                self.create_segment(&label, vec![0; template.scratch as usize], scratch_ty);
            let scratch_desc =
                build_descriptor(scratch, &self.gst, &self.types).expect("just created");
            let mut slots = Vec::with_capacity(template.slot_count());
            slots.push(Slot::Resolved(scratch_desc));
            slots.extend(template.externs.iter().cloned().map(Slot::Unresolved));
            self.linkages
                .insert(key, LinkageInstance { owner: key, slots });
        }
        &self.linkages[&key]
    }

    /// Reads a slot of the current instance. An unresolved slot raises a
    /// LinkFault; an index past the end is an illegal instruction.
    pub(crate) fn fetch_slot(&self, slot: u16) -> Result<Descriptor, Trap> {
        let inst = &self.linkages[&self.process.linkage];
        match inst.slot(slot) {
            Some(Slot::Resolved(d)) => Ok(*d),
            Some(Slot::Unresolved(symbol)) => Err(self.trap_here(TrapKind::LinkFault {
                slot,
                symbol: symbol.clone(),
            })),
            None => Err(self.trap_here(TrapKind::IllegalOpcode)),
        }
    }

    pub fn linkage(&self, key: &LinkageKey) -> Option<&LinkageInstance> {
        self.linkages.get(key)
    }

    pub fn linkages(&self) -> impl Iterator<Item = &LinkageInstance> {
        self.linkages.values()
    }

    fn pending_symbol(&self, key: LinkageKey, slot: u16) -> Result<String, ResolveError> {
        match self.linkages.get(&key).and_then(|i| i.slot(slot)) {
            Some(Slot::Unresolved(sym)) => Ok(sym.clone()),
            _ => Err(ResolveError::NotPending { owner: key, slot }),
        }
    }

    /// Completes a descriptor for `suid` (the Kernel half of resolution)
    /// and stores it in the slot.
    fn complete_slot(
        &mut self,
        key: LinkageKey,
        slot: u16,
        symbol: &str,
        suid: Suid,
    ) -> Result<Descriptor, ResolveError> {
        let desc = build_descriptor(suid, &self.gst, &self.types)?;
        let inst = self.linkages.get_mut(&key).expect("pending slot exists");
        inst.slots[usize::from(slot)] = Slot::Resolved(desc);
        let ev = link_event(
            self.steps,
            key,
            &self.label_of(key.code),
            slot,
            symbol,
            &desc,
        );
        self.log.log_event(ev);
        Ok(desc)
    }

    /// Resolves `slot` of `key`: name → SUID → GST → Type Table → slot.
    /// This is the path the RESOLVE instruction takes.
    pub fn resolve_slot(&mut self, key: LinkageKey, slot: u16) -> Result<Descriptor, ResolveError> {
        let symbol = self.pending_symbol(key, slot)?;
        let suid = self.names.lookup(&symbol)?;
        self.complete_slot(key, slot, &symbol, suid)
    }

    /// The built-in LinkFault handler. Name lookup runs with Utilities
    /// semantics and the table lookups with Kernel semantics; every layer
    /// change is recorded as a GATE event.
    pub(crate) fn resolve_native(
        &mut self,
        key: LinkageKey,
        slot: u16,
        faulting: Layer,
    ) -> Result<Descriptor, ResolveError> {
        let symbol = self.pending_symbol(key, slot)?;
        self.native_gate(faulting, Layer::Utilities);
        let suid = match self.names.lookup(&symbol) {
            Ok(suid) => suid,
            Err(e) => {
                self.native_gate(Layer::Utilities, faulting);
                return Err(e.into());
            }
        };
        self.native_gate(Layer::Utilities, Layer::Kernel);
        let res = self.complete_slot(key, slot, &symbol, suid);
        self.native_gate(Layer::Kernel, faulting);
        res
    }

    fn native_gate(&mut self, from: Layer, to: Layer) {
        if from == to {
            return;
        }
        let ev = self.gate_event("native", from, to, "native:resolver");
        self.log.log_event(ev);
    }
}

pub(crate) fn link_event(
    step: u64,
    key: LinkageKey,
    owner_label: &str,
    slot: u16,
    symbol: &str,
    d: &Descriptor,
) -> Event {
    Event::new(step, EventKind::Link)
        .hex("pid", u64::from(key.pid.0))
        .with("seg", owner_label)
        .hex("slot", u64::from(slot))
        .with("sym", symbol)
        .hex("suid", d.suid.0)
        .hex("len", d.length)
        .with("S", d.perms.services)
        .with("U", d.perms.utilities)
        .with("K", d.perms.kernel)
        .with("gate", d.gate_to.map(|l| l.letter()).unwrap_or('-'))
        .hex("handler", u64::from(d.handler))
}
