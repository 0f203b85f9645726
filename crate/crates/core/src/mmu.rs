//! The memory management unit: every byte the machine touches goes
//! through [`translate`] first.
//!
//! The store itself is a flat SUID → bytes map. When auditing is switched
//! on, the MMU records each check and each raw touch so a harness can prove
//! that no byte was read or written without a successful check in front of
//! it.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::model::{Descriptor, GlobalSegmentTable, Layer, ModelError, Suid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    ExecuteFetch,
}

impl AccessKind {
    pub fn letter(self) -> char {
        match self {
            AccessKind::Read => 'r',
            AccessKind::Write => 'w',
            AccessKind::ExecuteFetch => 'x',
        }
    }

    pub fn from_letter(c: char) -> Option<AccessKind> {
        match c {
            'r' => Some(AccessKind::Read),
            'w' => Some(AccessKind::Write),
            'x' => Some(AccessKind::ExecuteFetch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Bounds,
    Permission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemFault {
    pub kind: FaultKind,
    pub suid: Suid,
    pub offset: u64,
    pub access: AccessKind,
    pub layer: Layer,
}

impl fmt::Display for MemFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FaultKind::Bounds => "bounds",
            FaultKind::Permission => "permission",
        };
        write!(
            f,
            "{kind} fault: {}+{:#x} {} at layer {}",
            self.suid,
            self.offset,
            self.access.letter(),
            self.layer
        )
    }
}

/// Bounds first, then the permission column selected by `layer`.
pub fn translate(
    d: &Descriptor,
    offset: u64,
    access: AccessKind,
    layer: Layer,
) -> Result<(), MemFault> {
    let fault = |kind| MemFault {
        kind,
        suid: d.suid,
        offset,
        access,
        layer,
    };
    if offset >= d.length {
        return Err(fault(FaultKind::Bounds));
    }
    let perms = d.perms_at(layer);
    let granted = match access {
        AccessKind::Read => perms.read,
        AccessKind::Write => perms.write,
        AccessKind::ExecuteFetch => perms.execute,
    };
    if granted {
        Ok(())
    } else {
        Err(fault(FaultKind::Permission))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error(transparent)]
    Fault(#[from] MemFault),
    #[error("segment {0} has no storage bound")]
    UnknownSuid(Suid),
    #[error("segment {0} is already bound")]
    DuplicateSuid(Suid),
    #[error("segment resize attempted outside the Kernel layer (layer {0})")]
    NotKernel(Layer),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl std::error::Error for MemFault {}

impl MmuError {
    /// The fault a guest would see for this error, if any. `NotKernel`
    /// surfaces as a permission fault on the segment being resized.
    pub fn as_fault(&self, suid: Suid, layer: Layer) -> Option<MemFault> {
        match self {
            MmuError::Fault(f) => Some(*f),
            MmuError::NotKernel(_) => Some(MemFault {
                kind: FaultKind::Permission,
                suid,
                offset: 0,
                access: AccessKind::Write,
                layer,
            }),
            _ => None,
        }
    }
}

/// One entry of the mediation audit trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmuRecord {
    Check {
        suid: Suid,
        offset: u64,
        access: AccessKind,
        layer: Layer,
        ok: bool,
    },
    Touch {
        suid: Suid,
        offset: u64,
        access: AccessKind,
        value: u8,
    },
}

/// Physical segment storage plus the mediation point in front of it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentStore {
    segments: BTreeMap<Suid, Vec<u8>>,
    audit: Option<Vec<MmuRecord>>,
}

impl SegmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enable_audit(&mut self) {
        self.audit.get_or_insert_with(Vec::new);
    }

    pub fn audit(&self) -> &[MmuRecord] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn take_audit(&mut self) -> Vec<MmuRecord> {
        self.audit.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn record(&mut self, rec: MmuRecord) {
        if let Some(log) = &mut self.audit {
            log.push(rec);
        }
    }

    /// Runs [`translate`] and records the check.
    pub fn check(
        &mut self,
        d: &Descriptor,
        offset: u64,
        access: AccessKind,
        layer: Layer,
    ) -> Result<(), MemFault> {
        let res = translate(d, offset, access, layer);
        self.record(MmuRecord::Check {
            suid: d.suid,
            offset,
            access,
            layer,
            ok: res.is_ok(),
        });
        res
    }

    fn cell(
        &mut self,
        d: &Descriptor,
        offset: u64,
        access: AccessKind,
        layer: Layer,
    ) -> Result<&mut u8, MmuError> {
        let bytes = self
            .segments
            .get_mut(&d.suid)
            .ok_or(MmuError::UnknownSuid(d.suid))?;
        // a stale descriptor can outlive a shrink; the store length wins
        usize::try_from(offset)
            .ok()
            .and_then(|i| bytes.get_mut(i))
            .ok_or(MmuError::Fault(MemFault {
                kind: FaultKind::Bounds,
                suid: d.suid,
                offset,
                access,
                layer,
            }))
    }

    fn touch(
        &mut self,
        d: &Descriptor,
        offset: u64,
        access: AccessKind,
        layer: Layer,
        store: Option<u8>,
    ) -> Result<u8, MmuError> {
        self.check(d, offset, access, layer)?;
        let cell = self.cell(d, offset, access, layer)?;
        if let Some(v) = store {
            *cell = v;
        }
        let value = *cell;
        self.record(MmuRecord::Touch {
            suid: d.suid,
            offset,
            access,
            value,
        });
        Ok(value)
    }

    pub fn read_byte(&mut self, d: &Descriptor, offset: u64, layer: Layer) -> Result<u8, MmuError> {
        self.touch(d, offset, AccessKind::Read, layer, None)
    }

    pub fn write_byte(
        &mut self,
        d: &Descriptor,
        offset: u64,
        value: u8,
        layer: Layer,
    ) -> Result<(), MmuError> {
        self.touch(d, offset, AccessKind::Write, layer, Some(value))
            .map(drop)
    }

    /// Fetches the 4-byte instruction word at `offset`. Each byte is
    /// checked for execute access; nothing is returned unless all four pass.
    pub fn fetch_word(
        &mut self,
        d: &Descriptor,
        offset: u64,
        layer: Layer,
    ) -> Result<[u8; 4], MmuError> {
        let mut word = [0u8; 4];
        for (i, b) in word.iter_mut().enumerate() {
            let off = offset.wrapping_add(i as u64);
            *b = self.touch(d, off, AccessKind::ExecuteFetch, layer, None)?;
        }
        Ok(word)
    }

    pub fn bind_segment(&mut self, suid: Suid, bytes: Vec<u8>) -> Result<(), MmuError> {
        if self.segments.contains_key(&suid) {
            return Err(MmuError::DuplicateSuid(suid));
        }
        self.segments.insert(suid, bytes);
        Ok(())
    }

    pub fn unbind_segment(&mut self, suid: Suid) -> Result<Vec<u8>, MmuError> {
        self.segments
            .remove(&suid)
            .ok_or(MmuError::UnknownSuid(suid))
    }

    /// Grows (zero fill) or truncates a segment, keeping the GST length in
    /// step. Only the Kernel layer may do this.
    pub fn resize_segment(
        &mut self,
        gst: &mut GlobalSegmentTable,
        suid: Suid,
        new_length: u64,
        layer: Layer,
    ) -> Result<(), MmuError> {
        if layer != Layer::Kernel {
            return Err(MmuError::NotKernel(layer));
        }
        let len = usize::try_from(new_length).map_err(|_| MmuError::UnknownSuid(suid))?;
        crate::model::gst_lookup(gst, suid)?;
        let bytes = self
            .segments
            .get_mut(&suid)
            .ok_or(MmuError::UnknownSuid(suid))?;
        gst.set_length(suid, new_length)?;
        bytes.resize(len, 0);
        Ok(())
    }

    /// Raw contents, bypassing mediation. Host-side inspection only.
    pub fn contents(&self, suid: Suid) -> Option<&[u8]> {
        self.segments.get(&suid).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Suid, &[u8])> {
        self.segments.iter().map(|(s, b)| (*s, b.as_slice()))
    }
}
