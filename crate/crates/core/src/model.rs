//! Segment identities, layers, permissions, descriptors and the two
//! authoritative tables (Global Segment Table and Type Table).
//!
//! Descriptors are never assembled by hand: [`build_descriptor`] composes
//! the GST entry for a SUID with the Type Table entry for its type, so
//! every permission observed at run time traces back to the Type Table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// First SUID handed out by a fresh [`GlobalSegmentTable`].
pub const FIRST_SUID: u64 = 0x1000;

/// Segment unique identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Suid(pub u64);

impl fmt::Display for Suid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Software layer a process can execute in.
///
/// Ordering follows the dependency direction: `Kernel < Utilities < Services`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Kernel = 0,
    Utilities = 1,
    Services = 2,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Services, Layer::Utilities, Layer::Kernel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u64) -> Option<Layer> {
        match code {
            0 => Some(Layer::Kernel),
            1 => Some(Layer::Utilities),
            2 => Some(Layer::Services),
            _ => None,
        }
    }

    /// The layer directly underneath this one, if any.
    pub fn below(self) -> Option<Layer> {
        match self {
            Layer::Services => Some(Layer::Utilities),
            Layer::Utilities => Some(Layer::Kernel),
            Layer::Kernel => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Layer::Services => 'S',
            Layer::Utilities => 'U',
            Layer::Kernel => 'K',
        }
    }

    pub fn from_letter(c: char) -> Option<Layer> {
        match c {
            'S' => Some(Layer::Services),
            'U' => Some(Layer::Utilities),
            'K' => Some(Layer::Kernel),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Layer {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Layer::from_letter(c),
            _ => None,
        }
        .ok_or_else(|| ModelError::BadLayer(s.to_string()))
    }
}

/// Access rights of one layer over one segment.
///
/// `append` is carried so manifests can name it, but image validation
/// refuses to grant it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PermSet {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
    pub append: bool,
}

impl PermSet {
    pub const NONE: PermSet = PermSet {
        read: false,
        write: false,
        execute: false,
        append: false,
    };

    /// Builds a set from the low four bits `r=1 w=2 x=4 a=8`.
    pub fn from_bits(bits: u8) -> PermSet {
        PermSet {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
            execute: bits & 4 != 0,
            append: bits & 8 != 0,
        }
    }

    pub fn bits(self) -> u8 {
        u8::from(self.read)
            | u8::from(self.write) << 1
            | u8::from(self.execute) << 2
            | u8::from(self.append) << 3
    }

    pub fn is_empty(self) -> bool {
        self.bits() == 0
    }
}

impl fmt::Display for PermSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on: bool, c: char| if on { c } else { '-' };
        write!(
            f,
            "{}{}{}",
            flag(self.read, 'r'),
            flag(self.write, 'w'),
            flag(self.execute, 'x')
        )?;
        if self.append {
            f.write_str("a")?;
        }
        Ok(())
    }
}

impl FromStr for PermSet {
    type Err = ModelError;

    /// Accepts `rwx` triples with `-` for absent flags and an optional
    /// fourth `a`/`-` position for append.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadPerms(s.to_string());
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 && chars.len() != 4 {
            return Err(bad());
        }
        let mut perms = PermSet::NONE;
        for (i, c) in chars.iter().enumerate() {
            let slot = match (i, c) {
                (_, '-') => continue,
                (0, 'r') => &mut perms.read,
                (1, 'w') => &mut perms.write,
                (2, 'x') => &mut perms.execute,
                (3, 'a') => &mut perms.append,
                _ => return Err(bad()),
            };
            *slot = true;
        }
        Ok(perms)
    }
}

/// One [`PermSet`] per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LayerPerms {
    pub services: PermSet,
    pub utilities: PermSet,
    pub kernel: PermSet,
}

impl LayerPerms {
    pub fn get(&self, layer: Layer) -> PermSet {
        match layer {
            Layer::Services => self.services,
            Layer::Utilities => self.utilities,
            Layer::Kernel => self.kernel,
        }
    }

    pub fn get_mut(&mut self, layer: Layer) -> &mut PermSet {
        match layer {
            Layer::Services => &mut self.services,
            Layer::Utilities => &mut self.utilities,
            Layer::Kernel => &mut self.kernel,
        }
    }

    /// Only `layer` gets `perms`; the other two layers get nothing.
    pub fn only(layer: Layer, perms: PermSet) -> LayerPerms {
        let mut lp = LayerPerms::default();
        *lp.get_mut(layer) = perms;
        lp
    }

    pub fn grants_append(&self) -> bool {
        Layer::ALL.iter().any(|&l| self.get(l).append)
    }

    /// Highest layer that may execute a segment of this type.
    pub fn highest_execute(&self) -> Option<Layer> {
        Layer::ALL.into_iter().find(|&l| self.get(l).execute)
    }
}

impl fmt::Display for LayerPerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S:{} U:{} K:{}",
            self.services, self.utilities, self.kernel
        )
    }
}

impl FromStr for LayerPerms {
    type Err = ModelError;

    /// Parses `S:rwx U:rwx K:rwx`; all three layers must appear exactly once.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut seen = [false; 3];
        let mut lp = LayerPerms::default();
        for part in s.split_whitespace() {
            let (layer, perms) = part
                .split_once(':')
                .ok_or_else(|| ModelError::BadPerms(part.to_string()))?;
            let layer: Layer = layer.parse()?;
            if std::mem::replace(&mut seen[layer.index()], true) {
                return Err(ModelError::BadPerms(s.to_string()));
            }
            *lp.get_mut(layer) = perms.parse()?;
        }
        if seen.iter().all(|&s| s) {
            Ok(lp)
        } else {
            Err(ModelError::BadPerms(s.to_string()))
        }
    }
}

/// The tagged intermediary on every address path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub suid: Suid,
    pub length: u64,
    pub perms: LayerPerms,
    pub gate_to: Option<Layer>,
    pub handler: bool,
}

impl Descriptor {
    pub fn perms_at(&self, layer: Layer) -> PermSet {
        self.perms.get(layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeId(pub u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeEntry {
    pub type_id: TypeId,
    pub name: String,
    pub perms: LayerPerms,
    pub gate_to: Option<Layer>,
    pub handler: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GstEntry {
    pub suid: Suid,
    pub length: u64,
    pub type_id: TypeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown segment {0}")]
    UnknownSuid(Suid),
    #[error("unknown type id {}", .0 .0)]
    UnknownType(TypeId),
    #[error("unknown type name `{0}`")]
    UnknownTypeName(String),
    #[error("duplicate type name `{0}`")]
    DuplicateType(String),
    #[error("segment {0} already exists")]
    DuplicateSuid(Suid),
    #[error("type `{0}` grants append, which is never granted")]
    AppendGranted(String),
    #[error("type `{name}` gates to {to} which is not below its entry layer")]
    BadGate { name: String, to: Layer },
    #[error("bad layer `{0}`")]
    BadLayer(String),
    #[error("bad permission string `{0}`")]
    BadPerms(String),
}

/// Type → per-layer permissions. Type ids are dense and assigned in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeTable {
    entries: Vec<TypeEntry>,
}

impl TypeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a type and returns its id.
    pub fn insert(
        &mut self,
        name: &str,
        perms: LayerPerms,
        gate_to: Option<Layer>,
        handler: bool,
    ) -> Result<TypeId, ModelError> {
        if self.by_name(name).is_some() {
            return Err(ModelError::DuplicateType(name.to_string()));
        }
        if perms.grants_append() {
            return Err(ModelError::AppendGranted(name.to_string()));
        }
        if let Some(to) = gate_to {
            // the gate is entered from its highest execute layer and may
            // only lower the Layer Register from there
            match perms.highest_execute() {
                Some(entry) if to < entry => {}
                _ => {
                    return Err(ModelError::BadGate {
                        name: name.to_string(),
                        to,
                    })
                }
            }
        }
        let type_id = TypeId(self.entries.len() as u16);
        self.entries.push(TypeEntry {
            type_id,
            name: name.to_string(),
            perms,
            gate_to,
            handler,
        });
        Ok(type_id)
    }

    pub fn get(&self, type_id: TypeId) -> Result<&TypeEntry, ModelError> {
        self.entries
            .get(usize::from(type_id.0))
            .ok_or(ModelError::UnknownType(type_id))
    }

    pub fn by_name(&self, name: &str) -> Option<&TypeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TypeEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// SUID → (length, type). SUIDs are handed out sequentially and never
/// reused, even after deletion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalSegmentTable {
    entries: BTreeMap<Suid, GstEntry>,
    next: u64,
}

impl Default for GlobalSegmentTable {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            next: FIRST_SUID,
        }
    }
}

impl GlobalSegmentTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restores a table with an explicit allocation cursor.
    pub fn with_next(next: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            next,
        }
    }

    pub fn next_suid(&self) -> Suid {
        Suid(self.next)
    }

    /// Allocates a fresh SUID for a segment of `length` bytes.
    pub fn create(&mut self, length: u64, type_id: TypeId) -> Suid {
        let suid = Suid(self.next);
        self.next += 1;
        self.entries.insert(
            suid,
            GstEntry {
                suid,
                length,
                type_id,
            },
        );
        suid
    }

    /// Inserts an entry with a caller-chosen SUID (image loading).
    pub fn insert(&mut self, entry: GstEntry) -> Result<(), ModelError> {
        if self.entries.contains_key(&entry.suid) {
            return Err(ModelError::DuplicateSuid(entry.suid));
        }
        self.next = self.next.max(entry.suid.0 + 1);
        self.entries.insert(entry.suid, entry);
        Ok(())
    }

    pub fn delete(&mut self, suid: Suid) -> Result<GstEntry, ModelError> {
        self.entries
            .remove(&suid)
            .ok_or(ModelError::UnknownSuid(suid))
    }

    pub(crate) fn set_length(&mut self, suid: Suid, length: u64) -> Result<(), ModelError> {
        let entry = self
            .entries
            .get_mut(&suid)
            .ok_or(ModelError::UnknownSuid(suid))?;
        entry.length = length;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &GstEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn gst_lookup(gst: &GlobalSegmentTable, suid: Suid) -> Result<GstEntry, ModelError> {
    gst.entries
        .get(&suid)
        .copied()
        .ok_or(ModelError::UnknownSuid(suid))
}

pub fn type_permissions(
    tt: &TypeTable,
    type_id: TypeId,
    layer: Layer,
) -> Result<PermSet, ModelError> {
    Ok(tt.get(type_id)?.perms.get(layer))
}

/// Completes a descriptor from the GST entry and the Type Table.
pub fn build_descriptor(
    suid: Suid,
    gst: &GlobalSegmentTable,
    tt: &TypeTable,
) -> Result<Descriptor, ModelError> {
    let entry = gst_lookup(gst, suid)?;
    let ty = tt.get(entry.type_id)?;
    Ok(Descriptor {
        suid,
        length: entry.length,
        perms: ty.perms,
        gate_to: ty.gate_to,
        handler: ty.handler,
    })
}
