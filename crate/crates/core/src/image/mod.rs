//! Guard images: the loadable unit built from a manifest.
//!
//! An image carries the Type Table, the GST, the namespace, segment bytes,
//! linkage templates, trap bindings and the entry point.

mod format;
mod manifest;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::asm::{assemble, parse_object, AsmError, ObjectUnit};
use crate::linker::{scratch_perms, scratch_type_name, LinkageTemplate};
use crate::mmu::SegmentStore;
use crate::model::{GlobalSegmentTable, Layer, ModelError, Suid, TypeTable, FIRST_SUID};
use crate::namespace::{NameError, NameTable};
use crate::traps::{HandlerTarget, NativeHandler, TrapBindings};

pub use format::{parse_image, render_image, FormatError};
pub use manifest::{
    parse_manifest, IoDecl, Manifest, SegmentDecl, SegmentSource, TrapClass, TrapDecl,
    TrapTargetDecl, TypeDecl,
};

/// Per-segment data kept beside the GST.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentMeta {
    /// Trace label, fixed at creation.
    pub label: String,
    pub template: Option<LinkageTemplate>,
    pub labels: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardImage {
    pub name: String,
    pub types: TypeTable,
    pub gst: GlobalSegmentTable,
    pub names: NameTable,
    pub store: SegmentStore,
    pub segments: BTreeMap<Suid, SegmentMeta>,
    pub traps: TrapBindings,
    pub entry: (Suid, u64),
    pub io: IoDecl,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildErrorKind {
    #[error("{0}")]
    Syntax(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("segment `{segment}` has no label `{label}`")]
    UnknownLabel { segment: String, label: String },
    #[error("entry segment `{0}` is not executable in the Services layer")]
    EntryNotServices(String),
    #[error("source declares `{found}` but the manifest says `{expected}`")]
    Mismatch { expected: String, found: String },
    #[error("handler `{0}` must have a handler type executable at its layer")]
    BadHandler(String),
    #[error("missing source `{0}`")]
    MissingSource(String),
    #[error("{file}: {err}")]
    Asm { file: String, err: AsmError },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("manifest line {line}: {kind}")]
pub struct BuildError {
    pub line: usize,
    pub kind: BuildErrorKind,
}

fn at(line: usize) -> impl Fn(BuildErrorKind) -> BuildError {
    move |kind| BuildError { line, kind }
}

/// Assembles or parses every source a manifest names, fetching file text
/// through `read`.
pub fn load_units(
    manifest: &Manifest,
    read: &dyn Fn(&str) -> Option<String>,
) -> Result<BTreeMap<String, ObjectUnit>, BuildError> {
    let mut units = BTreeMap::new();
    for seg in &manifest.segments {
        let err = at(seg.line);
        let (file, unit) = match &seg.source {
            SegmentSource::Asm(f) => {
                let text = read(f).ok_or_else(|| err(BuildErrorKind::MissingSource(f.clone())))?;
                let unit = assemble(&text).map_err(|e| {
                    err(BuildErrorKind::Asm {
                        file: f.clone(),
                        err: e,
                    })
                })?;
                (f, unit)
            }
            SegmentSource::Obj(f) => {
                let text = read(f).ok_or_else(|| err(BuildErrorKind::MissingSource(f.clone())))?;
                let unit = parse_object(&text)
                    .map_err(|e| err(BuildErrorKind::Syntax(format!("{f}: {e}"))))?;
                (f, unit)
            }
            _ => continue,
        };
        units.insert(file.clone(), unit);
    }
    Ok(units)
}

/// Reads a manifest from disk and builds it, resolving sources relative to
/// the manifest's directory.
pub fn build_from_path(path: &Path) -> Result<GuardImage, BuildError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| at(0)(BuildErrorKind::Io(format!("{}: {e}", path.display()))))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text)?;
    let units = load_units(&manifest, &|f| std::fs::read_to_string(base.join(f)).ok())?;
    build_image(&manifest, &units)
}

/// Builds an image. `units` maps source file names to their assembled
/// objects.
pub fn build_image(
    manifest: &Manifest,
    units: &BTreeMap<String, ObjectUnit>,
) -> Result<GuardImage, BuildError> {
    let mut types = TypeTable::new();
    for t in &manifest.types {
        let err = at(t.line);
        if types.by_name(&t.name).is_some() {
            return Err(err(BuildErrorKind::DuplicateName(t.name.clone())));
        }
        types
            .insert(&t.name, t.perms, t.gate_to, t.handler)
            .map_err(|e| err(e.into()))?;
    }
    for layer in Layer::ALL {
        types
            .insert(&scratch_type_name(layer), scratch_perms(layer), None, false)
            .map_err(|e| at(0)(e.into()))?;
    }

    let mut gst = GlobalSegmentTable::with_next(FIRST_SUID);
    let mut names = NameTable::new();
    let mut store = SegmentStore::new();
    let mut segments = BTreeMap::new();
    for seg in &manifest.segments {
        let err = at(seg.line);
        let ty = types
            .by_name(&seg.type_name)
            .ok_or_else(|| err(BuildErrorKind::UnknownType(seg.type_name.clone())))?
            .type_id;
        if names.lookup(&seg.name).is_ok() {
            return Err(err(BuildErrorKind::DuplicateName(seg.name.clone())));
        }
        let (bytes, template, labels) = match &seg.source {
            SegmentSource::Data(b) => (b.clone(), None, BTreeMap::new()),
            SegmentSource::Size(n) => (vec![0; *n as usize], None, BTreeMap::new()),
            SegmentSource::Asm(f) | SegmentSource::Obj(f) => {
                let unit = units
                    .get(f)
                    .ok_or_else(|| err(BuildErrorKind::MissingSource(f.clone())))?;
                if unit.name != seg.name {
                    return Err(err(BuildErrorKind::Mismatch {
                        expected: seg.name.clone(),
                        found: unit.name.clone(),
                    }));
                }
                if unit.type_name != seg.type_name {
                    return Err(err(BuildErrorKind::Mismatch {
                        expected: seg.type_name.clone(),
                        found: unit.type_name.clone(),
                    }));
                }
                (
                    unit.bytes.clone(),
                    unit.template.clone(),
                    unit.labels.clone(),
                )
            }
        };
        let suid = gst.create(bytes.len() as u64, ty);
        store
            .bind_segment(suid, bytes)
            .expect("fresh SUIDs are unbound");
        names.bind(&seg.name, suid).map_err(|e| match e {
            NameError::DuplicateName(n) => err(BuildErrorKind::DuplicateName(n)),
            other => err(BuildErrorKind::Syntax(other.to_string())),
        })?;
        segments.insert(
            suid,
            SegmentMeta {
                label: seg.name.clone(),
                template,
                labels,
            },
        );
    }

    let code_point = |seg: &str, label: &str, line: usize| -> Result<(Suid, u64), BuildError> {
        let suid = names
            .lookup(seg)
            .map_err(|_| at(line)(BuildErrorKind::UnknownSegment(seg.to_string())))?;
        let off = segments[&suid].labels.get(label).copied().ok_or_else(|| {
            at(line)(BuildErrorKind::UnknownLabel {
                segment: seg.to_string(),
                label: label.to_string(),
            })
        })?;
        Ok((suid, off))
    };
    let type_of = |suid: Suid| {
        let e = crate::model::gst_lookup(&gst, suid).expect("just created");
        types.get(e.type_id).expect("validated").clone()
    };

    let (entry_seg, entry_label, entry_line) = &manifest.entry;
    let entry = code_point(entry_seg, entry_label, *entry_line)?;
    if !type_of(entry.0).perms.get(Layer::Services).execute {
        return Err(at(*entry_line)(BuildErrorKind::EntryNotServices(
            entry_seg.clone(),
        )));
    }

    let mut traps = TrapBindings::default();
    for t in &manifest.traps {
        let target = match &t.target {
            TrapTargetDecl::Native => match t.class {
                TrapClass::Link => HandlerTarget::Native(NativeHandler::Resolver),
                TrapClass::User => HandlerTarget::Native(NativeHandler::Ignore),
            },
            TrapTargetDecl::Guest {
                segment,
                label,
                layer,
            } => {
                let (suid, entry) = code_point(segment, label, t.line)?;
                let ty = type_of(suid);
                if !ty.handler || !ty.perms.get(*layer).execute {
                    return Err(at(t.line)(BuildErrorKind::BadHandler(segment.clone())));
                }
                HandlerTarget::Guest {
                    suid,
                    entry,
                    layer: *layer,
                }
            }
        };
        match t.class {
            TrapClass::Link => traps.link = target,
            TrapClass::User => traps.user = target,
        }
    }

    Ok(GuardImage {
        name: manifest.name.clone(),
        types,
        gst,
        names,
        store,
        segments,
        traps,
        entry,
        io: manifest.io.clone(),
    })
}

/// Builds from manifest text with sources supplied by `read`.
pub fn build_from_sources(
    manifest_text: &str,
    read: &dyn Fn(&str) -> Option<String>,
) -> Result<GuardImage, BuildError> {
    let manifest = parse_manifest(manifest_text)?;
    let units = load_units(&manifest, read)?;
    build_image(&manifest, &units)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageAdminError {
    #[error(transparent)]
    Name(#[from] NameError),
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("object declares type `{found}` but `{expected}` was requested")]
    TypeMismatch { expected: String, found: String },
}

impl GuardImage {
    pub fn segment_by_name(&self, name: &str) -> Option<(Suid, &SegmentMeta)> {
        let suid = self.names.lookup(name).ok()?;
        self.segments.get(&suid).map(|m| (suid, m))
    }

    /// Renames a namespace entry. SUIDs, types and labels are untouched.
    pub fn rename(&mut self, old: &str, new: &str) -> Result<(), ImageAdminError> {
        Ok(self.names.rename(old, new)?)
    }

    /// Installs `unit` as a new segment of `type_name` and binds it under
    /// `name`, replacing any previous binding of that name. The old
    /// segment stays in the GST.
    pub fn bind_object(
        &mut self,
        name: &str,
        unit: &ObjectUnit,
        type_name: &str,
    ) -> Result<Suid, ImageAdminError> {
        let ty = self
            .types
            .by_name(type_name)
            .ok_or_else(|| ImageAdminError::UnknownType(type_name.to_string()))?
            .type_id;
        if unit.type_name != type_name {
            return Err(ImageAdminError::TypeMismatch {
                expected: type_name.to_string(),
                found: unit.type_name.clone(),
            });
        }
        if !crate::namespace::is_valid_name(name) {
            return Err(NameError::InvalidName(name.to_string()).into());
        }
        let suid = self.gst.create(unit.bytes.len() as u64, ty);
        self.store
            .bind_segment(suid, unit.bytes.clone())
            .expect("fresh SUIDs are unbound");
        self.segments.insert(
            suid,
            SegmentMeta {
                label: name.to_string(),
                template: unit.template.clone(),
                labels: unit.labels.clone(),
            },
        );
        let _ = self.names.unbind(name);
        self.names.bind(name, suid)?;
        Ok(suid)
    }
}
