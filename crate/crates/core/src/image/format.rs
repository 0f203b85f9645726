//! Deterministic text serialization of a [`GuardImage`].
//!
//! ```text
//! guard-image 1
//! name tutorial
//! nextsuid 0x1002
//! type 0 svc_code S:--x U:--- K:--- gate=- handler=0
//! segment 0x1000 main type=0 len=0x4
//! template 0x1000 scratch=256
//! extern 0x1000 1 foo
//! label 0x1000 start 0x0
//! data 0x1000 hex:00000000
//! bind main 0x1000
//! trap link native:resolver
//! trap user native:ignore
//! entry 0x1000 0x0
//! io in packets.bin
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::asm::parse_number;
use crate::linker::LinkageTemplate;
use crate::mmu::SegmentStore;
use crate::model::{GlobalSegmentTable, GstEntry, Layer, Suid, TypeId, TypeTable};
use crate::namespace::NameTable;
use crate::traps::{HandlerTarget, NativeHandler, TrapBindings};

use super::{GuardImage, IoDecl, SegmentMeta};

pub const IMAGE_HEADER: &str = "guard-image 1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("image line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

fn target_text(t: HandlerTarget) -> String {
    match t {
        HandlerTarget::Native(NativeHandler::Resolver) => "native:resolver".into(),
        HandlerTarget::Native(NativeHandler::Error) => "native:error".into(),
        HandlerTarget::Native(NativeHandler::Ignore) => "native:ignore".into(),
        HandlerTarget::Guest { suid, entry, layer } => format!("guest {suid} {entry:#x} {layer}"),
    }
}

pub fn render_image(img: &GuardImage) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{IMAGE_HEADER}");
    let _ = writeln!(out, "name {}", img.name);
    let _ = writeln!(out, "nextsuid {}", img.gst.next_suid());
    for t in img.types.iter() {
        let gate = t.gate_to.map_or("-".to_string(), |l| l.to_string());
        let _ = writeln!(
            out,
            "type {} {} {} gate={gate} handler={}",
            t.type_id.0,
            t.name,
            t.perms,
            u8::from(t.handler)
        );
    }
    for e in img.gst.iter() {
        let meta = img.segments.get(&e.suid).cloned().unwrap_or_default();
        let _ = writeln!(
            out,
            "segment {} {} type={} len={:#x}",
            e.suid, meta.label, e.type_id.0, e.length
        );
        if let Some(t) = &meta.template {
            let _ = writeln!(out, "template {} scratch={}", e.suid, t.scratch);
            for (i, sym) in t.externs.iter().enumerate() {
                let _ = writeln!(out, "extern {} {} {sym}", e.suid, i + 1);
            }
        }
        for (label, off) in &meta.labels {
            let _ = writeln!(out, "label {} {label} {off:#x}", e.suid);
        }
        for chunk in img.store.contents(e.suid).unwrap_or(&[]).chunks(32) {
            let _ = writeln!(out, "data {} hex:{}", e.suid, hex::encode(chunk));
        }
    }
    for (name, suid) in img.names.iter() {
        let _ = writeln!(out, "bind {name} {suid}");
    }
    let _ = writeln!(out, "trap link {}", target_text(img.traps.link));
    let _ = writeln!(out, "trap user {}", target_text(img.traps.user));
    let _ = writeln!(out, "entry {} {:#x}", img.entry.0, img.entry.1);
    if let Some(p) = &img.io.input {
        let _ = writeln!(out, "io in {p}");
    }
    if let Some(p) = &img.io.output {
        let _ = writeln!(out, "io out {p}");
    }
    out
}

pub fn parse_image(text: &str) -> Result<GuardImage, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == IMAGE_HEADER => {}
        _ => {
            return Err(FormatError {
                line: 1,
                msg: format!("expected `{IMAGE_HEADER}`"),
            })
        }
    }
    let mut name = None;
    let mut next = None;
    let mut types = TypeTable::new();
    let mut gst_entries: Vec<GstEntry> = Vec::new();
    let mut segments: BTreeMap<Suid, SegmentMeta> = BTreeMap::new();
    let mut data: BTreeMap<Suid, Vec<u8>> = BTreeMap::new();
    let mut names = NameTable::new();
    let mut traps = TrapBindings::default();
    let mut entry = None;
    let mut io = IoDecl::default();

    for (i, raw) in lines {
        let line = i + 1;
        let err = |msg: String| FormatError { line, msg };
        let num = |s: &str| parse_number(s).ok_or_else(|| err(format!("bad number `{s}`")));
        let suid = |s: &str| num(s).map(Suid);
        let kv = |s: &str, key: &str| {
            s.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| err(format!("expected `{key}=`")))
        };
        let words: Vec<&str> = raw.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["name", n] => name = Some(n.to_string()),
            ["nextsuid", n] => next = Some(num(n)?),
            ["type", id, tname, s, u, k, gate, handler] => {
                let perms = format!("{s} {u} {k}")
                    .parse()
                    .map_err(|e| err(format!("{e}")))?;
                let gate_to = match kv(gate, "gate")?.as_str() {
                    "-" => None,
                    l => Some(l.parse::<Layer>().map_err(|e| err(format!("{e}")))?),
                };
                let handler = match kv(handler, "handler")?.as_str() {
                    "0" => false,
                    "1" => true,
                    h => return Err(err(format!("bad handler flag `{h}`"))),
                };
                let got = types
                    .insert(tname, perms, gate_to, handler)
                    .map_err(|e| err(e.to_string()))?;
                if u64::from(got.0) != num(id)? {
                    return Err(err("type ids must be dense and in order".into()));
                }
            }
            ["segment", s, label, ty, len] => {
                let s = suid(s)?;
                let ty = num(&kv(ty, "type")?)?;
                let type_id = TypeId(u16::try_from(ty).map_err(|_| err("bad type id".into()))?);
                types.get(type_id).map_err(|e| err(e.to_string()))?;
                gst_entries.push(GstEntry {
                    suid: s,
                    length: num(&kv(len, "len")?)?,
                    type_id,
                });
                segments.insert(
                    s,
                    SegmentMeta {
                        label: label.to_string(),
                        ..SegmentMeta::default()
                    },
                );
                data.insert(s, Vec::new());
            }
            ["template", s, scratch] => {
                let meta = segments
                    .get_mut(&suid(s)?)
                    .ok_or_else(|| err("template before segment".into()))?;
                meta.template = Some(LinkageTemplate {
                    scratch: num(&kv(scratch, "scratch")?)?,
                    externs: Vec::new(),
                });
            }
            ["extern", s, slot, sym] => {
                let t = segments
                    .get_mut(&suid(s)?)
                    .and_then(|m| m.template.as_mut())
                    .ok_or_else(|| err("extern before template".into()))?;
                if num(slot)? != t.externs.len() as u64 + 1 {
                    return Err(err("externs must be numbered 1.. in order".into()));
                }
                t.externs.push(sym.to_string());
            }
            ["label", s, l, off] => {
                let off = num(off)?;
                segments
                    .get_mut(&suid(s)?)
                    .ok_or_else(|| err("label before segment".into()))?
                    .labels
                    .insert(l.to_string(), off);
            }
            ["data", s, bytes] => {
                let chunk = bytes
                    .strip_prefix("hex:")
                    .and_then(|h| hex::decode(h).ok())
                    .ok_or_else(|| err("bad data".into()))?;
                data.get_mut(&suid(s)?)
                    .ok_or_else(|| err("data before segment".into()))?
                    .extend(chunk);
            }
            ["bind", n, s] => names.bind(n, suid(s)?).map_err(|e| err(e.to_string()))?,
            ["trap", class, rest @ ..] => {
                let target = match rest {
                    ["native:resolver"] => HandlerTarget::Native(NativeHandler::Resolver),
                    ["native:error"] => HandlerTarget::Native(NativeHandler::Error),
                    ["native:ignore"] => HandlerTarget::Native(NativeHandler::Ignore),
                    ["guest", s, off, layer] => HandlerTarget::Guest {
                        suid: suid(s)?,
                        entry: num(off)?,
                        layer: layer.parse().map_err(|e| err(format!("{e}")))?,
                    },
                    _ => return Err(err("bad trap target".into())),
                };
                match *class {
                    "link" => traps.link = target,
                    "user" => traps.user = target,
                    c => return Err(err(format!("bad trap class `{c}`"))),
                }
            }
            ["entry", s, off] => entry = Some((suid(s)?, num(off)?)),
            ["io", "in", p] => io.input = Some(p.to_string()),
            ["io", "out", p] => io.output = Some(p.to_string()),
            _ => return Err(err(format!("unrecognized line `{}`", raw.trim()))),
        }
    }

    let missing = |what: &str| FormatError {
        line: 0,
        msg: format!("missing {what}"),
    };
    let mut gst = GlobalSegmentTable::with_next(next.ok_or_else(|| missing("nextsuid"))?);
    let mut store = SegmentStore::new();
    for e in gst_entries {
        let bytes = data.remove(&e.suid).unwrap_or_default();
        if bytes.len() as u64 != e.length {
            return Err(FormatError {
                line: 0,
                msg: format!(
                    "segment {} has {} data bytes, expected {}",
                    e.suid,
                    bytes.len(),
                    e.length
                ),
            });
        }
        gst.insert(e).map_err(|x| missing(&x.to_string()))?;
        store
            .bind_segment(e.suid, bytes)
            .expect("gst insert rejects duplicates");
    }
    let entry = entry.ok_or_else(|| missing("entry"))?;
    crate::model::build_descriptor(entry.0, &gst, &types)
        .map_err(|e| missing(&format!("entry segment: {e}")))?;
    Ok(GuardImage {
        name: name.ok_or_else(|| missing("name"))?,
        types,
        gst,
        names,
        store,
        segments,
        traps,
        entry,
        io,
    })
}
