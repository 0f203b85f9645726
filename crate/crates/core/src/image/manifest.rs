//! Manifest parsing.
//!
//! ```text
//! image tutorial
//! type svc_code  S:--x U:--- K:---
//! type u_gate    S:--x U:--x K:--- gate_to=U
//! type lnk       S:--- U:--- K:--x handler
//! segment foo_user svc_code asm=foo_user.gasm
//! segment foo      util_data data=hex:000102030405
//! segment buf      util_data size=16
//! trap link guest lnkhnd entry K
//! entry foo_user start
//! io in packets.bin
//! ```
//!
//! `;` starts a comment.

use crate::model::{Layer, LayerPerms};
use crate::namespace::is_valid_name;

use super::{BuildError, BuildErrorKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDecl {
    pub line: usize,
    pub name: String,
    pub perms: LayerPerms,
    pub gate_to: Option<Layer>,
    pub handler: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentSource {
    Asm(String),
    Obj(String),
    Data(Vec<u8>),
    Size(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentDecl {
    pub line: usize,
    pub name: String,
    pub type_name: String,
    pub source: SegmentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapClass {
    Link,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapTargetDecl {
    Native,
    Guest {
        segment: String,
        label: String,
        layer: Layer,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapDecl {
    pub line: usize,
    pub class: TrapClass,
    pub target: TrapTargetDecl,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IoDecl {
    pub input: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    pub types: Vec<TypeDecl>,
    pub segments: Vec<SegmentDecl>,
    pub traps: Vec<TrapDecl>,
    /// Segment name, label, line.
    pub entry: (String, String, usize),
    pub io: IoDecl,
}

impl Manifest {
    /// Files the segments are assembled or loaded from, in declaration order.
    pub fn source_files(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match &s.source {
            SegmentSource::Asm(f) | SegmentSource::Obj(f) => Some(f.as_str()),
            _ => None,
        })
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> BuildError {
    BuildError {
        line,
        kind: BuildErrorKind::Syntax(msg.into()),
    }
}

fn name(line: usize, s: &str) -> Result<String, BuildError> {
    if is_valid_name(s) {
        Ok(s.to_string())
    } else {
        Err(syntax(line, format!("invalid name `{s}`")))
    }
}

fn parse_type(line: usize, args: &[&str]) -> Result<TypeDecl, BuildError> {
    let [n, s, u, k, rest @ ..] = args else {
        return Err(syntax(line, "expected `type <name> S:... U:... K:...`"));
    };
    let perms: LayerPerms = format!("{s} {u} {k}").parse().map_err(|e| BuildError {
        line,
        kind: BuildErrorKind::Model(e),
    })?;
    let mut decl = TypeDecl {
        line,
        name: name(line, n)?,
        perms,
        gate_to: None,
        handler: false,
    };
    for attr in rest {
        match *attr {
            "handler" if !decl.handler => decl.handler = true,
            "gate_to=U" if decl.gate_to.is_none() => decl.gate_to = Some(Layer::Utilities),
            "gate_to=K" if decl.gate_to.is_none() => decl.gate_to = Some(Layer::Kernel),
            other => return Err(syntax(line, format!("unknown type attribute `{other}`"))),
        }
    }
    Ok(decl)
}

fn parse_source(line: usize, src: &str) -> Result<SegmentSource, BuildError> {
    let (key, value) = src
        .split_once('=')
        .ok_or_else(|| syntax(line, format!("bad segment source `{src}`")))?;
    match key {
        "asm" => Ok(SegmentSource::Asm(value.to_string())),
        "obj" => Ok(SegmentSource::Obj(value.to_string())),
        "data" => value
            .strip_prefix("hex:")
            .and_then(|h| hex::decode(h).ok())
            .map(SegmentSource::Data)
            .ok_or_else(|| syntax(line, "data must be `hex:<bytes>`")),
        "size" => crate::asm::parse_number(value)
            .map(SegmentSource::Size)
            .ok_or_else(|| syntax(line, format!("bad size `{value}`"))),
        _ => Err(syntax(line, format!("bad segment source `{src}`"))),
    }
}

fn parse_trap(line: usize, args: &[&str]) -> Result<TrapDecl, BuildError> {
    let class = match args.first() {
        Some(&"link") => TrapClass::Link,
        Some(&"user") => TrapClass::User,
        _ => return Err(syntax(line, "trap class must be `link` or `user`")),
    };
    let target = match &args[1..] {
        ["native"] => TrapTargetDecl::Native,
        ["guest", seg, label, layer] => TrapTargetDecl::Guest {
            segment: name(line, seg)?,
            label: name(line, label)?,
            layer: layer
                .parse()
                .map_err(|_| syntax(line, format!("bad layer `{layer}`")))?,
        },
        _ => {
            return Err(syntax(
                line,
                "expected `native` or `guest <segment> <label> <layer>`",
            ))
        }
    };
    Ok(TrapDecl {
        line,
        class,
        target,
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest, BuildError> {
    let mut image_name = None;
    let mut types = Vec::new();
    let mut segments = Vec::new();
    let mut traps = Vec::new();
    let mut entry = None;
    let mut io = IoDecl::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split(';').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["image", n] if image_name.is_none() => image_name = Some(name(line, n)?),
            ["type", args @ ..] => types.push(parse_type(line, args)?),
            ["segment", n, t, src] => segments.push(SegmentDecl {
                line,
                name: name(line, n)?,
                type_name: name(line, t)?,
                source: parse_source(line, src)?,
            }),
            ["trap", args @ ..] => traps.push(parse_trap(line, args)?),
            ["entry", seg, label] if entry.is_none() => {
                entry = Some((name(line, seg)?, name(line, label)?, line))
            }
            ["io", "in", path] if io.input.is_none() => io.input = Some(path.to_string()),
            ["io", "out", path] if io.output.is_none() => io.output = Some(path.to_string()),
            _ => {
                return Err(syntax(
                    line,
                    format!("unrecognized line `{}`", content.trim()),
                ))
            }
        }
    }
    Ok(Manifest {
        name: image_name.ok_or_else(|| syntax(1, "missing `image <name>`"))?,
        types,
        segments,
        traps,
        entry: entry.ok_or_else(|| syntax(1, "missing `entry <segment> <label>`"))?,
        io,
    })
}
