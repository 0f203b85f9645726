//! `.gobj` text object format.
//!
//! ```text
//! name foo_user
//! type svc_code
//! scratch 256
//! extern 1 u_gate
//! extern 2 foo
//! label start 0x0
//! code hex:1200070010010200
//! ```
//!
//! `scratch` is present for code units only. `code` lines carry at most 16
//! bytes each.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::linker::LinkageTemplate;
use crate::namespace::is_valid_name;

use super::{parse_number, ObjectUnit};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("object line {line}: {msg}")]
pub struct ObjectError {
    pub line: usize,
    pub msg: String,
}

pub fn render_object(unit: &ObjectUnit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name {}", unit.name);
    let _ = writeln!(out, "type {}", unit.type_name);
    if let Some(t) = &unit.template {
        let _ = writeln!(out, "scratch {}", t.scratch);
        for (i, sym) in t.externs.iter().enumerate() {
            let _ = writeln!(out, "extern {} {sym}", i + 1);
        }
    }
    let mut labels: Vec<(&String, &u64)> = unit.labels.iter().collect();
    labels.sort_by_key(|(name, off)| (**off, name.as_str()));
    for (name, off) in labels {
        let _ = writeln!(out, "label {name} {off:#x}");
    }
    for chunk in unit.bytes.chunks(16) {
        let _ = writeln!(out, "code hex:{}", hex::encode(chunk));
    }
    out
}

pub fn parse_object(text: &str) -> Result<ObjectUnit, ObjectError> {
    let mut name = None;
    let mut type_name = None;
    let mut template: Option<LinkageTemplate> = None;
    let mut labels = BTreeMap::new();
    let mut bytes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| ObjectError {
            line: i + 1,
            msg: msg.to_string(),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            ["name", n] if name.is_none() && is_valid_name(n) => name = Some(n.to_string()),
            ["type", t] if type_name.is_none() && is_valid_name(t) => {
                type_name = Some(t.to_string())
            }
            ["scratch", n] if template.is_none() => {
                let scratch = parse_number(n).ok_or_else(|| err("bad scratch size"))?;
                template = Some(LinkageTemplate {
                    scratch,
                    externs: Vec::new(),
                });
            }
            ["extern", slot, sym] => {
                let t = template
                    .as_mut()
                    .ok_or_else(|| err("extern before scratch"))?;
                if parse_number(slot) != Some(t.externs.len() as u64 + 1) || !is_valid_name(sym) {
                    return Err(err("externs must be numbered 1.. in order"));
                }
                t.externs.push(sym.to_string());
            }
            ["label", l, off] => {
                let off = parse_number(off).ok_or_else(|| err("bad label offset"))?;
                if labels.insert(l.to_string(), off).is_some() {
                    return Err(err("duplicate label"));
                }
            }
            ["code", data] => {
                let hex = data
                    .strip_prefix("hex:")
                    .ok_or_else(|| err("expected hex:"))?;
                let chunk = hex::decode(hex).map_err(|_| err("bad hex"))?;
                if chunk.is_empty() || chunk.len() > 16 {
                    return Err(err("code lines carry 1..=16 bytes"));
                }
                bytes.extend(chunk);
            }
            _ => return Err(err("unrecognized line")),
        }
    }
    let missing = |what: &str| ObjectError {
        line: 0,
        msg: format!("missing {what}"),
    };
    Ok(ObjectUnit {
        name: name.ok_or_else(|| missing("name"))?,
        type_name: type_name.ok_or_else(|| missing("type"))?,
        bytes,
        template,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::super::assemble;
    use super::*;

    #[test]
    fn bit_exact_layout() {
        let unit = assemble(
            ".segment foo_user svc_code\n.extern u_gate\n.extern foo\nstart: LDX #7\nLDA foo,X\n",
        )
        .unwrap();
        assert_eq!(
            render_object(&unit),
            "name foo_user\ntype svc_code\nscratch 256\nextern 1 u_gate\nextern 2 foo\n\
             label start 0x0\ncode hex:1200070010010200\n"
        );
    }

    #[test]
    fn lines_split_at_sixteen_bytes() {
        let src: String = std::iter::once(".segment d data\n.byte ".to_string())
            .chain(std::iter::once(
                (0..20).map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            ))
            .collect();
        let unit = assemble(&src).unwrap();
        let text = render_object(&unit);
        assert_eq!(text.lines().filter(|l| l.starts_with("code")).count(), 2);
        assert!(!text.contains("scratch"));
        assert_eq!(parse_object(&text).unwrap(), unit);
    }

    #[test]
    fn malformed_objects() {
        assert!(parse_object("name a\n").is_err());
        assert!(parse_object("name a\ntype t\nextern 1 x\n").is_err());
        assert!(parse_object("name a\ntype t\nscratch 4\nextern 2 x\n").is_err());
        assert!(parse_object("name a\ntype t\ncode hex:zz\n").is_err());
        assert!(parse_object("name a\ntype t\nbogus\n").is_err());
    }
}
