//! Two-pass assembler for `.gasm` source.
//!
//! ```text
//! .segment foo_user svc_code
//! .scratch 64
//! .extern u_gate          ; slot 1
//! .extern foo             ; slot 2
//! start:  LDX #7
//!         LDA foo, X      ; slot-indexed through slot 2
//!         CALL u_gate
//!         HALT
//! ```
//!
//! Pass one collects labels and externs, pass two encodes. A unit made of
//! `.byte` lines only is a data segment and carries no linkage template.

mod disasm;
mod object;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{encode, Instruction, Mode, Opcode};
use crate::linker::{LinkageTemplate, DEFAULT_SCRATCH};
use crate::model::Layer;
use crate::namespace::is_valid_name;

pub use disasm::disassemble;
pub use object::{parse_object, render_object, ObjectError};

/// Assembled segment: bytes, template (code only) and label offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectUnit {
    pub name: String,
    pub type_name: String,
    pub bytes: Vec<u8>,
    pub template: Option<LinkageTemplate>,
    pub labels: BTreeMap<String, u64>,
}

impl ObjectUnit {
    pub fn is_code(&self) -> bool {
        self.template.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct AsmError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for AsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// One source line after comment stripping and label splitting.
#[derive(Debug)]
enum Item<'a> {
    Segment(&'a str),
    Extern(&'a str),
    Scratch(&'a str),
    Bytes(&'a str),
    Word(&'a str),
    Insn { mnemonic: String, operand: &'a str },
}

struct Line<'a> {
    no: usize,
    label: Option<&'a str>,
    item: Option<Item<'a>>,
}

fn split_line<'a>(no: usize, raw: &'a str, diags: &mut Vec<Diagnostic>) -> Line<'a> {
    let text = raw.split(';').next().unwrap_or("").trim();
    let (label, rest) = match text.split_once(':') {
        Some((l, r)) if is_valid_name(l.trim()) => (Some(l.trim()), r.trim()),
        _ => (None, text),
    };
    let item = if rest.is_empty() {
        None
    } else {
        let (head, tail) = rest
            .split_once(char::is_whitespace)
            .map(|(h, t)| (h, t.trim()))
            .unwrap_or((rest, ""));
        match head {
            ".segment" => Some(Item::Segment(tail)),
            ".extern" => Some(Item::Extern(tail)),
            ".scratch" => Some(Item::Scratch(tail)),
            ".byte" => Some(Item::Bytes(tail)),
            ".word" => Some(Item::Word(tail)),
            d if d.starts_with('.') => {
                diags.push(Diagnostic {
                    line: no,
                    message: format!("unknown directive `{d}`"),
                });
                None
            }
            m => Some(Item::Insn {
                mnemonic: m.to_ascii_uppercase(),
                operand: tail,
            }),
        }
    };
    Line { no, label, item }
}

pub(crate) fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        s.parse().ok()
    } else {
        None
    }
}

struct Pass1<'a> {
    name: Option<(&'a str, &'a str)>,
    externs: Vec<&'a str>,
    scratch: Option<u64>,
    labels: BTreeMap<String, u64>,
    is_data: bool,
    is_code: bool,
    size: u64,
}

fn pass_one<'a>(lines: &[Line<'a>], diags: &mut Vec<Diagnostic>) -> Pass1<'a> {
    let mut p = Pass1 {
        name: None,
        externs: Vec::new(),
        scratch: None,
        labels: BTreeMap::new(),
        is_data: false,
        is_code: false,
        size: 0,
    };
    let mut err = |line: usize, message: String| diags.push(Diagnostic { line, message });
    for line in lines {
        if let Some(label) = line.label {
            if p.labels.insert(label.to_string(), p.size).is_some() {
                err(line.no, format!("duplicate label `{label}`"));
            }
        }
        match &line.item {
            None => {}
            Some(Item::Segment(args)) => {
                let parts: Vec<&str> = args.split_whitespace().collect();
                match parts.as_slice() {
                    [n, t] if p.name.is_none() && is_valid_name(n) && is_valid_name(t) => {
                        p.name = Some((n, t))
                    }
                    [_, _] if p.name.is_some() => {
                        err(line.no, "more than one .segment in a unit".into())
                    }
                    _ => err(line.no, "expected `.segment <name> <type>`".into()),
                }
            }
            Some(Item::Extern(name)) => {
                if !is_valid_name(name) {
                    err(line.no, format!("invalid extern name `{name}`"));
                } else if p.externs.contains(name) {
                    err(line.no, format!("duplicate extern `{name}`"));
                } else {
                    p.externs.push(name);
                }
            }
            Some(Item::Scratch(n)) => match parse_number(n) {
                Some(v) if p.scratch.is_none() => p.scratch = Some(v),
                Some(_) => err(line.no, "duplicate .scratch".into()),
                None => err(line.no, format!("bad scratch size `{n}`")),
            },
            Some(Item::Bytes(list)) => {
                p.is_data = true;
                p.size += list.split(',').filter(|s| !s.trim().is_empty()).count() as u64;
            }
            Some(Item::Word(_)) | Some(Item::Insn { .. }) => {
                p.is_code = true;
                p.size += 4;
            }
        }
    }
    if p.name.is_none() {
        diags.push(Diagnostic {
            line: 1,
            message: "missing `.segment <name> <type>`".into(),
        });
    }
    if p.is_code && p.is_data {
        diags.push(Diagnostic {
            line: 1,
            message: "`.byte` data cannot be mixed with instructions".into(),
        });
    }
    if p.is_data && (!p.externs.is_empty() || p.scratch.is_some()) {
        diags.push(Diagnostic {
            line: 1,
            message: "data segments take no `.extern` or `.scratch`".into(),
        });
    }
    p
}

struct Encoder<'p, 'a> {
    p: &'p Pass1<'a>,
    no: usize,
    diags: Vec<Diagnostic>,
}

impl Encoder<'_, '_> {
    fn err(&mut self, message: String) {
        self.diags.push(Diagnostic {
            line: self.no,
            message,
        });
    }

    fn operand16(&mut self, text: &str) -> Option<u16> {
        match parse_number(text) {
            Some(v) if v <= 0xffff => Some(v as u16),
            Some(_) => {
                self.err(format!(
                    "operand overflow: `{text}` does not fit in 16 bits"
                ));
                None
            }
            None => {
                self.err(format!("bad number `{text}`"));
                None
            }
        }
    }

    fn slot(&mut self, text: &str) -> Option<u16> {
        let slots = self.p.externs.len() as u64 + 1;
        if let Some(n) = parse_number(text) {
            if n < slots {
                return Some(n as u16);
            }
            self.err(format!(
                "slot {n} out of range (template has {slots} slots)"
            ));
            return None;
        }
        match self.p.externs.iter().position(|e| *e == text) {
            Some(i) => Some(i as u16 + 1),
            None => {
                self.err(format!("extern `{text}` used but not declared"));
                None
            }
        }
    }

    fn target(&mut self, text: &str) -> Option<u16> {
        let off = match parse_number(text) {
            Some(n) => n,
            None => match self.p.labels.get(text) {
                Some(&off) => off,
                None => {
                    self.err(format!("undefined label `{text}`"));
                    return None;
                }
            },
        };
        if off % 4 != 0 || off >= self.p.size.max(1) || off > 0xffff {
            self.err(format!(
                "branch target {off:#x} is not an instruction in this segment"
            ));
            return None;
        }
        Some(off as u16)
    }

    fn insn(&mut self, mnemonic: &str, operand: &str) -> Option<Instruction> {
        let Some(opcode) = Opcode::from_mnemonic(mnemonic) else {
            self.err(format!("unknown mnemonic `{mnemonic}`"));
            return None;
        };
        let operand = operand.trim();
        let (mode, value) = if operand.is_empty() {
            match opcode {
                Opcode::Halt => (Mode::Immediate, 0),
                _ => (Mode::None, 0),
            }
        } else if let Some(imm) = operand.strip_prefix('#') {
            (Mode::Immediate, self.operand16(imm)?)
        } else if let Some((base, idx)) = operand.split_once(',') {
            if !idx.trim().eq_ignore_ascii_case("x") {
                self.err(format!("expected `,X` in `{operand}`"));
                return None;
            }
            (Mode::SlotIndexed, self.slot(base.trim())?)
        } else if opcode.is_branch() {
            (Mode::Immediate, self.target(operand)?)
        } else if opcode == Opcode::Enter {
            let mut chars = operand.chars();
            match (chars.next().and_then(Layer::from_letter), chars.next()) {
                (Some(layer), None) => (Mode::Immediate, layer as u16),
                _ => {
                    self.err(format!("ENTER takes a layer letter, got `{operand}`"));
                    return None;
                }
            }
        } else {
            (Mode::SlotDirect, self.slot(operand)?)
        };
        if !opcode.modes().contains(&mode) {
            self.err(format!("{mnemonic} does not take {} operands", mode.name()));
            return None;
        }
        Some(Instruction::new(opcode, mode, value))
    }
}

/// Assembles one source unit.
pub fn assemble(source: &str) -> Result<ObjectUnit, AsmError> {
    let mut diags = Vec::new();
    let lines: Vec<Line> = source
        .lines()
        .enumerate()
        .map(|(i, l)| split_line(i + 1, l, &mut diags))
        .collect();
    let p = pass_one(&lines, &mut diags);

    let mut enc = Encoder {
        p: &p,
        no: 0,
        diags,
    };
    let mut bytes = Vec::with_capacity(p.size as usize);
    for line in &lines {
        enc.no = line.no;
        match &line.item {
            Some(Item::Insn { mnemonic, operand }) => match enc.insn(mnemonic, operand) {
                Some(insn) => bytes.extend_from_slice(&encode(&insn)),
                None => bytes.extend_from_slice(&[0; 4]),
            },
            Some(Item::Word(text)) => {
                let word = parse_number(text).filter(|&v| v <= u64::from(u32::MAX));
                match word {
                    Some(v) => bytes.extend_from_slice(&(v as u32).to_be_bytes()),
                    None => {
                        enc.err(format!("bad .word `{text}`"));
                        bytes.extend_from_slice(&[0; 4]);
                    }
                }
            }
            Some(Item::Bytes(list)) => {
                for v in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match parse_number(v).filter(|&n| n <= 0xff) {
                        Some(n) => bytes.push(n as u8),
                        None => {
                            enc.err(format!("bad byte `{v}`"));
                            bytes.push(0);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    if !enc.diags.is_empty() {
        let mut diagnostics = enc.diags;
        diagnostics.sort_by_key(|d| d.line);
        return Err(AsmError { diagnostics });
    }
    let (name, type_name) = p.name.expect("checked in pass one");
    let template = (!p.is_data).then(|| LinkageTemplate {
        scratch: p.scratch.unwrap_or(DEFAULT_SCRATCH),
        externs: p.externs.iter().map(|s| s.to_string()).collect(),
    });
    Ok(ObjectUnit {
        name: name.to_string(),
        type_name: type_name.to_string(),
        bytes,
        template,
        labels: p.labels.clone(),
    })
}
