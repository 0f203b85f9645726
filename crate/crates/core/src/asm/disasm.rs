use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::isa::{decode, Instruction, Mode};

use super::ObjectUnit;

fn slot_name(unit: &ObjectUnit, slot: u16) -> Option<String> {
    let t = unit.template.as_ref()?;
    match slot {
        0 => Some("0".to_string()),
        s => t.externs.get(usize::from(s) - 1).cloned(),
    }
}

fn branch_ok(unit: &ObjectUnit, target: u16) -> bool {
    target.is_multiple_of(4) && u64::from(target) < unit.bytes.len() as u64
}

/// The unit's own label at `off` if it has one, else a synthesized one.
fn target_name(unit: &ObjectUnit, off: u64) -> String {
    unit.labels
        .iter()
        .find(|(_, &o)| o == off)
        .map_or_else(|| format!("L_{off:04x}"), |(name, _)| name.clone())
}

/// Renders an instruction the assembler would reproduce bit for bit, or
/// `None` when only `.word` is lossless.
fn render(unit: &ObjectUnit, insn: &Instruction) -> Option<String> {
    let mn = insn.opcode.mnemonic();
    Some(match insn.mode {
        Mode::Immediate if insn.opcode.is_branch() => {
            if !branch_ok(unit, insn.operand) {
                return None;
            }
            format!("{mn} {}", target_name(unit, u64::from(insn.operand)))
        }
        Mode::SlotDirect => format!("{mn} {}", slot_name(unit, insn.operand)?),
        Mode::SlotIndexed => format!("{mn} {},X", slot_name(unit, insn.operand)?),
        _ => insn.to_string(),
    })
}

/// Canonical source for an object unit. The unit's labels are kept;
/// branch targets without one get synthesized `L_<offset>` labels, and
/// undecodable words become `.word` directives.
pub fn disassemble(unit: &ObjectUnit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".segment {} {}", unit.name, unit.type_name);
    let mut named: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for (name, &off) in &unit.labels {
        named.entry(off).or_default().push(name);
    }
    let put_labels = |out: &mut String, off: u64| {
        for name in named.get(&off).into_iter().flatten() {
            let _ = writeln!(out, "{name}:");
        }
    };
    let Some(template) = &unit.template else {
        let mut off = 0;
        for chunk in unit.bytes.chunks(16) {
            // a label inside a row splits it
            let mut start = 0;
            for (i, _) in chunk.iter().enumerate() {
                let at = off + i as u64;
                if i > start && named.contains_key(&at) {
                    byte_row(&mut out, &chunk[start..i]);
                    start = i;
                }
                if i == start {
                    put_labels(&mut out, at);
                }
            }
            byte_row(&mut out, &chunk[start..]);
            off += chunk.len() as u64;
        }
        put_labels(&mut out, off);
        return out;
    };
    let _ = writeln!(out, ".scratch {}", template.scratch);
    for name in &template.externs {
        let _ = writeln!(out, ".extern {name}");
    }

    let words: Vec<[u8; 4]> = unit
        .bytes
        .chunks(4)
        .map(|c| {
            let mut w = [0u8; 4];
            w[..c.len()].copy_from_slice(c);
            w
        })
        .collect();
    let rendered: Vec<Option<String>> = words
        .iter()
        .map(|w| decode(*w).ok().and_then(|i| render(unit, &i)))
        .collect();
    let targets: BTreeSet<u64> = words
        .iter()
        .zip(&rendered)
        .filter_map(|(w, r)| {
            let insn = decode(*w).ok()?;
            (r.is_some() && insn.opcode.is_branch()).then_some(u64::from(insn.operand))
        })
        .collect();

    for (i, (word, text)) in words.iter().zip(rendered).enumerate() {
        let off = i as u64 * 4;
        put_labels(&mut out, off);
        if targets.contains(&off) && !named.contains_key(&off) {
            let _ = writeln!(out, "L_{off:04x}:");
        }
        match text {
            Some(t) => {
                let _ = writeln!(out, "    {t}");
            }
            None => {
                let _ = writeln!(out, "    .word {:#010x}", u32::from_be_bytes(*word));
            }
        }
    }
    put_labels(&mut out, unit.bytes.len() as u64);
    out
}

fn byte_row(out: &mut String, bytes: &[u8]) {
    let vals: Vec<String> = bytes.iter().map(|b| format!("{b:#04x}")).collect();
    let _ = writeln!(out, ".byte {}", vals.join(", "));
}
