//! Trace auditing. The audit reads trace text with its own tokenizer and
//! never consults the machine, so it can judge any recorded run.

use std::collections::BTreeSet;

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub step: u64,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Line {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

const KINDS: [&str; 8] = [
    "STEP", "TRAP", "LINK", "GATE", "FAULT", "ALARM", "IO", "HALT",
];

fn tokenize(text: &str) -> Result<Vec<Line>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let mut words = raw.split(' ');
        let bad = || format!("line {}: malformed `{raw}`", i + 1);
        if words.next() != Some("EV") {
            return Err(bad());
        }
        let step: u64 = words.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let kind = words.next().filter(|k| KINDS.contains(k)).ok_or_else(bad)?;
        let mut fields = Vec::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(bad)?;
            if k.is_empty() || v.is_empty() {
                return Err(bad());
            }
            fields.push((k.to_string(), v.to_string()));
        }
        out.push(Line {
            step,
            kind: kind.to_string(),
            fields,
        });
    }
    Ok(out)
}

/// Layer rank: 0 innermost (K), 2 outermost (S).
fn rank(layer: &str) -> Option<u8> {
    match layer {
        "K" => Some(0),
        "U" => Some(1),
        "S" => Some(2),
        _ => None,
    }
}

fn hex(v: &str) -> Option<u64> {
    u64::from_str_radix(v.strip_prefix("0x")?, 16).ok()
}

/// `seg+0xoff` plus four.
fn next_insn(at: &str) -> Option<String> {
    let (seg, off) = at.rsplit_once('+')?;
    Some(format!("{seg}+{:#x}", hex(off)?.checked_add(4)?))
}

const ERROR_KINDS: [&str; 8] = [
    "bounds",
    "permission",
    "illegal_opcode",
    "divide_by_zero",
    "stack_fault",
    "gate_sequence",
    "link_unresolvable",
    "trap_nesting",
];

fn error_code(kind: &str) -> Option<u64> {
    ERROR_KINDS
        .iter()
        .position(|k| *k == kind)
        .map(|i| 64 + i as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub lines: usize,
    pub links: usize,
    pub traps: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

struct OpenTrap {
    kind: String,
    at: String,
    policy: String,
    layer: String,
}

/// Audits a rendered trace. Checks, in one pass:
/// grammar and step order; at most one LINK per (pid, segment, slot);
/// resume placement per policy; FAULT → ALARM → HALT for every error with
/// HALT last; and layer changes (descend one layer at ENTER, rise only at
/// EXIT, native return or RESUME).
pub fn audit_trace(text: &str) -> AuditReport {
    let mut report = AuditReport::default();
    let lines = match tokenize(text) {
        Ok(l) => l,
        Err(e) => {
            report.violations.push(e);
            return report;
        }
    };
    report.lines = lines.len();
    let mut v = Vec::new();
    let mut linked = BTreeSet::new();
    let mut open: Vec<OpenTrap> = Vec::new();
    let mut layer = "S".to_string();
    let mut last_step = 0;

    for (i, l) in lines.iter().enumerate() {
        let here = format!("line {}", i + 1);
        if l.step < last_step {
            v.push(format!("{here}: step went backwards"));
        }
        last_step = l.step;
        let field = |k: &str| l.get(k).unwrap_or("");
        if let Some(lay) = l.get("layer") {
            let expect_current = match l.kind.as_str() {
                // a resume restores the saved layer, checked below
                "TRAP" => field("phase") == "enter",
                "LINK" => false,
                _ => true,
            };
            if expect_current && lay != layer {
                v.push(format!(
                    "{here}: {} at layer {lay}, current is {layer}",
                    l.kind
                ));
            }
        }
        match l.kind.as_str() {
            "LINK" => {
                report.links += 1;
                let key = (
                    field("pid").to_string(),
                    field("seg").to_string(),
                    field("slot").to_string(),
                );
                if !linked.insert(key) {
                    v.push(format!("{here}: second LINK for the same slot"));
                }
            }
            "GATE" => {
                let (from, to) = (field("from"), field("to"));
                let (Some(rf), Some(rt)) = (rank(from), rank(to)) else {
                    v.push(format!("{here}: bad GATE layers"));
                    continue;
                };
                if from != layer {
                    v.push(format!("{here}: GATE from {from} but current is {layer}"));
                }
                match field("dir") {
                    "enter" if rt + 1 != rf => {
                        v.push(format!("{here}: ENTER must descend one layer"))
                    }
                    "exit" if rt != rf + 1 => v.push(format!("{here}: EXIT must rise one layer")),
                    "enter" | "exit" | "native" => {}
                    d => v.push(format!("{here}: unknown GATE dir `{d}`")),
                }
                layer = to.to_string();
            }
            "TRAP" => match field("phase") {
                "enter" => {
                    report.traps += 1;
                    open.push(OpenTrap {
                        kind: field("kind").to_string(),
                        at: field("at").to_string(),
                        policy: field("policy").to_string(),
                        layer: field("layer").to_string(),
                    });
                    if let Some((_, hl)) = field("handler")
                        .strip_prefix("guest:")
                        .and_then(|h| h.rsplit_once('@'))
                    {
                        layer = hl.to_string();
                    }
                    if field("policy") == "halt" {
                        let prev_fault = i > 0 && lines[i - 1].kind == "FAULT";
                        if !prev_fault {
                            v.push(format!("{here}: error trap without a FAULT before it"));
                        }
                    }
                }
                "resume" => {
                    let Some(t) = open.pop() else {
                        v.push(format!("{here}: resume without a pending trap"));
                        continue;
                    };
                    let expected_to = match t.policy.as_str() {
                        "retry" => Some(t.at.clone()),
                        "next" => next_insn(&t.at),
                        _ => None,
                    };
                    match expected_to {
                        None => v.push(format!("{here}: {} trap must not resume", t.kind)),
                        Some(to) if to != field("to") => v.push(format!(
                            "{here}: {} policy resumed at {} not {to}",
                            t.policy,
                            field("to")
                        )),
                        _ => {}
                    }
                    if field("kind") != t.kind || field("layer") != t.layer {
                        v.push(format!("{here}: resume does not match its trap"));
                    }
                    if hex(field("depth")) != Some(open.len() as u64) {
                        v.push(format!("{here}: resume depth mismatch"));
                    }
                    layer = t.layer;
                }
                p => v.push(format!("{here}: unknown TRAP phase `{p}`")),
            },
            "FAULT" => {
                let kind = field("kind");
                let Some(code) = error_code(kind) else {
                    v.push(format!("{here}: unknown fault kind `{kind}`"));
                    continue;
                };
                // FAULT [TRAP enter] ALARM HALT, and nothing after
                let mut rest = lines[i + 1..].iter();
                let mut next = rest.next();
                if next.is_some_and(|n| n.kind == "TRAP") {
                    next = rest.next();
                }
                let alarm_ok = next.is_some_and(|a| {
                    a.kind == "ALARM"
                        && a.get("kind") == Some(kind)
                        && a.get("code").and_then(hex) == Some(code)
                });
                let halt = rest.next();
                let halt_ok = halt
                    .is_some_and(|h| h.kind == "HALT" && h.get("code").and_then(hex) == Some(code));
                if !alarm_ok || !halt_ok || rest.next().is_some() {
                    v.push(format!(
                        "{here}: {kind} fault not followed by exactly ALARM, HALT"
                    ));
                }
            }
            "ALARM" if field("kind") != "guest" => {
                let from_fault = lines[..i].iter().rev().take(2).any(|p| p.kind == "FAULT");
                if !from_fault {
                    v.push(format!("{here}: error ALARM without a FAULT"));
                }
            }
            "HALT" if i + 1 != lines.len() => v.push(format!("{here}: events after HALT")),
            _ => {}
        }
    }
    report.violations = v;
    report
}
