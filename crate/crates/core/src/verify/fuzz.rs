//! Random-program fuzzing against a shadow memory model.
//!
//! Each program runs in a small random image. The shadow keeps its own
//! copy of every segment's bytes, length and per-layer permission string,
//! built from the generator's choices rather than from the machine's
//! tables. After every step the MMU audit trail is replayed against the
//! shadow: each check must agree with the shadow's verdict, each byte
//! touch must follow a passing check for the same address, reads must
//! return the shadow's byte, and the store must equal the shadow.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asm::ObjectUnit;
use crate::image::{build_image, parse_manifest, GuardImage};
use crate::linker::LinkageTemplate;
use crate::machine::{Machine, StepOutcome};
use crate::mmu::{AccessKind, MmuRecord};
use crate::model::{Layer, Suid};
use crate::namespace::{Event, EventKind};

use super::audit::audit_trace;

/// Opcode bytes the generator draws from.
const OPCODES: [u8; 29] = [
    0x00, 0x01, 0x10, 0x11, 0x12, 0x20, 0x21, 0x22, 0x23, 0x24, 0x25, 0x26, 0x30, 0x31, 0x32, 0x33,
    0x34, 0x40, 0x41, 0x42, 0x43, 0x50, 0x51, 0x60, 0x61, 0x70, 0x71, 0x72, 0x73,
];
/// Loads of immediates, ALU, branches and HALT: no slot references.
const ARITH_OPCODES: [u8; 15] = [
    0x00, 0x01, 0x10, 0x12, 0x20, 0x21, 0x22, 0x23, 0x24, 0x25, 0x26, 0x30, 0x31, 0x32, 0x33,
];

const DATA_SEGMENTS: usize = 3;
const SCRATCH: u64 = 8;
/// Scratch size for code that carries no linkage template.
const DEFAULT_SCRATCH: u64 = 256;
/// main, gate, then the data segments; scratch SUIDs follow.
const SCRATCH_BASE: u64 = 0x1000 + 2 + DATA_SEGMENTS as u64;
const MAIN_EXTERNS: [&str; 5] = ["d0", "d1", "d2", "gate", "missing"];
const GATE_EXTERNS: [&str; 4] = ["d0", "d1", "d2", "main"];

#[derive(Debug, Clone, Copy)]
pub struct FuzzConfig {
    pub seed: u64,
    pub count: usize,
    pub max_steps: u64,
    /// Restrict programs to immediates, ALU ops and branches.
    pub arith_only: bool,
}

impl FuzzConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        FuzzConfig {
            seed,
            count,
            max_steps: 256,
            arith_only: false,
        }
    }
}

/// A generated program and the image around it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub main: Vec<u8>,
    pub gate: Vec<u8>,
    /// Per data segment: `S:.. U:.. K:..` permissions and contents.
    pub data: Vec<(String, Vec<u8>)>,
    pub input: Vec<u8>,
}

fn rwx(rng: &mut ChaCha8Rng) -> String {
    let bits: u8 = rng.gen_range(0..8);
    let flag = |mask: u8, c: char| if bits & mask != 0 { c } else { '-' };
    [flag(4, 'r'), flag(2, 'w'), flag(1, 'x')].iter().collect()
}

fn gen_code(rng: &mut ChaCha8Rng, externs: usize, arith_only: bool) -> Vec<u8> {
    let words = rng.gen_range(1..=16usize);
    let len = (words * 4) as u16;
    let mut out = Vec::with_capacity(words * 4);
    for _ in 0..words {
        let op = if arith_only {
            ARITH_OPCODES[rng.gen_range(0..ARITH_OPCODES.len())]
        } else if rng.gen_ratio(1, 40) {
            rng.gen()
        } else {
            OPCODES[rng.gen_range(0..OPCODES.len())]
        };
        let is_branch = (0x30..=0x34).contains(&op);
        let mode: u8 = if arith_only || is_branch {
            0
        } else if rng.gen_ratio(1, 40) {
            rng.gen()
        } else {
            rng.gen_range(0..4)
        };
        let operand: u16 = match (op, mode) {
            _ if is_branch => {
                if rng.gen_ratio(1, 20) {
                    rng.gen_range(0..len + 8)
                } else {
                    rng.gen_range(0..=len / 4) * 4
                }
            }
            (0x42, _) => rng.gen_range(0..4),
            (_, 1) | (_, 2) => rng.gen_range(0..=externs as u16 + 1),
            (0x00, _) => rng.gen_range(0..3),
            _ => rng.gen_range(0..20),
        };
        let [lo, hi] = operand.to_le_bytes();
        out.extend([op, mode, lo, hi]);
    }
    out
}

pub fn generate(rng: &mut ChaCha8Rng, arith_only: bool) -> Program {
    let main = gen_code(rng, MAIN_EXTERNS.len(), arith_only);
    let gate = gen_code(rng, GATE_EXTERNS.len(), arith_only);
    let data = (0..DATA_SEGMENTS)
        .map(|_| {
            let perms = format!("S:{} U:{} K:{}", rwx(rng), rwx(rng), rwx(rng));
            let len = rng.gen_range(1..=12);
            let bytes = (0..len).map(|_| rng.gen()).collect();
            (perms, bytes)
        })
        .collect();
    let input = (0..rng.gen_range(0..8)).map(|_| rng.gen()).collect();
    Program {
        main,
        gate,
        data,
        input,
    }
}

fn unit(name: &str, ty: &str, bytes: &[u8], externs: &[&str]) -> ObjectUnit {
    ObjectUnit {
        name: name.to_string(),
        type_name: ty.to_string(),
        bytes: bytes.to_vec(),
        template: Some(LinkageTemplate {
            scratch: SCRATCH,
            externs: externs.iter().map(|s| s.to_string()).collect(),
        }),
        labels: [("start".to_string(), 0)].into_iter().collect(),
    }
}

pub fn build(p: &Program) -> GuardImage {
    let mut m = String::from(
        "image fuzz\n\
         type code S:--x U:--- K:---\n\
         type gate S:--x U:--x K:--- gate_to=U\n",
    );
    for (i, (perms, _)) in p.data.iter().enumerate() {
        m.push_str(&format!("type t{i} {perms}\n"));
    }
    m.push_str("segment main code obj=main\nsegment gate gate obj=gate\n");
    for (i, (_, bytes)) in p.data.iter().enumerate() {
        m.push_str(&format!(
            "segment d{i} t{i} data=hex:{}\n",
            hex::encode(bytes)
        ));
    }
    m.push_str("entry main start\n");
    let manifest = parse_manifest(&m).expect("generated manifest parses");
    let units: BTreeMap<String, ObjectUnit> = [
        (
            "main".to_string(),
            unit("main", "code", &p.main, &MAIN_EXTERNS),
        ),
        (
            "gate".to_string(),
            unit("gate", "gate", &p.gate, &GATE_EXTERNS),
        ),
    ]
    .into_iter()
    .collect();
    build_image(&manifest, &units).expect("generated image builds")
}

/// The shadow's view of one segment.
#[derive(Debug, Clone)]
struct ShadowSeg {
    bytes: Vec<u8>,
    /// Permission letters for S, U, K.
    perms: [String; 3],
}

struct Shadow {
    segs: BTreeMap<u64, ShadowSeg>,
    names: BTreeMap<String, u64>,
}

fn layer_slot(layer: Layer) -> usize {
    match layer {
        Layer::Services => 0,
        Layer::Utilities => 1,
        Layer::Kernel => 2,
    }
}

impl Shadow {
    fn new(p: &Program) -> Shadow {
        let seg = |bytes: &[u8], s: &str, u: &str, k: &str| ShadowSeg {
            bytes: bytes.to_vec(),
            perms: [s.to_string(), u.to_string(), k.to_string()],
        };
        let mut segs = BTreeMap::new();
        let mut names = BTreeMap::new();
        segs.insert(0x1000, seg(&p.main, "--x", "---", "---"));
        segs.insert(0x1001, seg(&p.gate, "--x", "--x", "---"));
        names.insert("main".to_string(), 0x1000);
        names.insert("gate".to_string(), 0x1001);
        for (i, (perms, bytes)) in p.data.iter().enumerate() {
            let cols: Vec<&str> = perms.split(' ').map(|c| &c[2..]).collect();
            segs.insert(0x1002 + i as u64, seg(bytes, cols[0], cols[1], cols[2]));
            names.insert(format!("d{i}"), 0x1002 + i as u64);
        }
        Shadow { segs, names }
    }

    /// Scratch segments appear as the machine enters new code. Each is
    /// zero-filled and read/write only at the highest layer that may
    /// execute its code segment; code without a template (an executable
    /// data segment) gets the default size.
    fn adopt_new(&mut self, m: &Machine) -> Result<(), String> {
        for (suid, _) in m.store().iter() {
            if suid.0 < SCRATCH_BASE || self.segs.contains_key(&suid.0) {
                continue;
            }
            let label = m
                .segment_meta(suid)
                .map(|meta| meta.label.as_str())
                .unwrap_or("");
            let code_name = label
                .strip_prefix("scratch.")
                .and_then(|rest| rest.split_once('.'))
                .map(|(_, code)| code)
                .ok_or_else(|| format!("unexpected segment {suid} `{label}`"))?;
            let code = *self
                .names
                .get(code_name)
                .ok_or_else(|| format!("scratch for unknown code `{code_name}`"))?;
            let size = if code_name == "main" || code_name == "gate" {
                SCRATCH
            } else {
                DEFAULT_SCRATCH
            };
            let exec = self.segs[&code]
                .perms
                .iter()
                .position(|p| p.contains('x'))
                .ok_or_else(|| format!("scratch for non-executable `{code_name}`"))?;
            let mut perms: [String; 3] = ["---".into(), "---".into(), "---".into()];
            perms[exec] = "rw-".into();
            self.segs.insert(
                suid.0,
                ShadowSeg {
                    bytes: vec![0; size as usize],
                    perms,
                },
            );
        }
        Ok(())
    }

    fn allows(&self, suid: Suid, offset: u64, access: AccessKind, layer: Layer) -> bool {
        let Some(s) = self.segs.get(&suid.0) else {
            return false;
        };
        let letter = match access {
            AccessKind::Read => 'r',
            AccessKind::Write => 'w',
            AccessKind::ExecuteFetch => 'x',
        };
        (offset as u128) < s.bytes.len() as u128 && s.perms[layer_slot(layer)].contains(letter)
    }

    fn compare(&self, m: &Machine) -> Result<(), String> {
        let mut seen = 0;
        for (suid, bytes) in m.store().iter() {
            let Some(s) = self.segs.get(&suid.0) else {
                return Err(format!("store holds unknown segment {suid}"));
            };
            if s.bytes != bytes {
                return Err(format!("segment {suid} differs from the shadow"));
            }
            seen += 1;
        }
        if seen != self.segs.len() {
            return Err("a segment vanished from the store".into());
        }
        Ok(())
    }
}

/// Summary of one program's run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub steps: u64,
    pub halted: Option<u16>,
    pub links: usize,
}

fn check_fault_chain(events: &[Event], failed: &MmuRecord) -> Result<(), String> {
    let MmuRecord::Check {
        suid,
        offset,
        access,
        ..
    } = failed
    else {
        unreachable!()
    };
    let kinds: Vec<EventKind> = events.iter().map(|e| e.kind).collect();
    let faults: Vec<&Event> = events
        .iter()
        .filter(|e| e.kind == EventKind::Fault)
        .collect();
    let [fault] = faults.as_slice() else {
        return Err(format!(
            "{} FAULT events for one denied access",
            faults.len()
        ));
    };
    if fault.get_hex("suid") != Some(suid.0)
        || fault.get_hex("offset") != Some(*offset)
        || fault.get("access") != Some(&access.letter().to_string())
    {
        return Err(format!(
            "FAULT does not describe the denied access: {fault}"
        ));
    }
    let pos = kinds
        .iter()
        .position(|k| *k == EventKind::Fault)
        .expect("found");
    let tail: Vec<EventKind> = kinds[pos + 1..]
        .iter()
        .copied()
        .filter(|k| *k != EventKind::Trap)
        .collect();
    if tail != [EventKind::Alarm, EventKind::Halt] {
        return Err(format!("denied access followed by {tail:?}"));
    }
    Ok(())
}

/// Runs `p` step by step against the shadow. `Err` is a divergence.
pub fn check_program(p: &Program, max_steps: u64) -> Result<RunStats, String> {
    let img = build(p);
    let mut m = Machine::load(&img).with_input(p.input.clone());
    m.enable_mmu_audit();
    let mut shadow = Shadow::new(p);
    shadow.adopt_new(&m)?;
    shadow.compare(&m)?;
    let mut stats = RunStats::default();
    for _ in 0..max_steps {
        let report = m.step();
        stats.steps += 1;
        let records = m.store_mut().take_audit();
        let mut last_check: Option<MmuRecord> = None;
        let mut denied = Vec::new();
        for rec in records {
            match rec {
                MmuRecord::Check {
                    suid,
                    offset,
                    access,
                    layer,
                    ok,
                } => {
                    if ok != shadow.allows(suid, offset, access, layer) {
                        return Err(format!(
                            "step {}: MMU said {ok} for {suid}+{offset:#x} {} at {layer}",
                            stats.steps,
                            access.letter()
                        ));
                    }
                    if !ok {
                        denied.push(rec);
                    }
                    last_check = Some(rec);
                }
                MmuRecord::Touch {
                    suid,
                    offset,
                    access,
                    value,
                } => {
                    let mediated = matches!(last_check.take(),
                        Some(MmuRecord::Check { suid: s, offset: o, access: a, ok: true, .. })
                            if s == suid && o == offset && a == access);
                    if !mediated {
                        return Err(format!(
                            "step {}: unmediated touch of {suid}+{offset:#x}",
                            stats.steps
                        ));
                    }
                    let cell =
                        &mut shadow.segs.get_mut(&suid.0).expect("checked").bytes[offset as usize];
                    match access {
                        AccessKind::Write => *cell = value,
                        _ if *cell != value => return Err(format!(
                            "step {}: read {value:#x} from {suid}+{offset:#x}, shadow has {:#x}",
                            stats.steps, *cell
                        )),
                        _ => {}
                    }
                }
            }
        }
        match denied.as_slice() {
            [] => {}
            [one] => check_fault_chain(&report.events, one)
                .map_err(|e| format!("step {}: {e}", stats.steps))?,
            _ => return Err(format!("step {}: several denied accesses", stats.steps)),
        }
        shadow.adopt_new(&m)?;
        shadow
            .compare(&m)
            .map_err(|e| format!("step {}: {e}", stats.steps))?;
        if let StepOutcome::Halted(code) = report.outcome {
            stats.halted = Some(code);
            break;
        }
    }
    let trace = m.events().render();
    let audit = audit_trace(&trace);
    if !audit.ok() {
        return Err(format!("trace audit: {}", audit.violations.join("; ")));
    }
    stats.links = audit.links;
    Ok(stats)
}

fn nop_out(code: &mut [u8], word: usize) {
    code[word * 4..word * 4 + 4].copy_from_slice(&[0x01, 0x03, 0, 0]);
}

/// Shrinks a diverging program by replacing words with NOP while the
/// divergence persists.
pub fn minimize(p: &Program, max_steps: u64) -> Program {
    let mut best = p.clone();
    let fails = |q: &Program| {
        catch_unwind(AssertUnwindSafe(|| check_program(q, max_steps).is_err())).unwrap_or(true)
    };
    for which in 0..2 {
        let words = if which == 0 {
            best.main.len()
        } else {
            best.gate.len()
        } / 4;
        for w in 0..words {
            let mut q = best.clone();
            nop_out(if which == 0 { &mut q.main } else { &mut q.gate }, w);
            if q != best && fails(&q) {
                best = q;
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub index: usize,
    pub reason: String,
    pub program: Program,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub programs: usize,
    pub steps: u64,
    pub halted_ok: usize,
    pub alarms: usize,
    pub budget_exceeded: usize,
    pub links: usize,
    pub host_faults: usize,
    pub divergences: Vec<Counterexample>,
}

impl FuzzReport {
    pub fn ok(&self) -> bool {
        self.divergences.is_empty() && self.host_faults == 0
    }
}

pub fn fuzz_programs(seed: u64, count: usize) -> FuzzReport {
    fuzz_with(FuzzConfig::new(seed, count))
}

pub fn fuzz_with(cfg: FuzzConfig) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FuzzReport::default();
    for index in 0..cfg.count {
        let program = generate(&mut rng, cfg.arith_only);
        report.programs += 1;
        match catch_unwind(AssertUnwindSafe(|| check_program(&program, cfg.max_steps))) {
            Ok(Ok(stats)) => {
                report.steps += stats.steps;
                report.links += stats.links;
                match stats.halted {
                    Some(code) if code >= 64 => report.alarms += 1,
                    Some(_) => report.halted_ok += 1,
                    None => report.budget_exceeded += 1,
                }
            }
            Ok(Err(reason)) => report.divergences.push(Counterexample {
                index,
                reason,
                program: minimize(&program, cfg.max_steps),
            }),
            Err(_) => {
                report.host_faults += 1;
                report.divergences.push(Counterexample {
                    index,
                    reason: "host panic".into(),
                    program,
                });
            }
        }
    }
    report
}
