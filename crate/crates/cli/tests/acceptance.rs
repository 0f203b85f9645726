//! Acceptance run: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use guard_core::demos;
use guard_core::verify::golden::{run_scenario, scenario_runs, NETFILTER_PACKETS, NETFILTER_SEED};
use guard_core::verify::{audit_trace, fuzz_programs, permission_matrix_check};
use guard_core::{assemble, disassemble, Machine, RunOutcome, Suid};

type Criterion = (&'static str, fn() -> Result<String, String>);

const LIMIT: Duration = Duration::from_secs(60);
const FUZZ_SEED: u64 = 42;
const FUZZ_COUNT: usize = 10_000;

/// One trace line, tokenized here rather than through the event parser.
#[derive(Debug, Clone)]
struct Ev {
    step: u64,
    kind: String,
    fields: BTreeMap<String, String>,
    rest: String,
}

impl Ev {
    fn f(&self, k: &str) -> &str {
        self.fields.get(k).map_or("", String::as_str)
    }
}

fn events(trace: &str) -> Vec<Ev> {
    trace
        .lines()
        .map(|line| {
            let mut parts = line.splitn(4, ' ');
            assert_eq!(parts.next(), Some("EV"), "{line}");
            let step = parts.next().unwrap().parse().unwrap();
            let kind = parts.next().unwrap().to_string();
            let rest = parts.next().unwrap_or("").to_string();
            let fields = rest
                .split(' ')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            Ev {
                step,
                kind,
                fields,
                rest,
            }
        })
        .collect()
}

fn traced(
    img: &guard_core::GuardImage,
    input: Vec<u8>,
    steps: bool,
) -> (RunOutcome, Vec<Ev>, Machine) {
    let mut m = Machine::load(img).with_input(input);
    m.set_trace_steps(steps);
    let r = m.run(100_000);
    let evs = events(&m.events().render());
    (r.outcome, evs, m)
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn position(evs: &[Ev], pred: impl Fn(&Ev) -> bool) -> Option<usize> {
    evs.iter().position(pred)
}

fn c1_permission_matrix() -> Result<String, String> {
    let r = permission_matrix_check();
    ensure(r.cases == 72, format!("{} cases", r.cases))?;
    ensure(r.checks == 72 * 5 * 2, format!("{} checks", r.checks))?;
    ensure(r.ok(), format!("mismatches: {:?}", r.mismatches))?;
    Ok(format!(
        "{} cases, {} checks, 0 mismatches",
        r.cases, r.checks
    ))
}

fn c2_fuzz() -> Result<String, String> {
    let r = fuzz_programs(FUZZ_SEED, FUZZ_COUNT);
    ensure(r.programs == FUZZ_COUNT, format!("{} programs", r.programs))?;
    ensure(r.host_faults == 0, format!("{} host faults", r.host_faults))?;
    if let Some(c) = r.divergences.first() {
        return Err(format!(
            "{} divergences, first #{}: {}",
            r.divergences.len(),
            c.index,
            c.reason
        ));
    }
    ensure(r.alarms > 0, "no program faulted")?;
    Ok(format!(
        "seed {FUZZ_SEED}: {} programs, {} steps, {} alarms, 0 divergences",
        r.programs, r.steps, r.alarms
    ))
}

fn c3_tutorial_link() -> Result<String, String> {
    let img = demos::tutorial();
    let (outcome, evs, _) = traced(&img, vec![], true);
    ensure(outcome == RunOutcome::Halted(0), format!("{outcome:?}"))?;
    let foo_suid = img.names.lookup("foo").map_err(|e| e.to_string())?;
    let len = img.gst.iter().find(|e| e.suid == foo_suid).unwrap().length;
    let trap = position(&evs, |e| {
        e.kind == "TRAP"
            && e.f("phase") == "enter"
            && e.f("kind") == "link"
            && e.f("detail").ends_with("/foo")
    })
    .ok_or("no LinkFault trap for foo")?;
    let at = evs[trap].f("at").to_string();
    let link =
        position(&evs, |e| e.kind == "LINK" && e.f("sym") == "foo").ok_or("no LINK for foo")?;
    let l = &evs[link];
    ensure(
        l.f("suid") == format!("{foo_suid}")
            && l.f("len") == format!("{len:#x}")
            && l.f("S") == "r--"
            && l.f("U") == "rw-"
            && l.f("K") == "---",
        format!("LINK payload {}", l.rest),
    )?;
    let retry = position(&evs, |e| {
        e.kind == "STEP" && e.step > evs[trap].step && e.f("at") == at
    })
    .ok_or("no retried access")?;
    ensure(
        evs[retry].f("op") == "LDA",
        format!("retried {}", evs[retry].rest),
    )?;
    ensure(trap < link && link < retry, "events out of order")?;
    // foo_owner links foo through its own linkage segment; only foo_user's slot counts
    let links = evs
        .iter()
        .filter(|e| e.kind == "LINK" && e.f("sym") == "foo" && e.f("seg") == "foo_user")
        .count();
    ensure(
        links == 1,
        format!("{links} LINK events for foo_user's slot"),
    )?;
    let reads = evs
        .iter()
        .filter(|e| e.kind == "STEP" && e.f("op") == "LDA")
        .count();
    ensure(reads >= 2, "foo read only once")?;
    Ok(format!(
        "TRAP@{at} -> LINK suid={foo_suid} len={len:#x} S:r-- U:rw- K:--- -> retry; one LINK"
    ))
}

fn firewall_links(evs: &[Ev]) -> Vec<String> {
    evs.iter()
        .filter(|e| e.kind == "LINK" && e.f("sym") == "firewall")
        .map(|e| e.f("suid").to_string())
        .collect()
}

fn c4_hot_swap() -> Result<String, String> {
    let img = demos::hotswap();
    let old = img.names.lookup("firewall").map_err(|e| e.to_string())?;
    let unit =
        assemble(demos::fixture("hotswap/firewall_v2.gasm").unwrap()).map_err(|e| e.to_string())?;

    // a running machine that already resolved the slot
    let mut m = Machine::load(&img).with_input(vec![1, 1, 1]);
    while m.output().is_empty() {
        m.step();
    }
    m.rename("firewall", "oldfirewall")
        .map_err(|e| e.to_string())?;
    m.install_segment("firewall", "fw_data", unit.bytes.clone(), None)
        .map_err(|e| e.to_string())?;
    m.run(1000);
    let evs = events(&m.events().render());
    ensure(
        m.output() == [1, 1, 1],
        format!("old machine read {:?}", m.output()),
    )?;
    ensure(
        firewall_links(&evs) == [old.to_string()],
        "old machine relinked",
    )?;

    // a fresh machine over the administered image
    let mut img2 = img.clone();
    img2.rename("firewall", "oldfirewall")
        .map_err(|e| e.to_string())?;
    let new = img2
        .bind_object("firewall", &unit, "fw_data")
        .map_err(|e| e.to_string())?;
    ensure(new != old, "bind reused the old SUID")?;
    let (outcome, evs, m2) = traced(&img2, vec![1, 1], false);
    ensure(outcome == RunOutcome::Halted(0), format!("{outcome:?}"))?;
    ensure(
        m2.output() == [2, 2],
        format!("fresh machine read {:?}", m2.output()),
    )?;
    ensure(
        firewall_links(&evs) == [new.to_string()],
        "fresh machine linked the wrong SUID",
    )?;
    Ok(format!(
        "old machine stays on {old}, fresh machine links {new}"
    ))
}

fn scenario(name: &str) -> (RunOutcome, Vec<Ev>) {
    let s = scenario_runs()
        .into_iter()
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("no scenario {name}"));
    let (outcome, trace) = run_scenario(&s);
    (outcome, events(&trace))
}

/// FAULT of `kind`, then exactly one ALARM, then HALT as the last line.
fn error_chain(evs: &[Ev], kind: &str, code: u16) -> Result<(), String> {
    let faults: Vec<&Ev> = evs.iter().filter(|e| e.kind == "FAULT").collect();
    ensure(faults.len() == 1, format!("{} FAULT events", faults.len()))?;
    ensure(
        faults[0].f("kind") == kind,
        format!("fault kind {}", faults[0].f("kind")),
    )?;
    let alarms: Vec<usize> = (0..evs.len()).filter(|&i| evs[i].kind == "ALARM").collect();
    ensure(alarms.len() == 1, format!("{} ALARM events", alarms.len()))?;
    let fault = position(evs, |e| e.kind == "FAULT").unwrap();
    ensure(fault < alarms[0], "ALARM before FAULT")?;
    let last = evs.last().ok_or("empty trace")?;
    ensure(
        last.kind == "HALT" && last.f("code") == format!("{code:#x}") && alarms[0] == evs.len() - 2,
        format!("tail {}", last.rest),
    )
}

fn c5_layers() -> Result<String, String> {
    let mut checked = 0;
    for insn in ["resolve", "seglen", "alarm", "logev"] {
        for layer in ["s", "u"] {
            let name = format!("restricted_{insn}_{layer}");
            let (outcome, evs) = scenario(&name);
            ensure(
                outcome == RunOutcome::Halted(65),
                format!("{name}: {outcome:?}"),
            )?;
            error_chain(&evs, "permission", 65).map_err(|e| format!("{name}: {e}"))?;
            checked += 1;
        }
    }
    for name in ["enter_non_gate", "exit_without_enter"] {
        let (outcome, evs) = scenario(name);
        ensure(
            outcome == RunOutcome::Halted(69),
            format!("{name}: {outcome:?}"),
        )?;
        error_chain(&evs, "gate_sequence", 69).map_err(|e| format!("{name}: {e}"))?;
        checked += 1;
    }
    let (outcome, evs) = scenario("gate_round_trip");
    ensure(
        outcome == RunOutcome::Halted(0),
        format!("round trip: {outcome:?}"),
    )?;
    let gates: Vec<&Ev> = evs
        .iter()
        .filter(|e| e.kind == "GATE" && e.f("via") == "gate")
        .collect();
    ensure(gates.len() == 2, format!("{} gate crossings", gates.len()))?;
    let path = format!(
        "{}>{}>{}",
        gates[0].f("from"),
        gates[0].f("to"),
        gates[1].f("to")
    );
    ensure(
        path == "S>U>S" && gates[1].f("from") == "U",
        format!("path {path}"),
    )?;
    let depths = |e: &Ev| {
        (
            e.f("sd").to_string(),
            e.f("ud").to_string(),
            e.f("kd").to_string(),
        )
    };
    ensure(
        depths(gates[0]) == depths(gates[1]),
        "depths differ across the gate",
    )?;
    let halt = evs.last().unwrap();
    ensure(
        depths(halt) == ("0x0".into(), "0x0".into(), "0x0".into()),
        format!("depths at halt {}", halt.rest),
    )?;
    let (outcome, evs) = scenario("gate_calls_services");
    ensure(
        outcome == RunOutcome::Halted(65),
        format!("gate_calls_services: {outcome:?}"),
    )?;
    error_chain(&evs, "permission", 65)?;
    let fault = evs.iter().find(|e| e.kind == "FAULT").unwrap();
    ensure(fault.f("layer") == "U", "gate call faulted outside U")?;
    Ok(format!(
        "{} restricted/sequence cases, S>U>S round trip, U->Services call faults",
        checked
    ))
}

fn c6_trap_policies() -> Result<String, String> {
    let offset = |at: &str| -> (String, u64) {
        let (seg, off) = at.split_once("+0x").unwrap();
        (seg.to_string(), u64::from_str_radix(off, 16).unwrap())
    };
    for name in ["user_trap", "guest_user_trap"] {
        let (outcome, evs) = scenario(name);
        ensure(
            outcome == RunOutcome::Halted(0),
            format!("{name}: {outcome:?}"),
        )?;
        let enter = evs
            .iter()
            .find(|e| e.kind == "TRAP" && e.f("phase") == "enter")
            .unwrap();
        let resume = evs
            .iter()
            .find(|e| e.kind == "TRAP" && e.f("phase") == "resume")
            .unwrap();
        let (s1, o1) = offset(enter.f("at"));
        let (s2, o2) = offset(resume.f("to"));
        ensure(
            s1 == s2 && o2 == o1 + 4,
            format!("{name}: resumed at {}", resume.f("to")),
        )?;
    }
    let (_, evs, _) = traced(&demos::tutorial(), vec![], false);
    let mut link_traps = 0;
    for (i, e) in evs.iter().enumerate() {
        if e.kind == "TRAP" && e.f("phase") == "enter" && e.f("kind") == "link" {
            let resume = evs[i..]
                .iter()
                .find(|r| r.kind == "TRAP" && r.f("phase") == "resume")
                .ok_or("link trap never resumed")?;
            ensure(
                resume.f("to") == e.f("at"),
                format!("link resumed at {}", resume.f("to")),
            )?;
            link_traps += 1;
        }
    }
    ensure(link_traps > 0, "no link traps")?;
    let errors = [
        ("bounds", "bounds", 64),
        ("write_fault", "permission", 65),
        ("illegal_opcode", "illegal_opcode", 66),
        ("divide_by_zero", "divide_by_zero", 67),
        ("stack_underflow", "stack_fault", 68),
        ("enter_non_gate", "gate_sequence", 69),
        ("link_unresolvable", "link_unresolvable", 70),
        ("trap_nesting", "trap_nesting", 71),
    ];
    for (name, kind, code) in errors {
        let (outcome, evs) = scenario(name);
        ensure(
            outcome == RunOutcome::Halted(code),
            format!("{name}: {outcome:?}"),
        )?;
        error_chain(&evs, kind, code).map_err(|e| format!("{name}: {e}"))?;
    }
    for s in scenario_runs() {
        let (_, trace) = run_scenario(&s);
        let audit = audit_trace(&trace);
        ensure(audit.ok(), format!("{}: {:?}", s.name, audit.violations))?;
    }
    Ok(format!(
        "TRAP -> ip+4, {link_traps} link traps retry, 8 error kinds alarm then halt 64..71"
    ))
}

fn guard(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_guard"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    match o.status.code() {
        Some(0) => Ok(()),
        c => Err(format!(
            "guard {args:?} exited {c:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        )),
    }
}

fn c7_toolchain() -> Result<String, String> {
    let corpus = demos::corpus();
    for (path, src) in &corpus {
        let a = assemble(src).map_err(|e| format!("{path}: {e}"))?;
        let text = disassemble(&a);
        let b = assemble(&text).map_err(|e| format!("{path} (disassembled): {e}"))?;
        ensure(
            a.bytes == b.bytes
                && a.template == b.template
                && a.name == b.name
                && a.type_name == b.type_name,
            format!("{path}: object differs after round trip"),
        )?;
        ensure(
            a.labels.iter().all(|(k, v)| b.labels.get(k) == Some(v)),
            format!("{path}: labels lost"),
        )?;
        let c = assemble(&disassemble(&b)).map_err(|e| format!("{path}: {e}"))?;
        ensure(c == b, format!("{path}: second round trip differs"))?;
        ensure(
            disassemble(&b) == text,
            format!("{path}: disassembly not stable"),
        )?;
    }
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    for (path, text) in demos::FIXTURES {
        if let Some(name) = path.strip_prefix("netfilter/") {
            fs::write(dir.join(name), text).map_err(|e| e.to_string())?;
        }
    }
    fs::write(
        dir.join("in.bin"),
        demos::netfilter_packets(NETFILTER_SEED, NETFILTER_PACKETS),
    )
    .map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
    let mut images = Vec::new();
    let mut traces = Vec::new();
    for i in 0..2 {
        let img = dir.join(format!("img{i}.gim"));
        let trace = dir.join(format!("t{i}.trace"));
        guard(&["build", &s(&dir.join("manifest.gim")), "-o", &s(&img)])?;
        guard(&[
            "run",
            &s(&img),
            "--in",
            &s(&dir.join("in.bin")),
            "--trace",
            &s(&trace),
            "--trace-steps",
        ])?;
        images.push(read(&img)?);
        traces.push(read(&trace)?);
    }
    ensure(images[0] == images[1], "build output differs")?;
    ensure(traces[0] == traces[1], "traces differ")?;
    Ok(format!(
        "{} sources round-trip; build and run --trace byte-identical ({} trace bytes)",
        corpus.len(),
        traces[0].len()
    ))
}

fn c8_guest_handler() -> Result<String, String> {
    let payloads = |img: guard_core::GuardImage| {
        let img = &img;
        let (outcome, evs, m) = traced(img, vec![], false);
        let links: Vec<String> = evs
            .iter()
            .filter(|e| e.kind == "LINK")
            .map(|e| e.rest.clone())
            .collect();
        (outcome, links, m.output().to_vec())
    };
    let (o1, native, out1) = payloads(demos::tutorial());
    let (o2, guest, out2) = payloads(demos::tutorial_guest());
    ensure(
        o1 == RunOutcome::Halted(0) && o2 == RunOutcome::Halted(0),
        format!("{o1:?} {o2:?}"),
    )?;
    ensure(!native.is_empty(), "no LINK events")?;
    ensure(
        native == guest,
        format!("native {native:?} vs guest {guest:?}"),
    )?;
    ensure(out1 == out2, "outputs differ")?;
    let (_, evs, _) = traced(&demos::tutorial_guest(), vec![], false);
    ensure(
        evs.iter()
            .any(|e| e.kind == "TRAP" && e.f("handler").starts_with("guest:")),
        "guest handler never ran",
    )?;
    Ok(format!("{} LINK payloads identical", native.len()))
}

fn c9_netfilter() -> Result<String, String> {
    let packets = demos::netfilter_packets(NETFILTER_SEED, NETFILTER_PACKETS);
    let (outcome, _, m) = traced(&demos::netfilter(), packets.clone(), false);
    ensure(outcome == RunOutcome::Halted(0), format!("{outcome:?}"))?;
    let want = demos::reference_filter(&packets);
    ensure(want.len() == NETFILTER_PACKETS, "reference verdict count")?;
    ensure(
        m.output() == want,
        format!("guest {:?} vs host {want:?}", m.output()),
    )?;
    let allowed = want.iter().filter(|&&v| v == 1).count();
    Ok(format!(
        "{NETFILTER_PACKETS} verdicts match ({allowed} allow)"
    ))
}

fn main() -> ExitCode {
    // SUIDs in fixtures are deterministic; a stray rebuild would show here
    assert_eq!(demos::hotswap().names.lookup("firewall"), Ok(Suid(0x1001)));
    let criteria: [Criterion; 9] = [
        ("permission matrix", c1_permission_matrix),
        ("fuzz memory safety", c2_fuzz),
        ("demand linking trace", c3_tutorial_link),
        ("hot swap", c4_hot_swap),
        ("layer enforcement", c5_layers),
        ("trap policies", c6_trap_policies),
        ("toolchain determinism", c7_toolchain),
        ("guest link handler", c8_guest_handler),
        ("netfilter verdicts", c9_netfilter),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut result = check();
        let took = start.elapsed();
        if result.is_ok() && took > LIMIT {
            result = Err(format!("took {took:?}"));
        }
        match result {
            Ok(detail) => println!(
                "PASS {} {name} ({:.2}s): {detail}",
                i + 1,
                took.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name} ({:.2}s): {why}", i + 1, took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
