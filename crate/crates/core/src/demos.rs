//! Shipped example images and the small scenario programs used by the
//! verification harness.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{build_from_sources, BuildError, GuardImage};

macro_rules! fixture {
    ($path:literal) => {
        ($path, include_str!(concat!("../fixtures/", $path)))
    };
}

/// Every shipped fixture file, by path below `fixtures/`.
pub const FIXTURES: &[(&str, &str)] = &[
    fixture!("tutorial/manifest.gim"),
    fixture!("tutorial/manifest_guest.gim"),
    fixture!("tutorial/foo_user.gasm"),
    fixture!("tutorial/u_gate.gasm"),
    fixture!("tutorial/foo_owner.gasm"),
    fixture!("tutorial/lnkhnd.gasm"),
    fixture!("hotswap/manifest.gim"),
    fixture!("hotswap/reader.gasm"),
    fixture!("hotswap/firewall_v2.gasm"),
    fixture!("netfilter/manifest.gim"),
    fixture!("netfilter/netfilter.gasm"),
];

pub fn fixture(path: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(p, _)| *p == path).map(|(_, t)| *t)
}

fn build_fixture(dir: &str, manifest: &str) -> GuardImage {
    let text = fixture(&format!("{dir}/{manifest}")).expect("known fixture");
    build_from_sources(text, &|f| {
        fixture(&format!("{dir}/{f}")).map(str::to_string)
    })
    .expect("shipped fixtures build")
}

pub fn tutorial() -> GuardImage {
    build_fixture("tutorial", "manifest.gim")
}

/// The tutorial image with the guest-code LinkFault handler bound.
pub fn tutorial_guest() -> GuardImage {
    build_fixture("tutorial", "manifest_guest.gim")
}

pub fn hotswap() -> GuardImage {
    build_fixture("hotswap", "manifest.gim")
}

pub fn netfilter() -> GuardImage {
    build_fixture("netfilter", "manifest.gim")
}

/// All `.gasm` sources shipped with the crate, fixtures and scenarios.
pub fn corpus() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = FIXTURES
        .iter()
        .filter(|(p, _)| p.ends_with(".gasm"))
        .map(|(p, t)| (p.to_string(), t.to_string()))
        .collect();
    for s in scenarios() {
        out.push((format!("scenarios/{}/main.gasm", s.name), s.main));
        out.push((format!("scenarios/{}/gate.gasm", s.name), s.gate));
        if let Some(h) = s.handler {
            out.push((format!("scenarios/{}/handler.gasm", s.name), h));
        }
    }
    out
}

/// Deny rules shipped in the netfilter image: `(proto, port)` pairs.
pub const NETFILTER_RULES: &[(u8, u8)] = &[(6, 22), (6, 23), (17, 53)];

/// Packets at or above this length are dropped.
pub const NETFILTER_MAX_LEN: u8 = 33;

/// `count` length-prefixed packet records from a seeded generator.
pub fn netfilter_packets(seed: u64, count: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = [1u8, 6, 17];
    let ports = [22u8, 23, 53, 80, 123, 187];
    let mut out = Vec::new();
    for _ in 0..count {
        let len: u8 = rng.gen_range(2..=40);
        out.push(len);
        out.push(protos[rng.gen_range(0..protos.len())]);
        out.push(ports[rng.gen_range(0..ports.len())]);
        for _ in 2..len {
            out.push(rng.gen());
        }
    }
    out
}

/// Host-side reference for the netfilter program.
pub fn reference_filter(input: &[u8]) -> Vec<u8> {
    let mut verdicts = Vec::new();
    let mut i = 0;
    while let Some(&len) = input.get(i) {
        if len == 0 {
            break;
        }
        let proto = input.get(i + 1).copied().unwrap_or(0);
        let port = input.get(i + 2).copied().unwrap_or(0);
        let deny = len >= NETFILTER_MAX_LEN || NETFILTER_RULES.contains(&(proto, port));
        verdicts.push(u8::from(!deny));
        i += 1 + usize::from(len);
    }
    verdicts
}

/// A one-off image: `main` in the Services layer, a `gate` into the
/// Utilities layer, an 8-byte `data` segment (S:r-- U:rw-), a Services
/// helper `svc` and optionally a Kernel handler bound to user traps.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub main: String,
    pub gate: String,
    pub handler: Option<String>,
    /// Expected halt code.
    pub exit: u16,
}

const SCENARIO_TYPES: &str = "\
type svc_code  S:--x U:--- K:---
type u_gate    S:--x U:--x K:--- gate_to=U
type util_data S:r-- U:rw- K:---
type k_handler S:--- U:--- K:--x handler
";

const SVC_HELPER: &str = ".segment svc svc_code\nhelp: RET\n";

impl Scenario {
    fn new(name: &str, main: &str, gate: &str, exit: u16) -> Scenario {
        Scenario {
            name: name.to_string(),
            main: format!(".segment main svc_code\n{main}"),
            gate: format!(".segment gate u_gate\n{gate}"),
            handler: None,
            exit,
        }
    }

    pub fn manifest(&self) -> String {
        let mut m = format!(
            "image {}\n{SCENARIO_TYPES}\
             segment main svc_code asm=main.gasm\n\
             segment gate u_gate asm=gate.gasm\n\
             segment svc svc_code asm=svc.gasm\n\
             segment data util_data data=hex:0001020304050607\n",
            self.name
        );
        if self.handler.is_some() {
            m.push_str("segment handler k_handler asm=handler.gasm\n");
            m.push_str("trap user guest handler go K\n");
        }
        m.push_str("entry main start\n");
        m
    }

    pub fn sources(&self) -> BTreeMap<String, String> {
        let mut s = BTreeMap::new();
        s.insert("main.gasm".to_string(), self.main.clone());
        s.insert("gate.gasm".to_string(), self.gate.clone());
        s.insert("svc.gasm".to_string(), SVC_HELPER.to_string());
        if let Some(h) = &self.handler {
            s.insert("handler.gasm".to_string(), h.clone());
        }
        s
    }

    pub fn build(&self) -> Result<GuardImage, BuildError> {
        let sources = self.sources();
        build_from_sources(&self.manifest(), &|f| sources.get(f).cloned())
    }
}

const GATE_PLAIN: &str = "ENTER U\nEXIT\nRET\n";

/// Restricted (Kernel-only) instructions, each issued from S and from U.
fn restricted() -> Vec<Scenario> {
    let insns = [
        ("resolve", "RESOLVE"),
        ("seglen", "SEGLEN data"),
        ("alarm", "ALARM #1"),
        ("logev", "LOGEV"),
    ];
    let mut out = Vec::new();
    for (tag, insn) in insns {
        out.push(Scenario::new(
            &format!("restricted_{tag}_s"),
            &format!(".extern data\nstart: {insn}\nHALT\n"),
            GATE_PLAIN,
            65,
        ));
        out.push(Scenario::new(
            &format!("restricted_{tag}_u"),
            ".extern gate\nstart: CALL gate\nHALT\n",
            &format!(".extern data\nENTER U\n{insn}\nEXIT\nRET\n"),
            65,
        ));
    }
    out
}

/// The fixed scenario list, in a stable order.
pub fn scenarios() -> Vec<Scenario> {
    let mut v = vec![
        Scenario::new(
            "gate_round_trip",
            ".extern gate\nstart: CALL gate\nHALT\n",
            GATE_PLAIN,
            0,
        ),
        Scenario::new("enter_non_gate", "start: ENTER U\nHALT\n", GATE_PLAIN, 69),
        Scenario::new(
            "exit_without_enter",
            ".extern gate\nstart: CALL gate\nHALT\n",
            "EXIT\nRET\n",
            69,
        ),
        Scenario::new(
            "gate_calls_services",
            ".extern gate\nstart: CALL gate\nHALT\n",
            ".extern svc\nENTER U\nCALL svc\nEXIT\nRET\n",
            65,
        ),
        Scenario::new(
            "user_trap",
            "start: TRAP #5\nLDA #1\nOUT\nHALT\n",
            GATE_PLAIN,
            0,
        ),
        Scenario::new(
            "write_fault",
            ".extern data\nstart: LDA #9\nSTA data\nHALT\n",
            GATE_PLAIN,
            65,
        ),
        Scenario::new(
            "bounds",
            ".extern data\nstart: LDX #8\nLDA data, X\nHALT\n",
            GATE_PLAIN,
            64,
        ),
        Scenario::new(
            "illegal_opcode",
            "start: .word 0xffffffff\n",
            GATE_PLAIN,
            66,
        ),
        Scenario::new(
            "divide_by_zero",
            "start: LDA #1\nDIV #0\nHALT\n",
            GATE_PLAIN,
            67,
        ),
        Scenario::new("stack_underflow", "start: RET\n", GATE_PLAIN, 68),
        Scenario::new(
            "link_unresolvable",
            ".extern nowhere\nstart: LDA nowhere\nHALT\n",
            GATE_PLAIN,
            70,
        ),
    ];
    let mut nesting = Scenario::new("trap_nesting", "start: TRAP #1\nHALT\n", GATE_PLAIN, 71);
    nesting.handler = Some(".segment handler k_handler\ngo: TRAP #2\nRESUME\n".to_string());
    v.push(nesting);
    let mut guest_user = Scenario::new(
        "guest_user_trap",
        "start: TRAP #3\nLDA #2\nOUT\nHALT\n",
        GATE_PLAIN,
        0,
    );
    guest_user.handler = Some(".segment handler k_handler\ngo: RESUME\n".to_string());
    v.push(guest_user);
    v.extend(restricted());
    v
}
