//! Scenario suite: fixed images, fixed inputs, golden traces.

use std::fs;
use std::path::{Path, PathBuf};

use crate::demos;
use crate::image::GuardImage;
use crate::machine::{Machine, RunOutcome};

use super::audit::audit_trace;

/// Golden traces shipped with the crate.
pub fn default_golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden")
}

/// Seed of the netfilter packet stream used by the suite.
pub const NETFILTER_SEED: u64 = 7;
pub const NETFILTER_PACKETS: usize = 50;

pub struct ScenarioRun {
    pub name: String,
    pub image: GuardImage,
    pub input: Vec<u8>,
    pub exit: u16,
}

pub fn scenario_runs() -> Vec<ScenarioRun> {
    let mut v = vec![
        ScenarioRun {
            name: "tutorial".into(),
            image: demos::tutorial(),
            input: vec![],
            exit: 0,
        },
        ScenarioRun {
            name: "tutorial_guest".into(),
            image: demos::tutorial_guest(),
            input: vec![],
            exit: 0,
        },
        ScenarioRun {
            name: "hotswap".into(),
            image: demos::hotswap(),
            input: vec![1, 1],
            exit: 0,
        },
        ScenarioRun {
            name: "netfilter".into(),
            image: demos::netfilter(),
            input: demos::netfilter_packets(NETFILTER_SEED, NETFILTER_PACKETS),
            exit: 0,
        },
    ];
    for s in demos::scenarios() {
        v.push(ScenarioRun {
            image: s.build().expect("scenario images build"),
            name: s.name,
            input: vec![],
            exit: s.exit,
        });
    }
    v
}

/// Runs a scenario and renders its trace.
pub fn run_scenario(s: &ScenarioRun) -> (RunOutcome, String) {
    let mut m = Machine::load(&s.image).with_input(s.input.clone());
    let r = m.run(100_000);
    (r.outcome, r.events.render())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub name: String,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuiteReport {
    pub results: Vec<ScenarioResult>,
    pub blessed: usize,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.results.iter().all(|r| r.problems.is_empty())
    }
}

/// First differing line of two texts, for reports.
fn first_difference(want: &str, got: &str) -> String {
    let mut w = want.lines();
    let mut g = got.lines();
    for n in 1.. {
        match (w.next(), g.next()) {
            (None, None) => break,
            (a, b) if a == b => continue,
            (a, b) => {
                return format!(
                    "line {n}: golden `{}` vs run `{}`",
                    a.unwrap_or("<end>"),
                    b.unwrap_or("<end>")
                )
            }
        }
    }
    "texts differ".into()
}

/// Runs every scenario, checks exit code and trace audit, and compares
/// the trace with `<dir>/<name>.trace`. With `bless`, goldens are
/// rewritten instead of compared.
pub fn scenario_suite(dir: &Path, bless: bool) -> SuiteReport {
    let mut report = SuiteReport::default();
    for s in scenario_runs() {
        let mut problems = Vec::new();
        let (outcome, trace) = run_scenario(&s);
        if outcome != RunOutcome::Halted(s.exit) {
            problems.push(format!("expected Halted({}), got {outcome:?}", s.exit));
        }
        let audit = audit_trace(&trace);
        problems.extend(audit.violations);
        let path = dir.join(format!("{}.trace", s.name));
        if bless {
            match fs::create_dir_all(dir).and_then(|_| fs::write(&path, &trace)) {
                Ok(()) => report.blessed += 1,
                Err(e) => problems.push(format!("writing {}: {e}", path.display())),
            }
        } else {
            match fs::read_to_string(&path) {
                Ok(golden) if golden == trace => {}
                Ok(golden) => problems.push(first_difference(&golden, &trace)),
                Err(e) => problems.push(format!("reading {}: {e}", path.display())),
            }
        }
        report.results.push(ScenarioResult {
            name: s.name,
            problems,
        });
    }
    report
}
