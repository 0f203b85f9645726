use guard_core::demos;
use guard_core::{Event, EventKind, Machine, RunOutcome};

fn run(img: &guard_core::GuardImage) -> (Machine, Vec<Event>) {
    let mut m = Machine::load(img);
    let r = m.run(1_000);
    assert_eq!(r.outcome, RunOutcome::Halted(0));
    let events = r.events.events().to_vec();
    (m, events)
}

fn position(events: &[Event], pred: impl Fn(&Event) -> bool) -> usize {
    events.iter().position(pred).expect("event present")
}

#[test]
fn link_fault_then_link_then_retried_read() {
    let (m, ev) = run(&demos::tutorial());
    let trap = position(&ev, |e| {
        e.kind == EventKind::Trap
            && e.get("phase") == Some("enter")
            && e.get("detail") == Some("0x2/foo")
    });
    let link = position(&ev, |e| {
        e.kind == EventKind::Link && e.get("sym") == Some("foo")
    });
    let resume = position(&ev, |e| {
        e.kind == EventKind::Trap && e.get("phase") == Some("resume")
    });
    let first_out = position(&ev, |e| {
        e.kind == EventKind::Io && e.get("dir") == Some("out")
    });
    assert!(trap < link && link < resume && resume < first_out);
    assert_eq!(ev[trap].get("at"), Some("foo_user+0x4"));
    assert_eq!(ev[resume].get("to"), Some("foo_user+0x4"));

    // foo is the fourth segment declared; its type is S:r-- U:rw- K:---
    let l = &ev[link];
    assert_eq!(l.get("suid"), Some("0x1003"));
    assert_eq!(l.get("len"), Some("0x10"));
    assert_eq!(
        (l.get("S"), l.get("U"), l.get("K")),
        (Some("r--"), Some("rw-"), Some("---"))
    );
    // LDA foo,X with X = 7 reads byte 7 twice; foo_owner stores 0x2a at 3
    assert_eq!(m.output(), [7, 7, 0x2a]);
    let foo = m.names().lookup("foo").unwrap();
    assert_eq!(m.store().contents(foo).unwrap()[3], 0x2a);
}

#[test]
fn second_read_does_not_link_again() {
    let (_, ev) = run(&demos::tutorial());
    let foo_user_links = ev
        .iter()
        .filter(|e| {
            e.kind == EventKind::Link
                && e.get("seg") == Some("foo_user")
                && e.get("slot") == Some("0x2")
        })
        .count();
    assert_eq!(foo_user_links, 1);
    // four externs used across three segments, each linked once
    assert_eq!(ev.iter().filter(|e| e.kind == EventKind::Link).count(), 4);
}

#[test]
fn gate_round_trip_restores_layer_and_stacks() {
    let (_, ev) = run(&demos::tutorial());
    let gates: Vec<(&str, &str, &str)> = ev
        .iter()
        .filter(|e| e.kind == EventKind::Gate && e.get("dir") != Some("native"))
        .map(|e| {
            (
                e.get("dir").unwrap(),
                e.get("from").unwrap(),
                e.get("to").unwrap(),
            )
        })
        .collect();
    assert_eq!(gates, [("enter", "S", "U"), ("exit", "U", "S")]);
    let halt = ev.last().unwrap();
    assert_eq!(halt.kind, EventKind::Halt);
    assert_eq!(
        (
            halt.get("layer"),
            halt.get("sd"),
            halt.get("ud"),
            halt.get("kd")
        ),
        (Some("S"), Some("0x0"), Some("0x0"), Some("0x0"))
    );
}

#[test]
fn guest_handler_links_like_the_native_pipeline() {
    let payloads = |img| {
        run(&img)
            .1
            .iter()
            .filter(|e| e.kind == EventKind::Link)
            .map(Event::payload)
            .collect::<Vec<_>>()
    };
    let native = payloads(demos::tutorial());
    let guest = payloads(demos::tutorial_guest());
    assert_eq!(native.len(), 4);
    assert_eq!(native, guest);
}

#[test]
fn guest_handler_runs_in_the_kernel() {
    let (_, ev) = run(&demos::tutorial_guest());
    let enters: Vec<&Event> = ev
        .iter()
        .filter(|e| e.kind == EventKind::Trap && e.get("phase") == Some("enter"))
        .collect();
    assert!(enters
        .iter()
        .all(|e| e.get("handler") == Some("guest:lnkhnd+0x0@K")));
    // the handler never surfaces native resolver crossings
    assert!(!ev.iter().any(|e| e.get("via") == Some("native:resolver")));
}
