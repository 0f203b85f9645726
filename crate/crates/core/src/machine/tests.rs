use super::*;
use crate::demos;
use crate::image::{build_from_sources, parse_image, render_image};
use crate::model::Suid;

fn image(main: &str) -> GuardImage {
    let src = format!(".segment main code\n{main}");
    build_from_sources(
        "image t\n\
         type code S:--x U:--- K:---\n\
         type data S:rw- U:rw- K:---\n\
         segment main code asm=main.gasm\n\
         segment buf data data=hex:0a141e\n\
         entry main start\n",
        &|f| (f == "main.gasm").then(|| src.clone()),
    )
    .unwrap()
}

fn run(img: &GuardImage, input: &[u8]) -> (Machine, RunResult) {
    let mut m = Machine::load(img).with_input(input.to_vec());
    let r = m.run(10_000);
    (m, r)
}

#[test]
fn halt_only_image() {
    let (m, r) = run(&image("start: HALT\n"), &[]);
    assert_eq!(r.outcome, RunOutcome::Halted(0));
    assert_eq!(r.steps, 1);
    assert_eq!(
        r.events.render(),
        "EV 1 HALT code=0x0 reason=halt layer=S sd=0x0 ud=0x0 kd=0x0\n"
    );
    assert_eq!(m.state().layer, Layer::Services);
}

#[test]
fn load_starts_in_services_with_empty_stacks() {
    let m = Machine::load(&image("start: HALT\n"));
    let s = m.state();
    assert_eq!(s.layer, Layer::Services);
    assert_eq!(m.stack_depths(), [0, 0, 0]);
    assert!(s.gates.is_empty() && s.traps.is_empty());
    assert_eq!(s.ip.offset, 0);
}

#[test]
fn sum_of_buffer_bytes() {
    // 10 + 20 + 30 = 60
    let img = image(
        ".extern buf\n\
         start: LDX #0\n\
         LDA buf, X\n\
         LDX #1\n\
         ADD buf, X\n\
         LDX #2\n\
         ADD buf, X\n\
         OUT\n\
         HALT #0\n",
    );
    let (m, r) = run(&img, &[]);
    assert_eq!(r.outcome, RunOutcome::Halted(0));
    assert_eq!(m.output(), [60]);
}

#[test]
fn echo_until_end_of_input() {
    let img = image("loop: IN\nBEQ done\nOUT\nJMP loop\ndone: HALT\nstart: JMP loop\n");
    let (m, _) = run(&img, &[3, 1, 4]);
    assert_eq!(m.output(), [3, 1, 4]);
    let eofs: Vec<u64> = m
        .events()
        .of_kind(EventKind::Io)
        .filter(|e| e.get("dir") == Some("in"))
        .map(|e| e.get_hex("eof").unwrap())
        .collect();
    assert_eq!(eofs, [0, 0, 0, 1]);
}

#[test]
fn flags_follow_cmp() {
    // 5 - 7 is negative, so BLT is taken
    let img = image("start: LDA #5\nCMP #7\nBLT less\nHALT #1\nless: HALT #2\n");
    assert_eq!(run(&img, &[]).1.outcome, RunOutcome::Halted(2));
    let img =
        image("start: LDA #7\nCMP #7\nBEQ same\nHALT #1\nsame: BGE ge\nHALT #3\nge: HALT #4\n");
    assert_eq!(run(&img, &[]).1.outcome, RunOutcome::Halted(4));
}

#[test]
fn misaligned_branch_is_illegal() {
    let img = image("start: .word 0x30000200\n");
    assert_eq!(run(&img, &[]).1.outcome, RunOutcome::Halted(66));
}

#[test]
fn running_off_the_end_is_a_bounds_fault() {
    let img = image("start: NOP\n");
    let (_, r) = run(&img, &[]);
    assert_eq!(r.outcome, RunOutcome::Halted(64));
    let fault = r.events.of_kind(EventKind::Fault).next().unwrap();
    assert_eq!(fault.get("access"), Some("x"));
    assert_eq!(fault.get_hex("offset"), Some(4));
}

#[test]
fn budget_is_reported() {
    let img = image("start: JMP start\n");
    let mut m = Machine::load(&img);
    let r = m.run(50);
    assert_eq!(r.outcome, RunOutcome::BudgetExceeded);
    assert_eq!(r.steps, 50);
    assert_eq!(m.halted(), None);
    // continuing picks up where it stopped
    assert_eq!(m.run(5).steps, 5);
    assert_eq!(m.steps(), 55);
}

#[test]
fn step_after_halt_is_inert() {
    let mut m = Machine::load(&image("start: HALT #9\n"));
    assert_eq!(m.step().outcome, StepOutcome::Halted(9));
    let again = m.step();
    assert_eq!(again.outcome, StepOutcome::Halted(9));
    assert!(again.events.is_empty());
    assert_eq!(m.steps(), 1);
}

#[test]
fn step_events_render_under_the_grammar() {
    let mut m = Machine::load(&image("start: LDX #7\nHALT\n"));
    m.set_trace_steps(true);
    let r = m.run(10);
    let text = r.events.render();
    assert!(
        text.starts_with("EV 1 STEP layer=S at=main+0x0 op=LDX mode=imm arg=0x7\n"),
        "{text}"
    );
    assert_eq!(EventLog::parse(&text).unwrap(), r.events);
}

#[test]
fn reparsed_image_runs_identically() {
    let img = demos::tutorial();
    let back = parse_image(&render_image(&img)).unwrap();
    let a = run(&img, &[]).1.events.render();
    let b = run(&back, &[]).1.events.render();
    assert_eq!(a, b);
}

#[test]
fn processes_get_private_scratch() {
    // each process writes its pid-specific input byte to scratch and reads it back
    let img = image("start: IN\nSTA 0\nLDA 0\nOUT\nHALT\n");
    let mut m = Machine::load(&img).with_input(vec![0x11, 0x22]);
    m.run(100);
    let first = m.state().linkage;
    m.spawn_process();
    m.run(100);
    let second = m.state().linkage;
    assert_eq!(m.output(), [0x11, 0x22]);
    assert_ne!(first, second);
    let scratch = |key: &LinkageKey| match m.linkage(key).unwrap().slot(0) {
        Some(crate::linker::Slot::Resolved(d)) => d.suid,
        other => panic!("{other:?}"),
    };
    let (a, b) = (scratch(&first), scratch(&second));
    assert_ne!(a, b);
    assert_eq!(m.store().contents(a).unwrap()[0], 0x11);
    assert_eq!(m.store().contents(b).unwrap()[0], 0x22);
}

#[test]
fn resize_is_kernel_only_and_keeps_store_consistent() {
    let mut m = Machine::load(&image("start: HALT\n"));
    let buf = m.names().lookup("buf").unwrap();
    assert!(m.resize_segment(buf, 8, Layer::Services).is_err());
    m.resize_segment(buf, 8, Layer::Kernel).unwrap();
    assert_eq!(
        m.store().contents(buf).unwrap(),
        [10, 20, 30, 0, 0, 0, 0, 0]
    );
    for e in m.gst().iter() {
        assert_eq!(m.store().contents(e.suid).unwrap().len() as u64, e.length);
    }
}

#[test]
fn deleted_segment_faults_instead_of_panicking() {
    let img = image(".extern buf\nstart: LDA buf\nOUT\nLDA buf\nHALT\n");
    let mut m = Machine::load(&img);
    for _ in 0..3 {
        m.step();
    }
    assert_eq!(m.output(), [10]);
    m.delete_segment("buf").unwrap();
    let r = m.run(10);
    assert_eq!(r.outcome, RunOutcome::Halted(64));
}

#[test]
fn install_and_rename_touch_only_the_namespace() {
    let mut m = Machine::load(&image("start: HALT\n"));
    let before = m.gst().len();
    let suid = m
        .install_segment("extra", "data", vec![1, 2], None)
        .unwrap();
    assert_eq!(m.gst().len(), before + 1);
    // 0x1002 went to the entry process's scratch segment at load
    assert_eq!(suid, Suid(0x1003));
    m.rename("extra", "moved").unwrap();
    assert_eq!(m.names().lookup("moved"), Ok(suid));
    assert_eq!(m.label_of(suid), "extra");
    assert!(matches!(
        m.install_segment("moved", "data", vec![], None),
        Err(AdminError::Name(NameError::DuplicateName(_)))
    ));
    assert!(matches!(
        m.install_segment("x", "nope", vec![], None),
        Err(AdminError::UnknownType(_))
    ));
}
