use guard_core::asm::{assemble, disassemble, parse_object, render_object};
use guard_core::demos;
use guard_core::image::{parse_image, render_image};
use guard_core::Machine;

#[test]
fn corpus_round_trips_through_the_disassembler() {
    let corpus = demos::corpus();
    assert!(corpus.len() > 20);
    for (path, src) in corpus {
        let unit = assemble(&src).unwrap_or_else(|e| panic!("{path}: {e}"));
        let text = disassemble(&unit);
        let again = assemble(&text).unwrap_or_else(|e| panic!("{path} disassembly: {e}\n{text}"));
        assert_eq!(again.bytes, unit.bytes, "{path}");
        assert_eq!(again.template, unit.template, "{path}");
        assert_eq!(disassemble(&again), text, "{path}");
        assert_eq!(parse_object(&render_object(&unit)).unwrap(), unit, "{path}");
    }
}

#[test]
fn builds_and_traces_are_repeatable() {
    for build in [
        demos::tutorial,
        demos::tutorial_guest,
        demos::hotswap,
        demos::netfilter,
    ] {
        let a = render_image(&build());
        let b = render_image(&build());
        assert_eq!(a, b);
        assert_eq!(render_image(&parse_image(&a).unwrap()), a);
        let trace = || {
            let mut m = Machine::load(&build()).with_input(vec![5, 6, 80, 1, 2, 3, 4]);
            m.set_trace_steps(true);
            m.run(10_000).events.render()
        };
        assert_eq!(trace(), trace());
    }
}

#[test]
fn foo_user_object_is_frozen() {
    let unit = assemble(demos::fixture("tutorial/foo_user.gasm").unwrap()).unwrap();
    // LDX #7 | LDA 2,X | OUT | LDA 2,X | OUT | CALL 1 | HALT #0
    assert_eq!(
        hex::encode(&unit.bytes),
        "12000700100102006103000010010200610300004002010000000000"
    );
}
