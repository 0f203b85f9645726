use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guard_core::demos;
use tempfile::TempDir;

fn guard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guard"))
        .args(args)
        .output()
        .expect("guard binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Copies one fixture directory into a fresh temp dir.
fn fixture_dir(dir: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    for (path, text) in demos::FIXTURES {
        if let Some(name) = path.strip_prefix(&format!("{dir}/")) {
            fs::write(tmp.path().join(name), text).unwrap();
        }
    }
    tmp
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn build(dir: &Path, manifest: &str) -> PathBuf {
    let img = dir.join("out.gim");
    let o = guard(&["build", p(&dir.join(manifest)), "-o", p(&img)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    img
}

#[test]
fn build_and_trace_are_reproducible() {
    let tmp = fixture_dir("tutorial");
    let img = build(tmp.path(), "manifest.gim");
    let first = fs::read(&img).unwrap();
    build(tmp.path(), "manifest.gim");
    assert_eq!(fs::read(&img).unwrap(), first);

    let (a, b) = (tmp.path().join("a.trace"), tmp.path().join("b.trace"));
    for t in [&a, &b] {
        let o = guard(&["run", p(&img), "--trace", p(t), "--trace-steps"]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o), "output 07072a\n");
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(
        text.starts_with("EV 1 STEP layer=S at=foo_user+0x0 op=LDX"),
        "{text}"
    );
}

#[test]
fn first_write_faults_with_permission_code() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("m.gim"),
        "image wf\n\
         type code S:--x U:--- K:---\n\
         type ro S:r-- U:--- K:---\n\
         segment main code asm=main.gasm\n\
         segment buf ro data=hex:00\n\
         entry main start\n",
    )
    .unwrap();
    fs::write(
        tmp.path().join("main.gasm"),
        ".segment main code\n.extern buf\nstart: STA buf\nHALT\n",
    )
    .unwrap();
    let img = build(tmp.path(), "m.gim");
    let o = guard(&["run", p(&img)]);
    assert_eq!(code(&o), 65);
}

#[test]
fn io_files_and_budget() {
    let tmp = fixture_dir("netfilter");
    let img = build(tmp.path(), "manifest.gim");
    let packets = demos::netfilter_packets(3, 20);
    let (inp, out) = (tmp.path().join("in.bin"), tmp.path().join("out.bin"));
    fs::write(&inp, &packets).unwrap();
    let o = guard(&["run", p(&img), "--in", p(&inp), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&out).unwrap(), demos::reference_filter(&packets));

    let o = guard(&["run", p(&img), "--in", p(&inp), "--max-steps", "10"]);
    assert_eq!(code(&o), 124);
}

#[test]
fn rename_bind_and_inspect() {
    let tmp = fixture_dir("hotswap");
    let img = build(tmp.path(), "manifest.gim");
    let input = tmp.path().join("in.bin");
    fs::write(&input, [1, 1]).unwrap();

    assert_eq!(
        code(&guard(&["rename", p(&img), "firewall", "oldfirewall"])),
        0
    );
    let shown = stdout(&guard(&["inspect", p(&img)]));
    assert!(
        shown.contains("segment 0x1001 firewall type=fw_data len=0x1 names=oldfirewall\n"),
        "{shown}"
    );

    let objs = tmp.path().join("objs");
    let o = guard(&[
        "asm",
        p(&tmp.path().join("firewall_v2.gasm")),
        "-o",
        p(&objs),
    ]);
    assert_eq!(code(&o), 0);
    let o = guard(&[
        "bind",
        p(&img),
        "firewall",
        p(&objs.join("firewall_v2.gobj")),
        "fw_data",
    ]);
    assert_eq!(stdout(&o), "firewall -> 0x1002\n");

    let seg = stdout(&guard(&["inspect", p(&img), "--segment", "firewall"]));
    assert_eq!(
        seg,
        "segment 0x1002 firewall\ntype fw_data S:r-- U:rw- K:---\nlen 0x1\n0000  02\n"
    );
    let o = guard(&["run", p(&img), "--in", p(&input)]);
    assert_eq!(stdout(&o), "output 0202\n");
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let tmp = fixture_dir("hotswap");
    let img = build(tmp.path(), "manifest.gim");
    assert_eq!(code(&guard(&["frobnicate"])), 2);
    assert_eq!(code(&guard(&["run"])), 2);
    assert_eq!(code(&guard(&["run", "/nonexistent.gim"])), 2);
    assert_eq!(code(&guard(&["rename", p(&img), "nope", "x"])), 2);
    assert_eq!(code(&guard(&["inspect", p(&img), "--segment", "nope"])), 2);
    fs::write(tmp.path().join("bad.gasm"), ".segment x code\nFLY\n").unwrap();
    let o = guard(&["asm", p(&tmp.path().join("bad.gasm"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("FLY"));
}

#[test]
fn disasm_reassembles_to_the_same_object() {
    let tmp = fixture_dir("tutorial");
    let src = tmp.path().join("foo_user.gasm");
    let text = stdout(&guard(&["disasm", p(&src)]));
    let again = tmp.path().join("again.gasm");
    fs::write(&again, &text).unwrap();
    assert_eq!(stdout(&guard(&["disasm", p(&again)])), text);
}

#[test]
fn verify_matrix_reports_clean() {
    let o = guard(&["verify", "matrix"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "matrix cases=72 checks=720 mismatches=0\n");
}

#[test]
fn verify_small_fuzz_run() {
    let o = guard(&["verify", "fuzz", "--seed", "1", "--count", "50"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("divergences=0"));
}
