//! The `guard` command line: assemble, build, run, inspect and administer
//! Guard images, and drive the verification harness.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use guard_core::asm::{parse_object, render_object};
use guard_core::verify::{self, FuzzConfig};
use guard_core::{
    assemble, build_from_path, disassemble, parse_image, render_image, GuardImage, Machine,
    ObjectUnit, RunOutcome,
};

/// Exit code when `--max-steps` runs out before the guest halts.
pub const EXIT_BUDGET: u8 = 124;
/// Exit code for usage and validation errors.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "guard", version, about = "Guard image toolchain and VM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble a `.gasm` source into `<dir>/<stem>.gobj`.
    Asm {
        file: PathBuf,
        #[arg(short, long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print canonical source for a `.gasm` or `.gobj` file.
    Disasm { file: PathBuf },
    /// Build a manifest into an image.
    Build {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Load an image and run its entry process.
    Run {
        image: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        trace_steps: bool,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: u64,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Summarize an image, or dump one segment.
    Inspect {
        image: PathBuf,
        #[arg(long)]
        segment: Option<String>,
    },
    /// Rename a namespace entry in place.
    Rename {
        image: PathBuf,
        old: String,
        new: String,
    },
    /// Install an object as a new segment and bind it under `name`.
    Bind {
        image: PathBuf,
        name: String,
        object: PathBuf,
        #[arg(value_name = "TYPE")]
        type_name: String,
    },
    /// Run a harness check.
    Verify {
        #[command(subcommand)]
        check: Check,
    },
}

#[derive(Debug, Subcommand)]
pub enum Check {
    /// Permission and bounds matrix.
    Matrix,
    /// Random programs against the shadow model.
    Fuzz {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
    },
    /// Fixed scenarios against golden traces.
    Scenarios {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Rewrite the golden traces instead of comparing.
        #[arg(long)]
        bless: bool,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_image(path: &Path) -> Result<GuardImage> {
    parse_image(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_unit(path: &Path) -> Result<ObjectUnit> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "gobj") {
        parse_object(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        assemble(&text).with_context(|| format!("assembling {}", path.display()))
    }
}

/// Map a halt code onto a process exit status.
pub fn halt_status(code: u16) -> u8 {
    u8::try_from(code).unwrap_or(u8::MAX)
}

/// Runs one parsed command. Human-readable output goes to `out`; the
/// returned value is the process exit status.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Asm { file, out_dir } => {
            let unit = load_unit(&file)?;
            let stem = file
                .file_stem()
                .context("source path has no file name")?
                .to_string_lossy();
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let dest = out_dir.join(format!("{stem}.gobj"));
            write_file(&dest, render_object(&unit))?;
            writeln!(out, "{}", dest.display())?;
            Ok(0)
        }
        Command::Disasm { file } => {
            write!(out, "{}", disassemble(&load_unit(&file)?))?;
            Ok(0)
        }
        Command::Build {
            manifest,
            out: dest,
        } => {
            let img = build_from_path(&manifest)
                .map_err(|e| anyhow::anyhow!("{}: {e}", manifest.display()))?;
            write_file(&dest, render_image(&img))?;
            Ok(0)
        }
        Command::Run {
            image,
            trace,
            trace_steps,
            max_steps,
            input,
            output,
        } => {
            let img = load_image(&image)?;
            let bytes = match input {
                Some(p) => fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => Vec::new(),
            };
            let mut m = Machine::load(&img).with_input(bytes);
            m.set_trace_steps(trace_steps);
            let r = m.run(max_steps);
            if let Some(p) = trace {
                write_file(&p, m.events().render())?;
            }
            match output {
                Some(p) => write_file(&p, m.output())?,
                None if !m.output().is_empty() => {
                    writeln!(out, "output {}", hex(m.output()))?;
                }
                None => {}
            }
            Ok(match r.outcome {
                RunOutcome::Halted(code) => halt_status(code),
                RunOutcome::BudgetExceeded => {
                    writeln!(out, "budget of {max_steps} steps exhausted")?;
                    EXIT_BUDGET
                }
            })
        }
        Command::Inspect { image, segment } => {
            let img = load_image(&image)?;
            let text = match segment {
                Some(name) => inspect_segment(&img, &name)?,
                None => inspect_image(&img),
            };
            write!(out, "{text}")?;
            Ok(0)
        }
        Command::Rename { image, old, new } => {
            let mut img = load_image(&image)?;
            img.rename(&old, &new)?;
            write_file(&image, render_image(&img))?;
            Ok(0)
        }
        Command::Bind {
            image,
            name,
            object,
            type_name,
        } => {
            let mut img = load_image(&image)?;
            let unit = load_unit(&object)?;
            let suid = img.bind_object(&name, &unit, &type_name)?;
            write_file(&image, render_image(&img))?;
            writeln!(out, "{name} -> {suid}")?;
            Ok(0)
        }
        Command::Verify { check } => verify_cmd(check, out),
    }
}

fn verify_cmd(check: Check, out: &mut dyn Write) -> Result<u8> {
    let ok = match check {
        Check::Matrix => {
            let r = verify::permission_matrix_check();
            writeln!(
                out,
                "matrix cases={} checks={} mismatches={}",
                r.cases,
                r.checks,
                r.mismatches.len()
            )?;
            for m in &r.mismatches {
                writeln!(out, "  {m}")?;
            }
            r.ok()
        }
        Check::Fuzz { seed, count } => {
            let r = verify::fuzz_with(FuzzConfig::new(seed, count));
            writeln!(
                out,
                "fuzz seed={seed} programs={} steps={} alarms={} links={} budget={} host_faults={} divergences={}",
                r.programs,
                r.steps,
                r.alarms,
                r.links,
                r.budget_exceeded,
                r.host_faults,
                r.divergences.len()
            )?;
            for c in &r.divergences {
                writeln!(out, "  #{}: {}", c.index, c.reason)?;
                writeln!(out, "    main {}", hex(&c.program.main))?;
                writeln!(out, "    gate {}", hex(&c.program.gate))?;
            }
            r.ok()
        }
        Check::Scenarios { dir, bless } => {
            let dir = dir.unwrap_or_else(verify::default_golden_dir);
            let r = verify::scenario_suite(&dir, bless);
            for s in &r.results {
                let verdict = if s.problems.is_empty() { "ok" } else { "FAIL" };
                writeln!(out, "{verdict} {}", s.name)?;
                for p in &s.problems {
                    writeln!(out, "  {p}")?;
                }
            }
            if bless {
                writeln!(out, "blessed {}", r.blessed)?;
            }
            r.ok()
        }
    };
    Ok(if ok { 0 } else { 1 })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn inspect_image(img: &GuardImage) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "image {}", img.name);
    for t in img.types.iter() {
        let _ = write!(s, "type {} {}", t.name, t.perms);
        if let Some(g) = t.gate_to {
            let _ = write!(s, " gate_to={g}");
        }
        if t.handler {
            s.push_str(" handler");
        }
        s.push('\n');
    }
    for e in img.gst.iter() {
        let label = img.segments.get(&e.suid).map_or("", |m| m.label.as_str());
        let ty = img.types.get(e.type_id).map_or("?", |t| t.name.as_str());
        let names: Vec<&str> = img.names.names_of(e.suid).collect();
        let _ = writeln!(
            s,
            "segment {} {label} type={ty} len={:#x} names={}",
            e.suid,
            e.length,
            if names.is_empty() {
                "-".to_string()
            } else {
                names.join(",")
            }
        );
    }
    let (suid, off) = img.entry;
    let label = img.segments.get(&suid).map_or("", |m| m.label.as_str());
    let _ = writeln!(s, "entry {label}+{off:#x}");
    s
}

fn inspect_segment(img: &GuardImage, name: &str) -> Result<String> {
    let Some((suid, meta)) = img.segment_by_name(name) else {
        bail!("no segment named `{name}`");
    };
    let entry = img
        .gst
        .iter()
        .find(|e| e.suid == suid)
        .context("named segment missing from the GST")?;
    let ty = img.types.get(entry.type_id)?;
    let bytes = img
        .store
        .contents(suid)
        .context("segment has no stored bytes")?;
    let mut s = String::new();
    let _ = writeln!(s, "segment {suid} {}", meta.label);
    let _ = writeln!(s, "type {} {}", ty.name, ty.perms);
    let _ = writeln!(s, "len {:#x}", entry.length);
    for (i, row) in bytes.chunks(16).enumerate() {
        let _ = writeln!(s, "{:04x}  {}", i * 16, hex(row));
    }
    if meta.template.is_some() {
        let unit = ObjectUnit {
            name: meta.label.clone(),
            type_name: ty.name.clone(),
            bytes: bytes.to_vec(),
            template: meta.template.clone(),
            labels: meta.labels.clone(),
        };
        s.push_str(&disassemble(&unit));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use guard_core::demos;

    #[test]
    fn halt_codes_saturate() {
        assert_eq!(halt_status(0), 0);
        assert_eq!(halt_status(65), 65);
        assert_eq!(halt_status(0x1ff), 255);
    }

    #[test]
    fn image_summary_lists_types_segments_and_entry() {
        let text = inspect_image(&demos::hotswap());
        assert_eq!(
            text,
            "image hotswap\n\
             type svc_code S:--x U:--- K:---\n\
             type fw_data S:r-- U:rw- K:---\n\
             type $scratch.S S:rw- U:--- K:---\n\
             type $scratch.U S:--- U:rw- K:---\n\
             type $scratch.K S:--- U:--- K:rw-\n\
             segment 0x1000 reader type=svc_code len=0x18 names=reader\n\
             segment 0x1001 firewall type=fw_data len=0x1 names=firewall\n\
             entry reader+0x0\n"
        );
    }

    #[test]
    fn segment_dump_includes_disassembly_for_code() {
        let text = inspect_segment(&demos::hotswap(), "reader").unwrap();
        assert!(
            text.starts_with("segment 0x1000 reader\ntype svc_code"),
            "{text}"
        );
        assert!(text.contains("loop:\n    IN\n    BEQ done\n"), "{text}");
        assert!(inspect_segment(&demos::hotswap(), "nope").is_err());
    }

    #[test]
    fn args_parse() {
        let cli = Cli::try_parse_from(["guard", "verify", "fuzz", "--seed", "3", "--count", "9"])
            .unwrap();
        assert!(matches!(
            cli.command,
            Command::Verify {
                check: Check::Fuzz { seed: 3, count: 9 }
            }
        ));
        assert!(Cli::try_parse_from(["guard", "bind", "img"]).is_err());
    }
}
