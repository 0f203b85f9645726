//! Traps: state save, handler dispatch by kind, and resume.
//!
//! Each kind has one resume policy. LinkFault retries the faulting
//! instruction once the slot is resolved, an explicit TRAP continues with
//! the next instruction, and everything else raises an alarm and halts.

use std::fmt;

use crate::layers::{GateContext, LayerStack};
use crate::linker::LinkageKey;
use crate::machine::{CodePoint, Flags, Machine, Outcome};
use crate::mmu::{AccessKind, FaultKind, MemFault};
use crate::model::{build_descriptor, Layer, Suid};
use crate::namespace::{Event, EventKind};

/// Frames deeper than this are a fatal error.
pub const MAX_TRAP_NESTING: usize = 4;

/// Exit codes for error halts are `ERROR_EXIT_BASE + ordinal`.
pub const ERROR_EXIT_BASE: u16 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TrapKind {
    UserTrap(u16),
    LinkFault { slot: u16, symbol: String },
    Bounds,
    Permission,
    IllegalOpcode,
    DivideByZero,
    StackFault,
    GateSequenceFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResumePolicy {
    /// Re-execute the faulting instruction.
    Retry,
    /// Continue after the faulting instruction.
    Next,
    AlarmAndHalt,
}

impl ResumePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ResumePolicy::Retry => "retry",
            ResumePolicy::Next => "next",
            ResumePolicy::AlarmAndHalt => "halt",
        }
    }
}

/// Every way a run can end in an alarm. The ordinal fixes the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Bounds = 0,
    Permission = 1,
    IllegalOpcode = 2,
    DivideByZero = 3,
    StackFault = 4,
    GateSequenceFault = 5,
    LinkUnresolvable = 6,
    FatalTrapNesting = 7,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 8] = [
        ErrorClass::Bounds,
        ErrorClass::Permission,
        ErrorClass::IllegalOpcode,
        ErrorClass::DivideByZero,
        ErrorClass::StackFault,
        ErrorClass::GateSequenceFault,
        ErrorClass::LinkUnresolvable,
        ErrorClass::FatalTrapNesting,
    ];

    pub fn exit_code(self) -> u16 {
        ERROR_EXIT_BASE + self as u16
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Bounds => "bounds",
            ErrorClass::Permission => "permission",
            ErrorClass::IllegalOpcode => "illegal_opcode",
            ErrorClass::DivideByZero => "divide_by_zero",
            ErrorClass::StackFault => "stack_fault",
            ErrorClass::GateSequenceFault => "gate_sequence",
            ErrorClass::LinkUnresolvable => "link_unresolvable",
            ErrorClass::FatalTrapNesting => "trap_nesting",
        }
    }

    pub fn from_exit_code(code: u16) -> Option<ErrorClass> {
        ErrorClass::ALL.into_iter().find(|c| c.exit_code() == code)
    }
}

impl TrapKind {
    pub fn policy(&self) -> ResumePolicy {
        match self {
            TrapKind::LinkFault { .. } => ResumePolicy::Retry,
            TrapKind::UserTrap(_) => ResumePolicy::Next,
            _ => ResumePolicy::AlarmAndHalt,
        }
    }

    pub fn class(&self) -> Option<ErrorClass> {
        match self {
            TrapKind::UserTrap(_) | TrapKind::LinkFault { .. } => None,
            TrapKind::Bounds => Some(ErrorClass::Bounds),
            TrapKind::Permission => Some(ErrorClass::Permission),
            TrapKind::IllegalOpcode => Some(ErrorClass::IllegalOpcode),
            TrapKind::DivideByZero => Some(ErrorClass::DivideByZero),
            TrapKind::StackFault => Some(ErrorClass::StackFault),
            TrapKind::GateSequenceFault => Some(ErrorClass::GateSequenceFault),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrapKind::UserTrap(_) => "user",
            TrapKind::LinkFault { .. } => "link",
            other => other.class().map(ErrorClass::as_str).unwrap_or("?"),
        }
    }

    fn detail(&self) -> String {
        match self {
            TrapKind::UserTrap(code) => format!("{code:#x}"),
            TrapKind::LinkFault { slot, symbol } => format!("{slot:#x}/{symbol}"),
            _ => "-".to_string(),
        }
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a fault happened: the segment and offset involved, the access
/// (if it was a memory access) and the layer in force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaultSite {
    pub suid: Suid,
    pub offset: u64,
    pub access: Option<AccessKind>,
    pub layer: Layer,
}

impl From<MemFault> for FaultSite {
    fn from(f: MemFault) -> Self {
        FaultSite {
            suid: f.suid,
            offset: f.offset,
            access: Some(f.access),
            layer: f.layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trap {
    pub kind: TrapKind,
    pub site: FaultSite,
}

impl From<MemFault> for Trap {
    fn from(f: MemFault) -> Self {
        let kind = match f.kind {
            FaultKind::Bounds => TrapKind::Bounds,
            FaultKind::Permission => TrapKind::Permission,
        };
        Trap {
            kind,
            site: f.into(),
        }
    }
}

/// Built-in handlers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NativeHandler {
    /// The name → SUID → GST → Type Table pipeline.
    Resolver,
    /// Alarm and halt.
    Error,
    /// Resume immediately; used for unbound user traps.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandlerTarget {
    Native(NativeHandler),
    Guest {
        suid: Suid,
        entry: u64,
        layer: Layer,
    },
}

/// Which handler runs for the two trap classes a guest may take over.
/// Error kinds always go to the native error handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrapBindings {
    pub link: HandlerTarget,
    pub user: HandlerTarget,
}

impl Default for TrapBindings {
    fn default() -> Self {
        Self {
            link: HandlerTarget::Native(NativeHandler::Resolver),
            user: HandlerTarget::Native(NativeHandler::Ignore),
        }
    }
}

impl TrapBindings {
    pub fn target(&self, kind: &TrapKind) -> HandlerTarget {
        match kind {
            TrapKind::LinkFault { .. } => self.link,
            TrapKind::UserTrap(_) => self.user,
            _ => HandlerTarget::Native(NativeHandler::Error),
        }
    }
}

/// Register and stack contents saved at trap entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedState {
    pub acc: u64,
    pub x: u64,
    pub flags: Flags,
    pub layer: Layer,
    pub ip: CodePoint,
    pub linkage: LinkageKey,
    pub stacks: [LayerStack; 3],
    pub gates: Vec<GateContext>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapFrame {
    pub saved: SavedState,
    pub trap: Trap,
}

impl Machine {
    fn snapshot(&self) -> SavedState {
        let p = &self.process;
        SavedState {
            acc: p.acc,
            x: p.x,
            flags: p.flags,
            layer: p.layer,
            ip: p.ip,
            linkage: p.linkage,
            stacks: p.stacks.clone(),
            gates: p.gates.clone(),
        }
    }

    /// Transfers control to the handler for `trap`.
    pub(crate) fn dispatch(&mut self, trap: Trap) -> Outcome {
        if self.process.traps.len() >= MAX_TRAP_NESTING {
            return self.fatal(ErrorClass::FatalTrapNesting, trap.site);
        }
        let policy = trap.kind.policy();
        let target = self.bindings.target(&trap.kind);
        if let Some(class) = trap.kind.class() {
            let ev = fault_event(self.steps, class, &trap.site, &self.here_label());
            self.log.log_event(ev);
        }
        let depth = self.process.traps.len() + 1;
        let handler = match target {
            HandlerTarget::Native(NativeHandler::Resolver) => "native:resolver".to_string(),
            HandlerTarget::Native(NativeHandler::Error) => "native:error".to_string(),
            HandlerTarget::Native(NativeHandler::Ignore) => "native:ignore".to_string(),
            HandlerTarget::Guest { suid, entry, layer } => {
                format!("guest:{}+{entry:#x}@{layer}", self.label_of(suid))
            }
        };
        let ev = Event::new(self.steps, EventKind::Trap)
            .with("phase", "enter")
            .with("kind", trap.kind.name())
            .with("at", self.here_label())
            .with("layer", self.process.layer)
            .with("policy", policy.as_str())
            .with("handler", handler)
            .hex("depth", depth as u64)
            .with("detail", trap.kind.detail());
        self.log.log_event(ev);

        let frame = TrapFrame {
            saved: self.snapshot(),
            trap: trap.clone(),
        };
        self.process.traps.push(frame);

        match target {
            HandlerTarget::Native(NativeHandler::Error) => self.default_error_handler(),
            HandlerTarget::Native(NativeHandler::Ignore) => {
                self.resume().expect("frame just pushed");
                Outcome::Running
            }
            HandlerTarget::Native(NativeHandler::Resolver) => {
                let TrapKind::LinkFault { slot, .. } = trap.kind else {
                    unreachable!("resolver bound to link faults only")
                };
                match self.resolve_native(self.process.linkage, slot, self.process.layer) {
                    Ok(_) => {
                        self.resume().expect("frame just pushed");
                        Outcome::Running
                    }
                    Err(_) => self.fatal(ErrorClass::LinkUnresolvable, trap.site),
                }
            }
            HandlerTarget::Guest { suid, entry, layer } => {
                match build_descriptor(suid, &self.gst, &self.types) {
                    Ok(desc) => {
                        self.process.layer = layer;
                        self.transfer(CodePoint {
                            desc,
                            offset: entry,
                        });
                        Outcome::Running
                    }
                    Err(_) => self.fatal(ErrorClass::LinkUnresolvable, trap.site),
                }
            }
        }
    }

    /// Pops the top frame and restores the saved state, placing ip per the
    /// frame's policy. Fails with GateSequenceFault when nothing is pending.
    pub(crate) fn resume(&mut self) -> Result<(), TrapKind> {
        let frame = self
            .process
            .traps
            .pop()
            .ok_or(TrapKind::GateSequenceFault)?;
        let TrapFrame { saved, trap } = frame;
        let p = &mut self.process;
        p.acc = saved.acc;
        p.x = saved.x;
        p.flags = saved.flags;
        p.layer = saved.layer;
        p.stacks = saved.stacks;
        p.gates = saved.gates;
        p.linkage = saved.linkage;
        p.ip = saved.ip;
        if trap.kind.policy() == ResumePolicy::Next {
            p.ip.offset = p.ip.offset.wrapping_add(4);
        }
        let ev = Event::new(self.steps, EventKind::Trap)
            .with("phase", "resume")
            .with("kind", trap.kind.name())
            .with("to", self.here_label())
            .with("layer", self.process.layer)
            .hex("depth", self.process.traps.len() as u64);
        self.log.log_event(ev);
        Ok(())
    }

    /// Raises the alarm for the top frame and halts.
    pub(crate) fn default_error_handler(&mut self) -> Outcome {
        let frame = self.process.traps.last().expect("error frame pushed");
        let class = frame.trap.kind.class().expect("error kinds only");
        let site = frame.trap.site;
        self.alarm_and_halt(class, site)
    }

    /// Error paths that bypass the frame stack (unresolvable links,
    /// runaway nesting).
    pub(crate) fn fatal(&mut self, class: ErrorClass, site: FaultSite) -> Outcome {
        let ev = fault_event(self.steps, class, &site, &self.here_label());
        self.log.log_event(ev);
        self.alarm_and_halt(class, site)
    }

    fn alarm_and_halt(&mut self, class: ErrorClass, site: FaultSite) -> Outcome {
        let ev = alarm_event(self.steps, class.as_str(), &site, class.exit_code());
        self.log.log_event(ev);
        self.halt(class.exit_code(), "alarm")
    }

    pub fn trap_depth(&self) -> usize {
        self.process.traps.len()
    }

    pub fn trap_frames(&self) -> &[TrapFrame] {
        &self.process.traps
    }
}

fn access_str(access: Option<AccessKind>) -> char {
    access.map(AccessKind::letter).unwrap_or('-')
}

pub(crate) fn fault_event(step: u64, class: ErrorClass, site: &FaultSite, at: &str) -> Event {
    Event::new(step, EventKind::Fault)
        .with("kind", class.as_str())
        .hex("suid", site.suid.0)
        .hex("offset", site.offset)
        .with("access", access_str(site.access))
        .with("layer", site.layer)
        .with("at", at)
}

pub(crate) fn alarm_event(step: u64, kind: &str, site: &FaultSite, code: u16) -> Event {
    Event::new(step, EventKind::Alarm)
        .with("kind", kind)
        .hex("suid", site.suid.0)
        .hex("offset", site.offset)
        .with("access", access_str(site.access))
        .with("layer", site.layer)
        .hex("code", u64::from(code))
}
