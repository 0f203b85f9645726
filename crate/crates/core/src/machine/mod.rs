//! The Instruction Layer: process state and the fetch/decode/execute loop.
//!
//! A [`Machine`] is one VM instance. It owns the tables loaded from a
//! [`GuardImage`], the segment store, the linkage instances and exactly one
//! running process. Processes are never multiplexed; a new one may be
//! started with [`Machine::spawn_process`] once the previous one is done.

mod exec;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::image::{GuardImage, SegmentMeta};
use crate::layers::{GateContext, LayerStack};
use crate::linker::{LinkageInstance, LinkageKey, LinkageTemplate};
use crate::mmu::{MmuError, SegmentStore};
use crate::model::{
    build_descriptor, Descriptor, GlobalSegmentTable, Layer, ModelError, Suid, TypeId, TypeTable,
};
use crate::namespace::{Event, EventKind, EventLog, NameError, NameTable};
use crate::traps::{FaultSite, Trap, TrapBindings, TrapFrame, TrapKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub u32);

/// A position in a code segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodePoint {
    pub desc: Descriptor,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub zero: bool,
    pub negative: bool,
}

impl Flags {
    pub fn from_value(v: u64) -> Flags {
        Flags {
            zero: v == 0,
            negative: v >> 63 == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessState {
    pub pid: Pid,
    pub acc: u64,
    pub x: u64,
    pub flags: Flags,
    pub layer: Layer,
    pub ip: CodePoint,
    pub linkage: LinkageKey,
    pub stacks: [LayerStack; 3],
    pub gates: Vec<GateContext>,
    pub traps: Vec<TrapFrame>,
}

/// Result of one dispatch or one instruction, internal to the step loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Running,
    Halted(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// A trap was dispatched during this step and control went on.
    Trapped(TrapKind),
    Halted(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub outcome: StepOutcome,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Halted(u16),
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: RunOutcome,
    /// Steps taken by this call.
    pub steps: u64,
    pub events: EventLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdminError {
    #[error(transparent)]
    Name(#[from] NameError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mmu(#[from] MmuError),
    #[error("unknown type `{0}`")]
    UnknownType(String),
}

pub struct Machine {
    pub(crate) types: TypeTable,
    pub(crate) gst: GlobalSegmentTable,
    pub(crate) names: NameTable,
    pub(crate) store: SegmentStore,
    pub(crate) segments: BTreeMap<Suid, SegmentMeta>,
    pub(crate) bindings: TrapBindings,
    entry: (Suid, u64),
    pub(crate) linkages: BTreeMap<LinkageKey, LinkageInstance>,
    pub(crate) process: ProcessState,
    next_pid: u32,
    input: Vec<u8>,
    input_pos: usize,
    output: Vec<u8>,
    pub(crate) log: EventLog,
    pub(crate) steps: u64,
    trace_steps: bool,
    halted: Option<u16>,
}

impl Machine {
    /// Loads `image` and starts process 1 at the entry point, in the
    /// Services layer with empty stacks.
    pub fn load(image: &GuardImage) -> Machine {
        let (entry_suid, entry_off) = image.entry;
        let entry_desc = build_descriptor(entry_suid, &image.gst, &image.types)
            .expect("validated image has an entry segment");
        let pid = Pid(1);
        let ip = CodePoint {
            desc: entry_desc,
            offset: entry_off,
        };
        let mut m = Machine {
            types: image.types.clone(),
            gst: image.gst.clone(),
            names: image.names.clone(),
            store: image.store.clone(),
            segments: image.segments.clone(),
            bindings: image.traps,
            entry: image.entry,
            linkages: BTreeMap::new(),
            process: Self::fresh_process(pid, ip),
            next_pid: 2,
            input: Vec::new(),
            input_pos: 0,
            output: Vec::new(),
            log: EventLog::new(),
            steps: 0,
            trace_steps: false,
            halted: None,
        };
        m.transfer(ip);
        m
    }

    fn fresh_process(pid: Pid, ip: CodePoint) -> ProcessState {
        ProcessState {
            pid,
            acc: 0,
            x: 0,
            flags: Flags::default(),
            layer: Layer::Services,
            ip,
            linkage: LinkageKey {
                pid,
                code: ip.desc.suid,
            },
            stacks: Default::default(),
            gates: Vec::new(),
            traps: Vec::new(),
        }
    }

    /// Starts a new process at the image entry point. Tables, store and
    /// the event log carry over; the new process gets its own linkage
    /// instances.
    pub fn spawn_process(&mut self) -> Pid {
        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        let (suid, offset) = self.entry;
        let desc =
            build_descriptor(suid, &self.gst, &self.types).expect("entry segment stays in the GST");
        let ip = CodePoint { desc, offset };
        self.process = Self::fresh_process(pid, ip);
        self.halted = None;
        self.transfer(ip);
        pid
    }

    pub fn with_input(mut self, input: Vec<u8>) -> Self {
        self.set_input(input);
        self
    }

    pub fn set_input(&mut self, input: Vec<u8>) {
        self.input = input;
        self.input_pos = 0;
    }

    /// Appends more bytes to the input channel.
    pub fn feed_input(&mut self, bytes: &[u8]) {
        self.input.extend_from_slice(bytes);
    }

    pub fn output(&self) -> &[u8] {
        &self.output
    }

    /// Emit a STEP event for every executed instruction.
    pub fn set_trace_steps(&mut self, on: bool) {
        self.trace_steps = on;
    }

    pub fn enable_mmu_audit(&mut self) {
        self.store.enable_audit();
    }

    pub fn events(&self) -> &EventLog {
        &self.log
    }

    pub fn state(&self) -> &ProcessState {
        &self.process
    }

    pub fn store(&self) -> &SegmentStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut SegmentStore {
        &mut self.store
    }

    pub fn gst(&self) -> &GlobalSegmentTable {
        &self.gst
    }

    pub fn types(&self) -> &TypeTable {
        &self.types
    }

    pub fn names(&self) -> &NameTable {
        &self.names
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn halted(&self) -> Option<u16> {
        self.halted
    }

    pub fn segment_meta(&self, suid: Suid) -> Option<&SegmentMeta> {
        self.segments.get(&suid)
    }

    /// Display label of a segment, used in trace lines.
    pub fn label_of(&self, suid: Suid) -> String {
        self.segments
            .get(&suid)
            .map(|m| m.label.clone())
            .unwrap_or_else(|| format!("seg{suid}"))
    }

    pub(crate) fn here_label(&self) -> String {
        format!(
            "{}+{:#x}",
            self.label_of(self.process.ip.desc.suid),
            self.process.ip.offset
        )
    }

    pub(crate) fn site_here(&self) -> FaultSite {
        FaultSite {
            suid: self.process.ip.desc.suid,
            offset: self.process.ip.offset,
            access: None,
            layer: self.process.layer,
        }
    }

    pub(crate) fn trap_here(&self, kind: TrapKind) -> Trap {
        Trap {
            kind,
            site: self.site_here(),
        }
    }

    /// Moves ip and switches to the linkage instance for the target code
    /// segment, creating it on first entry.
    pub(crate) fn transfer(&mut self, to: CodePoint) {
        self.process.ip = to;
        let key = LinkageKey {
            pid: self.process.pid,
            code: to.desc.suid,
        };
        self.process.linkage = key;
        self.instantiate_linkage(key, &to.desc);
    }

    pub(crate) fn create_segment(&mut self, label: &str, bytes: Vec<u8>, ty: TypeId) -> Suid {
        let suid = self.gst.create(bytes.len() as u64, ty);
        self.store
            .bind_segment(suid, bytes)
            .expect("fresh SUIDs are unbound");
        self.segments.insert(
            suid,
            SegmentMeta {
                label: label.to_string(),
                template: None,
                labels: BTreeMap::new(),
            },
        );
        suid
    }

    pub(crate) fn halt(&mut self, code: u16, reason: &str) -> Outcome {
        let d = self.stack_depths();
        let ev = Event::new(self.steps, EventKind::Halt)
            .hex("code", u64::from(code))
            .with("reason", reason)
            .with("layer", self.process.layer)
            .hex("sd", d[0] as u64)
            .hex("ud", d[1] as u64)
            .hex("kd", d[2] as u64);
        self.log.log_event(ev);
        self.halted = Some(code);
        Outcome::Halted(code)
    }

    /// Executes one instruction (plus any trap handling it causes).
    pub fn step(&mut self) -> StepReport {
        if let Some(code) = self.halted {
            return StepReport {
                outcome: StepOutcome::Halted(code),
                events: Vec::new(),
            };
        }
        self.steps += 1;
        let first = self.log.len();
        let outcome = match self.execute_one() {
            Ok(Outcome::Running) => StepOutcome::Continue,
            Ok(Outcome::Halted(code)) => StepOutcome::Halted(code),
            Err(trap) => {
                let kind = trap.kind.clone();
                match self.dispatch(trap) {
                    Outcome::Running => StepOutcome::Trapped(kind),
                    Outcome::Halted(code) => StepOutcome::Halted(code),
                }
            }
        };
        StepReport {
            outcome,
            events: self.log.events()[first..].to_vec(),
        }
    }

    /// Steps until the process halts or `max_steps` more steps have run.
    pub fn run(&mut self, max_steps: u64) -> RunResult {
        let mut steps = 0;
        let outcome = loop {
            if let Some(code) = self.halted {
                break RunOutcome::Halted(code);
            }
            if steps >= max_steps {
                break RunOutcome::BudgetExceeded;
            }
            self.step();
            steps += 1;
        };
        RunResult {
            outcome,
            steps,
            events: self.log.clone(),
        }
    }

    // Administrative operations, applied between runs.

    pub fn rename(&mut self, old: &str, new: &str) -> Result<(), AdminError> {
        Ok(self.names.rename(old, new)?)
    }

    pub fn unbind_name(&mut self, name: &str) -> Result<Suid, AdminError> {
        Ok(self.names.unbind(name)?)
    }

    /// Creates a segment of type `type_name` and binds it under `name`.
    pub fn install_segment(
        &mut self,
        name: &str,
        type_name: &str,
        bytes: Vec<u8>,
        template: Option<LinkageTemplate>,
    ) -> Result<Suid, AdminError> {
        let ty = self
            .types
            .by_name(type_name)
            .map(|t| t.type_id)
            .ok_or_else(|| AdminError::UnknownType(type_name.to_string()))?;
        self.names
            .lookup(name)
            .err()
            .ok_or_else(|| NameError::DuplicateName(name.into()))?;
        let suid = self.create_segment(name, bytes, ty);
        if let Some(meta) = self.segments.get_mut(&suid) {
            meta.template = template;
        }
        self.names.bind(name, suid)?;
        Ok(suid)
    }

    /// Unbinds `name` and deletes the segment it named.
    pub fn delete_segment(&mut self, name: &str) -> Result<Suid, AdminError> {
        let suid = self.names.lookup(name)?;
        self.gst.delete(suid)?;
        self.store.unbind_segment(suid)?;
        self.names.unbind(name)?;
        Ok(suid)
    }

    /// Resizes a segment; `layer` is the layer the request executes in.
    pub fn resize_segment(
        &mut self,
        suid: Suid,
        length: u64,
        layer: Layer,
    ) -> Result<(), AdminError> {
        Ok(self
            .store
            .resize_segment(&mut self.gst, suid, length, layer)?)
    }
}

#[cfg(test)]
mod tests;
