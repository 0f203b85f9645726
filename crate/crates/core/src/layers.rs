//! Layer enforcement: per-layer return stacks, CALL/RET, gate crossings
//! (ENTER/EXIT) and the restricted-instruction rules.
//!
//! A CALL pushes its return point on the stack of the layer it was issued
//! from. A gate lowers the Layer Register with ENTER and raises it back
//! with EXIT, so after `EXIT; RET` the caller's frame is popped from the
//! caller's own stack.

use crate::isa::Opcode;
use crate::machine::{CodePoint, Machine};
use crate::mmu::AccessKind;
use crate::model::{Descriptor, Layer, Suid};
use crate::namespace::{Event, EventKind};
use crate::traps::{Trap, TrapKind};

pub const MAX_STACK_DEPTH: usize = 1024;

/// A saved return point. Stacks hold nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReturnPoint {
    pub desc: Descriptor,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerStack {
    frames: Vec<ReturnPoint>,
}

impl LayerStack {
    pub fn push(&mut self, frame: ReturnPoint) -> Result<(), TrapKind> {
        if self.frames.len() >= MAX_STACK_DEPTH {
            return Err(TrapKind::StackFault);
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn pop(&mut self) -> Result<ReturnPoint, TrapKind> {
        self.frames.pop().ok_or(TrapKind::StackFault)
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[ReturnPoint] {
        &self.frames
    }
}

/// A pending gate crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateContext {
    pub entered_from: Layer,
    pub via: Suid,
    /// Depth of the entered layer's stack at ENTER; EXIT must see the same
    /// depth, i.e. be issued by the same gate activation.
    pub depth: usize,
}

/// Opcodes 0x70 to 0x7F need the Kernel; ENTER/EXIT need a gate segment;
/// RESUME needs a handler segment.
pub fn check_restricted(opcode: Opcode, layer: Layer, code: &Descriptor) -> Result<(), TrapKind> {
    if opcode.is_restricted() && layer != Layer::Kernel {
        return Err(TrapKind::Permission);
    }
    match opcode {
        Opcode::Enter | Opcode::Exit if code.gate_to.is_none() => Err(TrapKind::GateSequenceFault),
        Opcode::Resume if !code.handler => Err(TrapKind::GateSequenceFault),
        _ => Ok(()),
    }
}

impl Machine {
    pub(crate) fn call(&mut self, target: Descriptor, entry: u64) -> Result<(), Trap> {
        let layer = self.process.layer;
        if !entry.is_multiple_of(4) {
            return Err(self.trap_here(TrapKind::IllegalOpcode));
        }
        self.store
            .check(&target, entry, AccessKind::ExecuteFetch, layer)
            .map_err(Trap::from)?;
        let ret = ReturnPoint {
            desc: self.process.ip.desc,
            offset: self.process.ip.offset.wrapping_add(4),
        };
        self.process.stacks[layer.index()]
            .push(ret)
            .map_err(|k| self.trap_here(k))?;
        self.transfer(CodePoint {
            desc: target,
            offset: entry,
        });
        Ok(())
    }

    pub(crate) fn ret(&mut self) -> Result<(), Trap> {
        let layer = self.process.layer;
        let frame = self.process.stacks[layer.index()]
            .pop()
            .map_err(|k| self.trap_here(k))?;
        self.transfer(CodePoint {
            desc: frame.desc,
            offset: frame.offset,
        });
        Ok(())
    }

    pub(crate) fn enter(&mut self, target: Layer) -> Result<(), Trap> {
        let from = self.process.layer;
        let code = self.process.ip.desc;
        if code.gate_to != Some(target) || from.below() != Some(target) {
            return Err(self.trap_here(TrapKind::GateSequenceFault));
        }
        self.process.gates.push(GateContext {
            entered_from: from,
            via: code.suid,
            depth: self.process.stacks[target.index()].depth(),
        });
        self.process.layer = target;
        let ev = self.gate_event("enter", from, target, &self.label_of(code.suid));
        self.log.log_event(ev);
        Ok(())
    }

    pub(crate) fn exit(&mut self) -> Result<(), Trap> {
        let layer = self.process.layer;
        let code = self.process.ip.desc.suid;
        let matches = self.process.gates.last().is_some_and(|g| {
            g.via == code && self.process.stacks[layer.index()].depth() == g.depth
        });
        if !matches || self.process.ip.desc.gate_to != Some(layer) {
            return Err(self.trap_here(TrapKind::GateSequenceFault));
        }
        let ctx = self.process.gates.pop().expect("checked above");
        self.process.layer = ctx.entered_from;
        let ev = self.gate_event("exit", layer, ctx.entered_from, &self.label_of(code));
        self.log.log_event(ev);
        Ok(())
    }

    pub(crate) fn gate_event(&self, dir: &str, from: Layer, to: Layer, via: &str) -> Event {
        let d = self.stack_depths();
        Event::new(self.steps, EventKind::Gate)
            .with("dir", dir)
            .with("from", from)
            .with("to", to)
            .with("via", via)
            .hex("sd", d[0] as u64)
            .hex("ud", d[1] as u64)
            .hex("kd", d[2] as u64)
    }

    /// Stack depths in S, U, K order.
    pub fn stack_depths(&self) -> [usize; 3] {
        let s = &self.process.stacks;
        [
            s[Layer::Services.index()].depth(),
            s[Layer::Utilities.index()].depth(),
            s[Layer::Kernel.index()].depth(),
        ]
    }
}
