use crate::isa::{decode, Instruction, Mode, Opcode};
use crate::layers::check_restricted;
use crate::mmu::MmuError;
use crate::model::{Descriptor, Layer};
use crate::namespace::{Event, EventKind};
use crate::traps::{alarm_event, ErrorClass, Trap, TrapKind};

use super::{Flags, Machine, Outcome};

/// How control leaves an instruction that did not fault.
enum Flow {
    Next,
    Jumped,
    Halt(u16),
    /// Already halted by an error path; the HALT event is logged.
    Stopped(u16),
}

impl Machine {
    fn mem_trap(&self, err: MmuError, d: &Descriptor, offset: u64) -> Trap {
        match err {
            MmuError::Fault(f) => f.into(),
            // storage vanished under a stale descriptor: treat as empty
            _ => Trap {
                kind: TrapKind::Bounds,
                site: crate::traps::FaultSite {
                    suid: d.suid,
                    offset,
                    access: None,
                    layer: self.process.layer,
                },
            },
        }
    }

    pub(super) fn execute_one(&mut self) -> Result<Outcome, Trap> {
        let ip = self.process.ip;
        let layer = self.process.layer;
        let word = self
            .store
            .fetch_word(&ip.desc, ip.offset, layer)
            .map_err(|e| self.mem_trap(e, &ip.desc, ip.offset))?;
        let insn = decode(word).map_err(|_| self.trap_here(TrapKind::IllegalOpcode))?;
        if self.trace_steps {
            let ev = Event::new(self.steps, EventKind::Step)
                .with("layer", layer)
                .with("at", self.here_label())
                .with("op", insn.opcode.mnemonic())
                .with("mode", insn.mode.name())
                .hex("arg", u64::from(insn.operand));
            self.log.log_event(ev);
        }
        check_restricted(insn.opcode, layer, &ip.desc).map_err(|k| self.trap_here(k))?;
        match self.execute(insn)? {
            Flow::Next => {
                self.process.ip.offset = self.process.ip.offset.wrapping_add(4);
                Ok(Outcome::Running)
            }
            Flow::Jumped => Ok(Outcome::Running),
            Flow::Halt(code) => Ok(self.halt(code, "halt")),
            Flow::Stopped(code) => Ok(Outcome::Halted(code)),
        }
    }

    /// Descriptor and offset named by a slot-mode operand.
    fn slot_address(&self, insn: Instruction) -> Result<(Descriptor, u64), Trap> {
        let d = self.fetch_slot(insn.operand)?;
        let offset = match insn.mode {
            Mode::SlotIndexed => self.process.x,
            _ => 0,
        };
        Ok((d, offset))
    }

    /// The value operand of a load or ALU instruction.
    fn operand_value(&mut self, insn: Instruction) -> Result<u64, Trap> {
        match insn.mode {
            Mode::Immediate => Ok(u64::from(insn.operand)),
            Mode::SlotIndexed | Mode::SlotDirect => {
                let (d, off) = self.slot_address(insn)?;
                let layer = self.process.layer;
                self.store
                    .read_byte(&d, off, layer)
                    .map(u64::from)
                    .map_err(|e| self.mem_trap(e, &d, off))
            }
            Mode::None => Err(self.trap_here(TrapKind::IllegalOpcode)),
        }
    }

    fn set_acc(&mut self, v: u64) {
        self.process.acc = v;
        self.process.flags = Flags::from_value(v);
    }

    fn branch(&mut self, taken: bool, target: u16) -> Result<Flow, Trap> {
        if !taken {
            return Ok(Flow::Next);
        }
        let target = u64::from(target);
        if target % 4 != 0 {
            return Err(self.trap_here(TrapKind::IllegalOpcode));
        }
        self.process.ip.offset = target;
        Ok(Flow::Jumped)
    }

    fn io_event(&mut self, dir: &str, val: u64, eof: bool) {
        let ev = Event::new(self.steps, EventKind::Io)
            .with("dir", dir)
            .hex("val", val)
            .hex("eof", u64::from(eof));
        self.log.log_event(ev);
    }

    fn execute(&mut self, insn: Instruction) -> Result<Flow, Trap> {
        let acc = self.process.acc;
        let flags = self.process.flags;
        match insn.opcode {
            Opcode::Halt => Ok(Flow::Halt(insn.operand)),
            Opcode::Nop => Ok(Flow::Next),
            Opcode::Lda => {
                let v = self.operand_value(insn)?;
                self.set_acc(v);
                Ok(Flow::Next)
            }
            Opcode::Ldx => {
                self.process.x = self.operand_value(insn)?;
                Ok(Flow::Next)
            }
            Opcode::Sta => {
                let (d, off) = self.slot_address(insn)?;
                let layer = self.process.layer;
                self.store
                    .write_byte(&d, off, acc as u8, layer)
                    .map_err(|e| self.mem_trap(e, &d, off))?;
                Ok(Flow::Next)
            }
            Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor => {
                let v = self.operand_value(insn)?;
                let r = match insn.opcode {
                    Opcode::Add => acc.wrapping_add(v),
                    Opcode::Sub => acc.wrapping_sub(v),
                    Opcode::And => acc & v,
                    Opcode::Or => acc | v,
                    _ => acc ^ v,
                };
                self.set_acc(r);
                Ok(Flow::Next)
            }
            Opcode::Cmp => {
                let v = self.operand_value(insn)?;
                self.process.flags = Flags::from_value(acc.wrapping_sub(v));
                Ok(Flow::Next)
            }
            Opcode::Div => {
                let v = self.operand_value(insn)?;
                if v == 0 {
                    return Err(self.trap_here(TrapKind::DivideByZero));
                }
                self.set_acc(acc / v);
                Ok(Flow::Next)
            }
            Opcode::Jmp => self.branch(true, insn.operand),
            Opcode::Beq => self.branch(flags.zero, insn.operand),
            Opcode::Bne => self.branch(!flags.zero, insn.operand),
            Opcode::Blt => self.branch(flags.negative, insn.operand),
            Opcode::Bge => self.branch(!flags.negative, insn.operand),
            Opcode::Call => {
                let (target, entry) = self.slot_address(insn)?;
                self.call(target, entry)?;
                Ok(Flow::Jumped)
            }
            Opcode::Ret => {
                self.ret()?;
                Ok(Flow::Jumped)
            }
            Opcode::Enter => {
                let target = Layer::from_code(u64::from(insn.operand))
                    .ok_or_else(|| self.trap_here(TrapKind::IllegalOpcode))?;
                self.enter(target)?;
                Ok(Flow::Next)
            }
            Opcode::Exit => {
                self.exit()?;
                Ok(Flow::Next)
            }
            Opcode::Trap => Err(self.trap_here(TrapKind::UserTrap(insn.operand))),
            Opcode::Resume => {
                self.resume().map_err(|k| self.trap_here(k))?;
                Ok(Flow::Jumped)
            }
            Opcode::In => {
                let (v, eof) = match self.input.get(self.input_pos) {
                    Some(&b) => {
                        self.input_pos += 1;
                        (u64::from(b), false)
                    }
                    None => (0, true),
                };
                self.set_acc(v);
                self.io_event("in", v, eof);
                Ok(Flow::Next)
            }
            Opcode::Out => {
                self.output.push(acc as u8);
                self.io_event("out", acc & 0xff, false);
                Ok(Flow::Next)
            }
            Opcode::Resolve => {
                let pending = self.process.traps.last().and_then(|f| match &f.trap.kind {
                    TrapKind::LinkFault { slot, .. } => Some((f.saved.linkage, *slot)),
                    _ => None,
                });
                let Some((key, slot)) = pending else {
                    return Err(self.trap_here(TrapKind::GateSequenceFault));
                };
                if self.resolve_slot(key, slot).is_err() {
                    let site = self.process.traps.last().expect("checked").trap.site;
                    return Ok(match self.fatal(ErrorClass::LinkUnresolvable, site) {
                        Outcome::Halted(code) => Flow::Stopped(code),
                        Outcome::Running => Flow::Next,
                    });
                }
                Ok(Flow::Next)
            }
            Opcode::Seglen => {
                let d = self.fetch_slot(insn.operand)?;
                self.set_acc(d.length);
                Ok(Flow::Next)
            }
            Opcode::Alarm => {
                let site = self.site_here();
                let ev = alarm_event(self.steps, "guest", &site, insn.operand);
                self.log.log_event(ev);
                Ok(Flow::Next)
            }
            Opcode::Logev => {
                self.io_event("log", acc, false);
                Ok(Flow::Next)
            }
        }
    }
}
