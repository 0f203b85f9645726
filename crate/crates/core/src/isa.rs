//! Instruction encoding. Every instruction is one 4-byte word:
//! `opcode, mode, operand (u16 little-endian)`.

use std::fmt;

use thiserror::Error;

/// Addressing mode byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Operand is the value itself.
    Immediate = 0,
    /// Descriptor in linkage slot `operand`, offset = X.
    SlotIndexed = 1,
    /// Descriptor in linkage slot `operand`, offset = 0.
    SlotDirect = 2,
    None = 3,
}

impl Mode {
    pub fn from_byte(b: u8) -> Option<Mode> {
        match b {
            0 => Some(Mode::Immediate),
            1 => Some(Mode::SlotIndexed),
            2 => Some(Mode::SlotDirect),
            3 => Some(Mode::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Immediate => "imm",
            Mode::SlotIndexed => "slotx",
            Mode::SlotDirect => "slot",
            Mode::None => "none",
        }
    }
}

macro_rules! opcodes {
    ($($name:ident = $byte:literal, $mn:literal, [$($mode:ident),*];)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Opcode {
            $($name = $byte,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name,)*];

            pub fn from_byte(b: u8) -> Option<Opcode> {
                match b {
                    $($byte => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mn,)*
                }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s {
                    $($mn => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            /// Legal addressing modes for this opcode.
            pub fn modes(self) -> &'static [Mode] {
                match self {
                    $(Opcode::$name => &[$(Mode::$mode),*],)*
                }
            }
        }
    };
}

opcodes! {
    Halt = 0x00, "HALT", [Immediate];
    Nop = 0x01, "NOP", [None];
    Lda = 0x10, "LDA", [Immediate, SlotIndexed, SlotDirect];
    Sta = 0x11, "STA", [SlotIndexed, SlotDirect];
    Ldx = 0x12, "LDX", [Immediate, SlotIndexed, SlotDirect];
    Add = 0x20, "ADD", [Immediate, SlotIndexed, SlotDirect];
    Sub = 0x21, "SUB", [Immediate, SlotIndexed, SlotDirect];
    And = 0x22, "AND", [Immediate, SlotIndexed, SlotDirect];
    Or = 0x23, "OR", [Immediate, SlotIndexed, SlotDirect];
    Xor = 0x24, "XOR", [Immediate, SlotIndexed, SlotDirect];
    Cmp = 0x25, "CMP", [Immediate, SlotIndexed, SlotDirect];
    Div = 0x26, "DIV", [Immediate, SlotIndexed, SlotDirect];
    Jmp = 0x30, "JMP", [Immediate];
    Beq = 0x31, "BEQ", [Immediate];
    Bne = 0x32, "BNE", [Immediate];
    Blt = 0x33, "BLT", [Immediate];
    Bge = 0x34, "BGE", [Immediate];
    Call = 0x40, "CALL", [SlotDirect, SlotIndexed];
    Ret = 0x41, "RET", [None];
    Enter = 0x42, "ENTER", [Immediate];
    Exit = 0x43, "EXIT", [None];
    Trap = 0x50, "TRAP", [Immediate];
    Resume = 0x51, "RESUME", [None];
    In = 0x60, "IN", [None];
    Out = 0x61, "OUT", [None];
    Resolve = 0x70, "RESOLVE", [None];
    Seglen = 0x71, "SEGLEN", [SlotDirect];
    Alarm = 0x72, "ALARM", [Immediate];
    Logev = 0x73, "LOGEV", [None];
}

impl Opcode {
    /// Opcodes 0x70 to 0x7F run only with the Layer Register at Kernel.
    pub fn is_restricted(self) -> bool {
        is_restricted_byte(self as u8)
    }

    pub fn is_branch(self) -> bool {
        matches!(
            self,
            Opcode::Jmp | Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge
        )
    }

    /// Whether the operand names a linkage slot in the given mode.
    pub fn uses_slot(self, mode: Mode) -> bool {
        matches!(mode, Mode::SlotIndexed | Mode::SlotDirect)
    }
}

pub fn is_restricted_byte(b: u8) -> bool {
    (0x70..=0x7f).contains(&b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: Opcode,
    pub mode: Mode,
    pub operand: u16,
}

impl Instruction {
    pub fn new(opcode: Opcode, mode: Mode, operand: u16) -> Self {
        Self {
            opcode,
            mode,
            operand,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mn = self.opcode.mnemonic();
        match self.mode {
            Mode::None => f.write_str(mn),
            Mode::Immediate if self.opcode.is_branch() => write!(f, "{mn} {}", self.operand),
            Mode::Immediate if self.opcode == Opcode::Enter => {
                let layer = crate::model::Layer::from_code(u64::from(self.operand))
                    .map(|l| l.letter())
                    .unwrap_or('?');
                write!(f, "{mn} {layer}")
            }
            Mode::Immediate => write!(f, "{mn} #{}", self.operand),
            Mode::SlotDirect => write!(f, "{mn} {}", self.operand),
            Mode::SlotIndexed => write!(f, "{mn} {},X", self.operand),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal instruction word {word:02x?}")]
pub struct IllegalOpcode {
    pub word: [u8; 4],
}

pub fn decode(word: [u8; 4]) -> Result<Instruction, IllegalOpcode> {
    let illegal = IllegalOpcode { word };
    let opcode = Opcode::from_byte(word[0]).ok_or(illegal)?;
    let mode = Mode::from_byte(word[1]).ok_or(illegal)?;
    let operand = u16::from_le_bytes([word[2], word[3]]);
    if !opcode.modes().contains(&mode) {
        return Err(illegal);
    }
    let operand_ok = match (opcode, mode) {
        (_, Mode::None) => operand == 0,
        (Opcode::Enter, _) => operand <= 2,
        _ => true,
    };
    if !operand_ok {
        return Err(illegal);
    }
    Ok(Instruction {
        opcode,
        mode,
        operand,
    })
}

pub fn encode(insn: &Instruction) -> [u8; 4] {
    let [lo, hi] = insn.operand.to_le_bytes();
    [insn.opcode as u8, insn.mode as u8, lo, hi]
}

/// Whether `insn` is something [`decode`] would accept.
pub fn is_legal(insn: &Instruction) -> bool {
    decode(encode(insn)).as_ref() == Ok(insn)
}
