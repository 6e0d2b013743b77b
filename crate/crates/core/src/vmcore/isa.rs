//! MiniRISC instruction encoding.
//!
//! Every instruction is four little-endian bytes `[op][A][B][C]`. Two derived
//! immediates exist: `imm16 = B | C << 8` and `simm8 = C as i8`.

use std::fmt;

/// Register index of the stack pointer by convention.
pub const REG_SP: u8 = 13;
/// Register index of the link register by convention.
pub const REG_LR: u8 = 14;

pub mod opcode {
    pub const HALT: u8 = 0x00;
    pub const MOVI: u8 = 0x01;
    pub const MOVHI: u8 = 0x02;
    pub const MOV: u8 = 0x03;
    pub const ADD: u8 = 0x04;
    pub const SUB: u8 = 0x05;
    pub const AND: u8 = 0x06;
    pub const OR: u8 = 0x07;
    pub const XOR: u8 = 0x08;
    pub const SHL: u8 = 0x09;
    pub const SHR: u8 = 0x0A;
    pub const ADDI: u8 = 0x0B;
    pub const LDB: u8 = 0x0C;
    pub const STB: u8 = 0x0D;
    pub const LDW: u8 = 0x0E;
    pub const STW: u8 = 0x0F;
    pub const CMP: u8 = 0x10;
    pub const B: u8 = 0x11;
    pub const CALL: u8 = 0x12;
    pub const CALLR: u8 = 0x13;
    pub const RET: u8 = 0x14;
    pub const ECALL: u8 = 0x15;
}

/// Branch condition codes for `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Al = 0,
    Eq = 1,
    Ne = 2,
    Ult = 3,
    Uge = 4,
    Slt = 5,
    Sge = 6,
}

impl Cond {
    pub fn from_code(code: u8) -> Option<Cond> {
        Some(match code {
            0 => Cond::Al,
            1 => Cond::Eq,
            2 => Cond::Ne,
            3 => Cond::Ult,
            4 => Cond::Uge,
            5 => Cond::Slt,
            6 => Cond::Sge,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Cond::Al => "AL",
            Cond::Eq => "EQ",
            Cond::Ne => "NE",
            Cond::Ult => "ULT",
            Cond::Uge => "UGE",
            Cond::Slt => "SLT",
            Cond::Sge => "SGE",
        }
    }

    pub fn from_name(name: &str) -> Option<Cond> {
        Some(match name.to_ascii_uppercase().as_str() {
            "AL" => Cond::Al,
            "EQ" => Cond::Eq,
            "NE" => Cond::Ne,
            "ULT" => Cond::Ult,
            "UGE" => Cond::Uge,
            "SLT" => Cond::Slt,
            "SGE" => Cond::Sge,
            _ => return None,
        })
    }
}

/// ALU operation selector shared by the three-register forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
}

/// A decoded instruction. Register fields are already range-checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Insn {
    Halt,
    Movi {
        rd: u8,
        imm: u16,
    },
    Movhi {
        rd: u8,
        imm: u16,
    },
    Mov {
        rd: u8,
        rs: u8,
    },
    Alu {
        op: AluOp,
        rd: u8,
        rs: u8,
        rt: u8,
    },
    Shl {
        rd: u8,
        rs: u8,
        sh: u8,
    },
    Shr {
        rd: u8,
        rs: u8,
        sh: u8,
    },
    Addi {
        rd: u8,
        rs: u8,
        imm: i8,
    },
    Ldb {
        rd: u8,
        base: u8,
        off: i8,
    },
    Stb {
        src: u8,
        base: u8,
        off: i8,
    },
    Ldw {
        rd: u8,
        base: u8,
        off: i8,
    },
    Stw {
        src: u8,
        base: u8,
        off: i8,
    },
    Cmp {
        rs: u8,
        rt: u8,
    },
    B {
        cond: Cond,
        off: i16,
    },
    Call {
        off: i16,
    },
    Callr {
        rs: u8,
    },
    Ret,
    Ecall {
        n: u8,
    },
    /// Undecodable word; faults when executed.
    Invalid(u32),
}

impl Insn {
    /// True for instructions that end a block.
    pub fn is_control_transfer(&self) -> bool {
        matches!(self, Insn::Halt | Insn::B { .. } | Insn::Call { .. } | Insn::Callr { .. } | Insn::Ret)
            || matches!(self, Insn::Invalid(_))
    }
}

fn reg(r: u8) -> Option<u8> {
    (r < 16).then_some(r)
}

/// Decodes one little-endian instruction word.
pub fn decode(word: u32) -> Insn {
    let [op, a, b, c] = word.to_le_bytes();
    let imm16 = u16::from(b) | (u16::from(c) << 8);
    let simm8 = c as i8;
    let decoded = (|| {
        Some(match op {
            opcode::HALT => Insn::Halt,
            opcode::MOVI => Insn::Movi { rd: reg(a)?, imm: imm16 },
            opcode::MOVHI => Insn::Movhi { rd: reg(a)?, imm: imm16 },
            opcode::MOV => Insn::Mov { rd: reg(a)?, rs: reg(b)? },
            opcode::ADD..=opcode::XOR => {
                let alu = match op {
                    opcode::ADD => AluOp::Add,
                    opcode::SUB => AluOp::Sub,
                    opcode::AND => AluOp::And,
                    opcode::OR => AluOp::Or,
                    _ => AluOp::Xor,
                };
                Insn::Alu { op: alu, rd: reg(a)?, rs: reg(b)?, rt: reg(c)? }
            }
            opcode::SHL if c < 32 => Insn::Shl { rd: reg(a)?, rs: reg(b)?, sh: c },
            opcode::SHR if c < 32 => Insn::Shr { rd: reg(a)?, rs: reg(b)?, sh: c },
            opcode::ADDI => Insn::Addi { rd: reg(a)?, rs: reg(b)?, imm: simm8 },
            opcode::LDB => Insn::Ldb { rd: reg(a)?, base: reg(b)?, off: simm8 },
            opcode::STB => Insn::Stb { src: reg(a)?, base: reg(b)?, off: simm8 },
            opcode::LDW => Insn::Ldw { rd: reg(a)?, base: reg(b)?, off: simm8 },
            opcode::STW => Insn::Stw { src: reg(a)?, base: reg(b)?, off: simm8 },
            opcode::CMP => Insn::Cmp { rs: reg(a)?, rt: reg(b)? },
            opcode::B => Insn::B { cond: Cond::from_code(a)?, off: imm16 as i16 },
            opcode::CALL => Insn::Call { off: imm16 as i16 },
            opcode::CALLR => Insn::Callr { rs: reg(a)? },
            opcode::RET => Insn::Ret,
            opcode::ECALL if a <= 1 => Insn::Ecall { n: a },
            _ => return None,
        })
    })();
    decoded.unwrap_or(Insn::Invalid(word))
}

fn word(op: u8, a: u8, b: u8, c: u8) -> u32 {
    u32::from_le_bytes([op, a, b, c])
}

fn imm_word(op: u8, a: u8, imm: u16) -> u32 {
    word(op, a, imm as u8, (imm >> 8) as u8)
}

/// Encodes an instruction into its 32-bit word. `decode(encode(i)) == i` for
/// every valid instruction.
pub fn encode(insn: &Insn) -> u32 {
    match *insn {
        Insn::Halt => word(opcode::HALT, 0, 0, 0),
        Insn::Movi { rd, imm } => imm_word(opcode::MOVI, rd, imm),
        Insn::Movhi { rd, imm } => imm_word(opcode::MOVHI, rd, imm),
        Insn::Mov { rd, rs } => word(opcode::MOV, rd, rs, 0),
        Insn::Alu { op, rd, rs, rt } => {
            let code = match op {
                AluOp::Add => opcode::ADD,
                AluOp::Sub => opcode::SUB,
                AluOp::And => opcode::AND,
                AluOp::Or => opcode::OR,
                AluOp::Xor => opcode::XOR,
            };
            word(code, rd, rs, rt)
        }
        Insn::Shl { rd, rs, sh } => word(opcode::SHL, rd, rs, sh),
        Insn::Shr { rd, rs, sh } => word(opcode::SHR, rd, rs, sh),
        Insn::Addi { rd, rs, imm } => word(opcode::ADDI, rd, rs, imm as u8),
        Insn::Ldb { rd, base, off } => word(opcode::LDB, rd, base, off as u8),
        Insn::Stb { src, base, off } => word(opcode::STB, src, base, off as u8),
        Insn::Ldw { rd, base, off } => word(opcode::LDW, rd, base, off as u8),
        Insn::Stw { src, base, off } => word(opcode::STW, src, base, off as u8),
        Insn::Cmp { rs, rt } => word(opcode::CMP, rs, rt, 0),
        Insn::B { cond, off } => imm_word(opcode::B, cond as u8, off as u16),
        Insn::Call { off } => imm_word(opcode::CALL, 0, off as u16),
        Insn::Callr { rs } => word(opcode::CALLR, rs, 0, 0),
        Insn::Ret => word(opcode::RET, 0, 0, 0),
        Insn::Ecall { n } => word(opcode::ECALL, n, 0, 0),
        Insn::Invalid(w) => w,
    }
}

/// Target of a pc-relative transfer located at `pc`.
pub fn branch_target(pc: u32, off: i16) -> u32 {
    pc.wrapping_add(4).wrapping_add((i32::from(off) * 4) as u32)
}

fn imm(v: u32) -> String {
    if v < 10 {
        v.to_string()
    } else {
        format!("{v:#x}")
    }
}

fn mem_operand(base: u8, off: i8) -> String {
    match off {
        0 => format!("[r{base}]"),
        o if o > 0 => format!("[r{base}+{o}]"),
        o => format!("[r{base}{o}]"),
    }
}

/// Formats an instruction as it appears in trace output.
pub struct Disasm {
    pub pc: u32,
    pub insn: Insn,
}

impl fmt::Display for Disasm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.insn {
            Insn::Halt => write!(f, "HALT"),
            Insn::Movi { rd, imm: v } => write!(f, "MOVI r{rd}, {}", imm(v.into())),
            Insn::Movhi { rd, imm: v } => write!(f, "MOVHI r{rd}, {}", imm(v.into())),
            Insn::Mov { rd, rs } => write!(f, "MOV r{rd}, r{rs}"),
            Insn::Alu { op, rd, rs, rt } => {
                let name = match op {
                    AluOp::Add => "ADD",
                    AluOp::Sub => "SUB",
                    AluOp::And => "AND",
                    AluOp::Or => "OR",
                    AluOp::Xor => "XOR",
                };
                write!(f, "{name} r{rd}, r{rs}, r{rt}")
            }
            Insn::Shl { rd, rs, sh } => write!(f, "SHL r{rd}, r{rs}, {sh}"),
            Insn::Shr { rd, rs, sh } => write!(f, "SHR r{rd}, r{rs}, {sh}"),
            Insn::Addi { rd, rs, imm } => write!(f, "ADDI r{rd}, r{rs}, {imm}"),
            Insn::Ldb { rd, base, off } => write!(f, "LDB r{rd}, {}", mem_operand(base, off)),
            Insn::Stb { src, base, off } => write!(f, "STB r{src}, {}", mem_operand(base, off)),
            Insn::Ldw { rd, base, off } => write!(f, "LDW r{rd}, {}", mem_operand(base, off)),
            Insn::Stw { src, base, off } => write!(f, "STW r{src}, {}", mem_operand(base, off)),
            Insn::Cmp { rs, rt } => write!(f, "CMP r{rs}, r{rt}"),
            Insn::B { cond, off } => {
                write!(f, "B {}, {:#010x}", cond.name(), branch_target(self.pc, off))
            }
            Insn::Call { off } => write!(f, "CALL {:#010x}", branch_target(self.pc, off)),
            Insn::Callr { rs } => write!(f, "CALLR r{rs}"),
            Insn::Ret => write!(f, "RET"),
            Insn::Ecall { n } => write!(f, "ECALL {n}"),
            Insn::Invalid(w) => write!(f, ".word {w:#010x}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movi_halt_bytes() {
        assert_eq!(encode(&Insn::Movi { rd: 1, imm: 5 }).to_le_bytes(), [1, 1, 5, 0]);
        assert_eq!(encode(&Insn::Halt).to_le_bytes(), [0, 0, 0, 0]);
    }

    #[test]
    fn bad_fields_decode_invalid() {
        // register 16
        assert!(matches!(decode(u32::from_le_bytes([0x01, 16, 0, 0])), Insn::Invalid(_)));
        // shift of 32
        assert!(matches!(decode(u32::from_le_bytes([0x09, 1, 1, 32])), Insn::Invalid(_)));
        // cond 7
        assert!(matches!(decode(u32::from_le_bytes([0x11, 7, 0, 0])), Insn::Invalid(_)));
        assert!(matches!(decode(u32::from_le_bytes([0x16, 0, 0, 0])), Insn::Invalid(_)));
        assert!(matches!(decode(u32::from_le_bytes([0x15, 2, 0, 0])), Insn::Invalid(_)));
    }

    #[test]
    fn decode_encode_roundtrip_all_words_sampled() {
        for op in 0u8..=0x16 {
            for a in [0u8, 1, 6, 15, 16] {
                for b in [0u8, 3, 0x80, 0xFF] {
                    for c in [0u8, 1, 31, 32, 0x7F, 0xFF] {
                        let w = u32::from_le_bytes([op, a, b, c]);
                        let i = decode(w);
                        if !matches!(i, Insn::Invalid(_)) {
                            assert_eq!(decode(encode(&i)), i, "word {w:#x}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn branch_target_math() {
        assert_eq!(branch_target(0, -1), 0);
        assert_eq!(branch_target(0x10, 2), 0x1C);
    }

    #[test]
    fn disasm_format() {
        let d = Disasm { pc: 0, insn: Insn::Movi { rd: 1, imm: 5 } };
        assert_eq!(d.to_string(), "MOVI r1, 5");
        let d = Disasm { pc: 0, insn: Insn::Stb { src: 3, base: 2, off: -4 } };
        assert_eq!(d.to_string(), "STB r3, [r2-4]");
    }
}
