// x86-64 subset ISA: decoder, encoder, classification, and recognition of
// the mem_guard / cfi_guard / cfi_label pseudo-instruction sequences.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mmdsfi::isa {

enum class Reg : uint8_t {
  rax = 0, rcx, rdx, rbx, rsp, rbp, rsi, rdi,
  r8, r9, r10, r11, r12, r13, r14, r15,
};

constexpr uint8_t reg_num(Reg r) { return static_cast<uint8_t>(r); }
const char* reg_name(Reg r);
std::optional<Reg> reg_from_name(const std::string& name);

// First 4 bytes of every cfi_label: a multi-byte nop with SIB base = rsp.
constexpr uint8_t kMagic[4] = {0x0F, 0x1F, 0x84, 0x24};
constexpr size_t kCfiLabelLength = 8;

enum class InstrClass : uint8_t {
  Alu,
  MovRegImm,
  MovRegReg,
  Lea,
  Load,
  Store,
  Push,
  Pop,
  DirectJump,
  CondJump,
  DirectCall,
  IndirectJumpReg,
  IndirectCallReg,
  IndirectJumpMem,
  IndirectCallMem,
  Return,
  BndCheckLower,
  BndCheckUpper,
  CfiLabel,
  Nop,
  SyscallGate,
  Dangerous,
  VectorGather,
};

enum class AluOp : uint8_t { Add, Sub, And, Or, Xor, Cmp };
enum class Cond : uint8_t { Eq, Ne, Lt, Ge };
enum class DangerKind : uint8_t { SgxLeaf, MpxMutation, XStateRestore, SegBaseWrite };

enum class MemForm : uint8_t { BaseDisp, BaseIndexDisp, RipRelative, DirectOffset, Vsib };

struct MemOperand {
  MemForm form = MemForm::BaseDisp;
  std::optional<Reg> base;
  std::optional<Reg> index;
  uint8_t scale = 1;
  int32_t disp = 0;
  // Encoded displacement width in bytes (0, 1, or 4); preserved so that
  // re-encoding a decoded instruction reproduces its bytes exactly.
  uint8_t disp_width = 0;

  bool operator==(const MemOperand& o) const {
    return form == o.form && base == o.base && index == o.index &&
           scale == o.scale && disp == o.disp;
  }
};

struct Instruction {
  uint64_t address = 0;
  uint8_t length = 0;
  std::vector<uint8_t> raw;

  InstrClass cls = InstrClass::Nop;
  AluOp alu = AluOp::Add;
  bool alu_imm = false;  // Alu: reg,imm32 form instead of reg,reg
  Cond cond = Cond::Eq;
  DangerKind danger = DangerKind::SgxLeaf;

  Reg reg = Reg::rax;   // primary register operand (dst for mov/lea/load)
  Reg reg2 = Reg::rax;  // secondary register operand (src)
  int64_t imm = 0;      // immediate; also the 64-bit address of moffs forms
  bool has_mem = false;
  MemOperand mem;
  uint8_t bnd = 0;           // bound register 0..3
  bool bnd_mem = false;      // bndcl/bndcu operand is memory
  uint64_t rel_target = 0;   // resolved absolute code offset for rel branches
  uint8_t rel_width = 4;     // 1 (rel8 jmp) or 4 (rel32)
  uint32_t domain_id = 0;    // CfiLabel

  uint64_t end() const { return address + length; }
  bool is_direct_transfer() const {
    return cls == InstrClass::DirectJump || cls == InstrClass::CondJump ||
           cls == InstrClass::DirectCall;
  }
  bool is_register_indirect() const {
    return cls == InstrClass::IndirectJumpReg || cls == InstrClass::IndirectCallReg;
  }
  bool is_unconditional_transfer() const {
    return cls == InstrClass::DirectJump || cls == InstrClass::IndirectJumpReg ||
           cls == InstrClass::IndirectJumpMem || cls == InstrClass::Return;
  }

  bool structurally_equal(const Instruction& o) const;
};

enum class DecodeErrorKind : uint8_t { UnknownOpcode, TruncatedInstruction };

struct DecodeError {
  DecodeErrorKind kind;
  uint64_t offset;
};

using DecodeResult = std::variant<Instruction, DecodeError>;

// Decodes the instruction whose encoding begins at `offset`. Rejects any
// byte sequence not produced by encode() for a subset form, except the
// decode-only dangerous set and VEX gathers.
DecodeResult decode(std::span<const uint8_t> code, uint64_t offset);

struct EncodeError {
  std::string message;
};

// Canonical encoding; inverse of decode on all subset forms.
std::variant<std::vector<uint8_t>, EncodeError> encode(const Instruction& instr);
std::vector<uint8_t> encode_or_throw(const Instruction& instr);

// Byte-blind scan for the 4-byte MAGIC; offsets strictly increasing.
std::vector<uint64_t> scan_cfi_labels(std::span<const uint8_t> code);

struct MemGuard {
  Instruction lower, upper;
  MemOperand guarded_operand;
};
struct CfiGuard {
  Instruction load, lower, upper;
  Reg target_reg;
  Reg scratch_reg;
};
struct CfiLabelPseudo {
  Instruction instr;
  uint8_t id_field_offset = 4;  // last 4 bytes of the 8-byte encoding
};

using PseudoInstr = std::variant<MemGuard, CfiGuard, CfiLabelPseudo>;

// Matches a pseudo-instruction pattern starting at instrs[idx]:
//   MemGuard  = bndcl bnd0,m ; bndcu bnd0,m        (identical operand m)
//   CfiGuard  = mov s,[t] ; bndcl bnd1,s ; bndcu bnd1,s
//   CfiLabel  = the 8-byte MAGIC nop
std::optional<PseudoInstr> recognize_pseudo(std::span<const Instruction> instrs,
                                            size_t idx);

size_t pseudo_instr_count(const PseudoInstr& p);
uint64_t pseudo_begin(const PseudoInstr& p);
uint64_t pseudo_end(const PseudoInstr& p);

// Convenience constructors used by the instrumenter and tests.
Instruction make_nop();
Instruction make_cfi_label(uint32_t domain_id);
Instruction make_mov_reg_imm(Reg dst, int64_t imm);
Instruction make_mov_reg_reg(Reg dst, Reg src);
Instruction make_load(Reg dst, MemOperand m);
Instruction make_store(MemOperand m, Reg src);
Instruction make_lea(Reg dst, MemOperand m);
Instruction make_alu_rr(AluOp op, Reg dst, Reg src);
Instruction make_alu_ri(AluOp op, Reg dst, int32_t imm);
Instruction make_push(Reg r);
Instruction make_pop(Reg r);
Instruction make_ret();
Instruction make_jmp_rel(uint64_t target, uint8_t width = 4);
Instruction make_jcc_rel(Cond cc, uint64_t target);
Instruction make_call_rel(uint64_t target);
Instruction make_jmp_reg(Reg r);
Instruction make_call_reg(Reg r);
Instruction make_jmp_mem(MemOperand m);
Instruction make_call_mem(MemOperand m);
Instruction make_bndcl(uint8_t bnd, MemOperand m);
Instruction make_bndcu(uint8_t bnd, MemOperand m);
Instruction make_bndcl_reg(uint8_t bnd, Reg r);
Instruction make_bndcu_reg(uint8_t bnd, Reg r);
Instruction make_syscall_gate();

std::string mnemonic(const Instruction& instr);
std::string to_string(const Instruction& instr);

}  // namespace mmdsfi::isa
