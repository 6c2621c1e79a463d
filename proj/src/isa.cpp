#include "mmdsfi/isa.hpp"

#include <array>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace mmdsfi::isa {

namespace {

constexpr uint8_t kDispAuto = 255;

const char* kRegNames[16] = {
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15",
};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; i++) out.push_back(uint8_t(v >> (8 * i)));
}

uint32_t get_u32(std::span<const uint8_t> b, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(b[off + i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::span<const uint8_t> b, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= uint64_t(b[off + i]) << (8 * i);
  return v;
}

bool fits_i8(int64_t v) { return v >= -128 && v <= 127; }
bool fits_i32(int64_t v) { return v >= INT32_MIN && v <= INT32_MAX; }

uint8_t pick_disp_width(const MemOperand& m) {
  if (m.disp_width != kDispAuto) return m.disp_width;
  if (m.form == MemForm::RipRelative) return 4;
  if (m.disp == 0 && m.base && *m.base != Reg::rbp && *m.base != Reg::r13)
    return 0;
  return fits_i8(m.disp) ? 1 : 4;
}

// Emits ModRM (+SIB, +disp) for a memory operand; REX bits must already
// reflect base/index. reg_field is the 3-bit reg value.
void emit_modrm_mem(std::vector<uint8_t>& out, uint8_t reg_field,
                    const MemOperand& m) {
  uint8_t dw = pick_disp_width(m);
  if (m.form == MemForm::RipRelative) {
    out.push_back(uint8_t(0x00 | (reg_field << 3) | 0x05));
    put_u32(out, uint32_t(m.disp));
    return;
  }
  uint8_t mod = dw == 0 ? 0 : (dw == 1 ? 1 : 2);
  uint8_t base = reg_num(*m.base) & 7;
  bool need_sib = m.index.has_value() || (reg_num(*m.base) & 7) == 4;
  if (!need_sib) {
    out.push_back(uint8_t((mod << 6) | (reg_field << 3) | base));
  } else {
    out.push_back(uint8_t((mod << 6) | (reg_field << 3) | 4));
    uint8_t ss = m.scale == 1 ? 0 : m.scale == 2 ? 1 : m.scale == 4 ? 2 : 3;
    uint8_t idx = m.index ? (reg_num(*m.index) & 7) : 4;
    out.push_back(uint8_t((ss << 6) | (idx << 3) | base));
  }
  if (dw == 1)
    out.push_back(uint8_t(int8_t(m.disp)));
  else if (dw == 4)
    put_u32(out, uint32_t(m.disp));
}

uint8_t mem_rex_bits(const MemOperand& m) {
  uint8_t rex = 0;
  if (m.base && reg_num(*m.base) >= 8) rex |= 1;           // REX.B
  if (m.index && reg_num(*m.index) >= 8) rex |= 2;         // REX.X
  return rex;
}

struct ModrmMem {
  MemOperand mem;
  size_t len = 0;  // bytes consumed including modrm
};

struct ModrmParsed {
  uint8_t reg_field = 0;  // with REX.R applied
  bool is_reg = false;
  Reg rm_reg = Reg::rax;
  ModrmMem mem;
};

// Standard x86-64 ModRM/SIB/disp rules for the subset forms.
// Returns nullopt on truncation or a form outside the subset
// (SIB with no base, vector index without VSIB context).
std::optional<ModrmParsed> parse_modrm(std::span<const uint8_t> code,
                                       size_t pos, uint8_t rex) {
  if (pos >= code.size()) return std::nullopt;
  uint8_t modrm = code[pos];
  uint8_t mod = modrm >> 6, reg = (modrm >> 3) & 7, rm = modrm & 7;
  ModrmParsed out;
  out.reg_field = uint8_t(reg | ((rex & 4) ? 8 : 0));
  if (mod == 3) {
    out.is_reg = true;
    out.rm_reg = Reg(rm | ((rex & 1) ? 8 : 0));
    out.mem.len = 1;
    return out;
  }
  MemOperand m;
  size_t p = pos + 1;
  uint8_t disp_w = mod == 1 ? 1 : mod == 2 ? 4 : 0;
  if (rm == 4) {
    if (p >= code.size()) return std::nullopt;
    uint8_t sib = code[p++];
    uint8_t ss = sib >> 6, idx = (sib >> 3) & 7, base = sib & 7;
    uint8_t idx_full = uint8_t(idx | ((rex & 2) ? 8 : 0));
    if (base == 5 && mod == 0) return std::nullopt;  // absolute SIB: not in subset
    m.base = Reg(base | ((rex & 1) ? 8 : 0));
    if (!(idx == 4 && !(rex & 2))) {
      m.index = Reg(idx_full);
      if (*m.index == Reg::rsp) return std::nullopt;
      m.scale = uint8_t(1 << ss);
      m.form = MemForm::BaseIndexDisp;
    } else {
      m.form = MemForm::BaseDisp;
    }
  } else if (rm == 5 && mod == 0) {
    m.form = MemForm::RipRelative;
    disp_w = 4;
  } else {
    m.base = Reg(rm | ((rex & 1) ? 8 : 0));
    m.form = MemForm::BaseDisp;
  }
  if (p + disp_w > code.size()) return std::nullopt;
  if (disp_w == 1)
    m.disp = int8_t(code[p]);
  else if (disp_w == 4)
    m.disp = int32_t(get_u32(code, p));
  p += disp_w;
  m.disp_width = disp_w;
  out.mem.mem = m;
  out.mem.len = p - pos;
  return out;
}

DecodeError err(DecodeErrorKind k, uint64_t off) { return DecodeError{k, off}; }

}  // namespace

const char* reg_name(Reg r) { return kRegNames[reg_num(r)]; }

std::optional<Reg> reg_from_name(const std::string& name) {
  for (int i = 0; i < 16; i++)
    if (name == kRegNames[i]) return Reg(uint8_t(i));
  return std::nullopt;
}

bool Instruction::structurally_equal(const Instruction& o) const {
  if (cls != o.cls) return false;
  switch (cls) {
    case InstrClass::Alu:
      if (alu != o.alu || alu_imm != o.alu_imm || reg != o.reg) return false;
      return alu_imm ? imm == o.imm : reg2 == o.reg2;
    case InstrClass::MovRegImm:
      return reg == o.reg && imm == o.imm;
    case InstrClass::MovRegReg:
      return reg == o.reg && reg2 == o.reg2;
    case InstrClass::Lea:
    case InstrClass::Load:
      if (mem.form == MemForm::DirectOffset)
        return reg == o.reg && o.mem.form == MemForm::DirectOffset && imm == o.imm;
      return reg == o.reg && mem == o.mem;
    case InstrClass::Store:
      if (mem.form == MemForm::DirectOffset)
        return reg2 == o.reg2 && o.mem.form == MemForm::DirectOffset && imm == o.imm;
      return reg2 == o.reg2 && mem == o.mem;
    case InstrClass::Push:
    case InstrClass::Pop:
    case InstrClass::IndirectJumpReg:
    case InstrClass::IndirectCallReg:
      return reg == o.reg;
    case InstrClass::DirectJump:
    case InstrClass::DirectCall:
      return rel_target == o.rel_target;
    case InstrClass::CondJump:
      return cond == o.cond && rel_target == o.rel_target;
    case InstrClass::IndirectJumpMem:
    case InstrClass::IndirectCallMem:
      return mem == o.mem;
    case InstrClass::BndCheckLower:
    case InstrClass::BndCheckUpper:
      if (bnd != o.bnd || bnd_mem != o.bnd_mem) return false;
      return bnd_mem ? mem == o.mem : reg == o.reg;
    case InstrClass::CfiLabel:
      return domain_id == o.domain_id;
    case InstrClass::Dangerous:
      return danger == o.danger && raw == o.raw;
    case InstrClass::VectorGather:
      return raw == o.raw;
    default:
      return true;
  }
}

std::variant<std::vector<uint8_t>, EncodeError> encode(const Instruction& in) {
  std::vector<uint8_t> out;
  auto rexw = [&](uint8_t extra) { out.push_back(uint8_t(0x48 | extra)); };
  auto rex_opt = [&](uint8_t bits) {
    if (bits) out.push_back(uint8_t(0x40 | bits));
  };

  switch (in.cls) {
    case InstrClass::Nop:
      if (in.raw.size() > 1) return in.raw;  // multi-byte nop family: decode-only
      out.push_back(0x90);
      break;
    case InstrClass::CfiLabel:
      out.assign(kMagic, kMagic + 4);
      put_u32(out, in.domain_id);
      break;
    case InstrClass::Return:
      out.push_back(0xC3);
      break;
    case InstrClass::SyscallGate:
      out.push_back(0x0F);
      out.push_back(0x05);
      break;
    case InstrClass::MovRegImm:
      rexw(reg_num(in.reg) >= 8 ? 1 : 0);
      out.push_back(uint8_t(0xB8 + (reg_num(in.reg) & 7)));
      put_u64(out, uint64_t(in.imm));
      break;
    case InstrClass::MovRegReg:
      rexw(uint8_t((reg_num(in.reg) >= 8 ? 1 : 0) | (reg_num(in.reg2) >= 8 ? 4 : 0)));
      out.push_back(0x89);
      out.push_back(uint8_t(0xC0 | ((reg_num(in.reg2) & 7) << 3) | (reg_num(in.reg) & 7)));
      break;
    case InstrClass::Load:
    case InstrClass::Store: {
      bool load = in.cls == InstrClass::Load;
      Reg data = load ? in.reg : in.reg2;
      if (in.mem.form == MemForm::DirectOffset) {
        if (data != Reg::rax) return EncodeError{"moffs forms require rax"};
        out.push_back(0x48);
        out.push_back(load ? 0xA1 : 0xA3);
        put_u64(out, uint64_t(in.imm));
        break;
      }
      rexw(uint8_t(mem_rex_bits(in.mem) | (reg_num(data) >= 8 ? 4 : 0)));
      out.push_back(load ? 0x8B : 0x89);
      emit_modrm_mem(out, reg_num(data) & 7, in.mem);
      break;
    }
    case InstrClass::Lea:
      if (in.mem.form == MemForm::DirectOffset)
        return EncodeError{"lea requires a modrm memory form"};
      rexw(uint8_t(mem_rex_bits(in.mem) | (reg_num(in.reg) >= 8 ? 4 : 0)));
      out.push_back(0x8D);
      emit_modrm_mem(out, reg_num(in.reg) & 7, in.mem);
      break;
    case InstrClass::Alu: {
      if (in.alu_imm) {
        if (in.alu != AluOp::Add && in.alu != AluOp::Sub)
          return EncodeError{"imm form exists only for add/sub"};
        if (!fits_i32(in.imm)) return EncodeError{"alu immediate exceeds 32 bits"};
        rexw(reg_num(in.reg) >= 8 ? 1 : 0);
        out.push_back(0x81);
        uint8_t ext = in.alu == AluOp::Add ? 0 : 5;
        out.push_back(uint8_t(0xC0 | (ext << 3) | (reg_num(in.reg) & 7)));
        put_u32(out, uint32_t(int32_t(in.imm)));
      } else {
        static constexpr uint8_t ops[] = {0x01, 0x29, 0x21, 0x09, 0x31, 0x39};
        rexw(uint8_t((reg_num(in.reg) >= 8 ? 1 : 0) | (reg_num(in.reg2) >= 8 ? 4 : 0)));
        out.push_back(ops[size_t(in.alu)]);
        out.push_back(uint8_t(0xC0 | ((reg_num(in.reg2) & 7) << 3) | (reg_num(in.reg) & 7)));
      }
      break;
    }
    case InstrClass::Push:
    case InstrClass::Pop:
      rex_opt(reg_num(in.reg) >= 8 ? 1 : 0);
      out.push_back(uint8_t((in.cls == InstrClass::Push ? 0x50 : 0x58) + (reg_num(in.reg) & 7)));
      break;
    case InstrClass::DirectJump: {
      size_t len = in.rel_width == 1 ? 2 : 5;
      int64_t disp = int64_t(in.rel_target) - int64_t(in.address + len);
      if (in.rel_width == 1) {
        if (!fits_i8(disp)) return EncodeError{"rel8 target out of range"};
        out.push_back(0xEB);
        out.push_back(uint8_t(int8_t(disp)));
      } else {
        if (!fits_i32(disp)) return EncodeError{"rel32 target out of range"};
        out.push_back(0xE9);
        put_u32(out, uint32_t(int32_t(disp)));
      }
      break;
    }
    case InstrClass::CondJump: {
      int64_t disp = int64_t(in.rel_target) - int64_t(in.address + 6);
      if (!fits_i32(disp)) return EncodeError{"rel32 target out of range"};
      static constexpr uint8_t cc[] = {0x84, 0x85, 0x8C, 0x8D};
      out.push_back(0x0F);
      out.push_back(cc[size_t(in.cond)]);
      put_u32(out, uint32_t(int32_t(disp)));
      break;
    }
    case InstrClass::DirectCall: {
      int64_t disp = int64_t(in.rel_target) - int64_t(in.address + 5);
      if (!fits_i32(disp)) return EncodeError{"rel32 target out of range"};
      out.push_back(0xE8);
      put_u32(out, uint32_t(int32_t(disp)));
      break;
    }
    case InstrClass::IndirectJumpReg:
    case InstrClass::IndirectCallReg:
      rex_opt(reg_num(in.reg) >= 8 ? 1 : 0);
      out.push_back(0xFF);
      out.push_back(uint8_t(0xC0 | ((in.cls == InstrClass::IndirectJumpReg ? 4 : 2) << 3) |
                            (reg_num(in.reg) & 7)));
      break;
    case InstrClass::IndirectJumpMem:
    case InstrClass::IndirectCallMem:
      rex_opt(mem_rex_bits(in.mem));
      out.push_back(0xFF);
      emit_modrm_mem(out, in.cls == InstrClass::IndirectJumpMem ? 4 : 2, in.mem);
      break;
    case InstrClass::BndCheckLower:
    case InstrClass::BndCheckUpper:
      out.push_back(in.cls == InstrClass::BndCheckLower ? 0xF3 : 0xF2);
      if (in.bnd_mem) {
        rex_opt(mem_rex_bits(in.mem));
        out.push_back(0x0F);
        out.push_back(0x1A);
        emit_modrm_mem(out, in.bnd, in.mem);
      } else {
        rex_opt(reg_num(in.reg) >= 8 ? 1 : 0);
        out.push_back(0x0F);
        out.push_back(0x1A);
        out.push_back(uint8_t(0xC0 | (in.bnd << 3) | (reg_num(in.reg) & 7)));
      }
      break;
    case InstrClass::Dangerous:
    case InstrClass::VectorGather:
      if (in.raw.empty()) return EncodeError{"decode-only instruction without raw bytes"};
      return in.raw;
  }
  return out;
}

std::vector<uint8_t> encode_or_throw(const Instruction& instr) {
  auto r = encode(instr);
  if (auto* e = std::get_if<EncodeError>(&r))
    throw std::runtime_error("encode: " + e->message);
  return std::get<std::vector<uint8_t>>(r);
}

namespace {

// Fills raw/length and verifies the parsed structure re-encodes to the
// exact input bytes, rejecting non-canonical encodings.
DecodeResult finish(Instruction in, std::span<const uint8_t> code,
                    uint64_t offset, size_t len, bool check_canonical = true) {
  if (offset + len > code.size())
    return err(DecodeErrorKind::TruncatedInstruction, offset);
  in.address = offset;
  in.length = uint8_t(len);
  in.raw.assign(code.begin() + offset, code.begin() + offset + len);
  if (check_canonical) {
    auto enc = encode(in);
    auto* bytes = std::get_if<std::vector<uint8_t>>(&enc);
    if (!bytes || *bytes != in.raw)
      return err(DecodeErrorKind::UnknownOpcode, offset);
  }
  return in;
}

}  // namespace

DecodeResult decode(std::span<const uint8_t> code, uint64_t offset) {
  if (offset >= code.size())
    return err(DecodeErrorKind::TruncatedInstruction, offset);
  std::span<const uint8_t> b = code;
  size_t p = offset;

  // cfi_label takes precedence over the generic multi-byte nop family.
  if (b.size() - p >= 4 && std::memcmp(&b[p], kMagic, 4) == 0) {
    if (b.size() - p < kCfiLabelLength)
      return err(DecodeErrorKind::TruncatedInstruction, offset);
    Instruction in;
    in.cls = InstrClass::CfiLabel;
    in.domain_id = get_u32(b, p + 4);
    return finish(in, code, offset, kCfiLabelLength);
  }

  bool p66 = false, pf2 = false, pf3 = false;
  while (p < b.size()) {
    if (b[p] == 0x66 && !p66 && !pf2 && !pf3) { p66 = true; p++; }
    else if (b[p] == 0xF2 && !p66 && !pf2 && !pf3) { pf2 = true; p++; }
    else if (b[p] == 0xF3 && !p66 && !pf2 && !pf3) { pf3 = true; p++; }
    else break;
  }
  uint8_t rex = 0;
  if (p < b.size() && (b[p] & 0xF0) == 0x40) rex = b[p++];
  if (p >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
  uint8_t op = b[p++];
  bool w = (rex & 8) != 0;
  auto rm_reg_ext = [&](uint8_t low3) { return Reg(low3 | ((rex & 1) ? 8 : 0)); };

  Instruction in;

  // VEX prefixes: recognized only far enough to spot a VSIB memory form.
  if (!p66 && !pf2 && !pf3 && !rex && (op == 0xC4 || op == 0xC5)) {
    size_t hdr = op == 0xC4 ? 3 : 2;         // VEX bytes incl. C4/C5
    size_t mpos = offset + hdr + 1;          // after opcode byte
    if (mpos >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
    uint8_t modrm = b[mpos];
    if ((modrm >> 6) == 3 || (modrm & 7) != 4)
      return err(DecodeErrorKind::UnknownOpcode, offset);
    size_t len = hdr + 1 + 2;  // header, opcode, modrm, sib
    if (mpos + 1 >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
    uint8_t sib = b[mpos + 1];
    uint8_t mod = modrm >> 6;
    if (mod == 1) len += 1;
    else if (mod == 2 || (mod == 0 && (sib & 7) == 5)) len += 4;
    in.cls = InstrClass::VectorGather;
    in.has_mem = true;
    in.mem.form = MemForm::Vsib;
    return finish(in, code, offset, len, false);
  }

  switch (op) {
    case 0x90:
      if (p66 || pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = InstrClass::Nop;
      return finish(in, code, offset, 1);
    case 0xC3:
      if (p66 || pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = InstrClass::Return;
      return finish(in, code, offset, 1);
    case 0xEB: case 0xE9: case 0xE8: {
      if (p66 || pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      size_t len = op == 0xEB ? 2 : 5;
      if (offset + len > b.size())
        return err(DecodeErrorKind::TruncatedInstruction, offset);
      int64_t disp = op == 0xEB ? int8_t(b[p]) : int32_t(get_u32(b, p));
      in.cls = op == 0xE8 ? InstrClass::DirectCall : InstrClass::DirectJump;
      in.rel_width = op == 0xEB ? 1 : 4;
      in.rel_target = uint64_t(int64_t(offset) + int64_t(len) + disp);
      return finish(in, code, offset, len);
    }
    case 0xB8: case 0xB9: case 0xBA: case 0xBB:
    case 0xBC: case 0xBD: case 0xBE: case 0xBF: {
      if (!w || p66 || pf2 || pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (b.size() - p < 8) return err(DecodeErrorKind::TruncatedInstruction, offset);
      in.cls = InstrClass::MovRegImm;
      in.reg = rm_reg_ext(uint8_t(op - 0xB8));
      in.imm = int64_t(get_u64(b, p));
      return finish(in, code, offset, p - offset + 8);
    }
    case 0xA1: case 0xA3: {
      if (!w || p66 || pf2 || pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (b.size() - p < 8) return err(DecodeErrorKind::TruncatedInstruction, offset);
      in.cls = op == 0xA1 ? InstrClass::Load : InstrClass::Store;
      if (op == 0xA1) in.reg = Reg::rax; else in.reg2 = Reg::rax;
      in.has_mem = true;
      in.mem.form = MemForm::DirectOffset;
      in.imm = int64_t(get_u64(b, p));
      return finish(in, code, offset, p - offset + 8);
    }
    case 0x89: case 0x8B: case 0x8D: {
      if (!w || p66 || pf2 || pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      auto m = parse_modrm(b, p, rex);
      if (!m) return err(DecodeErrorKind::UnknownOpcode, offset);
      Reg data = Reg(m->reg_field);
      if (m->is_reg) {
        if (op != 0x89) return err(DecodeErrorKind::UnknownOpcode, offset);
        in.cls = InstrClass::MovRegReg;
        in.reg = m->rm_reg;
        in.reg2 = data;
      } else {
        in.cls = op == 0x89 ? InstrClass::Store
               : op == 0x8B ? InstrClass::Load : InstrClass::Lea;
        if (op == 0x89) in.reg2 = data; else in.reg = data;
        in.has_mem = true;
        in.mem = m->mem.mem;
      }
      return finish(in, code, offset, p - offset + m->mem.len);
    }
    case 0x81: {
      if (!w || p66 || pf2 || pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (p >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
      uint8_t modrm = b[p];
      if ((modrm >> 6) != 3) return err(DecodeErrorKind::UnknownOpcode, offset);
      uint8_t ext = (modrm >> 3) & 7;
      if (ext != 0 && ext != 5) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (b.size() - (p + 1) < 4) return err(DecodeErrorKind::TruncatedInstruction, offset);
      in.cls = InstrClass::Alu;
      in.alu = ext == 0 ? AluOp::Add : AluOp::Sub;
      in.alu_imm = true;
      in.reg = rm_reg_ext(modrm & 7);
      in.imm = int32_t(get_u32(b, p + 1));
      return finish(in, code, offset, p + 5 - offset);
    }
    case 0x01: case 0x29: case 0x21: case 0x09: case 0x31: case 0x39: {
      if (!w || p66 || pf2 || pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (p >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
      uint8_t modrm = b[p];
      if ((modrm >> 6) != 3) return err(DecodeErrorKind::UnknownOpcode, offset);
      static constexpr std::pair<uint8_t, AluOp> map[] = {
          {0x01, AluOp::Add}, {0x29, AluOp::Sub}, {0x21, AluOp::And},
          {0x09, AluOp::Or},  {0x31, AluOp::Xor}, {0x39, AluOp::Cmp}};
      for (auto [o, a] : map)
        if (o == op) in.alu = a;
      in.cls = InstrClass::Alu;
      in.reg = rm_reg_ext(modrm & 7);
      in.reg2 = Reg(uint8_t(((modrm >> 3) & 7) | ((rex & 4) ? 8 : 0)));
      return finish(in, code, offset, p + 1 - offset);
    }
    case 0xFF: {
      if (p66 || pf2 || pf3 || w) return err(DecodeErrorKind::UnknownOpcode, offset);
      auto m = parse_modrm(b, p, rex);
      if (!m) return err(DecodeErrorKind::UnknownOpcode, offset);
      uint8_t ext = uint8_t(m->reg_field & 7);
      if (ext != 4 && ext != 2) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (m->is_reg) {
        in.cls = ext == 4 ? InstrClass::IndirectJumpReg : InstrClass::IndirectCallReg;
        in.reg = m->rm_reg;
      } else {
        in.cls = ext == 4 ? InstrClass::IndirectJumpMem : InstrClass::IndirectCallMem;
        in.has_mem = true;
        in.mem = m->mem.mem;
      }
      return finish(in, code, offset, p - offset + m->mem.len);
    }
    case 0x50: case 0x51: case 0x52: case 0x53:
    case 0x54: case 0x55: case 0x56: case 0x57:
    case 0x58: case 0x59: case 0x5A: case 0x5B:
    case 0x5C: case 0x5D: case 0x5E: case 0x5F: {
      if (p66 || pf2 || pf3 || (rex && rex != 0x41))
        return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = op < 0x58 ? InstrClass::Push : InstrClass::Pop;
      in.reg = rm_reg_ext(uint8_t(op & 7));
      return finish(in, code, offset, p - offset);
    }
    case 0x0F:
      break;  // two-byte opcodes handled below
    default:
      return err(DecodeErrorKind::UnknownOpcode, offset);
  }

  // 0F-prefixed opcodes.
  if (p >= b.size()) return err(DecodeErrorKind::TruncatedInstruction, offset);
  uint8_t op2 = b[p++];
  switch (op2) {
    case 0x05:
      if (p66 || pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = InstrClass::SyscallGate;
      return finish(in, code, offset, p - offset);
    case 0x01:
      if (p < b.size() && b[p] == 0xD7 && !p66 && !pf2 && !pf3 && !rex) {
        in.cls = InstrClass::Dangerous;
        in.danger = DangerKind::SgxLeaf;
        return finish(in, code, offset, p + 1 - offset, false);
      }
      return err(DecodeErrorKind::UnknownOpcode, offset);
    case 0x84: case 0x85: case 0x8C: case 0x8D: {
      if (p66 || pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (b.size() - p < 4) return err(DecodeErrorKind::TruncatedInstruction, offset);
      in.cls = InstrClass::CondJump;
      in.cond = op2 == 0x84 ? Cond::Eq : op2 == 0x85 ? Cond::Ne
              : op2 == 0x8C ? Cond::Lt : Cond::Ge;
      int64_t disp = int32_t(get_u32(b, p));
      size_t len = p + 4 - offset;
      in.rel_target = uint64_t(int64_t(offset) + int64_t(len) + disp);
      return finish(in, code, offset, len);
    }
    case 0x1F: {
      // nop r/m32 family (reg field 0); MAGIC was already peeled off above.
      if (pf2 || pf3 || rex) return err(DecodeErrorKind::UnknownOpcode, offset);
      auto m = parse_modrm(b, p, 0);
      if (!m || (m->reg_field & 7) != 0)
        return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = InstrClass::Nop;
      return finish(in, code, offset, p - offset + m->mem.len, false);
    }
    case 0x1A: case 0x1B: {
      if (op2 == 0x1B) {
        if (!pf3 || (rex & 0x0C)) return err(DecodeErrorKind::UnknownOpcode, offset);
        auto m = parse_modrm(b, p, rex);
        if (!m || m->is_reg) return err(DecodeErrorKind::UnknownOpcode, offset);
        in.cls = InstrClass::Dangerous;
        in.danger = DangerKind::MpxMutation;  // bndmk
        return finish(in, code, offset, p - offset + m->mem.len, false);
      }
      if (p66) {
        auto m = parse_modrm(b, p, rex);
        if (!m) return err(DecodeErrorKind::UnknownOpcode, offset);
        in.cls = InstrClass::Dangerous;
        in.danger = DangerKind::MpxMutation;  // bndmov
        return finish(in, code, offset, p - offset + m->mem.len, false);
      }
      if (!pf2 && !pf3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (rex & 0x0C) return err(DecodeErrorKind::UnknownOpcode, offset);
      auto m = parse_modrm(b, p, rex);
      if (!m) return err(DecodeErrorKind::UnknownOpcode, offset);
      in.cls = pf3 ? InstrClass::BndCheckLower : InstrClass::BndCheckUpper;
      in.bnd = uint8_t(m->reg_field & 3);
      if (m->reg_field > 3) return err(DecodeErrorKind::UnknownOpcode, offset);
      if (m->is_reg) {
        in.bnd_mem = false;
        in.reg = m->rm_reg;
      } else {
        in.bnd_mem = true;
        in.has_mem = true;
        in.mem = m->mem.mem;
      }
      return finish(in, code, offset, p - offset + m->mem.len);
    }
    case 0xAE: {
      auto m = parse_modrm(b, p, rex);
      if (!m) return err(DecodeErrorKind::UnknownOpcode, offset);
      uint8_t ext = uint8_t(m->reg_field & 7);
      if (pf3 && m->is_reg && (ext == 2 || ext == 3)) {
        in.cls = InstrClass::Dangerous;
        in.danger = DangerKind::SegBaseWrite;  // wrfsbase / wrgsbase
        return finish(in, code, offset, p - offset + m->mem.len, false);
      }
      if (!pf3 && !pf2 && !p66 && !m->is_reg && ext == 5) {
        in.cls = InstrClass::Dangerous;
        in.danger = DangerKind::XStateRestore;  // xrstor
        return finish(in, code, offset, p - offset + m->mem.len, false);
      }
      return err(DecodeErrorKind::UnknownOpcode, offset);
    }
    default:
      return err(DecodeErrorKind::UnknownOpcode, offset);
  }
  return err(DecodeErrorKind::UnknownOpcode, offset);
}

std::vector<uint64_t> scan_cfi_labels(std::span<const uint8_t> code) {
  std::vector<uint64_t> out;
  if (code.size() < 4) return out;
  for (size_t i = 0; i + 4 <= code.size(); i++)
    if (std::memcmp(&code[i], kMagic, 4) == 0) out.push_back(i);
  return out;
}

std::optional<PseudoInstr> recognize_pseudo(std::span<const Instruction> instrs,
                                            size_t idx) {
  if (idx >= instrs.size()) return std::nullopt;
  const Instruction& a = instrs[idx];
  if (a.cls == InstrClass::CfiLabel)
    return PseudoInstr{CfiLabelPseudo{a, 4}};
  if (a.cls == InstrClass::BndCheckLower && a.bnd == 0 && a.bnd_mem &&
      idx + 1 < instrs.size()) {
    const Instruction& u = instrs[idx + 1];
    if (u.cls == InstrClass::BndCheckUpper && u.bnd == 0 && u.bnd_mem &&
        u.mem == a.mem)
      return PseudoInstr{MemGuard{a, u, a.mem}};
  }
  if (a.cls == InstrClass::Load && a.has_mem &&
      a.mem.form == MemForm::BaseDisp && !a.mem.index && a.mem.disp == 0 &&
      idx + 2 < instrs.size()) {
    const Instruction& l = instrs[idx + 1];
    const Instruction& u = instrs[idx + 2];
    if (l.cls == InstrClass::BndCheckLower && l.bnd == 1 && !l.bnd_mem &&
        l.reg == a.reg && u.cls == InstrClass::BndCheckUpper && u.bnd == 1 &&
        !u.bnd_mem && u.reg == a.reg)
      return PseudoInstr{CfiGuard{a, l, u, *a.mem.base, a.reg}};
  }
  return std::nullopt;
}

size_t pseudo_instr_count(const PseudoInstr& p) {
  if (std::holds_alternative<CfiLabelPseudo>(p)) return 1;
  if (std::holds_alternative<MemGuard>(p)) return 2;
  return 3;
}

uint64_t pseudo_begin(const PseudoInstr& p) {
  if (auto* l = std::get_if<CfiLabelPseudo>(&p)) return l->instr.address;
  if (auto* m = std::get_if<MemGuard>(&p)) return m->lower.address;
  return std::get<CfiGuard>(p).load.address;
}

uint64_t pseudo_end(const PseudoInstr& p) {
  if (auto* l = std::get_if<CfiLabelPseudo>(&p)) return l->instr.end();
  if (auto* m = std::get_if<MemGuard>(&p)) return m->upper.end();
  return std::get<CfiGuard>(p).upper.end();
}

namespace {
Instruction base(InstrClass c) {
  Instruction in;
  in.cls = c;
  in.mem.disp_width = kDispAuto;
  return in;
}
MemOperand auto_width(MemOperand m) {
  if (m.disp_width == 0) m.disp_width = kDispAuto;
  return m;
}
}  // namespace

Instruction make_nop() { return base(InstrClass::Nop); }
Instruction make_cfi_label(uint32_t id) {
  auto in = base(InstrClass::CfiLabel);
  in.domain_id = id;
  return in;
}
Instruction make_mov_reg_imm(Reg dst, int64_t imm) {
  auto in = base(InstrClass::MovRegImm);
  in.reg = dst;
  in.imm = imm;
  return in;
}
Instruction make_mov_reg_reg(Reg dst, Reg src) {
  auto in = base(InstrClass::MovRegReg);
  in.reg = dst;
  in.reg2 = src;
  return in;
}
Instruction make_load(Reg dst, MemOperand m) {
  auto in = base(InstrClass::Load);
  in.reg = dst;
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_store(MemOperand m, Reg src) {
  auto in = base(InstrClass::Store);
  in.reg2 = src;
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_lea(Reg dst, MemOperand m) {
  auto in = base(InstrClass::Lea);
  in.reg = dst;
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_alu_rr(AluOp op, Reg dst, Reg src) {
  auto in = base(InstrClass::Alu);
  in.alu = op;
  in.reg = dst;
  in.reg2 = src;
  return in;
}
Instruction make_alu_ri(AluOp op, Reg dst, int32_t imm) {
  auto in = base(InstrClass::Alu);
  in.alu = op;
  in.alu_imm = true;
  in.reg = dst;
  in.imm = imm;
  return in;
}
Instruction make_push(Reg r) {
  auto in = base(InstrClass::Push);
  in.reg = r;
  return in;
}
Instruction make_pop(Reg r) {
  auto in = base(InstrClass::Pop);
  in.reg = r;
  return in;
}
Instruction make_ret() { return base(InstrClass::Return); }
Instruction make_jmp_rel(uint64_t target, uint8_t width) {
  auto in = base(InstrClass::DirectJump);
  in.rel_target = target;
  in.rel_width = width;
  return in;
}
Instruction make_jcc_rel(Cond cc, uint64_t target) {
  auto in = base(InstrClass::CondJump);
  in.cond = cc;
  in.rel_target = target;
  return in;
}
Instruction make_call_rel(uint64_t target) {
  auto in = base(InstrClass::DirectCall);
  in.rel_target = target;
  return in;
}
Instruction make_jmp_reg(Reg r) {
  auto in = base(InstrClass::IndirectJumpReg);
  in.reg = r;
  return in;
}
Instruction make_call_reg(Reg r) {
  auto in = base(InstrClass::IndirectCallReg);
  in.reg = r;
  return in;
}
Instruction make_jmp_mem(MemOperand m) {
  auto in = base(InstrClass::IndirectJumpMem);
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_call_mem(MemOperand m) {
  auto in = base(InstrClass::IndirectCallMem);
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_bndcl(uint8_t bnd, MemOperand m) {
  auto in = base(InstrClass::BndCheckLower);
  in.bnd = bnd;
  in.bnd_mem = true;
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_bndcu(uint8_t bnd, MemOperand m) {
  auto in = base(InstrClass::BndCheckUpper);
  in.bnd = bnd;
  in.bnd_mem = true;
  in.has_mem = true;
  in.mem = auto_width(m);
  return in;
}
Instruction make_bndcl_reg(uint8_t bnd, Reg r) {
  auto in = base(InstrClass::BndCheckLower);
  in.bnd = bnd;
  in.reg = r;
  return in;
}
Instruction make_bndcu_reg(uint8_t bnd, Reg r) {
  auto in = base(InstrClass::BndCheckUpper);
  in.bnd = bnd;
  in.reg = r;
  return in;
}
Instruction make_syscall_gate() { return base(InstrClass::SyscallGate); }

namespace {
std::string mem_str(const Instruction& in) {
  const MemOperand& m = in.mem;
  std::ostringstream os;
  os << "[";
  if (m.form == MemForm::DirectOffset) {
    os << "0x" << std::hex << uint64_t(in.imm);
  } else if (m.form == MemForm::RipRelative) {
    os << "rip" << (m.disp >= 0 ? "+" : "") << std::dec << m.disp;
  } else {
    if (m.base) os << reg_name(*m.base);
    if (m.index) os << "+" << reg_name(*m.index) << "*" << int(m.scale);
    if (m.disp) os << (m.disp > 0 ? "+" : "") << std::dec << m.disp;
  }
  os << "]";
  return os.str();
}
}  // namespace

std::string mnemonic(const Instruction& in) {
  switch (in.cls) {
    case InstrClass::Alu: {
      static const char* n[] = {"add", "sub", "and", "or", "xor", "cmp"};
      return n[size_t(in.alu)];
    }
    case InstrClass::MovRegImm:
    case InstrClass::MovRegReg:
    case InstrClass::Load:
    case InstrClass::Store: return "mov";
    case InstrClass::Lea: return "lea";
    case InstrClass::Push: return "push";
    case InstrClass::Pop: return "pop";
    case InstrClass::DirectJump:
    case InstrClass::IndirectJumpReg:
    case InstrClass::IndirectJumpMem: return "jmp";
    case InstrClass::CondJump: {
      static const char* n[] = {"je", "jne", "jl", "jge"};
      return n[size_t(in.cond)];
    }
    case InstrClass::DirectCall:
    case InstrClass::IndirectCallReg:
    case InstrClass::IndirectCallMem: return "call";
    case InstrClass::Return: return "ret";
    case InstrClass::BndCheckLower: return "bndcl";
    case InstrClass::BndCheckUpper: return "bndcu";
    case InstrClass::CfiLabel: return "cfi_label";
    case InstrClass::Nop: return "nop";
    case InstrClass::SyscallGate: return "syscall";
    case InstrClass::Dangerous:
      switch (in.danger) {
        case DangerKind::SgxLeaf: return "enclu";
        case DangerKind::MpxMutation: return "bndmk/bndmov";
        case DangerKind::XStateRestore: return "xrstor";
        case DangerKind::SegBaseWrite: return "wrfsbase/wrgsbase";
      }
      return "dangerous";
    case InstrClass::VectorGather: return "vgather";
  }
  return "?";
}

std::string to_string(const Instruction& in) {
  std::ostringstream os;
  os << mnemonic(in);
  switch (in.cls) {
    case InstrClass::Alu:
      os << " " << reg_name(in.reg) << ", ";
      if (in.alu_imm) os << in.imm; else os << reg_name(in.reg2);
      break;
    case InstrClass::MovRegImm:
      os << " " << reg_name(in.reg) << ", " << in.imm;
      break;
    case InstrClass::MovRegReg:
      os << " " << reg_name(in.reg) << ", " << reg_name(in.reg2);
      break;
    case InstrClass::Load:
      os << " " << reg_name(in.reg) << ", " << mem_str(in);
      break;
    case InstrClass::Store:
      os << " " << mem_str(in) << ", " << reg_name(in.reg2);
      break;
    case InstrClass::Lea:
      os << " " << reg_name(in.reg) << ", " << mem_str(in);
      break;
    case InstrClass::Push:
    case InstrClass::Pop:
    case InstrClass::IndirectJumpReg:
    case InstrClass::IndirectCallReg:
      os << " " << reg_name(in.reg);
      break;
    case InstrClass::DirectJump:
    case InstrClass::CondJump:
    case InstrClass::DirectCall:
      os << " 0x" << std::hex << in.rel_target;
      break;
    case InstrClass::IndirectJumpMem:
    case InstrClass::IndirectCallMem:
      os << " " << mem_str(in);
      break;
    case InstrClass::BndCheckLower:
    case InstrClass::BndCheckUpper:
      os << " bnd" << int(in.bnd) << ", ";
      if (in.bnd_mem) os << mem_str(in); else os << reg_name(in.reg);
      break;
    case InstrClass::CfiLabel:
      os << "<id=" << std::dec << in.domain_id << ">";
      break;
    default:
      break;
  }
  return os.str();
}

}  // namespace mmdsfi::isa
