#include "mmdsfi/verifier.hpp"

#include <deque>
#include <map>
#include <set>

namespace mmdsfi::verifier {

using analysis::Interval;
using analysis::kGuardSize;
using analysis::ReachableSet;
using isa::InstrClass;
using isa::Instruction;
using isa::MemForm;
using isa::Reg;

std::variant<ReachableSet, Violation> stage1_disassemble(const image::SipbImage& img) {
  const auto& code = img.code;
  ReachableSet r;
  auto labels = isa::scan_cfi_labels(code);
  for (uint64_t l : labels) r.entry_labels.insert(l);
  if (!r.entry_labels.count(img.entry))
    return Violation{1, img.entry, "AbortEntryNotLabel",
                     "entry does not point at a cfi_label"};

  std::deque<uint64_t> work(labels.begin(), labels.end());
  work.push_back(img.entry);
  std::set<uint64_t> seen;
  while (!work.empty()) {
    uint64_t off = work.front();
    work.pop_front();
    if (!seen.insert(off).second) continue;
    if (off >= code.size())
      return Violation{1, off, "AbortOutOfRange", "offset outside the code section"};
    auto dr = isa::decode(code, off);
    if (auto* e = std::get_if<isa::DecodeError>(&dr)) {
      if (e->kind == isa::DecodeErrorKind::TruncatedInstruction)
        return Violation{1, off, "AbortOutOfRange",
                         "instruction extends past the code section"};
      return Violation{1, off, "AbortInvalidInstruction", "undecodable bytes"};
    }
    Instruction in = std::get<Instruction>(dr);
    if (in.is_direct_transfer()) {
      if (in.rel_target >= code.size())
        return Violation{1, off, "AbortOutOfRange", "branch target outside code"};
      work.push_back(in.rel_target);
    }
    if (!in.is_unconditional_transfer() && in.cls != InstrClass::Return)
      work.push_back(in.end());
    r.instrs.emplace(off, std::move(in));
  }

  // No two reachable instructions may share bytes; a label embedded inside
  // another instruction shows up here as an overlap.
  uint64_t prev_end = 0;
  uint64_t prev_off = 0;
  bool first = true;
  for (auto& [off, in] : r.instrs) {
    if (!first && off < prev_end)
      return Violation{1, off, "AbortOverlap",
                       "overlaps instruction at offset " + std::to_string(prev_off)};
    if (first || in.end() > prev_end) {
      prev_end = in.end();
      prev_off = off;
    }
    first = false;
  }
  r.recognize_pseudos();
  return r;
}

std::vector<Violation> stage2_dangerous(const ReachableSet& r) {
  std::vector<Violation> out;
  for (auto& [off, in] : r.instrs) {
    if (in.cls == InstrClass::Dangerous) {
      const char* code = "";
      switch (in.danger) {
        case isa::DangerKind::SgxLeaf: code = "E_SGX"; break;
        case isa::DangerKind::MpxMutation: code = "E_MPX_MUT"; break;
        case isa::DangerKind::XStateRestore: code = "E_XSTATE"; break;
        case isa::DangerKind::SegBaseWrite: code = "E_SEGBASE"; break;
      }
      out.push_back({2, off, code, isa::mnemonic(in)});
    } else if (in.cls == InstrClass::SyscallGate) {
      out.push_back({2, off, "E_SYSCALL_IN_USER",
                     "syscall outside the monitor trampoline"});
    }
  }
  return out;
}

namespace {

// Pseudo that ends exactly at `off`, if any.
const isa::PseudoInstr* pseudo_ending_at(const ReachableSet& r,
                                         const std::map<uint64_t, uint64_t>& end_at,
                                         uint64_t off) {
  auto it = end_at.find(off);
  if (it == end_at.end()) return nullptr;
  return &r.pseudos.at(it->second);
}

std::map<uint64_t, uint64_t> pseudo_ends(const ReachableSet& r) {
  std::map<uint64_t, uint64_t> end_at;  // end offset -> pseudo begin
  for (auto& [b, p] : r.pseudos) end_at[isa::pseudo_end(p)] = b;
  return end_at;
}

bool guarded_by_cfi(const ReachableSet& r, const std::map<uint64_t, uint64_t>& end_at,
                    const Instruction& in) {
  auto* p = pseudo_ending_at(r, end_at, in.address);
  if (!p) return false;
  auto* cg = std::get_if<isa::CfiGuard>(p);
  return cg && cg->target_reg == in.reg;
}

bool guarded_by_mem(const ReachableSet& r, const std::map<uint64_t, uint64_t>& end_at,
                    const Instruction& in) {
  auto* p = pseudo_ending_at(r, end_at, in.address);
  if (!p) return false;
  auto* mg = std::get_if<isa::MemGuard>(p);
  return mg && mg->guarded_operand == in.mem;
}

// Offsets a direct transfer must not target: entering here would bypass the
// guard that makes the instruction safe.
std::set<uint64_t> interior_set(const ReachableSet& r,
                                const std::map<uint64_t, uint64_t>& end_at) {
  std::set<uint64_t> interior;
  for (auto& [off, begin] : r.pseudo_member)
    if (off != begin) interior.insert(off);
  for (auto& [off, in] : r.instrs) {
    if (in.is_register_indirect() && guarded_by_cfi(r, end_at, in))
      interior.insert(off);
    if ((in.cls == InstrClass::Load || in.cls == InstrClass::Store) &&
        guarded_by_mem(r, end_at, in))
      interior.insert(off);
  }
  return interior;
}

bool writes_rsp_out_of_discipline(const Instruction& in) {
  bool dst_rsp = in.reg == Reg::rsp;
  switch (in.cls) {
    case InstrClass::MovRegReg:
    case InstrClass::MovRegImm:
    case InstrClass::Load:
    case InstrClass::Lea:
    case InstrClass::Pop:
      return dst_rsp;
    case InstrClass::Alu:
      if (!dst_rsp || in.alu == isa::AluOp::Cmp) return false;
      if (in.alu_imm && (in.alu == isa::AluOp::Add || in.alu == isa::AluOp::Sub))
        return in.imm > kGuardSize || in.imm < -kGuardSize;
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<Violation> stage3_transfers(const ReachableSet& r) {
  std::vector<Violation> out;
  auto end_at = pseudo_ends(r);
  auto interior = interior_set(r, end_at);
  for (auto& [off, in] : r.instrs) {
    if (in.is_direct_transfer()) {
      if (!r.contains(in.rel_target)) {
        out.push_back({3, off, "E_CT_TARGET", "target is not an instruction boundary"});
      } else if (interior.count(in.rel_target)) {
        out.push_back({3, off, "E_CT_INTERIOR", "target enters a guarded group"});
      }
      continue;
    }
    switch (in.cls) {
      case InstrClass::Return:
        out.push_back({3, off, "E_CT_RET", "ret must be lowered to a guarded jump"});
        break;
      case InstrClass::IndirectJumpMem:
      case InstrClass::IndirectCallMem:
        out.push_back({3, off, "E_CT_MEM",
                       "memory-indirect transfer must be lowered"});
        break;
      case InstrClass::IndirectJumpReg:
      case InstrClass::IndirectCallReg:
        if (!guarded_by_cfi(r, end_at, in))
          out.push_back({3, off, "E_CT_UNGUARDED",
                         "indirect transfer without an adjacent cfi_guard"});
        break;
      default:
        break;
    }
  }
  return out;
}

std::vector<Violation> stage4_memory(const ReachableSet& r, const Policy& policy) {
  std::vector<Violation> out;
  auto end_at = pseudo_ends(r);
  analysis::Cfg cfg = analysis::build_cfg(r);
  analysis::FactMap facts = analysis::range_analysis(cfg, r);

  auto cfi_guard_load = [&](uint64_t off) {
    auto it = r.pseudo_member.find(off);
    if (it == r.pseudo_member.end()) return false;
    auto* cg = std::get_if<isa::CfiGuard>(&r.pseudos.at(it->second));
    return cg && cg->load.address == off;
  };

  for (auto& [off, in] : r.instrs) {
    if (writes_rsp_out_of_discipline(in)) {
      out.push_back({4, off, "E_MEM_RSP", "undisciplined stack pointer update"});
      continue;
    }
    if (in.cls == InstrClass::VectorGather) {
      out.push_back({4, off, "E_MEM_VSIB", "vector gather cannot be bounds-checked"});
      continue;
    }
    if (in.cls != InstrClass::Load && in.cls != InstrClass::Store) continue;
    if (in.cls == InstrClass::Load && !policy.confine_loads) continue;
    if (cfi_guard_load(off)) continue;  // reads the label qword inside C

    if (in.mem.form == MemForm::DirectOffset || in.mem.form == MemForm::RipRelative) {
      out.push_back({4, off, "E_MEM_DIRECT",
                     "absolute or rip-relative data access"});
      continue;
    }
    bool rsp_ok = in.mem.base == Reg::rsp && !in.mem.index &&
                  in.mem.disp >= -kGuardSize && in.mem.disp <= kGuardSize;
    if (rsp_ok) continue;
    if (guarded_by_mem(r, end_at, in)) continue;

    bool justified = false;
    auto f = facts.find(off);
    if (f != facts.end() && in.mem.form == MemForm::BaseDisp && in.mem.base &&
        !in.mem.index) {
      const Interval& iv = f->second[*in.mem.base];
      justified = !iv.is_top() && iv.lo + in.mem.disp >= -kGuardSize &&
                  iv.hi + in.mem.disp <= kGuardSize;
    }
    if (justified) continue;
    out.push_back({4, off, "E_MEM_UNPROVEN", "memory access not provably confined"});
  }
  return out;
}

Verdict verify(const image::SipbImage& img, const Policy& policy) {
  Verdict v;
  auto s1 = stage1_disassemble(img);
  if (auto* viol = std::get_if<Violation>(&s1)) {
    v.violations.push_back(*viol);
    return v;
  }
  v.reachable = std::move(std::get<ReachableSet>(s1));
  for (auto& viol : stage2_dangerous(v.reachable)) v.violations.push_back(viol);
  for (auto& viol : stage3_transfers(v.reachable)) v.violations.push_back(viol);
  for (auto& viol : stage4_memory(v.reachable, policy)) v.violations.push_back(viol);
  v.stats.reachable_count = v.reachable.instrs.size();
  v.stats.cfi_label_count = v.reachable.entry_labels.size();
  for (auto& [b, p] : v.reachable.pseudos) {
    if (std::holds_alternative<isa::MemGuard>(p)) v.stats.mem_guard_count++;
    if (std::holds_alternative<isa::CfiGuard>(p)) v.stats.cfi_guard_count++;
  }
  v.accepted = v.violations.empty();
  return v;
}

}  // namespace mmdsfi::verifier
