#include "mmdsfi/analysis.hpp"

#include <deque>

namespace mmdsfi::analysis {

using isa::Instruction;
using isa::InstrClass;
using isa::MemForm;
using isa::Reg;

const Instruction* ReachableSet::fallthrough(uint64_t off) const {
  auto it = instrs.find(off);
  if (it == instrs.end()) return nullptr;
  auto next = instrs.find(it->second.end());
  return next == instrs.end() ? nullptr : &next->second;
}

void ReachableSet::recognize_pseudos() {
  pseudos.clear();
  pseudo_member.clear();
  std::vector<Instruction> seq;
  seq.reserve(instrs.size());
  for (auto& [off, in] : instrs) seq.push_back(in);
  // Pseudo members must be strictly consecutive in address order.
  for (size_t i = 0; i < seq.size(); i++) {
    size_t avail = 1;
    while (i + avail < seq.size() &&
           seq[i + avail].address == seq[i + avail - 1].end() && avail < 3)
      avail++;
    auto p = isa::recognize_pseudo(std::span(seq).subspan(i, avail), 0);
    if (!p) continue;
    pseudos.emplace(seq[i].address, *p);
    for (size_t k = 0; k < isa::pseudo_instr_count(*p); k++)
      pseudo_member[seq[i + k].address] = seq[i].address;
  }
}

void Cfg::add_edge(uint64_t from, uint64_t to) {
  succ[from].push_back(to);
  pred[to].push_back(from);
}

Cfg build_cfg(const ReachableSet& r) {
  Cfg g;
  for (auto& [off, in] : r.instrs) g.nodes.insert(off);
  for (uint64_t lbl : r.entry_labels) {
    g.add_edge(kCfgRoot, lbl);
    g.entry_nodes.push_back(lbl);
  }
  for (auto& [off, in] : r.instrs) {
    if (in.is_direct_transfer()) g.add_edge(off, in.rel_target);
    if (!in.is_unconditional_transfer() && in.cls != InstrClass::Return) {
      if (auto* next = r.fallthrough(off)) g.add_edge(off, next->address);
    }
  }
  return g;
}

RangeFact RangeFact::join(const RangeFact& a, const RangeFact& b) {
  RangeFact out;
  for (size_t i = 0; i < 16; i++)
    out.regs[i] = Interval::join(a.regs[i], b.regs[i]);
  return out;
}

RangeFact transfer(const ReachableSet& r, uint64_t off, const RangeFact& in) {
  const Instruction* ip = r.at(off);
  if (!ip) return RangeFact::all_top();
  const Instruction& i = *ip;
  RangeFact out = in;

  auto member_of = [&](uint64_t o) -> const isa::PseudoInstr* {
    auto it = r.pseudo_member.find(o);
    if (it == r.pseudo_member.end()) return nullptr;
    return &r.pseudos.at(it->second);
  };

  auto plain_base_disp = [](const isa::MemOperand& m) {
    return m.form == MemForm::BaseDisp && m.base && !m.index;
  };

  switch (i.cls) {
    case InstrClass::CfiLabel:
      return RangeFact::all_top();  // indirect entry may come from anywhere
    case InstrClass::Nop:
    case InstrClass::Return:
    case InstrClass::DirectJump:
    case InstrClass::CondJump:
    case InstrClass::IndirectJumpReg:
    case InstrClass::IndirectJumpMem:
      return out;
    case InstrClass::BndCheckLower:
      return out;
    case InstrClass::BndCheckUpper: {
      // Completion of a MemGuard pins its base register.
      auto* p = member_of(off);
      if (p) {
        if (auto* mg = std::get_if<isa::MemGuard>(p)) {
          if (mg->upper.address == off && plain_base_disp(mg->guarded_operand)) {
            Interval g = Interval::Dev(-mg->guarded_operand.disp,
                                       -mg->guarded_operand.disp);
            Interval& slot = out[*mg->guarded_operand.base];
            slot = Interval::meet(slot, g);
          }
        }
      }
      return out;
    }
    case InstrClass::Load:
    case InstrClass::Store: {
      bool cfi_guard_load = false;
      if (auto* p = member_of(off))
        if (auto* cg = std::get_if<isa::CfiGuard>(p))
          cfi_guard_load = cg->load.address == off;
      // A completed data access proves the address was inside D (region C
      // is not data-readable; the cfi_guard load is the one carve-out).
      if (!cfi_guard_load && plain_base_disp(i.mem) &&
          i.mem.disp >= -kGuardSize && i.mem.disp <= kGuardSize)
        out[*i.mem.base] = Interval::Dev(-i.mem.disp, -i.mem.disp);
      if (i.cls == InstrClass::Load) out[i.reg] = Interval::Top();
      return out;
    }
    case InstrClass::Alu:
      if (i.alu_imm) {
        int64_t delta = i.alu == isa::AluOp::Add ? i.imm : -i.imm;
        out[i.reg] = out[i.reg].shifted(delta);
      } else if (i.alu != isa::AluOp::Cmp) {
        out[i.reg] = Interval::Top();
      }
      return out;
    case InstrClass::Lea:
      if (plain_base_disp(i.mem))
        out[i.reg] = in[*i.mem.base].shifted(i.mem.disp);
      else
        out[i.reg] = Interval::Top();
      return out;
    case InstrClass::MovRegReg:
      out[i.reg] = in[i.reg2];
      return out;
    case InstrClass::MovRegImm:
      out[i.reg] = Interval::Top();
      return out;
    case InstrClass::Push:
    case InstrClass::DirectCall:
    case InstrClass::IndirectCallReg:
    case InstrClass::IndirectCallMem:
      out[Reg::rsp] = Interval::Top();
      return out;
    case InstrClass::Pop:
      out[i.reg] = Interval::Top();
      out[Reg::rsp] = Interval::Top();
      return out;
    default:
      return RangeFact::all_top();
  }
}

FactMap range_analysis(const Cfg& cfg, const ReachableSet& r,
                       const std::vector<uint64_t>* order) {
  std::map<uint64_t, size_t> priority;
  if (order)
    for (size_t i = 0; i < order->size(); i++) priority[(*order)[i]] = i;

  FactMap in;
  auto pri = [&](uint64_t n) {
    auto it = priority.find(n);
    return it != priority.end() ? it->second : size_t(n);
  };
  auto cmp = [&](uint64_t a, uint64_t b) {
    size_t pa = pri(a), pb = pri(b);
    return pa != pb ? pa < pb : a < b;
  };
  std::set<uint64_t, decltype(cmp)> worklist(cmp);

  for (uint64_t e : cfg.entry_nodes) {
    in[e] = RangeFact::all_top();
    worklist.insert(e);
  }
  while (!worklist.empty()) {
    uint64_t n = *worklist.begin();
    worklist.erase(worklist.begin());
    RangeFact out = transfer(r, n, in.at(n));
    auto it = cfg.succ.find(n);
    if (it == cfg.succ.end()) continue;
    for (uint64_t s : it->second) {
      auto sit = in.find(s);
      if (sit == in.end()) {
        in[s] = out;
        worklist.insert(s);
      } else {
        RangeFact merged = RangeFact::join(sit->second, out);
        if (!(merged == sit->second)) {
          sit->second = merged;
          worklist.insert(s);
        }
      }
    }
  }
  return in;
}

}  // namespace mmdsfi::analysis
