// Control-flow graph over the reachable-instruction set and the
// guard-aware interval range analysis used by the optimizer and by the
// memory-access verification stage.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mmdsfi/isa.hpp"

namespace mmdsfi::analysis {

// Guard region size; also the widening threshold of the interval lattice.
// Deviations beyond one guard size can never be proven safe.
constexpr int64_t kGuardSize = 4096;

struct ReachableSet {
  std::map<uint64_t, isa::Instruction> instrs;
  std::map<uint64_t, isa::PseudoInstr> pseudos;  // keyed by first-instruction offset
  std::map<uint64_t, uint64_t> pseudo_member;    // member offset -> pseudo begin
  std::set<uint64_t> entry_labels;               // cfi_label offsets

  bool contains(uint64_t off) const { return instrs.count(off) != 0; }
  const isa::Instruction* at(uint64_t off) const {
    auto it = instrs.find(off);
    return it == instrs.end() ? nullptr : &it->second;
  }
  // The instruction immediately following `off` in address order, if it is
  // the fallthrough successor (i.e. starts exactly at the end of `off`).
  const isa::Instruction* fallthrough(uint64_t off) const;

  // Recognizes pseudo-instructions over the address-ordered instruction
  // stream and fills `pseudos`.
  void recognize_pseudos();
};

// Virtual-root node id; register-based indirect transfers have no explicit
// out-edges, their targets are modeled by root -> cfi_label entry edges.
constexpr uint64_t kCfgRoot = UINT64_MAX;

struct Cfg {
  std::set<uint64_t> nodes;
  std::map<uint64_t, std::vector<uint64_t>> succ;
  std::map<uint64_t, std::vector<uint64_t>> pred;
  std::vector<uint64_t> entry_nodes;  // successors of the virtual root

  void add_edge(uint64_t from, uint64_t to);
};

Cfg build_cfg(const ReachableSet& r);

// Per-register interval fact. Dev(lo, hi) asserts the register's runtime
// value v satisfies D.begin + lo <= v <= (D.end - 1) + hi for the domain
// the code runs in. Top carries no information.
struct Interval {
  bool top = true;
  int64_t lo = 0, hi = 0;

  static Interval Top() { return Interval{}; }
  static Interval Dev(int64_t lo, int64_t hi) {
    if (lo < -kGuardSize || hi > kGuardSize) return Top();
    return Interval{false, lo, hi};
  }
  bool is_top() const { return top; }
  Interval shifted(int64_t delta) const {
    if (top) return *this;
    return Dev(lo + delta, hi + delta);
  }
  // Join = interval hull, widened to Top outside [-kGuardSize, kGuardSize].
  static Interval join(const Interval& a, const Interval& b) {
    if (a.top || b.top) return Top();
    return Dev(std::min(a.lo, b.lo), std::max(a.hi, b.hi));
  }
  // Meet = intersection of the deviation windows. When the windows are
  // disjoint as (lo, hi) pairs the true value set is still an interval of
  // addresses inside D; the result is clamped back into lo <= hi form,
  // which over-approximates it.
  static Interval meet(const Interval& a, const Interval& b) {
    if (a.top) return b;
    if (b.top) return a;
    int64_t lo = std::max(a.lo, b.lo), hi = std::min(a.hi, b.hi);
    if (lo > hi) std::swap(lo, hi);
    return Dev(lo, hi);
  }
  bool operator==(const Interval&) const = default;
};

struct RangeFact {
  std::array<Interval, 16> regs{};  // indexed by isa::reg_num

  Interval& operator[](isa::Reg r) { return regs[isa::reg_num(r)]; }
  const Interval& operator[](isa::Reg r) const { return regs[isa::reg_num(r)]; }
  static RangeFact all_top() { return RangeFact{}; }
  static RangeFact join(const RangeFact& a, const RangeFact& b);
  bool operator==(const RangeFact&) const = default;
};

using FactMap = std::map<uint64_t, RangeFact>;  // fact BEFORE each instruction

// Transfer function for a single instruction: fact after executing it,
// assuming the instruction completed without faulting.
RangeFact transfer(const ReachableSet& r, uint64_t off, const RangeFact& in);

// Least fixpoint over the CFG; `order` optionally randomizes the worklist
// processing order (result must not depend on it).
FactMap range_analysis(const Cfg& cfg, const ReachableSet& r,
                       const std::vector<uint64_t>* order = nullptr);

}  // namespace mmdsfi::analysis
