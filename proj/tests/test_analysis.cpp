// Interval lattice algebra, per-instruction transfer rules, and fixpoint
// correctness: the worklist solver must match a brute-force chaotic
// iteration no matter how its processing order is permuted.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "mmdsfi/analysis.hpp"

using namespace mmdsfi;
using analysis::Cfg;
using analysis::FactMap;
using analysis::Interval;
using analysis::RangeFact;
using analysis::ReachableSet;
using isa::Instruction;
using isa::Reg;

namespace {

isa::MemOperand mem(Reg base, int32_t disp = 0) {
  isa::MemOperand m;
  m.base = base;
  m.disp = disp;
  return m;
}

// Builds a ReachableSet from an instruction list laid out back to back.
// `branches` maps instruction index -> target instruction index.
ReachableSet build(std::vector<Instruction> ins,
                   const std::map<size_t, size_t>& branches = {}) {
  std::vector<uint64_t> addr(ins.size());
  uint64_t a = 0;
  for (size_t i = 0; i < ins.size(); i++) {
    addr[i] = a;
    a += isa::encode_or_throw(ins[i]).size();
  }
  for (auto& [from, to] : branches) ins[from].rel_target = addr[to];
  ReachableSet r;
  for (size_t i = 0; i < ins.size(); i++) {
    ins[i].address = addr[i];
    ins[i].raw = isa::encode_or_throw(ins[i]);
    ins[i].length = uint8_t(ins[i].raw.size());
    if (ins[i].cls == isa::InstrClass::CfiLabel) r.entry_labels.insert(addr[i]);
    r.instrs.emplace(addr[i], ins[i]);
  }
  r.recognize_pseudos();
  return r;
}

// Reference fixpoint: keep sweeping every discovered node until nothing
// changes. Slower but obviously order-independent.
FactMap brute_fixpoint(const Cfg& cfg, const ReachableSet& r) {
  FactMap in;
  for (uint64_t e : cfg.entry_nodes) in[e] = RangeFact::all_top();
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<uint64_t> nodes;
    for (auto& [n, f] : in) nodes.push_back(n);
    for (uint64_t n : nodes) {
      RangeFact out = analysis::transfer(r, n, in.at(n));
      auto it = cfg.succ.find(n);
      if (it == cfg.succ.end()) continue;
      for (uint64_t s : it->second) {
        auto sit = in.find(s);
        if (sit == in.end()) {
          in[s] = out;
          changed = true;
        } else {
          RangeFact merged = RangeFact::join(sit->second, out);
          if (!(merged == sit->second)) {
            sit->second = merged;
            changed = true;
          }
        }
      }
    }
  }
  return in;
}

// Solver vs. brute force, plus order-independence across random permutations.
void check_fixture(const ReachableSet& r, int orders = 25) {
  Cfg cfg = analysis::build_cfg(r);
  FactMap expect = brute_fixpoint(cfg, r);
  CHECK(analysis::range_analysis(cfg, r) == expect);
  std::vector<uint64_t> nodes(cfg.nodes.begin(), cfg.nodes.end());
  std::mt19937 rng(12345);
  for (int i = 0; i < orders; i++) {
    std::shuffle(nodes.begin(), nodes.end(), rng);
    CHECK(analysis::range_analysis(cfg, r, &nodes) == expect);
  }
}

}  // namespace

TEST_CASE("interval algebra") {
  Interval t = Interval::Top();
  Interval a = Interval::Dev(0, 8);
  Interval b = Interval::Dev(-16, 0);

  CHECK(t.is_top());
  CHECK(!a.is_top());
  CHECK(Interval::join(a, b) == Interval::Dev(-16, 8));
  CHECK(Interval::join(a, t).is_top());
  CHECK(Interval::meet(a, t) == a);
  CHECK(Interval::meet(a, b) == Interval::Dev(0, 0));
  CHECK(a.shifted(8) == Interval::Dev(8, 16));
  CHECK(t.shifted(8).is_top());

  // construction and shifting widen past the guard size
  CHECK(Interval::Dev(0, 4097).is_top());
  CHECK(Interval::Dev(-4097, 0).is_top());
  CHECK(!Interval::Dev(-4096, 4096).is_top());
  CHECK(a.shifted(4095).is_top());

  // disjoint windows still meet to a valid (clamped) interval
  Interval lo = Interval::Dev(-8, -8);
  Interval hi = Interval::Dev(8, 8);
  Interval m = Interval::meet(lo, hi);
  CHECK(!m.is_top());
  CHECK(m.lo <= m.hi);
}

TEST_CASE("transfer rules") {
  auto fact_after = [](const ReachableSet& r, uint64_t off, RangeFact in) {
    return analysis::transfer(r, off, in);
  };

  SUBCASE("completed store pins its base; load clobbers its destination") {
    auto r = build({isa::make_store(mem(Reg::rbx, 24), Reg::rax),
                    isa::make_load(Reg::rcx, mem(Reg::rbx))});
    RangeFact f = fact_after(r, 0, RangeFact::all_top());
    CHECK(f[Reg::rbx] == Interval::Dev(-24, -24));
    RangeFact g = fact_after(r, r.instrs.rbegin()->first, f);
    CHECK(g[Reg::rcx].is_top());
    CHECK(g[Reg::rbx] == Interval::Dev(0, 0));  // re-pinned by the load
  }

  SUBCASE("mem_guard completion refines by meet") {
    auto r = build({isa::make_bndcl(0, mem(Reg::rbx, 8)),
                    isa::make_bndcu(0, mem(Reg::rbx, 8))});
    uint64_t upper = r.instrs.rbegin()->first;
    REQUIRE(r.pseudos.count(0));  // recognized as one mem_guard
    RangeFact in;
    in[Reg::rbx] = Interval::Dev(-64, 64);
    RangeFact f = fact_after(r, upper, in);
    CHECK(f[Reg::rbx] == Interval::Dev(-8, -8));
  }

  SUBCASE("arithmetic shifts, register moves copy, cfi_label clears") {
    auto r = build({isa::make_alu_ri(isa::AluOp::Add, Reg::rbx, 16),
                    isa::make_mov_reg_reg(Reg::rdx, Reg::rbx),
                    isa::make_lea(Reg::rcx, mem(Reg::rbx, -8)),
                    isa::make_cfi_label(0)});
    RangeFact in;
    in[Reg::rbx] = Interval::Dev(0, 0);
    auto it = r.instrs.begin();
    RangeFact f = fact_after(r, it->first, in);
    CHECK(f[Reg::rbx] == Interval::Dev(16, 16));
    ++it;
    f = fact_after(r, it->first, f);
    CHECK(f[Reg::rdx] == Interval::Dev(16, 16));
    ++it;
    f = fact_after(r, it->first, f);
    CHECK(f[Reg::rcx] == Interval::Dev(8, 8));
    ++it;
    f = fact_after(r, it->first, f);
    for (int i = 0; i < 16; i++) CHECK(f.regs[i].is_top());
  }

  SUBCASE("push/call/pop forget rsp") {
    auto r = build({isa::make_push(Reg::rax), isa::make_pop(Reg::rax)});
    RangeFact in;
    in[Reg::rsp] = Interval::Dev(0, 0);
    RangeFact f = fact_after(r, 0, in);
    CHECK(f[Reg::rsp].is_top());
  }
}

// --- the five shipped fixtures ---------------------------------------------

TEST_CASE("fixture 1: straight-line pointer arithmetic") {
  auto r = build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx, 8), Reg::rax),
      isa::make_lea(Reg::rcx, mem(Reg::rbx, 16)),
      isa::make_nop(),
  });
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t last = r.instrs.rbegin()->first;
  CHECK(facts.at(last)[Reg::rbx] == Interval::Dev(-8, -8));
  CHECK(facts.at(last)[Reg::rcx] == Interval::Dev(8, 8));
  check_fixture(r);
}

TEST_CASE("fixture 2: loop join widens the base to its stride window") {
  // guard [rbx]; loop: store [rbx]; add rbx,8; jne loop
  std::vector<Instruction> ins = {
      isa::make_cfi_label(0),
      isa::make_bndcl(0, mem(Reg::rbx)),
      isa::make_bndcu(0, mem(Reg::rbx)),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_alu_ri(isa::AluOp::Add, Reg::rbx, 8),
      isa::make_jcc_rel(isa::Cond::Ne, 0),
      isa::make_nop(),
  };
  auto r = build(ins, {{5, 3}});
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t store_off = 0;
  for (auto& [off, in] : r.instrs)
    if (in.cls == isa::InstrClass::Store) store_off = off;
  CHECK(facts.at(store_off)[Reg::rbx] == Interval::Dev(0, 8));
  check_fixture(r);
}

TEST_CASE("fixture 3: diamond join takes the hull of both arms") {
  // je L; guard [rbx+16]; jmp J; L: guard [rbx]; J: nop
  std::vector<Instruction> ins = {
      isa::make_cfi_label(0),
      isa::make_jcc_rel(isa::Cond::Eq, 0),   // -> 5
      isa::make_bndcl(0, mem(Reg::rbx, 16)),
      isa::make_bndcu(0, mem(Reg::rbx, 16)),
      isa::make_jmp_rel(0),                  // -> 7
      isa::make_bndcl(0, mem(Reg::rbx)),
      isa::make_bndcu(0, mem(Reg::rbx)),
      isa::make_nop(),
  };
  auto r = build(ins, {{1, 5}, {4, 7}});
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t join = r.instrs.rbegin()->first;
  CHECK(facts.at(join)[Reg::rbx] == Interval::Dev(-16, 0));
  check_fixture(r);
}

TEST_CASE("fixture 4: aliases carry the proof of their source") {
  auto r = build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_mov_reg_reg(Reg::rdx, Reg::rbx),
      isa::make_alu_ri(isa::AluOp::Add, Reg::rdx, 24),
      isa::make_nop(),
  });
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t last = r.instrs.rbegin()->first;
  CHECK(facts.at(last)[Reg::rdx] == Interval::Dev(24, 24));
  CHECK(facts.at(last)[Reg::rbx] == Interval::Dev(0, 0));
  check_fixture(r);
}

TEST_CASE("fixture 5: oversized strides widen to Top") {
  auto r = build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_alu_ri(isa::AluOp::Add, Reg::rbx, 4200),
      isa::make_nop(),
  });
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t last = r.instrs.rbegin()->first;
  CHECK(facts.at(last)[Reg::rbx].is_top());
  check_fixture(r);
}

TEST_CASE("mid-stream cfi_label drops every fact on the floor") {
  auto r = build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
  });
  Cfg cfg = analysis::build_cfg(r);
  FactMap facts = analysis::range_analysis(cfg, r);
  uint64_t second_store = r.instrs.rbegin()->first;
  CHECK(facts.at(second_store)[Reg::rbx].is_top());
  check_fixture(r);
}
