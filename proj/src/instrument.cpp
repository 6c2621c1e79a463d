#include "mmdsfi/instrument.hpp"

#include <cassert>
#include <cstring>
#include <deque>
#include <map>
#include <set>

#include "mmdsfi/analysis.hpp"

namespace mmdsfi::instrument {

using analysis::Interval;
using analysis::kGuardSize;
using analysis::RangeFact;
using isa::Reg;
using sasm::Item;
using sasm::MemExpr;
using sasm::Operand;
using sasm::OperandKind;
using sasm::SasmProgram;

namespace {

constexpr int kPreheaderGroup = -2;  // hoisted guards; never hoisting candidates

Operand op_reg(Reg r) {
  Operand o;
  o.kind = OperandKind::Reg;
  o.reg = r;
  return o;
}
Operand op_imm(int64_t v) {
  Operand o;
  o.kind = OperandKind::Imm;
  o.imm = v;
  return o;
}
Operand op_mem(const MemExpr& m) {
  Operand o;
  o.kind = OperandKind::Mem;
  o.mem = m;
  return o;
}
Operand op_addr(const std::string& l) {
  Operand o;
  o.kind = OperandKind::AddrOf;
  o.label = l;
  return o;
}

Item ins(const std::string& mn, std::vector<Operand> ops, int group, int line) {
  Item it;
  it.mn = mn;
  it.ops = std::move(ops);
  it.group = group;
  it.line = line;
  return it;
}

Item label_item(const std::string& name, int group, int line) {
  Item it;
  it.is_label = true;
  it.label = name;
  it.group = group;
  it.line = line;
  return it;
}

int next_group(const SasmProgram& p) {
  int g = -1;
  for (auto& f : p.functions)
    for (auto& it : f.body) g = std::max(g, it.group);
  return g + 1;
}

bool is_store(const Item& it) {
  return it.mn == "mov" && it.ops.size() == 2 && it.ops[0].kind == OperandKind::Mem;
}
bool is_load(const Item& it) {
  return it.mn == "mov" && it.ops.size() == 2 && it.ops[1].kind == OperandKind::Mem &&
         it.ops[0].kind == OperandKind::Reg;
}

// Stack accesses through small rsp displacements are covered by the guard
// pages plus the runtime's rsp discipline; they need no mem_guard.
bool rsp_disciplined(const MemExpr& m) {
  return m.base == Reg::rsp && !m.index && m.disp >= -kGuardSize && m.disp <= kGuardSize;
}

bool plain_base_disp(const MemExpr& m) {
  return m.base && !m.index && m.disp >= INT32_MIN && m.disp <= INT32_MAX;
}

}  // namespace

size_t static_guard_count(const SasmProgram& p) {
  size_t n = 0;
  for (auto& f : p.functions)
    for (auto& it : f.body)
      if (it.mn == "mem_guard") n++;
  return n;
}

SasmProgram insert_cfi_labels(SasmProgram p) {
  std::set<std::string> taken;
  for (auto& f : p.functions)
    for (auto& it : f.body)
      for (auto& o : it.ops)
        if (o.kind == OperandKind::AddrOf) taken.insert(o.label);
  for (auto& d : p.data)
    for (auto& [off, l] : d.addr_refs) taken.insert(l);

  int g = next_group(p);
  int ret_n = 0;
  for (auto& f : p.functions) {
    std::vector<Item> out;
    out.push_back(ins("cfi_label", {}, -1, f.line));
    for (auto& it : f.body) {
      if (it.is_label) {
        out.push_back(it);
        if (taken.count(it.label))
          out.push_back(ins("cfi_label", {}, -1, it.line));
        continue;
      }
      if (it.mn == "call" || it.mn == "syscall") {
        // Every return site must carry a cfi_label; returns come back
        // through an indirect jump. The direct-call case additionally
        // relies on the label sitting at the fallthrough byte, so the
        // three items form one atomic group.
        Item c = it;
        c.group = g;
        out.push_back(std::move(c));
        std::string name = "__ret_" + std::to_string(ret_n++);
        out.push_back(label_item(name, g, it.line));
        out.push_back(ins("cfi_label", {}, g, it.line));
        g++;
        continue;
      }
      out.push_back(it);
    }
    f.body = std::move(out);
  }
  return p;
}

SasmProgram lower_unsafe_transfers(SasmProgram p) {
  int g = next_group(p);
  for (auto& f : p.functions) {
    std::vector<Item> out;
    for (size_t i = 0; i < f.body.size(); i++) {
      const Item& it = f.body[i];
      int ln = it.line;
      auto ret_label = [&]() -> std::string {
        // insert_cfi_labels placed the return-site label right behind us
        assert(i + 1 < f.body.size() && f.body[i + 1].is_label);
        return f.body[i + 1].label;
      };
      if (it.mn == "ret") {
        out.push_back(ins("pop", {op_reg(Reg::r10)}, g, ln));
        out.push_back(ins("cfi_guard", {op_reg(Reg::r10)}, g, ln));
        out.push_back(ins("jmp", {op_reg(Reg::r10)}, g, ln));
        g++;
        continue;
      }
      if (it.mn == "jmp" && it.ops.size() == 1 && it.ops[0].kind == OperandKind::Reg) {
        out.push_back(ins("cfi_guard", {it.ops[0]}, g, ln));
        Item j = it;
        j.group = g;
        out.push_back(std::move(j));
        g++;
        continue;
      }
      if (it.mn == "jmp" && it.ops.size() == 1 && it.ops[0].kind == OperandKind::Mem) {
        out.push_back(ins("mem_guard", {it.ops[0]}, g, ln));
        out.push_back(ins("mov", {op_reg(Reg::r10), it.ops[0]}, g, ln));
        out.push_back(ins("cfi_guard", {op_reg(Reg::r10)}, g, ln));
        out.push_back(ins("jmp", {op_reg(Reg::r10)}, g, ln));
        g++;
        continue;
      }
      if (it.mn == "call" && it.ops.size() == 1 && it.ops[0].kind == OperandKind::Reg) {
        std::string rl = ret_label();
        out.push_back(ins("lea", {op_reg(Reg::r10), op_addr(rl)}, g, ln));
        out.push_back(ins("push", {op_reg(Reg::r10)}, g, ln));
        out.push_back(ins("cfi_guard", {it.ops[0]}, g, ln));
        out.push_back(ins("jmp", {it.ops[0]}, g, ln));
        g++;
        continue;
      }
      if (it.mn == "call" && it.ops.size() == 1 && it.ops[0].kind == OperandKind::Mem) {
        std::string rl = ret_label();
        out.push_back(ins("mem_guard", {it.ops[0]}, g, ln));
        out.push_back(ins("mov", {op_reg(Reg::r10), it.ops[0]}, g, ln));
        out.push_back(ins("lea", {op_reg(Reg::r11), op_addr(rl)}, g, ln));
        out.push_back(ins("push", {op_reg(Reg::r11)}, g, ln));
        out.push_back(ins("cfi_guard", {op_reg(Reg::r10)}, g, ln));
        out.push_back(ins("jmp", {op_reg(Reg::r10)}, g, ln));
        g++;
        continue;
      }
      if (it.mn == "syscall") {
        // Enter the monitor through the gate trampoline at the end of C;
        // r13 carries the resumption point for the monitor.
        std::string rl = ret_label();
        out.push_back(ins("lea", {op_reg(Reg::r13), op_addr(rl)}, g, ln));
        out.push_back(ins("cfi_guard", {op_reg(Reg::r14)}, g, ln));
        out.push_back(ins("jmp", {op_reg(Reg::r14)}, g, ln));
        g++;
        continue;
      }
      out.push_back(it);
    }
    f.body = std::move(out);
  }
  return p;
}

std::variant<SasmProgram, InstrumentError> insert_mem_guards(SasmProgram p,
                                                             bool confine_loads) {
  int g = next_group(p);
  for (auto& f : p.functions) {
    std::vector<Item> out;
    for (auto& it : f.body) {
      if ((it.mn == "add" || it.mn == "sub") && it.ops.size() == 2 &&
          it.ops[0].kind == OperandKind::Reg && it.ops[0].reg == Reg::rsp &&
          it.ops[1].kind == OperandKind::Imm &&
          (it.ops[1].imm > kGuardSize || it.ops[1].imm < -kGuardSize)) {
        return InstrumentError{"RspAdjustTooLarge",
                               "line " + std::to_string(it.line) +
                                   ": rsp adjustment exceeds the guard size"};
      }
      bool want = is_store(it) || (confine_loads && is_load(it));
      if (want) {
        const MemExpr& m = it.ops[is_store(it) ? 0 : 1].mem;
        if (!rsp_disciplined(m)) {
          bool dup = !out.empty() && out.back().mn == "mem_guard" &&
                     out.back().ops[0].mem == m;
          if (!dup) {
            out.push_back(ins("mem_guard", {op_mem(m)}, g, it.line));
            Item a = it;
            a.group = g;
            out.push_back(std::move(a));
            g++;
            continue;
          }
          Item a = it;
          a.group = out.back().group;
          out.push_back(std::move(a));
          continue;
        }
      }
      out.push_back(it);
    }
    f.body = std::move(out);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Item-level range analysis mirroring the instruction-level transfer rules;
// used by the optimizer to prove guards redundant before assembly.

namespace {

struct Loc {
  size_t f, i;
};

struct FlatView {
  std::vector<Loc> flat;
  std::map<std::string, size_t> label_at;  // label/function name -> flat index
  const SasmProgram* p = nullptr;

  const Item& at(size_t k) const { return p->functions[flat[k].f].body[flat[k].i]; }
  size_t size() const { return flat.size(); }
};

FlatView flatten(const SasmProgram& p) {
  FlatView v;
  v.p = &p;
  for (size_t f = 0; f < p.functions.size(); f++) {
    v.label_at.emplace(p.functions[f].name, v.flat.size());
    for (size_t i = 0; i < p.functions[f].body.size(); i++) {
      v.flat.push_back({f, i});
      if (p.functions[f].body[i].is_label)
        v.label_at[p.functions[f].body[i].label] = v.flat.size() - 1;
    }
  }
  return v;
}

bool is_branch_mn(const std::string& mn) {
  return mn == "jmp" || mn == "je" || mn == "jne" || mn == "jl" || mn == "jge";
}

std::vector<size_t> item_succ(const FlatView& v, size_t k) {
  const Item& it = v.at(k);
  std::vector<size_t> s;
  auto fallthrough = [&] {
    if (k + 1 < v.size()) s.push_back(k + 1);
  };
  if (it.is_label) {
    fallthrough();
    return s;
  }
  if (is_branch_mn(it.mn) && !it.ops.empty() && it.ops[0].kind == OperandKind::Label) {
    auto t = v.label_at.find(it.ops[0].label);
    if (t != v.label_at.end()) s.push_back(t->second);
    if (it.mn != "jmp") fallthrough();
    return s;
  }
  if (it.mn == "jmp" || it.mn == "ret") return s;  // indirect / terminal
  fallthrough();
  return s;
}

RangeFact item_transfer(const Item& it, const RangeFact& in) {
  RangeFact out = in;
  if (it.is_label || it.mn == "nop") return out;
  if (it.mn == "cfi_label") return RangeFact::all_top();
  if (it.mn == "mem_guard") {
    const MemExpr& m = it.ops[0].mem;
    if (plain_base_disp(m)) {
      Interval g = Interval::Dev(-m.disp, -m.disp);
      out[*m.base] = Interval::meet(out[*m.base], g);
    }
    return out;
  }
  if (it.mn == "cfi_guard") {
    out[Reg::r11] = Interval::Top();  // scratch load from region C
    return out;
  }
  if (it.mn == "mov" && it.ops.size() == 2) {
    if (it.ops[1].kind == OperandKind::Mem || it.ops[0].kind == OperandKind::Mem) {
      const MemExpr& m = it.ops[it.ops[0].kind == OperandKind::Mem ? 0 : 1].mem;
      if (plain_base_disp(m) && m.disp >= -kGuardSize && m.disp <= kGuardSize)
        out[*m.base] = Interval::Dev(-m.disp, -m.disp);
      if (it.ops[0].kind == OperandKind::Reg) out[it.ops[0].reg] = Interval::Top();
      return out;
    }
    if (it.ops[0].kind == OperandKind::Reg && it.ops[1].kind == OperandKind::Reg) {
      out[it.ops[0].reg] = in[it.ops[1].reg];
      return out;
    }
    if (it.ops[0].kind == OperandKind::Reg) {
      out[it.ops[0].reg] = Interval::Top();
      return out;
    }
    return RangeFact::all_top();
  }
  if (it.mn == "lea" && it.ops.size() == 2 && it.ops[0].kind == OperandKind::Reg) {
    if (it.ops[1].kind == OperandKind::Mem && plain_base_disp(it.ops[1].mem) &&
        !it.ops[1].mem.index)
      out[it.ops[0].reg] = in[*it.ops[1].mem.base].shifted(it.ops[1].mem.disp);
    else
      out[it.ops[0].reg] = Interval::Top();
    return out;
  }
  if ((it.mn == "add" || it.mn == "sub") && it.ops.size() == 2 &&
      it.ops[0].kind == OperandKind::Reg && it.ops[1].kind == OperandKind::Imm) {
    int64_t d = it.mn == "add" ? it.ops[1].imm : -it.ops[1].imm;
    out[it.ops[0].reg] = out[it.ops[0].reg].shifted(d);
    return out;
  }
  if (it.mn == "cmp") return out;
  if ((it.mn == "add" || it.mn == "sub" || it.mn == "and" || it.mn == "or" ||
       it.mn == "xor") &&
      !it.ops.empty() && it.ops[0].kind == OperandKind::Reg) {
    out[it.ops[0].reg] = Interval::Top();
    return out;
  }
  if (it.mn == "push" || it.mn == "call") {
    out[Reg::rsp] = Interval::Top();
    return out;
  }
  if (it.mn == "pop" && !it.ops.empty() && it.ops[0].kind == OperandKind::Reg) {
    out[it.ops[0].reg] = Interval::Top();
    out[Reg::rsp] = Interval::Top();
    return out;
  }
  if (is_branch_mn(it.mn)) return out;
  return RangeFact::all_top();
}

std::map<size_t, RangeFact> item_analysis(const FlatView& v) {
  std::map<size_t, RangeFact> in;
  std::set<size_t> worklist;
  for (size_t k = 0; k < v.size(); k++) {
    const Item& it = v.at(k);
    if ((!it.is_label && it.mn == "cfi_label") || k == 0) {
      in[k] = RangeFact::all_top();
      worklist.insert(k);
    }
  }
  while (!worklist.empty()) {
    size_t k = *worklist.begin();
    worklist.erase(worklist.begin());
    RangeFact out = item_transfer(v.at(k), in.at(k));
    for (size_t s : item_succ(v, k)) {
      auto it = in.find(s);
      if (it == in.end()) {
        in[s] = out;
        worklist.insert(s);
      } else {
        RangeFact m = RangeFact::join(it->second, out);
        if (!(m == it->second)) {
          it->second = m;
          worklist.insert(s);
        }
      }
    }
  }
  return in;
}

bool fact_justifies(const RangeFact& f, const MemExpr& m) {
  if (!plain_base_disp(m)) return false;
  const Interval& iv = f[*m.base];
  if (iv.is_top()) return false;
  return iv.lo + m.disp >= -kGuardSize && iv.hi + m.disp <= kGuardSize;
}

// Post-optimization sanity: every access must still be provable the way the
// verifier proves it. On failure the optimizer discards its work.
bool accesses_ok(const SasmProgram& p) {
  FlatView v = flatten(p);
  auto facts = item_analysis(v);
  for (size_t k = 0; k < v.size(); k++) {
    const Item& it = v.at(k);
    if (!is_store(it) && !is_load(it)) continue;
    const MemExpr& m = it.ops[is_store(it) ? 0 : 1].mem;
    if (rsp_disciplined(m)) continue;
    bool adj = k > 0 && !v.at(k - 1).is_label && v.at(k - 1).mn == "mem_guard" &&
               v.at(k - 1).ops[0].mem == m;
    if (adj) continue;
    auto f = facts.find(k);
    if (f == facts.end()) continue;  // unreachable item
    if (!fact_justifies(f->second, m)) return false;
  }
  return true;
}

void erase_flat(SasmProgram& p, const FlatView& v, size_t k) {
  auto [f, i] = v.flat[k];
  p.functions[f].body.erase(p.functions[f].body.begin() + i);
}

void insert_before_flat(SasmProgram& p, const FlatView& v, size_t k, Item it) {
  auto [f, i] = v.flat[k];
  p.functions[f].body.insert(p.functions[f].body.begin() + i, std::move(it));
}

}  // namespace

SasmProgram optimize(SasmProgram p, const Options&) {
  SasmProgram original = p;

  // Redundant-check elimination: drop guards whose access is already
  // justified by the fact flowing into them. The access that follows the
  // guard re-establishes the same fact, so removals cannot cascade into
  // unsoundness.
  {
    FlatView v = flatten(p);
    auto facts = item_analysis(v);
    std::vector<size_t> dead;
    for (size_t k = 0; k < v.size(); k++) {
      const Item& it = v.at(k);
      if (it.is_label || it.mn != "mem_guard" || it.group == kPreheaderGroup) continue;
      auto f = facts.find(k);
      if (f != facts.end() && fact_justifies(f->second, it.ops[0].mem)) dead.push_back(k);
    }
    for (auto r = dead.rbegin(); r != dead.rend(); ++r) erase_flat(p, v, *r);
  }

  // Loop check hoisting: for a guard inside a loop whose base advances by a
  // bounded stride, a copy in the preheader makes the in-loop guard
  // redundant (previous iteration's access + this iteration's stride stay
  // within one guard size). Insert the copy, re-analyze, and commit only if
  // the in-loop guard is then eliminable; otherwise revert.
  for (int round = 0; round < 64; round++) {
    FlatView v = flatten(p);
    bool committed = false;
    for (size_t j = 0; j < v.size() && !committed; j++) {
      const Item& br = v.at(j);
      if (br.is_label || !is_branch_mn(br.mn) || br.ops.empty() ||
          br.ops[0].kind != OperandKind::Label)
        continue;
      auto t = v.label_at.find(br.ops[0].label);
      if (t == v.label_at.end() || t->second >= j) continue;  // not a back edge
      size_t head = t->second;
      for (size_t k = head + 1; k < j && !committed; k++) {
        const Item& g = v.at(k);
        if (g.is_label || g.mn != "mem_guard" || g.group == kPreheaderGroup) continue;
        if (!plain_base_disp(g.ops[0].mem)) continue;
        Item pre = ins("mem_guard", {g.ops[0]}, kPreheaderGroup, g.line);
        SasmProgram trial = p;
        // a nop keeps the loop-head access out of the guard's adjacency
        // shadow: the access is justified by the flowing fact, so the back
        // edge may legally land on it
        insert_before_flat(trial, v, head, ins("nop", {}, kPreheaderGroup, g.line));
        insert_before_flat(trial, v, head, pre);
        FlatView tv = flatten(trial);
        auto facts = item_analysis(tv);
        size_t gk = k + 2;  // guard shifted by the inserted preheader + nop
        auto f = facts.find(gk);
        if (f != facts.end() && fact_justifies(f->second, tv.at(gk).ops[0].mem)) {
          erase_flat(trial, tv, gk);
          p = std::move(trial);
          committed = true;
        }
      }
    }
    if (!committed) break;
  }

  if (!accesses_ok(p)) return original;
  return p;
}

// ---------------------------------------------------------------------------
// Assembly

namespace {

struct Pending {
  isa::Instruction ins;
  std::string label;  // branch target / address-of
  bool addrof = false;
  size_t flat_idx = 0;
};

std::variant<isa::MemOperand, InstrumentError> to_mem(const MemExpr& e, int line) {
  isa::MemOperand m;
  if (!e.base)
    return InstrumentError{"BadOperands",
                           "line " + std::to_string(line) + ": memory operand needs a base"};
  if (e.index == Reg::rsp)
    return InstrumentError{"BadOperands",
                           "line " + std::to_string(line) + ": rsp cannot be an index"};
  if (e.disp < INT32_MIN || e.disp > INT32_MAX)
    return InstrumentError{"BadOperands",
                           "line " + std::to_string(line) + ": displacement too large"};
  m.base = e.base;
  m.index = e.index;
  m.scale = e.scale;
  m.disp = int32_t(e.disp);
  m.form = e.index ? isa::MemForm::BaseIndexDisp : isa::MemForm::BaseDisp;
  return m;
}

isa::MemOperand rip_mem() {
  isa::MemOperand m;
  m.form = isa::MemForm::RipRelative;
  m.disp = 0;
  m.disp_width = 4;
  return m;
}

struct ItemBuilder {
  uint32_t next_label_id = 0;
  uint32_t id_salt = 0;
  std::optional<InstrumentError> error;

  std::optional<InstrumentError> bad(int line, const std::string& msg) {
    return InstrumentError{"BadOperands", "line " + std::to_string(line) + ": " + msg};
  }

  // Produces the instruction skeletons for one item. Branch and address-of
  // targets are left at zero and patched once offsets are known; their
  // encoded lengths do not depend on the final displacement.
  std::optional<InstrumentError> build(const Item& it, size_t flat_idx,
                                       std::vector<Pending>& out) {
    int ln = it.line;
    auto push = [&](isa::Instruction i, std::string lbl = "", bool addrof = false) {
      out.push_back(Pending{std::move(i), std::move(lbl), addrof, flat_idx});
    };
    auto mem_of = [&](const MemExpr& e) -> std::optional<isa::MemOperand> {
      auto r = to_mem(e, ln);
      if (auto* err = std::get_if<InstrumentError>(&r)) {
        error = *err;
        return std::nullopt;
      }
      return std::get<isa::MemOperand>(r);
    };

    const auto& ops = it.ops;
    auto nops = [&](size_t n) { return ops.size() == n; };

    if (it.mn == "nop") {
      push(isa::make_nop());
      return std::nullopt;
    }
    if (it.mn == "cfi_label") {
      push(isa::make_cfi_label(next_label_id++ + id_salt));
      return std::nullopt;
    }
    if (it.mn == "mem_guard") {
      auto m = mem_of(ops[0].mem);
      if (!m) return error;
      push(isa::make_bndcl(0, *m));
      push(isa::make_bndcu(0, *m));
      return std::nullopt;
    }
    if (it.mn == "cfi_guard") {
      Reg tgt = ops[0].reg;
      isa::MemOperand m;
      m.base = tgt;
      push(isa::make_load(Reg::r11, m));
      push(isa::make_bndcl_reg(1, Reg::r11));
      push(isa::make_bndcu_reg(1, Reg::r11));
      return std::nullopt;
    }
    if (it.mn == "mov" || it.mn == "lea") {
      if (!nops(2)) return bad(ln, it.mn + " needs two operands");
      const Operand& d = ops[0];
      const Operand& s = ops[1];
      if (d.kind == OperandKind::Reg && s.kind == OperandKind::AddrOf) {
        push(isa::make_lea(d.reg, rip_mem()), s.label, true);
        return std::nullopt;
      }
      if (it.mn == "lea") {
        if (d.kind != OperandKind::Reg || s.kind != OperandKind::Mem)
          return bad(ln, "lea needs reg, [mem] or reg, &label");
        auto m = mem_of(s.mem);
        if (!m) return error;
        push(isa::make_lea(d.reg, *m));
        return std::nullopt;
      }
      if (d.kind == OperandKind::Reg && s.kind == OperandKind::Imm) {
        push(isa::make_mov_reg_imm(d.reg, s.imm));
        return std::nullopt;
      }
      if (d.kind == OperandKind::Reg && s.kind == OperandKind::Reg) {
        push(isa::make_mov_reg_reg(d.reg, s.reg));
        return std::nullopt;
      }
      if (d.kind == OperandKind::Reg && s.kind == OperandKind::Mem) {
        auto m = mem_of(s.mem);
        if (!m) return error;
        push(isa::make_load(d.reg, *m));
        return std::nullopt;
      }
      if (d.kind == OperandKind::Mem && s.kind == OperandKind::Reg) {
        auto m = mem_of(d.mem);
        if (!m) return error;
        push(isa::make_store(*m, s.reg));
        return std::nullopt;
      }
      return bad(ln, "unsupported mov operands");
    }
    if (it.mn == "add" || it.mn == "sub" || it.mn == "and" || it.mn == "or" ||
        it.mn == "xor" || it.mn == "cmp") {
      if (!nops(2) || ops[0].kind != OperandKind::Reg)
        return bad(ln, it.mn + " needs reg, src");
      static const std::map<std::string, isa::AluOp> alu = {
          {"add", isa::AluOp::Add}, {"sub", isa::AluOp::Sub}, {"and", isa::AluOp::And},
          {"or", isa::AluOp::Or},   {"xor", isa::AluOp::Xor}, {"cmp", isa::AluOp::Cmp}};
      isa::AluOp op = alu.at(it.mn);
      if (ops[1].kind == OperandKind::Reg) {
        push(isa::make_alu_rr(op, ops[0].reg, ops[1].reg));
        return std::nullopt;
      }
      if (ops[1].kind == OperandKind::Imm) {
        if (op != isa::AluOp::Add && op != isa::AluOp::Sub)
          return bad(ln, it.mn + " has no immediate form; use a register");
        if (ops[1].imm < INT32_MIN || ops[1].imm > INT32_MAX)
          return bad(ln, "immediate exceeds 32 bits");
        push(isa::make_alu_ri(op, ops[0].reg, int32_t(ops[1].imm)));
        return std::nullopt;
      }
      return bad(ln, "unsupported " + it.mn + " operands");
    }
    if (it.mn == "push" || it.mn == "pop") {
      if (!nops(1) || ops[0].kind != OperandKind::Reg)
        return bad(ln, it.mn + " needs a register");
      push(it.mn == "push" ? isa::make_push(ops[0].reg) : isa::make_pop(ops[0].reg));
      return std::nullopt;
    }
    if (it.mn == "jmp" || it.mn == "call") {
      if (!nops(1)) return bad(ln, it.mn + " needs one operand");
      bool call = it.mn == "call";
      if (ops[0].kind == OperandKind::Label) {
        push(call ? isa::make_call_rel(0) : isa::make_jmp_rel(0, 4), ops[0].label);
        return std::nullopt;
      }
      if (ops[0].kind == OperandKind::Reg) {
        push(call ? isa::make_call_reg(ops[0].reg) : isa::make_jmp_reg(ops[0].reg));
        return std::nullopt;
      }
      if (ops[0].kind == OperandKind::Mem) {
        auto m = mem_of(ops[0].mem);
        if (!m) return error;
        push(call ? isa::make_call_mem(*m) : isa::make_jmp_mem(*m));
        return std::nullopt;
      }
      return bad(ln, "unsupported " + it.mn + " operand");
    }
    if (it.mn == "je" || it.mn == "jne" || it.mn == "jl" || it.mn == "jge") {
      if (!nops(1) || ops[0].kind != OperandKind::Label)
        return bad(ln, it.mn + " needs a label");
      static const std::map<std::string, isa::Cond> cc = {{"je", isa::Cond::Eq},
                                                          {"jne", isa::Cond::Ne},
                                                          {"jl", isa::Cond::Lt},
                                                          {"jge", isa::Cond::Ge}};
      push(isa::make_jcc_rel(cc.at(it.mn), 0), ops[0].label);
      return std::nullopt;
    }
    if (it.mn == "ret") {
      push(isa::make_ret());
      return std::nullopt;
    }
    if (it.mn == "syscall") {
      push(isa::make_syscall_gate());
      return std::nullopt;
    }
    return bad(ln, "unknown mnemonic " + it.mn);
  }
};

struct Layout {
  std::vector<uint8_t> code;
  std::map<std::string, uint64_t> code_labels;
  std::set<uint64_t> inserted_labels;                    // cfi_label offsets
  std::vector<std::pair<uint64_t, uint64_t>> item_span;  // per flat item
};

constexpr uint64_t kXorKeyBase = 0x5A5A5A5A5A5A5A5AULL;

std::variant<Layout, InstrumentError> layout_code(
    const std::vector<Item>& flat, const std::map<std::string, uint64_t>& data_off,
    uint32_t id_salt, const Options& opts) {
  Layout L;
  L.item_span.resize(flat.size());
  std::vector<Pending> pend;
  ItemBuilder builder;
  builder.id_salt = id_salt;

  // pass A: lengths and offsets
  uint64_t off = 0;
  std::vector<std::vector<uint8_t>> chunks;
  std::vector<size_t> pend_begin(flat.size());
  for (size_t k = 0; k < flat.size(); k++) {
    pend_begin[k] = pend.size();
    const Item& it = flat[k];
    if (it.is_label) {
      if (L.code_labels.count(it.label))
        return InstrumentError{"BadOperands", "duplicate label " + it.label};
      L.code_labels[it.label] = off;
      L.item_span[k] = {off, off};
      continue;
    }
    size_t first = pend.size();
    if (auto err = builder.build(it, k, pend)) return *err;
    uint64_t start = off;
    for (size_t q = first; q < pend.size(); q++) {
      pend[q].ins.address = off;
      if (!pend[q].label.empty()) pend[q].ins.rel_target = off;  // placeholder
      auto enc = isa::encode(pend[q].ins);
      if (auto* e = std::get_if<isa::EncodeError>(&enc))
        return InstrumentError{"BadOperands",
                               "line " + std::to_string(it.line) + ": " + e->message};
      auto& bytes = std::get<std::vector<uint8_t>>(enc);
      pend[q].ins.length = uint8_t(bytes.size());
      if (pend[q].ins.cls == isa::InstrClass::CfiLabel)
        L.inserted_labels.insert(off);
      off += bytes.size();
      chunks.push_back(std::move(bytes));
    }
    L.item_span[k] = {start, off};
  }
  uint64_t code_size = off;
  if (code_size + kTrampolineSize > opts.c_capacity || code_size > UINT32_MAX)
    return InstrumentError{"ImageTooLarge", "code section exceeds capacity"};

  // pass B: patch label-dependent displacements
  for (size_t q = 0; q < pend.size(); q++) {
    Pending& pn = pend[q];
    if (pn.label.empty()) continue;
    uint64_t end = pn.ins.address + pn.ins.length;
    if (pn.addrof) {
      int64_t disp;
      if (auto c = L.code_labels.find(pn.label); c != L.code_labels.end()) {
        disp = int64_t(c->second) - int64_t(end);
      } else if (auto d = data_off.find(pn.label); d != data_off.end()) {
        // D starts one trampoline plus one guard page past the end of code
        disp = int64_t(code_size + kTrampolineSize + kGuardSize + d->second) -
               int64_t(end);
      } else {
        return InstrumentError{"BadOperands", "undefined label " + pn.label};
      }
      if (disp < INT32_MIN || disp > INT32_MAX)
        return InstrumentError{"ImageTooLarge", "rip displacement overflow"};
      pn.ins.mem.disp = int32_t(disp);
    } else {
      auto c = L.code_labels.find(pn.label);
      if (c == L.code_labels.end())
        return InstrumentError{"BadOperands",
                               "branch to non-code label " + pn.label};
      pn.ins.rel_target = c->second;
    }
    auto enc = isa::encode(pn.ins);
    if (auto* e = std::get_if<isa::EncodeError>(&enc))
      return InstrumentError{"BadOperands", e->message};
    auto& bytes = std::get<std::vector<uint8_t>>(enc);
    assert(bytes.size() == pn.ins.length);
    chunks[q] = std::move(bytes);
  }
  for (auto& c : chunks) L.code.insert(L.code.end(), c.begin(), c.end());
  return L;
}

std::vector<Item> flatten_items(const SasmProgram& p) {
  std::vector<Item> flat;
  bool has_halt = false;
  for (auto& f : p.functions) {
    flat.push_back(label_item(f.name, -1, f.line));
    for (auto& it : f.body) {
      if (it.is_label && it.label == "__halt") has_halt = true;
      flat.push_back(it);
    }
  }
  // terminal self-loop so the last instruction never falls off the end of C
  if (!has_halt) {
    flat.push_back(label_item("__halt", -1, 0));
    Item j;
    j.mn = "jmp";
    j.ops.push_back(op_addr("__halt"));
    j.ops[0].kind = OperandKind::Label;
    flat.push_back(std::move(j));
  }
  return flat;
}

std::variant<image::SipbImage, InstrumentError> assemble_impl(const SasmProgram& p,
                                                              const Options& opts,
                                                              bool enforce_magic) {
  // data layout first; it does not depend on code size
  std::map<std::string, uint64_t> data_off;
  std::vector<uint8_t> data;
  for (auto& d : p.data) {
    while (data.size() % 8) data.push_back(0);
    data_off[d.name] = data.size();
    data.insert(data.end(), d.bytes.begin(), d.bytes.end());
  }

  std::vector<Item> flat = flatten_items(p);
  uint32_t id_salt = 0;

  for (int attempt = 0; attempt < 64; attempt++) {
    auto lr = layout_code(flat, data_off, id_salt, opts);
    if (auto* err = std::get_if<InstrumentError>(&lr)) return *err;
    Layout& L = std::get<Layout>(lr);

    if (enforce_magic) {
      // The loader's label scan is byte-blind: any MAGIC occurrence that is
      // not one of our cfi_labels must be rewritten away.
      std::optional<uint64_t> collision;
      for (uint64_t o : isa::scan_cfi_labels(L.code))
        if (!L.inserted_labels.count(o)) {
          collision = o;
          break;
        }
      if (collision) {
        uint64_t o = *collision;
        size_t idx = SIZE_MAX;
        for (size_t k = 0; k < flat.size(); k++)
          if (L.item_span[k].first <= o && o < L.item_span[k].second) idx = k;
        if (idx == SIZE_MAX)
          return InstrumentError{"MagicCollisionUnresolvable", "collision outside items"};
        const Item it = flat[idx];
        uint64_t start = L.item_span[idx].first;
        uint64_t key = kXorKeyBase ^ (uint64_t(attempt + 1) * 0x0101010101010101ULL);
        if (it.mn == "cfi_label") {
          id_salt += 0x01000000;  // ids are rewritten at load; any value works
        } else if (it.mn == "mov" && it.ops.size() == 2 &&
                   it.ops[0].kind == OperandKind::Reg &&
                   it.ops[1].kind == OperandKind::Imm && o >= start + 2) {
          // imm64 carries the pattern: split it with an xor mask
          int64_t imm = it.ops[1].imm;
          std::vector<Item> repl = {
              ins("mov", {it.ops[0], op_imm(int64_t(uint64_t(imm) ^ key))}, it.group,
                  it.line),
              ins("mov", {op_reg(Reg::r11), op_imm(int64_t(key))}, it.group, it.line),
              ins("xor", {it.ops[0], op_reg(Reg::r11)}, it.group, it.line),
          };
          flat.erase(flat.begin() + idx);
          flat.insert(flat.begin() + idx, repl.begin(), repl.end());
        } else if ((it.mn == "add" || it.mn == "sub") && it.ops.size() == 2 &&
                   it.ops[1].kind == OperandKind::Imm && o >= start + 2 &&
                   it.ops[1].imm - int64_t(0x11111111 + attempt) >= INT32_MIN) {
          int64_t c = 0x11111111 + attempt;
          std::vector<Item> repl = {
              ins(it.mn, {it.ops[0], op_imm(it.ops[1].imm - c)}, it.group, it.line),
              ins(it.mn, {it.ops[0], op_imm(c)}, it.group, it.line),
          };
          flat.erase(flat.begin() + idx);
          flat.insert(flat.begin() + idx, repl.begin(), repl.end());
        } else {
          // shift the pattern off its alignment: nop ahead of the atomic group
          size_t at = idx;
          if (it.group != -1)
            while (at > 0 && flat[at - 1].group == it.group) at--;
          flat.insert(flat.begin() + at, ins("nop", {}, -1, it.line));
        }
        continue;
      }
    }

    // success path: build the image
    auto e = L.code_labels.find(p.entry);
    if (e == L.code_labels.end())
      return InstrumentError{"BadOperands", "entry function not found"};
    // patch data address references with section-relative offsets
    uint64_t pos = 0;
    std::vector<uint8_t> final_data = data;
    for (auto& d : p.data) {
      while (pos % 8) pos++;
      for (auto& [boff, lbl] : d.addr_refs) {
        uint64_t val;
        if (auto c = L.code_labels.find(lbl); c != L.code_labels.end())
          val = c->second;
        else
          val = data_off.at(lbl);
        for (int i = 0; i < 8; i++)
          final_data[pos + boff + i] = uint8_t(val >> (8 * i));
      }
      pos += d.bytes.size();
    }

    image::SipbImage img;
    img.code = std::move(L.code);
    img.data = std::move(final_data);
    img.entry = uint32_t(e->second);
    img.stack_reserve = opts.stack_reserve;
    img.d_capacity = opts.d_capacity ? opts.d_capacity
                                     : img.data.size() + kDefaultHeap + opts.stack_reserve;
    if (img.data.size() > UINT32_MAX)
      return InstrumentError{"ImageTooLarge", "data section exceeds 4 GiB"};
    if (auto v = image::check_invariants(img))
      return InstrumentError{"ImageTooLarge", v->detail};
    return img;
  }
  return InstrumentError{"MagicCollisionUnresolvable",
                         "could not remove stray label patterns"};
}

}  // namespace

std::variant<image::SipbImage, InstrumentError> assemble(const SasmProgram& p,
                                                         const Options& opts) {
  return assemble_impl(p, opts, true);
}

std::variant<image::SipbImage, InstrumentError> assemble_raw(const SasmProgram& p,
                                                             const Options& opts) {
  SasmProgram q = p;
  for (auto& f : q.functions)
    if (f.name == q.entry)
      f.body.insert(f.body.begin(), ins("cfi_label", {}, -1, f.line));
  return assemble_impl(q, opts, false);
}

std::variant<image::SipbImage, InstrumentError> instrument(const SasmProgram& p,
                                                           const Options& opts) {
  SasmProgram q = insert_cfi_labels(p);
  q = lower_unsafe_transfers(std::move(q));
  auto guarded = insert_mem_guards(std::move(q), opts.confine_loads);
  if (auto* err = std::get_if<InstrumentError>(&guarded)) return *err;
  SasmProgram r = std::move(std::get<SasmProgram>(guarded));
  if (opts.optimize) r = optimize(std::move(r), opts);
  return assemble(r, opts);
}

}  // namespace mmdsfi::instrument
