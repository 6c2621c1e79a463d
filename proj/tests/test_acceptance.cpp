// Acceptance gate: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Each check is self-contained and uses only the public
// library surface.
#include <chrono>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmdsfi/analysis.hpp"
#include "mmdsfi/corpus.hpp"
#include "mmdsfi/instrument.hpp"
#include "mmdsfi/runtime.hpp"
#include "mmdsfi/sasm.hpp"
#include "mmdsfi/verifier.hpp"

using namespace mmdsfi;
using isa::Reg;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int n, bool pass, const std::string& detail) {
  std::printf("ACCEPTANCE %d: %s  %s\n", n, pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  if (!pass) g_failures++;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

image::SipbImage build(const std::string& src, instrument::Options opts = {},
                       bool raw = false) {
  auto p = sasm::parse_sasm(src);
  if (auto* e = std::get_if<sasm::ParseError>(&p))
    throw std::runtime_error("parse: " + e->detail);
  auto r = raw ? instrument::assemble_raw(std::get<sasm::SasmProgram>(p), opts)
               : instrument::instrument(std::get<sasm::SasmProgram>(p), opts);
  if (auto* e = std::get_if<instrument::InstrumentError>(&r))
    throw std::runtime_error("instrument: " + e->code + ": " + e->detail);
  return std::get<image::SipbImage>(r);
}

// Pointer-free trace normalization: pids, syscall numbers, return values,
// transferred payloads, and exit codes, in global order.
std::string trace_key(const runtime::RunReport& rep, int only_pid = -1) {
  std::string k;
  for (auto& r : rep.trace) {
    if (only_pid >= 0 && r.pid != only_pid) continue;
    k += std::to_string(r.pid) + ":" + std::to_string(r.num) + ":" +
         std::to_string(int64_t(r.ret)) + ":" + r.payload + "|";
    if (r.num == 0) k += "exit=" + std::to_string(r.args[0]) + "|";
  }
  return k;
}

struct WorldRun {
  runtime::RunReport rep;
  size_t monitor_events = 0;
  std::string output;  // main process stdout
  bool ok = true;
  std::string error;
};

WorldRun run_world(const image::SipbImage& img,
                   const std::vector<image::SipbImage>& spawnable,
                   bool permissive, uint64_t max_steps = 10'000'000) {
  WorldRun w;
  runtime::Sandbox sb;
  sb.images = spawnable;
  auto lr = sb.load(img, permissive);
  if (auto* e = std::get_if<runtime::LoadError>(&lr)) {
    w.ok = false;
    w.error = e->message;
    for (auto& v : e->violations) w.error += " " + v.code;
    return w;
  }
  w.rep = sb.monitor_run(max_steps);
  w.monitor_events = sb.monitor_events.size();
  if (!sb.procs.empty()) w.output = sb.procs.front().output;
  return w;
}

// --- criterion 1: benign corpus + fuzzed vectors under the monitor --------

std::string gen_fuzz_program(std::mt19937& rng) {
  static const char* regs[] = {"rax", "rbx", "rcx", "rdx", "rsi",
                               "rdi", "r8",  "r9",  "r12", "r15"};
  auto reg = [&] { return regs[rng() % 10]; };
  std::ostringstream out;
  out << "func main:\n";
  bool used_done = false;
  int n = 4 + int(rng() % 11);
  for (int i = 0; i < n; i++) {
    switch (rng() % 9) {
      case 0: out << "  mov " << reg() << ", " << rng() % 100000 << "\n"; break;
      case 1: out << "  mov " << reg() << ", " << reg() << "\n"; break;
      case 2:
        out << "  " << (rng() % 2 ? "add " : "sub ") << reg() << ", "
            << rng() % 512 << "\n";
        break;
      case 3: out << "  lea " << reg() << ", &buf\n"; break;
      case 4:
        out << "  mov [" << reg() << "+" << 8 * (rng() % 8) << "], " << reg()
            << "\n";
        break;
      case 5:
        out << "  mov " << reg() << ", [" << reg() << "+" << 8 * (rng() % 8)
            << "]\n";
        break;
      case 6: {
        const char* r = reg();
        out << "  push " << r << "\n  pop " << r << "\n";
        break;
      }
      case 7:
        out << "  cmp " << reg() << ", " << reg() << "\n  je done\n";
        used_done = true;
        break;
      case 8:
        out << "  mov rax, 1\n  mov rdi, 1\n  lea rsi, &buf\n"
               "  mov rdx, 8\n  syscall\n";
        break;
    }
  }
  if (used_done) out << "done:\n";
  out << "  mov rax, 0\n  mov rdi, 0\n  syscall\n";
  out << ".data buf: quad 0, 0, 0, 0, 0, 0, 0, 0\n";
  return out.str();
}

void criterion_1() {
  auto t0 = Clock::now();
  size_t assertions = 0, corpus_runs = 0, fuzz_vectors = 0, contained = 0;
  std::string first_err;

  auto child = build(corpus::benign_by_name("spawn_child")->source);
  for (auto& prog : corpus::benign_programs()) {
    auto w = run_world(build(prog.source), {child}, false);
    if (!w.ok) {
      first_err = prog.name + ": " + w.error;
      assertions++;
      continue;
    }
    assertions += w.monitor_events;
    corpus_runs++;
  }

  std::mt19937 rng(0xC0FFEE);
  for (int i = 0; i < 10000; i++) {
    std::string src = gen_fuzz_program(rng);
    auto p = sasm::parse_sasm(src);
    auto r = instrument::instrument(std::get<sasm::SasmProgram>(p), {});
    if (std::holds_alternative<instrument::InstrumentError>(r)) continue;
    auto w = run_world(std::get<image::SipbImage>(r), {}, false, 100000);
    fuzz_vectors++;
    if (!w.ok) {
      if (first_err.empty()) first_err = "fuzz program rejected: " + w.error;
      assertions++;
      continue;
    }
    assertions += w.monitor_events;
    if (!w.rep.faults.empty()) contained++;
  }

  // byte-flip mutations of a known-good image: anything the verifier still
  // accepts must run assertion-free
  auto base = build(corpus::benign_by_name("hello")->source);
  size_t accepted_mutants = 0;
  for (int i = 0; i < 1500; i++) {
    auto img = base;
    int flips = 1 + int(rng() % 4);
    for (int f = 0; f < flips; f++)
      img.code[rng() % img.code.size()] ^= uint8_t(1 + rng() % 255);
    fuzz_vectors++;
    if (!verifier::verify(img).accepted) continue;
    accepted_mutants++;
    auto w = run_world(img, {}, false, 100000);
    if (!w.ok) continue;  // loader-level rejection still contains the mutant
    assertions += w.monitor_events;
  }

  double secs = seconds_since(t0);
  bool pass = assertions == 0 && corpus_runs == corpus::benign_programs().size() &&
              fuzz_vectors >= 10000 && secs < 300.0;
  std::ostringstream d;
  d << "monitor assertions=" << assertions << " over " << corpus_runs
    << " corpus programs and " << fuzz_vectors << " fuzzed vectors ("
    << contained << " contained faults, " << accepted_mutants
    << " accepted mutants) in " << int(secs) << "s";
  if (!first_err.empty()) d << "; first error: " << first_err;
  report(1, pass, d.str());
}

// --- criterion 2: adversarial images --------------------------------------

void criterion_2() {
  auto cases = corpus::adversarial_cases();
  size_t ok = 0;
  std::string bad;
  for (auto& adv : cases) {
    std::string got = corpus::check_image_bytes(adv.bytes);
    if (got == adv.expected_code) {
      ok++;
    } else if (bad.empty()) {
      bad = adv.name + " expected " + adv.expected_code + " got " + got;
    }
  }
  bool pass = cases.size() >= 15 && ok == cases.size();
  std::ostringstream d;
  d << ok << "/" << cases.size() << " adversarial images rejected with their "
    << "expected codes";
  if (!bad.empty()) d << "; first mismatch: " << bad;
  report(2, pass, d.str());
}

// --- criterion 3: instrument -> verify closure ----------------------------

void criterion_3() {
  size_t ok = 0, total = 0;
  std::string bad;
  for (auto& prog : corpus::benign_programs()) {
    for (bool optimize : {true, false}) {
      for (bool confine : {true, false}) {
        total++;
        instrument::Options opts;
        opts.optimize = optimize;
        opts.confine_loads = confine;
        try {
          auto img = build(prog.source, opts);
          auto v = verifier::verify(img, verifier::Policy{confine});
          if (v.accepted) {
            ok++;
          } else if (bad.empty()) {
            bad = prog.name + (optimize ? "/opt" : "/noopt") +
                  (confine ? "/confine" : "/stores-only") + ": " +
                  v.violations.front().code;
          }
        } catch (const std::exception& e) {
          if (bad.empty()) bad = prog.name + ": " + e.what();
        }
      }
    }
  }
  std::ostringstream d;
  d << ok << "/" << total << " (program x optimize x load-confinement) "
    << "combinations verifier-accepted";
  if (!bad.empty()) d << "; first failure: " << bad;
  report(3, ok == total, d.str());
}

// --- criterion 4: semantic preservation -----------------------------------

void criterion_4() {
  size_t ok = 0, total = 0;
  std::string bad;
  auto child_inst = build(corpus::benign_by_name("spawn_child")->source);
  auto child_raw = build(corpus::benign_by_name("spawn_child")->source, {}, true);
  for (auto& prog : corpus::benign_programs()) {
    total++;
    auto inst = run_world(build(prog.source), {child_inst}, false);
    auto raw = run_world(build(prog.source, {}, true), {child_raw}, true);
    bool same = inst.ok && raw.ok && trace_key(inst.rep) == trace_key(raw.rep) &&
                inst.rep.faults.empty() && raw.rep.faults.empty();
    if (same) {
      ok++;
    } else if (bad.empty()) {
      bad = prog.name;
      if (!inst.rep.faults.empty())
        bad += " (instrumented fault: " +
               std::string(runtime::fault_name(inst.rep.faults[0].kind)) + ")";
    }
  }
  std::ostringstream d;
  d << ok << "/" << total << " programs with byte-identical syscall traces "
    << "(payloads, exit codes, spawn/pipe ordering)";
  if (!bad.empty()) d << "; first divergence: " << bad;
  report(4, ok == total, d.str());
}

// --- criterion 5: check elimination counters ------------------------------

void criterion_5() {
  instrument::Options noopt;
  noopt.optimize = false;
  auto& loop_src = corpus::benign_by_name("sum_loop")->source;
  auto opt_run = run_world(build(loop_src), {}, false);
  auto raw_run = run_world(build(loop_src, noopt), {}, false);

  auto& struct_src = corpus::benign_by_name("struct_fields")->source;
  auto v_opt = verifier::verify(build(struct_src));
  auto v_raw = verifier::verify(build(struct_src, noopt));

  bool pass = opt_run.ok && raw_run.ok && opt_run.rep.mem_guard_execs <= 2 &&
              raw_run.rep.mem_guard_execs >= 1000 &&
              v_opt.stats.mem_guard_count == 1 && v_raw.stats.mem_guard_count == 8;
  std::ostringstream d;
  d << "N=1000 loop dynamic mem_guards " << opt_run.rep.mem_guard_execs
    << " optimized / " << raw_run.rep.mem_guard_execs
    << " unoptimized; 8-field struct static checks " << v_opt.stats.mem_guard_count
    << " optimized / " << v_raw.stats.mem_guard_count << " unoptimized";
  report(5, pass, d.str());
}

// --- criterion 6: attack suite --------------------------------------------

// Runs one image under the monitor and hands back the sandbox for
// inspection of fault sites.
struct AttackRun {
  runtime::Sandbox sb;
  runtime::RunReport rep;
  bool loaded = false;
};

AttackRun run_attack(const image::SipbImage& img) {
  AttackRun a;
  auto lr = a.sb.load(img, false);
  if (std::holds_alternative<runtime::LoadError>(lr)) return a;
  a.loaded = true;
  a.rep = a.sb.monitor_run();
  return a;
}

bool fault_is_at_cfi_guard(const AttackRun& a) {
  if (a.rep.faults.empty()) return false;
  auto& f = a.rep.faults[0];
  if (f.kind != runtime::FaultKind::BoundLower &&
      f.kind != runtime::FaultKind::BoundUpper)
    return false;
  auto& p = a.sb.procs.front();
  if (f.rip < p.dom.c_begin || f.rip >= p.dom.c_end) return false;
  auto dr = isa::decode(p.code, f.rip - p.dom.c_begin);
  if (!std::holds_alternative<isa::Instruction>(dr)) return false;
  auto& in = std::get<isa::Instruction>(dr);
  return (in.cls == isa::InstrClass::BndCheckLower ||
          in.cls == isa::InstrClass::BndCheckUpper) &&
         in.bnd == 1;
}

void criterion_6() {
  std::vector<std::string> notes;
  bool pass = true;

  // (a) code injection: write executable-looking bytes into D, jump there.
  // 0x050f covers the classic "syscall" payload tail.
  const char* inject = R"(
func main:
  lea rbx, &sc
  mov rcx, 1371
  mov [rbx], rcx
  lea rdx, &sc
  jmp rdx
.data sc: quad 0
)";
  auto a = run_attack(build(inject));
  bool a_ok = a.loaded && fault_is_at_cfi_guard(a) && a.sb.monitor_events.empty();
  // the injected bytes live in D; a fault at the guard means no fetch from D
  // ever happened (a fetch would have been NonExecutableFetch)
  if (a.loaded)
    for (auto& f : a.rep.faults)
      if (f.kind == runtime::FaultKind::NonExecutableFetch) a_ok = false;
  pass = pass && a_ok;
  notes.push_back(std::string("injection ") + (a_ok ? "blocked-at-guard" : "NOT-BLOCKED"));

  // (b) ROP-style pivot: jump into the middle of a function (a return site
  // plus a byte offset, i.e. not a label)
  const char* rop = R"(
func main:
  lea rax, &gadget
  add rax, 3
  jmp rax
gadget:
  mov rax, 0
  mov rdi, 0
  syscall
)";
  auto b = run_attack(build(rop));
  bool b_ok = b.loaded && fault_is_at_cfi_guard(b) && b.sb.monitor_events.empty();
  pass = pass && b_ok;
  notes.push_back(std::string("rop-pivot ") + (b_ok ? "faulted-at-cfi_guard" : "NOT-FAULTED"));

  // (c) return-to-label: computed jump to a legitimate address-taken label
  // must SUCCEED while every criterion-1 assertion still holds
  const char* legit = R"(
func main:
  lea rax, &good
  jmp rax
good:
  mov rax, 1
  mov rdi, 1
  lea rsi, &msg
  mov rdx, 2
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data msg: bytes 111 107
)";
  auto c = run_attack(build(legit));
  bool c_ok = c.loaded && c.rep.faults.empty() && c.sb.monitor_events.empty() &&
              !c.sb.procs.empty() && c.sb.procs.front().output == "ok" &&
              c.sb.procs.front().exit_code == 0;
  pass = pass && c_ok;
  notes.push_back(std::string("return-to-label ") + (c_ok ? "succeeded-cleanly" : "BROKEN"));

  std::string d;
  for (auto& n : notes) d += n + "; ";
  report(6, pass, d);
}

// --- criterion 7: multi-SIP isolation -------------------------------------

void criterion_7() {
  // parent pipes a message to a benign child; a malicious sibling attacks
  const char* parent_src = R"(
func main:
  lea rdi, &fds
  mov rax, 5
  syscall
  mov rax, 3
  mov rdi, 0
  syscall
  mov rbx, rax
  mov rax, 3
  mov rdi, 1
  syscall
  mov rax, 1
  mov rdi, 3
  lea rsi, &msg
  mov rdx, 8
  syscall
  mov rax, 7
  mov rdi, rbx
  syscall
  mov rdi, rax
  mov rax, 0
  syscall
.data fds: quad 0, 0
.data msg: bytes 115 101 99 114 101 116 33 33
)";
  // malicious: a write syscall aimed outside its D, then a cross-domain
  // store; both verifier-legal, both contained at runtime
  const char* evil_src = R"(
func main:
  mov rax, 1
  mov rdi, 1
  mov rsi, 16777216
  mov rdx, 8
  syscall
  mov rbx, 16777216
  mov [rbx], rax
  mov rax, 0
  mov rdi, 0
  syscall
)";
  // stand-in sibling for the attack-free reference run: same spawn shape,
  // no attack
  const char* idle_src = "func main:\n  mov rax, 0\n  mov rdi, 0\n  syscall\n";

  auto parent = build(parent_src);
  auto reader = build(corpus::benign_by_name("spawn_child")->source);
  auto evil = build(evil_src);
  auto idle = build(idle_src);

  runtime::Sandbox with_attack, without_attack;
  with_attack.images = {reader, evil};
  without_attack.images = {reader, idle};
  bool pass = true;
  std::string note;

  auto lr1 = with_attack.load(parent, false);
  auto lr2 = without_attack.load(parent, false);
  if (std::holds_alternative<runtime::LoadError>(lr1) ||
      std::holds_alternative<runtime::LoadError>(lr2)) {
    report(7, false, "scenario images failed to load");
    return;
  }
  auto rep1 = with_attack.monitor_run();
  auto rep2 = without_attack.monitor_run();

  // the malicious SIP (pid 3) faulted on its cross-domain store
  bool evil_faulted = false;
  for (auto& f : rep1.faults)
    if (f.pid == 3 && (f.kind == runtime::FaultKind::BoundLower ||
                       f.kind == runtime::FaultKind::BoundUpper))
      evil_faulted = true;
  pass = pass && evil_faulted;
  note += evil_faulted ? "malicious SIP contained; " : "malicious SIP NOT contained; ";

  // its failed write syscall returned -1 and transferred nothing
  for (auto& r : rep1.trace)
    if (r.pid == 3 && r.num == 1 && (int64_t(r.ret) != -1 || !r.payload.empty()))
      pass = false;

  // the other SIPs behaved exactly as in the attack-free run
  bool same = trace_key(rep1, 1) == trace_key(rep2, 1) &&
              trace_key(rep1, 2) == trace_key(rep2, 2);
  pass = pass && same;
  note += same ? "benign traces identical; " : "benign traces DIVERGED; ";

  // monitor state uncorrupted: no policy assertions anywhere, message intact
  std::string delivered;
  for (auto& p : with_attack.procs)
    if (p.pid == 2) delivered = p.output;
  bool clean = with_attack.monitor_events.empty() && delivered == "secret!!";
  pass = pass && clean;
  note += clean ? "monitor clean, payload intact" : "monitor state CORRUPTED";
  report(7, pass, note);
}

// --- criterion 8: complete-disassembly fidelity ---------------------------

void criterion_8() {
  bool overlap_ok = false;
  for (auto& adv : corpus::adversarial_cases())
    if (adv.name == "label_inside_imm")
      overlap_ok = corpus::check_image_bytes(adv.bytes) == "AbortOverlap";

  // monitor_run checks every fetched offset against R; a clean corpus pass
  // means fetched ⊆ R held throughout
  size_t events = 0, runs = 0;
  auto child = build(corpus::benign_by_name("spawn_child")->source);
  for (auto& prog : corpus::benign_programs()) {
    auto w = run_world(build(prog.source), {child}, false);
    if (!w.ok) continue;
    events += w.monitor_events;
    runs++;
  }
  bool pass = overlap_ok && events == 0 && runs == corpus::benign_programs().size();
  std::ostringstream d;
  d << "overlap construction " << (overlap_ok ? "aborts with AbortOverlap" : "DID NOT abort")
    << "; fetched-offsets-within-R assertions=" << events << " over " << runs
    << " monitored corpus runs";
  report(8, pass, d.str());
}

// --- criterion 9: analysis fixtures vs. brute force -----------------------

analysis::ReachableSet fixture_build(std::vector<isa::Instruction> ins,
                                     const std::map<size_t, size_t>& branches = {}) {
  std::vector<uint64_t> addr(ins.size());
  uint64_t a = 0;
  for (size_t i = 0; i < ins.size(); i++) {
    addr[i] = a;
    a += isa::encode_or_throw(ins[i]).size();
  }
  for (auto& [from, to] : branches) ins[from].rel_target = addr[to];
  analysis::ReachableSet r;
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

analysis::FactMap brute_fixpoint(const analysis::Cfg& cfg,
                                 const analysis::ReachableSet& r) {
  analysis::FactMap in;
  for (uint64_t e : cfg.entry_nodes) in[e] = analysis::RangeFact::all_top();
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<uint64_t> nodes;
    for (auto& [n, f] : in) nodes.push_back(n);
    for (uint64_t n : nodes) {
      analysis::RangeFact out = analysis::transfer(r, n, in.at(n));
      auto it = cfg.succ.find(n);
      if (it == cfg.succ.end()) continue;
      for (uint64_t s : it->second) {
        auto sit = in.find(s);
        if (sit == in.end()) {
          in[s] = out;
          changed = true;
        } else {
          auto merged = analysis::RangeFact::join(sit->second, out);
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

void criterion_9() {
  auto mem = [](Reg base, int32_t disp = 0) {
    isa::MemOperand m;
    m.base = base;
    m.disp = disp;
    return m;
  };
  std::vector<analysis::ReachableSet> fixtures;
  fixtures.push_back(fixture_build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx, 8), Reg::rax),
      isa::make_lea(Reg::rcx, mem(Reg::rbx, 16)),
      isa::make_nop(),
  }));
  fixtures.push_back(fixture_build(
      {
          isa::make_cfi_label(0),
          isa::make_bndcl(0, mem(Reg::rbx)),
          isa::make_bndcu(0, mem(Reg::rbx)),
          isa::make_store(mem(Reg::rbx), Reg::rax),
          isa::make_alu_ri(isa::AluOp::Add, Reg::rbx, 8),
          isa::make_jcc_rel(isa::Cond::Ne, 0),
          isa::make_nop(),
      },
      {{5, 3}}));
  fixtures.push_back(fixture_build(
      {
          isa::make_cfi_label(0),
          isa::make_jcc_rel(isa::Cond::Eq, 0),
          isa::make_bndcl(0, mem(Reg::rbx, 16)),
          isa::make_bndcu(0, mem(Reg::rbx, 16)),
          isa::make_jmp_rel(0),
          isa::make_bndcl(0, mem(Reg::rbx)),
          isa::make_bndcu(0, mem(Reg::rbx)),
          isa::make_nop(),
      },
      {{1, 5}, {4, 7}}));
  fixtures.push_back(fixture_build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_mov_reg_reg(Reg::rdx, Reg::rbx),
      isa::make_alu_ri(isa::AluOp::Add, Reg::rdx, 24),
      isa::make_nop(),
  }));
  fixtures.push_back(fixture_build({
      isa::make_cfi_label(0),
      isa::make_store(mem(Reg::rbx), Reg::rax),
      isa::make_alu_ri(isa::AluOp::Add, Reg::rbx, 4200),
      isa::make_nop(),
  }));

  size_t ok = 0, orders_checked = 0;
  std::mt19937 rng(424242);
  for (auto& r : fixtures) {
    analysis::Cfg cfg = analysis::build_cfg(r);
    analysis::FactMap expect = brute_fixpoint(cfg, r);
    bool good = analysis::range_analysis(cfg, r) == expect;
    std::vector<uint64_t> nodes(cfg.nodes.begin(), cfg.nodes.end());
    for (int i = 0; i < 24; i++) {
      std::shuffle(nodes.begin(), nodes.end(), rng);
      good = good && analysis::range_analysis(cfg, r, &nodes) == expect;
      orders_checked++;
    }
    if (good) ok++;
  }
  std::ostringstream d;
  d << ok << "/" << fixtures.size()
    << " fixtures match the brute-force fixpoint under " << orders_checked
    << " randomized worklist orders";
  report(9, ok == fixtures.size(), d.str());
}

}  // namespace

int main() {
  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
  } catch (const std::exception& e) {
    std::printf("ACCEPTANCE: unexpected exception: %s\n", e.what());
    return 1;
  }
  return g_failures == 0 ? 0 : 1;
}
