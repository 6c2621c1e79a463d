// SASM parsing and the instrumentation pipeline: pass postconditions,
// check-count behavior of the optimizer, magic-collision rewriting, and
// error paths.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "mmdsfi/corpus.hpp"
#include "mmdsfi/instrument.hpp"
#include "mmdsfi/sasm.hpp"
#include "mmdsfi/verifier.hpp"

using namespace mmdsfi;

namespace {

sasm::SasmProgram parse_ok(const std::string& src) {
  auto r = sasm::parse_sasm(src);
  if (auto* e = std::get_if<sasm::ParseError>(&r))
    FAIL("parse error at line ", e->line, ": ", e->detail);
  return std::get<sasm::SasmProgram>(r);
}

sasm::ParseError parse_err(const std::string& src) {
  auto r = sasm::parse_sasm(src);
  REQUIRE(std::holds_alternative<sasm::ParseError>(r));
  return std::get<sasm::ParseError>(r);
}

image::SipbImage instr_ok(const std::string& src, instrument::Options opts = {}) {
  auto r = instrument::instrument(parse_ok(src), opts);
  if (auto* e = std::get_if<instrument::InstrumentError>(&r))
    FAIL("instrument error ", e->code, ": ", e->detail);
  return std::get<image::SipbImage>(r);
}

size_t count_mn(const sasm::SasmProgram& p, const std::string& mn) {
  size_t n = 0;
  for (auto& f : p.functions)
    for (auto& it : f.body)
      if (!it.is_label && it.mn == mn) n++;
  return n;
}

}  // namespace

TEST_CASE("parser accepts the full grammar") {
  auto p = parse_ok(R"(# demo
func main:
  mov rax, 0x10
  mov rbx, -5
  lea rsi, &blob
  mov [rbx+rcx*8+16], rax
  mov rdx, [rsp+8]
  cmp rax, rbx
  je out
out:
  syscall
func other:
  ret
.data blob: quad 1, 0xff, &out
.data raw: bytes 1 2 255
)");
  CHECK(p.entry == "main");
  REQUIRE(p.functions.size() == 2);
  CHECK(p.functions[0].name == "main");
  REQUIRE(p.data.size() == 2);
  CHECK(p.data[0].bytes.size() == 24);
  CHECK(p.data[0].addr_refs.size() == 1);
  CHECK(p.data[0].addr_refs[0].first == 16);
  CHECK(p.data[1].bytes == std::vector<uint8_t>{1, 2, 255});

  auto& st = p.functions[0].body[3];  // the indexed store
  CHECK(st.mn == "mov");
  CHECK(st.ops[0].kind == sasm::OperandKind::Mem);
  CHECK(st.ops[0].mem.base == isa::Reg::rbx);
  CHECK(st.ops[0].mem.index == isa::Reg::rcx);
  CHECK(st.ops[0].mem.scale == 8);
  CHECK(st.ops[0].mem.disp == 16);
}

TEST_CASE("entry is main when present, else the first function") {
  auto p = parse_ok("func start:\n  ret\nfunc main:\n  ret\n");
  CHECK(p.entry == "main");
  auto q = parse_ok("func start:\n  ret\n");
  CHECK(q.entry == "start");
}

TEST_CASE("parser error paths") {
  CHECK(parse_err("func main:\n  mov r10, 1\n").kind ==
        sasm::ParseErrorKind::ReservedRegister);
  CHECK(parse_err("func main:\n  mov [r11], rax\n").kind ==
        sasm::ParseErrorKind::ReservedRegister);
  CHECK(parse_err("func main:\n  frobnicate rax\n").kind ==
        sasm::ParseErrorKind::UnknownMnemonic);
  CHECK(parse_err("func main:\nx:\nx:\n  ret\n").kind ==
        sasm::ParseErrorKind::DuplicateLabel);
  CHECK(parse_err("func main:\n  jmp nowhere\n").kind ==
        sasm::ParseErrorKind::UndefinedLabel);
  CHECK(parse_err("func main:\n  mov rax,\n").kind ==
        sasm::ParseErrorKind::SyntaxError);
  CHECK(parse_err("  mov rax, 1\n").kind == sasm::ParseErrorKind::SyntaxError);
}

TEST_CASE("insert_cfi_labels marks entries and return sites") {
  auto p = instrument::insert_cfi_labels(
      parse_ok(corpus::benign_by_name("call_direct")->source));
  for (auto& f : p.functions) {
    REQUIRE(!f.body.empty());
    CHECK(f.body.front().mn == "cfi_label");
  }
  // every call/syscall is followed (after the return label) by a cfi_label
  // in the same atomic group
  for (auto& f : p.functions) {
    for (size_t i = 0; i < f.body.size(); i++) {
      auto& it = f.body[i];
      if (it.is_label || (it.mn != "call" && it.mn != "syscall")) continue;
      REQUIRE(i + 2 < f.body.size());
      CHECK(f.body[i + 1].is_label);
      CHECK(f.body[i + 2].mn == "cfi_label");
      CHECK(f.body[i + 2].group == it.group);
      CHECK(it.group >= 0);
    }
  }
}

TEST_CASE("lower_unsafe_transfers eliminates every unsafe form") {
  const char* src = R"(
func main:
  lea rax, &helper
  call rax
  lea rbx, &slot
  call [rbx]
  mov rcx, [rbx]
  jmp rcx
func helper:
  syscall
  ret
.data slot: quad 0
)";
  auto p = instrument::lower_unsafe_transfers(
      instrument::insert_cfi_labels(parse_ok(src)));
  CHECK(count_mn(p, "ret") == 0);
  CHECK(count_mn(p, "syscall") == 0);
  CHECK(count_mn(p, "call") == 0);  // only direct calls may survive lowering
  CHECK(count_mn(p, "cfi_guard") >= 4);  // call rax, call [rbx], jmp rcx, ret, syscall
  // every register jmp sits right behind a cfi_guard of the same register
  for (auto& f : p.functions) {
    for (size_t i = 0; i < f.body.size(); i++) {
      auto& it = f.body[i];
      if (it.is_label || it.mn != "jmp" || it.ops.empty() ||
          it.ops[0].kind != sasm::OperandKind::Reg)
        continue;
      REQUIRE(i > 0);
      auto& g = f.body[i - 1];
      CHECK(g.mn == "cfi_guard");
      CHECK(g.ops[0].reg == it.ops[0].reg);
      CHECK(g.group == it.group);
    }
  }
}

TEST_CASE("insert_mem_guards covers stores, loads are policy-dependent") {
  const char* src = R"(
func main:
  lea rbx, &buf
  mov [rbx], rax
  mov rcx, [rbx+8]
  mov rdx, [rsp+16]
  syscall
.data buf: quad 0, 0
)";
  auto lowered = instrument::lower_unsafe_transfers(
      instrument::insert_cfi_labels(parse_ok(src)));
  auto with_loads = std::get<sasm::SasmProgram>(
      instrument::insert_mem_guards(lowered, true));
  auto stores_only = std::get<sasm::SasmProgram>(
      instrument::insert_mem_guards(lowered, false));
  // rsp-disciplined access needs no guard in either mode
  CHECK(instrument::static_guard_count(with_loads) == 2);
  CHECK(instrument::static_guard_count(stores_only) == 1);
}

TEST_CASE("oversized rsp adjustment is rejected") {
  auto lowered = instrument::lower_unsafe_transfers(instrument::insert_cfi_labels(
      parse_ok("func main:\n  sub rsp, 8192\n  syscall\n")));
  auto r = instrument::insert_mem_guards(lowered, true);
  auto* e = std::get_if<instrument::InstrumentError>(&r);
  REQUIRE(e != nullptr);
  CHECK(e->code == "RspAdjustTooLarge");
}

TEST_CASE("full pipeline output passes the verifier") {
  for (const char* name : {"hello", "sum_loop", "factorial_rec", "indirect_jump"}) {
    auto img = instr_ok(corpus::benign_by_name(name)->source);
    auto verdict = verifier::verify(img);
    INFO("program ", name);
    CHECK(verdict.accepted);
  }
}

TEST_CASE("optimizer: eight field stores share one check") {
  auto& src = corpus::benign_by_name("struct_fields")->source;
  instrument::Options opt, noopt;
  noopt.optimize = false;
  auto v_opt = verifier::verify(instr_ok(src, opt));
  auto v_raw = verifier::verify(instr_ok(src, noopt));
  REQUIRE(v_opt.accepted);
  REQUIRE(v_raw.accepted);
  CHECK(v_opt.stats.mem_guard_count == 1);
  CHECK(v_raw.stats.mem_guard_count == 8);
}

TEST_CASE("optimizer keeps checks it cannot justify") {
  auto& src = corpus::benign_by_name("indexed_store")->source;
  instrument::Options opt, noopt;
  noopt.optimize = false;
  auto v_opt = verifier::verify(instr_ok(src, opt));
  auto v_raw = verifier::verify(instr_ok(src, noopt));
  REQUIRE(v_opt.accepted);
  REQUIRE(v_raw.accepted);
  // scaled-index operands cannot be proven; the in-loop check survives
  CHECK(v_opt.stats.mem_guard_count == v_raw.stats.mem_guard_count);
}

TEST_CASE("magic bytes inside immediates are rewritten away") {
  const char* src = R"(
func main:
  mov rbx, 0x24841f0f
  mov rcx, 0x1111111124841f0f
  add rax, 0x24841f0f
  syscall
)";
  auto img = instr_ok(src);
  // every scanned label site must decode as an actual cfi_label
  auto labels = isa::scan_cfi_labels(img.code);
  for (uint64_t off : labels) {
    auto dr = isa::decode(img.code, off);
    REQUIRE(std::holds_alternative<isa::Instruction>(dr));
    CHECK(std::get<isa::Instruction>(dr).cls == isa::InstrClass::CfiLabel);
  }
  CHECK(verifier::verify(img).accepted);
}

TEST_CASE("entry offset lands on a cfi_label and data is reachable") {
  auto img = instr_ok(corpus::benign_by_name("hello")->source);
  auto dr = isa::decode(img.code, img.entry);
  REQUIRE(std::holds_alternative<isa::Instruction>(dr));
  CHECK(std::get<isa::Instruction>(dr).cls == isa::InstrClass::CfiLabel);
  CHECK(img.data.size() >= 14);
  CHECK(img.d_capacity >= img.data.size() + img.stack_reserve);
}

TEST_CASE("code larger than the configured capacity is rejected") {
  std::string src = "func main:\n";
  for (int i = 0; i < 200; i++) src += "  mov rax, " + std::to_string(i) + "\n";
  src += "  syscall\n";
  instrument::Options opts;
  opts.c_capacity = 128;
  auto r = instrument::instrument(parse_ok(src), opts);
  auto* e = std::get_if<instrument::InstrumentError>(&r);
  REQUIRE(e != nullptr);
  CHECK(e->code == "ImageTooLarge");
}

TEST_CASE("assemble_raw keeps the native transfer forms") {
  auto img = std::get<image::SipbImage>(instrument::assemble_raw(
      parse_ok(corpus::benign_by_name("call_direct")->source), {}));
  // raw images are reference material, not sandbox material: the verifier
  // must reject them (un-lowered ret and syscall remain)
  auto verdict = verifier::verify(img);
  CHECK(!verdict.accepted);
  bool saw_ret = false, saw_syscall = false;
  for (auto& v : verdict.violations) {
    if (v.code == "E_CT_RET") saw_ret = true;
    if (v.code == "E_SYSCALL_IN_USER") saw_syscall = true;
  }
  CHECK(saw_ret);
  CHECK(saw_syscall);
}
