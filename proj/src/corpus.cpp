#include "mmdsfi/corpus.hpp"

#include "mmdsfi/isa.hpp"
#include "mmdsfi/verifier.hpp"

namespace mmdsfi::corpus {

namespace {

// clang-format off
const std::vector<BenignProgram> kBenign = {

{"exit0", R"(# exits immediately with status 0
func main:
  mov rax, 0
  mov rdi, 0
  syscall
)"},

{"hello", R"(# writes a greeting to stdout
func main:
  mov rax, 1
  mov rdi, 1
  lea rsi, &msg
  mov rdx, 14
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data msg: bytes 72 101 108 108 111 44 32 115 97 110 100 98 111 120
)"},

{"sum_loop", R"(# fills 1000 sequential slots; the loop check is hoistable
func main:
  lea rbx, &buf
  mov rcx, 0
  mov r9, 1000
loop:
  mov [rbx], rcx
  add rbx, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 0
  mov rdi, 0
  syscall
.data buf: quad 0
)"},

{"struct_fields", R"(# eight stores through one base; seven checks are redundant
func main:
  lea rbx, &rec
  mov r8, 1
  mov [rbx], r8
  mov r8, 2
  mov [rbx+8], r8
  mov r8, 3
  mov [rbx+16], r8
  mov r8, 4
  mov [rbx+24], r8
  mov r8, 5
  mov [rbx+32], r8
  mov r8, 6
  mov [rbx+40], r8
  mov r8, 7
  mov [rbx+48], r8
  mov r8, 8
  mov [rbx+56], r8
  mov rax, 0
  mov rdi, 0
  syscall
.data rec: quad 0, 0, 0, 0, 0, 0, 0, 0
)"},

{"fib", R"(# iterative fibonacci(20), result written to stdout
func main:
  mov r8, 0
  mov r9, 1
  mov rcx, 0
  mov rdx, 20
loop:
  mov rbx, r8
  add rbx, r9
  mov r8, r9
  mov r9, rbx
  add rcx, 1
  cmp rcx, rdx
  jne loop
  lea rbx, &out
  mov [rbx], r8
  mov rax, 1
  mov rdi, 1
  lea rsi, &out
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data out: quad 0
)"},

{"call_direct", R"(# plain direct call and return
func main:
  call helper
  mov rax, 1
  mov rdi, 1
  lea rsi, &slot
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
func helper:
  lea rbx, &slot
  mov r8, 77
  mov [rbx], r8
  ret
.data slot: quad 0
)"},

{"call_reg", R"(# register-indirect call through a code address
func main:
  lea rbx, &helper
  call rbx
  mov rax, 0
  mov rdi, 0
  syscall
func helper:
  lea rcx, &slot
  mov r8, 42
  mov [rcx], r8
  ret
.data slot: quad 0
)"},

{"indirect_jump", R"(# computed jump to an address-taken label
func main:
  lea rax, &target
  jmp rax
target:
  mov rax, 0
  mov rdi, 0
  syscall
)"},

{"echo_pipe", R"(# round-trips a qword through a self pipe
func main:
  lea rdi, &fds
  mov rax, 5
  syscall
  mov rax, 1
  mov rdi, 3
  lea rsi, &val
  mov rdx, 8
  syscall
  mov rax, 2
  mov rdi, 2
  lea rsi, &back
  mov rdx, 8
  syscall
  lea rbx, &val
  mov r8, [rbx]
  lea rbx, &back
  mov r9, [rbx]
  cmp r8, r9
  jne bad
  mov rax, 0
  mov rdi, 0
  syscall
bad:
  mov rax, 0
  mov rdi, 1
  syscall
.data fds: quad 0, 0
.data val: quad 3735928559
.data back: quad 0
)"},

{"memcopy", R"(# quad-wise copy of a table into scratch space
func main:
  lea rsi, &src
  lea rdi, &dst
  mov rcx, 0
  mov r9, 4
loop:
  mov r8, [rsi]
  mov [rdi], r8
  add rsi, 8
  add rdi, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 1
  mov rdi, 1
  lea rsi, &dst
  mov rdx, 32
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data src: quad 11, 22, 33, 44
.data dst: quad 0, 0, 0, 0
)"},

{"memset_loop", R"(# fills a block with a constant
func main:
  lea rbx, &blk
  mov r8, 255
  mov rcx, 0
  mov r9, 64
loop:
  mov [rbx], r8
  add rbx, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 0
  mov rdi, 0
  syscall
.data blk: quad 0
)"},

{"stack_args", R"(# passes an argument on the stack
func main:
  mov r8, 33
  push r8
  call helper
  add rsp, 8
  mov rax, 1
  mov rdi, 1
  lea rsi, &slot
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
func helper:
  mov r9, [rsp+8]
  add r9, 9
  lea rbx, &slot
  mov [rbx], r9
  ret
.data slot: quad 0
)"},

{"factorial_rec", R"(# recursive factorial(6) via the stack
func main:
  mov rdi, 6
  call fact
  lea rbx, &out
  mov [rbx], rax
  mov rax, 1
  mov rdi, 1
  lea rsi, &out
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
func fact:
  mov r8, 1
  cmp rdi, r8
  jge recurse
  mov rax, 1
  ret
recurse:
  push rdi
  sub rdi, 1
  call fact
  pop rdi
  mov rbx, rax
  mov rax, 0
  mov rcx, 0
mul_loop:
  cmp rcx, rdi
  jge mul_done
  add rax, rbx
  add rcx, 1
  jmp mul_loop
mul_done:
  ret
.data out: quad 0
)"},

{"branches", R"(# exercises every conditional form
func main:
  lea rbx, &res
  mov r8, 5
  mov r9, 5
  cmp r8, r9
  je eq_ok
  jmp fail
eq_ok:
  mov rcx, 1
  mov [rbx], rcx
  mov r9, 9
  cmp r8, r9
  jl lt_ok
  jmp fail
lt_ok:
  mov rcx, 2
  mov [rbx+8], rcx
  cmp r9, r8
  jge ge_ok
  jmp fail
ge_ok:
  mov rcx, 3
  mov [rbx+16], rcx
  cmp r8, r9
  jne done
  jmp fail
done:
  mov rax, 0
  mov rdi, 0
  syscall
fail:
  mov rax, 0
  mov rdi, 1
  syscall
.data res: quad 0, 0, 0
)"},

{"nested_loops", R"(# 2-d fill; the inner check hoists
func main:
  lea rbx, &grid
  mov rsi, 0
  mov r9, 10
outer:
  mov rcx, 0
inner:
  mov [rbx], rcx
  add rbx, 8
  add rcx, 1
  cmp rcx, r9
  jne inner
  add rsi, 1
  cmp rsi, r9
  jne outer
  mov rax, 0
  mov rdi, 0
  syscall
.data grid: quad 0
)"},

{"stride_back", R"(# descending fill with a negative stride
func main:
  lea rbx, &buf
  add rbx, 248
  mov rcx, 0
  mov r9, 32
loop:
  mov [rbx], rcx
  sub rbx, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 0
  mov rdi, 0
  syscall
.data buf: quad 0
)"},

{"getpid_out", R"(# reports its own pid
func main:
  mov rax, 6
  syscall
  lea rbx, &out
  mov [rbx], rax
  mov rax, 1
  mov rdi, 1
  lea rsi, &out
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data out: quad 0
)"},

{"yield_twice", R"(# cooperative yields
func main:
  mov rax, 4
  syscall
  mov rax, 4
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
)"},

{"boundary_disp", R"(# store at the widest displacement a check still covers
func main:
  lea rbx, &base
  mov r8, 99
  mov [rbx+4096], r8
  mov [rbx+4088], r8
  mov rax, 0
  mov rdi, 0
  syscall
.data base: quad 0
)"},

{"indexed_store", R"(# scaled-index addressing keeps its per-iteration check
func main:
  lea rbx, &buf
  mov rcx, 0
  mov r9, 16
loop:
  mov [rbx+rcx*8], rcx
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 0
  mov rdi, 0
  syscall
.data buf: quad 0
)"},

{"alias_copy", R"(# a copied pointer inherits the proof of its source
func main:
  lea rbx, &buf
  mov r8, 1
  mov [rbx], r8
  mov rdx, rbx
  mov r8, 2
  mov [rdx+8], r8
  mov r8, 3
  mov [rdx+16], r8
  mov rax, 0
  mov rdi, 0
  syscall
.data buf: quad 0, 0, 0
)"},

{"double_buffer", R"(# alternating writes through two bases
func main:
  lea rbx, &a
  lea rdx, &b
  mov rcx, 0
  mov r9, 8
loop:
  mov [rbx], rcx
  mov [rdx], rcx
  add rbx, 8
  add rdx, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  mov rax, 0
  mov rdi, 0
  syscall
.data a: quad 0
.data b: quad 0
)"},

{"bitops", R"(# register logic, result to stdout
func main:
  mov r8, 240
  mov r9, 15
  mov rbx, r8
  or rbx, r9
  mov rcx, r8
  and rcx, r9
  mov rdx, r8
  xor rdx, r9
  lea rsi, &out
  mov [rsi], rbx
  mov [rsi+8], rcx
  mov [rsi+16], rdx
  mov rax, 1
  mov rdi, 1
  mov rdx, 24
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data out: quad 0, 0, 0
)"},

{"compare_chain", R"(# three-way classification of a value
func main:
  lea rbx, &out
  mov r8, 17
  mov r9, 10
  cmp r8, r9
  jl small
  mov r9, 100
  cmp r8, r9
  jl medium
  mov rcx, 3
  jmp store
small:
  mov rcx, 1
  jmp store
medium:
  mov rcx, 2
store:
  mov [rbx], rcx
  mov rax, 0
  mov rdi, 0
  syscall
.data out: quad 0
)"},

{"read_eof", R"(# stdin is empty; read must report zero bytes
func main:
  mov rax, 2
  mov rdi, 0
  lea rsi, &buf
  mov rdx, 8
  syscall
  mov rdi, rax
  mov rax, 0
  syscall
.data buf: quad 0
)"},

{"table_walk", R"(# sums a table of quads through checked loads
func main:
  lea rbx, &tbl
  mov r8, 0
  mov rcx, 0
  mov r9, 4
loop:
  mov rdx, [rbx]
  add r8, rdx
  add rbx, 8
  add rcx, 1
  cmp rcx, r9
  jne loop
  lea rbx, &out
  mov [rbx], r8
  mov rax, 1
  mov rdi, 1
  lea rsi, &out
  mov rdx, 8
  syscall
  mov rax, 0
  mov rdi, 0
  syscall
.data tbl: quad 5, 7, 11, 13
.data out: quad 0
)"},

{"spawn_parent", R"(# pipes a message to a spawned child and adopts its status
func main:
  lea rdi, &fds
  mov rax, 5
  syscall
  mov rax, 3
  mov rdi, 0
  syscall
  mov rbx, rax
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
.data msg: bytes 112 105 110 103 112 111 110 103
)"},

{"spawn_child", R"(# reads fd 2 (inherited pipe), echoes to stdout, exits 7
func main:
  mov rax, 2
  mov rdi, 2
  lea rsi, &buf
  mov rdx, 8
  syscall
  mov rdx, rax
  mov rax, 1
  mov rdi, 1
  lea rsi, &buf
  syscall
  mov rax, 0
  mov rdi, 7
  syscall
.data buf: quad 0
)"},

};
// clang-format on

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; i++) out.push_back(uint8_t(v >> (8 * i)));
}

// Serializes without the invariant checks the honest writer performs.
std::vector<uint8_t> raw_image(const std::vector<uint8_t>& code,
                               const std::vector<uint8_t>& data, uint32_t entry,
                               uint64_t d_capacity = 16384,
                               uint64_t stack_reserve = 4096) {
  std::vector<uint8_t> out = {'S', 'I', 'P', 'B'};
  put_u32(out, image::kSipbVersion);
  put_u32(out, entry);
  put_u32(out, uint32_t(code.size()));
  put_u32(out, uint32_t(data.size()));
  put_u64(out, d_capacity);
  put_u64(out, stack_reserve);
  put_u32(out, 0);
  out.insert(out.end(), code.begin(), code.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

struct CodeBuilder {
  std::vector<uint8_t> code;

  CodeBuilder& emit(const isa::Instruction& in) {
    isa::Instruction i = in;
    i.address = code.size();
    auto b = isa::encode_or_throw(i);
    code.insert(code.end(), b.begin(), b.end());
    return *this;
  }
  CodeBuilder& bytes(std::initializer_list<uint8_t> b) {
    code.insert(code.end(), b.begin(), b.end());
    return *this;
  }
  CodeBuilder& label() { return emit(isa::make_cfi_label(0)); }
  CodeBuilder& halt() { return bytes({0xEB, 0xFE}); }  // jmp self
  size_t at() const { return code.size(); }
};

isa::MemOperand mem_rbx(int32_t disp = 0) {
  isa::MemOperand m;
  m.base = isa::Reg::rbx;
  m.disp = disp;
  return m;
}

}  // namespace

const std::vector<BenignProgram>& benign_programs() { return kBenign; }

const BenignProgram* benign_by_name(const std::string& name) {
  for (auto& p : kBenign)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<AdversarialCase> adversarial_cases() {
  using isa::Reg;
  std::vector<AdversarialCase> out;
  auto add = [&](std::string name, const CodeBuilder& cb, std::string code) {
    out.push_back({std::move(name), raw_image(cb.code, {}, 0), std::move(code)});
  };

  {  // wrong container magic
    CodeBuilder cb;
    cb.label().halt();
    auto bytes = raw_image(cb.code, {}, 0);
    bytes[0] = 'X';
    out.push_back({"bad_magic", bytes, "BadMagic"});
  }
  {  // header promises more code than the file holds
    CodeBuilder cb;
    cb.label().halt();
    auto bytes = raw_image(cb.code, {}, 0);
    bytes[12] += 8;  // code_size
    out.push_back({"truncated_code", bytes, "TruncatedSection"});
  }
  {  // entry points at a plain instruction, not a label
    CodeBuilder cb;
    cb.emit(isa::make_nop()).label().halt();
    out.push_back({"entry_not_label", raw_image(cb.code, {}, 0), "AbortEntryNotLabel"});
  }
  {  // undecodable byte on the fall-through path
    CodeBuilder cb;
    cb.label().bytes({0x06}).halt();
    add("invalid_instruction", cb, "AbortInvalidInstruction");
  }
  {  // final instruction runs off the end of the section
    CodeBuilder cb;
    cb.label().bytes({0x48, 0xB8, 0x01});
    add("runs_off_end", cb, "AbortOutOfRange");
  }
  {  // direct branch beyond the code section
    CodeBuilder cb;
    cb.label().bytes({0xE9, 0x00, 0x10, 0x00, 0x00});
    add("branch_out_of_range", cb, "AbortOutOfRange");
  }
  {  // label pattern buried in an immediate overlaps its carrier
    CodeBuilder cb;
    cb.label().emit(isa::make_mov_reg_imm(Reg::rax, 0x1111111124841F0FLL)).halt();
    add("label_inside_imm", cb, "AbortOverlap");
  }
  {  // enclave leaf instruction
    CodeBuilder cb;
    cb.label().bytes({0x0F, 0x01, 0xD7}).halt();
    add("sgx_leaf", cb, "E_SGX");
  }
  {  // bndmk would retarget the protection bounds
    CodeBuilder cb;
    cb.label().bytes({0xF3, 0x0F, 0x1B, 0x03}).halt();
    add("mpx_mutation", cb, "E_MPX_MUT");
  }
  {  // xrstor can rewrite bnd registers wholesale
    CodeBuilder cb;
    cb.label().bytes({0x0F, 0xAE, 0x28}).halt();
    add("xstate_restore", cb, "E_XSTATE");
  }
  {  // wrfsbase moves the segment base under the sandbox
    CodeBuilder cb;
    cb.label().bytes({0xF3, 0x0F, 0xAE, 0xD0}).halt();
    add("segbase_write", cb, "E_SEGBASE");
  }
  {  // raw syscall outside the gate
    CodeBuilder cb;
    cb.label().bytes({0x0F, 0x05}).halt();
    add("user_syscall", cb, "E_SYSCALL_IN_USER");
  }
  {  // un-lowered return
    CodeBuilder cb;
    cb.label().emit(isa::make_ret()).halt();
    add("raw_ret", cb, "E_CT_RET");
  }
  {  // memory-indirect jump
    CodeBuilder cb;
    cb.label().emit(isa::make_jmp_mem(mem_rbx())).halt();
    add("jmp_through_memory", cb, "E_CT_MEM");
  }
  {  // register jump with no guard in front
    CodeBuilder cb;
    cb.label().emit(isa::make_jmp_reg(Reg::rax)).halt();
    add("unguarded_reg_jump", cb, "E_CT_UNGUARDED");
  }
  {  // conditional branch into the middle of a mem_guard
    CodeBuilder cb;
    cb.label();
    cb.emit(isa::make_jcc_rel(isa::Cond::Eq, 0));  // patched below
    size_t patch = cb.at() - 4;
    cb.emit(isa::make_bndcl(0, mem_rbx()));
    size_t upper = cb.at();
    cb.emit(isa::make_bndcu(0, mem_rbx()));
    cb.emit(isa::make_store(mem_rbx(), Reg::rax));
    cb.halt();
    int32_t rel = int32_t(upper) - int32_t(patch + 4);
    for (int i = 0; i < 4; i++) cb.code[patch + i] = uint8_t(uint32_t(rel) >> (8 * i));
    add("jump_into_guard", cb, "E_CT_INTERIOR");
  }
  {  // conditional branch straight at a guarded indirect jump
    CodeBuilder cb;
    cb.label();
    cb.emit(isa::make_jcc_rel(isa::Cond::Eq, 0));
    size_t patch = cb.at() - 4;
    isa::MemOperand m;
    m.base = Reg::rax;
    cb.emit(isa::make_load(Reg::r11, m));
    cb.emit(isa::make_bndcl_reg(1, Reg::r11));
    cb.emit(isa::make_bndcu_reg(1, Reg::r11));
    size_t target = cb.at();
    cb.emit(isa::make_jmp_reg(Reg::rax));
    int32_t rel = int32_t(target) - int32_t(patch + 4);
    for (int i = 0; i < 4; i++) cb.code[patch + i] = uint8_t(uint32_t(rel) >> (8 * i));
    add("jump_at_indirect", cb, "E_CT_INTERIOR");
  }
  {  // store with no guard and no fact
    CodeBuilder cb;
    cb.label().emit(isa::make_store(mem_rbx(), Reg::rax)).halt();
    add("unproven_store", cb, "E_MEM_UNPROVEN");
  }
  {  // absolute-address store
    CodeBuilder cb;
    cb.label().bytes({0x48, 0xA3, 0, 0, 0, 0, 0, 0, 0, 0}).halt();
    add("absolute_store", cb, "E_MEM_DIRECT");
  }
  {  // vector gather with vsib addressing
    CodeBuilder cb;
    cb.label().bytes({0xC4, 0xE2, 0xE9, 0x90, 0x04, 0x0B}).halt();
    add("vsib_gather", cb, "E_MEM_VSIB");
  }
  {  // stack pointer jump beyond the guard page
    CodeBuilder cb;
    cb.label().emit(isa::make_alu_ri(isa::AluOp::Add, Reg::rsp, 8192)).halt();
    add("rsp_big_shift", cb, "E_MEM_RSP");
  }
  {  // stack pointer loaded from an arbitrary register
    CodeBuilder cb;
    cb.label().emit(isa::make_mov_reg_reg(Reg::rsp, Reg::rax)).halt();
    add("rsp_overwrite", cb, "E_MEM_RSP");
  }
  return out;
}

std::string check_image_bytes(const std::vector<uint8_t>& bytes) {
  auto r = image::read_image(bytes);
  if (auto* e = std::get_if<image::FormatError>(&r))
    return image::format_error_name(e->kind);
  auto verdict = verifier::verify(std::get<image::SipbImage>(r));
  if (verdict.accepted) return "accepted";
  return verdict.violations.front().code;
}

}  // namespace mmdsfi::corpus
