#include "mmdsfi/runtime.hpp"

#include <algorithm>
#include <cstring>

namespace mmdsfi::runtime {

using isa::InstrClass;
using isa::Instruction;
using isa::MemForm;
using isa::Reg;

const char* fault_name(FaultKind k) {
  switch (k) {
    case FaultKind::BoundLower: return "BoundLower";
    case FaultKind::BoundUpper: return "BoundUpper";
    case FaultKind::UnmappedAccess: return "UnmappedAccess";
    case FaultKind::PermissionDenied: return "PermissionDenied";
    case FaultKind::NonExecutableFetch: return "NonExecutableFetch";
    case FaultKind::DangerousInstr: return "DangerousInstr";
    case FaultKind::SyscallSanity: return "SyscallSanity";
  }
  return "?";
}

namespace {

uint64_t label_qword(uint32_t id) {
  uint64_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint64_t(isa::kMagic[i]) << (8 * i);
  v |= uint64_t(id) << 32;
  return v;
}

}  // namespace

std::variant<int, LoadError> Sandbox::load(const image::SipbImage& img, bool permissive) {
  std::set<uint64_t> reach;
  if (!permissive) {
    auto verdict = verifier::verify(img, policy);
    if (!verdict.accepted)
      return LoadError{"image rejected by the verifier", verdict.violations};
    for (auto& [off, in] : verdict.reachable.instrs) reach.insert(off);
  }

  int pid = next_pid_++;
  uint32_t id = uint32_t(pid);
  SipState p;
  p.pid = pid;
  p.permissive = permissive;
  p.code = img.code;
  // the loader stamps the domain id into every label's id field
  auto labels = isa::scan_cfi_labels(p.code);
  for (uint64_t off : labels)
    for (int i = 0; i < 4; i++) p.code[off + 4 + i] = uint8_t(id >> (8 * i));
  // stamping must not create or destroy label sites
  if (isa::scan_cfi_labels(p.code) != labels)
    return LoadError{"domain id stamping changed the label set"};
  // gate trampoline: a label the guards accept, then the real syscall
  auto gate = isa::encode_or_throw(isa::make_cfi_label(id));
  p.code.insert(p.code.end(), gate.begin(), gate.end());
  p.code.push_back(0x0F);
  p.code.push_back(0x05);

  uint64_t base = uint64_t(pid) * kDomainAlign;
  p.dom.id = id;
  p.dom.c_begin = base;
  p.dom.c_end = base + p.code.size();
  p.dom.trampoline = base + img.code.size();
  p.dom.d_begin = p.dom.c_end + kGuardBytes;
  p.dom.d_end = p.dom.d_begin + img.d_capacity;
  if (p.dom.d_end + kGuardBytes > base + kDomainAlign)
    return LoadError{"image does not fit inside one domain"};
  p.dspace.assign(img.d_capacity, 0);
  std::copy(img.data.begin(), img.data.end(), p.dspace.begin());

  p.rip = p.dom.c_begin + img.entry;
  p.bnd[0] = {p.dom.d_begin, p.dom.d_end - 1};
  p.bnd[1] = {label_qword(id), label_qword(id)};
  p.reg(Reg::rsp) = p.dom.d_end - 16;
  p.reg(Reg::r14) = p.dom.trampoline;
  p.fds = {FdEntry{FdKind::Stdin, 0}, FdEntry{FdKind::Stdout, 0}};

  if (!permissive) {
    std::set<uint64_t> allowed;
    for (uint64_t off : reach) allowed.insert(p.dom.c_begin + off);
    allowed.insert(p.dom.trampoline);
    allowed.insert(p.dom.trampoline + isa::kCfiLabelLength);
    reachable_[pid] = std::move(allowed);
  }
  procs.push_back(std::move(p));
  return pid;
}

SipState* Sandbox::find_domain(uint64_t addr) {
  for (auto& p : procs)
    if (addr >= p.dom.c_begin && addr < p.dom.d_end + kGuardBytes) return &p;
  return nullptr;
}

namespace {

struct MemAccess {
  uint64_t addr = 0;
  bool ok = false;
  FaultKind fault = FaultKind::UnmappedAccess;
};

uint64_t effective_addr(const SipState& p, const Instruction& in, uint64_t rip_end) {
  const isa::MemOperand& m = in.mem;
  switch (m.form) {
    case MemForm::DirectOffset:
      return uint64_t(in.imm);
    case MemForm::RipRelative:
      return rip_end + int64_t(m.disp);
    default: {
      uint64_t a = int64_t(m.disp);
      if (m.base) a += p.reg(*m.base);
      if (m.index) a += p.reg(*m.index) * m.scale;
      return a;
    }
  }
}

// The cfi_guard's own load is the one legal data read from region C; it is
// recognized structurally at the current instruction pointer.
bool is_cfi_guard_load_here(const SipState& p, uint64_t code_off) {
  std::vector<Instruction> seq;
  uint64_t off = code_off;
  for (int i = 0; i < 3; i++) {
    auto dr = isa::decode(p.code, off);
    auto* in = std::get_if<Instruction>(&dr);
    if (!in) break;
    off = in->end();
    seq.push_back(std::move(*in));
  }
  auto ps = isa::recognize_pseudo(seq, 0);
  return ps && std::holds_alternative<isa::CfiGuard>(*ps);
}

void set_flags_arith(SipState& p, uint64_t a, uint64_t b, uint64_t res, bool is_sub) {
  p.zf = res == 0;
  p.sf = int64_t(res) < 0;
  bool sa = int64_t(a) < 0, sb = int64_t(b) < 0, sr = int64_t(res) < 0;
  p.of = is_sub ? (sa != sb && sr != sa) : (sa == sb && sr != sa);
}

void set_flags_logic(SipState& p, uint64_t res) {
  p.zf = res == 0;
  p.sf = int64_t(res) < 0;
  p.of = false;
}

bool cond_holds(const SipState& p, isa::Cond c) {
  switch (c) {
    case isa::Cond::Eq: return p.zf;
    case isa::Cond::Ne: return !p.zf;
    case isa::Cond::Lt: return p.sf != p.of;
    case isa::Cond::Ge: return p.sf == p.of;
  }
  return false;
}

}  // namespace

// Reads or writes `n` bytes under the domain policy. `carve` permits the
// cfi_guard read from region C.
static std::optional<Fault> access_mem(Sandbox& sb, SipState& p, uint64_t addr,
                                       size_t n, uint8_t* rbuf, const uint8_t* wbuf,
                                       bool carve) {
  auto fault = [&](FaultKind k, const char* d) {
    return Fault{k, p.pid, p.rip, addr, d};
  };
  const DomainLayout& d = p.dom;
  if (addr >= d.d_begin && addr + n <= d.d_end) {
    size_t off = addr - d.d_begin;
    if (rbuf) std::memcpy(rbuf, p.dspace.data() + off, n);
    if (wbuf) std::memcpy(p.dspace.data() + off, wbuf, n);
    return std::nullopt;
  }
  if (addr >= d.c_begin && addr + n <= d.c_end) {
    if (rbuf && (carve || p.permissive)) {
      std::memcpy(rbuf, p.code.data() + (addr - d.c_begin), n);
      if (wbuf) std::memcpy(p.code.data() + (addr - d.c_begin), wbuf, n);
      return std::nullopt;
    }
    if (wbuf && p.permissive) {
      std::memcpy(p.code.data() + (addr - d.c_begin), wbuf, n);
      return std::nullopt;
    }
    return fault(FaultKind::PermissionDenied, "data access into region C");
  }
  if (addr >= d.c_begin && addr + n <= d.d_end + kGuardBytes)
    return fault(FaultKind::PermissionDenied, "access into a guard region");
  if (sb.find_domain(addr))
    return fault(FaultKind::PermissionDenied, "access into a foreign domain");
  return fault(FaultKind::UnmappedAccess, "address is not mapped");
}

std::optional<Fault> Sandbox::step(SipState& p, bool monitored) {
  auto fault = [&](FaultKind k, uint64_t addr, const char* d) {
    return Fault{k, p.pid, p.rip, addr, d};
  };
  const DomainLayout& dom = p.dom;
  if (p.rip < dom.c_begin || p.rip >= dom.c_end)
    return fault(FaultKind::NonExecutableFetch, p.rip, "rip outside region C");
  uint64_t code_off = p.rip - dom.c_begin;

  if (monitored && !p.permissive) {
    auto it = reachable_.find(p.pid);
    if (it != reachable_.end() && !it->second.count(p.rip))
      monitor_events.push_back({p.pid, p.rip, "fetch outside the verified reachable set"});
    if (p.bnd[0] != std::make_pair(dom.d_begin, dom.d_end - 1))
      monitor_events.push_back({p.pid, p.rip, "bnd0 was mutated"});
    uint64_t rsp = p.reg(Reg::rsp);
    if (rsp < dom.d_begin || rsp > dom.d_end)
      monitor_events.push_back({p.pid, p.rip, "rsp left region D"});
  }

  auto dr = isa::decode(p.code, code_off);
  auto* inp = std::get_if<Instruction>(&dr);
  if (!inp)
    return fault(FaultKind::NonExecutableFetch, p.rip, "undecodable instruction");
  const Instruction in = *inp;
  uint64_t next = p.rip + in.length;

  auto read64 = [&](uint64_t a, uint64_t& v, bool carve) -> std::optional<Fault> {
    uint8_t b[8];
    if (auto f = access_mem(*this, p, a, 8, b, nullptr, carve)) return f;
    v = 0;
    for (int i = 0; i < 8; i++) v |= uint64_t(b[i]) << (8 * i);
    return std::nullopt;
  };
  auto write64 = [&](uint64_t a, uint64_t v) -> std::optional<Fault> {
    uint8_t b[8];
    for (int i = 0; i < 8; i++) b[i] = uint8_t(v >> (8 * i));
    return access_mem(*this, p, a, 8, nullptr, b, false);
  };

  switch (in.cls) {
    case InstrClass::Nop:
    case InstrClass::CfiLabel:
      break;
    case InstrClass::MovRegImm:
      p.reg(in.reg) = uint64_t(in.imm);
      break;
    case InstrClass::MovRegReg:
      p.reg(in.reg) = p.reg(in.reg2);
      break;
    case InstrClass::Load: {
      uint64_t a = effective_addr(p, in, next);
      bool carve = !p.permissive && a >= dom.c_begin && a < dom.c_end &&
                   is_cfi_guard_load_here(p, code_off);
      uint64_t v;
      if (auto f = read64(a, v, carve)) return f;
      p.reg(in.reg) = v;
      break;
    }
    case InstrClass::Store: {
      uint64_t a = effective_addr(p, in, next);
      if (auto f = write64(a, p.reg(in.reg))) return f;
      break;
    }
    case InstrClass::Lea:
      p.reg(in.reg) = effective_addr(p, in, next);
      break;
    case InstrClass::Alu: {
      uint64_t a = p.reg(in.reg);
      uint64_t b = in.alu_imm ? uint64_t(int64_t(in.imm)) : p.reg(in.reg2);
      uint64_t res = 0;
      switch (in.alu) {
        case isa::AluOp::Add:
          res = a + b;
          set_flags_arith(p, a, b, res, false);
          p.reg(in.reg) = res;
          break;
        case isa::AluOp::Sub:
          res = a - b;
          set_flags_arith(p, a, b, res, true);
          p.reg(in.reg) = res;
          break;
        case isa::AluOp::Cmp:
          res = a - b;
          set_flags_arith(p, a, b, res, true);
          break;
        case isa::AluOp::And: res = a & b; set_flags_logic(p, res); p.reg(in.reg) = res; break;
        case isa::AluOp::Or:  res = a | b; set_flags_logic(p, res); p.reg(in.reg) = res; break;
        case isa::AluOp::Xor: res = a ^ b; set_flags_logic(p, res); p.reg(in.reg) = res; break;
      }
      break;
    }
    case InstrClass::Push: {
      uint64_t rsp = p.reg(Reg::rsp) - 8;
      if (auto f = write64(rsp, p.reg(in.reg))) return f;
      p.reg(Reg::rsp) = rsp;
      break;
    }
    case InstrClass::Pop: {
      uint64_t v;
      if (auto f = read64(p.reg(Reg::rsp), v, false)) return f;
      p.reg(Reg::rsp) += 8;
      p.reg(in.reg) = v;
      break;
    }
    case InstrClass::DirectJump:
      p.rip = dom.c_begin + in.rel_target;
      return std::nullopt;
    case InstrClass::CondJump:
      p.rip = cond_holds(p, in.cond) ? dom.c_begin + in.rel_target : next;
      return std::nullopt;
    case InstrClass::DirectCall: {
      uint64_t rsp = p.reg(Reg::rsp) - 8;
      if (auto f = write64(rsp, next)) return f;
      p.reg(Reg::rsp) = rsp;
      p.rip = dom.c_begin + in.rel_target;
      return std::nullopt;
    }
    case InstrClass::IndirectJumpReg:
      p.rip = p.reg(in.reg);
      return std::nullopt;
    case InstrClass::IndirectCallReg: {
      uint64_t rsp = p.reg(Reg::rsp) - 8;
      if (auto f = write64(rsp, next)) return f;
      p.reg(Reg::rsp) = rsp;
      p.rip = p.reg(in.reg);
      return std::nullopt;
    }
    case InstrClass::IndirectJumpMem: {
      uint64_t v;
      if (auto f = read64(effective_addr(p, in, next), v, false)) return f;
      p.rip = v;
      return std::nullopt;
    }
    case InstrClass::IndirectCallMem: {
      uint64_t v;
      if (auto f = read64(effective_addr(p, in, next), v, false)) return f;
      uint64_t rsp = p.reg(Reg::rsp) - 8;
      if (auto f = write64(rsp, next)) return f;
      p.reg(Reg::rsp) = rsp;
      p.rip = v;
      return std::nullopt;
    }
    case InstrClass::Return: {
      uint64_t v;
      if (auto f = read64(p.reg(Reg::rsp), v, false)) return f;
      p.reg(Reg::rsp) += 8;
      p.rip = v;
      return std::nullopt;
    }
    case InstrClass::BndCheckLower:
    case InstrClass::BndCheckUpper: {
      p.bnd_checks++;
      uint64_t v = in.bnd_mem ? effective_addr(p, in, next) : p.reg(in.reg);
      auto [lb, ub] = p.bnd[in.bnd];
      if (in.cls == InstrClass::BndCheckLower && v < lb)
        return fault(FaultKind::BoundLower, v, "bound check failed");
      if (in.cls == InstrClass::BndCheckUpper && v > ub)
        return fault(FaultKind::BoundUpper, v, "bound check failed");
      if (in.cls == InstrClass::BndCheckUpper) {
        // the upper check completes a guard pair
        if (in.bnd == 0) p.mem_guard_execs++;
        if (in.bnd == 1) p.cfi_guard_execs++;
      }
      break;
    }
    case InstrClass::SyscallGate: {
      if (!p.permissive) {
        uint64_t r13 = p.reg(Reg::r13);
        bool sane = r13 >= dom.c_begin && r13 + isa::kCfiLabelLength <= dom.c_end;
        if (sane) {
          uint64_t off = r13 - dom.c_begin;
          for (int i = 0; i < 4; i++)
            if (p.code[off + i] != isa::kMagic[i]) sane = false;
        }
        if (!sane)
          return fault(FaultKind::SyscallSanity, r13,
                       "resumption point is not a label");
      }
      bool blocked = false;
      if (auto f = dispatch_syscall(p, blocked)) return f;
      if (blocked) {
        p.status = ProcStatus::Blocked;
        return std::nullopt;  // rip stays at the gate; retried later
      }
      if (p.status == ProcStatus::Exited) return std::nullopt;
      if (p.permissive) {
        p.rip = next;
      } else {
        p.reg(Reg::r10) = 0;
        p.reg(Reg::r11) = 0;
        p.rip = p.reg(Reg::r13);
      }
      return std::nullopt;
    }
    case InstrClass::Dangerous:
    case InstrClass::VectorGather:
      if (!p.permissive)
        return fault(FaultKind::DangerousInstr, p.rip, isa::mnemonic(in).c_str());
      break;  // reference mode treats them as no-ops
  }
  p.rip = next;
  return std::nullopt;
}

std::optional<Fault> Sandbox::dispatch_syscall(SipState& p, bool& blocked) {
  uint64_t num = p.reg(Reg::rax);
  uint64_t a0 = p.reg(Reg::rdi), a1 = p.reg(Reg::rsi), a2 = p.reg(Reg::rdx);
  SyscallRecord rec{p.pid, num, {a0, a1, a2}, 0, {}};
  uint64_t ret = uint64_t(-1);
  auto in_data = [&](uint64_t addr, uint64_t n) {
    bool in_d = addr >= p.dom.d_begin && addr + n <= p.dom.d_end;
    bool in_c = addr >= p.dom.c_begin && addr + n <= p.dom.c_end;
    return p.permissive ? in_d || in_c : in_d;
  };

  switch (num) {
    case 0:  // exit
      p.status = ProcStatus::Exited;
      p.exit_code = int(a0);
      for (auto& fd : p.fds) {
        if (fd.kind == FdKind::PipeRead) pipes[fd.pipe].readers--;
        if (fd.kind == FdKind::PipeWrite) pipes[fd.pipe].writers--;
        fd.kind = FdKind::Closed;
      }
      ret = 0;
      break;
    case 1: {  // write(fd, buf, len)
      uint64_t len = std::min<uint64_t>(a2, 1 << 20);
      if (a0 >= p.fds.size() || !in_data(a1, len)) break;
      FdEntry& fd = p.fds[a0];
      std::string bytes(len, '\0');
      for (uint64_t i = 0; i < len; i++)
        bytes[i] = char(a1 + i >= p.dom.d_begin
                            ? p.dspace[a1 - p.dom.d_begin + i]
                            : p.code[a1 - p.dom.c_begin + i]);
      if (fd.kind == FdKind::Stdout) {
        p.output += bytes;
      } else if (fd.kind == FdKind::PipeWrite) {
        for (char c : bytes) pipes[fd.pipe].buf.push_back(uint8_t(c));
      } else {
        break;
      }
      rec.payload = std::move(bytes);
      ret = len;
      break;
    }
    case 2: {  // read(fd, buf, len)
      uint64_t len = std::min<uint64_t>(a2, 1 << 20);
      if (a0 >= p.fds.size() || !in_data(a1, len)) break;
      FdEntry& fd = p.fds[a0];
      if (fd.kind == FdKind::Stdin) {
        ret = 0;
        break;
      }
      if (fd.kind != FdKind::PipeRead) break;
      Pipe& pipe = pipes[fd.pipe];
      if (pipe.buf.empty()) {
        if (pipe.writers > 0) {
          blocked = true;
          return std::nullopt;
        }
        ret = 0;
        break;
      }
      uint64_t n = std::min<uint64_t>(len, pipe.buf.size());
      std::string bytes;
      for (uint64_t i = 0; i < n; i++) {
        uint8_t b = pipe.buf.front();
        pipe.buf.pop_front();
        p.dspace[a1 - p.dom.d_begin + i] = b;
        bytes.push_back(char(b));
      }
      rec.payload = std::move(bytes);
      ret = n;
      break;
    }
    case 3: {  // spawn(image index); child inherits the fd table
      if (a0 >= images.size()) break;
      auto r = load(images[a0], p.permissive);
      if (auto* pid = std::get_if<int>(&r)) {
        SipState& child = procs.back();
        child.fds = p.fds;
        for (auto& fd : child.fds) {
          if (fd.kind == FdKind::PipeRead) pipes[fd.pipe].readers++;
          if (fd.kind == FdKind::PipeWrite) pipes[fd.pipe].writers++;
        }
        ret = uint64_t(*pid);
      }
      break;
    }
    case 4:  // yield
      ret = 0;
      break;
    case 5: {  // pipe(fd_pair_out): two u64 slots, read end then write end
      if (!in_data(a0, 16)) break;
      pipes.push_back(Pipe{{}, 1, 1});
      size_t pi = pipes.size() - 1;
      uint64_t rfd = p.fds.size();
      p.fds.push_back({FdKind::PipeRead, pi});
      uint64_t wfd = p.fds.size();
      p.fds.push_back({FdKind::PipeWrite, pi});
      for (int i = 0; i < 8; i++) p.dspace[a0 - p.dom.d_begin + i] = uint8_t(rfd >> (8 * i));
      for (int i = 0; i < 8; i++)
        p.dspace[a0 - p.dom.d_begin + 8 + i] = uint8_t(wfd >> (8 * i));
      ret = 0;
      break;
    }
    case 6:
      ret = uint64_t(p.pid);
      break;
    case 7: {  // wait(pid)
      auto q = std::find_if(procs.begin(), procs.end(),
                            [&](auto& c) { return c.pid == int(a0); });
      if (q == procs.end()) break;
      if (q->status == ProcStatus::Exited) {
        ret = uint64_t(q->exit_code);
        break;
      }
      if (q->status == ProcStatus::Faulted) {
        ret = uint64_t(-2);
        break;
      }
      blocked = true;
      return std::nullopt;
    }
    default:
      break;
  }
  rec.ret = ret;
  p.reg(Reg::rax) = ret;
  p.syscall_count++;
  trace_.push_back(std::move(rec));
  return std::nullopt;
}

RunReport Sandbox::run(uint64_t max_steps) { return run_loop(max_steps, false); }
RunReport Sandbox::monitor_run(uint64_t max_steps) { return run_loop(max_steps, true); }

RunReport Sandbox::run_loop(uint64_t max_steps, bool monitored) {
  RunReport rep;
  constexpr uint64_t kSlice = 64;  // cooperative round-robin quantum
  while (rep.steps < max_steps) {
    bool progress = false;
    bool live = false;
    for (size_t i = 0; i < procs.size(); i++) {
      SipState& p = procs[i];
      if (p.status == ProcStatus::Exited || p.status == ProcStatus::Faulted) continue;
      live = true;
      if (p.status == ProcStatus::Blocked) p.status = ProcStatus::Running;
      for (uint64_t s = 0; s < kSlice && rep.steps < max_steps; s++) {
        if (p.status != ProcStatus::Running) break;
        uint64_t rip_before = p.rip;
        auto f = step(p, monitored);
        rep.steps++;
        if (f) {
          p.status = ProcStatus::Faulted;
          rep.faults.push_back(*f);
          progress = true;
          break;
        }
        if (p.status == ProcStatus::Blocked) {
          if (p.rip != rip_before) progress = true;
          break;
        }
        progress = true;
        if (p.status == ProcStatus::Exited) break;
      }
    }
    if (!live) break;
    if (!progress) {
      rep.deadlock = true;
      break;
    }
  }
  if (rep.steps >= max_steps) rep.step_limit_hit = true;
  for (auto& p : procs) {
    if (p.status == ProcStatus::Exited) rep.exits[p.pid] = p.exit_code;
    rep.bnd_checks += p.bnd_checks;
    rep.mem_guard_execs += p.mem_guard_execs;
    rep.cfi_guard_execs += p.cfi_guard_execs;
    rep.syscall_count += p.syscall_count;
  }
  rep.trace = trace_;
  return rep;
}

}  // namespace mmdsfi::runtime
