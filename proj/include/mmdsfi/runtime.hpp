// Sandbox runtime: loads verified images into isolated domains and
// interprets them under the memory-access and control-transfer policies.
// A permissive mode runs unverified images with no restrictions; it serves
// as the semantic reference for instrumented runs.
#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "mmdsfi/image.hpp"
#include "mmdsfi/isa.hpp"
#include "mmdsfi/verifier.hpp"

namespace mmdsfi::runtime {

constexpr uint64_t kDomainAlign = 16ull << 20;  // domain bases are 16 MiB apart
constexpr uint64_t kGuardBytes = 4096;

enum class FaultKind : uint8_t {
  BoundLower,
  BoundUpper,
  UnmappedAccess,
  PermissionDenied,
  NonExecutableFetch,
  DangerousInstr,
  SyscallSanity,
};

const char* fault_name(FaultKind k);

struct Fault {
  FaultKind kind;
  int pid = 0;
  uint64_t rip = 0;
  uint64_t addr = 0;
  std::string detail;
};

struct DomainLayout {
  uint32_t id = 0;
  uint64_t c_begin = 0, c_end = 0;   // code + gate trampoline
  uint64_t d_begin = 0, d_end = 0;   // data, heap, stack
  uint64_t trampoline = 0;           // cfi_label of the syscall gate
};

enum class ProcStatus : uint8_t { Running, Blocked, Exited, Faulted };

enum class FdKind : uint8_t { Closed, Stdin, Stdout, PipeRead, PipeWrite };

struct FdEntry {
  FdKind kind = FdKind::Closed;
  size_t pipe = 0;
};

struct SipState {
  int pid = 0;
  DomainLayout dom;
  std::vector<uint8_t> code;  // includes the appended gate trampoline
  std::vector<uint8_t> dspace;
  uint64_t rip = 0;
  std::array<uint64_t, 16> regs{};
  bool zf = false, sf = false, of = false;
  std::array<std::pair<uint64_t, uint64_t>, 4> bnd{};  // lb, ub
  ProcStatus status = ProcStatus::Running;
  int exit_code = 0;
  std::vector<FdEntry> fds;
  std::string output;  // bytes written to stdout
  uint64_t bnd_checks = 0;
  uint64_t mem_guard_execs = 0;  // completed bnd0 guard pairs
  uint64_t cfi_guard_execs = 0;  // completed bnd1 guard pairs
  uint64_t syscall_count = 0;
  bool permissive = false;

  uint64_t& reg(isa::Reg r) { return regs[isa::reg_num(r)]; }
  uint64_t reg(isa::Reg r) const { return regs[isa::reg_num(r)]; }
};

struct Pipe {
  std::deque<uint8_t> buf;
  int readers = 0, writers = 0;
};

struct SyscallRecord {
  int pid = 0;
  uint64_t num = 0;
  std::array<uint64_t, 3> args{};
  uint64_t ret = 0;
  std::string payload;  // bytes transferred by write
};

struct LoadError {
  std::string message;
  std::vector<verifier::Violation> violations;
};

struct RunReport {
  uint64_t steps = 0;
  uint64_t bnd_checks = 0;       // dynamic bndcl/bndcu executions
  uint64_t mem_guard_execs = 0;  // dynamic mem_guard completions (bnd0)
  uint64_t cfi_guard_execs = 0;  // dynamic cfi_guard completions (bnd1)
  uint64_t syscall_count = 0;
  std::vector<Fault> faults;
  std::map<int, int> exits;  // pid -> exit code
  std::vector<SyscallRecord> trace;
  bool deadlock = false;
  bool step_limit_hit = false;
};

// One policy breach observed by the monitor while single-stepping. A
// verified image must produce none.
struct MonitorEvent {
  int pid = 0;
  uint64_t rip = 0;
  std::string what;
};

class Sandbox {
 public:
  // Programs available to the spawn syscall, by index.
  std::vector<image::SipbImage> images;
  verifier::Policy policy;

  // Verifies (unless permissive) and maps the image into a fresh domain.
  std::variant<int, LoadError> load(const image::SipbImage& img, bool permissive = false);

  // Round-robin execution until every process exits, faults, or deadlocks.
  RunReport run(uint64_t max_steps = 10'000'000);

  // Like run(), but asserts the policies at every step and records any
  // breach; also checks executed offsets against the verifier's reachable
  // set for non-permissive processes.
  RunReport monitor_run(uint64_t max_steps = 10'000'000);

  // deque: spawn may add processes while a reference to the parent is live
  std::deque<SipState> procs;
  std::vector<Pipe> pipes;
  std::vector<MonitorEvent> monitor_events;
  SipState* find_domain(uint64_t addr);

 private:
  RunReport run_loop(uint64_t max_steps, bool monitored);
  std::optional<Fault> step(SipState& p, bool monitored);
  std::optional<Fault> dispatch_syscall(SipState& p, bool& blocked);
  std::vector<SyscallRecord> trace_;
  std::map<int, std::set<uint64_t>> reachable_;  // pid -> allowed fetch addresses
  int next_pid_ = 1;
};

}  // namespace mmdsfi::runtime
