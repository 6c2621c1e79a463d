// Static verifier for SIPB images: complete disassembly, dangerous
// instruction scan, control-transfer policy, and memory-access policy.
#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "mmdsfi/analysis.hpp"
#include "mmdsfi/image.hpp"

namespace mmdsfi::verifier {

struct Violation {
  int stage = 0;
  uint64_t offset = 0;
  std::string code;    // AbortOutOfRange, E_CT_RET, E_MEM_UNPROVEN, ...
  std::string detail;
};

struct VerifyStats {
  size_t reachable_count = 0;
  size_t cfi_label_count = 0;
  size_t mem_guard_count = 0;
  size_t cfi_guard_count = 0;
};

struct Verdict {
  bool accepted = false;
  std::vector<Violation> violations;
  VerifyStats stats;
  analysis::ReachableSet reachable;
};

struct Policy {
  bool confine_loads = true;  // loads need the same proof as stores
};

// Stage 1: complete disassembly from the byte-blind label scan plus the
// entry point; aborts on the first structural defect.
std::variant<analysis::ReachableSet, Violation> stage1_disassemble(
    const image::SipbImage& img);

// Stage 2: no dangerous instructions among the reachable set.
std::vector<Violation> stage2_dangerous(const analysis::ReachableSet& r);

// Stage 3: every control transfer is direct-and-in-range or guarded, and no
// direct transfer enters the interior of an atomic guard group.
std::vector<Violation> stage3_transfers(const analysis::ReachableSet& r);

// Stage 4: every memory access is guard-adjacent, fact-justified by the
// range analysis, or rsp-disciplined.
std::vector<Violation> stage4_memory(const analysis::ReachableSet& r,
                                     const Policy& policy);

Verdict verify(const image::SipbImage& img, const Policy& policy = {});

}  // namespace mmdsfi::verifier
