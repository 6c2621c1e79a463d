// The instrumentation pipeline: cfi_label insertion, lowering of unsafe
// control transfers, mem_guard insertion, range-analysis optimizations,
// and assembly into a SIPB image.
#pragma once

#include <cstdint>
#include <string>
#include <variant>

#include "mmdsfi/image.hpp"
#include "mmdsfi/sasm.hpp"

namespace mmdsfi::instrument {

// Appended by the loader at the end of C: cfi_label + syscall gate.
constexpr uint64_t kTrampolineSize = isa::kCfiLabelLength + 2;

struct Options {
  bool confine_loads = true;
  bool optimize = true;
  uint64_t d_capacity = 0;       // 0 = data size + kDefaultHeap + stack
  uint64_t stack_reserve = 16384;
  uint64_t c_capacity = 1 << 20;
};

constexpr uint64_t kDefaultHeap = 65536;

struct InstrumentError {
  std::string code;  // RspAdjustTooLarge, MagicCollisionUnresolvable, ImageTooLarge, ...
  std::string detail;
};

sasm::SasmProgram insert_cfi_labels(sasm::SasmProgram p);
sasm::SasmProgram lower_unsafe_transfers(sasm::SasmProgram p);
std::variant<sasm::SasmProgram, InstrumentError> insert_mem_guards(
    sasm::SasmProgram p, bool confine_loads);
sasm::SasmProgram optimize(sasm::SasmProgram p, const Options& opts);

// Encodes the (instrumented or raw) program: lays out code then data,
// resolves labels, enforces MAGIC nonexistence outside inserted
// cfi_labels, and emits the image.
std::variant<image::SipbImage, InstrumentError> assemble(
    const sasm::SasmProgram& p, const Options& opts);

// Full pipeline: labels -> lowering -> guards -> optimize -> assemble.
std::variant<image::SipbImage, InstrumentError> instrument(
    const sasm::SasmProgram& p, const Options& opts);

// Uninstrumented assembly for the permissive reference interpreter: no
// labels or guards (one cfi_label at entry to satisfy the image format),
// ret / indirect transfers / syscall kept as real instructions.
std::variant<image::SipbImage, InstrumentError> assemble_raw(
    const sasm::SasmProgram& p, const Options& opts);

// Static count of mem_guard pseudo-ops in an item stream (testing aid).
size_t static_guard_count(const sasm::SasmProgram& p);

}  // namespace mmdsfi::instrument
