// SASM: the line-oriented textual assembly dialect consumed by the
// instrumenter. Grammar:
//   func NAME:            begins a function
//   LABEL:                defines a label (global namespace)
//   mnemonic dst, src     subset instructions; operands are registers
//                         (minus the reserved r10/r11), immediates,
//                         [base], [base+disp], [base+index*scale+disp],
//                         label (branch target), &label (address-of)
//   .data NAME: quad v1, v2...   /  .data NAME: bytes b1 b2...
//   #                     starts a comment
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mmdsfi/isa.hpp"

namespace mmdsfi::sasm {

struct MemExpr {
  std::optional<isa::Reg> base;
  std::optional<isa::Reg> index;
  uint8_t scale = 1;
  int64_t disp = 0;
  bool operator==(const MemExpr&) const = default;
};

enum class OperandKind : uint8_t { Reg, Imm, Mem, Label, AddrOf };

struct Operand {
  OperandKind kind = OperandKind::Imm;
  isa::Reg reg = isa::Reg::rax;
  int64_t imm = 0;
  MemExpr mem;
  std::string label;
};

// Item mnemonics include the internal pseudo-ops introduced by the
// instrumentation passes: cfi_label, mem_guard, cfi_guard.
struct Item {
  bool is_label = false;
  std::string label;       // label definition
  std::string mn;          // mnemonic
  std::vector<Operand> ops;
  int line = 0;
  int group = -1;  // items sharing a group id form an atomic sequence
};

struct Function {
  std::string name;
  std::vector<Item> body;
  int line = 0;
};

struct DataBlob {
  std::string name;
  std::vector<uint8_t> bytes;
  // (byte offset, label) pairs for `quad &label` entries; the referenced
  // label's code offset is stored little-endian at that position.
  std::vector<std::pair<size_t, std::string>> addr_refs;
};

struct SasmProgram {
  std::vector<Function> functions;
  std::vector<DataBlob> data;
  std::string entry;  // entry function name
};

enum class ParseErrorKind : uint8_t {
  SyntaxError,
  UnknownMnemonic,
  ReservedRegister,
  DuplicateLabel,
  UndefinedLabel,
};

struct ParseError {
  ParseErrorKind kind;
  int line;
  std::string detail;
};

const char* parse_error_name(ParseErrorKind k);

std::variant<SasmProgram, ParseError> parse_sasm(const std::string& text);

}  // namespace mmdsfi::sasm
