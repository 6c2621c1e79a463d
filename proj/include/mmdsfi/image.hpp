// SIPB binary container carrying instrumented code and initial data
// between the instrumenter, the verifier, and the loader.
//
// Layout (all integers little-endian, no padding):
//   0  magic "SIPB"
//   4  version u32 (= 1)
//   8  entry u32
//   12 code_size u32
//   16 data_size u32
//   20 d_capacity u64
//   28 stack_reserve u64
//   36 reserved u32 (= 0)
//   40 code bytes, then data bytes
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mmdsfi::image {

constexpr uint32_t kSipbVersion = 1;
constexpr size_t kHeaderSize = 40;

struct SipbImage {
  uint32_t version = kSipbVersion;
  std::vector<uint8_t> code;
  std::vector<uint8_t> data;  // initial contents of region D
  uint32_t entry = 0;         // code offset; must point at a cfi_label
  uint64_t d_capacity = 0;
  uint64_t stack_reserve = 0;

  bool operator==(const SipbImage&) const = default;
};

enum class FormatErrorKind : uint8_t {
  BadMagic,
  BadVersion,
  TruncatedSection,
  InvariantViolation,
};

struct FormatError {
  FormatErrorKind kind;
  std::string detail;
};

const char* format_error_name(FormatErrorKind k);

// Checks the SipbImage capacity invariants. Entry placement is judged by
// the verifier, not here.
std::optional<FormatError> check_invariants(const SipbImage& img);

std::variant<std::vector<uint8_t>, FormatError> write_image(const SipbImage& img);
std::variant<SipbImage, FormatError> read_image(const std::vector<uint8_t>& bytes);

std::variant<SipbImage, FormatError> read_image_file(const std::string& path);
std::optional<FormatError> write_image_file(const SipbImage& img, const std::string& path);

}  // namespace mmdsfi::image
