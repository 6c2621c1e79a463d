#include "mmdsfi/image.hpp"

#include <cstring>
#include <fstream>
#include <optional>

#include "mmdsfi/isa.hpp"

namespace mmdsfi::image {

namespace {

constexpr char kMagicStr[4] = {'S', 'I', 'P', 'B'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; i++) out.push_back(uint8_t(v >> (8 * i)));
}
uint32_t get_u32(const std::vector<uint8_t>& b, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(b[off + i]) << (8 * i);
  return v;
}
uint64_t get_u64(const std::vector<uint8_t>& b, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= uint64_t(b[off + i]) << (8 * i);
  return v;
}

}  // namespace

const char* format_error_name(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::BadMagic: return "BadMagic";
    case FormatErrorKind::BadVersion: return "BadVersion";
    case FormatErrorKind::TruncatedSection: return "TruncatedSection";
    case FormatErrorKind::InvariantViolation: return "InvariantViolation";
  }
  return "?";
}

std::optional<FormatError> check_invariants(const SipbImage& img) {
  // Entry-at-label is deliberately NOT a container invariant; the verifier
  // owns that judgement (AbortEntryNotLabel) so hostile images reach it.
  if (img.data.size() > img.d_capacity)
    return FormatError{FormatErrorKind::InvariantViolation,
                       "data exceeds d_capacity"};
  if (img.stack_reserve > img.d_capacity - img.data.size())
    return FormatError{FormatErrorKind::InvariantViolation,
                       "stack_reserve exceeds free space in D"};
  return std::nullopt;
}

std::variant<std::vector<uint8_t>, FormatError> write_image(const SipbImage& img) {
  if (auto e = check_invariants(img)) return *e;
  if (img.version != kSipbVersion)
    return FormatError{FormatErrorKind::BadVersion, "unsupported version"};
  std::vector<uint8_t> out;
  out.reserve(kHeaderSize + img.code.size() + img.data.size());
  out.insert(out.end(), kMagicStr, kMagicStr + 4);
  put_u32(out, img.version);
  put_u32(out, img.entry);
  put_u32(out, uint32_t(img.code.size()));
  put_u32(out, uint32_t(img.data.size()));
  put_u64(out, img.d_capacity);
  put_u64(out, img.stack_reserve);
  put_u32(out, 0);  // reserved
  out.insert(out.end(), img.code.begin(), img.code.end());
  out.insert(out.end(), img.data.begin(), img.data.end());
  return out;
}

std::variant<SipbImage, FormatError> read_image(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagicStr, 4) != 0)
      return FormatError{FormatErrorKind::BadMagic, "missing SIPB magic"};
    return FormatError{FormatErrorKind::TruncatedSection, "header truncated"};
  }
  if (std::memcmp(bytes.data(), kMagicStr, 4) != 0)
    return FormatError{FormatErrorKind::BadMagic, "missing SIPB magic"};
  SipbImage img;
  img.version = get_u32(bytes, 4);
  if (img.version != kSipbVersion)
    return FormatError{FormatErrorKind::BadVersion, "unsupported version"};
  img.entry = get_u32(bytes, 8);
  uint32_t code_size = get_u32(bytes, 12);
  uint32_t data_size = get_u32(bytes, 16);
  img.d_capacity = get_u64(bytes, 20);
  img.stack_reserve = get_u64(bytes, 28);
  if (get_u32(bytes, 36) != 0)
    return FormatError{FormatErrorKind::InvariantViolation, "reserved field nonzero"};
  if (bytes.size() != kHeaderSize + uint64_t(code_size) + uint64_t(data_size))
    return FormatError{FormatErrorKind::TruncatedSection,
                       "section sizes do not match file length"};
  img.code.assign(bytes.begin() + kHeaderSize,
                  bytes.begin() + kHeaderSize + code_size);
  img.data.assign(bytes.begin() + kHeaderSize + code_size, bytes.end());
  if (auto e = check_invariants(img)) return *e;
  return img;
}

std::variant<SipbImage, FormatError> read_image_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    return FormatError{FormatErrorKind::TruncatedSection, "cannot open " + path};
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return read_image(bytes);
}

std::optional<FormatError> write_image_file(const SipbImage& img,
                                            const std::string& path) {
  auto r = write_image(img);
  if (auto* e = std::get_if<FormatError>(&r)) return *e;
  std::ofstream f(path, std::ios::binary);
  auto& bytes = std::get<std::vector<uint8_t>>(r);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f)
    return FormatError{FormatErrorKind::TruncatedSection, "cannot write " + path};
  return std::nullopt;
}

}  // namespace mmdsfi::image
