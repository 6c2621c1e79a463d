// SIPB container round-trip and malformed-input handling.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "mmdsfi/image.hpp"
#include "mmdsfi/isa.hpp"

using namespace mmdsfi;

namespace {

image::SipbImage sample() {
  image::SipbImage img;
  img.code = isa::encode_or_throw(isa::make_cfi_label(0));
  img.code.push_back(0x90);
  img.data = {1, 2, 3, 4};
  img.entry = 0;
  img.d_capacity = 8192;
  img.stack_reserve = 1024;
  return img;
}

std::vector<uint8_t> bytes_of(const image::SipbImage& img) {
  auto r = image::write_image(img);
  REQUIRE(std::holds_alternative<std::vector<uint8_t>>(r));
  return std::get<std::vector<uint8_t>>(r);
}

}  // namespace

TEST_CASE("golden header layout") {
  auto b = bytes_of(sample());
  REQUIRE(b.size() == image::kHeaderSize + 9 + 4);
  CHECK(b[0] == 'S');
  CHECK(b[1] == 'I');
  CHECK(b[2] == 'P');
  CHECK(b[3] == 'B');
  CHECK(b[4] == 1);  // version
  CHECK(b[8] == 0);  // entry
  CHECK(b[12] == 9);  // code_size
  CHECK(b[16] == 4);  // data_size
  CHECK(b[20] == 0x00);  // d_capacity = 8192 LE
  CHECK(b[21] == 0x20);
  CHECK(b[28] == 0x00);  // stack_reserve = 1024 LE
  CHECK(b[29] == 0x04);
  CHECK(b[image::kHeaderSize] == 0x0F);  // first code byte
  CHECK(b.back() == 4);                  // last data byte
}

TEST_CASE("write/read round trip") {
  auto img = sample();
  auto r = image::read_image(bytes_of(img));
  REQUIRE(std::holds_alternative<image::SipbImage>(r));
  CHECK(std::get<image::SipbImage>(r) == img);
}

TEST_CASE("file round trip") {
  auto img = sample();
  std::string path = "test_image_roundtrip.sipb";
  REQUIRE(!image::write_image_file(img, path).has_value());
  auto r = image::read_image_file(path);
  REQUIRE(std::holds_alternative<image::SipbImage>(r));
  CHECK(std::get<image::SipbImage>(r) == img);
  std::remove(path.c_str());
}

TEST_CASE("malformed containers") {
  auto good = bytes_of(sample());

  auto expect = [&](std::vector<uint8_t> b, image::FormatErrorKind kind) {
    auto r = image::read_image(b);
    auto* e = std::get_if<image::FormatError>(&r);
    REQUIRE(e != nullptr);
    CHECK(e->kind == kind);
  };

  auto bad_magic = good;
  bad_magic[0] = 'X';
  expect(bad_magic, image::FormatErrorKind::BadMagic);

  auto bad_version = good;
  bad_version[4] = 99;
  expect(bad_version, image::FormatErrorKind::BadVersion);

  auto short_file = good;
  short_file.pop_back();
  expect(short_file, image::FormatErrorKind::TruncatedSection);

  auto lying_header = good;
  lying_header[12] += 1;  // code_size larger than what follows
  expect(lying_header, image::FormatErrorKind::TruncatedSection);

  expect({'S', 'I', 'P'}, image::FormatErrorKind::BadMagic);
  expect({'S', 'I', 'P', 'B', 1, 0, 0, 0},
         image::FormatErrorKind::TruncatedSection);

  auto reserved = good;
  reserved[36] = 1;
  expect(reserved, image::FormatErrorKind::InvariantViolation);
}

TEST_CASE("capacity invariants") {
  auto img = sample();
  img.d_capacity = 2;  // smaller than the data section
  auto e = image::check_invariants(img);
  REQUIRE(e.has_value());
  CHECK(e->kind == image::FormatErrorKind::InvariantViolation);

  img = sample();
  img.stack_reserve = img.d_capacity;  // no room left beside the data
  e = image::check_invariants(img);
  REQUIRE(e.has_value());

  // entry placement is the verifier's business, not the container's
  img = sample();
  img.entry = 8;  // points at the nop
  CHECK(!image::check_invariants(img).has_value());
}
