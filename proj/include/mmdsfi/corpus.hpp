// Built-in program corpus: benign sources exercising every instrumentation
// pattern, and hostile images that each trip one verifier check.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmdsfi/image.hpp"

namespace mmdsfi::corpus {

struct BenignProgram {
  std::string name;
  std::string source;
};

const std::vector<BenignProgram>& benign_programs();
const BenignProgram* benign_by_name(const std::string& name);

struct AdversarialCase {
  std::string name;
  std::vector<uint8_t> bytes;  // serialized image, possibly malformed
  std::string expected_code;   // format-error or verifier violation code
};

std::vector<AdversarialCase> adversarial_cases();

// Parses/verifies the bytes the way the loader would and reports the first
// failure code, or "accepted".
std::string check_image_bytes(const std::vector<uint8_t>& bytes);

}  // namespace mmdsfi::corpus
