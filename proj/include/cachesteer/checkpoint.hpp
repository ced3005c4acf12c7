#pragma once

// Self-describing binary container for trained parameters: a versioned magic
// line, a JSON metadata block (vocab, hyperparameters, training echo), and
// named float32 tensors. Little-endian on disk regardless of host.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cachesteer/tensor.hpp"

namespace cachesteer {

struct Checkpoint {
  std::string magic;  // e.g. "CACHESTEER-LM-v1"
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Magic mismatch -> compatibility error naming both version strings.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_magic);

}  // namespace cachesteer
