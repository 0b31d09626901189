#pragma once

// Parameter checkpoints. Layout, all integers and floats little-endian:
//   magic "MFDK1", version u32,
//   per-tensor records: name length u32 (nonzero), UTF-8 name, rank u64,
//     dims u64 each, payload f64 each,
//   end marker: name length 0,
//   trailer: byte length u64 + UTF-8 text block (model/run configuration).
// Round-trips are bit-exact.

#include <string>
#include <utility>
#include <vector>

#include "mfd/tensor.hpp"

namespace mfd {

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  NamedTensorList tensors;
  std::string trailer;
};

void save_checkpoint(const std::string& path, const NamedTensorList& tensors,
                     const std::string& trailer_text);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mfd
