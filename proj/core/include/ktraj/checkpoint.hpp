#pragma once

// Named-tensor checkpoint container.
//
// A checkpoint is a pair of files sharing a stem:
//   <stem>.bin   all tensors back to back, float64 little-endian
//   <stem>.json  manifest: schema version, tensor table (name, shape, byte
//                offset into the .bin), plus free-form scalar/string metadata
//
// Writers emit to temporary files and rename into place so a crash mid-write
// never leaves a half-finished checkpoint at the target path.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ktraj {

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;  // row-major; empty means scalar
  std::vector<double> data;

  std::uint64_t count() const {
    std::uint64_t c = 1;
    for (auto d : shape) c *= d;
    return c;
  }
};

// Sidecar metadata kept alongside the tensor table. Kept as flat maps so the
// JSON dependency stays out of this header.
struct CheckpointMeta {
  std::map<std::string, double> numbers;
  std::map<std::string, std::string> strings;
};

struct Checkpoint {
  std::vector<Tensor> tensors;
  CheckpointMeta meta;

  const Tensor* find(const std::string& name) const;
  // Throws io_error if absent.
  const Tensor& require(const std::string& name) const;
};

// `path` is the stem; ".bin" and ".json" are appended.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ktraj
