#pragma once

#include "bcosdiff/model.hpp"

#include <map>
#include <string>
#include <vector>

namespace bcosdiff {

enum class DType : std::uint32_t { kF32 = 1, kF64 = 2 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF32;
  Tensor<double> value;  // widened; f32 blobs round-trip exactly
};

/// Versioned little-endian container: magic, version, model config, vocabulary,
/// free-form metadata (key=value), then named blobs in declaration order,
/// all lengths as 64-bit prefixes.
struct Checkpoint {
  static constexpr char kMagic[9] = "BCOSDIF1";
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  Vocabulary vocab;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> blobs;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename S>
constexpr DType dtype_of() {
  return sizeof(S) == 4 ? DType::kF32 : DType::kF64;
}

template <typename S>
Checkpoint make_checkpoint(const DiffusionModel<S>& model) {
  Checkpoint c;
  c.config = model.config();
  c.vocab = model.vocab();
  model.visit([&](const Parameter<S>& p) { c.blobs.push_back({p.name, dtype_of<S>(), p.value.template cast<double>()}); });
  return c;
}

/// Rebuilds a model at precision S; parameter names and shapes must match the
/// architecture the stored config describes.
template <typename S>
DiffusionModel<S> model_from_checkpoint(const Checkpoint& c) {
  DiffusionModel<S> model(c.config, c.vocab);
  model.visit([&](Parameter<S>& p) {
    const NamedTensor* b = c.find(p.name);
    if (!b) throw DataError("checkpoint: missing parameter '" + p.name + "'");
    if (b->value.shape() != p.value.shape()) {
      throw DataError("checkpoint: parameter '" + p.name + "' has shape " + to_string(b->value.shape()) + ", expected " +
                      to_string(p.value.shape()));
    }
    p.value = b->value.template cast<S>();
  });
  return model;
}

}  // namespace bcosdiff
