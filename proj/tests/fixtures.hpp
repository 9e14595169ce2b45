#pragma once

#include "bcosdiff/model.hpp"

namespace testing {

// A model small enough for exact-arithmetic checks in a few milliseconds.
inline bcosdiff::ModelConfig tiny_config(std::uint64_t init_seed = 0) {
  bcosdiff::ModelConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.context_dim = 8;
  c.heads = 2;
  c.max_tokens = 10;
  c.time_features = 8;
  c.time_dim = 8;
  c.time_channels = 4;
  c.init_seed = init_seed;
  return c;
}

}  // namespace testing
