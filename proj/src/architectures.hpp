#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fedcast/models.hpp"

namespace fedcast {

enum class InitKind { kWeight, kZero, kOne, kLstmBias };

struct ParamDecl {
  std::string name;
  Shape shape;
  InitKind init = InitKind::kWeight;
  std::size_t fan_in = 0;
  bool is_batchnorm = false;
  bool trainable = true;
};

/// Names, shapes and initializers of every parameter, in ParamSet order.
std::vector<ParamDecl> param_layout(const ModelSpec& spec);

}  // namespace fedcast
