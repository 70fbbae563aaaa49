#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hifuse/config.hpp"
#include "hifuse/tensor.hpp"

namespace hifuse {

/// Module key of a parameter name, e.g. "global.stage3", "local.stem" or
/// "head".
std::string module_of(const std::string& param_name);

struct ParamCensus {
  Index total = 0;
  std::vector<std::pair<std::string, Index>> modules;  // in registration order
};

/// Exact census from the parameter registry of a freshly built model.
ParamCensus param_census(const ModelConfig& config);
Index count_params(const ModelConfig& config);

/// Parameters of one local block plus one global block at `stage` (0-based),
/// the unit by which depth changes alter the census.
Index block_pair_params(const ModelConfig& config, int stage);

/// Multiply-accumulate counts of one batch-1 forward pass, from per-op
/// closed forms. `attention[s]` is the summed attention cost
/// (projections plus score and value products) of stage s.
struct FlopCensus {
  std::uint64_t conv = 0;
  std::uint64_t linear = 0;
  std::uint64_t matmul = 0;
  std::array<std::uint64_t, 4> attention{};
  std::vector<std::pair<std::string, std::uint64_t>> modules;
  std::uint64_t total() const { return conv + linear + matmul; }
};

FlopCensus count_flops(const ModelConfig& config);

struct StageShape {
  Index size = 0;
  Index channels = 0;
  int window = 0;
  int shift = 0;
};

std::array<StageShape, 4> stage_schedule(const ModelConfig& config);

/// Plain-text report: stage schedule, per-module parameters and MACs, totals.
std::string inspect_report(const ModelConfig& config);

}  // namespace hifuse
