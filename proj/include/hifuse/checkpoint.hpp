#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hifuse/config.hpp"
#include "hifuse/model.hpp"
#include "hifuse/train.hpp"

namespace hifuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container: "HFCK", u32 version, metadata, a manifest of (name, offset,
/// shape) entries, then one HFT1 blob per tensor. Optimizer moments are
/// stored as "optim.m.<param>" and "optim.v.<param>".
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  RngState rng;
  double best_metric = -1.0;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& name = "<memory>");
/// Written to `<path>.tmp` and renamed into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of the model (and, when given, the optimizer/training state).
Checkpoint capture_checkpoint(const HiFuseModel<float>& model, const TrainState* state, const RunConfig& cfg);

/// Copies tensors into `model` (and `state`). The parameter names must match
/// the model registry exactly: missing names, unexpected names and shape
/// mismatches raise distinct errors that list the offending entries.
void restore_checkpoint(const Checkpoint& ckpt, HiFuseModel<float>& model, TrainState* state = nullptr);

/// The run configuration stored in the checkpoint.
RunConfig checkpoint_config(const Checkpoint& ckpt);

}  // namespace hifuse
