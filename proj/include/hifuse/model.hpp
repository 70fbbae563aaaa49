#pragma once

#include <array>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hifuse/config.hpp"
#include "hifuse/tensor.hpp"

namespace hifuse {

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for biases and LayerNorm gains/shifts
};

/// Ordered, named parameter registry. Registration order is the
/// initialization order and the checkpoint order.
template <class T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value, bool decay);
  /// Truncated-normal (std 0.02) weight, decayed.
  Tensor<T>& add_weight(const std::string& name, const Shape& shape, RngState& rng);
  /// Zero-initialized bias, not decayed.
  Tensor<T>& add_bias(const std::string& name, Index n);
  /// LayerNorm gain (ones) and shift (zeros) as `<prefix>.weight` / `<prefix>.bias`.
  void add_norm(const std::string& prefix, Index channels);

  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index numel() const;

  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Per-call knobs shared by the residual blocks.
struct BlockOptions {
  double ln_eps = 1e-6;
  double drop_rate = 0.0;      // stochastic-depth probability for this block
  bool training = false;
  RngState* rng = nullptr;     // required when training with drop_rate > 0
};

// Every block comes as a register_* function that adds its parameters under
// `prefix` and a forward function that reads them back by name. Maps are
// B,C,H,W unless stated otherwise; the global branch keeps B,H,W,C tokens.

template <class T>
void register_local_stem(ParamSet<T>& ps, const std::string& prefix, int in_ch, int C, RngState& rng);
/// 4x4 stride-4 conv, then LayerNorm over channels.
template <class T>
Tensor<T> local_stem(const Tensor<T>& image, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

/// [B, Cin, H, W] -> [B, H/4, W/4, 16 Cin]; each 4x4 patch flattened
/// row-major over pixels with the channel index fastest.
template <class T>
Tensor<T> patch_partition(const Tensor<T>& image);

template <class T>
void register_global_stem(ParamSet<T>& ps, const std::string& prefix, int in_ch, int C, RngState& rng);
/// Patch partition, linear embedding and LayerNorm. Output is channels-last.
template <class T>
Tensor<T> global_stem(const Tensor<T>& image, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

template <class T>
void register_local_block(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng);
/// x + pw1x1(LN(dw3x3(x))).
template <class T>
Tensor<T> local_block(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix,
                      const BlockOptions& opt = {});

template <class T>
void register_global_block(ParamSet<T>& ps, const std::string& prefix, int C, int heads, int window, RngState& rng);
/// Two residual units on channels-last tokens: LN -> W-MSA -> 1x1, then
/// LN -> SW-MSA -> 1x1. With shift == 0 the second unit is unshifted.
template <class T>
Tensor<T> global_block(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, int heads, int window,
                       int shift, const BlockOptions& opt = {});

template <class T>
void register_local_downsample(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng);
/// LN, then 2x2 stride-2 conv to 2C channels.
template <class T>
Tensor<T> local_downsample(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

/// [B, H, W, C] -> [B, H/2, W/2, 4C], neighbours in the order top-left,
/// bottom-left, top-right, bottom-right.
template <class T>
Tensor<T> merge_gather(const Tensor<T>& x);

template <class T>
void register_patch_merging(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng);
/// Channels-last in and out: gather, LN(4C), bias-free linear 4C -> 2C.
template <class T>
Tensor<T> patch_merging(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

template <class T>
void register_channel_attention(ParamSet<T>& ps, const std::string& prefix, int C, int reduction, RngState& rng);
/// Gate [B, C, 1, 1] = sigmoid(MLP(avgpool x) + MLP(maxpool x)).
template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix);

template <class T>
void register_spatial_attention(ParamSet<T>& ps, const std::string& prefix, RngState& rng);
/// Gate [B, 1, H, W] = sigmoid(conv7x7([mean_c x, max_c x])).
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix);

template <class T>
void register_irmlp(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng);
/// n = LN(x); pw(4C -> C)(GELU(pw(C -> 4C)(dw3x3(n) + n))).
template <class T>
Tensor<T> irmlp(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

struct FusionOptions {
  AblationFlags ablation;
  bool force_unit_gates = false;  // test hook: replace both gates by ones
  double ln_eps = 1e-6;
};

/// Registers one fusion block. `prev_channels` is 0 at the first stage.
template <class T>
void register_hff_block(ParamSet<T>& ps, const std::string& prefix, int C, int prev_channels, int reduction,
                        const AblationFlags& ab, RngState& rng);
/// F = IRMLP(conv1x1(concat[CA(G) G, SA(L) L, conv3x3(concat[G, L, Ft])])) + Ft
/// with Ft = avgpool2(conv1x1(F_prev)), or zeros when `prev` is null.
template <class T>
Tensor<T> hff_block(const Tensor<T>& G, const Tensor<T>& L, const Tensor<T>* prev, const ParamSet<T>& ps,
                    const std::string& prefix, const FusionOptions& opt = {});

template <class T>
void register_classifier_head(ParamSet<T>& ps, const std::string& prefix, int C, int num_classes, RngState& rng);
/// Global average pool, LN, linear.
template <class T>
Tensor<T> classifier_head(const Tensor<T>& F, const ParamSet<T>& ps, const std::string& prefix, double eps = 1e-6);

/// Per-stage branch and fusion outputs, all B,C,H,W.
template <class T>
struct ForwardTrace {
  std::array<Tensor<T>, 4> G;
  std::array<Tensor<T>, 4> L;
  std::array<Tensor<T>, 4> F;
};

/// Called with tags "G1".."G4", "L1".."L4", "F1".."F4" as each stage output
/// is produced; the returned tensor replaces it downstream.
template <class T>
using FeatureHook = std::function<Tensor<T>(const std::string& tag, const Tensor<T>& value)>;

template <class T>
struct ForwardOptions {
  ForwardTrace<T>* trace = nullptr;
  FeatureHook<T> hook;
  bool training = false;
  RngState* rng = nullptr;  // drop-path draws; only consulted when training
  bool force_unit_gates = false;
};

template <class T>
class HiFuseModel {
 public:
  /// Validates the config and initializes every parameter from `seed`.
  HiFuseModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// image [B, in_channels, S, S] -> logits [B, num_classes].
  Tensor<T> forward(const Tensor<T>& image, const ForwardOptions<T>& opt = {}) const;

  /// Stochastic-depth rate of block `index` out of sum(depths).
  double drop_rate(int index) const;

 private:
  ModelConfig config_;
  ParamSet<T> params_;
};

/// Parameter-name prefix of the given stage (0-based) for each branch.
std::string local_stage_prefix(int stage);
std::string global_stage_prefix(int stage);
std::string fusion_stage_prefix(int stage);

}  // namespace hifuse
