#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace hifuse {

/// Component switches for the ablation ladder. With every flag off the
/// model is the bare local path.
struct AblationFlags {
  bool global_branch = true;
  bool channel_spatial_attention = true;
  bool irmlp = true;
  bool shortcut = true;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::string variant = "tiny";
  std::array<int, 4> depths{2, 2, 2, 2};
  std::array<int, 4> channels{96, 192, 384, 768};
  std::array<int, 4> heads{3, 6, 12, 24};
  int window = 7;
  int num_classes = 7;
  int image_size = 224;
  int in_channels = 3;
  int ca_reduction = 16;
  double drop_path_rate = 0.0;
  double ln_eps = 1e-6;
  AblationFlags ablation;

  static ModelConfig tiny();
  static ModelConfig small();
  static ModelConfig base();
  /// 32x32 input, widths 8/16/32/64, window 4: fast enough for gradient
  /// checks and training runs in unit tests.
  static ModelConfig desk();
  /// Preset by name: tiny, small, base or desk.
  static ModelConfig named(std::string_view name);

  /// Side length of the stage-s feature map (s = 0..3).
  int stage_size(int s) const { return (image_size / 4) >> s; }
  /// Window used at stage s: the configured window, or the whole map when
  /// the map is not larger than the window.
  int stage_window(int s) const;
  /// Shift for the second attention unit; 0 when the window covers the map.
  int stage_shift(int s) const;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TrainRunConfig {
  int epochs = 100;
  int batch_size = 32;
  int warmup_epochs = 1;
  std::string schedule = "cosine";  // cosine | constant
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs between periodic checkpoints; 0 = only final
  bool select_best = false;  // keep the best-by-validation-accuracy checkpoint
  std::array<double, 3> split{0.6, 0.15, 0.25};
  double norm_mean = 0.5;
  double norm_std = 0.5;

  void validate() const;
  bool operator==(const TrainRunConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainRunConfig train;
};

/// One documented `key = value` setting.
struct ConfigKey {
  std::string name;
  std::string type;  // int, float, bool, string, int-list, float-list
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

/// Parses `key = value` lines ('#' starts a comment) on top of `base`.
/// Later lines win. Unknown keys and malformed values are errors that name
/// the line number.
RunConfig parse_config_text(std::string_view text, RunConfig base = {});
RunConfig parse_config(const std::string& path, RunConfig base = {});

/// Every key, one per line, in the same syntax parse_config_text accepts.
std::string to_config_text(const RunConfig& cfg);

}  // namespace hifuse
