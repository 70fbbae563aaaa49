#pragma once

#include <functional>
#include <string>

#include "hifuse/config.hpp"
#include "hifuse/dataset.hpp"

namespace hifuse {

using LogFn = std::function<void(const std::string&)>;

PreprocessOptions preprocess_options(const RunConfig& cfg);

/// Loads `data_dir` and returns the seeded train / val / test split.
std::array<Dataset, 3> load_splits(const RunConfig& cfg, const std::string& data_dir);

/// Full training run into `out_dir` (metrics.csv, metrics_per_class.csv,
/// last.hfck, best.hfck when selected, final_metrics.csv). With `resume`
/// set, continues from that checkpoint; its model config must match.
/// Returns the final train/val/test report.
std::string run_training(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                         const std::string& resume = {}, const LogFn& log = {});

/// Evaluates a checkpoint on one split ("train", "val", "test") or "all".
/// `config_override` replaces the stored run config when given (a model
/// registry mismatch then fails with the list of differing names). Returns the
/// metrics table followed by the per-class CSV; also writes that CSV to
/// `csv_path` when non-empty.
std::string run_evaluation(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
                           const std::string& csv_path = {}, const RunConfig* config_override = nullptr);

}  // namespace hifuse
