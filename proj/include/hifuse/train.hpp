#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hifuse/config.hpp"
#include "hifuse/dataset.hpp"
#include "hifuse/model.hpp"

namespace hifuse {

/// K x K counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);
  void add(int target, int predicted);
  std::int64_t at(int target, int predicted) const;
  int classes() const { return k_; }
  std::int64_t total() const;
  std::int64_t trace() const;

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

struct ClassMetrics {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;
};

struct Metrics {
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  std::vector<ClassMetrics> per_class;
};

/// One-vs-rest counts per class; a class with no predicted and no actual
/// positives scores 0 on precision, recall and F1.
Metrics compute_metrics(const ConfusionMatrix& cm);

/// Index of the largest value; ties go to the lowest index.
template <class T>
int argmax(std::span<const T> row);

struct AdamWHyper {
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct OptimState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;  // aligned with ParamSet::entries()
  std::vector<Tensor<T>> v;

  void init(const ParamSet<T>& params);
};

/// Decoupled weight decay (p -= lr wd p, decayed parameters only), then the
/// bias-corrected Adam update. Every parameter must carry a gradient.
template <class T>
void adamw_step(ParamSet<T>& params, OptimState<T>& state, double lr, const AdamWHyper& hp);

/// Learning rate for optimizer step `step` of `total_steps`: linear warm-up
/// base/warmup, 2 base/warmup, ..., base; then cosine from base_lr down to
/// min_lr at the final step (or constant base_lr).
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, const TrainRunConfig& cfg);

std::int64_t steps_per_epoch(std::size_t samples, int batch_size);

struct TrainState {
  OptimState<float> optim;
  RngState rng;  // shuffling and drop path
  int epoch = 0;  // completed epochs
  double best_metric = -1.0;
};

/// Fresh state for a run seeded by cfg.seed.
TrainState make_train_state(const HiFuseModel<float>& model, const TrainRunConfig& cfg);

struct EpochSummary {
  int epoch = 0;  // 1-based
  double mean_loss = 0;
  std::int64_t steps = 0;
  std::vector<double> lrs;
};

/// One pass over `data` in a seeded shuffled order, batch_size at a time
/// (the last batch may be short). Throws Error(Numeric) naming the first op
/// that produced a non-finite value if the loss stops being finite.
EpochSummary train_epoch(HiFuseModel<float>& model, const Dataset& data, TrainState& state,
                         const TrainRunConfig& cfg);

struct EvalResult {
  ConfusionMatrix cm{1};
  double mean_loss = 0;
};

/// Forward only, no parameter mutation.
EvalResult evaluate(const HiFuseModel<float>& model, const Dataset& data, int batch_size = 32);

/// Column header of the metric log.
inline constexpr const char* kMetricsCsvHeader = "epoch,split,acc,macro_f1,macro_prec,macro_recall,loss,lr";
inline constexpr const char* kPerClassCsvHeader = "epoch,split,class,precision,recall,f1,tp,fp,fn,tn";

std::string metrics_csv_row(int epoch, const std::string& split, const Metrics& m, double loss, double lr);
std::string per_class_csv_rows(int epoch, const std::string& split, const Metrics& m,
                               const std::vector<std::string>& class_names);
/// Human-readable table of the aggregate and per-class metrics.
std::string format_metrics(const std::string& title, const Metrics& m, const std::vector<std::string>& class_names);

struct FitOptions {
  std::string out_dir;     // checkpoints and CSV logs; empty = keep nothing on disk
  int stop_after_epoch = 0;  // stop once this many epochs are complete (0 = run to cfg.epochs)
  std::function<void(const std::string&)> log;  // progress lines
};

struct FitResult {
  std::vector<EpochSummary> epochs;
  Metrics last_val;
};

/// Runs epochs state.epoch+1 .. cfg.epochs: train, validate, log, checkpoint
/// per cadence (and the best-by-validation-accuracy model when requested).
FitResult fit(HiFuseModel<float>& model, TrainState& state, const Dataset& train, const Dataset& val,
              const RunConfig& cfg, const FitOptions& opt);

}  // namespace hifuse
