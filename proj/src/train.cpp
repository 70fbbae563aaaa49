#include "hifuse/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hifuse/checkpoint.hpp"
#include "hifuse/ops.hpp"

namespace hifuse {

// ---- metrics ----------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int classes) : k_(classes) {
  if (classes < 1) fail(ErrorKind::InvalidArgument, "confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(classes * classes), 0);
}

void ConfusionMatrix::add(int target, int predicted) {
  if (target < 0 || target >= k_ || predicted < 0 || predicted >= k_)
    fail(ErrorKind::InvalidArgument, "confusion matrix: class index out of range");
  ++counts_[static_cast<std::size_t>(target * k_ + predicted)];
}

std::int64_t ConfusionMatrix::at(int target, int predicted) const {
  return counts_.at(static_cast<std::size_t>(target * k_ + predicted));
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int i = 0; i < k_; ++i) t += at(i, i);
  return t;
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total <= 0) fail(ErrorKind::InvalidArgument, "metrics of an empty confusion matrix");
  const int K = cm.classes();
  Metrics m;
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  for (int c = 0; c < K; ++c) {
    ClassMetrics r;
    r.tp = cm.at(c, c);
    for (int j = 0; j < K; ++j) {
      if (j == c) continue;
      r.fn += cm.at(c, j);
      r.fp += cm.at(j, c);
    }
    r.tn = total - r.tp - r.fn - r.fp;
    r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
    r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    m.macro_precision += r.precision;
    m.macro_recall += r.recall;
    m.macro_f1 += r.f1;
    m.per_class.push_back(r);
  }
  m.macro_precision /= K;
  m.macro_recall /= K;
  m.macro_f1 /= K;
  return m;
}

template <class T>
int argmax(std::span<const T> row) {
  if (row.empty()) fail(ErrorKind::InvalidArgument, "argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<int>(best);
}

template int argmax<float>(std::span<const float>);
template int argmax<double>(std::span<const double>);

// ---- optimizer --------------------------------------------------------------

template <class T>
void OptimState<T>::init(const ParamSet<T>& params) {
  m.clear();
  v.clear();
  for (const auto& e : params.entries()) {
    m.push_back(Tensor<T>::zeros(e.tensor.shape()));
    v.push_back(Tensor<T>::zeros(e.tensor.shape()));
  }
}

template <class T>
void adamw_step(ParamSet<T>& params, OptimState<T>& state, double lr, const AdamWHyper& hp) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) state.init(params);
  for (const auto& e : entries)
    if (!e.tensor.has_grad()) fail(ErrorKind::State, "adamw_step: parameter '" + e.name + "' has no gradient");
  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    auto p = e.tensor.mutable_data();
    auto g = e.tensor.grad();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    const double decay = e.decay ? lr * hp.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      double pj = static_cast<double>(p[j]);
      pj -= decay * pj;
      const double gj = static_cast<double>(g[j]);
      const double mj = hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * gj;
      const double vj = hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + hp.eps);
      p[j] = static_cast<T>(pj);
    }
  }
}

template struct OptimState<float>;
template struct OptimState<double>;
template void adamw_step<float>(ParamSet<float>&, OptimState<float>&, double, const AdamWHyper&);
template void adamw_step<double>(ParamSet<double>&, OptimState<double>&, double, const AdamWHyper&);

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, const TrainRunConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    fail(ErrorKind::InvalidArgument, "lr_at: step " + std::to_string(step) + " outside [0, " +
                                         std::to_string(total_steps) + ")");
  if (step < warmup_steps)
    return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (cfg.schedule == "constant") return cfg.base_lr;
  const std::int64_t span = total_steps - 1 - warmup_steps;
  const double t = span > 0 ? static_cast<double>(step - warmup_steps) / static_cast<double>(span) : 1.0;
  return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

std::int64_t steps_per_epoch(std::size_t samples, int batch_size) {
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  return static_cast<std::int64_t>((samples + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

// ---- loops ------------------------------------------------------------------

TrainState make_train_state(const HiFuseModel<float>& model, const TrainRunConfig& cfg) {
  TrainState s;
  s.optim.init(model.params());
  s.rng = RngState{derive_seed(cfg.seed, 0x747261696eull), 0};
  return s;
}

EpochSummary train_epoch(HiFuseModel<float>& model, const Dataset& data, TrainState& state,
                         const TrainRunConfig& cfg) {
  if (data.size() == 0) fail(ErrorKind::InvalidArgument, "train_epoch: empty dataset");
  cfg.validate();
  const std::int64_t per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
  const std::int64_t total = per_epoch * cfg.epochs;
  const std::int64_t warmup = per_epoch * cfg.warmup_epochs;
  const AdamWHyper hp{cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps};
  auto& params = model.params();
  params.set_requires_grad(true);
  if (state.optim.m.size() != params.size()) state.optim.init(params);

  EpochSummary summary;
  summary.epoch = state.epoch + 1;
  const auto order = shuffled_indices(data.size(), state.rng);
  double loss_sum = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    const Tensor<float> x = stack_images(data, idx);
    const std::vector<int> y = gather_labels(data, idx);
    const RngState rng_before = state.rng;

    Tape<float> tape;
    Tensor<float> loss;
    {
      TapeScope<float> scope(tape);
      ForwardOptions<float> fo;
      fo.training = true;
      fo.rng = &state.rng;
      loss = cross_entropy(model.forward(x, fo), std::span<const int>(y));
    }
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) {
      // Replay the step with per-op checks to name the culprit.
      const bool was = nan_check_enabled();
      set_nan_check(true);
      std::string culprit = "the loss itself";
      try {
        RngState replay = rng_before;
        ForwardOptions<float> fo;
        fo.training = true;
        fo.rng = &replay;
        (void)cross_entropy(model.forward(x, fo), std::span<const int>(y));
      } catch (const Error& e) {
        culprit = e.what();
      }
      set_nan_check(was);
      fail(ErrorKind::Numeric, "non-finite loss at epoch " + std::to_string(summary.epoch) + ", step " +
                                   std::to_string(state.optim.step) + ": " + culprit);
    }
    tape.backward(loss);
    const double lr = lr_at(std::min(state.optim.step, total - 1), total, warmup, cfg);
    adamw_step(params, state.optim, lr, hp);
    params.zero_grad();
    summary.lrs.push_back(lr);
    loss_sum += lv * static_cast<double>(idx.size());
    ++summary.steps;
  }
  summary.mean_loss = loss_sum / static_cast<double>(data.size());
  return summary;
}

EvalResult evaluate(const HiFuseModel<float>& model, const Dataset& data, int batch_size) {
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  EvalResult r;
  r.cm = ConfusionMatrix(model.config().num_classes);
  if (data.size() == 0) return r;
  double loss_sum = 0;
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto K = static_cast<std::size_t>(model.config().num_classes);
  for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(all.size(), start + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> idx(all.data() + start, end - start);
    const std::vector<int> y = gather_labels(data, idx);
    const Tensor<float> logits = model.forward(stack_images(data, idx));
    loss_sum += static_cast<double>(cross_entropy(logits, std::span<const int>(y)).item()) *
                static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b)
      r.cm.add(y[b], argmax(logits.data().subspan(b * K, K)));
  }
  r.mean_loss = loss_sum / static_cast<double>(data.size());
  return r;
}

// ---- reporting --------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_row(int epoch, const std::string& split, const Metrics& m, double loss, double lr) {
  return std::to_string(epoch) + "," + split + "," + num(m.accuracy) + "," + num(m.macro_f1) + "," +
         num(m.macro_precision) + "," + num(m.macro_recall) + "," + num(loss) + "," + num(lr) + "\n";
}

std::string per_class_csv_rows(int epoch, const std::string& split, const Metrics& m,
                               const std::vector<std::string>& class_names) {
  std::string out;
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& r = m.per_class[c];
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    out += std::to_string(epoch) + "," + split + "," + name + "," + num(r.precision) + "," + num(r.recall) + "," +
           num(r.f1) + "," + std::to_string(r.tp) + "," + std::to_string(r.fp) + "," + std::to_string(r.fn) + "," +
           std::to_string(r.tn) + "\n";
  }
  return out;
}

std::string format_metrics(const std::string& title, const Metrics& m, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  char line[160];
  os << title << "\n";
  std::snprintf(line, sizeof line, "  accuracy %.4f  macro-precision %.4f  macro-recall %.4f  macro-F1 %.4f\n",
                m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1);
  os << line;
  std::snprintf(line, sizeof line, "  %-16s %9s %9s %9s %7s %7s %7s %7s\n", "class", "precision", "recall", "f1", "tp",
                "fp", "fn", "tn");
  os << line;
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& r = m.per_class[c];
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    std::snprintf(line, sizeof line, "  %-16s %9.4f %9.4f %9.4f %7lld %7lld %7lld %7lld\n", name.c_str(), r.precision,
                  r.recall, r.f1, static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                  static_cast<long long>(r.fn), static_cast<long long>(r.tn));
    os << line;
  }
  return os.str();
}

FitResult fit(HiFuseModel<float>& model, TrainState& state, const Dataset& train, const Dataset& val,
              const RunConfig& cfg, const FitOptions& opt) {
  cfg.train.validate();
  namespace fs = std::filesystem;
  const bool disk = !opt.out_dir.empty();
  std::ofstream csv, per_class;
  if (disk) {
    fs::create_directories(opt.out_dir);
    const fs::path mp = fs::path(opt.out_dir) / "metrics.csv", pp = fs::path(opt.out_dir) / "metrics_per_class.csv";
    const bool append = state.epoch > 0 && fs::exists(mp) && fs::exists(pp);
    csv.open(mp, append ? std::ios::app : std::ios::trunc);
    per_class.open(pp, append ? std::ios::app : std::ios::trunc);
    if (!csv || !per_class) fail(ErrorKind::Io, "cannot write metric logs in " + opt.out_dir);
    if (!append) {
      csv << kMetricsCsvHeader << "\n";
      per_class << kPerClassCsvHeader << "\n";
    }
  }
  FitResult result;
  const int last = opt.stop_after_epoch > 0 ? std::min(opt.stop_after_epoch, cfg.train.epochs) : cfg.train.epochs;
  while (state.epoch < last) {
    EpochSummary s = train_epoch(model, train, state, cfg.train);
    state.epoch = s.epoch;
    const double lr = s.lrs.empty() ? 0.0 : s.lrs.back();
    std::string line = "epoch " + std::to_string(s.epoch) + "/" + std::to_string(cfg.train.epochs) +
                       " train loss " + num(s.mean_loss) + " lr " + num(lr);
    if (disk) {
      // Train-split accuracy comes from a clean pass with the end-of-epoch weights.
      const EvalResult tr = evaluate(model, train, cfg.train.batch_size);
      const Metrics tm = compute_metrics(tr.cm);
      csv << metrics_csv_row(s.epoch, "train", tm, s.mean_loss, lr);
      per_class << per_class_csv_rows(s.epoch, "train", tm, train.classes);
    }
    if (val.size() > 0) {
      const EvalResult ev = evaluate(model, val, cfg.train.batch_size);
      result.last_val = compute_metrics(ev.cm);
      line += " val acc " + num(result.last_val.accuracy) + " val loss " + num(ev.mean_loss);
      if (disk) {
        csv << metrics_csv_row(s.epoch, "val", result.last_val, ev.mean_loss, lr);
        per_class << per_class_csv_rows(s.epoch, "val", result.last_val, val.classes);
      }
      if (result.last_val.accuracy > state.best_metric) {
        state.best_metric = result.last_val.accuracy;
        if (disk && cfg.train.select_best)
          save_checkpoint((fs::path(opt.out_dir) / "best.hfck").string(), capture_checkpoint(model, &state, cfg));
      }
    }
    if (disk) {
      csv.flush();
      per_class.flush();
      const bool cadence = cfg.train.checkpoint_every > 0 && s.epoch % cfg.train.checkpoint_every == 0;
      if (cadence || s.epoch == last)
        save_checkpoint((fs::path(opt.out_dir) / "last.hfck").string(), capture_checkpoint(model, &state, cfg));
    }
    if (opt.log) opt.log(line);
    result.epochs.push_back(std::move(s));
  }
  return result;
}

}  // namespace hifuse
