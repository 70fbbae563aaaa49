#include "hifuse/workflow.hpp"

#include <filesystem>
#include <fstream>

#include "hifuse/checkpoint.hpp"
#include "hifuse/train.hpp"

namespace hifuse {

namespace fs = std::filesystem;

PreprocessOptions preprocess_options(const RunConfig& cfg) {
  PreprocessOptions p;
  p.image_size = cfg.model.image_size;
  p.channels = cfg.model.in_channels;
  p.mean = cfg.train.norm_mean;
  p.std = cfg.train.norm_std;
  return p;
}

std::array<Dataset, 3> load_splits(const RunConfig& cfg, const std::string& data_dir) {
  const Dataset all = load_image_folder(data_dir, preprocess_options(cfg));
  if (all.num_classes() != cfg.model.num_classes)
    fail(ErrorKind::InvalidArgument, data_dir + " has " + std::to_string(all.num_classes()) +
                                         " class folders but num_classes = " + std::to_string(cfg.model.num_classes));
  return split_dataset(all, cfg.train.split, cfg.train.seed);
}

namespace {

const char* const kSplitNames[3] = {"train", "val", "test"};

std::string split_report(const HiFuseModel<float>& model, const std::array<Dataset, 3>& splits, int batch,
                         int epoch, const std::string& which, std::string* csv) {
  std::string text;
  for (int i = 0; i < 3; ++i) {
    if (which != "all" && which != kSplitNames[i]) continue;
    const EvalResult ev = evaluate(model, splits[static_cast<std::size_t>(i)], batch);
    const Metrics m = compute_metrics(ev.cm);
    text += format_metrics(std::string(kSplitNames[i]) + " (" + std::to_string(splits[static_cast<std::size_t>(i)].size()) +
                               " images)",
                           m, splits[static_cast<std::size_t>(i)].classes);
    if (csv) {
      csv[0] += metrics_csv_row(epoch, kSplitNames[i], m, ev.mean_loss, 0.0);
      csv[1] += per_class_csv_rows(epoch, kSplitNames[i], m, splits[static_cast<std::size_t>(i)].classes);
    }
  }
  return text;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) fail(ErrorKind::Io, "cannot write " + path);
}

}  // namespace

std::string run_training(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                         const std::string& resume, const LogFn& log) {
  cfg.model.validate();
  cfg.train.validate();
  if (!fs::is_directory(data_dir)) fail(ErrorKind::Io, "data directory not found: " + data_dir);
  const auto splits = load_splits(cfg, data_dir);
  if (log)
    log("data: " + std::to_string(splits[0].size()) + " train, " + std::to_string(splits[1].size()) + " val, " +
        std::to_string(splits[2].size()) + " test images");
  HiFuseModel<float> model(cfg.model, cfg.train.seed);
  TrainState state = make_train_state(model, cfg.train);
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume);
    if (!(checkpoint_config(ck).model == cfg.model))
      fail(ErrorKind::InvalidArgument, resume + ": stored model config differs from the requested one");
    restore_checkpoint(ck, model, &state);
    if (log) log("resumed from " + resume + " after epoch " + std::to_string(state.epoch));
  }
  FitOptions fo;
  fo.out_dir = out_dir;
  fo.log = log;
  fit(model, state, splits[0], splits[1], cfg, fo);

  std::string csv[2] = {std::string(kMetricsCsvHeader) + "\n", std::string(kPerClassCsvHeader) + "\n"};
  const std::string report = split_report(model, splits, cfg.train.batch_size, state.epoch, "all", csv);
  if (!out_dir.empty()) {
    write_text((fs::path(out_dir) / "final_metrics.csv").string(), csv[0]);
    write_text((fs::path(out_dir) / "final_metrics_per_class.csv").string(), csv[1]);
  }
  return report;
}

std::string run_evaluation(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
                           const std::string& csv_path, const RunConfig* config_override) {
  if (split != "all" && split != "train" && split != "val" && split != "test")
    fail(ErrorKind::InvalidArgument, "unknown split '" + split + "' (train, val, test or all)");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig cfg = config_override ? *config_override : checkpoint_config(ck);
  cfg.model.validate();
  if (!fs::is_directory(data_dir)) fail(ErrorKind::Io, "data directory not found: " + data_dir);
  HiFuseModel<float> model(cfg.model, cfg.train.seed);
  restore_checkpoint(ck, model);
  const auto splits = load_splits(cfg, data_dir);
  std::string csv[2] = {std::string(kMetricsCsvHeader) + "\n", std::string(kPerClassCsvHeader) + "\n"};
  const std::string table = split_report(model, splits, cfg.train.batch_size, static_cast<int>(ck.epoch), split, csv);
  if (!csv_path.empty()) write_text(csv_path, csv[1]);
  return table + "\n" + csv[0] + "\n" + csv[1];
}

}  // namespace hifuse
