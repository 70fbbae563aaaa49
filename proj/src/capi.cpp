#include "hifuse/hifuse.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hifuse/census.hpp"
#include "hifuse/checkpoint.hpp"
#include "hifuse/gradcam.hpp"
#include "hifuse/parallel.hpp"
#include "hifuse/selfcheck.hpp"
#include "hifuse/workflow.hpp"

struct hifuse_model {
  hifuse::RunConfig config;
  std::unique_ptr<hifuse::HiFuseModel<float>> net;
};

namespace {

thread_local std::string g_last_error;

hifuse_status to_status(hifuse::ErrorKind k) {
  using hifuse::ErrorKind;
  switch (k) {
    case ErrorKind::InvalidArgument: return HIFUSE_ERR_INVALID_ARGUMENT;
    case ErrorKind::Shape: return HIFUSE_ERR_SHAPE;
    case ErrorKind::Io: return HIFUSE_ERR_IO;
    case ErrorKind::Format: return HIFUSE_ERR_FORMAT;
    case ErrorKind::VersionMismatch: return HIFUSE_ERR_VERSION;
    case ErrorKind::MissingParameter: return HIFUSE_ERR_MISSING_PARAMETER;
    case ErrorKind::UnexpectedParameter: return HIFUSE_ERR_UNEXPECTED_PARAMETER;
    case ErrorKind::Numeric: return HIFUSE_ERR_NUMERIC;
    case ErrorKind::State: return HIFUSE_ERR_STATE;
    case ErrorKind::CheckFailed: return HIFUSE_ERR_CHECK_FAILED;
  }
  return HIFUSE_ERR_INTERNAL;
}

template <class Fn>
hifuse_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return HIFUSE_OK;
  } catch (const hifuse::Error& e) {
    g_last_error = e.what();
    return to_status(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return HIFUSE_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return HIFUSE_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) hifuse::fail(hifuse::ErrorKind::InvalidArgument, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

hifuse::LogFn wrap(hifuse_log_fn log, void* user) {
  if (!log) return {};
  return [log, user](const std::string& line) { log(line.c_str(), user); };
}

}  // namespace

extern "C" {

const char* hifuse_version(void) { return "0.1.0"; }

const char* hifuse_last_error(void) { return g_last_error.c_str(); }

const char* hifuse_status_name(hifuse_status status) {
  switch (status) {
    case HIFUSE_OK: return "ok";
    case HIFUSE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case HIFUSE_ERR_SHAPE: return "shape mismatch";
    case HIFUSE_ERR_IO: return "i/o error";
    case HIFUSE_ERR_FORMAT: return "format error";
    case HIFUSE_ERR_VERSION: return "version mismatch";
    case HIFUSE_ERR_MISSING_PARAMETER: return "missing parameter";
    case HIFUSE_ERR_UNEXPECTED_PARAMETER: return "unexpected parameter";
    case HIFUSE_ERR_NUMERIC: return "numeric error";
    case HIFUSE_ERR_STATE: return "invalid state";
    case HIFUSE_ERR_CHECK_FAILED: return "check failed";
    case HIFUSE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void hifuse_string_free(char* s) { std::free(s); }

void hifuse_set_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  hifuse::set_num_threads(n);
}

hifuse_status hifuse_config_keys(char** out) {
  return guard([&] {
    require(out, "out");
    std::string s;
    for (const auto& k : hifuse::config_keys()) s += k.name + "\t" + k.type + "\t" + k.help + "\n";
    *out = dup(s);
  });
}

hifuse_status hifuse_config_resolve(const char* text, char** out) {
  return guard([&] {
    require(text, "text");
    require(out, "out");
    const hifuse::RunConfig cfg = hifuse::parse_config_text(text);
    cfg.model.validate();
    cfg.train.validate();
    *out = dup(hifuse::to_config_text(cfg));
  });
}

hifuse_status hifuse_model_create(const char* config_text, hifuse_model** out) {
  return guard([&] {
    require(config_text, "config_text");
    require(out, "out");
    auto m = std::make_unique<hifuse_model>();
    m->config = hifuse::parse_config_text(config_text);
    m->config.train.validate();
    m->net = std::make_unique<hifuse::HiFuseModel<float>>(m->config.model, m->config.train.seed);
    *out = m.release();
  });
}

hifuse_status hifuse_model_load(const char* checkpoint_path, hifuse_model** out) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    const hifuse::Checkpoint ck = hifuse::load_checkpoint(checkpoint_path);
    auto m = std::make_unique<hifuse_model>();
    m->config = hifuse::checkpoint_config(ck);
    m->net = std::make_unique<hifuse::HiFuseModel<float>>(m->config.model, m->config.train.seed);
    hifuse::restore_checkpoint(ck, *m->net);
    *out = m.release();
  });
}

hifuse_status hifuse_model_save(const hifuse_model* model, const char* checkpoint_path) {
  return guard([&] {
    require(model, "model");
    require(checkpoint_path, "checkpoint_path");
    hifuse::save_checkpoint(checkpoint_path, hifuse::capture_checkpoint(*model->net, nullptr, model->config));
  });
}

void hifuse_model_free(hifuse_model* model) { delete model; }

hifuse_status hifuse_model_config(const hifuse_model* model, char** out) {
  return guard([&] {
    require(model, "model");
    require(out, "out");
    *out = dup(hifuse::to_config_text(model->config));
  });
}

int hifuse_model_num_classes(const hifuse_model* model) { return model ? model->config.model.num_classes : 0; }
int hifuse_model_image_size(const hifuse_model* model) { return model ? model->config.model.image_size : 0; }
int hifuse_model_in_channels(const hifuse_model* model) { return model ? model->config.model.in_channels : 0; }
int64_t hifuse_model_num_params(const hifuse_model* model) { return model ? model->net->params().numel() : 0; }

hifuse_status hifuse_model_forward(const hifuse_model* model, const float* input, int64_t batch, float* logits) {
  return guard([&] {
    require(model, "model");
    require(input, "input");
    require(logits, "logits");
    if (batch < 1) hifuse::fail(hifuse::ErrorKind::InvalidArgument, "batch must be >= 1");
    const auto& mc = model->config.model;
    const hifuse::Shape shape{batch, mc.in_channels, mc.image_size, mc.image_size};
    std::vector<float> data(input, input + hifuse::shape_numel(shape));
    const hifuse::Tensor<float> out = model->net->forward(hifuse::Tensor<float>(shape, std::move(data)));
    std::memcpy(logits, out.data().data(), out.data().size() * sizeof(float));
  });
}

hifuse_status hifuse_inspect(const char* config_text, char** report, int64_t* params, uint64_t* macs) {
  return guard([&] {
    require(config_text, "config_text");
    const hifuse::RunConfig cfg = hifuse::parse_config_text(config_text);
    cfg.model.validate();
    if (report) *report = dup(hifuse::inspect_report(cfg.model));
    if (params) *params = hifuse::count_params(cfg.model);
    if (macs) *macs = hifuse::count_flops(cfg.model).total();
  });
}

hifuse_status hifuse_train(const char* config_text, const char* data_dir, const char* out_dir,
                           const char* resume_checkpoint, hifuse_log_fn log, void* user, char** report) {
  return guard([&] {
    require(config_text, "config_text");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    const hifuse::RunConfig cfg = hifuse::parse_config_text(config_text);
    put(report, hifuse::run_training(cfg, data_dir, out_dir, resume_checkpoint ? resume_checkpoint : "",
                                     wrap(log, user)));
  });
}

hifuse_status hifuse_eval(const char* checkpoint_path, const char* data_dir, const char* split,
                          const char* config_text, const char* csv_path, char** report) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    require(data_dir, "data_dir");
    hifuse::RunConfig override_cfg;
    if (config_text) {
      // Overrides apply on top of the stored config.
      const hifuse::RunConfig stored = hifuse::checkpoint_config(hifuse::load_checkpoint(checkpoint_path));
      override_cfg = hifuse::parse_config_text(config_text, stored);
    }
    put(report, hifuse::run_evaluation(checkpoint_path, data_dir, split ? split : "all", csv_path ? csv_path : "",
                                       config_text ? &override_cfg : nullptr));
  });
}

hifuse_status hifuse_gradcam(const hifuse_model* model, const char* image_path, int target_class, const char* layer,
                             int* used_class, char** pgm_path, char** ppm_path) {
  return guard([&] {
    require(model, "model");
    require(image_path, "image_path");
    const hifuse::Tensor<float> x = hifuse::load_model_input(image_path, hifuse::preprocess_options(model->config));
    const int cls = target_class < 0 ? hifuse::predict_class(*model->net, x) : target_class;
    const hifuse::Heatmap hm = hifuse::grad_cam(*model->net, x, cls, layer ? layer : "F4");
    const auto paths = hifuse::write_gradcam_files(image_path, hm, hifuse::load_display_image(image_path));
    if (used_class) *used_class = cls;
    put(pgm_path, paths[0]);
    put(ppm_path, paths[1]);
  });
}

hifuse_status hifuse_selfcheck(const char* only, hifuse_log_fn log, void* user, int* failures, double* seconds) {
  return guard([&] {
    std::vector<std::string> suites;
    if (only) {
      std::stringstream ss(only);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) suites.push_back(item);
    }
    const hifuse::SelfcheckReport r = hifuse::run_selfcheck(suites, [&](const hifuse::CheckResult& c) {
      if (log) {
        const std::string line = std::string(c.pass ? "PASS " : "FAIL ") + c.suite + ": " + c.name + " (" + c.detail + ")";
        log(line.c_str(), user);
      }
    });
    if (failures) *failures = r.failures();
    if (seconds) *seconds = r.seconds;
  });
}

}  // extern "C"
