// Command-line front end over the C interface.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hifuse/hifuse.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheck = 1;
constexpr int kExitUsage = 2;

// Usage and input problems exit 2; failed checks and runtime faults exit 1.
int exit_code(hifuse_status s) {
  switch (s) {
    case HIFUSE_OK: return kExitOk;
    case HIFUSE_ERR_CHECK_FAILED:
    case HIFUSE_ERR_NUMERIC:
    case HIFUSE_ERR_STATE:
    case HIFUSE_ERR_INTERNAL: return kExitCheck;
    default: return kExitUsage;
  }
}

struct Failure {
  int code;
  std::string message;
};

void check(hifuse_status s, const std::string& context = {}) {
  if (s == HIFUSE_OK) return;
  throw Failure{exit_code(s), (context.empty() ? "" : context + ": ") + hifuse_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  hifuse_string_free(s);
  return out;
}

struct ConfigKey {
  std::string name, type, help;
};

std::vector<ConfigKey> config_keys() {
  char* raw = nullptr;
  check(hifuse_config_keys(&raw));
  std::vector<ConfigKey> keys;
  std::istringstream in(take(raw));
  std::string line;
  while (std::getline(in, line)) {
    const auto a = line.find('\t'), b = line.find('\t', a + 1);
    keys.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
  }
  return keys;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (char& c : f)
    if (c == '_') c = '-';
  return "--" + f;
}

/// Config file plus one `--key-name value` flag per config key; flags win.
struct ConfigOptions {
  std::string path;
  std::map<std::string, std::vector<std::string>> flags;
  std::map<std::string, std::string> names;  // key -> flag as registered

  // `renamed` maps a key to a different flag where the default name is taken.
  void attach(CLI::App* app, const std::vector<ConfigKey>& keys, bool with_file = true,
              const std::map<std::string, std::string>& renamed = {}) {
    if (with_file) app->add_option("--config", path, "config file (key = value lines)");
    for (const auto& k : keys) {
      names[k.name] = renamed.count(k.name) ? renamed.at(k.name) : flag_name(k.name);
      app->add_option(names[k.name], flags[k.name], k.help)
          ->type_name(k.type)
          ->expected(1)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
          ->group("Config keys");
    }
  }

  bool any_flag() const {
    for (const auto& [k, v] : flags)
      if (!v.empty()) return true;
    return false;
  }

  /// Override lines only (for eval, where they apply on top of the stored config).
  std::string override_text(const std::vector<ConfigKey>& keys) const {
    std::string text;
    for (const auto& k : keys) {
      const auto& v = flags.at(k.name);
      if (v.empty()) continue;
      for (const auto& other : v)
        if (other != v.front())
          throw Failure{kExitUsage, "conflicting values for " + names.at(k.name) + ": '" + v.front() + "' and '" +
                                        other + "'"};
      text += k.name + " = " + v.front() + "\n";
    }
    return text;
  }

  /// Canonical config text: file first, then each flag in key order.
  std::string resolve(const std::vector<ConfigKey>& keys) const {
    std::string text;
    if (!path.empty()) {
      std::ifstream f(path, std::ios::binary);
      if (!f) throw Failure{kExitUsage, "cannot read config file " + path};
      std::ostringstream ss;
      ss << f.rdbuf();
      text = ss.str();
    }
    char* out = nullptr;
    check(hifuse_config_resolve(text.c_str(), &out), path.empty() ? "defaults" : path);
    std::string canonical = take(out);
    // Overrides are resolved together so a combination like --epochs 1 --warmup-epochs 0 is
    // judged as a whole. Errors are pinned to a flag by line number or by key name.
    const std::string overrides = override_text(keys);
    if (overrides.empty()) return canonical;
    const std::string candidate = canonical + overrides;
    if (hifuse_config_resolve(candidate.c_str(), &out) == HIFUSE_OK) return take(out);
    const std::string err = hifuse_last_error();
    std::vector<std::string> flag_keys;
    std::istringstream lines(overrides);
    for (std::string line; std::getline(lines, line);) flag_keys.push_back(line.substr(0, line.find(' ')));
    std::string where = "config flags";
    const auto base_lines = static_cast<std::size_t>(std::count(canonical.begin(), canonical.end(), '\n'));
    if (err.rfind("line ", 0) == 0) {
      const auto n = static_cast<std::size_t>(std::stoul(err.substr(5)));
      if (n > base_lines && n - base_lines <= flag_keys.size()) where = names.at(flag_keys[n - base_lines - 1]);
    } else {
      for (const auto& k : flag_keys)
        if (err.find(k) != std::string::npos) {
          where = names.at(k);
          break;
        }
    }
    throw Failure{kExitUsage, where + ": " + err};
  }
};

void print_line(const char* line, void*) {
  std::cout << line << "\n" << std::flush;
}

int threads_from_env() {
  const char* env = std::getenv("HIFUSE_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw Failure{kExitUsage, std::string("HIFUSE_THREADS must be a positive integer, got '") + env + "'"};
  return static_cast<int>(n);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    const std::vector<ConfigKey> keys = config_keys();
    CLI::App app{"HiFuse three-branch image classifier"};
    app.require_subcommand(1);
    int threads = threads_from_env();
    app.add_option("--threads", threads, "worker threads (default: HIFUSE_THREADS, else all cores)")
        ->check(CLI::PositiveNumber);

    // train
    auto* train = app.add_subcommand("train", "train on a class-per-folder image directory");
    ConfigOptions train_cfg;
    std::string train_data, train_out = "hifuse_run", resume;
    train->add_option("--data", train_data, "dataset root, one subdirectory per class")->required();
    train->add_option("--out", train_out, "output directory for logs and checkpoints")->capture_default_str();
    train->add_option("--resume", resume, "continue from this checkpoint");
    train_cfg.attach(train, keys);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    ConfigOptions eval_cfg;
    std::string eval_ckpt, eval_data, eval_split = "all", eval_csv;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset root")->required();
    eval->add_option("--split", eval_split, "train, val, test or all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}))
        ->capture_default_str();
    eval->add_option("--csv", eval_csv, "also write the per-class CSV here");
    // --split already selects the evaluated subset.
    eval_cfg.attach(eval, keys, false, {{"split", "--split-ratios"}});

    // inspect
    auto* inspect = app.add_subcommand("inspect", "print shapes, parameter and MAC census");
    ConfigOptions inspect_cfg;
    double assert_params = 0, tol = 0.03;
    inspect->add_option("--assert-params", assert_params, "expected parameter count; exit 1 if outside --tol");
    inspect->add_option("--tol", tol, "relative tolerance for --assert-params")->capture_default_str();
    inspect_cfg.attach(inspect, keys);

    // gradcam
    auto* gradcam = app.add_subcommand("gradcam", "write Grad-CAM heatmaps next to each input image");
    std::string cam_ckpt, cam_class = "argmax", cam_layer = "F4";
    std::vector<std::string> images;
    gradcam->add_option("--checkpoint", cam_ckpt, "checkpoint file")->required();
    gradcam->add_option("--class", cam_class, "target class index or 'argmax'")->capture_default_str();
    gradcam->add_option("--layer", cam_layer, "feature map: F1..F4, G1..G4 or L1..L4")->capture_default_str();
    gradcam->add_option("images", images, "input images (.ppm, .pgm, .hft)")->required();

    // selfcheck
    auto* selfcheck = app.add_subcommand("selfcheck", "run the built-in verification suites");
    std::vector<std::string> only;
    selfcheck->add_option("--only", only, "suites to run: grad, window, flops, metrics, schedule, persist")
        ->delimiter(',');

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e);
      return rc == 0 ? kExitOk : kExitUsage;
    }
    hifuse_set_threads(threads);

    if (train->parsed()) {
      const std::string cfg = train_cfg.resolve(keys);
      char* report = nullptr;
      check(hifuse_train(cfg.c_str(), train_data.c_str(), train_out.c_str(), resume.empty() ? nullptr : resume.c_str(),
                         print_line, nullptr, &report),
            "train");
      std::cout << take(report);
      return kExitOk;
    }
    if (eval->parsed()) {
      const std::string overrides = eval_cfg.override_text(keys);
      char* report = nullptr;
      check(hifuse_eval(eval_ckpt.c_str(), eval_data.c_str(), eval_split.c_str(),
                        eval_cfg.any_flag() ? overrides.c_str() : nullptr, eval_csv.empty() ? nullptr : eval_csv.c_str(),
                        &report),
            "eval");
      std::cout << take(report);
      return kExitOk;
    }
    if (inspect->parsed()) {
      const std::string cfg = inspect_cfg.resolve(keys);
      char* report = nullptr;
      int64_t params = 0;
      uint64_t macs = 0;
      check(hifuse_inspect(cfg.c_str(), &report, &params, &macs), "inspect");
      std::cout << take(report);
      if (inspect->count("--assert-params") > 0) {
        const double rel = std::abs(static_cast<double>(params) - assert_params) / assert_params;
        char buf[256];
        std::snprintf(buf, sizeof buf, "parameter assertion: %lld vs expected %.6g (relative difference %.4f, tolerance %.4f)",
                      static_cast<long long>(params), assert_params, rel, tol);
        if (rel > tol) {
          std::cerr << buf << ": FAILED\n";
          return kExitCheck;
        }
        std::cout << buf << ": ok\n";
      }
      return kExitOk;
    }
    if (gradcam->parsed()) {
      int target = -1;
      if (cam_class != "argmax") {
        char* end = nullptr;
        const long v = std::strtol(cam_class.c_str(), &end, 10);
        if (cam_class.empty() || *end != '\0' || v < 0)
          throw Failure{kExitUsage, "--class must be a class index or 'argmax', got '" + cam_class + "'"};
        target = static_cast<int>(v);
      }
      hifuse_model* model = nullptr;
      check(hifuse_model_load(cam_ckpt.c_str(), &model), cam_ckpt);
      std::unique_ptr<hifuse_model, void (*)(hifuse_model*)> owner(model, hifuse_model_free);
      for (const auto& image : images) {
        int used = 0;
        char *pgm = nullptr, *ppm = nullptr;
        check(hifuse_gradcam(model, image.c_str(), target, cam_layer.c_str(), &used, &pgm, &ppm), image);
        std::cout << image << ": class " << used << " -> " << take(pgm) << ", " << take(ppm) << "\n";
      }
      return kExitOk;
    }
    if (selfcheck->parsed()) {
      std::string joined;
      for (const auto& s : only) joined += (joined.empty() ? "" : ",") + s;
      int failures = 0;
      double seconds = 0;
      check(hifuse_selfcheck(only.empty() ? nullptr : joined.c_str(), print_line, nullptr, &failures, &seconds),
            "selfcheck");
      std::printf("selfcheck: %d failed, %.1f s\n", failures, seconds);
      if (seconds > 300.0) std::fprintf(stderr, "warning: selfcheck took %.0f s, over the 300 s budget\n", seconds);
      return failures == 0 ? kExitOk : kExitCheck;
    }
    return kExitUsage;
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  }
}
