#include "hifuse/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "hifuse/tensor.hpp"

namespace hifuse {

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.variant = "small";
  c.depths = {2, 2, 6, 2};
  return c;
}

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.variant = "base";
  c.depths = {2, 2, 18, 2};
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.variant = "desk";
  c.channels = {8, 16, 32, 64};
  c.heads = {1, 2, 4, 8};
  c.window = 4;
  c.image_size = 32;
  c.num_classes = 2;
  c.ca_reduction = 4;
  return c;
}

ModelConfig ModelConfig::named(std::string_view name) {
  if (name == "tiny") return tiny();
  if (name == "small") return small();
  if (name == "base") return base();
  if (name == "desk") return desk();
  fail(ErrorKind::InvalidArgument, "unknown variant '" + std::string(name) + "' (expected tiny, small, base or desk)");
}

int ModelConfig::stage_window(int s) const {
  const int h = stage_size(s);
  return h <= window ? h : window;
}

int ModelConfig::stage_shift(int s) const { return stage_size(s) <= window ? 0 : window / 2; }

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "model config: " + m); };
  if (in_channels < 1) bad("in_channels must be >= 1");
  if (num_classes < 1) bad("num_classes must be >= 1");
  if (window < 1) bad("window must be >= 1");
  if (ca_reduction < 1) bad("ca_reduction must be >= 1");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) bad("drop_path_rate must be in [0, 1)");
  if (!(ln_eps > 0)) bad("ln_eps must be positive");
  if (image_size < 32 || image_size % 32 != 0)
    bad("image_size " + std::to_string(image_size) + " must be a positive multiple of 32");
  for (int s = 0; s < 4; ++s) {
    const std::string st = "stage " + std::to_string(s + 1);
    if (depths[static_cast<std::size_t>(s)] < 0) bad(st + " depth is negative");
    const int c = channels[static_cast<std::size_t>(s)];
    const int h = heads[static_cast<std::size_t>(s)];
    if (c < 1) bad(st + " channels must be positive");
    if (s > 0 && c != 2 * channels[static_cast<std::size_t>(s - 1)])
      bad(st + " channels must double the previous stage");
    if (h < 1 || c % h != 0) bad(st + ": " + std::to_string(c) + " channels not divisible by " + std::to_string(h) + " heads");
    if (c % ca_reduction != 0)
      bad(st + ": " + std::to_string(c) + " channels not divisible by ca_reduction " + std::to_string(ca_reduction));
    const int size = stage_size(s);
    if (size > window && size % window != 0)
      bad(st + ": feature map " + std::to_string(size) + " not divisible by window " + std::to_string(window));
  }
}

void TrainRunConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "train config: " + m); };
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) bad("warmup_epochs must be in [0, epochs)");
  if (schedule != "cosine" && schedule != "constant") bad("schedule must be cosine or constant");
  if (!(base_lr > 0) || !(min_lr >= 0) || min_lr > base_lr) bad("need 0 <= min_lr <= base_lr, base_lr > 0");
  if (!(weight_decay >= 0)) bad("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) bad("betas must be in [0, 1)");
  if (!(adam_eps > 0)) bad("adam_eps must be positive");
  if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
  double total = 0;
  for (double r : split) {
    if (!(r > 0)) bad("split ratios must all be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) bad("split ratios must sum to 1");
  if (!(norm_std > 0)) bad("norm_std must be positive");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

struct ValueError {
  std::string message;
};

long long parse_int(std::string_view v) {
  v = trim(v);
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
    throw ValueError{"expected an integer, got '" + std::string(v) + "'"};
  return out;
}

double parse_float(std::string_view v) {
  v = trim(v);
  std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (...) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw ValueError{"expected a number, got '" + s + "'"};
  return out;
}

bool parse_bool(std::string_view v) {
  v = trim(v);
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ValueError{"expected true/false, got '" + std::string(v) + "'"};
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = v.find(',', start);
    out.push_back(trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <std::size_t N>
std::array<int, N> parse_int_array(std::string_view v) {
  auto parts = split_list(v);
  if (parts.size() != N) throw ValueError{"expected " + std::to_string(N) + " comma-separated integers"};
  std::array<int, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<int>(parse_int(parts[i]));
  return out;
}

template <std::size_t N>
std::array<double, N> parse_float_array(std::string_view v) {
  auto parts = split_list(v);
  if (parts.size() != N) throw ValueError{"expected " + std::to_string(N) + " comma-separated numbers"};
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_float(parts[i]);
  return out;
}

int parse_int32(std::string_view v) { return static_cast<int>(parse_int(v)); }

using Setter = std::function<void(RunConfig&, std::string_view)>;

struct KeyEntry {
  ConfigKey key;
  Setter set;
  std::function<std::string(const RunConfig&)> get;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <std::size_t N, class V>
std::string fmt_array(const std::array<V, N>& a) {
  std::ostringstream os;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) os << ',';
    if constexpr (std::is_floating_point_v<V>)
      os << fmt_double(a[i]);
    else
      os << a[i];
  }
  return os.str();
}

const std::vector<KeyEntry>& entries() {
  static const std::vector<KeyEntry> table = [] {
    std::vector<KeyEntry> t;
    auto add = [&](std::string name, std::string type, std::string help, Setter set,
                   std::function<std::string(const RunConfig&)> get) {
      t.push_back(KeyEntry{ConfigKey{std::move(name), std::move(type), std::move(help)}, std::move(set), std::move(get)});
    };
    auto b2s = [](bool b) { return std::string(b ? "true" : "false"); };
    // Model.
    add("variant", "string", "preset: tiny, small, base or desk (resets widths, depths, window, image size)",
        [](RunConfig& c, std::string_view v) {
          const int classes = c.model.num_classes;
          const AblationFlags ab = c.model.ablation;
          c.model = ModelConfig::named(trim(v));
          if (trim(v) != "desk") c.model.num_classes = classes;
          c.model.ablation = ab;
        },
        [](const RunConfig& c) { return c.model.variant; });
    add("depths", "int-list", "blocks per stage, 4 values",
        [](RunConfig& c, std::string_view v) { c.model.depths = parse_int_array<4>(v); },
        [](const RunConfig& c) { return fmt_array(c.model.depths); });
    add("channels", "int-list", "channel width per stage, 4 values",
        [](RunConfig& c, std::string_view v) { c.model.channels = parse_int_array<4>(v); },
        [](const RunConfig& c) { return fmt_array(c.model.channels); });
    add("heads", "int-list", "attention heads per stage, 4 values",
        [](RunConfig& c, std::string_view v) { c.model.heads = parse_int_array<4>(v); },
        [](const RunConfig& c) { return fmt_array(c.model.heads); });
    add("window", "int", "attention window side in tokens",
        [](RunConfig& c, std::string_view v) { c.model.window = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.model.window); });
    add("num_classes", "int", "number of output classes",
        [](RunConfig& c, std::string_view v) { c.model.num_classes = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.model.num_classes); });
    add("image_size", "int", "input side length in pixels (multiple of 32)",
        [](RunConfig& c, std::string_view v) { c.model.image_size = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.model.image_size); });
    add("in_channels", "int", "input image channels",
        [](RunConfig& c, std::string_view v) { c.model.in_channels = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.model.in_channels); });
    add("ca_reduction", "int", "channel-attention bottleneck ratio",
        [](RunConfig& c, std::string_view v) { c.model.ca_reduction = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.model.ca_reduction); });
    add("drop_path_rate", "float", "maximum stochastic-depth rate",
        [](RunConfig& c, std::string_view v) { c.model.drop_path_rate = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.model.drop_path_rate); });
    add("ln_eps", "float", "LayerNorm epsilon",
        [](RunConfig& c, std::string_view v) { c.model.ln_eps = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.model.ln_eps); });
    add("global_branch", "bool", "ablation: enable the attention branch",
        [](RunConfig& c, std::string_view v) { c.model.ablation.global_branch = parse_bool(v); },
        [b2s](const RunConfig& c) { return b2s(c.model.ablation.global_branch); });
    add("channel_spatial_attention", "bool", "ablation: channel/spatial gates in the fusion block",
        [](RunConfig& c, std::string_view v) { c.model.ablation.channel_spatial_attention = parse_bool(v); },
        [b2s](const RunConfig& c) { return b2s(c.model.ablation.channel_spatial_attention); });
    add("irmlp", "bool", "ablation: inverted-residual MLP in the fusion block",
        [](RunConfig& c, std::string_view v) { c.model.ablation.irmlp = parse_bool(v); },
        [b2s](const RunConfig& c) { return b2s(c.model.ablation.irmlp); });
    add("shortcut", "bool", "ablation: shortcut from the previous fusion output",
        [](RunConfig& c, std::string_view v) { c.model.ablation.shortcut = parse_bool(v); },
        [b2s](const RunConfig& c) { return b2s(c.model.ablation.shortcut); });
    // Training.
    add("epochs", "int", "training epochs",
        [](RunConfig& c, std::string_view v) { c.train.epochs = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("batch_size", "int", "mini-batch size",
        [](RunConfig& c, std::string_view v) { c.train.batch_size = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("warmup_epochs", "int", "linear warm-up length in epochs",
        [](RunConfig& c, std::string_view v) { c.train.warmup_epochs = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.train.warmup_epochs); });
    add("schedule", "string", "learning-rate schedule after warm-up: cosine or constant",
        [](RunConfig& c, std::string_view v) { c.train.schedule = std::string(trim(v)); },
        [](const RunConfig& c) { return c.train.schedule; });
    add("base_lr", "float", "peak learning rate",
        [](RunConfig& c, std::string_view v) { c.train.base_lr = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.base_lr); });
    add("min_lr", "float", "final learning rate of the cosine schedule",
        [](RunConfig& c, std::string_view v) { c.train.min_lr = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.min_lr); });
    add("weight_decay", "float", "decoupled weight decay",
        [](RunConfig& c, std::string_view v) { c.train.weight_decay = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.weight_decay); });
    add("beta1", "float", "AdamW first-moment decay",
        [](RunConfig& c, std::string_view v) { c.train.beta1 = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.beta1); });
    add("beta2", "float", "AdamW second-moment decay",
        [](RunConfig& c, std::string_view v) { c.train.beta2 = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.beta2); });
    add("adam_eps", "float", "AdamW denominator epsilon",
        [](RunConfig& c, std::string_view v) { c.train.adam_eps = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.adam_eps); });
    add("seed", "int", "seed for initialization, splits and shuffling",
        [](RunConfig& c, std::string_view v) {
          const long long s = parse_int(v);
          if (s < 0) throw ValueError{"seed must be non-negative"};
          c.train.seed = static_cast<std::uint64_t>(s);
        },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("checkpoint_every", "int", "epochs between periodic checkpoints (0 = final only)",
        [](RunConfig& c, std::string_view v) { c.train.checkpoint_every = parse_int32(v); },
        [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); });
    add("select_best", "bool", "also keep the best-by-validation-accuracy checkpoint",
        [](RunConfig& c, std::string_view v) { c.train.select_best = parse_bool(v); },
        [b2s](const RunConfig& c) { return b2s(c.train.select_best); });
    add("split", "float-list", "train,val,test ratios",
        [](RunConfig& c, std::string_view v) { c.train.split = parse_float_array<3>(v); },
        [](const RunConfig& c) { return fmt_array(c.train.split); });
    add("norm_mean", "float", "per-channel input mean after scaling to [0,1]",
        [](RunConfig& c, std::string_view v) { c.train.norm_mean = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.norm_mean); });
    add("norm_std", "float", "per-channel input std after scaling to [0,1]",
        [](RunConfig& c, std::string_view v) { c.train.norm_std = parse_float(v); },
        [](const RunConfig& c) { return fmt_double(c.train.norm_std); });
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

RunConfig parse_config_text(std::string_view text, RunConfig base) {
  RunConfig cfg = std::move(base);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) fail(ErrorKind::InvalidArgument, where + "expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const KeyEntry* entry = nullptr;
    for (const auto& e : entries())
      if (e.key.name == key) entry = &e;
    if (!entry) fail(ErrorKind::InvalidArgument, where + "unknown key '" + std::string(key) + "'");
    try {
      entry->set(cfg, value);
    } catch (const ValueError& e) {
      fail(ErrorKind::InvalidArgument, where + std::string(key) + ": " + e.message);
    } catch (const Error& e) {
      fail(ErrorKind::InvalidArgument, where + e.what());
    }
  }
  return cfg;
}

RunConfig parse_config(const std::string& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

}  // namespace hifuse
