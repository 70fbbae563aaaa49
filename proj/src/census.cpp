#include "hifuse/census.hpp"

#include <cstdio>
#include <map>
#include <sstream>

#include "hifuse/model.hpp"
#include "hifuse/window_attention.hpp"

namespace hifuse {

std::string module_of(const std::string& param_name) {
  const auto first = param_name.find('.');
  if (first == std::string::npos) return param_name;
  const auto second = param_name.find('.', first + 1);
  const std::string_view part = std::string_view(param_name).substr(first + 1, second - first - 1);
  if (part.starts_with("stage") || part == "stem") return param_name.substr(0, second);
  return param_name.substr(0, first);
}

ParamCensus param_census(const ModelConfig& config) {
  HiFuseModel<float> model(config, 0);
  ParamCensus out;
  for (const auto& e : model.params().entries()) {
    const std::string m = module_of(e.name);
    if (out.modules.empty() || out.modules.back().first != m) out.modules.emplace_back(m, 0);
    out.modules.back().second += e.tensor.numel();
    out.total += e.tensor.numel();
  }
  return out;
}

Index count_params(const ModelConfig& config) { return param_census(config).total; }

Index block_pair_params(const ModelConfig& config, int stage) {
  config.validate();
  if (stage < 0 || stage > 3) fail(ErrorKind::InvalidArgument, "block_pair_params: stage must be in [0, 3]");
  const auto s = static_cast<std::size_t>(stage);
  ParamSet<float> ps;
  RngState rng{0, 0};
  register_local_block(ps, "l", config.channels[s], rng);
  if (config.ablation.global_branch)
    register_global_block(ps, "g", config.channels[s], config.heads[s], config.stage_window(stage), rng);
  return ps.numel();
}

FlopCensus count_flops(const ModelConfig& c) {
  c.validate();
  FlopCensus f;
  std::vector<std::pair<std::string, std::uint64_t>>& mods = f.modules;
  auto tally = [&](const std::string& m, std::uint64_t v) {
    if (mods.empty() || mods.back().first != m) mods.emplace_back(m, 0);
    mods.back().second += v;
  };
  using U = std::uint64_t;
  auto conv = [&](const std::string& m, U cout, U cin_per_group, U k, U hout) {
    const U v = cout * cin_per_group * k * k * hout * hout;
    f.conv += v;
    tally(m, v);
  };
  auto lin = [&](const std::string& m, U rows, U n, U k) {
    const U v = rows * n * k;
    f.linear += v;
    tally(m, v);
  };
  auto mm = [&](const std::string& m, U v) {
    f.matmul += v;
    tally(m, v);
  };

  const bool global = c.ablation.global_branch;
  const U in = static_cast<U>(c.in_channels);
  const U H0 = static_cast<U>(c.stage_size(0));
  const U C0 = static_cast<U>(c.channels[0]);
  conv("local.stem", C0, in, 4, H0);
  if (global) lin("global.stem", H0 * H0, C0, 16 * in);
  for (int s = 0; s < 4; ++s) {
    const auto su = static_cast<std::size_t>(s);
    const U H = static_cast<U>(c.stage_size(s));
    const U C = static_cast<U>(c.channels[su]);
    const U M = static_cast<U>(c.stage_window(s));
    const std::string lp = local_stage_prefix(s), gp = global_stage_prefix(s), fp = fusion_stage_prefix(s);
    const int depth = c.depths[su];
    if (s > 0) conv(lp, C, C / 2, 2, H);
    for (int d = 0; d < depth; ++d) {
      conv(lp, C, 1, 3, H);
      conv(lp, C, C, 1, H);
    }
    if (global) {
      if (s > 0) lin(gp, H * H, C, 2 * C);
      for (int d = 0; d < depth; ++d)
        for (int u = 0; u < 2; ++u) {
          lin(gp, H * H, 3 * C, C);         // qkv
          mm(gp, 2 * M * M * H * H * C);    // scores and weighted values
          lin(gp, H * H, C, C);             // attention output projection
          lin(gp, H * H, C, C);             // 1x1 after attention
          f.attention[su] += complexity_count(AttentionKind::WindowMsa, static_cast<Index>(H),
                                              static_cast<Index>(H), static_cast<Index>(C), static_cast<Index>(M));
        }
    }
    const auto& ab = c.ablation;
    if (ab.channel_spatial_attention) {
      if (global) {
        const U hidden = C / static_cast<U>(c.ca_reduction);
        for (int path = 0; path < 2; ++path) {
          lin(fp, 1, hidden, C);
          lin(fp, 1, C, hidden);
        }
      }
      conv(fp, 1, 2, 7, H);
    }
    if (s > 0) conv(fp, C, C / 2, 1, 2 * H);
    conv(fp, C, 3 * C, 3, H);
    conv(fp, C, 3 * C, 1, H);
    if (ab.irmlp) {
      conv(fp, C, 1, 3, H);
      conv(fp, 4 * C, C, 1, H);
      conv(fp, C, 4 * C, 1, H);
    } else {
      conv(fp, C, C, 1, H);
    }
  }
  lin("head", 1, static_cast<U>(c.num_classes), static_cast<U>(c.channels[3]));
  return f;
}

std::array<StageShape, 4> stage_schedule(const ModelConfig& config) {
  config.validate();
  std::array<StageShape, 4> out{};
  for (int s = 0; s < 4; ++s)
    out[static_cast<std::size_t>(s)] = StageShape{config.stage_size(s), config.channels[static_cast<std::size_t>(s)],
                                                  config.stage_window(s), config.stage_shift(s)};
  return out;
}

std::string inspect_report(const ModelConfig& config) {
  const auto sched = stage_schedule(config);
  const ParamCensus pc = param_census(config);
  const FlopCensus fc = count_flops(config);
  std::ostringstream os;
  char line[256];
  os << "variant " << config.variant << ", depths " << config.depths[0] << ',' << config.depths[1] << ','
     << config.depths[2] << ',' << config.depths[3] << ", input " << config.image_size << 'x' << config.image_size
     << "\n\nstage  output      channels  window  shift  attention MACs\n";
  for (int s = 0; s < 4; ++s) {
    const auto& st = sched[static_cast<std::size_t>(s)];
    std::snprintf(line, sizeof line, "%-6d %-11s %-9lld %-7d %-6d %llu\n", s + 1,
                  (std::to_string(st.size) + "x" + std::to_string(st.size)).c_str(),
                  static_cast<long long>(st.channels), st.window, st.shift,
                  static_cast<unsigned long long>(fc.attention[static_cast<std::size_t>(s)]));
    os << line;
  }
  std::map<std::string, std::uint64_t> macs(fc.modules.begin(), fc.modules.end());
  os << "\nmodule           params        MACs\n";
  for (const auto& [m, n] : pc.modules) {
    std::snprintf(line, sizeof line, "%-16s %-13lld %llu\n", m.c_str(), static_cast<long long>(n),
                  static_cast<unsigned long long>(macs.count(m) ? macs[m] : 0));
    os << line;
  }
  std::snprintf(line, sizeof line, "\ntotal params %lld (%.2f M)\ntotal MACs   %llu (%.2f G)\n",
                static_cast<long long>(pc.total), static_cast<double>(pc.total) / 1e6,
                static_cast<unsigned long long>(fc.total()), static_cast<double>(fc.total()) / 1e9);
  os << line;
  std::snprintf(line, sizeof line, "  conv %llu, linear %llu, matmul %llu\n",
                static_cast<unsigned long long>(fc.conv), static_cast<unsigned long long>(fc.linear),
                static_cast<unsigned long long>(fc.matmul));
  os << line;
  return os.str();
}

}  // namespace hifuse
