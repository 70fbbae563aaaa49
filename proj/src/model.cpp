#include "hifuse/model.hpp"

#include "hifuse/ops.hpp"
#include "hifuse/window_attention.hpp"

namespace hifuse {

// ---- ParamSet ---------------------------------------------------------------

template <class T>
Tensor<T>& ParamSet<T>::add(const std::string& name, Tensor<T> value, bool decay) {
  if (index_.count(name)) fail(ErrorKind::InvalidArgument, "parameter '" + name + "' registered twice");
  index_.emplace(name, entries_.size());
  entries_.push_back(ParamEntry<T>{name, std::move(value), decay});
  return entries_.back().tensor;
}

template <class T>
Tensor<T>& ParamSet<T>::add_weight(const std::string& name, const Shape& shape, RngState& rng) {
  return add(name, trunc_normal_init<T>(shape, 0.02, rng), true);
}

template <class T>
Tensor<T>& ParamSet<T>::add_bias(const std::string& name, Index n) {
  return add(name, Tensor<T>::zeros(Shape{n}), false);
}

template <class T>
void ParamSet<T>::add_norm(const std::string& prefix, Index channels) {
  add(prefix + ".weight", Tensor<T>::ones(Shape{channels}), false);
  add(prefix + ".bias", Tensor<T>::zeros(Shape{channels}), false);
}

template <class T>
const Tensor<T>& ParamSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::MissingParameter, "no parameter named '" + name + "'");
  return entries_[it->second].tensor;
}

template <class T>
Tensor<T>& ParamSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::MissingParameter, "no parameter named '" + name + "'");
  return entries_[it->second].tensor;
}

template <class T>
Index ParamSet<T>::numel() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <class T>
void ParamSet<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.tensor.set_requires_grad(on);
}

template <class T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---- helpers ----------------------------------------------------------------

namespace {

template <class T>
Tensor<T> conv(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, Conv2dOptions opt = {}) {
  return conv2d(x, ps.get(prefix + ".weight"), ps.get(prefix + ".bias"), opt);
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps, int axis) {
  return layer_norm(x, ps.get(prefix + ".weight"), ps.get(prefix + ".bias"), eps, axis);
}

template <class T>
void add_conv(ParamSet<T>& ps, const std::string& prefix, Index cout, Index cin_per_group, Index k, RngState& rng) {
  ps.add_weight(prefix + ".weight", Shape{cout, cin_per_group, k, k}, rng);
  ps.add_bias(prefix + ".bias", cout);
}

/// Scales each sample's residual branch by keep/(1-p) with keep ~ Bernoulli(1-p).
template <class T>
Tensor<T> drop_path(const Tensor<T>& branch, const BlockOptions& opt) {
  if (!opt.training || opt.drop_rate <= 0.0) return branch;
  if (!opt.rng) fail(ErrorKind::InvalidArgument, "drop path needs an RNG while training");
  const Index B = branch.dim(0);
  Shape ms(static_cast<std::size_t>(branch.rank()), 1);
  ms[0] = B;
  Tensor<T> mask(ms);
  auto md = mask.mutable_data();
  const double keep_scale = 1.0 / (1.0 - opt.drop_rate);
  for (Index b = 0; b < B; ++b)
    md[static_cast<std::size_t>(b)] = opt.rng->next_uniform() >= opt.drop_rate ? static_cast<T>(keep_scale) : T(0);
  return mul(branch, mask);
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) fail(ErrorKind::Shape, std::string(what) + " expects a 4-D map, got " + shape_str(s));
}

}  // namespace

// ---- stems ------------------------------------------------------------------

template <class T>
void register_local_stem(ParamSet<T>& ps, const std::string& prefix, int in_ch, int C, RngState& rng) {
  add_conv(ps, prefix + ".conv", C, in_ch, 4, rng);
  ps.add_norm(prefix + ".norm", C);
}

template <class T>
Tensor<T> local_stem(const Tensor<T>& image, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  require_rank4(image.shape(), "local_stem");
  const auto& w = ps.get(prefix + ".conv.weight");
  if (image.dim(1) != w.dim(1))
    fail(ErrorKind::Shape, "local_stem: image has " + std::to_string(image.dim(1)) + " channels, expected " +
                               std::to_string(w.dim(1)));
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
    fail(ErrorKind::Shape, "local_stem: spatial size " + shape_str(image.shape()) + " not divisible by 4");
  auto y = conv(image, ps, prefix + ".conv", Conv2dOptions{4, 0, 1});
  return norm(y, ps, prefix + ".norm", eps, 1);
}

template <class T>
Tensor<T> patch_partition(const Tensor<T>& image) {
  require_rank4(image.shape(), "patch_partition");
  const Index B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  if (H % 4 != 0 || W % 4 != 0)
    fail(ErrorKind::Shape, "patch_partition: spatial size " + shape_str(image.shape()) + " not divisible by 4");
  auto t = reshape(image, Shape{B, C, H / 4, 4, W / 4, 4});
  t = permute(t, {0, 2, 4, 3, 5, 1});
  return reshape(t, Shape{B, H / 4, W / 4, 16 * C});
}

template <class T>
void register_global_stem(ParamSet<T>& ps, const std::string& prefix, int in_ch, int C, RngState& rng) {
  ps.add_weight(prefix + ".embed.weight", Shape{C, 16 * in_ch}, rng);
  ps.add_bias(prefix + ".embed.bias", C);
  ps.add_norm(prefix + ".norm", C);
}

template <class T>
Tensor<T> global_stem(const Tensor<T>& image, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  require_rank4(image.shape(), "global_stem");
  const auto& w = ps.get(prefix + ".embed.weight");
  if (16 * image.dim(1) != w.dim(1))
    fail(ErrorKind::Shape, "global_stem: image has " + std::to_string(image.dim(1)) + " channels, expected " +
                               std::to_string(w.dim(1) / 16));
  auto tokens = patch_partition(image);
  auto y = linear(tokens, w, ps.get(prefix + ".embed.bias"));
  return norm(y, ps, prefix + ".norm", eps, -1);
}

// ---- local branch -----------------------------------------------------------

template <class T>
void register_local_block(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng) {
  add_conv(ps, prefix + ".dwconv", C, 1, 3, rng);
  ps.add_norm(prefix + ".norm", C);
  add_conv(ps, prefix + ".pwconv", C, C, 1, rng);
}

template <class T>
Tensor<T> local_block(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, const BlockOptions& opt) {
  require_rank4(x.shape(), "local_block");
  const Index C = x.dim(1);
  auto y = conv(x, ps, prefix + ".dwconv", Conv2dOptions{1, 1, static_cast<int>(C)});
  y = norm(y, ps, prefix + ".norm", opt.ln_eps, 1);
  y = conv(y, ps, prefix + ".pwconv");
  return add(x, drop_path(y, opt));
}

template <class T>
void register_local_downsample(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng) {
  ps.add_norm(prefix + ".norm", C);
  add_conv(ps, prefix + ".conv", 2 * C, C, 2, rng);
}

template <class T>
Tensor<T> local_downsample(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  require_rank4(x.shape(), "local_downsample");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    fail(ErrorKind::Shape, "local_downsample: odd spatial size in " + shape_str(x.shape()));
  auto y = norm(x, ps, prefix + ".norm", eps, 1);
  return conv(y, ps, prefix + ".conv", Conv2dOptions{2, 0, 1});
}

// ---- global branch ----------------------------------------------------------

template <class T>
void register_global_block(ParamSet<T>& ps, const std::string& prefix, int C, int heads, int window, RngState& rng) {
  const Index span = 2 * window - 1;
  for (int u = 0; u < 2; ++u) {
    const std::string p = prefix + ".unit" + std::to_string(u);
    ps.add_norm(p + ".norm", C);
    ps.add_weight(p + ".attn.qkv.weight", Shape{3 * C, C}, rng);
    ps.add_bias(p + ".attn.qkv.bias", 3 * C);
    ps.add_weight(p + ".attn.proj.weight", Shape{C, C}, rng);
    ps.add_bias(p + ".attn.proj.bias", C);
    ps.add_weight(p + ".attn.rel_bias_table", Shape{span * span, heads}, rng);
    ps.add_weight(p + ".out.weight", Shape{C, C}, rng);
    ps.add_bias(p + ".out.bias", C);
  }
}

template <class T>
Tensor<T> global_block(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, int heads, int window,
                       int shift, const BlockOptions& opt) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "global_block expects B,H,W,C tokens, got " + shape_str(x.shape()));
  if (x.dim(1) % window != 0 || x.dim(2) % window != 0)
    fail(ErrorKind::Shape, "global_block: " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                               " map not divisible by window " + std::to_string(window));
  const RelativePositionIndex rel = relative_position_index(window);
  Tensor<T> h = x;
  for (int u = 0; u < 2; ++u) {
    const std::string p = prefix + ".unit" + std::to_string(u);
    WindowAttentionParams<T> wp{ps.get(p + ".attn.qkv.weight"),  ps.get(p + ".attn.qkv.bias"),
                                ps.get(p + ".attn.proj.weight"), ps.get(p + ".attn.proj.bias"),
                                ps.get(p + ".attn.rel_bias_table"), heads, window, rel};
    auto n = norm(h, ps, p + ".norm", opt.ln_eps, -1);
    auto a = (u == 1 && shift > 0) ? shifted_wmsa(n, wp, shift) : wmsa(n, wp);
    a = linear(a, ps.get(p + ".out.weight"), ps.get(p + ".out.bias"));
    h = add(h, drop_path(a, opt));
  }
  return h;
}

template <class T>
Tensor<T> merge_gather(const Tensor<T>& x) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "merge_gather expects B,H,W,C tokens, got " + shape_str(x.shape()));
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) fail(ErrorKind::Shape, "patch merging: odd spatial size in " + shape_str(x.shape()));
  auto t = reshape(x, Shape{B, H / 2, 2, W / 2, 2, C});  // dy at axis 2, dx at axis 4
  t = permute(t, {0, 1, 3, 4, 2, 5});                      // [B, H/2, W/2, dx, dy, C]
  return reshape(t, Shape{B, H / 2, W / 2, 4 * C});
}

template <class T>
void register_patch_merging(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng) {
  ps.add_norm(prefix + ".norm", 4 * C);
  ps.add_weight(prefix + ".reduction.weight", Shape{2 * C, 4 * C}, rng);
}

template <class T>
Tensor<T> patch_merging(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  auto y = norm(merge_gather(x), ps, prefix + ".norm", eps, -1);
  return linear(y, ps.get(prefix + ".reduction.weight"), Tensor<T>());
}

// ---- fusion -----------------------------------------------------------------

template <class T>
void register_channel_attention(ParamSet<T>& ps, const std::string& prefix, int C, int reduction, RngState& rng) {
  if (reduction < 1 || C % reduction != 0)
    fail(ErrorKind::InvalidArgument, "channel attention: " + std::to_string(C) +
                                         " channels not divisible by reduction " + std::to_string(reduction));
  const Index hidden = C / reduction;
  ps.add_weight(prefix + ".fc1.weight", Shape{hidden, C}, rng);
  ps.add_bias(prefix + ".fc1.bias", hidden);
  ps.add_weight(prefix + ".fc2.weight", Shape{C, hidden}, rng);
  ps.add_bias(prefix + ".fc2.bias", C);
}

template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix) {
  require_rank4(x.shape(), "channel_attention");
  const Index B = x.dim(0), C = x.dim(1);
  auto mlp = [&](const Tensor<T>& v) {
    auto h = linear(reshape(v, Shape{B, C}), ps.get(prefix + ".fc1.weight"), ps.get(prefix + ".fc1.bias"));
    return linear(gelu(h), ps.get(prefix + ".fc2.weight"), ps.get(prefix + ".fc2.bias"));
  };
  auto s = add(mlp(pool2d(x, PoolKind::GlobalAvg)), mlp(pool2d(x, PoolKind::GlobalMax)));
  return reshape(sigmoid(s), Shape{B, C, 1, 1});
}

template <class T>
void register_spatial_attention(ParamSet<T>& ps, const std::string& prefix, RngState& rng) {
  add_conv(ps, prefix + ".conv", 1, 2, 7, rng);
}

template <class T>
Tensor<T> spatial_attention(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix) {
  require_rank4(x.shape(), "spatial_attention");
  auto pooled = concat<T>({reduce(x, 1, ReduceKind::Mean), reduce(x, 1, ReduceKind::Max)}, 1);
  return sigmoid(conv(pooled, ps, prefix + ".conv", Conv2dOptions{1, 3, 1}));
}

template <class T>
void register_irmlp(ParamSet<T>& ps, const std::string& prefix, int C, RngState& rng) {
  ps.add_norm(prefix + ".norm", C);
  add_conv(ps, prefix + ".dwconv", C, 1, 3, rng);
  add_conv(ps, prefix + ".fc1", 4 * C, C, 1, rng);
  add_conv(ps, prefix + ".fc2", C, 4 * C, 1, rng);
}

template <class T>
Tensor<T> irmlp(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  require_rank4(x.shape(), "irmlp");
  const auto& w = ps.get(prefix + ".dwconv.weight");
  if (x.dim(1) != w.dim(0))
    fail(ErrorKind::Shape, "irmlp: input has " + std::to_string(x.dim(1)) + " channels, block width is " +
                               std::to_string(w.dim(0)));
  auto n = norm(x, ps, prefix + ".norm", eps, 1);
  auto y = add(conv(n, ps, prefix + ".dwconv", Conv2dOptions{1, 1, static_cast<int>(x.dim(1))}), n);
  y = gelu(conv(y, ps, prefix + ".fc1"));
  return conv(y, ps, prefix + ".fc2");
}

template <class T>
void register_hff_block(ParamSet<T>& ps, const std::string& prefix, int C, int prev_channels, int reduction,
                        const AblationFlags& ab, RngState& rng) {
  if (ab.channel_spatial_attention) {
    if (ab.global_branch) register_channel_attention(ps, prefix + ".ca", C, reduction, rng);
    register_spatial_attention(ps, prefix + ".sa", rng);
  }
  if (prev_channels > 0) add_conv(ps, prefix + ".prev", C, prev_channels, 1, rng);
  add_conv(ps, prefix + ".mix", C, 3 * C, 3, rng);
  add_conv(ps, prefix + ".reduce", C, 3 * C, 1, rng);
  if (ab.irmlp)
    register_irmlp(ps, prefix + ".irmlp", C, rng);
  else
    add_conv(ps, prefix + ".proj", C, C, 1, rng);
}

template <class T>
Tensor<T> hff_block(const Tensor<T>& G, const Tensor<T>& L, const Tensor<T>* prev, const ParamSet<T>& ps,
                    const std::string& prefix, const FusionOptions& opt) {
  require_rank4(G.shape(), "hff_block");
  if (G.shape() != L.shape())
    fail(ErrorKind::Shape, "hff_block: global " + shape_str(G.shape()) + " and local " + shape_str(L.shape()) +
                               " maps differ");
  const Index B = G.dim(0), C = G.dim(1), H = G.dim(2), W = G.dim(3);
  const auto& ab = opt.ablation;

  Tensor<T> Ft;
  if (prev) {
    const auto& pw = ps.get(prefix + ".prev.weight");
    if (prev->shape() != Shape{B, pw.dim(1), 2 * H, 2 * W})
      fail(ErrorKind::Shape, "hff_block: previous fusion map " + shape_str(prev->shape()) + " expected " +
                                 shape_str(Shape{B, pw.dim(1), 2 * H, 2 * W}));
    Ft = pool2d(conv(*prev, ps, prefix + ".prev"), PoolKind::Avg, 2, 2);
  } else {
    Ft = Tensor<T>::zeros(Shape{B, C, H, W});
  }

  Tensor<T> Gh = G, Lh = L;
  if (ab.channel_spatial_attention) {
    if (ab.global_branch) Gh = mul(G, opt.force_unit_gates ? Tensor<T>::ones(Shape{B, C, 1, 1}) : channel_attention(G, ps, prefix + ".ca"));
    Lh = mul(L, opt.force_unit_gates ? Tensor<T>::ones(Shape{B, 1, H, W}) : spatial_attention(L, ps, prefix + ".sa"));
  } else if (opt.force_unit_gates) {
    Gh = mul(G, Tensor<T>::ones(Shape{B, C, 1, 1}));
    Lh = mul(L, Tensor<T>::ones(Shape{B, 1, H, W}));
  }

  auto Fh = conv(concat<T>({G, L, Ft}, 1), ps, prefix + ".mix", Conv2dOptions{1, 1, 1});
  auto z = conv(concat<T>({Gh, Lh, Fh}, 1), ps, prefix + ".reduce");
  auto F = ab.irmlp ? irmlp(z, ps, prefix + ".irmlp", opt.ln_eps) : conv(z, ps, prefix + ".proj");
  if (ab.shortcut && prev) F = add(F, Ft);
  return F;
}

template <class T>
void register_classifier_head(ParamSet<T>& ps, const std::string& prefix, int C, int num_classes, RngState& rng) {
  ps.add_norm(prefix + ".norm", C);
  ps.add_weight(prefix + ".fc.weight", Shape{num_classes, C}, rng);
  ps.add_bias(prefix + ".fc.bias", num_classes);
}

template <class T>
Tensor<T> classifier_head(const Tensor<T>& F, const ParamSet<T>& ps, const std::string& prefix, double eps) {
  require_rank4(F.shape(), "classifier_head");
  auto v = reshape(pool2d(F, PoolKind::GlobalAvg), Shape{F.dim(0), F.dim(1)});
  v = norm(v, ps, prefix + ".norm", eps, -1);
  return linear(v, ps.get(prefix + ".fc.weight"), ps.get(prefix + ".fc.bias"));
}

// ---- model ------------------------------------------------------------------

std::string local_stage_prefix(int stage) { return "local.stage" + std::to_string(stage + 1); }
std::string global_stage_prefix(int stage) { return "global.stage" + std::to_string(stage + 1); }
std::string fusion_stage_prefix(int stage) { return "fusion.stage" + std::to_string(stage + 1); }

template <class T>
HiFuseModel<T>::HiFuseModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  RngState rng{seed, 0};
  const auto& c = config_;
  const bool global = c.ablation.global_branch;
  register_local_stem(params_, "local.stem", c.in_channels, c.channels[0], rng);
  if (global) register_global_stem(params_, "global.stem", c.in_channels, c.channels[0], rng);
  for (int s = 0; s < 4; ++s) {
    const int C = c.channels[static_cast<std::size_t>(s)];
    const int depth = c.depths[static_cast<std::size_t>(s)];
    const std::string lp = local_stage_prefix(s), gp = global_stage_prefix(s);
    if (s > 0) register_local_downsample(params_, lp + ".down", C / 2, rng);
    for (int d = 0; d < depth; ++d) register_local_block(params_, lp + ".block" + std::to_string(d), C, rng);
    if (global) {
      if (s > 0) register_patch_merging(params_, gp + ".merge", C / 2, rng);
      for (int d = 0; d < depth; ++d)
        register_global_block(params_, gp + ".block" + std::to_string(d), C,
                              c.heads[static_cast<std::size_t>(s)], c.stage_window(s), rng);
    }
    register_hff_block(params_, fusion_stage_prefix(s), C, s > 0 ? C / 2 : 0, c.ca_reduction, c.ablation, rng);
  }
  register_classifier_head(params_, "head", c.channels[3], c.num_classes, rng);
}

template <class T>
double HiFuseModel<T>::drop_rate(int index) const {
  int total = 0;
  for (int d : config_.depths) total += d;
  if (total <= 1 || config_.drop_path_rate <= 0) return 0.0;
  return config_.drop_path_rate * static_cast<double>(index) / static_cast<double>(total - 1);
}

template <class T>
Tensor<T> HiFuseModel<T>::forward(const Tensor<T>& image, const ForwardOptions<T>& opt) const {
  const auto& c = config_;
  const Shape expect{image.rank() == 4 ? image.dim(0) : 0, c.in_channels, c.image_size, c.image_size};
  if (image.rank() != 4 || image.shape() != expect || image.dim(0) < 1)
    fail(ErrorKind::Shape, "model input " + shape_str(image.shape()) + " does not match B x " +
                               std::to_string(c.in_channels) + " x " + std::to_string(c.image_size) + " x " +
                               std::to_string(c.image_size));
  const bool global = c.ablation.global_branch;
  const Index B = image.dim(0);
  auto hook = [&](const std::string& tag, const Tensor<T>& t) { return opt.hook ? opt.hook(tag, t) : t; };

  BlockOptions bo;
  bo.ln_eps = c.ln_eps;
  bo.training = opt.training;
  bo.rng = opt.rng;
  FusionOptions fo;
  fo.ablation = c.ablation;
  fo.force_unit_gates = opt.force_unit_gates;
  fo.ln_eps = c.ln_eps;

  Tensor<T> l = local_stem(image, params_, "local.stem", c.ln_eps);
  Tensor<T> g;  // channels-last
  if (global) g = global_stem(image, params_, "global.stem", c.ln_eps);
  Tensor<T> F;
  int block_index = 0;
  for (int s = 0; s < 4; ++s) {
    const auto su = static_cast<std::size_t>(s);
    const int depth = c.depths[su];
    const std::string lp = local_stage_prefix(s), gp = global_stage_prefix(s);
    const std::string tag = std::to_string(s + 1);
    if (s > 0) {
      l = local_downsample(l, params_, lp + ".down", c.ln_eps);
      if (global) g = patch_merging(g, params_, gp + ".merge", c.ln_eps);
    }
    for (int d = 0; d < depth; ++d) {
      bo.drop_rate = drop_rate(block_index + d);
      l = local_block(l, params_, lp + ".block" + std::to_string(d), bo);
    }
    if (global)
      for (int d = 0; d < depth; ++d) {
        bo.drop_rate = drop_rate(block_index + d);
        g = global_block(g, params_, gp + ".block" + std::to_string(d), c.heads[su], c.stage_window(s),
                         c.stage_shift(s), bo);
      }
    block_index += depth;

    Tensor<T> G = global ? permute(g, {0, 3, 1, 2}) : Tensor<T>::zeros(Shape{B, c.channels[su], l.dim(2), l.dim(3)});
    Tensor<T> Gh = hook("G" + tag, G);
    if (global && !Gh.same_node(G)) g = permute(Gh, {0, 2, 3, 1});
    l = hook("L" + tag, l);
    F = hook("F" + tag, hff_block(Gh, l, s > 0 ? &F : nullptr, params_, fusion_stage_prefix(s), fo));
    if (opt.trace) {
      opt.trace->G[su] = Gh;
      opt.trace->L[su] = l;
      opt.trace->F[su] = F;
    }
  }
  return classifier_head(F, params_, "head", c.ln_eps);
}

#define HIFUSE_INSTANTIATE_MODEL(T)                                                                                  \
  template class ParamSet<T>;                                                                                        \
  template class HiFuseModel<T>;                                                                                     \
  template void register_local_stem<T>(ParamSet<T>&, const std::string&, int, int, RngState&);                       \
  template Tensor<T> local_stem<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);                \
  template Tensor<T> patch_partition<T>(const Tensor<T>&);                                                           \
  template void register_global_stem<T>(ParamSet<T>&, const std::string&, int, int, RngState&);                      \
  template Tensor<T> global_stem<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);               \
  template void register_local_block<T>(ParamSet<T>&, const std::string&, int, RngState&);                           \
  template Tensor<T> local_block<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, const BlockOptions&);  \
  template void register_global_block<T>(ParamSet<T>&, const std::string&, int, int, int, RngState&);                \
  template Tensor<T> global_block<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, int, int, int,        \
                                     const BlockOptions&);                                                           \
  template void register_local_downsample<T>(ParamSet<T>&, const std::string&, int, RngState&);                      \
  template Tensor<T> local_downsample<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);          \
  template Tensor<T> merge_gather<T>(const Tensor<T>&);                                                              \
  template void register_patch_merging<T>(ParamSet<T>&, const std::string&, int, RngState&);                         \
  template Tensor<T> patch_merging<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);             \
  template void register_channel_attention<T>(ParamSet<T>&, const std::string&, int, int, RngState&);                \
  template Tensor<T> channel_attention<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&);                 \
  template void register_spatial_attention<T>(ParamSet<T>&, const std::string&, RngState&);                          \
  template Tensor<T> spatial_attention<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&);                 \
  template void register_irmlp<T>(ParamSet<T>&, const std::string&, int, RngState&);                                 \
  template Tensor<T> irmlp<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);                     \
  template void register_hff_block<T>(ParamSet<T>&, const std::string&, int, int, int, const AblationFlags&,         \
                                      RngState&);                                                                    \
  template Tensor<T> hff_block<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ParamSet<T>&,          \
                                  const std::string&, const FusionOptions&);                                         \
  template void register_classifier_head<T>(ParamSet<T>&, const std::string&, int, int, RngState&);                 \
  template Tensor<T> classifier_head<T>(const Tensor<T>&, const ParamSet<T>&, const std::string&, double);

HIFUSE_INSTANTIATE_MODEL(float)
HIFUSE_INSTANTIATE_MODEL(double)

}  // namespace hifuse
