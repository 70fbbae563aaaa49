#include "hifuse/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>

#include "hifuse/ops.hpp"
#include "hifuse/train.hpp"

namespace hifuse {

namespace {

Tensor<float> as_batch(const Tensor<float>& image) {
  if (image.rank() == 3) return reshape(image, Shape{1, image.dim(0), image.dim(1), image.dim(2)});
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  fail(ErrorKind::Shape, "expected a single image [C,S,S] or [1,C,S,S], got " + shape_str(image.shape()));
}

bool valid_layer(const std::string& tag) {
  return tag.size() == 2 && (tag[0] == 'F' || tag[0] == 'G' || tag[0] == 'L') && tag[1] >= '1' && tag[1] <= '4';
}

/// Clears requires_grad on every parameter for its lifetime.
class FrozenParams {
 public:
  explicit FrozenParams(const HiFuseModel<float>& model)
      : params_(const_cast<ParamSet<float>&>(model.params())) {
    for (auto& e : params_.entries()) {
      flags_.push_back(e.tensor.requires_grad());
      e.tensor.set_requires_grad(false);
    }
  }
  ~FrozenParams() {
    auto& entries = params_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].tensor.set_requires_grad(flags_[i]);
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  ParamSet<float>& params_;
  std::vector<bool> flags_;
};

}  // namespace

int predict_class(const HiFuseModel<float>& model, const Tensor<float>& image) {
  const Tensor<float> logits = model.forward(as_batch(image));
  return argmax(logits.data());
}

Heatmap grad_cam(const HiFuseModel<float>& model, const Tensor<float>& image, int target_class,
                 const std::string& layer) {
  const int K = model.config().num_classes;
  if (target_class < 0 || target_class >= K)
    fail(ErrorKind::InvalidArgument, "grad_cam: class " + std::to_string(target_class) + " outside [0, " +
                                         std::to_string(K) + ")");
  if (!valid_layer(layer)) fail(ErrorKind::InvalidArgument, "grad_cam: unknown layer tag '" + layer + "'");
  const Tensor<float> x = as_batch(image);

  FrozenParams frozen(model);
  Tape<float> tape;
  std::optional<TapeScope<float>> scope;
  Tensor<float> leaf;
  ForwardOptions<float> fo;
  // Everything before the target layer runs untracked; the tape starts at a
  // detached copy of that feature map.
  fo.hook = [&](const std::string& tag, const Tensor<float>& value) {
    if (tag != layer) return value;
    leaf = value.clone();
    leaf.set_requires_grad(true);
    scope.emplace(tape);
    return leaf;
  };
  const Tensor<float> logits = model.forward(x, fo);
  if (!leaf.defined()) fail(ErrorKind::State, "grad_cam: layer " + layer + " was not reached");
  const Tensor<float> score = sum(slice(logits, 1, target_class, 1));
  if (score.requires_grad()) tape.backward(score);
  scope.reset();

  const Index C = leaf.dim(1), H = leaf.dim(2), W = leaf.dim(3), plane = H * W;
  auto act = leaf.data();
  const bool has_grad = leaf.has_grad();
  std::vector<double> weights(static_cast<std::size_t>(C), 0.0);
  if (has_grad) {
    auto g = leaf.grad();
    for (Index c = 0; c < C; ++c) {
      double s = 0;
      for (Index i = 0; i < plane; ++i) s += static_cast<double>(g[static_cast<std::size_t>(c * plane + i)]);
      weights[static_cast<std::size_t>(c)] = s / static_cast<double>(plane);
    }
  }
  std::vector<double> cam(static_cast<std::size_t>(plane), 0.0);
  for (Index c = 0; c < C; ++c) {
    const double w = weights[static_cast<std::size_t>(c)];
    if (w == 0.0) continue;
    for (Index i = 0; i < plane; ++i)
      cam[static_cast<std::size_t>(i)] += w * static_cast<double>(act[static_cast<std::size_t>(c * plane + i)]);
  }
  double peak = 0;
  for (auto& v : cam) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  Heatmap hm;
  hm.layer = layer;
  hm.target_class = target_class;
  hm.map = Tensor<float>(Shape{H, W});
  auto out = hm.map.mutable_data();
  for (std::size_t i = 0; i < cam.size(); ++i) out[i] = peak > 0 ? static_cast<float>(cam[i] / peak) : 0.0f;
  return hm;
}

const std::array<std::array<std::uint8_t, 3>, 256>& colormap() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int v = 0; v < 256; ++v)
      t[static_cast<std::size_t>(v)] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(255 - std::abs(2 * v - 255)),
                                        static_cast<std::uint8_t>(255 - v)};
    return t;
  }();
  return table;
}

std::uint8_t heat_index(float h) {
  const double v = std::floor(std::clamp(static_cast<double>(h), 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(v);
}

Tensor<float> upsample_heatmap(const Tensor<float>& map, int out_h, int out_w) {
  if (map.rank() != 2) fail(ErrorKind::Shape, "upsample_heatmap expects [H, W], got " + shape_str(map.shape()));
  if (out_h < 1 || out_w < 1) fail(ErrorKind::InvalidArgument, "upsample_heatmap: output size must be positive");
  const Index H = map.dim(0), W = map.dim(1);
  auto src = map.data();
  Tensor<float> out(Shape{out_h, out_w});
  auto dst = out.mutable_data();
  auto sample = [](Index i, Index in, Index outn, Index& i0, Index& i1, double& f) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<Index>(s);
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (Index y = 0; y < out_h; ++y) {
    Index y0, y1;
    double fy;
    sample(y, H, out_h, y0, y1, fy);
    for (Index x = 0; x < out_w; ++x) {
      Index x0, x1;
      double fx;
      sample(x, W, out_w, x0, x1, fx);
      const double top = src[static_cast<std::size_t>(y0 * W + x0)] * (1 - fx) + src[static_cast<std::size_t>(y0 * W + x1)] * fx;
      const double bot = src[static_cast<std::size_t>(y1 * W + x0)] * (1 - fx) + src[static_cast<std::size_t>(y1 * W + x1)] * fx;
      dst[static_cast<std::size_t>(y * out_w + x)] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return out;
}

Image8 heatmap_image(const Heatmap& hm) {
  Image8 img;
  img.height = static_cast<int>(hm.map.dim(0));
  img.width = static_cast<int>(hm.map.dim(1));
  img.channels = 1;
  for (float v : hm.map.data()) img.pixels.push_back(heat_index(v));
  return img;
}

Image8 overlay_heatmap(const Heatmap& hm, const Image8& image) {
  if (image.channels != 1 && image.channels != 3)
    fail(ErrorKind::InvalidArgument, "overlay: image must have 1 or 3 channels");
  const Tensor<float> up = upsample_heatmap(hm.map, image.height, image.width);
  const auto& cmap = colormap();
  Image8 out;
  out.width = image.width;
  out.height = image.height;
  out.channels = 3;
  out.pixels.resize(static_cast<std::size_t>(image.width * image.height * 3));
  auto u = up.data();
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const auto& color = cmap[heat_index(u[static_cast<std::size_t>(y * image.width + x)])];
      for (int c = 0; c < 3; ++c) {
        const int px = image.at(x, y, image.channels == 3 ? c : 0);
        out.pixels[static_cast<std::size_t>((y * image.width + x) * 3 + c)] =
            static_cast<std::uint8_t>((px + color[static_cast<std::size_t>(c)] + 1) / 2);
      }
    }
  return out;
}

Image8 load_display_image(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext != ".hft") return read_pnm(path);
  Tensor<float> t = read_hft_file(path);
  if (t.rank() == 2) t = reshape(t, Shape{1, t.dim(0), t.dim(1)});
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
    fail(ErrorKind::Shape, path + ": expected a [C, H, W] tensor with 1 or 3 channels");
  Image8 img;
  img.channels = static_cast<int>(t.dim(0));
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.pixels.resize(static_cast<std::size_t>(t.numel()));
  const Index plane = t.dim(1) * t.dim(2);
  auto d = t.data();
  for (Index c = 0; c < t.dim(0); ++c)
    for (Index i = 0; i < plane; ++i)
      img.pixels[static_cast<std::size_t>(i * t.dim(0) + c)] = heat_index(d[static_cast<std::size_t>(c * plane + i)]);
  return img;
}

std::array<std::string, 2> write_gradcam_files(const std::string& input_path, const Heatmap& hm,
                                               const Image8& original) {
  namespace fs = std::filesystem;
  const fs::path in(input_path);
  const fs::path stem = in.parent_path() / in.stem();
  const std::string pgm = stem.string() + ".gradcam.pgm";
  const std::string ppm = stem.string() + ".gradcam.ppm";
  write_pnm(pgm, heatmap_image(hm));
  write_pnm(ppm, overlay_heatmap(hm, original));
  return {pgm, ppm};
}

}  // namespace hifuse
