#include "hifuse/image_io.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace hifuse {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_all_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace

Image8 decode_pnm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto bad = [&](const std::string& why) -> void { fail(ErrorKind::Format, name + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> long {
    skip_space();
    long v = 0;
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9)
      v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) bad("malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) bad("not a binary PGM/PPM file");
  Image8 img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const long w = number(), h = number(), maxval = number();
  if (w < 1 || h < 1) bad("invalid dimensions");
  if (maxval != 255) bad("only 8-bit images (maxval 255) are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) bad("malformed header");
  ++pos;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(img.channels);
  if (bytes.size() - pos < n) bad("truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

Image8 read_pnm(const std::string& path) { return decode_pnm(read_all(path), path); }

std::string encode_pnm(const Image8& image) {
  if (image.channels != 1 && image.channels != 3)
    fail(ErrorKind::InvalidArgument, "encode_pnm: images must have 1 or 3 channels");
  if (image.pixels.size() != static_cast<std::size_t>(image.width * image.height * image.channels))
    fail(ErrorKind::Shape, "encode_pnm: pixel buffer does not match the dimensions");
  std::string out = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

void write_pnm(const std::string& path, const Image8& image) { write_all_atomic(path, encode_pnm(image)); }

void write_hft(std::ostream& out, const Tensor<float>& t) {
  out.write("HFT1", 4);
  const auto rank = static_cast<std::uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (Index d : t.shape()) {
    const auto u = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&u), 8);
  }
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 4));
}

Tensor<float> read_hft(std::istream& in, const std::string& name) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "HFT1", 4) != 0)
    fail(ErrorKind::Format, name + ": missing HFT1 magic");
  std::uint32_t rank = 0;
  if (!in.read(reinterpret_cast<char*>(&rank), 4) || rank > 8) fail(ErrorKind::Format, name + ": bad tensor rank");
  Shape shape;
  Index numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t d = 0;
    if (!in.read(reinterpret_cast<char*>(&d), 8) || d == 0 || d > (1ull << 40))
      fail(ErrorKind::Format, name + ": bad tensor dimension");
    shape.push_back(static_cast<Index>(d));
    numel *= static_cast<Index>(d);
    if (numel > (Index{1} << 36)) fail(ErrorKind::Format, name + ": tensor too large");
  }
  std::vector<float> data(static_cast<std::size_t>(numel));
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * 4)))
    fail(ErrorKind::Format, name + ": truncated tensor payload");
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_hft_file(const std::string& path, const Tensor<float>& t) {
  std::ostringstream os;
  write_hft(os, t);
  write_all_atomic(path, os.str());
}

Tensor<float> read_hft_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read " + path);
  return read_hft(in, path);
}

Tensor<float> resize_bilinear(const Tensor<float>& chw, int out_h, int out_w) {
  if (chw.rank() != 3) fail(ErrorKind::Shape, "resize_bilinear expects C,H,W, got " + shape_str(chw.shape()));
  if (out_h < 1 || out_w < 1) fail(ErrorKind::InvalidArgument, "resize_bilinear: output size must be positive");
  const Index C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (H == out_h && W == out_w) return chw.clone();
  Tensor<float> out(Shape{C, out_h, out_w});
  auto src = chw.data();
  auto dst = out.mutable_data();
  auto coord = [](Index i, Index in, Index outn) {
    return outn == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(outn - 1);
  };
  for (Index y = 0; y < out_h; ++y) {
    const double sy = coord(y, H, out_h);
    const Index y0 = std::min<Index>(static_cast<Index>(sy), H - 1), y1 = std::min<Index>(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (Index x = 0; x < out_w; ++x) {
      const double sx = coord(x, W, out_w);
      const Index x0 = std::min<Index>(static_cast<Index>(sx), W - 1), x1 = std::min<Index>(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (Index c = 0; c < C; ++c) {
        const float* p = src.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - fx) + p[y0 * W + x1] * fx;
        const double bottom = p[y1 * W + x0] * (1 - fx) + p[y1 * W + x1] * fx;
        dst[static_cast<std::size_t>((c * out_h + y) * out_w + x)] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

Tensor<float> image_to_tensor(const Image8& image) {
  const Index C = image.channels, H = image.height, W = image.width;
  Tensor<float> t(Shape{C, H, W});
  auto d = t.mutable_data();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < C; ++c)
        d[static_cast<std::size_t>((c * H + y) * W + x)] =
            static_cast<float>(image.pixels[static_cast<std::size_t>((y * W + x) * C + c)]) / 255.0f;
  return t;
}

Tensor<float> preprocess(const Tensor<float>& chw, const PreprocessOptions& opt) {
  if (chw.rank() != 3) fail(ErrorKind::Shape, "preprocess expects C,H,W, got " + shape_str(chw.shape()));
  Tensor<float> x = chw;
  if (x.dim(0) != opt.channels) {
    if (x.dim(0) != 1) fail(ErrorKind::Shape, "image has " + std::to_string(x.dim(0)) + " channels, model expects " + std::to_string(opt.channels));
    const Index plane = x.dim(1) * x.dim(2);
    Tensor<float> rep(Shape{opt.channels, x.dim(1), x.dim(2)});
    auto d = rep.mutable_data();
    for (Index c = 0; c < opt.channels; ++c)
      std::copy(x.data().begin(), x.data().end(), d.begin() + c * plane);
    x = rep;
  }
  x = resize_bilinear(x, opt.image_size, opt.image_size);
  auto d = x.mutable_data();
  for (auto& v : d) v = static_cast<float>((static_cast<double>(v) - opt.mean) / opt.std);
  return x;
}

Tensor<float> load_model_input(const std::string& path, const PreprocessOptions& opt) {
  const std::string ext = std::filesystem::path(path).extension().string();
  Tensor<float> raw;
  if (ext == ".hft") {
    raw = read_hft_file(path);
    if (raw.rank() == 2) raw = Tensor<float>(Shape{1, raw.dim(0), raw.dim(1)}, std::vector<float>(raw.data().begin(), raw.data().end()));
  } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    raw = image_to_tensor(read_pnm(path));
  } else {
    fail(ErrorKind::Format, path + ": unsupported file type (expected .ppm, .pgm or .hft)");
  }
  try {
    return preprocess(raw, opt);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

}  // namespace hifuse
