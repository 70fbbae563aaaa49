#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "hifuse/checkpoint.hpp"
#include "hifuse/config.hpp"
#include "hifuse/dataset.hpp"
#include "hifuse/image_io.hpp"
#include "hifuse/ops.hpp"
#include "hifuse/train.hpp"
#include "test_util.hpp"

using namespace hifuse;
using testutil::bit_equal;
using testutil::randn;
namespace fs = std::filesystem;

namespace {

Image8 gradient_image(int w, int h, int channels) {
  Image8 img{w, h, channels, {}};
  img.pixels.resize(static_cast<std::size_t>(w * h * channels));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.pixels[static_cast<std::size_t>((y * w + x) * channels + c)] = static_cast<std::uint8_t>((x * 7 + y * 3 + c * 50) % 256);
  return img;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

PreprocessOptions desk_pre() {
  PreprocessOptions p;
  p.image_size = 32;
  return p;
}

}  // namespace

TEST(Pnm, RoundTripAndCommentedHeader) {
  const auto rgb = gradient_image(5, 3, 3);
  const auto back = decode_pnm(encode_pnm(rgb));
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.channels, 3);
  EXPECT_EQ(back.pixels, rgb.pixels);
  const std::string gray = std::string("P5\n# comment\n2 1\n255\n") + '\x10' + '\xff';
  const auto g = decode_pnm(gray);
  EXPECT_EQ(g.channels, 1);
  EXPECT_EQ(g.at(1, 0, 0), 255);
  EXPECT_THROW(decode_pnm("P3\n1 1\n255\n0 0 0"), Error);
  EXPECT_THROW(decode_pnm("P5\n4 4\n255\nxx"), Error);
}

TEST(Hft, ByteLayoutAndRoundTrip) {
  const Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, -0.5f});
  std::ostringstream os;
  write_hft(os, t);
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4u + 4u + 2 * 8u + 6 * 4u);
  EXPECT_EQ(b.substr(0, 4), "HFT1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 2u);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 2u);  // dim 0
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 3u);  // dim 1
  float first;
  std::memcpy(&first, b.data() + 24, 4);
  EXPECT_EQ(first, 1.0f);
  std::istringstream is(b);
  EXPECT_TRUE(bit_equal(read_hft(is), t));
  std::istringstream bad("HFT2....");
  EXPECT_THROW(read_hft(bad), Error);
  std::istringstream truncated(b.substr(0, b.size() - 3));
  EXPECT_THROW(read_hft(truncated), Error);
}

TEST(Preprocess, ResizeNormalizeAndGrayExpansion) {
  const auto t = image_to_tensor(gradient_image(650, 450, 3));
  EXPECT_EQ(t.shape(), (Shape{3, 450, 650}));
  const auto p = preprocess(t, PreprocessOptions{});
  EXPECT_EQ(p.shape(), (Shape{3, 224, 224}));
  // Corner-aligned resize keeps the corners; normalization is (v - 0.5) / 0.5.
  EXPECT_FLOAT_EQ(p.at({0, 0, 0}), (t.at({0, 0, 0}) - 0.5f) / 0.5f);
  EXPECT_FLOAT_EQ(p.at({2, 223, 223}), (t.at({2, 449, 649}) - 0.5f) / 0.5f);
  const auto g = preprocess(image_to_tensor(gradient_image(8, 8, 1)), desk_pre());
  EXPECT_EQ(g.shape(), (Shape{3, 32, 32}));
  EXPECT_TRUE(bit_equal(slice(g, 0, 0, 1), slice(g, 0, 2, 1)));
}

TEST(Preprocess, BilinearMidpointOracle) {
  const Tensor<float> t({1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  const auto r = resize_bilinear(t, 3, 3);
  EXPECT_FLOAT_EQ(r.at({0, 1, 1}), 1.5f);
  EXPECT_FLOAT_EQ(r.at({0, 0, 1}), 0.5f);
  EXPECT_FLOAT_EQ(r.at({0, 2, 2}), 3.0f);
}

TEST(ImageFolder, ThreePlusTwoDeterministic) {
  const std::string root = testutil::scratch_dir("folder");
  fs::create_directories(root + "/a");
  fs::create_directories(root + "/b");
  for (int i = 0; i < 3; ++i) write_pnm(root + "/a/" + std::to_string(2 - i) + ".ppm", gradient_image(10 + i, 12, 3));
  for (int i = 0; i < 2; ++i) write_pnm(root + "/b/" + std::to_string(i) + ".pgm", gradient_image(9, 9, 1));
  // Heatmap outputs beside an input are not samples.
  write_pnm(root + "/b/0.gradcam.ppm", gradient_image(9, 9, 3));
  const auto d = load_image_folder(root, desk_pre());
  ASSERT_EQ(d.size(), 5u);
  EXPECT_EQ(d.classes, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(d.samples[0].label, 0);
  EXPECT_EQ(d.samples[4].label, 1);
  for (std::size_t i = 1; i < d.size(); ++i) EXPECT_LT(d.samples[i - 1].path, d.samples[i].path);
  for (const auto& s : d.samples) EXPECT_EQ(s.image.shape(), (Shape{3, 32, 32}));
  const auto again = load_image_folder(root, desk_pre());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.samples[i].path, again.samples[i].path);
    EXPECT_TRUE(bit_equal(d.samples[i].image, again.samples[i].image));
  }
  EXPECT_THROW(load_image_folder(root + "/missing", desk_pre()), Error);
}

TEST(ImageFolder, HftSamplesAreAccepted) {
  const std::string root = testutil::scratch_dir("hftfolder");
  fs::create_directories(root + "/x");
  write_hft_file(root + "/x/0.hft", Tensor<float>({3, 16, 16}, 0.25f));
  const auto d = load_image_folder(root, desk_pre());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_FLOAT_EQ(d.samples[0].image.at({1, 5, 5}), -0.5f);
}

TEST(Split, CovidSizesAndGuards) {
  const auto s = split_sizes(746, {0.6, 0.15, 0.25});
  EXPECT_EQ(s[0], 448u);
  EXPECT_EQ(s[1], 112u);
  EXPECT_EQ(s[2], 186u);
  EXPECT_THROW(split_sizes(10, {1.0, 0.0, 0.0}), Error);
  EXPECT_THROW(split_sizes(10, {0.5, 0.5, 0.5}), Error);
}

TEST(Split, SeededStratifiedMembership) {
  Dataset d;
  d.classes = {"a", "b"};
  for (int i = 0; i < 40; ++i) d.samples.push_back({"s" + std::to_string(100 + i), i < 30 ? 0 : 1, Tensor<float>({1}, float(i))});
  const auto a = split_dataset(d, {0.5, 0.25, 0.25}, 7);
  const auto b = split_dataset(d, {0.5, 0.25, 0.25}, 7);
  const auto c = split_dataset(d, {0.5, 0.25, 0.25}, 8);
  std::set<std::string> seen;
  bool differs = false;
  for (int k = 0; k < 3; ++k) {
    ASSERT_EQ(a[k].size(), b[k].size());
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      EXPECT_EQ(a[k].samples[i].path, b[k].samples[i].path);
      seen.insert(a[k].samples[i].path);
      differs = differs || i >= c[k].size() || c[k].samples[i].path != a[k].samples[i].path;
    }
    int minority = 0;
    for (const auto& s : a[k].samples) minority += s.label;
    EXPECT_GT(minority, 0) << "split " << k;
  }
  EXPECT_EQ(a[0].size(), 20u);
  EXPECT_EQ(seen.size(), 40u);
  EXPECT_TRUE(differs);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdenticalAndForwardExact) {
  const std::string dir = testutil::scratch_dir("ckpt");
  RunConfig cfg;
  cfg.model = ModelConfig::desk();
  HiFuseModel<float> model(cfg.model, 5);
  TrainState st = make_train_state(model, cfg.train);
  st.epoch = 3;
  st.best_metric = 0.5;
  const auto ck = capture_checkpoint(model, &st, cfg);
  save_checkpoint(dir + "/a.hfck", ck);
  const auto loaded = load_checkpoint(dir + "/a.hfck");
  save_checkpoint(dir + "/b.hfck", loaded);
  EXPECT_EQ(slurp(dir + "/a.hfck"), slurp(dir + "/b.hfck"));
  EXPECT_FALSE(fs::exists(dir + "/a.hfck.tmp"));

  HiFuseModel<float> other(cfg.model, 99);
  TrainState ost = make_train_state(other, cfg.train);
  restore_checkpoint(loaded, other, &ost);
  EXPECT_EQ(ost.epoch, 3);
  EXPECT_EQ(ost.rng, st.rng);
  RngState rng{5, 0};
  const auto x = randn({2, 3, 32, 32}, rng);
  EXPECT_TRUE(bit_equal(model.forward(x), other.forward(x)));
  EXPECT_EQ(checkpoint_config(loaded).model, cfg.model);
}

TEST(Checkpoint, CorruptAndVersionMismatch) {
  RunConfig cfg;
  cfg.model = ModelConfig::desk();
  HiFuseModel<float> model(cfg.model, 6);
  std::string bytes = encode_checkpoint(capture_checkpoint(model, nullptr, cfg));
  try {
    decode_checkpoint(bytes.substr(0, bytes.size() / 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  bytes[4] = 9;  // version field
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::VersionMismatch);
  }
}

TEST(Checkpoint, TinyIntoSmallListsMissingStageThreeBlocks) {
  RunConfig cfg;
  cfg.model = ModelConfig::tiny();
  HiFuseModel<float> tiny(cfg.model, 0);
  const auto ck = capture_checkpoint(tiny, nullptr, cfg);
  HiFuseModel<float> small(ModelConfig::small(), 0);
  try {
    restore_checkpoint(ck, small);
    FAIL() << "expected a missing-parameter error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingParameter);
    const std::string msg = e.what();
    for (int b = 2; b < 6; ++b) {
      EXPECT_NE(msg.find("local.stage3.block" + std::to_string(b)), std::string::npos) << msg;
      EXPECT_NE(msg.find("global.stage3.block" + std::to_string(b)), std::string::npos) << msg;
    }
  }
  // The reverse direction names the unexpected entries instead.
  const auto big = capture_checkpoint(small, nullptr, RunConfig{ModelConfig::small(), {}});
  try {
    restore_checkpoint(big, tiny);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnexpectedParameter);
  }
}

TEST(Config, EmptyTextGivesTrainingDefaults) {
  const auto c = parse_config_text("");
  EXPECT_EQ(c.train.base_lr, 1e-4);
  EXPECT_EQ(c.train.min_lr, 1e-6);
  EXPECT_EQ(c.train.weight_decay, 0.01);
  EXPECT_EQ(c.train.beta1, 0.9);
  EXPECT_EQ(c.train.beta2, 0.999);
  EXPECT_EQ(c.train.batch_size, 32);
  EXPECT_EQ(c.train.epochs, 100);
  EXPECT_EQ(c.train.warmup_epochs, 1);
  EXPECT_EQ(c.train.schedule, "cosine");
  EXPECT_EQ(c.model.drop_path_rate, 0.0);
  EXPECT_EQ(c.model.image_size, 224);
  EXPECT_EQ(c.model, ModelConfig::tiny());
}

TEST(Config, DepthsAndVariantLines) {
  EXPECT_EQ(parse_config_text("depths = 2,2,6,2\n").model.depths, (std::array<int, 4>{2, 2, 6, 2}));
  EXPECT_EQ(parse_config_text("variant = small").model.depths, (std::array<int, 4>{2, 2, 6, 2}));
  const auto d = parse_config_text("# desk run\nvariant = desk  # reduced\nepochs = 3\n");
  EXPECT_EQ(d.model, ModelConfig::desk());
  EXPECT_EQ(d.train.epochs, 3);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      parse_config_text(text);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("epochs = 3\nbatch_size = zero\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("learning_rat = 1e-4").find("line 1"), std::string::npos);
  EXPECT_NE(message("depths = 2,2,2").find("line 1"), std::string::npos);
  EXPECT_NE(message("no equals sign").find("line 1"), std::string::npos);
}

TEST(Config, CanonicalTextRoundTrips) {
  RunConfig c = parse_config_text("variant = desk\nseed = 17\nsplit = 0.5,0.25,0.25\nselect_best = true\n");
  const std::string text = to_config_text(c);
  const RunConfig back = parse_config_text(text);
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.train, c.train);
  EXPECT_EQ(to_config_text(back), text);
  for (const auto& k : config_keys()) EXPECT_NE(text.find(k.name + " = "), std::string::npos) << k.name;
}
