// Exercises the shared library strictly through the C header.
#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hifuse/hifuse.h"

namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  hifuse_string_free(s);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hifuse_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kDesk = "variant = desk\nnum_classes = 7\nseed = 11\n";

}  // namespace

TEST(CApi, StatusNamesAndVersion) {
  EXPECT_STREQ(hifuse_status_name(HIFUSE_OK), "ok");
  EXPECT_NE(std::string(hifuse_status_name(HIFUSE_ERR_MISSING_PARAMETER)), "");
  EXPECT_NE(std::string(hifuse_version()), "");
}

TEST(CApi, ConfigResolveReportsLineAndKey) {
  char* out = nullptr;
  EXPECT_EQ(hifuse_config_resolve("variant = desk\nwindow = x\n", &out), HIFUSE_ERR_INVALID_ARGUMENT);
  const std::string err = hifuse_last_error();
  EXPECT_NE(err.find("line 2"), std::string::npos) << err;
  EXPECT_NE(err.find("window"), std::string::npos) << err;
  EXPECT_EQ(hifuse_config_resolve("no_such_key = 1\n", &out), HIFUSE_ERR_INVALID_ARGUMENT);

  ASSERT_EQ(hifuse_config_resolve("variant = small\n", &out), HIFUSE_OK);
  const std::string text = take(out);
  EXPECT_NE(text.find("depths = 2,2,6,2"), std::string::npos) << text;
}

TEST(CApi, NullArgumentsAreRejected) {
  EXPECT_EQ(hifuse_model_create(kDesk, nullptr), HIFUSE_ERR_INVALID_ARGUMENT);
  EXPECT_EQ(hifuse_model_forward(nullptr, nullptr, 1, nullptr), HIFUSE_ERR_INVALID_ARGUMENT);
  hifuse_model_free(nullptr);
}

TEST(CApi, InspectTinyCensus) {
  int64_t params = 0;
  uint64_t macs = 0;
  char* report = nullptr;
  ASSERT_EQ(hifuse_inspect("variant = tiny\n", &report, &params, &macs), HIFUSE_OK);
  EXPECT_EQ(params, 50746753);
  EXPECT_EQ(macs, 7722582890ull);
  EXPECT_NE(take(report).find("local.stage3"), std::string::npos);
}

TEST(CApi, CreateForwardSaveLoadRoundTrip) {
  hifuse_model* m = nullptr;
  ASSERT_EQ(hifuse_model_create(kDesk, &m), HIFUSE_OK) << hifuse_last_error();
  const int n = hifuse_model_num_classes(m), s = hifuse_model_image_size(m), c = hifuse_model_in_channels(m);
  EXPECT_EQ(n, 7);
  EXPECT_GT(hifuse_model_num_params(m), 0);
  std::vector<float> x(static_cast<std::size_t>(2 * c * s * s));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>((i * 37) % 101) / 50.0f - 1.0f;
  std::vector<float> a(static_cast<std::size_t>(2 * n)), b(a.size());
  ASSERT_EQ(hifuse_model_forward(m, x.data(), 2, a.data()), HIFUSE_OK);

  const fs::path dir = scratch("roundtrip");
  const std::string ckpt = (dir / "m.ckpt").string();
  ASSERT_EQ(hifuse_model_save(m, ckpt.c_str()), HIFUSE_OK);
  hifuse_model* r = nullptr;
  ASSERT_EQ(hifuse_model_load(ckpt.c_str(), &r), HIFUSE_OK) << hifuse_last_error();
  ASSERT_EQ(hifuse_model_forward(r, x.data(), 2, b.data()), HIFUSE_OK);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);

  char *ca = nullptr, *cb = nullptr;
  ASSERT_EQ(hifuse_model_config(m, &ca), HIFUSE_OK);
  ASSERT_EQ(hifuse_model_config(r, &cb), HIFUSE_OK);
  EXPECT_EQ(take(ca), take(cb));
  hifuse_model_free(m);
  hifuse_model_free(r);

  hifuse_model* bad = nullptr;
  EXPECT_EQ(hifuse_model_load((dir / "absent.ckpt").string().c_str(), &bad), HIFUSE_ERR_IO);
  EXPECT_EQ(bad, nullptr);
}

TEST(CApi, GradCamArgmaxAndExplicitClass) {
  hifuse_model* m = nullptr;
  ASSERT_EQ(hifuse_model_create(kDesk, &m), HIFUSE_OK);
  const fs::path dir = scratch("cam");
  const std::string img = (dir / "probe.ppm").string();
  {
    std::ofstream f(img, std::ios::binary);
    f << "P6\n32 32\n255\n";
    for (int i = 0; i < 32 * 32 * 3; ++i) f.put(static_cast<char>((i * 29) % 256));
  }
  int used = -1;
  char *pgm = nullptr, *ppm = nullptr;
  ASSERT_EQ(hifuse_gradcam(m, img.c_str(), -1, nullptr, &used, &pgm, &ppm), HIFUSE_OK) << hifuse_last_error();
  EXPECT_GE(used, 0);
  EXPECT_LT(used, 7);
  EXPECT_EQ(take(pgm), (dir / "probe.gradcam.pgm").string());
  EXPECT_TRUE(fs::exists(take(ppm)));

  ASSERT_EQ(hifuse_gradcam(m, img.c_str(), 3, "G2", &used, nullptr, nullptr), HIFUSE_OK);
  EXPECT_EQ(used, 3);
  EXPECT_EQ(hifuse_gradcam(m, img.c_str(), 7, nullptr, nullptr, nullptr, nullptr), HIFUSE_ERR_INVALID_ARGUMENT);
  EXPECT_EQ(hifuse_gradcam(m, img.c_str(), 0, "Q1", nullptr, nullptr, nullptr), HIFUSE_ERR_INVALID_ARGUMENT);
  hifuse_model_free(m);
}

TEST(CApi, SelfcheckSubsetReportsLines) {
  int failures = -1;
  double seconds = -1;
  std::vector<std::string> lines;
  auto log = [](const char* line, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(line); };
  ASSERT_EQ(hifuse_selfcheck("schedule,metrics", log, &lines, &failures, &seconds), HIFUSE_OK);
  EXPECT_EQ(failures, 0);
  EXPECT_GE(seconds, 0.0);
  EXPECT_FALSE(lines.empty());
  EXPECT_EQ(hifuse_selfcheck("bogus", nullptr, nullptr, &failures, &seconds), HIFUSE_ERR_INVALID_ARGUMENT);
}
