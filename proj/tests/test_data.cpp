#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <zlib.h>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "modenorm/data.hpp"
#include "modenorm/rng.hpp"
#include "modenorm/tensor.hpp"

using namespace modenorm;

namespace {

void push_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

std::vector<unsigned char> image_fixture() {
  std::vector<unsigned char> bytes = {0, 0, 8, 3};
  push_u32_be(bytes, 2);
  push_u32_be(bytes, 3);
  push_u32_be(bytes, 3);
  for (int i = 0; i < 18; ++i) bytes.push_back(static_cast<unsigned char>(i * 15));  // 0..255
  return bytes;
}

std::vector<unsigned char> label_fixture() {
  std::vector<unsigned char> bytes = {0, 0, 8, 1};
  push_u32_be(bytes, 2);
  bytes.push_back(7);
  bytes.push_back(2);
  return bytes;
}

std::vector<unsigned char> gzip_bytes(const std::vector<unsigned char>& raw) {
  z_stream zs{};
  REQUIRE(deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                       Z_DEFAULT_STRATEGY) == Z_OK);
  std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(raw.size())));
  zs.next_in = const_cast<unsigned char*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  REQUIRE(deflate(&zs, Z_FINISH) == Z_STREAM_END);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  REQUIRE(f.good());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("idx image payloads parse to exact scaled tensors") {
  const Tensor t = idx_parse(image_fixture());
  REQUIRE(t.shape() == Shape{2, 1, 3, 3});
  for (std::size_t i = 0; i < 18; ++i)
    CHECK(t[i] == static_cast<double>(i * 15) / 255.0);
  CHECK(t[0] == 0.0);
  CHECK(t[17] == 1.0);  // byte 255 maps exactly to 1
}

TEST_CASE("idx label payloads parse to a flat vector") {
  const Tensor t = idx_parse(label_fixture());
  REQUIRE(t.shape() == Shape{2});
  CHECK(t[0] == 7.0);
  CHECK(t[1] == 2.0);
}

TEST_CASE("idx rejects malformed headers and payloads") {
  auto broken_magic = image_fixture();
  broken_magic[0] = 0xAB;
  CHECK_THROWS_AS(idx_parse(broken_magic), std::runtime_error);

  auto wrong_type = image_fixture();
  wrong_type[2] = 0x07;
  CHECK_THROWS_WITH_AS(idx_parse(wrong_type),
                       doctest::Contains("unsupported type byte"), std::runtime_error);

  auto truncated = image_fixture();
  truncated.pop_back();
  CHECK_THROWS_WITH_AS(idx_parse(truncated), doctest::Contains("truncated payload"),
                       std::runtime_error);

  auto trailing = image_fixture();
  trailing.push_back(0);
  CHECK_THROWS_WITH_AS(idx_parse(trailing), doctest::Contains("trailing bytes"),
                       std::runtime_error);

  CHECK_THROWS_AS(idx_parse({0, 0, 8}), std::runtime_error);  // shorter than any header
  CHECK_THROWS_AS(idx_parse({}), std::runtime_error);
}

TEST_CASE("gzip streams are inflated before parsing") {
  const auto plain = image_fixture();
  const auto gz = gzip_bytes(plain);
  REQUIRE(gz.size() >= 2);
  REQUIRE(gz[0] == 0x1F);
  REQUIRE(gz[1] == 0x8B);
  const Tensor a = idx_parse(plain);
  const Tensor b = idx_parse(gz);
  CHECK(a == b);

  auto corrupt = gz;
  corrupt.resize(corrupt.size() / 2);
  CHECK_THROWS_AS(idx_parse(corrupt), std::runtime_error);
}

TEST_CASE("idx_load_split assembles a dataset from a directory") {
  const std::string dir = "idx_fixture_dir";
  for (const char* stale :
       {"/train-images-idx3-ubyte", "/train-labels-idx1-ubyte.gz", "/t10k-images-idx3-ubyte",
        "/t10k-labels-idx1-ubyte"})
    std::remove((dir + stale).c_str());
  std::filesystem::create_directories(dir);
  write_file(dir + "/train-images-idx3-ubyte", image_fixture());
  write_file(dir + "/train-labels-idx1-ubyte.gz", gzip_bytes(label_fixture()));

  const Dataset ds = idx_load_split(dir, "train");
  REQUIRE(ds.features.shape() == Shape{2, 1, 3, 3});
  REQUIRE(ds.labels.size() == 2);
  CHECK(ds.labels[0] == 7);
  CHECK(ds.labels[1] == 2);
  CHECK(ds.classes == 8);  // max label + 1
  CHECK(ds.mode_labels.empty());

  CHECK_THROWS_WITH_AS(idx_load_split(dir, "t10k"), doctest::Contains("missing"),
                       std::runtime_error);

  // Swapped files are caught by rank, not by luck.
  write_file(dir + "/t10k-images-idx3-ubyte", label_fixture());
  write_file(dir + "/t10k-labels-idx1-ubyte", image_fixture());
  CHECK_THROWS_WITH_AS(idx_load_split(dir, "t10k"), doctest::Contains("swapped"),
                       std::runtime_error);
}

TEST_CASE("synthetic generation is seed-deterministic") {
  SynthConfig cfg;
  cfg.train_samples = 64;
  cfg.test_samples = 32;
  auto [train_a, test_a] = synth_generate(cfg);
  auto [train_b, test_b] = synth_generate(cfg);
  CHECK(train_a.features == train_b.features);
  CHECK(train_a.labels == train_b.labels);
  CHECK(train_a.mode_labels == train_b.mode_labels);
  CHECK(test_a.features == test_b.features);
  CHECK(test_a.labels == test_b.labels);

  cfg.seed = 1;
  auto [train_c, test_c] = synth_generate(cfg);
  CHECK_FALSE(train_a.features == train_c.features);
}

TEST_CASE("synthetic labels partition by mode with disjoint label blocks") {
  SynthConfig cfg;
  cfg.train_samples = 500;
  cfg.test_samples = 100;
  auto [train, test] = synth_generate(cfg);
  CHECK(train.classes == cfg.modes * cfg.classes);
  REQUIRE(train.mode_labels.size() == train.labels.size());
  for (std::size_t i = 0; i < train.labels.size(); ++i) {
    CHECK(train.labels[i] >= 0);
    CHECK(train.labels[i] < static_cast<int>(train.classes));
    // Label blocks are contiguous per mode: label / classes recovers the mode.
    CHECK(train.labels[i] / static_cast<int>(cfg.classes) == train.mode_labels[i]);
  }
  REQUIRE(train.features.shape() == Shape{500, cfg.channels, cfg.height, cfg.width});
  REQUIRE(test.features.shape() == Shape{100, cfg.channels, cfg.height, cfg.width});
}

TEST_CASE("mixture weights control mode proportions") {
  SynthConfig cfg;
  cfg.train_samples = 4000;
  cfg.test_samples = 10;
  cfg.mixture = {1.0, 3.0};
  auto [train, test] = synth_generate(cfg);
  double frac1 = 0.0;
  for (int m : train.mode_labels) frac1 += (m == 1) ? 1.0 : 0.0;
  frac1 /= static_cast<double>(train.mode_labels.size());
  const double se = std::sqrt(0.75 * 0.25 / 4000.0);
  CHECK(std::abs(frac1 - 0.75) < 3.0 * se);
}

TEST_CASE("mode offsets separate the modes and cancel in the population mean") {
  SynthConfig cfg;
  cfg.train_samples = 6000;
  cfg.test_samples = 10;
  auto [train, test] = synth_generate(cfg);
  const std::size_t chw = cfg.channels * cfg.height * cfg.width;

  // Per-mode means along the flattened feature vector.
  std::vector<double> mean0(chw, 0.0), mean1(chw, 0.0), pop(chw, 0.0);
  double n0 = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < train.mode_labels.size(); ++i) {
    for (std::size_t e = 0; e < chw; ++e) {
      const double v = train.features[i * chw + e];
      pop[e] += v;
      if (train.mode_labels[i] == 0) mean0[e] += v;
      else mean1[e] += v;
    }
    (train.mode_labels[i] == 0 ? n0 : n1) += 1.0;
  }
  double dist = 0.0, pop_norm = 0.0;
  for (std::size_t e = 0; e < chw; ++e) {
    mean0[e] /= n0;
    mean1[e] /= n1;
    pop[e] /= (n0 + n1);
    dist += (mean0[e] - mean1[e]) * (mean0[e] - mean1[e]);
    pop_norm = std::max(pop_norm, std::abs(pop[e]));
  }
  // Centering moves each mode mean by separation/sqrt(spatial) in its own
  // channel block; the pairwise distance stays separation * sqrt(2).
  CHECK(std::sqrt(dist) == doctest::Approx(cfg.separation * std::sqrt(2.0)).epsilon(0.1));
  // Offsets cancel in the population mean. What remains is the average of the
  // random class templates, std template_scale/sqrt(modes*classes) per
  // coordinate; without centering the offset alone would contribute
  // separation/(modes*sqrt(spatial)) = 1.5 here.
  CHECK(pop_norm < 0.5);
}

TEST_CASE("scale ratio widens the per-class noise floor of later modes") {
  SynthConfig cfg;
  cfg.train_samples = 8000;
  cfg.test_samples = 10;
  auto [train, test] = synth_generate(cfg);
  const std::size_t chw = cfg.channels * cfg.height * cfg.width;

  // Pool the within-class deviations per mode; their std is scale_m * noise.
  std::vector<std::vector<double>> sums(train.classes, std::vector<double>(chw, 0.0));
  std::vector<double> counts(train.classes, 0.0);
  for (std::size_t i = 0; i < train.labels.size(); ++i) {
    counts[train.labels[i]] += 1.0;
    for (std::size_t e = 0; e < chw; ++e)
      sums[train.labels[i]][e] += train.features[i * chw + e];
  }
  double ss0 = 0.0, ss1 = 0.0, k0 = 0.0, k1 = 0.0;
  for (std::size_t i = 0; i < train.labels.size(); ++i) {
    const int y = train.labels[i];
    for (std::size_t e = 0; e < chw; ++e) {
      const double d = train.features[i * chw + e] - sums[y][e] / counts[y];
      if (train.mode_labels[i] == 0) {
        ss0 += d * d;
        k0 += 1.0;
      } else {
        ss1 += d * d;
        k1 += 1.0;
      }
    }
  }
  const double std0 = std::sqrt(ss0 / k0), std1 = std::sqrt(ss1 / k1);
  CHECK(std0 == doctest::Approx(cfg.noise).epsilon(0.05));
  CHECK(std1 / std0 == doctest::Approx(cfg.scale_ratio).epsilon(0.05));
}

TEST_CASE("degenerate synthetic settings still generate") {
  SynthConfig cfg;
  cfg.modes = 1;
  cfg.classes = 2;
  cfg.train_samples = 20;
  cfg.test_samples = 10;
  cfg.separation = 0.0;
  auto [train, test] = synth_generate(cfg);
  CHECK(train.classes == 2);
  for (int m : train.mode_labels) CHECK(m == 0);

  SynthConfig bad;
  bad.modes = 0;
  CHECK_THROWS_AS(synth_generate(bad), std::invalid_argument);
  SynthConfig wide;
  wide.modes = 5;
  wide.channels = 4;  // fewer channels than modes has no offset directions
  CHECK_THROWS_AS(synth_generate(wide), std::invalid_argument);
  SynthConfig neg;
  neg.noise = -1.0;
  CHECK_THROWS_AS(synth_generate(neg), std::invalid_argument);
  SynthConfig mix;
  mix.mixture = {1.0};
  CHECK_THROWS_AS(synth_generate(mix), std::invalid_argument);
}

TEST_CASE("batching covers the dataset in permuted order") {
  SynthConfig cfg;
  cfg.train_samples = 10;
  cfg.test_samples = 10;
  auto [ds, unused] = synth_generate(cfg);

  Rng rng(5);
  const std::vector<Batch> batches = make_batches(ds, 4, rng, true);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].indices.size() == 4);
  CHECK(batches[1].indices.size() == 4);
  CHECK(batches[2].indices.size() == 2);  // short tail batch is kept

  std::vector<bool> seen(10, false);
  for (const Batch& b : batches) {
    REQUIRE(b.features.dim(0) == b.indices.size());
    REQUIRE(b.labels.size() == b.indices.size());
    for (std::size_t r = 0; r < b.indices.size(); ++r) {
      const std::size_t src = b.indices[r];
      CHECK_FALSE(seen[src]);
      seen[src] = true;
      CHECK(b.labels[r] == ds.labels[src]);
      const std::size_t chw = ds.features.size() / ds.features.dim(0);
      for (std::size_t e = 0; e < chw; ++e)
        CHECK(b.features[r * chw + e] == ds.features[src * chw + e]);
    }
  }
  for (bool s : seen) CHECK(s);

  // Without shuffling the order is the identity.
  Rng rng2(5);
  const std::vector<Batch> plain = make_batches(ds, 4, rng2, false);
  std::size_t next = 0;
  for (const Batch& b : plain)
    for (std::size_t src : b.indices) CHECK(src == next++);

  // Same seed, same permutation.
  Rng ra(9), rb(9);
  const auto x1 = make_batches(ds, 4, ra, true);
  const auto x2 = make_batches(ds, 4, rb, true);
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(x1[i].indices == x2[i].indices);

  // Oversized batches degrade to one full batch.
  Rng rc(1);
  const auto big = make_batches(ds, 64, rc, false);
  REQUIRE(big.size() == 1);
  CHECK(big[0].indices.size() == 10);

  Rng rd(1);
  CHECK_THROWS_AS(make_batches(ds, 0, rd, false), std::invalid_argument);
}
