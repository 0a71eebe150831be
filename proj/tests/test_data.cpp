#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "doctest.h"
#include "zonas/data.hpp"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"

using namespace zonas;
namespace fs = std::filesystem;

namespace {

// Centroids from half the images, accuracy on the other half (images are
// ordered class-by-class within each repetition).
double nearest_centroid_accuracy(const Dataset& ds) {
  const std::size_t n = ds.image_elements();
  std::vector<std::vector<double>> centroid(ds.classes, std::vector<double>(n, 0.0));
  std::vector<std::size_t> count(ds.classes, 0);
  auto held_out = [&](std::size_t i) { return (i / ds.classes) % 2 == 1; };
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (held_out(i)) continue;
    const auto k = static_cast<std::size_t>(ds.labels[i]);
    for (std::size_t j = 0; j < n; ++j) centroid[k][j] += ds.pixels[i * n + j];
    ++count[k];
  }
  for (std::size_t k = 0; k < ds.classes; ++k)
    for (auto& v : centroid[k]) v /= static_cast<double>(count[k]);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!held_out(i)) continue;
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < ds.classes; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j) d += std::pow(ds.pixels[i * n + j] - centroid[k][j], 2);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == static_cast<std::size_t>(ds.labels[i]);
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::string temp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string random_cifar_bytes(std::size_t records, std::uint64_t seed) {
  Rng rng(seed);
  std::string b(records * kCifarRecordBytes, '\0');
  for (std::size_t r = 0; r < records; ++r) {
    b[r * kCifarRecordBytes] = static_cast<char>(rng.below(10));
    for (std::size_t k = 1; k < kCifarRecordBytes; ++k) b[r * kCifarRecordBytes + k] = static_cast<char>(rng.below(256));
  }
  return b;
}

}  // namespace

TEST_CASE("trivial synthetic data is constant per class") {
  const auto ds = synth_generate(2, 5, 4, 3, Difficulty::kTrivial, 1);
  CHECK(ds.size() == 10);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const float expect = ds.labels[i] == 0 ? -1.0f : 1.0f;
    for (std::size_t j = 0; j < ds.image_elements(); ++j) CHECK(ds.pixels[i * 48 + j] == expect);
  }
}

TEST_CASE("synthetic data is deterministic") {
  const auto a = synth_generate(4, 10, 6, 3, Difficulty::kEasy, 7);
  const auto b = synth_generate(4, 10, 6, 3, Difficulty::kEasy, 7);
  const auto c = synth_generate(4, 10, 6, 3, Difficulty::kEasy, 8);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  CHECK(a.pixels != c.pixels);
  CHECK_NOTHROW(a.validate());
  CHECK_THROWS_AS(synth_generate(2, 2, 3, 1, Difficulty::kEasy, 0), ConfigError);
}

TEST_CASE("easy synthetic data is nearest-centroid separable") {
  const auto ds = synth_generate(10, 600, 8, 3, Difficulty::kEasy, 11);
  CHECK(ds.size() == 6000);
  const double acc = nearest_centroid_accuracy(ds);
  MESSAGE("nearest-centroid accuracy: " << acc);
  CHECK(acc >= 0.70);
}

TEST_CASE("planted data carries its label in channel agreement") {
  PlantedSpec spec;
  spec.count = 400;
  spec.seed = 3;
  spec.nuisance = 0.0;
  const auto ds = planted_generate(spec);
  CHECK(ds.channels == 4);
  // Pixelwise agreement between channels 0 and 1 separates the classes.
  const std::size_t plane = 64;
  double agree[2] = {0, 0};
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t p = 0; p < plane; ++p)
      agree[ds.labels[i]] += (ds.pixels[i * 256 + p] > 0) == (ds.pixels[i * 256 + plane + p] > 0);
  CHECK(agree[1] > agree[0]);
  // The first channel of a pair alone is label-independent: a +-1 field.
  for (std::size_t p = 0; p < plane; ++p) CHECK(std::abs(ds.pixels[p]) == 1.0f);
}

TEST_CASE("planted nuisance is a smooth zero-mean field") {
  PlantedSpec spec;
  spec.count = 64;
  spec.seed = 3;
  spec.nuisance = 0.0;
  const auto clean = planted_generate(spec);
  spec.nuisance = 0.5;
  const auto noisy = planted_generate(spec);
  CHECK(clean.labels == noisy.labels);
  // Differences are planar ramps: zero-mean, with d(h,w) = d(h,0) + d(0,w) - d(0,0).
  for (std::size_t i = 0; i < noisy.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      auto d = [&](std::size_t h, std::size_t w) {
        const std::size_t at = i * 256 + c * 64 + h * 8 + w;
        return static_cast<double>(noisy.pixels[at]) - static_cast<double>(clean.pixels[at]);
      };
      double sum = 0.0;
      for (std::size_t h = 0; h < 8; ++h)
        for (std::size_t w = 0; w < 8; ++w) {
          CHECK(d(h, w) == doctest::Approx(d(h, 0) + d(0, w) - d(0, 0)).epsilon(1e-5));
          sum += d(h, w);
        }
      CHECK(std::abs(sum / 64.0) < 1e-5);
    }
}

TEST_CASE("CIFAR-10 file parsing and round-trip") {
  const auto path = temp_path("zonas_cifar_small.bin");
  const std::string bytes = random_cifar_bytes(20, 4);
  write_bytes(path, bytes);
  const auto ds = read_cifar10_file(path, {}, 20);
  CHECK(ds.size() == 20);
  CHECK(ds.labels[0] == static_cast<unsigned char>(bytes[0]));
  CHECK(ds.labels[0] >= 0);
  CHECK(ds.labels[0] <= 9);
  CHECK_NOTHROW(ds.validate());

  const auto back = temp_path("zonas_cifar_small_back.bin");
  write_cifar10_file(back, ds);
  CHECK(read_bytes(back) == bytes);

  write_bytes(path, bytes.substr(0, bytes.size() - 100));
  CHECK_THROWS_WITH_AS(read_cifar10_file(path, {}, 20), doctest::Contains("expected 61460 bytes"), FormatError);
  std::string bad = bytes;
  bad[0] = static_cast<char>(12);
  write_bytes(path, bad);
  CHECK_THROWS_AS(read_cifar10_file(path, {}, 20), FormatError);
  fs::remove(path);
  fs::remove(back);
}

TEST_CASE("CIFAR-10 file arithmetic") {
  CHECK(kCifarRecordBytes * kCifarRecordsPerFile == 30730000);
}

TEST_CASE("split is disjoint and exhaustive") {
  Dataset ds;
  ds.channels = ds.height = ds.width = 1;
  ds.classes = 2;
  ds.labels.assign(50000, 0);
  ds.pixels.assign(50000, 0.0f);
  const auto s = split_and_batch(ds, {.weight_fraction = 0.5, .seed = 3, .batch_size = 64});
  CHECK(s.weight.indices().size() == 25000);
  CHECK(s.alpha.indices().size() == 25000);
  std::set<std::size_t> w(s.weight.indices().begin(), s.weight.indices().end());
  for (std::size_t i : s.alpha.indices()) CHECK_FALSE(w.count(i));

  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    Dataset small = ds;
    small.labels.resize(10 + rng.below(300));
    small.pixels.resize(small.labels.size());
    const double frac = rng.uniform(0.1, 0.9);
    const auto sp = split_and_batch(small, {.weight_fraction = frac, .seed = rng.next_u64(), .batch_size = 1});
    std::vector<int> seen(small.size(), 0);
    for (std::size_t i : sp.weight.indices()) ++seen[i];
    for (std::size_t i : sp.alpha.indices()) ++seen[i];
    CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
  }
}

TEST_CASE("epoch order is deterministic per (seed, epoch)") {
  BatchStream s({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 4, 77);
  CHECK(s.batches_per_epoch() == 3);
  CHECK(s.epoch(0) == s.epoch(0));
  CHECK(s.epoch(0) != s.epoch(1));
  CHECK(s.epoch(1) == BatchStream({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 4, 77).epoch(1));
  CHECK(s.epoch(0).back().size() == 2);
  CHECK_THROWS_AS(BatchStream({0, 1}, 3, 0), ConfigError);
}

TEST_CASE("horizontal flip mirrors columns") {
  const auto ds = synth_generate(2, 1, 4, 1, Difficulty::kEasy, 5);
  const std::size_t idx[] = {0};
  const Tensor plain = ds.images(idx);
  const Tensor flipped = ds.images(idx, {true});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 4; ++w) CHECK(flipped.at(0, 0, h, w) == plain.at(0, 0, h, 3 - w));
}

TEST_CASE("dataset cache round-trip") {
  const auto path = temp_path("zonas_ds.bin");
  const auto ds = synth_generate(3, 4, 5, 2, Difficulty::kHard, 9);
  save_dataset(path, ds);
  const auto back = load_dataset(path);
  CHECK(back.pixels == ds.pixels);
  CHECK(back.labels == ds.labels);
  CHECK(back.classes == 3);
  fs::remove(path);
}
