#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/tensor.hpp"

namespace zonas {

/// Labeled images. Pixels are stored as float to keep a full CIFAR-10 train
/// set in memory; batches are materialized as double tensors.
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<float> pixels;  // (count, C, H, W) row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elements() const { return channels * height * width; }
  /// (idx.size(), C, H, W). `flip[i]` mirrors image i horizontally.
  Tensor images(std::span<const std::size_t> idx, const std::vector<bool>& flip = {}) const;
  std::vector<int> labels_of(std::span<const std::size_t> idx) const;
  Tensor all_images() const;
  /// Throws InvariantError on labels outside [0, classes) or non-finite pixels.
  void validate() const;
};

enum class Difficulty { kTrivial, kEasy, kHard };
Difficulty parse_difficulty(const std::string& s);

/// Class-conditional Gaussian blobs plus seeded pixel noise. `trivial` gives
/// constant-intensity images evenly spaced in [-1, 1] by class.
Dataset synth_generate(std::size_t classes, std::size_t per_class, std::size_t size, std::size_t channels,
                       Difficulty difficulty, std::uint64_t seed);

/// Two-class task whose label lives only in the pixelwise agreement of
/// channel pairs: channel 2k is a random +-1 field r, channel 2k+1 is r plus
/// Gaussian noise, with each pixel's sign flipped with probability `flip` in
/// class 0. Each channel also carries a smooth zero-mean per-image field
/// (random ramps, scale `nuisance`). Pooling is a low-pass filter: it shrinks the
/// pixelwise signal but keeps the smooth field, so on a chain space the
/// identity op is the only lossless choice per edge.
struct PlantedSpec {
  std::size_t count = 2048;
  std::size_t size = 8;
  std::size_t pairs = 2;
  double noise = 0.6;
  double flip = 0.5;
  double nuisance = 0.3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PlantedSpec from_json(const nlohmann::json& j);
};
Dataset planted_generate(const PlantedSpec& spec);

/// Per-channel mean/std applied to pixels scaled to [0, 1].
struct Normalization {
  std::vector<double> mean = {0.4914, 0.4822, 0.4465};
  std::vector<double> std = {0.2470, 0.2435, 0.2616};
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// One CIFAR-10 binary file: records of 1 label byte + 3072 channel-major
/// pixel bytes. Throws FormatError with expected/actual sizes on bad length.
Dataset read_cifar10_file(const std::string& path, const Normalization& norm = {},
                          std::size_t expected_records = kCifarRecordsPerFile);
/// Inverse of read_cifar10_file.
void write_cifar10_file(const std::string& path, const Dataset& ds, const Normalization& norm = {});

struct CifarSplit {
  Dataset train;
  Dataset test;
};
/// data_batch_1..5.bin and test_batch.bin from `dir`. The test file is
/// optional; train must be complete.
CifarSplit load_cifar10(const std::string& dir, const Normalization& norm = {});

/// Seeded shuffle over a fixed index set, re-drawn per epoch from (seed, epoch).
class BatchStream {
 public:
  BatchStream() = default;
  BatchStream(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_per_epoch() const;
  /// Batches of the epoch in order; the last one may be short.
  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const;

 private:
  std::vector<std::size_t> indices_;
  std::size_t batch_size_ = 1;
  std::uint64_t seed_ = 0;
};

struct SplitSpec {
  double weight_fraction = 0.5;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
};

struct SplitStreams {
  BatchStream weight;
  BatchStream alpha;
};

/// Disjoint, exhaustive split into a weight stream and an alpha stream.
SplitStreams split_and_batch(const Dataset& ds, const SplitSpec& spec);

/// Cache a dataset in the tensor container format.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace zonas
