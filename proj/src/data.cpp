#include "zonas/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "zonas/container.hpp"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

Tensor Dataset::images(std::span<const std::size_t> idx, const std::vector<bool>& flip) const {
  Tensor out({idx.size(), channels, height, width});
  const std::size_t n = image_elements();
  auto dst = out.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size()) throw ContractError("dataset index " + std::to_string(idx[i]) + " out of range");
    const float* src = pixels.data() + idx[i] * n;
    double* d = dst.data() + i * n;
    if (flip.empty() || !flip[i]) {
      std::copy(src, src + n, d);
      continue;
    }
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t h = 0; h < height; ++h)
        for (std::size_t w = 0; w < width; ++w)
          d[(c * height + h) * width + w] = src[(c * height + h) * width + (width - 1 - w)];
  }
  return out;
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels.at(i));
  return out;
}

Tensor Dataset::all_images() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  return images(idx);
}

void Dataset::validate() const {
  if (pixels.size() != size() * image_elements())
    throw InvariantError("dataset holds " + std::to_string(pixels.size()) + " pixel values for " +
                         std::to_string(size()) + " images");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw InvariantError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                           " outside [0, " + std::to_string(classes) + ")");
  if (!std::all_of(pixels.begin(), pixels.end(), [](float v) { return std::isfinite(v); }))
    throw InvariantError("dataset contains non-finite pixels");
}

Difficulty parse_difficulty(const std::string& s) {
  if (s == "trivial") return Difficulty::kTrivial;
  if (s == "easy") return Difficulty::kEasy;
  if (s == "hard") return Difficulty::kHard;
  throw ConfigError("unknown difficulty '" + s + "' (expected trivial, easy or hard)");
}

Dataset synth_generate(std::size_t classes, std::size_t per_class, std::size_t size, std::size_t channels,
                       Difficulty difficulty, std::uint64_t seed) {
  if (size < 4) throw ConfigError("synthetic images need size >= 4");
  if (classes < 2) throw ConfigError("synthetic data needs at least two classes");
  Dataset ds;
  ds.channels = channels;
  ds.height = ds.width = size;
  ds.classes = classes;
  const std::size_t n = ds.image_elements();

  // Class prototypes: one Gaussian blob per channel with a random centre and
  // signed amplitude.
  std::vector<std::vector<double>> proto(classes, std::vector<double>(n));
  Rng proto_rng(derive_seed(seed, "prototypes"));
  const double width = static_cast<double>(size) / 4.0;
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t c = 0; c < channels; ++c) {
      const double ch = proto_rng.uniform(0.0, static_cast<double>(size - 1));
      const double cw = proto_rng.uniform(0.0, static_cast<double>(size - 1));
      const double amp = proto_rng.bernoulli(0.5) ? 1.5 : -1.5;
      for (std::size_t h = 0; h < size; ++h)
        for (std::size_t w = 0; w < size; ++w) {
          const double d2 = std::pow(static_cast<double>(h) - ch, 2) + std::pow(static_cast<double>(w) - cw, 2);
          proto[k][(c * size + h) * size + w] = amp * std::exp(-d2 / (2.0 * width * width));
        }
    }

  const double noise = difficulty == Difficulty::kEasy ? 1.5 : 2.5;
  Rng rng(derive_seed(seed, "images"));
  ds.pixels.reserve(classes * per_class * n);
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t k = 0; k < classes; ++k) {
      ds.labels.push_back(static_cast<int>(k));
      if (difficulty == Difficulty::kTrivial) {
        const double level = -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(classes - 1);
        ds.pixels.insert(ds.pixels.end(), n, static_cast<float>(level));
        continue;
      }
      // Hard images are also shifted by up to one pixel.
      const long dh = difficulty == Difficulty::kHard ? static_cast<long>(rng.below(3)) - 1 : 0;
      const long dw = difficulty == Difficulty::kHard ? static_cast<long>(rng.below(3)) - 1 : 0;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t h = 0; h < size; ++h)
          for (std::size_t w = 0; w < size; ++w) {
            const long sh = std::clamp(static_cast<long>(h) + dh, 0L, static_cast<long>(size) - 1);
            const long sw = std::clamp(static_cast<long>(w) + dw, 0L, static_cast<long>(size) - 1);
            const double base = proto[k][(c * size + static_cast<std::size_t>(sh)) * size + static_cast<std::size_t>(sw)];
            ds.pixels.push_back(static_cast<float>(base + noise * rng.normal()));
          }
    }
  return ds;
}

json PlantedSpec::to_json() const {
  return {{"count", count}, {"size", size}, {"pairs", pairs}, {"noise", noise}, {"flip", flip},
          {"nuisance", nuisance}, {"seed", seed}};
}

PlantedSpec PlantedSpec::from_json(const json& j) {
  PlantedSpec s;
  try {
    s.count = j.value("count", s.count);
    s.size = j.value("size", s.size);
    s.pairs = j.value("pairs", s.pairs);
    s.noise = j.value("noise", s.noise);
    s.flip = j.value("flip", s.flip);
    s.nuisance = j.value("nuisance", s.nuisance);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("planted data spec: ") + e.what());
  }
  if (s.pairs == 0 || s.size < 4 || s.count < 2) throw ConfigError("planted data needs pairs >= 1, size >= 4, count >= 2");
  if (s.flip <= 0.0 || s.flip > 1.0) throw ConfigError("planted flip probability must be in (0, 1]");
  if (s.nuisance < 0.0 || s.noise < 0.0) throw ConfigError("planted noise and nuisance must be >= 0");
  return s;
}

Dataset planted_generate(const PlantedSpec& spec) {
  Dataset ds;
  ds.channels = 2 * spec.pairs;
  ds.height = ds.width = spec.size;
  ds.classes = 2;
  const std::size_t plane = spec.size * spec.size;
  Rng rng(derive_seed(spec.seed, "planted"));
  ds.pixels.reserve(spec.count * ds.image_elements());
  // Smooth zero-mean per-image field: random ramps along both axes.
  auto smooth = [&](std::vector<double>& f) {
    const double gh = rng.normal(), gw = rng.normal();
    const double span = static_cast<double>(spec.size - 1);
    for (std::size_t h = 0; h < spec.size; ++h)
      for (std::size_t w = 0; w < spec.size; ++w)
        f[h * spec.size + w] =
            spec.nuisance * (gh * (2.0 * static_cast<double>(h) / span - 1.0) +
                             gw * (2.0 * static_cast<double>(w) / span - 1.0));
  };
  std::vector<double> r(plane), field(plane);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int label = static_cast<int>(i % 2);
    ds.labels.push_back(label);
    for (std::size_t p = 0; p < spec.pairs; ++p) {
      for (auto& v : r) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
      smooth(field);
      for (std::size_t k = 0; k < plane; ++k) ds.pixels.push_back(static_cast<float>(r[k] + field[k]));
      smooth(field);
      for (std::size_t k = 0; k < plane; ++k) {
        const double s = label == 0 && rng.bernoulli(spec.flip) ? -r[k] : r[k];
        ds.pixels.push_back(static_cast<float>(s + spec.noise * rng.normal() + field[k]));
      }
    }
  }
  return ds;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void check_norm(const Normalization& norm, std::size_t channels) {
  if (norm.mean.size() != channels || norm.std.size() != channels)
    throw ConfigError("normalization needs " + std::to_string(channels) + " mean/std values");
  for (double s : norm.std)
    if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
}

}  // namespace

Dataset read_cifar10_file(const std::string& path, const Normalization& norm, std::size_t expected_records) {
  check_norm(norm, 3);
  const std::string bytes = read_file(path);
  const std::size_t expected = expected_records * kCifarRecordBytes;
  if (bytes.size() != expected)
    throw FormatError(path + ": expected " + std::to_string(expected) + " bytes (" + std::to_string(expected_records) +
                      " records), got " + std::to_string(bytes.size()));
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = 32;
  ds.classes = 10;
  ds.labels.resize(expected_records);
  ds.pixels.resize(expected_records * 3072);
  for (std::size_t r = 0; r < expected_records; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError(path + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    ds.labels[r] = rec[0];
    for (std::size_t k = 0; k < 3072; ++k) {
      const std::size_t c = k / 1024;
      ds.pixels[r * 3072 + k] = static_cast<float>((rec[1 + k] / 255.0 - norm.mean[c]) / norm.std[c]);
    }
  }
  return ds;
}

void write_cifar10_file(const std::string& path, const Dataset& ds, const Normalization& norm) {
  check_norm(norm, 3);
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32)
    throw ContractError("CIFAR-10 records are 3x32x32 images");
  std::string out(ds.size() * kCifarRecordBytes, '\0');
  for (std::size_t r = 0; r < ds.size(); ++r) {
    auto* rec = reinterpret_cast<unsigned char*>(out.data()) + r * kCifarRecordBytes;
    rec[0] = static_cast<unsigned char>(ds.labels[r]);
    for (std::size_t k = 0; k < 3072; ++k) {
      const std::size_t c = k / 1024;
      const double v = (ds.pixels[r * 3072 + k] * norm.std[c] + norm.mean[c]) * 255.0;
      rec[1 + k] = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

CifarSplit load_cifar10(const std::string& dir, const Normalization& norm) {
  CifarSplit split;
  split.train.channels = 3;
  split.train.height = split.train.width = 32;
  split.train.classes = 10;
  for (int i = 1; i <= 5; ++i) {
    const auto part = read_cifar10_file((std::filesystem::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(), norm);
    split.train.labels.insert(split.train.labels.end(), part.labels.begin(), part.labels.end());
    split.train.pixels.insert(split.train.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  const auto test = std::filesystem::path(dir) / "test_batch.bin";
  if (std::filesystem::exists(test)) split.test = read_cifar10_file(test.string(), norm);
  return split;
}

BatchStream::BatchStream(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : indices_(std::move(indices)), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
  if (batch_size_ > indices_.size())
    throw ConfigError("batch size " + std::to_string(batch_size_) + " exceeds split size " +
                      std::to_string(indices_.size()));
}

std::size_t BatchStream::batches_per_epoch() const { return (indices_.size() + batch_size_ - 1) / batch_size_; }

std::vector<std::vector<std::size_t>> BatchStream::epoch(std::size_t e) const {
  std::vector<std::size_t> order = indices_;
  Rng rng(derive_seed(seed_, e));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size_)
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + batch_size_)));
  return out;
}

SplitStreams split_and_batch(const Dataset& ds, const SplitSpec& spec) {
  if (!(spec.weight_fraction > 0.0 && spec.weight_fraction < 1.0))
    throw ConfigError("weight_fraction must be in (0, 1)");
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  Rng rng(derive_seed(spec.seed, "split"));
  rng.shuffle(all);
  const auto n_weight = static_cast<std::size_t>(std::llround(spec.weight_fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> w(all.begin(), all.begin() + static_cast<long>(n_weight));
  std::vector<std::size_t> a(all.begin() + static_cast<long>(n_weight), all.end());
  std::sort(w.begin(), w.end());
  std::sort(a.begin(), a.end());
  return {BatchStream(std::move(w), spec.batch_size, derive_seed(spec.seed, "weight")),
          BatchStream(std::move(a), spec.batch_size, derive_seed(spec.seed, "alpha"))};
}

void save_dataset(const std::string& path, const Dataset& ds) {
  Tensor labels({ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = ds.labels[i];
  write_container(path, {{"images", ds.all_images()},
                         {"labels", labels},
                         {"classes", Tensor::scalar(static_cast<double>(ds.classes))}});
}

Dataset load_dataset(const std::string& path) {
  const auto entries = read_container(path);
  if (entries.size() != 3 || entries[0].name != "images" || entries[1].name != "labels" || entries[2].name != "classes")
    throw FormatError(path + ": not a dataset container");
  const Tensor& img = entries[0].value;
  if (img.rank() != 4 || entries[1].value.numel() != img.dim(0))
    throw FormatError(path + ": inconsistent image/label counts");
  Dataset ds;
  ds.channels = img.dim(1);
  ds.height = img.dim(2);
  ds.width = img.dim(3);
  ds.classes = static_cast<std::size_t>(entries[2].value.item());
  ds.pixels.assign(img.data().begin(), img.data().end());
  for (double v : entries[1].value.data()) ds.labels.push_back(static_cast<int>(v));
  ds.validate();
  return ds;
}

}  // namespace zonas
