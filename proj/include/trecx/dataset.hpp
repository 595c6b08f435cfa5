#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trecx/rng.hpp"
#include "trecx/tensor.hpp"

namespace trecx {

// Labelled NHWC samples plus the per-channel normalization applied to them.
struct Dataset {
  Tensor<float> samples;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split = "train";
  std::vector<double> channel_mean, channel_std;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> sample_dims() const {
    std::vector<std::size_t> d(samples.shape().dims().begin() + 1, samples.shape().dims().end());
    return d;
  }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset '" + split + "' is empty");
    if (samples.rank() != 4 || samples.dim(0) != labels.size())
      throw std::invalid_argument("dataset '" + split + "': sample count " +
                                  std::to_string(samples.rank() ? samples.dim(0) : 0) + " != label count " +
                                  std::to_string(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
        throw std::invalid_argument("dataset '" + split + "': label " + std::to_string(labels[i]) + " at index " +
                                    std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
  }
};

// Copies the samples at `index` (in that order) into one batch.
inline Tensor<float> gather_samples(const Dataset& d, std::span<const std::size_t> index) {
  const std::size_t per = d.samples.size() / d.size();
  auto dims = d.samples.shape().dims();
  dims[0] = index.size();
  Tensor<float> out{Shape(dims)};
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= d.size()) throw std::out_of_range("gather_samples: index " + std::to_string(index[i]));
    std::copy_n(d.samples.data() + index[i] * per, per, out.data() + i * per);
  }
  return out;
}

inline std::vector<int> gather_labels(const Dataset& d, std::span<const std::size_t> index) {
  std::vector<int> out;
  out.reserve(index.size());
  for (auto i : index) out.push_back(d.labels.at(i));
  return out;
}

// Contiguous range [first, first + count) as a new dataset.
inline Dataset take(const Dataset& d, std::size_t first, std::size_t count, std::string split) {
  if (first + count > d.size()) throw std::out_of_range("take: range exceeds dataset size");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  Dataset out;
  out.samples = gather_samples(d, idx);
  out.labels = gather_labels(d, idx);
  out.num_classes = d.num_classes;
  out.split = std::move(split);
  out.channel_mean = d.channel_mean;
  out.channel_std = d.channel_std;
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

class DataError : public std::runtime_error {
 public:
  DataError(const std::string& file, std::uint64_t offset, const std::string& what)
      : std::runtime_error(file + ": byte " + std::to_string(offset) + ": " + what), file_(file), offset_(offset) {}
  const std::string& file() const { return file_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::string file_;
  std::uint64_t offset_;
};

namespace cifar {

inline constexpr std::size_t kSide = 32, kChannels = 3, kPixels = kSide * kSide * kChannels;
inline constexpr std::size_t kRecord = 1 + kPixels;
inline constexpr int kClasses = 10;
inline const std::array<const char*, 5> kTrainFiles{"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                                    "data_batch_4.bin", "data_batch_5.bin"};
inline constexpr const char* kTestFile = "test_batch.bin";

// Raw records as stored on disk: label byte then channel-planar R, G, B planes.
struct RawBatch {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // kPixels bytes per record, file layout
  std::size_t size() const { return labels.size(); }
};

inline RawBatch decode(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() % kRecord != 0) {
    const std::uint64_t last = bytes.size() - bytes.size() % kRecord;
    throw DataError(origin, last,
                    "truncated record (" + std::to_string(bytes.size() % kRecord) + " of " +
                        std::to_string(kRecord) + " bytes)");
  }
  RawBatch b;
  const std::size_t n = bytes.size() / kRecord;
  b.labels.resize(n);
  b.pixels.resize(n * kPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = bytes[i * kRecord];
    if (label >= kClasses)
      throw DataError(origin, i * kRecord, "label " + std::to_string(label) + " exceeds 9");
    b.labels[i] = label;
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(i * kRecord + 1), kPixels,
                b.pixels.begin() + static_cast<std::ptrdiff_t>(i * kPixels));
  }
  return b;
}

inline std::vector<std::uint8_t> encode(const RawBatch& b) {
  std::vector<std::uint8_t> out(b.size() * kRecord);
  for (std::size_t i = 0; i < b.size(); ++i) {
    out[i * kRecord] = b.labels[i];
    std::copy_n(b.pixels.begin() + static_cast<std::ptrdiff_t>(i * kPixels), kPixels,
                out.begin() + static_cast<std::ptrdiff_t>(i * kRecord + 1));
  }
  return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string(), 0, "cannot open file");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline RawBatch read_batch(const std::filesystem::path& path) { return decode(read_bytes(path), path.string()); }

inline void append(RawBatch& into, const RawBatch& more) {
  into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
  into.pixels.insert(into.pixels.end(), more.pixels.begin(), more.pixels.end());
}

// Scales bytes to [0, 1] and converts planar records to NHWC, without standardization.
inline Dataset to_unit_range(const RawBatch& b, std::string split) {
  Dataset d;
  d.samples = Tensor<float>(Shape{b.size(), kSide, kSide, kChannels});
  d.labels.assign(b.labels.begin(), b.labels.end());
  d.num_classes = kClasses;
  d.split = std::move(split);
  float* dst = d.samples.data();
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::uint8_t* src = b.pixels.data() + i * kPixels;
    for (std::size_t h = 0; h < kSide; ++h)
      for (std::size_t w = 0; w < kSide; ++w)
        for (std::size_t c = 0; c < kChannels; ++c)
          *dst++ = static_cast<float>(src[c * kSide * kSide + h * kSide + w]) / 255.0f;
  }
  return d;
}

}  // namespace cifar

// Per-channel mean and (population) standard deviation, accumulated in double.
inline void channel_statistics(const Tensor<float>& x, std::vector<double>& mean, std::vector<double>& stdev) {
  const std::size_t c = x.dim(x.rank() - 1), rows = x.size() / c;
  mean.assign(c, 0.0);
  stdev.assign(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) mean[k] += x[r * c + k];
  for (auto& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const double d = x[r * c + k] - mean[k];
      stdev[k] += d * d;
    }
  for (auto& s : stdev) s = std::sqrt(s / static_cast<double>(rows));
}

inline void standardize(Dataset& d, const std::vector<double>& mean, const std::vector<double>& stdev) {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const std::size_t k = i % c;
    d.samples[i] = static_cast<float>((d.samples[i] - mean[k]) / stdev[k]);
  }
  d.channel_mean = mean;
  d.channel_std = stdev;
}

struct Cifar10 {
  Dataset train, test;
};

// Loads the five training batches and the test batch from `dir`; both splits are
// standardized with the training statistics.
inline Cifar10 load_cifar10(const std::filesystem::path& dir) {
  cifar::RawBatch train_raw;
  for (const char* f : cifar::kTrainFiles) cifar::append(train_raw, cifar::read_batch(dir / f));
  const auto test_raw = cifar::read_batch(dir / cifar::kTestFile);
  Cifar10 out{cifar::to_unit_range(train_raw, "train"), cifar::to_unit_range(test_raw, "test")};
  std::vector<double> mean, stdev;
  channel_statistics(out.train.samples, mean, stdev);
  standardize(out.train, mean, stdev);
  standardize(out.test, mean, stdev);
  return out;
}

inline bool cifar10_available(const std::filesystem::path& dir) {
  for (const char* f : cifar::kTrainFiles)
    if (!std::filesystem::is_regular_file(dir / f)) return false;
  return std::filesystem::is_regular_file(dir / cifar::kTestFile);
}

// ---------------------------------------------------------------------------
// Synthetic class-conditional Gaussian data

struct SynthOptions {
  double separation = 1.0;  // scale of the class means
  double noise = 1.0;       // per-pixel standard deviation
  std::uint64_t draw = 0;   // independent sample sets from the same class means
};

// Each class k has a fixed mean image mu_k (a per-channel offset plus a smooth
// spatial wave); samples are mu_k + noise * N(0, 1). Labels cycle through the
// classes, so counts differ by at most one, and are then shuffled. The class means
// depend only on `seed`; `opts.draw` selects an independent sample set (e.g. a test split).
inline Dataset synth_dataset(const std::vector<std::size_t>& shape, std::size_t classes, std::size_t n,
                             std::uint64_t seed, SynthOptions opts = {}) {
  if (shape.size() != 3) throw std::invalid_argument("synth_dataset: shape must be [height, width, channels]");
  if (classes < 2) throw std::invalid_argument("synth_dataset: need at least two classes");
  if (n == 0) throw std::invalid_argument("synth_dataset: n must be positive");
  const std::size_t H = shape[0], W = shape[1], C = shape[2], per = H * W * C;

  SplitMix64 means_rng(stream_seed(seed, "synth/means"));
  std::vector<float> mu(classes * per);
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<double> offset(C);
    for (auto& o : offset) o = means_rng.normal();
    const double fy = 1.0 + 2.0 * means_rng.uniform(), fx = 1.0 + 2.0 * means_rng.uniform();
    const double phase = 2.0 * std::numbers::pi * means_rng.uniform();
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t c = 0; c < C; ++c) {
          const double wave = std::sin(fy * std::numbers::pi * static_cast<double>(h) / static_cast<double>(H) +
                                       fx * std::numbers::pi * static_cast<double>(w) / static_cast<double>(W) +
                                       phase + static_cast<double>(c));
          mu[k * per + (h * W + w) * C + c] = static_cast<float>(opts.separation * (offset[c] + wave));
        }
  }

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  const auto order = permutation(n, stream_seed(seed, "synth/order/" + std::to_string(opts.draw)));

  Dataset d;
  d.samples = Tensor<float>(Shape{n, H, W, C});
  d.labels.resize(n);
  d.num_classes = classes;
  d.split = "synthetic";
  SplitMix64 noise_rng(stream_seed(seed, "synth/noise/" + std::to_string(opts.draw)));
  for (std::size_t i = 0; i < n; ++i) {
    const int k = labels[order[i]];
    d.labels[i] = k;
    for (std::size_t j = 0; j < per; ++j)
      d.samples[i * per + j] =
          mu[static_cast<std::size_t>(k) * per + j] + static_cast<float>(opts.noise * noise_rng.normal());
  }
  return d;
}

}  // namespace trecx
