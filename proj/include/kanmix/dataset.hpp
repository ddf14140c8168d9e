#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kanmix/errors.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

/// Per-channel normalization applied after scaling bytes to [0, 1].
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> std;
};

inline const ChannelStats& mnist_stats() {
  static const ChannelStats s{{0.1307f}, {0.3081f}};
  return s;
}
inline const ChannelStats& cifar10_stats() {
  static const ChannelStats s{{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  return s;
}
inline const ChannelStats& cifar100_stats() {
  static const ChannelStats s{{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}};
  return s;
}

/// Labeled images, normalized, [N, C, H, W].
struct Dataset {
  std::string name;
  std::string split;
  Tensor<float> images;
  std::vector<std::int32_t> labels;
  std::size_t n_classes = 0;
  ChannelStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t sample_size() const { return channels() * height() * width(); }
};

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline float normalize_byte(std::uint8_t v, float mean, float sd) {
  return (static_cast<float>(v) / 255.0f - mean) / sd;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifar10Record = 1 + kCifarPixels;
inline constexpr std::size_t kCifar100Record = 2 + kCifarPixels;

/// Parses an IDX image file and its IDX label file.
inline Dataset load_mnist(const std::filesystem::path& image_path,
                          const std::filesystem::path& label_path) {
  const auto img = detail::read_bytes(image_path);
  const auto lbl = detail::read_bytes(label_path);
  if (img.size() < 16) throw TruncatedFile(image_path.string() + ": shorter than IDX header");
  if (lbl.size() < 8) throw TruncatedFile(label_path.string() + ": shorter than IDX header");
  if (detail::read_be32(img, 0) != kIdxImageMagic) {
    throw BadMagic(image_path.string() + ": not an IDX image file");
  }
  if (detail::read_be32(lbl, 0) != kIdxLabelMagic) {
    throw BadMagic(label_path.string() + ": not an IDX label file");
  }
  const std::size_t count = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t label_count = detail::read_be32(lbl, 4);
  if (count != label_count) {
    throw CountMismatch("image count " + std::to_string(count) + " != label count " +
                        std::to_string(label_count));
  }
  if (count == 0 || rows == 0 || cols == 0) throw TruncatedFile(image_path.string() + ": empty");
  if (img.size() < 16 + count * rows * cols) throw TruncatedFile(image_path.string());
  if (lbl.size() < 8 + count) throw TruncatedFile(label_path.string());

  Dataset ds;
  ds.name = "mnist";
  ds.n_classes = 10;
  ds.stats = mnist_stats();
  ds.images = Tensor<float>(Shape{count, 1, rows, cols});
  const float mean = ds.stats.mean[0], sd = ds.stats.std[0];
  for (std::size_t i = 0; i < count * rows * cols; ++i) {
    ds.images[i] = detail::normalize_byte(img[16 + i], mean, sd);
  }
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t l = lbl[8 + i];
    if (l >= ds.n_classes) {
      throw LabelOutOfRange("label " + std::to_string(l) + " at index " + std::to_string(i) +
                            " is not a digit");
    }
    ds.labels[i] = l;
  }
  return ds;
}

namespace detail {

inline Dataset load_cifar(std::span<const std::filesystem::path> paths, bool hundred,
                          bool fine_labels) {
  const std::size_t record = hundred ? kCifar100Record : kCifar10Record;
  const std::size_t label_bytes = record - kCifarPixels;
  std::vector<std::uint8_t> all;
  for (const auto& p : paths) {
    auto bytes = read_bytes(p);
    if (bytes.empty() || bytes.size() % record != 0) {
      throw TruncatedFile(p.string() + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of the " + std::to_string(record) + "-byte record");
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  if (all.empty()) throw TruncatedFile("no CIFAR records");
  const std::size_t count = all.size() / record;

  Dataset ds;
  ds.name = hundred ? "cifar100" : "cifar10";
  ds.n_classes = hundred ? (fine_labels ? 100 : 20) : 10;
  ds.stats = hundred ? cifar100_stats() : cifar10_stats();
  ds.images = Tensor<float>(Shape{count, 3, 32, 32});
  ds.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* rec = all.data() + r * record;
    const std::uint8_t label = hundred ? rec[fine_labels ? 1 : 0] : rec[0];
    if (label >= ds.n_classes) {
      throw LabelOutOfRange("label " + std::to_string(label) + " in record " + std::to_string(r));
    }
    ds.labels[r] = label;
    float* dst = ds.images.data().data() + r * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const std::size_t c = p / 1024;
      dst[p] = normalize_byte(rec[label_bytes + p], ds.stats.mean[c], ds.stats.std[c]);
    }
  }
  return ds;
}

}  // namespace detail

/// CIFAR-10 binary batches: 1 label byte + 3072 channel-planar pixels per record.
inline Dataset load_cifar10(std::span<const std::filesystem::path> batch_files) {
  return detail::load_cifar(batch_files, false, false);
}

/// CIFAR-100 binary file: coarse label, fine label, 3072 pixels per record.
inline Dataset load_cifar100(const std::filesystem::path& file, bool use_fine_labels = true) {
  const std::filesystem::path paths[] = {file};
  return detail::load_cifar(paths, true, use_fine_labels);
}

/// Inverts normalization back to the stored bytes.
inline std::vector<std::uint8_t> raw_pixels(const Dataset& ds) {
  std::vector<std::uint8_t> out(ds.images.numel());
  const std::size_t plane = ds.height() * ds.width();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / plane) % ds.channels();
    const float v = (ds.images[i] * ds.stats.std[c] + ds.stats.mean[c]) * 255.0f;
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f)));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_idx_images(std::span<const std::uint8_t> pixels,
                                                   std::uint32_t count, std::uint32_t rows,
                                                   std::uint32_t cols) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, count);
  detail::write_be32(out, rows);
  detail::write_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// Re-encodes a loaded MNIST-style dataset as (image file, label file) bytes.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_mnist(
    const Dataset& ds) {
  const auto px = raw_pixels(ds);
  std::vector<std::uint8_t> labels(ds.labels.begin(), ds.labels.end());
  return {encode_idx_images(px, static_cast<std::uint32_t>(ds.size()),
                            static_cast<std::uint32_t>(ds.height()),
                            static_cast<std::uint32_t>(ds.width())),
          encode_idx_labels(labels)};
}

/// Re-encodes a CIFAR dataset as one binary batch file. For CIFAR-100 the
/// coarse label byte is written as `coarse_fill` since only one label is kept.
inline std::vector<std::uint8_t> encode_cifar(const Dataset& ds, bool hundred,
                                              std::uint8_t coarse_fill = 0) {
  const auto px = raw_pixels(ds);
  std::vector<std::uint8_t> out;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    if (hundred) out.push_back(coarse_fill);
    out.push_back(static_cast<std::uint8_t>(ds.labels[r]));
    out.insert(out.end(), px.begin() + static_cast<std::ptrdiff_t>(r * kCifarPixels),
               px.begin() + static_cast<std::ptrdiff_t>((r + 1) * kCifarPixels));
  }
  return out;
}

/// First `n` samples (or all when n >= size).
inline Dataset head(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset out = ds;
  Shape shape = ds.images.shape();
  shape[0] = n;
  out.images = Tensor<float>(shape, std::vector<float>(ds.images.storage().begin(),
                                                       ds.images.storage().begin() +
                                                           static_cast<std::ptrdiff_t>(n * ds.sample_size())));
  out.labels.resize(n);
  return out;
}

/// Sample order for one epoch. With `shuffle` the permutation depends only on
/// (seed, epoch); the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, std::uint64_t epoch,
                                                           bool shuffle) {
  if (batch_size == 0) throw InvalidDim("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <typename Real>
struct Batch {
  Tensor<Real> images;
  std::vector<std::int32_t> labels;
};

template <typename Real>
Batch<Real> make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t ss = ds.sample_size();
  Batch<Real> b{Tensor<Real>(Shape{indices.size(), ds.channels(), ds.height(), ds.width()}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const float* src = ds.images.data().data() + indices[r] * ss;
    Real* dst = b.images.data().data() + r * ss;
    for (std::size_t i = 0; i < ss; ++i) dst[i] = static_cast<Real>(src[i]);
    b.labels.push_back(ds.labels[indices[r]]);
  }
  return b;
}

/// Materializes every batch of one epoch.
template <typename Real>
std::vector<Batch<Real>> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                 bool shuffle, std::uint64_t epoch = 0) {
  std::vector<Batch<Real>> out;
  for (const auto& idx : batch_indices(ds.size(), batch_size, seed, epoch, shuffle)) {
    out.push_back(make_batch<Real>(ds, idx));
  }
  return out;
}

/// Mean and (population) standard deviation per channel of the pixels scaled
/// to [0, 1], recovered from the normalized images.
inline ChannelStats raw_channel_stats(const Dataset& ds) {
  const std::size_t c = ds.channels(), plane = ds.height() * ds.width();
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t i = 0; i < ds.images.numel(); ++i) {
    const std::size_t ch = (i / plane) % c;
    const double v = double(ds.images[i]) * ds.stats.std[ch] + ds.stats.mean[ch];
    sum[ch] += v;
    sq[ch] += v * v;
  }
  ChannelStats out;
  const double n = double(ds.size() * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double m = sum[ch] / n;
    out.mean.push_back(static_cast<float>(m));
    out.std.push_back(static_cast<float>(std::sqrt(std::max(0.0, sq[ch] / n - m * m))));
  }
  return out;
}

/// Resolves the conventional file layout under a data directory:
///   mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
///   cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
///   cifar-100-binary/{train,test}.bin
inline Dataset load_named(const std::string& name, const std::filesystem::path& data_dir,
                          bool train) {
  namespace fs = std::filesystem;
  Dataset ds;
  if (name == "mnist") {
    const std::string prefix = train ? "train" : "t10k";
    fs::path dir = data_dir / "mnist";
    if (!fs::exists(dir / (prefix + "-images-idx3-ubyte"))) dir = data_dir;
    ds = load_mnist(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
  } else if (name == "cifar10") {
    const fs::path dir = data_dir / "cifar-10-batches-bin";
    std::vector<fs::path> files;
    if (train) {
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(dir / "test_batch.bin");
    }
    ds = load_cifar10(files);
  } else if (name == "cifar100") {
    ds = load_cifar100(data_dir / "cifar-100-binary" / (train ? "train.bin" : "test.bin"));
  } else {
    throw ConfigError("unknown dataset '" + name + "'");
  }
  ds.split = train ? "train" : "test";
  return ds;
}

}  // namespace kanmix
