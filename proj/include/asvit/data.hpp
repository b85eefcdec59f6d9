#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cctype>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "asvit/tensor.hpp"

namespace asvit {

struct DataError : Error {
  using Error::Error;
};

/// Pixels are stored normalised: stored = (intensity - 0.5) / 0.5 with intensity in [0, 1].
inline float normalize_intensity(double v) { return static_cast<float>((v - 0.5) / 0.5); }
inline double denormalize_intensity(float v) { return std::clamp(0.5 + 0.5 * static_cast<double>(v), 0.0, 1.0); }

/// Labelled images [count, C, S, S].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t side() const { return images.dim(2); }

  Tensor<float> batch(std::span<const std::size_t> idx) const {
    const std::size_t stride = channels() * side() * side();
    Tensor<float> out({idx.size(), channels(), side(), side()});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(images.data() + idx[i] * stride, stride, out.data() + i * stride);
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  /// Single image [C, S, S].
  Tensor<float> image(std::size_t i) const {
    const std::size_t idx[1] = {i};
    return batch(idx).reshaped({channels(), side(), side()});
  }
};

// ---------------------------------------------------------------------------
// Synthetic colour blobs

/// Knobs of the synthetic generator. The class is the hue of one soft disc drawn over noise;
/// disc size varies per image so the number of informative patches varies too.
struct BlobSpec {
  double noise = 0.18;         // std of per-pixel background noise (intensity units)
  double min_radius = 2.5;     // pixels
  double max_radius = 7.0;
  double color_jitter = 0.06;  // per-channel std around the class colour
  std::size_t distractors = 2; // grey discs that carry no label information
};

namespace data_detail {

// Hues evenly spaced on the colour wheel, converted to RGB at full saturation.
inline std::array<double, 3> class_color(int label, int classes) {
  const double h = 6.0 * static_cast<double>(label) / classes;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (auto& c : rgb) c = 0.15 + 0.7 * c;
  return rgb;
}

inline void draw_disc(std::vector<double>& img, std::size_t S, double cx, double cy, double r,
                      const std::array<double, 3>& color) {
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      const double a = std::clamp(r + 0.5 - d, 0.0, 1.0);  // one-pixel antialiased edge
      if (a <= 0) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        double& p = img[(c * S + y) * S + x];
        p = (1 - a) * p + a * color[c];
      }
    }
}

}  // namespace data_detail

/// Deterministic synthetic split: same (count, seed, spec) always yields the same pixels.
inline Dataset synthetic_blobs(std::size_t count, std::uint64_t seed, std::size_t image_size = 32, int classes = 10,
                               const BlobSpec& spec = {}) {
  if (classes < 2) throw DataError("synthetic_blobs: need at least two classes");
  const std::size_t S = image_size;
  Dataset ds{Tensor<float>({count, 3, S, S}), std::vector<int>(count)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> img(3 * S * S);
  for (std::size_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(n % static_cast<std::size_t>(classes));
    const double base = 0.35 + 0.3 * uni(rng);
    for (auto& p : img) p = base;
    for (std::size_t d = 0; d < spec.distractors; ++d) {
      const double g = 0.2 + 0.6 * uni(rng);
      const double r = spec.min_radius + (spec.max_radius - spec.min_radius) * uni(rng);
      data_detail::draw_disc(img, S, uni(rng) * S, uni(rng) * S, r, {g, g, g});
    }
    auto color = data_detail::class_color(label, classes);
    for (auto& c : color) c = std::clamp(c + spec.color_jitter * gauss(rng), 0.0, 1.0);
    const double r = spec.min_radius + (spec.max_radius - spec.min_radius) * uni(rng);
    const double cx = r + (S - 2 * r) * uni(rng), cy = r + (S - 2 * r) * uni(rng);
    data_detail::draw_disc(img, S, cx, cy, r, color);
    float* dst = ds.images.data() + n * 3 * S * S;
    for (std::size_t i = 0; i < img.size(); ++i)
      dst[i] = normalize_intensity(std::clamp(img[i] + spec.noise * gauss(rng), 0.0, 1.0));
    ds.labels[n] = label;
  }
  // Labels cycle through the classes so every split is balanced; shuffle so batches are not periodic.
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return Dataset{ds.batch(perm), ds.batch_labels(perm)};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 1 label byte + 3072 bytes (R, G, B planes of 32x32).

inline Dataset load_cifar10_files(const std::vector<std::filesystem::path>& files, std::size_t limit) {
  constexpr std::size_t kSide = 32, kPix = 3 * kSide * kSide, kRecord = kPix + 1;
  std::vector<unsigned char> raw;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cannot open CIFAR-10 file " + f.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() % kRecord != 0) throw DataError("truncated CIFAR-10 file " + f.string());
    raw.insert(raw.end(), buf.begin(), buf.end());
    if (raw.size() / kRecord >= limit) break;
  }
  const std::size_t count = std::min(limit, raw.size() / kRecord);
  if (count == 0) throw DataError("no CIFAR-10 records found");
  Dataset ds{Tensor<float>({count, 3, kSide, kSide}), std::vector<int>(count)};
  for (std::size_t n = 0; n < count; ++n) {
    const unsigned char* rec = raw.data() + n * kRecord;
    if (rec[0] > 9) throw DataError("CIFAR-10 label out of range");
    ds.labels[n] = rec[0];
    for (std::size_t i = 0; i < kPix; ++i) ds.images[n * kPix + i] = normalize_intensity(rec[1 + i] / 255.0);
  }
  return ds;
}

enum class Split { Train, Eval };

/// Resolves a dataset name: "synthetic" or "cifar10:<directory with the *.bin batches>".
/// Synthetic splits draw from independent streams of `seed`.
inline Dataset load_dataset(const std::string& name, Split split, std::size_t count, std::uint64_t seed,
                            std::size_t image_size = 32, int classes = 10) {
  if (name == "synthetic")
    return synthetic_blobs(count, seed * 2 + (split == Split::Train ? 0 : 1), image_size, classes);
  const std::string prefix = "cifar10:";
  if (name.rfind(prefix, 0) == 0) {
    if (image_size != 32 || classes != 10) throw DataError("cifar10 needs image_size 32 and 10 classes");
    const std::filesystem::path dir = name.substr(prefix.size());
    std::vector<std::filesystem::path> files;
    if (split == Split::Train)
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      files.push_back(dir / "test_batch.bin");
    return load_cifar10_files(files, count);
  }
  throw DataError("unknown dataset '" + name + "' (expected synthetic or cifar10:<dir>)");
}

// ---------------------------------------------------------------------------
// Netpbm images

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255 into [3, H, W]; grey images are replicated.
inline Tensor<float> read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t.push_back(ch);
        break;
      }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t.push_back(ch);
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw DataError(path.string() + ": only binary PGM/PPM is supported");
  const std::size_t w = std::stoul(token()), h = std::stoul(token());
  if (std::stoul(token()) != 255) throw DataError(path.string() + ": maxval must be 255");
  const std::size_t ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> px(w * h * ch);
  if (!in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
    throw DataError(path.string() + ": truncated pixel data");
  Tensor<float> out({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i)
      out[c * h * w + i] = normalize_intensity(px[i * ch + (ch == 3 ? c : 0)] / 255.0);
  return out;
}

/// Writes a normalised [3, H, W] image as binary PPM.
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out.put(static_cast<char>(std::lround(255.0 * denormalize_intensity(image[c * h * w + i]))));
}

}  // namespace asvit
