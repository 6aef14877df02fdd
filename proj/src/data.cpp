#include "fambav/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "fambav/errors.hpp"

namespace fambav {

namespace {
constexpr std::size_t kSide = 32;
constexpr std::size_t kPixels = 3 * kSide * kSide;
}  // namespace

Dataset parse_cifar100_binary(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
    throw FormatError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + "; trailing partial record at byte offset " +
                      std::to_string(offset));
  }
  Dataset out;
  out.reserve(bytes.size() / kCifarRecordBytes);
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
    const std::size_t coarse = bytes[off], fine = bytes[off + 1];
    if (coarse >= kCifarCoarseClasses) {
      throw FormatError(origin + ": coarse label " + std::to_string(coarse) + " at byte offset " +
                        std::to_string(off) + " is >= " + std::to_string(kCifarCoarseClasses));
    }
    if (fine >= kCifarFineClasses) {
      throw FormatError(origin + ": fine label " + std::to_string(fine) + " at byte offset " +
                        std::to_string(off + 1) + " is >= " + std::to_string(kCifarFineClasses));
    }
    LabeledImage img;
    img.fine_label = fine;
    img.coarse_label = coarse;
    img.pixels.resize(kPixels);
    for (std::size_t i = 0; i < kPixels; ++i) img.pixels[i] = static_cast<float>(bytes[off + 2 + i]) / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

Dataset load_cifar100_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_cifar100_binary(bytes, path);
}

std::vector<std::uint8_t> encode_cifar100_binary(const Dataset& images) {
  std::vector<std::uint8_t> out;
  out.reserve(images.size() * kCifarRecordBytes);
  for (const LabeledImage& img : images) {
    if (img.channels != 3 || img.height != kSide || img.width != kSide || img.pixels.size() != kPixels) {
      throw ContractError("encode_cifar100_binary: records hold 3x32x32 images only");
    }
    if (img.fine_label >= kCifarFineClasses || img.coarse_label.value_or(0) >= kCifarCoarseClasses) {
      throw ContractError("encode_cifar100_binary: label out of range");
    }
    out.push_back(static_cast<std::uint8_t>(img.coarse_label.value_or(0)));
    out.push_back(static_cast<std::uint8_t>(img.fine_label));
    for (float p : img.pixels) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
    }
  }
  return out;
}

void write_cifar100_binary(const std::string& path, const Dataset& images) {
  const std::vector<std::uint8_t> bytes = encode_cifar100_binary(images);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LabeledImage augment(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng) {
  if (!(cfg.hflip_p >= 0.0 && cfg.hflip_p <= 1.0)) throw ConfigError("augment: hflip_p must be in [0, 1]");
  const std::size_t H = img.height, W = img.width, pad = cfg.crop_pad;
  if (pad >= H || pad >= W) throw ConfigError("augment: crop_pad must be smaller than the image side");
  LabeledImage out = img;
  const std::size_t oy = pad ? rng.index(2 * pad + 1) : pad;
  const std::size_t ox = pad ? rng.index(2 * pad + 1) : pad;
  const bool flip = cfg.hflip_p > 0.0 && rng.bernoulli(cfg.hflip_p);
  // Padded coordinate p maps back into [0, n) by reflection about the border pixels.
  auto reflect = [](std::ptrdiff_t p, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (p < 0) p = -p;
    if (p >= m) p = 2 * (m - 1) - p;
    return static_cast<std::size_t>(p);
  };
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad), H);
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t dx = flip ? W - 1 - x : x;
        const std::size_t sx = reflect(static_cast<std::ptrdiff_t>(dx + ox) - static_cast<std::ptrdiff_t>(pad), W);
        out.pixels[(c * H + y) * W + x] = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

Dataset synthetic_dataset(std::size_t n, std::size_t n_classes, std::uint64_t seed, double sigma,
                          std::size_t height, std::size_t width) {
  if (n_classes < 2) throw ConfigError("synthetic_dataset: n_classes must be >= 2");
  if (sigma < 0.0) throw ConfigError("synthetic_dataset: sigma must be >= 0");
  // Templates depend only on the class index, so train and test sets drawn with
  // different seeds share them.
  std::vector<std::vector<float>> templates(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    Rng trng(mix_seed(0x7E3A11ull, c));
    auto& t = templates[c];
    t.resize(3 * height * width);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double fy = 1 + static_cast<double>(trng.index(3));
      const double fx = 1 + static_cast<double>(trng.index(3));
      const double phase = trng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = trng.uniform(0.25, 0.4);
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double arg = 2.0 * std::numbers::pi * (fy * double(y) / double(height) + fx * double(x) / double(width));
          t[(ch * height + y) * width + x] = static_cast<float>(0.5 + amp * std::sin(arg + phase));
        }
      }
    }
  }
  Dataset out;
  out.reserve(n);
  Rng rng(mix_seed(seed, 0xDA7A));
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage img;
    img.height = height;
    img.width = width;
    img.fine_label = i % n_classes;
    img.pixels = templates[img.fine_label];
    if (sigma > 0.0) {
      for (float& p : img.pixels) p = static_cast<float>(std::clamp(p + sigma * rng.normal(), 0.0, 1.0));
    }
    out.push_back(std::move(img));
  }
  // Shuffle so class labels do not cycle with position.
  for (std::size_t i = n; i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(mix_seed(seed, epoch, 0x5A0F));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  return perm;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch) {
  if (n == 0) throw ConfigError("batches: dataset is empty");
  if (batch_size == 0) throw ConfigError("batches: batch_size must be >= 1");
  const std::vector<std::size_t> perm = epoch_permutation(n, seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::uint64_t epoch,
                 const AugmentConfig* aug) {
  if (indices.empty()) throw ConfigError("make_batch: no samples");
  const LabeledImage& first = data.at(indices.front());
  const std::size_t C = first.channels, H = first.height, W = first.width, per = C * H * W;
  Batch batch;
  batch.indices = indices;
  batch.images = Tensor<float>::zeros({indices.size(), C, H, W});
  auto dst = batch.images.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const LabeledImage& src = data.at(indices[i]);
    if (src.pixels.size() != per) throw DimensionError("make_batch: images of differing shape");
    batch.labels.push_back(src.fine_label);
    if (aug) {
      Rng rng(mix_seed(aug->seed, epoch, indices[i]));
      const LabeledImage a = augment(src, *aug, rng);
      std::copy(a.pixels.begin(), a.pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
    } else {
      std::copy(src.pixels.begin(), src.pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
  }
  return batch;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           const AugmentConfig* aug) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(data.size(), batch_size, seed, epoch)) out.push_back(make_batch(data, idx, epoch, aug));
  return out;
}

Batch stack(const Dataset& data, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < std::min(end, data.size()); ++i) idx.push_back(i);
  return make_batch(data, idx, 0, nullptr);
}

}  // namespace fambav
