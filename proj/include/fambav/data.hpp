#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fambav/rng.hpp"
#include "fambav/tensor.hpp"

namespace fambav {

struct LabeledImage {
  std::size_t channels = 3, height = 32, width = 32;
  std::vector<float> pixels;  // channel-major [C, H, W], values in [0, 1]
  std::size_t fine_label = 0;
  std::optional<std::size_t> coarse_label;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

using Dataset = std::vector<LabeledImage>;

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarFineClasses = 100;
inline constexpr std::size_t kCifarCoarseClasses = 20;

/// Records of 1 coarse byte, 1 fine byte, 3072 pixel bytes (R, G, B planes of 32x32).
Dataset load_cifar100_binary(const std::string& path);
Dataset parse_cifar100_binary(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
/// Inverse of the loader; pixels are quantized as round(255 p).
std::vector<std::uint8_t> encode_cifar100_binary(const Dataset& images);
void write_cifar100_binary(const std::string& path, const Dataset& images);

struct AugmentConfig {
  std::size_t crop_pad = 4;
  double hflip_p = 0.5;
  std::uint64_t seed = 0;
};

/// Reflect-pad, random crop back to H x W, then a horizontal flip with probability hflip_p.
LabeledImage augment(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng);

/// Class c = a fixed low-frequency template plus N(0, sigma^2) noise, clipped to [0, 1].
Dataset synthetic_dataset(std::size_t n, std::size_t n_classes, std::uint64_t seed, double sigma = 0.1,
                          std::size_t height = 32, std::size_t width = 32);

struct Batch {
  Tensor<float> images;  // [B, C, H, W]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // dataset positions
};

/// Epoch-seeded Fisher-Yates order.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Permuted index chunks of batch_size; the last short chunk is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch);

/// Stacks the given samples. When `aug` is set, each is augmented from a stream keyed
/// by (aug->seed, epoch, dataset index).
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::uint64_t epoch,
                 const AugmentConfig* aug = nullptr);

/// All mini-batches of one epoch.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                           const AugmentConfig* aug = nullptr);

/// Images in dataset order, for evaluation.
Batch stack(const Dataset& data, std::size_t begin, std::size_t end);

}  // namespace fambav
