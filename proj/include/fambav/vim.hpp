#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fambav/fusion.hpp"
#include "fambav/params.hpp"
#include "fambav/scheduler.hpp"
#include "fambav/ssm.hpp"
#include "fambav/tensor.hpp"

namespace fambav {

struct VimConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t inner = 128;
  std::size_t state = 8;
  std::size_t layers = 8;
  std::size_t n_classes = 10;
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;
  std::size_t head_hidden = 0;  // 0 = single linear head
  bool ssm_skip = true;
  bool fusion_weighted = false;
  bool zero_out_proj = false;
  std::uint64_t init_seed = 0;

  std::size_t n_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t seq_len() const { return n_patches() + 1; }
  SsmConfig ssm() const;
  /// Throws ConfigError for indivisible image dims or zero extents.
  void validate() const;

  /// key=value lines; round-trips through from_record.
  std::string to_record() const;
  static VimConfig from_record(const std::string& record);
};

/// images [B, C, H, W] -> [B, J, P*P*C]; patches row-major over the grid, each the
/// row-major flattening of its (P, P, C) block.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                  // [B, n_classes]
  std::vector<std::size_t> lengths;  // sequence length seen by each layer's block
};

template <typename T>
class VimModel {
 public:
  explicit VimModel(const VimConfig& cfg);

  const VimConfig& config() const noexcept { return cfg_; }

  /// T0 = [t_cls; patches W] + E_pos.
  TokenSequence<T> embed(const Tensor<T>& patches) const;

  /// Residual stack with per-layer fusion before each block, then norm + head on token 0.
  ForwardResult<T> forward(const Tensor<T>& images, const FusionPlan& plan, FusionTrace* trace = nullptr) const;

  ParameterList<T> parameters() const;

  Tensor<T> patch_proj;  // [P*P*C, D]
  Tensor<T> pos_embed;   // [J+1, D]
  Tensor<T> cls_token;   // [D]
  std::vector<MambaBlock<T>> layers;
  Tensor<T> head_norm_gain, head_norm_bias;  // [D]
  Tensor<T> head_hidden_w, head_hidden_b;    // optional hidden layer
  Tensor<T> head_w;  // [D or hidden, n_classes]
  Tensor<T> head_b;  // [n_classes]

 private:
  VimConfig cfg_;
};

/// Cross-entropy against (1 - eps) onehot + eps / n_classes, averaged over the batch.
template <typename T>
Tensor<T> classify_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets, double smoothing = 0.1);

/// Checkpoint container: "FAMBAV1" magic, config record, named float32 LE blobs in
/// declaration order. The exact layout is documented in README.md.
struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string config_record;
  std::vector<CheckpointBlob> blobs;
};

template <typename T>
void save_checkpoint(const std::string& path, const VimModel<T>& model);
Checkpoint read_checkpoint(const std::string& path);
/// Rebuilds a model from a checkpoint; blob names and shapes must match.
template <typename T>
VimModel<T> load_model(const std::string& path);

}  // namespace fambav
