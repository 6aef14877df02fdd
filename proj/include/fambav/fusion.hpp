#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "fambav/tensor.hpp"

namespace fambav {

/// Hidden states [B, L, D] with the class token pinned at index 0.
template <typename T>
struct TokenSequence {
  static constexpr std::size_t cls_index = 0;

  Tensor<T> values;
  /// Merged-token multiplicities per batch item; empty means all ones.
  std::vector<std::vector<double>> sizes;

  std::size_t batch() const { return values.size(0); }
  std::size_t length() const { return values.size(1); }
  std::size_t width() const { return values.size(2); }
  double size_of(std::size_t b, std::size_t i) const { return sizes.empty() ? 1.0 : sizes[b][i]; }
};

/// Odd absolute indices form set A, even indices >= 2 form set B; index 0 is excluded.
struct Partition {
  std::vector<std::size_t> set_a;
  std::vector<std::size_t> set_b;
};

Partition partition_even_odd(std::size_t length);

/// Row-major |A| x |B| cosine similarities. Zero-norm tokens score 0 against everything.
struct SimilarityMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// `tokens` is one sequence, row-major [L, width].
template <typename T>
SimilarityMatrix cosine_similarity(const T* tokens, std::size_t width, const Partition& part);

struct MergePair {
  std::size_t index_a;
  std::size_t index_b;
  double similarity;
};

struct MatchResult {
  std::vector<MergePair> pairs;         // descending similarity
  std::vector<std::size_t> survivors;   // input indices that keep an output slot, in order
};

/// Each A token proposes its most similar B token; the r best proposals win. Ties
/// prefer the lower A index, then the lower B index.
MatchResult match_pairs(const SimilarityMatrix& sim, const Partition& part, std::size_t r, std::size_t length);

struct FusionOptions {
  bool weighted = false;  // size-weighted mean instead of the plain mean
};

/// Each merge group (a B token plus the A tokens matched to it) is replaced by its
/// mean in the B token's slot. `matches` holds one result per batch item.
template <typename T>
TokenSequence<T> fuse(const TokenSequence<T>& seq, const std::vector<MatchResult>& matches,
                      const FusionOptions& opts = {});

struct MergeRecord {
  std::size_t layer;
  std::size_t batch;
  std::size_t index_a;
  std::size_t index_b;
  double similarity;
};

struct FusionTrace {
  std::vector<MergeRecord> records;
};

/// Line-delimited `layer,index_a,index_b,similarity` records of one batch item.
void write_trace(std::ostream& os, const FusionTrace& trace, std::size_t batch = 0);
FusionTrace read_trace(std::istream& is);

/// partition -> similarity -> match -> fuse for every batch item.
template <typename T>
TokenSequence<T> fuse_layer(const TokenSequence<T>& seq, std::size_t r, const FusionOptions& opts = {},
                            FusionTrace* trace = nullptr, std::size_t layer = 0);

}  // namespace fambav
