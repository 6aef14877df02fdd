#include "fambav/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "fambav/errors.hpp"
#include "fambav/ops.hpp"

namespace fambav {

Partition partition_even_odd(std::size_t length) {
  Partition p;
  for (std::size_t i = 1; i < length; ++i) (i % 2 == 1 ? p.set_a : p.set_b).push_back(i);
  return p;
}

template <typename T>
SimilarityMatrix cosine_similarity(const T* tokens, std::size_t width, const Partition& part) {
  auto norms = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> n(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* row = tokens + idx[i] * width;
      double acc = 0;
      for (std::size_t j = 0; j < width; ++j) acc += double(row[j]) * double(row[j]);
      n[i] = std::sqrt(acc);
    }
    return n;
  };
  const std::vector<double> na = norms(part.set_a);
  const std::vector<double> nb = norms(part.set_b);
  SimilarityMatrix sim;
  sim.rows = part.set_a.size();
  sim.cols = part.set_b.size();
  sim.values.assign(sim.rows * sim.cols, 0.0);
  for (std::size_t i = 0; i < sim.rows; ++i) {
    if (na[i] == 0.0) continue;
    const T* a = tokens + part.set_a[i] * width;
    for (std::size_t j = 0; j < sim.cols; ++j) {
      if (nb[j] == 0.0) continue;
      const T* b = tokens + part.set_b[j] * width;
      double dot = 0;
      for (std::size_t k = 0; k < width; ++k) dot += double(a[k]) * double(b[k]);
      sim.values[i * sim.cols + j] = std::clamp(dot / (na[i] * nb[j]), -1.0, 1.0);
    }
  }
  return sim;
}

MatchResult match_pairs(const SimilarityMatrix& sim, const Partition& part, std::size_t r, std::size_t length) {
  if (sim.rows != part.set_a.size() || sim.cols != part.set_b.size()) {
    throw DimensionError("match_pairs: similarity matrix does not match partition");
  }
  if (r > part.set_a.size()) {
    throw PlanError("match_pairs: r=" + std::to_string(r) + " exceeds |A|=" + std::to_string(part.set_a.size()));
  }
  MatchResult m;
  if (r > 0 && part.set_b.empty()) throw FusionError("match_pairs: set B is empty");
  if (r > 0) {
    std::vector<MergePair> proposals;
    proposals.reserve(sim.rows);
    for (std::size_t i = 0; i < sim.rows; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < sim.cols; ++j) {
        if (sim.at(i, j) > sim.at(i, best)) best = j;
      }
      proposals.push_back({part.set_a[i], part.set_b[best], sim.at(i, best)});
    }
    std::stable_sort(proposals.begin(), proposals.end(), [](const MergePair& x, const MergePair& y) {
      if (x.similarity != y.similarity) return x.similarity > y.similarity;
      if (x.index_a != y.index_a) return x.index_a < y.index_a;
      return x.index_b < y.index_b;
    });
    m.pairs.assign(proposals.begin(), proposals.begin() + static_cast<std::ptrdiff_t>(r));
  }
  std::vector<bool> merged(length, false);
  for (const MergePair& p : m.pairs) merged[p.index_a] = true;
  for (std::size_t i = 0; i < length; ++i) {
    if (!merged[i]) m.survivors.push_back(i);
  }
  return m;
}

template <typename T>
TokenSequence<T> fuse(const TokenSequence<T>& seq, const std::vector<MatchResult>& matches, const FusionOptions& opts) {
  const std::size_t batch = seq.batch(), len = seq.length();
  if (matches.size() != batch) throw FusionError("fuse: one match result per batch item required");
  const std::size_t r = batch ? matches.front().pairs.size() : 0;
  std::vector<RowMix> mix(batch);
  std::vector<std::vector<double>> sizes(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const MatchResult& m = matches[b];
    if (m.pairs.size() != r) throw FusionError("fuse: every batch item must fuse the same number of pairs");
    // group[i] lists the A tokens merged into slot i.
    std::vector<std::vector<std::size_t>> group(len);
    std::vector<bool> absorbed(len, false);
    for (const MergePair& p : m.pairs) {
      if (p.index_a == 0 || p.index_b == 0 || p.index_a >= len || p.index_b >= len || p.index_a == p.index_b) {
        throw FusionError("fuse: invalid pair (" + std::to_string(p.index_a) + ", " + std::to_string(p.index_b) + ")");
      }
      if (absorbed[p.index_a]) throw FusionError("fuse: token " + std::to_string(p.index_a) + " merged twice");
      absorbed[p.index_a] = true;
      group[p.index_b].push_back(p.index_a);
    }
    for (std::size_t i = 0; i < len; ++i) {
      if (absorbed[i]) {
        if (!group[i].empty()) throw FusionError("fuse: token " + std::to_string(i) + " is both source and target");
        continue;
      }
      std::vector<RowSource> row{{i, 1.0}};
      double total = seq.size_of(b, i);
      for (std::size_t a : group[i]) {
        row.push_back({a, 1.0});
        total += seq.size_of(b, a);
      }
      if (row.size() > 1) {
        for (RowSource& s : row) {
          s.weight = opts.weighted ? seq.size_of(b, s.index) / total : 1.0 / static_cast<double>(row.size());
        }
      }
      mix[b].push_back(std::move(row));
      sizes[b].push_back(total);
    }
  }
  TokenSequence<T> out;
  out.values = mix_rows(seq.values, mix);
  out.sizes = std::move(sizes);
  return out;
}

void write_trace(std::ostream& os, const FusionTrace& trace, std::size_t batch) {
  os.precision(17);
  for (const MergeRecord& rec : trace.records) {
    if (rec.batch != batch) continue;
    os << rec.layer << ',' << rec.index_a << ',' << rec.index_b << ',' << rec.similarity << '\n';
  }
}

FusionTrace read_trace(std::istream& is) {
  FusionTrace trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    MergeRecord rec{0, 0, 0, 0, 0.0};
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ls >> rec.layer >> c1 >> rec.index_a >> c2 >> rec.index_b >> c3 >> rec.similarity) || c1 != ',' ||
        c2 != ',' || c3 != ',') {
      throw FormatError("trace: malformed record at line " + std::to_string(lineno));
    }
    trace.records.push_back(rec);
  }
  return trace;
}

template <typename T>
TokenSequence<T> fuse_layer(const TokenSequence<T>& seq, std::size_t r, const FusionOptions& opts,
                            FusionTrace* trace, std::size_t layer) {
  if (r == 0) return seq;
  const std::size_t len = seq.length();
  if (len < 3) throw FusionError("fuse_layer: length " + std::to_string(len) + " < 3 cannot fuse r=" + std::to_string(r));
  const Partition part = partition_even_odd(len);
  const T* base = seq.values.data().data();
  const std::size_t width = seq.width();
  std::vector<MatchResult> matches;
  matches.reserve(seq.batch());
  for (std::size_t b = 0; b < seq.batch(); ++b) {
    const SimilarityMatrix sim = cosine_similarity(base + b * len * width, width, part);
    matches.push_back(match_pairs(sim, part, r, len));
    if (trace) {
      for (const MergePair& p : matches.back().pairs) {
        trace->records.push_back({layer, b, p.index_a, p.index_b, p.similarity});
      }
    }
  }
  return fuse(seq, matches, opts);
}

#define FAMBAV_INSTANTIATE(T)                                                                                 \
  template SimilarityMatrix cosine_similarity<T>(const T*, std::size_t, const Partition&);                    \
  template TokenSequence<T> fuse<T>(const TokenSequence<T>&, const std::vector<MatchResult>&,                 \
                                    const FusionOptions&);                                                    \
  template TokenSequence<T> fuse_layer<T>(const TokenSequence<T>&, std::size_t, const FusionOptions&,         \
                                          FusionTrace*, std::size_t);

FAMBAV_INSTANTIATE(float)
FAMBAV_INSTANTIATE(double)

#undef FAMBAV_INSTANTIATE

}  // namespace fambav
