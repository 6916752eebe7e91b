#pragma once

// Exact flat inner-product index over unit-norm document rows.
//
// Scores are accumulated per (query, doc) pair in dimension order, exactly as
// dot() does, so results are bit-identical to a naive scan. The blocked loop
// vectorizes across documents of a transposed copy instead of across
// dimensions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "vlink/embedder.hpp"
#include "vlink/error.hpp"
#include "vlink/io.hpp"
#include "vlink/matrix.hpp"

namespace vlink {

struct FlatIndex {
  std::vector<std::string> ids;
  Matrix rows;        // N x D, unit norm
  Matrix transposed;  // D x N
  std::vector<std::uint32_t> id_rank;  // position of ids[i] in ascending id order
  std::uint64_t checksum = 0;          // FNV-1a of the EMBB serialization body

  std::size_t size() const noexcept { return rows.rows(); }
  std::size_t dim() const noexcept { return rows.cols(); }

  EmbeddingMatrix as_embeddings() const { return {ids, rows, true}; }
};

inline std::uint64_t index_checksum(const EmbeddingMatrix& m) {
  const auto bytes = to_emb_binary(m);
  return emb_binary_checksums(bytes).second;
}

inline FlatIndex build_index(const EmbeddingMatrix& docs) {
  if (docs.rows() < 1) throw DataError("build_index: no documents");
  if (docs.ids.size() != docs.rows()) throw DataError("build_index: ids/rows mismatch");
  std::unordered_set<std::string_view> seen;
  for (const auto& id : docs.ids)
    if (!seen.insert(id).second) throw DataError("build_index: duplicate document id '" + id + "'");
  FlatIndex idx;
  idx.ids = docs.ids;
  idx.rows = docs.data;
  for (std::size_t i = 0; i < idx.rows.rows(); ++i) {
    auto r = idx.rows.row(i);
    if (!all_finite(r)) throw DataError("build_index: non-finite entry in document '" + idx.ids[i] + "'");
    const double n = norm2(r);
    if (n == 0.0) throw DataError("build_index: document '" + idx.ids[i] + "' has a zero embedding");
    if (std::abs(n - 1.0) > kUnitNormTolerance)
      for (double& x : r) x /= n;
  }
  idx.transposed = transpose(idx.rows);
  std::vector<std::uint32_t> order(idx.ids.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return idx.ids[a] < idx.ids[b]; });
  idx.id_rank.resize(order.size());
  for (std::uint32_t r = 0; r < order.size(); ++r) idx.id_rank[order[r]] = r;
  idx.checksum = index_checksum(idx.as_embeddings());
  return idx;
}

struct Hit {
  std::size_t doc = 0;  // row in the index
  double score = 0.0;
};

struct SearchOptions {
  std::size_t workers = 1;  // 0 = hardware concurrency
};

namespace detail {

inline constexpr std::size_t kQueryBlock = 8;
inline constexpr std::size_t kDocBlock = 512;

inline void score_block(const FlatIndex& idx, const Matrix& q, std::size_t q0, std::size_t q1,
                        std::vector<double>& scores) {
  const std::size_t n = idx.size(), d = idx.dim();
  const std::size_t nq = q1 - q0;
  scores.assign(nq * n, 0.0);
  const double* t = idx.transposed.flat().data();
  for (std::size_t n0 = 0; n0 < n; n0 += kDocBlock) {
    const std::size_t n1 = std::min(n, n0 + kDocBlock);
    for (std::size_t j = 0; j < d; ++j) {
      const double* tj = t + j * n;
      for (std::size_t qi = 0; qi < nq; ++qi) {
        const double qv = q(q0 + qi, j);
        double* s = scores.data() + qi * n;
        for (std::size_t k = n0; k < n1; ++k) s[k] += qv * tj[k];
      }
    }
  }
}

inline void select_top(const FlatIndex& idx, const double* s, std::size_t k, std::vector<std::uint32_t>& order,
                       std::vector<Hit>& out) {
  order.resize(idx.size());
  std::iota(order.begin(), order.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return idx.id_rank[a] < idx.id_rank[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  out.resize(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = {order[i], s[order[i]]};
}

inline Matrix normalized_queries(const Matrix& queries) {
  Matrix q = queries;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    auto r = q.row(i);
    if (!all_finite(r)) throw DataError("search: non-finite query row " + std::to_string(i));
    const double n = norm2(r);
    if (n > 0.0 && std::abs(n - 1.0) > kUnitNormTolerance)
      for (double& x : r) x /= n;
  }
  return q;
}

}  // namespace detail

/// Exact top-k_i documents for each query row, best first; equal scores are
/// ordered by ascending document id. Query rows are normalized when they
/// are not unit length; a zero query scores 0 against every document.
inline std::vector<std::vector<Hit>> search(const FlatIndex& idx, const Matrix& queries, std::span<const std::size_t> ks,
                                            const SearchOptions& opt = {}) {
  if (queries.cols() != idx.dim())
    throw DataError("search: query dim " + std::to_string(queries.cols()) + " but index dim " +
                    std::to_string(idx.dim()));
  if (ks.size() != queries.rows()) throw UsageError("search: one cutoff per query required");
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] > idx.size())
      throw DataError("search: cutoff " + std::to_string(ks[i]) + " for query " + std::to_string(i) +
                      " exceeds index size " + std::to_string(idx.size()));
  const Matrix q = detail::normalized_queries(queries);
  std::vector<std::vector<Hit>> results(q.rows());
  const std::size_t blocks = (q.rows() + detail::kQueryBlock - 1) / detail::kQueryBlock;
  auto run = [&](std::size_t first_block, std::size_t stride) {
    std::vector<double> scores;
    std::vector<std::uint32_t> order;
    for (std::size_t b = first_block; b < blocks; b += stride) {
      const std::size_t q0 = b * detail::kQueryBlock, q1 = std::min(q.rows(), q0 + detail::kQueryBlock);
      detail::score_block(idx, q, q0, q1, scores);
      for (std::size_t qi = q0; qi < q1; ++qi)
        detail::select_top(idx, scores.data() + (qi - q0) * idx.size(), ks[qi], order, results[qi]);
    }
  };
  std::size_t workers = opt.workers ? opt.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(blocks, 1));
  if (workers <= 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
  }
  return results;
}

inline std::vector<std::vector<Hit>> search(const FlatIndex& idx, const Matrix& queries, std::size_t k,
                                            const SearchOptions& opt = {}) {
  std::vector<std::size_t> ks(queries.rows(), k);
  return search(idx, queries, ks, opt);
}

/// Index persistence reuses the EMBB sidecar (normalized flag set).
inline void save_index(const std::filesystem::path& path, const FlatIndex& idx) {
  io::write_file_atomic(path, to_emb_binary(idx.as_embeddings()));
}

inline FlatIndex load_index(const std::filesystem::path& path) {
  return build_index(parse_emb_binary(io::read_file(path)));
}

struct VerifyResult {
  bool ok = false;
  std::uint64_t stored = 0;
  std::uint64_t recomputed = 0;
  std::size_t rows = 0;
  std::size_t dim = 0;
};

/// Recomputes an EMBB file's checksum without trusting its contents.
inline VerifyResult verify_index_file(const std::filesystem::path& path) {
  const auto buf = io::read_file(path);
  VerifyResult v;
  std::tie(v.stored, v.recomputed) = emb_binary_checksums(buf);
  v.ok = v.stored == v.recomputed;
  if (v.ok) {
    auto m = parse_emb_binary(buf);
    v.rows = m.rows();
    v.dim = m.dim();
  }
  return v;
}

}  // namespace vlink
