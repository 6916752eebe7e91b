#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vlink/error.hpp"
#include "vlink/io.hpp"
#include "vlink/matrix.hpp"
#include "vlink/random.hpp"

namespace vlink {

inline constexpr double kUnitNormTolerance = 1e-9;

/// Row vectors keyed by ad or sample id; the currency between modules.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  Matrix data;
  bool normalized = false;

  std::size_t rows() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }

  /// Throws DataError when ids/rows disagree, ids repeat, or a matrix flagged
  /// as normalized has a row off the unit sphere.
  void validate() const {
    if (ids.size() != data.rows())
      throw DataError("embedding matrix has " + std::to_string(ids.size()) + " ids but " +
                      std::to_string(data.rows()) + " rows");
    std::unordered_set<std::string_view> seen;
    for (const auto& id : ids)
      if (!seen.insert(id).second) throw DataError("duplicate embedding id '" + id + "'");
    if (normalized)
      for (std::size_t i = 0; i < data.rows(); ++i)
        if (std::abs(norm2(data.row(i)) - 1.0) > kUnitNormTolerance)
          throw DataError("row '" + ids[i] + "' is flagged normalized but has norm " +
                          io::format_double(norm2(data.row(i))));
  }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

/// Normalizes every row; `normalized` ends up true only if no row was zero.
inline EmbeddingMatrix normalize_rows(EmbeddingMatrix m) {
  bool all = true;
  for (std::size_t i = 0; i < m.rows(); ++i)
    if (normalize_in_place(m.data.row(i)) == 0.0) all = false;
  m.normalized = all;
  return m;
}

/// Rows of `m` reordered (and possibly subset) to follow `ids`.
inline EmbeddingMatrix select_rows(const EmbeddingMatrix& m, std::span<const std::string> ids) {
  std::unordered_map<std::string_view, std::size_t> pos;
  for (std::size_t i = 0; i < m.ids.size(); ++i) pos.emplace(m.ids[i], i);
  EmbeddingMatrix out;
  out.data = Matrix(ids.size(), m.dim());
  out.normalized = m.normalized;
  out.ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = pos.find(ids[i]);
    if (it == pos.end()) throw DataError("no embedding for id '" + ids[i] + "'");
    std::copy_n(m.data.row(it->second).begin(), m.dim(), out.data.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashed character n-gram embedder

struct HashEmbedConfig {
  std::size_t dim = 256;
  std::size_t ngram_min = 3;
  std::size_t ngram_max = 5;
  std::uint64_t seed = 1111;
  bool is_signed = true;

  void validate() const {
    if (ngram_min < 1 || ngram_min > ngram_max) throw UsageError("hash embed: need 1 <= ngram_min <= ngram_max");
    if (dim < 8) throw UsageError("hash embed: dim must be >= 8");
  }
};

namespace detail {

/// FNV-1a state primed with the little-endian bytes of the mixed seed.
inline io::Fnv1a seeded_hasher(std::uint64_t seed) {
  io::ByteWriter key;
  key.put_u64(mix64(seed));
  io::Fnv1a h;
  h.update(key.bytes());
  return h;
}

inline std::uint64_t hash_gram(io::Fnv1a primed, std::string_view gram) {
  primed.update(gram);
  return mix64(primed.digest());
}

}  // namespace detail

/// Embeds one text: lowercase (ASCII), hash every character n-gram into a
/// signed bucket, L2-normalize. Texts shorter than ngram_min hash as a single
/// gram. Accumulation is integer-valued, so the result is bit-identical on any
/// IEEE-754 platform.
inline std::vector<double> hash_embed_one(std::string_view text, const HashEmbedConfig& cfg) {
  std::vector<double> v(cfg.dim, 0.0);
  if (text.empty()) return v;
  std::string lower(text);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  const io::Fnv1a primed = detail::seeded_hasher(cfg.seed);
  auto add = [&](std::string_view gram) {
    const std::uint64_t h = detail::hash_gram(primed, gram);
    const double sign = cfg.is_signed && (h >> 63) ? -1.0 : 1.0;
    v[h % cfg.dim] += sign;
  };
  if (lower.size() < cfg.ngram_min) {
    add(lower);
  } else {
    for (std::size_t n = cfg.ngram_min; n <= cfg.ngram_max && n <= lower.size(); ++n)
      for (std::size_t i = 0; i + n <= lower.size(); ++i) add(std::string_view(lower).substr(i, n));
  }
  normalize_in_place(v);
  return v;
}

/// Ids default to the row index when `ids` is empty. Empty texts yield zero
/// rows and leave the matrix flagged as not normalized.
inline EmbeddingMatrix hash_embed_text(std::span<const std::string> texts, const HashEmbedConfig& cfg,
                                       std::span<const std::string> ids = {}) {
  cfg.validate();
  if (!ids.empty() && ids.size() != texts.size()) throw UsageError("hash_embed_text: ids/texts length mismatch");
  EmbeddingMatrix out;
  out.data = Matrix(texts.size(), cfg.dim);
  out.normalized = true;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.ids.push_back(ids.empty() ? std::to_string(i) : ids[i]);
    auto row = hash_embed_one(texts[i], cfg);
    if (texts[i].empty()) out.normalized = false;
    std::copy(row.begin(), row.end(), out.data.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sidecar formats
//
// Text:   "EMB v1 <N> <D> <0|1>\n" then N lines "id\tf,f,...,f\n" using the
//         shortest round-trip decimal for each double.
// Binary: "EMBB v1\n", u64 N, u64 D, u8 normalized, u64 id offsets[N+1]
//         (into the id blob), id blob, N*D f64, u64 FNV-1a of all prior
//         bytes. Integers and floats are little-endian.

inline constexpr std::string_view kEmbTextMagic = "EMB v1 ";
inline constexpr std::string_view kEmbBinaryMagic = "EMBB v1\n";

inline std::string to_emb_text(const EmbeddingMatrix& m) {
  m.validate();
  std::string out = "EMB v1 " + std::to_string(m.rows()) + " " + std::to_string(m.dim()) + " " +
                    (m.normalized ? "1" : "0") + "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    if (m.ids[i].empty() || m.ids[i].find_first_of("\t\r\n") != std::string::npos)
      throw DataError("id '" + m.ids[i] + "' cannot be stored in the text sidecar");
    out += m.ids[i];
    out += '\t';
    auto row = m.data.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out += ',';
      out += io::format_double(row[j]);
    }
    out += '\n';
  }
  return out;
}

inline std::string to_emb_binary(const EmbeddingMatrix& m) {
  m.validate();
  io::ByteWriter w;
  w.put_bytes(kEmbBinaryMagic);
  w.put_u64(m.rows());
  w.put_u64(m.dim());
  w.put_u8(m.normalized ? 1 : 0);
  std::uint64_t off = 0;
  w.put_u64(0);
  for (const auto& id : m.ids) {
    off += id.size();
    w.put_u64(off);
  }
  for (const auto& id : m.ids) w.put_bytes(id);
  for (double v : m.data.flat()) w.put_f64(v);
  const auto sum = io::fnv1a(w.bytes());
  w.put_u64(sum);
  return w.take();
}

inline EmbeddingMatrix parse_emb_text(std::string_view buf, std::optional<std::size_t> expect_dim = {}) {
  auto nl = buf.find('\n');
  if (nl == std::string_view::npos || buf.substr(0, kEmbTextMagic.size()) != kEmbTextMagic)
    throw DataError("malformed EMB header");
  auto fields = io::split(buf.substr(kEmbTextMagic.size(), nl - kEmbTextMagic.size()), ' ');
  if (fields.size() != 3 || (fields[2] != "0" && fields[2] != "1")) throw DataError("malformed EMB header");
  std::size_t n = 0, d = 0;
  try {
    n = io::parse_int<std::size_t>(fields[0]);
    d = io::parse_int<std::size_t>(fields[1]);
  } catch (const DataError&) {
    throw DataError("malformed EMB header");
  }
  if (expect_dim && *expect_dim != d)
    throw DataError("dimension mismatch: file has " + std::to_string(d) + ", expected " + std::to_string(*expect_dim));
  EmbeddingMatrix m;
  m.normalized = fields[2] == "1";
  m.data = Matrix(n, d);
  std::size_t pos = nl + 1;
  for (std::size_t i = 0; i < n; ++i) {
    auto end = buf.find('\n', pos);
    if (end == std::string_view::npos) end = buf.size();
    if (pos >= buf.size()) throw ParseError(i + 2, "missing row");
    auto line = buf.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0) throw ParseError(i + 2, "expected 'id<TAB>values'");
    m.ids.emplace_back(line.substr(0, tab));
    auto vals = io::split(line.substr(tab + 1), ',');
    if (vals.size() != d)
      throw ParseError(i + 2, "row has " + std::to_string(vals.size()) + " values, expected " + std::to_string(d));
    try {
      for (std::size_t j = 0; j < d; ++j) m.data(i, j) = io::parse_double(vals[j]);
    } catch (const DataError& e) {
      throw ParseError(i + 2, e.what());
    }
    pos = end + 1;
  }
  if (pos < buf.size() && !io::trim(buf.substr(pos)).empty()) throw DataError("trailing data after " + std::to_string(n) + " rows");
  m.validate();
  return m;
}

/// Checksum of a binary sidecar: (stored, recomputed).
inline std::pair<std::uint64_t, std::uint64_t> emb_binary_checksums(std::string_view buf) {
  if (buf.size() < kEmbBinaryMagic.size() + 8) throw DataError("truncated EMBB file");
  io::ByteReader tail(buf.substr(buf.size() - 8));
  return {tail.get_u64(), io::fnv1a(buf.substr(0, buf.size() - 8))};
}

inline EmbeddingMatrix parse_emb_binary(std::string_view buf, std::optional<std::size_t> expect_dim = {}) {
  if (buf.substr(0, kEmbBinaryMagic.size()) != kEmbBinaryMagic) throw DataError("malformed EMBB header");
  auto [stored, actual] = emb_binary_checksums(buf);
  if (stored != actual) throw DataError("EMBB checksum mismatch");
  io::ByteReader r(buf.substr(0, buf.size() - 8));
  r.get_bytes(kEmbBinaryMagic.size());
  const auto n = r.get_u64(), d = r.get_u64();
  const auto flag = r.get_u8();
  if (flag > 1) throw DataError("malformed EMBB header");
  if (expect_dim && *expect_dim != d)
    throw DataError("dimension mismatch: file has " + std::to_string(d) + ", expected " + std::to_string(*expect_dim));
  if (n > r.remaining() / 8 || (d != 0 && n * d > r.remaining() / 8)) throw DataError("EMBB sizes exceed file");
  std::vector<std::uint64_t> offsets(n + 1);
  for (auto& o : offsets) o = r.get_u64();
  if (offsets[0] != 0) throw DataError("EMBB id table corrupt");
  auto blob = r.get_bytes(offsets[n]);
  EmbeddingMatrix m;
  m.normalized = flag == 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (offsets[i + 1] < offsets[i]) throw DataError("EMBB id table corrupt");
    m.ids.emplace_back(blob.substr(offsets[i], offsets[i + 1] - offsets[i]));
  }
  m.data = Matrix(n, d);
  for (double& v : m.data.flat()) v = r.get_f64();
  if (r.remaining() != 0) throw DataError("EMBB trailing bytes");
  m.validate();
  return m;
}

enum class EmbFormat { text, binary };

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m,
                            EmbFormat fmt = EmbFormat::text) {
  io::write_file_atomic(path, fmt == EmbFormat::text ? to_emb_text(m) : to_emb_binary(m));
}

/// Accepts either sidecar variant, detected by its magic bytes.
inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path, std::optional<std::size_t> expect_dim = {}) {
  const std::string buf = io::read_file(path);
  if (buf.starts_with(kEmbBinaryMagic)) return parse_emb_binary(buf, expect_dim);
  if (buf.starts_with(kEmbTextMagic)) return parse_emb_text(buf, expect_dim);
  throw DataError(path.string() + ": malformed header (expected EMB v1 or EMBB v1)");
}

// ---------------------------------------------------------------------------
// Fusion
//
// mean      (t + v) / 2
// concat    [t ; v]
// attention two-token single-head scaled dot-product self-attention over
//           {t, v} with learned Wq, Wk, Wv (D x D), mean of the two outputs
// gated     g = sigmoid([t ; v] Wg + bg); g * (t Wt) + (1 - g) * (v Wv)
// Every strategy re-normalizes its output rows.

enum class FusionStrategy { mean, concat, attention, gated };

inline std::string_view to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::mean: return "mean";
    case FusionStrategy::concat: return "concat";
    case FusionStrategy::attention: return "attention";
    case FusionStrategy::gated: return "gated";
  }
  return "mean";
}

inline std::optional<FusionStrategy> fusion_from_string(std::string_view s) {
  for (auto f : {FusionStrategy::mean, FusionStrategy::concat, FusionStrategy::attention, FusionStrategy::gated})
    if (to_string(f) == s) return f;
  return std::nullopt;
}

inline bool is_learned(FusionStrategy s) { return s == FusionStrategy::attention || s == FusionStrategy::gated; }

/// Trainable parameters of a learned fusion. Attention uses {wq, wk, wv};
/// gated uses {w_gate (2D x D), b_gate (1 x D), w_text, w_image}.
struct FusionParams {
  FusionStrategy strategy = FusionStrategy::gated;
  std::size_t dim = 0;
  std::vector<std::string> names;
  std::vector<Matrix> tensors;

  Matrix& at(std::string_view name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw UsageError("fusion params: no tensor '" + std::string(name) + "'");
  }
  const Matrix& at(std::string_view name) const { return const_cast<FusionParams*>(this)->at(name); }

  /// Zero tensors with the same layout (gradient accumulator).
  FusionParams zeros_like() const {
    FusionParams z = *this;
    for (auto& t : z.tensors) t = Matrix(t.rows(), t.cols());
    return z;
  }

  friend bool operator==(const FusionParams&, const FusionParams&) = default;
};

/// Initialized so that both learned strategies start near plain averaging:
/// attention gets Wv = I and small random Wq/Wk; gated gets identity
/// projections, a zero gate bias and small random gate weights.
inline FusionParams init_fusion_params(FusionStrategy strategy, std::size_t dim, std::uint64_t seed) {
  if (!is_learned(strategy)) throw UsageError("init_fusion_params: strategy has no parameters");
  Rng rng(seed);
  auto small = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    const double s = 0.1 / std::sqrt(static_cast<double>(r));
    for (double& v : m.flat()) v = rng.uniform(-s, s);
    return m;
  };
  FusionParams p;
  p.strategy = strategy;
  p.dim = dim;
  if (strategy == FusionStrategy::attention) {
    p.names = {"fusion.wq", "fusion.wk", "fusion.wv"};
    p.tensors = {small(dim, dim), small(dim, dim), identity(dim)};
  } else {
    p.names = {"fusion.w_gate", "fusion.b_gate", "fusion.w_text", "fusion.w_image"};
    p.tensors = {small(2 * dim, dim), Matrix(1, dim), identity(dim), identity(dim)};
  }
  return p;
}

namespace detail {

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Unnormalized fused row for the learned strategies.
struct FusedRowCache {
  std::vector<double> y;  // pre-normalization output
  // gated
  std::vector<double> gate, proj_t, proj_v;
  // attention: 2 x D each, row-major
  std::vector<double> q, k, vals;
  double attn[2][2] = {{0, 0}, {0, 0}};
};

inline std::vector<double> vec_mat(std::span<const double> x, const Matrix& w, std::size_t row_offset = 0) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto wr = w.row(row_offset + i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xi * wr[j];
  }
  return out;
}

inline FusedRowCache fuse_row_learned(std::span<const double> t, std::span<const double> v, const FusionParams& p) {
  const std::size_t d = t.size();
  FusedRowCache c;
  c.y.assign(d, 0.0);
  if (p.strategy == FusionStrategy::gated) {
    const Matrix& wg = p.at("fusion.w_gate");
    const Matrix& bg = p.at("fusion.b_gate");
    auto a_t = vec_mat(t, wg, 0);
    auto a_v = vec_mat(v, wg, d);
    c.proj_t = vec_mat(t, p.at("fusion.w_text"));
    c.proj_v = vec_mat(v, p.at("fusion.w_image"));
    c.gate.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      c.gate[j] = sigmoid(a_t[j] + a_v[j] + bg(0, j));
      c.y[j] = c.gate[j] * c.proj_t[j] + (1.0 - c.gate[j]) * c.proj_v[j];
    }
  } else {
    const Matrix& wq = p.at("fusion.wq");
    const Matrix& wk = p.at("fusion.wk");
    const Matrix& wv = p.at("fusion.wv");
    std::span<const double> x[2] = {t, v};
    c.q.resize(2 * d);
    c.k.resize(2 * d);
    c.vals.resize(2 * d);
    for (int r = 0; r < 2; ++r) {
      auto q = vec_mat(x[r], wq), k = vec_mat(x[r], wk), vv = vec_mat(x[r], wv);
      std::copy(q.begin(), q.end(), c.q.begin() + r * static_cast<std::ptrdiff_t>(d));
      std::copy(k.begin(), k.end(), c.k.begin() + r * static_cast<std::ptrdiff_t>(d));
      std::copy(vv.begin(), vv.end(), c.vals.begin() + r * static_cast<std::ptrdiff_t>(d));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < 2; ++i) {
      double s[2];
      for (int j = 0; j < 2; ++j)
        s[j] = dot(std::span<const double>(c.q).subspan(i * d, d), std::span<const double>(c.k).subspan(j * d, d)) *
               scale;
      const double m = std::max(s[0], s[1]);
      const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
      c.attn[i][0] = e0 / (e0 + e1);
      c.attn[i][1] = e1 / (e0 + e1);
    }
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 2; ++k) acc += c.attn[i][k] * c.vals[k * d + j];
      c.y[j] = 0.5 * acc;
    }
  }
  return c;
}

inline void outer_add(Matrix& g, std::span<const double> x, std::span<const double> dy, std::size_t row_offset = 0) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto gr = g.row(row_offset + i);
    for (std::size_t j = 0; j < dy.size(); ++j) gr[j] += xi * dy[j];
  }
}

/// Backward of one learned-fusion row given dL/dy (pre-normalization).
inline void fuse_row_backward(std::span<const double> t, std::span<const double> v, const FusionParams& p,
                              const FusedRowCache& c, std::span<const double> dy, FusionParams& grads) {
  const std::size_t d = t.size();
  if (p.strategy == FusionStrategy::gated) {
    std::vector<double> da(d), dpt(d), dpv(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double g = c.gate[j];
      da[j] = dy[j] * (c.proj_t[j] - c.proj_v[j]) * g * (1.0 - g);
      dpt[j] = dy[j] * g;
      dpv[j] = dy[j] * (1.0 - g);
    }
    outer_add(grads.at("fusion.w_gate"), t, da, 0);
    outer_add(grads.at("fusion.w_gate"), v, da, d);
    auto gb = grads.at("fusion.b_gate").row(0);
    for (std::size_t j = 0; j < d; ++j) gb[j] += da[j];
    outer_add(grads.at("fusion.w_text"), t, dpt);
    outer_add(grads.at("fusion.w_image"), v, dpv);
    return;
  }
  std::span<const double> x[2] = {t, v};
  std::span<const double> q(c.q), k(c.k), vals(c.vals);
  // y = 0.5 * sum_i sum_k A_ik V_k
  double col_a[2] = {c.attn[0][0] + c.attn[1][0], c.attn[0][1] + c.attn[1][1]};
  std::vector<double> dvals(2 * d);
  for (int kk = 0; kk < 2; ++kk)
    for (std::size_t j = 0; j < d; ++j) dvals[kk * d + j] = 0.5 * col_a[kk] * dy[j];
  double da[2][2];
  for (int i = 0; i < 2; ++i)
    for (int kk = 0; kk < 2; ++kk) da[i][kk] = 0.5 * dot(dy, vals.subspan(kk * d, d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  double ds[2][2];
  for (int i = 0; i < 2; ++i) {
    const double inner = c.attn[i][0] * da[i][0] + c.attn[i][1] * da[i][1];
    for (int kk = 0; kk < 2; ++kk) ds[i][kk] = c.attn[i][kk] * (da[i][kk] - inner) * scale;
  }
  std::vector<double> dq(d), dk(d);
  for (int r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      dq[j] = ds[r][0] * k[j] + ds[r][1] * k[d + j];
      dk[j] = ds[0][r] * q[j] + ds[1][r] * q[d + j];
    }
    outer_add(grads.at("fusion.wq"), x[r], dq);
    outer_add(grads.at("fusion.wk"), x[r], dk);
    outer_add(grads.at("fusion.wv"), x[r], std::span<const double>(dvals).subspan(r * d, d));
  }
}

/// dL/dy from dL/d(y/|y|).
inline void normalize_backward(std::span<const double> y, std::span<const double> d_out, std::span<double> dy) {
  const double n = norm2(y);
  if (n == 0.0) {
    std::fill(dy.begin(), dy.end(), 0.0);
    return;
  }
  double proj = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) proj += y[j] * d_out[j];
  proj /= n * n;
  for (std::size_t j = 0; j < y.size(); ++j) dy[j] = (d_out[j] - y[j] * proj) / n;
}

inline void check_fusion_inputs(const EmbeddingMatrix& text, const EmbeddingMatrix& image, FusionStrategy s) {
  if (text.ids != image.ids) throw DataError("fuse: text and image ids are not aligned");
  if (s != FusionStrategy::concat && text.dim() != image.dim())
    throw DataError("fuse: " + std::string(to_string(s)) + " fusion needs equal dimensions (" +
                    std::to_string(text.dim()) + " vs " + std::to_string(image.dim()) + ")");
}

}  // namespace detail

/// Fused matrix for learned strategies before re-normalization.
inline Matrix fuse_learned_raw(const Matrix& text, const Matrix& image, const FusionParams& params) {
  Matrix out(text.rows(), text.cols());
  for (std::size_t i = 0; i < text.rows(); ++i) {
    auto c = detail::fuse_row_learned(text.row(i), image.row(i), params);
    std::copy(c.y.begin(), c.y.end(), out.row(i).begin());
  }
  return out;
}

/// Gradient of sum_i <d_out_i, normalize(fused_i)> with respect to the
/// fusion parameters. Inputs are treated as constants.
inline FusionParams fuse_learned_backward(const Matrix& text, const Matrix& image, const FusionParams& params,
                                          const Matrix& d_out) {
  FusionParams grads = params.zeros_like();
  std::vector<double> dy(text.cols());
  for (std::size_t i = 0; i < text.rows(); ++i) {
    auto c = detail::fuse_row_learned(text.row(i), image.row(i), params);
    detail::normalize_backward(c.y, d_out.row(i), dy);
    detail::fuse_row_backward(text.row(i), image.row(i), params, c, dy, grads);
  }
  return grads;
}

inline EmbeddingMatrix fuse(const EmbeddingMatrix& text, const EmbeddingMatrix& image, FusionStrategy strategy,
                            const FusionParams* params = nullptr) {
  detail::check_fusion_inputs(text, image, strategy);
  EmbeddingMatrix out;
  out.ids = text.ids;
  const std::size_t n = text.rows();
  switch (strategy) {
    case FusionStrategy::mean: {
      out.data = Matrix(n, text.dim());
      for (std::size_t i = 0; i < n; ++i) {
        auto o = out.data.row(i);
        auto t = text.data.row(i), v = image.data.row(i);
        for (std::size_t j = 0; j < o.size(); ++j) o[j] = 0.5 * (t[j] + v[j]);
      }
      break;
    }
    case FusionStrategy::concat: {
      out.data = Matrix(n, text.dim() + image.dim());
      for (std::size_t i = 0; i < n; ++i) {
        auto o = out.data.row(i);
        std::copy(text.data.row(i).begin(), text.data.row(i).end(), o.begin());
        std::copy(image.data.row(i).begin(), image.data.row(i).end(), o.begin() + static_cast<std::ptrdiff_t>(text.dim()));
      }
      break;
    }
    case FusionStrategy::attention:
    case FusionStrategy::gated: {
      if (!params || params->strategy != strategy)
        throw UsageError("fuse: " + std::string(to_string(strategy)) + " fusion requires matching parameters");
      if (params->dim != text.dim()) throw DataError("fuse: fusion parameters were built for another dimension");
      out.data = fuse_learned_raw(text.data, image.data, *params);
      break;
    }
  }
  return normalize_rows(std::move(out));
}

/// Output width of a fusion of inputs with the given widths.
inline std::size_t fused_dim(FusionStrategy s, std::size_t text_dim, std::size_t image_dim) {
  return s == FusionStrategy::concat ? text_dim + image_dim : text_dim;
}

}  // namespace vlink
