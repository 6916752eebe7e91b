#pragma once

// Training objectives with hand-derived gradients: softmax cross-entropy,
// supervised contrastive (SupCon, L_out form), triplet margin with in-batch
// hard-negative mining, symmetric NT-XENT for text-image alignment, their
// weighted combination, and a central finite-difference gradient checker.
//
// Contrastive losses expect L2-normalized rows but do not enforce it; the
// formulas and gradients are exact for arbitrary inputs, which is what lets
// the checker perturb coordinates freely.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vlink/error.hpp"
#include "vlink/matrix.hpp"

namespace vlink {

struct LossOutput {
  double loss = 0.0;
  Matrix grad;  // same shape as the differentiated input
};

/// Loss over two inputs of equal shape (text/image for NT-XENT).
struct PairLossOutput {
  double loss = 0.0;
  Matrix grad_first;
  Matrix grad_second;
};

struct TripletLossOutput {
  double loss = 0.0;
  Matrix grad_anchor;
  Matrix grad_positive;
  Matrix grad_negative;
};

struct LossWeights {
  double ce = 1.0;
  double supcon = 1.0;
  double triplet = 1.0;
  double itc = 1.0;

  bool any_positive() const noexcept { return ce > 0 || supcon > 0 || triplet > 0 || itc > 0; }
};

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kDefaultTripletMargin = 1.0;
inline constexpr std::size_t kDefaultInBatchNegatives = 5;

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t rows, const char* who) {
  if (labels.size() != rows)
    throw UsageError(std::string(who) + ": " + std::to_string(rows) + " rows but " + std::to_string(labels.size()) +
                     " labels");
}

inline void check_temperature(double tau, const char* who) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError(std::string(who) + ": temperature must be > 0");
}

/// log(sum(exp(v))) over the entries selected by `use`, stabilized.
template <class Use>
double log_sum_exp(std::span<const double> v, Use use) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v.size(); ++j)
    if (use(j)) m = std::max(m, v[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j)
    if (use(j)) s += std::exp(v[j] - m);
  return m + std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cross-entropy

/// Mean over rows of -log softmax(logits)[label]; grad = (softmax - onehot)/N.
inline LossOutput ce_loss(const Matrix& logits, std::span<const int> labels) {
  detail::check_labels(labels, logits.rows(), "ce_loss");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (n == 0) throw UsageError("ce_loss: empty batch");
  LossOutput out{0.0, Matrix(n, c)};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw UsageError("ce_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    auto row = logits.row(i);
    const double lse = detail::log_sum_exp(row, [](std::size_t) { return true; });
    out.loss += lse - row[static_cast<std::size_t>(y)];
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(row[j] - lse) / static_cast<double>(n);
    g[static_cast<std::size_t>(y)] -= 1.0 / static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Supervised contrastive (L_out)
//
//   s_ij = z_i . z_j / tau
//   l_i  = log sum_{a != i} exp(s_ia) - mean_{p in P(i)} s_ip
//   L    = mean_i l_i
//
// dL/ds_ia = (softmax_i(a) - [a in P(i)]/|P(i)|) / N =: G_ia, so
// dL/dZ = (G + G^T) Z / tau.

inline LossOutput supcon_loss(const Matrix& z, std::span<const int> labels, double tau = kDefaultTemperature) {
  detail::check_labels(labels, z.rows(), "supcon_loss");
  detail::check_temperature(tau, "supcon_loss");
  const std::size_t n = z.rows();
  if (n < 2) throw UsageError("supcon_loss: need at least 2 rows");

  std::vector<std::size_t> positives(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) ++positives[i];
  for (std::size_t i = 0; i < n; ++i)
    if (positives[i] == 0)
      throw DataError("supcon_loss: label " + std::to_string(labels[i]) + " has no positive for anchor row " +
                      std::to_string(i));

  Matrix s = matmul_nt(z, z);
  s *= 1.0 / tau;
  Matrix g(n, n);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto si = s.row(i);
    const double lse = detail::log_sum_exp(si, [i](std::size_t j) { return j != i; });
    double pos_sum = 0.0;
    const double inv_p = 1.0 / static_cast<double>(positives[i]);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool pos = labels[j] == labels[i];
      if (pos) pos_sum += si[j];
      g(i, j) = (std::exp(si[j] - lse) - (pos ? inv_p : 0.0)) * inv_n;
    }
    total += lse - pos_sum * inv_p;
  }
  Matrix sym(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = g(i, j) + g(j, i);
  Matrix grad = matmul(sym, z);
  grad *= 1.0 / tau;
  return {total * inv_n, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Triplet margin loss

/// mean_t max(0, |a_t - p_t| - |a_t - n_t| + margin), Euclidean distance.
/// Zero distances and the hinge boundary contribute a zero subgradient.
inline TripletLossOutput triplet_loss(const Matrix& anchors, const Matrix& positives, const Matrix& negatives,
                                      double margin = kDefaultTripletMargin) {
  if (!anchors.same_shape(positives) || !anchors.same_shape(negatives))
    throw UsageError("triplet_loss: shape mismatch " + anchors.shape_string() + " / " + positives.shape_string() +
                     " / " + negatives.shape_string());
  const std::size_t t = anchors.rows(), d = anchors.cols();
  TripletLossOutput out{0.0, Matrix(t, d), Matrix(t, d), Matrix(t, d)};
  if (t == 0) return out;
  const double inv_t = 1.0 / static_cast<double>(t);
  std::vector<double> ap(d), an(d);
  for (std::size_t k = 0; k < t; ++k) {
    auto a = anchors.row(k), p = positives.row(k), n = negatives.row(k);
    for (std::size_t j = 0; j < d; ++j) {
      ap[j] = a[j] - p[j];
      an[j] = a[j] - n[j];
    }
    const double d_ap = norm2(ap), d_an = norm2(an);
    const double h = d_ap - d_an + margin;
    if (h <= 0.0) continue;
    out.loss += h * inv_t;
    auto ga = out.grad_anchor.row(k), gp = out.grad_positive.row(k), gn = out.grad_negative.row(k);
    for (std::size_t j = 0; j < d; ++j) {
      const double up = d_ap > 0.0 ? ap[j] / d_ap * inv_t : 0.0;
      const double un = d_an > 0.0 ? an[j] / d_an * inv_t : 0.0;
      ga[j] = up - un;
      gp[j] = -up;
      gn[j] = un;
    }
  }
  return out;
}

struct Triplet {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// For every anchor: each same-label row as positive, crossed with the
/// `negatives_per_anchor` closest different-label rows (ties: lower index).
/// Ordered by (anchor, positive, negative rank).
inline std::vector<Triplet> mine_triplets(const Matrix& z, std::span<const int> labels,
                                          std::size_t negatives_per_anchor = kDefaultInBatchNegatives) {
  detail::check_labels(labels, z.rows(), "mine_triplets");
  const std::size_t n = z.rows();
  std::vector<Triplet> out;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (labels[j] == labels[i]) continue;
      double d2 = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c) {
        const double diff = z(i, c) - z(j, c);
        d2 += diff * diff;
      }
      cand.emplace_back(d2, j);
    }
    const std::size_t k = std::min(negatives_per_anchor, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      for (std::size_t r = 0; r < k; ++r) out.push_back({i, p, cand[r].second});
    }
  }
  return out;
}

/// Mines triplets from the batch, then scatters the triplet gradients back
/// onto the batch rows. Mining is treated as a constant selection.
inline LossOutput batch_triplet_loss(const Matrix& z, std::span<const int> labels,
                                     double margin = kDefaultTripletMargin,
                                     std::size_t negatives_per_anchor = kDefaultInBatchNegatives) {
  auto triplets = mine_triplets(z, labels, negatives_per_anchor);
  LossOutput out{0.0, Matrix(z.rows(), z.cols())};
  if (triplets.empty()) return out;
  const std::size_t t = triplets.size(), d = z.cols();
  Matrix a(t, d), p(t, d), n(t, d);
  for (std::size_t k = 0; k < t; ++k) {
    std::copy_n(z.row(triplets[k].anchor).begin(), d, a.row(k).begin());
    std::copy_n(z.row(triplets[k].positive).begin(), d, p.row(k).begin());
    std::copy_n(z.row(triplets[k].negative).begin(), d, n.row(k).begin());
  }
  auto tl = triplet_loss(a, p, n, margin);
  out.loss = tl.loss;
  for (std::size_t k = 0; k < t; ++k) {
    auto ga = out.grad.row(triplets[k].anchor);
    auto gp = out.grad.row(triplets[k].positive);
    auto gn = out.grad.row(triplets[k].negative);
    for (std::size_t j = 0; j < d; ++j) {
      ga[j] += tl.grad_anchor(k, j);
      gp[j] += tl.grad_positive(k, j);
      gn[j] += tl.grad_negative(k, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// NT-XENT / image-text contrastive
//
//   S = T I^T / tau; L = (CE_rows(S, diag) + CE_cols(S, diag)) / 2

inline PairLossOutput ntxent_itc_loss(const Matrix& text, const Matrix& image, double tau = kDefaultTemperature) {
  if (!text.same_shape(image))
    throw UsageError("ntxent_itc_loss: shape mismatch " + text.shape_string() + " vs " + image.shape_string());
  detail::check_temperature(tau, "ntxent_itc_loss");
  const std::size_t n = text.rows();
  if (n < 2) throw UsageError("ntxent_itc_loss: need at least 2 pairs");

  Matrix s = matmul_nt(text, image);
  s *= 1.0 / tau;
  Matrix ds(n, n);
  const double half_inv_n = 0.5 / static_cast<double>(n);
  double loss_rows = 0.0, loss_cols = 0.0;
  std::vector<double> col(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = s.row(i);
    const double lse = detail::log_sum_exp(row, [](std::size_t) { return true; });
    loss_rows += lse - row[i];
    for (std::size_t j = 0; j < n; ++j) ds(i, j) += (std::exp(row[j] - lse) - (i == j ? 1.0 : 0.0)) * half_inv_n;
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = s(i, j);
    const double lse = detail::log_sum_exp(std::span<const double>(col), [](std::size_t) { return true; });
    loss_cols += lse - col[j];
    for (std::size_t i = 0; i < n; ++i) ds(i, j) += (std::exp(col[i] - lse) - (i == j ? 1.0 : 0.0)) * half_inv_n;
  }
  PairLossOutput out;
  out.loss = (loss_rows + loss_cols) * half_inv_n;
  out.grad_first = matmul(ds, image);
  out.grad_first *= 1.0 / tau;
  out.grad_second = matmul_tn(ds, text);
  out.grad_second *= 1.0 / tau;
  return out;
}

// ---------------------------------------------------------------------------
// Weighted combination

enum class LossKind { ce, supcon, triplet, itc };

/// Which parameter group a term's gradient lands on. Terms in the same group
/// must have equal gradient shapes.
enum class GradGroup { representation, logits };

struct LossTerm {
  LossKind kind;
  const LossOutput* value;
  GradGroup group;
};

struct JointOutput {
  double loss = 0.0;
  std::map<GradGroup, Matrix> grads;
};

inline double weight_for(const LossWeights& w, LossKind k) {
  switch (k) {
    case LossKind::ce: return w.ce;
    case LossKind::supcon: return w.supcon;
    case LossKind::triplet: return w.triplet;
    case LossKind::itc: return w.itc;
  }
  return 0.0;
}

/// loss = sum_k w_k loss_k; gradients summed per group with the same weights.
/// Zero-weight terms are skipped.
inline JointOutput joint_loss(std::span<const LossTerm> terms, const LossWeights& weights) {
  if (!weights.any_positive()) throw UsageError("joint_loss: all loss weights are zero");
  JointOutput out;
  bool used = false;
  for (const auto& term : terms) {
    const double w = weight_for(weights, term.kind);
    if (w < 0) throw UsageError("joint_loss: negative weight");
    if (w == 0.0) continue;
    used = true;
    out.loss += w * term.value->loss;
    auto [it, fresh] = out.grads.try_emplace(term.group, term.value->grad.rows(), term.value->grad.cols());
    if (!it->second.same_shape(term.value->grad))
      throw UsageError("joint_loss: gradient shape mismatch within a parameter group");
    it->second.axpy(w, term.value->grad);
  }
  if (!used) throw UsageError("joint_loss: every supplied term has zero weight");
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

/// Evaluates the loss at `x`; when `grad` is non-null also writes the
/// analytic gradient (same length as x).
using ScalarLossFn = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

/// Central differences per coordinate. Returns
///   max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
inline double grad_check(const ScalarLossFn& fn, std::span<const double> x, double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw UsageError("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<double> analytic;
  const double f0 = fn(x, &analytic);
  if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite loss at the base point");
  if (analytic.size() != x.size()) throw UsageError("grad_check: gradient length differs from input length");

  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = fn(probe, nullptr);
    probe[i] = orig - eps;
    const double fm = fn(probe, nullptr);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite loss when perturbing coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

/// Convenience form for single-matrix losses.
inline double grad_check(const std::function<LossOutput(const Matrix&)>& fn, const Matrix& input,
                         double eps = 1e-5) {
  const std::size_t rows = input.rows(), cols = input.cols();
  ScalarLossFn flat = [&](std::span<const double> x, std::vector<double>* grad) {
    Matrix m(rows, cols);
    std::copy(x.begin(), x.end(), m.flat().begin());
    auto out = fn(m);
    if (grad) grad->assign(out.grad.flat().begin(), out.grad.flat().end());
    return out.loss;
  };
  return grad_check(flat, input.flat(), eps);
}

}  // namespace vlink
