#pragma once

// Finite-difference checks of every objective and of the composed head
// objective over seeded random instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vlink/embedder.hpp"
#include "vlink/head.hpp"
#include "vlink/matrix.hpp"
#include "vlink/objectives.hpp"
#include "vlink/random.hpp"

namespace vlink {

struct GradCheckRow {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

namespace detail {

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.flat()) x = scale * rng.normal();
  return m;
}

/// Labels where every class has at least two members.
inline std::vector<int> paired_labels(Rng& rng, std::size_t n, int classes) {
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = static_cast<int>(i / 2) % classes;
  rng.shuffle(std::span<int>(l));
  return l;
}

/// True when the batch-hard triplet loss is smooth within `gap` of z: the
/// mined negative sets are strictly separated, no hinge sits near zero and
/// no anchor-positive/negative distance is near zero.
inline bool triplet_smooth(const Matrix& z, std::span<const int> labels, double margin, std::size_t k, double gap) {
  const std::size_t n = z.rows();
  auto dist = [&](std::size_t a, std::size_t b) { return std::sqrt(std::max(0.0, [&] {
      double s = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c) s += (z(a, c) - z(b, c)) * (z(a, c) - z(b, c));
      return s;
    }())); };
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> neg;
    for (std::size_t j = 0; j < n; ++j)
      if (labels[j] != labels[i]) neg.push_back(dist(i, j));
    std::sort(neg.begin(), neg.end());
    if (k < neg.size() && neg[k] - neg[k - 1] < gap) return false;
    const std::size_t kk = std::min(k, neg.size());
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      const double dp = dist(i, p);
      if (dp < gap) return false;
      for (std::size_t r = 0; r < kk; ++r)
        if (neg[r] < gap || std::abs(dp - neg[r] + margin) < gap) return false;
    }
  }
  return true;
}

inline GradCheckRow summarize(std::string name, const std::vector<double>& errs, double tol) {
  GradCheckRow r{std::move(name), errs.size(), 0.0, true};
  for (double e : errs) {
    r.max_rel_error = std::max(r.max_rel_error, e);
    if (!(e <= tol)) r.passed = false;
  }
  return r;
}

}  // namespace detail

/// Checks CE, SupCon, batch triplet, NT-XENT and the composed head objective
/// (cycling objectives and fusion variants) on `instances` seeded instances
/// each.
inline std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 20,
                                                     double eps = 1e-5, double tol = 1e-4) {
  constexpr double kKinkGap = 1e-3;
  std::vector<double> ce, sc, tr, nt, hd;
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng(derive_seed(seed, t));
    {
      const std::size_t n = 4 + rng.below(5), c = 2 + rng.below(5);
      std::vector<int> labels(n);
      for (auto& l : labels) l = static_cast<int>(rng.below(c));
      auto logits = detail::random_matrix(rng, n, c, 2.0);
      ce.push_back(grad_check([&](const Matrix& m) { return ce_loss(m, labels); }, logits, eps));
    }
    {
      const std::size_t n = 4 + 2 * rng.below(4), d = 3 + rng.below(5);
      auto labels = detail::paired_labels(rng, n, 1 + static_cast<int>(rng.below(3)));
      auto z = row_normalized(detail::random_matrix(rng, n, d));
      const double tau = 0.1 + 0.4 * rng.uniform();
      sc.push_back(grad_check([&](const Matrix& m) { return supcon_loss(m, labels, tau); }, z, eps));
    }
    {
      const std::size_t n = 6 + 2 * rng.below(3), d = 3 + rng.below(4);
      auto labels = detail::paired_labels(rng, n, 2 + static_cast<int>(rng.below(2)));
      Matrix z;
      do {
        z = detail::random_matrix(rng, n, d, 0.7);
      } while (!detail::triplet_smooth(z, labels, kDefaultTripletMargin, kDefaultInBatchNegatives, kKinkGap));
      tr.push_back(grad_check(
          [&](const Matrix& m) { return batch_triplet_loss(m, labels, kDefaultTripletMargin, kDefaultInBatchNegatives); },
          z, eps));
    }
    {
      const std::size_t n = 2 + rng.below(5), d = 3 + rng.below(4);
      auto text = row_normalized(detail::random_matrix(rng, n, d));
      auto image = row_normalized(detail::random_matrix(rng, n, d));
      Matrix stacked(2 * n, d);
      std::copy(text.flat().begin(), text.flat().end(), stacked.flat().begin());
      std::copy(image.flat().begin(), image.flat().end(), stacked.flat().begin() + static_cast<std::ptrdiff_t>(n * d));
      const double tau = 0.1 + 0.4 * rng.uniform();
      nt.push_back(grad_check(
          [&](const Matrix& m) {
            Matrix a(n, d), b(n, d);
            std::copy_n(m.flat().begin(), n * d, a.flat().begin());
            std::copy_n(m.flat().begin() + static_cast<std::ptrdiff_t>(n * d), n * d, b.flat().begin());
            auto out = ntxent_itc_loss(a, b, tau);
            Matrix g(2 * n, d);
            std::copy(out.grad_first.flat().begin(), out.grad_first.flat().end(), g.flat().begin());
            std::copy(out.grad_second.flat().begin(), out.grad_second.flat().end(),
                      g.flat().begin() + static_cast<std::ptrdiff_t>(n * d));
            return LossOutput{out.loss, std::move(g)};
          },
          stacked, eps));
    }
    {
      static constexpr Objective kObjectives[] = {Objective::ce_supcon, Objective::ce_triplet, Objective::ce,
                                                  Objective::supcon, Objective::triplet};
      const Objective obj = kObjectives[t % 5];
      const int fusion_kind = static_cast<int>(t % 3);  // 0 none, 1 gated, 2 attention
      const std::size_t n = 8, d = 5, h = 4, v = 3;
      auto labels = detail::paired_labels(rng, n, static_cast<int>(v));
      TrainConfig cfg;
      cfg.temperature = 0.5;
      HeadParams head;
      Matrix x, image;
      for (int attempt = 0;; ++attempt) {
        head = init_head(d, h, v, rng.next_u64());
        for (double& b : head.b_proj.flat()) b = 0.1 * rng.normal();
        for (double& b : head.b_cls.flat()) b = 0.1 * rng.normal();
        x = row_normalized(detail::random_matrix(rng, n, d));
        image = row_normalized(detail::random_matrix(rng, n, d));
        if (fusion_kind)
          head.fusion = init_fusion_params(fusion_kind == 1 ? FusionStrategy::gated : FusionStrategy::attention, d,
                                           rng.next_u64());
        if (!uses_triplet(obj)) break;
        auto f = head_forward(head, x, fusion_kind ? &image : nullptr);
        if (detail::triplet_smooth(f.rep, labels, cfg.triplet_margin, cfg.in_batch_negatives, kKinkGap) || attempt > 200)
          break;
      }
      const Matrix* img = fusion_kind ? &image : nullptr;
      ScalarLossFn fn = [&](std::span<const double> p, std::vector<double>* grad) {
        HeadParams hp = head;
        unflatten(p, hp);
        auto out = head_loss(hp, x, img, labels, cfg, obj);
        if (grad) *grad = flatten(out.grads);
        return out.loss;
      };
      const auto p0 = flatten(head);
      hd.push_back(grad_check(fn, p0, eps));
    }
  }
  return {detail::summarize("ce", ce, tol), detail::summarize("supcon", sc, tol),
          detail::summarize("triplet", tr, tol), detail::summarize("ntxent_itc", nt, tol),
          detail::summarize("head_composite", hd, tol)};
}

}  // namespace vlink
