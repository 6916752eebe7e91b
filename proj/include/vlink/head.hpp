#pragma once

// Trainable head over fixed embeddings: linear projection (retrieval
// representation) followed by a linear vendor classifier, optionally fed by
// a learned text/image fusion. Trained with AdamW under a linear warmup then
// linear decay schedule.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlink/embedder.hpp"
#include "vlink/error.hpp"
#include "vlink/io.hpp"
#include "vlink/matrix.hpp"
#include "vlink/metrics.hpp"
#include "vlink/objectives.hpp"
#include "vlink/random.hpp"

namespace vlink {

struct HeadParams {
  Matrix w_proj;  // D x H
  Matrix b_proj;  // 1 x H
  Matrix w_cls;   // H x V
  Matrix b_cls;   // 1 x V
  std::optional<FusionParams> fusion;

  std::size_t input_dim() const noexcept { return w_proj.rows(); }
  std::size_t hidden_dim() const noexcept { return w_proj.cols(); }
  std::size_t vendor_count() const noexcept { return w_cls.cols(); }

  /// Named views of every trainable tensor, in checkpoint order.
  std::vector<std::pair<std::string, Matrix*>> tensors() {
    std::vector<std::pair<std::string, Matrix*>> t{
        {"w_proj", &w_proj}, {"b_proj", &b_proj}, {"w_cls", &w_cls}, {"b_cls", &b_cls}};
    if (fusion)
      for (std::size_t i = 0; i < fusion->tensors.size(); ++i) t.emplace_back(fusion->names[i], &fusion->tensors[i]);
    return t;
  }
  std::vector<std::pair<std::string, const Matrix*>> tensors() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : const_cast<HeadParams*>(this)->tensors()) out.emplace_back(name, m);
    return out;
  }

  HeadParams zeros_like() const {
    HeadParams z = *this;
    for (auto& [name, m] : z.tensors()) *m = Matrix(m->rows(), m->cols());
    return z;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += m->size();
    return n;
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline HeadParams init_head(std::size_t input_dim, std::size_t hidden_dim, std::size_t vendors, std::uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1 || vendors < 1) throw UsageError("init_head: dimensions must be >= 1");
  Rng rng(seed);
  auto fill = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    const double s = 1.0 / std::sqrt(static_cast<double>(r));
    for (double& v : m.flat()) v = rng.uniform(-s, s);
    return m;
  };
  HeadParams p;
  p.w_proj = fill(input_dim, hidden_dim);
  p.b_proj = Matrix(1, hidden_dim);
  p.w_cls = fill(hidden_dim, vendors);
  p.b_cls = Matrix(1, vendors);
  return p;
}

/// Head whose projection is the identity and whose classifier is zero:
/// encode() returns the (normalized) input unchanged.
inline HeadParams identity_head(std::size_t dim, std::size_t vendors = 1) {
  HeadParams p;
  p.w_proj = identity(dim);
  p.b_proj = Matrix(1, dim);
  p.w_cls = Matrix(dim, vendors);
  p.b_cls = Matrix(1, vendors);
  return p;
}

inline std::vector<double> flatten(const HeadParams& p) {
  std::vector<double> out;
  out.reserve(p.parameter_count());
  for (const auto& [name, m] : p.tensors()) out.insert(out.end(), m->flat().begin(), m->flat().end());
  return out;
}

inline void unflatten(std::span<const double> flat, HeadParams& p) {
  if (flat.size() != p.parameter_count()) throw UsageError("unflatten: length mismatch");
  std::size_t off = 0;
  for (auto& [name, m] : p.tensors()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), m->size(), m->flat().begin());
    off += m->size();
  }
}

// ---------------------------------------------------------------------------
// Objectives and configuration

enum class Objective { ce, ce_supcon, ce_triplet, supcon, triplet };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::ce: return "ce";
    case Objective::ce_supcon: return "ce_supcon";
    case Objective::ce_triplet: return "ce_triplet";
    case Objective::supcon: return "supcon";
    case Objective::triplet: return "triplet";
  }
  return "ce";
}

inline std::optional<Objective> objective_from_string(std::string_view s) {
  for (auto o : {Objective::ce, Objective::ce_supcon, Objective::ce_triplet, Objective::supcon, Objective::triplet})
    if (to_string(o) == s) return o;
  return std::nullopt;
}

inline bool uses_ce(Objective o) { return o == Objective::ce || o == Objective::ce_supcon || o == Objective::ce_triplet; }
inline bool uses_supcon(Objective o) { return o == Objective::ce_supcon || o == Objective::supcon; }
inline bool uses_triplet(Objective o) { return o == Objective::ce_triplet || o == Objective::triplet; }
inline bool is_contrastive(Objective o) { return uses_supcon(o) || uses_triplet(o); }

/// Configured weights with the terms the objective does not use zeroed.
inline LossWeights active_weights(Objective o, const LossWeights& w) {
  LossWeights a{0, 0, 0, 0};
  if (uses_ce(o)) a.ce = w.ce;
  if (uses_supcon(o)) a.supcon = w.supcon;
  if (uses_triplet(o)) a.triplet = w.triplet;
  return a;
}

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 32;
  double temperature = kDefaultTemperature;
  double triplet_margin = kDefaultTripletMargin;
  std::size_t in_batch_negatives = kDefaultInBatchNegatives;
  LossWeights loss_weights{};
  std::size_t hidden_dim = 256;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  std::size_t samples_per_vendor = 4;  // group size used by the contrastive batch sampler
  std::uint64_t seed = 1111;

  void validate(Objective objective) const {
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0) ||
        weight_decay < 0)
      throw UsageError("train config: optimizer constants out of range");
    if (!(temperature > 0) || triplet_margin < 0) throw UsageError("train config: temperature/margin out of range");
    if (batch_size < 1 || hidden_dim < 1) throw UsageError("train config: batch_size and hidden_dim must be >= 1");
    if (is_contrastive(objective) && (batch_size < 2 || samples_per_vendor < 2))
      throw UsageError("train config: contrastive objectives need batch_size >= 2 and samples_per_vendor >= 2");
    if (!active_weights(objective, loss_weights).any_positive())
      throw UsageError("train config: objective has no positive loss weight");
  }
};

/// Learning rate at 1-based global `step`: linear warmup to `lr` over
/// `warmup_steps`, then linear decay reaching 0 at `total_steps`.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (total_steps <= cfg.warmup_steps) return cfg.lr;
  if (step >= total_steps) return 0.0;
  return cfg.lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - cfg.warmup_steps);
}

// ---------------------------------------------------------------------------
// Forward / backward

struct HeadForward {
  Matrix input;   // fused input when the head owns a fusion, else a copy of x
  Matrix hidden;  // projection output z
  Matrix rep;     // z normalized row-wise
  Matrix logits;
};

namespace detail {

inline void add_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias(0, j);
  }
}

inline Matrix column_sums(const Matrix& m) {
  Matrix s(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s(0, j) += m(i, j);
  return s;
}

inline void check_head_input(const HeadParams& p, const Matrix& x, const Matrix* image) {
  if (x.cols() != p.input_dim())
    throw DataError("head: input dim " + std::to_string(x.cols()) + " but head expects " +
                    std::to_string(p.input_dim()));
  if (p.fusion) {
    if (!image) throw UsageError("head: learned fusion needs the image matrix");
    if (!image->same_shape(x)) throw DataError("head: text/image shapes differ");
  }
}

}  // namespace detail

inline HeadForward head_forward(const HeadParams& p, const Matrix& x, const Matrix* image = nullptr) {
  detail::check_head_input(p, x, image);
  HeadForward f;
  f.input = p.fusion ? row_normalized(fuse_learned_raw(x, *image, *p.fusion)) : x;
  f.hidden = matmul(f.input, p.w_proj);
  detail::add_bias(f.hidden, p.b_proj);
  f.rep = row_normalized(f.hidden);
  f.logits = matmul(f.hidden, p.w_cls);
  detail::add_bias(f.logits, p.b_cls);
  return f;
}

struct HeadLoss {
  double loss = 0.0;
  double ce = 0.0;
  double supcon = 0.0;
  double triplet = 0.0;
  HeadParams grads;
};

/// Weighted objective on one batch plus its gradient for every head tensor.
inline HeadLoss head_loss(const HeadParams& p, const Matrix& x, const Matrix* image, std::span<const int> labels,
                          const TrainConfig& cfg, Objective objective) {
  const auto f = head_forward(p, x, image);
  const LossWeights w = active_weights(objective, cfg.loss_weights);
  const std::size_t n = x.rows();

  std::vector<LossOutput> parts;
  std::vector<LossTerm> terms;
  parts.reserve(3);
  HeadLoss out;
  if (w.ce > 0) {
    parts.push_back(ce_loss(f.logits, labels));
    out.ce = parts.back().loss;
    terms.push_back({LossKind::ce, nullptr, GradGroup::logits});
  }
  if (w.supcon > 0) {
    parts.push_back(supcon_loss(f.rep, labels, cfg.temperature));
    out.supcon = parts.back().loss;
    terms.push_back({LossKind::supcon, nullptr, GradGroup::representation});
  }
  if (w.triplet > 0) {
    parts.push_back(batch_triplet_loss(f.rep, labels, cfg.triplet_margin, cfg.in_batch_negatives));
    out.triplet = parts.back().loss;
    terms.push_back({LossKind::triplet, nullptr, GradGroup::representation});
  }
  for (std::size_t i = 0; i < terms.size(); ++i) terms[i].value = &parts[i];
  auto joint = joint_loss(terms, w);
  out.loss = joint.loss;

  Matrix d_hidden(n, p.hidden_dim());
  out.grads = p.zeros_like();
  if (auto it = joint.grads.find(GradGroup::logits); it != joint.grads.end()) {
    const Matrix& d_logits = it->second;
    out.grads.w_cls = matmul_tn(f.hidden, d_logits);
    out.grads.b_cls = detail::column_sums(d_logits);
    d_hidden += matmul_nt(d_logits, p.w_cls);
  }
  if (auto it = joint.grads.find(GradGroup::representation); it != joint.grads.end()) {
    std::vector<double> tmp(p.hidden_dim());
    for (std::size_t i = 0; i < n; ++i) {
      detail::normalize_backward(f.hidden.row(i), it->second.row(i), tmp);
      auto dh = d_hidden.row(i);
      for (std::size_t j = 0; j < tmp.size(); ++j) dh[j] += tmp[j];
    }
  }
  out.grads.w_proj = matmul_tn(f.input, d_hidden);
  out.grads.b_proj = detail::column_sums(d_hidden);
  if (p.fusion) {
    Matrix d_input = matmul_nt(d_hidden, p.w_proj);
    out.grads.fusion = fuse_learned_backward(x, *image, *p.fusion, d_input);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Matrix logits;
  std::vector<int> labels;  // argmax, ties to the smallest class index
};

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows(), 0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline Prediction predict(const HeadParams& p, const Matrix& x, const Matrix* image = nullptr) {
  auto f = head_forward(p, x, image);
  Prediction pr;
  pr.labels = argmax_rows(f.logits);
  pr.logits = std::move(f.logits);
  return pr;
}

/// Retrieval representations: normalized projection output.
inline EmbeddingMatrix encode(const HeadParams& p, const EmbeddingMatrix& x, const EmbeddingMatrix* image = nullptr) {
  if (image && image->ids != x.ids) throw DataError("encode: text and image ids are not aligned");
  auto f = head_forward(p, x.data, image ? &image->data : nullptr);
  EmbeddingMatrix out{x.ids, std::move(f.rep), true};
  for (std::size_t i = 0; i < out.rows(); ++i)
    if (norm2(out.data.row(i)) == 0.0) out.normalized = false;
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Epoch batches. Plain objectives shuffle and chunk. Contrastive objectives
/// shuffle each vendor's samples into groups of `samples_per_vendor` (a
/// trailing single sample joins the previous group), shuffle the groups and
/// pack them into batches, so every label in a batch has a positive. Vendors
/// with a single sample cannot form a group and are left out.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const int> labels, const TrainConfig& cfg,
                                                          bool contrastive, std::uint64_t epoch_seed) {
  Rng rng(epoch_seed);
  std::vector<std::vector<std::size_t>> batches;
  if (!contrastive) {
    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size)
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)));
    return batches;
  }
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  const std::size_t k = std::min(cfg.samples_per_vendor, cfg.batch_size);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 2) continue;
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t i = 0; i < idx.size(); i += k) {
      std::vector<std::size_t> g(idx.begin() + static_cast<std::ptrdiff_t>(i),
                                 idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + k)));
      if (g.size() == 1)
        groups.back().push_back(g.front());
      else
        groups.push_back(std::move(g));
    }
  }
  rng.shuffle(std::span<std::vector<std::size_t>>(groups));
  std::vector<std::size_t> cur;
  for (auto& g : groups) {
    if (!cur.empty() && cur.size() + g.size() > cfg.batch_size) {
      batches.push_back(std::move(cur));
      cur.clear();
    }
    cur.insert(cur.end(), g.begin(), g.end());
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

// ---------------------------------------------------------------------------
// Training

/// Labeled training rows; `image` is only read when the head owns a learned
/// fusion, in which case `x` holds the text side.
struct TrainingData {
  const Matrix* x = nullptr;
  const Matrix* image = nullptr;
  std::span<const int> labels;

  std::size_t rows() const { return x ? x->rows() : 0; }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_macro_f1 = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;  // 0 when no epoch ran
  std::size_t steps = 0;
  std::size_t skipped_singleton_samples = 0;
};

/// AdamW state for a HeadParams layout.
class AdamW {
 public:
  AdamW(const HeadParams& like, const TrainConfig& cfg) : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(HeadParams& params, const HeadParams& grads, double lr) {
    ++t_;
    b1t_ *= cfg_.beta1;
    b2t_ *= cfg_.beta2;
    auto ps = params.tensors();
    auto gs = grads.tensors();
    auto ms = m_.tensors();
    auto vs = v_.tensors();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const bool decay = !is_bias(ps[k].first);
      auto p = ps[k].second->flat();
      auto g = gs[k].second->flat();
      auto m = ms[k].second->flat();
      auto v = vs[k].second->flat();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / (1.0 - b1t_);
        const double vhat = v[i] / (1.0 - b2t_);
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + (decay ? cfg_.weight_decay * p[i] : 0.0));
      }
    }
  }

 private:
  static bool is_bias(std::string_view name) {
    return name == "b_proj" || name == "b_cls" || name == "fusion.b_gate";
  }

  TrainConfig cfg_;
  HeadParams m_, v_;
  std::size_t t_ = 0;
  double b1t_ = 1.0, b2t_ = 1.0;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.row(idx[i]).begin(), m.cols(), out.row(i).begin());
  return out;
}

inline void require_positive_per_label(std::span<const int> labels, std::size_t batch_index) {
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  for (auto [label, c] : counts)
    if (c < 2)
      throw DataError("batch " + std::to_string(batch_index) + " contains singleton label " + std::to_string(label));
}

/// Nearest-class-centroid labels on representations; used to score
/// validation epochs for objectives without a trained classifier.
inline std::vector<int> nearest_centroid(const Matrix& train_rep, std::span<const int> train_labels,
                                         const Matrix& query_rep, std::size_t vendors) {
  Matrix c(vendors, train_rep.cols());
  for (std::size_t i = 0; i < train_rep.rows(); ++i) {
    auto cr = c.row(static_cast<std::size_t>(train_labels[i]));
    auto tr = train_rep.row(i);
    for (std::size_t j = 0; j < cr.size(); ++j) cr[j] += tr[j];
  }
  c = row_normalized(std::move(c));
  return argmax_rows(matmul_nt(query_rep, c));
}

inline double validation_loss(const HeadParams& p, const TrainingData& val, const TrainConfig& cfg, Objective obj) {
  std::vector<std::size_t> keep;
  if (is_contrastive(obj)) {
    std::map<int, int> counts;
    for (int l : val.labels) ++counts[l];
    for (std::size_t i = 0; i < val.labels.size(); ++i)
      if (counts[val.labels[i]] >= 2) keep.push_back(i);
  } else {
    for (std::size_t i = 0; i < val.labels.size(); ++i) keep.push_back(i);
  }
  if (keep.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  Matrix x = gather_rows(*val.x, keep);
  std::optional<Matrix> im;
  if (val.image) im = gather_rows(*val.image, keep);
  std::vector<int> l;
  for (auto i : keep) l.push_back(val.labels[i]);
  return head_loss(p, x, im ? &*im : nullptr, l, cfg, obj).loss;
}

}  // namespace detail

/// Trains `params` and returns the parameters of the best validation epoch
/// (max macro-F1, earliest on ties; the last epoch when there is no
/// validation data). Deterministic for a fixed config seed.
inline std::pair<HeadParams, TrainHistory> train_head(HeadParams params, const TrainingData& train,
                                                      const TrainingData& val, const TrainConfig& cfg,
                                                      Objective objective) {
  cfg.validate(objective);
  if (!train.x || train.labels.size() != train.rows()) throw UsageError("train_head: training rows/labels mismatch");
  if (val.x && val.labels.size() != val.rows()) throw UsageError("train_head: validation rows/labels mismatch");
  for (int l : train.labels)
    if (l < 0 || static_cast<std::size_t>(l) >= params.vendor_count())
      throw DataError("train_head: label " + std::to_string(l) + " outside [0, " +
                      std::to_string(params.vendor_count()) + ")");

  TrainHistory history;
  if (cfg.max_epochs == 0) return {std::move(params), std::move(history)};

  const bool contrastive = is_contrastive(objective);
  std::vector<std::vector<std::vector<std::size_t>>> plan;
  std::size_t total_steps = 0;
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    plan.push_back(make_batches(train.labels, cfg, contrastive, derive_seed(cfg.seed, e)));
    total_steps += plan.back().size();
  }
  if (contrastive) {
    std::map<int, int> counts;
    for (int l : train.labels) ++counts[l];
    for (int l : train.labels)
      if (counts[l] < 2) ++history.skipped_singleton_samples;
  }

  AdamW opt(params, cfg);
  HeadParams best = params;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  const bool have_val = val.x && val.rows() > 0;

  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t b = 0; b < plan[e].size(); ++b) {
      const auto& idx = plan[e][b];
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(train.labels[i]);
      if (contrastive) detail::require_positive_per_label(labels, b);
      Matrix x = detail::gather_rows(*train.x, idx);
      std::optional<Matrix> im;
      if (params.fusion) im = detail::gather_rows(*train.image, idx);
      auto hl = head_loss(params, x, im ? &*im : nullptr, labels, cfg, objective);
      ++history.steps;
      if (!std::isfinite(hl.loss))
        throw NumericError("non-finite loss at step " + std::to_string(history.steps));
      opt.step(params, hl.grads, scheduled_lr(cfg, history.steps, total_steps));
      loss_sum += hl.loss;
      ++loss_n;
    }

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.train_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    if (have_val) {
      std::vector<int> pred;
      if (uses_ce(objective)) {
        pred = predict(params, *val.x, val.image).labels;
      } else {
        auto tr = head_forward(params, *train.x, train.image);
        auto vr = head_forward(params, *val.x, val.image);
        pred = detail::nearest_centroid(tr.rep, train.labels, vr.rep, params.vendor_count());
      }
      rec.val_macro_f1 = classification_report(pred, val.labels, params.vendor_count()).macro_f1;
      rec.val_loss = detail::validation_loss(params, val, cfg, objective);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);

    const double score = have_val ? rec.val_macro_f1 : static_cast<double>(e);
    if (score > best_f1) {
      best_f1 = score;
      best = params;
      history.selected_epoch = e + 1;
      since_best = 0;
    } else if (++since_best >= cfg.patience && cfg.patience > 0) {
      break;
    }
  }
  return {std::move(best), std::move(history)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "VLCK v1\n", u8 fusion code (0 none, 1 attention, 2 gated), u64 tensor
// count, then per tensor {u64 name length, name, u64 rows, u64 cols}, then all
// tensor payloads as little-endian f64 in table order, then u64 FNV-1a of all
// preceding bytes.

inline constexpr std::string_view kCheckpointMagic = "VLCK v1\n";

inline std::string to_checkpoint_bytes(const HeadParams& p) {
  io::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  std::uint8_t code = 0;
  if (p.fusion) code = p.fusion->strategy == FusionStrategy::attention ? 1 : 2;
  w.put_u8(code);
  const auto ts = p.tensors();
  w.put_u64(ts.size());
  for (const auto& [name, m] : ts) {
    w.put_u64(name.size());
    w.put_bytes(name);
    w.put_u64(m->rows());
    w.put_u64(m->cols());
  }
  for (const auto& [name, m] : ts)
    for (double v : m->flat()) w.put_f64(v);
  const auto sum = io::fnv1a(w.bytes());
  w.put_u64(sum);
  return w.take();
}

struct HeadShape {
  std::size_t input_dim, hidden_dim, vendors;
  friend bool operator==(const HeadShape&, const HeadShape&) = default;
};

inline HeadShape shape_of(const HeadParams& p) { return {p.input_dim(), p.hidden_dim(), p.vendor_count()}; }

/// Parses a checkpoint; the shape table must be self-consistent and, when
/// `expect` is given, match it.
inline HeadParams from_checkpoint_bytes(std::string_view buf, std::optional<HeadShape> expect = {}) {
  if (!buf.starts_with(kCheckpointMagic)) throw DataError("checkpoint: bad magic");
  if (buf.size() < kCheckpointMagic.size() + 8) throw DataError("checkpoint: truncated");
  io::ByteReader tail(buf.substr(buf.size() - 8));
  if (tail.get_u64() != io::fnv1a(buf.substr(0, buf.size() - 8))) throw DataError("checkpoint: checksum mismatch");
  io::ByteReader r(buf.substr(0, buf.size() - 8));
  r.get_bytes(kCheckpointMagic.size());
  const auto code = r.get_u8();
  if (code > 2) throw DataError("checkpoint: unknown fusion code");
  const auto count = r.get_u64();
  if (count > 64) throw DataError("checkpoint: implausible tensor count");
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> table;
  for (std::size_t i = 0; i < count; ++i) {
    const auto len = r.get_u64();
    if (len > 256) throw DataError("checkpoint: implausible tensor name");
    std::string name(r.get_bytes(len));
    const auto rows = r.get_u64(), cols = r.get_u64();
    table.push_back({std::move(name), {rows, cols}});
  }
  auto find = [&](std::string_view name) -> std::pair<std::size_t, std::size_t> {
    for (const auto& [n, s] : table)
      if (n == name) return s;
    throw DataError("checkpoint: missing tensor '" + std::string(name) + "'");
  };
  const auto [d, h] = find("w_proj");
  const auto v = find("w_cls").second;
  HeadParams p;
  p.w_proj = Matrix(d, h);
  p.b_proj = Matrix(1, h);
  p.w_cls = Matrix(h, v);
  p.b_cls = Matrix(1, v);
  if (code) p.fusion = init_fusion_params(code == 1 ? FusionStrategy::attention : FusionStrategy::gated, d, 0);
  auto ts = p.tensors();
  if (ts.size() != table.size()) throw DataError("checkpoint: tensor table does not match the head layout");
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i].first != table[i].first || ts[i].second->rows() != table[i].second.first ||
        ts[i].second->cols() != table[i].second.second)
      throw DataError("checkpoint: shape table inconsistent at tensor '" + table[i].first + "'");
  }
  if (expect && shape_of(p) != *expect)
    throw DataError("checkpoint: shape (" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(v) +
                    ") does not match the expected head");
  for (auto& [name, m] : ts)
    for (double& x : m->flat()) x = r.get_f64();
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");
  for (const auto& [name, m] : ts)
    if (!all_finite(m->flat())) throw DataError("checkpoint: non-finite entry in '" + name + "'");
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const HeadParams& p) {
  io::write_file_atomic(path, to_checkpoint_bytes(p));
}

inline HeadParams load_checkpoint(const std::filesystem::path& path, std::optional<HeadShape> expect = {}) {
  return from_checkpoint_bytes(io::read_file(path), expect);
}

}  // namespace vlink
