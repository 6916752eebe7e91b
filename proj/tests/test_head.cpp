#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "vlink/eval.hpp"
#include "vlink/head.hpp"

using namespace vlink;
using vlink::testing::gaussian;
using vlink::testing::TempDir;

namespace {

/// Gaussian clusters around random unit centers; `spread` is per-coordinate.
struct Clusters {
  Matrix x;
  std::vector<int> labels;
};

Clusters make_clusters(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t dim, double spread) {
  Rng rng(seed);
  Matrix centers = row_normalized(gaussian(rng, classes, dim));
  Clusters c{Matrix(classes * per_class, dim), {}};
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      auto row = c.x.row(k * per_class + i);
      for (std::size_t j = 0; j < dim; ++j) row[j] = centers(k, j) + spread * rng.normal();
      normalize_in_place(row);
      c.labels.push_back(static_cast<int>(k));
    }
  return c;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

}  // namespace

TEST(InitHead, DeterministicZeroBiasesSeedSensitive) {
  const auto a = init_head(8, 4, 3, 42), b = init_head(8, 4, 3, 42), c = init_head(8, 4, 3, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.w_proj, c.w_proj);
  for (double v : a.b_proj.flat()) EXPECT_EQ(v, 0.0);
  for (double v : a.b_cls.flat()) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(8.0);
  for (double v : a.w_proj.flat()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(a.parameter_count(), 8u * 4 + 4 + 4 * 3 + 3);
}

TEST(Schedule, WarmupThenLinearDecay) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 50, 1000), 0.0005);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 100, 1000), 0.001);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 550, 1000), 0.0005);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 1000, 1000), 0.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 1, 1000), 1e-5);
}

TEST(Predict, TieBreakAndShiftInvariance) {
  HeadParams zero{Matrix(3, 2), Matrix(1, 2), Matrix(2, 4), Matrix(1, 4), std::nullopt};
  Rng rng(1);
  const auto x = gaussian(rng, 5, 3);
  const auto p = predict(zero, x);
  for (int l : p.labels) EXPECT_EQ(l, 0);
  for (double v : p.logits.flat()) EXPECT_EQ(v, 0.0);

  auto head = init_head(3, 2, 4, 9);
  auto shifted = head;
  for (double& b : shifted.b_cls.flat()) b += 17.25;
  EXPECT_EQ(predict(head, x).labels, predict(shifted, x).labels);
  EXPECT_EQ(predict(head, x).labels, predict(head, x).labels);
  EXPECT_THROW(predict(head, gaussian(rng, 2, 4)), DataError);
}

TEST(Encode, UnitRowsAndIdentityPassThrough) {
  Rng rng(2);
  auto emb = vlink::testing::unit_embeddings(rng, 6, 5);
  const auto out = encode(identity_head(5, 2), emb);
  EXPECT_LE(max_abs_diff(out.data, emb.data), 1e-15);
  EXPECT_EQ(out.ids, emb.ids);
  const auto head = init_head(5, 3, 2, 4);
  const auto enc = encode(head, emb);
  EXPECT_EQ(enc.dim(), 3u);
  EXPECT_TRUE(enc.normalized);
  for (std::size_t i = 0; i < enc.rows(); ++i) EXPECT_NEAR(norm2(enc.data.row(i)), 1.0, 1e-12);
  EXPECT_EQ(encode(head, emb), enc);
}

TEST(HeadGradient, ComposedObjectivesPassFiniteDifferences) {
  Rng rng(3);
  const auto c = make_clusters(7, 3, 4, 6, 0.5);
  for (auto obj : {Objective::ce, Objective::ce_supcon, Objective::supcon}) {
    auto head = init_head(6, 5, 3, rng.next_u64());
    for (double& b : head.b_proj.flat()) b = 0.1 * rng.normal();
    TrainConfig cfg;
    cfg.temperature = 0.3;
    ScalarLossFn fn = [&](std::span<const double> p, std::vector<double>* g) {
      HeadParams hp = head;
      unflatten(p, hp);
      auto out = head_loss(hp, c.x, nullptr, c.labels, cfg, obj);
      if (g) *g = flatten(out.grads);
      return out.loss;
    };
    EXPECT_LE(grad_check(fn, flatten(head), 1e-5), 1e-4) << to_string(obj);
  }
}

TEST(TrainHead, ZeroEpochsReturnsInit) {
  const auto c = make_clusters(1, 3, 10, 8, 0.2);
  const auto head = init_head(8, 4, 3, 5);
  TrainConfig cfg;
  cfg.max_epochs = 0;
  auto [out, hist] = train_head(head, {&c.x, nullptr, c.labels}, {}, cfg, Objective::ce);
  EXPECT_EQ(out, head);
  EXPECT_TRUE(hist.epochs.empty());
  EXPECT_EQ(hist.selected_epoch, 0u);
}

TEST(TrainHead, CeDescentOnFixedBatch) {
  const auto c = make_clusters(2, 4, 8, 10, 0.3);
  auto head = init_head(10, 6, 4, 11);
  TrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.warmup_steps = 0;
  cfg.weight_decay = 0.0;
  AdamW opt(head, cfg);
  double prev = head_loss(head, c.x, nullptr, c.labels, cfg, Objective::ce).loss;
  for (int s = 0; s < 10; ++s) {
    auto hl = head_loss(head, c.x, nullptr, c.labels, cfg, Objective::ce);
    opt.step(head, hl.grads, cfg.lr);
    const double now = head_loss(head, c.x, nullptr, c.labels, cfg, Objective::ce).loss;
    EXPECT_LE(now, prev + 1e-15) << "step " << s;
    prev = now;
  }
}

TEST(TrainHead, BitReproducible) {
  const auto c = make_clusters(3, 5, 12, 8, 0.3);
  const auto v = make_clusters(4, 5, 3, 8, 0.3);
  TrainConfig cfg;
  cfg.hidden_dim = 6;
  cfg.max_epochs = 4;
  cfg.batch_size = 8;
  for (auto obj : {Objective::ce, Objective::ce_supcon, Objective::triplet}) {
    auto [p1, h1] = train_head(init_head(8, 6, 5, 1), {&c.x, nullptr, c.labels}, {&v.x, nullptr, v.labels}, cfg, obj);
    auto [p2, h2] = train_head(init_head(8, 6, 5, 1), {&c.x, nullptr, c.labels}, {&v.x, nullptr, v.labels}, cfg, obj);
    EXPECT_EQ(p1, p2) << to_string(obj);
    ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
    for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
      EXPECT_EQ(h1.epochs[e].train_loss, h2.epochs[e].train_loss);
      EXPECT_EQ(h1.epochs[e].val_macro_f1, h2.epochs[e].val_macro_f1);
    }
    EXPECT_EQ(h1.selected_epoch, h2.selected_epoch);
    EXPECT_LE(h1.epochs.size(), cfg.max_epochs);
  }
}

TEST(TrainHead, SelectedEpochHasBestValidationF1) {
  const auto c = make_clusters(5, 6, 10, 8, 0.6);
  const auto v = make_clusters(6, 6, 4, 8, 0.6);
  TrainConfig cfg;
  cfg.hidden_dim = 8;
  cfg.max_epochs = 15;
  cfg.patience = 3;
  auto [p, h] = train_head(init_head(8, 8, 6, 2), {&c.x, nullptr, c.labels}, {&v.x, nullptr, v.labels}, cfg,
                           Objective::ce);
  ASSERT_GE(h.selected_epoch, 1u);
  const double best = h.epochs[h.selected_epoch - 1].val_macro_f1;
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    if (e + 1 < h.selected_epoch) {
      EXPECT_LT(h.epochs[e].val_macro_f1, best);
    }
    EXPECT_LE(h.epochs[e].val_macro_f1, best);
  }
}

TEST(TrainHead, LinearlySeparableReachesFullTrainAccuracy) {
  const auto c = make_clusters(8, 4, 15, 12, 0.05);
  TrainConfig cfg;
  cfg.hidden_dim = 8;
  cfg.max_epochs = 200;
  cfg.patience = 0;
  cfg.lr = 1e-2;
  auto [p, h] = train_head(init_head(12, 8, 4, 3), {&c.x, nullptr, c.labels}, {}, cfg, Objective::ce);
  EXPECT_EQ(accuracy(predict(p, c.x).labels, c.labels), 1.0);
}

TEST(TrainHead, ThreeVendorSyntheticCorpus) {
  SyntheticSpec spec;
  spec.vendors = 3;
  spec.ads_per_vendor = 40;
  spec.images_per_ad = 1;
  const auto corpus = generate_synthetic(spec);
  ExperimentConfig cfg;
  cfg.modality = Modality::text;
  cfg.train.max_epochs = 30;
  auto result = train_identification(cfg, corpus);
  const auto report = evaluate_identification(cfg, corpus, result.head);
  EXPECT_GE(report.macro_f1, 0.95);
}

TEST(TrainHead, ContrastiveBatchesHavePositives) {
  std::vector<int> labels;
  for (int v = 0; v < 9; ++v)
    for (int i = 0; i < 1 + v % 6; ++i) labels.push_back(v);
  TrainConfig cfg;
  auto batches = make_batches(labels, cfg, true, 5);
  std::size_t covered = 0;
  for (const auto& b : batches) {
    EXPECT_LE(b.size(), cfg.batch_size + cfg.samples_per_vendor);
    std::map<int, int> count;
    for (auto i : b) ++count[labels[i]];
    for (auto [l, n] : count) EXPECT_GE(n, 2) << "label " << l;
    covered += b.size();
  }
  std::size_t singles = 0;
  for (int v = 0; v < 9; ++v) singles += (1 + v % 6) == 1;
  EXPECT_EQ(covered, labels.size() - singles);
}

TEST(TrainHead, SingletonBatchRejectedByName) {
  const Matrix x{{1, 0}, {0, 1}, {1, 0}};
  const std::vector<int> labels{0, 1, 0};
  TrainConfig cfg;
  EXPECT_THROW(head_loss(init_head(2, 2, 2, 1), x, nullptr, labels, cfg, Objective::supcon), DataError);
}

TEST(Checkpoint, RoundtripAndRejection) {
  auto head = init_head(6, 4, 3, 77);
  head.fusion = init_fusion_params(FusionStrategy::gated, 6, 5);
  TempDir dir;
  save_checkpoint(dir / "h.ckpt", head);
  EXPECT_EQ(load_checkpoint(dir / "h.ckpt"), head);
  EXPECT_EQ(load_checkpoint(dir / "h.ckpt", HeadShape{6, 4, 3}), head);
  EXPECT_THROW(load_checkpoint(dir / "h.ckpt", HeadShape{6, 4, 4}), DataError);

  auto bytes = to_checkpoint_bytes(head);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 1;
  EXPECT_THROW(from_checkpoint_bytes(flipped), DataError);
  EXPECT_THROW(from_checkpoint_bytes(bytes.substr(0, 20)), DataError);
  EXPECT_THROW(from_checkpoint_bytes("nope"), DataError);
}
