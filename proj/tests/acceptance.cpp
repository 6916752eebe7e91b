// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
//
//   vlink_acceptance            run all criteria
//   vlink_acceptance --only N   run criterion N (1..10)
//
// Exit status is 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "vlink/vlink.hpp"

using namespace vlink;
using namespace vlink::oracles;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr std::size_t kGradInstances = 20;
constexpr double kGradSeconds = 30.0;
constexpr double kSupconTol = 1e-9;
constexpr double kCeTol = 1e-12;
constexpr double kNtxentTol = 1e-9;
constexpr double kScoreTol = 1e-12;
constexpr double kMetricTol = 1e-12;
constexpr double kMacroF1Floor = 0.95;
constexpr double kDirectionalSeconds = 120.0;
constexpr double kSearchSeconds = 2.0;
constexpr double kSpeedup = 2.0;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix gaussian(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& x : m.flat()) x = rng.normal();
  return m;
}

EmbeddingMatrix unit_embeddings(Rng& rng, std::size_t n, std::size_t d) {
  EmbeddingMatrix m;
  for (std::size_t i = 0; i < n; ++i) m.ids.push_back("d" + std::to_string(i));
  m.data = row_normalized(gaussian(rng, n, d));
  m.normalized = true;
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto rows = run_gradcheck_suite(20240601, kGradInstances, kGradEps, kGradTol);
  const double secs = seconds_since(t0);
  Outcome o{secs < kGradSeconds, ""};
  for (const auto& r : rows) {
    o.pass = o.pass && r.passed && r.instances == kGradInstances;
    o.detail += fmt("%s=%.2e ", r.name.c_str(), r.max_rel_error);
  }
  o.detail += fmt("(tol %.0e, eps %.0e, %zu instances, %.1fs < %.0fs)", kGradTol, kGradEps, kGradInstances, secs,
                  kGradSeconds);
  return o;
}

Outcome loss_oracles() {
  Rng rng(2);
  double supcon_err = 0.0;
  std::size_t batches = 0;
  for (std::size_t n = 2; n <= 16; ++n)
    for (int rep = 0; rep < 20; ++rep, ++batches) {
      const std::size_t d = 2 + rng.below(14);
      // every label appears at least twice so each anchor has a positive
      std::vector<int> labels(n);
      const int classes = 1 + static_cast<int>(rng.below(n / 2));
      for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i < 2 * static_cast<std::size_t>(classes) ? i / 2 : rng.below(classes));
      rng.shuffle(std::span<int>(labels));
      const auto z = row_normalized(gaussian(rng, n, d));
      const double tau = 0.05 + rng.uniform();
      supcon_err = std::max(supcon_err, std::abs(supcon_loss(z, labels, tau).loss - supcon_brute(z, labels, tau)));
    }

  double ce_err = 0.0;
  for (std::size_t c = 2; c <= 64; ++c) {
    std::vector<int> labels(3);
    for (auto& l : labels) l = static_cast<int>(rng.below(c));
    ce_err = std::max(ce_err, std::abs(ce_loss(Matrix(3, c, rng.normal()), labels).loss - std::log(double(c))));
  }

  // 2x2: L = (mean_i log1p(exp(S_ij - S_ii)) + mean_j log1p(exp(S_ij - S_jj))) / 2 with S = T V^T / tau
  double nt_err = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto t = row_normalized(gaussian(rng, 2, 3)), v = row_normalized(gaussian(rng, 2, 3));
    const double tau = 0.05 + rng.uniform();
    double s[2][2];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) s[i][j] = dot(t.row(i), v.row(j)) / tau;
    const double rows = (std::log1p(std::exp(s[0][1] - s[0][0])) + std::log1p(std::exp(s[1][0] - s[1][1]))) / 2;
    const double cols = (std::log1p(std::exp(s[1][0] - s[0][0])) + std::log1p(std::exp(s[0][1] - s[1][1]))) / 2;
    nt_err = std::max(nt_err, std::abs(ntxent_itc_loss(t, v, tau).loss - (rows + cols) / 2));
  }
  const Matrix e{{1, 0}, {0, 1}};
  nt_err = std::max(nt_err, std::abs(ntxent_itc_loss(e, e, 1.0).loss - std::log1p(std::exp(-1.0))));

  return {supcon_err <= kSupconTol && ce_err <= kCeTol && nt_err <= kNtxentTol,
          fmt("supcon max|diff|=%.1e over %zu batches (tol %.0e); ce max|diff|=%.1e (tol %.0e); "
              "ntxent 2x2 max|diff|=%.1e (tol %.0e)",
              supcon_err, batches, kSupconTol, ce_err, kCeTol, nt_err, kNtxentTol)};
}

Outcome index_exactness() {
  Rng rng(3);
  std::size_t mismatched = 0, instances = 100, par_diff = 0;
  double worst = 0.0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = 1 + rng.below(2000), d = 1 + rng.below(256), nq = 1 + rng.below(8);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 50));
    const auto docs = unit_embeddings(rng, n, d);
    const auto idx = build_index(docs);
    const auto q = gaussian(rng, nq, d);
    const auto serial = search(idx, q, k, {1});
    const auto par = search(idx, q, k, {4});
    for (std::size_t i = 0; i < nq; ++i) {
      const auto want = naive_top(docs, q.row(i), k);
      for (std::size_t r = 0; r < k; ++r) {
        if (idx.ids[serial[i][r].doc] != want[r].first) ++mismatched;
        worst = std::max(worst, std::abs(serial[i][r].score - want[r].second));
        if (par[i][r].doc != serial[i][r].doc || par[i][r].score != serial[i][r].score) ++par_diff;
      }
    }
  }
  return {mismatched == 0 && worst <= kScoreTol && par_diff == 0,
          fmt("%zu instances: id mismatches %zu, max score diff %.1e (tol %.0e), parallel!=serial %zu", instances,
              mismatched, worst, kScoreTol, par_diff)};
}

Outcome metric_oracles() {
  Rng rng(4);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto run = random_run(rng);
    const auto want = oracle(run, 10);
    const auto cmp = [&](const MetricReport& got, const std::map<int, double>& w) {
      if (got.per_vendor.size() != w.size()) worst = kInf;
      for (const auto& [v, x] : w) worst = std::max(worst, std::abs(got.per_vendor.at(v) - x));
    };
    cmp(mrr_at_k(run, 10), want.mrr);
    cmp(r_precision_at_x(run), want.rprec);
    cmp(macro_f1_at_x(run), want.f1);
  }

  // vendors 0, 1, 2 with R-Precision 1, 1/2, 0 and reciprocal ranks 1, 1/2, 1/5
  RetrievalRun fixture;
  fixture.doc_vendor = {{"a1", 0}, {"a2", 0}, {"b1", 1}, {"b2", 1}, {"c1", 2}, {"c2", 2}};
  fixture.queries = {{"qa", 0, {"a1", "a2", "b1", "b2", "c1", "c2"}},
                     {"qb", 1, {"a1", "b1", "a2", "b2", "c1", "c2"}},
                     {"qc", 2, {"a1", "a2", "b1", "b2", "c1", "c2"}}};
  const auto rp = r_precision_at_x(fixture);
  const auto mrr = mrr_at_k(fixture, 10);
  const double mrr_mean = (1.0 + 0.5 + 0.2) / 3.0;
  const double mrr_std = std::sqrt((std::pow(1.0 - mrr_mean, 2) + std::pow(0.5 - mrr_mean, 2) + std::pow(0.2 - mrr_mean, 2)) / 3.0);
  const bool fixture_ok = std::abs(rp.mean - 0.5) <= kMetricTol && std::abs(rp.std - std::sqrt(1.0 / 6.0)) <= kMetricTol &&
                          std::abs(mrr.mean - mrr_mean) <= kMetricTol && std::abs(mrr.std - mrr_std) <= kMetricTol;
  return {worst <= kMetricTol && fixture_ok,
          fmt("1000 runs: max per-vendor diff %.1e (tol %.0e); 3-vendor fixture r_prec %.4f+-%.4f, mrr %.4f+-%.4f %s",
              worst, kMetricTol, rp.mean, rp.std, mrr.mean, mrr.std, fixture_ok ? "ok" : "WRONG")};
}

Outcome ground_truth_oracle() {
  Rng rng(5);
  std::size_t wrong = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto n_ads = 1 + rng.below(200), n_ids = 1 + rng.below(50);
    std::vector<MaskedAd> ads;
    for (std::uint64_t i = 0; i < n_ads; ++i) {
      std::set<std::string> ids;
      for (auto k = 1 + rng.below(3); k > 0; --k) ids.insert("p" + std::to_string(rng.below(n_ids)));
      ads.push_back({"ad" + std::to_string(i), Region::South, "t [SEP] d", ids, {}});
    }
    const auto c = build_communities(ads);
    std::set<std::set<std::string>> got;
    for (const auto& m : c.members) got.emplace(m.begin(), m.end());
    if (got != bfs_components(ads)) ++wrong;
  }
  return {wrong == 0, fmt("1000 random bipartite graphs, %zu partitions differ from BFS components", wrong)};
}

Outcome masking() {
  Rng rng(6);
  std::size_t bad = 0;
  std::string first;
  for (int t = 0; t < 10000; ++t) {
    const auto raw = fuzz_string(rng);
    const auto problem = masking_violation(raw);
    if (!problem.empty() && bad++ == 0) first = problem;
  }
  const auto sample = mask_text("Call 555-123-4567, visit https://x.example/p or write to a@b.com");
  const bool formats = sample.find("<EMAILID-1>") != std::string::npos && sample.find("<LINK>") != std::string::npos &&
                       sample.find("NNN-NNN-NNNN") != std::string::npos;
  return {bad == 0 && formats, fmt("10000 fuzz strings, %zu violations%s%s; token formats %s", bad,
                                   bad ? ", first: " : "", first.c_str(), formats ? "verbatim" : "MISSING")};
}

ExperimentConfig directional_config(Modality m, Objective obj) {
  ExperimentConfig cfg;
  cfg.modality = m;
  cfg.retrieval = retrieval_mode_for(m);
  cfg.fusion = FusionStrategy::mean;
  cfg.objective = obj;
  return cfg;
}

struct DirectionalRun {
  double r_precision = 0.0;
  double macro_f1 = 0.0;
};

DirectionalRun directional(const Corpus& c, Modality m, Objective obj) {
  const auto report = run_identification(directional_config(m, obj), c).first;
  return {report.retrieval.regions.front().metrics.r_precision.mean, report.identification->macro_f1};
}

Outcome multitask_direction() {
  const auto t0 = Clock::now();
  const auto c = generate_synthetic(SyntheticSpec{});  // V=40, 10 ads/vendor, 5 images/ad, rho=0.7
  const auto ce = directional(c, Modality::multimodal, Objective::ce);
  const auto joint = directional(c, Modality::multimodal, Objective::ce_supcon);
  const double secs = seconds_since(t0);
  return {joint.r_precision >= ce.r_precision && ce.macro_f1 >= kMacroF1Floor && joint.macro_f1 >= kMacroF1Floor &&
              secs < kDirectionalSeconds,
          fmt("r_prec ce+supcon %.4f >= ce %.4f; macro_f1 ce %.4f, ce+supcon %.4f (floor %.2f); %.1fs < %.0fs",
              joint.r_precision, ce.r_precision, ce.macro_f1, joint.macro_f1, kMacroF1Floor, secs,
              kDirectionalSeconds)};
}

Outcome multimodal_direction() {
  const auto c = generate_synthetic(SyntheticSpec{});
  const auto mm = directional(c, Modality::multimodal, Objective::ce_supcon);
  const auto text = directional(c, Modality::text, Objective::ce_supcon);
  const auto vision = directional(c, Modality::vision, Objective::ce_supcon);
  return {mm.r_precision >= std::max(text.r_precision, vision.r_precision),
          fmt("r_prec multimodal %.4f >= max(text %.4f, vision %.4f)", mm.r_precision, text.r_precision,
              vision.r_precision)};
}

Outcome determinism() {
  const auto base = std::filesystem::temp_directory_path() / ("vlink_accept_" + std::to_string(std::random_device{}()));
  std::string reports[2], ckpts[2];
  for (int i = 0; i < 2; ++i) {
    const auto dir = base / std::to_string(i);
    SyntheticSpec spec;
    spec.vendors = 12;
    spec.seed = 77;
    save_corpus(dir / "corpus", generate_synthetic(spec));
    const auto corpus = load_corpus(dir / "corpus");
    auto cfg = directional_config(Modality::multimodal, Objective::ce_supcon);
    cfg.train.max_epochs = 8;
    cfg.seed = 99;
    const auto trained = train_identification(cfg, corpus);
    save_checkpoint(dir / "head.ckpt", trained.head);
    const auto head = load_checkpoint(dir / "head.ckpt");
    io::write_file_atomic(dir / "report.json", to_json(evaluate(cfg, corpus, &head)).dump(2));
    reports[i] = io::read_file(dir / "report.json");
    ckpts[i] = io::read_file(dir / "head.ckpt");
  }
  std::filesystem::remove_all(base);
  const bool same_report = reports[0] == reports[1], same_ckpt = ckpts[0] == ckpts[1];
  return {same_report && same_ckpt, fmt("EvalReport JSON %s (%zu bytes), checkpoint %s (%zu bytes)",
                                        same_report ? "identical" : "DIFFERS", reports[0].size(),
                                        same_ckpt ? "identical" : "DIFFERS", ckpts[0].size())};
}

Outcome performance() {
  Rng rng(10);
  const auto idx = build_index(unit_embeddings(rng, 10000, 256));
  const auto q = gaussian(rng, 1000, 256);
  auto timed = [&](std::size_t workers) {
    double best = kInf;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = Clock::now();
      const auto res = search(idx, q, 10, {workers});
      best = std::min(best, seconds_since(t0));
      if (res.size() != 1000) return kInf;
    }
    return best;
  };
  const double one = timed(1), four = timed(4);
  const double speedup = one / four;
  return {one < kSearchSeconds && speedup >= kSpeedup,
          fmt("1 worker %.3fs (< %.1fs); 4 workers %.3fs, speedup %.2fx (>= %.1fx); hardware threads %u", one,
              kSearchSeconds, four, speedup, kSpeedup, std::thread::hardware_concurrency())};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--only", only, "Run a single criterion (1..10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"gradient correctness", gradient_correctness},
      {"loss oracles", loss_oracles},
      {"index exactness", index_exactness},
      {"metric oracles", metric_oracles},
      {"ground-truth oracle", ground_truth_oracle},
      {"masking", masking},
      {"directional multitask", multitask_direction},
      {"directional multimodal", multimodal_direction},
      {"determinism", determinism},
      {"performance", performance},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
