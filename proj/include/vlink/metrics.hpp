#pragma once

// Retrieval metrics aggregated per vendor (mean and population std over
// vendors) and closed-set classification metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlink/error.hpp"

namespace vlink {

struct RankedQuery {
  std::string id;
  int vendor = 0;
  std::vector<std::string> ranked;  // best first, no duplicates
};

struct RetrievalRun {
  std::vector<RankedQuery> queries;
  std::map<std::string, int> doc_vendor;

  /// Number of documents per vendor.
  std::map<int, std::size_t> relevant_counts() const {
    std::map<int, std::size_t> c;
    for (const auto& [id, v] : doc_vendor) ++c[v];
    return c;
  }

  void validate() const {
    for (const auto& q : queries) {
      std::set<std::string_view> seen;
      for (const auto& d : q.ranked) {
        if (!doc_vendor.contains(d)) throw DataError("query '" + q.id + "' ranks unknown document '" + d + "'");
        if (!seen.insert(d).second) throw DataError("query '" + q.id + "' ranks '" + d + "' twice");
      }
    }
  }
};

struct MetricReport {
  std::string metric;
  std::map<int, double> per_vendor;
  std::map<int, std::size_t> support;  // queries per vendor
  double mean = 0.0;
  double std = 0.0;
  std::size_t query_count = 0;
  std::vector<std::string> flags;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// Mean and population standard deviation of `per_vendor`, in label order.
inline void finalize_report(MetricReport& r) {
  r.mean = 0.0;
  r.std = 0.0;
  if (r.per_vendor.empty()) {
    r.flags.push_back("empty");
    return;
  }
  const double n = static_cast<double>(r.per_vendor.size());
  for (const auto& [v, x] : r.per_vendor) r.mean += x;
  r.mean /= n;
  double ss = 0.0;
  for (const auto& [v, x] : r.per_vendor) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / n);
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["metric"] = r.metric;
  j["mean"] = r.mean;
  j["std"] = r.std;
  nlohmann::ordered_json pv = nlohmann::ordered_json::object();
  for (const auto& [v, x] : r.per_vendor) pv[std::to_string(v)] = x;
  j["per_vendor"] = std::move(pv);
  j["queries"] = r.query_count;
  j["flags"] = r.flags;
  return j;
}

/// What to do with a query whose vendor has no documents.
enum class ZeroRelevant { error, score_zero };

namespace detail {

inline std::size_t hits_in_prefix(const RankedQuery& q, const RetrievalRun& run, std::size_t cutoff) {
  std::size_t hits = 0;
  const std::size_t n = std::min(cutoff, q.ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (run.doc_vendor.at(q.ranked[i]) == q.vendor) ++hits;
  return hits;
}

inline void flag_zero_relevant(MetricReport& r, std::size_t n) {
  if (n) r.flags.push_back("queries_without_relevant_documents=" + std::to_string(n));
}

}  // namespace detail

/// Reciprocal rank of the first same-vendor document within the top k
/// (0 when absent), averaged per vendor.
inline MetricReport mrr_at_k(const RetrievalRun& run, std::size_t k = 10) {
  if (k < 1) throw UsageError("mrr_at_k: k must be >= 1");
  const auto counts = run.relevant_counts();
  MetricReport r;
  r.metric = "mrr@" + std::to_string(k);
  std::map<int, double> sums;
  std::size_t orphan = 0;
  for (const auto& q : run.queries) {
    double rr = 0.0;
    if (!counts.contains(q.vendor)) ++orphan;
    const std::size_t n = std::min(k, q.ranked.size());
    for (std::size_t i = 0; i < n; ++i)
      if (run.doc_vendor.at(q.ranked[i]) == q.vendor) {
        rr = 1.0 / static_cast<double>(i + 1);
        break;
      }
    sums[q.vendor] += rr;
    ++r.support[q.vendor];
  }
  for (const auto& [v, s] : sums) r.per_vendor[v] = s / static_cast<double>(r.support[v]);
  r.query_count = run.queries.size();
  detail::flag_zero_relevant(r, orphan);
  finalize_report(r);
  return r;
}

/// Hits within the top X over X, where X is the number of documents sharing
/// the query's vendor; averaged per vendor.
inline MetricReport r_precision_at_x(const RetrievalRun& run, ZeroRelevant policy = ZeroRelevant::error) {
  const auto counts = run.relevant_counts();
  MetricReport r;
  r.metric = "r_precision@x";
  std::map<int, double> sums;
  std::size_t orphan = 0;
  for (const auto& q : run.queries) {
    auto it = counts.find(q.vendor);
    double value = 0.0;
    if (it == counts.end()) {
      if (policy == ZeroRelevant::error)
        throw DataError("query '" + q.id + "': vendor " + std::to_string(q.vendor) + " has no documents");
      ++orphan;
    } else {
      value = static_cast<double>(detail::hits_in_prefix(q, run, it->second)) / static_cast<double>(it->second);
    }
    sums[q.vendor] += value;
    ++r.support[q.vendor];
  }
  for (const auto& [v, s] : sums) r.per_vendor[v] = s / static_cast<double>(r.support[v]);
  r.query_count = run.queries.size();
  detail::flag_zero_relevant(r, orphan);
  finalize_report(r);
  return r;
}

/// pooled: each vendor's top-X retrievals over all its queries are pooled
/// into one prediction set (precision = hits / retrieved, recall = hits /
/// sum of X). per_query_mean: F1 per query, averaged per vendor; kept for
/// sensitivity comparisons.
enum class MacroF1Mode { pooled, per_query_mean };

inline MetricReport macro_f1_at_x(const RetrievalRun& run, ZeroRelevant policy = ZeroRelevant::error,
                                  MacroF1Mode mode = MacroF1Mode::pooled) {
  const auto counts = run.relevant_counts();
  MetricReport r;
  r.metric = mode == MacroF1Mode::pooled ? "macro_f1@x" : "macro_f1@x_per_query";
  struct Pool {
    std::size_t hits = 0, retrieved = 0, relevant = 0;
    double f1_sum = 0.0;
  };
  auto f1 = [](std::size_t hits, std::size_t retrieved, std::size_t relevant) {
    if (hits == 0) return 0.0;
    const double p = static_cast<double>(hits) / static_cast<double>(retrieved);
    const double rc = static_cast<double>(hits) / static_cast<double>(relevant);
    return 2.0 * p * rc / (p + rc);
  };
  std::map<int, Pool> pools;
  std::size_t orphan = 0;
  for (const auto& q : run.queries) {
    auto& pool = pools[q.vendor];
    ++r.support[q.vendor];
    auto it = counts.find(q.vendor);
    if (it == counts.end()) {
      if (policy == ZeroRelevant::error)
        throw DataError("query '" + q.id + "': vendor " + std::to_string(q.vendor) + " has no documents");
      ++orphan;
      continue;
    }
    const std::size_t x = it->second;
    const std::size_t retrieved = std::min(x, q.ranked.size());
    const std::size_t hits = detail::hits_in_prefix(q, run, x);
    pool.hits += hits;
    pool.retrieved += retrieved;
    pool.relevant += x;
    pool.f1_sum += f1(hits, retrieved, x);
  }
  for (const auto& [v, pool] : pools)
    r.per_vendor[v] = mode == MacroF1Mode::pooled ? f1(pool.hits, pool.retrieved, pool.relevant)
                                                  : pool.f1_sum / static_cast<double>(r.support[v]);
  r.query_count = run.queries.size();
  detail::flag_zero_relevant(r, orphan);
  finalize_report(r);
  return r;
}

// ---------------------------------------------------------------------------
// Classification

struct ClassificationReport {
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double micro_f1 = 0.0;
  double weighted_f1 = 0.0;
  double macro_f1 = 0.0;
  std::map<int, double> per_class_f1;
  std::size_t samples = 0;

  friend bool operator==(const ClassificationReport&, const ClassificationReport&) = default;
};

/// Standard single-label metrics. Classes appearing in truth or preds are
/// scored; a predicted class absent from truth has F1 = 0 and counts toward
/// the macro average. Balanced accuracy averages recall over truth classes.
inline ClassificationReport classification_report(std::span<const int> preds, std::span<const int> truth,
                                                  std::size_t vendors = 0) {
  if (preds.size() != truth.size())
    throw UsageError("classification_report: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  for (auto s : {preds, truth})
    for (int l : s)
      if (l < 0 || (vendors && static_cast<std::size_t>(l) >= vendors))
        throw DataError("classification_report: label " + std::to_string(l) + " out of range");
  ClassificationReport r;
  r.samples = truth.size();
  if (truth.empty()) return r;
  std::map<int, std::size_t> tp, pred_n, true_n;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++pred_n[preds[i]];
    ++true_n[truth[i]];
    if (preds[i] == truth[i]) {
      ++tp[truth[i]];
      ++correct;
    }
  }
  std::set<int> classes;
  for (auto& [c, n] : pred_n) classes.insert(c);
  for (auto& [c, n] : true_n) classes.insert(c);
  double macro = 0.0, weighted = 0.0, recall_sum = 0.0;
  for (int c : classes) {
    const double t = static_cast<double>(tp[c]);
    const double pn = static_cast<double>(pred_n[c]);
    const double tn = static_cast<double>(true_n[c]);
    const double f = t > 0 ? 2.0 * t / (pn + tn) : 0.0;
    r.per_class_f1[c] = f;
    macro += f;
    weighted += f * tn;
    if (tn > 0) recall_sum += t / tn;
  }
  const double n = static_cast<double>(truth.size());
  r.accuracy = static_cast<double>(correct) / n;
  r.micro_f1 = r.accuracy;
  r.macro_f1 = macro / static_cast<double>(classes.size());
  r.weighted_f1 = weighted / n;
  r.balanced_accuracy = recall_sum / static_cast<double>(true_n.size());
  return r;
}

inline nlohmann::ordered_json to_json(const ClassificationReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["balanced_accuracy"] = r.balanced_accuracy;
  j["micro_f1"] = r.micro_f1;
  j["weighted_f1"] = r.weighted_f1;
  j["macro_f1"] = r.macro_f1;
  j["samples"] = r.samples;
  return j;
}

}  // namespace vlink
