#pragma once

// Independent brute-force references shared by the unit tests and the
// acceptance binary. Each one is written the slow, obvious way.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <queue>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vlink/communities.hpp"
#include "vlink/embedder.hpp"
#include "vlink/matrix.hpp"
#include "vlink/metrics.hpp"
#include "vlink/random.hpp"
#include "vlink/records.hpp"

namespace vlink::oracles {

/// Straight double loop over anchors, positives and the denominator set,
/// with no max-subtraction.
inline double supcon_brute(const Matrix& z, const std::vector<int>& labels, double tau) {
  const std::size_t n = z.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(z.row(i), z.row(a)) / tau);
    double acc = 0.0;
    int count = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      acc += -std::log(std::exp(dot(z.row(i), z.row(p)) / tau) / denom);
      ++count;
    }
    total += acc / count;
  }
  return total / static_cast<double>(n);
}

/// Random run: every vendor has at least one document and every query
/// ranks the full document set in a random order.
inline RetrievalRun random_run(Rng& rng) {
  const int vendors = 1 + static_cast<int>(rng.below(20));
  const std::size_t docs = static_cast<std::size_t>(vendors) + rng.below(200 - static_cast<std::size_t>(vendors) + 1);
  RetrievalRun run;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < docs; ++i) {
    const int v = i < static_cast<std::size_t>(vendors) ? static_cast<int>(i) : static_cast<int>(rng.below(vendors));
    ids.push_back("d" + std::to_string(i));
    run.doc_vendor[ids.back()] = v;
  }
  const auto nq = 1 + rng.below(30);
  for (std::uint64_t q = 0; q < nq; ++q) {
    auto ranked = ids;
    rng.shuffle(std::span<std::string>(ranked));
    run.queries.push_back({"q" + std::to_string(q), static_cast<int>(rng.below(vendors)), std::move(ranked)});
  }
  return run;
}

struct Oracle {
  std::map<int, double> mrr, rprec, f1;
};

/// Set-intersection formulation of all three metrics.
inline Oracle oracle(const RetrievalRun& run, std::size_t k) {
  std::map<int, std::set<std::string>> relevant;
  for (const auto& [d, v] : run.doc_vendor) relevant[v].insert(d);
  std::map<int, std::vector<double>> rr, rp;
  std::map<int, std::array<double, 3>> pooled;  // hits, retrieved, relevant
  for (const auto& q : run.queries) {
    const auto& rel = relevant[q.vendor];
    double r = 0.0;
    for (std::size_t i = 0; i < k && i < q.ranked.size(); ++i)
      if (rel.contains(q.ranked[i])) {
        r = 1.0 / static_cast<double>(i + 1);
        break;
      }
    rr[q.vendor].push_back(r);
    const std::size_t x = rel.size();
    std::set<std::string> top(q.ranked.begin(), q.ranked.begin() + static_cast<std::ptrdiff_t>(x));
    std::vector<std::string> inter;
    std::set_intersection(top.begin(), top.end(), rel.begin(), rel.end(), std::back_inserter(inter));
    rp[q.vendor].push_back(static_cast<double>(inter.size()) / static_cast<double>(x));
    pooled[q.vendor][0] += static_cast<double>(inter.size());
    pooled[q.vendor][1] += static_cast<double>(top.size());
    pooled[q.vendor][2] += static_cast<double>(x);
  }
  Oracle o;
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  for (auto& [v, xs] : rr) o.mrr[v] = mean(xs);
  for (auto& [v, xs] : rp) o.rprec[v] = mean(xs);
  for (auto& [v, p] : pooled) {
    const double prec = p[0] / p[1], rec = p[0] / p[2];
    o.f1[v] = p[0] == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
  }
  return o;
}

/// Breadth-first search over the explicit bipartite ad/identifier graph.
inline std::set<std::set<std::string>> bfs_components(const std::vector<MaskedAd>& ads) {
  std::map<std::string, std::vector<std::size_t>> by_ident;
  for (std::size_t i = 0; i < ads.size(); ++i)
    for (const auto& p : ads[i].identifiers) by_ident[p].push_back(i);
  std::vector<bool> seen(ads.size(), false);
  std::set<std::set<std::string>> out;
  for (std::size_t s = 0; s < ads.size(); ++s) {
    if (seen[s]) continue;
    std::set<std::string> comp;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = true;
    while (!q.empty()) {
      const auto i = q.front();
      q.pop();
      comp.insert(ads[i].id);
      for (const auto& p : ads[i].identifiers)
        for (auto j : by_ident[p])
          if (!seen[j]) {
            seen[j] = true;
            q.push(j);
          }
    }
    out.insert(std::move(comp));
  }
  return out;
}

/// Full scan with an independent score loop and a stable sort keyed on
/// (score desc, id asc).
inline std::vector<std::pair<std::string, double>> naive_top(const EmbeddingMatrix& docs, std::span<const double> q,
                                                      std::size_t k) {
  std::vector<double> qn(q.begin(), q.end());
  double n = 0.0;
  for (double v : qn) n += v * v;
  n = std::sqrt(n);
  if (n > 0 && std::abs(n - 1.0) > 1e-9)
    for (double& v : qn) v /= n;
  std::vector<std::pair<std::string, double>> all;
  for (std::size_t i = 0; i < docs.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < qn.size(); ++j) s += docs.data(i, j) * qn[j];
    all.emplace_back(docs.ids[i], s);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  all.resize(k);
  return all;
}

/// A random string seeded with phones (numeric and spelled), emails, URLs,
/// dates, post ids, stray digits and punctuation.
inline std::string fuzz_string(Rng& rng) {
  static const char* kWords[] = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};
  static const char* kFiller[] = {"hello", "new", "in", "town", "call", "text", "me", "@", ".", ",", "-", "(",
                                  ")", "www", "http", ":", "/", "<", ">", "[SEP]", "NN", "id", "post", "Ad"};
  std::string s;
  const auto parts = 1 + rng.below(8);
  for (std::uint64_t p = 0; p < parts; ++p) {
    if (!s.empty()) s += rng.uniform() < 0.8 ? " " : "";
    switch (rng.below(9)) {
      case 0: {
        for (int i = 0; i < 10; ++i) {
          if (i == 3 || i == 6) s += rng.uniform() < 0.5 ? "-" : " ";
          s += std::to_string(rng.below(10));
        }
        break;
      }
      case 1: {
        for (int i = 0; i < 10; ++i) s += std::string(i ? " " : "") + kWords[rng.below(10)];
        break;
      }
      case 2:
        s += "user" + std::to_string(rng.below(1000)) + "@mail" + std::to_string(rng.below(50)) + ".com";
        break;
      case 3:
        s += (rng.uniform() < 0.5 ? "https://site" : "www.page") + std::to_string(rng.below(100)) + ".com/x?y=" +
             std::to_string(rng.below(100));
        break;
      case 4:
        s += std::to_string(1 + rng.below(12)) + "/" + std::to_string(1 + rng.below(28)) + "/20" +
             std::to_string(10 + rng.below(10));
        break;
      case 5:
        s += "post id: " + std::to_string(rng.below(100000));
        break;
      case 6:
        s += std::to_string(rng.below(100000));
        break;
      case 7: {
        const auto n = rng.below(6);
        for (std::uint64_t i = 0; i < n; ++i) s.push_back(static_cast<char>(33 + rng.below(94)));
        break;
      }
      default:
        s += kFiller[rng.below(std::size(kFiller))];
    }
  }
  return s;
}

inline std::string strip_email_tokens(const std::string& s) {
  static const std::regex tok(R"(<EMAILID-\d+>)");
  return std::regex_replace(s, tok, "<EMAILID>");
}

/// Empty when `raw` masks cleanly and idempotently, otherwise a description
/// of the first violation.
inline std::string masking_violation(const std::string& raw) {
  static const std::regex email(R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z0-9]{2,})");
  static const std::regex url(R"((?:https?|ftp)://[^\s<>"]+|\bwww\.[^\s<>"]+)", std::regex::icase);
  const auto ids = extract_identifiers_from_text(raw);
  const std::string once = mask_text(raw, ids);
  if (mask_text(once, ids) != once) return "not idempotent: " + once;
  const std::string body = strip_email_tokens(once);
  if (std::regex_search(body, email)) return "email survives: " + once;
  if (std::regex_search(body, url)) return "url survives: " + once;
  for (char c : body)
    if (std::isdigit(static_cast<unsigned char>(c))) return "digit survives: " + once;
  if (!extract_identifiers_from_text(once).empty()) return "identifier survives: " + once;
  return {};
}

}  // namespace vlink::oracles
