#pragma once

#include <algorithm>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlink/error.hpp"
#include "vlink/io.hpp"
#include "vlink/records.hpp"

namespace vlink {

/// Disjoint-set forest with path halving and union by size.
class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
};

/// Vendor ground truth. Labels are dense 0..V-1, numbered by the
/// lexicographically smallest ad id of each community; members are sorted.
struct VendorCommunities {
  std::map<std::string, int> labels;
  std::vector<std::vector<std::string>> members;

  std::size_t vendor_count() const noexcept { return members.size(); }
  int label_of(const std::string& ad_id) const {
    auto it = labels.find(ad_id);
    if (it == labels.end()) throw DataError("ad '" + ad_id + "' has no vendor label");
    return it->second;
  }

  friend bool operator==(const VendorCommunities&, const VendorCommunities&) = default;
};

namespace detail {

/// Rebuilds dense labels from arbitrary groups of ad ids.
inline VendorCommunities relabel(std::vector<std::vector<std::string>> groups) {
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  VendorCommunities c;
  for (std::size_t v = 0; v < groups.size(); ++v)
    for (const auto& id : groups[v]) c.labels.emplace(id, static_cast<int>(v));
  c.members = std::move(groups);
  return c;
}

}  // namespace detail

/// Connected components of the ad-identifier bipartite graph.
inline VendorCommunities build_communities(std::span<const MaskedAd> ads) {
  UnionFind uf(ads.size());
  std::unordered_map<std::string, std::size_t> first_owner;
  std::map<std::string, std::size_t> seen_ids;
  for (std::size_t i = 0; i < ads.size(); ++i) {
    const auto& ad = ads[i];
    if (ad.identifiers.empty()) throw DataError("ad '" + ad.id + "' has no identifiers");
    if (!seen_ids.emplace(ad.id, i).second) throw DataError("duplicate ad id '" + ad.id + "'");
    for (const auto& ident : ad.identifiers) {
      auto [it, fresh] = first_owner.emplace(ident, i);
      if (!fresh) uf.unite(it->second, i);
    }
  }
  std::map<std::size_t, std::vector<std::string>> by_root;
  for (std::size_t i = 0; i < ads.size(); ++i) by_root[uf.find(i)].push_back(ads[i].id);
  std::vector<std::vector<std::string>> groups;
  groups.reserve(by_root.size());
  for (auto& [root, ids] : by_root) groups.push_back(std::move(ids));
  return detail::relabel(std::move(groups));
}

/// Drops communities with fewer than `min_count` ads and relabels densely.
inline VendorCommunities filter_min_ads(const VendorCommunities& c, std::size_t min_count) {
  if (min_count < 1) throw UsageError("filter_min_ads: min_count must be >= 1");
  std::vector<std::vector<std::string>> kept;
  for (const auto& m : c.members)
    if (m.size() >= min_count) kept.push_back(m);
  return detail::relabel(std::move(kept));
}

/// CSV with header "ad_id,vendor_label", rows in ad-id order.
inline void write_labels_csv(std::ostream& out, const VendorCommunities& c) {
  out << "ad_id,vendor_label\n";
  for (const auto& [id, label] : c.labels) out << io::csv_escape(id) << ',' << label << '\n';
}

/// Imports labels as given; they must already be dense 0..V-1.
inline VendorCommunities read_labels_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  VendorCommunities c;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    std::vector<std::string> cells;
    try {
      cells = io::parse_csv_line(line);
    } catch (const DataError& e) {
      throw ParseError(lineno, e.what());
    }
    if (!header) {
      if (cells.size() != 2 || cells[0] != "ad_id" || cells[1] != "vendor_label")
        throw ParseError(lineno, "expected header 'ad_id,vendor_label'");
      header = true;
      continue;
    }
    if (cells.size() != 2) throw ParseError(lineno, "expected 2 columns");
    int label = 0;
    try {
      label = io::parse_int<int>(cells[1]);
    } catch (const DataError& e) {
      throw ParseError(lineno, e.what());
    }
    if (label < 0) throw ParseError(lineno, "negative vendor label");
    if (!c.labels.emplace(cells[0], label).second) throw ParseError(lineno, "duplicate ad id '" + cells[0] + "'");
    if (static_cast<std::size_t>(label) >= c.members.size()) c.members.resize(static_cast<std::size_t>(label) + 1);
    c.members[static_cast<std::size_t>(label)].push_back(cells[0]);
  }
  for (std::size_t v = 0; v < c.members.size(); ++v) {
    if (c.members[v].empty()) throw DataError("vendor labels are not dense: label " + std::to_string(v) + " unused");
    std::sort(c.members[v].begin(), c.members[v].end());
  }
  return c;
}

/// One sample per (ad, image) pair labelled with the ad's vendor.
inline std::vector<MultimodalSample> expand_samples(std::span<const MaskedAd> ads, const VendorCommunities& c) {
  return expand_samples(ads, c.labels);
}

}  // namespace vlink
