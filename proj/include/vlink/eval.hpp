#pragma once

// Experiment orchestration: synthetic corpora, identification (closed-set
// classification), verification retrieval per region, OOD averaging and the
// shared/unique vendor breakdown.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlink/communities.hpp"
#include "vlink/embedder.hpp"
#include "vlink/error.hpp"
#include "vlink/head.hpp"
#include "vlink/index.hpp"
#include "vlink/io.hpp"
#include "vlink/metrics.hpp"
#include "vlink/random.hpp"
#include "vlink/records.hpp"

namespace vlink {

inline constexpr std::string_view kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Corpus

/// Masked ads with vendor labels, one text embedding per ad and one image
/// embedding per image reference. `image` may be empty for text-only data.
struct Corpus {
  std::vector<MaskedAd> ads;
  EmbeddingMatrix text;
  EmbeddingMatrix image;
  VendorCommunities communities;

  bool has_images() const { return image.rows() > 0; }

  const MaskedAd& ad(const std::string& id) const {
    auto it = std::lower_bound(ads.begin(), ads.end(), id, [](const MaskedAd& a, const std::string& k) { return a.id < k; });
    if (it == ads.end() || it->id != id) throw DataError("corpus: unknown ad '" + id + "'");
    return *it;
  }

  /// Sorts ads by id and checks that every labelled ad has its embeddings.
  void validate() {
    std::sort(ads.begin(), ads.end(), [](const MaskedAd& a, const MaskedAd& b) { return a.id < b.id; });
    text.validate();
    image.validate();
    std::set<std::string_view> text_ids(text.ids.begin(), text.ids.end());
    std::set<std::string_view> image_ids(image.ids.begin(), image.ids.end());
    for (const auto& [id, label] : communities.labels) {
      const auto& a = ad(id);
      if (!text_ids.contains(a.id)) throw DataError("corpus: ad '" + a.id + "' has no text embedding");
      if (has_images())
        for (const auto& img : a.image_refs)
          if (!image_ids.contains(img)) throw DataError("corpus: image '" + img + "' has no embedding");
    }
  }
};

inline void save_corpus(const std::filesystem::path& dir, const Corpus& c) {
  std::filesystem::create_directories(dir);
  std::ostringstream ads, labels;
  write_masked_jsonl(ads, c.ads);
  write_labels_csv(labels, c.communities);
  io::write_file_atomic(dir / "ads.jsonl", ads.str());
  io::write_file_atomic(dir / "labels.csv", labels.str());
  save_embeddings(dir / "text.embb", c.text, EmbFormat::binary);
  if (c.has_images()) save_embeddings(dir / "image.embb", c.image, EmbFormat::binary);
}

inline Corpus load_corpus(const std::filesystem::path& ads_path, const std::filesystem::path& labels_path,
                          const std::filesystem::path& text_path, const std::optional<std::filesystem::path>& image_path) {
  Corpus c;
  {
    std::istringstream in(io::read_file(ads_path));
    c.ads = read_masked_jsonl(in);
  }
  {
    std::istringstream in(io::read_file(labels_path));
    c.communities = read_labels_csv(in);
  }
  c.text = load_embeddings(text_path);
  if (image_path) c.image = load_embeddings(*image_path);
  c.validate();
  return c;
}

/// Directory layout written by save_corpus.
inline Corpus load_corpus(const std::filesystem::path& dir) {
  const auto img = dir / "image.embb";
  return load_corpus(dir / "ads.jsonl", dir / "labels.csv", dir / "text.embb",
                     std::filesystem::exists(img) ? std::optional(img) : std::nullopt);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticSpec {
  std::size_t vendors = 40;
  std::size_t ads_per_vendor = 10;
  std::size_t images_per_ad = 5;
  double spread = 0.15;  // per-coordinate noise std around a vendor center
  double rho = 0.7;      // image center alignment with the text center
  std::size_t text_dim = 64;
  std::size_t image_dim = 64;
  std::uint64_t seed = 1111;
  std::vector<Region> regions{Region::South};
  double cross_region_rate = 0.0;  // chance an ad is posted outside its vendor's home region

  void validate() const {
    if (vendors < 2) throw UsageError("synthetic: vendors must be >= 2");
    if (ads_per_vendor < 2) throw UsageError("synthetic: ads per vendor must be >= 2");
    if (images_per_ad < 1) throw UsageError("synthetic: images per ad must be >= 1");
    if (!(rho >= 0 && rho <= 1)) throw UsageError("synthetic: rho must lie in [0, 1]");
    if (!(spread >= 0) || !std::isfinite(spread)) throw UsageError("synthetic: spread must be >= 0");
    if (text_dim < 1 || image_dim < 1) throw UsageError("synthetic: dims must be >= 1");
    if (regions.empty()) throw UsageError("synthetic: at least one region");
    if (!(cross_region_rate >= 0 && cross_region_rate <= 1)) throw UsageError("synthetic: cross-region rate in [0, 1]");
    if (vendors > 99999) throw UsageError("synthetic: at most 99999 vendors");
  }
};

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  do {
    for (double& x : v) x = rng.normal();
  } while (normalize_in_place(v) == 0.0);
  return v;
}

inline std::string pseudo_word(Rng& rng) {
  static constexpr std::string_view syl[] = {"ka", "ro", "mi", "sen", "lu", "ta", "vex", "no", "dri", "pa",
                                             "zu", "el", "qua", "ri", "mo", "fen", "sha", "tor", "bi", "lan"};
  std::string w;
  const auto n = 2 + rng.below(2);
  for (std::uint64_t i = 0; i < n; ++i) w += syl[rng.below(std::size(syl))];
  return w;
}

inline void fill_noisy(std::span<double> out, std::span<const double> center, double spread, Rng& rng) {
  do {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = center[j] + spread * rng.normal();
  } while (normalize_in_place(out) == 0.0);
}

}  // namespace detail

/// Each vendor gets a unit text center and an image center
/// normalize(rho * text_center + sqrt(1 - rho^2) * random); ads and images are
/// Gaussian perturbations of those centers, re-projected onto the sphere.
/// Text strings mix vendor-specific pseudo-words with shared filler so that
/// the hash embedder also separates vendors. Deterministic in the seed.
inline Corpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  static constexpr std::string_view filler[] = {"new", "in", "town", "sweet", "available", "now", "call",
                                                "text", "visiting", "only", "today", "friendly", "discreet"};
  struct Vendor {
    std::vector<double> text_center, image_center;
    std::vector<std::string> words;
    std::string phone;
    Region home;
  };
  std::vector<Vendor> vendors(spec.vendors);
  const double ortho = std::sqrt(std::max(0.0, 1.0 - spec.rho * spec.rho));
  for (std::size_t v = 0; v < spec.vendors; ++v) {
    auto& vd = vendors[v];
    vd.text_center = detail::random_unit(rng, spec.text_dim);
    auto r = detail::random_unit(rng, spec.image_dim);
    vd.image_center.assign(spec.image_dim, 0.0);
    for (std::size_t j = 0; j < spec.image_dim; ++j)
      vd.image_center[j] = (j < spec.text_dim ? spec.rho * vd.text_center[j] : 0.0) + ortho * r[j];
    if (normalize_in_place(vd.image_center) == 0.0) vd.image_center = r;
    for (int k = 0; k < 6; ++k) vd.words.push_back(detail::pseudo_word(rng));
    const std::string digits = std::to_string(v);
    vd.phone = "55501" + std::string(5 - digits.size(), '0') + digits;
    vd.home = spec.regions[v % spec.regions.size()];
  }

  Corpus c;
  const std::size_t n_ads = spec.vendors * spec.ads_per_vendor;
  c.text.data = Matrix(n_ads, spec.text_dim);
  c.image.data = Matrix(n_ads * spec.images_per_ad, spec.image_dim);
  std::vector<std::vector<std::string>> groups(spec.vendors);
  for (std::size_t v = 0; v < spec.vendors; ++v) {
    const auto& vd = vendors[v];
    for (std::size_t a = 0; a < spec.ads_per_vendor; ++a) {
      const std::size_t ai = v * spec.ads_per_vendor + a;
      const std::string num = std::to_string(ai);
      MaskedAd ad;
      ad.id = "ad" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
      ad.region = vd.home;
      if (spec.regions.size() > 1 && rng.uniform() < spec.cross_region_rate) {
        auto other = rng.below(spec.regions.size() - 1);
        const auto home_pos = static_cast<std::size_t>(
            std::find(spec.regions.begin(), spec.regions.end(), vd.home) - spec.regions.begin());
        if (other >= home_pos) ++other;
        ad.region = spec.regions[other];
      }
      std::string title, desc;
      for (int w = 0; w < 3; ++w) title += (w ? " " : "") + vd.words[rng.below(vd.words.size())];
      for (int w = 0; w < 10; ++w) {
        desc += w ? " " : "";
        desc += rng.uniform() < 0.6 ? vd.words[rng.below(vd.words.size())]
                                    : std::string(filler[rng.below(std::size(filler))]);
      }
      desc += " call NNN-NNN-NNNN";
      ad.text = build_ad_text(title, desc);
      ad.identifiers = {vd.phone};
      c.text.ids.push_back(ad.id);
      detail::fill_noisy(c.text.data.row(ai), vd.text_center, spec.spread, rng);
      for (std::size_t k = 0; k < spec.images_per_ad; ++k) {
        const std::string img = ad.id + "_img" + std::to_string(k);
        ad.image_refs.push_back(img);
        c.image.ids.push_back(img);
        detail::fill_noisy(c.image.data.row(ai * spec.images_per_ad + k), vd.image_center, spec.spread, rng);
      }
      groups[v].push_back(ad.id);
      c.ads.push_back(std::move(ad));
    }
  }
  c.text.normalized = true;
  c.image.normalized = true;
  c.communities = build_communities(c.ads);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Experiment configuration

enum class Modality { text, vision, multimodal };
enum class RetrievalMode { t2t, i2i, multimodal };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::vision: return "vision";
    case Modality::multimodal: return "multimodal";
  }
  return "text";
}

inline std::string_view to_string(RetrievalMode m) {
  switch (m) {
    case RetrievalMode::t2t: return "t2t";
    case RetrievalMode::i2i: return "i2i";
    case RetrievalMode::multimodal: return "multimodal";
  }
  return "t2t";
}

inline RetrievalMode retrieval_mode_for(Modality m) {
  switch (m) {
    case Modality::text: return RetrievalMode::t2t;
    case Modality::vision: return RetrievalMode::i2i;
    case Modality::multimodal: return RetrievalMode::multimodal;
  }
  return RetrievalMode::t2t;
}

struct ExperimentConfig {
  Region train_region = Region::South;
  std::vector<Region> eval_regions;  // OOD regions; empty = training region only
  Modality modality = Modality::text;
  FusionStrategy fusion = FusionStrategy::mean;
  Objective objective = Objective::ce;
  RetrievalMode retrieval = RetrievalMode::t2t;
  TrainConfig train{};
  std::uint64_t seed = 1111;
  std::uint64_t split_seed = kDefaultSplitSeed;
  std::size_t min_ads = 2;
  std::size_t mrr_k = 10;

  void validate() const {
    if (retrieval != retrieval_mode_for(modality))
      throw UsageError("config: retrieval mode " + std::string(to_string(retrieval)) + " does not match modality " +
                       std::string(to_string(modality)));
    for (auto r : eval_regions)
      if (r == train_region) throw UsageError("config: eval_regions must not contain the training region");
    if (min_ads < 1 || mrr_k < 1) throw UsageError("config: min_ads and mrr_k must be >= 1");
    train.validate(objective);
  }

  TrainConfig seeded_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
};

namespace detail {

template <class T>
T parse_enum(std::string_view key, std::string_view value, std::optional<T> parsed) {
  if (!parsed) throw UsageError("config: invalid value '" + std::string(value) + "' for " + std::string(key));
  return *parsed;
}

inline std::optional<Modality> modality_from_string(std::string_view s) {
  for (auto m : {Modality::text, Modality::vision, Modality::multimodal})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

inline std::optional<RetrievalMode> retrieval_from_string(std::string_view s) {
  for (auto m : {RetrievalMode::t2t, RetrievalMode::i2i, RetrievalMode::multimodal})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

}  // namespace detail

/// Keys accepted by set_config_value, in documentation order.
inline const std::vector<std::string_view>& config_keys() {
  static const std::vector<std::string_view> keys{
      "train_region", "eval_regions", "modality",     "fusion",      "objective",    "retrieval",
      "seed",         "split_seed",   "min_ads",      "mrr_k",       "lr",           "beta1",
      "beta2",        "adam_eps",     "weight_decay", "warmup_steps", "batch_size",  "temperature",
      "triplet_margin", "in_batch_negatives", "hidden_dim", "max_epochs", "patience", "samples_per_vendor",
      "w_ce",         "w_supcon",     "w_triplet"};
  return keys;
}

/// Applies one key=value setting. Setting `modality` also resets
/// `retrieval` to the matching mode.
inline void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value) {
  auto num = [&] {
    try {
      return io::parse_double(value);
    } catch (const DataError&) {
      throw UsageError("config: '" + std::string(value) + "' is not a number for " + std::string(key));
    }
  };
  auto count = [&]() -> std::size_t {
    try {
      return io::parse_int<std::size_t>(value);
    } catch (const DataError&) {
      throw UsageError("config: '" + std::string(value) + "' is not a count for " + std::string(key));
    }
  };
  auto region = [&](std::string_view s) { return detail::parse_enum(key, s, region_from_string(io::trim(s))); };
  auto& t = c.train;
  if (key == "train_region") c.train_region = region(value);
  else if (key == "eval_regions") {
    c.eval_regions.clear();
    if (!io::trim(value).empty())
      for (auto part : io::split(value, ',')) c.eval_regions.push_back(region(part));
  } else if (key == "modality") {
    c.modality = detail::parse_enum(key, value, detail::modality_from_string(value));
    c.retrieval = retrieval_mode_for(c.modality);
  } else if (key == "fusion") c.fusion = detail::parse_enum(key, value, fusion_from_string(value));
  else if (key == "objective") c.objective = detail::parse_enum(key, value, objective_from_string(value));
  else if (key == "retrieval") c.retrieval = detail::parse_enum(key, value, detail::retrieval_from_string(value));
  else if (key == "seed") c.seed = count();
  else if (key == "split_seed") c.split_seed = count();
  else if (key == "min_ads") c.min_ads = count();
  else if (key == "mrr_k") c.mrr_k = count();
  else if (key == "lr") t.lr = num();
  else if (key == "beta1") t.beta1 = num();
  else if (key == "beta2") t.beta2 = num();
  else if (key == "adam_eps") t.adam_eps = num();
  else if (key == "weight_decay") t.weight_decay = num();
  else if (key == "warmup_steps") t.warmup_steps = count();
  else if (key == "batch_size") t.batch_size = count();
  else if (key == "temperature") t.temperature = num();
  else if (key == "triplet_margin") t.triplet_margin = num();
  else if (key == "in_batch_negatives") t.in_batch_negatives = count();
  else if (key == "hidden_dim") t.hidden_dim = count();
  else if (key == "max_epochs") t.max_epochs = count();
  else if (key == "patience") t.patience = count();
  else if (key == "samples_per_vendor") t.samples_per_vendor = count();
  else if (key == "w_ce") t.loss_weights.ce = num();
  else if (key == "w_supcon") t.loss_weights.supcon = num();
  else if (key == "w_triplet") t.loss_weights.triplet = num();
  else throw UsageError("config: unknown key '" + std::string(key) + "'");
}

/// "key = value" lines; '#' starts a comment. Returns the pairs in file
/// order so callers can apply them before command-line overrides.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t lineno = 0;
  for (auto raw : io::split(text, '\n')) {
    ++lineno;
    auto line = raw.substr(0, raw.find('#'));
    line = io::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected key = value");
    auto key = io::trim(line.substr(0, eq));
    auto value = io::trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(lineno, "empty key");
    out.emplace_back(std::string(key), std::string(value));
  }
  return out;
}

inline ExperimentConfig parse_experiment_config(std::string_view text) {
  ExperimentConfig c;
  for (const auto& [k, v] : parse_config_text(text)) set_config_value(c, k, v);
  return c;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["train_region"] = to_string(c.train_region);
  auto regions = nlohmann::ordered_json::array();
  for (auto r : c.eval_regions) regions.push_back(to_string(r));
  j["eval_regions"] = regions;
  j["modality"] = to_string(c.modality);
  j["fusion"] = to_string(c.fusion);
  j["objective"] = to_string(c.objective);
  j["retrieval"] = to_string(c.retrieval);
  j["seed"] = c.seed;
  j["split_seed"] = c.split_seed;
  j["min_ads"] = c.min_ads;
  j["mrr_k"] = c.mrr_k;
  const auto& t = c.train;
  j["train"] = {{"lr", t.lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"weight_decay", t.weight_decay},
                {"warmup_steps", t.warmup_steps},
                {"batch_size", t.batch_size},
                {"temperature", t.temperature},
                {"triplet_margin", t.triplet_margin},
                {"in_batch_negatives", t.in_batch_negatives},
                {"hidden_dim", t.hidden_dim},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"samples_per_vendor", t.samples_per_vendor},
                {"w_ce", t.loss_weights.ce},
                {"w_supcon", t.loss_weights.supcon},
                {"w_triplet", t.loss_weights.triplet}};
  return j;
}

// ---------------------------------------------------------------------------
// Feature views

/// Model inputs for a set of ads under a modality: one row per ad (text),
/// per image (vision) or per (ad, image) sample (multimodal). For learned
/// fusion `x` holds the text side and `image` the image side; otherwise
/// multimodal rows are already fused.
struct FeatureView {
  std::vector<std::string> ids;
  std::vector<std::string> ad_ids;
  std::vector<int> vendors;
  Matrix x;
  std::optional<Matrix> image;

  std::size_t rows() const { return ids.size(); }
};

inline FeatureView build_view(const Corpus& c, std::span<const std::string> ad_ids, Modality m, FusionStrategy fusion) {
  if (m != Modality::text && !c.has_images())
    throw DataError(std::string(to_string(m)) + " modality needs image embeddings");
  FeatureView v;
  std::vector<std::string> text_rows, image_rows;
  for (const auto& id : ad_ids) {
    const auto& ad = c.ad(id);
    const int vendor = c.communities.label_of(id);
    if (m == Modality::text) {
      v.ids.push_back(id);
      v.ad_ids.push_back(id);
      v.vendors.push_back(vendor);
      text_rows.push_back(id);
      continue;
    }
    for (const auto& img : ad.image_refs) {
      v.ids.push_back(m == Modality::vision ? img : id + "#" + img);
      v.ad_ids.push_back(id);
      v.vendors.push_back(vendor);
      text_rows.push_back(id);
      image_rows.push_back(img);
    }
  }
  if (m == Modality::text) {
    v.x = select_rows(c.text, text_rows).data;
  } else if (m == Modality::vision) {
    v.x = select_rows(c.image, image_rows).data;
  } else {
    auto t = select_rows(c.text, text_rows);
    auto i = select_rows(c.image, image_rows);
    if (is_learned(fusion)) {
      if (t.dim() != i.dim()) throw DataError("learned fusion needs equal text and image dimensions");
      v.x = std::move(t.data);
      v.image = std::move(i.data);
    } else {
      t.ids = v.ids;
      i.ids = v.ids;
      v.x = fuse(t, i, fusion).data;
    }
  }
  return v;
}

/// Ads of `region` whose vendor has at least `min_ads` labelled ads there,
/// in id order.
inline std::vector<std::string> region_ads(const Corpus& c, Region region, std::size_t min_ads) {
  std::map<int, std::vector<std::string>> by_vendor;
  for (const auto& ad : c.ads)
    if (ad.region == region)
      if (auto it = c.communities.labels.find(ad.id); it != c.communities.labels.end())
        by_vendor[it->second].push_back(ad.id);
  std::vector<std::string> out;
  for (auto& [v, ids] : by_vendor)
    if (ids.size() >= min_ads) out.insert(out.end(), ids.begin(), ids.end());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::set<int> vendors_of(const Corpus& c, std::span<const std::string> ad_ids) {
  std::set<int> s;
  for (const auto& id : ad_ids) s.insert(c.communities.label_of(id));
  return s;
}

// ---------------------------------------------------------------------------
// Identification

struct IdentificationResult {
  HeadParams head;
  TrainHistory history;
  std::vector<int> class_vendor;  // class index -> vendor label
  DatasetSplit split;
};

namespace detail {

struct ClassSetup {
  DatasetSplit split;
  std::vector<int> class_vendor;
  std::map<int, int> vendor_class;
};

inline ClassSetup class_setup(const ExperimentConfig& cfg, const Corpus& c) {
  auto ads = region_ads(c, cfg.train_region, cfg.min_ads);
  const auto vendors = vendors_of(c, ads);
  if (vendors.size() < 2)
    throw DataError("region " + std::string(to_string(cfg.train_region)) + " has " + std::to_string(vendors.size()) +
                    " vendor(s) after filtering; need >= 2");
  ClassSetup s;
  s.split = split_dataset(std::move(ads), {}, cfg.split_seed);
  const auto train_vendors = vendors_of(c, s.split.train_ids);
  for (int v : vendors)
    if (!train_vendors.contains(v))
      throw DataError("degenerate split: vendor " + std::to_string(v) + " has no training ads");
  for (int v : vendors) {
    s.vendor_class[v] = static_cast<int>(s.class_vendor.size());
    s.class_vendor.push_back(v);
  }
  return s;
}

inline std::vector<int> to_classes(const FeatureView& v, const std::map<int, int>& vendor_class) {
  std::vector<int> out;
  out.reserve(v.vendors.size());
  for (int vendor : v.vendors) out.push_back(vendor_class.at(vendor));
  return out;
}

inline const Matrix* image_of(const FeatureView& v) { return v.image ? &*v.image : nullptr; }

}  // namespace detail

/// Trains the head on the training region's train split (validation split
/// drives epoch selection).
inline IdentificationResult train_identification(const ExperimentConfig& cfg, const Corpus& c) {
  cfg.validate();
  auto setup = detail::class_setup(cfg, c);
  const auto train_view = build_view(c, setup.split.train_ids, cfg.modality, cfg.fusion);
  const auto val_view = build_view(c, setup.split.val_ids, cfg.modality, cfg.fusion);
  const auto train_labels = detail::to_classes(train_view, setup.vendor_class);
  const auto val_labels = detail::to_classes(val_view, setup.vendor_class);
  const auto tcfg = cfg.seeded_train();
  HeadParams head = init_head(train_view.x.cols(), tcfg.hidden_dim, setup.class_vendor.size(), derive_seed(cfg.seed, 1));
  if (cfg.modality == Modality::multimodal && is_learned(cfg.fusion))
    head.fusion = init_fusion_params(cfg.fusion, train_view.x.cols(), derive_seed(cfg.seed, 2));
  TrainingData train{&train_view.x, detail::image_of(train_view), train_labels};
  TrainingData val{val_view.rows() ? &val_view.x : nullptr, detail::image_of(val_view), val_labels};
  auto [params, history] = train_head(std::move(head), train, val, tcfg, cfg.objective);
  return {std::move(params), std::move(history), std::move(setup.class_vendor), std::move(setup.split)};
}

/// Test-split classification metrics of a trained head. Objectives without
/// a classifier term predict by nearest class centroid of the training
/// representations.
inline ClassificationReport evaluate_identification(const ExperimentConfig& cfg, const Corpus& c, const HeadParams& head) {
  cfg.validate();
  auto setup = detail::class_setup(cfg, c);
  if (head.vendor_count() != setup.class_vendor.size())
    throw DataError("checkpoint has " + std::to_string(head.vendor_count()) + " classes but the training region has " +
                    std::to_string(setup.class_vendor.size()));
  const auto test_view = build_view(c, setup.split.test_ids, cfg.modality, cfg.fusion);
  const auto truth = detail::to_classes(test_view, setup.vendor_class);
  if (test_view.rows() == 0) return classification_report({}, {}, head.vendor_count());
  std::vector<int> pred;
  if (uses_ce(cfg.objective)) {
    pred = predict(head, test_view.x, detail::image_of(test_view)).labels;
  } else {
    const auto train_view = build_view(c, setup.split.train_ids, cfg.modality, cfg.fusion);
    const auto train_labels = detail::to_classes(train_view, setup.vendor_class);
    auto tr = head_forward(head, train_view.x, detail::image_of(train_view));
    auto te = head_forward(head, test_view.x, detail::image_of(test_view));
    pred = detail::nearest_centroid(tr.rep, train_labels, te.rep, head.vendor_count());
  }
  return classification_report(pred, truth, head.vendor_count());
}

// ---------------------------------------------------------------------------
// Retrieval

struct MetricTriple {
  MetricReport mrr;
  MetricReport r_precision;
  MetricReport macro_f1;
};

inline MetricTriple score_run(const RetrievalRun& run, std::size_t mrr_k = 10) {
  return {mrr_at_k(run, mrr_k), r_precision_at_x(run, ZeroRelevant::score_zero),
          macro_f1_at_x(run, ZeroRelevant::score_zero)};
}

inline nlohmann::ordered_json to_json(const MetricTriple& m) {
  nlohmann::ordered_json j;
  j["mrr"] = to_json(m.mrr);
  j["r_precision"] = to_json(m.r_precision);
  j["macro_f1"] = to_json(m.macro_f1);
  return j;
}

struct Breakdown {
  MetricTriple shared;
  MetricTriple unique;
  std::size_t shared_queries = 0;
  std::size_t unique_queries = 0;
};

/// Splits queries by whether their vendor also appears in the training
/// region; each side is scored against the full document set.
inline Breakdown shared_unique_breakdown(const RetrievalRun& run, const std::set<int>& train_vendors,
                                         const std::set<int>& ood_vendors, std::size_t mrr_k = 10) {
  if (train_vendors.empty() || ood_vendors.empty()) throw UsageError("shared_unique_breakdown: empty vendor set");
  RetrievalRun shared{{}, run.doc_vendor}, unique{{}, run.doc_vendor};
  for (const auto& q : run.queries) (train_vendors.contains(q.vendor) ? shared : unique).queries.push_back(q);
  Breakdown b{score_run(shared, mrr_k), score_run(unique, mrr_k), shared.queries.size(), unique.queries.size()};
  return b;
}

struct RegionRetrieval {
  Region region = Region::South;
  bool training_region = false;
  std::size_t documents = 0;
  std::size_t queries = 0;
  MetricTriple metrics;
  std::optional<Breakdown> breakdown;
  RetrievalRun run;
};

/// Encodes a view through the head, or normalizes it when there is none.
inline Matrix encode_view(const FeatureView& v, const HeadParams* head) {
  if (head) return head_forward(*head, v.x, detail::image_of(v)).rep;
  if (v.image) throw UsageError("learned fusion needs a trained head for retrieval");
  return row_normalized(v.x);
}

/// Documents are the train split of the region, queries its test split.
/// Each query retrieves max(mrr_k, X) documents (capped at the index size).
inline RegionRetrieval retrieve_region(const ExperimentConfig& cfg, const Corpus& c, Region region,
                                       const HeadParams* head, const SearchOptions& opt = {}) {
  auto ads = region_ads(c, region, cfg.min_ads);
  const auto vendors = vendors_of(c, ads);
  if (vendors.size() < 2)
    throw DataError("region " + std::string(to_string(region)) + " has " + std::to_string(vendors.size()) +
                    " vendor(s) after filtering; need >= 2");
  const auto split = split_dataset(std::move(ads), {}, cfg.split_seed);
  const auto docs = build_view(c, split.train_ids, cfg.modality, cfg.fusion);
  const auto queries = build_view(c, split.test_ids, cfg.modality, cfg.fusion);
  auto idx = build_index({docs.ids, encode_view(docs, head), false});
  RegionRetrieval r;
  r.region = region;
  r.documents = docs.rows();
  r.queries = queries.rows();
  for (std::size_t i = 0; i < docs.rows(); ++i) r.run.doc_vendor.emplace(docs.ids[i], docs.vendors[i]);
  const auto counts = r.run.relevant_counts();
  std::vector<std::size_t> ks(queries.rows());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    auto it = counts.find(queries.vendors[i]);
    ks[i] = std::min(idx.size(), std::max(cfg.mrr_k, it == counts.end() ? std::size_t{0} : it->second));
  }
  const auto hits = search(idx, encode_view(queries, head), ks, opt);
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    RankedQuery q{queries.ids[i], queries.vendors[i], {}};
    for (const auto& h : hits[i]) q.ranked.push_back(idx.ids[h.doc]);
    r.run.queries.push_back(std::move(q));
  }
  r.metrics = score_run(r.run, cfg.mrr_k);
  return r;
}

/// Unweighted mean over regions of each report's mean; std is the mean of
/// the regions' stds.
inline MetricReport ood_average(std::span<const MetricReport> reports) {
  if (reports.empty()) throw UsageError("ood_average: no OOD regions");
  MetricReport out;
  out.metric = reports.front().metric;
  for (const auto& r : reports) {
    out.mean += r.mean;
    out.std += r.std;
    out.query_count += r.query_count;
  }
  out.mean /= static_cast<double>(reports.size());
  out.std /= static_cast<double>(reports.size());
  out.flags.push_back("regions=" + std::to_string(reports.size()));
  return out;
}

struct RetrievalResult {
  std::vector<RegionRetrieval> regions;  // training region first, then eval regions in config order
  std::optional<MetricTriple> ood;
};

/// Retrieval in the training region and every OOD region. With no head the
/// raw (normalized or mean/concat-fused) embeddings are searched directly.
inline RetrievalResult run_verification_retrieval(const ExperimentConfig& cfg, const Corpus& c,
                                                  const HeadParams* head, const SearchOptions& opt = {}) {
  cfg.validate();
  RetrievalResult res;
  res.regions.push_back(retrieve_region(cfg, c, cfg.train_region, head, opt));
  res.regions.front().training_region = true;
  const auto train_vendors = vendors_of(c, region_ads(c, cfg.train_region, cfg.min_ads));
  std::vector<MetricReport> mrr, rp, f1;
  for (auto region : cfg.eval_regions) {
    auto r = retrieve_region(cfg, c, region, head, opt);
    const auto ood_vendors = vendors_of(c, region_ads(c, region, cfg.min_ads));
    r.breakdown = shared_unique_breakdown(r.run, train_vendors, ood_vendors, cfg.mrr_k);
    mrr.push_back(r.metrics.mrr);
    rp.push_back(r.metrics.r_precision);
    f1.push_back(r.metrics.macro_f1);
    res.regions.push_back(std::move(r));
  }
  if (!cfg.eval_regions.empty()) res.ood = MetricTriple{ood_average(mrr), ood_average(rp), ood_average(f1)};
  return res;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  ExperimentConfig config;
  std::optional<ClassificationReport> identification;
  std::optional<std::size_t> selected_epoch;
  RetrievalResult retrieval;
  std::vector<std::string> flags;
};

inline nlohmann::ordered_json to_json(const TrainHistory& h, bool with_timing = true) {
  nlohmann::ordered_json j;
  j["selected_epoch"] = h.selected_epoch;
  j["steps"] = h.steps;
  j["skipped_singleton_samples"] = h.skipped_singleton_samples;
  auto epochs = nlohmann::ordered_json::array();
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(nullptr); };
  for (const auto& e : h.epochs) {
    nlohmann::ordered_json r;
    r["epoch"] = e.epoch;
    r["train_loss"] = num(e.train_loss);
    r["val_loss"] = num(e.val_loss);
    r["val_macro_f1"] = num(e.val_macro_f1);
    if (with_timing) r["seconds"] = e.seconds;
    epochs.push_back(std::move(r));
  }
  j["epochs"] = std::move(epochs);
  return j;
}

/// Deterministic: contains no timings, paths or host details.
inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["config"] = to_json(r.config);
  if (r.identification) {
    auto id = to_json(*r.identification);
    if (r.selected_epoch) id["selected_epoch"] = *r.selected_epoch;
    j["identification"] = std::move(id);
  } else {
    j["identification"] = nullptr;
  }
  auto regions = nlohmann::ordered_json::array();
  for (const auto& reg : r.retrieval.regions) {
    nlohmann::ordered_json x;
    x["region"] = to_string(reg.region);
    x["training_region"] = reg.training_region;
    x["documents"] = reg.documents;
    x["queries"] = reg.queries;
    x["metrics"] = to_json(reg.metrics);
    if (reg.breakdown) {
      x["shared"] = to_json(reg.breakdown->shared);
      x["shared"]["queries"] = reg.breakdown->shared_queries;
      x["unique"] = to_json(reg.breakdown->unique);
      x["unique"]["queries"] = reg.breakdown->unique_queries;
    }
    regions.push_back(std::move(x));
  }
  j["retrieval"] = std::move(regions);
  j["ood_average"] = r.retrieval.ood ? to_json(*r.retrieval.ood) : nlohmann::ordered_json(nullptr);
  j["flags"] = r.flags;
  j["provenance"] = {{"version", kVersion}, {"seed", r.config.seed}, {"split_seed", r.config.split_seed}};
  return j;
}

/// Identification metrics (when a head is given) plus retrieval.
inline EvalReport evaluate(const ExperimentConfig& cfg, const Corpus& c, const HeadParams* head,
                           const SearchOptions& opt = {}) {
  EvalReport r;
  r.config = cfg;
  if (head) {
    r.identification = evaluate_identification(cfg, c, *head);
  } else {
    r.flags.push_back("untrained: retrieval over raw embeddings");
  }
  r.retrieval = run_verification_retrieval(cfg, c, head, opt);
  return r;
}

/// Train, then evaluate. The untrained baseline (max_epochs = 0) is flagged.
inline std::pair<EvalReport, IdentificationResult> run_identification(const ExperimentConfig& cfg, const Corpus& c,
                                                                      const SearchOptions& opt = {}) {
  auto trained = train_identification(cfg, c);
  auto report = evaluate(cfg, c, &trained.head, opt);
  report.selected_epoch = trained.history.selected_epoch;
  if (trained.history.epochs.empty()) report.flags.push_back("untrained head (0 epochs): chance-level baseline");
  return {std::move(report), std::move(trained)};
}

}  // namespace vlink
