#pragma once

// Ad ingestion: parsing raw ad streams, building the canonical text field,
// rule-based phone extraction, PII masking, multimodal sample expansion and
// deterministic train/val/test splits.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlink/error.hpp"
#include "vlink/io.hpp"
#include "vlink/random.hpp"

namespace vlink {

enum class Region { South, Midwest, West, Northeast, Other };

inline constexpr std::array<Region, 5> kAllRegions{Region::South, Region::Midwest, Region::West, Region::Northeast,
                                                   Region::Other};

inline std::string_view to_string(Region r) {
  switch (r) {
    case Region::South: return "South";
    case Region::Midwest: return "Midwest";
    case Region::West: return "West";
    case Region::Northeast: return "Northeast";
    case Region::Other: return "Other";
  }
  return "Other";
}

/// Case-insensitive; std::nullopt for anything that is not a region name.
inline std::optional<Region> region_from_string(std::string_view s) {
  for (Region r : kAllRegions) {
    auto name = to_string(r);
    if (name.size() == s.size() &&
        std::equal(name.begin(), name.end(), s.begin(), [](char a, char b) {
          return std::tolower(static_cast<unsigned char>(a)) == std::tolower(static_cast<unsigned char>(b));
        }))
      return r;
  }
  return std::nullopt;
}

struct RawAd {
  std::string id;
  Region region = Region::Other;
  std::string title;
  std::string description;
  std::vector<std::string> image_refs;
};

struct MaskedAd {
  std::string id;
  Region region = Region::Other;
  std::string text;                   // exactly one "[SEP]"
  std::set<std::string> identifiers;  // canonical digit strings, 10..15 digits
  std::vector<std::string> image_refs;
};

struct MultimodalSample {
  std::string ad_id;
  std::string text;
  std::string image_ref;
  int vendor = -1;
};

// ---------------------------------------------------------------------------
// Parsing

enum class AdFormat { jsonl, csv };

namespace detail {

inline RawAd ad_from_fields(std::size_t line, const std::map<std::string, std::string>& fields,
                            std::vector<std::string> images) {
  RawAd ad;
  for (const char* key : {"id", "region", "title", "description"}) {
    if (!fields.contains(key)) throw ParseError(line, std::string("missing required field '") + key + "'");
  }
  ad.id = fields.at("id");
  if (ad.id.empty()) throw ParseError(line, "empty id");
  auto region = region_from_string(fields.at("region"));
  if (!region) throw ParseError(line, "unknown region '" + fields.at("region") + "'");
  ad.region = *region;
  ad.title = fields.at("title");
  ad.description = fields.at("description");
  ad.image_refs = std::move(images);
  return ad;
}

inline RawAd parse_jsonl_record(std::size_t line, const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line, "record is not a JSON object");
  std::map<std::string, std::string> fields;
  for (const char* key : {"id", "region", "title", "description"}) {
    auto it = j.find(key);
    if (it == j.end()) continue;
    if (!it->is_string()) throw ParseError(line, std::string("field '") + key + "' is not a string");
    fields[key] = it->get<std::string>();
  }
  std::vector<std::string> images;
  if (auto it = j.find("images"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw ParseError(line, "field 'images' is not an array");
    for (const auto& im : *it) {
      if (!im.is_string()) throw ParseError(line, "non-string image reference");
      images.push_back(im.get<std::string>());
    }
  }
  return ad_from_fields(line, fields, std::move(images));
}

}  // namespace detail

/// Parses one ad per non-blank line. CSV input needs a header row naming the
/// columns; the `images` column holds `;`-separated references. Unknown
/// fields/columns are ignored.
inline std::vector<RawAd> parse_ads(std::istream& in, AdFormat format) {
  std::vector<RawAd> ads;
  std::unordered_set<std::string> seen;
  std::vector<std::string> header;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    RawAd ad;
    if (format == AdFormat::jsonl) {
      ad = detail::parse_jsonl_record(lineno, line);
    } else {
      std::vector<std::string> cells;
      try {
        cells = io::parse_csv_line(line);
      } catch (const DataError& e) {
        throw ParseError(lineno, e.what());
      }
      if (header.empty()) {
        header = std::move(cells);
        continue;
      }
      if (cells.size() != header.size())
        throw ParseError(lineno, "expected " + std::to_string(header.size()) + " columns, got " +
                                     std::to_string(cells.size()));
      std::map<std::string, std::string> fields;
      std::vector<std::string> images;
      for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "images") {
          for (auto part : io::split(cells[c], ';'))
            if (auto t = io::trim(part); !t.empty()) images.emplace_back(t);
        } else {
          fields[header[c]] = cells[c];
        }
      }
      ad = detail::ad_from_fields(lineno, fields, std::move(images));
    }
    if (!seen.insert(ad.id).second) throw ParseError(lineno, "duplicate id '" + ad.id + "'");
    ads.push_back(std::move(ad));
  }
  if (format == AdFormat::csv && header.empty() && lineno > 0) throw ParseError(lineno, "CSV header missing");
  return ads;
}

// ---------------------------------------------------------------------------
// Text field

inline constexpr std::string_view kSep = "[SEP]";
inline constexpr std::string_view kEscapedSep = "[SEP\\]";
inline constexpr std::size_t kMaxTextTokens = 512;

namespace detail {

inline std::string escape_sep(std::string_view s) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto hit = s.find(kSep, pos);
    if (hit == std::string_view::npos) {
      out.append(s.substr(pos));
      return out;
    }
    out.append(s.substr(pos, hit - pos));
    out.append(kEscapedSep);
    pos = hit + kSep.size();
  }
}

inline std::vector<std::string_view> whitespace_tokens(std::string_view s) {
  std::vector<std::string_view> toks;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) toks.push_back(s.substr(i, j - i));
    i = j;
  }
  return toks;
}

inline std::string join_tokens(std::span<const std::string_view> toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out.push_back(' ');
    out.append(toks[i]);
  }
  return out;
}

}  // namespace detail

/// "title [SEP] description", capped at 512 whitespace tokens. Literal
/// "[SEP]" inside either part is escaped so the separator stays unique; the
/// title is cut first at 511 tokens so the separator always survives.
inline std::string build_ad_text(std::string_view title, std::string_view description) {
  const std::string t = detail::escape_sep(title);
  const std::string d = detail::escape_sep(description);
  auto tt = detail::whitespace_tokens(t);
  auto dt = detail::whitespace_tokens(d);
  if (tt.size() + dt.size() + 1 <= kMaxTextTokens) return t + " [SEP] " + d;

  const std::size_t keep_title = std::min(tt.size(), kMaxTextTokens - 1);
  const std::size_t keep_desc = std::min(dt.size(), kMaxTextTokens - 1 - keep_title);
  std::vector<std::string_view> out(tt.begin(), tt.begin() + static_cast<std::ptrdiff_t>(keep_title));
  out.push_back(kSep);
  out.insert(out.end(), dt.begin(), dt.begin() + static_cast<std::ptrdiff_t>(keep_desc));
  return detail::join_tokens(out);
}

// ---------------------------------------------------------------------------
// Phone extraction
//
// A phone run is a maximal stretch of digits and spelled digit words
// ("zero".."nine") joined by light separators (space, tab, - . ( ) + _ * ~).
// Any other character, or a separator gap longer than three characters, ends
// the run. Runs of 10..15 digits are taken whole; longer runs are cut into
// consecutive digit groups greedily, each candidate closing as soon as it
// reaches ten digits.

inline constexpr std::size_t kMinPhoneDigits = 10;
inline constexpr std::size_t kMaxPhoneDigits = 15;

inline std::optional<char> digit_word_value(std::string_view word) {
  static constexpr std::array<std::string_view, 10> kWords{"zero", "one", "two",   "three", "four",
                                                           "five", "six", "seven", "eight", "nine"};
  if (word.size() < 3 || word.size() > 5) return std::nullopt;
  std::string lower(word);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (std::size_t d = 0; d < kWords.size(); ++d)
    if (lower == kWords[d]) return static_cast<char>('0' + d);
  return std::nullopt;
}

struct PhoneSpan {
  std::size_t begin = 0;  // byte offsets into the scanned text
  std::size_t end = 0;
  std::string digits;
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;  // spelled digit words inside
};

namespace detail {

struct DigitUnit {
  char digit;
  std::size_t begin, end;
  bool is_word;
};

inline bool is_phone_separator(char c) {
  switch (c) {
    case ' ': case '\t': case '-': case '.': case '(': case ')': case '+': case '_': case '*': case '~':
      return true;
    default:
      return false;
  }
}

inline void flush_phone_run(const std::vector<std::vector<DigitUnit>>& groups, std::vector<PhoneSpan>& out) {
  std::size_t total = 0;
  for (const auto& g : groups) total += g.size();
  if (total < kMinPhoneDigits) return;

  auto emit = [&](std::size_t from, std::size_t to) {
    PhoneSpan span;
    span.begin = groups[from].front().begin;
    span.end = groups[to - 1].back().end;
    for (std::size_t g = from; g < to; ++g)
      for (const auto& u : groups[g]) {
        span.digits.push_back(u.digit);
        if (u.is_word) span.word_spans.emplace_back(u.begin, u.end);
      }
    out.push_back(std::move(span));
  };

  if (total <= kMaxPhoneDigits) {
    emit(0, groups.size());
    return;
  }
  std::size_t i = 0;
  while (i < groups.size()) {
    std::size_t acc = 0, j = i;
    while (j < groups.size() && acc < kMinPhoneDigits) acc += groups[j++].size();
    if (acc >= kMinPhoneDigits && acc <= kMaxPhoneDigits) {
      emit(i, j);
      i = j;
    } else {
      ++i;
    }
  }
}

}  // namespace detail

/// All phone-number candidates in `text`, in order of appearance.
inline std::vector<PhoneSpan> find_phone_spans(std::string_view text) {
  std::vector<PhoneSpan> out;
  std::vector<std::vector<detail::DigitUnit>> groups;
  std::size_t gap = 0;         // separator characters since the last digit
  bool in_group = false;       // last unit was a digit with no separator after it

  auto flush = [&] {
    detail::flush_phone_run(groups, out);
    groups.clear();
    gap = 0;
    in_group = false;
  };
  auto push_digit = [&](detail::DigitUnit u) {
    if (!in_group || groups.empty()) groups.emplace_back();
    groups.back().push_back(u);
    in_group = true;
    gap = 0;
  };

  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isdigit(static_cast<unsigned char>(c))) {
      push_digit({c, i, i + 1, false});
      ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
      if (auto d = digit_word_value(text.substr(i, j - i))) {
        // spelled digits are whitespace-separated words, so each starts a group
        in_group = false;
        push_digit({*d, i, j, true});
        in_group = false;
      } else {
        flush();
      }
      i = j;
    } else if (detail::is_phone_separator(c)) {
      if (!groups.empty()) {
        in_group = false;
        if (++gap > 3) flush();
      }
      ++i;
    } else {
      flush();
      ++i;
    }
  }
  flush();
  return out;
}

inline std::set<std::string> extract_identifiers_from_text(std::string_view text) {
  std::set<std::string> ids;
  for (auto& span : find_phone_spans(text)) ids.insert(std::move(span.digits));
  return ids;
}

/// Phone identifiers found in the ad's title and description.
inline std::set<std::string> extract_identifiers(const RawAd& ad) {
  auto ids = extract_identifiers_from_text(ad.title);
  ids.merge(extract_identifiers_from_text(ad.description));
  return ids;
}

// ---------------------------------------------------------------------------
// Masking
//
// Pattern list (the replacement tokens are fixed, the patterns are ours):
//   links    (https?|ftp)://...  and  www....                 -> <LINK>
//   emails   local@domain.tld (digits allowed in every part)  -> <EMAILID-k>
//   dates    d/m/y, y-m-d, "Jan 5, 2016", "5th of January"   -> <DATES>
//   post ids "post id: 123", "ad-id #123"                     -> POST_ID: NNNNN
//   spelled-out digit words inside a known identifier         -> N
//   any other ASCII digit                                     -> N
// k counts distinct addresses within one document, from 1, in order of first
// appearance.

namespace detail {

inline const std::regex& link_regex() {
  static const std::regex re(R"((?:https?|ftp)://[^\s<>"]+|\bwww\.[^\s<>"]+)", std::regex::icase);
  return re;
}

inline const std::regex& email_regex() {
  static const std::regex re(R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z0-9]{2,})");
  return re;
}

inline const std::regex& date_regex() {
  static const std::string month =
      "(?:january|february|march|april|may|june|july|august|september|october|november|december|"
      "jan|feb|mar|apr|jun|jul|aug|sept|sep|oct|nov|dec)";
  static const std::regex re(
      R"(\b\d{4}[/.\-]\d{1,2}[/.\-]\d{1,2}\b)"
      R"(|\b\d{1,2}[/.\-]\d{1,2}[/.\-]\d{2,4}\b)"
      R"(|\b)" + month + R"(\.?\s+\d{1,2}(?:st|nd|rd|th)?(?:,?\s+\d{4})?\b)"
      R"(|\b\d{1,2}(?:st|nd|rd|th)?\s+(?:of\s+)?)" + month + R"(\b\.?(?:,?\s+\d{4}\b)?)",
      std::regex::icase);
  return re;
}

inline const std::regex& post_id_regex() {
  static const std::regex re(R"(\b(?:post|ad)\s*[\-_ ]?\s*id\s*[:#]?\s*\d+)", std::regex::icase);
  return re;
}

inline std::string replace_all(const std::string& text, const std::regex& re, std::string_view token) {
  std::string out;
  std::size_t last = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it) {
    const auto pos = static_cast<std::size_t>(it->position());
    out.append(text, last, pos - last);
    out.append(token);
    last = pos + static_cast<std::size_t>(it->length());
  }
  out.append(text, last);
  return out;
}

inline std::string mask_emails(const std::string& text) {
  std::map<std::string, int> counter;
  std::string out;
  std::size_t last = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), email_regex()); it != std::sregex_iterator(); ++it) {
    const auto pos = static_cast<std::size_t>(it->position());
    std::string key = it->str();
    for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    auto [slot, fresh] = counter.try_emplace(key, static_cast<int>(counter.size()) + 1);
    out.append(text, last, pos - last);
    out.append("<EMAILID-" + std::to_string(slot->second) + ">");
    last = pos + static_cast<std::size_t>(it->length());
  }
  out.append(text, last);
  return out;
}

/// Length of an "<EMAILID-k>" token starting at `pos`, or 0.
inline std::size_t email_token_at(std::string_view s, std::size_t pos) {
  constexpr std::string_view prefix = "<EMAILID-";
  if (s.substr(pos, prefix.size()) != prefix) return 0;
  std::size_t j = pos + prefix.size();
  const std::size_t digits_from = j;
  while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
  if (j == digits_from || j >= s.size() || s[j] != '>') return 0;
  return j + 1 - pos;
}

/// Replaces the spelled digit words of every phone run in `text` with 'N'.
/// This covers the caller's identifiers and also runs that only became
/// contiguous because an earlier step replaced a glued link or email.
inline std::string mask_spelled_identifiers(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> words;
  for (const auto& span : find_phone_spans(text))
    words.insert(words.end(), span.word_spans.begin(), span.word_spans.end());
  if (words.empty()) return text;
  std::sort(words.begin(), words.end());
  std::string out;
  std::size_t last = 0;
  for (auto [b, e] : words) {
    out.append(text, last, b - last);
    out.push_back('N');
    last = e;
  }
  out.append(text, last);
  return out;
}

inline std::string mask_digits(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (auto n = email_token_at(text, i)) {
      out.append(text, i, n);
      i += n;
    } else {
      out.push_back(std::isdigit(static_cast<unsigned char>(text[i])) ? 'N' : text[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace detail

/// Masks links, emails, dates, post ids, spelled phone numbers and digits in
/// that order. `identifiers` are the ones extracted from the raw text; every
/// phone run still present after the earlier steps is masked, which is a
/// superset of them, so the set only documents intent at call sites.
/// Idempotent: mask_text(mask_text(t, ids), ids) == mask_text(t, ids).
inline std::string mask_text(const std::string& text, [[maybe_unused]] const std::set<std::string>& identifiers = {}) {
  std::string s = detail::replace_all(text, detail::link_regex(), "<LINK>");
  s = detail::mask_emails(s);
  s = detail::replace_all(s, detail::date_regex(), "<DATES>");
  s = detail::replace_all(s, detail::post_id_regex(), "POST_ID: NNNNN");
  s = detail::mask_spelled_identifiers(s);
  return detail::mask_digits(s);
}

/// Full per-ad preprocessing: identifiers come from the raw text, then the
/// joined text is masked.
inline MaskedAd mask_ad(const RawAd& ad) {
  MaskedAd m;
  m.id = ad.id;
  m.region = ad.region;
  m.identifiers = extract_identifiers(ad);
  m.text = mask_text(build_ad_text(ad.title, ad.description), m.identifiers);
  m.image_refs = ad.image_refs;
  return m;
}

// ---------------------------------------------------------------------------
// Masked corpus JSONL: {"id","region","text","identifiers":[..],"images":[..]}

inline nlohmann::ordered_json to_json(const MaskedAd& ad) {
  nlohmann::ordered_json j;
  j["id"] = ad.id;
  j["region"] = std::string(to_string(ad.region));
  j["text"] = ad.text;
  j["identifiers"] = std::vector<std::string>(ad.identifiers.begin(), ad.identifiers.end());
  j["images"] = ad.image_refs;
  return j;
}

inline void write_masked_jsonl(std::ostream& out, std::span<const MaskedAd> ads) {
  for (const auto& ad : ads) out << to_json(ad).dump() << '\n';
}

inline std::vector<MaskedAd> read_masked_jsonl(std::istream& in) {
  std::vector<MaskedAd> ads;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      MaskedAd ad;
      ad.id = j.at("id").get<std::string>();
      auto region = region_from_string(j.at("region").get<std::string>());
      if (!region) throw ParseError(lineno, "unknown region");
      ad.region = *region;
      ad.text = j.at("text").get<std::string>();
      for (const auto& id : j.at("identifiers")) ad.identifiers.insert(id.get<std::string>());
      ad.image_refs = j.at("images").get<std::vector<std::string>>();
      if (!seen.insert(ad.id).second) throw ParseError(lineno, "duplicate id '" + ad.id + "'");
      ads.push_back(std::move(ad));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return ads;
}

// ---------------------------------------------------------------------------
// Samples and splits

/// One sample per (ad, image) pair; every ad must carry a label and an image.
inline std::vector<MultimodalSample> expand_samples(std::span<const MaskedAd> ads,
                                                    const std::map<std::string, int>& labels) {
  std::vector<MultimodalSample> samples;
  for (const auto& ad : ads) {
    if (ad.image_refs.empty()) throw DataError("ad '" + ad.id + "' has no images");
    auto it = labels.find(ad.id);
    if (it == labels.end()) throw DataError("ad '" + ad.id + "' has no vendor label");
    for (const auto& img : ad.image_refs) samples.push_back({ad.id, ad.text, img, it->second});
  }
  return samples;
}

struct SplitRatios {
  double train = 0.75;
  double val = 0.05;
  double test = 0.20;

  friend bool operator==(const SplitRatios&, const SplitRatios&) = default;
};

inline constexpr std::uint64_t kDefaultSplitSeed = 1111;

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  SplitRatios ratios;
  std::uint64_t seed = kDefaultSplitSeed;

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Sorts the ids, shuffles them with the seed, and cuts contiguous blocks.
/// Input order does not matter.
inline DatasetSplit split_dataset(std::vector<std::string> ids, SplitRatios ratios = {},
                                  std::uint64_t seed = kDefaultSplitSeed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw UsageError("split ratios must be non-negative and sum to 1");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw DataError("split_dataset: duplicate id");
  if (ids.size() < 3) throw DataError("split_dataset: need at least 3 ids");

  Rng rng(seed);
  rng.shuffle(std::span<std::string>(ids));

  const auto n = ids.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n))));
  const auto n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n))));

  DatasetSplit s;
  s.ratios = ratios;
  s.seed = seed;
  auto b = ids.begin();
  s.train_ids.assign(b, b + static_cast<std::ptrdiff_t>(n_train));
  s.val_ids.assign(b + static_cast<std::ptrdiff_t>(n_train), b + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test_ids.assign(b + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return s;
}

}  // namespace vlink
