#include <gtest/gtest.h>

#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vlink/random.hpp"
#include "vlink/records.hpp"

using namespace vlink;
using namespace vlink::oracles;

namespace {

std::vector<RawAd> parse_jsonl(const std::string& s) {
  std::istringstream in(s);
  return parse_ads(in, AdFormat::jsonl);
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Region, ParsesCaseInsensitively) {
  EXPECT_EQ(region_from_string("south"), Region::South);
  EXPECT_EQ(region_from_string("NORTHEAST"), Region::Northeast);
  EXPECT_FALSE(region_from_string("Atlantis").has_value());
}

TEST(ParseAds, WellFormedJsonl) {
  auto ads = parse_jsonl(R"({"id":"a1","region":"South","title":"t","description":"d","images":["x.jpg"]})" "\n");
  ASSERT_EQ(ads.size(), 1u);
  EXPECT_EQ(ads[0].id, "a1");
  EXPECT_EQ(ads[0].region, Region::South);
  EXPECT_EQ(ads[0].image_refs, std::vector<std::string>{"x.jpg"});
}

TEST(ParseAds, BlankLinesSkipped) {
  auto ads = parse_jsonl("\n" R"({"id":"a","region":"West","title":"","description":""})" "\n\n");
  EXPECT_EQ(ads.size(), 1u);
}

TEST(ParseAds, MissingTitleReportsLine) {
  try {
    parse_jsonl(R"({"id":"a1","region":"South","title":"t","description":"d"})" "\n"
                R"({"id":"a2","region":"South","description":"d"})" "\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("title"), std::string::npos);
  }
}

TEST(ParseAds, DuplicateIdNamesId) {
  try {
    parse_jsonl(R"({"id":"a1","region":"South","title":"t","description":"d"})" "\n"
                R"({"id":"a1","region":"South","title":"t","description":"d"})" "\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("a1"), std::string::npos);
  }
}

TEST(ParseAds, MalformedJsonAndUnknownRegion) {
  EXPECT_THROW(parse_jsonl("{not json\n"), ParseError);
  EXPECT_THROW(parse_jsonl(R"({"id":"a","region":"Mars","title":"","description":""})" "\n"), ParseError);
}

TEST(ParseAds, CsvWithHeaderAndImageList) {
  std::istringstream in(
      "id,region,title,description,images\n"
      "a1,Midwest,\"Hi, there\",call now,img1.jpg; img2.jpg\n");
  auto ads = parse_ads(in, AdFormat::csv);
  ASSERT_EQ(ads.size(), 1u);
  EXPECT_EQ(ads[0].title, "Hi, there");
  EXPECT_EQ(ads[0].region, Region::Midwest);
  EXPECT_EQ(ads[0].image_refs, (std::vector<std::string>{"img1.jpg", "img2.jpg"}));
}

TEST(ParseAds, CsvColumnCountMismatch) {
  std::istringstream in("id,region,title,description\na1,South,t\n");
  EXPECT_THROW(parse_ads(in, AdFormat::csv), ParseError);
}

TEST(BuildAdText, Examples) {
  EXPECT_EQ(build_ad_text("Hi", "call now"), "Hi [SEP] call now");
  EXPECT_EQ(build_ad_text("", ""), " [SEP] ");
}

TEST(BuildAdText, TruncatesTo512Tokens) {
  std::string title, desc;
  for (int i = 0; i < 300; ++i) title += "t" + std::to_string(i) + " ";
  for (int i = 0; i < 300; ++i) desc += "d" + std::to_string(i) + " ";
  const auto text = build_ad_text(title, desc);
  std::istringstream in(text);
  std::size_t tokens = 0;
  for (std::string tok; in >> tok;) ++tokens;
  EXPECT_EQ(tokens, 512u);
  EXPECT_EQ(count_of(text, "[SEP]"), 1u);
}

TEST(BuildAdText, LongTitleKeepsSeparator) {
  std::string title;
  for (int i = 0; i < 700; ++i) title += "w ";
  const auto text = build_ad_text(title, "tail");
  EXPECT_EQ(count_of(text, "[SEP]"), 1u);
  EXPECT_EQ(text.substr(text.size() - 5), "[SEP]");
}

TEST(BuildAdText, InnerSeparatorsEscaped) {
  const auto text = build_ad_text("a [SEP] b", "[SEP][SEP]");
  EXPECT_EQ(count_of(text, "[SEP]"), 1u);
  EXPECT_EQ(count_of(text, "[SEP\\]"), 3u);
}

TEST(ExtractIdentifiers, Examples) {
  EXPECT_EQ(extract_identifiers_from_text("(555) 123-4567"), std::set<std::string>{"5551234567"});
  EXPECT_EQ(extract_identifiers_from_text("five five five one two three four five six seven"),
            std::set<std::string>{"5551234567"});
  EXPECT_TRUE(extract_identifiers_from_text("no contact info here").empty());
}

TEST(ExtractIdentifiers, RunRules) {
  EXPECT_TRUE(extract_identifiers_from_text("555 123 456").empty());             // 9 digits
  EXPECT_TRUE(extract_identifiers_from_text("555-123    4567").empty());         // gap of 4 breaks the run
  EXPECT_EQ(extract_identifiers_from_text("+1 (555) 123-4567"), std::set<std::string>{"15551234567"});
  EXPECT_EQ(extract_identifiers_from_text("5551234567 5559876543"),
            (std::set<std::string>{"5551234567", "5559876543"}));
  EXPECT_EQ(extract_identifiers_from_text("call 555.123.4567 or 555x1234567"), std::set<std::string>{"5551234567"});
  EXPECT_EQ(extract_identifiers_from_text("FIVE five 5 one 2 three 4 five 6 SEVEN"),
            std::set<std::string>{"5551234567"});
}

TEST(ExtractIdentifiers, TitleAndDescription) {
  RawAd ad{"a", Region::South, "555 123 4567", "or 444-222-1111", {}};
  EXPECT_EQ(extract_identifiers(ad), (std::set<std::string>{"4442221111", "5551234567"}));
}

// Word/digit rule-table oracle over 50 generated strings: each digit of a
// known number is rendered either as a numeral or as its English word, with
// random light separators between groups.
TEST(ExtractIdentifiers, WordDigitTableOracle) {
  static const char* kWords[] = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};
  static const char* kSeps[] = {" ", "-", ".", " - ", "  ", "(", ") "};
  Rng rng(2024);
  for (int t = 0; t < 50; ++t) {
    const std::size_t len = 10 + rng.below(6);
    std::string digits, text = "call me ";
    for (std::size_t i = 0; i < len; ++i) {
      const auto d = rng.below(10);
      digits.push_back(static_cast<char>('0' + d));
      const bool word = rng.uniform() < 0.5;
      const bool prev_word = !text.empty() && std::isalpha(static_cast<unsigned char>(text.back()));
      if (i > 0 && (word || prev_word || rng.uniform() < 0.3)) text += kSeps[rng.below(std::size(kSeps))];
      text += word ? kWords[d] : std::string(1, static_cast<char>('0' + d));
    }
    text += " tonight";
    EXPECT_EQ(extract_identifiers_from_text(text), std::set<std::string>{digits}) << text;
  }
}

TEST(MaskText, Examples) {
  EXPECT_EQ(mask_text("mail a@b.com see http://x.y"), "mail <EMAILID-1> see <LINK>");
  EXPECT_EQ(mask_text("call 555-123-4567, age 23"), "call NNN-NNN-NNNN, age NN");
}

TEST(MaskText, EmailCounterPerDistinctAddress) {
  EXPECT_EQ(mask_text("x@y.com X@Y.com z@w.org"), "<EMAILID-1> <EMAILID-1> <EMAILID-2>");
  EXPECT_EQ(mask_text("bob23@mail99.com"), "<EMAILID-1>");
}

TEST(MaskText, LinksDatesPostIds) {
  EXPECT_EQ(mask_text("see www.site.com/page?id=3 now"), "see <LINK> now");
  EXPECT_EQ(mask_text("ftp://files.example.org/x"), "<LINK>");
  EXPECT_EQ(mask_text("on 12/05/2016 and 2016-05-12"), "on <DATES> and <DATES>");
  EXPECT_EQ(mask_text("since Jan 5, 2016"), "since <DATES>");
  EXPECT_EQ(mask_text("the 5th of January"), "the <DATES>");
  EXPECT_EQ(mask_text("Post ID: 4815162"), "POST_ID: NNNNN");
}

TEST(MaskText, SpelledPhoneWordsMaskedButOtherNumberWordsKept) {
  const std::string text = "five five five one two three four five six seven, I have one dog";
  const auto ids = extract_identifiers_from_text(text);
  EXPECT_EQ(mask_text(text, ids), "N N N N N N N N N N, I have one dog");
  EXPECT_EQ(mask_text(text), mask_text(text, ids));
  EXPECT_EQ(mask_text("two dogs and three cats"), "two dogs and three cats");
}

TEST(MaskText, SpelledRunRevealedByLinkReplacementIsMasked) {
  const std::string raw = "one two three four five six seven eight nine zerohttp://x.io";
  EXPECT_TRUE(extract_identifiers_from_text(raw).empty());
  EXPECT_EQ(mask_text(raw), "N N N N N N N N N N<LINK>");
}

TEST(MaskAd, IdentifiersFromRawThenMasked) {
  RawAd ad{"a9", Region::West, "Call 555 123 4567", "mail me at me@x.io", {"i.jpg"}};
  const auto m = mask_ad(ad);
  EXPECT_EQ(m.identifiers, std::set<std::string>{"5551234567"});
  EXPECT_EQ(m.text, "Call NNN NNN NNNN [SEP] mail me at <EMAILID-1>");
  EXPECT_EQ(m.image_refs, ad.image_refs);
}

TEST(MaskText, FuzzIdempotenceAndCleanliness) {
  Rng rng(77);
  for (int t = 0; t < 10000; ++t) {
    const std::string raw = fuzz_string(rng);
    const auto problem = masking_violation(raw);
    ASSERT_TRUE(problem.empty()) << "input: " << raw << "\n" << problem;
  }
}

TEST(MaskedJsonl, Roundtrip) {
  std::vector<MaskedAd> ads{{"a", Region::South, "x [SEP] y", {"5551234567"}, {"1.jpg", "2.jpg"}},
                            {"b", Region::Other, "p [SEP] q", {}, {}}};
  std::ostringstream out;
  write_masked_jsonl(out, ads);
  std::istringstream in(out.str());
  const auto back = read_masked_jsonl(in);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].identifiers, ads[0].identifiers);
  EXPECT_EQ(back[0].image_refs, ads[0].image_refs);
  EXPECT_EQ(back[1].region, Region::Other);
  std::ostringstream again;
  write_masked_jsonl(again, back);
  EXPECT_EQ(again.str(), out.str());
}

TEST(ExpandSamples, OneSamplePerImage) {
  std::vector<MaskedAd> ads{{"a", Region::South, "t", {"1"}, {"i1", "i2", "i3", "i4", "i5"}},
                            {"b", Region::South, "u", {"2"}, {"j1"}}};
  std::map<std::string, int> labels{{"a", 0}, {"b", 1}};
  const auto s = expand_samples(ads, labels);
  ASSERT_EQ(s.size(), 6u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(s[i].text, "t");
    EXPECT_EQ(s[i].vendor, 0);
  }
  EXPECT_EQ(s[5].image_ref, "j1");
}

TEST(ExpandSamples, Errors) {
  std::vector<MaskedAd> no_img{{"a", Region::South, "t", {"1"}, {}}};
  EXPECT_THROW(expand_samples(no_img, std::map<std::string, int>{{"a", 0}}), DataError);
  std::vector<MaskedAd> unlabeled{{"a", Region::South, "t", {"1"}, {"x"}}};
  EXPECT_THROW(expand_samples(unlabeled, std::map<std::string, int>{}), DataError);
}

TEST(SplitDataset, DefaultRatiosOnHundredIds) {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("id" + std::to_string(i));
  const auto s = split_dataset(ids);
  EXPECT_EQ(s.train_ids.size(), 75u);
  EXPECT_EQ(s.val_ids.size(), 5u);
  EXPECT_EQ(s.test_ids.size(), 20u);
  std::set<std::string> all(s.train_ids.begin(), s.train_ids.end());
  all.insert(s.val_ids.begin(), s.val_ids.end());
  all.insert(s.test_ids.begin(), s.test_ids.end());
  EXPECT_EQ(all, std::set<std::string>(ids.begin(), ids.end()));
  EXPECT_EQ(all.size(), 100u);
}

TEST(SplitDataset, DeterministicAndOrderInvariant) {
  std::vector<std::string> ids;
  for (int i = 0; i < 57; ++i) ids.push_back("x" + std::to_string(i));
  const auto a = split_dataset(ids, {}, 1111);
  std::reverse(ids.begin(), ids.end());
  const auto b = split_dataset(ids, {}, 1111);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.train_ids, split_dataset(ids, {}, 1112).train_ids);
}

TEST(SplitDataset, Errors) {
  std::vector<std::string> ids{"a", "b", "c"};
  EXPECT_THROW(split_dataset(ids, {0.5, 0.5, 0.5}), UsageError);
  EXPECT_THROW(split_dataset({"a", "a", "b"}), DataError);
  EXPECT_THROW(split_dataset({"a", "b"}), DataError);
}
