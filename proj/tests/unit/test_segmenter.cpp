#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "cotprobe/segmenter.hpp"

using namespace cotprobe;

namespace {

// Number of Unicode scalar values (independent of the library's indexer).
std::size_t scalar_count(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

// Byte offset of scalar index i.
std::size_t byte_at(const std::string& s, std::size_t i) {
  std::size_t n = 0;
  for (std::size_t b = 0; b < s.size(); ++b) {
    if ((static_cast<unsigned char>(s[b]) & 0xC0) != 0x80) {
      if (n == i) return b;
      ++n;
    }
  }
  return s.size();
}

std::string fuzz_text(std::mt19937_64& rng, std::size_t i) {
  static const std::vector<std::string> words{
      "the",  "model", "answer", "is",   "likely", "because", "e.g.",   "i.e.", "Dr.",
      "3.14", "x",     "Straße", "naïve", "日本語", "\"quoted.\"", "(aside)", "Note:", "so,",
      "ok;",  "cafe\xCC\x81", "vs.", "wait...", "why?", "yes!"};
  switch (i % 10) {
    case 0: {  // no boundary, no whitespace at all
      std::string s(1 + rng() % 300, 'a');
      for (auto& c : s) c = static_cast<char>('a' + rng() % 26);
      return s;
    }
    case 1:  // single character
      return std::string(1, static_cast<char>('a' + rng() % 26));
    case 2: {  // combining-mark heavy, no spaces
      std::string s;
      const std::size_t n = 2 + rng() % 40;
      for (std::size_t j = 0; j < n; ++j) s += (rng() % 2) ? "e\xCC\x81" : "o";
      return s;
    }
    case 3: {  // terminators only
      std::string s;
      const std::size_t n = 1 + rng() % 30;
      for (std::size_t j = 0; j < n; ++j) s += ".!? "[rng() % 4];
      return s;
    }
    default: {  // prose of random words and sentences
      std::string s;
      const std::size_t n = 1 + rng() % 120;
      for (std::size_t j = 0; j < n; ++j) {
        if (j) s += (rng() % 7 == 0) ? "\n" : " ";
        s += words[rng() % words.size()];
        if (rng() % 6 == 0) s += ".!?"[rng() % 3];
      }
      return s;
    }
  }
}

// Whether some strictly increasing choice of k-1 boundaries keeps every cut
// within `bound` of its target. Taking the smallest admissible boundary each
// time is optimal because the target windows move right monotonically.
bool bound_attainable(const std::vector<std::size_t>& interior, std::size_t len, std::size_t k,
                      double bound) {
  std::size_t next = 0;
  for (std::size_t j = 1; j < k; ++j) {
    const double target = static_cast<double>(j) * static_cast<double>(len) / k;
    while (next < interior.size() && static_cast<double>(interior[next]) < target - bound) ++next;
    if (next == interior.size() || static_cast<double>(interior[next]) > target + bound) return false;
    ++next;
  }
  return true;
}

}  // namespace

TEST(SentenceBoundaries, SimpleTerminators) {
  EXPECT_EQ(sentence_boundaries("One. Two. Three."), (std::vector<std::size_t>{4, 9, 16}));
  EXPECT_EQ(sentence_boundaries("Why? Yes! Done."), (std::vector<std::size_t>{4, 9, 15}));
}

TEST(SentenceBoundaries, AbbreviationGuard) {
  EXPECT_TRUE(sentence_boundaries("e.g. we think").empty());
  EXPECT_TRUE(sentence_boundaries("Ask Dr. Smith").empty());
  EXPECT_TRUE(sentence_boundaries("E.g. this").empty());
  SegmenterOptions none;
  none.abbreviations.clear();
  EXPECT_EQ(sentence_boundaries("e.g. we think", none).size(), 1u);
}

TEST(SentenceBoundaries, ClosersEllipsesAndDecimals) {
  EXPECT_EQ(sentence_boundaries("He said \"Stop.\" Then left."),
            (std::vector<std::size_t>{15, 26}));
  EXPECT_EQ(sentence_boundaries("Wait... then go."), (std::vector<std::size_t>{7, 16}));
  EXPECT_EQ(sentence_boundaries("3.14 is pi."), (std::vector<std::size_t>{11}));
  EXPECT_TRUE(sentence_boundaries("no terminator here").empty());
}

TEST(SentenceBoundaries, CountsScalarValues) {
  // "Ünï." is 4 scalars but 6 bytes.
  EXPECT_EQ(sentence_boundaries("\xC3\x9Cn\xC3\xAF. B."), (std::vector<std::size_t>{4, 7}));
}

TEST(CutPoints, EqualSentencesCutAtEachEnd) {
  std::string text;
  std::vector<std::size_t> ends;
  for (int i = 0; i < 10; ++i) {
    if (i) text += ' ';
    text += "abcd efgh.";
    ends.push_back(text.size());
  }
  EXPECT_EQ(cut_points(text, 10), ends);
}

TEST(CutPoints, TokenFreeStringUsesMidpointFallback) {
  // Hand-run fallback: 1000 -> 500 -> 250, 750 -> 125, 375, 625, 875 -> the two
  // leftmost 125-long segments split at 62 (62.5 snapped left) and 187.
  const std::string text(1000, 'x');
  EXPECT_EQ(cut_points(text, 10),
            (std::vector<std::size_t>{62, 125, 187, 250, 375, 500, 625, 750, 875, 1000}));
}

TEST(CutPoints, FiveSentencesGetFiveFallbackCuts) {
  const std::string text =
      "The first sentence is here. The second one follows it. A third sentence appears now. "
      "Then comes the fourth line. Finally the fifth ends it.";
  const auto b = sentence_boundaries(text);
  ASSERT_EQ(b.size(), 5u);
  const auto cuts = cut_points(text, 10);
  ASSERT_EQ(cuts.size(), 10u);
  for (std::size_t x : b) EXPECT_NE(std::find(cuts.begin(), cuts.end(), x), cuts.end()) << x;
  EXPECT_EQ(cuts.back(), text.size());
}

TEST(CutPoints, ForcedBoundariesCanExceedGapBound) {
  // Exactly k-1 interior ends, all crowded to the left: every cut is forced,
  // and the middle ones land far left of i*L/k even though no gap is that wide.
  std::string text = "A. B. C. ";
  text += std::string(40, 'x') + ". " + std::string(40, 'y') + ".";
  const auto b = sentence_boundaries(text);
  ASSERT_EQ(b.size(), 5u);
  const auto cuts = cut_points(text, 5);
  EXPECT_EQ(cuts, b);
  EXPECT_FALSE(bound_attainable({b.begin(), b.end() - 1}, text.size(), 5, 42.0));
}

TEST(CutPoints, FallbackPrefersPunctuationThenWhitespace) {
  // One 2-cut request on a boundary-free text: the split lands after the comma
  // even though a space is closer to the middle.
  EXPECT_EQ(cut_points("alpha, beta gamma delta", 2), (std::vector<std::size_t>{6, 23}));
  EXPECT_EQ(cut_points("alpha beta gamma", 2), (std::vector<std::size_t>{6, 16}));
}

TEST(CutPoints, FallbackNeverDetachesCombiningMark) {
  // Each "e" + U+0301 pair must stay together.
  std::string text;
  for (int i = 0; i < 8; ++i) text += "e\xCC\x81";
  const auto cuts = cut_points(text, 4);
  for (std::size_t c : cuts) EXPECT_EQ(c % 2, 0u) << c;
}

TEST(CutPoints, Errors) {
  EXPECT_THROW(cut_points("abc", 0), ArgumentError);
  EXPECT_THROW(cut_points("abc", 4), DegenerateInputError);
  EXPECT_THROW(cut_points("", 1), DegenerateInputError);
  EXPECT_EQ(cut_points("a", 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(cut_points("abc", 3), (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Prefixes, SlicingSemantics) {
  CoTTrace t;
  t.text = "abcdefghi";
  t.cut_points = {5, 9};
  EXPECT_EQ(prefixes(t), (std::vector<std::string>{"", "abcde", "abcdefghi"}));
}

TEST(Prefixes, MultibyteSlicesOnCharacterBoundaries) {
  const auto t = make_trace("\xC3\xA9t\xC3\xA9. Deux.", "m", 2);
  const auto p = prefixes(t);
  EXPECT_EQ(p[1], "\xC3\xA9t\xC3\xA9.");
  EXPECT_EQ(p[2], t.text);
}

TEST(Prefixes, RejectsInvalidTrace) {
  CoTTrace t;
  t.text = "abc";
  t.cut_points = {2, 2, 3};
  EXPECT_THROW(prefixes(t), ArgumentError);
  t.cut_points = {1, 2};
  EXPECT_THROW(prefixes(t), ArgumentError);
}

TEST(SegmenterFuzz, InvariantsHoldOnSeededCorpus) {
  std::mt19937_64 rng(20240611);
  std::size_t with_sentence_mode = 0;
  std::size_t bound_checked = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    const std::string text = fuzz_text(rng, i);
    const std::size_t len = scalar_count(text);
    const std::size_t k = std::min<std::size_t>(10, len);
    SCOPED_TRACE("text #" + std::to_string(i) + ": " + text);
    if (len < 10) {
      EXPECT_THROW(cut_points(text, 10), DegenerateInputError);
    }

    const auto cuts = cut_points(text, k);
    ASSERT_EQ(cuts.size(), k);
    EXPECT_GT(cuts.front(), 0u);
    for (std::size_t j = 1; j < cuts.size(); ++j) EXPECT_LT(cuts[j - 1], cuts[j]);
    EXPECT_EQ(cuts.back(), len);
    EXPECT_EQ(cut_points(text, k), cuts);  // determinism

    CoTTrace t;
    t.text = text;
    t.cut_points = cuts;
    const auto p = prefixes(t);
    ASSERT_EQ(p.size(), k + 1);
    EXPECT_EQ(p.front(), "");
    EXPECT_EQ(p.back(), text);
    for (std::size_t j = 1; j <= k; ++j) {
      EXPECT_EQ(p[j], text.substr(0, byte_at(text, cuts[j - 1])));
      EXPECT_EQ(p[j].compare(0, p[j - 1].size(), p[j - 1]), 0);
    }

    std::vector<std::size_t> interior;
    for (std::size_t b : sentence_boundaries(text))
      if (b < len) interior.push_back(b);
    if (interior.size() + 1 >= k) {
      ++with_sentence_mode;
      std::vector<std::size_t> ends{0};
      ends.insert(ends.end(), interior.begin(), interior.end());
      ends.push_back(len);
      std::size_t max_gap = 0;
      for (std::size_t j = 1; j < ends.size(); ++j) max_gap = std::max(max_gap, ends[j] - ends[j - 1]);
      for (std::size_t j = 1; j < k; ++j)
        EXPECT_NE(std::find(interior.begin(), interior.end(), cuts[j - 1]), interior.end());
      if (bound_attainable(interior, len, k, static_cast<double>(max_gap))) {
        ++bound_checked;
        for (std::size_t j = 1; j < k; ++j) {
          const double target = static_cast<double>(j) * static_cast<double>(len) / k;
          EXPECT_LE(std::abs(static_cast<double>(cuts[j - 1]) - target), static_cast<double>(max_gap));
        }
      }
    }
  }
  EXPECT_GT(with_sentence_mode, 50u);
  EXPECT_GT(bound_checked, 40u);
}
