#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "cotprobe/detail/utf8.hpp"
#include "cotprobe/error.hpp"

// Accumulative segmentation of reasoning text. All offsets are counted in
// Unicode scalar values, never bytes.

namespace cotprobe {

inline const std::vector<std::string>& default_abbreviations() {
  static const std::vector<std::string> list{
      "e.g.", "i.e.", "cf.", "vs.", "viz.", "approx.", "fig.", "eq.", "mr.", "mrs.",
      "ms.",  "dr.",  "prof.", "st.", "jr.", "sr.", "inc.", "ltd.", "co.", "al."};
  return list;
}

struct SegmenterOptions {
  std::vector<std::string> abbreviations = default_abbreviations();
};

struct CoTTrace {
  std::string text;
  std::string source_model;
  std::vector<std::size_t> cut_points;
  bool unterminated = false;

  std::size_t steps() const noexcept { return cut_points.size(); }
};

namespace detail {

inline bool is_terminator(char32_t c) { return c == U'.' || c == U'!' || c == U'?'; }

inline bool is_closer(char32_t c) {
  return c == U'"' || c == U'\'' || c == U')' || c == U']' || c == U'}' || c == 0x201D ||
         c == 0x2019 || c == 0x00BB || c == 0x300D || c == 0x300F;
}

inline bool is_opener(char32_t c) {
  return c == U'"' || c == U'\'' || c == U'(' || c == U'[' || c == U'{' || c == 0x201C ||
         c == 0x2018 || c == 0x00AB;
}

// Lower-cased word ending at `last` (inclusive), leading openers stripped.
inline std::string word_ending_at(const Utf8Index& idx, std::size_t last) {
  std::size_t first = last;
  while (first > 0 && !is_space(idx.cps[first - 1])) --first;
  while (first < last && is_opener(idx.cps[first])) ++first;
  std::string out;
  for (std::size_t i = first; i <= last; ++i) out += encode_utf8(ascii_lower(idx.cps[i]));
  return out;
}

inline std::vector<std::size_t> boundaries_of(const Utf8Index& idx,
                                              const SegmenterOptions& opts) {
  std::vector<std::size_t> out;
  const std::size_t n = idx.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_terminator(idx.cps[i])) continue;
    std::size_t j = i;
    while (j + 1 < n && is_terminator(idx.cps[j + 1])) ++j;
    while (j + 1 < n && is_closer(idx.cps[j + 1])) ++j;
    const bool at_gap = j + 1 == n || is_space(idx.cps[j + 1]);
    if (at_gap) {
      bool abbreviation = false;
      if (idx.cps[i] == U'.' && (j == i || !is_terminator(idx.cps[i + 1]))) {
        const std::string word = word_ending_at(idx, i);
        abbreviation = std::find(opts.abbreviations.begin(), opts.abbreviations.end(), word) !=
                       opts.abbreviations.end();
      }
      if (!abbreviation) out.push_back(j + 1);
    }
    i = j;
  }
  return out;
}

// Position p splits before cps[p]; it must not detach a combining mark.
inline bool splittable(const Utf8Index& idx, std::size_t p) {
  return p < idx.size() && !is_combining(idx.cps[p]);
}

inline std::size_t nearest_to(const std::vector<std::size_t>& cands, double target) {
  std::size_t best = cands.front();
  double best_d = std::abs(static_cast<double>(best) - target);
  for (std::size_t c : cands) {
    const double d = std::abs(static_cast<double>(c) - target);
    if (d < best_d) {
      best = c;
      best_d = d;
    }
  }
  return best;
}

// Split point strictly inside (s, e), e - s >= 2: punctuation, then
// whitespace, then the midpoint.
inline std::size_t split_point(const Utf8Index& idx, std::size_t s, std::size_t e) {
  const double mid = (static_cast<double>(s) + static_cast<double>(e)) / 2.0;
  std::vector<std::size_t> punct;
  std::vector<std::size_t> space;
  for (std::size_t q = s; q + 1 < e; ++q) {
    const char32_t c = idx.cps[q];
    if (!splittable(idx, q + 1)) continue;
    if (c == U';' || c == U',' || c == U':' || is_terminator(c))
      punct.push_back(q + 1);
    else if (is_space(c))
      space.push_back(q + 1);
  }
  if (!punct.empty()) return nearest_to(punct, mid);
  if (!space.empty()) return nearest_to(space, mid);

  const std::size_t m = s + (e - s) / 2;
  for (std::size_t p = m; p > s; --p)
    if (splittable(idx, p)) return p;
  for (std::size_t p = m + 1; p < e; ++p)
    if (splittable(idx, p)) return p;
  return m;
}

}  // namespace detail

// Offsets just past each sentence terminator (plus trailing closers) that is
// followed by whitespace or the end of the text.
inline std::vector<std::size_t> sentence_boundaries(std::string_view text,
                                                    const SegmenterOptions& opts = {}) {
  return detail::boundaries_of(detail::index_utf8(text), opts);
}

// k strictly increasing cut offsets ending at the text length. Uses the
// sentence ends nearest to i*L/k when at least k-1 interior ends exist,
// otherwise splits the longest segment repeatedly.
inline std::vector<std::size_t> cut_points(std::string_view text, std::size_t k = 10,
                                           const SegmenterOptions& opts = {}) {
  if (k == 0) throw ArgumentError("cut_points: k must be positive");
  const auto idx = detail::index_utf8(text);
  const std::size_t len = idx.size();
  if (k > len)
    throw DegenerateInputError("cut_points: k=" + std::to_string(k) +
                               " exceeds text length " + std::to_string(len));

  std::vector<std::size_t> interior;
  for (std::size_t b : detail::boundaries_of(idx, opts))
    if (b > 0 && b < len) interior.push_back(b);

  std::vector<std::size_t> cuts;
  cuts.reserve(k);
  if (interior.size() + 1 >= k) {
    const std::size_t m = interior.size();
    std::size_t lo = 0;
    for (std::size_t i = 1; i < k; ++i) {
      const double target = static_cast<double>(i) * static_cast<double>(len) /
                            static_cast<double>(k);
      // Leave enough boundaries for the remaining k-1-i cuts.
      const std::size_t hi = m - k + i;
      auto it = std::lower_bound(interior.begin() + lo, interior.begin() + hi + 1,
                                 static_cast<std::size_t>(std::ceil(target)));
      std::size_t pick = static_cast<std::size_t>(it - interior.begin());
      if (pick > hi) pick = hi;
      if (pick > lo && std::abs(static_cast<double>(interior[pick - 1]) - target) <=
                           std::abs(static_cast<double>(interior[pick]) - target))
        --pick;
      cuts.push_back(interior[pick]);
      lo = pick + 1;
    }
    cuts.push_back(len);
    return cuts;
  }

  cuts = interior;
  cuts.push_back(len);
  while (cuts.size() < k) {
    std::size_t best = 0;
    std::size_t best_len = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < cuts.size(); ++i) {
      const std::size_t seg = cuts[i] - start;
      if (seg > best_len) {
        best_len = seg;
        best = i;
      }
      start = cuts[i];
    }
    const std::size_t s = best == 0 ? 0 : cuts[best - 1];
    const std::size_t p = detail::split_point(idx, s, cuts[best]);
    cuts.insert(cuts.begin() + static_cast<std::ptrdiff_t>(best), p);
  }
  return cuts;
}

inline CoTTrace make_trace(std::string text, std::string source_model, std::size_t k = 10,
                           const SegmenterOptions& opts = {}) {
  CoTTrace t;
  t.cut_points = cut_points(text, k, opts);
  t.text = std::move(text);
  t.source_model = std::move(source_model);
  return t;
}

inline void validate_trace(const CoTTrace& trace) {
  const std::size_t len = detail::index_utf8(trace.text).size();
  if (trace.cut_points.empty()) throw ArgumentError("trace has no cut points");
  for (std::size_t i = 1; i < trace.cut_points.size(); ++i)
    if (trace.cut_points[i] <= trace.cut_points[i - 1])
      throw ArgumentError("trace cut points are not strictly increasing");
  if (trace.cut_points.front() == 0 || trace.cut_points.back() != len)
    throw ArgumentError("trace cut points must lie in (0, length] and end at length");
}

// k+1 accumulative prefixes; element 0 is empty, element k the full text.
inline std::vector<std::string> prefixes(const CoTTrace& trace) {
  validate_trace(trace);
  const auto idx = detail::index_utf8(trace.text);
  std::vector<std::string> out;
  out.reserve(trace.cut_points.size() + 1);
  out.emplace_back();
  for (std::size_t c : trace.cut_points) out.push_back(trace.text.substr(0, idx.byte_offset[c]));
  return out;
}

}  // namespace cotprobe
