#pragma once

// Word and character error rates from a minimum-edit-distance alignment with
// unit costs.

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include <filesystem>

#include <nlohmann/json.hpp>

#include "embgen/binary_io.hpp"
#include "embgen/common.hpp"

namespace embgen {

struct TranscriptPair {
  std::string utterance_id;
  std::string reference;
  std::string hypothesis;
};

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const noexcept { return substitutions + deletions + insertions; }
  double rate() const { return static_cast<double>(errors()) / static_cast<double>(reference_length); }
};

/// Lowercase ASCII, drop ASCII punctuation, collapse runs of whitespace to a
/// single space, trim. Non-ASCII bytes pass through.
inline std::string normalize_transcript(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (c < 0x80 && std::ispunct(c)) continue;
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

/// UTF-8 code points; an invalid byte becomes its own unit.
inline std::vector<char32_t> split_chars(std::string_view text) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xe ? 3 : (c >> 3) == 0x1e ? 4 : 0;
    if (len == 0 || i + len > text.size()) {
      out.push_back(c);
      ++i;
      continue;
    }
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1f) : len == 3 ? (c & 0x0f) : (c & 0x07);
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3f);
    }
    if (!ok) {
      out.push_back(c);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

/// Levenshtein alignment with backtrace into S/D/I counts.
template <typename T>
EditCounts align(const std::vector<T>& ref, const std::vector<T>& hyp) {
  const std::size_t m = ref.size(), n = hyp.size();
  std::vector<std::size_t> dp((m + 1) * (n + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (n + 1) + j]; };
  for (std::size_t i = 0; i <= m; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= n; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= m; ++i)
    for (std::size_t j = 1; j <= n; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  EditCounts c;
  c.reference_length = m;
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

inline EditCounts word_edits(const TranscriptPair& p) {
  auto ref = split_words(normalize_transcript(p.reference));
  if (ref.empty()) throw ValidationError("empty reference transcript" + (p.utterance_id.empty() ? "" : " for " + p.utterance_id));
  return align(ref, split_words(normalize_transcript(p.hypothesis)));
}

inline EditCounts char_edits(const TranscriptPair& p) {
  auto ref = split_chars(normalize_transcript(p.reference));
  if (ref.empty()) throw ValidationError("empty reference transcript" + (p.utterance_id.empty() ? "" : " for " + p.utterance_id));
  return align(ref, split_chars(normalize_transcript(p.hypothesis)));
}

inline double wer(const TranscriptPair& p) { return word_edits(p).rate(); }
inline double cer(const TranscriptPair& p) { return char_edits(p).rate(); }

struct ErrorRateSummary {
  double wer = 0.0;  // mean of per-utterance WER
  double cer = 0.0;  // mean of per-utterance CER
  std::size_t count = 0;
};

inline ErrorRateSummary summarize_error_rates(const std::vector<TranscriptPair>& pairs) {
  if (pairs.empty()) throw ValidationError("no transcript pairs");
  ErrorRateSummary s;
  for (const auto& p : pairs) {
    s.wer += wer(p);
    s.cer += cer(p);
  }
  s.count = pairs.size();
  s.wer /= static_cast<double>(s.count);
  s.cer /= static_cast<double>(s.count);
  return s;
}

/// JSON Lines of {"utterance_id", "reference", "hypothesis"}; blank lines skipped.
inline std::vector<TranscriptPair> load_transcripts(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("transcript file not found: " + path.string());
  const std::string text = io::read_file(path);
  std::vector<TranscriptPair> out;
  std::size_t lineno = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++lineno;
    std::string_view line(text.data() + start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("utterance_id").get<std::string>(), j.at("reference").get<std::string>(),
                     j.at("hypothesis").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), lineno, "line");
    }
    if (end == text.size()) break;
  }
  return out;
}

inline nlohmann::json to_json(const ErrorRateSummary& s) {
  return {{"wer", s.wer}, {"cer", s.cer}, {"count", s.count}};
}

}  // namespace embgen
