#pragma once

// SQuAD 2.0 style scoring: exact match, token precision/recall/F1, and the
// "cannot be found" convention for unanswerable questions.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "laffi/corpus.hpp"
#include "laffi/csv.hpp"
#include "laffi/errors.hpp"

namespace laffi {

// Lowercase, strip ASCII punctuation, drop the articles a/an/the, split on
// whitespace.
inline std::vector<std::string> normalize(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 128 && std::ispunct(c)) continue;
    cleaned.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : ch);
  }
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && std::isspace(static_cast<unsigned char>(cleaned[i]))) ++i;
    std::size_t j = i;
    while (j < cleaned.size() && !std::isspace(static_cast<unsigned char>(cleaned[j]))) ++j;
    if (j > i) {
      std::string tok = cleaned.substr(i, j - i);
      if (tok != "a" && tok != "an" && tok != "the") tokens.push_back(std::move(tok));
    }
    i = j;
  }
  return tokens;
}

struct PRF {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

inline PRF prf(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) return {1, 1, 1};
  if (pred.empty() || gold.empty()) return {0, 0, 0};
  std::map<std::string_view, long> counts;
  for (const auto& t : gold) ++counts[t];
  long common = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return {0, 0, 0};
  PRF r;
  r.precision = static_cast<double>(common) / static_cast<double>(pred.size());
  r.recall = static_cast<double>(common) / static_cast<double>(gold.size());
  r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline bool classify_unanswerable(std::string_view pred_text) {
  static const auto phrase = normalize(kUnanswerablePhrase);
  const auto toks = normalize(pred_text);
  return std::search(toks.begin(), toks.end(), phrase.begin(), phrase.end()) != toks.end();
}

struct ExampleScore {
  std::string example_id;
  int exact_match = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
  bool predicted_unanswerable = false;
};

inline ExampleScore score_example(std::string_view pred_text, const QAExample& example) {
  ExampleScore s;
  s.example_id = example.id;
  s.predicted_unanswerable = classify_unanswerable(pred_text);
  if (!example.is_answerable) {
    if (s.predicted_unanswerable) s.exact_match = 1, s.f1 = s.precision = s.recall = 1;
    return s;
  }
  if (s.predicted_unanswerable) return s;
  const auto pred = normalize(pred_text);
  bool first = true;
  for (const auto& g : example.gold_answers) {
    const auto gold = normalize(g);
    if (gold == pred) s.exact_match = 1;
    const auto r = prf(pred, gold);
    if (first || r.f1 > s.f1) {
      s.f1 = r.f1;
      s.precision = r.precision;
      s.recall = r.recall;
      first = false;
    }
  }
  return s;
}

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
  std::vector<ExampleScore> scores;
};

inline EvalReport aggregate(std::vector<ExampleScore> scores) {
  if (scores.empty()) throw UsageError("aggregate: no scores to aggregate");
  EvalReport r;
  r.n = scores.size();
  for (const auto& s : scores) {
    r.accuracy += s.exact_match;
    r.f1 += s.f1;
    r.precision += s.precision;
    r.recall += s.recall;
  }
  const double k = 100.0 / static_cast<double>(r.n);
  r.accuracy *= k;
  r.f1 *= k;
  r.precision *= k;
  r.recall *= k;
  r.scores = std::move(scores);
  return r;
}

struct Prediction {
  std::string example_id;
  std::string text;
};

// Scores each prediction against its example; unknown ids are a data error.
inline EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<QAExample>& corpus) {
  const CorpusIndex index(corpus);
  std::vector<ExampleScore> scores;
  scores.reserve(predictions.size());
  for (const auto& p : predictions) scores.push_back(score_example(p.text, index.at(p.example_id)));
  return aggregate(std::move(scores));
}

// Prediction JSONL: {"example_id", "predicted_answer"} or {"example_id", "prediction"}.
inline std::vector<Prediction> parse_predictions(std::string_view text, const std::string& origin = "<memory>") {
  std::vector<Prediction> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = json::parse(line);
      Prediction p;
      j.at("example_id").get_to(p.example_id);
      if (j.contains("predicted_answer")) j.at("predicted_answer").get_to(p.text);
      else j.at("prediction").get_to(p.text);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  return parse_predictions(read_text_file(path), path.string());
}

inline json report_json(const EvalReport& r) {
  json scores = json::array();
  for (const auto& s : r.scores) {
    scores.push_back({{"example_id", s.example_id},
                      {"exact_match", s.exact_match},
                      {"f1", s.f1},
                      {"precision", s.precision},
                      {"recall", s.recall},
                      {"predicted_unanswerable", s.predicted_unanswerable}});
  }
  return {{"n", r.n},
          {"accuracy", r.accuracy},
          {"f1", r.f1},
          {"precision", r.precision},
          {"recall", r.recall},
          {"scores", std::move(scores)}};
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = csv_row({"example_id", "exact_match", "f1", "precision", "recall", "predicted_unanswerable"});
  for (const auto& s : r.scores) {
    out += csv_row({s.example_id, std::to_string(s.exact_match), format_fixed(s.f1, 6),
                    format_fixed(s.precision, 6), format_fixed(s.recall, 6),
                    s.predicted_unanswerable ? "true" : "false"});
  }
  return out;
}

}  // namespace laffi
