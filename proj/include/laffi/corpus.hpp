#pragma once

// Dataset records, SQuAD 2.0 ingestion, JSONL persistence, seeded sampling,
// human/AI mixing, annotator segmentation, prompt templates and the
// synthetic QA generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "laffi/errors.hpp"
#include "laffi/hash.hpp"

namespace laffi {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kUnanswerablePhrase = "the answer cannot be found";

struct QAExample {
  std::string id;
  std::string passage;
  std::string question;
  std::vector<std::string> gold_answers;
  bool is_answerable = true;

  bool operator==(const QAExample&) const = default;
};

struct PredictedAnswerRecord {
  std::string example_id;
  std::string model_id;
  std::string prompt_fingerprint;
  std::string predicted_answer;

  bool operator==(const PredictedAnswerRecord&) const = default;
};

enum class FeedbackSource { AI, HUMAN };

inline std::string source_name(FeedbackSource s) { return s == FeedbackSource::AI ? "AI" : "HUMAN"; }

inline FeedbackSource parse_source(std::string_view s) {
  if (s == "AI") return FeedbackSource::AI;
  if (s == "HUMAN") return FeedbackSource::HUMAN;
  throw ValidationError("feedback source must be AI or HUMAN, got '" + std::string(s) + "'");
}

struct FeedbackRecord {
  std::string example_id;
  std::string predicted_answer;
  std::string feedback_text;
  FeedbackSource source = FeedbackSource::AI;
  std::optional<std::string> annotator_id;
  std::optional<bool> accepted_ai;
  // Set when the AI annotator produced nothing and the reference feedback
  // was substituted.
  bool fallback = false;

  bool operator==(const FeedbackRecord&) const = default;
};

struct MixSpec {
  std::size_t total_n = 0;
  double human_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (total_n < 1) throw ConfigError("mix: total_n must be >= 1");
    if (!(human_fraction >= 0.0 && human_fraction <= 1.0))
      throw ConfigError("mix: human_fraction must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Validation

inline void validate(const QAExample& e) {
  if (e.id.empty()) throw ValidationError("QAExample: empty id");
  if (e.is_answerable == e.gold_answers.empty()) {
    throw ValidationError("QAExample " + e.id + ": is_answerable must be false exactly when gold_answers is empty");
  }
}

inline void validate(const FeedbackRecord& r) {
  if (r.feedback_text.empty()) throw ValidationError("feedback for " + r.example_id + ": empty feedback_text");
  if (r.source == FeedbackSource::HUMAN && (!r.annotator_id || r.annotator_id->empty()))
    throw ValidationError("feedback for " + r.example_id + ": HUMAN record without annotator_id");
  if (r.source == FeedbackSource::AI && r.accepted_ai)
    throw ValidationError("feedback for " + r.example_id + ": accepted_ai is only defined for HUMAN records");
}

inline void validate(const PredictedAnswerRecord& r) {
  if (r.example_id.empty()) throw ValidationError("prediction record with empty example_id");
}

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline void check_schema(const json& j) {
  if (!j.contains("schema_version")) throw ParseError("record is missing schema_version");
  const int v = j.at("schema_version").get<int>();
  if (v != kSchemaVersion) throw ParseError("unsupported schema_version " + std::to_string(v));
}

}  // namespace detail

inline void to_json(json& j, const QAExample& e) {
  j = json{{"schema_version", kSchemaVersion}, {"id", e.id},
           {"passage", e.passage},             {"question", e.question},
           {"gold_answers", e.gold_answers},   {"is_answerable", e.is_answerable}};
}

inline void from_json(const json& j, QAExample& e) {
  detail::check_schema(j);
  j.at("id").get_to(e.id);
  j.at("passage").get_to(e.passage);
  j.at("question").get_to(e.question);
  j.at("gold_answers").get_to(e.gold_answers);
  j.at("is_answerable").get_to(e.is_answerable);
}

inline void to_json(json& j, const PredictedAnswerRecord& r) {
  j = json{{"schema_version", kSchemaVersion},
           {"example_id", r.example_id},
           {"model_id", r.model_id},
           {"prompt_fingerprint", r.prompt_fingerprint},
           {"predicted_answer", r.predicted_answer}};
}

inline void from_json(const json& j, PredictedAnswerRecord& r) {
  detail::check_schema(j);
  j.at("example_id").get_to(r.example_id);
  j.at("model_id").get_to(r.model_id);
  j.at("prompt_fingerprint").get_to(r.prompt_fingerprint);
  j.at("predicted_answer").get_to(r.predicted_answer);
}

inline void to_json(json& j, const FeedbackRecord& r) {
  j = json{{"schema_version", kSchemaVersion},
           {"example_id", r.example_id},
           {"predicted_answer", r.predicted_answer},
           {"feedback_text", r.feedback_text},
           {"source", source_name(r.source)}};
  if (r.annotator_id) j["annotator_id"] = *r.annotator_id;
  if (r.accepted_ai) j["accepted_ai"] = *r.accepted_ai;
  if (r.fallback) j["fallback"] = true;
}

inline void from_json(const json& j, FeedbackRecord& r) {
  detail::check_schema(j);
  j.at("example_id").get_to(r.example_id);
  j.at("predicted_answer").get_to(r.predicted_answer);
  j.at("feedback_text").get_to(r.feedback_text);
  r.source = parse_source(j.at("source").get<std::string>());
  r.annotator_id.reset();
  r.accepted_ai.reset();
  if (j.contains("annotator_id") && !j["annotator_id"].is_null()) r.annotator_id = j["annotator_id"].get<std::string>();
  if (j.contains("accepted_ai") && !j["accepted_ai"].is_null()) r.accepted_ai = j["accepted_ai"].get<bool>();
  r.fallback = j.value("fallback", false);
}

// ---------------------------------------------------------------------------
// JSONL

template <typename Record>
std::string to_jsonl(const std::vector<Record>& records) {
  std::string out;
  for (const auto& r : records) {
    out += json(r).dump();
    out += '\n';
  }
  return out;
}

template <typename Record>
std::vector<Record> parse_jsonl(std::string_view text, const std::string& origin = "<memory>") {
  std::vector<Record> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      Record r = json::parse(line).get<Record>();
      validate(r);
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes via a temporary file and rename so readers never see a partial file.
inline void write_text_file_atomic(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Record>
void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
  write_text_file_atomic(path, to_jsonl(records));
}

template <typename Record>
std::vector<Record> read_jsonl(const std::filesystem::path& path) {
  return parse_jsonl<Record>(read_text_file(path), path.string());
}

// ---------------------------------------------------------------------------
// SQuAD 2.0

namespace detail {

inline const json& require(const json& j, const char* key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ParseError("SQuAD: missing field " + path + "." + key);
  return j.at(key);
}

inline std::string require_string(const json& j, const char* key, const std::string& path) {
  const auto& v = require(j, key, path);
  if (!v.is_string()) throw ParseError("SQuAD: field " + path + "." + key + " is not a string");
  return v.get<std::string>();
}

inline const json& require_array(const json& j, const char* key, const std::string& path) {
  const auto& v = require(j, key, path);
  if (!v.is_array()) throw ParseError("SQuAD: field " + path + "." + key + " is not an array");
  return v;
}

}  // namespace detail

inline std::vector<QAExample> parse_squad(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("SQuAD: malformed JSON: ") + e.what());
  }
  std::vector<QAExample> out;
  const auto& data = detail::require_array(root, "data", "$");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string ap = "$.data[" + std::to_string(a) + "]";
    const auto& paragraphs = detail::require_array(data[a], "paragraphs", ap);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string pp = ap + ".paragraphs[" + std::to_string(p) + "]";
      const std::string context = detail::require_string(paragraphs[p], "context", pp);
      const auto& qas = detail::require_array(paragraphs[p], "qas", pp);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qp = pp + ".qas[" + std::to_string(q) + "]";
        QAExample e;
        e.id = detail::require_string(qas[q], "id", qp);
        e.question = detail::require_string(qas[q], "question", qp);
        e.passage = context;
        const auto& impossible = detail::require(qas[q], "is_impossible", qp);
        if (!impossible.is_boolean()) throw ParseError("SQuAD: field " + qp + ".is_impossible is not a boolean");
        e.is_answerable = !impossible.get<bool>();
        const auto& answers = detail::require_array(qas[q], "answers", qp);
        if (e.is_answerable) {
          for (std::size_t k = 0; k < answers.size(); ++k) {
            const std::string kp = qp + ".answers[" + std::to_string(k) + "]";
            std::string t = detail::require_string(answers[k], "text", kp);
            if (context.find(t) == std::string::npos)
              throw ValidationError("SQuAD: answer at " + kp + " ('" + t + "') does not occur in the passage");
            if (std::find(e.gold_answers.begin(), e.gold_answers.end(), t) == e.gold_answers.end())
              e.gold_answers.push_back(std::move(t));
          }
          if (e.gold_answers.empty()) throw ValidationError("SQuAD: answerable question " + qp + " has no answers");
        }
        out.push_back(std::move(e));
      }
    }
  }
  return out;
}

inline std::vector<QAExample> load_squad(const std::filesystem::path& path) {
  return parse_squad(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Seeded sampling

namespace detail {

// Unbiased draw from [0, bound) by rejection; unlike
// std::uniform_int_distribution its output is fixed across standard libraries.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t bound) {
  const std::uint64_t b = bound;
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % b + 1) % b;
  std::uint64_t x;
  do x = rng();
  while (x > limit);
  return static_cast<std::size_t>(x % b);
}

}  // namespace detail

// First n positions of a Fisher-Yates shuffle of [0, size).
inline std::vector<std::size_t> sample_indices(std::size_t size, std::size_t n, std::uint64_t seed) {
  if (n > size) {
    throw SizeError("cannot sample " + std::to_string(n) + " items from " + std::to_string(size));
  }
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + detail::uniform_index(rng, size - i)]);
  idx.resize(n);
  return idx;
}

template <typename Record>
std::vector<Record> sample_subset(const std::vector<Record>& ds, std::size_t n, std::uint64_t seed) {
  std::vector<Record> out;
  out.reserve(n);
  for (const auto i : sample_indices(ds.size(), n, seed)) out.push_back(ds[i]);
  return out;
}

template <typename Record>
std::vector<Record> shuffled(std::vector<Record> ds, std::uint64_t seed) {
  std::vector<Record> out;
  out.reserve(ds.size());
  for (const auto i : sample_indices(ds.size(), ds.size(), seed)) out.push_back(std::move(ds[i]));
  return out;
}

inline std::size_t human_count(const MixSpec& spec) {
  spec.validate();
  // Half-up; the epsilon absorbs products such as 0.7*5 landing just below x.5.
  return static_cast<std::size_t>(std::floor(spec.human_fraction * static_cast<double>(spec.total_n) + 0.5 + 1e-9));
}

inline std::vector<FeedbackRecord> mix(const std::vector<FeedbackRecord>& human_ds,
                                       const std::vector<FeedbackRecord>& ai_ds, const MixSpec& spec) {
  const std::size_t nh = human_count(spec);
  const std::size_t na = spec.total_n - nh;
  for (const auto& r : human_ds)
    if (r.source != FeedbackSource::HUMAN) throw ValidationError("mix: human source contains an AI record for " + r.example_id);
  for (const auto& r : ai_ds)
    if (r.source != FeedbackSource::AI) throw ValidationError("mix: AI source contains a HUMAN record for " + r.example_id);
  if (nh > human_ds.size())
    throw SizeError("mix: need " + std::to_string(nh) + " human records, only " + std::to_string(human_ds.size()) + " available");
  if (na > ai_ds.size())
    throw SizeError("mix: need " + std::to_string(na) + " AI records, only " + std::to_string(ai_ds.size()) + " available");
  auto out = sample_subset(human_ds, nh, derive_seed(spec.seed, "mix/human"));
  auto ai = sample_subset(ai_ds, na, derive_seed(spec.seed, "mix/ai"));
  out.insert(out.end(), ai.begin(), ai.end());
  return shuffled(std::move(out), derive_seed(spec.seed, "mix/shuffle"));
}

// Segment sizes for n items over k parts: the first n mod k parts get one extra.
inline std::vector<std::size_t> segment_sizes(std::size_t n, std::size_t k) {
  if (k < 1 || k > n)
    throw SizeError("segment: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> sizes(k, n / k);
  for (std::size_t i = 0; i < n % k; ++i) ++sizes[i];
  return sizes;
}

template <typename Record>
std::vector<std::vector<Record>> segment(const std::vector<Record>& ds, std::size_t k, std::uint64_t seed) {
  const auto sizes = segment_sizes(ds.size(), k);
  const auto perm = sample_indices(ds.size(), ds.size(), seed);
  std::vector<std::vector<Record>> out(k);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < k; ++s)
    for (std::size_t i = 0; i < sizes[s]; ++i) out[s].push_back(ds[perm[pos++]]);
  return out;
}

// ---------------------------------------------------------------------------
// Prompt templates
//
// File format:
//   #! name: <name>            optional metadata lines at the top
//   #! kind: answer|feedback|laffi
//   <preamble>
//   ###
//   <exemplar 1, fully bound>
//   ###
//   <exemplar 2>
//   ###
//   <query body with {passage} {question} {predicted_answer} {gold_answer}>
//
// A file without "###" lines is a body only.

enum class TemplateKind { Answer, Feedback, Laffi };

inline std::string template_kind_name(TemplateKind k) {
  switch (k) {
    case TemplateKind::Answer: return "answer";
    case TemplateKind::Feedback: return "feedback";
    case TemplateKind::Laffi: return "laffi";
  }
  return "?";
}

inline const std::set<std::string>& known_placeholders() {
  static const std::set<std::string> names{"passage", "question", "predicted_answer", "gold_answer"};
  return names;
}

struct PromptTemplate {
  std::string name;
  TemplateKind kind = TemplateKind::Answer;
  std::string preamble;
  std::vector<std::string> exemplars;
  std::string body;

  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = body.find('{', pos)) != std::string::npos) {
      const auto close = body.find('}', pos);
      if (close == std::string::npos) break;
      std::string key = body.substr(pos + 1, close - pos - 1);
      if (std::find(out.begin(), out.end(), key) == out.end()) out.push_back(key);
      pos = close + 1;
    }
    return out;
  }
};

namespace detail {

inline std::string trim_blank_lines(std::string_view s, bool keep_trailing_newline) {
  std::size_t b = 0;
  while (b < s.size()) {
    const auto nl = s.find('\n', b);
    if (nl == std::string_view::npos) break;
    if (s.substr(b, nl - b).find_first_not_of(" \t\r") != std::string_view::npos) break;
    b = nl + 1;
  }
  std::size_t e = s.size();
  while (e > b && (s[e - 1] == '\n' || s[e - 1] == '\r' || s[e - 1] == ' ' || s[e - 1] == '\t')) --e;
  std::string out(s.substr(b, e - b));
  if (keep_trailing_newline && e < s.size()) out += '\n';
  return out;
}

}  // namespace detail

inline PromptTemplate parse_template(std::string_view text, std::string_view fallback_name = "template") {
  PromptTemplate t;
  t.name = fallback_name;
  std::optional<TemplateKind> kind;
  std::vector<std::string> sections(1);
  std::size_t pos = 0;
  bool in_header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool has_nl = end != std::string_view::npos;
    if (!has_nl) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (in_header && line.starts_with("#!")) {
      const auto colon = line.find(':');
      if (colon == std::string_view::npos) throw TemplateError("template metadata line without ':'");
      auto trim = [](std::string_view s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string_view::npos ? std::string{} : std::string(s.substr(b, e - b + 1));
      };
      const auto key = trim(line.substr(2, colon - 2));
      const auto value = trim(line.substr(colon + 1));
      if (key == "name") {
        t.name = value;
      } else if (key == "kind") {
        if (value == "answer") kind = TemplateKind::Answer;
        else if (value == "feedback") kind = TemplateKind::Feedback;
        else if (value == "laffi") kind = TemplateKind::Laffi;
        else throw TemplateError("unknown template kind '" + value + "'");
      } else {
        throw TemplateError("unknown template metadata key '" + key + "'");
      }
      continue;
    }
    in_header = false;
    if (line == "###") {
      sections.emplace_back();
      continue;
    }
    sections.back().append(line);
    if (has_nl) sections.back().push_back('\n');
  }
  if (sections.size() == 1) {
    t.body = detail::trim_blank_lines(sections[0], true);
  } else {
    t.preamble = detail::trim_blank_lines(sections.front(), false);
    for (std::size_t i = 1; i + 1 < sections.size(); ++i)
      t.exemplars.push_back(detail::trim_blank_lines(sections[i], false));
    t.body = detail::trim_blank_lines(sections.back(), true);
  }
  if (t.body.empty()) throw TemplateError("template '" + t.name + "' has an empty query body");
  for (const auto& p : t.placeholders())
    if (!known_placeholders().count(p)) throw TemplateError("template '" + t.name + "' uses unknown placeholder {" + p + "}");
  t.kind = kind.value_or(TemplateKind::Answer);
  if (t.kind == TemplateKind::Answer) {
    bool answerable = false, unanswerable = false;
    for (const auto& ex : t.exemplars)
      (ex.find(kUnanswerablePhrase) != std::string::npos ? unanswerable : answerable) = true;
    if (!answerable || !unanswerable) {
      throw TemplateError("answer template '" + t.name +
                          "' needs at least one answerable and one unanswerable exemplar");
    }
  }
  return t;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
  return parse_template(read_text_file(path), path.stem().string());
}

using Bindings = std::map<std::string, std::string>;

// Preamble, the first `shots` exemplars and the bound body, separated by
// blank lines. Bound values are inserted verbatim and never re-scanned.
inline std::string render_prompt(const PromptTemplate& t, const Bindings& bindings, std::size_t shots) {
  if (shots > t.exemplars.size()) {
    throw TemplateError("template '" + t.name + "' has " + std::to_string(t.exemplars.size()) +
                        " exemplars, " + std::to_string(shots) + " requested");
  }
  std::string out;
  auto block = [&](const std::string& s) {
    if (s.empty()) return;
    out += s;
    out += "\n\n";
  };
  block(t.preamble);
  for (std::size_t i = 0; i < shots; ++i) block(t.exemplars[i]);
  std::size_t pos = 0;
  while (pos < t.body.size()) {
    const auto open = t.body.find('{', pos);
    if (open == std::string::npos) {
      out.append(t.body, pos);
      break;
    }
    const auto close = t.body.find('}', open);
    if (close == std::string::npos) {
      out.append(t.body, pos);
      break;
    }
    out.append(t.body, pos, open - pos);
    const std::string key = t.body.substr(open + 1, close - open - 1);
    const auto it = bindings.find(key);
    if (it == bindings.end()) throw TemplateError("template '" + t.name + "': unresolved placeholder {" + key + "}");
    out += it->second;
    pos = close + 1;
  }
  return out;
}

// The binding a template sees for an example's gold answer.
inline std::string gold_answer_text(const QAExample& e) {
  return e.is_answerable ? e.gold_answers.front() : std::string(kUnanswerablePhrase);
}

inline std::string prompt_fingerprint(std::string_view rendered) { return sha256_hex(rendered); }

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace detail {

struct SyntheticAttribute {
  const char* key;
  std::vector<std::string> values;
  // {n} = first name, {v} = value
  const char* sentence;
  const char* question;
};

inline const std::vector<SyntheticAttribute>& synthetic_attributes() {
  static const std::vector<SyntheticAttribute> attrs{
      {"city", {"Lima", "Oslo", "Cairo", "Quito", "Perth", "Turin", "Dakar", "Hanoi", "Porto", "Minsk"},
       "{n} lives in {v}.", "Where does {n} live?"},
      {"job", {"baker", "pilot", "nurse", "tailor", "miner", "judge", "chef", "potter", "farmer", "sailor"},
       "{n} works as a {v}.", "What does {n} work as?"},
      {"color", {"green", "red", "blue", "amber", "violet", "gray", "pink", "teal", "white", "black"},
       "{n}'s favorite color is {v}.", "What is {n}'s favorite color?"},
      {"pet", {"cat", "goat", "parrot", "dog", "horse", "rabbit", "turtle", "duck", "pony", "lizard"},
       "{n} owns a {v}.", "What pet does {n} own?"},
      {"year", {"1874", "1902", "1931", "1958", "1966", "1977", "1983", "1990", "2004", "2011"},
       "{n} was born in {v}.", "In what year was {n} born?"},
  };
  return attrs;
}

inline const std::vector<std::string>& synthetic_names() {
  static const std::vector<std::string> names{"Ana", "Bo", "Cleo", "Dev", "Eli", "Fay", "Gus", "Hana",
                                              "Ivo", "Jun", "Kai", "Lena", "Milo", "Nia", "Omar", "Pia",
                                              "Quin", "Rosa", "Sami", "Tova"};
  return names;
}

inline std::string fill(std::string_view pattern, std::string_view name, std::string_view value) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern.substr(i, 3) == "{n}") {
      out += name;
      i += 2;
    } else if (pattern.substr(i, 3) == "{v}") {
      out += value;
      i += 2;
    } else {
      out += pattern[i];
    }
  }
  return out;
}

}  // namespace detail

inline std::size_t synthetic_unanswerable_count(std::size_t n) { return (n + 2) / 4; }

// Micro-passages of two or three facts about one person. Answerable questions
// ask about a stated fact; unanswerable ones ask about an attribute the
// passage never mentions. Exactly round(n/4) examples are unanswerable.
inline std::vector<QAExample> make_synthetic_corpus(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic corpus size must be >= 1");
  const auto& attrs = detail::synthetic_attributes();
  const auto& names = detail::synthetic_names();
  std::vector<bool> unanswerable(n, false);
  for (const auto i : sample_indices(n, synthetic_unanswerable_count(n), derive_seed(seed, "synthetic/unanswerable")))
    unanswerable[i] = true;
  std::mt19937_64 rng(derive_seed(seed, "synthetic/content"));
  std::vector<QAExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = names[detail::uniform_index(rng, names.size())];
    const std::size_t n_facts = 2 + detail::uniform_index(rng, 2);
    const auto order = sample_indices(attrs.size(), attrs.size(), rng());
    QAExample e;
    e.id = "syn-" + std::to_string(seed) + "-" + std::to_string(i);
    std::vector<std::string> values(n_facts);
    for (std::size_t f = 0; f < n_facts; ++f) {
      const auto& a = attrs[order[f]];
      values[f] = a.values[detail::uniform_index(rng, a.values.size())];
      if (f) e.passage += ' ';
      e.passage += detail::fill(a.sentence, name, values[f]);
    }
    if (unanswerable[i]) {
      e.question = detail::fill(attrs[order[n_facts]].question, name, "");
      e.is_answerable = false;
    } else {
      const std::size_t f = detail::uniform_index(rng, n_facts);
      e.question = detail::fill(attrs[order[f]].question, name, "");
      e.gold_answers = {values[f]};
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline const QAExample& find_example(const std::vector<QAExample>& corpus, std::string_view id) {
  for (const auto& e : corpus)
    if (e.id == id) return e;
  throw DataError("example id '" + std::string(id) + "' not found in corpus");
}

// Id → example index for repeated lookups.
class CorpusIndex {
 public:
  explicit CorpusIndex(const std::vector<QAExample>& corpus) : corpus_(&corpus) {
    for (std::size_t i = 0; i < corpus.size(); ++i) by_id_.emplace(corpus[i].id, i);
  }
  const QAExample& at(const std::string& id) const {
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DataError("example id '" + id + "' not found in corpus");
    return (*corpus_)[it->second];
  }
  bool contains(const std::string& id) const { return by_id_.count(id) > 0; }

 private:
  const std::vector<QAExample>* corpus_;
  std::map<std::string, std::size_t> by_id_;
};

}  // namespace laffi
