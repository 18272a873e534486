#pragma once

// The four LaFFi stages plus the SFT arm: answer prediction, feedback
// annotation, training-pair construction and LoRA fine-tuning on a frozen
// base. Also the toy pretraining that produces the base model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <spdlog/spdlog.h>

#include "laffi/corpus.hpp"
#include "laffi/evaluator.hpp"
#include "laffi/hash.hpp"
#include "laffi/lora.hpp"
#include "laffi/optim.hpp"
#include "laffi/transformer.hpp"

namespace laffi {

enum class TrainMode { LAFFI, SFT };

inline std::string train_mode_name(TrainMode m) { return m == TrainMode::LAFFI ? "laffi" : "sft"; }

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "laffi" || s == "LAFFI") return TrainMode::LAFFI;
  if (s == "sft" || s == "SFT") return TrainMode::SFT;
  throw ConfigError("unknown training mode '" + std::string(s) + "' (expected laffi or sft)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::LAFFI;
  int epochs = 3;
  std::size_t batch_size = 4;
  AdamWConfig optimizer{.lr = 3e-3, .weight_decay = 0.0};
  LoraConfig lora{};
  // Pair length cap; 0 means the model's max_seq_len.
  std::size_t max_seq_len = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    optimizer.validate();
  }
};

// context = [BOS] + context bytes, target = target bytes + [EOS]. loss_mask
// spans context + target and is true exactly on the target positions.
struct TrainingPair {
  std::string example_id;
  std::vector<TokenId> context_tokens;
  std::vector<TokenId> target_tokens;
  std::vector<std::uint8_t> loss_mask;

  std::size_t length() const { return context_tokens.size() + target_tokens.size(); }
};

// Left-truncates the context (keeping BOS) until the pair fits; a target that
// cannot fit even with an empty context is a length error.
inline TrainingPair make_pair(std::string example_id, std::string_view context, std::string_view target,
                              std::size_t max_seq_len) {
  TrainingPair p;
  p.example_id = std::move(example_id);
  p.context_tokens = prompt_tokens(context);
  p.target_tokens = tokenize(target);
  p.target_tokens.push_back(kEos);
  if (p.target_tokens.size() + 1 > max_seq_len) {
    throw LengthError("pair " + p.example_id + ": target of " + std::to_string(p.target_tokens.size()) +
                      " tokens cannot fit max_seq_len " + std::to_string(max_seq_len));
  }
  if (p.length() > max_seq_len) {
    const std::size_t drop = p.length() - max_seq_len;
    p.context_tokens.erase(p.context_tokens.begin() + 1, p.context_tokens.begin() + 1 + drop);
  }
  p.loss_mask.assign(p.context_tokens.size(), 0);
  p.loss_mask.resize(p.length(), 1);
  return p;
}

inline Bindings example_bindings(const QAExample& e) {
  return {{"passage", e.passage}, {"question", e.question}, {"gold_answer", gold_answer_text(e)}};
}

inline constexpr std::size_t kAnswerShots = 2;

inline std::string answer_prompt(const PromptTemplate& answer_template, const QAExample& e) {
  return render_prompt(answer_template, example_bindings(e), kAnswerShots);
}

// Context: feedback-prediction instruction, passage, question and predicted
// answer. Target: the feedback text.
inline TrainingPair build_laffi_pair(const FeedbackRecord& record, const CorpusIndex& corpus,
                                     const PromptTemplate& laffi_template, std::size_t max_seq_len) {
  const auto& e = corpus.at(record.example_id);
  auto b = example_bindings(e);
  b["predicted_answer"] = record.predicted_answer;
  const auto context = render_prompt(laffi_template, b, laffi_template.exemplars.size());
  return make_pair(e.id, context, record.feedback_text, max_seq_len);
}

// Context: the two-shot answer prompt. Target: the first gold answer or the
// unanswerable phrase.
inline TrainingPair build_sft_pair(const QAExample& e, const PromptTemplate& answer_template,
                                   std::size_t max_seq_len) {
  return make_pair(e.id, answer_prompt(answer_template, e), gold_answer_text(e), max_seq_len);
}

// Right-padded batch. Each row is context + target followed by PAD, with the
// loss mask zero on every PAD position.
struct Batch {
  std::size_t width = 0;
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::vector<std::uint8_t>> mask;
  std::vector<std::size_t> lengths;
};

inline Batch assemble_batch(std::span<const TrainingPair* const> pairs) {
  Batch b;
  for (const auto* p : pairs) b.width = std::max(b.width, p->length());
  for (const auto* p : pairs) {
    auto row = p->context_tokens;
    row.insert(row.end(), p->target_tokens.begin(), p->target_tokens.end());
    row.resize(b.width, kPad);
    auto m = p->loss_mask;
    m.resize(b.width, 0);
    b.tokens.push_back(std::move(row));
    b.mask.push_back(std::move(m));
    b.lengths.push_back(p->length());
  }
  return b;
}

// Token-weighted mean next-token loss over the masked positions of a batch.
// Attention is causal, so the PAD tail of a row cannot influence its real
// positions; each row's forward therefore stops at its real length.
template <typename T>
BasicTensor<T> batch_loss(const BasicTransformerWeights<T>& w, const BasicAdapterSet<T>* adapters, const Batch& b) {
  std::size_t total = 0;
  for (std::size_t r = 0; r < b.tokens.size(); ++r)
    for (std::size_t i = 1; i < b.lengths[r]; ++i) total += b.mask[r][i];
  std::optional<BasicTensor<T>> loss;
  for (std::size_t r = 0; r < b.tokens.size(); ++r) {
    const std::size_t n = b.lengths[r];
    std::size_t count = 0;
    for (std::size_t i = 1; i < n; ++i) count += b.mask[r][i];
    if (count == 0) continue;
    const std::span<const TokenId> row(b.tokens[r]);
    const std::span<const std::uint8_t> mask(b.mask[r]);
    auto ce = cross_entropy(forward(w, row.first(n - 1), adapters).logits, row.subspan(1, n - 1),
                            mask.subspan(1, n - 1));
    auto weighted = scale(ce, static_cast<T>(static_cast<double>(count) / static_cast<double>(total)));
    loss = loss ? add(*loss, weighted) : weighted;
  }
  if (!loss) throw DataError("batch has no target tokens");
  return *loss;
}

struct TrainResult {
  std::vector<double> losses;  // one per optimizer step
  double trainable_fraction = 0;
  std::size_t steps = 0;
};

inline std::size_t planned_steps(std::size_t n_pairs, const TrainConfig& c) {
  return static_cast<std::size_t>(c.epochs) * ((n_pairs + c.batch_size - 1) / c.batch_size);
}

// Minimizes the masked cross-entropy of the adapters over shuffled
// mini-batches. The base weights are never handed to the optimizer.
inline TrainResult train(const TransformerWeights& weights, AdapterSet& adapters,
                         const std::vector<TrainingPair>& pairs, const TrainConfig& config) {
  config.validate();
  if (pairs.empty()) throw ConfigError("train: no training pairs");
  if (adapters.empty()) throw ConfigError("train: no adapters attached");
  std::vector<Tensor> params;
  for (auto& ad : adapters) {
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    params.push_back(ad.a);
    params.push_back(ad.b);
  }
  TrainResult result;
  result.trainable_fraction = trainable_fraction(weights, adapters);
  AdamW opt(params, config.optimizer);
  const std::size_t per_epoch = (pairs.size() + config.batch_size - 1) / config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = sample_indices(pairs.size(), pairs.size(),
                                      derive_seed(config.seed, "train/epoch/" + std::to_string(epoch)));
    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<const TrainingPair*> rows;
      for (std::size_t i = s * config.batch_size; i < std::min(pairs.size(), (s + 1) * config.batch_size); ++i)
        rows.push_back(&pairs[order[i]]);
      opt.zero_grad();
      auto loss = batch_loss<float>(weights, &adapters, assemble_batch(rows));
      backward(loss);
      opt.step();
      result.losses.push_back(loss.item());
    }
    spdlog::debug("train epoch {} loss {:.4f}", epoch, result.losses.back());
  }
  result.steps = result.losses.size();
  for (auto& ad : adapters) {
    ad.a.zero_grad();
    ad.b.zero_grad();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Toy pretraining

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  AdamWConfig optimizer{.lr = 3e-3, .weight_decay = 0.0};
  std::uint64_t seed = 0;
};

struct PretrainResult {
  TransformerWeights weights;
  std::vector<double> losses;
};

// Next-byte language modelling over whole documents. Each sequence is
// BOS + document + EOS, so positions line up with prompts seen at inference;
// documents longer than the context are cut at the end.
inline PretrainResult pretrain_toy(const ModelConfig& model_config, const std::vector<std::string>& documents,
                                   const PretrainConfig& pc) {
  pc.optimizer.validate();
  model_config.validate();
  if (documents.empty()) throw ConfigError("pretrain: no documents");
  if (pc.steps == 0 || pc.batch_size == 0) throw ConfigError("pretrain: steps and batch_size must be positive");
  const std::size_t limit = static_cast<std::size_t>(model_config.max_seq_len) + 1;
  std::vector<TrainingPair> seqs(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    auto& p = seqs[i];
    p.context_tokens = {kBos};
    p.target_tokens = tokenize(documents[i]);
    p.target_tokens.push_back(kEos);
    if (p.length() > limit) p.target_tokens.resize(limit - 1);
    p.loss_mask.assign(p.length(), 1);
    p.loss_mask[0] = 0;
  }
  PretrainResult r{init_model(model_config), {}};
  r.weights.set_trainable(true);
  AdamW opt(r.weights.parameters(), pc.optimizer);
  std::mt19937_64 rng(derive_seed(pc.seed, "pretrain/documents"));
  for (std::size_t step = 0; step < pc.steps; ++step) {
    std::vector<const TrainingPair*> rows;
    for (std::size_t b = 0; b < pc.batch_size; ++b) rows.push_back(&seqs[detail::uniform_index(rng, seqs.size())]);
    opt.zero_grad();
    auto loss = batch_loss<float>(r.weights, nullptr, assemble_batch(rows));
    backward(loss);
    opt.step();
    r.losses.push_back(loss.item());
    if ((step + 1) % 100 == 0) spdlog::debug("pretrain step {} loss {:.4f}", step + 1, r.losses.back());
  }
  r.weights.set_trainable(false);
  for (auto& p : r.weights.parameters()) p.zero_grad();
  return r;
}

// ---------------------------------------------------------------------------
// Stage 1: answer prediction

inline GenerationConfig answer_generation_defaults() {
  GenerationConfig g;
  g.max_new_tokens = 64;
  g.stop_sequences = {"\n"};
  return g;
}

inline GenerationConfig feedback_generation_defaults() {
  GenerationConfig g;
  g.max_new_tokens = 128;
  g.stop_sequences = {"\n"};
  return g;
}

struct Stage1Result {
  std::vector<PredictedAnswerRecord> records;
  std::vector<std::string> skipped;
};

inline Stage1Result stage1_predict(const TransformerWeights& weights, const AdapterSet* adapters,
                                   const std::vector<QAExample>& ds, const PromptTemplate& answer_template,
                                   const GenerationConfig& gen, const std::string& model_id) {
  if (answer_template.kind != TemplateKind::Answer || answer_template.exemplars.size() < kAnswerShots)
    throw TemplateError("stage 1 needs an answer template with two exemplars");
  Stage1Result r;
  for (const auto& e : ds) {
    const auto prompt = answer_prompt(answer_template, e);
    try {
      r.records.push_back({e.id, model_id, prompt_fingerprint(prompt),
                           to_valid_utf8(generate(weights, adapters, prompt, gen))});
    } catch (const LengthError& err) {
      spdlog::warn("stage 1: skipping {}: {}", e.id, err.what());
      r.skipped.push_back(e.id);
    }
  }
  if (!r.skipped.empty()) spdlog::info("stage 1: skipped {} of {} examples", r.skipped.size(), ds.size());
  return r;
}

// ---------------------------------------------------------------------------
// Reference annotator: deterministic feedback computed from the gold answer,
// used as the simulated human and as the fallback for empty AI output.

namespace detail {

inline std::string sentence_containing(std::string_view passage, std::string_view needle) {
  std::size_t start = 0;
  while (start < passage.size()) {
    std::size_t end = passage.find(". ", start);
    end = end == std::string_view::npos ? passage.size() : end + 1;
    const auto sentence = passage.substr(start, end - start);
    if (sentence.find(needle) != std::string_view::npos) return std::string(sentence);
    start = end;
    while (start < passage.size() && passage[start] == ' ') ++start;
  }
  return std::string(passage);
}

}  // namespace detail

inline std::string reference_feedback(const QAExample& e, std::string_view predicted) {
  const bool correct = score_example(predicted, e).exact_match == 1;
  const std::string verdict = correct ? "The predicted answer is correct." : "The predicted answer is incorrect.";
  if (!e.is_answerable) return "The answer cannot be found in the passage. " + verdict;
  auto cite = detail::sentence_containing(e.passage, e.gold_answers.front());
  if (!cite.empty() && cite.back() != '.') cite += '.';
  return "The correct answer is " + e.gold_answers.front() + ". " + verdict + " The passage says: " + cite;
}

// ---------------------------------------------------------------------------
// Stage 2: AI feedback

// Renders with as many exemplars as fit next to `reserve` new tokens.
inline std::string fit_prompt(const PromptTemplate& t, const Bindings& b, std::size_t max_seq_len,
                              std::size_t reserve) {
  for (std::size_t shots = t.exemplars.size() + 1; shots-- > 0;) {
    auto p = render_prompt(t, b, shots);
    if (p.size() + 1 + reserve <= max_seq_len) return p;
  }
  throw LengthError("prompt does not fit max_seq_len " + std::to_string(max_seq_len) + " even without exemplars");
}

inline std::string trim_copy(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<FeedbackRecord> stage2_ai_annotate(const TransformerWeights& weights, const AdapterSet* adapters,
                                                      const std::vector<PredictedAnswerRecord>& records,
                                                      const std::vector<QAExample>& corpus,
                                                      const PromptTemplate& feedback_template,
                                                      const GenerationConfig& gen) {
  const CorpusIndex index(corpus);
  std::vector<FeedbackRecord> out;
  std::size_t fallbacks = 0;
  for (const auto& rec : records) {
    const auto& e = index.at(rec.example_id);
    auto b = example_bindings(e);
    b["predicted_answer"] = rec.predicted_answer;
    FeedbackRecord f;
    f.example_id = e.id;
    f.predicted_answer = rec.predicted_answer;
    f.source = FeedbackSource::AI;
    try {
      const auto prompt = fit_prompt(feedback_template, b, weights.config.max_seq_len, gen.max_new_tokens);
      f.feedback_text = trim_copy(to_valid_utf8(generate(weights, adapters, prompt, gen)));
    } catch (const LengthError& err) {
      spdlog::warn("stage 2: {}: {}", e.id, err.what());
    }
    if (f.feedback_text.empty()) {
      f.feedback_text = reference_feedback(e, rec.predicted_answer);
      f.fallback = true;
      ++fallbacks;
    }
    out.push_back(std::move(f));
  }
  if (fallbacks) spdlog::info("stage 2: {} of {} records used the reference fallback", fallbacks, out.size());
  return out;
}

// Simulated human pass over an annotation session: segment i goes to
// annotator i, who accepts the AI prefill when it already equals the
// reference feedback and otherwise writes the reference feedback.
inline std::vector<FeedbackRecord> simulate_human_feedback(const std::vector<FeedbackRecord>& ai_records,
                                                           const std::vector<QAExample>& corpus,
                                                           std::size_t n_annotators, std::uint64_t seed) {
  const CorpusIndex index(corpus);
  const auto parts = segment(ai_records, n_annotators, seed);
  std::vector<FeedbackRecord> out;
  for (std::size_t a = 0; a < parts.size(); ++a) {
    for (const auto& ai : parts[a]) {
      FeedbackRecord h;
      h.example_id = ai.example_id;
      h.predicted_answer = ai.predicted_answer;
      h.source = FeedbackSource::HUMAN;
      h.annotator_id = "annotator-" + std::to_string(a + 1);
      h.feedback_text = reference_feedback(index.at(ai.example_id), ai.predicted_answer);
      h.accepted_ai = h.feedback_text == ai.feedback_text;
      out.push_back(std::move(h));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining documents

// Every example as a two-shot answer prompt plus its gold answer. With a
// feedback template, each example also yields a feedback prompt plus the
// reference feedback, judging either its own gold answer or (with
// probability one half) the gold answer of another example.
inline std::vector<std::string> pretrain_documents(const std::vector<QAExample>& examples,
                                                   const PromptTemplate& answer_template,
                                                   const PromptTemplate* feedback_template, std::size_t max_seq_len,
                                                   std::uint64_t seed) {
  std::vector<std::string> docs;
  for (const auto& e : examples) docs.push_back(answer_prompt(answer_template, e) + gold_answer_text(e));
  if (!feedback_template) return docs;
  std::mt19937_64 rng(derive_seed(seed, "pretrain/feedback"));
  const std::size_t reserve = feedback_generation_defaults().max_new_tokens;
  for (const auto& e : examples) {
    std::string predicted = gold_answer_text(e);
    if (examples.size() > 1 && rng() % 2 == 0) {
      const auto& other = examples[detail::uniform_index(rng, examples.size())];
      predicted = gold_answer_text(other);
    }
    auto b = example_bindings(e);
    b["predicted_answer"] = predicted;
    docs.push_back(fit_prompt(*feedback_template, b, max_seq_len, reserve) + reference_feedback(e, predicted));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Evaluation helper

inline std::vector<Prediction> predict_answers(const TransformerWeights& weights, const AdapterSet* adapters,
                                               const std::vector<QAExample>& ds, const PromptTemplate& answer_template,
                                               const GenerationConfig& gen) {
  std::vector<Prediction> out;
  for (const auto& e : ds) {
    std::string text;
    try {
      text = to_valid_utf8(generate(weights, adapters, answer_prompt(answer_template, e), gen));
    } catch (const LengthError& err) {
      // Scored as an empty prediction so the example still counts.
      spdlog::warn("eval: {}: {}", e.id, err.what());
    }
    out.push_back({e.id, trim_copy(text)});
  }
  return out;
}

}  // namespace laffi
