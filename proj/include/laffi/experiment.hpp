#pragma once

// Experiment grids over training mode, model preset, human-feedback fraction
// and training-set size. Each cell builds its data, trains (or not, for the
// baseline), evaluates with the two-shot answer prompt and yields one report
// row. Cells that share inputs share the work: one pretrained base per
// preset, one Stage 1/Stage 2 pass per (preset, size).

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "laffi/checkpoint.hpp"
#include "laffi/csv.hpp"
#include "laffi/pipeline.hpp"

namespace laffi {

enum class RunMode { BASELINE, SFT, LAFFI };

inline std::string run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::BASELINE: return "baseline";
    case RunMode::SFT: return "sft";
    case RunMode::LAFFI: return "laffi";
  }
  return "?";
}

inline RunMode parse_run_mode(std::string_view s) {
  if (s == "baseline" || s == "BASELINE") return RunMode::BASELINE;
  if (s == "sft" || s == "SFT") return RunMode::SFT;
  if (s == "laffi" || s == "LAFFI") return RunMode::LAFFI;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected baseline, sft or laffi)");
}

struct Templates {
  PromptTemplate answer;
  PromptTemplate feedback;
  PromptTemplate laffi;
  // Raw file bytes, for content hashes.
  std::map<std::string, std::string> sources;
};

inline Templates load_templates(const std::filesystem::path& dir) {
  Templates t;
  const auto load = [&](const char* file, PromptTemplate& out, TemplateKind kind) {
    const auto path = dir / file;
    t.sources[file] = read_text_file(path);
    out = parse_template(t.sources[file], path.stem().string());
    if (out.kind != kind) {
      throw TemplateError(path.string() + ": expected kind " + template_kind_name(kind) + ", got " +
                          template_kind_name(out.kind));
    }
  };
  load("answer.txt", t.answer, TemplateKind::Answer);
  load("feedback.txt", t.feedback, TemplateKind::Feedback);
  load("laffi.txt", t.laffi, TemplateKind::Laffi);
  return t;
}

// Everything that turns a blank model into a pretrained base.
struct BaseRecipe {
  PretrainConfig pretrain{};
  std::size_t corpus_size = 400;
  bool feedback_documents = true;
};

// Pretrains a base on its own synthetic corpus, disjoint from any training
// or evaluation data drawn with other seeds.
inline PretrainResult pretrain_base(const ModelConfig& config, const Templates& t, const BaseRecipe& recipe,
                                    std::uint64_t seed) {
  const auto corpus = make_synthetic_corpus(recipe.corpus_size, derive_seed(seed, "corpus/pretrain") % 1000000);
  const auto docs = pretrain_documents(corpus, t.answer, recipe.feedback_documents ? &t.feedback : nullptr,
                                       config.max_seq_len, derive_seed(seed, "pretrain/docs"));
  auto pc = recipe.pretrain;
  pc.seed = derive_seed(seed, "pretrain/steps");
  return pretrain_toy(config, docs, pc);
}

struct ExperimentSpec {
  std::vector<RunMode> modes{RunMode::BASELINE, RunMode::SFT, RunMode::LAFFI};
  std::vector<std::string> presets{"nano"};
  std::vector<double> human_fractions{0.5};
  std::vector<std::size_t> dataset_sizes{200};
  // Training rows come from `pool` when set, else from a synthetic corpus of
  // max(dataset_sizes) examples. Evaluation uses `eval_set` when set, else a
  // separate synthetic corpus of eval_size examples.
  std::optional<std::vector<QAExample>> pool;
  std::optional<std::vector<QAExample>> eval_set;
  std::size_t eval_size = 100;
  std::size_t n_annotators = 6;
  BaseRecipe base{};
  // Pretrained bases by preset name; presets missing here are pretrained.
  std::map<std::string, TransformerWeights> bases;
  TrainConfig train{};
  GenerationConfig answer_gen = answer_generation_defaults();
  GenerationConfig feedback_gen = feedback_generation_defaults();
  std::uint64_t seed = 0;

  void validate() const {
    if (modes.empty() || presets.empty() || human_fractions.empty() || dataset_sizes.empty())
      throw ConfigError("experiment: every grid axis needs at least one value");
    for (const auto& p : presets) preset_config(p);
    for (const double f : human_fractions)
      if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("experiment: human fraction must lie in [0, 1]");
    for (const auto n : dataset_sizes)
      if (n < 1) throw ConfigError("experiment: dataset size must be >= 1");
    if (pool) {
      for (const auto n : dataset_sizes)
        if (n > pool->size())
          throw ConfigError("experiment: dataset size " + std::to_string(n) + " exceeds the " +
                            std::to_string(pool->size()) + "-example pool");
    }
    if (n_annotators < 1) throw ConfigError("experiment: n_annotators must be >= 1");
    if (!eval_set && eval_size < 1) throw ConfigError("experiment: eval_size must be >= 1");
    train.validate();
  }
};

struct ExperimentRow {
  RunMode mode = RunMode::BASELINE;
  std::string preset;
  double human_fraction = 0;
  std::size_t dataset_size = 0;
  std::optional<EvalReport> report;
  std::uint64_t seed = 0;
  double wall_clock_s = 0;
  std::string error;
  // Training details; empty for baseline rows.
  std::vector<double> losses;
  double trainable_fraction = 0;
  std::size_t n_pairs = 0;
  std::size_t skipped_pairs = 0;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  std::map<std::string, std::uint64_t> base_checksums;
  std::map<std::string, std::vector<double>> pretrain_losses;
  std::map<std::string, std::string> input_hashes;
  // The bases every row was trained from, supplied or pretrained.
  std::map<std::string, TransformerWeights> bases;
};

inline const std::vector<std::string>& experiment_csv_columns() {
  static const std::vector<std::string> cols = {"mode",     "preset",    "human_fraction", "dataset_size",
                                                "accuracy", "f1",        "precision",      "recall",
                                                "seed",     "wall_clock_s", "error"};
  return cols;
}

inline std::string experiment_csv(const std::vector<ExperimentRow>& rows) {
  std::string out = csv_row(experiment_csv_columns());
  for (const auto& r : rows) {
    std::vector<std::string> f{run_mode_name(r.mode), r.preset, format_fixed(r.human_fraction, 2),
                               std::to_string(r.dataset_size)};
    for (const double v : {r.report ? r.report->accuracy : 0.0, r.report ? r.report->f1 : 0.0,
                           r.report ? r.report->precision : 0.0, r.report ? r.report->recall : 0.0})
      f.push_back(r.report ? format_fixed(v, 4) : "");
    f.push_back(std::to_string(r.seed));
    f.push_back(format_fixed(r.wall_clock_s, 3));
    f.push_back(r.error);
    out += csv_row(f);
  }
  return out;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

inline std::string fraction_key(double f) { return format_fixed(f, 4); }

// Stage 1 + Stage 2 output for one (preset, size).
struct StageData {
  std::vector<QAExample> train;
  std::vector<FeedbackRecord> ai;
  std::vector<FeedbackRecord> human;
};

struct Evaluated {
  EvalReport report;
  double seconds = 0;
};

}  // namespace detail

// Runs every grid cell in mode-major order within (preset, size, fraction).
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const Templates& templates) {
  spec.validate();
  ExperimentResult result;
  std::size_t pool_size = 0;
  for (const auto n : spec.dataset_sizes) pool_size = std::max(pool_size, n);
  const auto pool = spec.pool ? *spec.pool : make_synthetic_corpus(pool_size, derive_seed(spec.seed, "corpus/train") % 1000000);
  const auto eval_set =
      spec.eval_set ? *spec.eval_set : make_synthetic_corpus(spec.eval_size, derive_seed(spec.seed, "corpus/eval") % 1000000);
  for (const auto& [name, text] : templates.sources) result.input_hashes["template/" + name] = git_blob_sha1(text);
  result.input_hashes["pool"] = git_blob_sha1(to_jsonl(pool));
  result.input_hashes["eval_set"] = git_blob_sha1(to_jsonl(eval_set));

  std::map<std::string, TransformerWeights> bases = spec.bases;
  std::map<std::string, std::string> base_errors;
  std::map<std::string, detail::StageData> stages;
  std::map<std::string, std::string> stage_errors;
  std::map<std::string, detail::Evaluated> baseline_cache;
  std::map<std::string, ExperimentRow> sft_cache;

  const auto evaluate_model = [&](const TransformerWeights& w, const AdapterSet* ad) {
    const auto t0 = detail::Clock::now();
    const auto preds = predict_answers(w, ad, eval_set, templates.answer, spec.answer_gen);
    return detail::Evaluated{evaluate(preds, eval_set), detail::seconds_since(t0)};
  };

  const auto train_arm = [&](const TransformerWeights& w, const std::vector<TrainingPair>& pairs, TrainMode mode,
                             const std::string& key, ExperimentRow& row) {
    auto tc = spec.train;
    tc.mode = mode;
    tc.seed = derive_seed(spec.seed, "train/" + key);
    tc.lora.seed = derive_seed(spec.seed, "lora/" + key);
    auto ad = attach(w, tc.lora);
    const auto before = weights_checksum(w);
    const auto tr = train(w, ad, pairs, tc);
    if (weights_checksum(w) != before) throw NumericError("base weights changed during training");
    row.losses = tr.losses;
    row.trainable_fraction = tr.trainable_fraction;
    row.n_pairs = pairs.size();
    const auto ev = evaluate_model(w, &ad);
    row.report = ev.report;
  };

  for (const auto& preset : spec.presets) {
    if (!bases.count(preset)) {
      try {
        spdlog::info("experiment: pretraining base for preset {}", preset);
        auto pre = pretrain_base(preset_config(preset, derive_seed(spec.seed, "init/" + preset)), templates,
                                 spec.base, derive_seed(spec.seed, "base/" + preset));
        result.pretrain_losses[preset] = pre.losses;
        bases.emplace(preset, std::move(pre.weights));
      } catch (const std::exception& e) {
        base_errors[preset] = e.what();
      }
    }
    if (bases.count(preset)) result.base_checksums[preset] = weights_checksum(bases.at(preset));

    for (const auto size : spec.dataset_sizes) {
      const std::string ps = preset + "/" + std::to_string(size);
      for (const double fraction : spec.human_fractions) {
        const std::string cell = ps + "/" + detail::fraction_key(fraction);
        for (const auto mode : spec.modes) {
          ExperimentRow row;
          row.mode = mode;
          row.preset = preset;
          row.human_fraction = fraction;
          row.dataset_size = size;
          row.seed = spec.seed;
          const auto t0 = detail::Clock::now();
          try {
            if (base_errors.count(preset)) throw DataError("pretraining failed: " + base_errors.at(preset));
            const auto& w = bases.at(preset);
            if (mode == RunMode::BASELINE) {
              if (!baseline_cache.count(preset)) baseline_cache[preset] = evaluate_model(w, nullptr);
              row.report = baseline_cache.at(preset).report;
              row.wall_clock_s = baseline_cache.at(preset).seconds;
            } else if (mode == RunMode::SFT) {
              if (!sft_cache.count(ps)) {
                ExperimentRow trained = row;
                const auto train_rows = sample_subset(pool, size, derive_seed(spec.seed, "subset/" + std::to_string(size)));
                std::vector<TrainingPair> pairs;
                for (const auto& e : train_rows) {
                  try {
                    pairs.push_back(build_sft_pair(e, templates.answer, w.config.max_seq_len));
                  } catch (const LengthError& err) {
                    spdlog::warn("sft pair {}: {}", e.id, err.what());
                    ++trained.skipped_pairs;
                  }
                }
                train_arm(w, pairs, TrainMode::SFT, "sft/" + ps, trained);
                trained.wall_clock_s = detail::seconds_since(t0);
                sft_cache.emplace(ps, std::move(trained));
              }
              const auto& c = sft_cache.at(ps);
              row.report = c.report;
              row.losses = c.losses;
              row.trainable_fraction = c.trainable_fraction;
              row.n_pairs = c.n_pairs;
              row.skipped_pairs = c.skipped_pairs;
              row.wall_clock_s = c.wall_clock_s;
            } else {
              if (stage_errors.count(ps)) throw DataError("stage 1/2 failed: " + stage_errors.at(ps));
              if (!stages.count(ps)) {
                try {
                  detail::StageData sd;
                  sd.train = sample_subset(pool, size, derive_seed(spec.seed, "subset/" + std::to_string(size)));
                  spdlog::info("experiment: stage 1 and 2 for {} ({} examples)", ps, sd.train.size());
                  const auto s1 = stage1_predict(w, nullptr, sd.train, templates.answer, spec.answer_gen, "base/" + preset);
                  sd.ai = stage2_ai_annotate(w, nullptr, s1.records, pool, templates.feedback, spec.feedback_gen);
                  sd.human = simulate_human_feedback(sd.ai, pool, std::min(spec.n_annotators, sd.ai.size()),
                                                     derive_seed(spec.seed, "annotators/" + ps));
                  stages.emplace(ps, std::move(sd));
                } catch (const std::exception& e) {
                  stage_errors[ps] = e.what();
                  throw;
                }
              }
              const auto& sd = stages.at(ps);
              const auto mixed = mix(sd.human, sd.ai,
                                     MixSpec{sd.ai.size(), fraction, derive_seed(spec.seed, "mix/" + cell)});
              const CorpusIndex index(pool);
              std::vector<TrainingPair> pairs;
              for (const auto& r : mixed) {
                try {
                  pairs.push_back(build_laffi_pair(r, index, templates.laffi, w.config.max_seq_len));
                } catch (const LengthError& err) {
                  spdlog::warn("laffi pair {}: {}", r.example_id, err.what());
                  ++row.skipped_pairs;
                }
              }
              train_arm(w, pairs, TrainMode::LAFFI, "laffi/" + cell, row);
              row.wall_clock_s = detail::seconds_since(t0);
            }
          } catch (const std::exception& e) {
            row.report.reset();
            row.error = e.what();
            row.wall_clock_s = detail::seconds_since(t0);
            spdlog::error("experiment cell {} {}: {}", run_mode_name(mode), cell, e.what());
          }
          if (row.report) {
            spdlog::info("experiment {} {}: acc {:.2f} f1 {:.2f} ({:.1f}s)", run_mode_name(mode), cell,
                         row.report->accuracy, row.report->f1, row.wall_clock_s);
          }
          result.rows.push_back(std::move(row));
        }
      }
    }
  }
  result.bases = std::move(bases);
  return result;
}

// Metadata sidecar: configuration echo, input content hashes and the
// per-row training summaries.
inline json experiment_metadata(const ExperimentSpec& spec, const ExperimentResult& result) {
  json modes = json::array();
  for (const auto m : spec.modes) modes.push_back(run_mode_name(m));
  json rows = json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"mode", run_mode_name(r.mode)},
                    {"preset", r.preset},
                    {"human_fraction", r.human_fraction},
                    {"dataset_size", r.dataset_size},
                    {"steps", r.losses.size()},
                    {"first_loss", r.losses.empty() ? json() : json(r.losses.front())},
                    {"last_loss", r.losses.empty() ? json() : json(r.losses.back())},
                    {"trainable_fraction", r.trainable_fraction},
                    {"pairs", r.n_pairs},
                    {"skipped_pairs", r.skipped_pairs},
                    {"error", r.error}});
  }
  json checksums = json::object();
  for (const auto& [k, v] : result.base_checksums) checksums[k] = v;
  return {{"schema_version", kSchemaVersion},
          {"config",
           {{"modes", modes},
            {"presets", spec.presets},
            {"human_fractions", spec.human_fractions},
            {"dataset_sizes", spec.dataset_sizes},
            {"eval_size", spec.eval_set ? spec.eval_set->size() : spec.eval_size},
            {"n_annotators", spec.n_annotators},
            {"seed", spec.seed},
            {"pretrain",
             {{"steps", spec.base.pretrain.steps},
              {"batch_size", spec.base.pretrain.batch_size},
              {"lr", spec.base.pretrain.optimizer.lr},
              {"corpus_size", spec.base.corpus_size},
              {"feedback_documents", spec.base.feedback_documents}}},
            {"train",
             {{"epochs", spec.train.epochs},
              {"batch_size", spec.train.batch_size},
              {"lr", spec.train.optimizer.lr},
              {"weight_decay", spec.train.optimizer.weight_decay},
              {"lora_rank", spec.train.lora.rank},
              {"lora_alpha", spec.train.lora.alpha}}}}},
          {"inputs", result.input_hashes},
          {"base_checksums", checksums},
          {"rows", rows}};
}

inline void write_experiment(const std::filesystem::path& csv_path, const ExperimentSpec& spec,
                             const ExperimentResult& result) {
  write_text_file_atomic(csv_path, experiment_csv(result.rows));
  auto sidecar = csv_path;
  sidecar += ".meta.json";
  write_text_file_atomic(sidecar, experiment_metadata(spec, result).dump(2) + "\n");
}

}  // namespace laffi
