#pragma once

// The `laffi` command line. Every subcommand validates its inputs before it
// writes anything, records a <output>.meta.json next to its main artifact
// and skips the work when that record shows the same inputs already produced
// the file on disk.
//
// Exit codes: 0 success, 1 bad usage or invalid input, 2 runtime failure.

#include <signal.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "laffi/annotation_server.hpp"
#include "laffi/attention.hpp"
#include "laffi/checkpoint.hpp"
#include "laffi/experiment.hpp"

namespace laffi::cli {

namespace fs = std::filesystem;

inline fs::path default_data_dir() {
  if (const char* env = std::getenv("LAFFI_DATA_DIR"); env && *env) return env;
  return LAFFI_BUNDLED_DATA_DIR;
}

// A dataset argument is a SQuAD 2.0 JSON file, a QAExample JSONL file, or
// "synthetic:N[:SEED]".
inline std::vector<QAExample> load_dataset(const std::string& spec) {
  if (spec.starts_with("synthetic:")) {
    const auto rest = spec.substr(10);
    const auto colon = rest.find(':');
    try {
      const auto n = std::stoull(rest.substr(0, colon));
      const auto seed = colon == std::string::npos ? 0ULL : std::stoull(rest.substr(colon + 1));
      return make_synthetic_corpus(n, seed);
    } catch (const std::logic_error&) {
      throw UsageError("dataset '" + spec + "': expected synthetic:N or synthetic:N:SEED");
    }
  }
  const fs::path path(spec);
  if (!fs::exists(path)) throw UsageError("dataset file " + spec + " not found");
  if (path.extension() == ".jsonl") return read_jsonl<QAExample>(path);
  return load_squad(path);
}

inline std::string dataset_identity(const std::string& spec) {
  if (spec.starts_with("synthetic:")) return spec;
  return git_blob_sha1(read_text_file(spec));
}

inline std::string file_identity(const fs::path& path) { return git_blob_sha1(read_text_file(path)); }

// Up-to-date check and record for one output artifact.
class Artifact {
 public:
  Artifact(fs::path out, json inputs) : out_(std::move(out)), inputs_(std::move(inputs)) {
    meta_ = out_;
    meta_ += ".meta.json";
  }

  bool up_to_date() const {
    if (!fs::exists(out_) || !fs::exists(meta_)) return false;
    try {
      const auto m = json::parse(read_text_file(meta_));
      return m.at("inputs") == inputs_ && m.at("output_sha1") == file_identity(out_);
    } catch (const std::exception&) {
      return false;
    }
  }

  void prepare() const {
    if (out_.has_parent_path()) fs::create_directories(out_.parent_path());
  }

  void commit(json extra = json::object()) const {
    json m{{"schema_version", kSchemaVersion}, {"inputs", inputs_}, {"output_sha1", file_identity(out_)}};
    m["details"] = std::move(extra);
    write_text_file_atomic(meta_, m.dump(2) + "\n");
  }

  const fs::path& path() const { return out_; }

 private:
  fs::path out_, meta_;
  json inputs_;
};

inline bool skip_if_current(const Artifact& a) {
  if (!a.up_to_date()) return false;
  std::cout << a.path().string() << " is up to date\n";
  return true;
}

struct Models {
  TransformerWeights weights;
  std::optional<AdapterSet> adapters;
  const AdapterSet* adapter_ptr() const { return adapters ? &*adapters : nullptr; }
};

inline Models load_models(const std::string& model, const std::string& adapters) {
  Models m{load_weights(model), std::nullopt};
  if (!adapters.empty()) {
    auto ck = load_adapters(adapters);
    if (!(ck.config == m.weights.config)) throw ConfigError("adapters " + adapters + " were trained for another model");
    m.adapters = std::move(ck.adapters);
  }
  return m;
}

inline json model_inputs(const std::string& model, const std::string& adapters) {
  return {{"model", file_identity(model)}, {"adapters", adapters.empty() ? "" : file_identity(adapters)}};
}

// Flags shared by every subcommand.
struct Common {
  std::string data_dir = default_data_dir().string();
  std::uint64_t seed = 0;
};

inline void add_common(CLI::App* sub, Common& c) {
  // Sections in a config file fill flags but never select a subcommand.
  sub->configurable(false);
  sub->add_option("--data-dir", c.data_dir, "Directory holding templates/ (default: $LAFFI_DATA_DIR or the bundled data)")
      ->check(CLI::ExistingDirectory)
      ->capture_default_str();
  sub->add_option("--seed", c.seed, "Global seed; all randomness derives from it")->capture_default_str();
}

inline Templates templates_of(const Common& c) { return load_templates(fs::path(c.data_dir) / "templates"); }

inline std::string template_identity(const Templates& t, const std::string& file) {
  return git_blob_sha1(t.sources.at(file));
}

inline json template_identities(const Templates& t) {
  json j = json::object();
  for (const auto& [file, text] : t.sources) j[file] = git_blob_sha1(text);
  return j;
}

// Lets `serve` stop cleanly on SIGINT/SIGTERM.
inline void serve_until_signalled(AnnotationServer& server) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::atomic<bool> done{false};
  std::thread waiter([&] {
    const timespec tick{0, 200'000'000};
    while (!done) {
      if (sigtimedwait(&set, nullptr, &tick) > 0) {
        server.stop();
        return;
      }
    }
  });
  try {
    server.serve();
  } catch (...) {
    done = true;
    waiter.join();
    throw;
  }
  done = true;
  waiter.join();
}

// CLI11 reads the config file from the top-level app only, so a `--config`
// given after the subcommand is moved in front of it.
inline std::vector<std::string> hoist_config(int argc, const char* const* argv) {
  std::vector<std::string> head{argc > 0 ? argv[0] : "laffi"}, rest;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--") {
      for (; i < argc; ++i) rest.emplace_back(argv[i]);
      break;
    }
    if (a == "--config" && i + 1 < argc) {
      head.push_back(a);
      head.emplace_back(argv[++i]);
    } else if (a.rfind("--config=", 0) == 0) {
      head.push_back(a);
    } else {
      rest.push_back(a);
    }
  }
  head.insert(head.end(), rest.begin(), rest.end());
  return head;
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"LaFFi desk-scale framework: pretrain, predict, annotate, mix, train, evaluate"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI file; a [train] section (or train.key entries) sets defaults for `train`");
  app.allow_config_extras(CLI::config_extras_mode::error);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  std::function<void()> action;

  // init ---------------------------------------------------------------------
  Common init_c;
  std::string init_out, init_preset = "nano";
  BaseRecipe recipe;
  bool no_feedback_docs = false;
  auto* init = app.add_subcommand("init", "Pretrain a toy base model");
  add_common(init, init_c);
  init->add_option("--out", init_out, "Checkpoint to write")->required();
  init->add_option("--preset", init_preset, "nano, small or medium")->capture_default_str();
  init->add_option("--steps", recipe.pretrain.steps, "Optimizer steps")->capture_default_str();
  init->add_option("--batch-size", recipe.pretrain.batch_size)->capture_default_str();
  init->add_option("--lr", recipe.pretrain.optimizer.lr)->capture_default_str();
  init->add_option("--corpus-size", recipe.corpus_size, "Synthetic pretraining examples")->capture_default_str();
  init->add_flag("--no-feedback-docs", no_feedback_docs, "Pretrain on answer documents only");
  init->callback([&] {
    action = [&] {
      recipe.feedback_documents = !no_feedback_docs;
      const auto config = preset_config(init_preset, derive_seed(init_c.seed, "init/" + init_preset));
      const auto t = templates_of(init_c);
      const Artifact art(init_out, {{"command", "init"},
                                    {"preset", init_preset},
                                    {"steps", recipe.pretrain.steps},
                                    {"batch_size", recipe.pretrain.batch_size},
                                    {"lr", recipe.pretrain.optimizer.lr},
                                    {"corpus_size", recipe.corpus_size},
                                    {"feedback_documents", recipe.feedback_documents},
                                    {"templates", template_identities(t)},
                                    {"seed", init_c.seed}});
      if (skip_if_current(art)) return;
      art.prepare();
      const auto pre = pretrain_base(config, t, recipe, derive_seed(init_c.seed, "base/" + init_preset));
      save_weights(init_out, pre.weights);
      art.commit({{"first_loss", pre.losses.front()},
                  {"last_loss", pre.losses.back()},
                  {"checksum", weights_checksum(pre.weights)}});
      std::cout << "pretrained " << init_preset << " for " << pre.losses.size() << " steps: loss "
                << format_fixed(pre.losses.front(), 4) << " -> " << format_fixed(pre.losses.back(), 4) << ", wrote "
                << init_out << "\n";
    };
  });

  // predict ------------------------------------------------------------------
  Common pred_c;
  std::string pred_model, pred_adapters, pred_dataset, pred_out, pred_model_id;
  std::size_t pred_tokens = answer_generation_defaults().max_new_tokens;
  auto* predict = app.add_subcommand("predict", "Stage 1: predict answers with the two-shot prompt");
  add_common(predict, pred_c);
  predict->add_option("--model", pred_model, "Base checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--adapters", pred_adapters, "Adapter checkpoint")->check(CLI::ExistingFile);
  predict->add_option("--dataset", pred_dataset, "SQuAD JSON, QAExample JSONL or synthetic:N[:SEED]")->required();
  predict->add_option("--out", pred_out, "Predicted Answer Dataset (JSONL)")->required();
  predict->add_option("--model-id", pred_model_id, "Model id recorded in each record (default: checkpoint name)");
  predict->add_option("--max-new-tokens", pred_tokens)->capture_default_str();
  predict->callback([&] {
    action = [&] {
      const auto t = templates_of(pred_c);
      const auto ds = load_dataset(pred_dataset);
      const auto m = load_models(pred_model, pred_adapters);
      const auto id = pred_model_id.empty() ? fs::path(pred_model).stem().string() : pred_model_id;
      const Artifact art(pred_out, {{"command", "predict"},
                                    {"models", model_inputs(pred_model, pred_adapters)},
                                    {"dataset", dataset_identity(pred_dataset)},
                                    {"template", template_identity(t, "answer.txt")},
                                    {"model_id", id},
                                    {"max_new_tokens", pred_tokens}});
      if (skip_if_current(art)) return;
      art.prepare();
      auto gen = answer_generation_defaults();
      gen.max_new_tokens = pred_tokens;
      const auto r = stage1_predict(m.weights, m.adapter_ptr(), ds, t.answer, gen, id);
      write_jsonl(pred_out, r.records);
      art.commit({{"records", r.records.size()}, {"skipped", r.skipped}});
      std::cout << "predicted " << r.records.size() << " answers (" << r.skipped.size() << " skipped), wrote "
                << pred_out << "\n";
    };
  });

  // annotate-ai --------------------------------------------------------------
  Common ann_c;
  std::string ann_model, ann_adapters, ann_preds, ann_dataset, ann_out;
  std::size_t ann_tokens = feedback_generation_defaults().max_new_tokens;
  auto* annotate = app.add_subcommand("annotate-ai", "Stage 2: AI feedback on predicted answers");
  add_common(annotate, ann_c);
  annotate->add_option("--model", ann_model)->required()->check(CLI::ExistingFile);
  annotate->add_option("--adapters", ann_adapters)->check(CLI::ExistingFile);
  annotate->add_option("--predictions", ann_preds, "Predicted Answer Dataset (JSONL)")->required()->check(CLI::ExistingFile);
  annotate->add_option("--dataset", ann_dataset)->required();
  annotate->add_option("--out", ann_out, "AI feedback dataset (JSONL)")->required();
  annotate->add_option("--max-new-tokens", ann_tokens)->capture_default_str();
  annotate->callback([&] {
    action = [&] {
      const auto t = templates_of(ann_c);
      const auto ds = load_dataset(ann_dataset);
      const auto preds = read_jsonl<PredictedAnswerRecord>(ann_preds);
      const CorpusIndex index(ds);
      for (const auto& p : preds) index.at(p.example_id);
      const auto m = load_models(ann_model, ann_adapters);
      const Artifact art(ann_out, {{"command", "annotate-ai"},
                                   {"models", model_inputs(ann_model, ann_adapters)},
                                   {"predictions", file_identity(ann_preds)},
                                   {"dataset", dataset_identity(ann_dataset)},
                                   {"template", template_identity(t, "feedback.txt")},
                                   {"max_new_tokens", ann_tokens}});
      if (skip_if_current(art)) return;
      art.prepare();
      auto gen = feedback_generation_defaults();
      gen.max_new_tokens = ann_tokens;
      const auto out = stage2_ai_annotate(m.weights, m.adapter_ptr(), preds, ds, t.feedback, gen);
      write_jsonl(ann_out, out);
      std::size_t fallbacks = 0;
      for (const auto& r : out) fallbacks += r.fallback;
      art.commit({{"records", out.size()}, {"fallbacks", fallbacks}});
      std::cout << "annotated " << out.size() << " predictions (" << fallbacks << " reference fallbacks), wrote "
                << ann_out << "\n";
    };
  });

  // serve --------------------------------------------------------------------
  Common srv_c;
  std::string srv_dir, srv_preds, srv_ai, srv_dataset, srv_ui, srv_host = "127.0.0.1";
  std::vector<std::string> srv_annotators;
  int srv_port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the human annotation service");
  add_common(serve, srv_c);
  serve->add_option("--session-dir", srv_dir, "Session directory; created on first run")->required();
  serve->add_option("--predictions", srv_preds, "Predicted answers (to create a session)")->check(CLI::ExistingFile);
  serve->add_option("--ai-feedback", srv_ai, "AI feedback prefill (to create a session)")->check(CLI::ExistingFile);
  serve->add_option("--dataset", srv_dataset, "Dataset (to create a session)");
  serve->add_option("--annotators", srv_annotators, "Annotator ids (to create a session)")->delimiter(',');
  serve->add_option("--host", srv_host)->capture_default_str();
  serve->add_option("--port", srv_port, "0 picks a free port")->capture_default_str()->check(CLI::Range(0, 65535));
  serve->add_option("--ui-dir", srv_ui, "Static annotation UI bundle served at /")->check(CLI::ExistingDirectory);
  serve->callback([&] {
    action = [&] {
      std::unique_ptr<AnnotationSession> session;
      if (fs::exists(fs::path(srv_dir) / kSessionFile)) {
        session = AnnotationSession::open(srv_dir);
      } else {
        if (srv_preds.empty() || srv_ai.empty() || srv_dataset.empty() || srv_annotators.empty())
          throw UsageError("creating a session needs --predictions, --ai-feedback, --dataset and --annotators");
        const auto ds = load_dataset(srv_dataset);
        session = AnnotationSession::create(srv_dir, read_jsonl<PredictedAnswerRecord>(srv_preds),
                                            read_jsonl<FeedbackRecord>(srv_ai), ds, srv_annotators,
                                            derive_seed(srv_c.seed, "annotators"));
      }
      AnnotationServer server(*session, srv_ui.empty() ? std::nullopt : std::optional<fs::path>(srv_ui));
      const int port = server.bind(srv_host, srv_port);
      std::cout << "annotation session " << session->session_id() << " (" << session->size() << " tasks, "
                << session->done_count() << " done) at http://" << srv_host << ":" << port << "/" << std::endl;
      serve_until_signalled(server);
      std::cout << "stopped with " << session->done_count() << " submissions\n";
    };
  });

  // mix ----------------------------------------------------------------------
  Common mix_c;
  std::string mix_ai, mix_human, mix_dataset, mix_out;
  std::size_t mix_n = 0, mix_sim = 0;
  double mix_fraction = 0;
  auto* mixc = app.add_subcommand("mix", "Combine human and AI feedback at a given human fraction");
  add_common(mixc, mix_c);
  mixc->add_option("--ai", mix_ai, "AI feedback (JSONL)")->required()->check(CLI::ExistingFile);
  auto* human_opt = mixc->add_option("--human", mix_human, "Human feedback export (JSONL)")->check(CLI::ExistingFile);
  auto* sim_opt = mixc->add_option("--simulate-annotators", mix_sim,
                                   "Instead of --human, k simulated annotators using the reference feedback");
  human_opt->excludes(sim_opt);
  mixc->add_option("--dataset", mix_dataset, "Dataset (needed with --simulate-annotators)");
  mixc->add_option("--n", mix_n, "Rows in the mixed dataset (default: number of AI records)");
  mixc->add_option("--human-fraction", mix_fraction)->required()->check(CLI::Range(0.0, 1.0));
  mixc->add_option("--out", mix_out)->required();
  mixc->callback([&] {
    action = [&] {
      const auto ai = read_jsonl<FeedbackRecord>(mix_ai);
      std::vector<FeedbackRecord> human;
      json human_id;
      if (!mix_human.empty()) {
        human = read_jsonl<FeedbackRecord>(mix_human);
        human_id = file_identity(mix_human);
      } else if (mix_sim > 0) {
        if (mix_dataset.empty()) throw UsageError("--simulate-annotators needs --dataset");
        human = simulate_human_feedback(ai, load_dataset(mix_dataset), mix_sim, derive_seed(mix_c.seed, "annotators"));
        human_id = {{"simulated", mix_sim}, {"dataset", dataset_identity(mix_dataset)}};
      } else {
        throw UsageError("mix needs --human or --simulate-annotators");
      }
      const MixSpec spec{mix_n ? mix_n : ai.size(), mix_fraction, derive_seed(mix_c.seed, "mix")};
      spec.validate();
      const Artifact art(mix_out, {{"command", "mix"},
                                   {"ai", file_identity(mix_ai)},
                                   {"human", human_id},
                                   {"n", spec.total_n},
                                   {"human_fraction", mix_fraction},
                                   {"seed", mix_c.seed}});
      if (skip_if_current(art)) return;
      const auto mixed = mix(human, ai, spec);
      art.prepare();
      write_jsonl(mix_out, mixed);
      art.commit({{"human", human_count(spec)}, {"ai", spec.total_n - human_count(spec)}});
      std::cout << "mixed " << human_count(spec) << " human + " << spec.total_n - human_count(spec)
                << " AI records, wrote " << mix_out << "\n";
    };
  });

  // train --------------------------------------------------------------------
  Common tr_c;
  std::string tr_mode, tr_model, tr_dataset, tr_feedback, tr_out;
  TrainConfig tc;
  auto* trainc = app.add_subcommand("train", "Fine-tune LoRA adapters (laffi: feedback labels, sft: answers)");
  add_common(trainc, tr_c);
  trainc->add_option("--mode", tr_mode, "laffi or sft")->required();
  trainc->add_option("--model", tr_model)->required()->check(CLI::ExistingFile);
  trainc->add_option("--dataset", tr_dataset)->required();
  trainc->add_option("--feedback", tr_feedback, "Feedback dataset (laffi mode)")->check(CLI::ExistingFile);
  trainc->add_option("--out", tr_out, "Adapter checkpoint to write")->required();
  trainc->add_option("--epochs", tc.epochs)->capture_default_str();
  trainc->add_option("--batch-size", tc.batch_size)->capture_default_str();
  trainc->add_option("--lr", tc.optimizer.lr)->capture_default_str();
  trainc->add_option("--weight-decay", tc.optimizer.weight_decay)->capture_default_str();
  trainc->add_option("--rank", tc.lora.rank)->capture_default_str();
  trainc->add_option("--alpha", tc.lora.alpha)->capture_default_str();
  trainc->add_option("--max-seq-len", tc.max_seq_len, "Pair length cap (0: the model's)")->capture_default_str();
  trainc->callback([&] {
    action = [&] {
      tc.mode = parse_train_mode(tr_mode);
      tc.seed = derive_seed(tr_c.seed, "train");
      tc.lora.seed = derive_seed(tr_c.seed, "lora");
      tc.validate();
      if (tc.mode == TrainMode::LAFFI && tr_feedback.empty()) throw UsageError("--mode laffi needs --feedback");
      const auto t = templates_of(tr_c);
      const auto ds = load_dataset(tr_dataset);
      const auto weights = load_weights(tr_model);
      const std::size_t cap = tc.max_seq_len ? std::min<std::size_t>(tc.max_seq_len, weights.config.max_seq_len)
                                             : weights.config.max_seq_len;
      std::vector<TrainingPair> pairs;
      std::size_t skipped = 0;
      json data_id;
      const auto keep = [&](auto&& build, const std::string& id) {
        try {
          pairs.push_back(build());
        } catch (const LengthError& e) {
          spdlog::warn("skipping pair {}: {}", id, e.what());
          ++skipped;
        }
      };
      if (tc.mode == TrainMode::LAFFI) {
        const auto fb = read_jsonl<FeedbackRecord>(tr_feedback);
        const CorpusIndex index(ds);
        for (const auto& r : fb) keep([&] { return build_laffi_pair(r, index, t.laffi, cap); }, r.example_id);
        data_id = {{"feedback", file_identity(tr_feedback)}, {"template", template_identity(t, "laffi.txt")}};
      } else {
        for (const auto& e : ds) keep([&] { return build_sft_pair(e, t.answer, cap); }, e.id);
        data_id = {{"template", template_identity(t, "answer.txt")}};
      }
      if (skipped) spdlog::info("skipped {} over-long pairs", skipped);
      if (pairs.empty()) throw ConfigError("train: no training pairs");
      const Artifact art(tr_out, {{"command", "train"},
                                  {"mode", train_mode_name(tc.mode)},
                                  {"model", file_identity(tr_model)},
                                  {"dataset", dataset_identity(tr_dataset)},
                                  {"data", data_id},
                                  {"epochs", tc.epochs},
                                  {"batch_size", tc.batch_size},
                                  {"lr", tc.optimizer.lr},
                                  {"weight_decay", tc.optimizer.weight_decay},
                                  {"rank", tc.lora.rank},
                                  {"alpha", tc.lora.alpha},
                                  {"max_seq_len", cap},
                                  {"seed", tr_c.seed}});
      if (skip_if_current(art)) return;
      art.prepare();
      auto adapters = attach(weights, tc.lora);
      const auto r = train(weights, adapters, pairs, tc);
      save_adapters(tr_out, weights.config, adapters);
      art.commit({{"losses", r.losses},
                  {"trainable_fraction", r.trainable_fraction},
                  {"pairs", pairs.size()},
                  {"skipped_pairs", skipped}});
      std::cout << train_mode_name(tc.mode) << ": " << r.steps << " steps on " << pairs.size() << " pairs, loss "
                << format_fixed(r.losses.front(), 4) << " -> " << format_fixed(r.losses.back(), 4)
                << ", trainable " << format_fixed(100 * r.trainable_fraction, 4) << "%, wrote " << tr_out << "\n";
    };
  });

  // eval ---------------------------------------------------------------------
  Common ev_c;
  std::string ev_preds, ev_dataset, ev_out, ev_csv;
  auto* evalc = app.add_subcommand("eval", "Score predictions: accuracy, F1, precision, recall");
  add_common(evalc, ev_c);
  evalc->add_option("--predictions", ev_preds, "Prediction JSONL")->required()->check(CLI::ExistingFile);
  evalc->add_option("--dataset", ev_dataset)->required();
  evalc->add_option("--out", ev_out, "Report JSON")->required();
  evalc->add_option("--per-example-csv", ev_csv, "Per-example CSV (default: report path with .csv)");
  evalc->callback([&] {
    action = [&] {
      const auto preds = read_predictions(ev_preds);
      const auto ds = load_dataset(ev_dataset);
      const auto csv_path = ev_csv.empty() ? fs::path(ev_out).replace_extension(".csv") : fs::path(ev_csv);
      const Artifact art(ev_out, {{"command", "eval"},
                                  {"predictions", file_identity(ev_preds)},
                                  {"dataset", dataset_identity(ev_dataset)},
                                  {"csv", csv_path.string()}});
      if (skip_if_current(art) && fs::exists(csv_path)) return;
      const auto report = evaluate(preds, ds);
      art.prepare();
      if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
      write_text_file_atomic(ev_out, report_json(report).dump(2) + "\n");
      write_text_file_atomic(csv_path, report_csv(report));
      art.commit();
      std::cout << "n=" << report.n << " accuracy " << format_fixed(report.accuracy, 2) << " f1 "
                << format_fixed(report.f1, 2) << " precision " << format_fixed(report.precision, 2) << " recall "
                << format_fixed(report.recall, 2) << "\n";
    };
  });

  // attention ----------------------------------------------------------------
  Common at_c;
  std::string at_model, at_adapters, at_prompt, at_dataset, at_example, at_out, at_format;
  std::optional<std::size_t> at_layer;
  auto* attn = app.add_subcommand("attention", "Export the head-averaged attention map of one prompt");
  add_common(attn, at_c);
  attn->add_option("--model", at_model)->required()->check(CLI::ExistingFile);
  attn->add_option("--adapters", at_adapters)->check(CLI::ExistingFile);
  auto* prompt_opt = attn->add_option("--prompt", at_prompt, "Prompt text");
  auto* example_opt = attn->add_option("--example-id", at_example, "Use the answer prompt of this example");
  prompt_opt->excludes(example_opt);
  attn->add_option("--dataset", at_dataset, "Dataset holding --example-id");
  attn->add_option("--layer", at_layer, "Layer (default: last)");
  attn->add_option("--out", at_out, "Heatmap file")->required();
  attn->add_option("--format", at_format, "csv or pgm (default: from the file extension)");
  attn->callback([&] {
    action = [&] {
      std::string prompt = at_prompt;
      json source = at_prompt;
      if (!at_example.empty()) {
        if (at_dataset.empty()) throw UsageError("--example-id needs --dataset");
        const auto ds = load_dataset(at_dataset);
        prompt = answer_prompt(templates_of(at_c).answer, find_example(ds, at_example));
        source = {{"example_id", at_example}, {"dataset", dataset_identity(at_dataset)}};
      } else if (at_prompt.empty()) {
        throw UsageError("attention needs --prompt or --example-id");
      }
      const auto format = parse_heatmap_format(
          at_format.empty() ? (fs::path(at_out).extension() == ".pgm" ? "pgm" : "csv") : at_format);
      const auto m = load_models(at_model, at_adapters);
      const Artifact art(at_out, {{"command", "attention"},
                                  {"models", model_inputs(at_model, at_adapters)},
                                  {"prompt", source},
                                  {"layer", at_layer ? json(*at_layer) : json()},
                                  {"format", format == HeatmapFormat::CSV ? "csv" : "pgm"}});
      if (skip_if_current(art)) return;
      const auto maps = compare_runs(prompt, {{"model", &m.weights, m.adapter_ptr()}}, at_layer);
      art.prepare();
      export_attention(maps.front(), at_out, format);
      art.commit({{"tokens", maps.front().size}});
      std::cout << "wrote " << maps.front().size << "x" << maps.front().size << " attention map to " << at_out << "\n";
    };
  });

  // experiment ---------------------------------------------------------------
  Common ex_c;
  ExperimentSpec spec;
  std::string ex_out, ex_pool, ex_eval;
  std::vector<std::string> ex_modes{"baseline", "sft", "laffi"}, ex_bases;
  auto* exp = app.add_subcommand("experiment", "Run a mode x preset x fraction x size grid");
  add_common(exp, ex_c);
  exp->add_option("--out", ex_out, "Report CSV (metadata goes to <out>.meta.json)")->required();
  exp->add_option("--modes", ex_modes, "baseline,sft,laffi")->delimiter(',')->capture_default_str();
  exp->add_option("--presets", spec.presets)->delimiter(',')->capture_default_str();
  exp->add_option("--fractions", spec.human_fractions, "Human feedback fractions")->delimiter(',')->capture_default_str();
  exp->add_option("--sizes", spec.dataset_sizes, "Training set sizes")->delimiter(',')->capture_default_str();
  exp->add_option("--dataset", ex_pool, "Training pool (default: synthetic)");
  exp->add_option("--eval-dataset", ex_eval, "Evaluation set (default: synthetic)");
  exp->add_option("--eval-size", spec.eval_size, "Synthetic evaluation examples")->capture_default_str();
  exp->add_option("--annotators", spec.n_annotators, "Simulated annotators")->capture_default_str();
  exp->add_option("--base", ex_bases, "preset=checkpoint, reuse a pretrained base")->delimiter(',');
  exp->add_option("--pretrain-steps", spec.base.pretrain.steps)->capture_default_str();
  exp->add_option("--pretrain-corpus-size", spec.base.corpus_size)->capture_default_str();
  exp->add_option("--epochs", spec.train.epochs)->capture_default_str();
  exp->add_option("--batch-size", spec.train.batch_size)->capture_default_str();
  exp->add_option("--lr", spec.train.optimizer.lr)->capture_default_str();
  exp->add_option("--rank", spec.train.lora.rank)->capture_default_str();
  exp->add_option("--alpha", spec.train.lora.alpha)->capture_default_str();
  exp->callback([&] {
    action = [&] {
      spec.modes.clear();
      for (const auto& m : ex_modes) spec.modes.push_back(parse_run_mode(m));
      spec.seed = ex_c.seed;
      if (!ex_pool.empty()) spec.pool = load_dataset(ex_pool);
      if (!ex_eval.empty()) spec.eval_set = load_dataset(ex_eval);
      for (const auto& b : ex_bases) {
        const auto eq = b.find('=');
        if (eq == std::string::npos) throw UsageError("--base expects preset=checkpoint, got '" + b + "'");
        auto w = load_weights(b.substr(eq + 1));
        const auto preset = b.substr(0, eq);
        const auto expect = preset_config(preset);
        if (w.config.n_layers != expect.n_layers || w.config.d_model != expect.d_model)
          throw ConfigError("--base " + b + ": checkpoint does not have the " + preset + " geometry");
        spec.bases.emplace(preset, std::move(w));
      }
      spec.validate();
      const auto t = templates_of(ex_c);
      if (fs::path(ex_out).has_parent_path()) fs::create_directories(fs::path(ex_out).parent_path());
      const auto result = run_experiment(spec, t);
      write_experiment(ex_out, spec, result);
      std::size_t failed = 0;
      for (const auto& r : result.rows) failed += !r.error.empty();
      std::cout << "wrote " << result.rows.size() << " rows (" << failed << " failed) to " << ex_out << "\n";
      std::cout << experiment_csv(result.rows);
    };
  });

  try {
    auto args = hoist_config(argc, argv);
    std::vector<const char*> ptrs;
    for (const auto& a : args) ptrs.push_back(a.c_str());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);
  try {
    action();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error (" << e.code() << "): " << e.what() << "\n";
    return is_validation_error(e) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace laffi::cli
