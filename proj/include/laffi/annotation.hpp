#pragma once

// Human annotation sessions: segmented task assignment with AI prefill, a
// durable append-only submission log, and export of the human records.
//
// On disk a session is a directory holding session.json (written once,
// atomically) and submissions.jsonl (one acknowledged submission per line,
// fsync'd before the caller is told it succeeded). Opening a session replays
// the log; a torn final line from a crash mid-write was never acknowledged
// and is cut off.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "laffi/corpus.hpp"
#include "laffi/errors.hpp"
#include "laffi/hash.hpp"

namespace laffi {

enum class TaskStatus { PENDING, DONE };

inline const char* status_name(TaskStatus s) { return s == TaskStatus::DONE ? "DONE" : "PENDING"; }

struct AnnotationTask {
  std::string task_id;
  std::size_t ordinal = 0;
  QAExample example;
  std::string predicted_answer;
  std::string ai_feedback_prefill;
  std::string assigned_annotator;
  TaskStatus status = TaskStatus::PENDING;
};

inline json task_json(const AnnotationTask& t) {
  return {{"task_id", t.task_id},
          {"ordinal", t.ordinal},
          {"example", t.example},
          {"predicted_answer", t.predicted_answer},
          {"ai_feedback_prefill", t.ai_feedback_prefill},
          {"assigned_annotator", t.assigned_annotator},
          {"status", status_name(t.status)}};
}

struct AnnotatorProgress {
  std::string annotator_id;
  std::size_t done = 0;
  std::size_t total = 0;
};

inline constexpr const char* kSessionFile = "session.json";
inline constexpr const char* kSubmissionLog = "submissions.jsonl";

class AnnotationSession {
 public:
  AnnotationSession(const AnnotationSession&) = delete;
  AnnotationSession& operator=(const AnnotationSession&) = delete;
  ~AnnotationSession() {
    if (log_fd_ >= 0) ::close(log_fd_);
  }

  // Builds tasks in record order, partitions them with segment(tasks, k,
  // seed) and gives segment i to annotators[i]. Fails if `dir` already holds
  // a session.
  static std::unique_ptr<AnnotationSession> create(const std::filesystem::path& dir,
                                                   const std::vector<PredictedAnswerRecord>& predicted,
                                                   const std::vector<FeedbackRecord>& ai_feedback,
                                                   const std::vector<QAExample>& corpus,
                                                   const std::vector<std::string>& annotators, std::uint64_t seed) {
    if (annotators.empty()) throw ValidationError("annotation session: no annotators");
    for (std::size_t i = 0; i < annotators.size(); ++i) {
      if (annotators[i].empty()) throw ValidationError("annotation session: empty annotator id");
      for (std::size_t j = 0; j < i; ++j)
        if (annotators[i] == annotators[j])
          throw ValidationError("annotation session: duplicate annotator '" + annotators[i] + "'");
    }
    if (predicted.empty()) throw ValidationError("annotation session: no predicted answers");
    if (std::filesystem::exists(dir / kSessionFile)) {
      throw ConflictError("annotation session already exists in " + dir.string());
    }
    const CorpusIndex index(corpus);
    std::map<std::string, const FeedbackRecord*> prefill;
    for (const auto& f : ai_feedback) {
      if (f.source != FeedbackSource::AI) throw ValidationError("annotation session: prefill for " + f.example_id + " is not AI feedback");
      prefill.emplace(f.example_id, &f);
    }
    std::vector<AnnotationTask> tasks;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      const auto& p = predicted[i];
      const auto it = prefill.find(p.example_id);
      if (it == prefill.end() || it->second->feedback_text.empty()) {
        throw DataError("annotation session: no AI feedback prefill for example " + p.example_id);
      }
      AnnotationTask t;
      t.task_id = "task-" + std::to_string(i);
      t.ordinal = i;
      t.example = index.at(p.example_id);
      t.predicted_answer = p.predicted_answer;
      t.ai_feedback_prefill = it->second->feedback_text;
      tasks.push_back(std::move(t));
    }
    std::vector<std::size_t> ordinals(tasks.size());
    for (std::size_t i = 0; i < ordinals.size(); ++i) ordinals[i] = i;
    const auto parts = segment(ordinals, annotators.size(), seed);
    for (std::size_t a = 0; a < parts.size(); ++a)
      for (const auto o : parts[a]) tasks[o].assigned_annotator = annotators[a];

    json j{{"schema_version", kSchemaVersion}, {"seed", seed}, {"annotators", annotators}};
    json arr = json::array();
    for (const auto& t : tasks) {
      arr.push_back({{"task_id", t.task_id},
                     {"example", t.example},
                     {"predicted_answer", t.predicted_answer},
                     {"ai_feedback_prefill", t.ai_feedback_prefill},
                     {"assigned_annotator", t.assigned_annotator}});
    }
    j["tasks"] = std::move(arr);
    j["session_id"] = sha256_hex(j.dump()).substr(0, 16);
    std::filesystem::create_directories(dir);
    write_text_file_atomic(dir / kSubmissionLog, "");
    write_text_file_atomic(dir / kSessionFile, j.dump(1) + "\n");
    return open(dir);
  }

  // Loads session.json and replays the submission log.
  static std::unique_ptr<AnnotationSession> open(const std::filesystem::path& dir) {
    std::unique_ptr<AnnotationSession> s(new AnnotationSession());
    s->dir_ = dir;
    const auto path = dir / kSessionFile;
    json j;
    try {
      j = json::parse(read_text_file(path));
      detail::check_schema(j);
      j.at("session_id").get_to(s->session_id_);
      j.at("seed").get_to(s->seed_);
      j.at("annotators").get_to(s->annotators_);
      for (const auto& tj : j.at("tasks")) {
        AnnotationTask t;
        tj.at("task_id").get_to(t.task_id);
        t.ordinal = s->tasks_.size();
        t.example = tj.at("example").get<QAExample>();
        tj.at("predicted_answer").get_to(t.predicted_answer);
        tj.at("ai_feedback_prefill").get_to(t.ai_feedback_prefill);
        tj.at("assigned_annotator").get_to(t.assigned_annotator);
        s->tasks_.push_back(std::move(t));
      }
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    for (std::size_t i = 0; i < s->tasks_.size(); ++i) {
      s->by_id_[s->tasks_[i].task_id] = i;
      s->queue_[s->tasks_[i].assigned_annotator].push_back(i);
    }
    s->replay();
    return s;
  }

  const std::string& session_id() const { return session_id_; }
  const std::vector<std::string>& annotators() const { return annotators_; }
  std::size_t size() const { return tasks_.size(); }

  // Lowest-ordinal PENDING task of the annotator, or nothing when done.
  std::optional<AnnotationTask> next_task(const std::string& annotator_id) const {
    std::shared_lock lock(mu_);
    const auto& q = queue_of(annotator_id);
    for (const auto i : q)
      if (tasks_[i].status == TaskStatus::PENDING) return tasks_[i];
    return std::nullopt;
  }

  AnnotationTask task(const std::string& task_id) const {
    std::shared_lock lock(mu_);
    return tasks_[index_of(task_id)];
  }

  // Records a human submission. The log line is on disk before this returns.
  FeedbackRecord submit(const std::string& task_id, const std::string& annotator_id, const std::string& feedback_text,
                        bool accepted_ai) {
    std::unique_lock lock(mu_);
    queue_of(annotator_id);
    auto& t = tasks_[index_of(task_id)];
    if (t.assigned_annotator != annotator_id) {
      throw OwnershipError("task " + task_id + " is assigned to another annotator");
    }
    if (t.status == TaskStatus::DONE) throw ConflictError("task " + task_id + " is already done");
    if (feedback_text.empty()) throw ValidationError("feedback_text must not be empty");
    if (accepted_ai && feedback_text != t.ai_feedback_prefill) {
      throw ValidationError("accepted_ai is true but feedback_text differs from the AI prefill");
    }
    FeedbackRecord r;
    r.example_id = t.example.id;
    r.predicted_answer = t.predicted_answer;
    r.feedback_text = feedback_text;
    r.source = FeedbackSource::HUMAN;
    r.annotator_id = annotator_id;
    r.accepted_ai = accepted_ai;
    json line = r;
    line["task_id"] = task_id;
    append_line(line.dump() + "\n");
    t.status = TaskStatus::DONE;
    log_.push_back({task_id, r});
    return r;
  }

  // HUMAN records of every DONE task in task ordinal order. A later export
  // contains every record of an earlier one, in the same relative order.
  std::vector<FeedbackRecord> export_records() const {
    std::shared_lock lock(mu_);
    std::vector<std::pair<std::size_t, const FeedbackRecord*>> done;
    done.reserve(log_.size());
    for (const auto& [id, r] : log_) done.emplace_back(by_id_.at(id), &r);
    std::sort(done.begin(), done.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<FeedbackRecord> out;
    out.reserve(done.size());
    for (const auto& d : done) out.push_back(*d.second);
    return out;
  }

  std::string export_jsonl() const { return to_jsonl(export_records()); }

  std::vector<AnnotatorProgress> progress() const {
    std::shared_lock lock(mu_);
    std::vector<AnnotatorProgress> out;
    for (const auto& a : annotators_) {
      AnnotatorProgress p{a, 0, 0};
      for (const auto i : queue_.at(a)) {
        ++p.total;
        p.done += tasks_[i].status == TaskStatus::DONE;
      }
      out.push_back(p);
    }
    return out;
  }

  std::size_t done_count() const {
    std::shared_lock lock(mu_);
    return log_.size();
  }

 private:
  AnnotationSession() = default;

  const std::vector<std::size_t>& queue_of(const std::string& annotator_id) const {
    const auto it = queue_.find(annotator_id);
    if (it == queue_.end()) {
      throw IdentityError("unknown annotator '" + annotator_id + "'");
    }
    return it->second;
  }

  std::size_t index_of(const std::string& task_id) const {
    const auto it = by_id_.find(task_id);
    if (it == by_id_.end()) throw NotFoundError("no task '" + task_id + "'");
    return it->second;
  }

  void replay() {
    const auto path = dir_ / kSubmissionLog;
    std::string text = std::filesystem::exists(path) ? read_text_file(path) : std::string();
    const std::size_t complete = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
    std::size_t pos = 0, line_no = 0;
    while (pos < complete) {
      const std::size_t end = text.find('\n', pos);
      const auto line = std::string_view(text).substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      const std::string where = path.string() + ":" + std::to_string(line_no);
      std::string task_id;
      FeedbackRecord r;
      try {
        const auto j = json::parse(line);
        j.at("task_id").get_to(task_id);
        r = j.get<FeedbackRecord>();
      } catch (const json::exception& e) {
        throw ParseError(where + ": " + e.what());
      }
      auto& t = tasks_[index_of(task_id)];
      if (t.status == TaskStatus::DONE) throw DataError(where + ": duplicate submission for " + task_id);
      if (r.source != FeedbackSource::HUMAN || r.annotator_id != t.assigned_annotator) {
        throw DataError(where + ": record does not belong to " + task_id);
      }
      t.status = TaskStatus::DONE;
      log_.push_back({task_id, std::move(r)});
    }
    log_fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (log_fd_ < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
    if (complete < text.size()) {
      // Unacknowledged partial line left by a crash.
      if (::ftruncate(log_fd_, static_cast<off_t>(complete)) != 0 || ::fsync(log_fd_) != 0) {
        throw IoError("cannot truncate torn tail of " + path.string());
      }
    }
  }

  // On failure the log is cut back to its previous length so the next
  // append starts on a clean line.
  void append_line(const std::string& line) {
    const off_t before = ::lseek(log_fd_, 0, SEEK_END);
    auto fail = [&](const char* what) {
      const std::string msg = std::string("submission log ") + what + " failed: " + std::strerror(errno);
      if (before >= 0 && ::ftruncate(log_fd_, before) != 0) {
        // Nothing more to do; replay cuts a torn tail anyway.
      }
      throw IoError(msg);
    };
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::write(log_fd_, line.data() + off, line.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail("write");
      }
      off += static_cast<std::size_t>(n);
    }
    if (::fsync(log_fd_) != 0) fail("fsync");
  }

  std::filesystem::path dir_;
  std::string session_id_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> annotators_;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::size_t> by_id_;
  std::map<std::string, std::vector<std::size_t>> queue_;
  std::vector<std::pair<std::string, FeedbackRecord>> log_;
  int log_fd_ = -1;
  mutable std::shared_mutex mu_;
};

}  // namespace laffi
