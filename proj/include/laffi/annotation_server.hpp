#pragma once

// HTTP front end of an annotation session.
//
//   GET  /api/session                 roster and progress
//   GET  /api/annotators/{id}/next    next task, or 204 when the segment is done
//   POST /api/tasks/{id}/feedback     {annotator_id, feedback_text, accepted_ai}
//   GET  /api/progress                per-annotator counts
//   GET  /api/export                  human records as JSONL
//
// An "Authorization: Bearer <annotator id>" header, when sent, must name the
// annotator the request acts for. Errors are {code, message} bodies.

#include <filesystem>
#include <optional>
#include <string>

#include <httplib.h>

#include "laffi/annotation.hpp"
#include "laffi/errors.hpp"

namespace laffi {

inline int http_status(const Error& e) {
  const auto& c = e.code();
  if (c == "unknown_annotator") return 401;
  if (c == "ownership_error") return 403;
  if (c == "not_found") return 404;
  if (c == "conflict") return 409;
  if (c == "validation_error") return 422;
  if (c == "parse_error" || c == "usage_error") return 400;
  return 500;
}

inline json progress_json(const AnnotationSession& s) {
  json per = json::array();
  std::size_t done = 0, total = 0;
  for (const auto& p : s.progress()) {
    per.push_back({{"annotator_id", p.annotator_id}, {"done", p.done}, {"total", p.total}});
    done += p.done;
    total += p.total;
  }
  return {{"done", done}, {"total", total}, {"annotators", std::move(per)}};
}

class AnnotationServer {
 public:
  explicit AnnotationServer(AnnotationSession& session, std::optional<std::filesystem::path> ui_dir = std::nullopt)
      : session_(session) {
    using httplib::Request, httplib::Response;
    server_.Get("/api/session", [this](const Request&, Response& res) {
      guarded(res, [&] {
        auto p = progress_json(session_);
        send_json(res, 200, {{"session_id", session_.session_id()},
                             {"annotators", session_.annotators()},
                             {"progress", std::move(p)}});
      });
    });
    server_.Get("/api/annotators/:id/next", [this](const Request& req, Response& res) {
      guarded(res, [&] {
        const auto id = req.path_params.at("id");
        check_bearer(req, id);
        const auto task = session_.next_task(id);
        if (!task) {
          res.status = 204;
          return;
        }
        send_json(res, 200, task_json(*task));
      });
    });
    server_.Post("/api/tasks/:id/feedback", [this](const Request& req, Response& res) {
      guarded(res, [&] {
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::exception& e) {
          throw ParseError(std::string("request body is not JSON: ") + e.what());
        }
        if (!body.is_object()) throw ParseError("request body must be a JSON object");
        for (const char* key : {"annotator_id", "feedback_text", "accepted_ai"})
          if (!body.contains(key)) throw ValidationError(std::string("missing field ") + key);
        if (!body["annotator_id"].is_string() || !body["feedback_text"].is_string() ||
            !body["accepted_ai"].is_boolean())
          throw ValidationError("annotator_id and feedback_text must be strings, accepted_ai a boolean");
        const auto annotator = body["annotator_id"].get<std::string>();
        check_bearer(req, annotator);
        const auto record = session_.submit(req.path_params.at("id"), annotator,
                                            body["feedback_text"].get<std::string>(), body["accepted_ai"].get<bool>());
        send_json(res, 200, record);
      });
    });
    server_.Get("/api/progress", [this](const Request&, Response& res) {
      guarded(res, [&] { send_json(res, 200, progress_json(session_)); });
    });
    server_.Get("/api/export", [this](const Request&, Response& res) {
      guarded(res, [&] { res.set_content(session_.export_jsonl(), "application/x-ndjson"); });
    });
    if (ui_dir) {
      if (!std::filesystem::is_directory(*ui_dir)) throw ConfigError("UI directory " + ui_dir->string() + " not found");
      server_.set_mount_point("/", ui_dir->string());
    }
  }

  // Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  // Blocks until stop() is called.
  void serve() {
    if (!server_.listen_after_bind()) throw IoError("annotation server stopped with an error");
  }

  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  static void send_json(httplib::Response& res, int status, const json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void check_bearer(const httplib::Request& req, const std::string& annotator) {
    if (!req.has_header("Authorization")) return;
    const auto h = req.get_header_value("Authorization");
    constexpr std::string_view prefix = "Bearer ";
    if (!std::string_view(h).starts_with(prefix)) throw IdentityError("Authorization header must be 'Bearer <annotator id>'");
    if (h.substr(prefix.size()) != annotator) {
      throw OwnershipError("bearer token does not match annotator '" + annotator + "'");
    }
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& body) {
    try {
      body();
    } catch (const Error& e) {
      send_json(res, http_status(e), {{"code", e.code()}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"code", "internal_error"}, {"message", e.what()}});
    }
  }

  AnnotationSession& session_;
  httplib::Server server_;
};

}  // namespace laffi
