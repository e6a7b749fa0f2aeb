#pragma once

#include <chrono>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>

#include "promptcount/model.hpp"
#include "promptcount/session.hpp"

namespace promptcount {

/// Error payload sent over the wire: {"error": {"code", "message"}}.
struct ApiError {
  std::string code;
  std::string message;
  int status = 500;
};

struct ServiceOptions {
  std::size_t max_upload_bytes = 16u << 20;
  std::optional<double> threshold;       // default session threshold
  std::optional<double> nms_threshold;   // duplicate suppression before counting
  std::optional<std::string> cors_origin;
  bool debug_endpoints = false;          // GET /sessions/{id}/debug
  std::chrono::seconds idle_timeout = std::chrono::minutes(30);
};

/// HTTP front end over a SessionManager.
class Service {
 public:
  Service(std::shared_ptr<const Model> model, ServiceOptions opts = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds (port 0 picks a free one) and serves on a background thread.
  /// Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Binds and serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

  SessionManager& sessions();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace promptcount
