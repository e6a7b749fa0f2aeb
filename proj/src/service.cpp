#include "promptcount/service.hpp"

#include <httplib.h>

#include <json.hpp>
#include <span>
#include <thread>

#include "promptcount/geometry.hpp"
#include "promptcount/image.hpp"

namespace promptcount {

using nlohmann::json;

namespace {

struct ApiException {
  ApiError error;
};

[[noreturn]] void fail(int status, std::string code, std::string message) {
  throw ApiException{ApiError{std::move(code), std::move(message), status}};
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) {
  send_json(res, e.status, json{{"error", {{"code", e.code}, {"message", e.message}}}});
}

/// Maps engine exceptions to stable wire codes.
ApiError map_exception() {
  try {
    throw;
  } catch (const ApiException& e) {
    return e.error;
  } catch (const SessionNotFoundError& e) {
    return {"session_not_found", e.what(), 404};
  } catch (const UnknownRoundError& e) {
    return {"unknown_round", e.what(), 404};
  } catch (const UnknownReferenceError& e) {
    return {"unknown_reference", e.what(), 422};
  } catch (const WouldLeaveNoPositiveError& e) {
    return {"would_leave_no_positive", e.what(), 422};
  } catch (const NoRoundsYetError& e) {
    return {"no_rounds_yet", e.what(), 422};
  } catch (const NoPositivePromptError& e) {
    return {"no_positive_prompt", e.what(), 422};
  } catch (const GeometryError& e) {
    return {"geometry_out_of_bounds", e.what(), 422};
  } catch (const ThresholdError& e) {
    return {"invalid_threshold", e.what(), 422};
  } catch (const ImageInputError& e) {
    return {"image_out_of_range", e.what(), 422};
  } catch (const ImageError& e) {
    return {"invalid_image", e.what(), 400};
  } catch (const PromptError& e) {
    return {"invalid_prompt", e.what(), 422};
  } catch (const std::exception&) {
    return {"internal_error", "internal error", 500};
  }
}

json box_json(const Box& b) { return json::array({b.x_min(), b.y_min(), b.x_max(), b.y_max()}); }

json result_json(const CountResult& r, const std::optional<DetectionSet>& all) {
  json dets = json::array();
  if (all) {
    std::vector<std::size_t> order(all->size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return all->scores[a] > all->scores[b]; });
    for (std::size_t i : order) dets.push_back({{"box", box_json(all->boxes[i])}, {"score", all->scores[i]}});
  } else {
    for (std::size_t i = 0; i < r.boxes.size(); ++i) {
      dets.push_back({{"box", box_json(r.boxes[i])}, {"score", r.scores[i]}});
    }
  }
  return json{{"round", r.round}, {"count", r.count}, {"detections", dets}, {"threshold", r.threshold}};
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::parse_error&) {
    fail(400, "invalid_request", "request body is not valid JSON");
  }
}

ImageInput image_from_request(const httplib::Request& req, std::size_t limit) {
  const std::string* bytes = &req.body;
  if (req.is_multipart_form_data()) {
    if (req.files.empty()) fail(400, "unsupported_media", "multipart upload carries no file");
    auto it = req.files.find("image");
    if (it == req.files.end()) it = req.files.begin();
    bytes = &it->second.content;
  }
  if (bytes->size() > limit) fail(413, "too_large", "upload exceeds " + std::to_string(limit) + " bytes");
  const std::span<const std::uint8_t> data(reinterpret_cast<const std::uint8_t*>(bytes->data()), bytes->size());
  if (sniff_format(data) == ImageFormat::unknown) fail(400, "unsupported_media", "upload must be a PNG or JPEG image");
  return ImageInput(decode_image(data));
}

PromptGeometry geometry_from(const json& body) {
  if (!body.is_object()) fail(400, "invalid_request", "prompt must be a JSON object");
  auto type = body.find("type");
  auto coords = body.find("coords");
  if (type == body.end() || !type->is_string()) fail(400, "invalid_request", "'type' must be \"box\" or \"point\"");
  if (coords == body.end() || !coords->is_array()) fail(400, "invalid_request", "'coords' must be an array");
  std::vector<double> c;
  for (const auto& v : *coords) {
    if (!v.is_number()) fail(400, "invalid_request", "'coords' must hold numbers");
    c.push_back(v.get<double>());
  }
  const std::string t = type->get<std::string>();
  if (t == "box") {
    if (c.size() != 4) fail(400, "invalid_request", "box coords are [x0, y0, x1, y1]");
    return Box(c[0], c[1], c[2], c[3]);
  }
  if (t == "point") {
    if (c.size() != 2) fail(400, "invalid_request", "point coords are [x, y]");
    return Point(c[0], c[1]);
  }
  fail(400, "invalid_request", "'type' must be \"box\" or \"point\"");
}

Polarity polarity_from(const json& body) {
  auto it = body.find("polarity");
  if (it == body.end()) return Polarity::positive;
  if (it->is_string() && *it == "positive") return Polarity::positive;
  if (it->is_string() && *it == "negative") return Polarity::negative;
  fail(400, "invalid_request", "'polarity' must be \"positive\" or \"negative\"");
}

json geometry_json(const PromptGeometry& g) {
  if (const Box* b = std::get_if<Box>(&g)) return {{"type", "box"}, {"coords", box_json(*b)}};
  const Point& p = std::get<Point>(g);
  return {{"type", "point"}, {"coords", json::array({p.x, p.y})}};
}

}  // namespace

struct Service::Impl {
  Impl(std::shared_ptr<const Model> model, ServiceOptions o)
      : opts(std::move(o)), manager(std::move(model), opts.idle_timeout) {
    routes();
  }

  template <typename F>
  httplib::Server::Handler guarded(F f) {
    return [this, f](const httplib::Request& req, httplib::Response& res) {
      manager.expire();
      try {
        f(req, res);
      } catch (...) {
        send_error(res, map_exception());
      }
      cors(res);
    };
  }

  void cors(httplib::Response& res) const {
    if (opts.cors_origin) res.set_header("Access-Control-Allow-Origin", *opts.cors_origin);
  }

  SessionOptions session_options() const { return SessionOptions{opts.threshold, opts.nms_threshold}; }

  static bool want_all(const httplib::Request& req) {
    return req.has_param("all") && (req.get_param_value("all") == "true" || req.get_param_value("all") == "1");
  }

  void reply(httplib::Response& res, const httplib::Request& req, Session& s, const CountResult& r) {
    send_json(res, 200, result_json(r, want_all(req) ? s.last_detections() : std::nullopt));
  }

  void routes() {
    // Let oversized bodies reach the handler so they get a JSON error.
    server.set_payload_max_length(opts.max_upload_bytes + (1u << 20));
    server.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 413) {
        send_error(res, {"too_large", "upload exceeds the size limit", 413});
      } else if (res.status == 404) {
        send_error(res, {"not_found", "no such endpoint", 404});
      } else {
        send_error(res, {"invalid_request", "request could not be processed", res.status});
      }
      cors(res);
    });

    if (opts.cors_origin) {
      server.Options(R"(.*)", [this](const httplib::Request&, httplib::Response& res) {
        res.status = 204;
        res.set_header("Access-Control-Allow-Origin", *opts.cors_origin);
        res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
      });
    }

    server.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
                 send_json(res, 200, json{{"status", "ok"}});
               }));

    server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const ImageInput img = image_from_request(req, opts.max_upload_bytes);
                  auto s = manager.create(img, session_options());
                  send_json(res, 201, json{{"session_id", s->id()}, {"image_id", s->target_key()}});
                }));

    server.Get(R"(/sessions/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 auto s = manager.get(req.matches[1]);
                 auto r = s->last_result();
                 if (!r) {
                   send_json(res, 200, json{{"round", 0}, {"count", 0}, {"detections", json::array()},
                                            {"threshold", s->threshold()}});
                   return;
                 }
                 reply(res, req, *s, *r);
               }));

    server.Delete(R"(/sessions/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                    if (!manager.erase(req.matches[1])) {
                      throw SessionNotFoundError("no session '" + std::string(req.matches[1]) + "'");
                    }
                    send_json(res, 200, json{{"deleted", std::string(req.matches[1])}});
                  }));

    server.Post(R"(/sessions/([0-9a-f]+)/reference)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  auto s = manager.get(req.matches[1]);
                  const ImageInput img = image_from_request(req, opts.max_upload_bytes);
                  send_json(res, 201, json{{"reference_image_id", s->add_reference(img)}});
                }));

    server.Post(R"(/sessions/([0-9a-f]+)/prompts)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  auto s = manager.get(req.matches[1]);
                  const json body = parse_body(req);
                  const PromptGeometry g = geometry_from(body);
                  const Polarity pol = polarity_from(body);
                  auto ref = body.find("reference_image_id");
                  CountResult r;
                  if (ref != body.end() && !ref->is_null()) {
                    if (!ref->is_string()) fail(400, "invalid_request", "'reference_image_id' must be a string");
                    r = s->add_prompt(g, pol, ref->get<std::string>());
                  } else {
                    r = s->add_prompt(g, pol);
                  }
                  reply(res, req, *s, r);
                }));

    server.Delete(R"(/sessions/([0-9a-f]+)/prompts/(\d+))",
                  guarded([this](const httplib::Request& req, httplib::Response& res) {
                    auto s = manager.get(req.matches[1]);
                    const auto round = std::stoull(req.matches[2]);
                    reply(res, req, *s, s->remove_prompt(round));
                  }));

    server.Put(R"(/sessions/([0-9a-f]+)/threshold)",
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 auto s = manager.get(req.matches[1]);
                 const json body = parse_body(req);
                 if (!body.is_object() || !body.contains("threshold") || !body.at("threshold").is_number()) {
                   fail(400, "invalid_request", "body must be {\"threshold\": number}");
                 }
                 reply(res, req, *s, s->set_threshold(body.at("threshold").get<double>()));
               }));

    if (opts.debug_endpoints) {
      server.Get(R"(/sessions/([0-9a-f]+)/debug)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   auto s = manager.get(req.matches[1]);
                   const SessionCounters c = s->counters();
                   json history = json::array();
                   for (const auto& h : s->history()) {
                     json e = geometry_json(h.entry.geometry);
                     e["round"] = h.round;
                     e["polarity"] = h.entry.polarity == Polarity::positive ? "positive" : "negative";
                     e["image_id"] = h.entry.source_key;
                     history.push_back(e);
                   }
                   send_json(res, 200,
                             json{{"target_image_id", s->target_key()},
                                  {"image_encoder_calls", c.image_encoder_calls},
                                  {"prompt_encoder_calls", c.prompt_encoder_calls},
                                  {"decoder_calls", c.decoder_calls},
                                  {"history", history}});
                 }));
    }
  }

  ServiceOptions opts;
  SessionManager manager;
  httplib::Server server;
  std::thread thread;
};

Service::Service(std::shared_ptr<const Model> model, ServiceOptions opts)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(opts))) {}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void Service::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

SessionManager& Service::sessions() { return impl_->manager; }

}  // namespace promptcount
