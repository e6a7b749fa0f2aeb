#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptcount/detection.hpp"
#include "promptcount/model.hpp"

namespace promptcount {

class SessionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UnknownRoundError : public SessionError {
 public:
  using SessionError::SessionError;
};
class WouldLeaveNoPositiveError : public SessionError {
 public:
  using SessionError::SessionError;
};
class NoRoundsYetError : public SessionError {
 public:
  using SessionError::SessionError;
};
class UnknownReferenceError : public SessionError {
 public:
  using SessionError::SessionError;
};
class SessionNotFoundError : public SessionError {
 public:
  using SessionError::SessionError;
};

struct PromptRecord {
  std::size_t round = 0;
  PromptEntry entry;
};

/// Instrumentation for the encode-once and per-round cost contracts.
struct SessionCounters {
  std::map<std::string, std::size_t> image_encoder_calls;  // by image key
  std::size_t prompt_encoder_calls = 0;
  std::size_t decoder_calls = 0;
};

struct SessionOptions {
  std::optional<double> threshold;  // defaults to the model's score threshold
  /// Duplicate suppression before counting; off by default.
  std::optional<double> nms_threshold;
};

/// One interactive counting session over a target image. Images are encoded
/// once; every later round runs only the prompt encoder and the decoder.
/// All member functions are safe to call concurrently.
class Session {
 public:
  Session(std::string id, std::shared_ptr<const Model> model, const ImageInput& target, SessionOptions opts = {});

  const std::string& id() const { return id_; }
  const std::string& target_key() const { return target_key_; }

  /// Encodes a reference image unless already cached; returns its key.
  std::string add_reference(const ImageInput& reference);

  /// Adds a prompt drawn on the target image.
  CountResult add_prompt(const PromptGeometry& geometry, Polarity polarity);
  /// Adds a prompt drawn on a cached reference image (or the target, by key).
  CountResult add_prompt(const PromptGeometry& geometry, Polarity polarity, const std::string& source_key);
  /// Encodes `reference` if needed, then prompts on it.
  CountResult add_prompt(const PromptGeometry& geometry, Polarity polarity, const ImageInput& reference);

  CountResult remove_prompt(std::size_t round);
  /// Re-filters the last detections; never runs the model.
  CountResult set_threshold(double threshold);

  double threshold() const;
  std::vector<PromptRecord> history() const;
  SessionCounters counters() const;
  /// Detections of the latest round (before thresholding), if any.
  std::optional<DetectionSet> last_detections() const;
  std::optional<CountResult> last_result() const;

 private:
  CountResult run(std::vector<PromptRecord> history, std::size_t next_round);
  CountResult filter() const;
  std::string encode_locked(const ImageInput& img);

  std::string id_;
  std::shared_ptr<const Model> model_;
  std::string target_key_;
  SessionOptions opts_;
  double threshold_;

  mutable std::mutex mutex_;
  std::map<std::string, FeaturePyramid> pyramids_;
  std::vector<PromptRecord> history_;
  std::size_t rounds_ = 0;
  std::optional<DetectionSet> last_;
  SessionCounters counters_;
};

/// Owns live sessions and expires idle ones.
class SessionManager {
 public:
  using Clock = std::chrono::steady_clock;
  using ClockFn = std::function<Clock::time_point()>;

  SessionManager(std::shared_ptr<const Model> model, std::chrono::seconds idle_timeout = std::chrono::minutes(30),
                 ClockFn clock = [] { return Clock::now(); });

  std::shared_ptr<Session> create(const ImageInput& target, SessionOptions opts = {});
  /// Throws SessionNotFoundError; refreshes the idle timer.
  std::shared_ptr<Session> get(const std::string& id);
  bool erase(const std::string& id);
  /// Drops sessions idle for longer than the timeout; returns how many.
  std::size_t expire();
  std::size_t size() const;

  const Model& model() const { return *model_; }

 private:
  std::string new_id();

  std::shared_ptr<const Model> model_;
  std::chrono::seconds idle_timeout_;
  ClockFn clock_;
  mutable std::mutex mutex_;
  struct Entry {
    std::shared_ptr<Session> session;
    Clock::time_point last_used;
  };
  std::map<std::string, Entry> sessions_;
  std::uint64_t id_state_;
};

}  // namespace promptcount
