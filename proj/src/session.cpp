#include "promptcount/session.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

#include "promptcount/rng.hpp"

namespace promptcount {

Session::Session(std::string id, std::shared_ptr<const Model> model, const ImageInput& target, SessionOptions opts)
    : id_(std::move(id)), model_(std::move(model)), target_key_(target.key()), opts_(opts) {
  threshold_ = opts_.threshold.value_or(model_->config().score_threshold);
  if (!(threshold_ >= 0.0 && threshold_ <= 1.0)) throw ThresholdError("threshold must be in [0,1]");
  encode_locked(target);
}

std::string Session::encode_locked(const ImageInput& img) {
  if (!pyramids_.contains(img.key())) {
    pyramids_.emplace(img.key(), model_->encode_image(img));
    ++counters_.image_encoder_calls[img.key()];
  }
  return img.key();
}

std::string Session::add_reference(const ImageInput& reference) {
  std::lock_guard lock(mutex_);
  return encode_locked(reference);
}

CountResult Session::add_prompt(const PromptGeometry& geometry, Polarity polarity) {
  return add_prompt(geometry, polarity, target_key_);
}

CountResult Session::add_prompt(const PromptGeometry& geometry, Polarity polarity, const ImageInput& reference) {
  std::lock_guard lock(mutex_);
  const std::string key = encode_locked(reference);
  auto history = history_;
  history.push_back({rounds_ + 1, PromptEntry{geometry, polarity, key}});
  return run(std::move(history), rounds_ + 1);
}

CountResult Session::add_prompt(const PromptGeometry& geometry, Polarity polarity, const std::string& source_key) {
  std::lock_guard lock(mutex_);
  if (!pyramids_.contains(source_key)) throw UnknownReferenceError("unknown reference image '" + source_key + "'");
  auto history = history_;
  history.push_back({rounds_ + 1, PromptEntry{geometry, polarity, source_key}});
  return run(std::move(history), rounds_ + 1);
}

CountResult Session::remove_prompt(std::size_t round) {
  std::lock_guard lock(mutex_);
  auto history = history_;
  auto it = std::find_if(history.begin(), history.end(), [&](const PromptRecord& r) { return r.round == round; });
  if (it == history.end()) throw UnknownRoundError("no prompt with round " + std::to_string(round));
  history.erase(it);
  const bool has_positive = std::any_of(history.begin(), history.end(),
                                        [](const PromptRecord& r) { return r.entry.polarity == Polarity::positive; });
  if (!has_positive && !history.empty()) {
    throw WouldLeaveNoPositiveError("removing round " + std::to_string(round) +
                                    " would leave only negative prompts");
  }
  if (history.empty()) {
    history_.clear();
    last_ = DetectionSet{};
    return filter();
  }
  return run(std::move(history), rounds_);
}

CountResult Session::run(std::vector<PromptRecord> history, std::size_t next_round) {
  PyramidMap pyramids;
  for (const auto& [key, p] : pyramids_) pyramids.emplace(key, &p);
  std::vector<PromptEntry> entries;
  for (const auto& r : history) entries.push_back(r.entry);

  ++counters_.prompt_encoder_calls;
  PromptEmbedding embedding = model_->encode_prompts(entries, pyramids);
  ++counters_.decoder_calls;
  DetectionSet dets = model_->decode(embedding, pyramids_.at(target_key_));

  history_ = std::move(history);
  rounds_ = next_round;
  last_ = std::move(dets);
  return filter();
}

CountResult Session::filter() const {
  CountResult r;
  if (last_) {
    r = opts_.nms_threshold ? count_from_detections(nms(*last_, *opts_.nms_threshold), threshold_)
                            : count_from_detections(*last_, threshold_);
  }
  r.threshold = threshold_;
  r.round = rounds_;
  return r;
}

CountResult Session::set_threshold(double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ThresholdError("threshold must be in [0,1]");
  std::lock_guard lock(mutex_);
  if (rounds_ == 0) throw NoRoundsYetError("no prompt has been added yet");
  threshold_ = threshold;
  return filter();
}

double Session::threshold() const {
  std::lock_guard lock(mutex_);
  return threshold_;
}

std::vector<PromptRecord> Session::history() const {
  std::lock_guard lock(mutex_);
  return history_;
}

SessionCounters Session::counters() const {
  std::lock_guard lock(mutex_);
  return counters_;
}

std::optional<DetectionSet> Session::last_detections() const {
  std::lock_guard lock(mutex_);
  return last_;
}

std::optional<CountResult> Session::last_result() const {
  std::lock_guard lock(mutex_);
  if (rounds_ == 0) return std::nullopt;
  return filter();
}

// --- manager --------------------------------------------------------------

SessionManager::SessionManager(std::shared_ptr<const Model> model, std::chrono::seconds idle_timeout, ClockFn clock)
    : model_(std::move(model)), idle_timeout_(idle_timeout), clock_(std::move(clock)) {
  std::random_device rd;
  id_state_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::string SessionManager::new_id() {
  id_state_ = mix_seed(id_state_, 0x73657373);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(id_state_));
  return buf;
}

std::shared_ptr<Session> SessionManager::create(const ImageInput& target, SessionOptions opts) {
  std::string id;
  {
    std::lock_guard lock(mutex_);
    do {
      id = new_id();
    } while (sessions_.contains(id));
  }
  // Encoding happens outside the map lock so other sessions stay responsive.
  auto session = std::make_shared<Session>(id, model_, target, opts);
  std::lock_guard lock(mutex_);
  sessions_[id] = Entry{session, clock_()};
  return session;
}

std::shared_ptr<Session> SessionManager::get(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw SessionNotFoundError("no session '" + id + "'");
  it->second.last_used = clock_();
  return it->second.session;
}

bool SessionManager::erase(const std::string& id) {
  std::lock_guard lock(mutex_);
  return sessions_.erase(id) > 0;
}

std::size_t SessionManager::expire() {
  std::lock_guard lock(mutex_);
  const auto now = clock_();
  return std::erase_if(sessions_, [&](const auto& kv) { return now - kv.second.last_used > idle_timeout_; });
}

std::size_t SessionManager::size() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

}  // namespace promptcount
