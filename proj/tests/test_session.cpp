#include <doctest.h>

#include <algorithm>

#include "promptcount/scenegen.hpp"
#include "promptcount/session.hpp"

using namespace promptcount;

namespace {

std::shared_ptr<const Model> small_model() {
  static auto m = [] {
    ModelConfig c;
    c.resolution = 128;
    c.dim = 32;
    c.heads = 4;
    c.num_queries = 20;
    c.decoder_layers = 2;
    c.ffn_dim = 64;
    c.stage_channels = {16, 16, 32, 32};
    c.stem_channels = 8;
    return std::make_shared<const Model>(c, 3);
  }();
  return m;
}

Scene scene(std::uint64_t seed) {
  SceneConfig c;
  c.image_size = 128;
  c.n_target = {3, 6};
  c.seed = seed;
  return generate_scene(c);
}

// Reference computation straight through the model, bypassing the session.
DetectionSet direct(const std::vector<PromptEntry>& entries, const std::vector<const ImageInput*>& images,
                    const ImageInput& target) {
  const Model& m = *small_model();
  std::vector<FeaturePyramid> pyramids;
  for (const auto* img : images) pyramids.push_back(m.encode_image(*img));
  PyramidMap map;
  for (const auto& p : pyramids) map.emplace(p.image_key, &p);
  const FeaturePyramid tp = m.encode_image(target);
  return m.decode(m.encode_prompts(entries, map), tp);
}

}  // namespace

TEST_CASE("the target is encoded once across many rounds") {
  const Scene s = scene(1);
  const ImageInput target(s.image);
  Session session("a", small_model(), target);
  const auto& boxes = s.annotation.target_boxes;
  for (std::size_t i = 0; i < 6; ++i) {
    const CountResult r = session.add_prompt(boxes[i % boxes.size()], Polarity::positive);
    CHECK(r.round == i + 1);
  }
  session.add_prompt(Point(0.01, 0.01), Polarity::negative);
  session.set_threshold(0.7);
  session.set_threshold(0.1);
  session.remove_prompt(2);
  const SessionCounters c = session.counters();
  CHECK(c.image_encoder_calls.size() == 1);
  CHECK(c.image_encoder_calls.at(target.key()) == 1);
  CHECK(c.prompt_encoder_calls == 8);
  CHECK(c.decoder_calls == 8);
}

TEST_CASE("round results equal a direct model computation") {
  const Scene s = scene(2);
  const ImageInput target(s.image);
  Session session("a", small_model(), target, SessionOptions{0.4, std::nullopt});
  const Box b0 = s.annotation.target_boxes[0];
  const Box b1 = s.annotation.target_boxes[1];
  session.add_prompt(b0, Polarity::positive);
  const CountResult r = session.add_prompt(b1, Polarity::positive);
  const DetectionSet d = direct({{b0, Polarity::positive, target.key()}, {b1, Polarity::positive, target.key()}},
                                {&target}, target);
  const CountResult expected = count_from_detections(d, 0.4);
  CHECK(r.count == expected.count);
  CHECK(r.scores == expected.scores);
  CHECK(r.boxes == expected.boxes);
  CHECK(r.threshold == 0.4);
}

TEST_CASE("threshold changes re-filter without touching the model") {
  const Scene s = scene(3);
  Session session("a", small_model(), ImageInput(s.image));
  CHECK_THROWS_AS(session.set_threshold(0.5), NoRoundsYetError);
  CHECK_FALSE(session.last_result().has_value());
  session.add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  const SessionCounters before = session.counters();
  const DetectionSet dets = *session.last_detections();
  std::size_t previous = dets.size() + 1;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const CountResult r = session.set_threshold(t);
    CHECK(r.count == count_from_detections(dets, t).count);
    CHECK(r.count <= previous);
    CHECK(std::is_sorted(r.scores.rbegin(), r.scores.rend()));
    previous = r.count;
  }
  CHECK_THROWS_AS(session.set_threshold(1.5), ThresholdError);
  CHECK_THROWS_AS(session.set_threshold(-0.1), ThresholdError);
  const SessionCounters after = session.counters();
  CHECK(after.prompt_encoder_calls == before.prompt_encoder_calls);
  CHECK(after.decoder_calls == before.decoder_calls);
  CHECK(*session.last_detections() == dets);
}

TEST_CASE("removing a prompt restores the earlier state") {
  const Scene s = scene(4);
  Session session("a", small_model(), ImageInput(s.image));
  const CountResult first = session.add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  const DetectionSet first_dets = *session.last_detections();
  session.add_prompt(s.annotation.target_boxes[1], Polarity::positive);
  session.add_prompt(Point(0.02, 0.98), Polarity::negative);
  session.remove_prompt(3);
  const CountResult back = session.remove_prompt(2);
  CHECK(back.scores == first.scores);
  CHECK(*session.last_detections() == first_dets);
  CHECK(back.round == 3);
  REQUIRE(session.history().size() == 1);
  CHECK(session.history()[0].round == 1);

  CHECK_THROWS_AS(session.remove_prompt(2), UnknownRoundError);
  CHECK_THROWS_AS(session.remove_prompt(99), UnknownRoundError);

  const CountResult empty = session.remove_prompt(1);
  CHECK(empty.count == 0);
  CHECK(session.history().empty());
  // Round numbers are never reused.
  CHECK(session.add_prompt(s.annotation.target_boxes[0], Polarity::positive).round == 4);
}

TEST_CASE("the last positive cannot be removed while negatives remain") {
  const Scene s = scene(5);
  Session session("a", small_model(), ImageInput(s.image));
  session.add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  session.add_prompt(Point(0.5, 0.02), Polarity::negative);
  const auto history = session.history();
  CHECK_THROWS_AS(session.remove_prompt(1), WouldLeaveNoPositiveError);
  CHECK(session.history().size() == history.size());
}

TEST_CASE("failed rounds leave the session untouched") {
  const Scene s = scene(6);
  Session session("a", small_model(), ImageInput(s.image));
  CHECK_THROWS_AS(session.add_prompt(Point(0.5, 0.5), Polarity::negative), NoPositivePromptError);
  CHECK(session.history().empty());
  CHECK_FALSE(session.last_result().has_value());
  CHECK(session.add_prompt(s.annotation.target_boxes[0], Polarity::positive).round == 1);
  CHECK_THROWS_AS(session.add_prompt(Point(0.5, 0.5), Polarity::positive, std::string("nope")),
                  UnknownReferenceError);
  CHECK(session.history().size() == 1);
  CHECK(session.last_result()->round == 1);
}

TEST_CASE("prompts drawn on a reference image") {
  const Scene target_scene = scene(7);
  const Scene ref_scene = scene(8);
  const ImageInput target(target_scene.image);
  const ImageInput ref(ref_scene.image);
  Session session("a", small_model(), target);
  const std::string key = session.add_reference(ref);
  CHECK(key == ref.key());
  CHECK(session.add_reference(ref) == key);
  const Box b = ref_scene.annotation.target_boxes[0];
  const CountResult r1 = session.add_prompt(b, Polarity::positive, key);
  session.add_prompt(Point(0.5, 0.5), Polarity::positive, ref);
  const SessionCounters c = session.counters();
  CHECK(c.image_encoder_calls.at(ref.key()) == 1);
  CHECK(c.image_encoder_calls.at(target.key()) == 1);
  CHECK(session.history()[0].entry.source_key == key);

  const DetectionSet d = direct({{b, Polarity::positive, ref.key()}}, {&ref}, target);
  CHECK(r1.scores == count_from_detections(d, r1.threshold).scores);
}

TEST_CASE("sessions are isolated from each other") {
  const Scene s = scene(9);
  const ImageInput img(s.image);
  SessionManager mgr(small_model());
  auto a = mgr.create(img);
  auto b = mgr.create(img);
  CHECK(a->id() != b->id());
  CHECK(a->id().size() == 16);
  a->add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  a->add_prompt(s.annotation.target_boxes[1], Polarity::positive);
  a->set_threshold(0.9);
  CHECK(b->history().empty());
  CHECK(b->threshold() == doctest::Approx(small_model()->config().score_threshold));
  const CountResult rb = b->add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  CHECK(rb.round == 1);
  CHECK(a->history().size() == 2);
  CHECK(b->counters().image_encoder_calls.at(img.key()) == 1);
}

TEST_CASE("idle sessions expire") {
  auto now = SessionManager::Clock::time_point{};
  SessionManager mgr(small_model(), std::chrono::minutes(30), [&] { return now; });
  const ImageInput img(scene(10).image);
  const std::string a = mgr.create(img)->id();
  now += std::chrono::minutes(20);
  const std::string b = mgr.create(img)->id();
  now += std::chrono::minutes(15);
  mgr.get(b);
  CHECK(mgr.expire() == 1);
  CHECK_THROWS_AS(mgr.get(a), SessionNotFoundError);
  now += std::chrono::minutes(29);
  CHECK(mgr.expire() == 0);
  CHECK(mgr.size() == 1);
  now += std::chrono::minutes(2);
  CHECK(mgr.expire() == 1);
  CHECK(mgr.size() == 0);
  CHECK_FALSE(mgr.erase(b));
}

TEST_CASE("erasing a session") {
  SessionManager mgr(small_model());
  auto s = mgr.create(ImageInput(scene(11).image));
  CHECK(mgr.erase(s->id()));
  CHECK_THROWS_AS(mgr.get(s->id()), SessionNotFoundError);
  CHECK(mgr.size() == 0);
}

TEST_CASE("suppression option is applied before counting") {
  const Scene s = scene(12);
  const ImageInput img(s.image);
  Session plain("a", small_model(), img, SessionOptions{0.0, std::nullopt});
  Session suppressed("b", small_model(), img, SessionOptions{0.0, 0.5});
  const CountResult rp = plain.add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  const CountResult rs = suppressed.add_prompt(s.annotation.target_boxes[0], Polarity::positive);
  CHECK(rp.count == small_model()->config().num_queries);
  CHECK(rs.count == nms(*plain.last_detections(), 0.5).size());
  CHECK(rs.count <= rp.count);
}
