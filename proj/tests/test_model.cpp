#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "promptcount/model.hpp"
#include "promptcount/rng.hpp"
#include "promptcount/scenegen.hpp"

using namespace promptcount;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.dim = 32;
  c.heads = 4;
  c.num_queries = 16;
  c.decoder_layers = 2;
  c.ffn_dim = 64;
  c.stage_channels = {16, 24, 32, 32};
  c.stem_channels = 8;
  return c;
}

Image scene_image(std::uint64_t seed, int size = 256) {
  SceneConfig cfg;
  cfg.image_size = size;
  cfg.n_target = {6, 10};
  cfg.seed = seed;
  return generate_scene(cfg).image;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

void fill_square(Image& img, int x0, int y0, int side, Rgb c) {
  for (int y = y0; y < y0 + side; ++y) {
    for (int x = x0; x < x0 + side; ++x) img.set(x, y, c);
  }
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 7;
  CHECK_THROWS_AS(c.validate(), ModelConfigError);
  c = ModelConfig{};
  c.num_queries = 0;
  CHECK_THROWS_AS(c.validate(), ModelConfigError);
  c = ModelConfig{};
  c.score_threshold = 1.5;
  CHECK_THROWS_AS(c.validate(), ModelConfigError);
}

TEST_CASE("image input bounds") {
  CHECK_THROWS_AS(ImageInput(Image(63, 100)), ImageInputError);
  CHECK_THROWS_AS(ImageInput(Image(100, 1025)), ImageInputError);
  CHECK_NOTHROW(ImageInput(Image(64, 1024)));
  CHECK(ImageInput(Image(80, 80, {1, 2, 3})).key() == ImageInput(Image(80, 80, {1, 2, 3})).key());
  CHECK(ImageInput(Image(80, 80, {1, 2, 3})).key() != ImageInput(Image(80, 80, {1, 2, 4})).key());
}

TEST_CASE("letterbox forward and inverse compose to identity") {
  const Letterbox lb = Letterbox::fit(300, 200, 256);
  CHECK(lb.content_w == 256);
  CHECK(lb.content_h == 171);
  CHECK(lb.offset_x == 0);
  CHECK(lb.offset_y == 42);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(), y = rng.uniform();
    CHECK(lb.to_image_x(lb.to_model_x(x)) == doctest::Approx(x).epsilon(1e-12));
    CHECK(lb.to_image_y(lb.to_model_y(y)) == doctest::Approx(y).epsilon(1e-12));
  }
  // Image corners land on the content edges.
  CHECK(lb.to_model_y(0.0) * 256 == doctest::Approx(42));
  CHECK(lb.to_model_y(1.0) * 256 == doctest::Approx(213));
  const Box b(0.1, 0.2, 0.5, 0.9);
  const Box m = lb.to_model(b);
  const Box back = lb.to_image(m.x_min(), m.y_min(), m.x_max(), m.y_max());
  CHECK(back.x_min() == doctest::Approx(b.x_min()));
  CHECK(back.y_max() == doctest::Approx(b.y_max()));
  // Parts in the padding are clamped away.
  const Box pad = lb.to_image(0.1, 0.0, 0.2, 0.5);
  CHECK(pad.y_min() == 0.0);
}

TEST_CASE("pyramid shapes follow stride arithmetic") {
  Model model(ModelConfig{}, 1);
  const FeaturePyramid p = model.encode_image(ImageInput(scene_image(1)));
  REQUIRE(p.levels.size() == 3);
  const int expected[3][3] = {{128, 32, 32}, {128, 16, 16}, {128, 8, 8}};
  for (int l = 0; l < 3; ++l) {
    CHECK(p.levels[l].stride == kPyramidStrides[l]);
    CHECK(p.levels[l].channels == expected[l][0]);
    CHECK(p.levels[l].height == expected[l][1]);
    CHECK(p.levels[l].width == expected[l][2]);
    CHECK(p.levels[l].data.size() == std::size_t(128 * expected[l][1] * expected[l][2]));
  }
  const FeaturePyramid q = model.encode_image(ImageInput(scene_image(1)));
  CHECK(p == q);
}

TEST_CASE("non-square input keeps the model-frame pyramid") {
  Model model(small_config(), 1);
  const FeaturePyramid p = model.encode_image(ImageInput(Image(300, 200, {200, 10, 10})));
  CHECK(p.levels[0].height == 32);
  CHECK(p.levels[0].width == 32);
  CHECK(p.letterbox == Letterbox::fit(300, 200, 256));
}

TEST_CASE("prompt encoding contracts") {
  Model model(small_config(), 2);
  const ImageInput img(scene_image(2));
  const FeaturePyramid p = model.encode_image(img);
  const PyramidMap pyramids{{img.key(), &p}};

  const PromptEntry a{Box(0.1, 0.1, 0.2, 0.2), Polarity::positive, img.key()};
  const PromptEntry b{Point(0.6, 0.6), Polarity::positive, img.key()};
  const PromptEntry n{Box(0.5, 0.1, 0.6, 0.25), Polarity::negative, img.key()};

  const auto single = model.encode_prompts({a}, pyramids);
  const auto entries = model.encode_prompt_entries({a}, pyramids);
  CHECK(single.positive == entries[0]);
  CHECK(norm(single.positive) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_FALSE(single.negative.has_value());
  CHECK(single.positive_count == 1);

  const auto mixed = model.encode_prompts({a, n}, pyramids);
  REQUIRE(mixed.negative.has_value());
  CHECK(mixed.positive_count == 1);
  CHECK(mixed.negative_count == 1);
  CHECK(norm(*mixed.negative) == doctest::Approx(1.0).epsilon(1e-6));

  const auto two = model.encode_prompts({a, b}, pyramids);
  const auto parts = model.encode_prompt_entries({a, b}, pyramids);
  std::vector<double> mean(parts[0].size());
  double m = 0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] = 0.5 * (double(parts[0][i]) + parts[1][i]);
    m += mean[i] * mean[i];
  }
  for (std::size_t i = 0; i < mean.size(); ++i) CHECK(two.positive[i] == doctest::Approx(mean[i] / std::sqrt(m)));

  CHECK_THROWS_AS(model.encode_prompts({n}, pyramids), NoPositivePromptError);
  CHECK_THROWS_AS(model.encode_prompts({PromptEntry{Box(0.1, 0.1, 0.2, 0.2), Polarity::positive, "missing"}}, pyramids),
                  MissingPyramidError);
}

TEST_CASE("identical instances pool to near-identical vectors") {
  // Two identical squares, shifted by a multiple of the coarsest stride.
  Image img(256, 256, {40, 40, 40});
  fill_square(img, 40, 40, 16, {220, 180, 30});
  fill_square(img, 40 + 128, 40 + 96, 16, {220, 180, 30});
  for (std::uint64_t seed : {1, 2, 3}) {
    Model model(ModelConfig{}, seed);
    const ImageInput input(img);
    const FeaturePyramid p = model.encode_image(input);
    const PyramidMap pyramids{{input.key(), &p}};
    const auto v = model.encode_prompt_entries(
        {{Box(40 / 256.0, 40 / 256.0, 56 / 256.0, 56 / 256.0), Polarity::positive, input.key()},
         {Box(168 / 256.0, 136 / 256.0, 184 / 256.0, 152 / 256.0), Polarity::positive, input.key()}},
        pyramids);
    CHECK(cosine(v[0], v[1]) >= 0.99);
  }
}

TEST_CASE("decode shape, score range and determinism") {
  Model model(small_config(), 3);
  const ImageInput img(scene_image(3));
  const FeaturePyramid p = model.encode_image(img);
  const PyramidMap pyramids{{img.key(), &p}};
  const auto prompt = model.encode_prompts({{Box(0.1, 0.1, 0.2, 0.2), Polarity::positive, img.key()}}, pyramids);
  const DetectionSet d = model.decode(prompt, p);
  CHECK(d.size() == 16);
  CHECK(d.scores.size() == 16);
  CHECK(d.query_embeddings.size() == 16);
  CHECK(d.negative_scores.empty());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d.scores[i] >= 0.0);
    CHECK(d.scores[i] <= 1.0);
    CHECK(d.scores[i] == d.positive_scores[i]);
    CHECK(norm(d.query_embeddings[i]) == doctest::Approx(1.0).epsilon(1e-5));
  }
  const DetectionSet again = model.decode(prompt, p);
  CHECK(again.scores == d.scores);
  CHECK(again.boxes == d.boxes);
}

TEST_CASE("negative equal to a query embedding suppresses it") {
  Model model(small_config(), 4);
  const ImageInput img(scene_image(4));
  const FeaturePyramid p = model.encode_image(img);
  const PyramidMap pyramids{{img.key(), &p}};
  auto prompt = model.encode_prompts({{Box(0.1, 0.1, 0.2, 0.2), Polarity::positive, img.key()}}, pyramids);
  const DetectionSet plain = model.decode(prompt, p);
  prompt.negative = plain.query_embeddings[5];
  prompt.negative_count = 1;
  const DetectionSet sup = model.decode(prompt, p);
  CHECK(sup.scores[5] < 0.01 * sup.positive_scores[5]);
  for (std::size_t i = 0; i < sup.size(); ++i) {
    CHECK(sup.positive_scores[i] == plain.positive_scores[i]);
    CHECK(sup.scores[i] <= sup.positive_scores[i]);
    CHECK(sup.scores[i] <= 1.0 - sup.negative_scores[i]);
  }
}

TEST_CASE("decode returns boxes in the target frame for letterboxed images") {
  Model model(small_config(), 5);
  const ImageInput img(Image(300, 200, {30, 30, 30}));
  const FeaturePyramid p = model.encode_image(img);
  const PyramidMap pyramids{{img.key(), &p}};
  const auto prompt = model.encode_prompts({{Point(0.5, 0.5), Polarity::positive, img.key()}}, pyramids);
  for (const Box& b : model.decode(prompt, p).boxes) {
    CHECK(b.x_min() >= 0.0);
    CHECK(b.y_max() <= 1.0);
  }
}

TEST_CASE("checkpoint round trip and version check") {
  const auto dir = std::filesystem::temp_directory_path() / "promptcount_test_model";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  Model model(small_config(), 6);
  model.save(path, 77);
  const CheckpointInfo info = Model::read_checkpoint_info(path);
  CHECK(info.config == small_config());
  CHECK(info.training_seed == 77);
  CHECK(info.format_version == kCheckpointFormatVersion);

  Model loaded = Model::load(path);
  const ImageInput img(scene_image(6));
  const FeaturePyramid a = model.encode_image(img);
  const FeaturePyramid b = loaded.encode_image(img);
  CHECK(a == b);
  const PyramidMap pyramids{{img.key(), &a}};
  const auto prompt = model.encode_prompts({{Box(0.3, 0.3, 0.4, 0.4), Polarity::positive, img.key()}}, pyramids);
  CHECK(model.decode(prompt, a).scores == loaded.decode(prompt, b).scores);

  // Bump the container version.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = kCheckpointFormatVersion + 1;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(Model::load(path), CheckpointError);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(Model::load(dir / "junk.ckpt"), CheckpointError);
  CHECK_THROWS_AS(Model::load(dir / "absent.ckpt"), CheckpointError);
  std::filesystem::remove_all(dir);
}
