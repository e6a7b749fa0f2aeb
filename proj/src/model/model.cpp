#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <mutex>

#include "model/networks.hpp"
#include "promptcount/config_json.hpp"

namespace promptcount {

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'C', 'N', 'T', 'C', 'K', 'P', 'T'};

// torch's default generator is process-global; serialize seeded construction.
std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

std::vector<float> to_vector(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  return std::vector<float>(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
}

std::vector<torch::Tensor> level_tensors(const FeaturePyramid& p) {
  std::vector<torch::Tensor> out;
  for (const auto& level : p.levels) out.push_back(detail::pyramid_level_tensor(level));
  return out;
}

std::vector<float> normalized_mean(const std::vector<const std::vector<float>*>& vs) {
  std::vector<double> acc(vs.front()->size(), 0.0);
  for (const auto* v : vs) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*v)[i];
  }
  double norm = 0.0;
  for (double& a : acc) {
    a /= static_cast<double>(vs.size());
    norm += a * a;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) throw PromptError("prompts of one polarity cancel out");
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / norm);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) {
  config.validate();
  std::lock_guard lock(init_mutex());
  torch::manual_seed(seed);
  auto state = std::make_unique<detail::ModelState>();
  state->config = config;
  state->net = detail::Network(config);
  state->net->eval();
  state_ = std::move(state);
}

Model::Model(std::unique_ptr<detail::ModelState> state) : state_(std::move(state)) {}
Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

const ModelConfig& Model::config() const { return state_->config; }

FeaturePyramid Model::encode_image(const ImageInput& img) const {
  torch::InferenceMode guard;
  const auto& cfg = state_->config;
  FeaturePyramid out;
  out.image_key = img.key();
  out.letterbox = Letterbox::fit(img.image().width, img.image().height, cfg.resolution);
  auto input = detail::image_tensor(img.image(), out.letterbox).unsqueeze(0);
  auto levels = state_->net->encode(input.to(state_->net->level_embed.dtype()));
  for (std::size_t l = 0; l < levels.size(); ++l) {
    FeatureLevel level;
    level.stride = kPyramidStrides[l];
    level.channels = static_cast<int>(levels[l].size(1));
    level.height = static_cast<int>(levels[l].size(2));
    level.width = static_cast<int>(levels[l].size(3));
    level.data = to_vector(levels[l][0]);
    out.levels.push_back(std::move(level));
  }
  return out;
}

std::vector<std::vector<float>> Model::encode_prompt_entries(const std::vector<PromptEntry>& prompts,
                                                             const PyramidMap& pyramids) const {
  torch::InferenceMode guard;
  auto& net = state_->net;
  std::map<std::string, std::vector<torch::Tensor>> cache;
  std::vector<std::vector<float>> out;
  for (const auto& entry : prompts) {
    auto it = pyramids.find(entry.source_key);
    if (it == pyramids.end() || it->second == nullptr) {
      throw MissingPyramidError("no encoded pyramid for image '" + entry.source_key + "'");
    }
    const FeaturePyramid& p = *it->second;
    if (p.levels.size() != 3 || p.levels[0].channels != state_->config.dim) {
      throw PromptError("pyramid for image '" + entry.source_key + "' does not match the model");
    }
    auto [slot, inserted] = cache.try_emplace(entry.source_key);
    if (inserted) slot->second = level_tensors(p);
    const Box b = p.letterbox.to_model(prompt_box(entry.geometry));
    auto boxes = torch::tensor({b.x_min(), b.y_min(), b.x_max(), b.y_max()}, torch::kFloat32).view({1, 4});
    auto v = net->embed_prompts(net->pool(slot->second, boxes, {0}));
    out.push_back(to_vector(v[0]));
  }
  return out;
}

PromptEmbedding Model::encode_prompts(const std::vector<PromptEntry>& prompts, const PyramidMap& pyramids) const {
  const bool any_positive = std::any_of(prompts.begin(), prompts.end(),
                                        [](const PromptEntry& e) { return e.polarity == Polarity::positive; });
  if (!any_positive) throw NoPositivePromptError();
  auto vectors = encode_prompt_entries(prompts, pyramids);
  std::vector<const std::vector<float>*> pos, neg;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    (prompts[i].polarity == Polarity::positive ? pos : neg).push_back(&vectors[i]);
  }
  PromptEmbedding out;
  out.positive = normalized_mean(pos);
  out.positive_count = pos.size();
  if (!neg.empty()) out.negative = normalized_mean(neg);
  out.negative_count = neg.size();
  return out;
}

DetectionSet Model::decode(const PromptEmbedding& prompt, const FeaturePyramid& target) const {
  const auto d = static_cast<std::size_t>(state_->config.dim);
  if (prompt.positive.size() != d) throw NoPositivePromptError();
  if (prompt.negative && prompt.negative->size() != d) throw PromptError("negative vector has the wrong length");
  torch::InferenceMode guard;
  auto levels = level_tensors(target);
  auto positive = torch::tensor(prompt.positive, torch::kFloat32).view({1, -1});
  auto outs = state_->net->decode(levels, positive);
  auto boxes = outs.boxes.back()[0].to(torch::kFloat64).contiguous();
  auto embeddings = outs.embeddings.back()[0].contiguous();
  const double tau = outs.temperature.item<double>();
  auto box_acc = boxes.accessor<double, 2>();

  DetectionSet out;
  const auto nq = static_cast<std::size_t>(boxes.size(0));
  for (std::size_t q = 0; q < nq; ++q) {
    const auto i = static_cast<int64_t>(q);
    std::vector<float> emb = to_vector(embeddings[i]);
    const double sp = sigmoid(tau * dot(emb, prompt.positive));
    std::optional<double> sn;
    if (prompt.negative) {
      sn = sigmoid(tau * dot(emb, *prompt.negative));
      out.negative_scores.push_back(*sn);
    }
    out.positive_scores.push_back(sp);
    out.scores.push_back(suppressed_score(sp, sn));
    const double cx = box_acc[i][0], cy = box_acc[i][1], w = box_acc[i][2], h = box_acc[i][3];
    out.boxes.push_back(target.letterbox.to_image(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
    out.query_embeddings.push_back(std::move(emb));
  }
  return out;
}

// --- checkpoints ----------------------------------------------------------

void Model::save(const std::filesystem::path& path, std::uint64_t training_seed) const {
  nlohmann::json params = nlohmann::json::array();
  std::vector<torch::Tensor> tensors;
  std::uint64_t offset = 0;
  for (const auto& item : state_->net->named_parameters()) {
    auto t = item.value().detach().to(torch::kCPU, torch::kFloat32).contiguous();
    params.push_back({{"name", item.key()}, {"shape", t.sizes().vec()}, {"offset", offset}, {"numel", t.numel()}});
    offset += static_cast<std::uint64_t>(t.numel());
    tensors.push_back(t);
  }
  nlohmann::json header{{"format_version", kCheckpointFormatVersion},
                        {"model_config", to_json(state_->config)},
                        {"training_seed", training_seed},
                        {"parameters", params}};
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp.string());
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    f.write(reinterpret_cast<const char*>(&kCheckpointFormatVersion), sizeof(kCheckpointFormatVersion));
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
      f.write(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
    }
    if (!f) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<float> data;
  std::uint32_t version = 0;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_data) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  RawCheckpoint raw;
  std::uint64_t header_len = 0;
  if (!f.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  if (!f.read(reinterpret_cast<char*>(&raw.version), 4) || !f.read(reinterpret_cast<char*>(&header_len), 8)) {
    throw CheckpointError("truncated checkpoint header in " + path.string());
  }
  if (raw.version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(raw.version) + " is not supported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  if (header_len > (1u << 26)) throw CheckpointError("implausible checkpoint header length");
  std::string text(header_len, '\0');
  if (!f.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw CheckpointError("truncated checkpoint header in " + path.string());
  }
  try {
    raw.header = nlohmann::json::parse(text);
    if (raw.header.at("format_version").get<std::uint32_t>() != raw.version) {
      throw CheckpointError("checkpoint header version disagrees with container version");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (with_data) {
    const auto start = f.tellg();
    f.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(f.tellg() - start);
    f.seekg(start);
    if (bytes % 4 != 0) throw CheckpointError("checkpoint data is not a whole number of floats");
    raw.data.resize(bytes / 4);
    f.read(reinterpret_cast<char*>(raw.data.data()), static_cast<std::streamsize>(bytes));
  }
  return raw;
}

CheckpointInfo info_from(const RawCheckpoint& raw) {
  CheckpointInfo info;
  info.format_version = raw.version;
  try {
    info.config = model_config_from_json(raw.header.at("model_config"));
    info.training_seed = raw.header.at("training_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint model config invalid: ") + e.what());
  }
  return info;
}

}  // namespace

CheckpointInfo Model::read_checkpoint_info(const std::filesystem::path& path) {
  return info_from(read_raw(path, false));
}

Model Model::load(const std::filesystem::path& path) {
  RawCheckpoint raw = read_raw(path, true);
  CheckpointInfo info = info_from(raw);
  Model model(info.config, 0);
  auto params = model.state_->net->named_parameters();
  std::map<std::string, const nlohmann::json*> entries;
  try {
    for (const auto& e : raw.header.at("parameters")) entries[e.at("name").get<std::string>()] = &e;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed parameter table: ") + e.what());
  }
  if (entries.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model expects " +
                          std::to_string(params.size()));
  }
  torch::NoGradGuard no_grad;
  for (auto& item : params) {
    auto it = entries.find(item.key());
    if (it == entries.end()) throw CheckpointError("checkpoint is missing parameter " + item.key());
    const auto& e = *it->second;
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    if (shape != item.value().sizes().vec()) throw CheckpointError("shape mismatch for parameter " + item.key());
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto numel = e.at("numel").get<std::uint64_t>();
    if (numel != static_cast<std::uint64_t>(item.value().numel()) || offset + numel > raw.data.size()) {
      throw CheckpointError("parameter " + item.key() + " lies outside the data section");
    }
    item.value().copy_(torch::from_blob(raw.data.data() + offset, shape, torch::kFloat32));
  }
  return model;
}

}  // namespace promptcount
