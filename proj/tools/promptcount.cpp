#include <torch/torch.h>

#include <CLI11.hpp>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "promptcount/config_json.hpp"
#include "promptcount/dataset.hpp"
#include "promptcount/evalbench.hpp"
#include "promptcount/rng.hpp"
#include "promptcount/service.hpp"
#include "promptcount/training.hpp"

using namespace promptcount;

namespace {

int run_train(const std::string& config_path, const std::string& out_dir, bool deterministic, int log_every,
              const std::string& init_checkpoint) {
  TrainConfig cfg = load_train_config(config_path);
  if (!init_checkpoint.empty()) cfg.init_checkpoint = init_checkpoint;
  auto t0 = std::chrono::steady_clock::now();
  double window = 0.0;
  int n = 0;
  TrainResult r = train(cfg, out_dir, deterministic, [&](const CurvePoint& p) {
    window += p.objective;
    ++n;
    if (p.step % log_every == 0 || p.step == cfg.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("step %6d  objective %.4f  cls %.4f  l1 %.4f  giou %.4f  (%.0fs)\n", p.step, window / n, p.loss.cls,
                  p.loss.l1, p.loss.giou, secs);
      std::fflush(stdout);
      window = 0.0;
      n = 0;
    }
  });
  std::printf("checkpoint: %s\nloss curve: %s\nwall time: %.0fs\n", r.checkpoint.c_str(), r.curve_csv.c_str(),
              r.seconds);
  return 0;
}

int run_eval(const std::string& dataset_dir, const std::string& checkpoint, int shots, std::optional<double> threshold,
             std::optional<double> nms_threshold, const std::string& out_dir) {
  auto model = std::make_shared<const Model>(Model::load(checkpoint));
  const Dataset ds = load_dataset(dataset_dir);
  ModelBackend backend(model, nms_threshold);
  const MetricsReport report =
      k_shot_eval(ds, backend, shots, threshold.value_or(model->config().score_threshold), checkpoint);
  emit_report(report, out_dir);
  std::cout << summary_table(report);
  return 0;
}

int run_generate(const std::string& out_dir, const std::string& config_path, int count, std::uint64_t seed,
                 std::size_t min_instances, const std::string& name) {
  SceneConfig cfg;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("cannot read " + config_path);
    cfg = scene_config_from_json(nlohmann::json::parse(f));
  }
  std::vector<Scene> scenes;
  for (int i = 0; i < count; ++i) {
    SceneConfig c = cfg;
    c.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    scenes.push_back(generate_scene(c));
  }
  const Dataset ds = filter_min_instances(make_dataset(name, std::move(scenes)), min_instances);
  save_dataset(ds, out_dir);
  std::printf("wrote %zu scenes to %s\n", ds.records.size(), out_dir.c_str());
  return 0;
}

Service* g_service = nullptr;

int run_serve(const std::string& checkpoint, const std::string& host, int port, const ServiceOptions& opts) {
  auto model = std::make_shared<const Model>(Model::load(checkpoint));
  Service service(model, opts);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::printf("serving on %s:%d\n", host.c_str(), port);
  std::fflush(stdout);
  if (!service.listen(host, port)) {
    std::cerr << "error: cannot listen on " << host << ':' << port << '\n';
    return 1;
  }
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive prompt-based object counting"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Intra-op compute threads")->check(CLI::PositiveNumber);

  std::string config_path, out_dir, init_checkpoint;
  bool deterministic = false;
  int log_every = 50;
  auto* train_cmd = app.add_subcommand("train", "Train a model on synthetic scenes");
  train_cmd->add_option("--config", config_path, "JSON config (train/model/scene sections)")->required();
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_flag("--deterministic", deterministic, "Generate batches serially for reproducible runs");
  train_cmd->add_option("--log-every", log_every, "Print progress every N steps")->check(CLI::PositiveNumber);
  train_cmd->add_option("--init-checkpoint", init_checkpoint, "Fine-tune from this checkpoint (overrides the config)");

  std::string dataset_dir, checkpoint;
  int shots = 1;
  std::optional<double> threshold, nms_threshold;
  auto* eval_cmd = app.add_subcommand("eval", "k-shot counting evaluation on a dataset");
  eval_cmd->add_option("--dataset", dataset_dir, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--shots", shots, "Exemplars per image")->check(CLI::IsMember({1, 2, 3}));
  eval_cmd->add_option("--threshold", threshold, "Score threshold (default from checkpoint)")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--nms", nms_threshold, "Enable duplicate suppression at this IoU")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--out", out_dir, "Report directory")->required();

  std::string host = "127.0.0.1";
  int port = 8080;
  ServiceOptions service_opts;
  double max_upload_mb = 16.0;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP counting service");
  serve_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--threshold", service_opts.threshold, "Default session threshold")->check(CLI::Range(0.0, 1.0));
  serve_cmd->add_option("--nms", service_opts.nms_threshold, "Enable duplicate suppression at this IoU")
      ->check(CLI::Range(0.0, 1.0));
  serve_cmd->add_option("--cors-origin", service_opts.cors_origin, "Allowed browser origin");
  serve_cmd->add_option("--max-upload-mb", max_upload_mb, "Upload size limit")->check(CLI::PositiveNumber);
  serve_cmd->add_flag("--debug", service_opts.debug_endpoints, "Expose GET /sessions/{id}/debug");

  int count = 100;
  std::uint64_t seed = 0;
  std::size_t min_instances = 0;
  std::string scene_config, name = "synthetic";
  auto* gen_cmd = app.add_subcommand("generate", "Write a synthetic dataset");
  gen_cmd->add_option("--out", out_dir, "Dataset directory")->required();
  gen_cmd->add_option("--scene-config", scene_config, "JSON scene config");
  gen_cmd->add_option("--count", count, "Number of scenes")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", seed, "Master seed");
  gen_cmd->add_option("--min-instances", min_instances, "Drop scenes with fewer targets");
  gen_cmd->add_option("--name", name, "Dataset name");

  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(threads);
  try {
    if (*train_cmd) return run_train(config_path, out_dir, deterministic, log_every, init_checkpoint);
    if (*eval_cmd) return run_eval(dataset_dir, checkpoint, shots, threshold, nms_threshold, out_dir);
    if (*gen_cmd) return run_generate(out_dir, scene_config, count, seed, min_instances, name);
    if (*serve_cmd) {
      service_opts.max_upload_bytes = static_cast<std::size_t>(max_upload_mb * (1 << 20));
      return run_serve(checkpoint, host, port, service_opts);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
