// osar: command-line front end for the single-image artifact reduction pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 I/O or file format error,
// 3 no artifact patches detected, 64 usage error.

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <optional>
#include <string>

#include "osar/errors.hpp"
#include "osar/idsn.hpp"
#include "osar/image_io.hpp"
#include "osar/metrics.hpp"
#include "osar/patch.hpp"
#include "osar/pipeline.hpp"
#include "osar/platform.hpp"
#include "osar/service.hpp"
#include "osar/synthetic.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitIo = 2;
constexpr int kExitNoArtifacts = 3;
constexpr int kExitUsage = 64;

struct PipelineArgs {
  std::string image;
  std::string rois;
  std::string config;
  std::string profile = "default";
  std::optional<std::uint64_t> seed;
};

void add_pipeline_args(CLI::App* cmd, PipelineArgs& a) {
  cmd->add_option("--image", a.image, "input image (.png, .pgm, .f32)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--rois", a.rois, "ROI JSON file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--config", a.config, "JSON file with configuration overrides")->check(CLI::ExistingFile);
  cmd->add_option("--profile", a.profile, "base configuration")->check(CLI::IsMember(osar::profile_names()));
  cmd->add_option("--seed", a.seed, "random seed");
}

osar::PipelineConfig resolve_config(const PipelineArgs& a) {
  osar::PipelineConfig c = osar::make_profile(a.profile);
  if (!a.config.empty()) c = osar::apply_config_json(c, osar::read_json_file(a.config));
  if (a.seed) c.seed = *a.seed;
  return c;
}

std::string default_run_dir() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[64];
  std::strftime(buf, sizeof buf, "runs/%Y%m%d-%H%M%S", std::localtime(&now));
  return buf;
}

/// Trains the classifier the same way the pipeline does and labels the grid.
struct Classified {
  osar::Image input;
  osar::Image normalized;
  std::vector<osar::Patch> grid;
  std::vector<osar::PatchLabel> labels;
  double accuracy;
};

Classified classify_image(const PipelineArgs& a, const osar::PipelineConfig& c, osar::Rng& rng) {
  Classified out;
  out.input = osar::load_image(a.image);
  const auto rois = osar::load_rois(a.rois);
  osar::validate_rois(rois, out.input);
  if (std::none_of(rois.begin(), rois.end(), [](const osar::Roi& r) { return r.label == osar::PatchLabel::artifact; }))
    throw osar::NoArtifactPatchesError();
  out.normalized = osar::normalize(out.input);
  const auto samples = osar::augment_rois(rois, out.normalized, rng, c.augment_per_class);
  osar::IdsnTrainOptions opt;
  opt.max_epochs = c.idsn_max_epochs;
  opt.patience = c.idsn_patience;
  auto trained = osar::train_idsn<float>(samples, rng, opt);
  out.accuracy = trained.report.heldout_accuracy;
  out.grid = osar::slice_patches(out.normalized, c.classify_stride);
  out.labels = osar::classify_patches(trained.model, out.grid);
  return out;
}

int run_denoise(const PipelineArgs& a, const std::string& out_dir, bool no_attention) {
  osar::PipelineConfig c = resolve_config(a);
  if (no_attention) c.attention_enabled = false;
  const std::string dir = out_dir.empty() ? default_run_dir() : out_dir;
  osar::PipelineObserver observer{
      [](const std::string& stage) { std::cerr << "[osar] stage " << stage << '\n'; },
      [](std::size_t epoch, double loss) { std::cerr << "[osar] epoch " << epoch + 1 << " loss " << loss << '\n'; }};
  const osar::RunRecord r = osar::run_pipeline(a.image, a.rois, c, dir, observer);
  std::cout << nlohmann::json{{"run_dir", dir},
                              {"output", (std::filesystem::path(dir) / r.output_path).string()},
                              {"idsn_accuracy", r.idsn_accuracy},
                              {"loss_history", r.loss_history},
                              {"metrics", osar::record_to_json(r)["metrics"]}}
                   .dump(2)
            << '\n';
  return 0;
}

int run_classify(const PipelineArgs& a, const std::string& out) {
  const osar::PipelineConfig c = resolve_config(a);
  osar::Rng rng(c.seed);
  const Classified k = classify_image(a, c, rng);
  std::vector<double> map(k.input.size(), 0.0);
  std::size_t artifact = 0;
  for (std::size_t i = 0; i < k.grid.size(); ++i) {
    if (k.labels[i] != osar::PatchLabel::artifact) continue;
    ++artifact;
    for (std::size_t y = 0; y < osar::kPatchSize; ++y)
      for (std::size_t x = 0; x < osar::kPatchSize; ++x) map[(k.grid[i].y + y) * k.input.width + k.grid[i].x + x] = 1.0;
  }
  const auto png = osar::encode_unit_png(k.input.width, k.input.height, map);
  osar::detail::write_file(out, png.data(), png.size());
  std::cout << nlohmann::json{{"patches", k.grid.size()}, {"artifact", artifact}, {"idsn_accuracy", k.accuracy}}.dump(2)
            << '\n';
  return 0;
}

int run_synth(const PipelineArgs& a, std::size_t count, const std::string& out) {
  osar::PipelineConfig c = resolve_config(a);
  c.pair_count = count;
  osar::validate_config(c);
  osar::Rng rng(c.seed);
  const Classified k = classify_image(a, c, rng);
  std::vector<osar::ArtifactPattern> patterns;
  for (std::size_t i = 0; i < k.grid.size(); ++i)
    if (k.labels[i] == osar::PatchLabel::artifact) patterns.push_back(osar::extract_artifact_pattern(k.grid[i]));
  const auto pool = osar::slice_patches(k.normalized, c.synthesis_stride);
  const auto pairs = osar::synthesize_pairs(patterns, pool, {c.pair_count, c.identity_fraction}, rng);
  osar::write_pairs(out, pairs);
  const auto identity = std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.is_identity; });
  std::cout << nlohmann::json{{"pairs", pairs.size()}, {"identity", identity}, {"patterns", patterns.size()}}.dump(2)
            << '\n';
  return 0;
}

int run_metrics(const std::string& image_path, const std::string& region_text, const std::string& baseline_path) {
  const osar::Image image = osar::load_image(image_path);
  const osar::Region region = osar::parse_region(region_text);
  osar::validate_region(region, image);
  const osar::Image baseline = baseline_path.empty() ? image : osar::load_image(baseline_path);
  if (baseline.width != image.width || baseline.height != image.height)
    throw osar::DimensionError("baseline and image differ in size");
  std::cout << osar::metrics_to_json(osar::compare(baseline, image, region)).dump(2) << '\n';
  return 0;
}

httplib::Server* g_server = nullptr;

int run_serve(const std::string& host, int port, std::string data_dir, std::size_t workers, const std::string& profile) {
  if (const char* env = std::getenv("OSAR_DATA_DIR"); env && *env) data_dir = env;
  osar::Service service({data_dir, workers, osar::make_profile(profile)});
  httplib::Server server;
  service.mount(server);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cerr << "[osar] serving " << data_dir << " on http://" << host << ':' << port << '\n';
  if (!server.listen(host, port)) {
    std::cerr << "osar: cannot listen on " << host << ':' << port << '\n';
    return kExitIo;
  }
  return 0;
}

int run_phantom(const std::string& out_dir, std::uint64_t seed) {
  const osar::Phantom p = osar::make_phantom(seed);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  osar::save_image(p.noisy, dir / "phantom.f32");
  osar::save_image(p.clean, dir / "phantom_clean.f32");
  osar::write_json_atomic(dir / "rois.json", osar::rois_to_json(p.rois));
  osar::write_json_atomic(dir / "eval_region.json", osar::region_to_json(p.evaluation));
  const auto& r = p.evaluation;
  std::cout << "wrote " << (dir / "phantom.f32").string() << ", rois.json; evaluation region " << r.x << ',' << r.y
            << ',' << r.width << ',' << r.height << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  osar::tune_allocator();
  CLI::App app{"Single-image artifact reduction with self-supervised training"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  PipelineArgs args;
  std::string out;
  bool no_attention = false;
  std::size_t count = 0;
  std::string image, region, baseline;
  std::string host = "127.0.0.1", data_dir = "data", profile = "default";
  int port = 8080;
  std::size_t workers = 1;
  std::uint64_t seed = 1;

  auto* denoise = app.add_subcommand("denoise", "train on the image and write the restored result");
  add_pipeline_args(denoise, args);
  denoise->add_option("--out", out, "run directory (default runs/<timestamp>)");
  denoise->add_flag("--no-attention", no_attention, "skip the attention block");

  auto* classify = app.add_subcommand("classify", "write the patch label map (A white, N black)");
  add_pipeline_args(classify, args);
  classify->add_option("--out", out, "output PNG")->required();

  auto* synth = app.add_subcommand("synth", "dump synthesized dirty/clean pairs");
  add_pipeline_args(synth, args);
  synth->add_option("--count", count, "number of pairs")->required()->check(CLI::PositiveNumber);
  synth->add_option("--out", out, "output pair file")->required();

  auto* metrics = app.add_subcommand("metrics", "SNR report for a region");
  metrics->add_option("--image", image, "image to measure")->required()->check(CLI::ExistingFile);
  metrics->add_option("--region", region, "x,y,w,h")->required();
  metrics->add_option("--baseline", baseline, "reference image for the deltas")->check(CLI::ExistingFile);

  auto* serve = app.add_subcommand("serve", "start the HTTP API");
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "bind address");
  serve->add_option("--data-dir", data_dir, "storage directory (OSAR_DATA_DIR overrides)");
  serve->add_option("--workers", workers, "concurrent pipeline runs")->check(CLI::PositiveNumber);
  serve->add_option("--profile", profile, "base configuration for runs")->check(CLI::IsMember(osar::profile_names()));

  auto* phantom = app.add_subcommand("phantom", "write the synthetic test phantom and its ROIs");
  phantom->add_option("--out", out, "output directory")->required();
  phantom->add_option("--seed", seed, "noise seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*denoise) return run_denoise(args, out, no_attention);
    if (*classify) return run_classify(args, out);
    if (*synth) return run_synth(args, count, out);
    if (*metrics) return run_metrics(image, region, baseline);
    if (*serve) return run_serve(host, port, data_dir, workers, profile);
    if (*phantom) return run_phantom(out, seed);
  } catch (const osar::NoArtifactPatchesError& e) {
    std::cerr << "osar: " << e.what() << '\n';
    return kExitNoArtifacts;
  } catch (const osar::IoError& e) {
    std::cerr << "osar: " << e.what() << '\n';
    return kExitIo;
  } catch (const osar::FormatError& e) {
    std::cerr << "osar: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "osar: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "osar: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
