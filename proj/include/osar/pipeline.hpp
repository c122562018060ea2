#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "osar/aarn.hpp"
#include "osar/errors.hpp"
#include "osar/idsn.hpp"
#include "osar/image.hpp"
#include "osar/image_io.hpp"
#include "osar/metrics.hpp"
#include "osar/patch.hpp"
#include "osar/rng.hpp"

namespace osar {

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::size_t pair_count = 100000;
  double identity_fraction = 0.1;
  std::size_t augment_per_class = 500;
  std::size_t idsn_max_epochs = 30;
  std::size_t idsn_patience = 5;
  std::size_t batch_size = 270;
  std::size_t max_epochs = 4;
  double learning_rate = 0.0005;
  bool attention_enabled = true;
  std::size_t classify_stride = 32;
  std::size_t synthesis_stride = 16;
  double threshold = 0.01;
  std::size_t micro_batch = 30;
  bool dump_pairs = false;
  /// Where metrics are reported. Empty means the A-type ROI windows.
  std::vector<Region> eval_regions;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

inline const std::vector<std::string>& profile_names() {
  static const std::vector<std::string> names{"default", "desk"};
  return names;
}

/// "default" is the full-size setup; "desk" cuts synthesis to 5000 pairs and
/// augmentation to 200 per class so a run fits in a few minutes on one core.
inline PipelineConfig make_profile(const std::string& name) {
  PipelineConfig c;
  if (name == "default") return c;
  if (name == "desk") {
    c.pair_count = 5000;
    c.augment_per_class = 200;
    return c;
  }
  throw ContractError("unknown profile \"" + name + "\" (expected default or desk)");
}

inline void validate_config(const PipelineConfig& c) {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(std::string("config: ") + name + " must be positive");
  };
  positive(c.pair_count, "pair_count");
  positive(c.augment_per_class, "augment_per_class");
  positive(c.idsn_max_epochs, "idsn_max_epochs");
  positive(c.idsn_patience, "idsn_patience");
  positive(c.batch_size, "batch_size");
  positive(c.max_epochs, "max_epochs");
  positive(c.classify_stride, "classify_stride");
  positive(c.synthesis_stride, "synthesis_stride");
  positive(c.micro_batch, "micro_batch");
  if (!(c.learning_rate > 0)) throw ContractError("config: learning_rate must be positive");
  if (!(c.threshold > 0 && c.threshold < 1)) throw ContractError("config: threshold must lie in (0, 1)");
  if (!(c.identity_fraction >= 0 && c.identity_fraction <= 1))
    throw ContractError("config: identity_fraction must lie in [0, 1]");
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json regions = nlohmann::json::array();
  for (const Region& r : c.eval_regions) regions.push_back(region_to_json(r));
  return {{"seed", c.seed},
          {"pair_count", c.pair_count},
          {"identity_fraction", c.identity_fraction},
          {"augment_per_class", c.augment_per_class},
          {"idsn_max_epochs", c.idsn_max_epochs},
          {"idsn_patience", c.idsn_patience},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"learning_rate", c.learning_rate},
          {"attention_enabled", c.attention_enabled},
          {"classify_stride", c.classify_stride},
          {"synthesis_stride", c.synthesis_stride},
          {"threshold", c.threshold},
          {"micro_batch", c.micro_batch},
          {"dump_pairs", c.dump_pairs},
          {"eval_regions", regions}};
}

/// Applies the keys present in `j` on top of `base`. A "profile" key selects
/// the base first. Unknown keys are rejected so typos do not go unnoticed.
inline PipelineConfig apply_config_json(PipelineConfig base, const nlohmann::json& j) {
  if (j.is_null()) return base;
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  try {
    if (j.contains("profile")) {
      const std::uint64_t seed = base.seed;
      base = make_profile(j["profile"].get<std::string>());
      base.seed = seed;
    }
    for (const auto& [key, v] : j.items()) {
      if (key == "profile") continue;
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "pair_count") base.pair_count = v.get<std::size_t>();
      else if (key == "identity_fraction") base.identity_fraction = v.get<double>();
      else if (key == "augment_per_class") base.augment_per_class = v.get<std::size_t>();
      else if (key == "idsn_max_epochs") base.idsn_max_epochs = v.get<std::size_t>();
      else if (key == "idsn_patience") base.idsn_patience = v.get<std::size_t>();
      else if (key == "batch_size") base.batch_size = v.get<std::size_t>();
      else if (key == "max_epochs") base.max_epochs = v.get<std::size_t>();
      else if (key == "learning_rate") base.learning_rate = v.get<double>();
      else if (key == "attention_enabled") base.attention_enabled = v.get<bool>();
      else if (key == "classify_stride") base.classify_stride = v.get<std::size_t>();
      else if (key == "synthesis_stride") base.synthesis_stride = v.get<std::size_t>();
      else if (key == "threshold") base.threshold = v.get<double>();
      else if (key == "micro_batch") base.micro_batch = v.get<std::size_t>();
      else if (key == "dump_pairs") base.dump_pairs = v.get<bool>();
      else if (key == "eval_regions") {
        base.eval_regions.clear();
        for (const auto& r : v) base.eval_regions.push_back(region_from_json(r));
      } else
        throw FormatError("config: unknown key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  validate_config(base);
  return base;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) { return apply_config_json(PipelineConfig{}, j); }

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Writes next to the target and renames, so readers never see a partial file.
inline void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::string status = "done";  ///< "done" or "error"
  std::string error;
  std::string failed_stage;
  std::string input_image;
  std::string input_format;
  std::vector<Roi> rois;
  PipelineConfig config;
  double idsn_accuracy = 0.0;
  std::size_t idsn_epochs = 0;
  std::size_t artifact_patch_count = 0;
  std::size_t pool_size = 0;
  std::vector<double> loss_history;
  std::vector<MetricReport> metrics;
  std::string output_path;
  std::vector<std::string> attention_paths;
  std::vector<StageTiming> timings;
  double total_seconds = 0.0;
};

inline nlohmann::json record_to_json(const RunRecord& r) {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : r.metrics) metrics.push_back(metrics_to_json(m));
  nlohmann::json timings = nlohmann::json::array();
  for (const auto& t : r.timings) timings.push_back({{"stage", t.stage}, {"seconds", t.seconds}});
  nlohmann::json j = {{"run_id", r.run_id},
                      {"status", r.status},
                      {"input_image", r.input_image},
                      {"input_format", r.input_format},
                      {"rois", rois_to_json(r.rois)},
                      {"config", config_to_json(r.config)},
                      {"idsn_accuracy", r.idsn_accuracy},
                      {"idsn_epochs", r.idsn_epochs},
                      {"artifact_patch_count", r.artifact_patch_count},
                      {"pool_size", r.pool_size},
                      {"loss_history", r.loss_history},
                      {"metrics", metrics},
                      {"output_path", r.output_path},
                      {"attention_paths", r.attention_paths},
                      {"timings", timings},
                      {"total_seconds", r.total_seconds}};
  if (r.status == "error") {
    j["error"] = r.error;
    j["failed_stage"] = r.failed_stage;
  }
  return j;
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.status = j.at("status").get<std::string>();
    r.error = j.value("error", "");
    r.failed_stage = j.value("failed_stage", "");
    r.input_image = j.at("input_image").get<std::string>();
    r.input_format = j.at("input_format").get<std::string>();
    r.rois = rois_from_json(j.at("rois"));
    r.config = config_from_json(j.at("config"));
    r.idsn_accuracy = j.at("idsn_accuracy").get<double>();
    r.idsn_epochs = j.at("idsn_epochs").get<std::size_t>();
    r.artifact_patch_count = j.at("artifact_patch_count").get<std::size_t>();
    r.pool_size = j.at("pool_size").get<std::size_t>();
    r.loss_history = j.at("loss_history").get<std::vector<double>>();
    for (const auto& m : j.at("metrics")) r.metrics.push_back(metrics_from_json(m));
    r.output_path = j.at("output_path").get<std::string>();
    r.attention_paths = j.at("attention_paths").get<std::vector<std::string>>();
    for (const auto& t : j.at("timings")) r.timings.push_back({t.at("stage").get<std::string>(), t.at("seconds").get<double>()});
    r.total_seconds = j.at("total_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run record: ") + e.what());
  }
  return r;
}

/// Progress hooks; either may be empty. Called on the pipeline's thread.
struct PipelineObserver {
  std::function<void(const std::string& stage)> on_stage;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

inline constexpr const char* kPipelineStages[] = {"load",        "train_idsn", "classify", "synthesize",
                                                  "train_aarn",  "infer",      "persist"};

namespace detail {

class StageClock {
 public:
  StageClock(RunRecord& record, const PipelineObserver& observer) : record_(record), observer_(observer) {}

  void enter(const std::string& stage) {
    close();
    current_ = stage;
    started_ = Clock::now();
    if (observer_.on_stage) observer_.on_stage(stage);
  }

  void close() {
    if (current_.empty()) return;
    record_.timings.push_back({current_, seconds_since(started_)});
    current_.clear();
  }

  const std::string& current() const { return current_; }

 private:
  using Clock = std::chrono::steady_clock;
  static double seconds_since(Clock::time_point t) {
    return std::chrono::duration<double>(Clock::now() - t).count();
  }

  RunRecord& record_;
  const PipelineObserver& observer_;
  std::string current_;
  Clock::time_point started_;
};

}  // namespace detail

inline std::filesystem::path output_filename(ImageFormat f) {
  switch (f) {
    case ImageFormat::png8: return "output.png";
    case ImageFormat::pgm16: return "output.pgm";
    case ImageFormat::raw_f32: return "output.f32";
  }
  return "output.bin";
}

/// Default evaluation windows: one per A-type ROI.
inline std::vector<Region> default_eval_regions(const std::vector<Roi>& rois) {
  std::vector<Region> out;
  for (const Roi& r : rois)
    if (r.label == PatchLabel::artifact) out.push_back({r.x, r.y, kPatchSize, kPatchSize});
  return out;
}

/// Runs the full denoising pipeline on one image and persists everything under
/// `run_dir`: config.json up front, then output.<fmt>, attention1.png,
/// attention2.png, optionally pairs.bin, and finally record.json. A failing
/// stage still writes record.json (status "error") and rethrows.
inline RunRecord run_pipeline(const std::filesystem::path& image_path, const std::vector<Roi>& rois,
                              const PipelineConfig& config, const std::filesystem::path& run_dir,
                              const PipelineObserver& observer = {}, std::optional<ImageFormat> format = {}) {
  validate_config(config);
  std::filesystem::create_directories(run_dir);
  write_json_atomic(run_dir / "config.json", config_to_json(config));

  RunRecord record;
  record.run_id = run_dir.filename().string();
  record.input_image = image_path.string();
  record.rois = rois;
  record.config = config;

  const auto start = std::chrono::steady_clock::now();
  detail::StageClock clock(record, observer);
  try {
    clock.enter("load");
    const ImageFormat fmt = format ? *format : format_from_path(image_path);
    record.input_format = format_name(fmt);
    const Image input = load_image(image_path, fmt);
    validate_rois(rois, input);
    const bool has_a = std::any_of(rois.begin(), rois.end(), [](const Roi& r) { return r.label == PatchLabel::artifact; });
    const bool has_n = std::any_of(rois.begin(), rois.end(), [](const Roi& r) { return r.label == PatchLabel::normal; });
    if (!has_a) throw NoArtifactPatchesError();
    if (!has_n) throw PipelineError("at least one N-type ROI is required");
    const std::vector<Region> regions = config.eval_regions.empty() ? default_eval_regions(rois) : config.eval_regions;
    for (const Region& r : regions) validate_region(r, input);
    const Image normalized = normalize(input);
    Rng rng(config.seed);

    clock.enter("train_idsn");
    const auto samples = augment_rois(rois, normalized, rng, config.augment_per_class);
    IdsnTrainOptions idsn_opt;
    idsn_opt.max_epochs = config.idsn_max_epochs;
    idsn_opt.patience = config.idsn_patience;
    auto idsn = train_idsn<float>(samples, rng, idsn_opt);
    record.idsn_accuracy = idsn.report.heldout_accuracy;
    record.idsn_epochs = idsn.report.epochs_run;

    clock.enter("classify");
    const auto grid = slice_patches(normalized, config.classify_stride);
    const auto labels = classify_patches(idsn.model, grid);
    std::vector<ArtifactPattern> patterns;
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (labels[i] == PatchLabel::artifact) patterns.push_back(extract_artifact_pattern(grid[i]));
    record.artifact_patch_count = patterns.size();
    if (patterns.empty()) throw NoArtifactPatchesError();

    clock.enter("synthesize");
    const auto pool = slice_patches(normalized, config.synthesis_stride);
    record.pool_size = pool.size();
    const auto pairs =
        synthesize_pairs(patterns, pool, SynthesisOptions{config.pair_count, config.identity_fraction}, rng);
    if (config.dump_pairs) write_pairs(run_dir / "pairs.bin", pairs);

    clock.enter("train_aarn");
    auto model = AarnModel<float>::make(AarnArchitecture{}, rng);
    AarnTrainOptions aarn_opt;
    aarn_opt.batch_size = config.batch_size;
    aarn_opt.max_epochs = config.max_epochs;
    aarn_opt.learning_rate = config.learning_rate;
    aarn_opt.attention_enabled = config.attention_enabled;
    aarn_opt.threshold = static_cast<float>(config.threshold);
    aarn_opt.micro_batch = config.micro_batch;
    train_aarn(model, pairs, rng, aarn_opt, [&](std::size_t epoch, double loss) {
      record.loss_history.push_back(loss);
      if (observer.on_epoch) observer.on_epoch(epoch, loss);
    });

    clock.enter("infer");
    const InferenceResult result = infer(model, normalized, config.attention_enabled);

    clock.enter("persist");
    const auto out_path = run_dir / output_filename(fmt);
    save_image(result.denoised, out_path, fmt);
    const auto a1 = encode_unit_png(input.width, input.height, result.attention1.pixels);
    const auto a2 = encode_unit_png(input.width, input.height, result.attention2.pixels);
    detail::write_file(run_dir / "attention1.png", a1.data(), a1.size());
    detail::write_file(run_dir / "attention2.png", a2.data(), a2.size());
    record.output_path = out_path.filename().string();
    record.attention_paths = {"attention1.png", "attention2.png"};
    // Metrics come from the file as written so that re-measuring it later
    // gives the same numbers.
    const Image saved = load_image(out_path, fmt);
    for (const Region& r : regions) record.metrics.push_back(compare(input, saved, r));
    clock.close();
  } catch (const std::exception& e) {
    record.status = "error";
    record.error = e.what();
    record.failed_stage = clock.current();
    clock.close();
    record.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json_atomic(run_dir / "record.json", record_to_json(record));
    throw;
  }
  record.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json_atomic(run_dir / "record.json", record_to_json(record));
  return record;
}

inline RunRecord run_pipeline(const std::filesystem::path& image_path, const std::filesystem::path& roi_path,
                              const PipelineConfig& config, const std::filesystem::path& run_dir,
                              const PipelineObserver& observer = {}) {
  return run_pipeline(image_path, load_rois(roi_path), config, run_dir, observer);
}

inline RunRecord load_record(const std::filesystem::path& run_dir) {
  return record_from_json(read_json_file(run_dir / "record.json"));
}

}  // namespace osar
