#pragma once

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "osar/errors.hpp"
#include "osar/image.hpp"
#include "osar/image_io.hpp"
#include "osar/patch.hpp"
#include "osar/pipeline.hpp"

// after Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro that
// collides with Eigen parameter names
#include <httplib.h>

// HTTP API used by the annotation UI. Uploads, ROI sets, and runs live under
// the data directory:
//
//   images/<image_id>/{image.<fmt>, meta.json, rois.json}
//   runs/<run_id>/{config.json, record.json, output.<fmt>, attention1.png, attention2.png}
//
// Runs execute on a fixed pool of worker threads (one by default), and an
// image never has more than one queued or running run.

namespace osar {

struct ServiceOptions {
  std::filesystem::path data_dir = "data";
  std::size_t workers = 1;
  /// Base configuration that per-run overrides are applied to.
  PipelineConfig base_config{};
};

class Service {
 public:
  explicit Service(ServiceOptions options) : opt_(std::move(options)) {
    if (opt_.workers == 0) throw ContractError("service: need at least one worker");
    std::filesystem::create_directories(opt_.data_dir / "images");
    std::filesystem::create_directories(opt_.data_dir / "runs");
    next_image_ = next_free_index(opt_.data_dir / "images", 'i');
    next_run_ = next_free_index(opt_.data_dir / "runs", 'r');
    for (std::size_t i = 0; i < opt_.workers; ++i) workers_.emplace_back([this] { work(); });
  }

  ~Service() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    wake_.notify_all();
    for (auto& t : workers_) t.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void mount(httplib::Server& server) {
    server.set_payload_max_length(std::size_t{512} << 20);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        error(res, 500, e.what());
      }
    });
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.Post("/api/images", [this](const auto& req, auto& res) { upload(req, res); });
    server.Get(R"(/api/images/([A-Za-z0-9]+)/pixels)", [this](const auto& req, auto& res) { pixels(req, res); });
    server.Put(R"(/api/images/([A-Za-z0-9]+)/rois)", [this](const auto& req, auto& res) { put_rois(req, res); });
    server.Get(R"(/api/images/([A-Za-z0-9]+)/rois)", [this](const auto& req, auto& res) { get_rois(req, res); });
    server.Post(R"(/api/images/([A-Za-z0-9]+)/runs)", [this](const auto& req, auto& res) { start_run(req, res); });
    server.Get(R"(/api/runs/([A-Za-z0-9]+))", [this](const auto& req, auto& res) { run_status(req, res); });
    server.Get(R"(/api/runs/([A-Za-z0-9]+)/output\.png)", [this](const auto& req, auto& res) { run_output(req, res); });
    server.Get(R"(/api/runs/([A-Za-z0-9]+)/attention/([12])\.png)",
               [this](const auto& req, auto& res) { run_attention(req, res); });
  }

  /// Blocks until no run is queued or running. For tests and shutdown.
  void wait_idle() {
    std::unique_lock lock(mutex_);
    idle_.wait(lock, [this] { return queue_.empty() && busy_ == 0; });
  }

 private:
  struct RunState {
    std::string image_id;
    std::string status = "queued";
    std::string stage;
    std::vector<double> loss_history;
    nlohmann::json metrics = nlohmann::json::array();
    std::string error;
    PipelineConfig config;
  };

  static void error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
  }

  static void json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static std::size_t next_free_index(const std::filesystem::path& dir, char prefix) {
    std::size_t next = 1;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.size() > 1 && name[0] == prefix)
        next = std::max<std::size_t>(next, std::strtoull(name.c_str() + 1, nullptr, 10) + 1);
    }
    return next;
  }

  static std::string make_id(char prefix, std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%06zu", prefix, n);
    return buf;
  }

  std::filesystem::path image_dir(const std::string& id) const { return opt_.data_dir / "images" / id; }
  std::filesystem::path run_dir(const std::string& id) const { return opt_.data_dir / "runs" / id; }

  struct StoredImage {
    std::filesystem::path path;
    ImageFormat format;
    std::size_t width, height;
  };

  std::optional<StoredImage> find_image(const std::string& id) const {
    const auto meta_path = image_dir(id) / "meta.json";
    if (!std::filesystem::exists(meta_path)) return std::nullopt;
    const auto meta = read_json_file(meta_path);
    const ImageFormat f = parse_format(meta.at("format").get<std::string>());
    return StoredImage{image_dir(id) / ("image." + format_name(f)), f, meta.at("width").get<std::size_t>(),
                       meta.at("height").get<std::size_t>()};
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("format")) return error(res, 400, "missing format query parameter (png, pgm, or f32)");
    ImageFormat fmt;
    Image image;
    try {
      fmt = parse_format(req.get_param_value("format"));
      const std::vector<unsigned char> bytes(req.body.begin(), req.body.end());
      if (fmt == ImageFormat::raw_f32) {
        if (!req.has_param("width") || !req.has_param("height"))
          return error(res, 400, "f32 uploads need width and height query parameters");
        image = decode_raw(bytes, std::stoul(req.get_param_value("width")), std::stoul(req.get_param_value("height")));
      } else {
        image = fmt == ImageFormat::png8 ? decode_png(bytes) : decode_pgm(bytes);
      }
    } catch (const std::exception& e) {
      return error(res, 400, e.what());
    }
    if (image.width < kPatchSize || image.height < kPatchSize) return error(res, 400, "image is smaller than 32x32");

    std::string id;
    {
      std::lock_guard lock(mutex_);
      id = make_id('i', next_image_++);
    }
    std::filesystem::create_directories(image_dir(id));
    save_image(image, image_dir(id) / ("image." + format_name(fmt)), fmt);
    write_json_atomic(image_dir(id) / "meta.json",
                      {{"format", format_name(fmt)}, {"width", image.width}, {"height", image.height}});
    json(res, 201, {{"image_id", id}, {"width", image.width}, {"height", image.height}});
  }

  /// 8-bit preview, min/max stretched. `scale=k` box-averages k x k blocks.
  void pixels(const httplib::Request& req, httplib::Response& res) {
    const auto stored = find_image(req.matches[1]);
    if (!stored) return error(res, 404, "unknown image");
    std::size_t k = 1;
    if (req.has_param("scale")) {
      try {
        k = std::stoul(req.get_param_value("scale"));
      } catch (const std::exception&) {
        k = 0;
      }
      if (k == 0 || k > std::min(stored->width, stored->height))
        return error(res, 400, "scale must be a positive integer no larger than the image");
    }
    const Image n = normalize(load_image(stored->path, stored->format));
    const std::size_t w = n.width / k, h = n.height / k;
    std::vector<double> out(w * h);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t i = 0; i < k; ++i) s += n(x * k + i, y * k + j);
        out[y * w + x] = s / static_cast<double>(k * k);
      }
    const auto png = encode_unit_png(w, h, out);
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }

  void put_rois(const httplib::Request& req, httplib::Response& res) {
    const auto stored = find_image(req.matches[1]);
    if (!stored) return error(res, 404, "unknown image");
    std::vector<Roi> rois;
    try {
      rois = parse_rois(req.body);
      for (const Roi& r : rois) check_roi_fits(r, stored->width, stored->height);
    } catch (const std::exception& e) {
      return error(res, 400, e.what());
    }
    write_json_atomic(image_dir(req.matches[1]) / "rois.json", rois_to_json(rois));
    res.status = 204;
  }

  void get_rois(const httplib::Request& req, httplib::Response& res) {
    if (!find_image(req.matches[1])) return error(res, 404, "unknown image");
    const auto path = image_dir(req.matches[1]) / "rois.json";
    json(res, 200, std::filesystem::exists(path) ? read_json_file(path) : rois_to_json({}));
  }

  void start_run(const httplib::Request& req, httplib::Response& res) {
    const std::string image_id = req.matches[1];
    if (!find_image(image_id)) return error(res, 404, "unknown image");
    const auto roi_path = image_dir(image_id) / "rois.json";
    if (!std::filesystem::exists(roi_path)) return error(res, 400, "no ROIs saved for this image");
    PipelineConfig config;
    try {
      const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
      config = apply_config_json(opt_.base_config, body);
    } catch (const std::exception& e) {
      return error(res, 400, e.what());
    }

    std::string run_id;
    {
      std::lock_guard lock(mutex_);
      for (const auto& [id, state] : runs_)
        if (state.image_id == image_id && (state.status == "queued" || state.status == "running"))
          return error(res, 409, "run " + id + " is still active on this image");
      run_id = make_id('r', next_run_++);
      RunState state;
      state.image_id = image_id;
      state.config = config;
      runs_.emplace(run_id, std::move(state));
      queue_.push_back(run_id);
    }
    wake_.notify_one();
    json(res, 202, {{"run_id", run_id}});
  }

  static nlohmann::json status_json(const std::string& run_id, const RunState& s) {
    nlohmann::json j = {{"run_id", run_id},          {"image_id", s.image_id}, {"status", s.status},
                        {"stage", s.stage},          {"loss_history", s.loss_history},
                        {"metrics", s.metrics}};
    if (!s.error.empty()) j["error"] = s.error;
    return j;
  }

  /// In-memory state, or the persisted record of a run from an earlier process.
  std::optional<RunState> lookup_run(const std::string& run_id) {
    {
      std::lock_guard lock(mutex_);
      if (auto it = runs_.find(run_id); it != runs_.end()) return it->second;
    }
    const auto dir = run_dir(run_id);
    if (!std::filesystem::exists(dir / "record.json")) return std::nullopt;
    const RunRecord r = load_record(dir);
    RunState s;
    s.status = r.status;
    s.stage = r.status == "error" ? r.failed_stage : "done";
    s.loss_history = r.loss_history;
    s.metrics = record_to_json(r)["metrics"];
    s.error = r.error;
    s.config = r.config;
    return s;
  }

  void run_status(const httplib::Request& req, httplib::Response& res) {
    const auto s = lookup_run(req.matches[1]);
    if (!s) return error(res, 404, "unknown run");
    json(res, 200, status_json(req.matches[1], *s));
  }

  void send_file_png(httplib::Response& res, const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
  }

  void run_output(const httplib::Request& req, httplib::Response& res) {
    const auto s = lookup_run(req.matches[1]);
    if (!s) return error(res, 404, "unknown run");
    if (s->status != "done") return error(res, 404, "run has no output yet (status " + s->status + ")");
    const RunRecord r = load_record(run_dir(req.matches[1]));
    const Image out = load_image(run_dir(req.matches[1]) / r.output_path, parse_format(r.input_format));
    const Image n = normalize(out);
    const auto png = encode_unit_png(n.width, n.height, n.pixels);
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }

  void run_attention(const httplib::Request& req, httplib::Response& res) {
    const auto s = lookup_run(req.matches[1]);
    if (!s) return error(res, 404, "unknown run");
    if (s->status != "done") return error(res, 404, "run has no attention maps yet (status " + s->status + ")");
    send_file_png(res, run_dir(req.matches[1]) / ("attention" + std::string(req.matches[2]) + ".png"));
  }

  void work() {
    for (;;) {
      std::string run_id;
      {
        std::unique_lock lock(mutex_);
        wake_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        run_id = queue_.front();
        queue_.pop_front();
        ++busy_;
      }
      execute(run_id);
      {
        std::lock_guard lock(mutex_);
        --busy_;
      }
      idle_.notify_all();
    }
  }

  void execute(const std::string& run_id) {
    std::string image_id;
    PipelineConfig config;
    {
      std::lock_guard lock(mutex_);
      RunState& s = runs_.at(run_id);
      s.status = "running";
      image_id = s.image_id;
      config = s.config;
    }
    PipelineObserver observer{[&](const std::string& stage) {
                                std::lock_guard lock(mutex_);
                                runs_.at(run_id).stage = stage;
                              },
                              [&](std::size_t, double loss) {
                                std::lock_guard lock(mutex_);
                                runs_.at(run_id).loss_history.push_back(loss);
                              }};
    try {
      const auto stored = find_image(image_id);
      const auto rois = load_rois(image_dir(image_id) / "rois.json");
      const RunRecord record = run_pipeline(stored->path, rois, config, run_dir(run_id), observer, stored->format);
      std::lock_guard lock(mutex_);
      RunState& s = runs_.at(run_id);
      s.metrics = record_to_json(record)["metrics"];
      s.loss_history = record.loss_history;
      s.stage = "done";
      s.status = "done";
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex_);
      RunState& s = runs_.at(run_id);
      s.status = "error";
      s.error = e.what();
    }
  }

  ServiceOptions opt_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable idle_;
  std::map<std::string, RunState> runs_;
  std::deque<std::string> queue_;
  std::size_t next_image_ = 1;
  std::size_t next_run_ = 1;
  std::size_t busy_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace osar
