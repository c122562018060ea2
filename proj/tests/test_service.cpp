#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "osar/service.hpp"
#include "support/scenes.hpp"
#include "support/tempdir.hpp"

using namespace osar;
using namespace osar::testing;
using nlohmann::json;

namespace {

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override { start(); }
  void TearDown() override { stop(); }

  void start() {
    service_ = std::make_unique<Service>(ServiceOptions{dir_.path(), 1, tiny_config()});
    server_ = std::make_unique<httplib::Server>();
    service_->mount(*server_);
    port_ = server_->bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60, 0);
  }

  void stop() {
    server_->stop();
    thread_.join();
    service_.reset();
  }

  std::string upload(const Image& img) {
    const auto bytes = encode_raw(img);
    const std::string path = "/api/images?format=f32&width=" + std::to_string(img.width) +
                             "&height=" + std::to_string(img.height);
    auto res = client_->Post(path, std::string(bytes.begin(), bytes.end()), "application/octet-stream");
    EXPECT_EQ(res->status, 201);
    const auto j = json::parse(res->body);
    EXPECT_EQ(j["width"], img.width);
    EXPECT_EQ(j["height"], img.height);
    return j["image_id"];
  }

  void put_rois(const std::string& id, const std::vector<Roi>& rois) {
    auto res = client_->Put("/api/images/" + id + "/rois", rois_to_json(rois).dump(), "application/json");
    ASSERT_EQ(res->status, 204);
  }

  json poll_until_terminal(const std::string& run_id, std::vector<std::string>* seen = nullptr) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::minutes(5);
    for (;;) {
      auto res = client_->Get("/api/runs/" + run_id);
      EXPECT_EQ(res->status, 200);
      json j = json::parse(res->body);
      if (seen && (seen->empty() || seen->back() != j["status"])) seen->push_back(j["status"]);
      if (j["status"] == "done" || j["status"] == "error") return j;
      if (std::chrono::steady_clock::now() > deadline) return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }

  TempDir dir_;
  std::unique_ptr<Service> service_;
  std::unique_ptr<httplib::Server> server_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, UploadAnnotateRunFetch) {
  const std::string id = upload(small_scene());
  put_rois(id, small_scene_rois());

  auto rois = client_->Get("/api/images/" + id + "/rois");
  ASSERT_EQ(rois->status, 200);
  EXPECT_EQ(rois_from_json(json::parse(rois->body)), small_scene_rois());

  auto preview = client_->Get("/api/images/" + id + "/pixels?scale=2");
  ASSERT_EQ(preview->status, 200);
  EXPECT_EQ(preview->get_header_value("Content-Type"), "image/png");
  const Image small = decode_png({preview->body.begin(), preview->body.end()});
  EXPECT_EQ(small.width, 32u);

  auto started = client_->Post("/api/images/" + id + "/runs", "{}", "application/json");
  ASSERT_EQ(started->status, 202);
  const std::string run_id = json::parse(started->body)["run_id"];

  std::vector<std::string> seen;
  const json status = poll_until_terminal(run_id, &seen);
  ASSERT_EQ(status["status"], "done") << status.dump();
  EXPECT_EQ(seen.back(), "done");
  const std::vector<std::string> order{"queued", "running", "done"};
  // every observed status appears in the queued -> running -> done order
  std::size_t k = 0;
  for (const auto& s : seen) {
    while (k < order.size() && order[k] != s) ++k;
    ASSERT_LT(k, order.size()) << "unexpected transition to " << s;
  }

  const RunRecord record = load_record(dir_ / ("runs/" + run_id));
  EXPECT_EQ(status["metrics"], record_to_json(record)["metrics"]);
  EXPECT_EQ(status["loss_history"].get<std::vector<double>>(), record.loss_history);

  auto out = client_->Get("/api/runs/" + run_id + "/output.png");
  ASSERT_EQ(out->status, 200);
  EXPECT_EQ(decode_png({out->body.begin(), out->body.end()}).width, 64u);
  for (const char* t : {"1", "2"}) {
    auto att = client_->Get("/api/runs/" + run_id + "/attention/" + t + ".png");
    ASSERT_EQ(att->status, 200);
    EXPECT_EQ(decode_png({att->body.begin(), att->body.end()}).height, 64u);
  }
}

TEST_F(ServiceTest, SecondConcurrentRunOnSameImageConflicts) {
  const std::string id = upload(small_scene());
  put_rois(id, small_scene_rois());
  auto first = client_->Post("/api/images/" + id + "/runs", "{}", "application/json");
  ASSERT_EQ(first->status, 202);
  auto second = client_->Post("/api/images/" + id + "/runs", "{}", "application/json");
  EXPECT_EQ(second->status, 409);

  const std::string other = upload(small_scene(2));
  put_rois(other, small_scene_rois());
  EXPECT_EQ(client_->Post("/api/images/" + other + "/runs", "{}", "application/json")->status, 202);

  service_->wait_idle();
  EXPECT_EQ(client_->Post("/api/images/" + id + "/runs", "{}", "application/json")->status, 202);
  service_->wait_idle();
}

TEST_F(ServiceTest, ValidationAndNotFound) {
  EXPECT_EQ(client_->Get("/api/runs/r999999")->status, 404);
  EXPECT_EQ(client_->Get("/api/images/i999999/pixels")->status, 404);
  EXPECT_EQ(client_->Put("/api/images/i999999/rois", "{}", "application/json")->status, 404);
  EXPECT_EQ(client_->Post("/api/images/i999999/runs", "{}", "application/json")->status, 404);
  EXPECT_EQ(client_->Get("/api/runs/r999999/output.png")->status, 404);

  const std::string id = upload(small_scene());
  auto bad = client_->Put("/api/images/" + id + "/rois", R"({"patch_size": 16, "rois": []})", "application/json");
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(client_->Put("/api/images/" + id + "/rois", "not json", "application/json")->status, 400);
  const std::string outside = rois_to_json({{40, 40, PatchLabel::artifact}}).dump();
  EXPECT_EQ(client_->Put("/api/images/" + id + "/rois", outside, "application/json")->status, 400);

  // no ROIs yet, then malformed overrides
  EXPECT_EQ(client_->Post("/api/images/" + id + "/runs", "{}", "application/json")->status, 400);
  put_rois(id, small_scene_rois());
  EXPECT_EQ(client_->Post("/api/images/" + id + "/runs", R"({"bogus": 1})", "application/json")->status, 400);

  EXPECT_EQ(client_->Post("/api/images", "xx", "application/octet-stream")->status, 400);
  EXPECT_EQ(client_->Post("/api/images?format=png", "not a png", "image/png")->status, 400);
  EXPECT_EQ(client_->Post("/api/images?format=f32&width=3&height=3", "abc", "application/octet-stream")->status, 400);
  EXPECT_EQ(client_->Get("/api/images/" + id + "/pixels?scale=0")->status, 400);
}

TEST_F(ServiceTest, FailedRunReportsError) {
  const std::string id = upload(small_scene());
  put_rois(id, {{32, 16, PatchLabel::normal}});
  auto started = client_->Post("/api/images/" + id + "/runs", "{}", "application/json");
  ASSERT_EQ(started->status, 202);
  const json status = poll_until_terminal(json::parse(started->body)["run_id"]);
  EXPECT_EQ(status["status"], "error");
  EXPECT_NE(status["error"].get<std::string>().find("no artifact patches"), std::string::npos);
  EXPECT_EQ(client_->Get("/api/runs/" + status["run_id"].get<std::string>() + "/output.png")->status, 404);
}

TEST_F(ServiceTest, FinishedRunsSurviveRestart) {
  const std::string id = upload(small_scene());
  put_rois(id, small_scene_rois());
  auto started = client_->Post("/api/images/" + id + "/runs", "{}", "application/json");
  const std::string run_id = json::parse(started->body)["run_id"];
  const json before = poll_until_terminal(run_id);
  ASSERT_EQ(before["status"], "done");

  stop();
  start();
  auto res = client_->Get("/api/runs/" + run_id);
  ASSERT_EQ(res->status, 200);
  const json after = json::parse(res->body);
  EXPECT_EQ(after["status"], "done");
  EXPECT_EQ(after["metrics"], before["metrics"]);
  // ids keep counting after a restart
  EXPECT_NE(upload(small_scene()), id);
}
