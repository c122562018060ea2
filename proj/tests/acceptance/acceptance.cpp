// Acceptance run: one PASS/FAIL line per criterion P1-P9, nonzero exit if any fail.
//
//   osar_acceptance [--work-dir DIR] [--only P6,P7]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "osar/aarn.hpp"
#include "osar/idsn.hpp"
#include "osar/image_io.hpp"
#include "osar/metrics.hpp"
#include "osar/pipeline.hpp"
#include "osar/platform.hpp"
#include "osar/synthetic.hpp"
#include "support/gradcheck.hpp"

using namespace osar;
namespace fs = std::filesystem;
using osar::testing::check_gradients;
using osar::testing::random_tensor;
using osar::testing::random_tensor_away_from_zero;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail << (detail.tellp() > 0 ? "; " : "") << (ok ? "" : "FAILED ") << what;
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

fs::path g_work;

// ---------------------------------------------------------------------------

Outcome p1_gradients() {
  Outcome o;
  Rng rng(101);
  std::size_t total = 0;
  double worst = 0;
  auto run = [&](const std::string& name, std::vector<Tensor<double>*> params, const Shape& out_shape,
                 const std::function<Var(Tape<double>&)>& op, std::size_t max_coords = static_cast<std::size_t>(-1)) {
    const Tensor<double> target = random_tensor(out_shape, rng);
    auto loss = [&](bool backward) {
      Tape<double> tape;
      Var l = mse_loss(tape, op(tape), tape.constant(target));
      if (backward) tape.backward(l);
      return tape.value(l)[0];
    };
    const auto r = check_gradients(params, loss, rng, max_coords);
    total += r.checked;
    worst = std::max(worst, r.max_error);
    if (r.max_error > 1e-4) o.require(false, name + " error " + fmt(r.max_error));
  };

  for (std::size_t stride : {1u, 2u}) {
    Tensor<double> x = random_tensor({2, 2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const std::size_t n = (6 + 2 - 3) / stride + 1;
    run("conv2d", {&x, &k, &b}, {2, 3, n, n},
        [&](Tape<double>& t) { return conv2d(t, t.parameter(x), t.parameter(k), t.parameter(b), stride, 1); });
  }
  {
    Tensor<double> x = random_tensor({3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
    run("fully_connected", {&x, &w, &b}, {3, 4},
        [&](Tape<double>& t) { return fully_connected(t, t.parameter(x), t.parameter(w), t.parameter(b)); });
  }
  {
    Tensor<double> x = random_tensor_away_from_zero({2, 2, 4, 4}, rng), y = random_tensor({2, 1, 4, 4}, rng);
    run("relu", {&x}, {2, 2, 4, 4}, [&](Tape<double>& t) { return relu(t, t.parameter(x)); });
    run("sigmoid", {&x}, {2, 2, 4, 4}, [&](Tape<double>& t) { return sigmoid(t, t.parameter(x)); });
    run("upsample", {&x}, {2, 2, 8, 8}, [&](Tape<double>& t) { return upsample_nearest_2x(t, t.parameter(x)); });
    run("concat", {&x, &y}, {2, 3, 4, 4},
        [&](Tape<double>& t) { return concat_channels(t, t.parameter(x), t.parameter(y)); });
  }
  {
    Tensor<double> p = random_tensor({2, 1, 4, 4}, rng), q = random_tensor({2, 1, 4, 4}, rng);
    auto loss = [&](bool backward) {
      Tape<double> tape;
      Var l = mse_loss(tape, tape.parameter(p), tape.parameter(q));
      if (backward) tape.backward(l);
      return tape.value(l)[0];
    };
    const auto r = check_gradients({&p, &q}, loss, rng);
    total += r.checked;
    worst = std::max(worst, r.max_error);
    if (r.max_error > 1e-4) o.require(false, "mse_loss error " + fmt(r.max_error));
  }
  {
    Tensor<double> z = random_tensor({4, 2}, rng, -3, 3);
    const std::vector<int> labels{0, 1, 1, 0};
    auto loss = [&](bool backward) {
      Tape<double> tape;
      Var l = softmax_cross_entropy(tape, tape.parameter(z), std::span<const int>(labels));
      if (backward) tape.backward(l);
      return tape.value(l)[0];
    };
    const auto r = check_gradients({&z}, loss, rng);
    total += r.checked;
    worst = std::max(worst, r.max_error);
    if (r.max_error > 1e-4) o.require(false, "softmax_cross_entropy error " + fmt(r.max_error));
  }
  o.require(worst <= 1e-4, "ops: " + std::to_string(total) + " coords, max rel error " + fmt(worst, 3));

  // composed loss on a 4-channel network
  auto model = AarnModel<double>::make(AarnArchitecture::micro(4), rng);
  auto named = model.parameters();
  for (auto& [name, p] : named)
    if (name.ends_with(".bias"))
      for (double& v : p->data()) v = rng.uniform(-0.1, 0.1);
  const Tensor<double> x = random_tensor({2, 1, 32, 32}, rng, 0, 1);
  Tensor<double> m({2, 1, 32, 32});
  for (double& v : m.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const auto targets = multiscale_targets(random_tensor({2, 1, 32, 32}, rng, 0, 1));
  std::vector<bool> pattern;
  auto loss = [&](bool backward) {
    Tape<double> tape;
    const auto f = forward_aarn(model, tape, tape.constant(x));
    const std::array<Var, 3> t{tape.constant(targets[0]), tape.constant(targets[1]), tape.constant(targets[2])};
    Var l = total_loss<double>(tape, f, tape.constant(m), t).total;
    if (backward) tape.backward(l);
    pattern = osar::testing::zero_pattern(tape);
    return tape.value(l)[0];
  };
  const auto r = check_gradients(parameter_pointers(named), loss, rng, 300, 1e-3, [&] { return pattern; });
  o.require(r.checked >= 100 && r.max_error <= 1e-4,
            "total_loss: " + std::to_string(r.checked) + " coords, max rel error " + fmt(r.max_error, 3) + " (" +
                std::to_string(r.kinks) + " kink-crossing coords skipped, their max " + fmt(r.kink_max_error, 3) + ")");
  return o;
}

Outcome p2_losses() {
  Outcome o;
  Tape<double> tape;
  const Shape s{2, 1, 32, 32};
  Var zero = tape.constant(Tensor<double>(s, 0.0)), one = tape.constant(Tensor<double>(s, 1.0));
  auto v = [&](Var x) { return tape.value(x)[0]; };
  const double a0 = v(attention_loss(tape, zero, zero, zero)), a1 = v(attention_loss(tape, zero, one, zero)),
               a2 = v(attention_loss(tape, one, zero, zero));
  o.require(a0 == 0.0 && std::abs(a1 - 1.0) <= 1e-12 && std::abs(a2 - 0.8) <= 1e-12,
            "attention " + fmt(a0) + "/" + fmt(a1) + "/" + fmt(a2));

  std::array<Var, 3> t0, t1, thalf;
  const std::array<std::size_t, 3> sizes{8, 16, 32};
  for (std::size_t i = 0; i < 3; ++i) {
    const Shape si{2, 1, sizes[i], sizes[i]};
    t0[i] = tape.constant(Tensor<double>(si, 0.0));
    t1[i] = tape.constant(Tensor<double>(si, 1.0));
    thalf[i] = tape.constant(Tensor<double>(si, std::sqrt(0.5 / 2.4)));
  }
  const double m0 = v(multiscale_loss(tape, t0, t0)), m1 = v(multiscale_loss(tape, t1, t0)),
               mh = v(multiscale_loss(tape, thalf, t0));
  o.require(m0 == 0.0 && std::abs(m1 - 2.4) <= 1e-12 && std::abs(mh - 0.5) <= 1e-12,
            "multiscale " + fmt(m0) + "/" + fmt(m1) + "/" + fmt(mh));

  // additivity on random inputs
  Rng rng(202);
  AarnForward f;
  f.a1 = tape.constant(random_tensor(s, rng, 0, 1));
  f.a2 = tape.constant(random_tensor(s, rng, 0, 1));
  f.f5 = tape.constant(random_tensor({2, 1, 8, 8}, rng, 0, 1));
  f.f7 = tape.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1));
  f.f9 = tape.constant(random_tensor(s, rng, 0, 1));
  Var map = tape.constant(random_tensor(s, rng, 0, 1));
  const std::array<Var, 3> targets{tape.constant(random_tensor({2, 1, 8, 8}, rng, 0, 1)),
                                   tape.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1)),
                                   tape.constant(random_tensor(s, rng, 0, 1))};
  const auto l = total_loss<double>(tape, f, map, targets);
  const double sum = v(l.attention) + v(l.multiscale);
  o.require(std::abs(v(l.total) - sum) <= 1e-12, "total = attention + multiscale (diff " + fmt(v(l.total) - sum, 2) + ")");

  const std::vector<int> labels{0, 1};
  const double ce = v(softmax_cross_entropy(tape, tape.constant(Tensor<double>({2, 2}, 0.0)), std::span<const int>(labels)));
  o.require(std::abs(ce - std::log(2.0)) <= 1e-12, "softmax CE of equal logits " + fmt(ce, 12));
  return o;
}

Outcome p3_binary_map() {
  Outcome o;
  std::size_t cases = 0, wrong = 0;
  for (float base : {0.0f, 0.25f, 0.5f, 0.75f})
    for (double diff : {0.0, 0.005, 0.01, 0.010001, 0.02})
      for (double sign : {1.0, -1.0}) {
        // the map compares in single precision; the oracle uses the same rounded values
        const float clean = base, dirty = static_cast<float>(base + sign * diff);
        if (dirty < 0.0f) continue;
        const float expected = std::abs(dirty - clean) > 0.01f ? 1.0f : 0.0f;
        const float got = make_binary_map(std::vector<float>{dirty}, std::vector<float>{clean})[0];
        ++cases;
        if (got != expected) ++wrong;
        if (diff == 0.01 && base == 0.0f && got != 0.0f) ++wrong;
        if (diff == 0.010001 && base == 0.0f && got != 1.0f) ++wrong;
      }
  o.require(wrong == 0, std::to_string(cases) + " grid cases, " + std::to_string(wrong) + " wrong");

  Patch p;
  Rng rng(303);
  for (float& v : p.values) v = static_cast<float>(rng.uniform());
  const auto m = make_binary_map(p, p);
  o.require(std::all_of(m.begin(), m.end(), [](float v) { return v == 0.0f; }), "identity pair gives all-zero map");
  return o;
}

Outcome p4_idsn() {
  Outcome o;
  auto accuracy = [](std::size_t rois) {
    const ClassifierScene scene = make_classifier_scene(404, rois);
    Rng rng(405);
    const auto samples = augment_rois(scene.rois, normalize(scene.image), rng, 500);
    return train_idsn<float>(samples, rng).report.heldout_accuracy;
  };
  const double a7 = accuracy(7), a27 = accuracy(27);
  o.require(a7 >= 0.80, "7 ROIs held-out accuracy " + fmt(a7));
  o.require(a27 >= a7 - 0.05, "27 ROIs held-out accuracy " + fmt(a27));
  return o;
}

Outcome p5_synthesis() {
  Outcome o;
  const Phantom ph = make_phantom(505);
  const Image norm = normalize(ph.noisy);
  std::vector<ArtifactPattern> patterns;
  double worst_mean = 0;
  for (const Patch& patch : slice_patches(norm, 32)) {
    patterns.push_back(extract_artifact_pattern(patch));
    double s = 0;
    for (double v : patterns.back().values) s += v;
    worst_mean = std::max(worst_mean, std::abs(s / static_cast<double>(kPatchPixels)));
  }
  o.require(worst_mean <= 1e-9, std::to_string(patterns.size()) + " patterns, max |mean| " + fmt(worst_mean, 2));
  const auto pool = slice_patches(norm, 16);
  for (std::size_t count : {5000u, 100000u}) {
    Rng rng(506);
    const auto pairs = synthesize_pairs(patterns, pool, {count, 0.1}, rng);
    const double ids = static_cast<double>(std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.is_identity; }));
    const double frac = ids / static_cast<double>(pairs.size());
    o.require(pairs.size() == count && std::abs(frac - 0.1) <= 0.01,
              std::to_string(pairs.size()) + " pairs, identity fraction " + fmt(frac));
  }
  return o;
}

// Shared by P6 and P7: the phantom run with and without attention.
struct PhantomRun {
  RunRecord record;
  double attention_background = 0, attention_edges = 0;
};

const Phantom& phantom() {
  static const Phantom p = make_phantom(7);
  return p;
}

PhantomRun run_phantom(bool attention) {
  const Phantom& ph = phantom();
  const fs::path input = g_work / "phantom.f32";
  if (!fs::exists(input)) save_image(ph.noisy, input);
  PipelineConfig c = make_profile("desk");
  c.seed = 42;
  c.attention_enabled = attention;
  c.eval_regions = {ph.evaluation};
  const fs::path dir = g_work / (attention ? "phantom_attention" : "phantom_no_attention");
  PipelineObserver obs{{}, [&](std::size_t e, double l) {
                         std::cerr << "  [" << (attention ? "attention" : "no attention") << "] epoch " << e + 1
                                   << " loss " << l << '\n';
                       }};
  PhantomRun r;
  r.record = run_pipeline(input, ph.rois, c, dir, obs);
  if (attention) {
    const Image a2 = load_image(dir / "attention2.png");
    auto mean = [&](const std::vector<Region>& regions) {
      double s = 0, n = 0;
      for (const Region& g : regions)
        for (std::size_t y = g.y; y < g.y + g.height; ++y)
          for (std::size_t x = g.x; x < g.x + g.width; ++x, ++n) s += a2(x, y);
      return s / n / 255.0;
    };
    // noised regions: the A-type windows and the evaluation region
    std::vector<Region> noised = ph.background_regions;
    noised.push_back(ph.evaluation);
    r.attention_background = mean(noised);
    r.attention_edges = mean(ph.edge_regions);
  }
  return r;
}

std::optional<PhantomRun> g_with, g_without;

Outcome p6_recovery() {
  Outcome o;
  g_with = run_phantom(true);
  const RunRecord& rec = g_with->record;
  const MetricReport& m = rec.metrics.at(0);
  o.require(!m.delta_undefined && m.delta_snr_pct >= 50.0, "(a) dSNR " + fmt(m.delta_snr_pct) + "%");
  o.require(m.delta_mean_pct <= 15.0, "(b) |dmean| " + fmt(m.delta_mean_pct) + "%");
  const auto& h = rec.loss_history;
  o.require(h.size() >= 3 && h[2] <= h[0], "(c) loss epoch1 " + fmt(h.at(0)) + " epoch3 " + fmt(h.at(2)));
  o.require(g_with->attention_background > g_with->attention_edges,
            "(d) A2 noised " + fmt(g_with->attention_background) + " vs edges " + fmt(g_with->attention_edges));
  o.detail << "; " << fmt(rec.total_seconds, 3) << " s";
  return o;
}

Outcome p7_ablation() {
  Outcome o;
  if (!g_with) g_with = run_phantom(true);
  g_without = run_phantom(false);
  const double with = g_with->record.metrics.at(0).delta_mean_pct;
  const double without = g_without->record.metrics.at(0).delta_mean_pct;
  o.require(without > with, "|dmean| without attention " + fmt(without) + "% vs with " + fmt(with) + "%");
  o.detail << " (dSNR without attention " << fmt(g_without->record.metrics.at(0).delta_snr_pct) << "%)";
  return o;
}

Outcome p8_determinism() {
  Outcome o;
  // two full pipeline runs with a reduced configuration
  const Phantom ph = make_phantom(808);
  const fs::path input = g_work / "determinism.f32";
  save_image(ph.noisy, input);
  PipelineConfig c = make_profile("desk");
  c.seed = 9;
  c.pair_count = 300;
  c.augment_per_class = 40;
  c.idsn_max_epochs = 3;
  c.max_epochs = 1;
  c.batch_size = 60;
  c.eval_regions = {ph.evaluation};
  run_pipeline(input, ph.rois, c, g_work / "det_a");
  run_pipeline(input, ph.rois, c, g_work / "det_b");
  bool same = true;
  for (const char* f : {"output.f32", "attention1.png", "attention2.png"})
    same = same && detail::read_file(g_work / "det_a" / f) == detail::read_file(g_work / "det_b" / f);
  o.require(same, "same seed gives byte-identical output and attention maps");

  Rng rng(809);
  auto model = AarnModel<float>::make(AarnArchitecture{}, rng);
  bool shapes = true;
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{32, 32}, {36, 36}, {250, 254}, {256, 256}}) {
    Image img(w, h);
    for (double& v : img.pixels) v = rng.uniform();
    const auto r = infer(model, img);
    shapes = shapes && r.output.width == w && r.output.height == h && r.attention2.width == w && r.attention2.height == h;
  }
  o.require(shapes, "inference keeps 32x32, 36x36, 250x254, 256x256");

  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    Image img(37, 41);
    const double lo = rng.uniform(-1000, 1000), span = rng.uniform(1e-3, 1e4);
    for (double& v : img.pixels) v = lo + span * rng.uniform();
    const Image back = denormalize(normalize(img));
    for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(back.pixels[i] - img.pixels[i]) / std::max(1.0, span));
  }
  o.require(worst <= 1e-6, "normalize round trip error " + fmt(worst, 2));
  return o;
}

Outcome p9_metrics() {
  Outcome o;
  // reference (mean, snr) pairs; std back-derived as mean / snr
  for (auto [mean, snr] : std::vector<std::pair<double, double>>{{54.0, 0.68}, {94.5, 2.35}, {104.4, 1.58}, {82.9, 0.57}}) {
    const double std = mean / snr;
    Image img(32, 32);
    for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = i % 2 ? mean + std : mean - std;
    const MetricReport r = region_snr(img, {0, 0, 32, 32});
    o.require(std::abs(r.mean - mean) <= 1e-9 && std::abs(r.snr - snr) <= 1e-9,
              "mean " + fmt(mean) + " std " + fmt(std) + " -> snr " + fmt(r.snr));
  }
  MetricReport in, out;
  in.mean = 54.0;
  in.snr = 0.68;
  out.mean = 94.5;
  out.snr = 2.35;
  const double d = improvement(in, out).delta_snr_pct;
  o.require(std::abs(d - 245.6) < 0.05, "0.68 -> 2.35 gives " + fmt(d, 6) + "%");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  g_work = fs::temp_directory_path() / "osar-acceptance";
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      g_work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string item; std::getline(s, item, ',');) only.insert(item);
    } else {
      std::cerr << "usage: osar_acceptance [--work-dir DIR] [--only P1,P2,...]\n";
      return 64;
    }
  }
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"P1", p1_gradients},   {"P2", p2_losses},   {"P3", p3_binary_map},
      {"P4", p4_idsn},        {"P5", p5_synthesis}, {"P6", p6_recovery},
      {"P7", p7_ablation},    {"P8", p8_determinism}, {"P9", p9_metrics}};
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.contains(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail.str() << "  [" << fmt(secs, 3) << " s]"
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
