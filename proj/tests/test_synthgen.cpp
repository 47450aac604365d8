#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "mgc/synthgen.hpp"
#include "support.hpp"

using namespace mgc;
using namespace mgc::synthgen;

namespace {

GenConfig small_cfg() {
  GenConfig cfg;
  cfg.num_classes = 3;
  cfg.train_per_class = 2;
  cfg.val_per_class = 1;
  cfg.test_per_class = 1;
  return cfg;
}

std::map<std::string, std::vector<std::uint8_t>> snapshot_dir(const std::filesystem::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      files[std::filesystem::relative(e.path(), root).generic_string()] = tensorio::read_file_bytes(e.path());
    }
  }
  return files;
}

// Mean over time of the pose heatmaps: (J*H*W) features.
std::vector<double> pooled_pose(const ClipSample& c) {
  const std::size_t T = c.pose.dim(0), F = c.pose.numel() / T;
  std::vector<double> f(F, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < F; ++i) f[i] += c.pose[t * F + i] / static_cast<double>(T);
  return f;
}

// Every pose heatmap value of the clip, time order kept.
std::vector<double> flat_pose(const ClipSample& c) {
  const auto v = c.pose.values();
  return {v.begin(), v.end()};
}

// Multinomial logistic regression by full-batch gradient descent.
struct Probe {
  std::size_t classes, dim;
  std::vector<double> w, b;

  Probe(std::size_t k, std::size_t d) : classes(k), dim(d), w(k * d, 0.0), b(k, 0.0) {}

  std::vector<double> probs(const std::vector<double>& x) const {
    std::vector<double> z(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      z[k] = b[k];
      for (std::size_t j = 0; j < dim; ++j) z[k] += w[k * dim + j] * x[j];
    }
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (auto& v : z) s += (v = std::exp(v - m));
    for (auto& v : z) v /= s;
    return z;
  }

  void fit(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys, int iters, double lr) {
    for (int it = 0; it < iters; ++it) {
      std::vector<double> gw(w.size(), 0.0), gb(classes, 0.0);
      for (std::size_t n = 0; n < xs.size(); ++n) {
        auto p = probs(xs[n]);
        p[ys[n]] -= 1.0;
        for (std::size_t k = 0; k < classes; ++k) {
          gb[k] += p[k];
          for (std::size_t j = 0; j < dim; ++j) gw[k * dim + j] += p[k] * xs[n][j];
        }
      }
      const double s = lr / static_cast<double>(xs.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= s * (gw[i] + 1e-3 * w[i]);
      for (std::size_t k = 0; k < classes; ++k) b[k] -= s * gb[k];
    }
  }

  int predict(const std::vector<double>& x) const {
    const auto p = probs(x);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
};

}  // namespace

TEST_CASE("same seed gives byte-identical datasets") {
  test::TempDir a("gen_a"), b("gen_b");
  const auto cfg = small_cfg();
  const auto ma = generate(cfg, a.path());
  const auto mb = generate(cfg, b.path());
  CHECK(ma == mb);
  const auto fa = snapshot_dir(a.path()), fb = snapshot_dir(b.path());
  CHECK(fa.size() == 3 * 4 * 2 + 1);
  CHECK(fa == fb);

  auto other = cfg;
  other.seed = 8;
  test::TempDir c("gen_c");
  generate(other, c.path());
  CHECK(snapshot_dir(c.path()) != fa);
}

TEST_CASE("split counts and label balance") {
  test::TempDir dir("gen_count");
  GenConfig cfg;
  cfg.height = cfg.width = 8;
  cfg.t_pose = 8;
  cfg.t_rgb = 2;
  const auto m = generate(cfg, dir.path());
  const auto train = m.split_entries(tensorio::Split::train);
  CHECK(train.size() == 60);
  CHECK(m.split_entries(tensorio::Split::val).size() == 30);
  CHECK(m.split_entries(tensorio::Split::test).size() == 30);
  std::vector<int> per_class(6, 0);
  for (const auto* e : train) ++per_class[e->label];
  CHECK(std::all_of(per_class.begin(), per_class.end(), [](int n) { return n == 10; }));
  CHECK(tensorio::load_manifest(dir / "manifest.txt") == m);
}

TEST_CASE("zero noise renders ignore the jitter seed") {
  auto cfg = small_cfg();
  cfg.intra_noise = 0.0;
  const auto t = make_templates(cfg);
  const auto a = render_clip(t[1], 1, cfg), b = render_clip(t[1], 999, cfg);
  CHECK(test::bit_equal(a.pose, b.pose));
  CHECK(test::bit_equal(a.rgb, b.rgb));

  cfg.intra_noise = 0.2;
  const auto c = render_clip(t[1], 1, cfg), d = render_clip(t[1], 999, cfg);
  CHECK_FALSE(test::bit_equal(c.pose, d.pose));
  CHECK(test::bit_equal(c.pose, render_clip(t[1], 1, cfg).pose));
}

TEST_CASE("centred static joint peaks at the centre pixel") {
  GenConfig cfg;
  cfg.intra_noise = 0.0;
  cfg.joints = 1;
  MotionTemplate tmpl;
  tmpl.joints.push_back({8.0, 8.0, 0.0, 0.0, 0.0});
  const auto clip = render_clip(tmpl, 0, cfg);
  const std::size_t HW = 16 * 16;
  for (int t = 0; t < cfg.t_pose; ++t) {
    const double* f = clip.pose.data() + t * HW;
    const auto peak = std::max_element(f, f + HW) - f;
    CHECK(peak == 8 * 16 + 8);
    CHECK(f[peak] == doctest::Approx(1.0));
  }
}

TEST_CASE("heatmap peaks track the jittered trajectory") {
  auto cfg = small_cfg();
  cfg.intra_noise = 0.3;
  const auto templates = make_templates(cfg);
  const std::size_t H = cfg.height, W = cfg.width, J = cfg.joints;
  for (const auto& tmpl : templates) {
    for (std::uint64_t s : {3u, 4u}) {
      const auto traj = jittered_trajectory(tmpl, s, cfg);
      const auto clip = render_clip(tmpl, s, cfg);
      for (int t = 0; t < cfg.t_pose; ++t)
        for (std::size_t j = 0; j < J; ++j) {
          const double* f = clip.pose.data() + (t * J + j) * H * W;
          const auto peak = static_cast<std::size_t>(std::max_element(f, f + H * W) - f);
          CHECK(std::abs(static_cast<double>(peak % W) - traj[t][j].x) <= 1.0);
          CHECK(std::abs(static_cast<double>(peak / W) - traj[t][j].y) <= 1.0);
        }
    }
  }
}

TEST_CASE("rgb frame i is the pose trajectory at frame 4i") {
  auto cfg = small_cfg();
  cfg.intra_noise = 0.0;  // no background offset
  const auto tmpl = make_templates(cfg)[2];
  const auto clip = render_clip(tmpl, 5, cfg);
  const std::size_t H = cfg.height, W = cfg.width, J = cfg.joints;
  for (int i = 0; i < cfg.t_rgb; ++i) {
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < H * W; ++p) {
        double v = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
          v += joint_color(static_cast<int>(j), static_cast<int>(J))[c] * clip.pose[((4 * i) * J + j) * H * W + p];
        }
        CHECK(clip.rgb[(i * 3 + c) * H * W + p] == doctest::Approx(std::clamp(v, 0.0, 1.0)).epsilon(1e-12));
      }
  }
}

TEST_CASE("every heatmap and rgb value lies in [0,1]") {
  auto cfg = small_cfg();
  cfg.intra_noise = 1.0;
  for (const auto& tmpl : make_templates(cfg)) {
    const auto clip = render_clip(tmpl, 17, cfg);
    for (double v : clip.pose.values()) REQUIRE((v >= 0.0 && v <= 1.0));
    for (double v : clip.rgb.values()) REQUIRE((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("invalid generator configs") {
  auto bad = small_cfg();
  SUBCASE("pose length not a multiple of rgb length") { bad.t_pose = 30; }
  SUBCASE("no classes") { bad.num_classes = 0; }
  SUBCASE("pair outside the class range") { bad.ambiguous_pairs = {{0, 7, 0.05}}; }
  SUBCASE("pair with itself") { bad.ambiguous_pairs = {{1, 1, 0.05}}; }
  SUBCASE("negative noise") { bad.intra_noise = -0.1; }
  CHECK_THROWS_AS(validate(bad), ValidationError);
}

TEST_CASE("ambiguous pairs share a template up to a phase offset") {
  auto cfg = small_cfg();
  cfg.ambiguous_pairs = {{0, 1, 0.05}};
  const auto t = make_templates(cfg);
  CHECK(t[0].frequency == t[1].frequency);
  for (std::size_t j = 0; j < t[0].joints.size(); ++j) {
    CHECK(t[0].joints[j].base_x == t[1].joints[j].base_x);
    CHECK(t[0].joints[j].direction == t[1].joints[j].direction);
    CHECK(t[0].joints[j].amplitude == t[1].joints[j].amplitude);
    CHECK(t[1].joints[j].phase - t[0].joints[j].phase == doctest::Approx(2.0 * M_PI * 0.05));
  }
}

TEST_CASE("separable defaults: nearest class mean on pose clips is accurate") {
  GenConfig cfg;  // seed 7, no ambiguous pairs
  const auto templates = make_templates(cfg);
  const int K = cfg.num_classes;
  std::vector<std::vector<double>> means(K);
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < 10; ++i) {
      const auto f = flat_pose(render_clip(templates[k], derive_seed(cfg.seed, clip_id(k, tensorio::Split::train, i)), cfg));
      if (means[k].empty()) means[k].assign(f.size(), 0.0);
      for (std::size_t j = 0; j < f.size(); ++j) means[k][j] += f[j] / 10.0;
    }
  int correct = 0, total = 0;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < 5; ++i) {
      const auto f = flat_pose(render_clip(templates[k], derive_seed(cfg.seed, clip_id(k, tensorio::Split::test, i)), cfg));
      int best = 0;
      double best_d = INFINITY;
      for (int c = 0; c < K; ++c) {
        double d = 0;
        for (std::size_t j = 0; j < f.size(); ++j) d += (f[j] - means[c][j]) * (f[j] - means[c][j]);
        if (d < best_d) best_d = d, best = c;
      }
      correct += best == k;
      ++total;
    }
  CHECK(static_cast<double>(correct) / total >= 0.9);
}

TEST_CASE("linear probe confuses the ambiguous pair more than any other pair") {
  GenConfig cfg;
  cfg.ambiguous_pairs = {{0, 1, 0.05}};
  cfg.intra_noise = 0.3;
  const auto templates = make_templates(cfg);
  const int K = cfg.num_classes, per_class = 30;
  std::vector<std::vector<double>> xs_train, xs_test;
  std::vector<int> ys_train, ys_test;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < per_class; ++i) {
      xs_train.push_back(pooled_pose(render_clip(templates[k], derive_seed(cfg.seed, clip_id(k, tensorio::Split::train, i)), cfg)));
      ys_train.push_back(k);
      xs_test.push_back(pooled_pose(render_clip(templates[k], derive_seed(cfg.seed, clip_id(k, tensorio::Split::test, i)), cfg)));
      ys_test.push_back(k);
    }
  Probe probe(K, xs_train[0].size());
  probe.fit(xs_train, ys_train, 300, 0.5);

  std::vector<std::vector<int>> confusion(K, std::vector<int>(K, 0));
  for (std::size_t n = 0; n < xs_test.size(); ++n) ++confusion[ys_test[n]][probe.predict(xs_test[n])];
  std::string table;
  for (const auto& row : confusion) {
    for (int v : row) table += std::to_string(v) + " ";
    table += "\n";
  }
  INFO("probe confusion on held-out clips:\n" << table);

  const int pair01 = confusion[0][1] + confusion[1][0];
  CHECK(pair01 > 0);
  for (int a = 0; a < K; ++a)
    for (int b = a + 1; b < K; ++b) {
      if (a == 0 && b == 1) continue;
      CHECK(confusion[a][b] + confusion[b][a] < pair01);
    }
}
