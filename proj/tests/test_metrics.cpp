#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "solar/metrics.hpp"

using namespace solar;
using Views = std::vector<std::vector<double>>;

namespace {

Views random_views(std::size_t n, std::size_t d, Rng& rng) {
  Views v(n, std::vector<double>(d));
  for (auto& row : v)
    for (auto& x : row) x = standard_normal(rng);
  return v;
}

std::vector<double> at_angle(double a) { return {std::cos(a), std::sin(a), 0.0}; }

}  // namespace

TEST(Deviation, Examples) {
  EXPECT_NEAR(deviation(Views{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(deviation(Views{{1, 0}, {0, 1}}), 0.5);
  EXPECT_THROW(deviation(Views{}), std::invalid_argument);
}

TEST(Deviation, AffineInLoss) {
  Rng rng = make_rng(1);
  for (std::size_t n : {2u, 5u, 20u}) {
    const auto v = random_views(n, 16, rng);
    const double nn = static_cast<double>(n);
    EXPECT_NEAR(deviation(v), multiview_ssl_loss(v) / (nn * nn) + (nn - 1) / nn, 1e-12);
  }
}

TEST(Deviation, PermutationAndScaleInvariant) {
  Rng rng = make_rng(2);
  auto v = random_views(6, 4, rng);
  const double base = deviation(v);
  const double base_angle = mean_angle(v);
  std::swap(v[0], v[4]);
  EXPECT_NEAR(deviation(v), base, 1e-14);
  EXPECT_NEAR(mean_angle(v), base_angle, 1e-14);
  for (auto& x : v[2]) x *= 13.0;
  EXPECT_NEAR(deviation(v), base, 1e-14);
  EXPECT_NEAR(mean_angle(v), base_angle, 1e-14);
}

TEST(MeanAngle, Examples) {
  EXPECT_EQ(mean_angle(Views{{0.3, 0.4}, {0.3, 0.4}}), 0.0);
  EXPECT_NEAR(mean_angle(Views{{1, 1}, {-1, -1}}), std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(mean_angle(Views{{1, 0}, {0, 1}}), std::numbers::pi / 4, 1e-15);
}

TEST(Overlap, Examples) {
  const auto a = Hyperball::from_stats({1, 2, 3}, 0.3);
  EXPECT_NEAR(overlap(a, a), 0.6, 1e-15);
  const auto x = Hyperball::from_stats({1, 0}, 0.0), y = Hyperball::from_stats({0, 5}, 0.0);
  EXPECT_NEAR(overlap(x, y), -std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(overlap(at_angle(0.0), 0.2, at_angle(0.5), 0.2), -0.1, 1e-15);
}

TEST(Overlap, FromViewsUsesMeanAndAngle) {
  const auto b = Hyperball::from_views(Views{{1, 0}, {0, 1}});
  EXPECT_EQ(b.mean, (std::vector<double>{0.5, 0.5}));
  EXPECT_NEAR(b.mean_angle, std::numbers::pi / 4, 1e-15);
}

TEST(AvgOverlapCount, Examples) {
  std::vector<Hyperball> ortho;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> m(3, 0.0);
    m[k] = 1.0;
    ortho.push_back(Hyperball::from_stats(m, 0.0));
  }
  EXPECT_EQ(avg_overlap_count(ortho), 0.0);

  std::vector<Hyperball> dup(4, Hyperball::from_stats({1, 2}, 0.1));
  EXPECT_EQ(avg_overlap_count(dup), 1.0);

  std::vector<Hyperball> two = {Hyperball::from_stats(at_angle(0.0), 0.3), Hyperball::from_stats(at_angle(0.5), 0.3)};
  EXPECT_EQ(avg_overlap_count(two), 1.0);
  EXPECT_THROW(avg_overlap_count(std::vector<Hyperball>{}), std::invalid_argument);
}

TEST(AvgOverlapCount, SelfPairFloorAndExclusion) {
  std::vector<Hyperball> far = {Hyperball::from_stats(at_angle(0.0), 0.1), Hyperball::from_stats(at_angle(2.0), 0.1)};
  EXPECT_DOUBLE_EQ(avg_overlap_count(far), 0.5);
  EXPECT_DOUBLE_EQ(avg_overlap_count(far, {false}), 0.0);
}

TEST(AvgOverlapCount, MonotoneWhenShrinkingAngles) {
  Rng rng = make_rng(3);
  std::vector<Hyperball> balls;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> m(4);
    for (auto& v : m) v = standard_normal(rng);
    balls.push_back(Hyperball::from_stats(m, uniform01(rng)));
  }
  double prev = avg_overlap_count(balls);
  for (int k = 0; k < 6; ++k) {
    for (auto& b : balls) b.mean_angle *= 0.7;
    const double now = avg_overlap_count(balls);
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(Uniformity, Examples) {
  EXPECT_NEAR(uniformity_loss(Views{{1, 2}, {2, 4}, {0.5, 1}}), 0.0, 1e-15);
  EXPECT_NEAR(uniformity_loss(Views{{1, 0}, {-3, 0}}), -8.0, 1e-12);
  EXPECT_NEAR(uniformity_loss(Views{{1, 0}, {0, 2}}), -4.0, 1e-12);
  EXPECT_THROW(uniformity_loss(Views{{1, 0}}), std::invalid_argument);
}

TEST(Svd, RankOne) {
  const auto rep = svd_collapse_metrics(Views{{1, 2, 2}, {2, 4, 4}, {-1, -2, -2}});
  EXPECT_NEAR(rep.normalized[0], 1.0, 1e-12);
  for (std::size_t i = 1; i < rep.normalized.size(); ++i) EXPECT_NEAR(rep.normalized[i], 0.0, 1e-12);
  EXPECT_NEAR(rep.cumulative[0], 1.0, 1e-12);
}

TEST(Svd, OrthonormalRows) {
  const auto rep = svd_collapse_metrics(Views{{1, 0, 0, 0}, {0, 3, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 2}});
  for (std::size_t k = 1; k <= 4; ++k) EXPECT_NEAR(rep.cumulative[k - 1], k / 4.0, 1e-12);
}

TEST(Svd, CumulativeMonotone) {
  Rng rng = make_rng(4);
  const auto rep = svd_collapse_metrics(random_views(40, 8, rng));
  for (std::size_t i = 1; i < rep.cumulative.size(); ++i) EXPECT_GE(rep.cumulative[i], rep.cumulative[i - 1]);
  EXPECT_NEAR(rep.cumulative.back(), 1.0, 1e-12);
  for (std::size_t i = 1; i < rep.singular_values.size(); ++i)
    EXPECT_GE(rep.singular_values[i - 1], rep.singular_values[i]);
  EXPECT_THROW(svd_collapse_metrics(Views{}), std::invalid_argument);
}

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.input_dim = 8;
  c.hidden_dim = 16;
  c.feature_dim = 8;
  c.proj_hidden_dim = 8;
  c.proj_dim = 4;
  c.pred_hidden_dim = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(HyperballSummary, IdentityAugmentation) {
  SSLModel<double> m(small_model());
  AugmentationConfig cfg;
  cfg.noise_std = 0;
  cfg.dropout = 0;
  Rng rng = make_rng(5);
  const auto b = hyperball_summary(m, std::vector<float>(8, 0.5f), 20, cfg, rng);
  EXPECT_EQ(b.mean_angle, 0.0);
  EXPECT_NEAR(deviation(b.projected_views), 0.0, 1e-15);
  EXPECT_EQ(b.views.size(), 20u);
}

TEST(HyperballSummary, ReproducibleAndInRange) {
  SSLModel<double> m(small_model());
  AugmentationConfig cfg;
  Rng a = make_rng(6), b = make_rng(6);
  std::vector<float> x = {0.1f, 0.2f, -1.0f, 2.0f, 0.0f, 0.3f, -0.7f, 1.1f};
  const auto ba = hyperball_summary(m, x, 20, cfg, a);
  const auto bb = hyperball_summary(m, x, 20, cfg, b);
  EXPECT_EQ(ba.mean, bb.mean);
  EXPECT_EQ(ba.mean_angle, bb.mean_angle);
  const double dev = deviation(ba.projected_views);
  EXPECT_GE(dev, 0.0);
  EXPECT_LE(dev, 2.0);
}

TEST(LatentMetrics, DeterministicAndConsistent) {
  SSLModel<float> m(small_model());
  const auto data = generate_synthetic(4, 10, 8, 3.0, 1);
  AugmentationConfig aug;
  MetricsConfig cfg;
  cfg.views = 5;
  const auto a = evaluate_latent_metrics(m, data, aug, cfg, 3);
  const auto b = evaluate_latent_metrics(m, data, aug, cfg, 3);
  EXPECT_EQ(a.deviation_mean, b.deviation_mean);
  EXPECT_EQ(a.avg_overlap_count, b.avg_overlap_count);
  EXPECT_EQ(a.step, 3u);
  EXPECT_GE(a.avg_overlap_count, 1.0 / 40.0);
  EXPECT_LE(a.avg_overlap_count, 1.0);
  ASSERT_EQ(a.cev.size(), 4u);  // k = 1, 2, 4, 8
  EXPECT_NEAR(a.cev.back().second, 1.0, 1e-9);
  cfg.subsample = 12;
  const auto s = evaluate_latent_metrics(m, data, aug, cfg);
  EXPECT_TRUE(std::isfinite(s.deviation_mean));
}
