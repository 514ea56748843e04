#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "solar/numerics/grad_check.hpp"
#include "solar/trainer.hpp"

using namespace solar;

namespace {

ModelConfig small_model(std::size_t d = 8) {
  ModelConfig c;
  c.input_dim = d;
  c.hidden_dim = 16;
  c.feature_dim = 8;
  c.proj_hidden_dim = 8;
  c.proj_dim = 6;
  c.pred_hidden_dim = 3;
  c.seed = 1;
  return c;
}

TrainConfig small_train(Algorithm a = Algorithm::solar, double omega = 1.0) {
  TrainConfig t;
  t.algorithm = a;
  t.total_batch_size = 16;
  t.overlap_weight = omega;
  t.top_k = 8;
  t.augment_seed = 3;
  return t;
}

struct Fixture {
  Dataset data = generate_synthetic(4, 30, 8, 3.0, 2);
  StreamSchedule schedule = build_schedule(data, 2, 5, 2, 0);
};

std::vector<Tensor<float>> params_of(const Trainer& t) {
  std::vector<Tensor<float>> out;
  for (auto& [n, p] : t.model().state()) out.push_back(*p);
  return out;
}

}  // namespace

TEST(OverlapLoss, InactiveHingeGivesZeroAndNoGradient) {
  Graph<double> g;
  const auto zbar = g.parameter("z", Tensor<double>::matrix(2, 3, {1, 0, 0, 0, 1, 0}));
  const auto theta = g.parameter("t", Tensor<double>::vector({0.1, 0.1}));
  std::vector<EntrySummary> targets = {{0, 1.0f, {0.0f, 0.0f, 1.0f}, 0.1f}};
  const auto l = overlap_loss<double>(g, zbar, theta, targets);
  EXPECT_EQ(g.value(l).item(), 0.0);
  g.backward(l);
  for (double v : g.grad(zbar).data()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad(theta).data()) EXPECT_EQ(v, 0.0);
}

TEST(OverlapLoss, IdenticalBalls) {
  Graph<double> g;
  const auto zbar = g.input("z", Tensor<double>::matrix(1, 3, {0.2, -1, 0.5}));
  const auto theta = g.input("t", Tensor<double>::vector({0.3}));
  std::vector<EntrySummary> targets = {{0, 1.0f, {0.2f, -1.0f, 0.5f}, 0.3f}};
  // arccos of the clamped self-cosine is ~4.5e-4 rather than 0
  EXPECT_NEAR(g.value(overlap_loss<double>(g, zbar, theta, targets)).item(), 0.6, 5e-4);
}

TEST(OverlapLoss, EmptyTargetsGiveZero) {
  Graph<double> g;
  const auto zbar = g.input("z", Tensor<double>::matrix(1, 2, {1, 0}));
  const auto theta = g.input("t", Tensor<double>::vector({0.3}));
  EXPECT_EQ(g.value(overlap_loss<double>(g, zbar, theta, std::span<const EntrySummary>{})).item(), 0.0);
}

TEST(OverlapLoss, GradCheck) {
  Rng rng = make_rng(5);
  Tensor<double> z({4, 5}), zk({3, 5}), th({4}), thk({3});
  for (auto& v : z.data()) v = standard_normal(rng);
  for (auto& v : zk.data()) v = standard_normal(rng);
  for (auto& v : th.data()) v = 0.5 + uniform01(rng);
  for (auto& v : thk.data()) v = 0.5 + uniform01(rng);
  const double err = grad_check<double>({z, th}, [&](Graph<double>& g, std::span<const std::size_t> p) {
    return overlap_loss<double>(g, p[0], p[1], zk, thk);
  });
  EXPECT_LT(err, 1e-4);
}

TEST(OverlapLoss, BufferSideIsFrozen) {
  Graph<double> g;
  const auto zbar = g.parameter("z", Tensor<double>::matrix(1, 2, {1, 0.2}));
  const auto theta = g.parameter("t", Tensor<double>::vector({0.8}));
  std::vector<EntrySummary> targets = {{0, 1.0f, {1.0f, 0.5f}, 0.7f}};
  const auto l = overlap_loss<double>(g, zbar, theta, targets);
  targets[0].mean_feature = {-5.0f, 3.0f};
  g.backward(l);
  Graph<double> ref;
  const auto rz = ref.parameter("z", Tensor<double>::matrix(1, 2, {1, 0.2}));
  const auto rt = ref.parameter("t", Tensor<double>::vector({0.8}));
  std::vector<EntrySummary> orig = {{0, 1.0f, {1.0f, 0.5f}, 0.7f}};
  ref.backward(overlap_loss<double>(ref, rz, rt, orig));
  EXPECT_EQ(g.grad(zbar), ref.grad(rz));
  EXPECT_EQ(g.grad(theta), ref.grad(rt));
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate(10));
  EXPECT_THROW(t.validate(40), std::invalid_argument);
  t.ema_decay = 1.5;
  EXPECT_THROW(t.validate(10), std::invalid_argument);
}

TEST(SolarStep, FirstStepTrainsOnStreamOnly) {
  Fixture f;
  auto cfg = small_train();
  cfg.total_batch_size = 32;
  Trainer t(f.data, small_model(), cfg, {}, BufferPolicy::deviation_aware, 64, 0);
  const std::vector<std::size_t> batch = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto r = t.solar_step(batch, 0);
  EXPECT_FALSE(r.skipped);
  EXPECT_EQ(r.batch_size, 10u);
  EXPECT_EQ(r.buffer_size, 10u);
  EXPECT_EQ(r.overlap_loss, 0.0);
  EXPECT_EQ(r.sample_losses.size(), 10u);
  for (const auto& e : t.buffer().entries()) {
    EXPECT_EQ(e.extraction_count, 0u);
    EXPECT_GE(e.loss, 0.0f);
    EXPECT_LE(e.loss, 2.0f);
  }
}

TEST(SolarStep, LaterStepsUnionBufferAndStream) {
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::deviation_aware, 64, 0);
  const std::vector<std::size_t> b1 = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::vector<std::size_t> b2 = {10, 11, 12, 13, 14};
  t.solar_step(b1, 0);
  const auto r = t.solar_step(b2, 0);
  EXPECT_EQ(r.batch_size, 15u);  // 10 replayed + 5 stream
  EXPECT_EQ(r.buffer_size, 15u);
  const auto r2 = t.solar_step({}, 1);
  EXPECT_EQ(r2.batch_size, 15u);
  EXPECT_EQ(r2.stream_samples, 0u);
  EXPECT_NEAR(r2.total_loss, r2.ssl_loss + r2.overlap_loss, 1e-6);
}

TEST(SolarStep, EmptyEverythingIsSkipped) {
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::deviation_aware, 64, 0);
  const auto r = t.solar_step({}, 0);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.batch_size, 0u);
  EXPECT_EQ(t.steps_done(), 1u);
}

TEST(SolarStep, BadIndexReported) {
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::deviation_aware, 64, 0);
  const std::vector<std::size_t> bad = {1, 99999};
  EXPECT_THROW(t.solar_step(bad, 0), std::out_of_range);
}

TEST(SolarStep, DeterministicRecords) {
  Fixture f;
  auto run = [&] {
    Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::deviation_aware, 32, 0);
    std::vector<StepRecord> recs;
    run_stream(t, f.schedule, {.on_step = [&](const StepRecord& r) { recs.push_back(r); }});
    return std::make_pair(recs, params_of(t));
  };
  const auto [ra, pa] = run();
  const auto [rb, pb] = run();
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].total_loss, rb[i].total_loss);
    EXPECT_EQ(ra[i].sample_losses, rb[i].sample_losses);
  }
  EXPECT_EQ(pa, pb);
}

TEST(SolarStep, OmegaZeroFifoMatchesErFifo) {
  Fixture f;
  Trainer a(f.data, small_model(), small_train(Algorithm::solar, 0.0), {}, BufferPolicy::fifo, 32, 0);
  Trainer b(f.data, small_model(), small_train(Algorithm::er), {}, BufferPolicy::fifo, 32, 0);
  run_stream(a, f.schedule);
  run_stream(b, f.schedule);
  EXPECT_EQ(params_of(a), params_of(b));
  EXPECT_EQ(a.buffer().entries(), b.buffer().entries());
}

TEST(SolarStep, OverlapTermChangesTrajectory) {
  Fixture f;
  Trainer a(f.data, small_model(), small_train(Algorithm::solar, 1.0), {}, BufferPolicy::deviation_aware, 32, 0);
  Trainer b(f.data, small_model(), small_train(Algorithm::solar, 0.0), {}, BufferPolicy::deviation_aware, 32, 0);
  double ov = 0;
  run_stream(a, f.schedule, {.on_step = [&](const StepRecord& r) { ov += r.overlap_loss; }});
  run_stream(b, f.schedule);
  ASSERT_GT(ov, 0.0);
  EXPECT_NE(params_of(a), params_of(b));
}

TEST(ErStep, FifoWithoutReplayUsesStreamOnly) {
  Fixture f;
  auto cfg = small_train(Algorithm::er);
  cfg.total_batch_size = 5;
  Trainer t(f.data, small_model(), cfg, {}, BufferPolicy::fifo, 32, 0);
  const auto sched = build_schedule(f.data, 2, 5, 1, 0);
  run_stream(t, sched, {.on_step = [&](const StepRecord& r) {
               EXPECT_EQ(r.batch_size, r.stream_samples);
               EXPECT_EQ(r.overlap_loss, 0.0);
             }});
}

class EveryPolicy : public ::testing::TestWithParam<BufferPolicy> {};

TEST_P(EveryPolicy, EachStreamSampleOfferedOnce) {
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, GetParam(), 16, 0);
  std::size_t stream_total = 0;
  run_stream(t, f.schedule, {.on_step = [&](const StepRecord& r) {
               stream_total += r.stream_samples;
               EXPECT_LE(r.buffer_size, 16u);
               EXPECT_TRUE(std::isfinite(r.total_loss));
             }});
  EXPECT_EQ(stream_total, f.data.size());
  EXPECT_EQ(t.buffer().stream_counter(), f.data.size());
}

INSTANTIATE_TEST_SUITE_P(All, EveryPolicy,
                         ::testing::Values(BufferPolicy::fifo, BufferPolicy::reservoir, BufferPolicy::lars,
                                           BufferPolicy::per, BufferPolicy::deviation_aware));

TEST(RunStream, StepAndHookCounts) {
  const auto data = generate_synthetic(2, 20, 8, 3.0, 0);
  for (std::size_t passes : {1u, 6u}) {
    const auto sched = build_schedule(data, 1, 10, passes, 0);
    Trainer t(data, small_model(), small_train(), {}, BufferPolicy::fifo, 32, 0);
    std::size_t steps = 0, ends = 0, metrics = 0;
    RunHooks h;
    h.on_step = [&](const StepRecord&) { ++steps; };
    h.on_task_end = [&](std::size_t, std::size_t) { ++ends; };
    h.metrics_every = 2;
    h.on_metrics = [&](std::size_t) { ++metrics; };
    const auto s = run_stream(t, sched, h);
    EXPECT_EQ(steps, 4u * passes);
    EXPECT_EQ(s.total_steps, 4u * passes);
    EXPECT_EQ(ends, 1u);
    EXPECT_EQ(metrics, 2u * passes);
  }
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::fifo, 32, 0);
  std::vector<std::size_t> ends;
  run_stream(t, f.schedule, {.on_task_end = [&](std::size_t task, std::size_t) { ends.push_back(task); }});
  EXPECT_EQ(ends, (std::vector<std::size_t>{0, 1}));
}

TEST(RunStream, StopAndResumeFromSameTrainer) {
  Fixture f;
  Trainer a(f.data, small_model(), small_train(), {}, BufferPolicy::deviation_aware, 32, 0);
  Trainer b = a;
  run_stream(a, f.schedule);
  RunHooks h;
  h.stop_after = 7;
  EXPECT_EQ(run_stream(b, f.schedule, h).steps_run, 7u);
  run_stream(b, f.schedule);
  EXPECT_EQ(params_of(a), params_of(b));
}

TEST(RunStream, ErrorsCarryStreamPosition) {
  Fixture f;
  Trainer t(f.data, small_model(), small_train(), {}, BufferPolicy::fifo, 32, 0);
  auto sched = f.schedule;
  sched.task_batches[0][1][0] = 12345;
  try {
    run_stream(t, sched);
    FAIL();
  } catch (const StreamError& e) {
    EXPECT_NE(std::string(e.what()).find("stream batch 1 pass 0"), std::string::npos);
  }
}
