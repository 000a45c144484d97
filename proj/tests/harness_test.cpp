#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "liftkd/datasets.hpp"
#include "liftkd/harness.hpp"
#include "liftkd/place.hpp"
#include "loss_reference.hpp"
#include "test_support.hpp"

namespace liftkd {
namespace {

using testing::random_tensor;
using testing::relative_error;

HarnessConfig tiny_config() {
  HarnessConfig cfg;
  cfg.samples = 512;
  cfg.steps = 20;
  cfg.teacher_widths = {16, 16};
  cfg.student_widths = {4, 4};
  cfg.iterations = 30;
  cfg.batch_size = 32;
  cfg.teacher_iterations = 40;
  cfg.eval_samples = 200;
  cfg.projections = 16;
  cfg.error_map_t = 10;
  cfg.seeds = {0};
  cfg.grid_teachers = {{16, 16}};
  cfg.grid_students = {{4, 4}};
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(DatasetTest, ShapesAndDeterminism) {
  for (auto kind : {DatasetKind::Gaussians8, DatasetKind::SwissRoll, DatasetKind::GridPatterns}) {
    Rng a(1), b(1);
    const Tensor x = make_dataset(kind, 100, a);
    EXPECT_EQ(x, make_dataset(kind, 100, b));
    Shape expected = sample_shape(kind);
    expected.insert(expected.begin(), 100);
    EXPECT_EQ(x.shape(), expected);
    EXPECT_TRUE(x.all_finite());
    EXPECT_EQ(dataset_kind_from_string(to_string(kind)), kind);
  }
  Rng rng(2);
  const Tensor grid = make_dataset(DatasetKind::GridPatterns, 50, rng);
  for (double v : grid.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  const Tensor ring = make_dataset(DatasetKind::Gaussians8, 2000, rng);
  for (std::size_t r = 0; r < 2000; ++r) {
    EXPECT_NEAR(std::hypot(ring[2 * r], ring[2 * r + 1]), std::sqrt(2.0), 0.6);
  }
  const Tensor batch = draw_batch(ring, 7, rng);
  EXPECT_EQ(batch.shape(), (Shape{7, 2}));
}

TEST(TrainTeacherTest, ZeroIterationsReturnsInitialization) {
  HarnessConfig cfg = tiny_config();
  cfg.teacher_iterations = 0;
  Rng a(3), b(3);
  const Denoiser t = train_teacher(cfg, a);
  const Denoiser init(cfg.sample_shape(), cfg.teacher_widths, cfg.steps, b);
  EXPECT_TRUE(std::equal(t.parameters().begin(), t.parameters().end(), init.parameters().begin()));
}

// Adam moves each parameter by at most ~lr per step, so even lr = 1e3 stays
// finite on these sizes. Divergence is exercised by poisoning one weight.
Denoiser poisoned(const HarnessConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Denoiser m(cfg.sample_shape(), cfg.teacher_widths, cfg.steps, rng);
  m.parameters()[3] = std::numeric_limits<double>::quiet_NaN();
  return m;
}

TEST(TrainTeacherTest, NonFiniteParametersRaise) {
  HarnessConfig cfg = tiny_config();
  cfg.teacher_lr = 1e3;
  Denoiser m = poisoned(cfg, 4);
  Rng rng(4);
  try {
    train_denoiser(m, cfg, 10, cfg.teacher_lr, rng);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_FALSE(e.partial().has_value());
  }
}

TEST(TrainTeacherTest, TrainingBeatsUntrainedBaselineTenfold) {
  HarnessConfig cfg;
  cfg.teacher_widths = {256, 256};
  cfg.eval_samples = 2000;
  Rng untrained_rng(5);
  HarnessConfig untrained_cfg = cfg;
  untrained_cfg.teacher_iterations = 0;
  const Denoiser untrained = train_teacher(untrained_cfg, untrained_rng);
  Rng rng(5);
  const Denoiser trained = train_teacher(cfg, rng);
  Rng e1(6), e2(6);
  const double base = evaluate_samples(cfg, untrained, e1).sw;
  const double sw = evaluate_samples(cfg, trained, e2).sw;
  RecordProperty("untrained_sw", std::to_string(base));
  RecordProperty("trained_sw", std::to_string(sw));
  EXPECT_LE(sw * 10.0, base) << "untrained " << base << " trained " << sw;
}

using testing::fixed_batch;
using testing::reference_terms;
using testing::Batch;
using testing::Reference;

TEST(LossStackTest, ReductionIdentities) {
  HarnessConfig base = tiny_config();
  Rng init(7);
  const Denoiser teacher(base.sample_shape(), base.teacher_widths, base.steps, init);
  const Denoiser student(base.sample_shape(), base.student_widths, base.steps, init);
  const LinearMap regressor(4, 16, init);
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const Batch b = fixed_batch(base, rng);
    const ForwardResult t = teacher.forward(b.x_t, b.t);
    const ForwardResult s = student.forward(b.x_t, b.t);
    for (const char* name : {"finetune", "outkd", "outkd+featkd"}) {
      HarnessConfig cfg = base;
      cfg.method = Method::parse(name);
      cfg.diff_target = i % 2 ? DiffTarget::Noise : DiffTarget::Teacher;
      const LossEvaluation ev = evaluate_loss_stack(cfg, {b.noise, t, s}, regressor, i, false);
      const Reference ref = reference_terms(cfg, b.noise, t, s, regressor);
      EXPECT_NEAR(ev.breakdown.l_diff, ref.l_diff, 1e-12);
      EXPECT_NEAR(ev.breakdown.l_outkd, ref.l_outkd, 1e-12);
      EXPECT_NEAR(ev.breakdown.l_featkd, ref.l_featkd, 1e-12);
      EXPECT_NEAR(ev.breakdown.total, ref.total, 1e-12);
    }
    // With lambda = 0 the LIFT/PLACE stack collapses to fine-tuning.
    HarnessConfig zero = base;
    zero.method = Method::parse("place+featkd");
    zero.lambda_lift = zero.lambda_featkd = zero.lambda_outkd = 0.0;
    HarnessConfig ft = base;
    ft.method = Method::parse("finetune");
    EXPECT_EQ(evaluate_loss_stack(zero, {b.noise, t, s}, regressor, i, false).breakdown.total,
              evaluate_loss_stack(ft, {b.noise, t, s}, regressor, i, false).breakdown.total);
  }
}

TEST(LossStackTest, TeacherTargetMakesDiffEqualOutKd) {
  HarnessConfig cfg = tiny_config();
  cfg.diff_target = DiffTarget::Teacher;
  cfg.method = Method::parse("outkd");
  Rng init(9);
  const Denoiser teacher(cfg.sample_shape(), cfg.teacher_widths, cfg.steps, init);
  const Denoiser student(cfg.sample_shape(), cfg.student_widths, cfg.steps, init);
  Rng rng(10);
  const Batch b = fixed_batch(cfg, rng);
  const LossEvaluation ev = evaluate_loss_stack(cfg, {b.noise, teacher.forward(b.x_t, b.t), student.forward(b.x_t, b.t)},
                                                LinearMap(), 0, false);
  EXPECT_EQ(ev.breakdown.l_diff, ev.breakdown.l_outkd);
}

// Every parameter of a random 3-layer student under the full objective.
TEST(LossStackTest, ParameterGradientsMatchFiniteDifferences) {
  for (const char* name : {"lift+featkd", "place+featkd", "outkd+featkd"}) {
    HarnessConfig cfg = tiny_config();
    cfg.method = Method::parse(name);
    cfg.student_widths = {5, 4, 3};
    cfg.batch_size = 16;
    cfg.group_size = 4;
    cfg.scheduler = WeightScheduler::Kind::Fixed;
    cfg.fixed_w = 0.6;
    cfg.coeff_grad = CoeffGrad::Full;
    cfg.lambda_featkd = 0.5;
    Rng init(11);
    const Denoiser teacher(cfg.sample_shape(), cfg.teacher_widths, cfg.steps, init);
    const Denoiser student(cfg.sample_shape(), cfg.student_widths, cfg.steps, init);
    const LinearMap regressor(3, 16, init);
    Rng rng(12);
    const Batch b = fixed_batch(cfg, rng);
    const ForwardResult t = teacher.forward(b.x_t, b.t);
    const ForwardResult s = student.forward(b.x_t, b.t);

    const LossEvaluation ev = evaluate_loss_stack(cfg, {b.noise, t, s}, regressor, 0, true);
    const auto grads = student.backward(s.tape, ev.grads.d_eps_total, ev.grads.feature_grads);

    const auto fd = testing::central_difference(
        [&](std::span<const double> p) {
          Denoiser d = student;
          std::copy(p.begin(), p.end(), d.parameters().begin());
          return evaluate_loss_stack(cfg, {b.noise, t, d.forward(b.x_t, b.t)}, regressor, 0, false)
              .breakdown.total;
        },
        {student.parameters().begin(), student.parameters().end()});
    EXPECT_LT(relative_error(grads, fd), 1e-5) << name;

    const auto fd_r = testing::central_difference(
        [&](std::span<const double> p) {
          LinearMap m = regressor;
          std::copy(p.begin(), p.end(), m.parameters().begin());
          return evaluate_loss_stack(cfg, {b.noise, t, s}, m, 0, false).breakdown.total;
        },
        {regressor.parameters().begin(), regressor.parameters().end()});
    EXPECT_LT(relative_error(ev.grads.d_regressor, fd_r), 1e-5) << name;
  }
}

TEST(DistillTest, BookkeepingAndFrozenTeacher) {
  HarnessConfig cfg = tiny_config();
  cfg.dataset = DatasetKind::GridPatterns;
  cfg.batch_size = 8;
  cfg.method = Method::parse("place+featkd");
  cfg.lambda_lift = 0.7;
  cfg.lambda_featkd = 0.01;
  Rng rng(13);
  const Denoiser teacher = train_teacher(cfg, rng);
  const std::vector<double> before(teacher.parameters().begin(), teacher.parameters().end());
  const RunReport rep = distill(cfg, teacher, 1);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), teacher.parameters().begin()));
  ASSERT_EQ(rep.log.size(), static_cast<std::size_t>(cfg.iterations));
  ASSERT_EQ(rep.grad_norms.size(), rep.log.size());
  for (std::size_t i = 0; i < rep.log.size(); ++i) {
    const LossBreakdown& b = rep.log[i];
    EXPECT_EQ(b.iter, static_cast<long>(i));
    const double sum = cfg.lambda_diff * b.l_diff + cfg.lambda_lift * b.l_lift + cfg.lambda_featkd * b.l_featkd;
    EXPECT_NEAR(b.total, sum, 1e-12);
    EXPECT_GT(rep.grad_norms[i], 0.0);
    EXPECT_GE(b.w, 0.0);
    EXPECT_LE(b.w, 1.0);
  }
  EXPECT_TRUE(std::isfinite(rep.final_sw));
}

TEST(DistillTest, DeterministicLogs) {
  HarnessConfig cfg = tiny_config();
  Rng a(14), b(14);
  const Denoiser t1 = train_teacher(cfg, a);
  const Denoiser t2 = train_teacher(cfg, b);
  const auto dir = std::filesystem::temp_directory_path();
  write_run_csv(distill(cfg, t1, 3), dir / "liftkd_det_a.csv");
  write_run_csv(distill(cfg, t2, 3), dir / "liftkd_det_b.csv");
  const std::string text = slurp(dir / "liftkd_det_a.csv");
  EXPECT_EQ(text, slurp(dir / "liftkd_det_b.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,l_diff,l_outkd,l_coarse,l_fine,w,l_lift,l_featkd,total,grad_norm");
  std::filesystem::remove(dir / "liftkd_det_a.csv");
  std::filesystem::remove(dir / "liftkd_det_b.csv");
}

TEST(DistillTest, DivergenceCarriesPartialReport) {
  HarnessConfig cfg = tiny_config();
  cfg.lr = 1e3;
  cfg.method = Method::parse("outkd");
  try {
    distill(cfg, poisoned(cfg, 15), 0);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    ASSERT_TRUE(e.partial().has_value());
    EXPECT_TRUE(e.partial()->diverged);
    EXPECT_EQ(e.partial()->diverged_step, 0);
    EXPECT_EQ(e.partial()->log.size(), static_cast<std::size_t>(e.step()));
  }
}

TEST(DistillTest, SelfDistillationDrivesOutKdDown) {
  HarnessConfig cfg = tiny_config();
  cfg.teacher_widths = cfg.student_widths = {32, 32};
  cfg.method = Method::parse("outkd");
  cfg.lambda_diff = 0.0;
  cfg.teacher_iterations = 500;
  cfg.iterations = 3000;
  cfg.batch_size = 64;
  cfg.lr = 2e-3;
  Rng rng(16);
  const Denoiser teacher = train_teacher(cfg, rng);
  const RunReport rep = distill(cfg, teacher, 0);
  double tail = 0.0;
  for (std::size_t i = rep.log.size() - 100; i < rep.log.size(); ++i) tail += rep.log[i].l_outkd;
  tail /= 100.0;
  RecordProperty("tail_outkd", std::to_string(tail));
  EXPECT_LT(tail, 1e-3);
}

TEST(CapacityGapTest, SingleCellAndRepeatedSeeds) {
  HarnessConfig cfg = tiny_config();
  cfg.grid_methods = {Method::parse("outkd")};
  const GridResult one = capacity_gap_experiment(cfg);
  ASSERT_EQ(one.runs.size(), 1u);
  ASSERT_EQ(one.cells.size(), 1u);
  EXPECT_EQ(one.cells[0].std, 0.0);
  EXPECT_EQ(one.cells[0].mean, one.runs[0].final_sw);

  cfg.seeds = {5, 5};
  const GridResult twice = capacity_gap_experiment(cfg);
  EXPECT_EQ(twice.runs[0].final_sw, twice.runs[1].final_sw);
  EXPECT_EQ(twice.cells[0].std, 0.0);
}

TEST(CapacityGapTest, WorkersDoNotChangeResults) {
  HarnessConfig cfg = tiny_config();
  cfg.seeds = {0, 1, 2};
  cfg.grid_students = {{4, 4}, {8}};
  Rng rng(mix_seed(cfg.seed, streams::kTeacherTrain));
  const std::vector<Denoiser> teachers{train_teacher(cfg, rng)};
  const GridResult serial = capacity_gap_experiment(cfg, 1, &teachers);
  const GridResult parallel = capacity_gap_experiment(cfg, 3, &teachers);
  ASSERT_EQ(serial.runs.size(), 12u);
  ASSERT_EQ(serial.cells.size(), 4u);
  for (std::size_t i = 0; i < serial.runs.size(); ++i) {
    EXPECT_EQ(serial.runs[i].final_sw, parallel.runs[i].final_sw);
    EXPECT_EQ(serial.runs[i].seed, parallel.runs[i].seed);
  }
  const auto path = std::filesystem::temp_directory_path() / "liftkd_grid_test.csv";
  write_grid_csv(serial, path);
  const std::string text = slurp(path);
  std::filesystem::remove(path);
  EXPECT_EQ(text.substr(0, text.find('\n')), "method,teacher_params,student_params,seed,final_sw,mean,std,diverged");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 13);
}

TEST(CapacityGapTest, DivergedRunsAreFlaggedAndExcluded) {
  HarnessConfig cfg = tiny_config();
  cfg.grid_methods = {Method::parse("outkd")};
  cfg.seeds = {0, 1};
  const std::vector<Denoiser> teachers{poisoned(cfg, 17)};
  const GridResult g = capacity_gap_experiment(cfg, 1, &teachers);
  EXPECT_EQ(g.cells[0].diverged, 2u);
  EXPECT_EQ(g.cells[0].completed, 0u);
  EXPECT_TRUE(std::isnan(g.cells[0].mean));
}

TEST(SchedulerAblationTest, ThreeRunsAndCsv) {
  HarnessConfig cfg = tiny_config();
  cfg.method = Method::parse("lift");
  Rng rng(18);
  const Denoiser teacher = train_teacher(cfg, rng);
  const SchedulerAblation ab = ablate_scheduler(cfg, teacher);
  ASSERT_EQ(ab.kinds.size(), 3u);
  EXPECT_EQ(ab.reports[1].log.front().w, 0.0);
  EXPECT_EQ(ab.reports[2].log.front().w, 0.0);
  const auto path = std::filesystem::temp_directory_path() / "liftkd_ablation_test.csv";
  write_ablation_csv(ab, path);
  const std::string text = slurp(path);
  std::filesystem::remove(path);
  EXPECT_EQ(text.substr(0, text.find('\n')), "scheduler,final_sw,mean_err,cov_err,final_total");
  EXPECT_NE(text.find("\ncosine,"), std::string::npos);

  cfg.method = Method::parse("outkd");
  EXPECT_THROW(ablate_scheduler(cfg, teacher), std::invalid_argument);
}

}  // namespace
}  // namespace liftkd
