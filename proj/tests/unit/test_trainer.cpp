// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "qprobe/backprop.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/network.hpp"
#include "qprobe/parallel.hpp"
#include "qprobe/report.hpp"
#include "qprobe/trainer.hpp"

using namespace qprobe;

namespace {

TrainConfig teacher(std::size_t steps) {
  TrainConfig c;
  c.task = TaskKind::linear_teacher;
  c.net = {2, 16, 2, 8};
  c.steps = steps;
  c.optimizer.lr = 3e-3;
  c.seed = 3;
  return c;
}

TrainConfig char_lm(std::size_t steps) {
  TrainConfig c = teacher(steps);
  c.task = TaskKind::synthetic_char_lm;
  c.net = {1, 16, 2, 8};
  c.optimizer.lr = 1e-2;
  return c;
}

NetworkSpec single(ModuleSpec m, std::size_t width) { return NetworkSpec{{std::move(m)}, width, 4}; }

}  // namespace

TEST(Train, ZeroLrLeavesWeightsUnchanged) {
  TrainConfig c = teacher(1);
  c.optimizer.lr = 0.0;
  const RunRecord run = train(c);
  EXPECT_EQ(run.steps_run, 1u);
  EXPECT_EQ(model_content_hash(run.model), model_content_hash(init_model(c)));
}

TEST(Train, DeterministicAcrossRunsAndThreadCounts) {
  const TrainConfig c = char_lm(20);
  const std::size_t saved = thread_count();
  set_thread_count(1);
  const RunRecord a = train(c);
  set_thread_count(4);
  const RunRecord b = train(c);
  set_thread_count(saved);
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.content_hash, b.content_hash);
  ASSERT_EQ(a.val_loss.size(), b.val_loss.size());
  for (std::size_t i = 0; i < a.val_loss.size(); ++i) EXPECT_EQ(a.val_loss[i].loss, b.val_loss[i].loss);
}

TEST(Train, LinearTeacherConverges) {
  TrainConfig c = teacher(300);
  c.net = {2, 16, 2, 8};
  const RunRecord run = train(c);
  ASSERT_GE(run.val_loss.size(), 2u);
  EXPECT_EQ(run.val_loss.front().step, 0u);
  EXPECT_EQ(run.val_loss.back().step, 300u);
  EXPECT_LE(run.val_loss.back().loss, 0.1 * run.val_loss.front().loss);
}

TEST(Train, QatRunIsDeterministic) {
  TrainConfig c = teacher(15);
  c.quant = quest_config(4);
  const RunRecord a = train(c);
  const RunRecord b = train(c);
  EXPECT_EQ(a.train_loss, b.train_loss);
  for (double l : a.train_loss) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, StopAtLoss) {
  TrainConfig c = teacher(200);
  const RunRecord full = train(c);
  // Pick a target that the run crosses somewhere in the middle.
  const double target = full.val_loss[full.val_loss.size() / 2].loss;
  c.stop_at_loss = target;
  const RunRecord run = train(c);
  EXPECT_TRUE(run.stopped_early);
  ASSERT_GE(run.val_loss.size(), 2u);
  EXPECT_LE(run.val_loss.back().loss, target);
  EXPECT_GT(run.val_loss[run.val_loss.size() - 2].loss, target);
  EXPECT_EQ(run.steps_run, run.val_loss.back().step);
  EXPECT_LT(run.steps_run, 200u);

  c.stop_at_loss = 1e9;  // already met at initialization
  const RunRecord instant = train(c);
  EXPECT_TRUE(instant.stopped_early);
  EXPECT_EQ(instant.steps_run, 0u);
}

TEST(Train, DivergenceNamesTheStep) {
  TrainConfig c = teacher(50);
  c.optimizer.kind = OptimizerKind::scion;
  c.optimizer.lr = 1e200;
  try {
    train(c);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(SelectBestArm, ClosedFormQuadraticBand) {
  // Gradient descent on f(x) = lambda/2 x^2 for T steps has
  // f_T = f_0 (1 - lr lambda)^(2T); the best lr is 1/lambda and anything
  // past 2/lambda blows up.
  const double lambda = 2.0;
  const int T = 20;
  std::vector<SweepArm> arms;
  for (double lr = 0.05; lr <= 2.0 + 1e-12; lr += 0.05) {
    SweepArm arm;
    arm.lr = lr;
    const double f = 0.5 * lambda * std::pow(1.0 - lr * lambda, 2 * T);
    if (!std::isfinite(f) || f > 0.5 * lambda) {
      arm.diverged = true;
    } else {
      arm.final_val_loss = f;
    }
    arms.push_back(arm);
  }
  const SweepArm& best = arms[select_best_arm(arms)];
  EXPECT_GE(best.lr, 0.45);
  EXPECT_LE(best.lr, 0.55);
}

TEST(SelectBestArm, TiesGoToSmallerLrAndAllDivergedThrows) {
  std::vector<SweepArm> arms(3);
  arms[0] = {0.3, 0, false, 1.0, ""};
  arms[1] = {0.1, 1, false, 1.0, ""};
  arms[2] = {0.01, 2, true, std::nullopt, "boom"};
  EXPECT_EQ(select_best_arm(arms), 1u);
  for (auto& a : arms) a.diverged = true;
  EXPECT_THROW(select_best_arm(arms), NumericalError);
}

TEST(LrSweep, SingleLrAndDivergentArmExcluded) {
  const TrainConfig c = teacher(20);
  const std::vector<double> one{3e-3};
  const SweepResult s1 = lr_sweep(c, one);
  EXPECT_EQ(s1.best_lr, 3e-3);
  EXPECT_EQ(s1.arms.size(), 1u);

  TrainConfig sc = c;
  sc.optimizer.kind = OptimizerKind::scion;
  const std::vector<double> lrs{1e-3, 1e200};
  const SweepResult s2 = lr_sweep(sc, lrs);
  EXPECT_EQ(s2.best_lr, 1e-3);
  EXPECT_TRUE(s2.arms[1].diverged);
  EXPECT_FALSE(s2.arms[1].error.empty());
  EXPECT_EQ(s2.arms[1].seed, sc.seed + 1);

  const std::vector<double> bad{1e200};
  EXPECT_THROW(lr_sweep(sc, bad), NumericalError);
}

TEST(Ptq, HighPrecisionIsNearlyLossless) {
  const RunRecord run = train(teacher(40));
  QuantConfig q;
  q.bits = 32;
  const PtqResult r = ptq_apply(run, q);
  EXPECT_LE(std::abs(r.loss_delta), 1e-6);
  EXPECT_EQ(r.loss_delta, r.loss_after - r.loss_before);
}

TEST(Ptq, FewerBitsHurtMore) {
  const RunRecord run = train(teacher(100));
  QuantConfig q2, q4;
  q2.bits = 2;
  q4.bits = 4;
  EXPECT_GT(ptq_apply(run, q2).loss_delta, ptq_apply(run, q4).loss_delta);
  EXPECT_GT(ptq_apply(run, q4).r_final, 0.0);
}

TEST(Ptq, GoldenSeed7Delta) {
  TrainConfig c = char_lm(60);
  c.seed = 7;
  const RunRecord run = train(c);
  QuantConfig q;
  q.bits = 4;
  const double delta = ptq_apply(run, q).loss_delta;
  const std::filesystem::path golden = std::filesystem::path(QPROBE_GOLDEN_DIR) / "ptq_seed7_delta.txt";
  if (std::getenv("QPROBE_UPDATE_GOLDEN")) {
    std::ofstream(golden) << format_double(delta) << "\n";
  }
  std::ifstream in(golden);
  ASSERT_TRUE(in) << golden;
  double want = 0.0;
  in >> want;
  EXPECT_NEAR(delta, want, 1e-12 * std::max(1.0, std::abs(want)));
}

TEST(RunIo, WriteReadRoundTrip) {
  const RunRecord run = train(char_lm(12));
  const auto dir = std::filesystem::temp_directory_path() / "qprobe_test_runio";
  std::filesystem::remove_all(dir);
  write_run(run, dir);
  const RunRecord back = read_run(dir);
  EXPECT_EQ(back.config, run.config);
  EXPECT_EQ(back.train_loss, run.train_loss);
  EXPECT_EQ(back.content_hash, run.content_hash);
  EXPECT_EQ(model_content_hash(back.model), model_content_hash(run.model));
  EXPECT_EQ(validation_loss(back.config, back.model), validation_loss(run.config, run.model));
  std::ifstream csv(dir / "loss_curve.csv");
  std::stringstream ss;
  ss << csv.rdbuf();
  EXPECT_EQ(ss.str(), loss_curve_csv(run));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_run(dir), InputError);
}

TEST(TrainConfig, JsonRoundTripAndUnknownField) {
  TrainConfig c = char_lm(7);
  c.quant = quest_config(3);
  c.stop_at_loss = 0.25;
  EXPECT_EQ(train_config_from_json(train_config_to_json(c)), c);
  EXPECT_THROW(train_config_from_json(R"({"task":"linear_teacher","bogus":1})"), InputError);
  EXPECT_NE(config_hash(c), config_hash(teacher(7)));
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  const Matrix logits = rng.normal_matrix(3, 5);
  const std::vector<int> targets{4, 0, 2};
  const Matrix tgt = rng.normal_matrix(3, 5);
  Matrix g_ce, g_mse;
  cross_entropy_loss(logits, targets, &g_ce);
  mse_loss(logits, tgt, &g_mse);
  const double h = 1e-6;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      Matrix p = logits, m = logits;
      p(r, c) += h;
      m(r, c) -= h;
      EXPECT_NEAR((cross_entropy_loss(p, targets) - cross_entropy_loss(m, targets)) / (2 * h), g_ce(r, c), 1e-8);
      EXPECT_NEAR((mse_loss(p, tgt) - mse_loss(m, tgt)) / (2 * h), g_mse(r, c), 1e-8);
    }
  }
  // Uniform logits: loss is log(vocab).
  EXPECT_NEAR(cross_entropy_loss(Matrix(2, 5), std::vector<int>{1, 3}), std::log(5.0), 1e-15);
}

TEST(GradCheck, PureLinear) {
  Rng rng(9);
  const NetworkSpec net = single({Linear{rng.normal_matrix(6, 6)}, false}, 6);
  EXPECT_LE(grad_check(net, rng.normal_matrix(4, 6), rng.normal_matrix(4, 6)).max_rel_error, 1e-7);
}

TEST(GradCheck, Relu2AwayFromKink) {
  Rng rng(10);
  NetworkSpec net{{{Linear{Matrix::identity(6)}, false}, {Relu2{}, false}}, 6, 4};
  Matrix x = rng.normal_matrix(4, 6);
  for (double& v : x.data()) v += v >= 0 ? 0.2 : -0.2;  // |pre-activation| > 0.1
  EXPECT_LE(grad_check(net, x, rng.normal_matrix(4, 6)).max_rel_error, 1e-5);
}

TEST(GradCheck, RmsNormOnly) {
  Rng rng(11);
  const NetworkSpec net = single({RmsNorm{{1.0, 0.5, 2.0, -1.0, 0.7}}, false}, 5);
  EXPECT_LE(grad_check(net, rng.normal_matrix(4, 5), rng.normal_matrix(4, 5)).max_rel_error, 1e-5);
}

TEST(GradCheck, QatSurrogate) {
  Rng rng(12);
  const NetworkSpec net = build_toy_transformer(1, 8, 2, rng, 4);
  GradCheckOptions opt;
  opt.mode = QuantMode::qat;
  opt.quant.clip_grid = {0.3, 0.95, 0.01};
  EXPECT_LE(grad_check(net, rng.normal_matrix(4, 8), rng.normal_matrix(4, 8), opt).max_rel_error, 1e-4);
}

TEST(ForwardTape, QatConvergesToFullPrecisionAsBitsGrow) {
  Rng rng(13);
  const NetworkSpec net = build_toy_transformer(1, 8, 2, rng, 4);
  const Matrix x = rng.normal_matrix(4, 8);
  const Matrix ref = forward_tape(net, x).acts.back();
  TapeOptions qat;
  qat.mode = QuantMode::qat;
  qat.quant.clip_grid = {0.99, 1.0, 0.01};
  double prev = INFINITY;
  for (int bits : {8, 16, 24, 32, 40, kMaxBits}) {
    qat.quant.bits = bits;
    const Matrix out = forward_tape(net, x, qat).acts.back();
    double err = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) err = std::max(err, std::abs(out.data()[i] - ref.data()[i]));
    EXPECT_LT(err, prev) << bits;
    prev = err;
  }
  EXPECT_LE(prev, 1e-9);
}
