#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cma/losses.hpp"
#include "fd_check.hpp"

using namespace cma;
namespace ag = cma::ag;

namespace {

double smooth_l1(double x) {
  return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
}

}  // namespace

TEST_CASE("piecewise_reg frozen values") {
  CHECK(piecewise_reg(0.0, 10.0, 0.1) == 0.0);
  CHECK(piecewise_reg(0.5, 10.0, 0.1) == Catch::Approx(0.9).margin(1e-12));
  CHECK(piecewise_reg(-0.5, 10.0, 0.1) == Catch::Approx(0.9).margin(1e-12));
}

TEST_CASE("piecewise_reg branch continuity at the threshold") {
  const double alpha = 10.0, beta = 0.1;
  const double corner = alpha * beta * beta;  // 0.1
  const double eps = 1e-9;
  CHECK(piecewise_reg(beta - eps, alpha, beta) ==
        Catch::Approx(corner).margin(1e-7));
  CHECK(piecewise_reg(beta + eps, alpha, beta) ==
        Catch::Approx(corner).margin(1e-7));
  CHECK(piecewise_reg(beta, alpha, beta) ==
        Catch::Approx(corner).margin(1e-12));
  // derivative is continuous at the corner too
  CHECK(piecewise_reg_grad(beta - 1e-12, alpha, beta) ==
        Catch::Approx(2.0 * alpha * beta).margin(1e-9));
  CHECK(piecewise_reg_grad(beta, alpha, beta) ==
        Catch::Approx(2.0 * alpha * beta).margin(1e-12));
}

TEST_CASE("piecewise_reg evenness and nonnegativity") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-3.0, 3.0);
    const double a = rng.uniform(0.1, 20.0);
    const double b = rng.uniform(0.01, 1.0);
    CHECK(piecewise_reg(x, a, b) == piecewise_reg(-x, a, b));
    CHECK(piecewise_reg(x, a, b) >= 0.0);
  }
}

TEST_CASE("piecewise_reg reduces to Smooth-L1 at alpha=0.5 beta=1") {
  for (int i = -400; i <= 400; ++i) {
    const double x = i * 0.01;  // dense grid over [-4, 4]
    CHECK(piecewise_reg(x, 0.5, 1.0) ==
          Catch::Approx(smooth_l1(x)).margin(1e-12));
  }
}

TEST_CASE("piecewise_reg derivative matches finite differences") {
  const double h = 1e-6;
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(0.5, 15.0);
    const double b = rng.uniform(0.05, 0.9);
    double x = rng.uniform(-2.0, 2.0);
    if (std::abs(std::abs(x) - b) < 1e-3) continue;  // skip the corner
    const double fd =
        (piecewise_reg(x + h, a, b) - piecewise_reg(x - h, a, b)) / (2.0 * h);
    const double an = piecewise_reg_grad(x, a, b);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    CHECK(std::abs(fd - an) / denom < 1e-6);
  }
}

TEST_CASE("outlier gradients stay bounded") {
  // on the linear branch the gradient magnitude is constant: no blow-up
  CHECK(std::abs(piecewise_reg_grad(10.0, 10.0, 0.1)) ==
        Catch::Approx(std::abs(piecewise_reg_grad(1.0, 10.0, 0.1)))
            .margin(1e-12));
  CHECK(std::abs(piecewise_reg_grad(10.0, 2.0, 0.4)) ==
        Catch::Approx(2.0 * 2.0 * 0.4).margin(1e-12));
}

TEST_CASE("loss config validation") {
  CHECK_NOTHROW(LossConfig{10.0, 0.1, 1.0, 1.0}.validate());
  CHECK_NOTHROW(LossConfig{0.5, 1.0, 1.0, 1.0}.validate());  // Smooth-L1 setting
  CHECK_THROWS_AS((LossConfig{10.0, 0.0, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{10.0, 1.2, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{10.0, -0.1, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{0.0, 0.1, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{-2.0, 0.1, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{10.0, 0.1, -1.0, 1.0}.validate()), ConfigError);
}

TEST_CASE("regression_loss frozen values") {
  LossConfig cfg{10.0, 0.1, 1.0, 1.0};
  CHECK(regression_loss({0.3, 0.8}, {0.3, 0.8}, cfg) == 0.0);
  CHECK(regression_loss({0.0, 1.0}, {0.1, 0.9}, cfg) ==
        Catch::Approx(0.2).margin(1e-9));
  // symmetric in pred/gt because the penalty is even
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    TimeInterval p{rng.uniform(), rng.uniform()};
    TimeInterval g{rng.uniform(), rng.uniform()};
    CHECK(regression_loss(p, g, cfg) ==
          Catch::Approx(regression_loss(g, p, cfg)).margin(1e-12));
  }
}

TEST_CASE("regression_loss residual reduction modes") {
  LossConfig sum{10.0, 0.1, 1.0, 1.0};
  LossConfig mean = sum;
  mean.sum_residuals = false;
  const double s = regression_loss({0.0, 1.0}, {0.1, 0.9}, sum);
  const double m = regression_loss({0.0, 1.0}, {0.1, 0.9}, mean);
  CHECK(m == Catch::Approx(0.5 * s).margin(1e-12));
}

TEST_CASE("attention_support selection rules") {
  // N=4, GT covers exactly clips 1 and 2
  CHECK(attention_support({0.25, 0.75}, 4) == std::vector<int>{1, 2});
  // overlap exactly half the clip span counts
  auto s = attention_support({0.125, 1.0}, 4);
  CHECK(s == std::vector<int>{0, 1, 2, 3});
  // just under half does not
  auto s2 = attention_support({0.130, 1.0}, 4);
  CHECK(s2 == std::vector<int>{1, 2, 3});
  // degenerate interval falls back to the midpoint clip
  CHECK(attention_support({0.4, 0.4}, 4) == std::vector<int>{1});
  // tiny interval inside one clip falls back to that clip
  CHECK(attention_support({0.51, 0.52}, 4) == std::vector<int>{2});
  CHECK_THROWS_AS(attention_support({0.1, 0.9}, 0), ConfigError);
}

TEST_CASE("temporal_attention_loss frozen values") {
  // one-hot at the only in-GT clip
  Vec onehot = Vec::Zero(4);
  onehot(2) = 1.0;
  CHECK(temporal_attention_loss(onehot, {0.5, 0.75}) ==
        Catch::Approx(0.0).margin(1e-12));

  // uniform over 4 clips, GT covering clips 1..2
  Vec uniform = Vec::Constant(4, 0.25);
  CHECK(temporal_attention_loss(uniform, {0.25, 0.75}) ==
        Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("temporal_attention_loss decreases with in-GT mass") {
  // support is {1, 2}; shift mass into it while keeping in-support ratios
  Vec low(4), high(4);
  low << 0.35, 0.15, 0.15, 0.35;
  high << 0.15, 0.35, 0.35, 0.15;
  const TimeInterval gt{0.25, 0.75};
  CHECK(temporal_attention_loss(high, gt) < temporal_attention_loss(low, gt));
}

TEST_CASE("temporal_attention_loss log floor") {
  Vec a = Vec::Zero(4);
  a(0) = 1.0;  // zero weight on the supported clips
  const double v = temporal_attention_loss(a, {0.25, 0.75});
  CHECK(std::isfinite(v));
  CHECK(v == Catch::Approx(-std::log(kLogFloor)).margin(1e-9));
}

TEST_CASE("semantic_diversity_loss frozen values") {
  // orthogonal one-hot rows
  Mat onehots = Mat::Zero(3, 5);
  onehots(0, 0) = onehots(1, 2) = onehots(2, 4) = 1.0;
  CHECK(semantic_diversity_loss(onehots) == Catch::Approx(0.0).margin(1e-12));

  // two identical rows with squared norm s
  Mat dup(2, 4);
  dup.row(0) << 0.5, 0.5, 0.0, 0.0;
  dup.row(1) = dup.row(0);
  const double s = 0.5;
  CHECK(semantic_diversity_loss(dup) ==
        Catch::Approx(2.0 * (s - 1.0) * (s - 1.0) + 2.0 * s * s)
            .margin(1e-12));

  // general random duplicated simplex row against the closed form
  Rng rng(17);
  Vec p(6);
  double tot = 0.0;
  for (int i = 0; i < 6; ++i) {
    p(i) = rng.uniform(0.01, 1.0);
    tot += p(i);
  }
  p /= tot;
  Mat dup2(2, 6);
  dup2.row(0) = p.transpose();
  dup2.row(1) = p.transpose();
  const double s2 = p.squaredNorm();
  CHECK(semantic_diversity_loss(dup2) ==
        Catch::Approx(2.0 * (s2 - 1.0) * (s2 - 1.0) + 2.0 * s2 * s2)
            .margin(1e-12));

  // single one-hot row
  Mat one = Mat::Zero(1, 4);
  one(0, 1) = 1.0;
  CHECK(semantic_diversity_loss(one) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("total_loss composition") {
  LossConfig unit{10.0, 0.1, 1.0, 1.0};
  LossReport r = total_loss(0.2, std::log(4.0), 0.0, unit);
  CHECK(r.total == Catch::Approx(0.2 + std::log(4.0)).margin(1e-12));
  CHECK(r.total == Catch::Approx(1.5863).margin(1e-4));

  LossConfig reg_only{10.0, 0.1, 0.0, 0.0};
  CHECK(total_loss(0.7, 3.0, 5.0, reg_only).total ==
        Catch::Approx(0.7).margin(1e-12));

  CHECK(total_loss(0.0, 0.0, 0.0, unit).total == 0.0);

  // decomposition identity on random parts
  Rng rng(19);
  for (int i = 0; i < 50; ++i) {
    LossConfig c{rng.uniform(0.1, 10.0), rng.uniform(0.05, 1.0),
                 rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)};
    const double reg = rng.uniform(0.0, 3.0), ta = rng.uniform(0.0, 3.0),
                 sd = rng.uniform(0.0, 3.0);
    LossReport rr = total_loss(reg, ta, sd, c);
    CHECK(std::abs(rr.total -
                   (rr.reg + c.lambda_ta * rr.ta + c.lambda_sd * rr.sd)) <
          1e-9);
    CHECK(rr.total >= 0.0);
  }
}

TEST_CASE("tape regression loss matches plain evaluation and gradients") {
  LossConfig cfg{10.0, 0.1, 1.0, 1.0};
  const TimeInterval gt{0.3, 0.7};

  Mat pred(2, 1);
  pred << 0.05, 0.95;  // residuals on the linear branch
  {
    ag::Tape t;
    ag::Ref p = t.leaf(pred);
    ag::Ref loss = ag::regression_loss_node(p, gt, cfg);
    CHECK(t.val(loss)(0, 0) ==
          Catch::Approx(regression_loss({0.05, 0.95}, gt, cfg)).margin(1e-12));
    t.backward(loss);
    CHECK(t.grad(p.idx)(0, 0) ==
          Catch::Approx(piecewise_reg_grad(0.05 - 0.3, cfg.alpha, cfg.beta))
              .margin(1e-12));
    CHECK(t.grad(p.idx)(1, 0) ==
          Catch::Approx(piecewise_reg_grad(0.95 - 0.7, cfg.alpha, cfg.beta))
              .margin(1e-12));
  }

  // finite differences across both branches (points away from the corner)
  Mat pred2(2, 1);
  pred2 << 0.33, 0.9;  // one quadratic-branch residual, one linear
  auto build = [&](ag::Tape& t, const std::vector<Mat>& L) {
    ag::Ref p = t.leaf(L[0]);
    return ag::regression_loss_node(p, gt, cfg);
  };
  CHECK(cmatest::fd_max_rel_error({pred2}, build) < 1e-6);
}

TEST_CASE("tape temporal attention loss matches plain evaluation") {
  const TimeInterval gt{0.25, 0.75};
  Mat logits(1, 4);
  logits << 0.3, 1.2, -0.5, 0.7;

  ag::Tape t;
  ag::Ref z = t.leaf(logits);
  ag::Ref a = ag::softmax_rows(z);
  const auto support = attention_support(gt, 4);
  ag::Ref loss = ag::temporal_attention_loss_node(a, support);

  Vec av = t.val(a).row(0).transpose();
  CHECK(t.val(loss)(0, 0) ==
        Catch::Approx(temporal_attention_loss(av, gt)).margin(1e-12));

  auto build = [&](ag::Tape& tp, const std::vector<Mat>& L) {
    ag::Ref zz = tp.leaf(L[0]);
    return ag::temporal_attention_loss_node(ag::softmax_rows(zz), support);
  };
  CHECK(cmatest::fd_max_rel_error({logits}, build) < 1e-6);
  CHECK_THROWS_AS(ag::temporal_attention_loss_node(a, {}), ConfigError);
}

TEST_CASE("tape semantic diversity loss matches plain evaluation") {
  Rng rng(29);
  Mat A = gaussian_matrix(3, 7, 0.5, rng);

  ag::Tape t;
  ag::Ref a = t.leaf(A);
  ag::Ref loss = ag::semantic_diversity_loss_node(a);
  CHECK(t.val(loss)(0, 0) ==
        Catch::Approx(semantic_diversity_loss(A)).margin(1e-12));

  auto build = [](ag::Tape& tp, const std::vector<Mat>& L) {
    return ag::semantic_diversity_loss_node(tp.leaf(L[0]));
  };
  CHECK(cmatest::fd_max_rel_error({A}, build) < 1e-6);
}
