#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cma/grounding.hpp"
#include "cma/interval.hpp"
#include "fd_check.hpp"

using namespace cma;
namespace ag = cma::ag;

TEST_CASE("single-clip pooling is the identity") {
  Rng rng(3);
  const int d = 4;
  Mat f = gaussian_matrix(d, 1, 1.0, rng);

  ag::Tape t;
  ag::Ref fr = t.leaf(f);
  ag::GroundingRefs g{t.leaf(gaussian_matrix(d, d, 0.5, rng)),
                      t.leaf(gaussian_matrix(d, 1, 0.5, rng))};
  auto pool = ag::temporal_pool_node(fr, g);
  CHECK(t.val(pool.weights)(0, 0) == 1.0);
  CHECK((t.val(pool.pooled) - f).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical clips pool uniformly to the shared column") {
  Rng rng(5);
  const int d = 4, n = 5;
  Mat col = gaussian_matrix(d, 1, 1.0, rng);
  Mat f(d, n);
  for (int j = 0; j < n; ++j) f.col(j) = col;

  ag::Tape t;
  ag::Ref fr = t.leaf(f);
  ag::GroundingRefs g{t.leaf(gaussian_matrix(d, d, 0.5, rng)),
                      t.leaf(gaussian_matrix(d, 1, 0.5, rng))};
  auto pool = ag::temporal_pool_node(fr, g);
  for (int j = 0; j < n; ++j)
    CHECK(t.val(pool.weights)(0, j) == Catch::Approx(1.0 / n).margin(1e-12));
  CHECK((t.val(pool.pooled) - col).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("temporal pooling matches a scalar oracle") {
  Rng rng(7);
  const int d = 2, n = 3;
  Mat f = gaussian_matrix(d, n, 1.0, rng);
  Mat w_b = gaussian_matrix(d, d, 0.7, rng);
  Mat u = gaussian_matrix(d, 1, 0.7, rng);

  ag::Tape t;
  ag::Ref fr = t.leaf(f);
  ag::GroundingRefs g{t.leaf(w_b), t.leaf(u)};
  ForwardTrace trace;
  auto pool = ag::temporal_pool_node(fr, g, &trace);

  // straight-line recomputation
  Mat b(d, n);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += w_b(r, j) * f(j, c);
      b(r, c) = std::tanh(acc);
    }
  Vec s(n);
  for (int c = 0; c < n; ++c) {
    double acc = 0.0;
    for (int r = 0; r < d; ++r) acc += u(r, 0) * b(r, c);
    s(c) = acc;
  }
  const double mx = s.maxCoeff();
  double z = 0.0;
  for (int c = 0; c < n; ++c) z += std::exp(s(c) - mx);
  Vec a(n);
  for (int c = 0; c < n; ++c) a(c) = std::exp(s(c) - mx) / z;
  Vec pooled = Vec::Zero(d);
  for (int c = 0; c < n; ++c) pooled += f.col(c) * a(c);

  for (int c = 0; c < n; ++c)
    CHECK(t.val(pool.weights)(0, c) == Catch::Approx(a(c)).margin(1e-14));
  CHECK((t.val(pool.pooled).col(0) - pooled).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(trace.distributions.size() == 1);
  CHECK(trace.distributions[0].first == "ground.a");
}

TEST_CASE("pooled vector stays in the span of observed attention") {
  Rng rng(9);
  const int d = 3, n = 6;
  Mat f = gaussian_matrix(d, n, 1.0, rng);

  ag::Tape t;
  ag::Ref fr = t.leaf(f);
  ag::GroundingRefs g{t.leaf(gaussian_matrix(d, d, 0.8, rng)),
                      t.leaf(gaussian_matrix(d, 1, 0.8, rng))};
  auto pool = ag::temporal_pool_node(fr, g);

  const Mat& w = t.val(pool.weights);
  CHECK(std::abs(w.sum() - 1.0) < 1e-6);
  CHECK((w.array() >= 0.0).all());
  // convex combination bounds per dimension
  for (int r = 0; r < d; ++r) {
    CHECK(t.val(pool.pooled)(r, 0) <= f.row(r).maxCoeff() + 1e-12);
    CHECK(t.val(pool.pooled)(r, 0) >= f.row(r).minCoeff() - 1e-12);
  }
}

TEST_CASE("constant regression head predicts its bias") {
  const int d = 4;
  ag::Tape t;
  ag::Ref pooled = t.leaf(Mat::Ones(d, 1));
  Mat b2(2, 1);
  b2 << 0.2, 0.8;
  ag::HeadRefs h{t.leaf(Mat::Zero(d / 2, d)), t.leaf(Mat::Zero(d / 2, 1)),
                 t.leaf(Mat::Zero(2, d / 2)), t.leaf(b2)};
  ag::Ref pred = ag::regress_boundaries_node(pooled, h);
  TimeInterval iv = ag::interval_from_node(t, pred);
  CHECK(iv.start == 0.2);
  CHECK(iv.end == 0.8);
}

TEST_CASE("raw predictions are clamped only for metrics") {
  TimeInterval raw{-0.1, 1.3};
  TimeInterval fixed = sanitize_for_metrics(raw);
  CHECK(fixed.start == 0.0);
  CHECK(fixed.end == 1.0);
  CHECK(raw.start == -0.1);  // original untouched
}

TEST_CASE("regression head matches straight-line recomputation") {
  Rng rng(11);
  const int d = 4;
  Mat pooled = gaussian_matrix(d, 1, 1.0, rng);
  Mat w1 = gaussian_matrix(d / 2, d, 0.6, rng);
  Mat b1 = gaussian_matrix(d / 2, 1, 0.3, rng);
  Mat w2 = gaussian_matrix(2, d / 2, 0.6, rng);
  Mat b2 = gaussian_matrix(2, 1, 0.3, rng);

  ag::Tape t;
  ag::Ref pr = t.leaf(pooled);
  ag::HeadRefs h{t.leaf(w1), t.leaf(b1), t.leaf(w2), t.leaf(b2)};
  ag::Ref pred = ag::regress_boundaries_node(pr, h);

  Vec hidden = ((w1 * pooled).col(0) + b1.col(0)).cwiseMax(0.0);
  Vec expect = (w2 * hidden) + b2.col(0);
  CHECK((t.val(pred).col(0) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("grounding gradients match finite differences") {
  Rng rng(13);
  const int d = 4, n = 3;
  Mat f = gaussian_matrix(d, n, 1.0, rng);
  Mat w_b = gaussian_matrix(d, d, 0.6, rng);
  Mat u = gaussian_matrix(d, 1, 0.6, rng);
  Mat w1 = gaussian_matrix(d / 2, d, 0.6, rng);
  Mat b1 = gaussian_matrix(d / 2, 1, 0.3, rng);
  Mat w2 = gaussian_matrix(2, d / 2, 0.6, rng);
  Mat b2 = gaussian_matrix(2, 1, 0.3, rng);

  auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
    ag::Ref fr = t.leaf(L[0]);
    ag::GroundingRefs g{t.leaf(L[1]), t.leaf(L[2])};
    ag::HeadRefs h{t.leaf(L[3]), t.leaf(L[4]), t.leaf(L[5]), t.leaf(L[6])};
    auto pool = ag::temporal_pool_node(fr, g);
    ag::Ref pred = ag::regress_boundaries_node(pool.pooled, h);
    return ag::sum_all(ag::cmul(pred, pred));
  };
  CHECK(cmatest::fd_max_rel_error({f, w_b, u, w1, b1, w2, b2}, build) < 1e-4);
}
