#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

#include "cma/autograd.hpp"

using namespace cma;
namespace ag = cma::ag;

namespace {

// Central finite differences on a scalar-valued graph builder. The builder
// receives the leaf matrices and must return the scalar root.
double max_rel_error(
    std::vector<Mat> leaves,
    const std::function<ag::Ref(ag::Tape&, const std::vector<Mat>&)>& build,
    double h = 1e-6) {
  ag::Tape tape;
  std::vector<ag::Ref> refs;
  ag::Ref root = build(tape, leaves);
  tape.backward(root);

  // leaves are the first nodes on the tape, in order
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Mat& analytic = tape.has_grad(static_cast<int>(li))
                              ? tape.grad(static_cast<int>(li))
                              : Mat::Zero(leaves[li].rows(), leaves[li].cols());
    for (Eigen::Index r = 0; r < leaves[li].rows(); ++r) {
      for (Eigen::Index c = 0; c < leaves[li].cols(); ++c) {
        std::vector<Mat> lp = leaves;
        std::vector<Mat> lm = leaves;
        lp[li](r, c) += h;
        lm[li](r, c) -= h;
        ag::Tape tp, tm;
        const double fp = tp.val(build(tp, lp))(0, 0);
        const double fm = tm.val(build(tm, lm))(0, 0);
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic(r, c);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, std::abs(fd - an) / denom);
      }
    }
  }
  return worst;
}

Mat randm(Eigen::Index r, Eigen::Index c, Rng& rng, double s = 1.0) {
  return gaussian_matrix(r, c, s, rng);
}

}  // namespace

TEST_CASE("matmul chain gradients match finite differences") {
  Rng rng(7);
  std::vector<Mat> leaves{randm(3, 4, rng), randm(4, 5, rng), randm(3, 5, rng)};
  auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
    auto a = t.leaf(L[0]);
    auto b = t.leaf(L[1]);
    auto c = t.leaf(L[2]);
    return ag::sum_all(ag::cmul(ag::matmul(a, b), c));
  };
  REQUIRE(max_rel_error({leaves}, build) < 1e-6);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(11);
  SECTION("relu, tanh, sigmoid composite") {
    std::vector<Mat> leaves{randm(4, 3, rng)};
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto x = t.leaf(L[0]);
      return ag::sum_all(ag::sigmoid(ag::tanh_(ag::relu(x))));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
  SECTION("log_floored above the floor") {
    Mat x(2, 2);
    x << 0.5, 1.5, 2.0, 0.25;
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      return ag::sum_all(ag::log_floored(t.leaf(L[0]), 1e-12));
    };
    REQUIRE(max_rel_error({x}, build) < 1e-6);
  }
  SECTION("log_floored below the floor has zero gradient") {
    Mat x(1, 1);
    x << 1e-15;
    ag::Tape t;
    auto xr = t.leaf(x);
    auto root = ag::sum_all(ag::log_floored(xr, 1e-12));
    t.backward(root);
    REQUIRE(t.grad(xr.idx)(0, 0) == 0.0);
  }
}

TEST_CASE("broadcast op gradients") {
  Rng rng(13);
  std::vector<Mat> leaves{randm(4, 6, rng), randm(4, 1, rng)};
  SECTION("add_colvec") {
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto a = t.leaf(L[0]);
      auto b = t.leaf(L[1]);
      return ag::sum_all(ag::tanh_(ag::add_colvec(a, b)));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
  SECTION("cmul_colvec") {
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto a = t.leaf(L[0]);
      auto b = t.leaf(L[1]);
      return ag::sum_all(ag::tanh_(ag::cmul_colvec(a, b)));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
}

TEST_CASE("softmax_rows") {
  Rng rng(17);
  SECTION("rows are probability distributions") {
    ag::Tape t;
    auto y = ag::softmax_rows(t.leaf(randm(5, 7, rng, 3.0)));
    const Mat& v = t.val(y);
    REQUIRE((v.array() >= 0.0).all());
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      REQUIRE(v.row(r).sum() == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("gradient matches finite differences") {
    std::vector<Mat> leaves{randm(3, 5, rng), randm(3, 5, rng)};
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto a = t.leaf(L[0]);
      auto b = t.leaf(L[1]);
      return ag::sum_all(ag::cmul(ag::softmax_rows(a), b));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
  SECTION("non-finite logits raise") {
    ag::Tape t;
    Mat bad(1, 2);
    bad << 1.0, std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(ag::softmax_rows(t.leaf(bad)), NumericalError);
  }
}

TEST_CASE("layernorm_cols") {
  Rng rng(19);
  SECTION("normalizes each column") {
    ag::Tape t;
    Mat x = randm(6, 4, rng, 2.0);
    auto y = ag::layernorm_cols(t.leaf(x), t.leaf(Mat::Ones(6, 1)),
                                t.leaf(Mat::Zero(6, 1)));
    const Mat& v = t.val(y);
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      REQUIRE(v.col(c).mean() == Catch::Approx(0.0).margin(1e-9));
      REQUIRE(v.col(c).squaredNorm() / 6.0 ==
              Catch::Approx(1.0).epsilon(1e-3));
    }
  }
  SECTION("gradients for x, gamma, beta") {
    std::vector<Mat> leaves{randm(5, 3, rng), randm(5, 1, rng),
                            randm(5, 1, rng), randm(5, 3, rng)};
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto x = t.leaf(L[0]);
      auto g = t.leaf(L[1]);
      auto b = t.leaf(L[2]);
      auto w = t.leaf(L[3]);
      return ag::sum_all(ag::cmul(ag::layernorm_cols(x, g, b), w));
    };
    REQUIRE(max_rel_error(leaves, build, 1e-5) < 1e-5);
  }
}

TEST_CASE("structure ops") {
  Rng rng(23);
  SECTION("concat/slice/transpose gradients") {
    std::vector<Mat> leaves{randm(3, 4, rng), randm(2, 4, rng)};
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto l0 = t.leaf(L[0]);
      auto l1 = t.leaf(L[1]);
      auto cat = ag::concat_rows(l0, l1);
      auto s = ag::slice_rows(cat, 1, 3);
      auto u = ag::slice_cols(s, 0, 2);
      return ag::sum_all(ag::cmul(ag::transpose(u), ag::transpose(u)));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
  SECTION("gather_cols accumulates duplicates") {
    std::vector<Mat> leaves{randm(3, 4, rng)};
    auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
      auto g = ag::gather_cols(t.leaf(L[0]), {2, 2, 0});
      return ag::sum_all(ag::cmul(g, g));
    };
    REQUIRE(max_rel_error(leaves, build) < 1e-6);
  }
  SECTION("gather_rows out of range raises") {
    ag::Tape t;
    auto a = t.leaf(Mat::Zero(2, 2));
    REQUIRE_THROWS_AS(ag::gather_rows(a, {5}), DataError);
  }
}

TEST_CASE("fan-out accumulates gradients from all uses") {
  Rng rng(29);
  std::vector<Mat> leaves{randm(3, 3, rng)};
  auto build = [](ag::Tape& t, const std::vector<Mat>& L) {
    auto x = t.leaf(L[0]);
    auto a = ag::tanh_(x);
    auto b = ag::relu(x);
    return ag::sum_all(ag::add(ag::cmul(a, b), ag::scale(x, 0.5)));
  };
  REQUIRE(max_rel_error(leaves, build) < 1e-6);
}
