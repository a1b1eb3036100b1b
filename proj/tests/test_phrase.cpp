#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "cma/phrase.hpp"
#include "fd_check.hpp"

using namespace cma;
namespace ag = cma::ag;

TEST_CASE("single-word query concentrates every phrase row") {
  Rng rng(3);
  const int d = 4, d_s = 2, k = 3;
  Mat q = gaussian_matrix(d, 1, 1.0, rng);

  ag::Tape t;
  ag::Ref qr = t.leaf(q);
  ag::PhraseParamsRefs p{t.leaf(gaussian_matrix(d_s, d, 0.5, rng)),
                         t.leaf(gaussian_matrix(k, d_s, 0.5, rng))};
  auto out = ag::extract_phrases_node(qr, p);

  const Mat& w = t.val(out.weights);
  REQUIRE(w.rows() == k);
  REQUIRE(w.cols() == 1);
  for (int i = 0; i < k; ++i) CHECK(w(i, 0) == 1.0);
  for (int i = 0; i < k; ++i)
    CHECK((t.val(out.guides).col(i) - q.col(0)).cwiseAbs().maxCoeff() <
          1e-15);
}

TEST_CASE("zero logit projection gives uniform rows and mean-word guides") {
  Rng rng(5);
  const int d = 4, d_s = 3, k = 2, L = 5;
  Mat q = gaussian_matrix(d, L, 1.0, rng);

  ag::Tape t;
  ag::Ref qr = t.leaf(q);
  ag::PhraseParamsRefs p{t.leaf(gaussian_matrix(d_s, d, 0.5, rng)),
                         t.leaf(Mat::Zero(k, d_s))};
  auto out = ag::extract_phrases_node(qr, p);

  const Mat& w = t.val(out.weights);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < L; ++j)
      CHECK(w(i, j) == Catch::Approx(1.0 / L).margin(1e-15));
  Vec mean = q.rowwise().mean();
  for (int i = 0; i < k; ++i)
    CHECK((t.val(out.guides).col(i) - mean).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("phrase attention matches straight-line recomputation") {
  Rng rng(7);
  const int d = 4, d_s = 3, k = 2, L = 3;
  Mat q = gaussian_matrix(d, L, 1.0, rng);
  Mat w_s1 = gaussian_matrix(d_s, d, 0.6, rng);
  Mat w_s2 = gaussian_matrix(k, d_s, 0.6, rng);

  ag::Tape t;
  ag::Ref qr = t.leaf(q);
  ag::PhraseParamsRefs p{t.leaf(w_s1), t.leaf(w_s2)};
  auto out = ag::extract_phrases_node(qr, p);

  Mat logits = w_s2 * (w_s1 * q).array().tanh().matrix();
  Mat expect_w(k, L);
  for (int i = 0; i < k; ++i) {
    double mx = logits.row(i).maxCoeff();
    double z = 0.0;
    for (int j = 0; j < L; ++j) z += std::exp(logits(i, j) - mx);
    for (int j = 0; j < L; ++j)
      expect_w(i, j) = std::exp(logits(i, j) - mx) / z;
  }
  Mat expect_g = q * expect_w.transpose();

  CHECK((t.val(out.weights) - expect_w).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((t.val(out.guides) - expect_g).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("phrase rows are distributions and guides stay in the word hull") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 6, d_s = 3, L = 1 + static_cast<int>(rng.uniform_index(6));
    const int k = 1 + static_cast<int>(rng.uniform_index(8));  // k > L allowed
    Mat q = gaussian_matrix(d, L, 1.0, rng);

    ag::Tape t;
    ag::Ref qr = t.leaf(q);
    ag::PhraseParamsRefs p{t.leaf(gaussian_matrix(d_s, d, 0.8, rng)),
                           t.leaf(gaussian_matrix(k, d_s, 0.8, rng))};
    auto out = ag::extract_phrases_node(qr, p);

    const Mat& w = t.val(out.weights);
    for (int i = 0; i < k; ++i) {
      CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-6);
      CHECK((w.row(i).array() >= 0.0).all());
    }
    // convex combinations are bounded per-dimension by the word columns
    const Mat& g = t.val(out.guides);
    for (int i = 0; i < k; ++i)
      for (int r = 0; r < d; ++r) {
        CHECK(g(r, i) <= q.row(r).maxCoeff() + 1e-12);
        CHECK(g(r, i) >= q.row(r).minCoeff() - 1e-12);
      }
  }
}

TEST_CASE("single guide is the sentence state itself") {
  Rng rng(13);
  Mat global = gaussian_matrix(6, 1, 1.0, rng);
  ag::Tape t;
  ag::EmbeddedQueryRefs q;
  q.per_word = t.leaf(gaussian_matrix(6, 4, 1.0, rng));
  q.global = t.leaf(global);
  ag::Ref guide = ag::single_phrase_guide(q);
  CHECK(guide.idx == q.global.idx);
  CHECK(t.val(guide) == global);
}

TEST_CASE("non-finite phrase logits raise a numerical error") {
  Rng rng(17);
  const int d = 4, d_s = 2, k = 2, L = 3;
  Mat w_s2 = gaussian_matrix(k, d_s, 0.5, rng);
  w_s2(0, 0) = std::numeric_limits<double>::quiet_NaN();

  ag::Tape t;
  ag::Ref qr = t.leaf(gaussian_matrix(d, L, 1.0, rng));
  ag::PhraseParamsRefs p{t.leaf(gaussian_matrix(d_s, d, 0.5, rng)),
                         t.leaf(w_s2)};
  CHECK_THROWS_AS(ag::extract_phrases_node(qr, p), NumericalError);
}

TEST_CASE("phrase parameter gradients match finite differences") {
  Rng rng(19);
  const int d = 4, d_s = 3, k = 2, L = 3;
  Mat q = gaussian_matrix(d, L, 1.0, rng);
  Mat w_s1 = gaussian_matrix(d_s, d, 0.6, rng);
  Mat w_s2 = gaussian_matrix(k, d_s, 0.6, rng);

  auto build = [](ag::Tape& t, const std::vector<Mat>& L_) {
    ag::Ref qr = t.leaf(L_[0]);
    ag::PhraseParamsRefs p{t.leaf(L_[1]), t.leaf(L_[2])};
    auto out = ag::extract_phrases_node(qr, p);
    return ag::sum_all(ag::cmul(out.guides, out.guides));
  };
  CHECK(cmatest::fd_max_rel_error({q, w_s1, w_s2}, build) < 1e-4);
}
