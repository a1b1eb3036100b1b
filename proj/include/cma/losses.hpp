#pragma once

#include <cmath>
#include <vector>

#include "cma/autograd.hpp"
#include "cma/common.hpp"
#include "cma/errors.hpp"
#include "cma/interval.hpp"

namespace cma {

// Floor applied inside log() terms so an attention weight that collapses to
// zero early in training yields a large-but-finite loss instead of -inf.
inline constexpr double kLogFloor = 1e-12;

struct LossConfig {
  double alpha = 10.0;
  double beta = 0.1;
  double lambda_ta = 1.0;
  double lambda_sd = 1.0;
  // Sum the start/end residual terms (per-coordinate convention); set false
  // to average them instead.
  bool sum_residuals = true;

  void validate() const {
    if (!(alpha > 0.0))
      throw ConfigError("loss alpha must be positive, got " +
                        std::to_string(alpha));
    // beta = 1 is allowed: it is the Smooth-L1 setting (alpha = 0.5).
    if (!(beta > 0.0) || beta > 1.0)
      throw ConfigError("loss beta must lie in (0, 1], got " +
                        std::to_string(beta));
    if (lambda_ta < 0.0 || lambda_sd < 0.0)
      throw ConfigError("loss lambdas must be nonnegative");
  }
};

struct LossReport {
  double total = 0.0;
  double reg = 0.0;
  double ta = 0.0;
  double sd = 0.0;
};

/// Residual penalty: quadratic inside |x| < beta, linear outside. The two
/// branches agree at |x| = beta (value alpha*beta^2), so f is continuous;
/// the derivative is also continuous there (2*alpha*beta from both sides).
inline double piecewise_reg(double x, double alpha, double beta) {
  const double ax = std::abs(x);
  if (ax < beta) return alpha * x * x;
  return 2.0 * alpha * beta * ax - alpha * beta * beta;
}

/// d/dx piecewise_reg. Constant magnitude 2*alpha*beta on the linear branch:
/// outlier residuals do not produce growing gradients.
inline double piecewise_reg_grad(double x, double alpha, double beta) {
  const double ax = std::abs(x);
  if (ax < beta) return 2.0 * alpha * x;
  return x >= 0.0 ? 2.0 * alpha * beta : -2.0 * alpha * beta;
}

inline double regression_loss(TimeInterval pred, TimeInterval gt,
                              const LossConfig& cfg) {
  cfg.validate();
  const double ls = piecewise_reg(pred.start - gt.start, cfg.alpha, cfg.beta);
  const double le = piecewise_reg(pred.end - gt.end, cfg.alpha, cfg.beta);
  return cfg.sum_residuals ? ls + le : 0.5 * (ls + le);
}

/// Indices of clips "inside" the ground-truth interval on an n-clip grid.
/// Clip i spans [i/n, (i+1)/n); it counts when at least half of that span
/// overlaps the interval. If nothing qualifies (short or degenerate
/// intervals), the clip containing the interval midpoint stands in, so the
/// support is never empty.
inline std::vector<int> attention_support(TimeInterval gt, int n) {
  if (n <= 0) throw ConfigError("attention_support: grid size must be positive");
  std::vector<int> support;
  const double w = 1.0 / static_cast<double>(n);
  for (int i = 0; i < n; ++i) {
    const double lo = i * w, hi = (i + 1) * w;
    const double overlap =
        std::max(0.0, std::min(hi, gt.end) - std::max(lo, gt.start));
    if (overlap >= 0.5 * w) support.push_back(i);
  }
  if (support.empty()) {
    const double mid = 0.5 * (gt.start + gt.end);
    int idx = static_cast<int>(std::floor(mid * n));
    idx = std::min(n - 1, std::max(0, idx));
    support.push_back(idx);
  }
  return support;
}

/// Mean negative log attention weight over the in-interval clips.
inline double temporal_attention_loss(const Vec& a, TimeInterval gt) {
  const int n = static_cast<int>(a.size());
  const auto support = attention_support(gt, n);
  double acc = 0.0;
  for (int i : support) acc -= std::log(std::max(a(i), kLogFloor));
  return acc / static_cast<double>(support.size());
}

/// Squared Frobenius norm of (A A^T - I): pushes the guide-attention rows
/// toward mutual orthogonality and unit self-similarity.
inline double semantic_diversity_loss(const Mat& A) {
  const long k = A.rows();
  Mat d = A * A.transpose() - Mat::Identity(k, k);
  return d.squaredNorm();
}

inline LossReport total_loss(double reg, double ta, double sd,
                             const LossConfig& cfg) {
  cfg.validate();
  LossReport r;
  r.reg = reg;
  r.ta = ta;
  r.sd = sd;
  r.total = reg + cfg.lambda_ta * ta + cfg.lambda_sd * sd;
  return r;
}

namespace ag {

/// Elementwise piecewise_reg over a matrix, on the tape.
inline Ref piecewise_reg_mat(Ref x, double alpha, double beta) {
  Tape& t = *x.tape;
  const Mat& xv = t.val(x);
  Mat out(xv.rows(), xv.cols());
  for (long c = 0; c < xv.cols(); ++c)
    for (long r = 0; r < xv.rows(); ++r)
      out(r, c) = piecewise_reg(xv(r, c), alpha, beta);
  const int self = t.next_index();
  Mat xc = xv;
  return t.push(std::move(out), [self, x, xc, alpha, beta](Tape& tp) {
    if (!tp.has_grad(self)) return;
    const Mat& g = tp.grad(self);
    Mat& dx = tp.grad(x.idx);
    for (long c = 0; c < xc.cols(); ++c)
      for (long r = 0; r < xc.rows(); ++r)
        dx(r, c) += g(r, c) * piecewise_reg_grad(xc(r, c), alpha, beta);
  });
}

/// Regression term on the tape: pred is a 2x1 column (start; end).
inline Ref regression_loss_node(Ref pred, TimeInterval gt,
                                const LossConfig& cfg) {
  cfg.validate();
  Tape& t = *pred.tape;
  if (t.val(pred).rows() != 2 || t.val(pred).cols() != 1)
    throw ConfigError("regression_loss_node: pred must be 2x1");
  Mat gv(2, 1);
  gv << gt.start, gt.end;
  Ref target = t.leaf(gv);
  Ref diff = sub(pred, target);
  Ref pw = piecewise_reg_mat(diff, cfg.alpha, cfg.beta);
  Ref s = sum_all(pw);
  return cfg.sum_residuals ? s : scale(s, 0.5);
}

/// Temporal-attention term: a is a 1xN attention row summing to 1; the
/// support indices come from attention_support on the ground truth.
inline Ref temporal_attention_loss_node(Ref a,
                                        const std::vector<int>& support) {
  if (support.empty())
    throw ConfigError("temporal_attention_loss_node: empty support");
  Ref picked = gather_cols(a, support);
  Ref lg = log_floored(picked, kLogFloor);
  Ref s = sum_all(lg);
  return scale(s, -1.0 / static_cast<double>(support.size()));
}

/// Diversity term: ||A A^T - I||_F^2 for a k-row attention matrix.
inline Ref semantic_diversity_loss_node(Ref A) {
  Tape& t = *A.tape;
  const long k = t.val(A).rows();
  Ref gram = matmul(A, transpose(A));
  Ref eye = t.leaf(Mat::Identity(k, k));
  Ref d = sub(gram, eye);
  return sum_all(cmul(d, d));
}

}  // namespace ag
}  // namespace cma
