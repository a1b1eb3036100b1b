#pragma once

#include <cassert>
#include <functional>
#include <utility>
#include <vector>

#include "cma/common.hpp"
#include "cma/errors.hpp"

namespace cma::ag {

class Tape;

/// Handle to a node on a tape.
struct Ref {
  Tape* tape = nullptr;
  int idx = -1;
};

/// Reverse-mode tape over dense double matrices. Nodes are created by the
/// op functions below; backward() walks the tape in reverse, calling each
/// node's adjoint closure. Gradients are allocated lazily so untouched
/// branches cost nothing on the backward pass.
class Tape {
 public:
  Ref leaf(Mat v) {
    values_.push_back(std::move(v));
    backs_.emplace_back();
    grads_.emplace_back();
    has_grad_.push_back(0);
    return {this, static_cast<int>(values_.size()) - 1};
  }

  /// Index the next pushed node will get.
  int next_index() const { return static_cast<int>(values_.size()); }

  Ref push(Mat v, std::function<void(Tape&)> back) {
    values_.push_back(std::move(v));
    backs_.push_back(std::move(back));
    grads_.emplace_back();
    has_grad_.push_back(0);
    return {this, static_cast<int>(values_.size()) - 1};
  }

  const Mat& val(int i) const { return values_[static_cast<std::size_t>(i)]; }
  const Mat& val(Ref r) const { return val(r.idx); }

  /// Gradient of node i, zero-initialized on first access.
  Mat& grad(int i) {
    auto u = static_cast<std::size_t>(i);
    if (!has_grad_[u]) {
      grads_[u] = Mat::Zero(values_[u].rows(), values_[u].cols());
      has_grad_[u] = 1;
    }
    return grads_[u];
  }

  bool has_grad(int i) const {
    return has_grad_[static_cast<std::size_t>(i)] != 0;
  }

  /// Seeds d(root)/d(root) = 1 and propagates adjoints down the tape.
  /// The root must be a 1x1 node.
  void backward(Ref root) {
    assert(root.tape == this);
    if (val(root).rows() != 1 || val(root).cols() != 1)
      throw NumericalError("backward root must be a scalar node");
    grad(root.idx)(0, 0) = 1.0;
    for (int i = root.idx; i >= 0; --i) {
      auto u = static_cast<std::size_t>(i);
      if (has_grad_[u] && backs_[u]) backs_[u](*this);
    }
  }

  int size() const { return static_cast<int>(values_.size()); }

  void clear() {
    values_.clear();
    backs_.clear();
    grads_.clear();
    has_grad_.clear();
  }

 private:
  std::vector<Mat> values_;
  std::vector<std::function<void(Tape&)>> backs_;
  std::vector<Mat> grads_;
  std::vector<char> has_grad_;
};

inline Ref leaf(Tape& t, Mat v) { return t.leaf(std::move(v)); }

// ---------------------------------------------------------------------------
// Ops. Each computes the value eagerly and records an adjoint closure that
// scatters d(out) into the inputs' gradient buffers.
// ---------------------------------------------------------------------------

inline Ref matmul(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ia).cols() != t.val(ib).rows())
    throw ConfigError("matmul: inner dimensions disagree");
  Mat v = t.val(ia) * t.val(ib);
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia).noalias() += g * tt.val(ib).transpose();
    tt.grad(ib).noalias() += tt.val(ia).transpose() * g;
  });
}

inline Ref add(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ia).rows() != t.val(ib).rows() ||
      t.val(ia).cols() != t.val(ib).cols())
    throw ConfigError("add: shape mismatch");
  Mat v = t.val(ia) + t.val(ib);
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) += g;
    tt.grad(ib) += g;
  });
}

inline Ref sub(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ia).rows() != t.val(ib).rows() ||
      t.val(ia).cols() != t.val(ib).cols())
    throw ConfigError("sub: shape mismatch");
  Mat v = t.val(ia) - t.val(ib);
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) += g;
    tt.grad(ib) -= g;
  });
}

/// a + b broadcast: b is a column vector added to every column of a.
inline Ref add_colvec(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ib).cols() != 1 || t.val(ia).rows() != t.val(ib).rows())
    throw ConfigError("add_colvec: b must be a column vector matching a's rows");
  Mat v = t.val(ia).colwise() + t.val(ib).col(0);
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) += g;
    tt.grad(ib) += g.rowwise().sum();
  });
}

/// Elementwise product.
inline Ref cmul(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ia).rows() != t.val(ib).rows() ||
      t.val(ia).cols() != t.val(ib).cols())
    throw ConfigError("cmul: shape mismatch");
  Mat v = t.val(ia).cwiseProduct(t.val(ib));
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) += g.cwiseProduct(tt.val(ib));
    tt.grad(ib) += g.cwiseProduct(tt.val(ia));
  });
}

/// a ∘ b broadcast: b is a column vector multiplied into every column of a.
inline Ref cmul_colvec(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ib).cols() != 1 || t.val(ia).rows() != t.val(ib).rows())
    throw ConfigError("cmul_colvec: b must be a column vector matching a's rows");
  Mat v = (t.val(ia).array().colwise() * t.val(ib).col(0).array()).matrix();
  return t.push(std::move(v), [ia, ib, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) +=
        (g.array().colwise() * tt.val(ib).col(0).array()).matrix();
    tt.grad(ib) += g.cwiseProduct(tt.val(ia)).rowwise().sum();
  });
}

inline Ref scale(Ref a, double s) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia) * s;
  return t.push(std::move(v), [ia, s, self](Tape& tt) {
    tt.grad(ia) += tt.grad(self) * s;
  });
}

inline Ref relu(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).cwiseMax(0.0);
  return t.push(std::move(v), [ia, self](Tape& tt) {
    tt.grad(ia) += tt.grad(self).cwiseProduct(
        (tt.val(ia).array() > 0.0).cast<double>().matrix());
  });
}

inline Ref tanh_(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).array().tanh().matrix();
  return t.push(std::move(v), [ia, self](Tape& tt) {
    tt.grad(ia).array() +=
        tt.grad(self).array() * (1.0 - tt.val(self).array().square());
  });
}

inline Ref sigmoid(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = (1.0 / (1.0 + (-t.val(ia).array()).exp())).matrix();
  return t.push(std::move(v), [ia, self](Tape& tt) {
    const auto y = tt.val(self).array();
    tt.grad(ia).array() += tt.grad(self).array() * y * (1.0 - y);
  });
}

/// log(max(a, floor)); where a <= floor the gradient is zero.
inline Ref log_floored(Ref a, double floor_val) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).cwiseMax(floor_val).array().log().matrix();
  return t.push(std::move(v), [ia, floor_val, self](Tape& tt) {
    const auto x = tt.val(ia).array();
    tt.grad(ia).array() +=
        tt.grad(self).array() * (x > floor_val).cast<double>() / x.max(floor_val);
  });
}

/// Row-wise softmax: every row of the output sums to 1.
inline Ref softmax_rows(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  const Mat& x = t.val(ia);
  if (!x.allFinite()) throw NumericalError("softmax: non-finite logits");
  Mat v(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    v.row(r) = (e / e.sum()).matrix();
  }
  return t.push(std::move(v), [ia, self](Tape& tt) {
    const Mat& y = tt.val(self);
    const Mat& g = tt.grad(self);
    Mat& ga = tt.grad(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += (g.row(r).array() - dot) * y.row(r).array();
    }
  });
}

/// Layer normalization over rows, independently per column, with per-row
/// affine parameters gamma and beta (column vectors).
inline Ref layernorm_cols(Ref x, Ref gamma, Ref beta, double eps = 1e-5) {
  Tape& t = *x.tape;
  const int ix = x.idx, ig = gamma.idx, ib = beta.idx, self = t.next_index();
  const Mat& xv = t.val(ix);
  if (t.val(ig).cols() != 1 || t.val(ib).cols() != 1 ||
      t.val(ig).rows() != xv.rows() || t.val(ib).rows() != xv.rows())
    throw ConfigError("layernorm: gamma/beta must be column vectors of x's rows");
  const double n = static_cast<double>(xv.rows());
  Eigen::RowVectorXd mu = xv.colwise().mean();
  Mat centered = xv.rowwise() - mu;
  Eigen::RowVectorXd var =
      (centered.array().square().colwise().sum() / n).matrix();
  Eigen::RowVectorXd inv_sigma = (var.array() + eps).rsqrt().matrix();
  Mat xhat = (centered.array().rowwise() * inv_sigma.array()).matrix();
  Mat v = ((xhat.array().colwise() * t.val(ig).col(0).array()).colwise() +
           t.val(ib).col(0).array())
              .matrix();
  // xhat and inv_sigma are needed by the adjoint; copy them into the closure
  return t.push(std::move(v),
                [ix, ig, ib, self, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma), n](Tape& tt) {
                  const Mat& g = tt.grad(self);
                  tt.grad(ib) += g.rowwise().sum();
                  tt.grad(ig) += g.cwiseProduct(xhat).rowwise().sum();
                  Mat dxhat =
                      (g.array().colwise() * tt.val(ig).col(0).array()).matrix();
                  Eigen::RowVectorXd m1 = dxhat.colwise().sum() / n;
                  Eigen::RowVectorXd m2 =
                      dxhat.cwiseProduct(xhat).colwise().sum() / n;
                  Mat dx = (((dxhat.rowwise() - m1).array() -
                             xhat.array().rowwise() * m2.array())
                                .rowwise() *
                            inv_sigma.array())
                               .matrix();
                  tt.grad(ix) += dx;
                });
}

inline Ref transpose(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).transpose();
  return t.push(std::move(v), [ia, self](Tape& tt) {
    tt.grad(ia) += tt.grad(self).transpose();
  });
}

/// Vertical stack [a; b].
inline Ref concat_rows(Ref a, Ref b) {
  Tape& t = *a.tape;
  const int ia = a.idx, ib = b.idx, self = t.next_index();
  if (t.val(ia).cols() != t.val(ib).cols())
    throw ConfigError("concat_rows: column counts disagree");
  const auto ra = t.val(ia).rows(), rb = t.val(ib).rows();
  Mat v(ra + rb, t.val(ia).cols());
  v.topRows(ra) = t.val(ia);
  v.bottomRows(rb) = t.val(ib);
  return t.push(std::move(v), [ia, ib, ra, rb, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    tt.grad(ia) += g.topRows(ra);
    tt.grad(ib) += g.bottomRows(rb);
  });
}

inline Ref concat_cols(const std::vector<Ref>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const auto rows = t.val(parts[0]).rows();
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index total = 0;
  for (Ref p : parts) {
    if (t.val(p).rows() != rows)
      throw ConfigError("concat_cols: row counts disagree");
    ids.push_back(p.idx);
    widths.push_back(t.val(p).cols());
    total += t.val(p).cols();
  }
  Mat v(rows, total);
  Eigen::Index c = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    v.middleCols(c, widths[i]) = t.val(ids[i]);
    c += widths[i];
  }
  const int self = t.next_index();
  return t.push(std::move(v), [ids, widths, self](Tape& tt) {
    const Mat& g = tt.grad(self);
    Eigen::Index cc = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tt.grad(ids[i]) += g.middleCols(cc, widths[i]);
      cc += widths[i];
    }
  });
}

inline Ref slice_rows(Ref a, Eigen::Index r0, Eigen::Index n) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).middleRows(r0, n);
  return t.push(std::move(v), [ia, r0, n, self](Tape& tt) {
    tt.grad(ia).middleRows(r0, n) += tt.grad(self);
  });
}

inline Ref slice_cols(Ref a, Eigen::Index c0, Eigen::Index n) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v = t.val(ia).middleCols(c0, n);
  return t.push(std::move(v), [ia, c0, n, self](Tape& tt) {
    tt.grad(ia).middleCols(c0, n) += tt.grad(self);
  });
}

/// Column lookup: out.col(j) = a.col(idx[j]). Duplicate indices accumulate
/// on the backward pass, which makes this the embedding-lookup op.
inline Ref gather_cols(Ref a, std::vector<int> idx) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  const Mat& x = t.val(ia);
  Mat v(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= x.cols())
      throw DataError("gather_cols: index " + std::to_string(idx[j]) +
                      " out of range");
    v.col(static_cast<Eigen::Index>(j)) = x.col(idx[j]);
  }
  return t.push(std::move(v), [ia, idx = std::move(idx), self](Tape& tt) {
    const Mat& g = tt.grad(self);
    Mat& ga = tt.grad(ia);
    for (std::size_t j = 0; j < idx.size(); ++j)
      ga.col(idx[j]) += g.col(static_cast<Eigen::Index>(j));
  });
}

/// Row lookup with duplicate accumulation, mirror of gather_cols.
inline Ref gather_rows(Ref a, std::vector<int> idx) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  const Mat& x = t.val(ia);
  Mat v(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= x.rows())
      throw DataError("gather_rows: index " + std::to_string(idx[j]) +
                      " out of range");
    v.row(static_cast<Eigen::Index>(j)) = x.row(idx[j]);
  }
  return t.push(std::move(v), [ia, idx = std::move(idx), self](Tape& tt) {
    const Mat& g = tt.grad(self);
    Mat& ga = tt.grad(ia);
    for (std::size_t j = 0; j < idx.size(); ++j)
      ga.row(idx[j]) += g.row(static_cast<Eigen::Index>(j));
  });
}

inline Ref sum_all(Ref a) {
  Tape& t = *a.tape;
  const int ia = a.idx, self = t.next_index();
  Mat v(1, 1);
  v(0, 0) = t.val(ia).sum();
  return t.push(std::move(v), [ia, self](Tape& tt) {
    tt.grad(ia).array() += tt.grad(self)(0, 0);
  });
}

}  // namespace cma::ag
