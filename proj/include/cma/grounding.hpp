#pragma once

#include <string>

#include "cma/autograd.hpp"
#include "cma/fusion.hpp"
#include "cma/interval.hpp"

namespace cma::ag {

struct GroundingRefs {
  Ref w_b;   // (d, d)
  Ref u_ta;  // (d, 1)
};

struct HeadRefs {
  Ref w1, b1;  // (d/2, d), (d/2, 1)
  Ref w2, b2;  // (2, d/2), (2, 1)
};

struct TemporalPoolRefs {
  Ref weights;  // (1, N) distribution over positions
  Ref pooled;   // (d, 1) attention-weighted column sum
};

/// a = softmax(u_ta^T tanh(W_b F)); pooled = F a.
inline TemporalPoolRefs temporal_pool_node(Ref f, const GroundingRefs& g,
                                           ForwardTrace* trace = nullptr) {
  Tape& t = *f.tape;
  if (t.val(g.w_b).cols() != t.val(f).rows())
    throw ConfigError("temporal pool: W_b columns must match feature dim");
  Ref b = tanh_(matmul(g.w_b, f));
  Ref logits = matmul(transpose(g.u_ta), b);  // (1, N)
  TemporalPoolRefs out;
  out.weights = softmax_rows(logits);
  if (trace != nullptr)
    trace->distributions.emplace_back("ground.a", t.val(out.weights));
  out.pooled = matmul(f, transpose(out.weights));
  return out;
}

/// Two-layer regression head; raw outputs are the normalized (start, end).
/// No clamping here: metric-side sanitation owns that.
inline Ref regress_boundaries_node(Ref pooled, const HeadRefs& h) {
  Ref hidden = relu(add_colvec(matmul(h.w1, pooled), h.b1));
  return add_colvec(matmul(h.w2, hidden), h.b2);  // (2, 1)
}

inline TimeInterval interval_from_node(const Tape& t, Ref pred) {
  const Mat& v = t.val(pred);
  if (v.rows() != 2 || v.cols() != 1)
    throw ConfigError("boundary prediction must be 2x1");
  return {v(0, 0), v(1, 0)};
}

}  // namespace cma::ag
