#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cma/autograd.hpp"
#include "cma/config.hpp"

namespace cma {

/// Optional forward-pass instrumentation: every softmax output (rows are
/// distributions) plus the decoder's cross-branch dataflow, recorded as tape
/// node indices at the call sites that consume them.
struct ForwardTrace {
  std::vector<std::pair<std::string, Mat>> distributions;

  struct DecodeLayerWiring {
    int q_sa = -1;     // query branch self-attention output node
    int v_sa = -1;     // video branch self-attention output node
    int q_ba_q = -1;   // node feeding the query-branch cross attention as queries
    int q_ba_kv = -1;  // ... as keys/values
    int v_ba_q = -1;
    int v_ba_kv = -1;
  };
  std::vector<DecodeLayerWiring> decode_wiring;
};

namespace ag {

struct AttentionBlockRefs {
  Ref wq, wk, wv, wo;              // (d, d) projections
  Ref w1, b1, w2, b2;              // position-wise feed-forward d -> 4d -> d
  Ref ln1_g, ln1_b, ln2_g, ln2_b;  // per-row normalization parameters (d, 1)
};

/// Scaled dot-product attention, heads as row slices of the packed
/// projections. xq supplies queries; xkv supplies keys and values.
inline Ref multi_head_attention(Ref xq, Ref xkv, const AttentionBlockRefs& p,
                                int heads, ForwardTrace* trace = nullptr,
                                const std::string& label = "") {
  Tape& t = *xq.tape;
  const auto d = t.val(xq).rows();
  if (t.val(xkv).rows() != d)
    throw ConfigError("attention: query and key/value dims disagree");
  if (d % heads != 0)
    throw ConfigError("attention: dim not divisible by head count");
  const auto dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Ref q = matmul(p.wq, xq);
  Ref k = matmul(p.wk, xkv);
  Ref v = matmul(p.wv, xkv);
  Ref cat{nullptr, -1};
  for (int h = 0; h < heads; ++h) {
    Ref qh = slice_rows(q, h * dh, dh);
    Ref kh = slice_rows(k, h * dh, dh);
    Ref vh = slice_rows(v, h * dh, dh);
    Ref logits = scale(matmul(transpose(qh), kh), inv_scale);
    Ref attn = softmax_rows(logits);  // (S_q, S_kv), rows sum to 1
    if (trace != nullptr)
      trace->distributions.emplace_back(label + ".h" + std::to_string(h),
                                        t.val(attn));
    Ref out_h = matmul(vh, transpose(attn));  // (dh, S_q)
    cat = h == 0 ? out_h : concat_rows(cat, out_h);
  }
  return matmul(p.wo, cat);
}

/// Attention followed by the standard sublayer pair: residual + column-wise
/// normalization, then a position-wise feed-forward with its own residual
/// + normalization. Residuals can be disabled for ablation.
inline Ref attention_block(Ref xq, Ref xkv, const AttentionBlockRefs& p,
                           int heads, bool use_residual,
                           ForwardTrace* trace = nullptr,
                           const std::string& label = "") {
  Ref a = multi_head_attention(xq, xkv, p, heads, trace, label);
  Ref r1 = use_residual ? add(a, xq) : a;
  Ref n1 = layernorm_cols(r1, p.ln1_g, p.ln1_b);
  Ref hidden = relu(add_colvec(matmul(p.w1, n1), p.b1));
  Ref f = add_colvec(matmul(p.w2, hidden), p.b2);
  Ref r2 = use_residual ? add(f, n1) : f;
  return layernorm_cols(r2, p.ln2_g, p.ln2_b);
}

inline Ref self_attention_block(Ref x, const AttentionBlockRefs& p, int heads,
                                bool use_residual,
                                ForwardTrace* trace = nullptr,
                                const std::string& label = "") {
  return attention_block(x, x, p, heads, use_residual, trace, label);
}

/// Column-wise combination of video features with one guide vector.
/// Concatenation stacks the guide under every column and projects back to d
/// through w_cat (d, 2d).
inline Ref fuse_guide_node(Ref v, Ref g, FusionOp op,
                           Ref w_cat = {nullptr, -1}) {
  Tape& t = *v.tape;
  if (t.val(g).cols() != 1)
    throw ConfigError("fuse_guide: guide must be a single column");
  if (t.val(g).rows() != t.val(v).rows())
    throw ConfigError("fuse_guide: guide length must match feature dim");
  switch (op) {
    case FusionOp::Hadamard:
      return cmul_colvec(v, g);
    case FusionOp::Add:
      return add_colvec(v, g);
    case FusionOp::Concat: {
      if (w_cat.tape == nullptr)
        throw ConfigError("fuse_guide: concat needs its projection");
      Ref ones = t.leaf(Mat::Ones(1, t.val(v).cols()));
      Ref tiled = matmul(g, ones);
      return matmul(w_cat, concat_rows(v, tiled));
    }
  }
  throw ConfigError("fuse_guide: unknown fusion operator");
}

struct EncoderRefs {
  Ref w_cat{nullptr, -1};                 // only used for concat fusion
  std::vector<AttentionBlockRefs> layers;
  // guide aggregation, used when k > 1: (d, k*d) -> tanh -> (d, d)
  Ref mlp_w1{nullptr, -1}, mlp_b1{nullptr, -1};
  Ref mlp_w2{nullptr, -1}, mlp_b2{nullptr, -1};
};

/// Per guide: fuse then run the self-attention stack; k > 1 branches are
/// aggregated with a small MLP over their row-wise concatenation. With a
/// single guide the branch output passes through untouched.
inline Ref encode_node(Ref v_in, Ref guides, const EncoderRefs& enc,
                       FusionOp op, int heads, bool use_residual,
                       ForwardTrace* trace = nullptr) {
  Tape& t = *v_in.tape;
  const auto k = t.val(guides).cols();
  if (k < 1) throw ConfigError("encode: needs at least one guide");
  std::vector<Ref> branches;
  for (Eigen::Index i = 0; i < k; ++i) {
    Ref g = slice_cols(guides, i, 1);
    Ref f = fuse_guide_node(v_in, g, op, enc.w_cat);
    for (std::size_t l = 0; l < enc.layers.size(); ++l)
      f = self_attention_block(
          f, enc.layers[l], heads, use_residual, trace,
          "enc.g" + std::to_string(i) + ".l" + std::to_string(l));
    branches.push_back(f);
  }
  if (k == 1) return branches[0];
  Ref cat = branches[0];
  for (Eigen::Index i = 1; i < k; ++i) cat = concat_rows(cat, branches[i]);
  Ref hidden = tanh_(add_colvec(matmul(enc.mlp_w1, cat), enc.mlp_b1));
  return add_colvec(matmul(enc.mlp_w2, hidden), enc.mlp_b2);
}

struct DecoderLayerRefs {
  AttentionBlockRefs q_sa, v_sa, q_ba, v_ba;
};

struct DecodeOutRefs {
  Ref video_out;  // (d, N) final video-branch features
  Ref query_out;  // (d, L) final query-branch features
};

/// Two parallel branches per layer: each self-attends, then cross-attends
/// with queries from its own branch and keys/values from the other branch's
/// self-attended output.
inline DecodeOutRefs decode_node(Ref f_enc, Ref q_in,
                                 const std::vector<DecoderLayerRefs>& layers,
                                 int heads, bool use_residual,
                                 ForwardTrace* trace = nullptr) {
  Ref fq = q_in;
  Ref fv = f_enc;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string tag = "dec.l" + std::to_string(l);
    Ref q1 = self_attention_block(fq, layers[l].q_sa, heads, use_residual,
                                  trace, tag + ".qsa");
    Ref v1 = self_attention_block(fv, layers[l].v_sa, heads, use_residual,
                                  trace, tag + ".vsa");
    Ref q2 = attention_block(q1, v1, layers[l].q_ba, heads, use_residual,
                             trace, tag + ".qba");
    Ref v2 = attention_block(v1, q1, layers[l].v_ba, heads, use_residual,
                             trace, tag + ".vba");
    if (trace != nullptr) {
      ForwardTrace::DecodeLayerWiring w;
      w.q_sa = q1.idx;
      w.v_sa = v1.idx;
      w.q_ba_q = q1.idx;
      w.q_ba_kv = v1.idx;
      w.v_ba_q = v1.idx;
      w.v_ba_kv = q1.idx;
      trace->decode_wiring.push_back(w);
    }
    fq = q2;
    fv = v2;
  }
  return {fv, fq};
}

}  // namespace ag
}  // namespace cma
