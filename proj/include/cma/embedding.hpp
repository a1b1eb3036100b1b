#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cma/autograd.hpp"
#include "cma/common.hpp"
#include "cma/config.hpp"
#include "cma/errors.hpp"

namespace cma {

struct PositionalEncodingSpec {
  PEVariant variant = PEVariant::Sinusoidal;
  int max_len = 0;
  int dim = 0;

  void validate() const {
    if (dim <= 0) throw ConfigError("positional encoding dim must be positive");
    if (max_len <= 0)
      throw ConfigError("positional encoding max_len must be positive");
    if (variant == PEVariant::Sinusoidal && dim % 2 != 0)
      throw ConfigError("sinusoidal positional encoding needs an even dim");
  }
};

/// Fixed sinusoidal table, one column per position 0..max_len-1. Row pair
/// (2i, 2i+1) carries sin and cos of pos / 10000^(2i/dim).
inline Mat sinusoidal_pe_table(int dim, int max_len) {
  if (dim % 2 != 0)
    throw ConfigError("sinusoidal positional encoding needs an even dim");
  Mat pe(dim, max_len);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < dim / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
      pe(2 * i, pos) = std::sin(pos * freq);
      pe(2 * i + 1, pos) = std::cos(pos * freq);
    }
  }
  return pe;
}

/// Encoding columns for explicit positions. `learned_table` supplies the
/// trainable matrix for the learned variant (dim x max_len).
inline Mat pe_columns(const PositionalEncodingSpec& spec,
                      const std::vector<int>& positions,
                      const Mat* learned_table = nullptr) {
  spec.validate();
  for (int p : positions)
    if (p < 0 || p >= spec.max_len)
      throw ConfigError("position " + std::to_string(p) +
                        " outside encoding range [0, " +
                        std::to_string(spec.max_len) + ")");
  const int n = static_cast<int>(positions.size());
  if (spec.variant == PEVariant::None) return Mat::Zero(spec.dim, n);
  if (spec.variant == PEVariant::Sinusoidal) {
    Mat table = sinusoidal_pe_table(spec.dim, spec.max_len);
    Mat out(spec.dim, n);
    for (int j = 0; j < n; ++j) out.col(j) = table.col(positions[j]);
    return out;
  }
  if (learned_table == nullptr)
    throw ConfigError("learned positional encoding needs its table");
  if (learned_table->rows() != spec.dim || learned_table->cols() < spec.max_len)
    throw ConfigError("learned positional encoding table has wrong shape");
  Mat out(spec.dim, n);
  for (int j = 0; j < n; ++j) out.col(j) = learned_table->col(positions[j]);
  return out;
}

namespace ag {

/// PE columns as a tape node. Sinusoidal and none variants are constants;
/// the learned variant gathers columns of its parameter so gradients reach
/// the table.
inline Ref pe_columns_node(Tape& t, const PositionalEncodingSpec& spec,
                           const std::vector<int>& positions,
                           Ref learned_table = {nullptr, -1}) {
  spec.validate();
  if (spec.variant == PEVariant::Learned) {
    if (learned_table.tape == nullptr)
      throw ConfigError("learned positional encoding needs its table");
    for (int p : positions)
      if (p < 0 || p >= spec.max_len)
        throw ConfigError("position " + std::to_string(p) +
                          " outside encoding range [0, " +
                          std::to_string(spec.max_len) + ")");
    return gather_cols(learned_table, positions);
  }
  return t.leaf(pe_columns(spec, positions));
}

/// V^in = ReLU(W_v X) + PE.
inline Ref embed_video_node(Ref w_v, Ref features, Ref pe) {
  Tape& t = *w_v.tape;
  if (t.val(w_v).cols() != t.val(features).rows())
    throw ConfigError("video projection: W_v columns (" +
                      std::to_string(t.val(w_v).cols()) +
                      ") must match feature rows (" +
                      std::to_string(t.val(features).rows()) + ")");
  return add(relu(matmul(w_v, features)), pe);
}

struct LstmCellRefs {
  Ref w_x;  // (4h, in)  packed gate order: input, forget, cell, output
  Ref u_h;  // (4h, h)
  Ref b;    // (4h, 1)
};

/// One recurrent step; x and h_prev/c_prev are columns.
inline std::pair<Ref, Ref> lstm_step(const LstmCellRefs& p, Ref x, Ref h_prev,
                                     Ref c_prev) {
  Tape& t = *x.tape;
  const auto h = t.val(h_prev).rows();
  Ref z = add_colvec(add(matmul(p.w_x, x), matmul(p.u_h, h_prev)), p.b);
  Ref gi = sigmoid(slice_rows(z, 0, h));
  Ref gf = sigmoid(slice_rows(z, h, h));
  Ref gc = tanh_(slice_rows(z, 2 * h, h));
  Ref go = sigmoid(slice_rows(z, 3 * h, h));
  Ref c = add(cmul(gf, c_prev), cmul(gi, gc));
  Ref hh = cmul(go, tanh_(c));
  return {hh, c};
}

/// Runs one direction over the columns of x. Returns hidden states indexed
/// by ORIGINAL position (reversed directions are un-reversed).
inline std::vector<Ref> lstm_direction(Tape& t, const LstmCellRefs& p, Ref x,
                                       bool reverse) {
  const auto cols = t.val(x).cols();
  const auto h = t.val(p.u_h).cols();
  Ref h_prev = t.leaf(Mat::Zero(h, 1));
  Ref c_prev = t.leaf(Mat::Zero(h, 1));
  std::vector<Ref> states(static_cast<std::size_t>(cols), Ref{nullptr, -1});
  for (Eigen::Index step = 0; step < cols; ++step) {
    const Eigen::Index pos = reverse ? cols - 1 - step : step;
    Ref xt = slice_cols(x, pos, 1);
    auto [hh, cc] = lstm_step(p, xt, h_prev, c_prev);
    states[static_cast<std::size_t>(pos)] = hh;
    h_prev = hh;
    c_prev = cc;
  }
  return states;
}

struct QueryEncoderRefs {
  Ref embed_table;  // (word_dim, vocab)
  // layer-major: [layer0 forward, layer0 backward, layer1 forward, layer1 backward]
  std::array<LstmCellRefs, 4> cells;
};

struct EmbeddedQueryRefs {
  Ref per_word;  // (d_q, L): [h^f_i; h^b_i] + PE_i
  Ref global;    // (d_q, 1): [h^f_L; h^b_1], no PE
};

/// Token lookup, two stacked bidirectional recurrent layers, positional
/// encoding on per-word states only. The layer-2 input at each position is
/// the concatenation of layer-1 forward and backward states.
inline EmbeddedQueryRefs embed_query_node(Tape& t, const QueryEncoderRefs& p,
                                          const std::vector<int>& token_ids,
                                          const PositionalEncodingSpec& pe,
                                          Ref learned_pe = {nullptr, -1}) {
  if (token_ids.empty()) throw DataError("embed_query: empty token sequence");
  const auto vocab = t.val(p.embed_table).cols();
  for (int id : token_ids)
    if (id < 0 || id >= vocab)
      throw DataError("token id " + std::to_string(id) +
                      " outside vocabulary of size " + std::to_string(vocab));
  const auto L = static_cast<Eigen::Index>(token_ids.size());

  Ref x = gather_cols(p.embed_table, token_ids);
  auto f1 = lstm_direction(t, p.cells[0], x, false);
  auto b1 = lstm_direction(t, p.cells[1], x, true);

  std::vector<Ref> h1(static_cast<std::size_t>(L), Ref{nullptr, -1});
  for (Eigen::Index i = 0; i < L; ++i)
    h1[i] = concat_rows(f1[i], b1[i]);
  Ref x2 = concat_cols(h1);

  auto f2 = lstm_direction(t, p.cells[2], x2, false);
  auto b2 = lstm_direction(t, p.cells[3], x2, true);

  std::vector<Ref> cols(static_cast<std::size_t>(L), Ref{nullptr, -1});
  for (Eigen::Index i = 0; i < L; ++i)
    cols[i] = concat_rows(f2[i], b2[i]);
  Ref q_raw = concat_cols(cols);

  std::vector<int> positions(static_cast<std::size_t>(L));
  for (Eigen::Index i = 0; i < L; ++i) positions[i] = static_cast<int>(i);
  Ref pe_cols = pe_columns_node(t, pe, positions, learned_pe);

  EmbeddedQueryRefs out;
  out.per_word = add(q_raw, pe_cols);
  // forward state at the last position, backward state at the first
  out.global = concat_rows(f2[static_cast<std::size_t>(L - 1)], b2[0]);
  return out;
}

}  // namespace ag
}  // namespace cma
