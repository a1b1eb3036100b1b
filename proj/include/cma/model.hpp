#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cma/autograd.hpp"
#include "cma/config.hpp"
#include "cma/embedding.hpp"
#include "cma/fusion.hpp"
#include "cma/grounding.hpp"
#include "cma/interval.hpp"
#include "cma/losses.hpp"
#include "cma/phrase.hpp"

namespace cma {

/// Named parameter matrices with a fixed insertion order. Initialization
/// draws in that order from a single stream, so a seed pins every value;
/// optimizer state and checkpoints index parameters by the same order.
class ParamStore {
 public:
  void add(const std::string& name, Mat value) {
    if (index_.count(name))
      throw ConfigError("duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  Mat& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
  }
  const Mat& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  Mat& value(std::size_t i) { return values_[i]; }
  const Mat& value(std::size_t i) const { return values_[i]; }
  std::size_t size() const { return names_.size(); }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const Mat& m : values_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  void write_raw(std::ostream& out) const {
    for (const Mat& m : values_)
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(sizeof(double) * m.size()));
  }

  // shapes must already match (store built from the same config)
  void read_raw(std::istream& in) {
    for (Mat& m : values_) {
      in.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
      if (!in) throw DataError("checkpoint payload truncated");
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void add_attention_block(ParamStore& ps, const std::string& prefix,
                                int d, Rng& rng) {
  ps.add(prefix + ".wq", glorot_uniform(d, d, rng));
  ps.add(prefix + ".wk", glorot_uniform(d, d, rng));
  ps.add(prefix + ".wv", glorot_uniform(d, d, rng));
  ps.add(prefix + ".wo", glorot_uniform(d, d, rng));
  ps.add(prefix + ".ffn_w1", glorot_uniform(4 * d, d, rng));
  ps.add(prefix + ".ffn_b1", Mat::Zero(4 * d, 1));
  ps.add(prefix + ".ffn_w2", glorot_uniform(d, 4 * d, rng));
  ps.add(prefix + ".ffn_b2", Mat::Zero(d, 1));
  ps.add(prefix + ".ln1_g", Mat::Ones(d, 1));
  ps.add(prefix + ".ln1_b", Mat::Zero(d, 1));
  ps.add(prefix + ".ln2_g", Mat::Ones(d, 1));
  ps.add(prefix + ".ln2_b", Mat::Zero(d, 1));
}

inline void add_lstm_direction(ParamStore& ps, const std::string& prefix,
                               int in_dim, int hidden, Rng& rng) {
  ps.add(prefix + ".w_x", glorot_uniform(4 * hidden, in_dim, rng));
  ps.add(prefix + ".u_h", glorot_uniform(4 * hidden, hidden, rng));
  ps.add(prefix + ".b", Mat::Zero(4 * hidden, 1));
}

}  // namespace detail

inline bool uses_encoder(Structure s) { return s != Structure::DecoderOnly; }
inline bool uses_decoder(Structure s) { return s != Structure::EncoderOnly; }
// guides exist wherever the encoder fuses them in
inline bool uses_guides(Structure s) { return uses_encoder(s); }

inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore ps;
  const int d = cfg.d, h = cfg.lstm_hidden();

  ps.add("embed.w_v", glorot_uniform(d, cfg.d_v, rng));
  ps.add("embed.table", glorot_uniform(cfg.word_dim, cfg.vocab_size, rng));
  detail::add_lstm_direction(ps, "lstm.l0.fwd", cfg.word_dim, h, rng);
  detail::add_lstm_direction(ps, "lstm.l0.bwd", cfg.word_dim, h, rng);
  detail::add_lstm_direction(ps, "lstm.l1.fwd", 2 * h, h, rng);
  detail::add_lstm_direction(ps, "lstm.l1.bwd", 2 * h, h, rng);
  if (cfg.pe_variant == PEVariant::Learned) {
    ps.add("embed.pe_video", gaussian_matrix(d, cfg.n_clips, 0.02, rng));
    ps.add("embed.pe_query", gaussian_matrix(cfg.d_q, cfg.max_words, 0.02, rng));
  }
  if (uses_guides(cfg.structure) && cfg.k > 1) {
    ps.add("spe.w_s1", glorot_uniform(cfg.d_s, cfg.d_q, rng));
    ps.add("spe.w_s2", glorot_uniform(cfg.k, cfg.d_s, rng));
  }
  if (uses_encoder(cfg.structure)) {
    if (cfg.fusion_op == FusionOp::Concat)
      ps.add("fuse.w_cat", glorot_uniform(d, 2 * d, rng));
    for (int l = 0; l < cfg.layers; ++l)
      detail::add_attention_block(ps, "enc.l" + std::to_string(l), d, rng);
    if (cfg.k > 1) {
      ps.add("enc.mlp.w1", glorot_uniform(d, cfg.k * d, rng));
      ps.add("enc.mlp.b1", Mat::Zero(d, 1));
      ps.add("enc.mlp.w2", glorot_uniform(d, d, rng));
      ps.add("enc.mlp.b2", Mat::Zero(d, 1));
    }
  }
  if (uses_decoder(cfg.structure)) {
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      detail::add_attention_block(ps, p + ".qsa", d, rng);
      detail::add_attention_block(ps, p + ".vsa", d, rng);
      detail::add_attention_block(ps, p + ".qba", d, rng);
      detail::add_attention_block(ps, p + ".vba", d, rng);
    }
  }
  ps.add("ground.w_b", glorot_uniform(d, d, rng));
  ps.add("ground.u_ta", glorot_uniform(d, 1, rng));
  const int hid = std::max(1, d / 2);
  ps.add("head.w1", glorot_uniform(hid, d, rng));
  ps.add("head.b1", Mat::Zero(hid, 1));
  ps.add("head.w2", glorot_uniform(2, hid, rng));
  ps.add("head.b2", Mat::Zero(2, 1));
  return ps;
}

/// One tape's view of a ParamStore: leaves in store order, looked up by name.
struct GraphCtx {
  ag::Tape* tape = nullptr;
  const ParamStore* store = nullptr;
  std::vector<ag::Ref> refs;

  static GraphCtx bind(ag::Tape& t, const ParamStore& ps) {
    GraphCtx ctx;
    ctx.tape = &t;
    ctx.store = &ps;
    ctx.refs.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i)
      ctx.refs.push_back(t.leaf(ps.value(i)));
    return ctx;
  }

  ag::Ref ref(const std::string& name) const {
    auto it = store_index(name);
    return refs[it];
  }

  ag::AttentionBlockRefs block(const std::string& prefix) const {
    ag::AttentionBlockRefs p;
    p.wq = ref(prefix + ".wq");
    p.wk = ref(prefix + ".wk");
    p.wv = ref(prefix + ".wv");
    p.wo = ref(prefix + ".wo");
    p.w1 = ref(prefix + ".ffn_w1");
    p.b1 = ref(prefix + ".ffn_b1");
    p.w2 = ref(prefix + ".ffn_w2");
    p.b2 = ref(prefix + ".ffn_b2");
    p.ln1_g = ref(prefix + ".ln1_g");
    p.ln1_b = ref(prefix + ".ln1_b");
    p.ln2_g = ref(prefix + ".ln2_g");
    p.ln2_b = ref(prefix + ".ln2_b");
    return p;
  }

 private:
  std::size_t store_index(const std::string& name) const {
    for (std::size_t i = 0; i < store->names().size(); ++i)
      if (store->names()[i] == name) return i;
    throw ConfigError("unknown parameter: " + name);
  }
};

/// Everything the loss and the tests need from one forward pass.
struct ModelGraph {
  ag::Ref pred;                       // (2, 1) raw boundaries
  ag::Ref temporal_a;                 // (1, N)
  ag::Ref spe_weights{nullptr, -1};   // (k, L) when the SPE path is active
  bool has_spe = false;
};

/// Builds the full forward graph for one sample. token_ids must be the
/// unpadded query (padding is dropped before the graph; attending over
/// padded positions would leak them into the softmax).
inline ModelGraph build_forward(ag::Tape& t, const GraphCtx& ctx,
                                const ModelConfig& cfg,
                                const Mat& video_features,
                                const std::vector<int>& token_ids,
                                ForwardTrace* trace = nullptr) {
  const int n = static_cast<int>(video_features.cols());
  if (n < 1) throw DataError("video has no clips");
  if (n > cfg.n_clips)
    throw DataError("video has more clips than the configured grid");
  if (static_cast<int>(token_ids.size()) > cfg.max_words)
    throw DataError("query longer than the configured maximum");
  if (!all_finite(video_features))
    throw DataError("video features contain non-finite values");

  PositionalEncodingSpec video_pe{cfg.pe_variant, cfg.n_clips, cfg.d};
  PositionalEncodingSpec query_pe{cfg.pe_variant, cfg.max_words, cfg.d_q};
  ag::Ref pe_video_table{nullptr, -1}, pe_query_table{nullptr, -1};
  if (cfg.pe_variant == PEVariant::Learned) {
    pe_video_table = ctx.ref("embed.pe_video");
    pe_query_table = ctx.ref("embed.pe_query");
  }

  std::vector<int> vpos(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) vpos[static_cast<std::size_t>(i)] = i;
  ag::Ref features = t.leaf(video_features);
  ag::Ref v_in = ag::embed_video_node(
      ctx.ref("embed.w_v"), features,
      ag::pe_columns_node(t, video_pe, vpos, pe_video_table));

  ag::QueryEncoderRefs qenc;
  qenc.embed_table = ctx.ref("embed.table");
  qenc.cells[0] = {ctx.ref("lstm.l0.fwd.w_x"), ctx.ref("lstm.l0.fwd.u_h"),
                   ctx.ref("lstm.l0.fwd.b")};
  qenc.cells[1] = {ctx.ref("lstm.l0.bwd.w_x"), ctx.ref("lstm.l0.bwd.u_h"),
                   ctx.ref("lstm.l0.bwd.b")};
  qenc.cells[2] = {ctx.ref("lstm.l1.fwd.w_x"), ctx.ref("lstm.l1.fwd.u_h"),
                   ctx.ref("lstm.l1.fwd.b")};
  qenc.cells[3] = {ctx.ref("lstm.l1.bwd.w_x"), ctx.ref("lstm.l1.bwd.u_h"),
                   ctx.ref("lstm.l1.bwd.b")};
  auto q = ag::embed_query_node(t, qenc, token_ids, query_pe, pe_query_table);

  ModelGraph g;
  ag::Ref fused_video{nullptr, -1};

  if (uses_encoder(cfg.structure)) {
    ag::Ref guides{nullptr, -1};
    if (cfg.k == 1) {
      guides = ag::single_phrase_guide(q);
    } else {
      ag::PhraseParamsRefs spe{ctx.ref("spe.w_s1"), ctx.ref("spe.w_s2")};
      auto phrases = ag::extract_phrases_node(q.per_word, spe);
      if (trace != nullptr)
        trace->distributions.emplace_back("spe", t.val(phrases.weights));
      guides = phrases.guides;
      g.spe_weights = phrases.weights;
      g.has_spe = true;
    }
    ag::EncoderRefs enc;
    if (cfg.fusion_op == FusionOp::Concat) enc.w_cat = ctx.ref("fuse.w_cat");
    for (int l = 0; l < cfg.layers; ++l)
      enc.layers.push_back(ctx.block("enc.l" + std::to_string(l)));
    if (cfg.k > 1) {
      enc.mlp_w1 = ctx.ref("enc.mlp.w1");
      enc.mlp_b1 = ctx.ref("enc.mlp.b1");
      enc.mlp_w2 = ctx.ref("enc.mlp.w2");
      enc.mlp_b2 = ctx.ref("enc.mlp.b2");
    }
    fused_video = ag::encode_node(v_in, guides, enc, cfg.fusion_op, cfg.heads,
                                  cfg.use_residual, trace);
  } else {
    fused_video = v_in;
  }

  if (uses_decoder(cfg.structure)) {
    std::vector<ag::DecoderLayerRefs> layers;
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      layers.push_back({ctx.block(p + ".qsa"), ctx.block(p + ".vsa"),
                        ctx.block(p + ".qba"), ctx.block(p + ".vba")});
    }
    auto dec = ag::decode_node(fused_video, q.per_word, layers, cfg.heads,
                               cfg.use_residual, trace);
    fused_video = dec.video_out;
  }

  ag::GroundingRefs ground{ctx.ref("ground.w_b"), ctx.ref("ground.u_ta")};
  auto pool = ag::temporal_pool_node(fused_video, ground, trace);
  g.temporal_a = pool.weights;

  ag::HeadRefs head{ctx.ref("head.w1"), ctx.ref("head.b1"),
                    ctx.ref("head.w2"), ctx.ref("head.b2")};
  g.pred = ag::regress_boundaries_node(pool.pooled, head);
  return g;
}

struct LossGraph {
  ag::Ref total;
  ag::Ref reg, ta;
  ag::Ref sd{nullptr, -1};
  bool has_sd = false;
};

inline LossGraph build_loss(ag::Tape& t, const ModelGraph& g, TimeInterval gt,
                            const ModelConfig& cfg) {
  LossGraph lg;
  lg.reg = ag::regression_loss_node(g.pred, gt, cfg.loss);
  const int n = static_cast<int>(t.val(g.temporal_a).cols());
  lg.ta = ag::temporal_attention_loss_node(g.temporal_a,
                                           attention_support(gt, n));
  ag::Ref total =
      ag::add(lg.reg, ag::scale(lg.ta, cfg.loss.lambda_ta));
  if (g.has_spe) {
    lg.sd = ag::semantic_diversity_loss_node(g.spe_weights);
    lg.has_sd = true;
    total = ag::add(total, ag::scale(lg.sd, cfg.loss.lambda_sd));
  }
  lg.total = total;
  return lg;
}

inline LossReport report_from_graph(const ag::Tape& t, const LossGraph& lg,
                                    const ModelConfig& cfg) {
  LossReport r;
  r.reg = t.val(lg.reg)(0, 0);
  r.ta = t.val(lg.ta)(0, 0);
  r.sd = lg.has_sd ? t.val(lg.sd)(0, 0) : 0.0;
  r.total = r.reg + cfg.loss.lambda_ta * r.ta + cfg.loss.lambda_sd * r.sd;
  return r;
}

/// Raw (unclamped) boundary prediction for one sample.
inline TimeInterval predict(const ParamStore& ps, const ModelConfig& cfg,
                            const Mat& video_features,
                            const std::vector<int>& token_ids,
                            ForwardTrace* trace = nullptr) {
  ag::Tape t;
  GraphCtx ctx = GraphCtx::bind(t, ps);
  ModelGraph g = build_forward(t, ctx, cfg, video_features, token_ids, trace);
  return ag::interval_from_node(t, g.pred);
}

}  // namespace cma
