#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cma/config.hpp"
#include "cma/data.hpp"
#include "cma/metrics.hpp"
#include "cma/model.hpp"

namespace cma {

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with the usual moment constants. Moments are kept per parameter in
/// store order; step counts from 1 for bias correction.
class Adam {
 public:
  Adam(const ParamStore& ps, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_.push_back(Mat::Zero(ps.value(i).rows(), ps.value(i).cols()));
      v_.push_back(Mat::Zero(ps.value(i).rows(), ps.value(i).cols()));
    }
  }

  void step(ParamStore& ps, const std::vector<Mat>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
      const Mat m_hat = m_[i] / bc1;
      const Mat v_hat = v_[i] / bc2;
      ps.value(i) -=
          lr_ * (m_hat.array() / (v_hat.array().sqrt() + eps_)).matrix();
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Scales grads in place to global norm `clip` when they exceed it.
/// clip = 0 disables. Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Mat>& grads, double clip) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CMAC", version, config JSON, epoch, RNG state,
// vocabulary, then the raw parameter payload. Reload reproduces forward
// outputs bitwise.

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  int epoch = 0;  // completed epochs at save time
  std::string rng_state;
  std::vector<std::string> vocab_words;

  Vocab vocab() const {
    Vocab v;
    for (const auto& w : vocab_words) v.add(w);
    return v;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError("checkpoint truncated reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& in, const std::string& what) {
  const auto len = get_u32(in, what);
  std::string s(len, '\0');
  if (len && !in.read(s.data(), len))
    throw DataError("checkpoint truncated reading " + what);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write("CMAC", 4);
  detail::put_u32(out, 1);  // format version
  detail::put_str(out, config_to_json(ck.config).dump());
  detail::put_u32(out, static_cast<std::uint32_t>(ck.epoch));
  detail::put_str(out, ck.rng_state);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.vocab_words.size()));
  for (const auto& w : ck.vocab_words) detail::put_str(out, w);
  ck.params.write_raw(out);
  if (!out) throw DataError("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "CMAC")
    throw DataError("bad magic in checkpoint: " + path);
  const auto version = detail::get_u32(in, "version");
  if (version != 1)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  Checkpoint ck;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::get_str(in, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config unreadable: ") + e.what());
  }
  ck.config = config_from_json(j);
  ck.epoch = static_cast<int>(detail::get_u32(in, "epoch"));
  ck.rng_state = detail::get_str(in, "rng state");
  const auto words = detail::get_u32(in, "vocab size");
  for (std::uint32_t i = 0; i < words; ++i)
    ck.vocab_words.push_back(detail::get_str(in, "vocab word"));
  // Parameter shapes and order come from the config; the payload only
  // carries scalars.
  Rng scratch(0);
  ck.params = init_params(ck.config, scratch);
  ck.params.read_raw(in);
  return ck;
}

// ---------------------------------------------------------------------------
// Evaluation over a dataset

struct PredictionRow {
  std::string id;
  TimeInterval pred;       // normalized, raw
  TimeInterval sanitized;  // clamped/ordered
  std::pair<double, double> pred_seconds{0.0, 0.0};
  double iou = 0.0;
};

/// Predicts every sample (clips resampled to the configured grid) and scores
/// against the stored annotation, or against the unbiased truth when
/// `against_true` is set.
inline EvalReport evaluate_dataset(const ParamStore& ps,
                                   const ModelConfig& cfg, const Dataset& ds,
                                   bool against_true = false,
                                   std::vector<PredictionRow>* rows = nullptr) {
  if (ds.samples.empty()) throw DataError("evaluate: empty dataset");
  std::vector<TimeInterval> preds, gts;
  for (const auto& s : ds.samples) {
    const Mat clips = resample_clips(s.video.features, cfg.n_clips);
    const TimeInterval p = predict(ps, cfg, clips, s.query.token_ids);
    const TimeInterval gt = against_true ? s.gt_true : s.gt;
    preds.push_back(p);
    gts.push_back(gt);
    if (rows != nullptr) {
      PredictionRow row;
      row.id = s.id;
      row.pred = p;
      row.sanitized = sanitize_for_metrics(p);
      row.pred_seconds = denormalize_interval(row.sanitized, s.video.duration);
      row.iou = temporal_iou(row.sanitized, gt);
      rows->push_back(std::move(row));
    }
  }
  return evaluate(preds, gts);
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  int epoch = 0;  // 1-based, epoch just completed
  double train_loss = 0.0;
  double train_reg = 0.0, train_ta = 0.0, train_sd = 0.0;
  EvalReport val;
  bool has_val = false;
};

struct TrainResult {
  ParamStore params;       // after the last epoch
  ParamStore best_params;  // highest validation mIoU (== params without val)
  int best_epoch = 0;
  double best_miou = 0.0;
  std::vector<EpochStats> history;
  std::string rng_state;  // trainer RNG after the last epoch
};

/// Minibatch training. Per-sample graphs are built on their own tapes and the
/// batch gradient is the mean over samples, accumulated in parameter-store
/// order so runs are bitwise reproducible for a fixed seed. The metrics log
/// gets one JSON line per optimizer step and one per epoch.
inline TrainResult train(const ModelConfig& cfg, const Dataset& train_ds,
                         const Dataset& val_ds, std::ostream* log = nullptr) {
  cfg.validate();
  if (train_ds.samples.empty()) throw DataError("train: empty dataset");

  Rng rng(cfg.seed);
  TrainResult res;
  res.params = init_params(cfg, rng);
  Adam opt(res.params, cfg.lr);

  // Clip grids and token ids do not change across epochs.
  struct Prepared {
    Mat clips;
    std::vector<int> tokens;
    TimeInterval gt;
    std::string id;
  };
  std::vector<Prepared> prepared;
  for (const auto& s : train_ds.samples) {
    Prepared p;
    p.clips = resample_clips(s.video.features, cfg.n_clips);
    p.tokens = s.query.token_ids;
    p.gt = s.gt;
    p.id = s.id;
    prepared.push_back(std::move(p));
  }

  std::vector<std::size_t> order(prepared.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  res.best_miou = -std::numeric_limits<double>::infinity();
  std::int64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double ep_loss = 0.0, ep_reg = 0.0, ep_ta = 0.0, ep_sd = 0.0;
    std::int64_t ep_samples = 0;

    for (std::size_t base = 0; base < order.size();
         base += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), base + static_cast<std::size_t>(cfg.batch_size));
      const int batch_id =
          static_cast<int>(base / static_cast<std::size_t>(cfg.batch_size));

      std::vector<Mat> grads;
      grads.reserve(res.params.size());
      for (std::size_t i = 0; i < res.params.size(); ++i)
        grads.push_back(Mat::Zero(res.params.value(i).rows(),
                                  res.params.value(i).cols()));

      double batch_loss = 0.0, batch_reg = 0.0, batch_ta = 0.0,
             batch_sd = 0.0;
      for (std::size_t bi = base; bi < end; ++bi) {
        const auto& p = prepared[order[bi]];
        ag::Tape t;
        GraphCtx ctx = GraphCtx::bind(t, res.params);
        ModelGraph g = build_forward(t, ctx, cfg, p.clips, p.tokens);
        LossGraph lg = build_loss(t, g, p.gt, cfg);
        const double loss = t.val(lg.total)(0, 0);
        if (!std::isfinite(loss))
          throw NumericalError("non-finite loss in epoch " +
                               std::to_string(epoch) + " batch " +
                               std::to_string(batch_id) + " (sample " + p.id +
                               ")");
        const auto rep = report_from_graph(t, lg, cfg);
        batch_loss += loss;
        batch_reg += rep.reg;
        batch_ta += rep.ta;
        batch_sd += rep.sd;
        t.backward(lg.total);
        for (std::size_t i = 0; i < res.params.size(); ++i)
          if (t.has_grad(ctx.refs[i].idx)) grads[i] += t.grad(ctx.refs[i].idx);
      }

      const double inv = 1.0 / static_cast<double>(end - base);
      for (auto& g : grads) g *= inv;
      const double gnorm = clip_global_norm(grads, cfg.grad_clip);
      if (!std::isfinite(gnorm))
        throw NumericalError("non-finite gradient in epoch " +
                             std::to_string(epoch) + " batch " +
                             std::to_string(batch_id));
      opt.step(res.params, grads);
      ++global_step;

      ep_loss += batch_loss;
      ep_reg += batch_reg;
      ep_ta += batch_ta;
      ep_sd += batch_sd;
      ep_samples += static_cast<std::int64_t>(end - base);

      if (log != nullptr) {
        nlohmann::json j{{"type", "step"},
                         {"epoch", epoch},
                         {"step", global_step},
                         {"loss", batch_loss * inv},
                         {"reg", batch_reg * inv},
                         {"ta", batch_ta * inv},
                         {"sd", batch_sd * inv},
                         {"grad_norm", gnorm}};
        (*log) << j.dump() << "\n";
      }
    }

    EpochStats st;
    st.epoch = epoch;
    const double inv_n = 1.0 / static_cast<double>(ep_samples);
    st.train_loss = ep_loss * inv_n;
    st.train_reg = ep_reg * inv_n;
    st.train_ta = ep_ta * inv_n;
    st.train_sd = ep_sd * inv_n;

    if (!val_ds.samples.empty()) {
      st.val = evaluate_dataset(res.params, cfg, val_ds);
      st.has_val = true;
      if (st.val.miou > res.best_miou) {
        res.best_miou = st.val.miou;
        res.best_epoch = epoch;
        res.best_params = res.params;
      }
    }

    if (log != nullptr) {
      nlohmann::json j{{"type", "epoch"},
                       {"epoch", epoch},
                       {"train_loss", st.train_loss},
                       {"train_reg", st.train_reg},
                       {"train_ta", st.train_ta},
                       {"train_sd", st.train_sd}};
      if (st.has_val) {
        j["val_miou"] = st.val.miou;
        for (const auto& [thr, r1] : st.val.r1_at) {
          char key[16];
          std::snprintf(key, sizeof(key), "%.1f", thr);
          j["val_r1"][key] = r1;
        }
      }
      (*log) << j.dump() << "\n";
    }
    res.history.push_back(std::move(st));
  }

  if (res.best_epoch == 0) {
    // No validation ever ran (or epochs == 0): the final weights stand in.
    res.best_params = res.params;
    res.best_miou = 0.0;
  }
  res.rng_state = rng.serialize();
  return res;
}

inline Checkpoint make_checkpoint(const ModelConfig& cfg,
                                  const TrainResult& res, const Vocab& vocab,
                                  bool best = true) {
  Checkpoint ck;
  ck.config = cfg;
  ck.params = best ? res.best_params : res.params;
  ck.epoch = best ? res.best_epoch : static_cast<int>(res.history.size());
  ck.rng_state = res.rng_state;
  ck.vocab_words = vocab.words();
  return ck;
}

}  // namespace cma
