#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cma/common.hpp"
#include "cma/errors.hpp"
#include "cma/interval.hpp"
#include "cma/losses.hpp"
#include "cma/vocab.hpp"

namespace cma {

struct VideoFeatureSequence {
  Mat features;  // d_v x raw clip count
  double duration = 0.0;
};

struct QuerySequence {
  std::vector<int> token_ids;
  std::string text;
};

struct GroundingSample {
  std::string id;
  VideoFeatureSequence video;
  QuerySequence query;
  TimeInterval gt;  // normalized annotation, possibly biased
  std::pair<double, double> gt_seconds{0.0, 0.0};
  // For synthetic data the unbiased signal interval; equals gt when the
  // annotation carries no noise or the source has no separate truth.
  TimeInterval gt_true;
};

struct Dataset {
  std::vector<GroundingSample> samples;
  Vocab vocab;
};

// ---------------------------------------------------------------------------
// Annotation files

enum class AnnotationFormat { Jsonl, CharadesTxt };

inline AnnotationFormat parse_annotation_format(const std::string& s) {
  if (s == "jsonl") return AnnotationFormat::Jsonl;
  if (s == "charades_txt") return AnnotationFormat::CharadesTxt;
  throw ConfigError("unknown annotation format: " + s);
}

/// Annotation record before features are attached.
struct AnnotationRecord {
  std::string id;
  double start_s = 0.0;
  double end_s = 0.0;
  double duration = 0.0;
  std::string text;
  bool has_true = false;
  TimeInterval true_interval;  // normalized

  TimeInterval normalized() const {
    return normalize_interval(start_s, end_s, duration);
  }
};

namespace detail {

inline void validate_record(AnnotationRecord& rec, const std::string& where,
                            std::vector<std::string>* warnings, bool& keep) {
  keep = true;
  if (rec.duration <= 0.0)
    throw DataError(where + ": duration must be positive");
  if (rec.end_s < rec.start_s) {
    if (warnings)
      warnings->push_back(where + ": end before start, record rejected");
    keep = false;
    return;
  }
  if (rec.start_s == 0.0 && rec.end_s == 0.0) {
    if (warnings)
      warnings->push_back(where + ": degenerate zero interval, record rejected");
    keep = false;
    return;
  }
  if (rec.start_s < 0.0) {
    if (warnings) warnings->push_back(where + ": negative start clamped to 0");
    rec.start_s = 0.0;
  }
  if (rec.end_s > rec.duration) {
    if (warnings)
      warnings->push_back(where + ": end beyond duration, clamped");
    rec.end_s = rec.duration;
  }
}

inline AnnotationRecord parse_jsonl_line(const std::string& line,
                                         const std::string& where) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  if (!j.is_object()) throw DataError(where + ": expected a JSON object");
  AnnotationRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
    rec.start_s = j.at("start").get<double>();
    rec.end_s = j.at("end").get<double>();
    rec.duration = j.at("duration").get<double>();
    rec.text = j.at("query").get<std::string>();
    if (j.contains("true_start") && j.contains("true_end")) {
      rec.has_true = true;
      rec.true_interval = {j.at("true_start").get<double>(),
                           j.at("true_end").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  return rec;
}

inline AnnotationRecord parse_charades_line(const std::string& line,
                                            const std::string& where) {
  const auto sep = line.find("##");
  if (sep == std::string::npos)
    throw DataError(where + ": missing '##' separator");
  AnnotationRecord rec;
  rec.text = line.substr(sep + 2);
  std::istringstream head(line.substr(0, sep));
  if (!(head >> rec.id >> rec.start_s >> rec.end_s))
    throw DataError(where + ": expected '<id> <start> <end>' before '##'");
  std::string extra;
  if (head >> extra) throw DataError(where + ": unexpected trailing field");
  // The Charades text format carries no duration; callers must supply one
  // (via the feature file's clip span or a lookup) before normalizing.
  rec.duration = 0.0;
  return rec;
}

}  // namespace detail

/// Reads annotation records. Charades text lines have no duration column, so
/// `default_duration` fills it in; jsonl records carry their own.
/// Malformed lines throw; semantic issues reject or clamp with a warning.
inline std::vector<AnnotationRecord> parse_annotations(
    const std::string& path, AnnotationFormat format,
    std::vector<std::string>* warnings = nullptr,
    double default_duration = 30.0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file: " + path);
  std::vector<AnnotationRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    AnnotationRecord rec = format == AnnotationFormat::Jsonl
                               ? detail::parse_jsonl_line(line, where)
                               : detail::parse_charades_line(line, where);
    if (format == AnnotationFormat::CharadesTxt) rec.duration = default_duration;
    bool keep = false;
    detail::validate_record(rec, where, warnings, keep);
    if (keep) out.push_back(std::move(rec));
  }
  return out;
}

/// Lossless jsonl writer for the fields parse_annotations reads back.
inline void write_annotations_jsonl(const std::vector<AnnotationRecord>& recs,
                                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotation file: " + path);
  for (const auto& rec : recs) {
    nlohmann::json j{{"id", rec.id},
                     {"start", rec.start_s},
                     {"end", rec.end_s},
                     {"duration", rec.duration},
                     {"query", rec.text}};
    if (rec.has_true) {
      j["true_start"] = rec.true_interval.start;
      j["true_end"] = rec.true_interval.end;
    }
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Binary feature files: 12-byte header (magic "CMAF", uint16 d_v,
// uint16 clip count, 4 reserved zero bytes), then row-major clips x d_v
// float32, little endian.

inline void write_features(const std::string& path, const Mat& features) {
  const auto d_v = features.rows();
  const auto clips = features.cols();
  if (d_v <= 0 || clips <= 0)
    throw DataError("feature matrix must be nonempty: " + path);
  if (d_v > 0xFFFF || clips > 0xFFFF)
    throw DataError("feature matrix exceeds uint16 header limits: " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file: " + path);
  out.write("CMAF", 4);
  const auto put_u16 = [&](std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xFF),
                       static_cast<char>((v >> 8) & 0xFF)};
    out.write(b, 2);
  };
  put_u16(static_cast<std::uint16_t>(d_v));
  put_u16(static_cast<std::uint16_t>(clips));
  const char zeros[4] = {0, 0, 0, 0};
  out.write(zeros, 4);
  for (Eigen::Index c = 0; c < clips; ++c) {
    for (Eigen::Index r = 0; r < d_v; ++r) {
      const float f = static_cast<float>(features(r, c));
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!out) throw DataError("short write on feature file: " + path);
}

inline Mat read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "CMAF")
    throw DataError("bad magic in feature file: " + path);
  const auto get_u16 = [&]() -> std::uint16_t {
    unsigned char b[2];
    if (!in.read(reinterpret_cast<char*>(b), 2))
      throw DataError("truncated feature header: " + path);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  };
  const int d_v = get_u16();
  const int clips = get_u16();
  char reserved[4];
  if (!in.read(reserved, 4))
    throw DataError("truncated feature header: " + path);
  if (d_v == 0 || clips == 0)
    throw DataError("feature file declares empty matrix: " + path);
  Mat m(d_v, clips);
  for (int c = 0; c < clips; ++c) {
    for (int r = 0; r < d_v; ++r) {
      float f;
      if (!in.read(reinterpret_cast<char*>(&f), 4))
        throw DataError("truncated feature payload: " + path);
      m(r, c) = static_cast<double>(f);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset assembly from files

/// Attaches per-id feature files (<dir>/<id>.cmaf) to annotation records.
/// Queries are encoded with the supplied vocabulary.
inline Dataset assemble_dataset(const std::vector<AnnotationRecord>& recs,
                                const std::string& features_dir,
                                Vocab vocab) {
  Dataset ds;
  ds.vocab = std::move(vocab);
  for (const auto& rec : recs) {
    GroundingSample s;
    s.id = rec.id;
    const auto fpath =
        (std::filesystem::path(features_dir) / (rec.id + ".cmaf")).string();
    s.video.features = read_features(fpath);
    s.video.duration = rec.duration;
    s.query.text = rec.text;
    s.query.token_ids = ds.vocab.encode(rec.text);
    s.gt = rec.normalized();
    s.gt_seconds = {rec.start_s, rec.end_s};
    s.gt_true = rec.has_true ? rec.true_interval : s.gt;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generation

struct SyntheticConfig {
  int count = 1000;
  int n_clips = 16;  // raw clips per generated video
  int d_v = 32;
  int vocab_size = 64;
  std::uint64_t seed = 0;
  double bias_sigma = 0.0;    // annotation noise scale, in interval lengths
  double mean_ratio = 0.3;    // target interval length / duration
  double ratio_jitter = 0.15; // uniform half-width around mean_ratio
  double signal_noise = 0.1;
  double background_noise = 0.5;
  int n_actions = 8;
  double duration = 30.0;  // seconds per video
  bool with_distractor = true;

  void validate() const {
    if (count < 0) throw ConfigError("synthetic count must be nonnegative");
    if (n_clips < 2) throw ConfigError("synthetic n_clips must be at least 2");
    if (d_v < 1) throw ConfigError("synthetic d_v must be positive");
    if (n_actions < 2)
      throw ConfigError("synthetic n_actions must be at least 2");
    if (vocab_size < n_actions + 6)
      throw ConfigError("synthetic vocab too small for actions plus fillers");
    if (bias_sigma < 0) throw ConfigError("bias_sigma must be nonnegative");
    if (mean_ratio - ratio_jitter <= 0.0 || mean_ratio + ratio_jitter >= 1.0)
      throw ConfigError("interval ratio range must stay inside (0,1)");
    if (duration <= 0) throw ConfigError("duration must be positive");
  }
};

/// Deterministic per seed. Each video hides one action's signal vector in the
/// clips of a target interval; the query names that action among filler
/// tokens. A distractor interval carries a different action's signal so the
/// model must read the query rather than detect "any signal". The stored
/// annotation is the true interval with truncated Gaussian noise
/// (sigma = bias_sigma * length), resampled until it stays ordered in [0,1].
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  Dataset ds;
  for (int a = 0; a < cfg.n_actions; ++a) ds.vocab.add("act" + std::to_string(a));
  for (int w = ds.vocab.size(); w < cfg.vocab_size;)
    w = ds.vocab.add("w" + std::to_string(w)) + 1;

  // Fixed signal vector per action, drawn before any sample so the mapping
  // does not depend on count.
  std::vector<Vec> signals;
  for (int a = 0; a < cfg.n_actions; ++a) {
    Vec s(cfg.d_v);
    for (int i = 0; i < cfg.d_v; ++i) s(i) = rng.normal();
    signals.push_back(std::move(s));
  }
  const int n_fillers = cfg.vocab_size - 2 - cfg.n_actions;

  for (int idx = 0; idx < cfg.count; ++idx) {
    GroundingSample s;
    s.id = "syn" + std::to_string(idx);
    s.video.duration = cfg.duration;

    const int action = static_cast<int>(rng.uniform_index(cfg.n_actions));
    const double ratio =
        cfg.mean_ratio + rng.uniform(-cfg.ratio_jitter, cfg.ratio_jitter);
    const double start = rng.uniform(0.0, 1.0 - ratio);
    s.gt_true = {start, start + ratio};

    // Query: 3-8 tokens, one action word at a random slot, fillers elsewhere.
    const int len = 3 + static_cast<int>(rng.uniform_index(6));
    const int slot = static_cast<int>(rng.uniform_index(len));
    std::vector<std::string> words(len);
    for (int i = 0; i < len; ++i) {
      if (i == slot) {
        words[i] = "act" + std::to_string(action);
      } else {
        const int f = static_cast<int>(rng.uniform_index(n_fillers));
        words[i] = "w" + std::to_string(2 + cfg.n_actions + f);
      }
    }
    std::string text;
    for (int i = 0; i < len; ++i) {
      if (i) text += ' ';
      text += words[i];
    }
    s.query.text = text;
    s.query.token_ids = ds.vocab.encode(text);

    // Distractor: a different action placed in the larger free region, if it
    // fits at least one clip span.
    int dis_action = -1;
    TimeInterval dis{0.0, 0.0};
    if (cfg.with_distractor) {
      dis_action =
          (action + 1 + static_cast<int>(rng.uniform_index(cfg.n_actions - 1))) %
          cfg.n_actions;
      const double before = s.gt_true.start;
      const double after = 1.0 - s.gt_true.end;
      const double region_len = std::max(before, after);
      const double dis_len = std::min(ratio, 0.8 * region_len);
      if (dis_len >= 1.0 / cfg.n_clips) {
        const double lo = before >= after ? 0.0 : s.gt_true.end;
        const double span = region_len - dis_len;
        const double dstart = lo + rng.uniform(0.0, span);
        dis = {dstart, dstart + dis_len};
      } else {
        dis_action = -1;
      }
    }

    const auto target_clips = attention_support(s.gt_true, cfg.n_clips);
    std::vector<int> dis_clips;
    if (dis_action >= 0) dis_clips = attention_support(dis, cfg.n_clips);

    Mat feats(cfg.d_v, cfg.n_clips);
    for (int c = 0; c < cfg.n_clips; ++c) {
      const bool in_target = std::binary_search(target_clips.begin(),
                                                target_clips.end(), c);
      const bool in_dis =
          !in_target &&
          std::binary_search(dis_clips.begin(), dis_clips.end(), c);
      for (int r = 0; r < cfg.d_v; ++r) {
        if (in_target)
          feats(r, c) = signals[action](r) + rng.normal(0.0, cfg.signal_noise);
        else if (in_dis)
          feats(r, c) =
              signals[dis_action](r) + rng.normal(0.0, cfg.signal_noise);
        else
          feats(r, c) = rng.normal(0.0, cfg.background_noise);
      }
    }
    s.video.features = std::move(feats);

    // Annotation bias.
    TimeInterval ann = s.gt_true;
    if (cfg.bias_sigma > 0.0) {
      const double sigma = cfg.bias_sigma * s.gt_true.length();
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double bs = s.gt_true.start + rng.normal(0.0, sigma);
        const double be = s.gt_true.end + rng.normal(0.0, sigma);
        if (bs >= 0.0 && be <= 1.0 && be > bs) {
          ann = {bs, be};
          break;
        }
      }
    }
    s.gt = ann;
    s.gt_seconds = denormalize_interval(ann, cfg.duration);

    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Annotation records for a generated dataset, carrying the unbiased truth
/// so file round trips keep it.
inline std::vector<AnnotationRecord> annotation_records(const Dataset& ds) {
  std::vector<AnnotationRecord> recs;
  for (const auto& s : ds.samples) {
    AnnotationRecord rec;
    rec.id = s.id;
    rec.start_s = s.gt_seconds.first;
    rec.end_s = s.gt_seconds.second;
    rec.duration = s.video.duration;
    rec.text = s.query.text;
    rec.has_true = true;
    rec.true_interval = s.gt_true;
    recs.push_back(std::move(rec));
  }
  return recs;
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats {
  static constexpr int kBuckets = 20;
  std::vector<std::int64_t> ratio_histogram =
      std::vector<std::int64_t>(kBuckets, 0);
  double mean_ratio = 0.0;
  std::int64_t count = 0;
};

inline DatasetStats dataset_stats(const Dataset& ds) {
  if (ds.samples.empty()) throw DataError("dataset_stats: empty dataset");
  DatasetStats st;
  double sum = 0.0;
  for (const auto& s : ds.samples) {
    const double ratio = std::clamp(s.gt.length(), 0.0, 1.0);
    const int bucket =
        std::min(DatasetStats::kBuckets - 1,
                 static_cast<int>(ratio * DatasetStats::kBuckets));
    ++st.ratio_histogram[bucket];
    sum += ratio;
    ++st.count;
  }
  st.mean_ratio = sum / static_cast<double>(st.count);
  return st;
}

inline std::string format_stats(const DatasetStats& st) {
  std::ostringstream out;
  out << "samples: " << st.count << "\n";
  out << "mean interval ratio: " << st.mean_ratio << "\n";
  const auto peak =
      *std::max_element(st.ratio_histogram.begin(), st.ratio_histogram.end());
  for (int b = 0; b < DatasetStats::kBuckets; ++b) {
    const double lo = b / static_cast<double>(DatasetStats::kBuckets);
    const double hi = (b + 1) / static_cast<double>(DatasetStats::kBuckets);
    const int bar = peak == 0 ? 0
                              : static_cast<int>(40.0 * st.ratio_histogram[b] /
                                                 static_cast<double>(peak));
    char range[32];
    std::snprintf(range, sizeof(range), "[%.2f,%.2f)", lo, hi);
    out << range << " " << std::string(bar, '#') << " "
        << st.ratio_histogram[b] << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Batching

/// Evenly spaced index grid over [0, raw-1] with ties rounded down:
/// idx_j = round_half_down(j * (raw-1) / (n-1)).
inline std::vector<int> uniform_clip_indices(int raw, int n) {
  if (raw < 1 || n < 1)
    throw ConfigError("uniform_clip_indices: sizes must be positive");
  std::vector<int> idx(n);
  if (n == 1) {
    idx[0] = (raw - 1) / 2;
    return idx;
  }
  for (int j = 0; j < n; ++j) {
    const double x = static_cast<double>(j) * (raw - 1) / (n - 1);
    idx[j] = static_cast<int>(std::ceil(x - 0.5));  // half rounds down
  }
  return idx;
}

/// Uniformly resamples (or stretches, when raw < n) a clip sequence to
/// exactly n columns.
inline Mat resample_clips(const Mat& raw, int n) {
  if (raw.cols() < 1) throw DataError("resample_clips: empty clip sequence");
  const auto idx = uniform_clip_indices(static_cast<int>(raw.cols()), n);
  Mat out(raw.rows(), n);
  for (int j = 0; j < n; ++j) out.col(j) = raw.col(idx[j]);
  return out;
}

struct PaddedQuery {
  std::vector<int> ids;   // length L_max, <pad> after the real tokens
  std::vector<int> mask;  // 1 for real tokens, 0 for padding
  int length = 0;
};

inline PaddedQuery pad_query(const std::vector<int>& ids, int l_max) {
  if (l_max < 1) throw ConfigError("pad_query: L_max must be positive");
  if (static_cast<int>(ids.size()) > l_max)
    throw DataError("pad_query: query longer than L_max");
  PaddedQuery p;
  p.length = static_cast<int>(ids.size());
  p.ids = ids;
  p.ids.resize(l_max, Vocab::kPad);
  p.mask.assign(l_max, 0);
  std::fill(p.mask.begin(), p.mask.begin() + p.length, 1);
  return p;
}

struct BatchItem {
  int sample_index = 0;
  Mat clips;  // d_v x N
  PaddedQuery query;
};

struct SampleBatch {
  std::vector<BatchItem> items;
};

/// Order-preserving fixed-shape batches; the final batch may be short.
inline std::vector<SampleBatch> make_batches(const Dataset& ds, int size,
                                             int n_clips, int l_max) {
  if (size < 1) throw ConfigError("make_batches: batch size must be positive");
  std::vector<SampleBatch> out;
  SampleBatch cur;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    BatchItem item;
    item.sample_index = static_cast<int>(i);
    item.clips = resample_clips(s.video.features, n_clips);
    item.query = pad_query(s.query.token_ids, l_max);
    cur.items.push_back(std::move(item));
    if (static_cast<int>(cur.items.size()) == size) {
      out.push_back(std::move(cur));
      cur = SampleBatch{};
    }
  }
  if (!cur.items.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace cma
