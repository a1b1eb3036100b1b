#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"

#include "cma/errors.hpp"
#include "cma/losses.hpp"

namespace cma {

enum class PEVariant { None, Learned, Sinusoidal };
enum class FusionOp { Hadamard, Concat, Add };
// encoder_only pools the encoder output directly; decoder_only skips guide
// fusion and feeds the embedded video straight into the decoder.
enum class Structure { Full, EncoderOnly, DecoderOnly };

inline std::string to_string(PEVariant v) {
  switch (v) {
    case PEVariant::None: return "none";
    case PEVariant::Learned: return "learned";
    case PEVariant::Sinusoidal: return "sinusoidal";
  }
  throw ConfigError("invalid pe_variant value");
}

inline std::string to_string(FusionOp v) {
  switch (v) {
    case FusionOp::Hadamard: return "hadamard";
    case FusionOp::Concat: return "concat";
    case FusionOp::Add: return "add";
  }
  throw ConfigError("invalid fusion_op value");
}

inline std::string to_string(Structure v) {
  switch (v) {
    case Structure::Full: return "full";
    case Structure::EncoderOnly: return "encoder_only";
    case Structure::DecoderOnly: return "decoder_only";
  }
  throw ConfigError("invalid structure value");
}

inline PEVariant parse_pe_variant(const std::string& s) {
  if (s == "none") return PEVariant::None;
  if (s == "learned") return PEVariant::Learned;
  if (s == "sinusoidal") return PEVariant::Sinusoidal;
  throw ConfigError("unknown pe_variant '" + s +
                    "' (expected none|learned|sinusoidal)");
}

inline FusionOp parse_fusion_op(const std::string& s) {
  if (s == "hadamard") return FusionOp::Hadamard;
  if (s == "concat") return FusionOp::Concat;
  if (s == "add") return FusionOp::Add;
  throw ConfigError("unknown fusion_op '" + s +
                    "' (expected hadamard|concat|add)");
}

inline Structure parse_structure(const std::string& s) {
  if (s == "full") return Structure::Full;
  if (s == "encoder_only") return Structure::EncoderOnly;
  if (s == "decoder_only") return Structure::DecoderOnly;
  throw ConfigError("unknown structure '" + s +
                    "' (expected full|encoder_only|decoder_only)");
}

struct ModelConfig {
  int d = 512;        // shared model dim
  int d_v = 32;       // raw clip feature dim
  int d_q = 512;      // query embedding dim; must equal d (cross-attention)
  int d_s = 256;      // phrase-attention bottleneck
  int k = 1;          // guide vectors
  int heads = 4;
  int layers = 2;
  int n_clips = 128;  // N, clips per video after resampling
  int max_words = 10; // L_max
  int word_dim = 300;
  int vocab_size = 64;
  PEVariant pe_variant = PEVariant::Sinusoidal;
  FusionOp fusion_op = FusionOp::Hadamard;
  Structure structure = Structure::Full;
  bool use_residual = true;
  LossConfig loss{};
  double lr = 1e-3;
  int batch_size = 100;
  int epochs = 100;
  double grad_clip = 10.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;

  // per-direction recurrent hidden size; [h^f; h^b] must fill d_q
  int lstm_hidden() const { return d_q / 2; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0)
        throw ConfigError(std::string(name) + " must be positive, got " +
                          std::to_string(v));
    };
    positive(d, "d");
    positive(d_v, "d_v");
    positive(d_q, "d_q");
    positive(d_s, "d_s");
    positive(k, "k");
    positive(heads, "heads");
    positive(layers, "layers");
    positive(n_clips, "N");
    positive(max_words, "L_max");
    positive(word_dim, "word_dim");
    positive(vocab_size, "vocab_size");
    positive(batch_size, "batch_size");
    if (epochs < 0)
      throw ConfigError("epochs must be nonnegative, got " +
                        std::to_string(epochs));
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be nonnegative");
    if (d % heads != 0)
      throw ConfigError("d (" + std::to_string(d) +
                        ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    if (d != d_q)
      throw ConfigError(
          "d (" + std::to_string(d) + ") must equal d_q (" +
          std::to_string(d_q) +
          "): decoder cross-attention mixes query and video features in one "
          "space");
    if (d_q % 2 != 0)
      throw ConfigError("d_q must be even (two recurrent directions)");
    if (vocab_size < 2)
      throw ConfigError("vocab_size must cover <pad> and <unk>");
    loss.validate();
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["d"] = c.d;
  j["d_v"] = c.d_v;
  j["d_q"] = c.d_q;
  j["d_s"] = c.d_s;
  j["k"] = c.k;
  j["heads"] = c.heads;
  j["layers"] = c.layers;
  j["N"] = c.n_clips;
  j["L_max"] = c.max_words;
  j["word_dim"] = c.word_dim;
  j["vocab_size"] = c.vocab_size;
  j["pe_variant"] = to_string(c.pe_variant);
  j["fusion_op"] = to_string(c.fusion_op);
  j["structure"] = to_string(c.structure);
  j["use_residual"] = c.use_residual;
  j["loss"] = {{"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"lambda_ta", c.loss.lambda_ta},
               {"lambda_sd", c.loss.lambda_sd},
               {"sum_residuals", c.loss.sum_residuals}};
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["grad_clip"] = c.grad_clip;
  j["seed"] = c.seed;
  return j;
}

/// Parses a (possibly partial) config object; unknown keys are rejected so
/// typos fail loudly instead of silently keeping a default.
inline ModelConfig config_from_json(const nlohmann::json& j,
                                    ModelConfig base = ModelConfig{}) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  ModelConfig c = base;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "d") c.d = value.get<int>();
      else if (key == "d_v") c.d_v = value.get<int>();
      else if (key == "d_q") c.d_q = value.get<int>();
      else if (key == "d_s") c.d_s = value.get<int>();
      else if (key == "k") c.k = value.get<int>();
      else if (key == "heads") c.heads = value.get<int>();
      else if (key == "layers") c.layers = value.get<int>();
      else if (key == "N") c.n_clips = value.get<int>();
      else if (key == "L_max") c.max_words = value.get<int>();
      else if (key == "word_dim") c.word_dim = value.get<int>();
      else if (key == "vocab_size") c.vocab_size = value.get<int>();
      else if (key == "pe_variant")
        c.pe_variant = parse_pe_variant(value.get<std::string>());
      else if (key == "fusion_op")
        c.fusion_op = parse_fusion_op(value.get<std::string>());
      else if (key == "structure")
        c.structure = parse_structure(value.get<std::string>());
      else if (key == "use_residual") c.use_residual = value.get<bool>();
      else if (key == "loss") {
        if (!value.is_object())
          throw ConfigError("config key 'loss' must be an object");
        for (const auto& [lk, lv] : value.items()) {
          if (lk == "alpha") c.loss.alpha = lv.get<double>();
          else if (lk == "beta") c.loss.beta = lv.get<double>();
          else if (lk == "lambda_ta") c.loss.lambda_ta = lv.get<double>();
          else if (lk == "lambda_sd") c.loss.lambda_sd = lv.get<double>();
          else if (lk == "sum_residuals")
            c.loss.sum_residuals = lv.get<bool>();
          else
            throw ConfigError("unknown config key 'loss." + lk + "'");
        }
      } else if (key == "lr") c.lr = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "grad_clip") c.grad_clip = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has wrong type: ") + e.what());
  }
  return c;
}

inline ModelConfig load_config(const std::string& path,
                               ModelConfig base = ModelConfig{}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " +
                      e.what());
  }
  return config_from_json(j, base);
}

inline void save_config(const ModelConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << config_to_json(c).dump(2) << "\n";
}

}  // namespace cma
