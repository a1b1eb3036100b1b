#pragma once

#include <string>

#include "cma/autograd.hpp"
#include "cma/embedding.hpp"

namespace cma::ag {

struct PhraseParamsRefs {
  Ref w_s1;  // (d_s, d) bottleneck
  Ref w_s2;  // (k, d_s) one logit row per guide
};

struct PhraseAttentionRefs {
  Ref weights;  // (k, L), each row a distribution over words
  Ref guides;   // (d, k), column j = Q^in * weights row j
};

/// Structured self-attention over the embedded words: k parallel attention
/// rows give k guide vectors, each a convex combination of word columns.
inline PhraseAttentionRefs extract_phrases_node(Ref q_per_word,
                                                const PhraseParamsRefs& p) {
  Tape& t = *q_per_word.tape;
  if (t.val(p.w_s1).cols() != t.val(q_per_word).rows())
    throw ConfigError("phrase extraction: W_s1 columns must match d");
  if (t.val(p.w_s2).cols() != t.val(p.w_s1).rows())
    throw ConfigError("phrase extraction: W_s2 columns must match W_s1 rows");
  Ref logits = matmul(p.w_s2, tanh_(matmul(p.w_s1, q_per_word)));
  PhraseAttentionRefs out;
  out.weights = softmax_rows(logits);
  out.guides = matmul(q_per_word, transpose(out.weights));
  return out;
}

/// Single-guide model: the guide is the sentence-level state itself.
inline Ref single_phrase_guide(const EmbeddedQueryRefs& q) { return q.global; }

}  // namespace cma::ag
