#pragma once

// Incremental ordering automaton for constrained decoding.
//
// Given the tokens emitted so far, the admissible next coordinates always form
// an interval [lb, Q-1]; E is admissible only at the first slot of a face once
// one face exists. The lower bound combines two tie chains:
//   * vertex chain: while the current vertex equals the previous vertex of the
//     same face slot by slot, it may not drop below it;
//   * face chain: while the current face equals the previous face slot by slot,
//     it may not drop below it, and it must end strictly above it.
// The face chain looks ahead: staying tied at slot p is only allowed if some
// later slot of the previous face is below Q-1, otherwise no strictly larger
// face could follow. This keeps every reachable state live.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meshtron/rng.hpp"
#include "meshtron/sequencer.hpp"

namespace meshtron {

enum class Phase { in_face, in_end, done };

struct DecoderState {
  VocabSpec vocab{};
  Phase phase = Phase::in_face;
  std::size_t faces_emitted = 0;
  int pos_in_face = 0;
  int end_tokens = 0;  // E tokens emitted so far
  std::size_t consumed = 0;  // tokens accepted after the S prefix
  FaceKey current{};
  std::optional<FaceKey> prev_face;
  bool face_tied = false;    // current prefix == prev_face prefix
  bool vertex_tied = false;  // current vertex prefix == previous vertex prefix
};

/// Admissible next tokens: coordinates [lb, Q-1] plus optionally E.
struct ValidSet {
  int lb = 0;
  int q = 0;
  bool end_allowed = false;
  bool end_only = false;

  bool coords_empty() const { return end_only || lb >= q; }
  bool contains(int token) const {
    if (token == q + 1) return end_allowed;
    if (end_only) return false;
    return token >= lb && token < q;
  }
  int count() const { return (coords_empty() ? 0 : q - lb) + (end_allowed ? 1 : 0); }
};

class OrderViolation : public Error {
 public:
  OrderViolation(std::size_t position, int token, int lb)
      : Error("order violation at position " + std::to_string(position) + ": token " + std::to_string(token) +
              " (lower bound " + std::to_string(lb) + ")"),
        position_(position), token_(token), lb_(lb) {}
  std::size_t position() const noexcept { return position_; }
  int token() const noexcept { return token_; }
  int lower_bound() const noexcept { return lb_; }

 private:
  std::size_t position_;
  int token_;
  int lb_;
};

inline DecoderState new_state(VocabSpec vocab) {
  DecoderState s;
  s.vocab = vocab;
  return s;
}

inline ValidSet valid_set(const DecoderState& s) {
  const int q = s.vocab.quant_level;
  ValidSet v;
  v.q = q;
  if (s.phase == Phase::done) throw InvalidArgument("valid_set: decoding already finished");
  if (s.phase == Phase::in_end) {
    v.end_only = true;
    v.end_allowed = true;
    v.lb = q;
    return v;
  }
  const int p = s.pos_in_face;
  int lb = 0;
  if (s.vertex_tied) lb = std::max(lb, s.current[p - kVertexTokens]);
  if (s.face_tied) {
    const auto& prev = *s.prev_face;
    bool suffix_saturated = true;
    for (int k = p + 1; k < kGroup; ++k) suffix_saturated = suffix_saturated && prev[k] == q - 1;
    lb = std::max(lb, prev[p] + (suffix_saturated ? 1 : 0));
  }
  v.lb = lb;
  v.end_allowed = p == 0 && s.faces_emitted >= 1;
  return v;
}

/// Consumes one token; throws OrderViolation if it is not admissible.
inline DecoderState advance(DecoderState s, int token) {
  const ValidSet v = valid_set(s);
  const std::size_t position = kGroup + s.consumed;
  if (!v.contains(token)) throw OrderViolation(position, token, v.lb);
  ++s.consumed;
  if (token == s.vocab.end()) {
    s.phase = ++s.end_tokens == kGroup ? Phase::done : Phase::in_end;
    return s;
  }
  const int p = s.pos_in_face;
  s.current[p] = token;
  if (s.face_tied) s.face_tied = token == (*s.prev_face)[p];
  if (s.vertex_tied) s.vertex_tied = token == s.current[p - kVertexTokens];
  if (++s.pos_in_face == kGroup) {
    s.prev_face = s.current;
    ++s.faces_emitted;
    s.pos_in_face = 0;
    s.face_tied = true;
    s.vertex_tied = false;
  } else if (s.pos_in_face % kVertexTokens == 0) {
    s.vertex_tied = true;  // new vertex starts tied to the one before it
  }
  return s;
}

/// Samples from softmax(logits / temperature) restricted to the admissible set.
template <typename Scalar>
int masked_sample(std::span<const Scalar> logits, const DecoderState& s, double temperature, Rng& rng) {
  const VocabSpec vocab = s.vocab;
  if (logits.size() != static_cast<std::size_t>(vocab.size()))
    throw InvalidArgument("masked_sample: logits length must equal vocab size");
  if (!(temperature > 0.0)) throw InvalidArgument("masked_sample: temperature must be > 0");
  const ValidSet v = valid_set(s);
  const int lo = v.coords_empty() ? vocab.quant_level : v.lb;
  auto each_valid = [&](auto&& f) {
    for (int t = lo; t < vocab.quant_level; ++t) f(t);
    if (v.end_allowed) f(static_cast<int>(vocab.end()));
  };
  double best = -std::numeric_limits<double>::infinity();
  each_valid([&](int t) { best = std::max(best, static_cast<double>(logits[t])); });
  if (!std::isfinite(best)) throw NumericError("masked_sample: no admissible token has finite logit");
  double total = 0.0;
  each_valid([&](int t) { total += std::exp((logits[t] - best) / temperature); });
  double u = rng.uniform() * total;
  int chosen = -1;
  each_valid([&](int t) {
    if (chosen >= 0) return;
    const double w = std::exp((logits[t] - best) / temperature);
    if (u < w) chosen = t;
    u -= w;
  });
  if (chosen < 0) {  // rounding left u just above zero; take the last positive-weight token
    each_valid([&](int t) {
      if (std::exp((logits[t] - best) / temperature) > 0.0) chosen = t;
    });
  }
  return chosen;
}

template <typename Scalar>
int masked_sample(std::span<const Scalar> logits, const DecoderState& s, double temperature, std::uint64_t seed) {
  Rng rng(seed);
  return masked_sample(logits, s, temperature, rng);
}

/// Highest-logit admissible token; lowest id wins ties.
template <typename Scalar>
int masked_argmax(std::span<const Scalar> logits, const DecoderState& s) {
  const VocabSpec vocab = s.vocab;
  const ValidSet v = valid_set(s);
  int best = -1;
  for (int t = v.coords_empty() ? vocab.quant_level : v.lb; t < vocab.quant_level; ++t)
    if (best < 0 || logits[t] > logits[best]) best = t;
  if (v.end_allowed && (best < 0 || logits[vocab.end()] > logits[best])) best = vocab.end();
  if (best < 0) throw NumericError("masked_argmax: empty admissible set");
  return best;
}

/// Runs a full framed sequence through the automaton. Returns the final state;
/// throws FramingError / OrderViolation at the first problem.
inline DecoderState validate_sequence(const TokenSequence& seq) {
  const auto [begin, end] = coordinate_span(seq);
  if (end == begin) throw FramingError("sequence has no faces");
  DecoderState s = new_state(seq.vocab());
  for (std::size_t i = begin; i < end + kGroup; ++i) s = advance(std::move(s), seq.tokens[i]);
  return s;
}

struct InvalidFractionStats {
  std::int32_t quant_level = 0;
  double mean = 0.0;                    // over all coordinate predictions
  std::array<double, kGroup> by_slot{};  // mean per position within face
  std::size_t predictions = 0;
};

/// Mean share of the (Q+3)-way output distribution pruned by the automaton at
/// each coordinate prediction: lb coordinates below the bound, S and P always,
/// and E wherever it is not admissible.
inline InvalidFractionStats invalid_fraction(std::span<const TokenSequence> sequences, std::int32_t q) {
  const VocabSpec vocab(q);
  InvalidFractionStats stats;
  stats.quant_level = q;
  std::array<double, kGroup> sums{};
  std::array<std::size_t, kGroup> counts{};
  double total = 0.0;
  for (const auto& seq : sequences) {
    if (seq.quant_level != q) throw InvalidArgument("invalid_fraction: sequence quantization level mismatch");
    const auto [begin, end] = coordinate_span(seq);
    DecoderState s = new_state(vocab);
    for (std::size_t i = begin; i < end; ++i) {
      const ValidSet v = valid_set(s);
      const double pruned = std::min(v.lb, q) + (v.end_allowed ? 0 : 1) + 2;
      const double frac = pruned / vocab.size();
      sums[s.pos_in_face] += frac;
      ++counts[s.pos_in_face];
      total += frac;
      s = advance(std::move(s), seq.tokens[i]);
    }
    for (int k = 0; k < kGroup; ++k) s = advance(std::move(s), vocab.end());
  }
  for (int k = 0; k < kGroup; ++k) {
    stats.by_slot[k] = counts[k] ? sums[k] / static_cast<double>(counts[k]) : 0.0;
    stats.predictions += counts[k];
  }
  stats.mean = stats.predictions ? total / static_cast<double>(stats.predictions) : 0.0;
  return stats;
}

}  // namespace meshtron
