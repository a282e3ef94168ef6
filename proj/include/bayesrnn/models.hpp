// Copyright 2026 The bayesrnn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Task heads over an RnnStack: a next-token language model and an
// end-of-sequence sentence classifier. Losses are negative log-likelihoods in
// nats; gradients are exact with respect to the summed loss.

#pragma once

#include <bayesrnn/cells.hpp>
#include <bayesrnn/numerics.hpp>
#include <bayesrnn/params.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace bayesrnn {

using TokenId = std::uint32_t;

enum class DropoutMode { off, naive, dropconnect };

inline std::string_view to_string(DropoutMode m) {
  switch (m) {
    case DropoutMode::off: return "off";
    case DropoutMode::naive: return "naive";
    case DropoutMode::dropconnect: return "dropconnect";
  }
  return "?";
}

inline DropoutMode parse_dropout_mode(std::string_view s) {
  if (s == "off") return DropoutMode::off;
  if (s == "naive") return DropoutMode::naive;
  if (s == "dropconnect") return DropoutMode::dropconnect;
  throw std::invalid_argument("unknown dropout mode '" + std::string(s) + "'");
}

/// Naive dropout masks the two non-recurrent connections: the embedding
/// output feeding the first layer and the top hidden output feeding the
/// decoder. Kept units are scaled by 1/keep_prob so evaluation uses the
/// weights unchanged. DropConnect perturbs weights instead and is applied by
/// the caller (see apply_weight_noise); the loss functions ignore it.
struct DropoutSpec {
  DropoutMode mode = DropoutMode::off;
  double keep_prob = 0.5;
  bool gaussian = false;  // dropconnect noise form

  bool masks_activations() const { return mode == DropoutMode::naive && keep_prob < 1.0; }
};

/// Masks drawn by one loss call, [t] -> dim x B with entries in {0, 1/keep}.
struct DropoutMasks {
  std::vector<Tensor2D> input;
  std::vector<Tensor2D> output;
};

namespace detail {

inline Tensor2D dropout_mask(SeededRng& rng, std::size_t rows, std::size_t cols, double keep) {
  Tensor2D m = bernoulli_mask(rng, rows, cols, keep);
  for (double& v : m.values()) v /= keep;
  return m;
}

inline void check_token(TokenId id, std::size_t vocab) {
  if (id >= vocab) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
  }
}

/// embed x B tensor whose column b is the embedding row of ids[b].
inline Tensor2D embed_columns(const Tensor2D& table, std::span<const TokenId> ids) {
  Tensor2D x(table.cols(), ids.size());
  for (std::size_t b = 0; b < ids.size(); ++b) {
    check_token(ids[b], table.rows());
    const auto row = table.row(ids[b]);
    for (std::size_t e = 0; e < row.size(); ++e) x(e, b) = row[e];
  }
  return x;
}

inline void scatter_embedding_grad(Tensor2D& d_table, const Tensor2D& dx,
                                   std::span<const TokenId> ids) {
  for (std::size_t b = 0; b < ids.size(); ++b) {
    auto row = d_table.row(ids[b]);
    for (std::size_t e = 0; e < row.size(); ++e) row[e] += dx(e, b);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Language model.

struct LanguageModel {
  Tensor2D embedding;     // vocab x embed
  RnnStack stack;
  Tensor2D decoder;       // vocab x stack.output_size()
  Tensor2D decoder_bias;  // vocab x 1

  static LanguageModel make(CellType cell, std::size_t vocab, std::size_t embed,
                            std::size_t hidden, std::size_t layers, bool bidirectional = false) {
    if (vocab == 0 || embed == 0) throw std::invalid_argument("LanguageModel: empty vocab/embed");
    LanguageModel m;
    m.embedding = Tensor2D(vocab, embed);
    m.stack = RnnStack::make(cell, embed, hidden, layers, bidirectional);
    m.decoder = Tensor2D(vocab, m.stack.output_size());
    m.decoder_bias = Tensor2D(vocab, 1);
    return m;
  }

  std::size_t vocab_size() const { return embedding.rows(); }
};

template <class M>
  requires std::is_same_v<std::remove_const_t<M>, LanguageModel>
void visit_params(M& m, auto&& f) {
  f(std::string("embedding"), m.embedding);
  visit_params(m.stack, f);
  f(std::string("decoder.V"), m.decoder);
  f(std::string("decoder.b"), m.decoder_bias);
}

/// Uniform(-scale, scale) weights and embeddings, zero biases. A zero decoder
/// makes the initial predictive distribution exactly uniform.
inline void initialize(LanguageModel& m, SeededRng& rng, double scale = 0.1,
                       bool zero_decoder = false) {
  for (double& v : m.embedding.values()) v = -scale + 2.0 * scale * rng.uniform();
  initialize_uniform(m.stack, rng, scale);
  if (zero_decoder) {
    m.decoder.fill(0.0);
  } else {
    for (double& v : m.decoder.values()) v = -scale + 2.0 * scale * rng.uniform();
  }
  m.decoder_bias.fill(0.0);
}

/// Token ids laid out step-major: ids[t * batch + b].
struct TokenGrid {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::vector<TokenId> ids;

  TokenId at(std::size_t t, std::size_t b) const { return ids[t * batch + b]; }
  std::span<const TokenId> step(std::size_t t) const { return {ids.data() + t * batch, batch}; }
};

struct LmOptions {
  bool compute_grads = true;
  bool keep_probs = false;  // retain full vocab x B distributions per step
};

struct LmBatchResult {
  double nll_sum = 0.0;
  std::size_t token_count = 0;
  FlatParams grads;          // empty when compute_grads is false
  StepState final_state;
  Tensor2D target_probs;     // steps x batch, p(target)
  std::vector<Tensor2D> probs;
  DropoutMasks masks;
};

/// Summed next-token NLL of `targets` given `inputs` (same grid shape) and
/// its exact gradient. The RNG is only consumed when naive dropout is on.
inline LmBatchResult lm_loss_and_grad(const LanguageModel& model, const TokenGrid& inputs,
                                      const TokenGrid& targets, const StepState& init,
                                      const DropoutSpec& dropout = {}, SeededRng* rng = nullptr,
                                      const LmOptions& options = {}) {
  if (inputs.steps == 0 || inputs.batch == 0) {
    throw std::invalid_argument("lm_loss_and_grad: empty sequence");
  }
  if (targets.steps != inputs.steps || targets.batch != inputs.batch) {
    throw ShapeError("lm_loss_and_grad: input/target grids differ");
  }
  const bool use_dropout = dropout.masks_activations();
  if (use_dropout && rng == nullptr) throw std::invalid_argument("dropout requires an RNG");
  const std::size_t T = inputs.steps;
  const std::size_t B = inputs.batch;
  const std::size_t V = model.vocab_size();
  const std::size_t E = model.embedding.cols();
  const std::size_t O = model.stack.output_size();

  LmBatchResult res;
  std::vector<Tensor2D> xs(T);
  for (std::size_t t = 0; t < T; ++t) {
    xs[t] = detail::embed_columns(model.embedding, inputs.step(t));
    if (use_dropout) {
      res.masks.input.push_back(detail::dropout_mask(*rng, E, B, dropout.keep_prob));
      xs[t] = hadamard(xs[t], res.masks.input.back());
    }
  }
  auto fwd = forward_sequence(model.stack, xs, init);

  LanguageModel grads;
  if (options.compute_grads) {
    grads.embedding = Tensor2D(V, E);
    grads.stack = zeros_like(model.stack);
    grads.decoder = Tensor2D(V, O);
    grads.decoder_bias = Tensor2D(V, 1);
  }
  std::vector<Tensor2D> d_top;
  if (options.compute_grads) d_top.reserve(T);
  res.target_probs = Tensor2D(T, B);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor2D h = fwd.top()[t];
    if (use_dropout) {
      res.masks.output.push_back(detail::dropout_mask(*rng, O, B, dropout.keep_prob));
      h = hadamard(h, res.masks.output.back());
    }
    Tensor2D logits = matmul(model.decoder, h);
    add_column_broadcast(logits, model.decoder_bias);
    Tensor2D p = softmax_cols(logits);
    for (std::size_t b = 0; b < B; ++b) {
      const TokenId y = targets.at(t, b);
      detail::check_token(y, V);
      const double py = p(y, b);
      res.target_probs(t, b) = py;
      res.nll_sum -= std::log(py);
    }
    if (options.compute_grads) {
      Tensor2D dlogits = p;
      for (std::size_t b = 0; b < B; ++b) dlogits(targets.at(t, b), b) -= 1.0;
      matmul_nt_add(grads.decoder, dlogits, h);
      add_row_sums(grads.decoder_bias, dlogits);
      Tensor2D dh = matmul_tn(model.decoder, dlogits);
      if (use_dropout) dh = hadamard(dh, res.masks.output[t]);
      d_top.push_back(std::move(dh));
    }
    if (options.keep_probs) res.probs.push_back(std::move(p));
  }
  res.token_count = T * B;
  res.final_state = fwd.final_state;

  if (options.compute_grads) {
    auto back = backward_sequence(model.stack, fwd.cache, d_top);
    grads.stack = std::move(back.params);
    for (std::size_t t = 0; t < T; ++t) {
      Tensor2D dx = std::move(back.inputs[t]);
      if (use_dropout) dx = hadamard(dx, res.masks.input[t]);
      detail::scatter_embedding_grad(grads.embedding, dx, inputs.step(t));
    }
    res.grads = flatten(grads);
  }
  return res;
}

struct LmSequenceResult {
  double nll_sum = 0.0;
  std::size_t token_count = 0;
  FlatParams grads;
  StepState final_state;
  Tensor2D per_token_probs;  // predictions x vocab
};

/// Single-sequence form: predicts sequence[t+1] from sequence[..t], so a
/// sequence of n tokens yields n - 1 predictions.
inline LmSequenceResult lm_loss_and_grad(const LanguageModel& model,
                                         std::span<const TokenId> sequence, const StepState& init,
                                         const DropoutSpec& dropout = {},
                                         SeededRng* rng = nullptr, bool compute_grads = true) {
  if (sequence.size() < 2) {
    throw std::invalid_argument("lm_loss_and_grad: need at least two tokens");
  }
  const std::size_t T = sequence.size() - 1;
  TokenGrid in{T, 1, std::vector<TokenId>(sequence.begin(), sequence.end() - 1)};
  TokenGrid out{T, 1, std::vector<TokenId>(sequence.begin() + 1, sequence.end())};
  auto r = lm_loss_and_grad(model, in, out, init, dropout, rng, {compute_grads, true});
  LmSequenceResult res;
  res.nll_sum = r.nll_sum;
  res.token_count = r.token_count;
  res.grads = std::move(r.grads);
  res.final_state = std::move(r.final_state);
  res.per_token_probs = Tensor2D(T, model.vocab_size());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t v = 0; v < model.vocab_size(); ++v) res.per_token_probs(t, v) = r.probs[t][v];
  }
  return res;
}

/// Next-token distribution after consuming `prefix` from `state`; `state` is
/// advanced in place. Returns a vocab x 1 column.
inline Tensor2D lm_next_distribution(const LanguageModel& model, std::span<const TokenId> prefix,
                                     StepState& state) {
  if (prefix.empty()) throw std::invalid_argument("lm_next_distribution: empty prefix");
  std::vector<Tensor2D> xs;
  for (TokenId id : prefix) xs.push_back(detail::embed_columns(model.embedding, {&id, 1}));
  auto fwd = forward_sequence(model.stack, xs, state);
  state = fwd.final_state;
  Tensor2D logits = matmul(model.decoder, fwd.top().back());
  add_column_broadcast(logits, model.decoder_bias);
  return softmax_cols(logits);
}

/// Ancestral sampling from softmax(logits / temperature). A temperature of
/// zero is the argmax limit. Returns only the newly generated tokens.
inline std::vector<TokenId> generate(const LanguageModel& model, std::span<const TokenId> prefix,
                                     std::size_t max_len, double temperature, SeededRng& rng) {
  if (!(temperature >= 0.0)) throw std::invalid_argument("generate: temperature must be >= 0");
  if (prefix.empty()) throw std::invalid_argument("generate: empty prefix");
  for (TokenId id : prefix) detail::check_token(id, model.vocab_size());
  StepState state = StepState::zeros(model.stack, 1);
  std::vector<TokenId> out;
  std::vector<TokenId> feed(prefix.begin(), prefix.end());
  for (std::size_t n = 0; n < max_len; ++n) {
    Tensor2D p = lm_next_distribution(model, feed, state);
    TokenId next = 0;
    if (temperature == 0.0) {
      for (std::size_t v = 1; v < p.rows(); ++v)
        if (p[v] > p[next]) next = static_cast<TokenId>(v);
    } else {
      // Tempered distribution from the log-probabilities.
      std::vector<double> w(p.rows());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < p.rows(); ++v) {
        w[v] = std::log(p[v]) / temperature;
        mx = std::max(mx, w[v]);
      }
      double sum = 0.0;
      for (double& x : w) sum += (x = std::exp(x - mx));
      double u = rng.uniform() * sum;
      next = static_cast<TokenId>(p.rows() - 1);
      for (std::size_t v = 0; v < w.size(); ++v) {
        if (u < w[v]) {
          next = static_cast<TokenId>(v);
          break;
        }
        u -= w[v];
      }
    }
    out.push_back(next);
    feed.assign(1, next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sentence classifier.

struct SentenceClassifier {
  Tensor2D embedding;     // vocab x embed
  RnnStack stack;
  Tensor2D decoder;       // classes x stack.output_size()
  Tensor2D decoder_bias;  // classes x 1

  static SentenceClassifier make(CellType cell, std::size_t vocab, std::size_t embed,
                                 std::size_t hidden, std::size_t layers, std::size_t classes,
                                 bool bidirectional = true) {
    if (vocab == 0 || embed == 0 || classes == 0) {
      throw std::invalid_argument("SentenceClassifier: empty vocab/embed/classes");
    }
    SentenceClassifier m;
    m.embedding = Tensor2D(vocab, embed);
    m.stack = RnnStack::make(cell, embed, hidden, layers, bidirectional);
    m.decoder = Tensor2D(classes, m.stack.output_size());
    m.decoder_bias = Tensor2D(classes, 1);
    return m;
  }

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t num_classes() const { return decoder.rows(); }
};

template <class M>
  requires std::is_same_v<std::remove_const_t<M>, SentenceClassifier>
void visit_params(M& m, auto&& f) {
  f(std::string("embedding"), m.embedding);
  visit_params(m.stack, f);
  f(std::string("decoder.V"), m.decoder);
  f(std::string("decoder.b"), m.decoder_bias);
}

inline void initialize(SentenceClassifier& m, SeededRng& rng, double scale = 0.1,
                       bool zero_decoder = false) {
  for (double& v : m.embedding.values()) v = -scale + 2.0 * scale * rng.uniform();
  initialize_uniform(m.stack, rng, scale);
  if (zero_decoder) {
    m.decoder.fill(0.0);
  } else {
    for (double& v : m.decoder.values()) v = -scale + 2.0 * scale * rng.uniform();
  }
  m.decoder_bias.fill(0.0);
}

struct ClassifierResult {
  double nll = 0.0;
  FlatParams grads;  // empty when gradients were not requested
  std::vector<double> class_probs;
};

/// Decodes once from the sentence summary: the final forward state, joined
/// with the final state of the reverse pass (time 0) when bidirectional.
inline ClassifierResult classifier_loss_and_grad(const SentenceClassifier& model,
                                                 std::span<const TokenId> tokens,
                                                 std::size_t label,
                                                 const DropoutSpec& dropout = {},
                                                 SeededRng* rng = nullptr,
                                                 bool compute_grads = true) {
  if (tokens.empty()) throw std::invalid_argument("classifier_loss_and_grad: empty sentence");
  if (label >= model.num_classes()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside " +
                            std::to_string(model.num_classes()) + " classes");
  }
  const bool use_dropout = dropout.masks_activations();
  if (use_dropout && rng == nullptr) throw std::invalid_argument("dropout requires an RNG");
  const std::size_t T = tokens.size();
  const std::size_t E = model.embedding.cols();
  const std::size_t H = model.stack.hidden_size;
  const std::size_t O = model.stack.output_size();
  const bool bi = model.stack.bidirectional;

  DropoutMasks masks;
  std::vector<Tensor2D> xs(T);
  for (std::size_t t = 0; t < T; ++t) {
    xs[t] = detail::embed_columns(model.embedding, tokens.subspan(t, 1));
    if (use_dropout) {
      masks.input.push_back(detail::dropout_mask(*rng, E, 1, dropout.keep_prob));
      xs[t] = hadamard(xs[t], masks.input.back());
    }
  }
  auto fwd = forward_sequence(model.stack, xs, StepState::zeros(model.stack, 1));
  const auto& top = fwd.top();
  Tensor2D summary(O, 1);
  for (std::size_t k = 0; k < H; ++k) summary[k] = top[T - 1][k];
  if (bi) {
    for (std::size_t k = 0; k < H; ++k) summary[H + k] = top[0][H + k];
  }
  if (use_dropout) {
    masks.output.push_back(detail::dropout_mask(*rng, O, 1, dropout.keep_prob));
    summary = hadamard(summary, masks.output.back());
  }
  Tensor2D logits = matmul(model.decoder, summary);
  add_column_broadcast(logits, model.decoder_bias);
  Tensor2D p = softmax_cols(logits);

  ClassifierResult res;
  res.class_probs.assign(p.values().begin(), p.values().end());
  res.nll = -std::log(p[label]);
  if (!compute_grads) return res;

  SentenceClassifier grads;
  grads.embedding = Tensor2D(model.vocab_size(), E);
  grads.decoder = Tensor2D(model.num_classes(), O);
  grads.decoder_bias = Tensor2D(model.num_classes(), 1);
  Tensor2D dlogits = p;
  dlogits[label] -= 1.0;
  matmul_nt_add(grads.decoder, dlogits, summary);
  add_row_sums(grads.decoder_bias, dlogits);
  Tensor2D d_summary = matmul_tn(model.decoder, dlogits);
  if (use_dropout) d_summary = hadamard(d_summary, masks.output[0]);

  std::vector<Tensor2D> d_top(T, Tensor2D(O, 1));
  for (std::size_t k = 0; k < H; ++k) d_top[T - 1][k] += d_summary[k];
  if (bi) {
    for (std::size_t k = 0; k < H; ++k) d_top[0][H + k] += d_summary[H + k];
  }
  auto back = backward_sequence(model.stack, fwd.cache, d_top);
  grads.stack = std::move(back.params);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor2D dx = std::move(back.inputs[t]);
    if (use_dropout) dx = hadamard(dx, masks.input[t]);
    detail::scatter_embedding_grad(grads.embedding, dx, tokens.subspan(t, 1));
  }
  res.grads = flatten(grads);
  return res;
}

inline std::vector<double> classifier_probs(const SentenceClassifier& model,
                                            std::span<const TokenId> tokens) {
  return classifier_loss_and_grad(model, tokens, 0, {}, nullptr, false).class_probs;
}

// ---------------------------------------------------------------------------
// Metrics.

inline double perplexity(double total_nll, std::size_t token_count) {
  if (token_count == 0) throw std::invalid_argument("perplexity: no tokens");
  return std::exp(total_nll / static_cast<double>(token_count));
}

/// Mean loss per character in nats.
inline double cross_entropy_per_char(double total_nll, std::size_t char_count) {
  if (char_count == 0) throw std::invalid_argument("cross_entropy_per_char: no characters");
  return total_nll / static_cast<double>(char_count);
}

inline double bits_per_char(double total_nll, std::size_t char_count) {
  return cross_entropy_per_char(total_nll, char_count) / std::numbers::ln2;
}

}  // namespace bayesrnn
