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

// Vanilla, LSTM and GRU cells with exact backpropagation through time,
// stacked into multilayer and bidirectional networks.
//
// All per-step vectors are hidden x B tensors whose columns are independent
// sequences of a minibatch; B = 1 gives the single-sequence case.

#pragma once

#include <bayesrnn/numerics.hpp>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

namespace bayesrnn {

enum class CellType { vanilla, lstm, gru };

inline std::string_view to_string(CellType t) {
  switch (t) {
    case CellType::vanilla: return "vanilla";
    case CellType::lstm: return "lstm";
    case CellType::gru: return "gru";
  }
  return "?";
}

inline CellType parse_cell_type(std::string_view s) {
  if (s == "vanilla" || s == "rnn") return CellType::vanilla;
  if (s == "lstm") return CellType::lstm;
  if (s == "gru") return CellType::gru;
  throw std::invalid_argument("unknown cell type '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Parameter blocks. W* are encoding weights (hidden x input), U* recurrent
// weights (hidden x hidden), b* biases (hidden x 1).

struct VanillaParams {
  Tensor2D W, U, b;

  static VanillaParams zeros(std::size_t input, std::size_t hidden) {
    return {Tensor2D(hidden, input), Tensor2D(hidden, hidden), Tensor2D(hidden, 1)};
  }
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    f("W", p.W);
    f("U", p.U);
    f("b", p.b);
  }
};

struct LstmParams {
  Tensor2D W_i, W_f, W_o, W_c;
  Tensor2D U_i, U_f, U_o, U_c;
  Tensor2D b_i, b_f, b_o, b_c;

  static LstmParams zeros(std::size_t input, std::size_t hidden) {
    const Tensor2D w(hidden, input), u(hidden, hidden), b(hidden, 1);
    return {w, w, w, w, u, u, u, u, b, b, b, b};
  }
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    f("W_i", p.W_i);
    f("W_f", p.W_f);
    f("W_o", p.W_o);
    f("W_c", p.W_c);
    f("U_i", p.U_i);
    f("U_f", p.U_f);
    f("U_o", p.U_o);
    f("U_c", p.U_c);
    f("b_i", p.b_i);
    f("b_f", p.b_f);
    f("b_o", p.b_o);
    f("b_c", p.b_c);
  }
};

/// Gated recurrent unit in its original formulation:
///   z = sigmoid(W_z x + U_z h + b_z)        update gate
///   r = sigmoid(W_r x + U_r h + b_r)        reset gate
///   h~ = tanh(W_h x + U_h (r . h) + b_h)
///   h' = z . h + (1 - z) . h~
/// so a saturated update gate (z -> 1) copies the previous state.
struct GruParams {
  Tensor2D W_z, W_r, W_h;
  Tensor2D U_z, U_r, U_h;
  Tensor2D b_z, b_r, b_h;

  static GruParams zeros(std::size_t input, std::size_t hidden) {
    const Tensor2D w(hidden, input), u(hidden, hidden), b(hidden, 1);
    return {w, w, w, u, u, u, b, b, b};
  }
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    f("W_z", p.W_z);
    f("W_r", p.W_r);
    f("W_h", p.W_h);
    f("U_z", p.U_z);
    f("U_r", p.U_r);
    f("U_h", p.U_h);
    f("b_z", p.b_z);
    f("b_r", p.b_r);
    f("b_h", p.b_h);
  }
};

using CellParams = std::variant<VanillaParams, LstmParams, GruParams>;

template <class F>
void visit_tensors(CellParams& p, F&& f) {
  std::visit([&](auto& cell) { std::decay_t<decltype(cell)>::visit(cell, f); }, p);
}
template <class F>
void visit_tensors(const CellParams& p, F&& f) {
  std::visit([&](const auto& cell) { std::decay_t<decltype(cell)>::visit(cell, f); }, p);
}

inline CellParams make_cell(CellType type, std::size_t input, std::size_t hidden) {
  switch (type) {
    case CellType::vanilla: return VanillaParams::zeros(input, hidden);
    case CellType::lstm: return LstmParams::zeros(input, hidden);
    case CellType::gru: return GruParams::zeros(input, hidden);
  }
  throw std::invalid_argument("make_cell: bad cell type");
}

namespace detail {

inline void require_rows(const Tensor2D& t, std::size_t rows, const char* what) {
  if (t.rows() != rows) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " +
                     t.shape_string());
  }
}

/// W x + U h + b for a batch of columns.
inline Tensor2D affine(const Tensor2D& W, const Tensor2D& x, const Tensor2D& U, const Tensor2D& h,
                       const Tensor2D& b) {
  Tensor2D a = matmul(W, x);
  matmul_add(a, U, h);
  add_column_broadcast(a, b);
  return a;
}

/// Accumulates the parameter and input gradients of one affine block given
/// the gradient `da` of its pre-activation.
inline void affine_backward(const Tensor2D& W, const Tensor2D& U, const Tensor2D& x,
                            const Tensor2D& h, const Tensor2D& da, Tensor2D& dW, Tensor2D& dU,
                            Tensor2D& db, Tensor2D& dx, Tensor2D& dh) {
  matmul_nt_add(dW, da, x);
  matmul_nt_add(dU, da, h);
  add_row_sums(db, da);
  matmul_tn_add(dx, W, da);
  matmul_tn_add(dh, U, da);
}

inline void check_step_shapes(const Tensor2D& W, const Tensor2D& U, const Tensor2D& x,
                              const Tensor2D& h_prev) {
  if (x.rows() != W.cols() || h_prev.rows() != U.cols() || x.cols() != h_prev.cols()) {
    throw ShapeError("cell step: x " + x.shape_string() + ", h_prev " + h_prev.shape_string() +
                     " incompatible with W " + W.shape_string() + ", U " + U.shape_string());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single steps.

struct VanillaCache {
  Tensor2D x, h_prev, h;
};
struct VanillaStep {
  Tensor2D h;
  VanillaCache cache;
};

/// h = tanh(W x + U h_prev + b)
inline VanillaStep vanilla_step(const VanillaParams& p, const Tensor2D& x, const Tensor2D& h_prev) {
  detail::check_step_shapes(p.W, p.U, x, h_prev);
  Tensor2D h = tanh(detail::affine(p.W, x, p.U, h_prev, p.b));
  return {h, {x, h_prev, h}};
}

struct StepInputGrads {
  Tensor2D dx, dh_prev, dc_prev;
};

inline StepInputGrads vanilla_step_backward(const VanillaParams& p, const VanillaCache& cache,
                                            const Tensor2D& dh, VanillaParams& grads) {
  Tensor2D da(dh.rows(), dh.cols());
  for (std::size_t k = 0; k < da.size(); ++k) da[k] = dh[k] * (1.0 - cache.h[k] * cache.h[k]);
  StepInputGrads out{Tensor2D(cache.x.rows(), cache.x.cols()),
                     Tensor2D(cache.h_prev.rows(), cache.h_prev.cols()), {}};
  detail::affine_backward(p.W, p.U, cache.x, cache.h_prev, da, grads.W, grads.U, grads.b, out.dx,
                          out.dh_prev);
  return out;
}

struct LstmCache {
  Tensor2D x, h_prev, c_prev;
  Tensor2D i, f, o, g;  // gate activations; g is the candidate c~
  Tensor2D c, tanh_c;
};
struct LstmStep {
  Tensor2D h, c;
  LstmCache cache;
};

inline LstmStep lstm_step(const LstmParams& p, const Tensor2D& x, const Tensor2D& h_prev,
                          const Tensor2D& c_prev) {
  detail::check_step_shapes(p.W_i, p.U_i, x, h_prev);
  detail::require_same_shape(h_prev, c_prev, "lstm_step c_prev");
  LstmCache cache;
  cache.i = sigmoid(detail::affine(p.W_i, x, p.U_i, h_prev, p.b_i));
  cache.f = sigmoid(detail::affine(p.W_f, x, p.U_f, h_prev, p.b_f));
  cache.o = sigmoid(detail::affine(p.W_o, x, p.U_o, h_prev, p.b_o));
  cache.g = tanh(detail::affine(p.W_c, x, p.U_c, h_prev, p.b_c));
  Tensor2D c(h_prev.rows(), h_prev.cols());
  for (std::size_t k = 0; k < c.size(); ++k) {
    c[k] = cache.f[k] * c_prev[k] + cache.i[k] * cache.g[k];
  }
  cache.tanh_c = tanh(c);
  Tensor2D h = hadamard(cache.o, cache.tanh_c);
  cache.x = x;
  cache.h_prev = h_prev;
  cache.c_prev = c_prev;
  cache.c = c;
  return {std::move(h), std::move(c), std::move(cache)};
}

inline StepInputGrads lstm_step_backward(const LstmParams& p, const LstmCache& cache,
                                         const Tensor2D& dh, const Tensor2D& dc_next,
                                         LstmParams& grads) {
  const std::size_t n = dh.size();
  Tensor2D da_i(dh.rows(), dh.cols()), da_f(dh.rows(), dh.cols());
  Tensor2D da_o(dh.rows(), dh.cols()), da_g(dh.rows(), dh.cols());
  StepInputGrads out{Tensor2D(cache.x.rows(), cache.x.cols()),
                     Tensor2D(dh.rows(), dh.cols()), Tensor2D(dh.rows(), dh.cols())};
  for (std::size_t k = 0; k < n; ++k) {
    const double tc = cache.tanh_c[k];
    const double i = cache.i[k], f = cache.f[k], o = cache.o[k], g = cache.g[k];
    const double d_o = dh[k] * tc;
    const double dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
    da_i[k] = dc * g * i * (1.0 - i);
    da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
    da_o[k] = d_o * o * (1.0 - o);
    da_g[k] = dc * i * (1.0 - g * g);
    out.dc_prev[k] = dc * f;
  }
  const Tensor2D& x = cache.x;
  const Tensor2D& h = cache.h_prev;
  detail::affine_backward(p.W_i, p.U_i, x, h, da_i, grads.W_i, grads.U_i, grads.b_i, out.dx,
                          out.dh_prev);
  detail::affine_backward(p.W_f, p.U_f, x, h, da_f, grads.W_f, grads.U_f, grads.b_f, out.dx,
                          out.dh_prev);
  detail::affine_backward(p.W_o, p.U_o, x, h, da_o, grads.W_o, grads.U_o, grads.b_o, out.dx,
                          out.dh_prev);
  detail::affine_backward(p.W_c, p.U_c, x, h, da_g, grads.W_c, grads.U_c, grads.b_c, out.dx,
                          out.dh_prev);
  return out;
}

struct GruCache {
  Tensor2D x, h_prev;
  Tensor2D z, r, rh, h_cand;
};
struct GruStep {
  Tensor2D h;
  GruCache cache;
};

inline GruStep gru_step(const GruParams& p, const Tensor2D& x, const Tensor2D& h_prev) {
  detail::check_step_shapes(p.W_z, p.U_z, x, h_prev);
  GruCache cache;
  cache.z = sigmoid(detail::affine(p.W_z, x, p.U_z, h_prev, p.b_z));
  cache.r = sigmoid(detail::affine(p.W_r, x, p.U_r, h_prev, p.b_r));
  cache.rh = hadamard(cache.r, h_prev);
  cache.h_cand = tanh(detail::affine(p.W_h, x, p.U_h, cache.rh, p.b_h));
  Tensor2D h(h_prev.rows(), h_prev.cols());
  for (std::size_t k = 0; k < h.size(); ++k) {
    h[k] = cache.z[k] * h_prev[k] + (1.0 - cache.z[k]) * cache.h_cand[k];
  }
  cache.x = x;
  cache.h_prev = h_prev;
  return {std::move(h), std::move(cache)};
}

inline StepInputGrads gru_step_backward(const GruParams& p, const GruCache& cache,
                                        const Tensor2D& dh, GruParams& grads) {
  const std::size_t n = dh.size();
  Tensor2D da_h(dh.rows(), dh.cols()), da_z(dh.rows(), dh.cols());
  StepInputGrads out{Tensor2D(cache.x.rows(), cache.x.cols()),
                     Tensor2D(dh.rows(), dh.cols()), {}};
  for (std::size_t k = 0; k < n; ++k) {
    const double z = cache.z[k], hc = cache.h_cand[k];
    da_z[k] = dh[k] * (cache.h_prev[k] - hc) * z * (1.0 - z);
    da_h[k] = dh[k] * (1.0 - z) * (1.0 - hc * hc);
    out.dh_prev[k] = dh[k] * z;
  }
  // Candidate block: its recurrent input is r . h_prev.
  Tensor2D d_rh(dh.rows(), dh.cols());
  detail::affine_backward(p.W_h, p.U_h, cache.x, cache.rh, da_h, grads.W_h, grads.U_h, grads.b_h,
                          out.dx, d_rh);
  Tensor2D da_r(dh.rows(), dh.cols());
  for (std::size_t k = 0; k < n; ++k) {
    const double r = cache.r[k];
    da_r[k] = d_rh[k] * cache.h_prev[k] * r * (1.0 - r);
    out.dh_prev[k] += d_rh[k] * r;
  }
  detail::affine_backward(p.W_z, p.U_z, cache.x, cache.h_prev, da_z, grads.W_z, grads.U_z,
                          grads.b_z, out.dx, out.dh_prev);
  detail::affine_backward(p.W_r, p.U_r, cache.x, cache.h_prev, da_r, grads.W_r, grads.U_r,
                          grads.b_r, out.dx, out.dh_prev);
  return out;
}

// ---------------------------------------------------------------------------
// Stacks.

/// Layered recurrent network. Layer l+1 consumes the output of layer l at the
/// same time step; a bidirectional layer outputs [forward h ; backward h].
struct RnnStack {
  CellType cell_type = CellType::lstm;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  bool bidirectional = false;
  std::vector<CellParams> forward;   // one per layer
  std::vector<CellParams> backward;  // one per layer when bidirectional

  static RnnStack make(CellType type, std::size_t input, std::size_t hidden, std::size_t layers,
                       bool bidirectional) {
    if (layers == 0) throw std::invalid_argument("RnnStack needs at least one layer");
    if (input == 0 || hidden == 0) throw std::invalid_argument("RnnStack sizes must be positive");
    RnnStack s;
    s.cell_type = type;
    s.input_size = input;
    s.hidden_size = hidden;
    s.bidirectional = bidirectional;
    for (std::size_t l = 0; l < layers; ++l) {
      s.forward.push_back(make_cell(type, s.layer_input_size(l), hidden));
      if (bidirectional) s.backward.push_back(make_cell(type, s.layer_input_size(l), hidden));
    }
    return s;
  }

  std::size_t num_layers() const { return forward.size(); }
  std::size_t directions() const { return bidirectional ? 2 : 1; }
  std::size_t output_size() const { return hidden_size * directions(); }
  std::size_t layer_input_size(std::size_t layer) const {
    return layer == 0 ? input_size : output_size();
  }
  bool has_cell_state() const { return cell_type == CellType::lstm; }

  const CellParams& cell(std::size_t layer, std::size_t dir) const {
    return dir == 0 ? forward[layer] : backward[layer];
  }
  CellParams& cell(std::size_t layer, std::size_t dir) {
    return dir == 0 ? forward[layer] : backward[layer];
  }
};

/// Visits every tensor of the stack with a stable dotted name.
template <class Stack, class F>
  requires std::is_same_v<std::remove_const_t<Stack>, RnnStack>
void visit_params(Stack& stack, F&& f) {
  for (std::size_t l = 0; l < stack.num_layers(); ++l) {
    for (std::size_t d = 0; d < stack.directions(); ++d) {
      const std::string prefix =
          "rnn.layer" + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
      visit_tensors(stack.cell(l, d), [&](const char* name, auto& t) { f(prefix + name, t); });
    }
  }
}

inline bool is_bias_name(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return !leaf.empty() && leaf[0] == 'b';
}

/// Weights uniform in [-scale, scale], biases zero.
inline void initialize_uniform(RnnStack& stack, SeededRng& rng, double scale = 0.1) {
  visit_params(stack, [&](const std::string& name, Tensor2D& t) {
    if (is_bias_name(name)) {
      t.fill(0.0);
    } else {
      for (double& v : t.values()) v = -scale + 2.0 * scale * rng.uniform();
    }
  });
}

/// Hidden (and, for LSTM, cell) state of every layer and direction; index
/// layer * directions + direction.
struct StepState {
  std::vector<Tensor2D> h;
  std::vector<Tensor2D> c;  // empty tensors unless LSTM

  static StepState zeros(const RnnStack& stack, std::size_t batch) {
    StepState s;
    const std::size_t n = stack.num_layers() * stack.directions();
    for (std::size_t k = 0; k < n; ++k) {
      s.h.emplace_back(stack.hidden_size, batch);
      s.c.push_back(stack.has_cell_state() ? Tensor2D(stack.hidden_size, batch) : Tensor2D());
    }
    return s;
  }

  bool operator==(const StepState&) const = default;
};

using StepCache = std::variant<VanillaCache, LstmCache, GruCache>;

struct SequenceCache {
  std::size_t steps = 0;
  std::size_t batch = 0;
  /// caches[layer * directions + dir][t], indexed by time step (not by
  /// processing order) for both directions.
  std::vector<std::vector<StepCache>> caches;
};

struct SequenceForward {
  /// outputs[layer][t], each output_size x B.
  std::vector<std::vector<Tensor2D>> outputs;
  StepState final_state;
  SequenceCache cache;

  const std::vector<Tensor2D>& top() const { return outputs.back(); }
};

namespace detail {

inline Tensor2D concat_rows(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch");
  Tensor2D out(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  return out;
}

inline Tensor2D slice_rows(const Tensor2D& a, std::size_t begin, std::size_t count) {
  Tensor2D out(count, a.cols());
  const auto src = a.values().subspan(begin * a.cols(), count * a.cols());
  std::copy(src.begin(), src.end(), out.values().begin());
  return out;
}

struct CellStepResult {
  Tensor2D h, c;
  StepCache cache;
};

inline CellStepResult run_cell(const CellParams& params, const Tensor2D& x, const Tensor2D& h,
                               const Tensor2D& c) {
  return std::visit(
      [&](const auto& p) -> CellStepResult {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VanillaParams>) {
          auto s = vanilla_step(p, x, h);
          return {std::move(s.h), Tensor2D(), std::move(s.cache)};
        } else if constexpr (std::is_same_v<P, LstmParams>) {
          auto s = lstm_step(p, x, h, c);
          return {std::move(s.h), std::move(s.c), std::move(s.cache)};
        } else {
          auto s = gru_step(p, x, h);
          return {std::move(s.h), Tensor2D(), std::move(s.cache)};
        }
      },
      params);
}

inline StepInputGrads backprop_cell(const CellParams& params, const StepCache& cache,
                                    const Tensor2D& dh, const Tensor2D& dc, CellParams& grads) {
  return std::visit(
      [&](const auto& p) -> StepInputGrads {
        using P = std::decay_t<decltype(p)>;
        auto& g = std::get<P>(grads);
        if constexpr (std::is_same_v<P, VanillaParams>) {
          return vanilla_step_backward(p, std::get<VanillaCache>(cache), dh, g);
        } else if constexpr (std::is_same_v<P, LstmParams>) {
          return lstm_step_backward(p, std::get<LstmCache>(cache), dh, dc, g);
        } else {
          return gru_step_backward(p, std::get<GruCache>(cache), dh, g);
        }
      },
      params);
}

}  // namespace detail

/// Unrolls the stack over `inputs` (each input_size x B) from `init`.
inline SequenceForward forward_sequence(const RnnStack& stack, const std::vector<Tensor2D>& inputs,
                                        const StepState& init) {
  if (inputs.empty()) throw std::invalid_argument("forward_sequence: empty sequence");
  const std::size_t T = inputs.size();
  const std::size_t B = inputs.front().cols();
  const std::size_t dirs = stack.directions();
  const std::size_t H = stack.hidden_size;
  for (const auto& x : inputs) {
    detail::require_rows(x, stack.input_size, "forward_sequence input");
    if (x.cols() != B) throw ShapeError("forward_sequence: inconsistent batch width");
  }
  if (init.h.size() != stack.num_layers() * dirs || init.c.size() != init.h.size()) {
    throw ShapeError("forward_sequence: initial state has wrong layer count");
  }
  for (std::size_t k = 0; k < init.h.size(); ++k) {
    if (init.h[k].rows() != H || init.h[k].cols() != B) {
      throw ShapeError("forward_sequence: initial h is " + init.h[k].shape_string());
    }
    if (stack.has_cell_state() && !init.h[k].same_shape(init.c[k])) {
      throw ShapeError("forward_sequence: initial c is " + init.c[k].shape_string());
    }
  }

  SequenceForward out;
  out.final_state = init;
  out.cache.steps = T;
  out.cache.batch = B;
  out.cache.caches.resize(stack.num_layers() * dirs);
  const std::vector<Tensor2D>* layer_in = &inputs;
  for (std::size_t l = 0; l < stack.num_layers(); ++l) {
    std::vector<std::vector<Tensor2D>> dir_out(dirs);
    for (std::size_t d = 0; d < dirs; ++d) {
      const std::size_t slot = l * dirs + d;
      auto& caches = out.cache.caches[slot];
      caches.resize(T);
      dir_out[d].resize(T);
      Tensor2D h = init.h[slot];
      Tensor2D c = init.c[slot];
      for (std::size_t step = 0; step < T; ++step) {
        const std::size_t t = d == 0 ? step : T - 1 - step;
        auto r = detail::run_cell(stack.cell(l, d), (*layer_in)[t], h, c);
        h = r.h;
        c = std::move(r.c);
        dir_out[d][t] = std::move(r.h);
        caches[t] = std::move(r.cache);
      }
      out.final_state.h[slot] = std::move(h);
      out.final_state.c[slot] = std::move(c);
    }
    std::vector<Tensor2D> merged(T);
    for (std::size_t t = 0; t < T; ++t) {
      merged[t] = dirs == 1 ? std::move(dir_out[0][t])
                            : detail::concat_rows(dir_out[0][t], dir_out[1][t]);
    }
    out.outputs.push_back(std::move(merged));
    layer_in = &out.outputs.back();
  }
  return out;
}

struct SequenceGrads {
  RnnStack params;              // same layout as the stack, holding gradients
  std::vector<Tensor2D> inputs;  // d loss / d input_t
  StepState init;                // d loss / d initial state
};

inline RnnStack zeros_like(const RnnStack& stack) {
  RnnStack g = stack;
  visit_params(g, [](const std::string&, Tensor2D& t) { t.fill(0.0); });
  return g;
}

/// Exact gradients through the unrolled stack. `output_grads[t]` is the loss
/// gradient with respect to the top layer output at time t; `final_grads`
/// optionally adds gradients with respect to the final state.
inline SequenceGrads backward_sequence(const RnnStack& stack, const SequenceCache& cache,
                                       const std::vector<Tensor2D>& output_grads,
                                       const StepState* final_grads = nullptr) {
  const std::size_t T = cache.steps;
  const std::size_t B = cache.batch;
  const std::size_t dirs = stack.directions();
  const std::size_t H = stack.hidden_size;
  if (output_grads.size() != T) {
    throw ShapeError("backward_sequence: " + std::to_string(output_grads.size()) +
                     " output grads for " + std::to_string(T) + " steps");
  }
  if (cache.caches.size() != stack.num_layers() * dirs) {
    throw ShapeError("backward_sequence: cache does not match stack");
  }
  for (const auto& g : output_grads) {
    if (g.rows() != stack.output_size() || g.cols() != B) {
      throw ShapeError("backward_sequence: output grad is " + g.shape_string());
    }
  }

  SequenceGrads grads{zeros_like(stack), {}, StepState::zeros(stack, B)};
  std::vector<Tensor2D> d_above = output_grads;
  for (std::size_t l = stack.num_layers(); l-- > 0;) {
    const std::size_t in_size = stack.layer_input_size(l);
    std::vector<Tensor2D> d_below(T, Tensor2D(in_size, B));
    for (std::size_t d = 0; d < dirs; ++d) {
      const std::size_t slot = l * dirs + d;
      const auto& caches = cache.caches[slot];
      Tensor2D dh_next(H, B), dc_next(H, B);
      if (final_grads != nullptr) {
        dh_next = final_grads->h[slot];
        if (stack.has_cell_state()) dc_next = final_grads->c[slot];
      }
      // Reverse of the forward processing order.
      for (std::size_t step = 0; step < T; ++step) {
        const std::size_t t = d == 0 ? T - 1 - step : step;
        Tensor2D dh = dirs == 1 ? d_above[t] : detail::slice_rows(d_above[t], d * H, H);
        add_inplace(dh, dh_next);
        auto g = detail::backprop_cell(stack.cell(l, d), caches[t], dh, dc_next,
                                       grads.params.cell(l, d));
        add_inplace(d_below[t], g.dx);
        dh_next = std::move(g.dh_prev);
        if (stack.has_cell_state()) dc_next = std::move(g.dc_prev);
      }
      grads.init.h[slot] = std::move(dh_next);
      if (stack.has_cell_state()) grads.init.c[slot] = std::move(dc_next);
    }
    d_above = std::move(d_below);
  }
  grads.inputs = std::move(d_above);
  return grads;
}

}  // namespace bayesrnn
