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

// Parameter update rules over flat parameter vectors.
//
// The gradient every rule consumes is that of the stochastic negative
// log-posterior
//
//   U~(theta) = -log p(theta) - (N / M) * sum_{m in batch} log p(D_m | theta)
//
// with a zero-mean Gaussian prior of variance sigma^2. The optimizers (SGD,
// RMSprop) descend it; the samplers (SGLD, pSGLD) add Langevin noise so the
// iterates become approximate posterior samples.
//
// Sign convention: all rules move against the gradient of U~. The pSGLD
// drift is -(eta/2) G^-1 g, the descent reading of "+ (eta/2) G^-1 f" for a
// quantity being minimized; SGLD's "- eta f" fixes the sign.

#pragma once

#include <bayesrnn/numerics.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bayesrnn {

enum class Algorithm { sgd, rmsprop, sgld, psgld };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::sgd: return "sgd";
    case Algorithm::rmsprop: return "rmsprop";
    case Algorithm::sgld: return "sgld";
    case Algorithm::psgld: return "psgld";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "sgd") return Algorithm::sgd;
  if (s == "rmsprop") return Algorithm::rmsprop;
  if (s == "sgld") return Algorithm::sgld;
  if (s == "psgld") return Algorithm::psgld;
  throw std::invalid_argument("unknown algorithm '" + std::string(s) + "'");
}

inline bool is_sampler(Algorithm a) { return a == Algorithm::sgld || a == Algorithm::psgld; }

struct HyperParams {
  double step_size = 1e-3;
  // Optional polynomial decay eta_t = step_size * (decay_offset + t)^(-decay_power);
  // decay_power == 0 keeps the step size constant.
  double decay_offset = 1.0;
  double decay_power = 0.0;
  std::size_t minibatch_size = 1;
  std::size_t dataset_size = 1;
  double beta1 = 0.99;
  double lambda = 1e-8;
  double prior_variance = 1.0;
  double dropout_keep = 1.0;
  double burn_in_epochs = 0.0;
  double thinning_interval_epochs = 1.0;
  bool inject_noise = true;
  bool prewarm_preconditioner = true;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("HyperParams: " + m); };
    if (!(step_size > 0.0)) fail("step_size must be positive");
    if (decay_power < 0.0) fail("decay_power must be non-negative");
    if (decay_power > 0.0 && !(decay_offset > 0.0)) fail("decay_offset must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) fail("beta1 must lie in (0, 1)");
    if (!(lambda > 0.0)) fail("lambda must be positive");
    if (!(prior_variance > 0.0)) fail("prior_variance must be positive");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) fail("dropout_keep must lie in (0, 1]");
    if (minibatch_size == 0) fail("minibatch_size must be positive");
    if (minibatch_size > dataset_size) fail("minibatch_size exceeds dataset_size");
    if (burn_in_epochs < 0.0 || thinning_interval_epochs < 0.0) {
      fail("burn-in and thinning must be non-negative");
    }
  }

  /// Step size for update number t (0-based).
  double step_size_at(std::uint64_t t) const {
    if (decay_power == 0.0) return step_size;
    return step_size * std::pow(decay_offset + static_cast<double>(t), -decay_power);
  }
};

/// Second-moment accumulator shared by RMSprop and pSGLD; starts at zero.
struct SamplerState {
  std::vector<double> v;
  std::uint64_t step_counter = 0;

  static SamplerState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), 0}; }
};

struct GradEstimate {
  std::vector<double> grad;
  std::vector<std::size_t> batch_indices;
};

namespace detail {

inline void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": length " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

inline void require_positive_step(double eta, const char* op) {
  if (!(eta > 0.0)) throw NumericError(std::string(op) + ": step size must be positive");
}

}  // namespace detail

/// grad = theta / sigma^2 + (N / M) * raw_loglik_grad_sum, where the raw sum
/// is the gradient of the summed minibatch negative log-likelihood and M the
/// number of examples actually in the batch. The prior term is not rescaled.
inline GradEstimate posterior_grad(std::span<const double> raw_loglik_grad_sum,
                                   std::span<const double> theta, const HyperParams& hp,
                                   std::size_t batch_size_actual) {
  detail::require_same_size(raw_loglik_grad_sum.size(), theta.size(), "posterior_grad");
  if (batch_size_actual == 0) throw std::invalid_argument("posterior_grad: empty batch");
  if (!all_finite(raw_loglik_grad_sum) || !all_finite(theta)) {
    throw NumericError("posterior_grad: non-finite input");
  }
  const double scale =
      static_cast<double>(hp.dataset_size) / static_cast<double>(batch_size_actual);
  GradEstimate g;
  g.grad.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    g.grad[i] = theta[i] / hp.prior_variance + scale * raw_loglik_grad_sum[i];
  }
  return g;
}

/// Rescales `g` in place so its Euclidean norm is at most max_norm; returns
/// the factor applied. max_norm <= 0 disables clipping.
inline double clip_by_global_norm(std::span<double> g, double max_norm) {
  if (max_norm <= 0.0) return 1.0;
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double f = max_norm / norm;
  for (double& v : g) v *= f;
  return f;
}

/// theta <- theta - eta * g
inline void sgd_step(std::span<double> theta, std::span<const double> g, double eta) {
  detail::require_same_size(theta.size(), g.size(), "sgd_step");
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = theta[i] - eta * g[i];
}

/// theta <- theta - eta * g + sqrt(2 eta) * xi,  xi ~ N(0, I), one draw per
/// coordinate in order.
inline void sgld_step(std::span<double> theta, std::span<const double> g, double eta,
                      SeededRng& rng, bool inject_noise = true) {
  detail::require_same_size(theta.size(), g.size(), "sgld_step");
  detail::require_positive_step(eta, "sgld_step");
  const double noise_scale = std::sqrt(2.0 * eta);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double xi = inject_noise ? rng.normal() : 0.0;
    theta[i] = theta[i] - eta * g[i] + noise_scale * xi;
  }
}

/// Same rule with caller-supplied standard normal draws `xi`.
inline void sgld_step(std::span<double> theta, std::span<const double> g, double eta,
                      std::span<const double> xi) {
  detail::require_same_size(theta.size(), g.size(), "sgld_step");
  detail::require_same_size(theta.size(), xi.size(), "sgld_step noise");
  detail::require_positive_step(eta, "sgld_step");
  const double noise_scale = std::sqrt(2.0 * eta);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta[i] = theta[i] - eta * g[i] + noise_scale * xi[i];
  }
}

/// v <- beta1 v + (1 - beta1) g.g
inline void accumulate_second_moment(std::span<double> v, std::span<const double> g,
                                     double beta1) {
  detail::require_same_size(v.size(), g.size(), "accumulate_second_moment");
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = beta1 * v[i] + (1.0 - beta1) * g[i] * g[i];
}

/// v' = beta1 v + (1 - beta1) g.g;  theta' = theta - eta g / (lambda + sqrt(v'))
inline void rmsprop_step(std::span<double> theta, std::span<const double> g, SamplerState& state,
                         const HyperParams& hp) {
  detail::require_same_size(theta.size(), g.size(), "rmsprop_step");
  detail::require_same_size(state.v.size(), g.size(), "rmsprop_step state");
  const double eta = hp.step_size_at(state.step_counter);
  detail::require_positive_step(eta, "rmsprop_step");
  accumulate_second_moment(state.v, g, hp.beta1);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta[i] = theta[i] - eta * g[i] / (hp.lambda + std::sqrt(state.v[i]));
  }
  ++state.step_counter;
}

enum class Preconditioner { rmsprop, identity };

/// Preconditioned Langevin update with a diagonal preconditioner:
///   v' = beta1 v + (1 - beta1) g.g
///   G^-1 = 1 / (lambda + sqrt(v'))           (all ones for `identity`)
///   theta' = theta - (eta/2) G^-1 g + xi,    xi ~ N(0, eta G^-1)
/// With an identity preconditioner this is sgld_step at step size eta/2,
/// drawing the same normal stream.
inline void psgld_step(std::span<double> theta, std::span<const double> g, SamplerState& state,
                       const HyperParams& hp, SeededRng& rng,
                       Preconditioner precond = Preconditioner::rmsprop) {
  detail::require_same_size(theta.size(), g.size(), "psgld_step");
  detail::require_same_size(state.v.size(), g.size(), "psgld_step state");
  const double eta = hp.step_size_at(state.step_counter);
  detail::require_positive_step(eta, "psgld_step");
  if (precond == Preconditioner::rmsprop) {
    if (state.step_counter == 0 && hp.prewarm_preconditioner) {
      // Avoids the eta/lambda noise variance of a v = 0 first step.
      accumulate_second_moment(state.v, g, hp.beta1);
    }
    accumulate_second_moment(state.v, g, hp.beta1);
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double ginv =
        precond == Preconditioner::identity ? 1.0 : 1.0 / (hp.lambda + std::sqrt(state.v[i]));
    const double xi = hp.inject_noise ? rng.normal() : 0.0;
    theta[i] = theta[i] - (0.5 * eta * ginv) * g[i] + std::sqrt(eta * ginv) * xi;
  }
  ++state.step_counter;
}

enum class WeightNoise { binary, gaussian };

struct NoisyWeights {
  std::vector<double> values;       // xi . theta
  std::vector<double> multipliers;  // xi, kept for the backward pass
};

/// Multiplicative weight noise. Binary: xi = Ber(keep) / keep. Gaussian:
/// xi ~ N(1, (1 - keep) / keep), the moment-matched form of the binary mask
/// (variance p / (1 - p) in terms of the drop rate p = 1 - keep).
inline NoisyWeights apply_weight_noise(std::span<const double> theta, WeightNoise mode,
                                       double keep_prob, SeededRng& rng) {
  if (mode == WeightNoise::binary && !(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw NumericError("apply_weight_noise: binary keep_prob must lie in (0, 1]");
  }
  if (mode == WeightNoise::gaussian && !(keep_prob > 0.0 && keep_prob < 1.0)) {
    throw NumericError("apply_weight_noise: gaussian keep_prob must lie in (0, 1)");
  }
  NoisyWeights out;
  out.values.resize(theta.size());
  out.multipliers.resize(theta.size());
  const double gaussian_std = std::sqrt((1.0 - keep_prob) / keep_prob);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double xi;
    if (mode == WeightNoise::binary) {
      xi = keep_prob == 1.0 ? 1.0 : (rng.uniform() < keep_prob ? 1.0 / keep_prob : 0.0);
    } else {
      xi = 1.0 + gaussian_std * rng.normal();
    }
    out.multipliers[i] = xi;
    out.values[i] = xi * theta[i];
  }
  return out;
}

}  // namespace bayesrnn
