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

// Posterior sample collection and test-time model averaging.

#pragma once

#include <bayesrnn/models.hpp>
#include <bayesrnn/numerics.hpp>
#include <bayesrnn/params.hpp>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bayesrnn {

struct CollectionPolicy {
  double burn_in_epochs = 0.0;
  double thinning_interval_epochs = 1.0;

  void validate() const {
    if (!(burn_in_epochs >= 0.0) || !(thinning_interval_epochs >= 0.0)) {
      throw std::invalid_argument("CollectionPolicy: burn-in and thinning must be >= 0");
    }
  }
};

/// Tolerance for comparing epoch stamps built from batch counts.
inline constexpr double kEpochTolerance = 1e-9;

/// Whether a snapshot is due at `epoch_fraction`. Samples are taken strictly
/// after burn-in, and then no sooner than one thinning interval after the
/// previous sample. Checking twice per epoch over 20 epochs with a burn-in of
/// 4 and thinning of 1/2 yields 32 samples (stamps 4.5, 5.0, ..., 20.0).
inline bool collection_due(const CollectionPolicy& policy, std::optional<double> last_stamp,
                           double epoch_fraction) {
  if (last_stamp && epoch_fraction < *last_stamp) {
    throw std::invalid_argument("collection_due: epoch stamps must be nondecreasing");
  }
  if (!(epoch_fraction > policy.burn_in_epochs + kEpochTolerance)) return false;
  if (!last_stamp) return true;
  if (!(epoch_fraction > *last_stamp)) return false;
  return epoch_fraction - *last_stamp >= policy.thinning_interval_epochs - kEpochTolerance;
}

/// Snapshots in collection order with their epoch stamps.
struct SampleBank {
  std::vector<FlatParams> samples;
  std::vector<double> stamps;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::optional<double> last_stamp() const {
    return stamps.empty() ? std::nullopt : std::optional<double>(stamps.back());
  }
};

/// Appends a deep copy of theta when collection_due(); returns whether it did.
inline bool maybe_collect(SampleBank& bank, const CollectionPolicy& policy, double epoch_fraction,
                          const FlatParams& theta) {
  if (!collection_due(policy, bank.last_stamp(), epoch_fraction)) return false;
  if (!bank.empty() && !bank.samples.front().same_layout(theta)) {
    throw ShapeError("maybe_collect: snapshot layout differs from the bank");
  }
  bank.samples.push_back(theta);
  bank.stamps.push_back(epoch_fraction);
  return true;
}

/// Number of samples a schedule yields when collection is checked
/// `checks_per_epoch` times per epoch at evenly spaced stamps.
inline std::size_t count_collections(const CollectionPolicy& policy, std::size_t total_epochs,
                                     std::size_t checks_per_epoch) {
  std::optional<double> last;
  std::size_t n = 0;
  for (std::size_t i = 1; i <= total_epochs * checks_per_epoch; ++i) {
    const double stamp = static_cast<double>(i) / static_cast<double>(checks_per_epoch);
    if (collection_due(policy, last, stamp)) {
      last = stamp;
      ++n;
    }
  }
  return n;
}

enum class StrategyKind { forward, backward, thinned };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::forward: return "forward";
    case StrategyKind::backward: return "backward";
    case StrategyKind::thinned: return "thinned";
  }
  return "?";
}

inline StrategyKind parse_strategy(std::string_view s) {
  if (s == "forward") return StrategyKind::forward;
  if (s == "backward") return StrategyKind::backward;
  if (s == "thinned") return StrategyKind::thinned;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "'");
}

struct AveragingStrategy {
  StrategyKind kind = StrategyKind::forward;
  std::size_t count = 1;
};

/// 0-based bank indices chosen by `strategy` from a bank of K samples.
/// forward: 0..S-1. backward: K-S..K-1. thinned: ceil(k K / S) - 1 for
/// k = 1..S, i.e. 1-based positions {2, 4, 6} for K = 6, S = 3.
inline std::vector<std::size_t> select_indices(std::size_t K, const AveragingStrategy& strategy) {
  const std::size_t S = strategy.count;
  if (S == 0) throw std::invalid_argument("select: need at least one sample");
  if (S > K) {
    throw std::invalid_argument("select: asked for " + std::to_string(S) + " of " +
                                std::to_string(K) + " samples");
  }
  std::vector<std::size_t> idx(S);
  for (std::size_t k = 0; k < S; ++k) {
    switch (strategy.kind) {
      case StrategyKind::forward: idx[k] = k; break;
      case StrategyKind::backward: idx[k] = K - S + k; break;
      case StrategyKind::thinned: idx[k] = ((k + 1) * K + S - 1) / S - 1; break;
    }
  }
  return idx;
}

inline std::vector<FlatParams> select(const SampleBank& bank, const AveragingStrategy& strategy) {
  std::vector<FlatParams> out;
  for (std::size_t i : select_indices(bank.size(), strategy)) out.push_back(bank.samples[i]);
  return out;
}

struct EnsemblePrediction {
  Tensor2D avg;
  std::vector<Tensor2D> per_sample;
};

/// Probability-space average of predict(model) over the samples, each loaded
/// into a copy of `model_template`. Summation runs in sample order.
template <class Model, class Predict>
  requires std::invocable<Predict&, const Model&>
EnsemblePrediction ensemble_predict(const Model& model_template,
                                    std::span<const FlatParams> samples, Predict&& predict) {
  if (samples.empty()) throw std::invalid_argument("ensemble_predict: no samples");
  EnsemblePrediction out;
  Model m = model_template;
  for (const auto& theta : samples) {
    unflatten(theta, m);
    out.per_sample.push_back(predict(static_cast<const Model&>(m)));
  }
  out.avg = out.per_sample.front();
  for (std::size_t s = 1; s < out.per_sample.size(); ++s) {
    detail::require_same_shape(out.avg, out.per_sample[s], "ensemble_predict");
    add_inplace(out.avg, out.per_sample[s]);
  }
  const double n = static_cast<double>(samples.size());
  for (double& v : out.avg.values()) v /= n;
  return out;
}

/// Next-token distributions for a token sequence, one row per prediction.
inline EnsemblePrediction ensemble_predict(const LanguageModel& model_template,
                                           std::span<const FlatParams> samples,
                                           std::span<const TokenId> sequence) {
  return ensemble_predict(model_template, samples, [&](const LanguageModel& m) {
    const auto init = StepState::zeros(m.stack, 1);
    return lm_loss_and_grad(m, sequence, init, {}, nullptr, false).per_token_probs;
  });
}

/// Class distribution for one sentence as a 1 x classes row.
inline EnsemblePrediction ensemble_predict(const SentenceClassifier& model_template,
                                           std::span<const FlatParams> samples,
                                           std::span<const TokenId> tokens) {
  return ensemble_predict(model_template, samples, [&](const SentenceClassifier& m) {
    const auto p = classifier_probs(m, tokens);
    return Tensor2D(1, p.size(), p);
  });
}

/// Prediction of a single point estimate.
template <class Model, class Input>
Tensor2D map_predict(const Model& model_template, const FlatParams& theta, const Input& input) {
  return ensemble_predict(model_template, std::span<const FlatParams>(&theta, 1), input).avg;
}

struct PredictiveStats {
  Tensor2D mean;
  Tensor2D std;  // population standard deviation across samples
};

inline PredictiveStats predictive_stats(std::span<const Tensor2D> per_sample) {
  if (per_sample.empty()) throw std::invalid_argument("predictive_stats: no samples");
  const double S = static_cast<double>(per_sample.size());
  PredictiveStats st{Tensor2D(per_sample[0].rows(), per_sample[0].cols()),
                     Tensor2D(per_sample[0].rows(), per_sample[0].cols())};
  for (const auto& p : per_sample) {
    detail::require_same_shape(st.mean, p, "predictive_stats");
    add_inplace(st.mean, p);
  }
  for (double& v : st.mean.values()) v /= S;
  for (const auto& p : per_sample) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - st.mean[i];
      st.std[i] += d * d;
    }
  }
  for (double& v : st.std.values()) v = std::sqrt(v / S);
  return st;
}

/// target_probs[s][i] is sample s's probability of the i-th held-out target.
/// Returns the summed NLL of the subset's averaged predictive distribution.
inline double ensemble_nll(std::span<const std::vector<double>> target_probs,
                           std::span<const std::size_t> subset) {
  if (subset.empty()) throw std::invalid_argument("ensemble_nll: empty subset");
  const std::size_t n = target_probs[subset[0]].size();
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (std::size_t s : subset) p += target_probs[s][i];
    nll -= std::log(p / static_cast<double>(subset.size()));
  }
  return nll;
}

/// Summed NLL of one sample's targets.
inline double sample_nll(std::span<const double> target_probs) {
  double nll = 0.0;
  for (double p : target_probs) nll -= std::log(p);
  return nll;
}

}  // namespace bayesrnn
