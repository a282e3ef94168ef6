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

// Training, evaluation and generation drivers behind the command-line tool.
//
// A run directory holds
//
//   config.txt     resolved configuration (canonical key = value form)
//   vocab.json     token of every id
//   folds.txt      fold of every example (classification only)
//   metrics.csv    epoch,split,metric,value rows, appended as training runs
//   bank/          posterior snapshots sample_0001, sample_0002, ...
//   best/          checkpoint with the lowest validation loss so far
//   state/         resume point written at every epoch boundary
//   final/         parameters after the last epoch
//   summary.json   written once training completes
//   eval/          outputs of the eval command
//
// Everything written under the run directory except the wall-clock progress
// lines on stderr is a function of the configuration and corpus bytes.

#pragma once

#include <bayesrnn/checkpoint.hpp>
#include <bayesrnn/config.hpp>
#include <bayesrnn/data.hpp>
#include <bayesrnn/models.hpp>
#include <bayesrnn/params.hpp>
#include <bayesrnn/posterior.hpp>
#include <bayesrnn/samplers.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace bayesrnn {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kNumeric = 2;
}  // namespace exit_code

/// Exclusive ownership of a run directory for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw ConfigError(dir.string() + " is locked by another process (remove " +
                        path_.string() + " if that process is gone)");
    }
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

inline constexpr const char* kMetricsHeader = "epoch,split,metric,value\n";

class MetricsWriter {
 public:
  /// Opens for appending, writing the header to a new file. `keep_bytes`
  /// truncates an existing file first (used when resuming).
  MetricsWriter(const fs::path& path, std::optional<std::uintmax_t> keep_bytes = std::nullopt)
      : path_(path) {
    if (keep_bytes) fs::resize_file(path, *keep_bytes);
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, std::ios::binary | std::ios::app);
    if (!out_) throw std::runtime_error("cannot open " + path.string());
    if (fresh) out_ << kMetricsHeader << std::flush;
  }

  void row(std::size_t epoch, std::string_view split, std::string_view metric, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    out_ << epoch << ',' << split << ',' << metric << ',' << buf << '\n';
    out_.flush();
  }

  std::uintmax_t bytes() const { return fs::file_size(path_); }

 private:
  fs::path path_;
  std::ofstream out_;
};

struct EvalResult {
  double nll_sum = 0.0;
  std::size_t count = 0;
  std::size_t errors = 0;            // classification only
  std::vector<double> target_probs;  // when requested, in evaluation order

  double nll_per_item() const { return nll_sum / static_cast<double>(count); }
};

// ---------------------------------------------------------------------------
// Problems: what a batch and an evaluation mean for each task.

inline std::vector<std::string> read_vocab_tokens(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return nlohmann::json::parse(bytes.begin(), bytes.end()).get<std::vector<std::string>>();
}

struct BatchOutcome {
  double nll_sum = 0.0;
  std::size_t count = 0;
  std::size_t examples = 0;  // M for the likelihood scaling
  FlatParams grads;
};

/// Next-token NLL over a split, read as `streams` parallel streams with state
/// carried across windows of `unroll` steps.
inline EvalResult evaluate_lm(const LanguageModel& model, std::span<const TokenId> ids,
                              std::size_t streams, std::size_t unroll, bool keep_probs) {
  const auto plan = plan_eval(ids.size() - 1, streams, unroll);
  EvalResult r;
  StepState state = StepState::zeros(model.stack, plan.streams);
  if (keep_probs) r.target_probs.resize(plan.num_positions());
  for (std::size_t w = 0; w < plan.num_windows(); ++w) {
    auto mb = materialize_eval(ids, plan, w);
    auto res = lm_loss_and_grad(model, mb.inputs, mb.targets, state, {}, nullptr,
                                {.compute_grads = false, .keep_probs = false});
    state = std::move(res.final_state);
    r.nll_sum += res.nll_sum;
    r.count += res.token_count;
    if (keep_probs) {
      // Stored stream-major so the order matches the token stream.
      for (std::size_t t = 0; t < mb.inputs.steps; ++t) {
        for (std::size_t b = 0; b < plan.streams; ++b) {
          r.target_probs[b * plan.stream_length + w * plan.unroll + t] = res.target_probs(t, b);
        }
      }
    }
  }
  return r;
}

class LmProblem {
 public:
  using Model = LanguageModel;

  LmProblem(const RunConfig& cfg, LmData data) : cfg_(cfg), data_(std::move(data)) {
    BatchPlan plan{cfg.batch_mode, cfg.batch_size, cfg.unroll, cfg.seed};
    if (cfg.batch_mode == BatchMode::successive) {
      succ_ = plan_successive(data_.train.num_positions(), plan);
    } else {
      rand_ = plan_random(data_.train.num_positions(), plan);
    }
  }

  static LmData load(const RunConfig& cfg) {
    const auto level = cfg.task == Task::char_lm ? TokenLevel::character : TokenLevel::word;
    if (!cfg.data.empty()) {
      const auto tokens = lm_tokens(read_file(cfg.data), level);
      return make_lm_data(tokens, cfg.train_fraction, cfg.valid_fraction, cfg.max_vocab);
    }
    return load_lm_files(cfg.train_path, cfg.valid_path, cfg.test_path, level, cfg.max_vocab);
  }

  const Vocab& vocab() const { return data_.vocab; }
  const LmData& data() const { return data_; }

  Model make_model() const {
    return LanguageModel::make(cfg_.cell, data_.vocab.size(), cfg_.embed_size(), cfg_.hidden,
                               cfg_.layers);
  }

  /// Number of training windows; one window of `unroll` positions is one
  /// example for the likelihood scaling.
  std::size_t dataset_size() const {
    return succ_ ? succ_->batch * succ_->num_batches : rand_->num_windows;
  }

  std::size_t batches_per_epoch() const {
    return succ_ ? succ_->num_batches : rand_->batches_per_epoch();
  }

  std::size_t dropped_positions() const { return succ_ ? succ_->dropped : rand_->dropped; }

  void begin_epoch(const Model& model, SeededRng& shuffle_rng) {
    if (succ_) {
      state_ = StepState::zeros(model.stack, succ_->batch);
    } else {
      epoch_batches_ = rand_->epoch(shuffle_rng);
    }
  }

  BatchOutcome batch(std::size_t k, const Model& model, const DropoutSpec& dropout,
                     SeededRng& dropout_rng) {
    LmMinibatch mb = succ_ ? materialize_successive(data_.train.ids, *succ_, k)
                           : materialize_random(data_.train.ids, *rand_, epoch_batches_[k]);
    const StepState init = succ_ ? state_ : StepState::zeros(model.stack, mb.inputs.batch);
    auto res = lm_loss_and_grad(model, mb.inputs, mb.targets, init, dropout, &dropout_rng);
    if (succ_) state_ = std::move(res.final_state);
    return {res.nll_sum, res.token_count, mb.inputs.batch, std::move(res.grads)};
  }

  EvalResult evaluate(const Model& model, Split split, bool keep_probs = false) const {
    const auto& ids = split == Split::valid  ? data_.valid.ids
                      : split == Split::test ? data_.test.ids
                                             : data_.train.ids;
    return evaluate_lm(model, ids, cfg_.eval_streams, cfg_.unroll, keep_probs);
  }

  std::string item_name() const { return cfg_.task == Task::char_lm ? "char" : "token"; }

 private:
  RunConfig cfg_;
  LmData data_;
  std::optional<SuccessivePlan> succ_;
  std::optional<RandomPlan> rand_;
  StepState state_;
  std::vector<std::vector<std::size_t>> epoch_batches_;
};

class ClassifyProblem {
 public:
  using Model = SentenceClassifier;

  /// Fold `cfg.fold` is the test set, the next fold (cyclically) the
  /// validation set, the rest training data. The vocabulary comes from the
  /// training folds only.
  ClassifyProblem(const RunConfig& cfg, ClassificationData data, std::vector<std::size_t> folds)
      : cfg_(cfg), raw_(std::move(data)), folds_(std::move(folds)) {
    if (folds_.size() != raw_.examples.size()) {
      throw ConfigError("fold assignment does not match the number of examples");
    }
    const std::size_t valid_fold = (cfg.fold + 1) % cfg.folds;
    std::vector<std::string> train_words;
    for (std::size_t i = 0; i < folds_.size(); ++i) {
      if (folds_[i] != cfg.fold && folds_[i] != valid_fold) {
        train_words.insert(train_words.end(), raw_.examples[i].words.begin(),
                           raw_.examples[i].words.end());
      }
    }
    vocab_ = build_vocab(train_words, cfg.max_vocab);
    const auto encoded = encode_examples(raw_, vocab_);
    for (std::size_t i = 0; i < folds_.size(); ++i) {
      auto& dst = folds_[i] == cfg.fold ? test_ : folds_[i] == valid_fold ? valid_ : train_;
      dst.push_back(encoded[i]);
    }
    if (train_.empty() || valid_.empty() || test_.empty()) {
      throw ConfigError("a fold split left the train, validation or test set empty");
    }
  }

  const Vocab& vocab() const { return vocab_; }
  const std::vector<std::size_t>& folds() const { return folds_; }
  const std::vector<Example>& split(Split s) const {
    return s == Split::train ? train_ : s == Split::valid ? valid_ : test_;
  }

  Model make_model() const {
    return SentenceClassifier::make(cfg_.cell, vocab_.size(), cfg_.embed_size(), cfg_.hidden,
                                    cfg_.layers, raw_.num_classes(), cfg_.bidirectional);
  }

  std::size_t dataset_size() const { return train_.size(); }
  std::size_t batches_per_epoch() const {
    return (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  }
  std::size_t dropped_positions() const { return 0; }

  void begin_epoch(const Model&, SeededRng& shuffle_rng) {
    order_.resize(train_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    shuffle(order_, shuffle_rng);
  }

  BatchOutcome batch(std::size_t k, const Model& model, const DropoutSpec& dropout,
                     SeededRng& dropout_rng) {
    const std::size_t begin = k * cfg_.batch_size;
    const std::size_t end = std::min(begin + cfg_.batch_size, order_.size());
    BatchOutcome out;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& ex = train_[order_[i]];
      auto r = classifier_loss_and_grad(model, ex.tokens, ex.label, dropout, &dropout_rng);
      out.nll_sum += r.nll;
      if (out.grads.index.empty()) {
        out.grads = std::move(r.grads);
      } else {
        for (std::size_t j = 0; j < out.grads.size(); ++j) out.grads.values[j] += r.grads.values[j];
      }
    }
    out.count = out.examples = end - begin;
    return out;
  }

  EvalResult evaluate(const Model& model, Split s, bool keep_probs = false) const {
    EvalResult r;
    for (const auto& ex : split(s)) {
      const auto p = classifier_probs(model, ex.tokens);
      r.nll_sum -= std::log(p[ex.label]);
      ++r.count;
      const auto argmax = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
      if (argmax != ex.label) ++r.errors;
      if (keep_probs) r.target_probs.push_back(p[ex.label]);
    }
    return r;
  }

  std::string item_name() const { return "example"; }

 private:
  RunConfig cfg_;
  ClassificationData raw_;
  std::vector<std::size_t> folds_;
  Vocab vocab_;
  std::vector<Example> train_, valid_, test_;
  std::vector<std::size_t> order_;
};

inline ClassifyProblem load_classify_problem(const RunConfig& cfg, const fs::path& run_dir,
                                             bool write_sidecar) {
  auto data = load_classification_tsv(cfg.data);
  const fs::path sidecar = run_dir / "folds.txt";
  std::vector<std::size_t> folds;
  if (!write_sidecar && fs::exists(sidecar)) {
    folds = read_fold_sidecar(sidecar.string());
  } else {
    folds = kfold_assignments(data.examples.size(), cfg.folds, cfg.seed);
    if (write_sidecar) write_fold_sidecar(sidecar.string(), folds);
  }
  return ClassifyProblem(cfg, std::move(data), std::move(folds));
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
  bool resume = false;
  std::size_t stop_after_epochs = 0;  // stop (resumably) after this epoch; 0 = run to the end
  std::ostream* log = &std::cerr;
};

struct TrainSummary {
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  bool interrupted = false;
  std::size_t samples_collected = 0;
  std::size_t best_epoch = 0;
  double best_valid = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Distinct generator streams derived from the run seed.
struct RunRngs {
  SeededRng init, noise, dropout, shuffle;
  explicit RunRngs(std::uint64_t seed)
      : init(seed), noise(seed ^ 0x6e6f697365000001ULL), dropout(seed ^ 0x64726f706f000002ULL),
        shuffle(seed ^ 0x7368756666000003ULL) {}
};

/// Mask of coordinates that DropConnect perturbs: every weight matrix and
/// the embedding table, but no bias.
inline std::vector<bool> weight_noise_mask(const FlatParams& p) {
  std::vector<bool> m(p.size(), false);
  for (const auto& e : p.index) {
    if (e.name == "decoder.b" || is_bias_name(e.name)) continue;
    for (std::size_t i = e.offset; i < e.offset + e.length(); ++i) m[i] = true;
  }
  return m;
}

inline void require_finite(const FlatParams& p, const std::string& what) {
  const auto bad = first_nonfinite(p);
  if (!bad.empty()) throw NumericError("non-finite value in tensor '" + bad + "' " + what);
}

inline nlohmann::json summary_json(const RunConfig& cfg, const TrainSummary& s) {
  return {{"task", to_string(cfg.task)},        {"algorithm", to_string(cfg.algorithm)},
          {"seed", cfg.seed},                   {"epochs_run", s.epochs_run},
          {"stopped_early", s.stopped_early},   {"samples_collected", s.samples_collected},
          {"best_epoch", s.best_epoch},         {"best_valid_nll", s.best_valid}};
}

}  // namespace detail

template <class Problem>
TrainSummary train_loop(const RunConfig& cfg, Problem& problem, const TrainOptions& opts) {
  using Model = typename Problem::Model;
  std::ostream& log = *opts.log;
  const fs::path out = cfg.out;
  detail::RunRngs rngs(cfg.seed);

  Model model = problem.make_model();
  initialize(model, rngs.init, cfg.init_scale);
  FlatParams theta = flatten(model);
  SamplerState sampler = SamplerState::zeros(theta.size());
  const HyperParams hp = cfg.hyper(problem.dataset_size());
  hp.validate();
  const auto weight_mask = detail::weight_noise_mask(theta);
  const DropoutSpec dropout = cfg.dropout_spec();

  TrainSummary summary;
  std::size_t bad_evals = 0;
  std::size_t first_epoch = 0;
  BankWriter bank(out / "bank", cfg.collection());
  std::optional<std::uintmax_t> metrics_keep;

  if (opts.resume) {
    auto st = load_checkpoint(out / "state" / "params");
    auto sv = load_checkpoint(out / "state" / "sampler");
    if (!st.params.same_layout(theta)) throw CheckpointError("resume state has another layout");
    theta = std::move(st.params);
    sampler.v = std::move(sv.params.values);
    const auto& x = st.manifest.extra;
    sampler.step_counter = x.at("step_counter").get<std::uint64_t>();
    rngs.noise.set_state(st.manifest.rng);
    rngs.dropout.set_state(rng_from_json(x.at("dropout_rng")));
    rngs.shuffle.set_state(rng_from_json(x.at("shuffle_rng")));
    first_epoch = x.at("epoch").get<std::size_t>();
    summary.best_epoch = x.at("best_epoch").get<std::size_t>();
    summary.best_valid = hex_to_double(x.at("best_valid").get<std::string>());
    bad_evals = x.at("bad_evals").get<std::size_t>();
    metrics_keep = x.at("metrics_bytes").get<std::uintmax_t>();
    std::vector<double> stamps;
    for (const auto& h : x.at("bank_stamps")) stamps.push_back(hex_to_double(h.get<std::string>()));
    const std::size_t collected = stamps.size();
    bank.restore(collected, std::move(stamps));
    if (x.at("finished").get<bool>()) {
      log << "run already finished\n";
      first_epoch = cfg.epochs;
    }
    log << "resuming after epoch " << first_epoch << "\n";
  }
  MetricsWriter metrics(out / "metrics.csv", metrics_keep);

  auto manifest_for = [&](double epoch) {
    CheckpointManifest m;
    m.algorithm = std::string(to_string(cfg.algorithm));
    m.epoch = epoch;
    m.rng = rngs.noise.state();
    m.extra = {{"step_counter", sampler.step_counter}};
    return m;
  };

  auto save_state = [&](std::size_t epoch, bool finished) {
    CheckpointManifest m = manifest_for(static_cast<double>(epoch));
    nlohmann::json stamps = nlohmann::json::array();
    for (double s : bank.stamps()) stamps.push_back(double_to_hex(s));
    m.extra = {{"step_counter", sampler.step_counter},
               {"dropout_rng", rng_to_json(rngs.dropout.state())},
               {"shuffle_rng", rng_to_json(rngs.shuffle.state())},
               {"epoch", epoch},
               {"best_epoch", summary.best_epoch},
               {"best_valid", double_to_hex(summary.best_valid)},
               {"bad_evals", bad_evals},
               {"metrics_bytes", metrics.bytes()},
               {"bank_stamps", stamps},
               {"finished", finished}};
    save_checkpoint(out / "state" / "sampler", {sampler.v, theta.index}, manifest_for(epoch));
    save_checkpoint(out / "state" / "params", theta, m);
  };

  const std::size_t nb = problem.batches_per_epoch();
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t epoch = first_epoch;
  std::vector<double> noisy;
  for (; epoch < cfg.epochs; ++epoch) {
    unflatten(theta, model);
    problem.begin_epoch(model, rngs.shuffle);
    double epoch_nll = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t k = 0; k < nb; ++k) {
      const std::string where =
          "(epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(k + 1) + ")";
      NoisyWeights wn;
      if (cfg.dropout == DropoutMode::dropconnect) {
        noisy = theta.values;
        wn = apply_weight_noise(theta.values, cfg.dropconnect_noise, cfg.dropout_keep,
                                rngs.dropout);
        for (std::size_t i = 0; i < noisy.size(); ++i) {
          if (weight_mask[i]) noisy[i] = wn.values[i];
        }
        unflatten(FlatParams{noisy, theta.index}, model);
      } else {
        unflatten(theta, model);
      }
      BatchOutcome b = problem.batch(k, model, dropout, rngs.dropout);
      if (!std::isfinite(b.nll_sum)) throw NumericError("non-finite training loss " + where);
      detail::require_finite(b.grads, "in the likelihood gradient " + where);
      if (cfg.dropout == DropoutMode::dropconnect) {
        for (std::size_t i = 0; i < b.grads.size(); ++i) {
          if (weight_mask[i]) b.grads.values[i] *= wn.multipliers[i];
        }
      }
      clip_by_global_norm(b.grads.values, cfg.clip_norm);
      const GradEstimate g = posterior_grad(b.grads.values, theta.values, hp, b.examples);
      switch (cfg.algorithm) {
        case Algorithm::sgd:
          sgd_step(theta.values, g.grad, hp.step_size_at(sampler.step_counter++));
          break;
        case Algorithm::sgld:
          sgld_step(theta.values, g.grad, hp.step_size_at(sampler.step_counter++), rngs.noise,
                    hp.inject_noise);
          break;
        case Algorithm::rmsprop: rmsprop_step(theta.values, g.grad, sampler, hp); break;
        case Algorithm::psgld: psgld_step(theta.values, g.grad, sampler, hp, rngs.noise); break;
      }
      detail::require_finite(theta, "after the update " + where);
      epoch_nll += b.nll_sum;
      epoch_count += b.count;

      // Collection checks at nominal stamps epoch + c / checks_per_epoch.
      const std::size_t c_now = (k + 1) * cfg.checks_per_epoch / nb;
      const std::size_t c_prev = k * cfg.checks_per_epoch / nb;
      if (cfg.collect && c_now > c_prev) {
        const double stamp = static_cast<double>(epoch) +
                             static_cast<double>(c_now) / static_cast<double>(cfg.checks_per_epoch);
        if (bank.maybe_collect(stamp, theta, manifest_for(stamp))) {
          log << "collected sample " << bank.size() << " at epoch " << stamp << "\n";
        }
      }
      if ((k + 1) % 10 == 0 || k + 1 == nb) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << "epoch " << epoch + 1 << " batch " << k + 1 << "/" << nb << " train_nll "
            << epoch_nll / static_cast<double>(epoch_count) << " elapsed " << secs << "s\n";
      }
    }

    unflatten(theta, model);
    const auto valid = problem.evaluate(model, Split::valid);
    const std::size_t e1 = epoch + 1;
    const double train_nll = epoch_nll / static_cast<double>(epoch_count);
    metrics.row(e1, "train", "nll", train_nll);
    metrics.row(e1, "valid", "nll", valid.nll_per_item());
    if constexpr (std::is_same_v<Problem, ClassifyProblem>) {
      metrics.row(e1, "valid", "error",
                  static_cast<double>(valid.errors) / static_cast<double>(valid.count));
    } else {
      metrics.row(e1, "valid", "perplexity", std::exp(valid.nll_per_item()));
    }
    log << "epoch " << e1 << " valid_nll " << valid.nll_per_item() << "\n";
    if (valid.nll_per_item() < summary.best_valid) {
      summary.best_valid = valid.nll_per_item();
      summary.best_epoch = e1;
      bad_evals = 0;
      save_checkpoint(out / "best", theta, manifest_for(static_cast<double>(e1)));
    } else {
      ++bad_evals;
    }
    const bool stop_early = cfg.patience > 0 && bad_evals >= cfg.patience;
    const bool last = e1 == cfg.epochs || stop_early;
    save_state(e1, last);
    if (stop_early) {
      summary.stopped_early = true;
      log << "early stop: no validation improvement for " << bad_evals << " epochs\n";
      ++epoch;
      break;
    }
    if (opts.stop_after_epochs != 0 && e1 == opts.stop_after_epochs && !last) {
      summary.interrupted = true;
      ++epoch;
      break;
    }
  }
  summary.epochs_run = epoch;
  summary.samples_collected = bank.size();
  if (summary.interrupted) return summary;

  save_checkpoint(out / "final", theta, manifest_for(static_cast<double>(epoch)));
  unflatten(theta, model);
  const auto test = problem.evaluate(model, Split::test);
  metrics.row(epoch, "test", "nll", test.nll_per_item());
  if constexpr (std::is_same_v<Problem, ClassifyProblem>) {
    metrics.row(epoch, "test", "error",
                static_cast<double>(test.errors) / static_cast<double>(test.count));
  } else {
    metrics.row(epoch, "test", "perplexity", std::exp(test.nll_per_item()));
  }
  auto js = detail::summary_json(cfg, summary);
  js["final_test_nll"] = test.nll_per_item();
  js["test_items"] = test.count;
  js["dataset_size"] = problem.dataset_size();
  js["batches_per_epoch"] = nb;
  js["dropped_positions"] = problem.dropped_positions();
  write_file_atomic(out / "summary.json", js.dump(2) + "\n");
  return summary;
}

inline void write_vocab(const fs::path& path, const Vocab& v) {
  write_file_atomic(path, nlohmann::json(v.tokens()).dump() + "\n");
}

/// Fails unless `v` matches the vocabulary saved with the run.
inline void check_vocab(const fs::path& run_dir, const Vocab& v) {
  const fs::path p = run_dir / "vocab.json";
  if (fs::exists(p) && read_vocab_tokens(p) != v.tokens()) {
    throw ConfigError("corpus vocabulary differs from " + p.string());
  }
}

/// Prepares the run directory and trains. Errors propagate as exceptions;
/// run_command maps them to exit codes.
inline TrainSummary cmd_train(const RunConfig& cfg, const TrainOptions& opts = {}) {
  validate(cfg);
  const fs::path out = cfg.out;
  OutputLock lock(out);
  const fs::path config_path = out / "config.txt";
  const std::string text = config_to_text(cfg);
  if (opts.resume) {
    if (!fs::exists(out / "state" / "params" / "manifest.json")) {
      throw ConfigError("nothing to resume in " + out.string());
    }
    if (read_file(config_path.string()) != text) {
      throw ConfigError("configuration differs from the one saved in " + config_path.string());
    }
  } else {
    if (fs::exists(config_path) || fs::exists(out / "metrics.csv")) {
      throw ConfigError(out.string() + " already holds a run; use --resume or a fresh directory");
    }
    write_file_atomic(config_path, text);
  }
  if (cfg.task == Task::classify) {
    auto problem = load_classify_problem(cfg, out, !opts.resume);
    if (!opts.resume) write_vocab(out / "vocab.json", problem.vocab());
    check_vocab(out, problem.vocab());
    return train_loop(cfg, problem, opts);
  }
  LmProblem problem(cfg, LmProblem::load(cfg));
  if (!opts.resume) write_vocab(out / "vocab.json", problem.vocab());
  check_vocab(out, problem.vocab());
  return train_loop(cfg, problem, opts);
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Per-sample probabilities of every held-out target: result[s][i].
template <class Problem>
std::vector<std::vector<double>> bank_target_probs(const Problem& problem,
                                                   const std::vector<fs::path>& entries,
                                                   Split split = Split::test) {
  auto model = problem.make_model();
  std::vector<std::vector<double>> out;
  for (const auto& e : entries) {
    unflatten(load_checkpoint(e).params, model);
    out.push_back(problem.evaluate(model, split, true).target_probs);
  }
  return out;
}

struct EvalOptions {
  fs::path bank;            // defaults to <out>/bank
  fs::path checkpoint;      // evaluate one checkpoint instead of a bank
  bool sweep = false;       // ensemble NLL for every strategy and S
  bool per_token = false;   // write eval/per_token.csv (language models)
  std::ostream* out = &std::cout;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class Problem>
int eval_with(const RunConfig& cfg, const Problem& problem, const EvalOptions& opts) {
  std::ostream& os = *opts.out;
  const fs::path run = cfg.out;
  const fs::path eval_dir = run / "eval";
  fs::create_directories(eval_dir);
  std::vector<fs::path> entries;
  if (!opts.checkpoint.empty()) {
    entries.push_back(opts.checkpoint);
  } else {
    entries = list_bank(opts.bank.empty() ? run / "bank" : opts.bank);
  }
  if (entries.empty()) throw ConfigError("no samples to evaluate");
  const std::size_t K = entries.size();
  const std::size_t S = cfg.num_samples == 0 ? K : cfg.num_samples;
  const auto chosen = opts.checkpoint.empty()
                          ? select_indices(K, {cfg.strategy, S})
                          : std::vector<std::size_t>{0};

  const auto probs = bank_target_probs(problem, entries);
  const std::size_t n = probs.front().size();
  nlohmann::json js;
  js["strategy"] = to_string(cfg.strategy);
  js["num_samples"] = chosen.size();
  js["bank_size"] = K;
  js["items"] = n;
  nlohmann::json singles = nlohmann::json::array();
  double mean_single = 0.0;
  for (std::size_t s : chosen) {
    const double nll = sample_nll(probs[s]) / static_cast<double>(n);
    singles.push_back({{"index", s + 1}, {"nll", nll}});
    mean_single += nll / static_cast<double>(chosen.size());
  }
  const double ens = ensemble_nll(probs, chosen) / static_cast<double>(n);
  js["single_sample_nll"] = singles;
  js["mean_single_nll"] = mean_single;
  js["ensemble_nll"] = ens;
  js["ensemble_perplexity"] = std::exp(ens);
  if constexpr (std::is_same_v<Problem, ClassifyProblem>) {
    // Ensemble error needs full class distributions.
    const auto& test = problem.split(Split::test);
    auto model = problem.make_model();
    std::vector<FlatParams> samples;
    for (std::size_t s : chosen) samples.push_back(load_checkpoint(entries[s]).params);
    std::size_t errors = 0;
    std::ofstream unc(eval_dir / "uncertainty.csv", std::ios::binary | std::ios::trunc);
    unc << "example,label,class,mean,std\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
      auto pred = ensemble_predict(model, samples, std::span<const TokenId>(test[i].tokens));
      const auto st = predictive_stats(pred.per_sample);
      std::size_t arg = 0;
      for (std::size_t c = 0; c < st.mean.size(); ++c) {
        if (st.mean[c] > st.mean[arg]) arg = c;
        unc << i << ',' << test[i].label << ',' << c << ',' << fmt(st.mean[c]) << ','
            << fmt(st.std[c]) << '\n';
      }
      if (arg != test[i].label) ++errors;
    }
    js["ensemble_error"] = static_cast<double>(errors) / static_cast<double>(test.size());
  }
  write_file_atomic(eval_dir / "summary.json", js.dump(2) + "\n");
  os << js.dump(2) << "\n";

  if (opts.sweep) {
    std::string csv = "strategy,num_samples,nll,perplexity\n";
    for (auto kind : {StrategyKind::forward, StrategyKind::backward, StrategyKind::thinned}) {
      for (std::size_t s = 1; s <= K; ++s) {
        const double v = ensemble_nll(probs, select_indices(K, {kind, s})) / static_cast<double>(n);
        csv += std::string(to_string(kind)) + "," + std::to_string(s) + "," + fmt(v) + "," +
               fmt(std::exp(v)) + "\n";
      }
    }
    write_file_atomic(eval_dir / "sweep.csv", csv);
    os << "wrote " << (eval_dir / "sweep.csv").string() << "\n";
  }

  if constexpr (std::is_same_v<Problem, LmProblem>) {
    if (opts.per_token) {
      // Full next-token distributions along the start of the test split for
      // every chosen sample and their average; each row sums to one.
      const auto& ids = problem.data().test.ids;
      const std::size_t len = std::min(cfg.per_token_rows + 1, ids.size());
      std::vector<FlatParams> samples;
      for (std::size_t s : chosen) samples.push_back(load_checkpoint(entries[s]).params);
      auto pred = ensemble_predict(problem.make_model(), samples,
                                   std::span<const TokenId>(ids.data(), len));
      std::string csv = "position,target,source";
      for (std::size_t v = 0; v < problem.vocab().size(); ++v) csv += ",p" + std::to_string(v);
      csv += "\n";
      auto emit = [&](const Tensor2D& p, std::size_t t, const std::string& source) {
        csv += std::to_string(t) + "," + std::to_string(ids[t + 1]) + "," + source;
        for (std::size_t v = 0; v < p.cols(); ++v) csv += "," + fmt(p(t, v));
        csv += "\n";
      };
      for (std::size_t t = 0; t + 1 < len; ++t) {
        for (std::size_t j = 0; j < chosen.size(); ++j) {
          emit(pred.per_sample[j], t, "sample_" + std::to_string(chosen[j] + 1));
        }
        emit(pred.avg, t, "average");
      }
      write_file_atomic(eval_dir / "per_token.csv", csv);
      os << "wrote " << (eval_dir / "per_token.csv").string() << "\n";
    }
  }
  return exit_code::kOk;
}

}  // namespace detail

inline int cmd_eval(const RunConfig& cfg, const EvalOptions& opts = {}) {
  validate(cfg);
  if (cfg.task == Task::classify) {
    auto problem = load_classify_problem(cfg, cfg.out, false);
    check_vocab(cfg.out, problem.vocab());
    return detail::eval_with(cfg, problem, opts);
  }
  LmProblem problem(cfg, LmProblem::load(cfg));
  check_vocab(cfg.out, problem.vocab());
  return detail::eval_with(cfg, problem, opts);
}

/// Samples text from a language-model checkpoint. The prefix is encoded
/// with the saved vocabulary and preceded by START.
inline std::string cmd_generate(const RunConfig& cfg, const fs::path& checkpoint) {
  validate(cfg);
  if (cfg.task == Task::classify) throw ConfigError("generate needs a language-model task");
  const auto tokens = read_vocab_tokens(fs::path(cfg.out) / "vocab.json");
  Vocab vocab;
  for (std::size_t i = Vocab::kReserved; i < tokens.size(); ++i) vocab.add(tokens[i]);
  auto model = LanguageModel::make(cfg.cell, vocab.size(), cfg.embed_size(), cfg.hidden,
                                   cfg.layers);
  unflatten(load_checkpoint(checkpoint).params, model);
  const bool chars = cfg.task == Task::char_lm;
  std::vector<TokenId> prefix{Vocab::kStart};
  for (const auto& t : chars ? split_utf8_chars(cfg.prefix) : split_words(cfg.prefix)) {
    prefix.push_back(vocab.encode(t));
  }
  SeededRng rng(cfg.seed);
  const auto ids = generate(model, prefix, cfg.length, cfg.temperature, rng);
  std::string text;
  for (TokenId id : ids) {
    if (id == Vocab::kEnd) {
      text += chars ? "" : "\n";
    } else if (chars) {
      text += vocab.decode(id);
    } else {
      text += vocab.decode(id) + " ";
    }
  }
  return text;
}

/// One line per bank entry with its stamp and checksum status.
inline nlohmann::json inspect_bank(const fs::path& dir) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : list_bank(dir)) {
    nlohmann::json row{{"entry", p.filename().string()}};
    try {
      const auto ck = load_checkpoint(p);
      row["epoch"] = ck.manifest.epoch;
      row["algorithm"] = ck.manifest.algorithm;
      row["parameters"] = ck.params.size();
      row["crc32"] = ck.manifest.crc32;
      row["ok"] = true;
    } catch (const CheckpointError& e) {
      row["ok"] = false;
      row["error"] = e.what();
    }
    out.push_back(row);
  }
  return out;
}

}  // namespace bayesrnn
