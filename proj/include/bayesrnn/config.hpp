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

// Run configuration: a flat key=value file, one key per line, '#' starts a
// comment. Every key can also be given as --key-with-dashes on the command
// line, which takes precedence. Unknown or repeated keys are errors.

#pragma once

#include <bayesrnn/cells.hpp>
#include <bayesrnn/data.hpp>
#include <bayesrnn/models.hpp>
#include <bayesrnn/posterior.hpp>
#include <bayesrnn/samplers.hpp>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bayesrnn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { char_lm, word_lm, classify };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::char_lm: return "char-lm";
    case Task::word_lm: return "word-lm";
    case Task::classify: return "classify";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "char-lm") return Task::char_lm;
  if (s == "word-lm") return Task::word_lm;
  if (s == "classify") return Task::classify;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

struct RunConfig {
  Task task = Task::char_lm;
  std::string out;
  std::uint64_t seed = 1;

  // Model.
  CellType cell = CellType::lstm;
  std::size_t layers = 2;
  std::size_t hidden = 128;
  std::size_t embed = 0;  // 0: same as hidden
  bool bidirectional = false;
  double init_scale = 0.1;

  // Update rule.
  Algorithm algorithm = Algorithm::psgld;
  double step_size = 1e-3;
  double decay_offset = 1.0;
  double decay_power = 0.0;
  double beta1 = 0.99;
  double lambda = 1e-8;
  double prior_variance = 1.0;
  double clip_norm = 0.0;
  bool prewarm = true;
  bool inject_noise = true;

  // Regularization.
  DropoutMode dropout = DropoutMode::off;
  double dropout_keep = 0.5;
  WeightNoise dropconnect_noise = WeightNoise::binary;

  // Schedule.
  std::size_t epochs = 20;
  double burn_in = 4.0;
  double thinning = 0.5;
  std::size_t checks_per_epoch = 2;
  bool collect = true;
  std::size_t patience = 3;

  // Data.
  std::string data;
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
  std::size_t max_vocab = 0;
  BatchMode batch_mode = BatchMode::successive;
  std::size_t batch_size = 100;
  std::size_t unroll = 100;
  std::size_t eval_streams = 100;
  std::size_t folds = 10;
  std::size_t fold = 0;

  // Evaluation and generation.
  StrategyKind strategy = StrategyKind::forward;
  std::size_t num_samples = 0;  // 0: whole bank
  std::size_t per_token_rows = 200;
  std::string prefix = "\n";
  std::size_t length = 200;
  double temperature = 1.0;

  std::size_t embed_size() const { return embed == 0 ? hidden : embed; }

  HyperParams hyper(std::size_t dataset_size) const {
    HyperParams hp;
    hp.step_size = step_size;
    hp.decay_offset = decay_offset;
    hp.decay_power = decay_power;
    hp.minibatch_size = std::min(batch_size, dataset_size);
    hp.dataset_size = dataset_size;
    hp.beta1 = beta1;
    hp.lambda = lambda;
    hp.prior_variance = prior_variance;
    hp.dropout_keep = dropout == DropoutMode::off ? 1.0 : dropout_keep;
    hp.burn_in_epochs = burn_in;
    hp.thinning_interval_epochs = thinning;
    hp.inject_noise = inject_noise;
    hp.prewarm_preconditioner = prewarm;
    return hp;
  }

  CollectionPolicy collection() const { return {burn_in, thinning}; }

  DropoutSpec dropout_spec() const {
    return {dropout, dropout_keep, dropconnect_noise == WeightNoise::gaussian};
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Undoes the escapes \n, \t and \\ so prefixes can hold control characters.
inline std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char c = s[++i];
      out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else if (c == '\\') out += "\\\\";
    else out += c;
  }
  return out;
}

struct KeyHandler {
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class E, class Parse, class Show>
KeyHandler enum_key(std::string help, E RunConfig::*field, Parse parse, Show show) {
  return {std::move(help),
          [=](RunConfig& c, const std::string& v) {
            try {
              c.*field = parse(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(e.what());
            }
          },
          [=](const RunConfig& c) { return std::string(show(c.*field)); }};
}

template <class T>
KeyHandler number_key(const std::string& name, T RunConfig::*field) {
  KeyHandler h;
  h.help = name;
  h.set = [name, field](RunConfig& c, const std::string& v) {
    c.*field = parse_number<T>(name, v);
  };
  h.get = [field](const RunConfig& c) {
    if constexpr (std::is_floating_point_v<T>) return format_double(c.*field);
    else return std::to_string(c.*field);
  };
  return h;
}

inline KeyHandler bool_key(const std::string& name, bool RunConfig::*field) {
  KeyHandler h;
  h.help = name;
  h.set = [name, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(name, v); };
  h.get = [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); };
  return h;
}

inline KeyHandler string_key(const std::string& name, std::string RunConfig::*field) {
  KeyHandler h;
  h.help = name;
  h.set = [field](RunConfig& c, const std::string& v) { c.*field = unescape(v); };
  h.get = [field](const RunConfig& c) { return escape(c.*field); };
  return h;
}

}  // namespace detail

/// Every accepted key, in a fixed order used when writing configs back out.
inline const std::map<std::string, detail::KeyHandler>& config_keys() {
  using namespace detail;
  auto weight_noise_name = [](WeightNoise w) {
    return w == WeightNoise::binary ? "binary" : "gaussian";
  };
  auto parse_weight_noise = [](const std::string& s) {
    if (s == "binary") return WeightNoise::binary;
    if (s == "gaussian") return WeightNoise::gaussian;
    throw std::invalid_argument("unknown dropconnect noise '" + s + "'");
  };
  static const std::map<std::string, KeyHandler> keys = {
      {"task", enum_key("char-lm | word-lm | classify", &RunConfig::task,
                        [](const std::string& s) { return parse_task(s); },
                        [](Task t) { return to_string(t); })},
      {"out", string_key("output directory", &RunConfig::out)},
      {"seed", number_key("seed", &RunConfig::seed)},
      {"cell", enum_key("vanilla | lstm | gru", &RunConfig::cell,
                        [](const std::string& s) { return parse_cell_type(s); },
                        [](CellType t) { return to_string(t); })},
      {"layers", number_key("layers", &RunConfig::layers)},
      {"hidden", number_key("hidden", &RunConfig::hidden)},
      {"embed", number_key("embed", &RunConfig::embed)},
      {"bidirectional", bool_key("bidirectional", &RunConfig::bidirectional)},
      {"init_scale", number_key("init_scale", &RunConfig::init_scale)},
      {"algorithm", enum_key("sgd | rmsprop | sgld | psgld", &RunConfig::algorithm,
                             [](const std::string& s) { return parse_algorithm(s); },
                             [](Algorithm a) { return to_string(a); })},
      {"step_size", number_key("step_size", &RunConfig::step_size)},
      {"decay_offset", number_key("decay_offset", &RunConfig::decay_offset)},
      {"decay_power", number_key("decay_power", &RunConfig::decay_power)},
      {"beta1", number_key("beta1", &RunConfig::beta1)},
      {"lambda", number_key("lambda", &RunConfig::lambda)},
      {"prior_variance", number_key("prior_variance", &RunConfig::prior_variance)},
      {"clip_norm", number_key("clip_norm", &RunConfig::clip_norm)},
      {"prewarm", bool_key("prewarm", &RunConfig::prewarm)},
      {"inject_noise", bool_key("inject_noise", &RunConfig::inject_noise)},
      {"dropout", enum_key("off | naive | dropconnect", &RunConfig::dropout,
                           [](const std::string& s) { return parse_dropout_mode(s); },
                           [](DropoutMode m) { return to_string(m); })},
      {"dropout_keep", number_key("dropout_keep", &RunConfig::dropout_keep)},
      {"dropconnect_noise",
       enum_key("binary | gaussian", &RunConfig::dropconnect_noise, parse_weight_noise,
                weight_noise_name)},
      {"epochs", number_key("epochs", &RunConfig::epochs)},
      {"burn_in", number_key("burn_in", &RunConfig::burn_in)},
      {"thinning", number_key("thinning", &RunConfig::thinning)},
      {"checks_per_epoch", number_key("checks_per_epoch", &RunConfig::checks_per_epoch)},
      {"collect", bool_key("collect", &RunConfig::collect)},
      {"patience", number_key("patience", &RunConfig::patience)},
      {"data", string_key("data", &RunConfig::data)},
      {"train_path", string_key("train_path", &RunConfig::train_path)},
      {"valid_path", string_key("valid_path", &RunConfig::valid_path)},
      {"test_path", string_key("test_path", &RunConfig::test_path)},
      {"train_fraction", number_key("train_fraction", &RunConfig::train_fraction)},
      {"valid_fraction", number_key("valid_fraction", &RunConfig::valid_fraction)},
      {"max_vocab", number_key("max_vocab", &RunConfig::max_vocab)},
      {"batch_mode", enum_key("successive | random", &RunConfig::batch_mode,
                              [](const std::string& s) { return parse_batch_mode(s); },
                              [](BatchMode m) { return to_string(m); })},
      {"batch_size", number_key("batch_size", &RunConfig::batch_size)},
      {"unroll", number_key("unroll", &RunConfig::unroll)},
      {"eval_streams", number_key("eval_streams", &RunConfig::eval_streams)},
      {"folds", number_key("folds", &RunConfig::folds)},
      {"fold", number_key("fold", &RunConfig::fold)},
      {"strategy", enum_key("forward | backward | thinned", &RunConfig::strategy,
                            [](const std::string& s) { return parse_strategy(s); },
                            [](StrategyKind k) { return to_string(k); })},
      {"num_samples", number_key("num_samples", &RunConfig::num_samples)},
      {"per_token_rows", number_key("per_token_rows", &RunConfig::per_token_rows)},
      {"prefix", string_key("prefix", &RunConfig::prefix)},
      {"length", number_key("length", &RunConfig::length)},
      {"temperature", number_key("temperature", &RunConfig::temperature)},
  };
  return keys;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& keys = config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(c, value);
}

/// key=value pairs of a config text, in file order.
inline std::vector<std::pair<std::string, std::string>> parse_config_pairs(
    std::string_view text, const std::string& name = "<config>") {
  std::vector<std::pair<std::string, std::string>> out;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line = detail::trim(text.substr(start, nl - start));
    start = nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(name + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (const auto hash = value.find(" #"); hash != std::string::npos) {
      value = detail::trim(std::string_view(value).substr(0, hash));
    }
    if (!config_keys().contains(key)) {
      throw ConfigError(name + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh) {
      throw ConfigError(name + ":" + std::to_string(line_no) + ": key '" + key +
                        "' already set on line " + std::to_string(it->second));
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline void apply_config_text(RunConfig& c, std::string_view text,
                              const std::string& name = "<config>") {
  for (const auto& [k, v] : parse_config_pairs(text, name)) {
    try {
      set_config_value(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }
}

/// Canonical text form; parsing it back yields the same config.
inline std::string config_to_text(const RunConfig& c) {
  std::string out;
  for (const auto& [k, h] : config_keys()) out += k + " = " + h.get(c) + "\n";
  return out;
}

/// Flag spelling of a key: num_samples -> num-samples.
inline std::string flag_name(std::string key) {
  for (char& ch : key)
    if (ch == '_') ch = '-';
  return key;
}

/// Consistency checks run before any training step.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.out.empty()) fail("out: an output directory is required");
  if (c.layers == 0 || c.hidden == 0) fail("layers and hidden must be positive");
  if (!(c.init_scale > 0.0)) fail("init_scale must be positive");
  if (c.task != Task::classify && c.bidirectional) {
    fail("bidirectional language models would see the targets; use it with task=classify");
  }
  if (c.epochs == 0) fail("epochs must be positive");
  if (c.checks_per_epoch == 0) fail("checks_per_epoch must be positive");
  if (c.batch_size == 0 || c.unroll == 0 || c.eval_streams == 0) {
    fail("batch_size, unroll and eval_streams must be positive");
  }
  if (c.dropout == DropoutMode::dropconnect && c.dropconnect_noise == WeightNoise::gaussian &&
      !(c.dropout_keep < 1.0)) {
    fail("gaussian dropconnect needs dropout_keep < 1");
  }
  if (!(c.temperature >= 0.0)) fail("temperature must be >= 0");
  if (c.task == Task::classify) {
    if (c.data.empty()) fail("classify needs data=<tsv file>");
    if (c.folds < 3) fail("classify needs folds >= 3 (test, validation and training folds)");
    if (c.fold >= c.folds) fail("fold must be < folds");
  } else if (c.data.empty() &&
             (c.train_path.empty() || c.valid_path.empty() || c.test_path.empty())) {
    fail("language modelling needs data=<file> or all of train_path/valid_path/test_path");
  }
  try {
    c.hyper(std::max<std::size_t>(c.batch_size, 1)).validate();
    c.collection().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace bayesrnn
