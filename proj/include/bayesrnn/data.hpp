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

// Corpora, vocabularies and minibatch plans.
//
// Language-model batches are described by position plans. A position p of
// an id stream pairs the input ids[p] with the target ids[p + 1], so a stream
// of n ids has n - 1 positions. Plans only do index arithmetic over
// positions; materialize_* turns a plan entry into TokenGrids.

#pragma once

#include <bayesrnn/models.hpp>
#include <bayesrnn/numerics.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace bayesrnn {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Vocabulary.

/// Dense token ids. Ids 0..2 are reserved for UNK, START and END and are not
/// reachable through encode(); every other id maps to exactly one token.
class Vocab {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr std::size_t kReserved = 3;

  Vocab() : id_to_token_{"<UNK>", "<START>", "<END>"} {}

  /// Appends `token` if absent; returns its id either way.
  TokenId add(const std::string& token) {
    if (auto it = token_to_id_.find(token); it != token_to_id_.end()) return it->second;
    const auto id = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
  }

  TokenId encode(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& decode(TokenId id) const {
    if (id >= id_to_token_.size()) {
      throw std::out_of_range("Vocab::decode: id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[id];
  }

  bool contains(const std::string& token) const { return token_to_id_.contains(token); }
  std::size_t size() const { return id_to_token_.size(); }
  std::size_t num_types() const { return id_to_token_.size() - kReserved; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  bool operator==(const Vocab& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

/// Keeps the most frequent tokens (ties broken lexicographically) among
/// those seen at least min_count times. max_size bounds the number of
/// non-reserved entries; 0 means unbounded.
inline Vocab build_vocab(std::span<const std::string> tokens, std::size_t max_size = 0,
                         std::size_t min_count = 1) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, n] : ranked) {
    if (n < min_count) break;
    if (max_size != 0 && v.num_types() >= max_size) break;
    v.add(tok);
  }
  return v;
}

inline std::vector<TokenId> encode(const Vocab& v, std::span<const std::string> tokens) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(v.encode(t));
  return ids;
}

inline std::string decode_chars(const Vocab& v, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) out += v.decode(id);
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizers.

/// One token per Unicode scalar value. Throws on malformed UTF-8.
inline std::vector<std::string> split_utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      throw std::invalid_argument("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > text.size()) {
      throw std::invalid_argument("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xC0) != 0x80) {
        throw std::invalid_argument("invalid UTF-8 continuation at offset " +
                                    std::to_string(i + k));
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t kMinForLength[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMinForLength[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw std::invalid_argument("invalid UTF-8 scalar at offset " + std::to_string(i));
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

/// Whitespace-separated tokens; the input is assumed pre-tokenized.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(std::move(w));
  return out;
}

enum class TokenLevel { character, word };

/// Token stream for language modelling. Character level keeps newlines as
/// tokens; word level appends an END marker after each line. The stream is
/// framed as START ... END.
inline std::vector<std::string> lm_tokens(std::string_view text, TokenLevel level) {
  if (level == TokenLevel::character) return split_utf8_chars(text);
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    auto words = split_words(text.substr(start, nl - start));
    if (!words.empty() || nl < text.size()) {
      out.insert(out.end(), std::make_move_iterator(words.begin()),
                 std::make_move_iterator(words.end()));
      if (!words.empty()) out.emplace_back();  // placeholder for END
    }
    start = nl + 1;
  }
  return out;
}

/// Encodes an lm_tokens() stream, mapping the empty placeholder to END.
inline std::vector<TokenId> encode_lm_stream(const Vocab& v, std::span<const std::string> tokens) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(Vocab::kStart);
  for (const auto& t : tokens) ids.push_back(t.empty() ? Vocab::kEnd : v.encode(t));
  if (ids.back() != Vocab::kEnd) ids.push_back(Vocab::kEnd);
  return ids;
}

/// Vocabulary over an lm_tokens() stream, ignoring END placeholders.
inline Vocab build_lm_vocab(std::span<const std::string> tokens, std::size_t max_size = 0,
                            std::size_t min_count = 1) {
  std::vector<std::string> real;
  real.reserve(tokens.size());
  for (const auto& t : tokens)
    if (!t.empty()) real.push_back(t);
  return build_vocab(real, max_size, min_count);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Corpora.

enum class Split { train, valid, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct LmCorpus {
  Split split = Split::train;
  std::vector<TokenId> ids;

  std::size_t num_positions() const { return ids.empty() ? 0 : ids.size() - 1; }
};

struct LmData {
  Vocab vocab;
  LmCorpus train, valid, test;
};

/// Splits one token stream by fractions of its length (train, valid, test)
/// and frames each part separately. The vocabulary comes from the training
/// part only.
inline LmData make_lm_data(std::span<const std::string> tokens, double train_fraction,
                           double valid_fraction, std::size_t max_vocab = 0) {
  if (!(train_fraction > 0.0) || valid_fraction < 0.0 || train_fraction + valid_fraction > 1.0) {
    throw std::invalid_argument("make_lm_data: bad split fractions");
  }
  const std::size_t n = tokens.size();
  const auto n_train = static_cast<std::size_t>(static_cast<double>(n) * train_fraction);
  const auto n_valid = static_cast<std::size_t>(static_cast<double>(n) * valid_fraction);
  LmData d;
  auto part = [&](std::size_t b, std::size_t e) { return tokens.subspan(b, e - b); };
  d.vocab = build_lm_vocab(part(0, n_train), max_vocab);
  d.train = {Split::train, encode_lm_stream(d.vocab, part(0, n_train))};
  d.valid = {Split::valid, encode_lm_stream(d.vocab, part(n_train, n_train + n_valid))};
  d.test = {Split::test, encode_lm_stream(d.vocab, part(n_train + n_valid, n))};
  return d;
}

/// One file per split; vocabulary from the training file.
inline LmData load_lm_files(const std::string& train, const std::string& valid,
                            const std::string& test, TokenLevel level,
                            std::size_t max_vocab = 0) {
  const auto tr = lm_tokens(read_file(train), level);
  LmData d;
  d.vocab = build_lm_vocab(tr, max_vocab);
  d.train = {Split::train, encode_lm_stream(d.vocab, tr)};
  d.valid = {Split::valid, encode_lm_stream(d.vocab, lm_tokens(read_file(valid), level))};
  d.test = {Split::test, encode_lm_stream(d.vocab, lm_tokens(read_file(test), level))};
  return d;
}

struct LabeledText {
  std::size_t label = 0;
  std::vector<std::string> words;
};

struct ClassificationData {
  std::vector<std::string> labels;  // label index -> name, sorted
  std::vector<LabeledText> examples;

  std::size_t num_classes() const { return labels.size(); }
};

/// Parses "label<TAB>sentence" lines. Blank lines are skipped; a line without
/// a tab, with an empty label or with an empty sentence is an error.
inline ClassificationData parse_classification_tsv(std::string_view text,
                                                   const std::string& name = "<memory>") {
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw ParseError(name, line_no, "missing tab separator");
    std::string label(line.substr(0, tab));
    if (label.empty()) throw ParseError(name, line_no, "empty label");
    auto words = split_words(line.substr(tab + 1));
    if (words.empty()) throw ParseError(name, line_no, "empty sentence");
    rows.emplace_back(std::move(label), std::move(words));
  }
  ClassificationData d;
  std::map<std::string, std::size_t> index;
  for (const auto& r : rows) index.emplace(r.first, 0);
  for (auto& [label, id] : index) {
    id = d.labels.size();
    d.labels.push_back(label);
  }
  for (auto& r : rows) d.examples.push_back({index.at(r.first), std::move(r.second)});
  return d;
}

inline ClassificationData load_classification_tsv(const std::string& path) {
  return parse_classification_tsv(read_file(path), path);
}

struct Example {
  std::size_t label = 0;
  std::vector<TokenId> tokens;  // START w1 .. wn, no END
};

inline std::vector<Example> encode_examples(const ClassificationData& d, const Vocab& v) {
  std::vector<Example> out;
  out.reserve(d.examples.size());
  for (const auto& e : d.examples) {
    Example x{e.label, {Vocab::kStart}};
    for (const auto& w : e.words) x.tokens.push_back(v.encode(w));
    out.push_back(std::move(x));
  }
  return out;
}

/// Fold of each example: a seeded permutation dealt round-robin, so fold
/// sizes differ by at most one.
inline std::vector<std::size_t> kfold_assignments(std::size_t n, std::size_t k,
                                                  std::uint64_t seed) {
  if (k == 0 || k > n) throw std::invalid_argument("kfold_assignments: need 1 <= k <= n");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng rng(seed);
  shuffle(order, rng);
  std::vector<std::size_t> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i % k;
  return fold;
}

/// Sidecar format: one fold index per line, in example order.
inline void write_fold_sidecar(const std::string& path, std::span<const std::size_t> folds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (auto f : folds) out << f << '\n';
}

inline std::vector<std::size_t> read_fold_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::size_t> folds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t pos = 0;
    try {
      folds.push_back(std::stoul(line, &pos));
    } catch (const std::exception&) {
      throw ParseError(path, line_no, "expected a fold index");
    }
    if (pos != line.size()) throw ParseError(path, line_no, "trailing characters");
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Minibatch plans.

enum class BatchMode { successive, random };

inline BatchMode parse_batch_mode(std::string_view s) {
  if (s == "successive") return BatchMode::successive;
  if (s == "random") return BatchMode::random;
  throw std::invalid_argument("unknown batch mode '" + std::string(s) + "'");
}

inline std::string_view to_string(BatchMode m) {
  return m == BatchMode::successive ? "successive" : "random";
}

struct BatchPlan {
  BatchMode mode = BatchMode::successive;
  std::size_t minibatch_size = 1;
  std::size_t unroll_length = 100;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (minibatch_size == 0) throw std::invalid_argument("BatchPlan: minibatch_size must be >= 1");
    if (unroll_length == 0) throw std::invalid_argument("BatchPlan: unroll_length must be >= 1");
  }
};

/// Batch k of a successive plan: column t of stream b is position
/// b * stream_length + k * unroll + t. State carries across batches.
struct SuccessivePlan {
  std::size_t batch = 0;
  std::size_t unroll = 0;
  std::size_t stream_length = 0;  // positions per stream, a multiple of unroll
  std::size_t num_batches = 0;
  std::size_t dropped = 0;        // trailing positions not covered

  std::size_t position(std::size_t k, std::size_t t, std::size_t b) const {
    return b * stream_length + k * unroll + t;
  }
};

inline SuccessivePlan plan_successive(std::size_t num_positions, const BatchPlan& plan) {
  plan.validate();
  if (plan.mode != BatchMode::successive) {
    throw std::invalid_argument("plan_successive: plan mode is not successive");
  }
  SuccessivePlan p;
  p.batch = plan.minibatch_size;
  p.unroll = plan.unroll_length;
  p.num_batches = num_positions / (p.batch * p.unroll);
  p.stream_length = p.num_batches * p.unroll;
  p.dropped = num_positions - p.batch * p.stream_length;
  if (p.num_batches == 0) throw std::invalid_argument("plan_successive: corpus too short");
  return p;
}

/// Windows [w * unroll, (w + 1) * unroll) visited in a fresh permutation
/// every epoch and grouped into batches; the last batch may be smaller.
/// Every batch starts from a zero state.
struct RandomPlan {
  std::size_t batch = 0;
  std::size_t unroll = 0;
  std::size_t num_windows = 0;
  std::size_t dropped = 0;

  std::size_t batches_per_epoch() const { return (num_windows + batch - 1) / batch; }

  /// Window ids of every batch in one epoch; consumes the RNG once per
  /// shuffle.
  std::vector<std::vector<std::size_t>> epoch(SeededRng& rng) const {
    std::vector<std::size_t> order(num_windows);
    for (std::size_t i = 0; i < num_windows; ++i) order[i] = i;
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < num_windows; i += batch) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch, num_windows)));
    }
    return out;
  }
};

inline RandomPlan plan_random(std::size_t num_positions, const BatchPlan& plan) {
  plan.validate();
  if (plan.mode != BatchMode::random) {
    throw std::invalid_argument("plan_random: plan mode is not random");
  }
  RandomPlan p;
  p.batch = plan.minibatch_size;
  p.unroll = plan.unroll_length;
  p.num_windows = num_positions / p.unroll;
  p.dropped = num_positions - p.num_windows * p.unroll;
  if (p.num_windows == 0) throw std::invalid_argument("plan_random: corpus too short");
  return p;
}

struct LmMinibatch {
  TokenGrid inputs;
  TokenGrid targets;
  bool carry_state = false;
};

inline LmMinibatch materialize_successive(std::span<const TokenId> ids, const SuccessivePlan& p,
                                          std::size_t k) {
  if (k >= p.num_batches) throw std::out_of_range("materialize_successive: batch index");
  LmMinibatch mb{{p.unroll, p.batch, {}}, {p.unroll, p.batch, {}}, true};
  mb.inputs.ids.resize(p.unroll * p.batch);
  mb.targets.ids.resize(p.unroll * p.batch);
  for (std::size_t t = 0; t < p.unroll; ++t) {
    for (std::size_t b = 0; b < p.batch; ++b) {
      const std::size_t pos = p.position(k, t, b);
      mb.inputs.ids[t * p.batch + b] = ids[pos];
      mb.targets.ids[t * p.batch + b] = ids[pos + 1];
    }
  }
  return mb;
}

inline LmMinibatch materialize_random(std::span<const TokenId> ids, const RandomPlan& p,
                                      std::span<const std::size_t> windows) {
  const std::size_t B = windows.size();
  LmMinibatch mb{{p.unroll, B, {}}, {p.unroll, B, {}}, false};
  mb.inputs.ids.resize(p.unroll * B);
  mb.targets.ids.resize(p.unroll * B);
  for (std::size_t b = 0; b < B; ++b) {
    if (windows[b] >= p.num_windows) throw std::out_of_range("materialize_random: window id");
    for (std::size_t t = 0; t < p.unroll; ++t) {
      const std::size_t pos = windows[b] * p.unroll + t;
      mb.inputs.ids[t * B + b] = ids[pos];
      mb.targets.ids[t * B + b] = ids[pos + 1];
    }
  }
  return mb;
}

/// Evaluation layout: `streams` parallel streams of floor(P / streams)
/// positions each, read in windows of `unroll` with a shorter final window
/// and state carried throughout. At most streams - 1 positions are skipped.
struct EvalPlan {
  std::size_t streams = 0;
  std::size_t unroll = 0;
  std::size_t stream_length = 0;

  std::size_t num_windows() const { return (stream_length + unroll - 1) / unroll; }
  std::size_t window_steps(std::size_t w) const {
    return std::min(unroll, stream_length - w * unroll);
  }
  std::size_t num_positions() const { return streams * stream_length; }
};

inline EvalPlan plan_eval(std::size_t num_positions, std::size_t streams, std::size_t unroll) {
  if (streams == 0 || unroll == 0) throw std::invalid_argument("plan_eval: zero size");
  if (num_positions == 0) throw std::invalid_argument("plan_eval: empty corpus");
  streams = std::min(streams, num_positions);
  return {streams, unroll, num_positions / streams};
}

inline LmMinibatch materialize_eval(std::span<const TokenId> ids, const EvalPlan& p,
                                    std::size_t w) {
  const std::size_t T = p.window_steps(w);
  LmMinibatch mb{{T, p.streams, {}}, {T, p.streams, {}}, true};
  mb.inputs.ids.resize(T * p.streams);
  mb.targets.ids.resize(T * p.streams);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < p.streams; ++b) {
      const std::size_t pos = b * p.stream_length + w * p.unroll + t;
      mb.inputs.ids[t * p.streams + b] = ids[pos];
      mb.targets.ids[t * p.streams + b] = ids[pos + 1];
    }
  }
  return mb;
}

}  // namespace bayesrnn
