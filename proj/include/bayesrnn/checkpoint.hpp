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

// On-disk checkpoints and sample banks.
//
// A checkpoint is a directory holding
//
//   manifest.json  format_version, algorithm, epoch, rng, tensors[], blob_bytes,
//                  crc32, extra
//   params.bin     every value as a little-endian IEEE-754 binary64, tensors
//                  back to back in manifest order
//
// tensors[i] = {name, rows, cols, byte_offset, byte_length}. crc32 is the
// zlib CRC-32 of params.bin. Doubles that must survive bit-exactly inside
// the manifest (the cached normal of an RNG state) are stored as 16-digit
// hex bit patterns. A sample bank is a directory of checkpoints named
// sample_0001, sample_0002, ... in collection order.

#pragma once

#include <bayesrnn/numerics.hpp>
#include <bayesrnn/params.hpp>
#include <bayesrnn/posterior.hpp>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace bayesrnn {

namespace fs = std::filesystem;

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_length = 0;
};

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  std::string algorithm;
  double epoch = 0.0;
  RngState rng;
  std::vector<TensorRecord> tensors;
  std::uint64_t blob_bytes = 0;
  std::uint32_t crc32 = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline std::string double_to_hex(double v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

inline double hex_to_double(const std::string& s) {
  if (s.size() != 16) throw CheckpointError("bad hex double '" + s + "'");
  return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

inline nlohmann::json rng_to_json(const RngState& r) {
  return {{"s", r.s}, {"has_spare", r.has_spare}, {"spare", double_to_hex(r.spare)}};
}

inline RngState rng_from_json(const nlohmann::json& j) {
  RngState r;
  r.s = j.at("s").get<std::array<std::uint64_t, 4>>();
  r.has_spare = j.at("has_spare").get<bool>();
  r.spare = hex_to_double(j.at("spare").get<std::string>());
  return r;
}

inline nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : m.tensors) {
    tensors.push_back({{"name", t.name},
                       {"rows", t.rows},
                       {"cols", t.cols},
                       {"byte_offset", t.byte_offset},
                       {"byte_length", t.byte_length}});
  }
  return {{"format_version", m.format_version},
          {"algorithm", m.algorithm},
          {"epoch", m.epoch},
          {"rng", rng_to_json(m.rng)},
          {"tensors", tensors},
          {"blob_bytes", m.blob_bytes},
          {"crc32", m.crc32},
          {"extra", m.extra}};
}

inline CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCheckpointFormatVersion) {
      throw CheckpointError("unsupported checkpoint format version " +
                            std::to_string(m.format_version));
    }
    m.algorithm = j.at("algorithm").get<std::string>();
    m.epoch = j.at("epoch").get<double>();
    m.rng = rng_from_json(j.at("rng"));
    for (const auto& t : j.at("tensors")) {
      m.tensors.push_back({t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                           t.at("cols").get<std::size_t>(), t.at("byte_offset").get<std::uint64_t>(),
                           t.at("byte_length").get<std::uint64_t>()});
    }
    m.blob_bytes = j.at("blob_bytes").get<std::uint64_t>();
    m.crc32 = j.at("crc32").get<std::uint32_t>();
    if (j.contains("extra")) m.extra = j.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

/// Index checks that need no blob: sizes consistent, records inside the
/// blob and pairwise non-overlapping.
inline void validate_manifest(const CheckpointManifest& m) {
  std::vector<const TensorRecord*> recs;
  for (const auto& t : m.tensors) {
    if (t.byte_length != static_cast<std::uint64_t>(t.rows) * t.cols * sizeof(double)) {
      throw CheckpointError("tensor " + t.name + ": byte length does not match its shape");
    }
    if (t.byte_offset % sizeof(double) != 0) {
      throw CheckpointError("tensor " + t.name + ": misaligned offset");
    }
    if (t.byte_offset > m.blob_bytes || t.byte_length > m.blob_bytes - t.byte_offset) {
      throw CheckpointError("tensor " + t.name + ": extends past the blob");
    }
    recs.push_back(&t);
  }
  std::sort(recs.begin(), recs.end(),
            [](auto* a, auto* b) { return a->byte_offset < b->byte_offset; });
  for (std::size_t i = 1; i < recs.size(); ++i) {
    if (recs[i - 1]->byte_offset + recs[i - 1]->byte_length > recs[i]->byte_offset) {
      throw CheckpointError("tensors " + recs[i - 1]->name + " and " + recs[i]->name +
                            " overlap");
    }
  }
}

inline std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay clear of the limit.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, n);
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<unsigned char> encode_blob(const std::vector<double>& values) {
  std::vector<unsigned char> out(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int k = 0; k < 8; ++k) out[i * 8 + k] = static_cast<unsigned char>(bits >> (8 * k));
  }
  return out;
}

inline double decode_double(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(p[k]) << (8 * k);
  return std::bit_cast<double>(bits);
}

/// Writes `bytes` to `path` via a sibling temporary and a rename, so readers
/// never observe a half-written file.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Saves `params` under `dir`. The tensor index, blob size and checksum of
/// `meta` are filled in here; everything else is written as given.
inline void save_checkpoint(const fs::path& dir, const FlatParams& params,
                            CheckpointManifest meta) {
  fs::create_directories(dir);
  const auto blob = encode_blob(params.values);
  meta.format_version = kCheckpointFormatVersion;
  meta.tensors.clear();
  for (const auto& e : params.index) {
    meta.tensors.push_back({e.name, e.rows, e.cols, e.offset * 8, e.length() * 8});
  }
  meta.blob_bytes = blob.size();
  meta.crc32 = crc32_of(blob);
  validate_manifest(meta);
  write_file_atomic(dir / "params.bin", std::string(blob.begin(), blob.end()));
  write_file_atomic(dir / "manifest.json", manifest_to_json(meta).dump(2) + "\n");
}

inline CheckpointManifest read_manifest(const fs::path& dir) {
  const auto bytes = read_bytes(dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(dir.string() + "/manifest.json: " + e.what());
  }
  return manifest_from_json(j);
}

struct LoadedCheckpoint {
  FlatParams params;
  CheckpointManifest manifest;
};

/// Verifies size, checksum and index before decoding anything.
inline LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  LoadedCheckpoint out;
  out.manifest = read_manifest(dir);
  validate_manifest(out.manifest);
  const auto blob = read_bytes(dir / "params.bin");
  if (blob.size() != out.manifest.blob_bytes) {
    throw CheckpointError(dir.string() + ": checksum failure (blob is " +
                          std::to_string(blob.size()) + " bytes, manifest says " +
                          std::to_string(out.manifest.blob_bytes) + ")");
  }
  if (crc32_of(blob) != out.manifest.crc32) {
    throw CheckpointError(dir.string() + ": checksum failure (crc32 mismatch)");
  }
  FlatParams p;
  for (const auto& t : out.manifest.tensors) {
    p.index.push_back({t.name, p.values.size(), t.rows, t.cols});
    for (std::uint64_t b = t.byte_offset; b < t.byte_offset + t.byte_length; b += 8) {
      p.values.push_back(decode_double(blob.data() + b));
    }
  }
  out.params = std::move(p);
  return out;
}

// ---------------------------------------------------------------------------
// Sample banks.

inline std::string bank_entry_name(std::size_t one_based) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu", one_based);
  return buf;
}

/// Sample directories of a bank in collection order.
inline std::vector<fs::path> list_bank(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind("sample_", 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].filename().string() != bank_entry_name(i + 1)) {
      throw CheckpointError(dir.string() + ": bank entries are not numbered contiguously");
    }
  }
  return out;
}

/// Streams snapshots to disk as they are collected, keeping only stamps in
/// memory.
class BankWriter {
 public:
  BankWriter(fs::path dir, CollectionPolicy policy) : dir_(std::move(dir)), policy_(policy) {
    policy_.validate();
  }

  /// Reattaches to the first `count` entries of an existing bank, deleting
  /// any later ones.
  void restore(std::size_t count, std::vector<double> stamps) {
    const auto entries = list_bank(dir_);
    if (entries.size() < count || stamps.size() != count) {
      throw CheckpointError(dir_.string() + ": bank is shorter than the resume state");
    }
    for (std::size_t i = count; i < entries.size(); ++i) fs::remove_all(entries[i]);
    stamps_ = std::move(stamps);
  }

  bool maybe_collect(double epoch_fraction, const FlatParams& theta, CheckpointManifest meta) {
    const std::optional<double> last =
        stamps_.empty() ? std::nullopt : std::optional<double>(stamps_.back());
    if (!collection_due(policy_, last, epoch_fraction)) return false;
    meta.epoch = epoch_fraction;
    save_checkpoint(dir_ / bank_entry_name(stamps_.size() + 1), theta, std::move(meta));
    stamps_.push_back(epoch_fraction);
    return true;
  }

  std::size_t size() const { return stamps_.size(); }
  const std::vector<double>& stamps() const { return stamps_; }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  CollectionPolicy policy_;
  std::vector<double> stamps_;
};

inline SampleBank load_bank(const fs::path& dir) {
  SampleBank bank;
  for (const auto& p : list_bank(dir)) {
    auto ck = load_checkpoint(p);
    if (!bank.empty() && !bank.samples.front().same_layout(ck.params)) {
      throw CheckpointError(p.string() + ": layout differs from the rest of the bank");
    }
    bank.samples.push_back(std::move(ck.params));
    bank.stamps.push_back(ck.manifest.epoch);
  }
  return bank;
}

}  // namespace bayesrnn
