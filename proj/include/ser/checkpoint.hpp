#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ser/config.hpp"

namespace ser {

inline constexpr char kCheckpointMagic[4] = {'S', 'E', 'C', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlign = 64;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  RunConfig config;
  int stage = -1;                               // last completed training stage
  std::map<std::string, std::uint64_t> seeds;   // per stage, e.g. "stage1" -> seed
  std::vector<std::string> frozen;              // groups frozen at save time
  std::map<std::string, std::uint64_t> checksums;
};

template <typename T>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  ModelBundle<T> model;
};

/// Groups whose parameters a model at `stage` must no longer change.
inline std::vector<std::string> frozen_groups_after(int stage) {
  if (stage < 0) return {};
  if (stage == 0) return {"vision"};
  if (stage == 1) return {"vision", "recon"};
  return {"vision", "recon", "mlp"};
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}
inline std::size_t align_up(std::size_t n) { return (n + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign; }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw CheckpointError("checkpoint: malformed checksum '" + s + "'");
  return std::stoull(s, nullptr, 16);
}

}  // namespace detail

/// Writes the model atomically (temporary file, then rename).
template <typename T>
void save_checkpoint(const ModelBundle<T>& m, CheckpointMeta meta, const std::string& path) {
  meta.checksums = all_group_checksums(m);
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::string payload;
  for (const auto& g : parameter_groups()) {
    for (const auto& p : m.group(g)) {
      payload.resize(detail::align_up(payload.size()), '\0');
      const std::size_t offset = payload.size();
      for (const T v : p.tensor.data()) detail::put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      nlohmann::ordered_json e;
      e["name"] = p.name;
      e["group"] = g;
      e["dtype"] = "f32";
      e["shape"] = p.tensor.shape();
      e["offset"] = offset;
      e["length"] = payload.size() - offset;
      index.push_back(std::move(e));
    }
  }
  nlohmann::ordered_json j;
  j["config"] = config_to_json(meta.config);
  j["stage"] = meta.stage;
  j["seeds"] = meta.seeds;
  j["frozen"] = meta.frozen;
  nlohmann::ordered_json sums;
  for (const auto& [g, h] : meta.checksums) sums[g] = detail::hex64(h);
  j["checksums"] = sums;
  j["payload_bytes"] = payload.size();
  j["tensors"] = index;
  const std::string meta_text = j.dump();

  std::string head(kCheckpointMagic, 4);
  detail::put_u32(head, kCheckpointVersion);
  detail::put_u64(head, meta_text.size());
  head += meta_text;
  head.resize(detail::align_up(head.size()), '\0');

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write '" + tmp + "'");
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointMeta meta_from_json(const nlohmann::ordered_json& j) {
  CheckpointMeta meta;
  meta.config = config_from_json(j.at("config"));
  meta.stage = j.at("stage").get<int>();
  meta.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  meta.frozen = j.at("frozen").get<std::vector<std::string>>();
  for (const auto& [g, h] : j.at("checksums").items()) meta.checksums[g] = detail::parse_hex64(h.get<std::string>());
  return meta;
}

/// Reads and validates a checkpoint; any inconsistency throws CheckpointError.
template <typename T = float>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in '" + path + "'");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t meta_len = detail::get_le(bytes, 8, 8);
  if (meta_len > bytes.size() - 16) throw CheckpointError("checkpoint: truncated metadata");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(bytes.substr(16, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable metadata: ") + e.what());
  }

  LoadedCheckpoint<T> out;
  std::size_t payload_bytes = 0;
  try {
    out.meta = meta_from_json(j);
    payload_bytes = j.at("payload_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const std::size_t start = detail::align_up(16 + meta_len);
  if (bytes.size() < start || bytes.size() - start < payload_bytes) {
    throw CheckpointError("checkpoint: truncated payload (" + std::to_string(bytes.size() < start ? 0 : bytes.size() - start) +
                          " of " + std::to_string(payload_bytes) + " bytes)");
  }

  out.model = make_model<T>(out.meta.config.model, 0);
  std::map<std::string, NamedTensor<T>> by_name;
  for (auto& p : out.model.all_parameters()) by_name.emplace(p.name, p);
  std::size_t seen = 0;
  for (const auto& e : j.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: unexpected tensor '" + name + "'");
    if (e.at("dtype").get<std::string>() != "f32") throw CheckpointError("checkpoint: tensor '" + name + "' is not f32");
    auto tensor = it->second.tensor;
    if (e.at("shape").get<Shape>() != tensor.shape()) throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    const auto offset = e.at("offset").get<std::size_t>();
    const auto length = e.at("length").get<std::size_t>();
    if (offset > payload_bytes || length > payload_bytes - offset)
      throw CheckpointError("checkpoint: tensor '" + name + "' extent out of bounds");
    if (length != tensor.numel() * 4) throw CheckpointError("checkpoint: length mismatch for '" + name + "'");
    auto values = tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(bytes, start + offset + 4 * i, 4));
      values[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    ++seen;
  }
  if (seen != by_name.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(by_name.size() - seen) + " parameter tensors missing");
  }
  const auto actual = all_group_checksums(out.model);
  for (const auto& [g, expected] : out.meta.checksums) {
    const auto it = actual.find(g);
    if (it == actual.end()) throw CheckpointError("checkpoint: unknown group '" + g + "' in checksums");
    if (it->second != expected) {
      const bool frozen = std::find(out.meta.frozen.begin(), out.meta.frozen.end(), g) != out.meta.frozen.end();
      throw CheckpointError("checkpoint: checksum mismatch in " + std::string(frozen ? "frozen " : "") + "group '" +
                            g + "' (stored " + detail::hex64(expected) + ", computed " + detail::hex64(it->second) +
                            ")");
    }
  }
  return out;
}

}  // namespace ser
