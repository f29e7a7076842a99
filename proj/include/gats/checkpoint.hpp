#pragma once

// Single-file binary checkpoint: a JSON header describing the topology
// (tensor names, shapes, dtypes), a configuration echo, RNG state and step
// count, followed by a raw little-endian payload. Writes are atomic
// (write-temp-then-rename) and loading rejects topology mismatches with a
// diff of expected vs found tensor names.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gats/optim.hpp"
#include "gats/tensor.hpp"

namespace gats {

inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'T', 'S',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t rng_state = 0;
  nlohmann::json config;  // run/GATS configuration echo, free-form
};

namespace detail {

// The library computes in f64 throughout; f32 is a storage option only.
inline void write_payload(std::ostream& out, const Tensor& t, bool f32) {
  if (f32) {
    for (double v : t.data()) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int i = 0; i < 4; ++i)
        out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  } else {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i)
        out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
}

inline void read_payload(std::istream& in, Tensor& t, bool f32) {
  auto& data = t.mutable_data();
  for (double& v : data) {
    if (f32) {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(in.get()))
                << (8 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<double>(f);
    } else {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(
                    static_cast<unsigned char>(in.get()))
                << (8 * i);
      std::memcpy(&v, &bits, 8);
    }
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<NamedParam>& params,
                            const CheckpointMeta& meta, bool f32 = false) {
  nlohmann::json header;
  header["step"] = meta.step;
  header["rng_state"] = meta.rng_state;
  header["config"] = meta.config;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : params) {
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    entry["dtype"] = f32 ? "f32" : "f64";
    table.push_back(std::move(entry));
  }
  header["tensors"] = std::move(table);
  std::string header_bytes = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error("config", "save_checkpoint: cannot open " + tmp);
    out.write(kCheckpointMagic, 8);
    for (int i = 0; i < 4; ++i)
      out.put(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xff));
    std::uint64_t hlen = header_bytes.size();
    for (int i = 0; i < 8; ++i)
      out.put(static_cast<char>((hlen >> (8 * i)) & 0xff));
    out.write(header_bytes.data(),
              static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& p : params) detail::write_payload(out, p.tensor, f32);
    if (!out)
      throw Error("config", "save_checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw Error("config",
                "save_checkpoint: rename to " + path + ": " + ec.message());
}

// Loads a checkpoint into an existing parameter set. The checkpoint's tensor
// table must match `params` exactly (same names, same order, same shapes);
// a mismatch throws with a diff of expected vs found names.
inline CheckpointMeta load_checkpoint(const std::string& path,
                                      std::vector<NamedParam>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("config", "load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw Error("config", "load_checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i)
    version |= static_cast<std::uint32_t>(
                   static_cast<unsigned char>(in.get()))
               << (8 * i);
  if (version != kCheckpointVersion)
    throw Error("config", "load_checkpoint: format version " +
                              std::to_string(version) +
                              " not supported (reader expects " +
                              std::to_string(kCheckpointVersion) + ")");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(in.get()))
            << (8 * i);
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw Error("config", "load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(header_bytes, nullptr, false);
  if (header.is_discarded())
    throw Error("config", "load_checkpoint: malformed header JSON");

  const auto& table = header.at("tensors");
  auto diff_error = [&]() -> Error {
    std::string msg = "load_checkpoint: topology mismatch; expected [";
    for (std::size_t i = 0; i < params.size(); ++i)
      msg += (i ? ", " : "") + params[i].name;
    msg += "] found [";
    for (std::size_t i = 0; i < table.size(); ++i)
      msg += (i ? ", " : "") + table[i].at("name").get<std::string>();
    msg += "]";
    return Error("config", msg);
  };
  if (table.size() != params.size()) throw diff_error();
  std::vector<bool> f32(params.size(), false);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].at("name").get<std::string>() != params[i].name)
      throw diff_error();
    auto shape = table[i].at("shape").get<std::vector<std::size_t>>();
    if (shape != params[i].tensor.shape())
      throw Error("config", "load_checkpoint: shape mismatch for " +
                                params[i].name);
    std::string dtype = table[i].at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64")
      throw Error("config", "load_checkpoint: bad dtype " + dtype);
    f32[i] = dtype == "f32";
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    detail::read_payload(in, params[i].tensor, f32[i]);
  if (!in) throw Error("config", "load_checkpoint: truncated payload");

  CheckpointMeta meta;
  meta.step = header.value("step", std::uint64_t{0});
  meta.rng_state = header.value("rng_state", std::uint64_t{0});
  if (header.contains("config")) meta.config = header.at("config");
  return meta;
}

}  // namespace gats
