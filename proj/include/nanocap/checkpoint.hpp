#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "nanocap/error.hpp"
#include "nanocap/model.hpp"
#include "nanocap/vocab.hpp"

namespace nanocap {

// Container layout:
//   8 bytes  magic "NCAPCKPT"
//   u32 LE   format version
//   u64 LE   header length
//   header   JSON: config, frozen flag, vocabulary, tensor table
//   payload  f64 LE values in tensor-table order
inline constexpr char kCheckpointMagic[8] = {'N', 'C', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  Vocabulary vocab;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw Error(ErrorCode::kIoFailure, "truncated checkpoint");
  return value;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},         {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"context_window", c.context_window}, {"vocab_size", c.vocab_size}, {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_window = j.at("context_window").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, const Vocabulary& vocab, const std::filesystem::path& path) {
  if (static_cast<std::size_t>(params.config.vocab_size) != vocab.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "vocabulary size does not match model config");
  }
  nlohmann::json header;
  header["format"] = "nanocap-checkpoint";
  header["version"] = kCheckpointVersion;
  header["dtype"] = "f64-le";
  header["config"] = detail::config_to_json(params.config);
  header["frozen"] = params.frozen;
  header["vocab"] = vocab.units();
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& t : params.layout().tensors) {
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  detail::write_pod<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(reinterpret_cast<const char*>(params.values.data()),
           static_cast<std::streamsize>(params.values.size() * sizeof(double)));
  if (!os) throw Error(ErrorCode::kIoFailure, "write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw Error(ErrorCode::kIoFailure, path.string() + " is not a checkpoint file");
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                 std::to_string(kCheckpointVersion));
  }
  const auto header_len = detail::read_pod<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw Error(ErrorCode::kIoFailure, "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIoFailure, std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("version", 0U) != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "header version disagrees with container");
  }

  Checkpoint ckpt;
  ckpt.params.config = detail::config_from_json(header.at("config"));
  ckpt.params.config.validate();
  ckpt.params.frozen = header.at("frozen").get<bool>();
  auto units = header.at("vocab").get<std::vector<std::string>>();
  ckpt.vocab = Vocabulary(std::move(units));
  if (ckpt.vocab.size() != static_cast<std::size_t>(ckpt.params.config.vocab_size)) {
    throw Error(ErrorCode::kIoFailure, "vocabulary size disagrees with config");
  }
  const ParamLayout layout(ckpt.params.config);
  const auto& table = header.at("tensors");
  if (table.size() != layout.tensors.size()) throw Error(ErrorCode::kIoFailure, "tensor table mismatch");
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].at("name").get<std::string>() != layout.tensors[i].name ||
        table[i].at("offset").get<std::size_t>() != layout.tensors[i].offset) {
      throw Error(ErrorCode::kIoFailure, "tensor table mismatch at " + layout.tensors[i].name);
    }
  }
  ckpt.params.values.resize(layout.total);
  is.read(reinterpret_cast<char*>(ckpt.params.values.data()),
          static_cast<std::streamsize>(layout.total * sizeof(double)));
  if (!is) throw Error(ErrorCode::kIoFailure, "truncated checkpoint payload");
  return ckpt;
}

}  // namespace nanocap
