#pragma once

// Checkpoint layout (little-endian):
//   "FVQACKPT"                 8 bytes
//   u32 version                (1)
//   u32 header_len, header     JSON: model config + free-form metadata
//   u32 n_tensors
//   per tensor: u32 name_len, name, u32 rows, u32 cols, u32 dtype (0 = f32), u64 offset
//   payload                    f32 row-major, offsets relative to payload start
//
// A stored model is always f32; the round trip of a float model is bit-exact.

#include "fvqa/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvqa {

inline constexpr char kCheckpointMagic[8] = {'F', 'V', 'Q', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},         {"n_adapter", c.n_adapter},
          {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"d_enc", c.d_enc},             {"ffn_mult", c.ffn_mult},
          {"gate_per_head", c.gate_per_head}, {"proj_bias", c.proj_bias},
          {"visual_pos_emb", c.visual_pos_emb}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.n_adapter = j.at("n_adapter");
  c.vocab_size = j.at("vocab_size");
  c.max_seq_len = j.at("max_seq_len");
  c.d_enc = j.at("d_enc");
  c.ffn_mult = j.at("ffn_mult");
  c.gate_per_head = j.at("gate_per_head");
  c.proj_bias = j.at("proj_bias");
  c.visual_pos_emb = j.at("visual_pos_emb");
  return c;
}

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : b_(std::move(bytes)) {}

  template <typename V>
  V get() {
    V v;
    need(sizeof v);
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return b_.size(); }
  const char* at(std::size_t p) const { return b_.data() + p; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) fail(Errc::Corrupt, "checkpoint truncated");
  }
  std::string b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& model, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::ordered_json header;
  header["config"] = config_to_json(model.config);
  header["meta"] = meta;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, 8);
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  std::uint32_t n = 0;
  model.visit([&](const std::string&, const Mat<T>&, bool) { ++n; });
  detail::put(out, n);
  std::uint64_t offset = 0;
  std::string payload;
  model.visit([&](const std::string& name, const Mat<T>& m, bool) {
    detail::put(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put(out, static_cast<std::uint32_t>(m.rows()));
    detail::put(out, static_cast<std::uint32_t>(m.cols()));
    detail::put(out, std::uint32_t{0});
    detail::put(out, offset);
    const Mat<float> f = m.template cast<float>();
    payload.append(reinterpret_cast<const char*>(f.data()), sizeof(float) * static_cast<std::size_t>(f.size()));
    offset += sizeof(float) * static_cast<std::uint64_t>(f.size());
  });
  return out + payload;
}

struct LoadedCheckpoint {
  ModelParams<float> model;
  nlohmann::json meta;
};

inline LoadedCheckpoint deserialize_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.size() < 8 || std::memcmp(r.at(0), kCheckpointMagic, 8) != 0)
    fail(Errc::Corrupt, "not a checkpoint (bad magic)");
  r.str(8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(Errc::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                    std::to_string(kCheckpointVersion));
  LoadedCheckpoint out;
  try {
    const auto header = nlohmann::json::parse(r.str(r.get<std::uint32_t>()));
    out.model.config = config_from_json(header.at("config"));
    out.meta = header.value("meta", nlohmann::json::object());
    out.model.config.validate();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Corrupt, std::string("checkpoint header: ") + e.what());
  } catch (const Error& e) {
    fail(Errc::Corrupt, std::string("checkpoint config: ") + e.what());
  }
  out.model.layers.resize(static_cast<std::size_t>(out.model.config.n_layers));

  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  std::vector<Entry> dir(r.get<std::uint32_t>());
  for (auto& e : dir) {
    e.name = r.str(r.get<std::uint32_t>());
    e.rows = r.get<std::uint32_t>();
    e.cols = r.get<std::uint32_t>();
    if (r.get<std::uint32_t>() != 0) fail(Errc::Corrupt, "unsupported dtype for " + e.name);
    e.offset = r.get<std::uint64_t>();
  }
  const std::size_t base = r.pos();
  std::size_t i = 0, end = base;
  out.model.visit([&](const std::string& name, Mat<float>& m, bool) {
    if (i >= dir.size() || dir[i].name != name) fail(Errc::Corrupt, "tensor directory mismatch at " + name);
    const auto& e = dir[i++];
    const std::size_t bytes = sizeof(float) * std::size_t{e.rows} * e.cols;
    if (base + e.offset + bytes > r.size()) fail(Errc::Corrupt, "checkpoint truncated in " + name);
    m.resize(e.rows, e.cols);
    if (bytes > 0) std::memcpy(m.data(), r.at(base + e.offset), bytes);
    end = std::max<std::size_t>(end, base + e.offset + bytes);
  });
  if (i != dir.size()) fail(Errc::Corrupt, "unexpected extra tensors");
  if (end != r.size()) fail(Errc::Corrupt, "trailing bytes after payload");
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& model,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::Io, "cannot write " + path);
  const auto bytes = serialize_checkpoint(model, meta);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(Errc::Io, "short write to " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::DataMissing, "cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace fvqa
