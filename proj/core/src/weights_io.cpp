#include "rlens/weights_io.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace rlens {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kFormatTag = "reasonlens-tensors-v1";

void append_f32_le(std::vector<unsigned char>& buf, float v) {
  std::uint32_t u = 0;
  std::memcpy(&u, &v, 4);
  buf.push_back(static_cast<unsigned char>(u & 0xff));
  buf.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
  buf.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
  buf.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  float v = 0.0f;
  std::memcpy(&v, &u, 4);
  return v;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw Error("failed to read file: " + path.string());
  return buf;
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
  out.flush();
  if (!out) throw Error("I/O error writing file: " + path.string());
}

ordered_json config_to_json(const ModelConfig& cfg) {
  ordered_json j;
  j["n_layers"] = cfg.n_layers;
  j["d_model"] = cfg.d_model;
  j["n_heads"] = cfg.n_heads;
  j["d_ff"] = cfg.d_ff;
  j["vocab_size"] = cfg.vocab_size;
  j["max_seq"] = cfg.max_seq;
  j["rope_theta"] = cfg.rope_theta;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_seq = j.at("max_seq").get<int>();
  cfg.rope_theta = j.value("rope_theta", 10000.0);
  return cfg;
}

}  // namespace

void save_container(const std::filesystem::path& dir,
                    const std::vector<std::pair<std::string, Tensor>>& tensors,
                    const std::string& provenance, const std::string& extra_manifest_json) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);

  ordered_json manifest;
  manifest["format"] = kFormatTag;
  manifest["provenance"] = provenance;
  if (!extra_manifest_json.empty()) {
    const auto extra = nlohmann::json::parse(extra_manifest_json);
    for (const auto& [key, value] : extra.items()) manifest[key] = value;
  }

  std::vector<unsigned char> blob;
  ordered_json entries = ordered_json::array();
  for (const auto& [name, tensor] : tensors) {
    ordered_json e;
    e["name"] = name;
    e["shape"] = tensor.shape;
    e["dtype"] = "f32";
    e["byte_offset"] = blob.size();
    e["byte_len"] = tensor.data.size() * 4;
    entries.push_back(std::move(e));
    for (float v : tensor.data) append_f32_le(blob, v);
  }
  manifest["tensors"] = std::move(entries);

  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", text.data(), text.size());
  write_file(dir / "weights.bin", blob.data(), blob.size());
}

LoadedContainer load_container(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto blob_path = dir / "weights.bin";
  const auto manifest_bytes = read_file(manifest_path);
  const auto blob = read_file(blob_path);

  LoadedContainer out;
  out.manifest_json.assign(manifest_bytes.begin(), manifest_bytes.end());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(out.manifest_json);
  } catch (const std::exception& e) {
    throw Error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw Error("manifest missing tensors array: " + manifest_path.string());
  }
  for (const auto& entry : manifest["tensors"]) {
    const std::string name = entry.at("name").get<std::string>();
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw Error("unsupported dtype for tensor " + name);
    }
    Tensor t;
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (t.shape.empty() || t.shape.size() > 2) {
      throw Error("bad shape rank for tensor " + name);
    }
    std::size_t numel = 1;
    for (auto d : t.shape) numel *= d;
    const auto offset = entry.at("byte_offset").get<std::size_t>();
    const auto len = entry.at("byte_len").get<std::size_t>();
    if (len != numel * 4) {
      throw Error("byte_len inconsistent with shape for tensor " + name);
    }
    if (offset + len > blob.size()) {
      throw Error("truncated blob: tensor " + name + " extends past end of weights.bin");
    }
    t.data.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      t.data[i] = read_f32_le(blob.data() + offset + i * 4);
      if (!std::isfinite(t.data[i])) throw Error("non-finite value in tensor " + name);
    }
    if (!out.tensors.emplace(name, std::move(t)).second) {
      throw Error("duplicate tensor in manifest: " + name);
    }
  }
  return out;
}

WeightStore load_weights(const std::filesystem::path& dir) {
  auto loaded = load_container(dir);
  const auto manifest = nlohmann::json::parse(loaded.manifest_json);
  if (!manifest.contains("config")) {
    throw Error("manifest missing config: " + (dir / "manifest.json").string());
  }
  WeightStore store;
  store.config = config_from_json(manifest["config"]);
  store.provenance = manifest.value("provenance", "");
  store.tensors = std::move(loaded.tensors);
  validate_store(store);
  return store;
}

void save_weights(const WeightStore& store, const std::filesystem::path& dir) {
  validate_store(store);
  std::vector<std::pair<std::string, Tensor>> ordered;
  for (const auto& name : canonical_tensor_names(store.config)) {
    ordered.emplace_back(name, store.at(name));
  }
  const std::string extra = ordered_json{{"config", config_to_json(store.config)}}.dump();
  save_container(dir, ordered, store.provenance, extra);
}

std::string container_digest(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const std::vector<unsigned char>& bytes) {
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  };
  mix(read_file(dir / "manifest.json"));
  mix(read_file(dir / "weights.bin"));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace rlens
