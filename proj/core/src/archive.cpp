#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "tsfda/data.hpp"
#include "tsfda/nn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsfda {

namespace {

constexpr int kArchiveVersion = 1;

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string tensor_bytes(const DenseTensor& t) {
  static_assert(sizeof(double) == 8);
  std::string out(static_cast<size_t>(t.size()) * 8, '\0');
  std::memcpy(out.data(), t.data(), out.size());
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

json layer_to_json(const LayerSpec& l) {
  json j{{"kind", to_string(l.kind)}, {"name", l.name}};
  j["c_in"] = l.c_in;
  j["c_out"] = l.c_out;
  j["kernel"] = l.kernel;
  j["stride"] = l.stride;
  j["padding"] = l.padding;
  j["r_in"] = l.r_in;
  j["r_out"] = l.r_out;
  j["pool"] = l.pool;
  j["pool_stride"] = l.pool_stride;
  j["pool_padding"] = l.pool_padding;
  j["out_len"] = l.out_len;
  j["rate"] = l.rate;
  j["has_bias"] = l.has_bias;
  if (l.adapter) {
    const AdapterAttachment& a = *l.adapter;
    j["adapter"] = json{{"kind", a.kind == AdapterKind::LoRA ? "lora" : "lokra"},
                        {"style", a.style == ConvLoraStyle::ModeRank ? "mode_rank" : "flatten"},
                        {"rank", a.rank},
                        {"kron", a.kron},
                        {"scaling", a.scaling}};
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec l;
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.name = j.at("name").get<std::string>();
  l.c_in = j.at("c_in").get<Index>();
  l.c_out = j.at("c_out").get<Index>();
  l.kernel = j.at("kernel").get<Index>();
  l.stride = j.at("stride").get<Index>();
  l.padding = j.at("padding").get<Index>();
  l.r_in = j.at("r_in").get<Index>();
  l.r_out = j.at("r_out").get<Index>();
  l.pool = j.at("pool").get<Index>();
  l.pool_stride = j.at("pool_stride").get<Index>();
  l.pool_padding = j.at("pool_padding").get<Index>();
  l.out_len = j.at("out_len").get<Index>();
  l.rate = j.at("rate").get<double>();
  l.has_bias = j.at("has_bias").get<bool>();
  if (j.contains("adapter")) {
    AdapterAttachment a;
    const json& aj = j.at("adapter");
    a.kind = aj.at("kind").get<std::string>() == "lora" ? AdapterKind::LoRA : AdapterKind::LoKrA;
    a.style = aj.at("style").get<std::string>() == "mode_rank" ? ConvLoraStyle::ModeRank
                                                               : ConvLoraStyle::Flatten;
    a.rank = aj.at("rank").get<Index>();
    const auto kron = aj.at("kron").get<std::vector<Index>>();
    for (size_t i = 0; i < 4 && i < kron.size(); ++i) a.kron[i] = kron[i];
    a.scaling = aj.at("scaling").get<double>();
    l.adapter = a;
  }
  return l;
}

}  // namespace

void save_model(const ModelGraph& m, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "params");
  if (!m.state.empty()) fs::create_directories(fs::path(dir) / "state");

  json manifest;
  manifest["format_version"] = kArchiveVersion;
  manifest["dtype"] = "float64-le";
  manifest["model"] = {{"input_channels", m.input_channels},
                       {"input_len", m.input_len},
                       {"num_classes", m.num_classes},
                       {"backbone_end", m.backbone_end}};
  json layers = json::array();
  for (const auto& l : m.layers) layers.push_back(layer_to_json(l));
  manifest["model"]["layers"] = std::move(layers);
  json imputer = json::array();
  for (const auto& l : m.imputer) imputer.push_back(layer_to_json(l));
  manifest["model"]["imputer"] = std::move(imputer);
  manifest["meta"] = m.meta;

  std::map<std::string, std::string> blobs;  // relative path -> hash, kept sorted
  json params = json::array();
  for (const auto& [name, tensor] : m.params) {
    const std::string rel = "params/" + name + ".bin";
    const std::string bytes = tensor_bytes(tensor);
    write_file(fs::path(dir) / rel, bytes);
    blobs[rel] = sha256_hex(bytes);
    params.push_back(json{{"name", name},
                          {"tag", to_string(m.tags.at(name))},
                          {"shape", tensor.shape()},
                          {"file", rel}});
  }
  manifest["params"] = std::move(params);

  json state = json::array();
  for (const auto& [name, tensor] : m.state) {
    const std::string rel = "state/" + name + ".bin";
    const std::string bytes = tensor_bytes(tensor);
    write_file(fs::path(dir) / rel, bytes);
    blobs[rel] = sha256_hex(bytes);
    state.push_back(json{{"name", name}, {"shape", tensor.shape()}, {"file", rel}});
  }
  manifest["state"] = std::move(state);

  const std::string manifest_text = manifest.dump(2) + "\n";
  write_file(fs::path(dir) / "manifest.json", manifest_text);
  blobs["manifest.json"] = sha256_hex(manifest_text);

  std::ostringstream sums;
  for (const auto& [rel, hash] : blobs) sums << hash << "  " << rel << "\n";
  write_file(fs::path(dir) / "checksums.sha256", sums.str());
}

ModelGraph load_model(const std::string& dir) {
  // Verify every checksum before constructing any model state.
  const std::string sums = read_file(fs::path(dir) / "checksums.sha256");
  std::istringstream in(sums);
  std::string line;
  std::map<std::string, std::string> contents;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sep = line.find("  ");
    if (sep == std::string::npos) throw std::runtime_error("malformed checksums.sha256");
    const std::string hash = line.substr(0, sep);
    const std::string rel = line.substr(sep + 2);
    const std::string bytes = read_file(fs::path(dir) / rel);
    if (sha256_hex(bytes) != hash)
      throw std::runtime_error("checksum failure for " + rel + "; refusing to load partial model");
    contents[rel] = bytes;
  }
  if (!contents.count("manifest.json"))
    throw std::runtime_error("archive missing manifest.json");

  json manifest = json::parse(contents.at("manifest.json"));
  if (manifest.at("format_version").get<int>() != kArchiveVersion)
    throw std::runtime_error("archive version mismatch: expected " +
                             std::to_string(kArchiveVersion));

  ModelGraph m;
  const json& mj = manifest.at("model");
  m.input_channels = mj.at("input_channels").get<Index>();
  m.input_len = mj.at("input_len").get<Index>();
  m.num_classes = mj.at("num_classes").get<Index>();
  m.backbone_end = mj.at("backbone_end").get<Index>();
  for (const json& lj : mj.at("layers")) m.layers.push_back(layer_from_json(lj));
  for (const json& lj : mj.at("imputer")) m.imputer.push_back(layer_from_json(lj));
  if (manifest.contains("meta"))
    m.meta = manifest.at("meta").get<std::map<std::string, std::string>>();

  auto decode = [&](const json& entry) {
    const Shape shape = entry.at("shape").get<Shape>();
    const std::string& bytes = contents.at(entry.at("file").get<std::string>());
    if (bytes.size() != static_cast<size_t>(shape_numel(shape)) * 8)
      throw std::runtime_error("blob size mismatch for " + entry.at("name").get<std::string>());
    std::vector<double> values(bytes.size() / 8);
    std::memcpy(values.data(), bytes.data(), bytes.size());
    return DenseTensor(shape, std::move(values));
  };

  for (const json& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    m.params[name] = decode(entry);
    m.tags[name] = param_tag_from_string(entry.at("tag").get<std::string>());
  }
  for (const json& entry : manifest.at("state"))
    m.state[entry.at("name").get<std::string>()] = decode(entry);

  m.validate();
  return m;
}

}  // namespace tsfda
