#include "gklab/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gklab::model {

namespace {

constexpr char kMagic[8] = {'G', 'K', 'L', 'A', 'B', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("checkpoint " + path.string() + " is truncated");
  }
  return v;
}

}  // namespace

nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
          {"d_model", cfg.d_model},       {"d_head", cfg.d_head},
          {"d_ff", cfg.d_ff},             {"vocab_size", cfg.vocab_size},
          {"max_seq_len", cfg.max_seq_len},
          {"activation", cfg.activation == Activation::kGelu ? "gelu" : "identity"},
          {"split_qkv", cfg.split_qkv}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<std::size_t>();
  cfg.n_heads = j.at("n_heads").get<std::size_t>();
  cfg.d_model = j.at("d_model").get<std::size_t>();
  cfg.d_head = j.at("d_head").get<std::size_t>();
  cfg.d_ff = j.at("d_ff").get<std::size_t>();
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  const std::string act = j.value("activation", "gelu");
  if (act != "gelu" && act != "identity") throw ConfigError("unknown activation '" + act + "'");
  cfg.activation = act == "gelu" ? Activation::kGelu : Activation::kIdentity;
  cfg.split_qkv = j.value("split_qkv", true);
  cfg.validate();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const nlohmann::ordered_json& metadata) {
  params.validate();
  nlohmann::ordered_json header;
  header["config"] = config_to_json(params.config);
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params.named()) {
    header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
  }
  header["metadata"] = metadata;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params.named()) {
    os.write(reinterpret_cast<const char*>(t->data().data()),
             static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto len = read_pod<std::uint64_t>(is, path);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw CheckpointError("checkpoint " + path.string() + " header is truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " header: " + e.what());
  }
  LoadedCheckpoint out{Parameters::zeros(config_from_json(header.at("config"))), header.value("metadata", nlohmann::json::object())};
  auto named = out.params.named_mut();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != named.size()) throw CheckpointError("checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != named[i].first ||
        tensors[i].at("shape").get<compute::Shape>() != named[i].second->shape()) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " does not match its config");
    }
    Tensor& t = *named[i].second;
    if (!is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw CheckpointError("checkpoint " + path.string() + " data is truncated");
    }
  }
  out.params.validate();
  return out;
}

}  // namespace gklab::model
