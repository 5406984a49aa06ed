#include "circuitlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "circuitlab/errors.hpp"

namespace circuitlab {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(sizeof(float) == 4);

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_floats(std::ostream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(data[i]);
      unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                            static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

float get_float(const unsigned char* b) {
  std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                    (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg,
                     const Vocabulary& vocab, const nlohmann::json& extra) {
  check_shapes(params, cfg);
  if (static_cast<int>(vocab.size()) != cfg.vocab_size) throw CheckpointError("vocabulary size does not match the model");

  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["model_config"] = to_json(cfg);
  manifest["vocab"] = vocab.tokens();
  manifest["vocab_hash"] = hash_hex(vocab.hash());
  manifest["extra"] = extra;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : params.tensors()) {
    tensors.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}, {"count", m->size()}});
    offset += static_cast<std::uint64_t>(m->size());
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, 8);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : params.tensors()) put_floats(out, m->data(), static_cast<std::size_t>(m->size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw CheckpointError("truncated manifest in " + path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad manifest: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version");
    ck.config = model_config_from_json(manifest.at("model_config"));
    ck.vocab = manifest.at("vocab").get<std::vector<std::string>>();
    ck.vocab_hash = std::stoull(manifest.at("vocab_hash").get<std::string>(), nullptr, 16);
    ck.extra = manifest.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("bad model config: ") + e.what());
  }
  if (static_cast<int>(ck.vocab.size()) != ck.config.vocab_size)
    throw CheckpointError("vocabulary length does not match model_config.vocab_size");
  if (expected && expected->hash() != ck.vocab_hash)
    throw CheckpointError("vocabulary hash mismatch: checkpoint " + hash_hex(ck.vocab_hash) + ", data " +
                          hash_hex(expected->hash()));

  ck.params = zero_params<float>(ck.config);
  auto slots = ck.params.tensors();
  const auto& listed = manifest.at("tensors");
  if (listed.size() != slots.size()) throw CheckpointError("tensor count does not match the model config");
  const unsigned char* data = bytes.data() + 16 + mlen;
  const std::uint64_t n_floats = (bytes.size() - 16 - mlen) / 4;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& t = listed[i];
    const std::string name = t.at("name").get<std::string>();
    auto shape = t.at("shape").get<std::vector<long long>>();
    auto& [slot_name, m] = slots[i];
    if (name != slot_name) throw CheckpointError("unexpected tensor " + name + ", expected " + slot_name);
    if (shape.size() != 2 || shape[0] != m->rows() || shape[1] != m->cols())
      throw CheckpointError("shape mismatch for " + name);
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = static_cast<std::uint64_t>(m->size());
    if (t.at("count").get<std::uint64_t>() != count || offset + count > n_floats)
      throw CheckpointError("tensor data out of range for " + name);
    for (std::uint64_t k = 0; k < count; ++k) m->data()[k] = get_float(data + 4 * (offset + k));
  }
  return ck;
}

}  // namespace circuitlab
