#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/grammar.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/training.hpp"

namespace testkit {

using namespace circuitlab;

inline Dataset small_dataset(std::uint64_t seed, std::size_t n_train = 200, std::size_t n_test = 50) {
  GrammarConfig g;
  g.seed = seed;
  Rng rng(seed);
  Split s = generate_split(rng, g, n_train, n_test);
  return Dataset{g, build_vocab(g), std::move(s.train), std::move(s.test)};
}

// Small enough for fast patching tests, large enough to have several heads
// per layer.
inline ModelConfig tiny_config(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 16;
  c.d_head = 4;
  c.n_heads = 4;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d_mlp = 32;
  c.dropout = 0.0;
  c.max_len = 64;
  return c;
}

inline ModelParams random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return init_model(cfg, rng);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("circuitlab-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testkit
