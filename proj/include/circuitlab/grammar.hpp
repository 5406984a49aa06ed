#pragma once

// Episode generation for the compositional-induction task: a support set of
// primitive assignments (symbol = color) and function demonstrations
// (a1 f a2 = c...c), followed by a question that applies one demonstrated
// function to a new pair of primitives.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace circuitlab {

using Rng = std::mt19937_64;
using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool contains(int v) const { return v >= lo && v <= hi; }
};

struct GrammarConfig {
  int n_colors = 6;
  int n_symbols = 9;
  IntRange n_primitives{3, 4};
  IntRange n_functions{2, 4};
  int rhs_max_len = 5;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

struct PrimitiveAssignment {
  std::string symbol;
  std::string color;
  friend bool operator==(const PrimitiveAssignment&, const PrimitiveAssignment&) = default;
};

// 1 = first argument, 2 = second argument.
enum class Slot : std::uint8_t { arg1 = 1, arg2 = 2 };

struct FunctionDef {
  std::string name;
  int arity = 2;
  std::vector<Slot> rhs_pattern;
  friend bool operator==(const FunctionDef&, const FunctionDef&) = default;
};

// A function definition together with the primitive arguments shown for it
// in the support set.
struct FunctionDemo {
  FunctionDef def;
  std::vector<std::string> args;
  friend bool operator==(const FunctionDemo&, const FunctionDemo&) = default;
};

struct Episode {
  std::vector<std::string> question;  // [s1 f s2] or [s1 f]
  std::vector<PrimitiveAssignment> primitives;
  std::vector<FunctionDemo> functions;
  std::vector<std::string> target;  // answer colors, without SOS/EOS

  const FunctionDemo& question_function() const;
  const std::string& color_of(std::string_view symbol) const;
  // Colors on the right-hand side of a demonstration line.
  std::vector<std::string> demo_rhs(const FunctionDemo& fn) const;

  friend bool operator==(const Episode&, const Episode&) = default;
};

inline constexpr std::string_view kSeparator = "|";
inline constexpr std::string_view kEquals = "=";
inline constexpr std::string_view kSos = "SOS";
inline constexpr std::string_view kEos = "EOS";
inline constexpr std::string_view kPad = "PAD";

class Vocabulary {
 public:
  Vocabulary() = default;
  // Token order: colors, symbols, then | = SOS EOS PAD.
  Vocabulary(std::vector<std::string> colors, std::vector<std::string> symbols);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& colors() const { return colors_; }
  const std::vector<std::string>& symbols() const { return symbols_; }

  TokenId id(std::string_view token) const;  // throws EncodingError
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;  // throws EncodingError
  bool is_color(TokenId id) const;
  bool is_symbol(TokenId id) const;

  TokenId sos() const { return id(kSos); }
  TokenId eos() const { return id(kEos); }
  TokenId pad() const { return id(kPad); }

  TokenSeq encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const TokenSeq& ids) const;

  // FNV-1a over the ordered token list; stored in checkpoints and reports.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::string> colors_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> ids_;
};

Vocabulary build_vocab(const GrammarConfig& cfg);

Episode sample_episode(Rng& rng, const GrammarConfig& cfg);

// question | line | line ... EOS, as token strings.
std::vector<std::string> render_prompt_tokens(const Episode& ep);
TokenSeq render_prompt(const Episode& ep, const Vocabulary& vocab);

// Gold decoder input (SOS c1..cn) and targets (c1..cn EOS).
TokenSeq decoder_input(const Episode& ep, const Vocabulary& vocab);
TokenSeq decoder_target(const Episode& ep, const Vocabulary& vocab);

using Signature = std::uint64_t;

// Canonical, order-independent text of the support set; the signature is its
// FNV-1a hash.
std::string canonical_support(const Episode& ep);
Signature episode_signature(const Episode& ep);
std::string signature_hex(Signature sig);

using EpisodeSet = std::vector<Episode>;

struct Split {
  EpisodeSet train;
  EpisodeSet test;
};

// Test episodes never share a support signature with any training episode.
// Throws GenerationError when the retry budget (100x oversampling) runs out.
Split generate_split(Rng& rng, const GrammarConfig& cfg, std::size_t n_train, std::size_t n_test);

// JSON-lines persistence.
nlohmann::json to_json(const Episode& ep);
Episode episode_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GrammarConfig& cfg);
GrammarConfig grammar_from_json(const nlohmann::json& j);

void write_episodes(const std::filesystem::path& path, const EpisodeSet& episodes);
EpisodeSet read_episodes(const std::filesystem::path& path);

struct Dataset {
  GrammarConfig grammar;
  Vocabulary vocab;
  EpisodeSet train;
  EpisodeSet test;
};

// DIR/train.jsonl, DIR/test.jsonl, DIR/manifest.json
void write_dataset(const std::filesystem::path& dir, const GrammarConfig& cfg, const Split& split);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace circuitlab
