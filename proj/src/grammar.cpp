#include "circuitlab/grammar.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "circuitlab/errors.hpp"

namespace circuitlab {

namespace {

const std::vector<std::string> kColorNames = {"red", "blue", "green", "yellow", "purple", "pink"};

std::string color_name(int i) {
  if (i < static_cast<int>(kColorNames.size())) return kColorNames[static_cast<std::size_t>(i)];
  return "color" + std::to_string(i);
}

std::string symbol_name(int i) {
  if (i < 26) return std::string(1, static_cast<char>('A' + i));
  return "sym" + std::to_string(i);
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <class T>
std::vector<T> sample_distinct(Rng& rng, const std::vector<T>& pool, std::size_t k) {
  std::vector<T> copy = pool;
  std::shuffle(copy.begin(), copy.end(), rng);
  copy.resize(k);
  return copy;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void GrammarConfig::validate() const {
  if (n_colors < 2) throw ConfigError("grammar: n_colors must be >= 2");
  if (n_primitives.lo < 1 || n_primitives.lo > n_primitives.hi)
    throw ConfigError("grammar: invalid primitive count range");
  if (n_functions.lo < 1 || n_functions.lo > n_functions.hi)
    throw ConfigError("grammar: invalid function count range");
  if (n_primitives.hi > n_colors) throw ConfigError("grammar: more primitives than colors");
  if (n_primitives.lo < 2) throw ConfigError("grammar: questions need at least two primitives");
  if (n_symbols < n_primitives.hi + n_functions.hi)
    throw ConfigError("grammar: not enough symbols to name primitives and functions");
  if (rhs_max_len < 1) throw ConfigError("grammar: rhs_max_len must be >= 1");
}

// ---------------------------------------------------------------------------
// Episode

const FunctionDemo& Episode::question_function() const {
  if (question.size() < 2) throw UnsolvableEpisodeError("question too short");
  const std::string& name = question[1];
  for (const auto& fn : functions) {
    if (fn.def.name == name) return fn;
  }
  throw UnsolvableEpisodeError("question function '" + name + "' is not defined in the support");
}

const std::string& Episode::color_of(std::string_view symbol) const {
  for (const auto& p : primitives) {
    if (p.symbol == symbol) return p.color;
  }
  throw UnsolvableEpisodeError("symbol '" + std::string(symbol) + "' has no primitive assignment");
}

std::vector<std::string> Episode::demo_rhs(const FunctionDemo& fn) const {
  std::vector<std::string> out;
  out.reserve(fn.def.rhs_pattern.size());
  for (Slot s : fn.def.rhs_pattern) {
    auto idx = static_cast<std::size_t>(s) - 1;
    if (idx >= fn.args.size()) throw UnsolvableEpisodeError("rhs slot refers to a missing argument");
    out.push_back(color_of(fn.args[idx]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> colors, std::vector<std::string> symbols)
    : colors_(std::move(colors)), symbols_(std::move(symbols)) {
  tokens_ = colors_;
  tokens_.insert(tokens_.end(), symbols_.begin(), symbols_.end());
  for (std::string_view s : {kSeparator, kEquals, kSos, kEos, kPad}) tokens_.emplace_back(s);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw ConfigError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw EncodingError("token '" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw EncodingError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_color(TokenId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < colors_.size();
}

bool Vocabulary::is_symbol(TokenId id) const {
  auto n_colors = static_cast<TokenId>(colors_.size());
  return id >= n_colors && id < n_colors + static_cast<TokenId>(symbols_.size());
}

TokenSeq Vocabulary::encode(const std::vector<std::string>& tokens) const {
  TokenSeq out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const TokenSeq& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a("\x1f", h);
  }
  return h;
}

Vocabulary build_vocab(const GrammarConfig& cfg) {
  cfg.validate();
  std::vector<std::string> colors;
  std::vector<std::string> symbols;
  for (int i = 0; i < cfg.n_colors; ++i) colors.push_back(color_name(i));
  for (int i = 0; i < cfg.n_symbols; ++i) symbols.push_back(symbol_name(i));
  return Vocabulary(std::move(colors), std::move(symbols));
}

// ---------------------------------------------------------------------------
// Sampling

Episode sample_episode(Rng& rng, const GrammarConfig& cfg) {
  cfg.validate();
  std::vector<std::string> symbols;
  for (int i = 0; i < cfg.n_symbols; ++i) symbols.push_back(symbol_name(i));
  std::vector<std::string> colors;
  for (int i = 0; i < cfg.n_colors; ++i) colors.push_back(color_name(i));

  const int n_prim = uniform_int(rng, cfg.n_primitives.lo, cfg.n_primitives.hi);
  const int n_fun = uniform_int(rng, cfg.n_functions.lo, cfg.n_functions.hi);

  auto names = sample_distinct(rng, symbols, static_cast<std::size_t>(n_prim + n_fun));
  auto picked_colors = sample_distinct(rng, colors, static_cast<std::size_t>(n_prim));

  Episode ep;
  std::vector<std::string> prim_symbols(names.begin(), names.begin() + n_prim);
  for (int i = 0; i < n_prim; ++i) {
    ep.primitives.push_back({prim_symbols[static_cast<std::size_t>(i)], picked_colors[static_cast<std::size_t>(i)]});
  }

  for (int f = 0; f < n_fun; ++f) {
    FunctionDemo fn;
    fn.def.name = names[static_cast<std::size_t>(n_prim + f)];
    fn.def.arity = uniform_int(rng, 1, 2);
    const int len = uniform_int(rng, 1, cfg.rhs_max_len);
    for (int k = 0; k < len; ++k) {
      fn.def.rhs_pattern.push_back(static_cast<Slot>(uniform_int(rng, 1, fn.def.arity)));
    }
    fn.args = sample_distinct(rng, prim_symbols, static_cast<std::size_t>(fn.def.arity));
    ep.functions.push_back(std::move(fn));
  }

  const FunctionDemo& asked = ep.functions[static_cast<std::size_t>(uniform_int(rng, 0, n_fun - 1))];
  std::vector<std::string> qargs;
  do {
    qargs = sample_distinct(rng, prim_symbols, static_cast<std::size_t>(asked.def.arity));
  } while (qargs == asked.args);

  ep.question.push_back(qargs[0]);
  ep.question.push_back(asked.def.name);
  if (asked.def.arity == 2) ep.question.push_back(qargs[1]);

  // Direct expansion: each rhs slot picks the corresponding question argument.
  for (Slot s : asked.def.rhs_pattern) {
    ep.target.push_back(ep.color_of(qargs[static_cast<std::size_t>(s) - 1]));
  }
  return ep;
}

std::vector<std::string> render_prompt_tokens(const Episode& ep) {
  std::vector<std::string> out(ep.question.begin(), ep.question.end());
  auto sep = [&] { out.emplace_back(kSeparator); };
  for (const auto& p : ep.primitives) {
    sep();
    out.push_back(p.symbol);
    out.emplace_back(kEquals);
    out.push_back(p.color);
  }
  for (const auto& fn : ep.functions) {
    sep();
    out.push_back(fn.args.at(0));
    out.push_back(fn.def.name);
    if (fn.def.arity == 2) out.push_back(fn.args.at(1));
    out.emplace_back(kEquals);
    for (auto& c : ep.demo_rhs(fn)) out.push_back(std::move(c));
  }
  out.emplace_back(kEos);
  return out;
}

TokenSeq render_prompt(const Episode& ep, const Vocabulary& vocab) { return vocab.encode(render_prompt_tokens(ep)); }

TokenSeq decoder_input(const Episode& ep, const Vocabulary& vocab) {
  TokenSeq out{vocab.sos()};
  for (const auto& c : ep.target) out.push_back(vocab.id(c));
  return out;
}

TokenSeq decoder_target(const Episode& ep, const Vocabulary& vocab) {
  TokenSeq out;
  for (const auto& c : ep.target) out.push_back(vocab.id(c));
  out.push_back(vocab.eos());
  return out;
}

// ---------------------------------------------------------------------------
// Signatures and splits

std::string canonical_support(const Episode& ep) {
  std::vector<std::string> prims;
  for (const auto& p : ep.primitives) prims.push_back(p.symbol + "=" + p.color);
  std::sort(prims.begin(), prims.end());

  std::vector<std::string> funcs;
  for (const auto& fn : ep.functions) {
    std::string s = fn.def.name + "/" + std::to_string(fn.def.arity) + ":";
    for (Slot slot : fn.def.rhs_pattern) s += std::to_string(static_cast<int>(slot));
    s += "@";
    for (std::size_t i = 0; i < fn.args.size(); ++i) s += (i ? "," : "") + fn.args[i];
    funcs.push_back(std::move(s));
  }
  std::sort(funcs.begin(), funcs.end());

  std::string out = "P[";
  for (const auto& p : prims) out += p + ";";
  out += "]F[";
  for (const auto& f : funcs) out += f + ";";
  out += "]";
  return out;
}

Signature episode_signature(const Episode& ep) { return fnv1a(canonical_support(ep)); }

std::string signature_hex(Signature sig) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(sig));
  return buf;
}

Split generate_split(Rng& rng, const GrammarConfig& cfg, std::size_t n_train, std::size_t n_test) {
  if (n_train == 0 || n_test == 0) throw GenerationError("split sizes must be positive");
  Split split;
  split.train.reserve(n_train);
  std::unordered_set<Signature> train_sigs;
  for (std::size_t i = 0; i < n_train; ++i) {
    split.train.push_back(sample_episode(rng, cfg));
    train_sigs.insert(episode_signature(split.train.back()));
  }
  const std::size_t budget = 100 * n_test;
  std::size_t attempts = 0;
  while (split.test.size() < n_test) {
    if (attempts++ >= budget) {
      throw GenerationError("could not sample " + std::to_string(n_test) +
                            " test episodes disjoint from the training set within the retry budget");
    }
    Episode ep = sample_episode(rng, cfg);
    if (train_sigs.count(episode_signature(ep)) == 0) split.test.push_back(std::move(ep));
  }
  return split;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const Episode& ep) {
  using nlohmann::json;
  json prims = json::array();
  for (const auto& p : ep.primitives) prims.push_back({{"symbol", p.symbol}, {"color", p.color}});
  json funcs = json::array();
  json demos = json::array();
  for (const auto& fn : ep.functions) {
    json pattern = json::array();
    for (Slot s : fn.def.rhs_pattern) pattern.push_back(static_cast<int>(s));
    funcs.push_back({{"name", fn.def.name}, {"arity", fn.def.arity}, {"rhs_pattern", pattern}});
    demos.push_back({{"function", fn.def.name}, {"args", fn.args}, {"rhs", ep.demo_rhs(fn)}});
  }
  return json{{"question", ep.question},
              {"primitives", prims},
              {"functions", funcs},
              {"demos", demos},
              {"target", ep.target},
              {"signature", signature_hex(episode_signature(ep))}};
}

Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  try {
    ep.question = j.at("question").get<std::vector<std::string>>();
    for (const auto& p : j.at("primitives")) {
      ep.primitives.push_back({p.at("symbol").get<std::string>(), p.at("color").get<std::string>()});
    }
    const auto& funcs = j.at("functions");
    const auto& demos = j.at("demos");
    if (funcs.size() != demos.size()) throw EncodingError("episode: functions/demos length mismatch");
    for (std::size_t i = 0; i < funcs.size(); ++i) {
      FunctionDemo fn;
      fn.def.name = funcs[i].at("name").get<std::string>();
      fn.def.arity = funcs[i].at("arity").get<int>();
      for (int s : funcs[i].at("rhs_pattern")) {
        if (s < 1 || s > fn.def.arity) throw EncodingError("episode: rhs slot outside declared arity");
        fn.def.rhs_pattern.push_back(static_cast<Slot>(s));
      }
      if (demos[i].at("function").get<std::string>() != fn.def.name)
        throw EncodingError("episode: demo does not match function order");
      fn.args = demos[i].at("args").get<std::vector<std::string>>();
      if (static_cast<int>(fn.args.size()) != fn.def.arity) throw EncodingError("episode: demo arity mismatch");
      ep.functions.push_back(std::move(fn));
    }
    ep.target = j.at("target").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < ep.functions.size(); ++i) {
      if (demos[i].contains("rhs") && demos[i].at("rhs").get<std::vector<std::string>>() != ep.demo_rhs(ep.functions[i]))
        throw EncodingError("episode: demo rhs disagrees with its pattern");
    }
    const FunctionDemo& asked = ep.question_function();
    if (ep.question.size() != static_cast<std::size_t>(asked.def.arity + 1))
      throw EncodingError("episode: question length does not match the function's arity");
    std::vector<std::string> expect;
    for (Slot s : asked.def.rhs_pattern) {
      const std::size_t qi = s == Slot::arg1 ? 0 : 2;
      expect.push_back(ep.color_of(ep.question.at(qi)));
    }
    if (expect != ep.target) throw EncodingError("episode: target disagrees with the question function");
  } catch (const nlohmann::json::exception& e) {
    throw EncodingError(std::string("episode: malformed JSON: ") + e.what());
  } catch (const UnsolvableEpisodeError& e) {
    throw EncodingError(std::string("episode: ") + e.what());
  }
  return ep;
}

nlohmann::json to_json(const GrammarConfig& cfg) {
  return {{"n_colors", cfg.n_colors},
          {"n_symbols", cfg.n_symbols},
          {"n_primitives", {cfg.n_primitives.lo, cfg.n_primitives.hi}},
          {"n_functions", {cfg.n_functions.lo, cfg.n_functions.hi}},
          {"rhs_max_len", cfg.rhs_max_len},
          {"seed", cfg.seed}};
}

GrammarConfig grammar_from_json(const nlohmann::json& j) {
  GrammarConfig cfg;
  try {
    cfg.n_colors = j.value("n_colors", cfg.n_colors);
    cfg.n_symbols = j.value("n_symbols", cfg.n_symbols);
    if (j.contains("n_primitives")) cfg.n_primitives = {j["n_primitives"][0], j["n_primitives"][1]};
    if (j.contains("n_functions")) cfg.n_functions = {j["n_functions"][0], j["n_functions"][1]};
    cfg.rhs_max_len = j.value("rhs_max_len", cfg.rhs_max_len);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grammar config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void write_episodes(const std::filesystem::path& path, const EpisodeSet& episodes) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ep : episodes) out << to_json(ep).dump() << '\n';
}

EpisodeSet read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  EpisodeSet out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw EncodingError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const EncodingError& e) {
      throw EncodingError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const GrammarConfig& cfg, const Split& split) {
  std::filesystem::create_directories(dir);
  write_episodes(dir / "train.jsonl", split.train);
  write_episodes(dir / "test.jsonl", split.test);
  Vocabulary vocab = build_vocab(cfg);
  nlohmann::json manifest = {{"format", "circuitlab-episodes"},
                             {"version", 1},
                             {"grammar", to_json(cfg)},
                             {"vocabulary", vocab.tokens()},
                             {"vocabulary_hash", signature_hex(vocab.hash())},
                             {"n_train", split.train.size()},
                             {"n_test", split.test.size()}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  Dataset ds;
  ds.grammar = grammar_from_json(manifest.at("grammar"));
  ds.vocab = build_vocab(ds.grammar);
  if (manifest.at("vocabulary").get<std::vector<std::string>>() != ds.vocab.tokens())
    throw ConfigError("dataset vocabulary does not match its grammar");
  ds.train = read_episodes(dir / "train.jsonl");
  ds.test = read_episodes(dir / "test.jsonl");
  return ds;
}

}  // namespace circuitlab
