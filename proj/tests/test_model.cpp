#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "circuitlab/errors.hpp"
#include "circuitlab/interp.hpp"
#include "support.hpp"

using namespace circuitlab;

namespace {

struct Fixture {
  Dataset data = testkit::small_dataset(5, 40, 10);
  ModelConfig cfg = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  ModelParams params = testkit::random_model(cfg, 3);
  EncodedEpisode ep = encode_episode(data.test[0], data.vocab);
};

Matrix softmax_rows_ref(const Matrix& s, bool causal) {
  Matrix out = s;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double mx = -1e300;
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      if (!causal || j <= i) mx = std::max(mx, static_cast<double>(s(i, j)));
    double z = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) z += (!causal || j <= i) ? std::exp(s(i, j) - mx) : 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      out(i, j) = static_cast<float>((!causal || j <= i) ? std::exp(s(i, j) - mx) / z : 0.0);
  }
  return out;
}

}  // namespace

TEST_CASE("parameter count of the default model") {
  ModelConfig c;
  const std::size_t d = 128, v = 20, m = 512;
  const std::size_t attn = 4 * d * d + d, mlp = d * m + m + m * d + d, ln = 2 * d;
  const std::size_t want = 2 * v * d + 2 * (2 * ln + attn + mlp) + ln + 2 * (3 * ln + 2 * attn + mlp) + ln;
  CHECK(zero_params<float>(c).parameter_count() == want);
  CHECK(want == 929024);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.d_head = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  CHECK(model_config_from_json(to_json(c)) == c);
}

TEST_CASE("sinusoidal positions") {
  ModelConfig c;
  for (int pos : {0, 1, 7, 63}) {
    Vector pe = positional_embedding(pos, c);
    for (int i = 0; i < c.d_model / 2; ++i) {
      const double f = pos / std::pow(10000.0, 2.0 * i / c.d_model);
      CHECK(pe(2 * i) == doctest::Approx(std::sin(f)).epsilon(1e-5));
      CHECK(pe(2 * i + 1) == doctest::Approx(std::cos(f)).epsilon(1e-5));
    }
  }
  CHECK_THROWS_AS(positional_embedding(64, c), BoundsError);
}

TEST_CASE("attention patterns are row-stochastic, causal where required, and reproduce Z") {
  Fixture f;
  const auto cache = run_with_cache(f.params, f.cfg, f.ep);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < f.cfg.n_heads; ++h) {
      for (const NodeRef& head : {NodeRef::enc(l, h), NodeRef::dec_self(l, h), NodeRef::dec_cross(l, h)}) {
        const Matrix& a = cache.at(head.with_site(Site::attn_weights));
        CHECK((a.rowwise().sum().array() - 1.0f).abs().maxCoeff() < 1e-5f);
        CHECK(a.minCoeff() >= 0.0f);
        const bool causal = head.component == Component::decoder && head.kind == AttnKind::self;
        if (causal) {
          for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index j = i + 1; j < a.cols(); ++j) CHECK(a(i, j) == 0.0f);
        }
        const Matrix& q = cache.at(head.with_site(Site::Q));
        const Matrix& k = cache.at(head.with_site(Site::K));
        const Matrix& v = cache.at(head.with_site(Site::V));
        Matrix ref = softmax_rows_ref(q * k.transpose() / 2.0f, causal);
        CHECK((ref - a).cwiseAbs().maxCoeff() < 1e-5f);
        const auto& ap = head.component == Component::encoder ? f.params.encoder[l].self_attn
                         : head.kind == AttnKind::self         ? f.params.decoder[l].self_attn
                                                               : f.params.decoder[l].cross_attn;
        Matrix z = a * v * ap.w_o.middleRows(h * f.cfg.d_head, f.cfg.d_head);
        CHECK((z - cache.at(head)).cwiseAbs().maxCoeff() < 1e-5f);
      }
    }
  }
}

TEST_CASE("decoder logits do not depend on future decoder tokens") {
  Fixture f;
  auto a = forward(f.params, f.cfg, f.ep.prompt, f.ep.dec_input).logits;
  TokenSeq changed = f.ep.dec_input;
  changed.back() = changed.back() == 0 ? 1 : 0;
  auto b = forward(f.params, f.cfg, f.ep.prompt, changed).logits;
  CHECK((a.topRows(a.rows() - 1) - b.topRows(b.rows() - 1)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("packed batches match single-episode runs") {
  Fixture f;
  std::vector<SequencePair> pairs;
  for (int i = 0; i < 4; ++i) {
    auto e = encode_episode(f.data.train[static_cast<std::size_t>(i)], f.data.vocab);
    pairs.push_back({e.prompt, e.dec_input});
  }
  auto packed = forward<float>(f.params, f.cfg, pairs, ForwardOptions{}).logits;
  Eigen::Index row = 0;
  for (const auto& p : pairs) {
    auto one = forward(f.params, f.cfg, p.prompt, p.dec_input).logits;
    CHECK((packed.middleRows(row, one.rows()) - one).cwiseAbs().maxCoeff() < 1e-5f);
    row += one.rows();
  }
  CHECK(row == packed.rows());
}

TEST_CASE("eval is deterministic; dropout only acts in train mode") {
  Fixture f;
  auto a = forward(f.params, f.cfg, f.ep.prompt, f.ep.dec_input).logits;
  auto b = forward(f.params, f.cfg, f.ep.prompt, f.ep.dec_input).logits;
  CHECK(a == b);

  ModelConfig dcfg = f.cfg;
  dcfg.dropout = 0.3;
  Rng r1(1), r2(2);
  ForwardOptions t1, t2;
  t1.mode = t2.mode = Mode::train;
  t1.dropout_rng = &r1;
  t2.dropout_rng = &r2;
  std::vector<SequencePair> pair{{f.ep.prompt, f.ep.dec_input}};
  auto d1 = forward<float>(f.params, dcfg, pair, t1).logits;
  auto d2 = forward<float>(f.params, dcfg, pair, t2).logits;
  CHECK((d1 - d2).cwiseAbs().maxCoeff() > 1e-4f);
  ForwardOptions no_rng;
  no_rng.mode = Mode::train;
  CHECK_THROWS_AS(forward<float>(f.params, dcfg, pair, no_rng), ConfigError);
  auto e = forward(f.params, dcfg, f.ep.prompt, f.ep.dec_input).logits;
  CHECK(e == a);
}

TEST_CASE("freezing every head site at its clean value reproduces the clean logits") {
  Fixture f;
  const auto clean = run_with_cache(f.params, f.cfg, f.ep);
  PatchSpec spec;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < f.cfg.n_heads; ++h)
      for (const NodeRef& head : {NodeRef::enc(l, h), NodeRef::dec_self(l, h), NodeRef::dec_cross(l, h)})
        for (Site s : {Site::Q, Site::K, Site::V, Site::Z}) spec.freeze(head.with_site(s));
  ForwardOptions opts;
  opts.patches = &spec;
  opts.context.clean = &clean;
  auto out = forward(f.params, f.cfg, f.ep.prompt, f.ep.dec_input, opts).logits;
  CHECK((out - clean.logits).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("patch specs are validated") {
  Fixture f;
  PatchSpec dup;
  dup.freeze(NodeRef::enc(0, 1)).mean_ablate(NodeRef::enc(0, 1));
  CHECK_THROWS_AS(dup.validate(f.cfg), PatchError);

  PatchSpec bad_head;
  bad_head.freeze(NodeRef::enc(0, 9));
  CHECK_THROWS_AS(bad_head.validate(f.cfg), NodeError);

  PatchSpec bad_perm;
  bad_perm.add({NodeRef::enc(0, 0, Site::V), PatchAction::permute_positions, {}, {0, 0, 1}, false, {}});
  CHECK_THROWS(bad_perm.validate(f.cfg));

  PatchSpec deep_pos;
  deep_pos.add({NodeRef::enc(1, 0, Site::V), PatchAction::permute_positions, {}, {1, 0}, true, {}});
  CHECK_THROWS_AS(deep_pos.validate(f.cfg), PatchError);

  PatchSpec no_clean;
  no_clean.freeze(NodeRef::enc(0, 0));
  ForwardOptions opts;
  opts.patches = &no_clean;
  CHECK_THROWS_AS(forward(f.params, f.cfg, f.ep.prompt, f.ep.dec_input, opts), PatchError);

  CHECK(compose_permutations(transposition(4, 0, 2), transposition(4, 0, 2)) == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("overlong sequences are rejected") {
  Fixture f;
  TokenSeq longp(70, 0);
  CHECK_THROWS_AS(forward(f.params, f.cfg, longp, f.ep.dec_input), BoundsError);
}

TEST_CASE("greedy decoding stops at EOS or the step limit") {
  Fixture f;
  auto out = greedy_decode(f.params, f.cfg, f.ep.prompt, f.data.vocab.sos(), f.data.vocab.eos(), 4);
  CHECK(out.size() <= 4);
  for (std::size_t i = 0; i + 1 < out.size(); ++i) CHECK(out[i] != f.data.vocab.eos());
  TokenSeq prefix{f.data.vocab.sos()};
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto logits = forward(f.params, f.cfg, f.ep.prompt, prefix).logits;
    CHECK(argmax_lowest(logits.row(logits.rows() - 1)) == out[i]);
    prefix.push_back(out[i]);
  }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  Matrix m(1, 4);
  m << 1.0f, 3.0f, 3.0f, 2.0f;
  CHECK(argmax_lowest(m.row(0)) == 1);
}

TEST_CASE("gradient check on a miniature model") {
  auto data = testkit::small_dataset(8, 20, 5);
  ModelConfig mini = miniature_config(static_cast<int>(data.vocab.size()));
  CHECK(mini.d_model == 8);
  EpisodeSet eps(data.train.begin(), data.train.begin() + 3);
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport r = grad_check(mini, data.vocab, eps);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto shapes = zero_params<double>(mini);
  REQUIRE(r.tensors.size() == shapes.tensors().size());
  for (std::size_t i = 0; i < r.tensors.size(); ++i) {
    const auto& e = r.tensors[i];
    const auto n = static_cast<int>(shapes.tensors()[i].second->size());
    INFO(e.tensor);
    CHECK(e.sampled == std::min(n, 25));
    CHECK(e.max_rel_error < 1e-4);
  }
  CHECK(seconds < 60.0);
}

TEST_CASE("checkpoint round trip and validation") {
  Fixture f;
  auto dir = testkit::scratch_dir("ckpt");
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, f.params, f.cfg, f.data.vocab, {{"note", "x"}});
  Checkpoint c = load_checkpoint(path, &f.data.vocab);
  CHECK(c.config == f.cfg);
  CHECK(c.extra["note"] == "x");
  auto a = f.params.tensors();
  auto b = c.params.tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);

  // Tensors start right after the manifest, little-endian float32 in order.
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "CLCKPT01");
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | len_bytes[i];
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  auto j = nlohmann::json::parse(manifest);
  CHECK(j["vocab_hash"] == hash_hex(f.data.vocab.hash()));
  CHECK(j["tensors"][0]["name"] == "embed");
  unsigned char fb[4];
  in.read(reinterpret_cast<char*>(fb), 4);
  std::uint32_t bits = static_cast<std::uint32_t>(fb[0]) | static_cast<std::uint32_t>(fb[1]) << 8 |
                       static_cast<std::uint32_t>(fb[2]) << 16 | static_cast<std::uint32_t>(fb[3]) << 24;
  float first;
  std::memcpy(&first, &bits, 4);
  CHECK(first == f.params.embed(0, 0));

  Vocabulary other({"red", "blue", "green", "yellow", "purple", "cyan"}, f.data.vocab.symbols());
  CHECK_THROWS_AS(load_checkpoint(path, &other), CheckpointError);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("node names round trip") {
  for (const char* s : {"Enc-self-0.5:Z", "Dec-cross-1.5:Q", "Dec-self-0.0:attn_weights", "Enc-0:pos_embed",
                        "Dec-1:mlp_out"}) {
    CHECK(to_string(parse_node(s)) == s);
  }
  CHECK(parse_node("Dec-cross-1.5") == NodeRef::dec_cross(1, 5));
  CHECK(head_name(NodeRef::dec_cross(1, 5, Site::K)) == "Dec-cross-1.5");
  CHECK_THROWS_AS(parse_node("Enc-cross-0.1"), NodeError);
  CHECK_THROWS_AS(parse_node("Dec-self-0.x"), NodeError);
  CHECK_THROWS_AS(validate_node(NodeRef::enc(2, 0), ModelConfig{}), NodeError);
}
