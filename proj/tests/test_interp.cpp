#include <doctest.h>

#include <cmath>
#include <random>

#include "circuitlab/errors.hpp"
#include "circuitlab/interp.hpp"
#include "circuitlab/oracle.hpp"
#include "circuitlab/stats.hpp"
#include "support.hpp"

using namespace circuitlab;

namespace {

struct Lab {
  Dataset data = testkit::small_dataset(31, 120, 30);
  ModelConfig cfg = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  ModelParams params = testkit::random_model(cfg, 9);
  AblationStats stats = AblationStats::compute(params, cfg, data.vocab, data.train);
  PatchEngine engine{params, cfg, data.vocab, &stats, 1};

  EncodedEpisode episode(std::size_t i) const { return encode_episode(data.test[i], data.vocab); }
};

bool same_bits(const Matrix& a, const Matrix& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; }

}  // namespace

TEST_CASE("logit attribution decomposes the logit") {
  Lab lab;
  for (std::size_t i = 0; i < 5; ++i) {
    auto ep = lab.episode(i);
    auto cache = run_with_cache(lab.params, lab.cfg, ep);
    for (int row = 0; row < static_cast<int>(ep.dec_target.size()); ++row) {
      auto a = logit_attribution(lab.params, lab.cfg, cache, row, ep.dec_target[static_cast<std::size_t>(row)]);
      CHECK(a.heads.size() == 2u * 2u * static_cast<std::size_t>(lab.cfg.n_heads));
      double sum = a.embedding_term + a.bias_term + a.mlp_term + a.ln_bias_term;
      for (double t : a.head_terms) sum += t;
      CHECK(std::abs(sum - a.logit) < 1e-3);
      CHECK(a.logit == doctest::Approx(cache.logits(row, ep.dec_target[static_cast<std::size_t>(row)])).epsilon(1e-6));
    }
  }
}

TEST_CASE("R2 matches the analytic value on class means plus noise") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int K = 3, D = 4, n = 30000;
  Eigen::MatrixXd mu(K, D);
  mu << 1.0, -0.5, 0.0, 2.0, -1.0, 0.5, 1.5, 0.0, 0.0, 0.0, -1.5, -2.0;
  Eigen::RowVectorXd grand = mu.colwise().mean();
  double between = 0.0;
  for (int k = 0; k < K; ++k) between += (mu.row(k) - grand).squaredNorm() / K;
  const double analytic = between / (between + D * 1.0);

  Eigen::MatrixXd x(n, D);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % K + 1;
    for (int d = 0; d < D; ++d) x(i, d) = mu(i % K, d) + noise(rng);
  }
  CHECK(std::abs(r2_score(x, labels) - analytic) < 0.02);
}

TEST_CASE("R2 of shuffled labels is near zero") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int n = 500;
  Eigen::MatrixXd x(n, 8);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 3 + 1;
    for (int d = 0; d < 8; ++d) x(i, d) = (i % 3) * 2.0 + noise(rng);
  }
  CHECK(r2_score(x, labels) > 0.5);
  std::shuffle(labels.begin(), labels.end(), rng);
  CHECK(std::abs(r2_score(x, labels)) < 0.05);
}

TEST_CASE("R2 of one-hot labels is exactly one") {
  const int n = 60;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, 3);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 3 + 1;
    x(i, i % 3) = 1.0;
  }
  CHECK(r2_score(x, labels) == 1.0);
}

TEST_CASE("R2 rejects degenerate inputs") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(10, 2);
  CHECK_THROWS_AS(r2_score(x, std::vector<int>(10, 1)), ScoreError);
  CHECK_THROWS_AS(r2_score(Eigen::MatrixXd::Ones(10, 2), {1, 2, 1, 2, 1, 2, 1, 2, 1, 2}), ScoreError);
  CHECK_THROWS_AS(r2_score(x, {1, 2}), ScoreError);
}

TEST_CASE("PCA on points along a line") {
  Eigen::MatrixXd pts(20, 3);
  for (int i = 0; i < 20; ++i) pts.row(i) << i, 2.0 * i, -i;
  auto p = pca_project(pts, 2);
  CHECK(p.rank == 1);
  CHECK(p.reduced_rank);
  CHECK(p.explained_ratio[0] == doctest::Approx(1.0));
  CHECK(std::abs(p.explained_ratio[1]) < 1e-12);
  // The projection onto the first component is the centered position along the line.
  const double scale = std::sqrt(6.0);
  for (int i = 0; i < 20; ++i) CHECK(std::abs(std::abs(p.projections(i, 0)) - std::abs((i - 9.5) * scale)) < 1e-9);
  CHECK_THROWS_AS(pca_project(pts.topRows(2), 2), ScoreError);

  Eigen::MatrixXd full = Eigen::MatrixXd::Random(50, 4);
  auto q = pca_project(full, 2);
  CHECK_FALSE(q.reduced_rank);
  CHECK(q.explained_ratio[0] >= q.explained_ratio[1]);
}

TEST_CASE("attention hits compare the argmax-attended token with the emitted token") {
  Episode e;
  e.question = {"A", "F"};
  e.primitives = {{"A", "red"}, {"B", "blue"}};
  e.functions = {{{"F", 1, {Slot::arg1, Slot::arg1}}, {"B"}}};
  e.target = {"red", "red"};
  Vocabulary v = build_vocab(GrammarConfig{});
  auto enc = encode_episode(e, v);
  // A F | A = red | B = blue | B F = blue blue EOS
  Matrix attn = Matrix::Zero(3, static_cast<Eigen::Index>(enc.prompt.size()));
  attn(0, 5) = 1.0f;   // red
  attn(1, 9) = 0.6f;   // blue
  attn(1, 5) = 0.4f;
  attn(2, 0) = 1.0f;
  auto hits = attention_hits(attn, enc, 3);
  REQUIRE(hits.size() == 2);
  CHECK(hits[0] == 1);
  CHECK(hits[1] == 0);
  CHECK(attention_hits(attn, enc, 1).size() == 1);
}

TEST_CASE("OV alignment and its null") {
  Lab lab;
  const NodeRef head = NodeRef::dec_cross(1, 2);
  const TokenId tok = lab.data.vocab.id("green");
  Vector x = embedding_input(lab.params, tok);
  CHECK(x == lab.params.embed.row(tok).transpose());
  Rng rng(3);
  auto r = ov_unembed_alignment(lab.params, lab.cfg, head, tok, x, 1000, rng);
  const auto& ca = lab.params.decoder[1].cross_attn;
  const int dh = lab.cfg.d_head;
  Eigen::RowVectorXf ov = x.transpose() * ca.w_v.middleCols(2 * dh, dh) * ca.w_o.middleRows(2 * dh, dh);
  CHECK(r.score == doctest::Approx(ov.dot(lab.params.unembed.col(tok))).epsilon(1e-5));
  REQUIRE(r.null.size() == 1000);
  for (double s : r.null) CHECK(std::abs(s - r.score) > 0.0);
  std::vector<double> sorted = r.null;
  CHECK(r.null_p95 == doctest::Approx(percentile(sorted, 0.95)));
}

TEST_CASE("percentile interpolates between order statistics") {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(101 - i);
  CHECK(percentile(v, 0.95) == doctest::Approx(95.05));
  CHECK(percentile(v, 0.0) == 1.0);
  CHECK(percentile(v, 1.0) == 100.0);
}

TEST_CASE("freezing every head output in a patch run reproduces clean logits") {
  Lab lab;
  auto ep = lab.episode(0);
  PatchSpec spec;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < lab.cfg.n_heads; ++h)
      for (const NodeRef& n : {NodeRef::enc(l, h), NodeRef::dec_self(l, h), NodeRef::dec_cross(l, h)}) spec.freeze(n);
  auto o = lab.engine.apply(ep, spec, {NodeRef::dec_cross(1, 0)});
  CHECK((o.patched_logits - o.clean_logits).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK(o.forward_passes == 2);
  CHECK(o.delta.exact_match == 0.0);
}

TEST_CASE("a two-node chain equals path patching bitwise, with the documented pass counts") {
  Lab lab;
  const NodeRef src = NodeRef::enc(0, 1);
  const NodeRef dst = NodeRef::dec_cross(1, 3, Site::K);
  const std::vector<NodeRef> watch{NodeRef::dec_cross(1, 3)};
  for (std::size_t i = 0; i < 4; ++i) {
    auto ep = lab.episode(i);
    const long p0 = lab.engine.forward_passes();
    auto a = lab.engine.path_patch(ep, path_patch_request(src, dst, {}, watch));
    const long p1 = lab.engine.forward_passes();
    auto b = lab.engine.path_patch(ep, chain_request({src, dst}, {}, watch));
    const long p2 = lab.engine.forward_passes();
    CHECK(p1 - p0 == 3);
    CHECK(p2 - p1 == 3);
    CHECK(a.forward_passes == 3);
    CHECK(same_bits(a.patched_logits, b.patched_logits));
    REQUIRE(a.patched_attention.size() == 1);
    CHECK(same_bits(a.patched_attention[0], b.patched_attention[0]));
  }
  auto ep = lab.episode(0);
  for (const auto& chain : std::vector<std::vector<NodeRef>>{
           {NodeRef::enc(0, 1), NodeRef::enc(1, 2, Site::V), NodeRef::dec_cross(1, 3, Site::K)},
           {NodeRef::enc(0, 1), NodeRef::enc(1, 2, Site::V), NodeRef::dec_cross(0, 0, Site::V),
            NodeRef::dec_cross(1, 3, Site::Q)}}) {
    const long before = lab.engine.forward_passes();
    auto o = lab.engine.path_patch(ep, chain_request(chain, {}, watch));
    CHECK(lab.engine.forward_passes() - before == static_cast<long>(chain.size()) + 1);
    CHECK(o.forward_passes == static_cast<int>(chain.size()) + 1);
  }
}

TEST_CASE("path patching without a source effect leaves the model untouched") {
  Lab lab;
  auto ep = lab.episode(1);
  PathPatchRequest req;
  req.receivers = {NodeRef::dec_cross(1, 3, Site::K)};
  req.watched = {NodeRef::dec_cross(1, 3)};
  auto o = lab.engine.path_patch(ep, req);
  CHECK((o.patched_logits - o.clean_logits).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("path patching rejects malformed requests") {
  Lab lab;
  auto ep = lab.episode(0);
  CHECK_THROWS_AS(lab.engine.path_patch(ep, path_patch_request(NodeRef::enc(0, 1), NodeRef::enc(0, 1, Site::Q))),
                  SpecError);
  CHECK_THROWS_AS(
      lab.engine.path_patch(ep, path_patch_request(NodeRef::dec_cross(1, 0), NodeRef::enc(0, 1, Site::Q))), SpecError);
  CHECK_THROWS_AS(lab.engine.path_patch(ep, path_patch_request(NodeRef::enc(0, 1), NodeRef::dec_cross(1, 0, Site::Z))),
                  SpecError);
  CHECK_THROWS_AS(lab.engine.path_patch(ep, chain_request({NodeRef::enc(0, 1)})), SpecError);

  PatchEngine bare(lab.params, lab.cfg, lab.data.vocab);
  CHECK_THROWS_AS(bare.path_patch(ep, path_patch_request(NodeRef::enc(0, 1), NodeRef::dec_cross(1, 0, Site::K))),
                  StatsError);
  CHECK(feeds_directly(NodeRef::enc(0, 1), NodeRef::enc(1, 0, Site::V)));
  CHECK_FALSE(feeds_directly(NodeRef::enc(1, 0), NodeRef::enc(0, 1, Site::V)));
  CHECK(feeds_directly(NodeRef::enc(1, 0), NodeRef::dec_cross(0, 1, Site::K)));
  CHECK_FALSE(feeds_directly(NodeRef::enc(1, 0), NodeRef::dec_cross(0, 1, Site::Q)));
}

TEST_CASE("head scans report controls and rank every candidate") {
  Lab lab;
  std::vector<EncodedEpisode> eps;
  for (std::size_t i = 0; i < 3; ++i) eps.push_back(lab.episode(i));
  std::vector<NodeRef> cands;
  for (int h = 0; h < lab.cfg.n_heads; ++h) cands.push_back(NodeRef::enc(1, h));
  PathPatchRequest route;
  route.receivers = {NodeRef::dec_cross(1, 2, Site::K)};
  route.watched = {NodeRef::dec_cross(1, 2)};
  auto metric = attention_accuracy_metric(NodeRef::dec_cross(1, 2));
  for (ScanMode mode : {ScanMode::keep_only_one, ScanMode::ablate_only_one}) {
    auto scan = head_scan(lab.engine, eps, cands, mode, route, metric);
    CHECK(scan.rows.size() == cands.size());
    CHECK(scan.ranked.size() == cands.size());
    REQUIRE(scan.controls.size() == 2);
    CHECK(scan.controls[0].label == "keep-all");
    CHECK(scan.controls[0].metric == scan.baseline);
    CHECK(scan.controls[1].label == "ablate-all");
    for (std::size_t i = 1; i < scan.rows.size(); ++i) {
      if (mode == ScanMode::keep_only_one)
        CHECK(scan.rows[i - 1].metric >= scan.rows[i].metric);
      else
        CHECK(scan.rows[i - 1].delta <= scan.rows[i].delta);
    }
  }
  CHECK_THROWS_AS(head_scan(lab.engine, eps, {}, ScanMode::keep_only_one, route, metric), SpecError);
}

TEST_CASE("tracing collects exactly the oracle-labelled rows") {
  Lab lab;
  EpisodeSet few(lab.data.test.begin(), lab.data.test.begin() + 10);
  auto t = trace_index_information(lab.engine, few, NodeRef::enc(1, 0), Labeler::index_in_question);
  std::size_t want = 0;
  for (const auto& e : few) want += label_index_in_question(e).size();
  CHECK(t.labels.size() == want);
  CHECK(static_cast<std::size_t>(t.activations.rows()) == want);
  CHECK(t.r2 == doctest::Approx(r2_score(t.activations, t.labels)));

  auto q = trace_index_information(lab.engine, few, NodeRef::dec_cross(1, 0, Site::Q), Labeler::relative_index_on_lhs);
  std::size_t steps = 0;
  for (const auto& e : few) steps += label_relative_index_on_lhs(e).size();
  CHECK(q.labels.size() == steps);
  CHECK_THROWS_AS(trace_index_information(lab.engine, few, NodeRef::dec_cross(1, 0, Site::Q), Labeler::index_in_question),
                  SpecError);
}

TEST_CASE("positional swap: involution, nontrivial once, question positions only") {
  Lab lab;
  const Episode* ep = nullptr;
  for (const auto& e : lab.data.test)
    if (e.question.size() == 3) {
      ep = &e;
      break;
    }
  REQUIRE(ep);
  SwapRequest req;
  req.node = NodeRef::enc(0, 2, Site::V);
  req.output_head = NodeRef::dec_cross(1, 1);
  req.times = 2;
  auto twice = swap_position_intervention(lab.engine, *ep, req);
  CHECK(same_bits(twice.outcome.patched_logits, twice.outcome.clean_logits));
  CHECK(twice.patched_argmax == twice.clean_argmax);

  req.times = 1;
  req.freeze_q = false;
  auto once = swap_position_intervention(lab.engine, *ep, req);
  CHECK((once.outcome.patched_logits - once.outcome.clean_logits).cwiseAbs().maxCoeff() > 0.0f);

  req.pos_b = 1;
  CHECK_THROWS_AS(swap_position_intervention(lab.engine, *ep, req), SpecError);
  req.pos_b = 2;
  req.node = NodeRef::enc(1, 2, Site::V);
  CHECK_THROWS_AS(swap_position_intervention(lab.engine, *ep, req), SpecError);
}

TEST_CASE("mean ablation statistics average the pool position-wise") {
  Lab lab;
  const NodeRef node = NodeRef::enc(0, 3);
  const Eigen::Index cols = lab.cfg.d_model;
  Matrix m = lab.stats.mean_rows(node, 6, cols);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(6, cols);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(6);
  for (const auto& e : lab.data.train) {
    auto c = run_with_cache(lab.params, lab.cfg, encode_episode(e, lab.data.vocab));
    const Matrix& z = c.at(node);
    for (Eigen::Index r = 0; r < std::min<Eigen::Index>(6, z.rows()); ++r) {
      sum.row(r) += z.row(r).cast<double>();
      count(r) += 1;
    }
  }
  for (Eigen::Index r = 0; r < 6; ++r)
    CHECK((m.row(r).cast<double>() - sum.row(r) / count(r)).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(lab.stats.pool().size == lab.data.train.size());
}
