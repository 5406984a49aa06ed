#include "circuitlab/interp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>

#include "circuitlab/errors.hpp"
#include "circuitlab/oracle.hpp"

namespace circuitlab {

EncodedEpisode encode_episode(const Episode& ep, const Vocabulary& vocab) {
  EncodedEpisode e;
  e.prompt = render_prompt(ep, vocab);
  e.dec_input = decoder_input(ep, vocab);
  e.dec_target = decoder_target(ep, vocab);
  e.n_answer = static_cast<int>(ep.target.size());
  return e;
}

ActivationCache run_with_cache(const ModelParams& params, const ModelConfig& cfg, const EncodedEpisode& ep) {
  ForwardOptions opts;
  opts.taps = TapSelector::all();
  return *forward(params, cfg, ep.prompt, ep.dec_input, opts).cache;
}

namespace {

std::vector<NodeRef> all_head_outputs(const ModelConfig& cfg) {
  std::vector<NodeRef> out;
  for (int l = 0; l < cfg.enc_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeRef::enc(l, h));
  for (int l = 0; l < cfg.dec_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeRef::dec_self(l, h));
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeRef::dec_cross(l, h));
  }
  return out;
}

bool prompt_rows(const NodeRef& n) {
  if (n.component == Component::encoder) return true;
  return n.kind == AttnKind::cross && (n.site == Site::K || n.site == Site::V);
}

}  // namespace

// ---------------------------------------------------------------------------
// Logit attribution

LogitAttribution logit_attribution(const ModelParams& params, const ModelConfig& cfg, const ActivationCache& cache,
                                   int row, TokenId target) {
  if (row < 0 || row >= cache.logits.rows()) throw BoundsError("attribution row outside the decoder sequence");
  if (target < 0 || target >= cfg.vocab_size) throw BoundsError("attribution target outside the vocabulary");
  const Eigen::VectorXd u = params.unembed.col(target).cast<double>();
  const Eigen::VectorXd gu = params.dec_final.gain.row(0).transpose().cast<double>().cwiseProduct(u);
  const double rstd = cache.final_ln_rstd(row);
  auto term = [&](const Eigen::RowVectorXf& c) {
    Eigen::RowVectorXd v = c.cast<double>();
    v.array() -= v.mean();
    return rstd * v.dot(gu.transpose());
  };

  LogitAttribution a;
  a.embedding_term = term(cache.at(NodeRef::layer_site(Component::decoder, 0, Site::resid_pre)).row(row));
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const auto& layer = params.decoder[static_cast<std::size_t>(l)];
    for (AttnKind kind : {AttnKind::self, AttnKind::cross}) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        NodeRef n{Component::decoder, kind, l, h, Site::Z};
        a.heads.push_back(n);
        a.head_terms.push_back(term(cache.at(n).row(row)));
      }
      a.bias_term += term(kind == AttnKind::self ? layer.self_attn.b_o.row(0) : layer.cross_attn.b_o.row(0));
    }
    a.mlp_term += term(cache.at(NodeRef::layer_site(Component::decoder, l, Site::mlp_out)).row(row));
  }
  a.ln_bias_term = params.dec_final.bias.row(0).cast<double>().dot(u.transpose());
  a.logit = cache.logits(row, target);
  const double total = std::accumulate(a.head_terms.begin(), a.head_terms.end(), 0.0) + a.embedding_term + a.bias_term +
                       a.mlp_term + a.ln_bias_term;
  a.reconstruction_error = std::abs(total - a.logit);
  return a;
}

HeadAttributionTable mean_head_attribution(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                           const EpisodeSet& episodes, int step) {
  if (step < 1) throw BoundsError("decoder steps are 1-based");
  HeadAttributionTable t;
  t.step = step;
  int n = 0;
  for (const auto& ep : episodes) {
    auto enc = encode_episode(ep, vocab);
    if (step > static_cast<int>(enc.dec_target.size())) continue;
    auto cache = run_with_cache(params, cfg, enc);
    auto a = logit_attribution(params, cfg, cache, step - 1, enc.dec_target[static_cast<std::size_t>(step - 1)]);
    if (t.heads.empty()) {
      t.heads = a.heads;
      t.mean_terms.assign(a.heads.size(), 0.0);
    }
    for (std::size_t i = 0; i < a.head_terms.size(); ++i) t.mean_terms[i] += a.head_terms[i];
    t.mean_logit += a.logit;
    t.max_reconstruction_error = std::max(t.max_reconstruction_error, a.reconstruction_error);
    ++n;
  }
  if (n == 0) throw EmptyPopulationError("no episode reaches decoder step " + std::to_string(step));
  for (auto& v : t.mean_terms) v /= n;
  t.mean_logit /= n;
  return t;
}

// ---------------------------------------------------------------------------
// Attention accuracy

std::vector<char> attention_hits(const Matrix& attn, const EncodedEpisode& ep, int first_k) {
  if (attn.cols() != static_cast<Eigen::Index>(ep.prompt.size()))
    throw BoundsError("attention accuracy needs a decoder cross-attention pattern");
  const int steps = std::min(ep.n_answer, first_k);
  std::vector<char> hits;
  for (int t = 1; t <= steps && t <= attn.rows(); ++t) {
    const int pos = argmax_lowest(attn.row(t - 1));
    hits.push_back(ep.prompt[static_cast<std::size_t>(pos)] == ep.dec_target[static_cast<std::size_t>(t - 1)]);
  }
  return hits;
}

StepAccuracy attention_accuracy(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                const EpisodeSet& episodes, const NodeRef& node, int first_k) {
  const NodeRef a = node.with_site(Site::attn_weights);
  validate_node(a, cfg);
  if (a.component != Component::decoder || a.kind != AttnKind::cross)
    throw NodeError("attention accuracy is defined for decoder cross heads: " + to_string(node));
  StepAccuracy out;
  out.accuracy.assign(static_cast<std::size_t>(first_k), 0.0);
  out.counted.assign(static_cast<std::size_t>(first_k), 0);
  ForwardOptions opts;
  opts.taps = TapSelector::only({a});
  long hits_total = 0, counted_total = 0;
  for (const auto& ep : episodes) {
    auto enc = encode_episode(ep, vocab);
    auto fwd = forward(params, cfg, enc.prompt, enc.dec_input, opts);
    auto hits = attention_hits(fwd.cache->at(a), enc, first_k);
    for (std::size_t t = 0; t < hits.size(); ++t) {
      out.accuracy[t] += hits[t];
      out.counted[t] += 1;
      hits_total += hits[t];
      ++counted_total;
    }
  }
  for (std::size_t t = 0; t < out.accuracy.size(); ++t) {
    if (out.counted[t] > 0) out.accuracy[t] /= out.counted[t];
  }
  out.overall = counted_total ? static_cast<double>(hits_total) / counted_total : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// OV alignment

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ScoreError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

AlignmentResult ov_unembed_alignment(const ModelParams& params, const ModelConfig& cfg, const NodeRef& node,
                                     TokenId token, const Vector& x, int n_null, Rng& rng) {
  if (token < 0 || token >= cfg.vocab_size) throw BoundsError("alignment token outside the vocabulary");
  if (n_null < 1 || cfg.vocab_size < 2) throw ScoreError("alignment null needs at least one draw");
  const Vector ov = ov_transform(params, cfg, node, x);
  AlignmentResult r;
  r.token = token;
  r.score = ov.cast<double>().dot(params.unembed.col(token).cast<double>());
  std::uniform_int_distribution<int> pick(0, cfg.vocab_size - 2);
  for (int i = 0; i < n_null; ++i) {
    int j = pick(rng);
    if (j >= token) ++j;
    r.null.push_back(ov.cast<double>().dot(params.unembed.col(j).cast<double>()));
  }
  r.null_p95 = percentile(r.null, 0.95);
  r.null_mean = std::accumulate(r.null.begin(), r.null.end(), 0.0) / n_null;
  return r;
}

Vector embedding_input(const ModelParams& params, TokenId token) {
  if (token < 0 || token >= params.embed.rows()) throw BoundsError("token outside the vocabulary");
  return params.embed.row(token).transpose();
}

Vector mean_encoder_output(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const EpisodeSet& episodes, TokenId token) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(cfg.d_model);
  long n = 0;
  ForwardOptions opts;
  opts.taps = TapSelector::only({});
  for (const auto& ep : episodes) {
    auto enc = encode_episode(ep, vocab);
    if (std::find(enc.prompt.begin(), enc.prompt.end(), token) == enc.prompt.end()) continue;
    auto fwd = forward(params, cfg, enc.prompt, enc.dec_input, opts);
    for (std::size_t p = 0; p < enc.prompt.size(); ++p) {
      if (enc.prompt[p] != token) continue;
      sum += fwd.cache->enc_out.row(static_cast<Eigen::Index>(p)).transpose().cast<double>();
      ++n;
    }
  }
  if (n == 0) throw EmptyPopulationError("token " + vocab.token(token) + " never occurs in the sample");
  return (sum / static_cast<double>(n)).cast<float>();
}

// ---------------------------------------------------------------------------
// Patching

PatchMetrics compute_metrics(const Matrix& logits, const std::vector<Matrix>& attention,
                             const std::vector<NodeRef>& watched, const EncodedEpisode& ep) {
  PatchMetrics m;
  bool all = true;
  double logit_sum = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const TokenId gold = ep.dec_target[static_cast<std::size_t>(r)];
    all = all && argmax_lowest(logits.row(r)) == gold;
    logit_sum += logits(r, gold);
  }
  m.exact_match = all ? 1.0 : 0.0;
  m.correct_logit = logit_sum / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < watched.size(); ++i) {
    const NodeRef& n = watched[i];
    if (n.component != Component::decoder || n.kind != AttnKind::cross) continue;
    auto hits = attention_hits(attention[i], ep, ep.n_answer);
    if (hits.empty()) continue;
    m.attention_accuracy[head_name(n)] =
        static_cast<double>(std::count(hits.begin(), hits.end(), 1)) / static_cast<double>(hits.size());
  }
  return m;
}

nlohmann::json to_json(const PatchMetrics& m) {
  return {{"exact_match", m.exact_match}, {"correct_logit", m.correct_logit}, {"attention_accuracy", m.attention_accuracy}};
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json to_json(const PatchOutcome& o, const Vocabulary& vocab) {
  nlohmann::json watched = nlohmann::json::array();
  for (std::size_t i = 0; i < o.watched.size(); ++i) {
    watched.push_back({{"node", to_string(o.watched[i])},
                       {"clean", matrix_json(o.clean_attention[i])},
                       {"patched", matrix_json(o.patched_attention[i])}});
  }
  return {{"prompt", vocab.decode(o.episode.prompt)},
          {"decoder_input", vocab.decode(o.episode.dec_input)},
          {"target", vocab.decode(o.episode.dec_target)},
          {"clean_logits", matrix_json(o.clean_logits)},
          {"patched_logits", matrix_json(o.patched_logits)},
          {"watched", watched},
          {"clean", to_json(o.clean)},
          {"patched", to_json(o.patched)},
          {"delta", to_json(o.delta)},
          {"forward_passes", o.forward_passes}};
}

PathPatchRequest path_patch_request(const NodeRef& source, const NodeRef& target, std::vector<NodeRef> freeze,
                                    std::vector<NodeRef> watched, PatchAction ablation) {
  PathPatchRequest r;
  r.sources = {source};
  r.receivers = {target};
  r.ablation = ablation;
  r.freeze = std::move(freeze);
  r.watched = std::move(watched);
  return r;
}

PathPatchRequest chain_request(const std::vector<NodeRef>& chain, std::vector<NodeRef> freeze,
                               std::vector<NodeRef> watched, PatchAction ablation) {
  if (chain.size() < 2) throw SpecError("a chain needs at least two nodes");
  PathPatchRequest r;
  r.sources = {chain.front().with_site(Site::Z)};
  r.receivers.assign(chain.begin() + 1, chain.end());
  r.ablation = ablation;
  r.freeze = std::move(freeze);
  r.watched = std::move(watched);
  return r;
}

bool feeds_directly(const NodeRef& sender, const NodeRef& receiver) {
  if (!sender.is_head_site()) return false;
  if (receiver.site == Site::logits) return sender.component == Component::decoder;
  if (sender.component == Component::encoder) {
    if (receiver.component == Component::encoder) return receiver.layer > sender.layer;
    return receiver.kind == AttnKind::cross && (receiver.site == Site::K || receiver.site == Site::V);
  }
  if (receiver.component == Component::encoder) return false;
  const int s = sender.layer * 2 + (sender.kind == AttnKind::cross ? 1 : 0);
  int r = receiver.layer * 2;
  if (receiver.is_head_site() && receiver.kind == AttnKind::cross) {
    if (receiver.site == Site::K || receiver.site == Site::V) return false;
    r += 1;
  } else if (!receiver.is_head_site()) {
    r = receiver.site == Site::mlp_out ? receiver.layer * 2 + 2 : receiver.layer * 2;
  }
  return s < r;
}

PatchEngine::PatchEngine(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                         const AblationSource* ablation, std::uint64_t seed)
    : params_(params), cfg_(cfg), vocab_(vocab), ablation_(ablation), rng_(seed) {}

ForwardResult<float> PatchEngine::run(const EncodedEpisode& ep, const PatchSpec& spec, const ActivationCache* clean,
                                      TapSelector taps) {
  ForwardOptions opts;
  opts.patches = &spec;
  opts.context = PatchContext{clean, ablation_, &rng_};
  opts.taps = std::move(taps);
  ++passes_;
  return forward(params_, cfg_, ep.prompt, ep.dec_input, opts);
}

ActivationCache PatchEngine::clean_cache(const EncodedEpisode& ep) {
  return *run(ep, PatchSpec{}, nullptr, TapSelector::all()).cache;
}

PatchOutcome PatchEngine::finish(const EncodedEpisode& ep, const ActivationCache& clean,
                                 const ForwardResult<float>& patched, const std::vector<NodeRef>& watched) {
  PatchOutcome o;
  o.episode = ep;
  for (const auto& w : watched) o.watched.push_back(w.with_site(Site::attn_weights));
  o.clean_logits = clean.logits;
  o.patched_logits = patched.logits;
  for (const auto& w : o.watched) {
    o.clean_attention.push_back(clean.at(w));
    o.patched_attention.push_back(patched.cache->at(w));
  }
  o.clean = compute_metrics(o.clean_logits, o.clean_attention, o.watched, ep);
  o.patched = compute_metrics(o.patched_logits, o.patched_attention, o.watched, ep);
  o.delta.exact_match = o.patched.exact_match - o.clean.exact_match;
  o.delta.correct_logit = o.patched.correct_logit - o.clean.correct_logit;
  for (const auto& [k, v] : o.patched.attention_accuracy) o.delta.attention_accuracy[k] = v - o.clean.attention_accuracy.at(k);
  return o;
}

PatchOutcome PatchEngine::apply(const EncodedEpisode& ep, const PatchSpec& spec, const std::vector<NodeRef>& watched) {
  spec.validate(cfg_);
  std::vector<NodeRef> taps;
  for (const auto& w : watched) {
    validate_node(w.with_site(Site::attn_weights), cfg_);
    taps.push_back(w.with_site(Site::attn_weights));
  }
  const long start = passes_;
  ActivationCache clean = clean_cache(ep);
  auto patched = run(ep, spec, &clean, TapSelector::only(taps));
  PatchOutcome o = finish(ep, clean, patched, watched);
  o.forward_passes = static_cast<int>(passes_ - start);
  return o;
}

PatchOutcome PatchEngine::path_patch(const EncodedEpisode& ep, const PathPatchRequest& req) {
  if (req.receivers.empty()) throw SpecError("path patching needs at least one receiver");
  if (req.ablation != PatchAction::mean_ablate && req.ablation != PatchAction::random_sample_ablate)
    throw SpecError("path patching ablates by mean or random sample, not " + to_string(req.ablation));
  if (req.ablate_others.size() > req.receivers.size()) throw SpecError("more ablate_others entries than hops");
  for (const auto& s : req.sources) {
    validate_node(s, cfg_);
    if (s.site != Site::Z) throw SpecError("path-patch sources must be head outputs (Z): " + to_string(s));
  }
  for (const auto& hop : req.ablate_others) {
    for (const auto& s : hop) {
      validate_node(s, cfg_);
      if (s.site != Site::Z) throw SpecError("ablated nodes must be head outputs (Z): " + to_string(s));
    }
  }
  for (const auto& r : req.receivers) {
    validate_node(r, cfg_);
    if (!(r.site == Site::Q || r.site == Site::K || r.site == Site::V))
      throw SpecError("receivers must be head inputs (Q, K or V): " + to_string(r));
  }
  for (const auto& s : req.sources) {
    if (s.same_head(req.receivers.front())) throw SpecError("source and target are the same head: " + head_name(s));
  }
  if (!req.sources.empty() && std::none_of(req.sources.begin(), req.sources.end(), [&](const NodeRef& s) {
        return feeds_directly(s, req.receivers.front());
      })) {
    throw SpecError("no source feeds " + to_string(req.receivers.front()));
  }
  for (std::size_t i = 1; i < req.receivers.size(); ++i) {
    if (!feeds_directly(req.receivers[i - 1].with_site(Site::Z), req.receivers[i]))
      throw SpecError("disconnected chain: " + head_name(req.receivers[i - 1]) + " does not feed " +
                      to_string(req.receivers[i]));
  }
  for (const auto& f : req.freeze) {
    validate_node(f, cfg_);
    if (f == req.receivers.back()) throw SpecError("the final receiver cannot also be frozen: " + to_string(f));
  }
  const bool ablates = !req.sources.empty() ||
                       std::any_of(req.ablate_others.begin(), req.ablate_others.end(), [](const auto& v) { return !v.empty(); });
  if (ablates && !ablation_) throw StatsError("path patching needs ablation statistics");

  const long start = passes_;
  ActivationCache clean = clean_cache(ep);
  const auto heads = all_head_outputs(cfg_);
  Matrix carried;
  for (std::size_t i = 0; i < req.receivers.size(); ++i) {
    std::set<NodeRef> ablated;
    if (i == 0) ablated.insert(req.sources.begin(), req.sources.end());
    if (i < req.ablate_others.size()) ablated.insert(req.ablate_others[i].begin(), req.ablate_others[i].end());
    PatchSpec spec;
    for (const auto& z : heads) {
      if (ablated.count(z)) {
        spec.add({z, req.ablation, {}, {}, false, {}});
      } else if (i > 0 && z.same_head(req.receivers[i - 1])) {
        continue;
      } else {
        spec.freeze(z);
      }
    }
    if (i > 0) spec.replace(req.receivers[i - 1], carried);
    auto hop = run(ep, spec, &clean, TapSelector::only({req.receivers[i]}));
    carried = hop.cache->at(req.receivers[i]);
  }

  PatchSpec final_spec;
  final_spec.replace(req.receivers.back(), carried);
  for (const auto& f : req.freeze) final_spec.freeze(f);
  std::vector<NodeRef> taps;
  for (const auto& w : req.watched) taps.push_back(w.with_site(Site::attn_weights));
  auto patched = run(ep, final_spec, &clean, TapSelector::only(taps));
  PatchOutcome o = finish(ep, clean, patched, req.watched);
  o.forward_passes = static_cast<int>(passes_ - start);
  return o;
}

// ---------------------------------------------------------------------------
// Head scans

std::string to_string(ScanMode m) { return m == ScanMode::keep_only_one ? "keep_only_one" : "ablate_only_one"; }

ScanMode parse_scan_mode(std::string_view s) {
  if (s == "keep_only_one") return ScanMode::keep_only_one;
  if (s == "ablate_only_one") return ScanMode::ablate_only_one;
  throw SpecError("unknown scan mode: " + std::string(s));
}

OutcomeMetric attention_accuracy_metric(const NodeRef& head) {
  const std::string key = head_name(head);
  return [key](const PatchOutcome& o) {
    auto it = o.patched.attention_accuracy.find(key);
    if (it == o.patched.attention_accuracy.end()) throw SpecError("outcome does not watch " + key);
    return it->second;
  };
}

HeadScan head_scan(PatchEngine& engine, const std::vector<EncodedEpisode>& episodes,
                   const std::vector<NodeRef>& candidates, ScanMode mode, const PathPatchRequest& route,
                   const OutcomeMetric& metric) {
  if (candidates.empty()) throw SpecError("head scan needs at least one candidate");
  if (episodes.empty()) throw SpecError("head scan needs at least one episode");
  auto score = [&](std::vector<NodeRef> sources) {
    PathPatchRequest req = route;
    req.sources = std::move(sources);
    double sum = 0.0;
    for (const auto& ep : episodes) sum += metric(engine.path_patch(ep, req));
    return sum / static_cast<double>(episodes.size());
  };

  HeadScan scan;
  scan.mode = mode;
  scan.baseline = score({});
  scan.controls.push_back({"keep-all", scan.baseline, 0.0});
  const double all = score(candidates);
  scan.controls.push_back({"ablate-all", all, all - scan.baseline});

  std::vector<std::pair<double, NodeRef>> results;
  for (const auto& c : candidates) {
    std::vector<NodeRef> sources;
    if (mode == ScanMode::keep_only_one) {
      for (const auto& o : candidates)
        if (!(o == c)) sources.push_back(o);
    } else {
      sources = {c};
    }
    results.emplace_back(score(sources), c);
  }
  std::stable_sort(results.begin(), results.end(), [&](const auto& a, const auto& b) {
    return mode == ScanMode::keep_only_one ? a.first > b.first : a.first < b.first;
  });
  for (const auto& [m, c] : results) {
    scan.rows.push_back({head_name(c), m, m - scan.baseline});
    scan.ranked.push_back(c);
  }
  return scan;
}

nlohmann::json to_json(const HeadScan& s) {
  auto rows = [](const std::vector<ScanRow>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : v) out.push_back({{"head", r.label}, {"metric", r.metric}, {"delta", r.delta}});
    return out;
  };
  return {{"mode", to_string(s.mode)}, {"baseline", s.baseline}, {"controls", rows(s.controls)}, {"rows", rows(s.rows)}};
}

// ---------------------------------------------------------------------------
// PCA and R²

PcaResult pca_project(const Eigen::MatrixXd& points, int k) {
  if (k < 1) throw ScoreError("pca needs k >= 1");
  if (points.rows() < k + 1) throw ScoreError("pca needs at least k + 1 points");
  Eigen::MatrixXd centered = points.rowwise() - points.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double total = s.squaredNorm();
  PcaResult r;
  r.projections = Eigen::MatrixXd::Zero(points.rows(), k);
  const double tol = s.size() > 0 ? s(0) * 1e-10 : 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol && s(i) > 0.0) ++r.rank;
  }
  for (int i = 0; i < k; ++i) {
    if (i < s.size() && i < r.rank) {
      r.projections.col(i) = svd.matrixU().col(i) * s(i);
      r.explained_ratio.push_back(total > 0 ? s(i) * s(i) / total : 0.0);
    } else {
      r.explained_ratio.push_back(0.0);
    }
  }
  r.reduced_rank = r.rank < k;
  return r;
}

double r2_score(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw ScoreError("one label per activation row");
  std::map<int, std::pair<Eigen::RowVectorXd, long>> classes;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto& [sum, n] = classes[labels[static_cast<std::size_t>(i)]];
    if (n == 0) sum = Eigen::RowVectorXd::Zero(x.cols());
    sum += x.row(i);
    ++n;
  }
  if (classes.size() < 2) throw ScoreError("R² is undefined with fewer than two distinct labels");
  std::map<int, Eigen::RowVectorXd> means;
  for (const auto& [label, sn] : classes) means[label] = sn.first / static_cast<double>(sn.second);
  const Eigen::RowVectorXd grand = x.colwise().mean();
  double ss_res = 0.0, ss_tot = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    ss_res += (x.row(i) - means[labels[static_cast<std::size_t>(i)]]).squaredNorm();
    ss_tot += (x.row(i) - grand).squaredNorm();
  }
  if (!(ss_tot > 0.0)) throw ScoreError("R² is undefined for activations without variance");
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Index tracing

std::string to_string(Labeler l) {
  return l == Labeler::index_in_question ? "index_in_question" : "relative_index_on_lhs";
}

Labeler parse_labeler(std::string_view s) {
  if (s == "index_in_question") return Labeler::index_in_question;
  if (s == "relative_index_on_lhs") return Labeler::relative_index_on_lhs;
  throw SpecError("unknown labeler: " + std::string(s));
}

std::string to_string(TokenFilter f) {
  switch (f) {
    case TokenFilter::all:
      return "all";
    case TokenFilter::colors:
      return "colors";
    case TokenFilter::symbols:
      return "symbols";
  }
  return "?";
}

TokenFilter parse_token_filter(std::string_view s) {
  for (auto f : {TokenFilter::all, TokenFilter::colors, TokenFilter::symbols})
    if (to_string(f) == s) return f;
  throw SpecError("unknown token filter: " + std::string(s));
}

TraceResult trace_index_information(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& node,
                                    Labeler labeler, TokenFilter filter, const PatchSpec& ablation) {
  const ModelConfig& cfg = engine.config();
  const Vocabulary& vocab = engine.vocab();
  validate_node(node, cfg);
  if (node.site == Site::attn_weights || node.site == Site::logits)
    throw SpecError("trace needs a vector-valued site, got " + to_string(node));
  const bool on_prompt = prompt_rows(node);
  if (on_prompt != (labeler == Labeler::index_in_question))
    throw SpecError("labeler " + to_string(labeler) + " does not index the rows of " + to_string(node));
  ablation.validate(cfg);
  const bool needs_clean = std::any_of(ablation.directives.begin(), ablation.directives.end(), [](const auto& d) {
    return d.action == PatchAction::freeze_from_clean;
  });

  TraceResult r;
  r.node = node;
  r.labeler = labeler;
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& ep : episodes) {
    auto labels = labeler == Labeler::index_in_question ? label_index_in_question(ep) : label_relative_index_on_lhs(ep);
    if (labels.empty()) continue;
    auto enc = encode_episode(ep, vocab);
    std::optional<ActivationCache> clean;
    if (needs_clean) clean = engine.clean_cache(enc);
    auto fwd = engine.run(enc, ablation, clean ? &*clean : nullptr, TapSelector::only({node}));
    const Matrix& m = fwd.cache->at(node);
    for (const auto& [key, label] : labels) {
      const Eigen::Index row = on_prompt ? static_cast<Eigen::Index>(key) : static_cast<Eigen::Index>(key) - 1;
      const TokenId tok = on_prompt ? enc.prompt[key] : enc.dec_input[key - 1];
      if (filter == TokenFilter::colors && !vocab.is_color(tok)) continue;
      if (filter == TokenFilter::symbols && !vocab.is_symbol(tok)) continue;
      if (row >= m.rows()) continue;
      rows.push_back(m.row(row).cast<double>());
      r.labels.push_back(label.value);
      r.tokens.push_back(vocab.token(tok));
    }
  }
  if (rows.empty()) throw EmptyPopulationError("no labeled rows for " + to_string(node));
  r.activations.resize(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) r.activations.row(static_cast<Eigen::Index>(i)) = rows[i];
  if (r.activations.rows() >= 3) r.pca = pca_project(r.activations, 2);
  r.r2 = r2_score(r.activations, r.labels);
  return r;
}

// ---------------------------------------------------------------------------
// Swap

SwapResult swap_position_intervention(PatchEngine& engine, const Episode& ep, const SwapRequest& req) {
  const ModelConfig& cfg = engine.config();
  const Vocabulary& vocab = engine.vocab();
  validate_node(req.node, cfg);
  if (req.node.component != Component::encoder || req.node.layer != 0 ||
      !(req.node.site == Site::Q || req.node.site == Site::K || req.node.site == Site::V))
    throw SpecError("positional swaps act on a layer-0 encoder head's Q, K or V: " + to_string(req.node));
  validate_node(req.output_head, cfg);
  if (req.output_head.component != Component::decoder || req.output_head.kind != AttnKind::cross)
    throw SpecError("the watched output head must be a decoder cross head");
  const int qlen = static_cast<int>(ep.question.size());
  for (int p : {req.pos_a, req.pos_b}) {
    if (p < 0 || p >= qlen || p == 1) throw SpecError("swap position " + std::to_string(p) + " is not a question symbol");
  }
  if (req.times < 1) throw SpecError("swap must be applied at least once");

  const EncodedEpisode enc = encode_episode(ep, vocab);
  const int n = static_cast<int>(enc.prompt.size());
  const auto t = transposition(n, req.pos_a, req.pos_b);
  auto perm = t;
  for (int i = 1; i < req.times; ++i) perm = compose_permutations(perm, t);

  PatchSpec spec;
  spec.add({req.node, PatchAction::permute_positions, {}, perm, true, {}});
  if (req.freeze_q) spec.freeze(req.output_head.with_site(Site::Q));

  SwapResult r;
  r.outcome = engine.apply(enc, spec, {req.output_head});
  const Matrix& clean = r.outcome.clean_attention.front();
  const Matrix& patched = r.outcome.patched_attention.front();
  r.clean_argmax = argmax_lowest(clean.row(0));
  r.patched_argmax = argmax_lowest(patched.row(0));

  // The color bound to the other question symbol, per answer step.
  auto other_color = [&](const std::string& gold) -> std::string {
    if (qlen < 3) return {};
    const std::string& c0 = ep.color_of(ep.question[0]);
    const std::string& c2 = ep.color_of(ep.question[2]);
    if (c0 == c2) return {};
    if (gold == c0) return c2;
    if (gold == c2) return c0;
    return {};
  };
  r.expected = other_color(ep.target.front());
  r.consistent = !r.expected.empty() && vocab.token(enc.prompt[static_cast<std::size_t>(r.patched_argmax)]) == r.expected;
  int hits = 0, steps = 0;
  for (int s = 0; s < enc.n_answer; ++s) {
    const std::string want = other_color(ep.target[static_cast<std::size_t>(s)]);
    if (want.empty()) continue;
    ++steps;
    const int pos = argmax_lowest(patched.row(s));
    hits += vocab.token(enc.prompt[static_cast<std::size_t>(pos)]) == want;
  }
  r.steps_consistent = steps ? static_cast<double>(hits) / steps : 0.0;
  return r;
}

}  // namespace circuitlab
