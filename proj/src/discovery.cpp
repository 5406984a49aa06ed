#include "circuitlab/discovery.hpp"

#include <algorithm>
#include <cmath>

#include "circuitlab/errors.hpp"

namespace circuitlab {

namespace {

EpisodeSet head_of(const EpisodeSet& episodes, std::size_t n) {
  return EpisodeSet(episodes.begin(), episodes.begin() + static_cast<std::ptrdiff_t>(std::min(n, episodes.size())));
}

std::vector<EncodedEpisode> encode_all(const EpisodeSet& episodes, const Vocabulary& vocab) {
  std::vector<EncodedEpisode> out;
  for (const auto& ep : episodes) out.push_back(encode_episode(ep, vocab));
  return out;
}

std::vector<NodeRef> encoder_heads(const ModelConfig& cfg, int only_layer = -1) {
  std::vector<NodeRef> out;
  for (int l = 0; l < cfg.enc_layers; ++l) {
    if (only_layer >= 0 && l != only_layer) continue;
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeRef::enc(l, h));
  }
  return out;
}

nlohmann::json names(const std::vector<NodeRef>& nodes) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& n : nodes) out.push_back(head_name(n));
  return out;
}

std::vector<NodeRef> parse_names(const nlohmann::json& j) {
  std::vector<NodeRef> out;
  for (const auto& s : j) out.push_back(parse_node(s.get<std::string>()));
  return out;
}

PatchSpec mean_ablation_of(const std::vector<NodeRef>& heads) {
  PatchSpec spec;
  for (const auto& h : heads) spec.mean_ablate(h.with_site(Site::Z));
  return spec;
}

}  // namespace

OutputHeadReport find_output_head(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                  const EpisodeSet& episodes, const DiscoveryOptions& opts) {
  const EpisodeSet sample = head_of(episodes, opts.n_episodes);
  OutputHeadReport r;
  r.attribution = mean_head_attribution(params, cfg, vocab, sample, 1);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.attribution.heads.size(); ++i) {
    const NodeRef& h = r.attribution.heads[i];
    if (h.kind != AttnKind::cross || h.layer != cfg.dec_layers - 1) continue;
    if (r.attribution.mean_terms[i] > best) {
      best = r.attribution.mean_terms[i];
      r.output_head = h;
    }
  }
  r.accuracy = attention_accuracy(params, cfg, vocab, sample, r.output_head, 3);
  Rng rng(opts.seed);
  for (const auto& color : vocab.colors()) {
    const TokenId tok = vocab.id(color);
    const Vector x = mean_encoder_output(params, cfg, vocab, sample, tok);
    r.alignment.push_back(ov_unembed_alignment(params, cfg, r.output_head, tok, x, opts.n_null, rng));
  }
  return r;
}

KCircuitReport discover_k_circuit(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& output_head,
                                  const DiscoveryOptions& opts) {
  const ModelConfig& cfg = engine.config();
  const auto sample = encode_all(head_of(episodes, opts.n_episodes), engine.vocab());
  const auto metric = attention_accuracy_metric(output_head);
  KCircuitReport r;

  PathPatchRequest to_k;
  to_k.receivers = {output_head.with_site(Site::K)};
  to_k.freeze = {output_head.with_site(Site::Q)};
  to_k.watched = {output_head};
  r.pairing_scan = head_scan(engine, sample, encoder_heads(cfg), ScanMode::keep_only_one, to_k, metric);
  for (const auto& h : r.pairing_scan.ranked) {
    if (h.layer == cfg.enc_layers - 1) {
      r.primitive_pairing = h;
      break;
    }
  }

  PathPatchRequest via_pairing = to_k;
  via_pairing.receivers = {r.primitive_pairing.with_site(Site::V), output_head.with_site(Site::K)};
  r.broadcast_scan = head_scan(engine, sample, encoder_heads(cfg, 0), ScanMode::keep_only_one, via_pairing, metric);
  r.question_broadcast = r.broadcast_scan.ranked.front();
  return r;
}

QCircuitReport discover_q_circuit(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& output_head,
                                  const DiscoveryOptions& opts) {
  const ModelConfig& cfg = engine.config();
  const auto sample = encode_all(head_of(episodes, opts.n_episodes), engine.vocab());
  const auto metric = attention_accuracy_metric(output_head);
  QCircuitReport r;

  std::vector<NodeRef> scanners;
  for (int h = 0; h < cfg.n_heads; ++h) scanners.push_back(NodeRef::dec_cross(0, h));
  PathPatchRequest to_q;
  to_q.receivers = {output_head.with_site(Site::Q)};
  to_q.watched = {output_head};
  r.scanner_scan = head_scan(engine, sample, scanners, ScanMode::keep_only_one, to_q, metric);
  r.rhs_scanner = r.scanner_scan.ranked.front();

  PathPatchRequest via_scanner = to_q;
  via_scanner.receivers = {r.rhs_scanner.with_site(Site::V), output_head.with_site(Site::Q)};
  r.retrieval_scan = head_scan(engine, sample, encoder_heads(cfg), ScanMode::ablate_only_one, via_scanner, metric);
  for (std::size_t i = 0; i < std::min<std::size_t>(2, r.retrieval_scan.ranked.size()); ++i)
    r.retrieval.push_back(r.retrieval_scan.ranked[i]);
  return r;
}

std::vector<NodeRef> head_group(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                const EpisodeSet& episodes, const NodeRef& lead, double threshold) {
  const NodeRef lead_z = lead.with_site(Site::Z);
  std::vector<NodeRef> peers;
  const int layers = lead.component == Component::encoder ? cfg.enc_layers : cfg.dec_layers;
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) peers.push_back({lead.component, lead.kind, l, h, Site::attn_weights});

  std::vector<std::vector<double>> flat(peers.size());
  ForwardOptions opts;
  opts.taps = TapSelector::only(peers);
  for (const auto& ep : episodes) {
    auto enc = encode_episode(ep, vocab);
    auto fwd = forward(params, cfg, enc.prompt, enc.dec_input, opts);
    for (std::size_t i = 0; i < peers.size(); ++i) {
      const Matrix& m = fwd.cache->at(peers[i]);
      flat[i].insert(flat[i].end(), m.data(), m.data() + m.size());
    }
  }
  std::size_t li = 0;
  while (li < peers.size() && !peers[li].same_head(lead_z)) ++li;
  if (li == peers.size()) throw NodeError("lead head not found: " + head_name(lead));

  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
  };
  std::vector<NodeRef> group{lead_z};
  for (std::size_t i = 0; i < peers.size(); ++i) {
    if (i == li) continue;
    if (cosine(flat[li], flat[i]) > threshold) group.push_back(peers[i].with_site(Site::Z));
  }
  return group;
}

nlohmann::json to_json(const CircuitRoles& r) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [k, v] : r.groups) groups[k] = names(v);
  return {{"output_head", head_name(r.output_head)},
          {"primitive_pairing", head_name(r.primitive_pairing)},
          {"question_broadcast", head_name(r.question_broadcast)},
          {"rhs_scanner", head_name(r.rhs_scanner)},
          {"retrieval", names(r.retrieval)},
          {"groups", groups}};
}

CircuitRoles roles_from_json(const nlohmann::json& j) {
  CircuitRoles r;
  try {
    r.output_head = parse_node(j.at("output_head").get<std::string>());
    r.primitive_pairing = parse_node(j.at("primitive_pairing").get<std::string>());
    r.question_broadcast = parse_node(j.at("question_broadcast").get<std::string>());
    r.rhs_scanner = parse_node(j.at("rhs_scanner").get<std::string>());
    r.retrieval = parse_names(j.at("retrieval"));
    if (j.contains("groups"))
      for (const auto& [k, v] : j.at("groups").items()) r.groups[k] = parse_names(v);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("roles: ") + e.what());
  }
  return r;
}

TracingReport trace_circuits(PatchEngine& engine, const EpisodeSet& episodes, const CircuitRoles& roles) {
  auto group = [&](const std::string& key, const std::vector<NodeRef>& fallback) {
    auto it = roles.groups.find(key);
    return it != roles.groups.end() && !it->second.empty() ? it->second : fallback;
  };
  struct Plan {
    std::string name;
    NodeRef node;
    Labeler labeler;
    TokenFilter filter;
    std::vector<NodeRef> ablated;
  };
  const std::vector<Plan> plans = {
      {"pairing_z", roles.primitive_pairing.with_site(Site::Z), Labeler::index_in_question, TokenFilter::colors,
       group("broadcast", {roles.question_broadcast})},
      {"output_k", roles.output_head.with_site(Site::K), Labeler::index_in_question, TokenFilter::colors,
       group("pairing", {roles.primitive_pairing})},
      {"scanner_z", roles.rhs_scanner.with_site(Site::Z), Labeler::relative_index_on_lhs, TokenFilter::all,
       group("retrieval", roles.retrieval)},
      {"output_q", roles.output_head.with_site(Site::Q), Labeler::relative_index_on_lhs, TokenFilter::all,
       group("scanner", {roles.rhs_scanner})},
      {"broadcast_z", roles.question_broadcast.with_site(Site::Z), Labeler::index_in_question, TokenFilter::symbols, {}},
  };
  TracingReport report;
  for (const auto& p : plans) {
    TraceEntry e{p.name, p.node, p.labeler, p.filter, p.ablated};
    auto clean = trace_index_information(engine, episodes, p.node, p.labeler, p.filter);
    e.r2_clean = clean.r2;
    e.n_points = static_cast<int>(clean.labels.size());
    if (p.ablated.empty()) {
      e.r2_ablated = clean.r2;
    } else {
      e.r2_ablated =
          trace_index_information(engine, episodes, p.node, p.labeler, p.filter, mean_ablation_of(p.ablated)).r2;
    }
    report.entries.push_back(std::move(e));
    report.clean_traces.push_back(std::move(clean));
  }
  return report;
}

EpisodeSet swap_eligible(const EpisodeSet& episodes, std::size_t limit) {
  EpisodeSet out;
  for (const auto& ep : episodes) {
    if (out.size() >= limit) break;
    if (ep.question.size() == 3 && ep.question[0] != ep.question[2]) out.push_back(ep);
  }
  return out;
}

SwapSummary run_swap_experiment(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& broadcast_head,
                                const NodeRef& output_head, bool freeze_q, std::size_t keep_examples) {
  SwapSummary s;
  double step_sum = 0.0;
  for (const auto& ep : episodes) {
    SwapRequest req;
    req.node = broadcast_head.with_site(Site::V);
    req.pos_a = 0;
    req.pos_b = 2;
    req.freeze_q = freeze_q;
    req.output_head = output_head;
    auto r = swap_position_intervention(engine, ep, req);
    ++s.evaluated;
    s.consistent += r.consistent ? 1 : 0;
    step_sum += r.steps_consistent;
    if (s.examples.size() < keep_examples) s.examples.push_back(std::move(r));
  }
  if (s.evaluated == 0) throw EmptyPopulationError("no episode is eligible for the swap intervention");
  s.rate = static_cast<double>(s.consistent) / s.evaluated;
  s.mean_step_rate = step_sum / s.evaluated;
  return s;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const OutputHeadReport& r, const Vocabulary& vocab) {
  nlohmann::json attribution = nlohmann::json::array();
  for (std::size_t i = 0; i < r.attribution.heads.size(); ++i)
    attribution.push_back({{"head", head_name(r.attribution.heads[i])}, {"mean_attribution", r.attribution.mean_terms[i]}});
  nlohmann::json alignment = nlohmann::json::array();
  for (const auto& a : r.alignment) {
    alignment.push_back({{"token", vocab.token(a.token)},
                         {"score", a.score},
                         {"null_p95", a.null_p95},
                         {"null_mean", a.null_mean},
                         {"exceeds_p95", a.score > a.null_p95}});
  }
  return {{"output_head", head_name(r.output_head)},
          {"attribution_step", r.attribution.step},
          {"attribution", attribution},
          {"mean_logit", r.attribution.mean_logit},
          {"max_reconstruction_error", r.attribution.max_reconstruction_error},
          {"attention_accuracy_per_step", r.accuracy.accuracy},
          {"attention_accuracy_counted", r.accuracy.counted},
          {"alignment_input", r.alignment_input},
          {"ov_alignment", alignment}};
}

nlohmann::json to_json(const KCircuitReport& r) {
  return {{"pairing_scan", to_json(r.pairing_scan)},
          {"primitive_pairing", head_name(r.primitive_pairing)},
          {"broadcast_scan", to_json(r.broadcast_scan)},
          {"question_broadcast", head_name(r.question_broadcast)}};
}

nlohmann::json to_json(const QCircuitReport& r) {
  return {{"scanner_scan", to_json(r.scanner_scan)},
          {"rhs_scanner", head_name(r.rhs_scanner)},
          {"retrieval_scan", to_json(r.retrieval_scan)},
          {"retrieval", names(r.retrieval)}};
}

nlohmann::json to_json(const TraceResult& t) {
  nlohmann::json points = nlohmann::json::array();
  for (Eigen::Index i = 0; i < t.pca.projections.rows(); ++i) {
    points.push_back({{"x", t.pca.projections(i, 0)},
                      {"y", t.pca.projections.cols() > 1 ? t.pca.projections(i, 1) : 0.0},
                      {"label", t.labels[static_cast<std::size_t>(i)]},
                      {"token", t.tokens[static_cast<std::size_t>(i)]}});
  }
  return {{"node", to_string(t.node)},
          {"labeler", to_string(t.labeler)},
          {"r2", t.r2},
          {"n_points", t.labels.size()},
          {"explained_variance_ratio", t.pca.explained_ratio},
          {"reduced_rank", t.pca.reduced_rank},
          {"points", points}};
}

nlohmann::json to_json(const TracingReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"name", e.name},
                       {"node", to_string(e.node)},
                       {"labeler", to_string(e.labeler)},
                       {"filter", to_string(e.filter)},
                       {"ablated", names(e.ablated)},
                       {"r2_clean", e.r2_clean},
                       {"r2_ablated", e.r2_ablated},
                       {"relative_drop", e.relative_drop()},
                       {"n_points", e.n_points}});
  }
  nlohmann::json figures = nlohmann::json::array();
  for (const auto& t : r.clean_traces) figures.push_back(to_json(t));
  return {{"entries", entries}, {"pca", figures}};
}

nlohmann::json to_json(const SwapSummary& s, const Vocabulary& vocab) {
  nlohmann::json examples = nlohmann::json::array();
  for (const auto& e : s.examples) {
    examples.push_back({{"clean_argmax", e.clean_argmax},
                        {"patched_argmax", e.patched_argmax},
                        {"expected", e.expected},
                        {"consistent", e.consistent},
                        {"steps_consistent", e.steps_consistent},
                        {"outcome", to_json(e.outcome, vocab)}});
  }
  return {{"evaluated", s.evaluated},
          {"consistent", s.consistent},
          {"swap_consistency_rate", s.rate},
          {"mean_step_rate", s.mean_step_rate},
          {"examples", examples}};
}

}  // namespace circuitlab
