#include "circuitlab/runner.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <set>

#include "circuitlab/errors.hpp"
#include "circuitlab/training.hpp"

namespace circuitlab {

namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<ExperimentKind, std::string_view>> kKinds = {
    {ExperimentKind::train, "train"},
    {ExperimentKind::output_head, "output-head"},
    {ExperimentKind::discover, "discover"},
    {ExperimentKind::discover_k_circuit, "discover-k-circuit"},
    {ExperimentKind::discover_q_circuit, "discover-q-circuit"},
    {ExperimentKind::trace_index, "trace-index"},
    {ExperimentKind::swap, "swap"},
    {ExperimentKind::custom_patch, "custom-patch"},
};

const std::set<std::string> kKnownKeys = {
    "kind",    "checkpoint",   "data",     "out_dir",       "roles",          "split",       "seed",
    "stats_pool", "trace_episodes", "swap_episodes", "freeze_q", "n_episodes", "group_episodes", "group_threshold",
    "n_null",  "node",         "labeler",  "filter",        "ablate",         "broadcast_head", "output_head",
    "patch",   "episode",      "watched",  "train_config"};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json names(const std::vector<NodeRef>& nodes) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& n : nodes) out.push_back(head_name(n));
  return out;
}

}  // namespace

std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKinds)
    if (kind == k) return std::string(name);
  return "?";
}

ExperimentKind parse_experiment_kind(std::string_view s) {
  for (const auto& [kind, name] : kKinds)
    if (name == s) return kind;
  throw ConfigError("unknown experiment kind: " + std::string(s));
}

void ExperimentConfig::validate() const {
  if (kind != ExperimentKind::train) {
    if (checkpoint.empty()) throw ConfigError("experiment: checkpoint is required");
    if (!fs::is_regular_file(checkpoint)) throw ConfigError("experiment: checkpoint not found: " + checkpoint.string());
  }
  if (data.empty()) throw ConfigError("experiment: data is required");
  if (!fs::is_regular_file(data / "manifest.json")) throw ConfigError("experiment: no dataset at " + data.string());
  if (!roles.empty() && !fs::is_regular_file(roles)) throw ConfigError("experiment: roles file not found: " + roles.string());
  if (split != "train" && split != "test") throw ConfigError("experiment: split must be train or test");
  if (stats_pool == 0 || trace_episodes == 0 || swap_episodes == 0 || discovery.n_episodes == 0)
    throw ConfigError("experiment: sample sizes must be positive");
  switch (kind) {
    case ExperimentKind::train:
      if (!train_config.is_object()) throw ConfigError("experiment: train needs a train_config object");
      if (out_dir.empty()) throw ConfigError("experiment: train needs out_dir");
      break;
    case ExperimentKind::custom_patch:
      if (!patch.is_object()) throw ConfigError("experiment: custom-patch needs a patch object");
      for (const auto& w : watched) parse_node(w);
      break;
    case ExperimentKind::trace_index:
      if (!node.empty()) parse_node(node);
      for (const auto& a : ablate) parse_node(a);
      break;
    case ExperimentKind::swap:
      if (broadcast_head.empty() != output_head.empty())
        throw ConfigError("experiment: swap needs both broadcast_head and output_head, or neither");
      if (!broadcast_head.empty()) {
        parse_node(broadcast_head);
        parse_node(output_head);
      }
      break;
    default:
      break;
  }
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kKnownKeys.count(key)) throw ConfigError("experiment: unknown field '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    c.checkpoint = j.value("checkpoint", std::string());
    c.data = j.value("data", std::string());
    c.out_dir = j.value("out_dir", std::string());
    c.roles = j.value("roles", std::string());
    c.split = j.value("split", c.split);
    c.seed = j.value("seed", c.seed);
    c.stats_pool = j.value("stats_pool", c.stats_pool);
    c.trace_episodes = j.value("trace_episodes", c.trace_episodes);
    c.swap_episodes = j.value("swap_episodes", c.swap_episodes);
    c.freeze_q = j.value("freeze_q", c.freeze_q);
    c.discovery.n_episodes = j.value("n_episodes", c.discovery.n_episodes);
    c.discovery.group_episodes = j.value("group_episodes", c.discovery.group_episodes);
    c.discovery.group_threshold = j.value("group_threshold", c.discovery.group_threshold);
    c.discovery.n_null = j.value("n_null", c.discovery.n_null);
    c.discovery.seed = c.seed;
    c.node = j.value("node", std::string());
    if (j.contains("labeler")) c.labeler = parse_labeler(j.at("labeler").get<std::string>());
    if (j.contains("filter")) c.filter = parse_token_filter(j.at("filter").get<std::string>());
    c.ablate = j.value("ablate", std::vector<std::string>{});
    c.broadcast_head = j.value("broadcast_head", std::string());
    c.output_head = j.value("output_head", std::string());
    c.patch = j.value("patch", nlohmann::json());
    c.episode = j.value("episode", c.episode);
    c.watched = j.value("watched", std::vector<std::string>{});
    c.train_config = j.value("train_config", nlohmann::json());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment: ") + e.what());
  }
  c.source = j;
  c.validate();
  return c;
}

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return hash_hex(h);
}

nlohmann::json to_json(const ReportBundle& b) {
  return {{"schema_version", b.schema_version}, {"id", b.id},         {"metadata", b.metadata},
          {"tables", b.tables},                 {"figures", b.figures}, {"patch_outcomes", b.patch_outcomes}};
}

void write_json_atomic(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << j.dump(1) << "\n";
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

LabContext LabContext::load(const fs::path& checkpoint, const fs::path& data) {
  LabContext ctx;
  ctx.data = read_dataset(data);
  ctx.checkpoint = load_checkpoint(checkpoint, &ctx.data.vocab);
  return ctx;
}

const AblationStats& LabContext::ensure_stats(std::size_t pool) {
  if (!stats || stats->pool().size != std::min(pool, data.train.size())) {
    EpisodeSet sample(data.train.begin(),
                      data.train.begin() + static_cast<std::ptrdiff_t>(std::min(pool, data.train.size())));
    stats = AblationStats::compute(checkpoint.params, checkpoint.config, data.vocab, sample);
  }
  return *stats;
}

const EpisodeSet& LabContext::split(const std::string& name) const { return name == "train" ? data.train : data.test; }

// ---------------------------------------------------------------------------
// PatchSpec JSON

Eigen::Index node_rows(const NodeRef& node, const EncodedEpisode& ep) {
  const bool prompt = node.component == Component::encoder ||
                      (node.kind == AttnKind::cross && (node.site == Site::K || node.site == Site::V));
  return static_cast<Eigen::Index>(prompt ? ep.prompt.size() : ep.dec_input.size());
}

PatchSpec patch_spec_from_json(const nlohmann::json& j, const EncodedEpisode& ep) {
  PatchSpec spec;
  try {
    const auto& list = j.at("directives");
    if (!list.is_array()) throw PatchError("directives must be an array");
    for (const auto& d : list) {
      PatchDirective pd;
      pd.node = parse_node(d.at("node").get<std::string>());
      const std::string action = d.at("action").get<std::string>();
      pd.action = parse_patch_action(action);
      pd.positions = d.value("positions", std::vector<int>{});
      pd.positional_component_only = d.value("positional_component_only", false);
      if (action == "swap_positions") {
        pd.permutation = transposition(static_cast<int>(node_rows(pd.node, ep)), d.at("pos_a").get<int>(),
                                       d.at("pos_b").get<int>());
      } else {
        pd.permutation = d.value("permutation", std::vector<int>{});
      }
      if (d.contains("replacement")) {
        const auto rows = d.at("replacement").get<std::vector<std::vector<float>>>();
        const Eigen::Index cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
        pd.replacement.resize(static_cast<Eigen::Index>(rows.size()), cols);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (static_cast<Eigen::Index>(rows[r].size()) != cols) throw PatchError("replacement rows differ in length");
          for (Eigen::Index c = 0; c < cols; ++c) pd.replacement(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
        }
      } else if (pd.action == PatchAction::replace_with) {
        throw PatchError("replace_with needs a replacement matrix");
      }
      spec.add(std::move(pd));
    }
  } catch (const nlohmann::json::exception& e) {
    throw PatchError(std::string("patch spec: ") + e.what());
  }
  return spec;
}

nlohmann::json to_json(const PatchSpec& spec) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& d : spec.directives) {
    nlohmann::json o = {{"node", to_string(d.node)}, {"action", to_string(d.action)}};
    if (!d.positions.empty()) o["positions"] = d.positions;
    if (!d.permutation.empty()) o["permutation"] = d.permutation;
    if (d.positional_component_only) o["positional_component_only"] = true;
    if (d.replacement.size() > 0) o["replacement"] = matrix_json(d.replacement);
    list.push_back(o);
  }
  return {{"directives", list}};
}

// ---------------------------------------------------------------------------
// Pipelines

namespace {

struct Pipeline {
  const ExperimentConfig& cfg;
  LabContext& ctx;
  ReportBundle& bundle;

  const ModelParams& params() const { return ctx.checkpoint.params; }
  const ModelConfig& model() const { return ctx.checkpoint.config; }
  const Vocabulary& vocab() const { return ctx.data.vocab; }
  const EpisodeSet& episodes() const { return ctx.split(cfg.split); }

  EpisodeSet first(std::size_t n) const {
    const auto& e = episodes();
    return EpisodeSet(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(std::min(n, e.size())));
  }

  PatchEngine engine() { return PatchEngine(params(), model(), vocab(), &ctx.ensure_stats(cfg.stats_pool), cfg.seed); }

  OutputHeadReport output_head() {
    auto r = find_output_head(params(), model(), vocab(), episodes(), cfg.discovery);
    bundle.tables["output_head"] = to_json(r, vocab());
    bundle.figures["attention_accuracy_per_step"] = r.accuracy.accuracy;
    const auto enc = encode_episode(episodes().front(), vocab());
    ForwardOptions opts;
    const NodeRef a = r.output_head.with_site(Site::attn_weights);
    opts.taps = TapSelector::only({a});
    auto fwd = forward(params(), model(), enc.prompt, enc.dec_input, opts);
    bundle.figures["output_head_attention"] = {{"node", to_string(a)},
                                               {"rows", vocab().decode(enc.dec_input)},
                                               {"cols", vocab().decode(enc.prompt)},
                                               {"matrix", matrix_json(fwd.cache->at(a))}};
    return r;
  }

  CircuitRoles roles() {
    if (!cfg.roles.empty()) {
      std::ifstream in(cfg.roles);
      auto r = roles_from_json(nlohmann::json::parse(in));
      bundle.metadata["roles_source"] = cfg.roles.string();
      return r;
    }
    return discover_all();
  }

  CircuitRoles discover_all() {
    CircuitRoles r;
    r.output_head = output_head().output_head;
    auto eng = engine();
    auto k = discover_k_circuit(eng, episodes(), r.output_head, cfg.discovery);
    bundle.tables["k_circuit"] = to_json(k);
    auto q = discover_q_circuit(eng, episodes(), r.output_head, cfg.discovery);
    bundle.tables["q_circuit"] = to_json(q);
    r.primitive_pairing = k.primitive_pairing;
    r.question_broadcast = k.question_broadcast;
    r.rhs_scanner = q.rhs_scanner;
    r.retrieval = q.retrieval;
    const EpisodeSet sample = first(cfg.discovery.group_episodes);
    const double th = cfg.discovery.group_threshold;
    r.groups["pairing"] = head_group(params(), model(), vocab(), sample, r.primitive_pairing, th);
    r.groups["broadcast"] = head_group(params(), model(), vocab(), sample, r.question_broadcast, th);
    r.groups["scanner"] = head_group(params(), model(), vocab(), sample, r.rhs_scanner, th);
    std::vector<NodeRef> retrieval;
    for (const auto& lead : r.retrieval) {
      for (const auto& h : head_group(params(), model(), vocab(), sample, lead, th)) {
        if (std::find(retrieval.begin(), retrieval.end(), h) == retrieval.end()) retrieval.push_back(h);
      }
    }
    r.groups["retrieval"] = retrieval;
    bundle.tables["roles"] = to_json(r);
    bundle.metadata["forward_passes"] = eng.forward_passes();
    return r;
  }
};

}  // namespace

ReportBundle run_experiment(const ExperimentConfig& cfg, LabContext* shared) {
  cfg.validate();
  ReportBundle b;
  b.id = config_hash(cfg.source);
  b.metadata = {{"kind", to_string(cfg.kind)},
                {"seed", cfg.seed},
                {"config_hash", b.id},
                {"config", cfg.source},
                {"created_at", utc_now()},
                {"split", cfg.split}};

  {
    if (cfg.kind == ExperimentKind::train) {
      auto data = read_dataset(cfg.data);
      auto tc = train_config_from_json(cfg.train_config);
      auto result = train_to_dir(data, tc, cfg.out_dir);
      b.metadata["vocab_hash"] = hash_hex(data.vocab.hash());
      nlohmann::json history = nlohmann::json::array();
      for (const auto& m : result.history) history.push_back(to_json(m));
      b.tables["metrics"] = history;
    } else {
      std::optional<LabContext> own;
      if (!shared) own = LabContext::load(cfg.checkpoint, cfg.data);
      LabContext& ctx = shared ? *shared : *own;
      b.metadata["vocab_hash"] = hash_hex(ctx.data.vocab.hash());
      b.metadata["checkpoint"] = cfg.checkpoint.string();
      b.metadata["model_config"] = to_json(ctx.checkpoint.config);
      b.metadata["attribution_averaging"] = "first emitted token, mean over the evaluation sample";
      Pipeline p{cfg, ctx, b};
      switch (cfg.kind) {
        case ExperimentKind::output_head:
          p.output_head();
          break;
        case ExperimentKind::discover: {
          auto roles = p.discover_all();
          if (!cfg.out_dir.empty()) write_json_atomic(cfg.out_dir / "roles.json", to_json(roles));
          break;
        }
        case ExperimentKind::discover_k_circuit: {
          const NodeRef out = p.output_head().output_head;
          auto eng = p.engine();
          b.tables["k_circuit"] = to_json(discover_k_circuit(eng, p.episodes(), out, cfg.discovery));
          b.metadata["forward_passes"] = eng.forward_passes();
          break;
        }
        case ExperimentKind::discover_q_circuit: {
          const NodeRef out = p.output_head().output_head;
          auto eng = p.engine();
          b.tables["q_circuit"] = to_json(discover_q_circuit(eng, p.episodes(), out, cfg.discovery));
          b.metadata["forward_passes"] = eng.forward_passes();
          break;
        }
        case ExperimentKind::trace_index: {
          auto eng = p.engine();
          const EpisodeSet sample = p.first(cfg.trace_episodes);
          if (!cfg.node.empty()) {
            std::vector<NodeRef> ablated;
            for (const auto& a : cfg.ablate) ablated.push_back(parse_node(a));
            PatchSpec spec;
            for (const auto& a : ablated) spec.mean_ablate(a.with_site(Site::Z));
            auto t = trace_index_information(eng, sample, parse_node(cfg.node), cfg.labeler, cfg.filter, spec);
            b.tables["trace"] = {{"node", cfg.node}, {"ablated", names(ablated)}, {"r2", t.r2}, {"n_points", t.labels.size()}};
            b.figures["pca"] = to_json(t);
          } else {
            auto report = trace_circuits(eng, sample, p.roles());
            auto j = to_json(report);
            b.tables["tracing"] = j["entries"];
            b.figures["pca"] = j["pca"];
          }
          break;
        }
        case ExperimentKind::swap: {
          NodeRef broadcast, out;
          if (!cfg.broadcast_head.empty()) {
            broadcast = parse_node(cfg.broadcast_head);
            out = parse_node(cfg.output_head);
          } else {
            auto roles = p.roles();
            broadcast = roles.question_broadcast;
            out = roles.output_head;
          }
          auto eng = p.engine();
          auto summary = run_swap_experiment(eng, swap_eligible(p.episodes(), cfg.swap_episodes), broadcast, out, cfg.freeze_q);
          auto j = to_json(summary, p.vocab());
          for (const auto& e : j["examples"]) b.patch_outcomes.push_back(e["outcome"]);
          j.erase("examples");
          j["broadcast_head"] = head_name(broadcast);
          j["output_head"] = head_name(out);
          j["freeze_q"] = cfg.freeze_q;
          b.tables["swap"] = j;
          break;
        }
        case ExperimentKind::custom_patch: {
          if (cfg.episode >= p.episodes().size()) throw BoundsError("episode index outside the split");
          auto enc = encode_episode(p.episodes()[cfg.episode], p.vocab());
          auto spec = patch_spec_from_json(cfg.patch, enc);
          std::vector<NodeRef> watched;
          for (const auto& w : cfg.watched) watched.push_back(parse_node(w));
          auto eng = p.engine();
          b.patch_outcomes.push_back(to_json(eng.apply(enc, spec, watched), p.vocab()));
          break;
        }
        case ExperimentKind::train:
          break;
      }
    }
  }

  if (!cfg.out_dir.empty()) write_json_atomic(cfg.out_dir / ("report-" + b.id + ".json"), to_json(b));
  return b;
}

}  // namespace circuitlab
