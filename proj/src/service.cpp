#include "circuitlab/service.hpp"

#include <fstream>
#include <typeinfo>

#include <httplib.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/oracle.hpp"
#include "circuitlab/training.hpp"

namespace circuitlab {

namespace {

class QueueFull : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const std::exception& e) {
  send_json(res, error_status(e), error_body(error_type(e), e.what()));
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const nlohmann::json::exception& e) {
      send_json(res, 400, error_body("InvalidJson", e.what()));
    } catch (const std::exception& e) {
      send_error(res, e);
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) throw ConfigError("request body is empty");
  auto j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw ConfigError("request body must be a JSON object");
  return j;
}

std::size_t query_size(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("query parameter '" + key + "' must be a non-negative integer");
  }
}

std::string query_split(const httplib::Request& req) {
  const std::string s = req.has_param("split") ? req.get_param_value("split") : "test";
  if (s != "train" && s != "test") throw ConfigError("split must be train or test");
  return s;
}

nlohmann::json episode_view(const Episode& ep, std::size_t index) {
  return {{"index", index}, {"prompt", render_prompt_tokens(ep)}, {"target", ep.target}, {"episode", to_json(ep)}};
}

}  // namespace

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

nlohmann::json error_body(const std::string& type, const std::string& message) {
  return {{"error", {{"type", type}, {"message", message}}}};
}

std::string error_type(const std::exception& e) {
#define CL_NAME(T) \
  if (dynamic_cast<const T*>(&e)) return #T;
  CL_NAME(QueueFull)
  CL_NAME(NotFound)
  CL_NAME(ConfigError)
  CL_NAME(EncodingError)
  CL_NAME(GenerationError)
  CL_NAME(UnsolvableEpisodeError)
  CL_NAME(BoundsError)
  CL_NAME(NodeError)
  CL_NAME(PatchError)
  CL_NAME(StatsError)
  CL_NAME(SpecError)
  CL_NAME(DegenerateBatchError)
  CL_NAME(TrainingDiverged)
  CL_NAME(CheckpointError)
  CL_NAME(ScoreError)
  CL_NAME(EmptyPopulationError)
#undef CL_NAME
  return "internal";
}

int error_status(const std::exception& e) {
  if (dynamic_cast<const QueueFull*>(&e)) return 503;
  if (dynamic_cast<const NotFound*>(&e)) return 404;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const EncodingError*>(&e) ||
      dynamic_cast<const UnsolvableEpisodeError*>(&e) || dynamic_cast<const BoundsError*>(&e) ||
      dynamic_cast<const NodeError*>(&e) || dynamic_cast<const PatchError*>(&e) ||
      dynamic_cast<const SpecError*>(&e) || dynamic_cast<const ScoreError*>(&e) ||
      dynamic_cast<const EmptyPopulationError*>(&e))
    return 400;
  if (dynamic_cast<const StatsError*>(&e)) return 409;
  return 500;
}

LabService::LabService(ServiceOptions opts) : opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  if (opts_.queue_capacity == 0) throw ConfigError("service: queue capacity must be positive");
  ctx_ = LabContext::load(opts_.checkpoint, opts_.data);
  ctx_.ensure_stats(opts_.stats_pool);
  worker_ctx_ = ctx_;
  routes();
  worker_ = std::thread([this] { worker_loop(); });
}

LabService::~LabService() {
  stop();
  if (worker_.joinable()) worker_.join();
}

int LabService::bind_to_any_port(const std::string& host) { return server_->bind_to_any_port(host); }
bool LabService::bind(const std::string& host, int port) { return server_->bind_to_port(host, port); }
void LabService::listen_after_bind() { server_->listen_after_bind(); }

void LabService::stop() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  server_->stop();
}

nlohmann::json LabService::queue_status() const {
  std::lock_guard lock(mu_);
  nlohmann::json pending = nlohmann::json::array();
  for (const auto& id : pending_) pending.push_back(id);
  nlohmann::json jobs = nlohmann::json::object();
  for (const auto& [id, job] : jobs_) {
    nlohmann::json o = {{"state", to_string(job.state)}, {"kind", to_string(job.config.kind)}};
    if (job.state == JobState::failed) o["error"] = {{"type", job.error_type}, {"message", job.error}};
    jobs[id] = o;
  }
  return {{"capacity", opts_.queue_capacity},
          {"pending", pending},
          {"running", running_.empty() ? nlohmann::json() : nlohmann::json(running_)},
          {"completed", completed_},
          {"jobs", jobs}};
}

nlohmann::json LabService::model_info() const {
  const auto& cfg = ctx_.checkpoint.config;
  const std::size_t n_params = ctx_.checkpoint.params.parameter_count();
  nlohmann::json heads = nlohmann::json::array();
  for (int l = 0; l < cfg.enc_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) heads.push_back(head_name(NodeRef::enc(l, h)));
  for (int l = 0; l < cfg.dec_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) {
      heads.push_back(head_name(NodeRef::dec_self(l, h)));
      heads.push_back(head_name(NodeRef::dec_cross(l, h)));
    }
  return {{"model_config", to_json(cfg)},
          {"parameters", n_params},
          {"vocabulary", ctx_.data.vocab.tokens()},
          {"vocabulary_hash", hash_hex(ctx_.data.vocab.hash())},
          {"heads", heads},
          {"checkpoint", opts_.checkpoint.string()},
          {"episodes", {{"train", ctx_.data.train.size()}, {"test", ctx_.data.test.size()}}},
          {"ablation_pool", {{"size", ctx_.stats->pool().size}}}};
}

std::string LabService::submit(ExperimentConfig cfg) {
  const std::string id = config_hash(cfg.source);
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it != jobs_.end() && it->second.state != JobState::failed) return id;
  if (pending_.size() >= opts_.queue_capacity) throw QueueFull("experiment queue is full");
  Job job;
  job.id = id;
  job.config = std::move(cfg);
  jobs_[id] = std::move(job);
  pending_.push_back(id);
  cv_.notify_one();
  return id;
}

void LabService::worker_loop() {
  for (;;) {
    ExperimentConfig cfg;
    std::string id;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !pending_.empty(); });
      if (stopping_) return;
      id = pending_.front();
      pending_.pop_front();
      running_ = id;
      jobs_[id].state = JobState::running;
      cfg = jobs_[id].config;
    }
    JobState state = JobState::done;
    std::string type, message;
    try {
      const bool same = cfg.checkpoint == opts_.checkpoint && cfg.data == opts_.data;
      run_experiment(cfg, same ? &worker_ctx_ : nullptr);
    } catch (const std::exception& e) {
      state = JobState::failed;
      type = error_type(e);
      message = e.what();
    }
    std::lock_guard lock(mu_);
    auto& job = jobs_[id];
    job.state = state;
    job.error_type = type;
    job.error = message;
    job.report = cfg.out_dir / ("report-" + id + ".json");
    running_.clear();
    ++completed_;
  }
}

void LabService::routes() {
  auto& s = *server_;
  const Vocabulary& vocab = ctx_.data.vocab;

  auto episode_from = [this](const nlohmann::json& body, const std::string& split) -> Episode {
    if (!body.contains("episode")) throw ConfigError("missing 'episode'");
    const auto& e = body.at("episode");
    if (e.is_number_integer()) {
      const auto& set = ctx_.split(split);
      const long long i = e.get<long long>();
      if (i < 0 || static_cast<std::size_t>(i) >= set.size()) throw BoundsError("episode index outside the split");
      return set[static_cast<std::size_t>(i)];
    }
    if (e.is_object()) {
      Episode ep = episode_from_json(e);
      for (const auto& t : render_prompt_tokens(ep))
        if (!ctx_.data.vocab.contains(t)) throw EncodingError("token not in vocabulary: " + t);
      if (solve_episode(ep) != ep.target) throw EncodingError("episode target disagrees with its support set");
      return ep;
    }
    throw ConfigError("'episode' must be an index or an episode object");
  };

  s.Get("/model/info", guarded([this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, model_info());
  }));

  s.Get("/queue", guarded([this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, queue_status());
  }));

  s.Get("/episodes", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto& set = ctx_.split(query_split(req));
    const std::size_t n = query_size(req, "n", 10);
    const std::size_t offset = query_size(req, "offset", 0);
    if (n > opts_.max_episodes) throw ConfigError("n exceeds " + std::to_string(opts_.max_episodes));
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = offset; i < set.size() && i < offset + n; ++i) out.push_back(episode_view(set[i], i));
    send_json(res, 200, {{"episodes", out}, {"total", set.size()}});
  }));

  s.Post("/run", guarded([this, &vocab, episode_from](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const Episode ep = episode_from(body, body.value("split", std::string("test")));
    const auto enc = encode_episode(ep, vocab);
    const auto& p = ctx_.checkpoint.params;
    const auto& cfg = ctx_.checkpoint.config;
    const auto emitted = greedy_decode(p, cfg, enc.prompt, vocab.sos(), vocab.eos(), enc.n_answer + 1);
    const auto fwd = forward(p, cfg, enc.prompt, enc.dec_input);
    send_json(res, 200,
              {{"tokens", vocab.decode(enc.prompt)},
               {"decoder_tokens", vocab.decode(enc.dec_input)},
               {"logits", matrix_json(fwd.logits)},
               {"vocabulary", vocab.tokens()},
               {"emitted", vocab.decode(emitted)},
               {"target", vocab.decode(enc.dec_target)},
               {"correct", emitted == enc.dec_target}});
  }));

  s.Get("/attention/:component/:kind/:layer/:head",
        guarded([this, &vocab](const httplib::Request& req, httplib::Response& res) {
          const auto& pp = req.path_params;
          const std::string comp = pp.at("component");
          const std::string kind = pp.at("kind");
          if (comp != "enc" && comp != "dec") throw NodeError("component must be enc or dec");
          if (kind != "self" && kind != "cross") throw NodeError("kind must be self or cross");
          const std::string name =
              std::string(comp == "enc" ? "Enc" : "Dec") + "-" + kind + "-" + pp.at("layer") + "." + pp.at("head");
          const NodeRef node = parse_node(name).with_site(Site::attn_weights);
          validate_node(node, ctx_.checkpoint.config);
          const auto& set = ctx_.split(query_split(req));
          const std::size_t i = query_size(req, "episode", 0);
          if (i >= set.size()) throw BoundsError("episode index outside the split");
          const auto enc = encode_episode(set[i], vocab);
          ForwardOptions opts;
          opts.taps = TapSelector::only({node});
          const auto fwd = forward(ctx_.checkpoint.params, ctx_.checkpoint.config, enc.prompt, enc.dec_input, opts);
          const bool query_prompt = node.component == Component::encoder;
          const bool key_prompt = node.component == Component::encoder || node.kind == AttnKind::cross;
          send_json(res, 200,
                    {{"node", to_string(node)},
                     {"episode", i},
                     {"matrix", matrix_json(fwd.cache->at(node))},
                     {"rows", vocab.decode(query_prompt ? enc.prompt : enc.dec_input)},
                     {"cols", vocab.decode(key_prompt ? enc.prompt : enc.dec_input)}});
        }));

  s.Post("/patch", guarded([this, &vocab, episode_from](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const Episode ep = episode_from(body, body.value("split", std::string("test")));
    const auto enc = encode_episode(ep, vocab);
    if (!body.contains("spec")) throw ConfigError("missing 'spec'");
    const PatchSpec spec = patch_spec_from_json(body.at("spec"), enc);
    std::vector<NodeRef> watched;
    for (const auto& w : body.value("watched", std::vector<std::string>{})) {
      const NodeRef n = parse_node(w);
      validate_node(n, ctx_.checkpoint.config);
      watched.push_back(n);
    }
    PatchEngine engine(ctx_.checkpoint.params, ctx_.checkpoint.config, vocab, &*ctx_.stats, body.value("seed", 0ULL));
    send_json(res, 200, to_json(engine.apply(enc, spec, watched), vocab));
  }));

  s.Post("/experiment", guarded([this](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req);
    if (!body.contains("checkpoint")) body["checkpoint"] = opts_.checkpoint.string();
    if (!body.contains("data")) body["data"] = opts_.data.string();
    if (!body.contains("out_dir")) body["out_dir"] = opts_.report_dir.string();
    if (body.value("kind", std::string()) == "train") throw ConfigError("training is not available through the service");
    const std::string id = submit(experiment_from_json(body));
    send_json(res, 202, {{"id", id}, {"status", "/report/" + id}});
  }));

  s.Get("/report/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.path_params.at("id");
    Job job;
    {
      std::lock_guard lock(mu_);
      auto it = jobs_.find(id);
      if (it == jobs_.end()) {
        const auto path = opts_.report_dir / ("report-" + id + ".json");
        if (id.find('/') == std::string::npos && std::filesystem::is_regular_file(path)) {
          std::ifstream in(path);
          send_json(res, 200, nlohmann::json::parse(in));
          return;
        }
        throw NotFound("no report " + id);
      }
      job = it->second;
    }
    if (job.state == JobState::failed) {
      send_json(res, 422, error_body(job.error_type, job.error));
    } else if (job.state != JobState::done) {
      send_json(res, 202, {{"id", id}, {"state", to_string(job.state)}});
    } else {
      std::ifstream in(job.report);
      send_json(res, 200, nlohmann::json::parse(in));
    }
  }));

  s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string type = res.status == 404 ? "NotFound" : "HttpError";
    res.set_content(error_body(type, req.method + " " + req.path + ": status " + std::to_string(res.status)).dump(),
                    "application/json");
  });
}

}  // namespace circuitlab
