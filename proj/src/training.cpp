#include "circuitlab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/errors.hpp"

namespace circuitlab {

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr_init > 0.0)) throw ConfigError("train: lr_init must be positive");
  if (lr_final < 0.0 || lr_final > lr_init) throw ConfigError("train: need 0 <= lr_final <= lr_init");
  if (warmup_epochs < 0.0 || warmup_epochs > epochs) throw ConfigError("train: warmup_epochs out of range");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("train: Adam betas must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("train: adam_epsilon must be positive");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"model", to_json(cfg.model)},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr_init", cfg.lr_init},
          {"lr_final", cfg.lr_final},
          {"warmup_epochs", cfg.warmup_epochs},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"adam_epsilon", cfg.adam_epsilon},
          {"seed", cfg.seed},
          {"eval_limit", cfg.eval_limit}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr_init = j.value("lr_init", cfg.lr_init);
    cfg.lr_final = j.value("lr_final", cfg.lr_final);
    cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.adam_epsilon = j.value("adam_epsilon", cfg.adam_epsilon);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_limit = j.value("eval_limit", cfg.eval_limit);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double lr_schedule(long step, long total_steps, long warmup_steps, const TrainConfig& cfg) {
  step = std::clamp(step, 0L, total_steps);
  if (warmup_steps > 0 && step <= warmup_steps) return cfg.lr_init * static_cast<double>(step) / warmup_steps;
  if (total_steps <= warmup_steps) return cfg.lr_init;
  const double frac = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return cfg.lr_init + (cfg.lr_final - cfg.lr_init) * frac;
}

template <class T>
LossResult<T> cross_entropy_loss(const MatrixT<T>& logits, const TokenSeq& targets, const std::vector<char>& mask) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows() || mask.size() != targets.size())
    throw BoundsError("cross_entropy_loss: logits, targets and mask disagree in length");
  LossResult<T> r;
  r.n_tokens = static_cast<int>(std::count_if(mask.begin(), mask.end(), [](char m) { return m != 0; }));
  if (r.n_tokens == 0) throw DegenerateBatchError("every target position is masked");
  r.dlogits = MatrixT<T>::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  const T inv_n = T(1) / static_cast<T>(r.n_tokens);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const TokenId t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw BoundsError("cross_entropy_loss: target id out of range");
    const T mx = logits.row(i).maxCoeff();
    auto e = (logits.row(i).array() - mx).exp();
    const T z = e.sum();
    total += static_cast<double>(std::log(z) + mx - logits(i, t));
    r.dlogits.row(i) = (e / z * inv_n).matrix();
    r.dlogits(i, t) -= inv_n;
  }
  r.loss = total / r.n_tokens;
  return r;
}

template <class T>
Adam<T>::Adam(const ModelParamsT<T>& like, double beta1, double beta2, double epsilon)
    : m_(like), v_(like), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.set_zero();
  v_.set_zero();
}

template <class T>
void Adam<T>::step(ModelParamsT<T>& params, const ModelParamsT<T>& grads, double lr) {
  ++t_;
  const T b1 = static_cast<T>(beta1_);
  const T b2 = static_cast<T>(beta2_);
  const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const T eps = static_cast<T>(epsilon_);
  const T rate = static_cast<T>(lr);
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = m_.tensors();
  auto v = v_.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto ga = g[i].second->array();
    m[i].second->array() = b1 * m[i].second->array() + (T(1) - b1) * ga;
    v[i].second->array() = b2 * v[i].second->array() + (T(1) - b2) * ga.square();
    p[i].second->array() -= rate * (m[i].second->array() / c1) / ((v[i].second->array() / c2).sqrt() + eps);
  }
}

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"steps", m.steps},
          {"train_loss", m.train_loss},
          {"lr", m.lr},
          {"test_exact_match", m.test_exact_match},
          {"seconds", m.seconds}};
}

PackedBatch pack_episodes(const std::vector<const Episode*>& episodes, const Vocabulary& vocab) {
  PackedBatch b;
  for (const Episode* ep : episodes) {
    b.pairs.push_back({render_prompt(*ep, vocab), decoder_input(*ep, vocab)});
    TokenSeq tgt = decoder_target(*ep, vocab);
    b.targets.insert(b.targets.end(), tgt.begin(), tgt.end());
    b.mask.insert(b.mask.end(), tgt.size(), 1);
  }
  return b;
}

namespace {

void check_provenance(const Dataset& data) {
  std::unordered_set<Signature> train_sigs;
  for (const auto& ep : data.train) train_sigs.insert(episode_signature(ep));
  for (const auto& ep : data.test) {
    if (train_sigs.count(episode_signature(ep)))
      throw ConfigError("split provenance: test support " + signature_hex(episode_signature(ep)) +
                        " also appears in training data");
  }
}

struct Encoded {
  SequencePair pair;
  TokenSeq target;
};

}  // namespace

bool decodes_correctly(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab, const Episode& ep) {
  const TokenSeq want = decoder_target(ep, vocab);
  const TokenSeq got =
      greedy_decode(params, cfg, render_prompt(ep, vocab), vocab.sos(), vocab.eos(), static_cast<int>(want.size()));
  return got == want;
}

double evaluate_exact_match(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                            const EpisodeSet& episodes, std::size_t limit) {
  const std::size_t n = limit == 0 ? episodes.size() : std::min(limit, episodes.size());
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += decodes_correctly(params, cfg, vocab, episodes[i]) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainResult train(const Dataset& data, const TrainConfig& cfg_in, const EpochCallback& on_epoch) {
  TrainConfig cfg = cfg_in;
  cfg.model.vocab_size = static_cast<int>(data.vocab.size());
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: no training episodes");
  check_provenance(data);

  std::vector<Encoded> encoded;
  encoded.reserve(data.train.size());
  for (const auto& ep : data.train) {
    encoded.push_back({{render_prompt(ep, data.vocab), decoder_input(ep, data.vocab)}, decoder_target(ep, data.vocab)});
  }

  Rng rng(cfg.seed);
  TrainResult result;
  result.config = cfg.model;
  result.params = init_model(cfg.model, rng);
  ModelParams& params = result.params;
  ModelParams grads = zero_params<float>(cfg.model);
  Adam<float> adam(params, cfg.beta1, cfg.beta2, cfg.adam_epsilon);

  const long n = static_cast<long>(encoded.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = std::lround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));

  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long token_sum = 0;
    double lr = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b) {
      std::vector<SequencePair> pairs;
      TokenSeq targets;
      for (long i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
        const auto& e = encoded[order[static_cast<std::size_t>(i)]];
        pairs.push_back(e.pair);
        targets.insert(targets.end(), e.target.begin(), e.target.end());
      }
      std::vector<char> mask(targets.size(), 1);
      ForwardOptions opts;
      opts.mode = Mode::train;
      opts.dropout_rng = &rng;
      auto fwd = forward<float>(params, cfg.model, pairs, opts, true);
      auto loss = cross_entropy_loss<float>(fwd.logits, targets, mask);
      if (!std::isfinite(loss.loss))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step + 1));
      grads.set_zero();
      backward<float>(params, cfg.model, *fwd.tape, loss.dlogits, grads);
      ++step;
      lr = lr_schedule(step, total_steps, warmup_steps, cfg);
      adam.step(params, grads, lr);
      loss_sum += loss.loss * loss.n_tokens;
      token_sum += loss.n_tokens;
    }
    if (!params.all_finite()) throw TrainingDiverged("non-finite parameters after epoch " + std::to_string(epoch));

    EpochMetrics m;
    m.epoch = epoch;
    m.steps = step;
    m.train_loss = loss_sum / static_cast<double>(token_sum);
    m.lr = lr;
    m.test_exact_match = evaluate_exact_match(params, cfg.model, data.vocab, data.test, cfg.eval_limit);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m, params);
  }
  return result;
}

TrainResult train_to_dir(const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  TrainConfig stored = cfg;
  stored.model.vocab_size = static_cast<int>(data.vocab.size());
  {
    std::ofstream f(out / "train_config.json");
    f << to_json(stored).dump(2) << "\n";
  }
  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw ConfigError("cannot write " + (out / "metrics.jsonl").string());
  auto result = train(data, cfg, [&](const EpochMetrics& m, const ModelParams& params) {
    metrics << to_json(m).dump() << "\n";
    metrics.flush();
    save_checkpoint(out / "latest.ckpt", params, stored.model, data.vocab, {{"epoch", m.epoch}, {"seed", cfg.seed}});
  });
  nlohmann::json extra = {{"epoch", cfg.epochs}, {"seed", cfg.seed}};
  if (!result.history.empty()) extra["test_exact_match"] = result.history.back().test_exact_match;
  save_checkpoint(out / "model.ckpt", result.params, result.config, data.vocab, extra);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

ModelConfig miniature_config(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 8;
  c.d_head = 4;
  c.n_heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d_mlp = 32;
  c.dropout = 0.0;
  return c;
}

GradCheckReport grad_check(const ModelConfig& cfg, const Vocabulary& vocab, const EpisodeSet& episodes,
                           const GradCheckOptions& opts) {
  cfg.validate();
  if (episodes.empty()) throw ConfigError("grad_check: no episodes");
  Rng rng(opts.seed);
  ModelParamsT<double> params = init_model(cfg, rng).cast<double>();
  // Move gains and biases off their init values so their gradients are generic.
  std::normal_distribution<double> normal(0.0, 0.1);
  for (auto& [name, m] : params.tensors()) {
    if (m->rows() == 1)
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += normal(rng);
  }

  std::vector<const Episode*> ptrs;
  for (const auto& ep : episodes) ptrs.push_back(&ep);
  const PackedBatch batch = pack_episodes(ptrs, vocab);
  const ForwardOptions eval_opts;

  auto loss_of = [&](const ModelParamsT<double>& p) {
    auto fwd = forward<double>(p, cfg, batch.pairs, eval_opts, false);
    return cross_entropy_loss<double>(fwd.logits, batch.targets, batch.mask).loss;
  };

  auto fwd = forward<double>(params, cfg, batch.pairs, eval_opts, true);
  auto loss = cross_entropy_loss<double>(fwd.logits, batch.targets, batch.mask);
  ModelParamsT<double> grads = zero_params<double>(cfg);
  backward<double>(params, cfg, *fwd.tape, loss.dlogits, grads);

  GradCheckReport report;
  auto p_tensors = params.tensors();
  auto g_tensors = grads.tensors();
  for (std::size_t t = 0; t < p_tensors.size(); ++t) {
    MatrixT<double>& w = *p_tensors[t].second;
    const MatrixT<double>& g = *g_tensors[t].second;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(w.size()));
    std::iota(idx.begin(), idx.end(), 0);
    if (static_cast<int>(idx.size()) > opts.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opts.samples_per_tensor));
    }
    GradCheckEntry entry{p_tensors[t].first, static_cast<int>(idx.size()), 0.0};
    for (Eigen::Index k : idx) {
      const double orig = w.data()[k];
      w.data()[k] = orig + opts.epsilon;
      const double up = loss_of(params);
      w.data()[k] = orig - opts.epsilon;
      const double down = loss_of(params);
      w.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * opts.epsilon);
      const double analytic = g.data()[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.tensors.push_back(entry);
  }
  return report;
}

template LossResult<float> cross_entropy_loss<float>(const MatrixT<float>&, const TokenSeq&, const std::vector<char>&);
template LossResult<double> cross_entropy_loss<double>(const MatrixT<double>&, const TokenSeq&, const std::vector<char>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace circuitlab
