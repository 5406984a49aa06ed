#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/grammar.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

struct TrainConfig {
  ModelConfig model;  // vocab_size is taken from the dataset
  int epochs = 50;
  int batch_size = 25;
  double lr_init = 1e-3;
  double lr_final = 5e-5;
  double warmup_epochs = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  // Held-out episodes decoded after each epoch; 0 means all of them.
  std::size_t eval_limit = 0;

  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear ramp 0 -> lr_init over the first warmup_steps, then linear decay to
// lr_final at total_steps. Update k (1-based) uses lr_schedule(k, ...).
double lr_schedule(long step, long total_steps, long warmup_steps, const TrainConfig& cfg);

template <class T>
struct LossResult {
  double loss = 0.0;
  MatrixT<T> dlogits;  // d(mean loss)/d(logits)
  int n_tokens = 0;
};

// Mean negative log-likelihood over rows with mask != 0. targets[i] is the
// gold id for logits row i. Throws DegenerateBatchError when nothing is
// unmasked.
template <class T>
LossResult<T> cross_entropy_loss(const MatrixT<T>& logits, const TokenSeq& targets, const std::vector<char>& mask);

template <class T>
class Adam {
 public:
  Adam(const ModelParamsT<T>& like, double beta1, double beta2, double epsilon);
  void step(ModelParamsT<T>& params, const ModelParamsT<T>& grads, double lr);
  long steps() const { return t_; }

 private:
  ModelParamsT<T> m_, v_;
  double beta1_, beta2_, epsilon_;
  long t_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  long steps = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double test_exact_match = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainResult {
  ModelParams params;
  ModelConfig config;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&, const ModelParams&)>;

// Batches of training episodes, teacher forcing, dropout on. Before training
// the split is checked: no test signature may appear among the training
// episodes. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Runs train() and writes OUT/metrics.jsonl (one line per epoch),
// OUT/latest.ckpt (every epoch), OUT/model.ckpt and OUT/train_config.json.
TrainResult train_to_dir(const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out);

// Fraction of episodes whose greedy decode equals target + EOS exactly.
double evaluate_exact_match(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                            const EpisodeSet& episodes, std::size_t limit = 0);

bool decodes_correctly(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab, const Episode& ep);

// Gradient check on a miniature model in double precision, eval mode.
struct GradCheckEntry {
  std::string tensor;
  int sampled = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> tensors;
  double max_rel_error = 0.0;
};

struct GradCheckOptions {
  int samples_per_tensor = 25;
  double epsilon = 1e-5;
  std::uint64_t seed = 7;
};

ModelConfig miniature_config(int vocab_size);

// Central differences of the token-averaged loss on a packed batch of
// episodes. Relative error is |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const ModelConfig& cfg, const Vocabulary& vocab, const EpisodeSet& episodes,
                           const GradCheckOptions& opts = {});

// Packed batch helpers shared with the analysis code.
struct PackedBatch {
  std::vector<SequencePair> pairs;
  TokenSeq targets;
  std::vector<char> mask;
};

PackedBatch pack_episodes(const std::vector<const Episode*>& episodes, const Vocabulary& vocab);

}  // namespace circuitlab
