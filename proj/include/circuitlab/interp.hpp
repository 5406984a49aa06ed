#pragma once

// Attribution, attention metrics, patching protocols, probing and the
// positional swap intervention.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/grammar.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

struct EncodedEpisode {
  TokenSeq prompt;
  TokenSeq dec_input;   // SOS c1..cn
  TokenSeq dec_target;  // c1..cn EOS
  int n_answer = 0;     // n
};

EncodedEpisode encode_episode(const Episode& ep, const Vocabulary& vocab);

// Eval-mode run over the prompt and the full gold decoder prefix with every
// tap site recorded. Throws BoundsError for overlong episodes.
ActivationCache run_with_cache(const ModelParams& params, const ModelConfig& cfg, const EncodedEpisode& ep);

// ---------------------------------------------------------------------------
// Logit attribution with the final LayerNorm statistics frozen at the clean
// run: a residual component c contributes ((c - mean(c)) * rstd) . (gain (*) u)
// where u is the unembedding column of the target token.

struct LogitAttribution {
  std::vector<NodeRef> heads;        // every decoder head (self and cross), Z site
  std::vector<double> head_terms;
  double embedding_term = 0.0;       // token + position
  double bias_term = 0.0;            // attention output biases
  double mlp_term = 0.0;
  double ln_bias_term = 0.0;         // final LayerNorm bias . u
  double logit = 0.0;                // from the cache
  double reconstruction_error = 0.0; // |sum of terms - logit|
};

LogitAttribution logit_attribution(const ModelParams& params, const ModelConfig& cfg, const ActivationCache& cache,
                                   int row, TokenId target);

// Mean head terms at one decoder step (1-based; step 1 reads the SOS row) for
// the gold token at that step, averaged over episodes.
struct HeadAttributionTable {
  int step = 1;
  std::vector<NodeRef> heads;
  std::vector<double> mean_terms;
  double mean_logit = 0.0;
  double max_reconstruction_error = 0.0;
};

HeadAttributionTable mean_head_attribution(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                           const EpisodeSet& episodes, int step = 1);

// ---------------------------------------------------------------------------
// Attention accuracy: at decoder step t (row t-1) the argmax-attended prompt
// token (lowest position on ties) equals the gold token emitted at step t.
// Only answer steps count; the EOS step is excluded.

// hits[t-1] for t = 1..min(n_answer, first_k).
std::vector<char> attention_hits(const Matrix& attn, const EncodedEpisode& ep, int first_k);

struct StepAccuracy {
  std::vector<double> accuracy;  // per step
  std::vector<int> counted;      // episodes reaching that step
  double overall = 0.0;          // pooled over all counted steps
};

StepAccuracy attention_accuracy(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                const EpisodeSet& episodes, const NodeRef& node, int first_k);

// ---------------------------------------------------------------------------
// OV-unembedding alignment: score = <OV(x), u_token>, null = <OV(x), u_j> for
// n_null draws of j uniformly from the other vocabulary columns.

struct AlignmentResult {
  TokenId token = 0;
  double score = 0.0;
  std::vector<double> null;
  double null_p95 = 0.0;
  double null_mean = 0.0;
};

AlignmentResult ov_unembed_alignment(const ModelParams& params, const ModelConfig& cfg, const NodeRef& node,
                                     TokenId token, const Vector& x, int n_null, Rng& rng);

// Inputs x for the alignment: the token's embedding row, or the mean
// encoder output at the token's prompt occurrences (what a cross head reads).
Vector embedding_input(const ModelParams& params, TokenId token);
Vector mean_encoder_output(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const EpisodeSet& episodes, TokenId token);

// 95th percentile by linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

// ---------------------------------------------------------------------------
// Patching

struct PatchMetrics {
  // Teacher-forced: every argmax over the gold prefix equals the target.
  double exact_match = 0.0;
  // Mean logit of the gold token over answer steps and EOS.
  double correct_logit = 0.0;
  // Per watched decoder cross head, fraction of answer steps hit.
  std::map<std::string, double> attention_accuracy;
};

struct PatchOutcome {
  EncodedEpisode episode;
  std::vector<NodeRef> watched;  // attn_weights sites
  Matrix clean_logits, patched_logits;
  std::vector<Matrix> clean_attention, patched_attention;
  PatchMetrics clean, patched, delta;  // delta = patched - clean
  int forward_passes = 0;
};

nlohmann::json to_json(const PatchMetrics& m);
nlohmann::json to_json(const PatchOutcome& o, const Vocabulary& vocab);

// A path-patching request. Hop 1 ablates `sources` (Z sites) and records
// receivers[0]; hop i > 1 injects the recorded receivers[i-2] and records
// receivers[i-1]. In every hop all other attention-head outputs are frozen
// at clean values while MLPs recompute; nodes in ablate_others[i] are
// additionally ablated during hop i+1. The last pass injects the final
// receiver, freezes `freeze` from the clean run and measures.
// Forward passes: 1 clean + receivers.size() hops + 1 = receivers.size() + 2.
struct PathPatchRequest {
  std::vector<NodeRef> sources;
  std::vector<NodeRef> receivers;
  std::vector<std::vector<NodeRef>> ablate_others;
  PatchAction ablation = PatchAction::mean_ablate;
  std::vector<NodeRef> freeze;
  std::vector<NodeRef> watched;
};

PathPatchRequest path_patch_request(const NodeRef& source, const NodeRef& target, std::vector<NodeRef> freeze = {},
                                    std::vector<NodeRef> watched = {}, PatchAction ablation = PatchAction::mean_ablate);
// chain [n1, ..., nN]: n1 is the source, n2..nN the receivers (N + 1 passes).
PathPatchRequest chain_request(const std::vector<NodeRef>& chain, std::vector<NodeRef> freeze = {},
                               std::vector<NodeRef> watched = {}, PatchAction ablation = PatchAction::mean_ablate);

// True when head `sender`'s output reaches `receiver` without passing
// through another attention layer.
bool feeds_directly(const NodeRef& sender, const NodeRef& receiver);

class PatchEngine {
 public:
  PatchEngine(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
              const AblationSource* ablation = nullptr, std::uint64_t seed = 0);

  // Clean run, then one run with `spec` applied (freeze directives read the
  // clean cache). Two forward passes.
  PatchOutcome apply(const EncodedEpisode& ep, const PatchSpec& spec, const std::vector<NodeRef>& watched);

  // Throws SpecError for malformed or disconnected requests, StatsError when
  // ablation statistics are missing.
  PatchOutcome path_patch(const EncodedEpisode& ep, const PathPatchRequest& req);

  ActivationCache clean_cache(const EncodedEpisode& ep);

  // Runs one forward pass with `spec` against `clean`, tapping `taps`.
  ForwardResult<float> run(const EncodedEpisode& ep, const PatchSpec& spec, const ActivationCache* clean,
                           TapSelector taps);

  long forward_passes() const { return passes_; }
  const ModelParams& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const AblationSource* ablation() const { return ablation_; }
  Rng& rng() { return rng_; }

 private:
  PatchOutcome finish(const EncodedEpisode& ep, const ActivationCache& clean, const ForwardResult<float>& patched,
                      const std::vector<NodeRef>& watched);

  const ModelParams& params_;
  const ModelConfig& cfg_;
  const Vocabulary& vocab_;
  const AblationSource* ablation_;
  Rng rng_;
  long passes_ = 0;
};

PatchMetrics compute_metrics(const Matrix& logits, const std::vector<Matrix>& attention,
                             const std::vector<NodeRef>& watched, const EncodedEpisode& ep);

// ---------------------------------------------------------------------------
// Head scans

enum class ScanMode : std::uint8_t { keep_only_one, ablate_only_one };

std::string to_string(ScanMode m);
ScanMode parse_scan_mode(std::string_view s);

struct ScanRow {
  std::string label;  // head name, "keep-all" or "ablate-all"
  double metric = 0.0;
  double delta = 0.0;  // metric - baseline
};

struct HeadScan {
  ScanMode mode = ScanMode::keep_only_one;
  double baseline = 0.0;
  std::vector<ScanRow> controls;  // keep-all, ablate-all
  std::vector<ScanRow> rows;      // ranked: best retention (keep) or largest drop (ablate) first
  std::vector<NodeRef> ranked;    // heads in row order
};

using OutcomeMetric = std::function<double(const PatchOutcome&)>;

// For each candidate c, sources become candidates \ {c} (keep) or {c}
// (ablate); receivers, freezes and ablate_others come from `route`. The
// metric is averaged over episodes. Throws SpecError for an empty set.
HeadScan head_scan(PatchEngine& engine, const std::vector<EncodedEpisode>& episodes,
                   const std::vector<NodeRef>& candidates, ScanMode mode, const PathPatchRequest& route,
                   const OutcomeMetric& metric);

// Patched attention accuracy of `head` (an attn_weights or Z node) from an
// outcome whose watched list contains it.
OutcomeMetric attention_accuracy_metric(const NodeRef& head);

nlohmann::json to_json(const HeadScan& s);

// ---------------------------------------------------------------------------
// PCA and R²

struct PcaResult {
  Eigen::MatrixXd projections;          // n x k
  std::vector<double> explained_ratio;  // length k
  int rank = 0;
  bool reduced_rank = false;
};

// Throws ScoreError when there are fewer than k + 1 points.
PcaResult pca_project(const Eigen::MatrixXd& points, int k);

// 1 - SS_res / SS_tot with class-mean predictions, pooled over dimensions.
// Throws ScoreError for fewer than two distinct labels or zero variance.
double r2_score(const Eigen::MatrixXd& activations, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Index tracing

enum class Labeler : std::uint8_t { index_in_question, relative_index_on_lhs };
enum class TokenFilter : std::uint8_t { all, colors, symbols };

std::string to_string(Labeler l);
Labeler parse_labeler(std::string_view s);
std::string to_string(TokenFilter f);
TokenFilter parse_token_filter(std::string_view s);

struct TraceResult {
  NodeRef node;
  Labeler labeler = Labeler::index_in_question;
  Eigen::MatrixXd activations;
  std::vector<int> labels;
  std::vector<std::string> tokens;
  PcaResult pca;
  double r2 = 0.0;
};

// Gathers the node's rows at labeled positions: prompt positions for
// index_in_question (encoder nodes, decoder cross K/V), decoder rows t-1 for
// relative_index_on_lhs. `ablation` is applied to every run. Throws
// EmptyPopulationError when nothing is labeled and SpecError when the node's
// rows do not match the labeler.
TraceResult trace_index_information(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& node,
                                    Labeler labeler, TokenFilter filter = TokenFilter::all,
                                    const PatchSpec& ablation = {});

// ---------------------------------------------------------------------------
// Positional swap: exchange the positional components of two question-symbol
// positions at a layer-0 encoder head's V (or Q/K). `times` applications
// compose the transposition with itself.

struct SwapRequest {
  NodeRef node;  // layer-0 encoder head, site V
  int pos_a = 0;
  int pos_b = 2;
  bool freeze_q = true;
  NodeRef output_head;  // watched; its Q is frozen when freeze_q
  int times = 1;
};

struct SwapResult {
  PatchOutcome outcome;
  int clean_argmax = -1;    // step-1 argmax prompt position of the output head
  int patched_argmax = -1;
  std::string expected;     // color bound to the other question symbol
  bool consistent = false;  // patched argmax token == expected
  double steps_consistent = 0.0;  // fraction of answer steps realigned to the other symbol's color
};

// Throws SpecError when a position is not a question symbol.
SwapResult swap_position_intervention(PatchEngine& engine, const Episode& ep, const SwapRequest& req);

nlohmann::json matrix_json(const Matrix& m);
nlohmann::json matrix_json(const Eigen::MatrixXd& m);

}  // namespace circuitlab
