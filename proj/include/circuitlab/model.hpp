#pragma once

// Encoder-decoder transformer with hand-written reverse-mode gradients,
// activation taps on every head and layer site, and patch hooks used by the
// interpretability engine.
//
// Layout (pre-LayerNorm throughout):
//   encoder: x = E[tok]*sqrt(d) + PE;  per layer  x += Attn(LN(x));  x += MLP(LN(x));  out = LN(x)
//   decoder: y = E[tok]*sqrt(d) + PE;  per layer  y += CausalAttn(LN(y));  y += CrossAttn(LN(y), out);
//            y += MLP(LN(y));  logits = LN(y) W_U
// Head h writes Z_h = softmax(Q_h K_h^T / sqrt(d_head)) V_h W_O,h into the residual stream.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "circuitlab/grammar.hpp"
#include "circuitlab/node.hpp"

namespace circuitlab {

template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Matrix = MatrixT<float>;
using Vector = VectorT<float>;

struct ModelConfig {
  int vocab_size = 20;
  int d_model = 128;
  int d_head = 16;
  int n_heads = 8;
  int enc_layers = 2;
  int dec_layers = 2;
  int d_mlp = 512;
  double dropout = 0.1;
  int max_len = 64;
  double ln_epsilon = 1e-5;
  double init_scale = 1.0;

  void validate() const;  // throws ConfigError
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Parameters. Biases and LayerNorm vectors are stored as 1 x n matrices so
// every tensor can be visited uniformly.

template <class T>
struct LayerNormParams {
  MatrixT<T> gain, bias;
};

// Heads occupy consecutive d_head-wide column blocks of w_q/w_k/w_v and row
// blocks of w_o.
template <class T>
struct AttentionParams {
  MatrixT<T> w_q, w_k, w_v;  // d_model x (n_heads * d_head)
  MatrixT<T> w_o;            // (n_heads * d_head) x d_model
  MatrixT<T> b_o;            // 1 x d_model
};

template <class T>
struct MlpParams {
  MatrixT<T> w_in, b_in, w_out, b_out;
};

template <class T>
struct EncoderLayerParams {
  LayerNormParams<T> ln_attn;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln_mlp;
  MlpParams<T> mlp;
};

template <class T>
struct DecoderLayerParams {
  LayerNormParams<T> ln_self;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln_cross;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln_mlp;
  MlpParams<T> mlp;
};

template <class T>
struct ModelParamsT {
  MatrixT<T> embed;  // vocab x d_model
  std::vector<EncoderLayerParams<T>> encoder;
  LayerNormParams<T> enc_final;
  std::vector<DecoderLayerParams<T>> decoder;
  LayerNormParams<T> dec_final;
  MatrixT<T> unembed;  // d_model x vocab

  // Every tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, MatrixT<T>*>> tensors();
  std::vector<std::pair<std::string, const MatrixT<T>*>> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();

  template <class U>
  ModelParamsT<U> cast() const;
};

using ModelParams = ModelParamsT<float>;

// Zero-filled parameters with the right shapes.
template <class T>
ModelParamsT<T> zero_params(const ModelConfig& cfg);

// Weights ~ N(0, init_scale / sqrt(d_model)); LayerNorm gains 1, biases 0.
ModelParams init_model(const ModelConfig& cfg, Rng& rng);

// Checks every tensor shape against the config. Throws ConfigError.
template <class T>
void check_shapes(const ModelParamsT<T>& params, const ModelConfig& cfg);

// Interleaved sinusoid: [2i] = sin(pos / 10000^(2i/d)), [2i+1] = cos(...).
// Throws BoundsError when pos is outside [0, max_len).
Vector positional_embedding(int pos, const ModelConfig& cfg);

// x W_V,h W_O,h for an attention head. Throws NodeError for non-head nodes.
Vector ov_transform(const ModelParams& params, const ModelConfig& cfg, const NodeRef& node, const Vector& x);

// ---------------------------------------------------------------------------
// Activation cache

struct ActivationCache {
  TokenSeq prompt;
  TokenSeq dec_tokens;
  std::unordered_map<NodeRef, Matrix, NodeRefHash> values;
  Matrix logits;      // dec_len x vocab
  Matrix enc_out;     // prompt_len x d_model (after the encoder's final LayerNorm)
  Matrix dec_resid;   // dec_len x d_model, residual stream entering the final LayerNorm
  Vector final_ln_mean, final_ln_rstd;  // per decoder row

  bool contains(const NodeRef& n) const { return values.count(n) != 0; }
  const Matrix& at(const NodeRef& n) const;  // throws NodeError
};

enum class TapMode : std::uint8_t { none, all, listed };

struct TapSelector {
  TapMode mode = TapMode::none;
  std::vector<NodeRef> nodes;
  static TapSelector all() { return {TapMode::all, {}}; }
  static TapSelector none() { return {}; }
  static TapSelector only(std::vector<NodeRef> n) { return {TapMode::listed, std::move(n)}; }
  bool wants(const NodeRef& n) const;
};

// ---------------------------------------------------------------------------
// Patches

enum class PatchAction : std::uint8_t { freeze_from_clean, mean_ablate, random_sample_ablate, permute_positions, replace_with };

std::string to_string(PatchAction a);
PatchAction parse_patch_action(std::string_view s);

struct PatchDirective {
  NodeRef node;
  PatchAction action = PatchAction::freeze_from_clean;
  // Rows (token positions) affected; empty means every row.
  std::vector<int> positions;
  // permute_positions: row i takes the value of row permutation[i].
  std::vector<int> permutation;
  // permute_positions on a layer-0 Q/K/V site: permute only the positional
  // embedding feeding this head, leaving token embeddings in place.
  bool positional_component_only = false;
  // replace_with: full node-shaped tensor; only the filtered rows are used.
  Matrix replacement;
};

struct PatchSpec {
  std::vector<PatchDirective> directives;

  bool empty() const { return directives.empty(); }
  // Nodes valid, one directive per (node, position), permutations well formed.
  // Throws PatchError / NodeError.
  void validate(const ModelConfig& cfg) const;

  PatchSpec& add(PatchDirective d) {
    directives.push_back(std::move(d));
    return *this;
  }
  PatchSpec& freeze(const NodeRef& n) { return add({n, PatchAction::freeze_from_clean, {}, {}, false, {}}); }
  PatchSpec& mean_ablate(const NodeRef& n) { return add({n, PatchAction::mean_ablate, {}, {}, false, {}}); }
  PatchSpec& replace(const NodeRef& n, Matrix m) { return add({n, PatchAction::replace_with, {}, {}, false, std::move(m)}); }
  PatchSpec& swap_positions(const NodeRef& n, int a, int b, bool positional_only, int n_rows);
};

// Composition of two row permutations: result[i] = first[second[i]], i.e.
// apply `first`, then `second`.
std::vector<int> compose_permutations(const std::vector<int>& first, const std::vector<int>& second);
std::vector<int> transposition(int n, int a, int b);

// Provides reference activations for ablation directives.
class AblationSource {
 public:
  virtual ~AblationSource() = default;
  virtual Matrix mean_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols) const = 0;
  virtual Matrix sample_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols, Rng& rng) const = 0;
};

struct PatchContext {
  const ActivationCache* clean = nullptr;
  const AblationSource* ablation = nullptr;
  Rng* rng = nullptr;
};

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode : std::uint8_t { train, eval };

struct SequencePair {
  TokenSeq prompt;
  TokenSeq dec_input;
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* dropout_rng = nullptr;  // required in train mode when dropout > 0
  const PatchSpec* patches = nullptr;
  PatchContext context;
  TapSelector taps;
};

template <class T>
struct ForwardTape;  // opaque record for the backward pass

template <class T>
struct ForwardResult {
  MatrixT<T> logits;  // rows: every decoder position of every pair, in order
  std::optional<ActivationCache> cache;
  std::shared_ptr<ForwardTape<T>> tape;  // only when requested
};

// Runs a packed batch. Patches and taps require a batch of one sequence pair.
// Throws BoundsError for overlong sequences, PatchError for bad patches.
template <class T>
ForwardResult<T> forward(const ModelParamsT<T>& params, const ModelConfig& cfg, const std::vector<SequencePair>& batch,
                         const ForwardOptions& opts, bool keep_tape = false);

// Single-episode convenience wrapper.
ForwardResult<float> forward(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt,
                             const TokenSeq& dec_prefix, const ForwardOptions& opts = {});

// Accumulates d(loss)/d(params) into grads given d(loss)/d(logits).
template <class T>
void backward(const ModelParamsT<T>& params, const ModelConfig& cfg, const ForwardTape<T>& tape,
              const MatrixT<T>& dlogits, ModelParamsT<T>& grads);

// Starts from SOS and appends the argmax token (lowest id on ties) until EOS
// or max_steps. The returned sequence excludes SOS and includes EOS if emitted.
TokenSeq greedy_decode(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt, TokenId sos,
                       TokenId eos, int max_steps);

// Row-wise argmax with lowest-index tie-break.
int argmax_lowest(const Eigen::Ref<const Matrix>& row);

}  // namespace circuitlab
