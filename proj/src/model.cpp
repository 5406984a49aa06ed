#include "circuitlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

#include "circuitlab/errors.hpp"

namespace circuitlab {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("model: vocab_size must be positive");
  if (d_model < 1 || d_head < 1 || n_heads < 1) throw ConfigError("model: dimensions must be positive");
  if (n_heads * d_head != d_model) throw ConfigError("model: n_heads * d_head must equal d_model");
  if (d_model % 2 != 0) throw ConfigError("model: d_model must be even for sinusoidal positions");
  if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model: need at least one encoder and decoder layer");
  if (d_mlp < 1) throw ConfigError("model: d_mlp must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
  if (max_len < 1) throw ConfigError("model: max_len must be positive");
  if (!(ln_epsilon > 0.0)) throw ConfigError("model: ln_epsilon must be positive");
  if (init_scale < 0.0) throw ConfigError("model: init_scale must be non-negative");
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},       {"d_head", cfg.d_head},
          {"n_heads", cfg.n_heads},       {"enc_layers", cfg.enc_layers}, {"dec_layers", cfg.dec_layers},
          {"d_mlp", cfg.d_mlp},           {"dropout", cfg.dropout},       {"max_len", cfg.max_len},
          {"ln_epsilon", cfg.ln_epsilon}, {"init_scale", cfg.init_scale}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.d_head = j.value("d_head", cfg.d_head);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.enc_layers = j.value("enc_layers", cfg.enc_layers);
    cfg.dec_layers = j.value("dec_layers", cfg.dec_layers);
    cfg.d_mlp = j.value("d_mlp", 4 * cfg.d_model);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.max_len = j.value("max_len", cfg.max_len);
    cfg.ln_epsilon = j.value("ln_epsilon", cfg.ln_epsilon);
    cfg.init_scale = j.value("init_scale", cfg.init_scale);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <class Self, class F>
void visit_tensors(Self& p, F&& f) {
  auto ln = [&](const std::string& prefix, auto& l) {
    f(prefix + ".gain", l.gain);
    f(prefix + ".bias", l.bias);
  };
  auto attn = [&](const std::string& prefix, auto& a) {
    f(prefix + ".w_q", a.w_q);
    f(prefix + ".w_k", a.w_k);
    f(prefix + ".w_v", a.w_v);
    f(prefix + ".w_o", a.w_o);
    f(prefix + ".b_o", a.b_o);
  };
  auto mlp = [&](const std::string& prefix, auto& m) {
    f(prefix + ".w_in", m.w_in);
    f(prefix + ".b_in", m.b_in);
    f(prefix + ".w_out", m.w_out);
    f(prefix + ".b_out", m.b_out);
  };
  f(std::string("embed"), p.embed);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string pre = "encoder." + std::to_string(l);
    ln(pre + ".ln_attn", p.encoder[l].ln_attn);
    attn(pre + ".self_attn", p.encoder[l].self_attn);
    ln(pre + ".ln_mlp", p.encoder[l].ln_mlp);
    mlp(pre + ".mlp", p.encoder[l].mlp);
  }
  ln("enc_final", p.enc_final);
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string pre = "decoder." + std::to_string(l);
    ln(pre + ".ln_self", p.decoder[l].ln_self);
    attn(pre + ".self_attn", p.decoder[l].self_attn);
    ln(pre + ".ln_cross", p.decoder[l].ln_cross);
    attn(pre + ".cross_attn", p.decoder[l].cross_attn);
    ln(pre + ".ln_mlp", p.decoder[l].ln_mlp);
    mlp(pre + ".mlp", p.decoder[l].mlp);
  }
  ln("dec_final", p.dec_final);
  f(std::string("unembed"), p.unembed);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <class T>
std::vector<std::pair<std::string, MatrixT<T>*>> ModelParamsT<T>::tensors() {
  std::vector<std::pair<std::string, MatrixT<T>*>> out;
  visit_tensors(*this, [&](const std::string& name, MatrixT<T>& m) { out.emplace_back(name, &m); });
  return out;
}

template <class T>
std::vector<std::pair<std::string, const MatrixT<T>*>> ModelParamsT<T>::tensors() const {
  std::vector<std::pair<std::string, const MatrixT<T>*>> out;
  visit_tensors(*this, [&](const std::string& name, const MatrixT<T>& m) { out.emplace_back(name, &m); });
  return out;
}

template <class T>
std::size_t ModelParamsT<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

template <class T>
bool ModelParamsT<T>::all_finite() const {
  for (const auto& [name, m] : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

template <class T>
void ModelParamsT<T>::set_zero() {
  for (auto& [name, m] : tensors()) m->setZero();
}

template <class T>
template <class U>
ModelParamsT<U> ModelParamsT<T>::cast() const {
  ModelParamsT<U> out;
  out.encoder.resize(encoder.size());
  out.decoder.resize(decoder.size());
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <class T>
ModelParamsT<T> zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index hd = static_cast<Eigen::Index>(cfg.n_heads) * cfg.d_head;
  const Eigen::Index v = cfg.vocab_size;
  const Eigen::Index f = cfg.d_mlp;
  auto z = [](Eigen::Index r, Eigen::Index c) { return MatrixT<T>::Zero(r, c).eval(); };
  auto ln = [&] { return LayerNormParams<T>{z(1, d), z(1, d)}; };
  auto attn = [&] { return AttentionParams<T>{z(d, hd), z(d, hd), z(d, hd), z(hd, d), z(1, d)}; };
  auto mlp = [&] { return MlpParams<T>{z(d, f), z(1, f), z(f, d), z(1, d)}; };

  ModelParamsT<T> p;
  p.embed = z(v, d);
  for (int l = 0; l < cfg.enc_layers; ++l) p.encoder.push_back({ln(), attn(), ln(), mlp()});
  p.enc_final = ln();
  for (int l = 0; l < cfg.dec_layers; ++l) p.decoder.push_back({ln(), attn(), ln(), attn(), ln(), mlp()});
  p.dec_final = ln();
  p.unembed = z(d, v);
  return p;
}

template <class T>
void check_shapes(const ModelParamsT<T>& params, const ModelConfig& cfg) {
  if (static_cast<int>(params.encoder.size()) != cfg.enc_layers ||
      static_cast<int>(params.decoder.size()) != cfg.dec_layers) {
    throw ConfigError("parameters: layer count does not match the config");
  }
  auto expected = zero_params<T>(cfg);
  auto want = expected.tensors();
  auto have = params.tensors();
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].second->rows() != have[i].second->rows() || want[i].second->cols() != have[i].second->cols()) {
      throw ConfigError("parameters: tensor " + want[i].first + " has shape " + std::to_string(have[i].second->rows()) +
                        "x" + std::to_string(have[i].second->cols()) + ", expected " +
                        std::to_string(want[i].second->rows()) + "x" + std::to_string(want[i].second->cols()));
    }
  }
}

ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  ModelParams p = zero_params<float>(cfg);
  const double stddev = cfg.init_scale / std::sqrt(static_cast<double>(cfg.d_model));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& [name, m] : p.tensors()) {
    if (ends_with(name, ".gain")) {
      m->setOnes();
    } else if (ends_with(name, ".bias") || ends_with(name, ".b_o") || ends_with(name, ".b_in") ||
               ends_with(name, ".b_out")) {
      m->setZero();
    } else {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<float>(stddev * normal(rng));
    }
  }
  return p;
}

Vector positional_embedding(int pos, const ModelConfig& cfg) {
  if (pos < 0 || pos >= cfg.max_len) throw BoundsError("position " + std::to_string(pos) + " outside [0, max_len)");
  Vector pe(cfg.d_model);
  for (int i = 0; 2 * i < cfg.d_model; ++i) {
    const double angle = pos / std::pow(10000.0, 2.0 * i / cfg.d_model);
    pe(2 * i) = static_cast<float>(std::sin(angle));
    if (2 * i + 1 < cfg.d_model) pe(2 * i + 1) = static_cast<float>(std::cos(angle));
  }
  return pe;
}

namespace {

const AttentionParams<float>& attention_of(const ModelParams& params, const NodeRef& node) {
  if (node.component == Component::encoder) return params.encoder.at(static_cast<std::size_t>(node.layer)).self_attn;
  const auto& layer = params.decoder.at(static_cast<std::size_t>(node.layer));
  return node.kind == AttnKind::self ? layer.self_attn : layer.cross_attn;
}

}  // namespace

Vector ov_transform(const ModelParams& params, const ModelConfig& cfg, const NodeRef& node, const Vector& x) {
  if (!node.is_head_site()) throw NodeError("ov_transform needs an attention head, got " + to_string(node));
  validate_node(node, cfg);
  if (x.size() != cfg.d_model) throw NodeError("ov_transform: input has the wrong width");
  const auto& a = attention_of(params, node);
  const Eigen::Index off = static_cast<Eigen::Index>(node.head) * cfg.d_head;
  Eigen::RowVectorXf v = x.transpose() * a.w_v.middleCols(off, cfg.d_head);
  Eigen::RowVectorXf out = v * a.w_o.middleRows(off, cfg.d_head);
  return out.transpose();
}

int argmax_lowest(const Eigen::Ref<const Matrix>& row) {
  int best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(0, j) > row(0, best)) best = static_cast<int>(j);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Cache, taps, patches

const Matrix& ActivationCache::at(const NodeRef& n) const {
  auto it = values.find(n);
  if (it == values.end()) throw NodeError("activation not cached: " + to_string(n));
  return it->second;
}

bool TapSelector::wants(const NodeRef& n) const {
  switch (mode) {
    case TapMode::none:
      return false;
    case TapMode::all:
      return true;
    case TapMode::listed:
      return std::find(nodes.begin(), nodes.end(), n) != nodes.end();
  }
  return false;
}

std::string to_string(PatchAction a) {
  switch (a) {
    case PatchAction::freeze_from_clean:
      return "freeze_from_clean";
    case PatchAction::mean_ablate:
      return "mean_ablate";
    case PatchAction::random_sample_ablate:
      return "random_sample_ablate";
    case PatchAction::permute_positions:
      return "permute_positions";
    case PatchAction::replace_with:
      return "replace_with";
  }
  return "?";
}

PatchAction parse_patch_action(std::string_view s) {
  for (auto a : {PatchAction::freeze_from_clean, PatchAction::mean_ablate, PatchAction::random_sample_ablate,
                 PatchAction::permute_positions, PatchAction::replace_with}) {
    if (to_string(a) == s) return a;
  }
  if (s == "swap_positions") return PatchAction::permute_positions;
  throw PatchError("unknown patch action: " + std::string(s));
}

std::vector<int> transposition(int n, int a, int b) {
  if (a < 0 || b < 0 || a >= n || b >= n) throw PatchError("swap positions out of range");
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  std::swap(p[static_cast<std::size_t>(a)], p[static_cast<std::size_t>(b)]);
  return p;
}

std::vector<int> compose_permutations(const std::vector<int>& first, const std::vector<int>& second) {
  if (first.size() != second.size()) throw PatchError("cannot compose permutations of different sizes");
  std::vector<int> out(first.size());
  for (std::size_t i = 0; i < first.size(); ++i) out[i] = first.at(static_cast<std::size_t>(second[i]));
  return out;
}

PatchSpec& PatchSpec::swap_positions(const NodeRef& n, int a, int b, bool positional_only, int n_rows) {
  PatchDirective d;
  d.node = n;
  d.action = PatchAction::permute_positions;
  d.permutation = transposition(n_rows, a, b);
  d.positional_component_only = positional_only;
  return add(std::move(d));
}

void PatchSpec::validate(const ModelConfig& cfg) const {
  for (std::size_t i = 0; i < directives.size(); ++i) {
    const auto& d = directives[i];
    validate_node(d.node, cfg);
    for (int p : d.positions) {
      if (p < 0 || p >= cfg.max_len) throw PatchError("patch position out of range on " + to_string(d.node));
    }
    if (d.action == PatchAction::permute_positions) {
      std::vector<int> sorted = d.permutation;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t k = 0; k < sorted.size(); ++k) {
        if (sorted[k] != static_cast<int>(k)) throw PatchError("permutation is not a bijection on " + to_string(d.node));
      }
      if (d.positional_component_only) {
        const bool separable = d.node.layer == 0 && d.node.kind == AttnKind::self &&
                               (d.node.site == Site::Q || d.node.site == Site::K || d.node.site == Site::V);
        if (!separable) {
          throw PatchError("positional component is only separable at layer-0 self-attention Q/K/V: " +
                           to_string(d.node));
        }
      }
    }
    for (std::size_t j = i + 1; j < directives.size(); ++j) {
      const auto& e = directives[j];
      if (!(e.node == d.node)) continue;
      bool overlap = d.positions.empty() || e.positions.empty();
      for (int p : d.positions) {
        if (std::find(e.positions.begin(), e.positions.end(), p) != e.positions.end()) overlap = true;
      }
      if (overlap) throw PatchError("more than one directive for the same position of " + to_string(d.node));
    }
  }
}

// ---------------------------------------------------------------------------
// Forward machinery

template <class T>
struct LnTape {
  MatrixT<T> xhat;
  VectorT<T> rstd;
};

template <class T>
struct AttnTape {
  bool self = true;
  MatrixT<T> xq, xkv;  // xkv only for cross-attention
  MatrixT<T> q, k, v, o;
  std::vector<MatrixT<T>> probs;  // [segment * n_heads + head]
};

template <class T>
struct MlpTape {
  MatrixT<T> x, pre, act;
};

struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

template <class T>
struct ForwardTape {
  std::vector<Segment> enc_segs, dec_segs;
  TokenSeq enc_tokens, dec_tokens;
  MatrixT<T> enc_drop, dec_drop;
  struct Enc {
    LnTape<T> ln1;
    AttnTape<T> attn;
    MatrixT<T> drop1;
    LnTape<T> ln2;
    MlpTape<T> mlp;
    MatrixT<T> drop2;
  };
  struct Dec {
    LnTape<T> ln1;
    AttnTape<T> self;
    MatrixT<T> drop1;
    LnTape<T> ln2;
    AttnTape<T> cross;
    MatrixT<T> drop2;
    LnTape<T> ln3;
    MlpTape<T> mlp;
    MatrixT<T> drop3;
  };
  std::vector<Enc> enc;
  LnTape<T> enc_final;
  std::vector<Dec> dec;
  LnTape<T> dec_final;
  MatrixT<T> dec_out;
};

namespace {

template <class T>
MatrixT<T> layer_norm(const MatrixT<T>& x, const LayerNormParams<T>& p, T eps, LnTape<T>* tape,
                      VectorT<T>* mean_out = nullptr, VectorT<T>* rstd_out = nullptr) {
  VectorT<T> mean = x.rowwise().mean();
  MatrixT<T> xc = x.colwise() - mean;
  VectorT<T> var = xc.array().square().rowwise().mean();
  VectorT<T> rstd = (var.array() + eps).rsqrt();
  MatrixT<T> xhat = xc.array().colwise() * rstd.array();
  MatrixT<T> y = (xhat.array().rowwise() * p.gain.row(0).array()).rowwise() + p.bias.row(0).array();
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
  if (tape) {
    tape->xhat = std::move(xhat);
    tape->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
MatrixT<T> layer_norm_backward(const MatrixT<T>& dy, const LayerNormParams<T>& p, const LnTape<T>& tape,
                               LayerNormParams<T>& g) {
  g.gain.row(0) += (dy.array() * tape.xhat.array()).colwise().sum().matrix();
  g.bias.row(0) += dy.colwise().sum();
  MatrixT<T> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  VectorT<T> m1 = dxhat.rowwise().mean();
  VectorT<T> m2 = (dxhat.array() * tape.xhat.array()).rowwise().mean();
  MatrixT<T> dx = (dxhat.colwise() - m1).array() - tape.xhat.array().colwise() * m2.array();
  return dx.array().colwise() * tape.rstd.array();
}

template <class T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T inner = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

template <class T>
MatrixT<T> mlp_forward(const MlpParams<T>& p, const MatrixT<T>& x, MlpTape<T>* tape) {
  MatrixT<T> pre = x * p.w_in;
  pre.rowwise() += p.b_in.row(0);
  MatrixT<T> act = pre.unaryExpr([](T v) { return gelu(v); });
  MatrixT<T> out = act * p.w_out;
  out.rowwise() += p.b_out.row(0);
  if (tape) {
    tape->x = x;
    tape->pre = std::move(pre);
    tape->act = std::move(act);
  }
  return out;
}

template <class T>
MatrixT<T> mlp_backward(const MlpParams<T>& p, const MlpTape<T>& tape, const MatrixT<T>& dout, MlpParams<T>& g) {
  g.b_out.row(0) += dout.colwise().sum();
  g.w_out.noalias() += tape.act.transpose() * dout;
  MatrixT<T> dpre = dout * p.w_out.transpose();
  dpre.array() *= tape.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
  g.b_in.row(0) += dpre.colwise().sum();
  g.w_in.noalias() += tape.x.transpose() * dpre;
  return dpre * p.w_in.transpose();
}

template <class T>
void softmax_rows(MatrixT<T>& s, bool causal) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index n = causal ? std::min<Eigen::Index>(i + 1, s.cols()) : s.cols();
    auto row = s.row(i).head(n);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
    if (n < s.cols()) s.row(i).tail(s.cols() - n).setZero();
  }
}

template <class T>
MatrixT<T> positional_table(const ModelConfig& cfg) {
  MatrixT<T> table(cfg.max_len, cfg.d_model);
  for (int p = 0; p < cfg.max_len; ++p) table.row(p) = positional_embedding(p, cfg).template cast<T>().transpose();
  return table;
}

// Sources the replacement rows for a patch directive and writes them into
// `block`. `recompute` rebuilds the block from permuted positional
// embeddings (layer-0 Q/K/V only).
template <class T>
void apply_directive(const PatchDirective& d, const PatchContext& ctx, MatrixT<T>& block,
                     const std::function<MatrixT<T>(const std::vector<int>&)>* recompute) {
  const Eigen::Index rows = block.rows();
  const Eigen::Index cols = block.cols();
  MatrixT<T> source;
  switch (d.action) {
    case PatchAction::freeze_from_clean: {
      if (!ctx.clean) throw PatchError("freeze_from_clean needs a clean cache: " + to_string(d.node));
      const Matrix& c = ctx.clean->at(d.node);
      if (c.rows() != rows || c.cols() != cols) throw PatchError("clean activation shape mismatch at " + to_string(d.node));
      source = c.template cast<T>();
      break;
    }
    case PatchAction::mean_ablate:
      if (!ctx.ablation) throw PatchError("mean_ablate needs ablation statistics: " + to_string(d.node));
      source = ctx.ablation->mean_rows(d.node, rows, cols).template cast<T>();
      break;
    case PatchAction::random_sample_ablate:
      if (!ctx.ablation || !ctx.rng) throw PatchError("random_sample_ablate needs statistics and an rng");
      source = ctx.ablation->sample_rows(d.node, rows, cols, *ctx.rng).template cast<T>();
      break;
    case PatchAction::replace_with:
      if (d.replacement.rows() != rows || d.replacement.cols() != cols)
        throw PatchError("replacement shape mismatch at " + to_string(d.node));
      source = d.replacement.template cast<T>();
      break;
    case PatchAction::permute_positions: {
      if (static_cast<Eigen::Index>(d.permutation.size()) != rows)
        throw PatchError("permutation length does not match the sequence at " + to_string(d.node));
      if (d.positional_component_only) {
        if (!recompute) throw PatchError("positional component is not separable at " + to_string(d.node));
        source = (*recompute)(d.permutation);
      } else {
        source.resize(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) source.row(i) = block.row(d.permutation[static_cast<std::size_t>(i)]);
      }
      break;
    }
  }
  if (source.rows() != rows || source.cols() != cols) throw PatchError("patch source shape mismatch at " + to_string(d.node));
  if (d.positions.empty()) {
    block = std::move(source);
  } else {
    for (int p : d.positions) {
      if (p < rows) block.row(p) = source.row(p);
    }
  }
}

template <class T>
class ForwardRun {
 public:
  using Mat = MatrixT<T>;
  using Recompute = std::function<Mat(const std::vector<int>&)>;

  ForwardRun(const ModelParamsT<T>& params, const ModelConfig& cfg, const ForwardOptions& opts, ForwardTape<T>* tape)
      : p_(params), cfg_(cfg), opts_(opts), tape_(tape), pe_(positional_table<T>(cfg)) {
    hooked_ = (opts.patches && !opts.patches->empty()) || opts.taps.mode != TapMode::none;
    taps_on_ = opts.taps.mode != TapMode::none;
    if (opts.mode == Mode::train && cfg.dropout > 0.0 && !opts.dropout_rng)
      throw ConfigError("train mode with dropout needs an rng");
    if (opts.patches) opts.patches->validate(cfg);
  }

  void set_batch(const std::vector<SequencePair>& batch) {
    if (batch.empty()) throw BoundsError("empty batch");
    if (hooked_ && batch.size() != 1) throw PatchError("patches and taps need a batch of one sequence pair");
    enc_segs_.clear();
    enc_tokens_.clear();
    for (const auto& sp : batch) {
      check_len(sp.prompt.size(), "prompt");
      enc_segs_.push_back({static_cast<Eigen::Index>(enc_tokens_.size()), static_cast<Eigen::Index>(sp.prompt.size())});
      enc_tokens_.insert(enc_tokens_.end(), sp.prompt.begin(), sp.prompt.end());
    }
    std::vector<TokenSeq> dec;
    for (const auto& sp : batch) dec.push_back(sp.dec_input);
    set_decoder_input(dec);
  }

  void set_decoder_input(const std::vector<TokenSeq>& dec) {
    dec_segs_.clear();
    dec_tokens_.clear();
    for (const auto& d : dec) {
      check_len(d.size(), "decoder input");
      dec_segs_.push_back({static_cast<Eigen::Index>(dec_tokens_.size()), static_cast<Eigen::Index>(d.size())});
      dec_tokens_.insert(dec_tokens_.end(), d.begin(), d.end());
    }
  }

  void encode() {
    const bool train = opts_.mode == Mode::train;
    Mat tok = embed(enc_tokens_);
    Mat pos = positions(enc_segs_, static_cast<Eigen::Index>(enc_tokens_.size()));
    hook(NodeRef::layer_site(Component::encoder, 0, Site::pos_embed), pos);
    Mat x = tok + pos;
    if (tape_) {
      tape_->enc.resize(p_.encoder.size());
      tape_->enc_segs = enc_segs_;
      tape_->enc_tokens = enc_tokens_;
    }
    dropout(x, tape_ ? &tape_->enc_drop : nullptr);

    for (std::size_t l = 0; l < p_.encoder.size(); ++l) {
      const auto& layer = p_.encoder[l];
      auto* lt = tape_ ? &tape_->enc[l] : nullptr;
      const int li = static_cast<int>(l);
      hook(NodeRef::layer_site(Component::encoder, li, Site::resid_pre), x);
      Mat h = layer_norm(x, layer.ln_attn, eps(), lt ? &lt->ln1 : nullptr);
      const LayerNormParams<T>* ln0 = (l == 0 && hooked_ && !train) ? &layer.ln_attn : nullptr;
      Mat a = attention(layer.self_attn, h, nullptr, enc_segs_, enc_segs_, false,
                        {Component::encoder, AttnKind::self, li, 0, Site::Z}, lt ? &lt->attn : nullptr, ln0 ? &tok : nullptr,
                        ln0 ? &pos : nullptr, ln0);
      dropout(a, lt ? &lt->drop1 : nullptr);
      x += a;
      Mat h2 = layer_norm(x, layer.ln_mlp, eps(), lt ? &lt->ln2 : nullptr);
      Mat m = mlp_forward(layer.mlp, h2, lt ? &lt->mlp : nullptr);
      hook(NodeRef::layer_site(Component::encoder, li, Site::mlp_out), m);
      dropout(m, lt ? &lt->drop2 : nullptr);
      x += m;
    }
    enc_out_ = layer_norm(x, p_.enc_final, eps(), tape_ ? &tape_->enc_final : nullptr);
    if (taps_on_) cache_.enc_out = enc_out_.template cast<float>();
  }

  Mat decode() {
    const bool train = opts_.mode == Mode::train;
    Mat tok = embed(dec_tokens_);
    Mat pos = positions(dec_segs_, static_cast<Eigen::Index>(dec_tokens_.size()));
    hook(NodeRef::layer_site(Component::decoder, 0, Site::pos_embed), pos);
    Mat y = tok + pos;
    if (tape_) {
      tape_->dec.resize(p_.decoder.size());
      tape_->dec_segs = dec_segs_;
      tape_->dec_tokens = dec_tokens_;
    }
    dropout(y, tape_ ? &tape_->dec_drop : nullptr);

    for (std::size_t l = 0; l < p_.decoder.size(); ++l) {
      const auto& layer = p_.decoder[l];
      auto* lt = tape_ ? &tape_->dec[l] : nullptr;
      const int li = static_cast<int>(l);
      hook(NodeRef::layer_site(Component::decoder, li, Site::resid_pre), y);
      Mat h = layer_norm(y, layer.ln_self, eps(), lt ? &lt->ln1 : nullptr);
      const LayerNormParams<T>* ln0 = (l == 0 && hooked_ && !train) ? &layer.ln_self : nullptr;
      Mat a = attention(layer.self_attn, h, nullptr, dec_segs_, dec_segs_, true,
                        {Component::decoder, AttnKind::self, li, 0, Site::Z}, lt ? &lt->self : nullptr, ln0 ? &tok : nullptr,
                        ln0 ? &pos : nullptr, ln0);
      dropout(a, lt ? &lt->drop1 : nullptr);
      y += a;
      Mat hc = layer_norm(y, layer.ln_cross, eps(), lt ? &lt->ln2 : nullptr);
      Mat c = attention(layer.cross_attn, hc, &enc_out_, dec_segs_, enc_segs_, false,
                        {Component::decoder, AttnKind::cross, li, 0, Site::Z}, lt ? &lt->cross : nullptr, nullptr, nullptr,
                        nullptr);
      dropout(c, lt ? &lt->drop2 : nullptr);
      y += c;
      Mat h3 = layer_norm(y, layer.ln_mlp, eps(), lt ? &lt->ln3 : nullptr);
      Mat m = mlp_forward(layer.mlp, h3, lt ? &lt->mlp : nullptr);
      hook(NodeRef::layer_site(Component::decoder, li, Site::mlp_out), m);
      dropout(m, lt ? &lt->drop3 : nullptr);
      y += m;
    }
    VectorT<T> mean, rstd;
    Mat out = layer_norm(y, p_.dec_final, eps(), tape_ ? &tape_->dec_final : nullptr, &mean, &rstd);
    Mat logits = out * p_.unembed;
    hook(NodeRef::logits(), logits);
    if (tape_) tape_->dec_out = std::move(out);
    if (taps_on_) {
      cache_.dec_resid = y.template cast<float>();
      cache_.final_ln_mean = mean.template cast<float>();
      cache_.final_ln_rstd = rstd.template cast<float>();
      cache_.logits = logits.template cast<float>();
      cache_.prompt = enc_tokens_;
      cache_.dec_tokens = dec_tokens_;
    }
    return logits;
  }

  ActivationCache take_cache() { return std::move(cache_); }

 private:
  T eps() const { return static_cast<T>(cfg_.ln_epsilon); }

  void check_len(std::size_t n, const char* what) const {
    if (n == 0) throw BoundsError(std::string(what) + " is empty");
    if (static_cast<int>(n) > cfg_.max_len)
      throw BoundsError(std::string(what) + " of length " + std::to_string(n) + " exceeds max_len " +
                        std::to_string(cfg_.max_len));
  }

  Mat embed(const TokenSeq& tokens) const {
    const T scale = std::sqrt(static_cast<T>(cfg_.d_model));
    Mat x(static_cast<Eigen::Index>(tokens.size()), cfg_.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_size) throw BoundsError("token id outside the vocabulary");
      x.row(static_cast<Eigen::Index>(i)) = p_.embed.row(tokens[i]) * scale;
    }
    return x;
  }

  Mat positions(const std::vector<Segment>& segs, Eigen::Index rows) const {
    Mat pos(rows, cfg_.d_model);
    for (const auto& s : segs) pos.middleRows(s.offset, s.length) = pe_.topRows(s.length);
    return pos;
  }

  void dropout(Mat& x, Mat* mask_out) {
    if (opts_.mode != Mode::train || cfg_.dropout <= 0.0) return;
    const T keep = static_cast<T>(1.0 - cfg_.dropout);
    Mat mask(x.rows(), x.cols());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = u(*opts_.dropout_rng) < cfg_.dropout ? T(0) : T(1) / keep;
    }
    x.array() *= mask.array();
    if (mask_out) *mask_out = std::move(mask);
  }

  void hook(const NodeRef& node, Mat& block, const Recompute* recompute = nullptr) {
    if (!hooked_) return;
    if (opts_.patches) {
      for (const auto& d : opts_.patches->directives) {
        if (d.node == node) apply_directive<T>(d, opts_.context, block, recompute);
      }
    }
    if (opts_.taps.wants(node)) cache_.values[node] = block.template cast<float>();
  }

  // xkv == nullptr means self-attention over xq.
  Mat attention(const AttentionParams<T>& p, const Mat& xq, const Mat* xkv_ptr, const std::vector<Segment>& qsegs,
                const std::vector<Segment>& ksegs, bool causal, NodeRef node, AttnTape<T>* tape, const Mat* tok0,
                const Mat* pos0, const LayerNormParams<T>* ln0) {
    const Mat& xkv = xkv_ptr ? *xkv_ptr : xq;
    const Eigen::Index H = cfg_.n_heads;
    const Eigen::Index dh = cfg_.d_head;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat q = xq * p.w_q;
    Mat k = xkv * p.w_k;
    Mat v = xkv * p.w_v;

    if (hooked_) {
      for (Eigen::Index h = 0; h < H; ++h) {
        node.head = static_cast<int>(h);
        for (auto [site, mat, w] : {std::tuple{Site::Q, &q, &p.w_q}, std::tuple{Site::K, &k, &p.w_k},
                                    std::tuple{Site::V, &v, &p.w_v}}) {
          Mat block = mat->middleCols(h * dh, dh);
          Recompute recompute;
          if (ln0) {
            recompute = [&, w = w, h](const std::vector<int>& perm) {
              Mat permuted = *pos0;
              for (Eigen::Index i = 0; i < permuted.rows(); ++i) permuted.row(i) = pos0->row(perm[static_cast<std::size_t>(i)]);
              Mat alt = layer_norm<T>(*tok0 + permuted, *ln0, eps(), nullptr);
              Mat full = alt * *w;
              return Mat(full.middleCols(h * dh, dh));
            };
          }
          node.site = site;
          hook(node, block, ln0 ? &recompute : nullptr);
          mat->middleCols(h * dh, dh) = block;
        }
      }
    }

    Mat o = Mat::Zero(xq.rows(), H * dh);
    if (tape) tape->probs.assign(qsegs.size() * static_cast<std::size_t>(H), Mat());
    for (std::size_t s = 0; s < qsegs.size(); ++s) {
      const auto& qs = qsegs[s];
      const auto& ks = ksegs[s];
      for (Eigen::Index h = 0; h < H; ++h) {
        Mat scores = q.block(qs.offset, h * dh, qs.length, dh) * k.block(ks.offset, h * dh, ks.length, dh).transpose();
        scores *= scale;
        softmax_rows(scores, causal);
        if (hooked_) {
          node.head = static_cast<int>(h);
          node.site = Site::attn_weights;
          hook(node, scores);
        }
        o.block(qs.offset, h * dh, qs.length, dh).noalias() = scores * v.block(ks.offset, h * dh, ks.length, dh);
        if (tape) tape->probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = std::move(scores);
      }
    }

    Mat out(xq.rows(), cfg_.d_model);
    if (hooked_) {
      out.setZero();
      for (Eigen::Index h = 0; h < H; ++h) {
        Mat z = o.middleCols(h * dh, dh) * p.w_o.middleRows(h * dh, dh);
        node.head = static_cast<int>(h);
        node.site = Site::Z;
        hook(node, z);
        out += z;
      }
    } else {
      out.noalias() = o * p.w_o;
    }
    out.rowwise() += p.b_o.row(0);

    if (tape) {
      tape->self = xkv_ptr == nullptr;
      tape->xq = xq;
      if (xkv_ptr) tape->xkv = *xkv_ptr;
      tape->q = std::move(q);
      tape->k = std::move(k);
      tape->v = std::move(v);
      tape->o = std::move(o);
    }
    return out;
  }

  const ModelParamsT<T>& p_;
  const ModelConfig& cfg_;
  const ForwardOptions& opts_;
  ForwardTape<T>* tape_;
  Mat pe_;
  bool hooked_ = false;
  bool taps_on_ = false;
  std::vector<Segment> enc_segs_, dec_segs_;
  TokenSeq enc_tokens_, dec_tokens_;
  Mat enc_out_;
  ActivationCache cache_;
};

// Returns (d xq, d xkv); for self-attention d xkv is folded into d xq.
template <class T>
std::pair<MatrixT<T>, MatrixT<T>> attention_backward(const AttentionParams<T>& p, const AttnTape<T>& tape,
                                                     const std::vector<Segment>& qsegs, const std::vector<Segment>& ksegs,
                                                     const MatrixT<T>& dout, int n_heads, int d_head,
                                                     AttentionParams<T>& g) {
  using Mat = MatrixT<T>;
  const Eigen::Index H = n_heads;
  const Eigen::Index dh = d_head;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  g.b_o.row(0) += dout.colwise().sum();
  g.w_o.noalias() += tape.o.transpose() * dout;
  Mat d_o = dout * p.w_o.transpose();

  Mat dq = Mat::Zero(tape.q.rows(), tape.q.cols());
  Mat dk = Mat::Zero(tape.k.rows(), tape.k.cols());
  Mat dv = Mat::Zero(tape.v.rows(), tape.v.cols());
  for (std::size_t s = 0; s < qsegs.size(); ++s) {
    const auto& qs = qsegs[s];
    const auto& ks = ksegs[s];
    for (Eigen::Index h = 0; h < H; ++h) {
      const Mat& P = tape.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
      auto dO = d_o.block(qs.offset, h * dh, qs.length, dh);
      Mat dP = dO * tape.v.block(ks.offset, h * dh, ks.length, dh).transpose();
      dv.block(ks.offset, h * dh, ks.length, dh).noalias() += P.transpose() * dO;
      VectorT<T> rowdot = (dP.array() * P.array()).rowwise().sum();
      Mat dS = (P.array() * (dP.colwise() - rowdot).array()) * scale;
      dq.block(qs.offset, h * dh, qs.length, dh).noalias() += dS * tape.k.block(ks.offset, h * dh, ks.length, dh);
      dk.block(ks.offset, h * dh, ks.length, dh).noalias() += dS.transpose() * tape.q.block(qs.offset, h * dh, qs.length, dh);
    }
  }
  const Mat& xkv = tape.self ? tape.xq : tape.xkv;
  g.w_q.noalias() += tape.xq.transpose() * dq;
  g.w_k.noalias() += xkv.transpose() * dk;
  g.w_v.noalias() += xkv.transpose() * dv;
  Mat dxq = dq * p.w_q.transpose();
  Mat dxkv = dk * p.w_k.transpose();
  dxkv.noalias() += dv * p.w_v.transpose();
  if (tape.self) {
    dxq += dxkv;
    return {std::move(dxq), Mat()};
  }
  return {std::move(dxq), std::move(dxkv)};
}

template <class T>
void apply_dropout_grad(MatrixT<T>& d, const MatrixT<T>& mask) {
  if (mask.size() > 0) d.array() *= mask.array();
}

template <class T>
void embedding_backward(const TokenSeq& tokens, const MatrixT<T>& dx, T scale, MatrixT<T>& dembed) {
  for (std::size_t i = 0; i < tokens.size(); ++i) dembed.row(tokens[i]) += dx.row(static_cast<Eigen::Index>(i)) * scale;
}

}  // namespace

template <class T>
ForwardResult<T> forward(const ModelParamsT<T>& params, const ModelConfig& cfg, const std::vector<SequencePair>& batch,
                         const ForwardOptions& opts, bool keep_tape) {
  ForwardResult<T> result;
  if (keep_tape) result.tape = std::make_shared<ForwardTape<T>>();
  ForwardRun<T> run(params, cfg, opts, result.tape.get());
  run.set_batch(batch);
  run.encode();
  result.logits = run.decode();
  if (opts.taps.mode != TapMode::none) result.cache = run.take_cache();
  return result;
}

ForwardResult<float> forward(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt,
                             const TokenSeq& dec_prefix, const ForwardOptions& opts) {
  return forward<float>(params, cfg, {SequencePair{prompt, dec_prefix}}, opts, false);
}

template <class T>
void backward(const ModelParamsT<T>& params, const ModelConfig& cfg, const ForwardTape<T>& tape,
              const MatrixT<T>& dlogits, ModelParamsT<T>& grads) {
  using Mat = MatrixT<T>;
  const T scale = std::sqrt(static_cast<T>(cfg.d_model));
  grads.unembed.noalias() += tape.dec_out.transpose() * dlogits;
  Mat dy = layer_norm_backward<T>(dlogits * params.unembed.transpose(), params.dec_final, tape.dec_final, grads.dec_final);

  Mat d_enc_out = Mat::Zero(static_cast<Eigen::Index>(tape.enc_tokens.size()), cfg.d_model);
  for (std::size_t li = params.decoder.size(); li-- > 0;) {
    const auto& layer = params.decoder[li];
    auto& g = grads.decoder[li];
    const auto& lt = tape.dec[li];

    Mat dm = dy;
    apply_dropout_grad(dm, lt.drop3);
    dy += layer_norm_backward<T>(mlp_backward<T>(layer.mlp, lt.mlp, dm, g.mlp), layer.ln_mlp, lt.ln3, g.ln_mlp);

    Mat dc = dy;
    apply_dropout_grad(dc, lt.drop2);
    auto [dxq_c, dxkv_c] =
        attention_backward<T>(layer.cross_attn, lt.cross, tape.dec_segs, tape.enc_segs, dc, cfg.n_heads, cfg.d_head, g.cross_attn);
    d_enc_out += dxkv_c;
    dy += layer_norm_backward<T>(dxq_c, layer.ln_cross, lt.ln2, g.ln_cross);

    Mat ds = dy;
    apply_dropout_grad(ds, lt.drop1);
    auto [dxq_s, unused] =
        attention_backward<T>(layer.self_attn, lt.self, tape.dec_segs, tape.dec_segs, ds, cfg.n_heads, cfg.d_head, g.self_attn);
    dy += layer_norm_backward<T>(dxq_s, layer.ln_self, lt.ln1, g.ln_self);
  }
  apply_dropout_grad(dy, tape.dec_drop);
  embedding_backward<T>(tape.dec_tokens, dy, scale, grads.embed);

  Mat dx = layer_norm_backward<T>(d_enc_out, params.enc_final, tape.enc_final, grads.enc_final);
  for (std::size_t li = params.encoder.size(); li-- > 0;) {
    const auto& layer = params.encoder[li];
    auto& g = grads.encoder[li];
    const auto& lt = tape.enc[li];

    Mat dm = dx;
    apply_dropout_grad(dm, lt.drop2);
    dx += layer_norm_backward<T>(mlp_backward<T>(layer.mlp, lt.mlp, dm, g.mlp), layer.ln_mlp, lt.ln2, g.ln_mlp);

    Mat da = dx;
    apply_dropout_grad(da, lt.drop1);
    auto [dxq, unused] =
        attention_backward<T>(layer.self_attn, lt.attn, tape.enc_segs, tape.enc_segs, da, cfg.n_heads, cfg.d_head, g.self_attn);
    dx += layer_norm_backward<T>(dxq, layer.ln_attn, lt.ln1, g.ln_attn);
  }
  apply_dropout_grad(dx, tape.enc_drop);
  embedding_backward<T>(tape.enc_tokens, dx, scale, grads.embed);
}

TokenSeq greedy_decode(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt, TokenId sos,
                       TokenId eos, int max_steps) {
  TokenSeq emitted;
  if (max_steps <= 0) return emitted;
  ForwardOptions opts;
  ForwardRun<float> run(params, cfg, opts, nullptr);
  TokenSeq prefix{sos};
  run.set_batch({SequencePair{prompt, prefix}});
  run.encode();
  for (int step = 0; step < max_steps && static_cast<int>(prefix.size()) <= cfg.max_len; ++step) {
    run.set_decoder_input({prefix});
    Matrix logits = run.decode();
    const TokenId next = argmax_lowest(logits.row(logits.rows() - 1));
    emitted.push_back(next);
    if (next == eos || static_cast<int>(prefix.size()) == cfg.max_len) break;
    prefix.push_back(next);
  }
  return emitted;
}

// Explicit instantiations: float for training and analysis, double for
// finite-difference gradient checks.
template struct ModelParamsT<float>;
template struct ModelParamsT<double>;
template ModelParamsT<double> ModelParamsT<float>::cast<double>() const;
template ModelParamsT<float> ModelParamsT<double>::cast<float>() const;
template ModelParamsT<float> zero_params<float>(const ModelConfig&);
template ModelParamsT<double> zero_params<double>(const ModelConfig&);
template void check_shapes<float>(const ModelParamsT<float>&, const ModelConfig&);
template void check_shapes<double>(const ModelParamsT<double>&, const ModelConfig&);
template ForwardResult<float> forward<float>(const ModelParamsT<float>&, const ModelConfig&,
                                             const std::vector<SequencePair>&, const ForwardOptions&, bool);
template ForwardResult<double> forward<double>(const ModelParamsT<double>&, const ModelConfig&,
                                               const std::vector<SequencePair>&, const ForwardOptions&, bool);
template void backward<float>(const ModelParamsT<float>&, const ModelConfig&, const ForwardTape<float>&,
                              const MatrixT<float>&, ModelParamsT<float>&);
template void backward<double>(const ModelParamsT<double>&, const ModelConfig&, const ForwardTape<double>&,
                               const MatrixT<double>&, ModelParamsT<double>&);

}  // namespace circuitlab
