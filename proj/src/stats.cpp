#include "circuitlab/stats.hpp"

#include "circuitlab/errors.hpp"

namespace circuitlab {

AblationStats AblationStats::compute(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                     const EpisodeSet& pool, std::size_t sample_caches) {
  if (pool.empty()) throw StatsError("ablation statistics need a non-empty pool");
  AblationStats stats;
  stats.pool_.size = pool.size();
  ForwardOptions opts;
  opts.taps = TapSelector::all();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Episode& ep = pool[i];
    stats.pool_.signatures.push_back(signature_hex(episode_signature(ep)));
    auto fwd = forward(params, cfg, render_prompt(ep, vocab), decoder_input(ep, vocab), opts);
    ActivationCache& cache = *fwd.cache;
    for (const auto& [node, m] : cache.values) {
      auto& acc = stats.sums_[node];
      if (acc.sum.size() == 0) {
        const Eigen::Index cols = node.site == Site::attn_weights ? cfg.max_len : m.cols();
        acc.sum = Eigen::MatrixXd::Zero(cfg.max_len, cols);
        acc.count = Eigen::MatrixXd::Zero(cfg.max_len, cols);
      }
      if (m.cols() > acc.sum.cols()) throw StatsError("activation wider than expected at " + to_string(node));
      acc.sum.topLeftCorner(m.rows(), m.cols()) += m.cast<double>();
      acc.count.topLeftCorner(m.rows(), m.cols()).array() += 1.0;
    }
    if (stats.samples_.size() < sample_caches) stats.samples_.push_back(std::move(cache));
  }
  return stats;
}

Matrix AblationStats::mean_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols) const {
  auto it = sums_.find(node);
  if (it == sums_.end()) throw StatsError("no ablation statistics for " + to_string(node));
  const Accum& acc = it->second;
  if (rows > acc.sum.rows() || cols > acc.sum.cols())
    throw StatsError("requested mean is larger than any pooled activation at " + to_string(node));
  Matrix out(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double total = acc.count.col(c).sum();
    const double fallback = total > 0 ? acc.sum.col(c).sum() / total : 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double n = acc.count(r, c);
      out(r, c) = static_cast<float>(n > 0 ? acc.sum(r, c) / n : fallback);
    }
  }
  return out;
}

Matrix AblationStats::sample_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols, Rng& rng) const {
  std::vector<const Matrix*> compatible;
  for (const auto& cache : samples_) {
    auto it = cache.values.find(node);
    if (it != cache.values.end() && it->second.rows() == rows && it->second.cols() == cols) compatible.push_back(&it->second);
  }
  if (compatible.empty())
    throw StatsError("no pool episode of compatible length for random-sample ablation at " + to_string(node));
  std::uniform_int_distribution<std::size_t> pick(0, compatible.size() - 1);
  return *compatible[pick(rng)];
}

}  // namespace circuitlab
