#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "circuitlab/grammar.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

struct PoolDescriptor {
  std::size_t size = 0;
  std::vector<std::string> signatures;
};

// Position-wise mean activations over a reference pool, for every tap site.
// Each pool episode runs in eval mode on its prompt and gold decoder prefix.
// Rows beyond an episode's length contribute nothing; a row no pool episode
// reaches falls back to the mean over all observed rows. Sums are kept in
// double and accumulated in pool order, so recomputation is bitwise stable.
//
// random_sample_ablate draws the whole node activation from one stored pool
// cache whose shape matches the request.
class AblationStats : public AblationSource {
 public:
  static AblationStats compute(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                               const EpisodeSet& pool, std::size_t sample_caches = 64);

  Matrix mean_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols) const override;
  Matrix sample_rows(const NodeRef& node, Eigen::Index rows, Eigen::Index cols, Rng& rng) const override;

  const PoolDescriptor& pool() const { return pool_; }
  bool has(const NodeRef& node) const { return sums_.count(node) != 0; }
  std::size_t node_count() const { return sums_.size(); }

 private:
  struct Accum {
    Eigen::MatrixXd sum;
    Eigen::MatrixXd count;
  };
  std::unordered_map<NodeRef, Accum, NodeRefHash> sums_;
  std::vector<ActivationCache> samples_;
  PoolDescriptor pool_;
};

}  // namespace circuitlab
