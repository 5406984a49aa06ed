#pragma once

// Functional-role identification, by metric rather than by head index, and
// the tracing and swap protocols built on top of it.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/interp.hpp"

namespace circuitlab {

struct DiscoveryOptions {
  std::size_t n_episodes = 100;     // episodes per patching scan
  std::size_t group_episodes = 50;  // episodes for attention-pattern similarity
  double group_threshold = 0.8;
  int n_null = 1000;
  std::uint64_t seed = 0;
};

struct OutputHeadReport {
  HeadAttributionTable attribution;
  NodeRef output_head;
  StepAccuracy accuracy;  // steps 1..3
  std::vector<AlignmentResult> alignment;  // one per color token
  std::string alignment_input = "mean_encoder_output";
};

// Output Head: the final-layer decoder cross head with the largest mean
// correct-token attribution at step 1.
OutputHeadReport find_output_head(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                  const EpisodeSet& episodes, const DiscoveryOptions& opts);

struct KCircuitReport {
  HeadScan pairing_scan;  // keep-only-one, encoder heads -> Output.K
  NodeRef primitive_pairing;
  HeadScan broadcast_scan;  // keep-only-one, layer-0 heads -> PP.V -> Output.K
  NodeRef question_broadcast;
};

KCircuitReport discover_k_circuit(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& output_head,
                                  const DiscoveryOptions& opts);

struct QCircuitReport {
  HeadScan scanner_scan;  // keep-only-one, decoder layer-0 cross heads -> Output.Q
  NodeRef rhs_scanner;
  HeadScan retrieval_scan;  // ablate-only-one, encoder heads -> Scanner.V -> Output.Q
  std::vector<NodeRef> retrieval;
};

QCircuitReport discover_q_circuit(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& output_head,
                                  const DiscoveryOptions& opts);

// The lead head plus every head of the same component and kind whose
// flattened attention pattern has cosine similarity above the threshold.
std::vector<NodeRef> head_group(const ModelParams& params, const ModelConfig& cfg, const Vocabulary& vocab,
                                const EpisodeSet& episodes, const NodeRef& lead, double threshold);

struct CircuitRoles {
  NodeRef output_head;
  NodeRef primitive_pairing;
  NodeRef question_broadcast;
  NodeRef rhs_scanner;
  std::vector<NodeRef> retrieval;
  std::map<std::string, std::vector<NodeRef>> groups;  // pairing, broadcast, scanner, retrieval
};

nlohmann::json to_json(const CircuitRoles& r);
CircuitRoles roles_from_json(const nlohmann::json& j);

struct TraceEntry {
  std::string name;
  NodeRef node;
  Labeler labeler = Labeler::index_in_question;
  TokenFilter filter = TokenFilter::all;
  std::vector<NodeRef> ablated;  // upstream group, mean-ablated
  double r2_clean = 0.0;
  double r2_ablated = 0.0;
  int n_points = 0;
  double relative_drop() const { return r2_clean != 0.0 ? (r2_clean - r2_ablated) / r2_clean : 0.0; }
};

struct TracingReport {
  std::vector<TraceEntry> entries;
  std::vector<TraceResult> clean_traces;  // figure data, same order
};

// K side: PP.Z at support colors and Output.K at colors (index-in-question),
// ablating the broadcast and pairing groups respectively. Q side: Scanner.Z
// and Output.Q at decoder steps (relative index), ablating the retrieval and
// scanner groups. Also reports QB.Z at symbols without an ablation.
TracingReport trace_circuits(PatchEngine& engine, const EpisodeSet& episodes, const CircuitRoles& roles);

struct SwapSummary {
  int evaluated = 0;
  int consistent = 0;
  double rate = 0.0;             // step-1 argmax moved to the other symbol's color
  double mean_step_rate = 0.0;   // over all answer steps
  std::vector<SwapResult> examples;  // the first few, for figures
};

// Episodes with a two-argument question over two different symbols.
EpisodeSet swap_eligible(const EpisodeSet& episodes, std::size_t limit);

SwapSummary run_swap_experiment(PatchEngine& engine, const EpisodeSet& episodes, const NodeRef& broadcast_head,
                                const NodeRef& output_head, bool freeze_q, std::size_t keep_examples = 3);

nlohmann::json to_json(const OutputHeadReport& r, const Vocabulary& vocab);
nlohmann::json to_json(const KCircuitReport& r);
nlohmann::json to_json(const QCircuitReport& r);
nlohmann::json to_json(const TracingReport& r);
nlohmann::json to_json(const SwapSummary& s, const Vocabulary& vocab);
nlohmann::json to_json(const TraceResult& t);

}  // namespace circuitlab
