#pragma once

// Declarative experiments: a JSON config names the pipeline, the checkpoint
// and data it runs on, and the sample sizes; the result is a ReportBundle
// written atomically as JSON.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/discovery.hpp"
#include "circuitlab/stats.hpp"

namespace circuitlab {

inline constexpr int kReportSchemaVersion = 1;

enum class ExperimentKind : std::uint8_t {
  train,
  output_head,
  discover,  // every role, writes roles.json
  discover_k_circuit,
  discover_q_circuit,
  trace_index,
  swap,
  custom_patch
};

std::string to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view s);

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::output_head;
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out_dir;  // empty: report is only returned
  std::filesystem::path roles;    // optional roles.json from a discover run
  std::string split = "test";
  std::uint64_t seed = 0;
  std::size_t stats_pool = 512;      // training episodes behind mean ablation
  std::size_t trace_episodes = 300;
  std::size_t swap_episodes = 200;
  bool freeze_q = true;
  DiscoveryOptions discovery;

  // trace_index with an explicit node
  std::string node;
  Labeler labeler = Labeler::index_in_question;
  TokenFilter filter = TokenFilter::all;
  std::vector<std::string> ablate;

  // swap with explicit heads
  std::string broadcast_head;
  std::string output_head;

  // custom_patch
  nlohmann::json patch;
  std::size_t episode = 0;
  std::vector<std::string> watched;

  // train
  nlohmann::json train_config;

  nlohmann::json source;  // the config as given, for hashing

  // Referenced files exist and kind-specific fields are complete. Throws
  // ConfigError.
  void validate() const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);  // parses and validates
std::string config_hash(const nlohmann::json& j);

struct ReportBundle {
  int schema_version = kReportSchemaVersion;
  std::string id;
  nlohmann::json metadata = nlohmann::json::object();
  nlohmann::json tables = nlohmann::json::object();
  nlohmann::json figures = nlohmann::json::object();
  nlohmann::json patch_outcomes = nlohmann::json::array();
};

nlohmann::json to_json(const ReportBundle& b);

// Model, data and ablation statistics shared by experiments and the service.
struct LabContext {
  Checkpoint checkpoint;
  Dataset data;
  std::optional<AblationStats> stats;

  static LabContext load(const std::filesystem::path& checkpoint, const std::filesystem::path& data);
  const AblationStats& ensure_stats(std::size_t pool);
  const EpisodeSet& split(const std::string& name) const;
};

// Runs the pipeline; when out_dir is set, writes out_dir/report-<id>.json
// (and roles.json for discover). Errors propagate as Error subclasses.
ReportBundle run_experiment(const ExperimentConfig& cfg, LabContext* shared = nullptr);

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

// PatchSpec JSON:
//   {"directives": [{"node": "Enc-self-0.5:V", "action": "mean_ablate",
//     "positions": [..], "permutation": [..], "positional_component_only": false,
//     "replacement": [[..], ..]}]}
// The action "swap_positions" with "pos_a"/"pos_b" builds the transposition
// for the node's row count in `ep`.
PatchSpec patch_spec_from_json(const nlohmann::json& j, const EncodedEpisode& ep);
nlohmann::json to_json(const PatchSpec& spec);

// Number of rows a node's activation has on `ep`.
Eigen::Index node_rows(const NodeRef& node, const EncodedEpisode& ep);

}  // namespace circuitlab
