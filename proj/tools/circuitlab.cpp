#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/errors.hpp"
#include "circuitlab/runner.hpp"
#include "circuitlab/service.hpp"
#include "circuitlab/training.hpp"

using namespace circuitlab;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

nlohmann::json run_and_report(const nlohmann::json& j) {
  auto cfg = experiment_from_json(j);
  auto b = run_experiment(cfg);
  if (!cfg.out_dir.empty()) std::cerr << "report " << (cfg.out_dir / ("report-" + b.id + ".json")).string() << "\n";
  return b.tables;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitlab: compositional-induction episodes, a small encoder-decoder and circuit analysis"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t n_train = 10000, n_test = 2000;
  fs::path out, data, config, ckpt;
  std::string split = "test";
  std::size_t limit = 0;

  auto* gen = app.add_subcommand("gen", "Generate a train/test split with disjoint support signatures");
  gen->add_option("--seed", seed);
  gen->add_option("--train", n_train);
  gen->add_option("--test", n_test);
  gen->add_option("--grammar", config, "Grammar config JSON (defaults otherwise)");
  gen->add_option("--out", out)->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes metrics.jsonl and checkpoints");
  train_cmd->add_option("--data", data)->required();
  train_cmd->add_option("--config", config)->required();
  train_cmd->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "Greedy-decode exact match on a split");
  eval->add_option("--data", data)->required();
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--limit", limit);

  fs::path roles;
  std::size_t episodes = 0;
  std::string node, labeler = "index_in_question", filter = "all", broadcast, output;
  std::vector<std::string> ablate;
  bool no_freeze_q = false;
  auto common = [&](CLI::App* c) {
    c->add_option("--data", data)->required();
    c->add_option("--checkpoint", ckpt)->required();
    c->add_option("--out", out, "Report directory");
    c->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
    c->add_option("--seed", seed);
  };

  auto* experiment = app.add_subcommand("experiment", "Run an experiment config and write its report");
  experiment->add_option("--config", config)->required();
  experiment->add_option("--out", out, "Overrides out_dir");

  auto* discover = app.add_subcommand("discover", "Find the output head and the K and Q circuits; writes roles.json");
  common(discover);
  discover->add_option("--episodes", episodes, "Episodes per scan");

  auto* trace = app.add_subcommand("trace", "Index tracing (R^2 and PCA) at circuit nodes");
  common(trace);
  trace->add_option("--roles", roles, "roles.json from discover; discovered inline otherwise");
  trace->add_option("--node", node, "Trace a single node instead of the circuit set");
  trace->add_option("--labeler", labeler)->check(CLI::IsMember({"index_in_question", "relative_index"}));
  trace->add_option("--filter", filter);
  trace->add_option("--ablate", ablate, "Heads mean-ablated while tracing --node");
  trace->add_option("--episodes", episodes);

  auto* swap = app.add_subcommand("swap", "Positional swap at the broadcast head's V");
  common(swap);
  swap->add_option("--roles", roles);
  swap->add_option("--broadcast-head", broadcast);
  swap->add_option("--output-head", output);
  swap->add_option("--episodes", episodes);
  swap->add_flag("--no-freeze-q", no_freeze_q, "Let the output head's queries respond to the swap");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t queue = 8;
  auto* serve = app.add_subcommand("serve", "HTTP service over one checkpoint");
  serve->add_option("--data", data)->required();
  serve->add_option("--checkpoint", ckpt)->required();
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--reports", out, "Report directory")->default_val("reports");
  serve->add_option("--queue", queue, "Experiment queue capacity");

  CLI11_PARSE(app, argc, argv);

  auto base = [&](const std::string& kind) {
    nlohmann::json j = {{"kind", kind}, {"checkpoint", ckpt.string()}, {"data", data.string()}, {"split", split},
                        {"seed", seed}};
    if (!out.empty()) j["out_dir"] = out.string();
    if (!roles.empty()) j["roles"] = roles.string();
    return j;
  };

  try {
    if (*gen) {
      GrammarConfig g = config.empty() ? GrammarConfig{} : grammar_from_json(read_json_file(config));
      g.seed = seed;
      g.validate();
      Rng rng(seed);
      auto s = generate_split(rng, g, n_train, n_test);
      write_dataset(out, g, s);
      std::cout << "wrote " << s.train.size() << " train / " << s.test.size() << " test episodes to " << out << "\n";
    } else if (*train_cmd) {
      auto ds = read_dataset(data);
      auto cfg = train_config_from_json(read_json_file(config));
      auto r = train_to_dir(ds, cfg, out);
      std::cout << "final test exact match " << r.history.back().test_exact_match << "\n";
    } else if (*eval) {
      auto ds = read_dataset(data);
      auto ck = load_checkpoint(ckpt, &ds.vocab);
      const auto& eps = split == "train" ? ds.train : ds.test;
      nlohmann::json r = {{"split", split},
                          {"exact_match", evaluate_exact_match(ck.params, ck.config, ds.vocab, eps, limit)},
                          {"episodes", limit == 0 ? eps.size() : std::min(limit, eps.size())}};
      std::cout << r.dump() << "\n";
    } else if (*experiment) {
      auto j = read_json_file(config);
      if (!out.empty()) j["out_dir"] = out.string();
      std::cout << run_and_report(j).dump(1) << "\n";
    } else if (*discover) {
      auto j = base("discover");
      if (episodes) j["n_episodes"] = episodes;
      std::cout << run_and_report(j)["roles"].dump(1) << "\n";
    } else if (*trace) {
      auto j = base("trace-index");
      if (!node.empty()) {
        j["node"] = node;
        j["labeler"] = labeler;
        j["filter"] = filter;
        j["ablate"] = ablate;
      }
      if (episodes) j["trace_episodes"] = episodes;
      auto t = run_and_report(j);
      std::cout << (t.contains("tracing") ? t["tracing"] : t["trace"]).dump(1) << "\n";
    } else if (*swap) {
      auto j = base("swap");
      if (!broadcast.empty()) j["broadcast_head"] = broadcast;
      if (!output.empty()) j["output_head"] = output;
      if (episodes) j["swap_episodes"] = episodes;
      j["freeze_q"] = !no_freeze_q;
      std::cout << run_and_report(j)["swap"].dump(1) << "\n";
    } else if (*serve) {
      ServiceOptions opts;
      opts.checkpoint = ckpt;
      opts.data = data;
      opts.report_dir = out;
      opts.queue_capacity = queue;
      LabService svc(opts);
      if (!svc.bind(host, port)) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
      std::cerr << "listening on " << host << ":" << port << "\n";
      svc.listen_after_bind();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
