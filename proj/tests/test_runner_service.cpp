#include <doctest.h>

#include <chrono>
#include <fstream>
#include <thread>

#include "circuitlab/errors.hpp"
#include "circuitlab/runner.hpp"
#include "circuitlab/service.hpp"
#include "support.hpp"

#include <httplib.h>

using namespace circuitlab;
using nlohmann::json;

namespace {

struct Fixture {
  std::filesystem::path dir;
  Dataset data;
  ModelConfig cfg;

  explicit Fixture(const std::string& name) : dir(testkit::scratch_dir(name)), data(testkit::small_dataset(41, 60, 20)) {
    cfg = testkit::tiny_config(static_cast<int>(data.vocab.size()));
    write_dataset(dir / "data", data.grammar, Split{data.train, data.test});
    save_checkpoint(dir / "model.ckpt", testkit::random_model(cfg, 2), cfg, data.vocab);
  }
  ~Fixture() { std::filesystem::remove_all(dir); }

  json base(const std::string& kind) const {
    return {{"kind", kind}, {"checkpoint", (dir / "model.ckpt").string()}, {"data", (dir / "data").string()}};
  }
};

json patch_config(const Fixture& f) {
  json j = f.base("custom-patch");
  j["patch"] = {{"directives", {{{"node", "Enc-self-0.1:V"}, {"action", "mean_ablate"}}}}};
  j["episode"] = 3;
  j["watched"] = {"Dec-cross-1.0"};
  j["stats_pool"] = 20;
  return j;
}

}  // namespace

TEST_CASE("experiment configs are parsed strictly") {
  Fixture f("config");
  auto ok = experiment_from_json(patch_config(f));
  CHECK(ok.kind == ExperimentKind::custom_patch);
  CHECK(ok.episode == 3);

  auto j = patch_config(f);
  j["colour"] = 1;
  CHECK_THROWS_AS(experiment_from_json(j), ConfigError);
  j = patch_config(f);
  j["kind"] = "dance";
  CHECK_THROWS_AS(experiment_from_json(j), ConfigError);
  j = patch_config(f);
  j["checkpoint"] = (f.dir / "missing.ckpt").string();
  CHECK_THROWS_AS(experiment_from_json(j), ConfigError);
  j = f.base("trace-index");
  j["node"] = "Enc-self-x";
  CHECK_THROWS_AS(experiment_from_json(j), NodeError);
  j["node"] = "Enc-self-9.0";
  CHECK_THROWS_AS(run_experiment(experiment_from_json(j)), NodeError);
  j = f.base("trace-index");
  j["node"] = "Enc-self-0.0:Q";
  j["labeler"] = "sideways";
  CHECK_THROWS_AS(experiment_from_json(j), SpecError);

  CHECK(config_hash(patch_config(f)) == config_hash(patch_config(f)));
  auto other = patch_config(f);
  other["seed"] = 1;
  CHECK(config_hash(other) != config_hash(patch_config(f)));
}

TEST_CASE("custom patch experiment writes a versioned report") {
  Fixture f("report");
  auto j = patch_config(f);
  j["out_dir"] = (f.dir / "reports").string();
  auto r = run_experiment(experiment_from_json(j));
  CHECK(r.schema_version == kReportSchemaVersion);
  REQUIRE(r.patch_outcomes.size() == 1);
  const auto path = f.dir / "reports" / ("report-" + r.id + ".json");
  REQUIRE(std::filesystem::exists(path));
  std::ifstream in(path);
  auto disk = json::parse(in);
  CHECK(disk["schema_version"] == kReportSchemaVersion);
  CHECK(disk["metadata"]["kind"] == "custom-patch");
  CHECK(disk["metadata"]["vocab_hash"].is_string());
  CHECK(disk["metadata"]["config_hash"] == config_hash(j));
  CHECK(disk == to_json(r));
  for (const auto& e : std::filesystem::directory_iterator(f.dir / "reports"))
    CHECK(e.path().extension() == ".json");
}

TEST_CASE("patch spec JSON") {
  Fixture f("spec");
  auto enc = encode_episode(f.data.test[0], f.data.vocab);
  auto spec = patch_spec_from_json(
      {{"directives", {{{"node", "Enc-self-0.2:V"}, {"action", "swap_positions"}, {"pos_a", 0}, {"pos_b", 2},
                        {"positional_component_only", true}}}}},
      enc);
  REQUIRE(spec.directives.size() == 1);
  const auto& d = spec.directives[0];
  CHECK(d.action == PatchAction::permute_positions);
  CHECK(d.permutation.size() == enc.prompt.size());
  CHECK(d.permutation[0] == 2);
  CHECK(d.permutation[2] == 0);
  CHECK(node_rows(NodeRef::dec_cross(0, 1, Site::Q), enc) == static_cast<Eigen::Index>(enc.dec_input.size()));
  CHECK(node_rows(NodeRef::dec_cross(0, 1, Site::K), enc) == static_cast<Eigen::Index>(enc.prompt.size()));

  CHECK_THROWS_AS(patch_spec_from_json({{"directives", {{{"node", "Enc-self-0.2:V"}, {"action", "melt"}}}}}, enc),
                  PatchError);
  CHECK_THROWS_AS(patch_spec_from_json({{"directives", 3}}, enc), PatchError);
  CHECK_THROWS(patch_spec_from_json({{"directives", {{{"node", "nowhere"}, {"action", "mean_ablate"}}}}}, enc));
}

TEST_CASE("HTTP service") {
  Fixture f("service");
  ServiceOptions opts;
  opts.checkpoint = f.dir / "model.ckpt";
  opts.data = f.dir / "data";
  opts.report_dir = f.dir / "reports";
  opts.queue_capacity = 1;
  opts.stats_pool = 20;
  LabService service(opts);
  const int port = service.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server([&] { service.listen_after_bind(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(120, 0);

  auto error_of = [](const httplib::Result& r) {
    auto j = json::parse(r->body);
    REQUIRE(j.contains("error"));
    CHECK(j["error"]["message"].is_string());
    return j["error"]["type"].get<std::string>();
  };

  SUBCASE("model info and episodes") {
    auto r = cli.Get("/model/info");
    REQUIRE(r);
    CHECK(r->status == 200);
    auto info = json::parse(r->body);
    CHECK(info["model_config"]["d_model"] == 16);
    CHECK(info["parameters"] == testkit::random_model(f.cfg, 0).parameter_count());

    r = cli.Get("/episodes?n=3&offset=1");
    REQUIRE(r);
    auto eps = json::parse(r->body);
    REQUIRE(eps["episodes"].size() == 3);
    CHECK(eps["episodes"][0]["index"] == 1);
    CHECK(eps["episodes"][0]["prompt"] == render_prompt_tokens(f.data.test[1]));

    r = cli.Get("/episodes?n=abc");
    CHECK(r->status == 400);
    CHECK(error_of(r) == "ConfigError");
    r = cli.Get("/episodes?n=5000");
    CHECK(r->status == 400);
  }

  SUBCASE("run and attention") {
    auto r = cli.Post("/run", json{{"episode", 2}}.dump(), "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    auto j = json::parse(r->body);
    auto enc = encode_episode(f.data.test[2], f.data.vocab);
    CHECK(j["logits"].size() == enc.dec_input.size());
    CHECK(j["logits"][0].size() == f.data.vocab.size());
    CHECK(j["tokens"].size() == enc.prompt.size());
    auto fwd = forward(testkit::random_model(f.cfg, 2), f.cfg, enc.prompt, enc.dec_input);
    CHECK(j["logits"][1][4].get<double>() == doctest::Approx(fwd.logits(1, 4)));

    auto body = json{{"episode", to_json(f.data.test[0])}};
    r = cli.Post("/run", body.dump(), "application/json");
    CHECK(r->status == 200);
    body["episode"]["target"] = {"red"};
    r = cli.Post("/run", body.dump(), "application/json");
    CHECK(r->status == 400);
    r = cli.Post("/run", "{oops", "application/json");
    CHECK(r->status == 400);
    CHECK(error_of(r) == "InvalidJson");
    r = cli.Post("/run", json{{"episode", 999}}.dump(), "application/json");
    CHECK(r->status == 400);

    r = cli.Get("/attention/dec/cross/1/2?episode=2");
    REQUIRE(r->status == 200);
    auto a = json::parse(r->body);
    CHECK(a["matrix"].size() == enc.dec_input.size());
    CHECK(a["matrix"][0].size() == enc.prompt.size());
    double sum = 0.0;
    for (const auto& v : a["matrix"][1]) sum += v.get<double>();
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(a["cols"].size() == enc.prompt.size());

    r = cli.Get("/attention/enc/cross/0/0");
    CHECK(r->status == 400);
    CHECK(error_of(r) == "NodeError");
    r = cli.Get("/attention/dec/self/7/0");
    CHECK(r->status == 400);
    r = cli.Get("/nowhere");
    CHECK(r->status == 404);
    CHECK(error_of(r) == "NotFound");
  }

  SUBCASE("patch") {
    json body = {{"episode", 1},
                 {"spec", {{"directives", {{{"node", "Enc-self-0.1:V"}, {"action", "mean_ablate"}}}}}},
                 {"watched", {"Dec-cross-1.0"}}};
    auto r = cli.Post("/patch", body.dump(), "application/json");
    REQUIRE(r->status == 200);
    auto j = json::parse(r->body);
    CHECK(j.contains("patched"));
    CHECK(j.contains("delta"));
    body["spec"]["directives"][0]["node"] = "Enc-self-0.9:V";
    r = cli.Post("/patch", body.dump(), "application/json");
    CHECK(r->status == 400);
    body.erase("spec");
    r = cli.Post("/patch", body.dump(), "application/json");
    CHECK(r->status == 400);
  }

  SUBCASE("experiment queue and reports") {
    auto cfg = patch_config(f);
    cfg.erase("checkpoint");
    cfg.erase("data");
    auto r = cli.Post("/experiment", cfg.dump(), "application/json");
    REQUIRE(r->status == 202);
    const std::string id = json::parse(r->body)["id"];

    json report;
    for (int i = 0; i < 600; ++i) {
      auto g = cli.Get("/report/" + id);
      REQUIRE(g);
      if (g->status == 200) {
        report = json::parse(g->body);
        break;
      }
      CHECK(g->status == 202);
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    CHECK(report["schema_version"] == kReportSchemaVersion);
    CHECK(report["id"] == id);

    auto again = cli.Post("/experiment", cfg.dump(), "application/json");
    CHECK(json::parse(again->body)["id"] == id);

    r = cli.Get("/report/doesnotexist");
    CHECK(r->status == 404);
    r = cli.Post("/experiment", json{{"kind", "train"}}.dump(), "application/json");
    CHECK(r->status == 400);
    r = cli.Post("/experiment", json{{"kind", "custom-patch"}, {"bogus", 1}}.dump(), "application/json");
    CHECK(r->status == 400);

    int accepted = 0, full = 0;
    for (int s = 1; s <= 6; ++s) {
      auto c = f.base("discover");
      c["seed"] = s;
      c["n_episodes"] = 10;
      c["stats_pool"] = 20;
      auto p = cli.Post("/experiment", c.dump(), "application/json");
      if (p->status == 202) ++accepted;
      if (p->status == 503) {
        ++full;
        CHECK(error_of(p) == "QueueFull");
      }
    }
    CHECK(accepted >= 1);
    CHECK(full >= 1);
    auto q = json::parse(cli.Get("/queue")->body);
    CHECK(q["capacity"] == 1);
  }

  service.stop();
  server.join();
}
