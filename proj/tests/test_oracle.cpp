#include <doctest.h>

#include <map>

#include "circuitlab/errors.hpp"
#include "circuitlab/oracle.hpp"
#include "support.hpp"

using namespace circuitlab;

namespace {

// Reference answers computed from the hidden rhs_pattern, never from the
// rendered demonstration.
std::vector<std::string> expand(const Episode& ep) {
  const auto& fn = ep.question_function();
  std::vector<std::string> out;
  for (Slot s : fn.def.rhs_pattern) {
    const std::string& sym = ep.question[s == Slot::arg1 ? 0 : 2];
    for (const auto& p : ep.primitives)
      if (p.symbol == sym) out.push_back(p.color);
  }
  return out;
}

std::map<std::size_t, int> brute_relative(const Episode& ep) {
  std::map<std::size_t, int> m;
  const auto& pat = ep.question_function().def.rhs_pattern;
  for (std::size_t t = 0; t < pat.size(); ++t) m[t + 1] = pat[t] == Slot::arg1 ? 1 : 3;
  return m;
}

std::map<std::size_t, int> brute_index_in_question(const Episode& ep) {
  std::map<std::string, int> idx;
  idx[ep.question[0]] = 1;
  if (ep.question.size() == 3) idx[ep.question[2]] = 3;
  for (const auto& p : ep.primitives)
    if (idx.count(p.symbol)) idx[p.color] = idx[p.symbol];
  std::map<std::size_t, int> m;
  const auto toks = render_prompt_tokens(ep);
  for (std::size_t i = ep.question.size(); i < toks.size(); ++i)
    if (auto it = idx.find(toks[i]); it != idx.end()) m[i] = it->second;
  return m;
}

template <class M>
std::map<std::size_t, int> plain(const M& labels) {
  std::map<std::size_t, int> m;
  for (const auto& [k, v] : labels) m[k] = v.value;
  return m;
}

}  // namespace

TEST_CASE("oracle agrees with the generator on 10000 episodes") {
  Rng rng(2024);
  GrammarConfig g;
  int agree = 0;
  for (int i = 0; i < 10000; ++i) {
    Episode ep = sample_episode(rng, g);
    const auto solved = solve_episode(ep);
    if (solved == ep.target && solved == expand(ep)) ++agree;
  }
  CHECK(agree == 10000);
}

TEST_CASE("index labels match a brute-force recomputation from rhs_pattern") {
  Rng rng(77);
  for (int i = 0; i < 3000; ++i) {
    Episode ep = sample_episode(rng, GrammarConfig{});
    CHECK(plain(label_relative_index_on_lhs(ep)) == brute_relative(ep));
    CHECK(plain(label_index_in_question(ep)) == brute_index_in_question(ep));
  }
}

TEST_CASE("hand-built episode") {
  Episode ep;
  ep.question = {"B", "F", "A"};
  ep.primitives = {{"A", "red"}, {"B", "blue"}, {"C", "green"}};
  ep.functions = {{{"F", 2, {Slot::arg1, Slot::arg2, Slot::arg1}}, {"C", "A"}}};
  ep.target = {"blue", "red", "blue"};
  CHECK(solve_episode(ep) == ep.target);
  auto rel = label_relative_index_on_lhs(ep);
  REQUIRE(rel.size() == 3);
  CHECK(rel[1].value == 1);
  CHECK(rel[2].value == 3);
  CHECK(rel[3].value == 1);
  // B F A | A = red | B = blue | C = green | C F A = green red green EOS
  auto idx = label_index_in_question(ep);
  CHECK(idx.at(4).value == 3);   // A
  CHECK(idx.at(6).value == 3);   // red
  CHECK(idx.at(8).value == 1);   // B
  CHECK(idx.at(10).value == 1);  // blue
  CHECK(idx.count(12) == 0);     // C
  CHECK(idx.at(18).value == 3);  // A on the demo LHS
  CHECK(idx.at(21).value == 3);  // red on the demo RHS
  CHECK(lhs_position(Slot::arg1) == 1);
  CHECK(lhs_position(Slot::arg2) == 3);
}

TEST_CASE("unsolvable episodes are rejected") {
  Episode ep;
  ep.question = {"B", "G"};
  ep.primitives = {{"A", "red"}, {"B", "blue"}};
  ep.functions = {{{"F", 1, {Slot::arg1}}, {"A"}}};
  CHECK_THROWS_AS(solve_episode(ep), UnsolvableEpisodeError);

  ep.question = {"B", "F", "A"};
  CHECK_THROWS_AS(solve_episode(ep), UnsolvableEpisodeError);

  ep.question = {"Z", "F"};
  CHECK_THROWS_AS(solve_episode(ep), UnsolvableEpisodeError);
}
