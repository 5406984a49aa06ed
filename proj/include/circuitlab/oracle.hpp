#pragma once

// Symbolic reference solver and the index labels used by the probing
// experiments.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "circuitlab/grammar.hpp"

namespace circuitlab {

// 1-indexed position inside the question or inside a function's LHS.
struct IndexLabel {
  int value = 1;
  friend auto operator<=>(const IndexLabel&, const IndexLabel&) = default;
};

// Solves the question by reading the function's structure off its
// demonstration: rhs color -> demo symbol -> LHS index, then
// index -> question symbol -> color. Throws UnsolvableEpisodeError.
std::vector<std::string> solve_episode(const Episode& ep);

// Keys are prompt positions (0-based, as produced by render_prompt). Each
// support occurrence of a question symbol, and each support color bound to a
// question symbol, carries that symbol's index in the question.
std::map<std::size_t, IndexLabel> label_index_in_question(const Episode& ep);

// Keys are decoder steps (1-based; SOS is step 1). Step t is labeled with the
// LHS position of the demo symbol that produced the t-th rhs color of the
// question function's demonstration line. Steps past the rhs carry no label.
std::map<std::size_t, IndexLabel> label_relative_index_on_lhs(const Episode& ep);

// LHS position of an argument slot: arg1 -> 1, arg2 -> 3 (the function name
// sits at position 2).
int lhs_position(Slot slot);

}  // namespace circuitlab
