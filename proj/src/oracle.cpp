#include "circuitlab/oracle.hpp"

#include <unordered_map>

#include "circuitlab/errors.hpp"

namespace circuitlab {

int lhs_position(Slot slot) { return slot == Slot::arg1 ? 1 : 3; }

std::vector<std::string> solve_episode(const Episode& ep) {
  const FunctionDemo& fn = ep.question_function();
  if (static_cast<int>(ep.question.size()) != (fn.def.arity == 2 ? 3 : 2))
    throw UnsolvableEpisodeError("question length does not match the function's arity");

  std::unordered_map<std::string, std::string> symbol_to_color;
  std::unordered_map<std::string, std::string> color_to_symbol;
  for (const auto& p : ep.primitives) {
    symbol_to_color[p.symbol] = p.color;
    color_to_symbol[p.color] = p.symbol;
  }

  // LHS of the demonstration line: args[0] f args[1].
  std::unordered_map<std::string, int> symbol_to_idx;
  symbol_to_idx[fn.args.at(0)] = 1;
  if (fn.def.arity == 2) symbol_to_idx[fn.args.at(1)] = 3;

  std::vector<int> idx_seq;
  for (const auto& color : ep.demo_rhs(fn)) {
    auto sym = color_to_symbol.find(color);
    if (sym == color_to_symbol.end()) throw UnsolvableEpisodeError("rhs color without a primitive: " + color);
    auto idx = symbol_to_idx.find(sym->second);
    if (idx == symbol_to_idx.end()) throw UnsolvableEpisodeError("rhs color not bound to an LHS argument");
    idx_seq.push_back(idx->second);
  }

  std::vector<std::string> output;
  for (int idx : idx_seq) {
    const std::string& symbol = ep.question.at(static_cast<std::size_t>(idx - 1));
    auto color = symbol_to_color.find(symbol);
    if (color == symbol_to_color.end()) throw UnsolvableEpisodeError("question symbol without a primitive: " + symbol);
    output.push_back(color->second);
  }
  return output;
}

std::map<std::size_t, IndexLabel> label_index_in_question(const Episode& ep) {
  std::unordered_map<std::string, int> question_index;
  const FunctionDemo& asked = ep.question_function();
  for (std::size_t i = 0; i < ep.question.size(); ++i) {
    if (ep.question[i] == asked.def.name) continue;
    question_index[ep.question[i]] = static_cast<int>(i) + 1;
  }
  std::unordered_map<std::string, int> color_index;
  for (const auto& p : ep.primitives) {
    auto it = question_index.find(p.symbol);
    if (it != question_index.end()) color_index[p.color] = it->second;
  }

  std::map<std::size_t, IndexLabel> labels;
  const auto tokens = render_prompt_tokens(ep);
  for (std::size_t pos = ep.question.size(); pos < tokens.size(); ++pos) {
    if (auto it = question_index.find(tokens[pos]); it != question_index.end()) {
      labels[pos] = IndexLabel{it->second};
    } else if (auto c = color_index.find(tokens[pos]); c != color_index.end()) {
      labels[pos] = IndexLabel{c->second};
    }
  }
  return labels;
}

std::map<std::size_t, IndexLabel> label_relative_index_on_lhs(const Episode& ep) {
  const FunctionDemo& fn = ep.question_function();
  // Read positions off the rendered LHS rather than the stored pattern.
  std::unordered_map<std::string, int> lhs_index;
  std::vector<std::string> lhs{fn.args.at(0), fn.def.name};
  if (fn.def.arity == 2) lhs.push_back(fn.args.at(1));
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (i != 1) lhs_index[lhs[i]] = static_cast<int>(i) + 1;
  }
  std::unordered_map<std::string, std::string> color_to_symbol;
  for (const auto& p : ep.primitives) color_to_symbol[p.color] = p.symbol;

  std::map<std::size_t, IndexLabel> labels;
  const auto rhs = ep.demo_rhs(fn);
  for (std::size_t t = 0; t < rhs.size(); ++t) {
    labels[t + 1] = IndexLabel{lhs_index.at(color_to_symbol.at(rhs[t]))};
  }
  return labels;
}

}  // namespace circuitlab
