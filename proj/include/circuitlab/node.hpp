#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace circuitlab {

struct ModelConfig;

enum class Component : std::uint8_t { encoder, decoder };
enum class AttnKind : std::uint8_t { self, cross };
enum class Site : std::uint8_t { Q, K, V, Z, attn_weights, pos_embed, resid_pre, mlp_out, logits };

// Names one activation site. Head sites (Q, K, V, Z, attn_weights) use all
// fields; layer sites (pos_embed, resid_pre, mlp_out) ignore kind/head; the
// logits site ignores everything but the component.
//
// Text form follows the usual head nomenclature: "Enc-self-0.5:Z" is encoder
// self-attention, layer 0, head 5, output Z; "Dec-1:mlp_out", "Enc-0:pos_embed",
// "Dec:logits".
struct NodeRef {
  Component component = Component::encoder;
  AttnKind kind = AttnKind::self;
  int layer = 0;
  int head = 0;
  Site site = Site::Z;

  static NodeRef head_site(Component c, AttnKind k, int layer, int head, Site s) { return {c, k, layer, head, s}; }
  static NodeRef enc(int layer, int head, Site s = Site::Z) {
    return {Component::encoder, AttnKind::self, layer, head, s};
  }
  static NodeRef dec_self(int layer, int head, Site s = Site::Z) {
    return {Component::decoder, AttnKind::self, layer, head, s};
  }
  static NodeRef dec_cross(int layer, int head, Site s = Site::Z) {
    return {Component::decoder, AttnKind::cross, layer, head, s};
  }
  static NodeRef layer_site(Component c, int layer, Site s) { return {c, AttnKind::self, layer, -1, s}; }
  static NodeRef logits() { return {Component::decoder, AttnKind::self, -1, -1, Site::logits}; }

  bool is_head_site() const;
  NodeRef with_site(Site s) const {
    NodeRef n = *this;
    n.site = s;
    return n;
  }
  // Same head, compared without the site.
  bool same_head(const NodeRef& o) const {
    return component == o.component && kind == o.kind && layer == o.layer && head == o.head;
  }

  friend bool operator==(const NodeRef& a, const NodeRef& b) {
    return a.component == b.component && a.kind == b.kind && a.layer == b.layer && a.head == b.head &&
           a.site == b.site;
  }
  friend bool operator<(const NodeRef& a, const NodeRef& b);
};

bool is_head_site(Site s);
std::string to_string(Site s);
Site parse_site(std::string_view s);  // throws NodeError

std::string to_string(const NodeRef& n);
// Head name without the site, e.g. "Dec-cross-1.5".
std::string head_name(const NodeRef& n);
// Accepts the text forms above; a bare head name means site Z.
NodeRef parse_node(std::string_view text);  // throws NodeError

// Throws NodeError when indices fall outside the config or the site does not
// exist for this kind of node.
void validate_node(const NodeRef& n, const ModelConfig& cfg);

struct NodeRefHash {
  std::size_t operator()(const NodeRef& n) const noexcept;
};

}  // namespace circuitlab
