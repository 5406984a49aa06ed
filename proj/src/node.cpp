#include "circuitlab/node.hpp"

#include <array>
#include <charconv>
#include <tuple>

#include "circuitlab/errors.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

namespace {

constexpr std::array<std::string_view, 9> kSiteNames = {"Q",         "K",         "V",       "Z",     "attn_weights",
                                                        "pos_embed", "resid_pre", "mlp_out", "logits"};

int parse_int(std::string_view s, std::string_view whole) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw NodeError("bad node name: " + std::string(whole));
  return v;
}

}  // namespace

bool is_head_site(Site s) { return s == Site::Q || s == Site::K || s == Site::V || s == Site::Z || s == Site::attn_weights; }

bool NodeRef::is_head_site() const { return circuitlab::is_head_site(site); }

bool operator<(const NodeRef& a, const NodeRef& b) {
  return std::tie(a.component, a.layer, a.kind, a.head, a.site) < std::tie(b.component, b.layer, b.kind, b.head, b.site);
}

std::string to_string(Site s) { return std::string(kSiteNames[static_cast<std::size_t>(s)]); }

Site parse_site(std::string_view s) {
  for (std::size_t i = 0; i < kSiteNames.size(); ++i) {
    if (kSiteNames[i] == s) return static_cast<Site>(i);
  }
  throw NodeError("unknown site: " + std::string(s));
}

std::string head_name(const NodeRef& n) {
  std::string out = n.component == Component::encoder ? "Enc" : "Dec";
  if (n.site == Site::logits) return out;
  if (!n.is_head_site()) return out + "-" + std::to_string(n.layer);
  out += n.kind == AttnKind::self ? "-self-" : "-cross-";
  return out + std::to_string(n.layer) + "." + std::to_string(n.head);
}

std::string to_string(const NodeRef& n) { return head_name(n) + ":" + to_string(n.site); }

NodeRef parse_node(std::string_view text) {
  std::string_view body = text;
  std::string_view site_text = "Z";
  if (auto colon = text.find(':'); colon != std::string_view::npos) {
    body = text.substr(0, colon);
    site_text = text.substr(colon + 1);
  }
  NodeRef n;
  n.site = parse_site(site_text);
  if (body.starts_with("Enc")) {
    n.component = Component::encoder;
  } else if (body.starts_with("Dec")) {
    n.component = Component::decoder;
  } else {
    throw NodeError("bad node name: " + std::string(text));
  }
  body.remove_prefix(3);
  if (n.site == Site::logits) {
    if (!body.empty() || n.component != Component::decoder) throw NodeError("bad node name: " + std::string(text));
    return NodeRef::logits();
  }
  if (!body.starts_with("-")) throw NodeError("bad node name: " + std::string(text));
  body.remove_prefix(1);
  if (!n.is_head_site()) {
    n.kind = AttnKind::self;
    n.head = -1;
    n.layer = parse_int(body, text);
    return n;
  }
  if (body.starts_with("self-")) {
    n.kind = AttnKind::self;
    body.remove_prefix(5);
  } else if (body.starts_with("cross-") && n.component == Component::decoder) {
    n.kind = AttnKind::cross;
    body.remove_prefix(6);
  } else {
    throw NodeError("bad node name: " + std::string(text));
  }
  auto dot = body.find('.');
  if (dot == std::string_view::npos) throw NodeError("bad node name: " + std::string(text));
  n.layer = parse_int(body.substr(0, dot), text);
  n.head = parse_int(body.substr(dot + 1), text);
  return n;
}

void validate_node(const NodeRef& n, const ModelConfig& cfg) {
  const std::string name = to_string(n);
  if (n.site == Site::logits) {
    if (n.component != Component::decoder) throw NodeError("logits exist only on the decoder: " + name);
    return;
  }
  const int n_layers = n.component == Component::encoder ? cfg.enc_layers : cfg.dec_layers;
  if (n.layer < 0 || n.layer >= n_layers) throw NodeError("layer out of range: " + name);
  if (n.site == Site::pos_embed && n.layer != 0) throw NodeError("pos_embed exists only at layer 0: " + name);
  if (n.is_head_site()) {
    if (n.head < 0 || n.head >= cfg.n_heads) throw NodeError("head out of range: " + name);
    if (n.component == Component::encoder && n.kind == AttnKind::cross)
      throw NodeError("the encoder has no cross-attention: " + name);
  }
}

std::size_t NodeRefHash::operator()(const NodeRef& n) const noexcept {
  std::size_t h = static_cast<std::size_t>(n.component);
  h = h * 31 + static_cast<std::size_t>(n.kind);
  h = h * 131 + static_cast<std::size_t>(n.layer + 1);
  h = h * 131 + static_cast<std::size_t>(n.head + 1);
  h = h * 31 + static_cast<std::size_t>(n.site);
  return h;
}

}  // namespace circuitlab
