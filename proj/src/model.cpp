#include "attnet/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "attnet/errors.hpp"
#include "attnet/manifest.hpp"
#include "attnet/rng.hpp"
#include "json.hpp"

namespace attnet {

namespace {

bool safe_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      return false;
  return true;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

int64_t parse_i64(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected integer for " + what + ", got '" + s + "'");
  }
}

// Tracks the activation shape while walking the layer chain.
struct FlowShape {
  bool flat = false;
  int64_t c = 0, h = 0, w = 0;  // spatial form
  int64_t d = 0;                // flat form
};

std::string flow_str(const FlowShape& s) {
  if (s.flat) return "[" + std::to_string(s.d) + "]";
  return "[" + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + "]";
}

FlowShape apply_layer(const LayerDef& l, const FlowShape& in) {
  auto need_spatial = [&]() {
    if (in.flat)
      throw ConfigError("layer " + l.name + " (" + l.kind + ") needs a spatial input, got " +
                        flow_str(in));
  };
  auto conv_extent = [&](int64_t e, int64_t k, int64_t s, int64_t p) {
    if (k > e + 2 * p)
      throw ConfigError("layer " + l.name + ": kernel " + std::to_string(k) +
                        " exceeds padded extent " + std::to_string(e + 2 * p));
    return (e + 2 * p - k) / s + 1;
  };
  FlowShape out = in;
  if (l.kind == "conv") {
    need_spatial();
    const int64_t k = l.arg("k", 3), s = l.arg("stride", 1), p = l.arg("pad", 0);
    out.c = l.arg("out", 0);
    if (out.c < 1) throw ConfigError("layer " + l.name + ": conv needs out >= 1");
    if (k < 1 || s < 1 || p < 0) throw ConfigError("layer " + l.name + ": bad conv geometry");
    out.h = conv_extent(in.h, k, s, p);
    out.w = conv_extent(in.w, k, s, p);
  } else if (l.kind == "relu" || l.kind == "batchnorm") {
    if (l.kind == "batchnorm") need_spatial();
  } else if (l.kind == "maxpool") {
    need_spatial();
    const int64_t k = l.arg("k", 2), s = l.arg("stride", l.arg("k", 2));
    if (k < 1 || s < 1) throw ConfigError("layer " + l.name + ": bad pool geometry");
    if (k > in.h || k > in.w)
      throw ConfigError("layer " + l.name + ": pool window exceeds input " + flow_str(in));
    out.h = (in.h - k) / s + 1;
    out.w = (in.w - k) / s + 1;
  } else if (l.kind == "resblock") {
    need_spatial();
    const int64_t s = l.arg("stride", 1);
    out.c = l.arg("out", 0);
    if (out.c < 1) throw ConfigError("layer " + l.name + ": resblock needs out >= 1");
    if (s < 1) throw ConfigError("layer " + l.name + ": bad resblock stride");
    out.h = conv_extent(in.h, 3, s, 1);
    out.w = conv_extent(in.w, 3, s, 1);
  } else if (l.kind == "globalpool") {
    need_spatial();
    out.h = 1;
    out.w = 1;
  } else if (l.kind == "flatten") {
    need_spatial();
    out.flat = true;
    out.d = in.c * in.h * in.w;
  } else if (l.kind == "linear") {
    if (!in.flat)
      throw ConfigError("layer " + l.name + ": linear needs a flattened input, got " +
                        flow_str(in));
    out.d = l.arg("out", 0);
    if (out.d < 1) throw ConfigError("layer " + l.name + ": linear needs out >= 1");
  } else {
    throw ConfigError("unknown layer kind '" + l.kind + "' at layer " + l.name);
  }
  return out;
}

// Shapes after each layer; index i = output of layers[i].
std::vector<FlowShape> propagate(const NetworkSpec& spec) {
  FlowShape cur{false, spec.in_c, spec.in_h, spec.in_w, 0};
  std::vector<FlowShape> out;
  out.reserve(spec.layers.size());
  for (const LayerDef& l : spec.layers) {
    cur = apply_layer(l, cur);
    out.push_back(cur);
  }
  return out;
}

int64_t layer_index(const NetworkSpec& spec, const std::string& name) {
  for (size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].name == name) return static_cast<int64_t>(i);
  return -1;
}

}  // namespace

NetworkSpec parse_network_spec(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  bool saw_header = false;
  NetworkSpec spec;
  spec.classes = 0;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (!saw_header) {
      if (toks.size() != 2 || toks[0] != "attnet-spec" || toks[1] != "v1")
        throw ConfigError("network spec must start with 'attnet-spec v1'");
      saw_header = true;
      continue;
    }
    const std::string& key = toks[0];
    auto want = [&](size_t n) {
      if (toks.size() != n)
        throw ConfigError("line " + std::to_string(lineno) + ": malformed '" + key + "' entry");
    };
    if (key == "name") {
      want(2);
      spec.name = toks[1];
    } else if (key == "input") {
      want(4);
      spec.in_c = parse_i64(toks[1], "input channels");
      spec.in_h = parse_i64(toks[2], "input height");
      spec.in_w = parse_i64(toks[3], "input width");
    } else if (key == "classes") {
      want(2);
      spec.classes = parse_i64(toks[1], "classes");
    } else if (key == "head_mode") {
      want(2);
      if (toks[1] == "concat")
        spec.head_mode = HeadMode::Concat;
      else if (toks[1] == "indep")
        spec.head_mode = HeadMode::Indep;
      else
        throw ConfigError("unknown head_mode '" + toks[1] + "'");
    } else if (key == "global_source") {
      want(2);
      spec.global_source = toks[1];
    } else if (key == "layer") {
      if (toks.size() < 3)
        throw ConfigError("line " + std::to_string(lineno) + ": layer needs a name and a kind");
      LayerDef l;
      l.name = toks[1];
      l.kind = toks[2];
      for (size_t i = 3; i < toks.size(); ++i) {
        const auto eq = toks[i].find('=');
        if (eq == std::string::npos)
          throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" +
                            toks[i] + "'");
        l.args[toks[i].substr(0, eq)] =
            parse_i64(toks[i].substr(eq + 1), "layer arg " + toks[i].substr(0, eq));
      }
      spec.layers.push_back(std::move(l));
    } else if (key == "tap") {
      want(2);
      spec.taps.push_back(toks[1]);
    } else if (key == "attention") {
      AttentionDef a;
      bool saw_tap = false;
      for (size_t i = 1; i < toks.size(); ++i) {
        const auto eq = toks[i].find('=');
        const std::string k = eq == std::string::npos ? toks[i] : toks[i].substr(0, eq);
        const std::string v = eq == std::string::npos ? "" : toks[i].substr(eq + 1);
        if (k == "tap") {
          a.tap = v;
          saw_tap = true;
        } else if (k == "kind") {
          if (v == "dp")
            a.kind = CompatibilityKind::DotProduct;
          else if (v == "pc")
            a.kind = CompatibilityKind::Parameterised;
          else
            throw ConfigError("unknown attention kind '" + v + "'");
        } else {
          throw ConfigError("unknown attention field '" + k + "'");
        }
      }
      if (!saw_tap) throw ConfigError("attention entry needs tap=<layer>");
      spec.attention.push_back(std::move(a));
    } else {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown spec key '" + key + "'");
    }
  }
  if (!saw_header) throw ConfigError("empty network spec");
  return spec;
}

std::string format_network_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "attnet-spec v1\n";
  os << "name " << spec.name << "\n";
  os << "input " << spec.in_c << " " << spec.in_h << " " << spec.in_w << "\n";
  os << "classes " << spec.classes << "\n";
  os << "head_mode " << (spec.head_mode == HeadMode::Concat ? "concat" : "indep") << "\n";
  os << "global_source " << spec.global_source << "\n";
  for (const LayerDef& l : spec.layers) {
    os << "layer " << l.name << " " << l.kind;
    for (const auto& [k, v] : l.args) os << " " << k << "=" << v;
    os << "\n";
  }
  for (const std::string& t : spec.taps) os << "tap " << t << "\n";
  for (const AttentionDef& a : spec.attention)
    os << "attention tap=" << a.tap << " kind="
       << (a.kind == CompatibilityKind::DotProduct ? "dp" : "pc") << "\n";
  return os.str();
}

NetworkSpec load_network_spec(const std::string& path) {
  return parse_network_spec(read_text_file(path));
}

void save_network_spec(const std::string& path, const NetworkSpec& spec) {
  write_text_file(path, format_network_spec(spec));
}

void validate_spec(const NetworkSpec& spec) {
  if (!safe_name(spec.name)) throw ConfigError("spec needs a filename-safe name");
  if (spec.in_c < 1 || spec.in_h < 1 || spec.in_w < 1)
    throw ConfigError("spec input extents must be positive");
  if (spec.classes < 2) throw ConfigError("spec needs at least 2 classes");
  if (spec.layers.empty()) throw ConfigError("spec has no layers");
  std::vector<std::string> seen;
  for (const LayerDef& l : spec.layers) {
    if (!safe_name(l.name)) throw ConfigError("layer name '" + l.name + "' is not filename-safe");
    if (std::find(seen.begin(), seen.end(), l.name) != seen.end())
      throw ConfigError("duplicate layer name '" + l.name + "'");
    seen.push_back(l.name);
  }
  const auto shapes = propagate(spec);  // throws on geometry problems

  const int64_t gsrc = layer_index(spec, spec.global_source);
  if (gsrc < 0)
    throw ConfigError("global_source '" + spec.global_source + "' is not a layer");
  if (!shapes[static_cast<size_t>(gsrc)].flat)
    throw ConfigError("global_source '" + spec.global_source +
                      "' must produce a flat descriptor, got " +
                      flow_str(shapes[static_cast<size_t>(gsrc)]));

  std::vector<std::string> tap_seen;
  for (const std::string& tap : spec.taps) {
    if (std::find(tap_seen.begin(), tap_seen.end(), tap) != tap_seen.end())
      throw ConfigError("duplicate tap '" + tap + "'");
    tap_seen.push_back(tap);
    const int64_t ti = layer_index(spec, tap);
    if (ti < 0) throw ConfigError("tap '" + tap + "' is not a layer");
    if (ti >= gsrc)
      throw ConfigError("tap '" + tap + "' must strictly precede global_source '" +
                        spec.global_source + "'");
    if (shapes[static_cast<size_t>(ti)].flat)
      throw ConfigError("tap '" + tap + "' must carry a spatial feature map");
    bool pool_after = false;
    for (int64_t i = ti + 1; i <= gsrc; ++i) {
      const std::string& k = spec.layers[static_cast<size_t>(i)].kind;
      if (k == "maxpool" || k == "globalpool") {
        pool_after = true;
        break;
      }
    }
    if (!pool_after)
      throw ConfigError("tap '" + tap +
                        "' must precede the pooling op that follows its block");
  }
  std::vector<std::string> att_seen;
  for (const AttentionDef& a : spec.attention) {
    if (std::find(spec.taps.begin(), spec.taps.end(), a.tap) == spec.taps.end())
      throw ConfigError("attention head references undeclared tap '" + a.tap + "'");
    if (std::find(att_seen.begin(), att_seen.end(), a.tap) != att_seen.end())
      throw ConfigError("multiple attention heads on tap '" + a.tap + "'");
    att_seen.push_back(a.tap);
  }
}

NetworkSpec vgg_mini_spec(int att_levels, CompatibilityKind kind, HeadMode mode, int64_t classes,
                          int64_t input_hw) {
  if (att_levels < 0 || att_levels > 3)
    throw ConfigError("vgg_mini_spec: att_levels must be 0..3");
  NetworkSpec s;
  std::ostringstream nm;
  nm << "vgg-mini";
  if (att_levels > 0) {
    nm << "-att";
    if (att_levels > 1) nm << att_levels;
    nm << (kind == CompatibilityKind::DotProduct ? "-dp" : "-pc");
    nm << (mode == HeadMode::Concat ? "-concat" : "-indep");
  }
  s.name = nm.str();
  s.in_c = 3;
  s.in_h = s.in_w = input_hw;
  s.classes = classes;
  s.head_mode = mode;
  const int64_t widths[4] = {32, 64, 128, 128};
  for (int b = 1; b <= 4; ++b) {
    const std::string p = "b" + std::to_string(b);
    const int64_t wdt = widths[b - 1];
    s.layers.push_back({p + "c1", "conv", {{"out", wdt}, {"k", 3}, {"stride", 1}, {"pad", 1}}});
    s.layers.push_back({p + "r1", "relu", {}});
    s.layers.push_back({p + "c2", "conv", {{"out", wdt}, {"k", 3}, {"stride", 1}, {"pad", 1}}});
    s.layers.push_back({p + "r2", "relu", {}});
    s.layers.push_back({p + "pool", "maxpool", {{"k", 2}, {"stride", 2}}});
  }
  s.layers.push_back({"flat", "flatten", {}});
  s.layers.push_back({"fc_g", "linear", {{"out", 128}}});
  s.layers.push_back({"g_relu", "relu", {}});
  s.global_source = "g_relu";
  // Deepest blocks first-served: att -> block 4; att2 -> 3,4; att3 -> 2,3,4.
  for (int b = 5 - att_levels; b <= 4; ++b) s.taps.push_back("b" + std::to_string(b) + "r2");
  for (const std::string& t : s.taps) s.attention.push_back({t, kind});
  return s;
}

NetworkSpec rn_mini_spec(int att_levels, CompatibilityKind kind, HeadMode mode, int64_t classes,
                         int64_t input_hw, bool batchnorm) {
  if (att_levels != 0 && att_levels != 2)
    throw ConfigError("rn_mini_spec: att_levels must be 0 or 2");
  NetworkSpec s;
  std::ostringstream nm;
  nm << "rn-mini";
  if (att_levels > 0) {
    nm << "-att2" << (kind == CompatibilityKind::DotProduct ? "-dp" : "-pc")
       << (mode == HeadMode::Concat ? "-concat" : "-indep");
  }
  s.name = nm.str();
  s.in_c = 3;
  s.in_h = s.in_w = input_hw;
  s.classes = classes;
  s.head_mode = mode;
  const int64_t bn = batchnorm ? 1 : 0;
  s.layers.push_back({"stem", "conv", {{"out", 32}, {"k", 3}, {"stride", 1}, {"pad", 1}}});
  if (batchnorm) s.layers.push_back({"stembn", "batchnorm", {}});
  s.layers.push_back({"stemr", "relu", {}});
  const int64_t widths[3] = {32, 64, 128};
  for (int lv = 1; lv <= 3; ++lv) {
    const int64_t wdt = widths[lv - 1];
    const int64_t stride = lv == 1 ? 1 : 2;
    s.layers.push_back({"l" + std::to_string(lv) + "b1", "resblock",
                        {{"out", wdt}, {"stride", stride}, {"bn", bn}}});
    s.layers.push_back({"l" + std::to_string(lv) + "b2", "resblock",
                        {{"out", wdt}, {"stride", 1}, {"bn", bn}}});
  }
  // The global descriptor comes from an extra conv + max pool instead of the
  // usual spatial average pooling.
  s.layers.push_back({"gconv", "conv", {{"out", 128}, {"k", 3}, {"stride", 1}, {"pad", 1}}});
  s.layers.push_back({"gconvr", "relu", {}});
  s.layers.push_back({"gpool", "globalpool", {}});
  s.layers.push_back({"gflat", "flatten", {}});
  s.global_source = "gflat";
  if (att_levels == 2) {
    s.taps = {"l2b2", "l3b2"};
    for (const std::string& t : s.taps) s.attention.push_back({t, kind});
  }
  return s;
}

bool is_preset_id(const std::string& id) {
  try {
    (void)preset_spec(id, 10, 32);
    return true;
  } catch (const ConfigError&) {
    return false;
  }
}

NetworkSpec preset_spec(const std::string& id, int64_t classes, int64_t input_hw) {
  auto bad = [&]() -> ConfigError {
    return ConfigError(
        "unknown model preset '" + id +
        "' (expected vgg-mini[-att{,2,3}-{dp,pc}-{concat,indep}] or rn-mini[-att2-...])");
  };
  std::vector<std::string> parts;
  {
    std::string cur;
    for (char c : id) {
      if (c == '-') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    parts.push_back(cur);
  }
  if (parts.size() < 2 || parts[1] != "mini") throw bad();
  const bool vgg = parts[0] == "vgg";
  if (!vgg && parts[0] != "rn") throw bad();
  if (parts.size() == 2)
    return vgg ? vgg_mini_spec(0, CompatibilityKind::DotProduct, HeadMode::Concat, classes,
                               input_hw)
               : rn_mini_spec(0, CompatibilityKind::DotProduct, HeadMode::Concat, classes,
                              input_hw);
  if (parts.size() != 5) throw bad();
  int levels;
  if (parts[2] == "att")
    levels = 1;
  else if (parts[2] == "att2")
    levels = 2;
  else if (parts[2] == "att3")
    levels = 3;
  else
    throw bad();
  CompatibilityKind kind;
  if (parts[3] == "dp")
    kind = CompatibilityKind::DotProduct;
  else if (parts[3] == "pc")
    kind = CompatibilityKind::Parameterised;
  else
    throw bad();
  HeadMode mode;
  if (parts[4] == "concat")
    mode = HeadMode::Concat;
  else if (parts[4] == "indep")
    mode = HeadMode::Indep;
  else
    throw bad();
  if (vgg) return vgg_mini_spec(levels, kind, mode, classes, input_hw);
  if (levels != 2) throw bad();
  return rn_mini_spec(2, kind, mode, classes, input_hw);
}

Network Network::build(const NetworkSpec& spec, uint64_t seed) {
  validate_spec(spec);
  Network net;
  net.spec = spec;
  net.seed = seed;
  Rng rng(seed);

  auto add_param = [&](const std::string& name, Tensor value, bool trainable) {
    net.param_index_[name] = static_cast<int64_t>(net.params.size());
    net.params.push_back({name, std::move(value), trainable});
  };
  auto gauss = [&](std::vector<int64_t> shape, double sigma) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sigma);
    return t;
  };
  auto add_conv = [&](const std::string& name, int64_t in_c, int64_t out_c, int64_t k) {
    add_param(name + ".w", gauss({out_c, in_c, k, k},
                                 std::sqrt(2.0 / static_cast<double>(in_c * k * k))), true);
    add_param(name + ".b", Tensor::zeros({out_c}), true);
  };
  auto add_linear = [&](const std::string& name, int64_t in_d, int64_t out_d) {
    add_param(name + ".w", gauss({in_d, out_d}, std::sqrt(1.0 / static_cast<double>(in_d))),
              true);
    add_param(name + ".b", Tensor::zeros({out_d}), true);
  };
  auto add_bn = [&](const std::string& name, int64_t c) {
    add_param(name + ".gamma", Tensor::full({c}, 1.0), true);
    add_param(name + ".beta", Tensor::zeros({c}), true);
    add_param(name + ".run_mean", Tensor::zeros({c}), false);
    add_param(name + ".run_var", Tensor::full({c}, 1.0), false);
  };

  const auto shapes = propagate(spec);
  FlowShape cur{false, spec.in_c, spec.in_h, spec.in_w, 0};
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDef& l = spec.layers[i];
    if (l.kind == "conv") {
      add_conv(l.name, cur.c, l.arg("out", 0), l.arg("k", 3));
    } else if (l.kind == "batchnorm") {
      add_bn(l.name, cur.c);
    } else if (l.kind == "resblock") {
      const int64_t out_c = l.arg("out", 0), stride = l.arg("stride", 1);
      const bool bn = l.arg("bn", 1) != 0;
      add_conv(l.name + ".conv1", cur.c, out_c, 3);
      if (bn) add_bn(l.name + ".bn1", out_c);
      add_conv(l.name + ".conv2", out_c, out_c, 3);
      if (bn) add_bn(l.name + ".bn2", out_c);
      if (stride != 1 || cur.c != out_c) {
        add_conv(l.name + ".sc", cur.c, out_c, 1);
        if (bn) add_bn(l.name + ".scbn", out_c);
      }
    } else if (l.kind == "linear") {
      add_linear(l.name, cur.d, l.arg("out", 0));
    } else if (l.kind == "flatten") {
      net.native_flatten_h_ = cur.h;
      net.native_flatten_w_ = cur.w;
    }
    cur = shapes[i];
  }

  const int64_t gsrc = layer_index(spec, spec.global_source);
  const int64_t gdim = shapes[static_cast<size_t>(gsrc)].d;
  net.global_dim_ = gdim;

  std::vector<int64_t> head_dims;
  for (const AttentionDef& a : spec.attention) {
    const int64_t ti = layer_index(spec, a.tap);
    const int64_t local = shapes[static_cast<size_t>(ti)].c;
    head_dims.push_back(local);
    const std::string base = "att." + a.tap;
    if (local != gdim) add_linear(base + ".proj", gdim, local);
    if (a.kind == CompatibilityKind::Parameterised)
      add_param(base + ".u", gauss({local}, std::sqrt(1.0 / static_cast<double>(local))), true);
  }

  if (spec.attention.empty()) {
    add_linear("cls", gdim, spec.classes);
  } else if (spec.head_mode == HeadMode::Concat) {
    int64_t total = 0;
    for (int64_t d : head_dims) total += d;
    add_linear("cls", total, spec.classes);
  } else {
    for (size_t h = 0; h < spec.attention.size(); ++h)
      add_linear("cls." + spec.attention[h].tap, head_dims[h], spec.classes);
  }

  add_param("norm.scale", Tensor::full({spec.in_c}, 1.0), false);
  add_param("norm.shift", Tensor::zeros({spec.in_c}), false);
  return net;
}

int64_t Network::index_of(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Param& Network::param(const std::string& name) {
  return params[static_cast<size_t>(index_of(name))];
}
const Param& Network::param(const std::string& name) const {
  return params[static_cast<size_t>(index_of(name))];
}

void Network::set_input_normalization(const std::vector<double>& scale,
                                      const std::vector<double>& shift) {
  if (static_cast<int64_t>(scale.size()) != spec.in_c ||
      static_cast<int64_t>(shift.size()) != spec.in_c)
    throw ShapeError("set_input_normalization: need one scale/shift per input channel");
  Tensor& sc = param("norm.scale").value;
  Tensor& sh = param("norm.shift").value;
  for (int64_t c = 0; c < spec.in_c; ++c) {
    sc[c] = scale[static_cast<size_t>(c)];
    sh[c] = shift[static_cast<size_t>(c)];
  }
}

ForwardResult Network::forward(const Tensor& batch, const ForwardOptions& opts) {
  if (batch.rank() != 4)
    throw ShapeError("forward: batch must be rank 4, got " + shape_str(batch.shape()));
  if (batch.dim(1) != spec.in_c)
    throw ShapeError("forward: batch channel axis " + std::to_string(batch.dim(1)) +
                     " != spec input channels " + std::to_string(spec.in_c));
  ForwardResult fr;
  fr.tape = std::make_shared<Tape>();
  Tape& t = *fr.tape;

  std::map<std::string, Var> pv;
  auto P = [&](const std::string& name) {
    auto it = pv.find(name);
    if (it != pv.end()) return it->second;
    Param& p = param(name);
    Var v = t.input(p.value, opts.params_require_grad && p.trainable);
    pv.emplace(name, v);
    if (p.trainable) fr.param_vars.emplace_back(name, v);
    return v;
  };

  fr.input = t.input(batch, opts.input_requires_grad);
  std::vector<double> nsc(static_cast<size_t>(spec.in_c)), nsh(static_cast<size_t>(spec.in_c));
  {
    const Tensor& sc = param("norm.scale").value;
    const Tensor& sh = param("norm.shift").value;
    for (int64_t c = 0; c < spec.in_c; ++c) {
      nsc[static_cast<size_t>(c)] = sc[c];
      nsh[static_cast<size_t>(c)] = sh[c];
    }
  }
  Var cur = t.channel_affine(fr.input, nsc, nsh);

  auto run_bn = [&](const std::string& name, Var x) {
    return t.batchnorm2d(x, P(name + ".gamma"), P(name + ".beta"),
                         &param(name + ".run_mean").value, &param(name + ".run_var").value,
                         opts.training);
  };

  std::map<std::string, Var> outputs;
  for (const LayerDef& l : spec.layers) {
    if (l.kind == "conv") {
      cur = t.conv2d(cur, P(l.name + ".w"), P(l.name + ".b"),
                     static_cast<int>(l.arg("stride", 1)), static_cast<int>(l.arg("pad", 0)));
    } else if (l.kind == "relu") {
      cur = t.relu(cur);
    } else if (l.kind == "maxpool") {
      cur = t.maxpool2d(cur, static_cast<int>(l.arg("k", 2)),
                        static_cast<int>(l.arg("stride", l.arg("k", 2))));
    } else if (l.kind == "batchnorm") {
      cur = run_bn(l.name, cur);
    } else if (l.kind == "resblock") {
      const int64_t stride = l.arg("stride", 1);
      const bool bn = l.arg("bn", 1) != 0;
      const int64_t in_c = t.val(cur).dim(1);
      const int64_t out_c = l.arg("out", 0);
      Var h = t.conv2d(cur, P(l.name + ".conv1.w"), P(l.name + ".conv1.b"),
                       static_cast<int>(stride), 1);
      if (bn) h = run_bn(l.name + ".bn1", h);
      h = t.relu(h);
      h = t.conv2d(h, P(l.name + ".conv2.w"), P(l.name + ".conv2.b"), 1, 1);
      if (bn) h = run_bn(l.name + ".bn2", h);
      Var sc = cur;
      if (stride != 1 || in_c != out_c) {
        sc = t.conv2d(cur, P(l.name + ".sc.w"), P(l.name + ".sc.b"),
                      static_cast<int>(stride), 0);
        if (bn) sc = run_bn(l.name + ".scbn", sc);
      }
      cur = t.relu(t.add(h, sc));
    } else if (l.kind == "globalpool") {
      cur = t.adaptive_maxpool2d(cur, 1, 1);
    } else if (l.kind == "flatten") {
      const Tensor& v = t.val(cur);
      // Non-native resolutions are pooled back to the native grid so the
      // following linear layer keeps its trained input width.
      const int64_t nh = native_flatten_h_, nw = native_flatten_w_;
      if (v.dim(2) != nh || v.dim(3) != nw) {
        if (v.dim(2) < nh || v.dim(3) < nw)
          throw ShapeError("forward: input too small, flatten grid " +
                           std::to_string(v.dim(2)) + "x" + std::to_string(v.dim(3)) +
                           " is below the native " + std::to_string(nh) + "x" +
                           std::to_string(nw));
        cur = t.adaptive_maxpool2d(cur, static_cast<int>(nh), static_cast<int>(nw));
      }
      const Tensor& v2 = t.val(cur);
      cur = t.reshape(cur, {v2.dim(0), v2.dim(1) * v2.dim(2) * v2.dim(3)});
    } else if (l.kind == "linear") {
      cur = t.linear(cur, P(l.name + ".w"), P(l.name + ".b"));
    }
    outputs.emplace(l.name, cur);
  }

  fr.g = outputs.at(spec.global_source);
  Var query = fr.g;
  if (opts.g_override != nullptr) {
    if (opts.g_override->rank() != 2 || opts.g_override->dim(0) != batch.dim(0) ||
        opts.g_override->dim(1) != global_dim_)
      throw ShapeError("forward: g_override must be [N," + std::to_string(global_dim_) + "]");
    query = t.input(*opts.g_override);
  }

  if (spec.attention.empty()) {
    fr.features = fr.g;
    fr.probs = t.softmax(t.linear(fr.features, P("cls.w"), P("cls.b")), 1);
    return fr;
  }

  std::vector<Var> ga_list;
  for (const AttentionDef& a : spec.attention) {
    Var feat = outputs.at(a.tap);
    const Tensor& fv = t.val(feat);
    AttentionHeadVars hv;
    hv.kind = a.kind;
    const std::string base = "att." + a.tap;
    if (fv.dim(1) != global_dim_) {
      hv.has_projection = true;
      hv.proj_w = P(base + ".proj.w");
      hv.proj_b = P(base + ".proj.b");
    }
    if (a.kind == CompatibilityKind::Parameterised) hv.u = P(base + ".u");
    auto [ga, amap] = attention_forward_on_tape(t, feat, query, hv);
    ga_list.push_back(ga);
    fr.head_ga.push_back(ga);
    fr.maps.push_back(amap);
    fr.map_hw.emplace_back(fv.dim(2), fv.dim(3));
    fr.map_layer_ids.push_back(static_cast<int>(layer_index(spec, a.tap)));
  }

  fr.features = ga_list.size() == 1 ? ga_list[0] : t.concat(ga_list, 1);
  if (spec.head_mode == HeadMode::Concat) {
    fr.probs = t.softmax(t.linear(fr.features, P("cls.w"), P("cls.b")), 1);
  } else {
    Var acc;
    for (size_t h = 0; h < spec.attention.size(); ++h) {
      const std::string base = "cls." + spec.attention[h].tap;
      Var p = t.softmax(t.linear(ga_list[h], P(base + ".w"), P(base + ".b")), 1);
      acc = h == 0 ? p : t.add(acc, p);
    }
    fr.probs = t.scalar_mul(acc, 1.0 / static_cast<double>(spec.attention.size()));
  }
  return fr;
}

std::pair<Tensor, std::vector<Tensor>> Network::predict(const Tensor& batch) {
  ForwardResult fr = forward(batch);
  std::vector<Tensor> maps;
  for (size_t h = 0; h < fr.maps.size(); ++h) {
    const auto [mh, mw] = fr.map_hw[h];
    maps.push_back(fr.tape->val(fr.maps[h]).reshaped({batch.dim(0), mh, mw}));
  }
  return {fr.tape->val(fr.probs), std::move(maps)};
}

AttentionMapSet Network::map_set_for(const ForwardResult& fr, int64_t image_index,
                                     const std::string& image_id) const {
  AttentionMapSet set;
  set.image_id = image_id;
  for (size_t h = 0; h < fr.maps.size(); ++h) {
    const auto [mh, mw] = fr.map_hw[h];
    const Tensor& all = fr.tape->val(fr.maps[h]);
    if (image_index < 0 || image_index >= all.dim(0))
      throw ShapeError("map_set_for: image index out of range");
    Tensor m({mh, mw});
    for (int64_t i = 0; i < mh * mw; ++i) m[i] = all.at(image_index, i);
    set.layer_ids.push_back(fr.map_layer_ids[h]);
    set.maps.push_back(std::move(m));
  }
  return set;
}

std::vector<CensusRow> Network::param_census() const {
  std::vector<CensusRow> rows;
  rows.reserve(params.size());
  for (const Param& p : params) rows.push_back({p.name, p.value.shape(), p.value.numel()});
  return rows;
}

int64_t Network::param_total() const {
  int64_t total = 0;
  for (const Param& p : params) total += p.value.numel();
  return total;
}

void save_checkpoint(const std::string& dir, const Network& net) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "params");
  const std::string spec_text = format_network_spec(net.spec);
  write_text_file((fs::path(dir) / "spec.attnetspec").string(), spec_text);

  nlohmann::ordered_json j;
  j["format"] = "attnet-checkpoint-v1";
  j["spec_hash"] = fnv1a64_hex(spec_text);
  j["seed"] = net.seed;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (size_t i = 0; i < net.params.size(); ++i) {
    const Param& p = net.params[i];
    char idx[8];
    std::snprintf(idx, sizeof(idx), "%03zu", i);
    const std::string file = "params/" + std::string(idx) + "_" + p.name + ".atnt";
    save_tensor((fs::path(dir) / file).string(), p.value);
    tensors.push_back({{"file", file}, {"name", p.name}, {"trainable", p.trainable}});
  }
  j["tensors"] = tensors;
  write_text_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

Network load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string spec_text = read_text_file((fs::path(dir) / "spec.attnetspec").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint manifest in " + dir + ": " + e.what());
  }
  if (j.value("format", "") != "attnet-checkpoint-v1")
    throw IoError("unrecognized checkpoint format in " + dir);
  if (j.value("spec_hash", "") != fnv1a64_hex(spec_text))
    throw IoError("checkpoint spec hash mismatch in " + dir);
  Network net = Network::build(parse_network_spec(spec_text), j.value("seed", uint64_t{0}));
  size_t loaded = 0;
  for (const auto& e : j["tensors"]) {
    const std::string name = e.value("name", "");
    Tensor t = load_tensor((fs::path(dir) / e.value("file", "")).string());
    Param& p = net.param(name);
    if (!p.value.same_shape(t))
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                    ", expected " + shape_str(p.value.shape()));
    p.value = std::move(t);
    ++loaded;
  }
  if (loaded != net.params.size())
    throw IoError("checkpoint lists " + std::to_string(loaded) + " tensors, network has " +
                  std::to_string(net.params.size()));
  return net;
}

}  // namespace attnet
