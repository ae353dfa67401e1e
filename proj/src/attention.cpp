#include "attnet/attention.hpp"

#include <cmath>
#include <filesystem>

#include "attnet/errors.hpp"
#include "attnet/image_io.hpp"

namespace attnet {

void validate_map_set(const AttentionMapSet& set, double tol) {
  if (set.layer_ids.size() != set.maps.size())
    throw ShapeError("map set: layer id count != map count");
  for (size_t m = 0; m < set.maps.size(); ++m) {
    const Tensor& a = set.maps[m];
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double v = a[i];
      if (!(v > 0.0 && v <= 1.0))
        throw NumericError("map for layer " + std::to_string(set.layer_ids[m]) +
                           " has entry " + std::to_string(v) + " outside (0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > tol)
      throw NumericError("map for layer " + std::to_string(set.layer_ids[m]) + " sums to " +
                         std::to_string(s) + ", expected 1");
  }
}

std::vector<std::string> export_map_set(const std::string& dir, const AttentionMapSet& set,
                                        bool render_pgm) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (size_t m = 0; m < set.maps.size(); ++m) {
    const std::string stem =
        (std::filesystem::path(dir) /
         (set.image_id + "_att_L" + std::to_string(set.layer_ids[m]))).string();
    save_tensor(stem + ".atnt", set.maps[m]);
    paths.push_back(stem + ".atnt");
    if (render_pgm) {
      const Tensor& a = set.maps[m];
      double lo = a[0], hi = a[0];
      for (int64_t i = 0; i < a.numel(); ++i) {
        lo = std::min(lo, a[i]);
        hi = std::max(hi, a[i]);
      }
      Tensor g(a.shape());
      if (hi > lo)
        for (int64_t i = 0; i < a.numel(); ++i) g[i] = (a[i] - lo) / (hi - lo);
      save_pgm(stem + ".pgm", g);
      paths.push_back(stem + ".pgm");
    }
  }
  return paths;
}

Tensor compatibility_scores(const Tensor& locals, const Tensor& g, CompatibilityKind kind,
                            const Tensor* u) {
  if (locals.rank() != 2)
    throw ShapeError("compatibility_scores: locals must be rank 2, got " +
                     shape_str(locals.shape()));
  if (g.rank() != 1)
    throw ShapeError("compatibility_scores: g must be rank 1, got " + shape_str(g.shape()));
  const int64_t n = locals.dim(0), d = locals.dim(1);
  if (g.dim(0) != d)
    throw ShapeError("compatibility_scores: g axis 0 " + std::to_string(g.dim(0)) +
                     " != locals axis 1 " + std::to_string(d));
  Tensor out({n});
  if (kind == CompatibilityKind::DotProduct) {
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int64_t c = 0; c < d; ++c) s += locals.at(i, c) * g[c];
      out[i] = s;
    }
    return out;
  }
  if (u == nullptr || u->numel() == 0)
    throw ConfigError("compatibility_scores: Parameterised kind requires u");
  if (u->rank() != 1 || u->dim(0) != d)
    throw ShapeError("compatibility_scores: u axis 0 must equal shared dim " + std::to_string(d));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) s += (*u)[c] * (locals.at(i, c) + g[c]);
    out[i] = s;
  }
  return out;
}

Tensor normalize_scores(const Tensor& c) {
  if (c.rank() != 1 || c.numel() < 1)
    throw ShapeError("normalize_scores: scores must be a non-empty vector, got " +
                     shape_str(c.shape()));
  for (int64_t i = 0; i < c.numel(); ++i)
    if (std::isnan(c[i])) throw NumericError("normalize_scores: NaN score");
  Tape t;
  Var y = t.softmax(t.input(c), 0);
  return t.val(y);
}

Tensor attend(const Tensor& locals, const Tensor& a) {
  if (locals.rank() != 2)
    throw ShapeError("attend: locals must be rank 2, got " + shape_str(locals.shape()));
  if (a.rank() != 1 || a.dim(0) != locals.dim(0))
    throw ShapeError("attend: weights must be a vector matching locals axis 0");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] < 0.0) throw NumericError("attend: negative weight " + std::to_string(a[i]));
    s += a[i];
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw NumericError("attend: weights sum to " + std::to_string(s) + ", expected 1");
  const int64_t n = locals.dim(0), d = locals.dim(1);
  Tensor out({d});
  for (int64_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += a[i] * locals.at(i, c);
    out[c] = acc;
  }
  return out;
}

std::pair<Var, Var> attention_forward_on_tape(Tape& t, Var feat, Var g,
                                              const AttentionHeadVars& head) {
  const Tensor& f = t.val(feat);
  if (f.rank() != 4)
    throw ShapeError("attention_forward: feature map must be rank 4, got " +
                     shape_str(f.shape()));
  const int64_t C = f.dim(1);
  Var g_loc = g;
  if (head.has_projection) g_loc = t.linear(g, head.proj_w, head.proj_b);
  if (t.val(g_loc).dim(1) != C)
    throw ShapeError("attention_forward: descriptor dim " + std::to_string(t.val(g_loc).dim(1)) +
                     " != local channel axis " + std::to_string(C));
  Var scores = head.kind == CompatibilityKind::DotProduct
                   ? t.attention_scores_dp(feat, g_loc)
                   : t.attention_scores_pc(feat, g_loc, head.u);
  Var a = t.softmax(scores, 1);
  Var g_a = t.attend(feat, a);
  return {g_a, a};
}

std::pair<Tensor, Tensor> attention_forward(const Tensor& feature_map, const Tensor& g,
                                            const AttentionHead& head) {
  if (feature_map.rank() != 4)
    throw ShapeError("attention_forward: feature map must be rank 4, got " +
                     shape_str(feature_map.shape()));
  if (head.local_dim != feature_map.dim(1))
    throw ShapeError("attention_forward: head local_dim " + std::to_string(head.local_dim) +
                     " != feature channel axis " + std::to_string(feature_map.dim(1)));
  Tape t;
  AttentionHeadVars hv;
  hv.has_projection = head.has_projection;
  if (head.has_projection) {
    hv.proj_w = t.input(head.proj_w);
    hv.proj_b = t.input(head.proj_b);
  }
  hv.kind = head.kind;
  if (head.kind == CompatibilityKind::Parameterised) {
    if (head.u.numel() == 0) throw ConfigError("attention_forward: Parameterised head lacks u");
    hv.u = t.input(head.u);
  }
  auto [g_a, a] = attention_forward_on_tape(t, t.input(feature_map), t.input(g), hv);
  const int64_t N = feature_map.dim(0), H = feature_map.dim(2), W = feature_map.dim(3);
  return {t.val(g_a), t.val(a).reshaped({N, H, W})};
}

Tensor classify(const std::vector<Tensor>& g_a_list, HeadMode mode,
                const std::vector<LinearClassifier>& classifiers) {
  if (g_a_list.empty()) throw ConfigError("classify: no descriptors");
  const int64_t N = g_a_list[0].dim(0);
  for (const Tensor& g : g_a_list)
    if (g.rank() != 2 || g.dim(0) != N)
      throw ShapeError("classify: descriptors must be rank 2 with a common batch axis");
  Tape t;
  if (mode == HeadMode::Concat) {
    if (classifiers.size() != 1)
      throw ConfigError("classify: Concat mode needs exactly one classifier, got " +
                        std::to_string(classifiers.size()));
    std::vector<Var> parts;
    parts.reserve(g_a_list.size());
    for (const Tensor& g : g_a_list) parts.push_back(t.input(g));
    Var cat = parts.size() == 1 ? parts[0] : t.concat(parts, 1);
    Var probs = t.softmax(t.linear(cat, t.input(classifiers[0].w), t.input(classifiers[0].b)), 1);
    return t.val(probs);
  }
  if (classifiers.size() != g_a_list.size())
    throw ConfigError("classify: Indep mode needs one classifier per descriptor, got " +
                      std::to_string(classifiers.size()) + " for " +
                      std::to_string(g_a_list.size()));
  Tensor avg;
  for (size_t s = 0; s < g_a_list.size(); ++s) {
    Var probs = t.softmax(
        t.linear(t.input(g_a_list[s]), t.input(classifiers[s].w), t.input(classifiers[s].b)), 1);
    if (s == 0) {
      avg = t.val(probs);
    } else {
      const Tensor& p = t.val(probs);
      if (!p.same_shape(avg)) throw ShapeError("classify: class count differs between heads");
      for (int64_t i = 0; i < avg.numel(); ++i) avg[i] += p[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(g_a_list.size());
  for (int64_t i = 0; i < avg.numel(); ++i) avg[i] *= inv;
  return avg;
}

}  // namespace attnet
