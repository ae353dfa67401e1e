#include "attnet/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "attnet/errors.hpp"
#include "attnet/manifest.hpp"

namespace attnet {

namespace {

constexpr int64_t kBatch = 32;

int argmax_row(const Tensor& probs, int64_t n) {
  const int64_t t = probs.dim(1);
  int best = 0;
  for (int64_t k = 1; k < t; ++k)
    if (probs.at(n, k) > probs.at(n, best)) best = static_cast<int>(k);
  return best;
}

void check_images(const Tensor& images) {
  if (images.rank() != 4)
    throw ConfigError("fgsm: images must be rank 4 [N,C,H,W], got " +
                      shape_str(images.shape()));
  if (images.dim(0) < 1) throw ConfigError("fgsm: empty image set");
  for (int64_t i = 0; i < images.numel(); ++i) {
    const double v = images[i];
    if (!(v >= 0.0 && v <= 1.0))
      throw ConfigError("fgsm: image values must lie in [0,1]");
  }
}

void check_epsilon(double eps) {
  if (!(eps >= 0.0) || !std::isfinite(eps))
    throw ConfigError("fgsm: epsilon must be finite and >= 0, got " +
                      std::to_string(eps));
}

// Clean predictions plus the sign of dL/dx for every image, batch-wise. The
// loss targets `labels` when given, otherwise the model's own clean argmax.
struct AttackBasis {
  std::vector<int> pred;  // clean argmax per image
  Tensor sign;            // image-shaped, entries in {-1, 0, +1}
};

AttackBasis attack_basis(Network& net, const Tensor& images,
                         const std::vector<int>* labels) {
  const int64_t n_total = images.dim(0);
  const int64_t per = images.numel() / n_total;
  if (labels) {
    if (static_cast<int64_t>(labels->size()) != n_total)
      throw ConfigError("fgsm: got " + std::to_string(labels->size()) +
                        " labels for " + std::to_string(n_total) + " images");
    for (int lb : *labels)
      if (lb < 0 || lb >= net.spec.classes)
        throw ConfigError("fgsm: label " + std::to_string(lb) +
                          " outside [0," + std::to_string(net.spec.classes) + ")");
  }

  AttackBasis basis;
  basis.pred.resize(static_cast<size_t>(n_total));
  basis.sign = Tensor(images.shape());
  for (int64_t start = 0; start < n_total; start += kBatch) {
    const int64_t n = std::min(kBatch, n_total - start);
    Tensor batch({n, images.dim(1), images.dim(2), images.dim(3)});
    std::memcpy(batch.data(), images.data() + start * per,
                static_cast<size_t>(n * per) * sizeof(double));
    ForwardOptions opts;
    opts.input_requires_grad = true;
    ForwardResult fr = net.forward(batch, opts);
    const Tensor& probs = fr.tape->val(fr.probs);
    std::vector<int> target(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      basis.pred[static_cast<size_t>(start + i)] = argmax_row(probs, i);
      target[static_cast<size_t>(i)] =
          labels ? (*labels)[static_cast<size_t>(start + i)]
                 : basis.pred[static_cast<size_t>(start + i)];
    }
    Var loss = fr.tape->cross_entropy(fr.probs, target);
    fr.tape->backward(loss);
    const Tensor g = fr.tape->grad(fr.input);
    for (int64_t j = 0; j < n * per; ++j) {
      const double gv = g[j];
      if (!std::isfinite(gv))
        throw NumericError("fgsm: non-finite input gradient");
      basis.sign[start * per + j] =
          static_cast<double>((gv > 0.0) - (gv < 0.0));
    }
  }
  return basis;
}

// x' = clip_[0,1](x + (eps/255) * sign), then pulled back by ulps where
// rounding pushed the measured 0-255 delta past the budget, so that
// |(x' - x) * 255| <= eps holds exactly as evaluated in doubles.
Tensor apply_step(const Tensor& images, const Tensor& sign, double eps255) {
  Tensor out = images;
  if (eps255 == 0.0) return out;
  const double step = eps255 / 255.0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double x = images[i];
    double xp = x + step * sign[i];
    xp = std::min(1.0, std::max(0.0, xp));
    while (std::abs((xp - x) * 255.0) > eps255) xp = std::nextafter(xp, x);
    out[i] = xp;
  }
  return out;
}

std::vector<uint8_t> flip_flags(Network& net, const Tensor& x_adv,
                                const std::vector<int>& ref_pred) {
  const int64_t n_total = x_adv.dim(0);
  const int64_t per = x_adv.numel() / n_total;
  std::vector<uint8_t> flags(static_cast<size_t>(n_total));
  for (int64_t start = 0; start < n_total; start += kBatch) {
    const int64_t n = std::min(kBatch, n_total - start);
    Tensor batch({n, x_adv.dim(1), x_adv.dim(2), x_adv.dim(3)});
    std::memcpy(batch.data(), x_adv.data() + start * per,
                static_cast<size_t>(n * per) * sizeof(double));
    ForwardResult fr = net.forward(batch);
    const Tensor& probs = fr.tape->val(fr.probs);
    for (int64_t i = 0; i < n; ++i)
      flags[static_cast<size_t>(start + i)] =
          argmax_row(probs, i) != ref_pred[static_cast<size_t>(start + i)] ? 1 : 0;
  }
  return flags;
}

double rate_of(const std::vector<uint8_t>& flags) {
  int64_t flips = 0;
  for (uint8_t f : flags) flips += f;
  return 100.0 * static_cast<double>(flips) /
         static_cast<double>(flags.size());
}

}  // namespace

Tensor fgsm(Network& net, const Tensor& images, const std::vector<int>& labels,
            double epsilon255) {
  check_images(images);
  check_epsilon(epsilon255);
  AttackBasis basis = attack_basis(net, images, &labels);
  return apply_step(images, basis.sign, epsilon255);
}

Tensor fgsm(Network& net, const Tensor& images, double epsilon255) {
  check_images(images);
  check_epsilon(epsilon255);
  AttackBasis basis = attack_basis(net, images, nullptr);
  return apply_step(images, basis.sign, epsilon255);
}

double fooling_rate(Network& net, const Tensor& images, double epsilon255) {
  check_images(images);
  check_epsilon(epsilon255);
  AttackBasis basis = attack_basis(net, images, nullptr);
  Tensor x_adv = apply_step(images, basis.sign, epsilon255);
  return rate_of(flip_flags(net, x_adv, basis.pred));
}

AdversarialReport adversarial_sweep(Network& net, const Tensor& images,
                                    std::vector<double> epsilons) {
  check_images(images);
  if (epsilons.empty()) throw ConfigError("fgsm: no epsilon budgets given");
  for (double e : epsilons) check_epsilon(e);
  std::sort(epsilons.begin(), epsilons.end());

  AttackBasis basis = attack_basis(net, images, nullptr);
  AdversarialReport rep;
  rep.images = images.dim(0);
  rep.epsilons = epsilons;
  for (double eps : epsilons) {
    Tensor x_adv = apply_step(images, basis.sign, eps);
    rep.flipped.push_back(flip_flags(net, x_adv, basis.pred));
    rep.fooling_rates.push_back(rate_of(rep.flipped.back()));
  }
  return rep;
}

std::string format_adversarial_report(const AdversarialReport& rep) {
  if (rep.epsilons.size() != rep.fooling_rates.size() ||
      rep.epsilons.size() != rep.flipped.size())
    throw ConfigError("adversarial report: misaligned epsilon rows");
  nlohmann::ordered_json j;
  j["format"] = "attnet-adversarial-v1";
  j["images"] = rep.images;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (size_t i = 0; i < rep.epsilons.size(); ++i) {
    const double rate = rep.fooling_rates[i];
    if (!(rate >= 0.0 && rate <= 100.0))
      throw ConfigError("adversarial report: fooling rate outside [0,100]");
    if (static_cast<int64_t>(rep.flipped[i].size()) != rep.images)
      throw ConfigError("adversarial report: flip flags do not cover every image");
    nlohmann::ordered_json row;
    row["epsilon"] = rep.epsilons[i];
    row["fooling_rate"] = rate;
    row["flipped"] = rep.flipped[i];
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

void save_adversarial_report(const std::string& path,
                             const AdversarialReport& rep) {
  write_text_file(path, format_adversarial_report(rep));
}

}  // namespace attnet
