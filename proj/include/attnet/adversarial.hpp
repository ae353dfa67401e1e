#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnet/model.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

// One attack sweep over a set of images: for each L-inf budget (in 0-255
// pixel units) the percentage of images whose predicted class flips, plus the
// per-image flip flags that produced it.
struct AdversarialReport {
  int64_t images = 0;
  std::vector<double> epsilons;               // ascending
  std::vector<double> fooling_rates;          // percent, aligned with epsilons
  std::vector<std::vector<uint8_t>> flipped;  // [eps][image], 1 = argmax changed
};

// Fast gradient sign attack: x' = clip_[0,1](x + (eps/255) * sign(dL/dx)),
// where L is the cross-entropy against `labels` and sign(0) = 0. The budget
// is enforced in raw 0-255 pixel units: |(x' - x) * 255| <= eps holds exactly
// for every pixel as evaluated in doubles.
Tensor fgsm(Network& net, const Tensor& images, const std::vector<int>& labels,
            double epsilon255);

// Same attack against the model's own predictions on the clean images.
Tensor fgsm(Network& net, const Tensor& images, double epsilon255);

// 100 * (#images whose argmax changes under the attack at epsilon255) / N,
// with the model's clean predictions as the reference.
double fooling_rate(Network& net, const Tensor& images, double epsilon255);

// Runs the attack at every budget (reported in ascending order). The input
// gradient is computed once per image and shared across budgets, which is
// equivalent to calling fgsm per budget.
AdversarialReport adversarial_sweep(Network& net, const Tensor& images,
                                    std::vector<double> epsilons);

std::string format_adversarial_report(const AdversarialReport& rep);
void save_adversarial_report(const std::string& path, const AdversarialReport& rep);

}  // namespace attnet
