// Release acceptance: ten criteria covering gradients, attention invariants,
// oracle equivalence, desk-scale training behavior, localization,
// segmentation, adversarial robustness shape, feature transfer, query-swap
// diagnostics, and byte-exact reproducibility of every reported number.
//
// Usage: acceptance <attnet-binary> [workdir]
//
// One line per criterion: "criterion N: PASS|FAIL -- detail". Exit code is
// the number of failed criteria. Completed CLI runs (detected through their
// run manifests) are reused, so an interrupted invocation resumes where it
// stopped instead of retraining.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include "attnet/adversarial.hpp"
#include "attnet/attention.hpp"
#include "attnet/autodiff.hpp"
#include "attnet/data.hpp"
#include "attnet/image_io.hpp"
#include "attnet/manifest.hpp"
#include "attnet/maps.hpp"
#include "attnet/model.hpp"
#include "attnet/rng.hpp"
#include "attnet/tensor.hpp"
#include "attnet/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace attnet;
using Clock = std::chrono::steady_clock;

namespace {

std::string g_attnet;
fs::path g_work;
int g_failures = 0;

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s -- %s\n", criterion, pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(double v) { return nlohmann::json(v).dump(); }

// --- CLI plumbing ----------------------------------------------------------

// Output directories of every CLI run backing criteria 4-9, in execution
// order; criterion 10 replays all of them.
std::vector<fs::path> g_replayable;

int run_cli(const std::string& args) {
  const std::string cmd =
      g_attnet + " " + args + " >> " + (g_work / "cli.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return status != -1 && WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Runs an artifact-producing command unless its manifest already exists.
// Records the out dir for the criterion-10 replay and leaves the elapsed
// seconds in a sidecar (reused runs keep their original measurement).
double ensure_run(const fs::path& out, const std::string& args) {
  const fs::path sidecar = out / "elapsed_s.txt";
  if (!fs::exists(out / "run_manifest.json")) {
    auto t0 = Clock::now();
    const int rc = run_cli(args);
    if (rc != 0) {
      std::printf("fatal: command failed (exit %d): %s\n", rc, args.c_str());
      std::exit(100);
    }
    write_text_file(sidecar.string(), fmt(secs_since(t0)) + "\n");
  }
  g_replayable.push_back(out);
  if (!fs::exists(sidecar)) return 0.0;  // interrupted between run and sidecar
  return std::stod(read_text_file(sidecar.string()));
}

nlohmann::json load_json(const fs::path& p) {
  return nlohmann::json::parse(read_text_file(p.string()));
}

// --- shared fixtures -------------------------------------------------------

constexpr int64_t kClasses = 10;
constexpr int64_t kCanvas = 48;
constexpr int64_t kObject = 12;
constexpr double kDensity = 0.3;         // criterion-4 clutter level
constexpr double kHeldOutDensity = 0.8;  // criterion-8 variant

fs::path data_root() { return g_work / "data48"; }
fs::path heldout_manifest() { return g_work / "heldout" / "manifest.txt"; }

void ensure_datasets() {
  if (!fs::exists(data_root() / "train" / "manifest.txt")) {
    save_dataset((data_root() / "train").string(),
                 synth_clutter(5000, kClasses, kCanvas, kObject, kDensity, 100));
    save_dataset((data_root() / "test").string(),
                 synth_clutter(1000, kClasses, kCanvas, kObject, kDensity, 200));
  }
  if (!fs::exists(heldout_manifest()))
    save_dataset((g_work / "heldout").string(),
                 synth_clutter(500, kClasses, kCanvas, kObject, kHeldOutDensity, 300));
}

fs::path train_config_path(uint64_t seed, int64_t epochs, int64_t decay_every = 0,
                           double lr0 = 0.02) {
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.lr0 = lr0;
  cfg.epochs = epochs;
  cfg.seed = seed;
  if (decay_every > 0) {
    cfg.lr_decay_every = decay_every;
    cfg.lr_decay_factor = 0.2;
  }
  char name[96];
  std::snprintf(name, sizeof(name), "train_s%llu_e%lld_d%lld_lr%g.cfg",
                static_cast<unsigned long long>(seed), static_cast<long long>(epochs),
                static_cast<long long>(decay_every), lr0);
  const fs::path p = g_work / name;
  if (!fs::exists(p)) save_train_config(p.string(), cfg);
  return p;
}

constexpr int64_t kEpochs = 5;       // criterion-4 budget per run
constexpr int64_t kEpochsAtt = 28;   // long run behind criteria 5-7 and 9
constexpr int64_t kAttDecayEvery = 12;  // x0.2 at epochs 12 and 24
// Dot-product heads keep attention anchored to the class evidence; learnable-
// query heads at this receptive-field-to-canvas ratio drift off-object once
// training error collapses, so the long run behind the map criteria uses dp.
// Dot-product scores saturate the softmax at this width, so the dp run needs
// a gentler learning rate than the criterion-4 comparisons.
constexpr const char* kAttPreset = "vgg-mini-att2-dp-concat";
constexpr double kAttLr = 0.005;

fs::path train_out(const std::string& tag) { return g_work / ("train_" + tag); }

// Trains (or reuses) one net; returns (final test error %, elapsed seconds).
std::pair<double, double> trained(const std::string& spec, const std::string& tag,
                                  uint64_t seed, int64_t epochs,
                                  int64_t decay_every = 0, double lr0 = 0.02) {
  const fs::path out = train_out(tag);
  const double elapsed = ensure_run(
      out, "train --spec " + spec + " --data " + data_root().string() + " --config " +
               train_config_path(seed, epochs, decay_every, lr0).string() + " --out " +
               out.string());
  nlohmann::json metrics = load_json(out / "metrics.json");
  return {metrics.at("final_test_error").get<double>(), elapsed};
}

Tensor slice_image_map(const Tensor& maps, int64_t n) {
  Tensor m({maps.dim(1), maps.dim(2)});
  const int64_t hw = m.numel();
  for (int64_t i = 0; i < hw; ++i) m[i] = maps[n * hw + i];
  return m;
}

// --- criterion 1: finite-difference gradients ------------------------------

Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                   double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// Values with pairwise gaps >= 1, so max-window selections cannot flip under
// the finite-difference step.
Tensor rand_spread(std::vector<int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<int64_t> order(static_cast<size_t>(t.numel()));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<double>(order[static_cast<size_t>(i)]) * 1.25;
  return t;
}

// Probe-weighted sum turns any output into a scalar that depends on every
// output coordinate.
std::function<Var(Tape&, Var)> probed(const Tensor& weights,
                                      std::function<Var(Tape&, Var)> op) {
  return [weights, op](Tape& t, Var v) {
    return t.reduce_sum(t.mul(op(t, v), t.input(weights)));
  };
}

struct OpCheck {
  std::string name;
  double err;
};

std::vector<OpCheck> gradient_suite(uint64_t seed) {
  Rng rng(seed * 7919 + 13);
  std::vector<OpCheck> out;
  auto push = [&](const std::string& name, double err) { out.push_back({name, err}); };

  {  // linear, wrt each operand
    Tensor x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 5}, rng);
    Tensor b = rand_tensor({5}, rng), pw = rand_tensor({3, 5}, rng);
    push("linear/x", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.linear(v, t.input(w), t.input(b));
                                }),
                                x));
    push("linear/w", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.linear(t.input(x), v, t.input(b));
                                }),
                                w));
    push("linear/b", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.linear(t.input(x), t.input(w), v);
                                }),
                                b));
  }
  {  // conv2d, wrt each operand
    Tensor x = rand_tensor({2, 2, 5, 5}, rng), w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng), pw = rand_tensor({2, 3, 5, 5}, rng);
    push("conv2d/x", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.conv2d(v, t.input(w), t.input(b), 1, 1);
                                }),
                                x));
    push("conv2d/w", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.conv2d(t.input(x), v, t.input(b), 1, 1);
                                }),
                                w));
    push("conv2d/b", grad_check(probed(pw, [&](Tape& t, Var v) {
                                  return t.conv2d(t.input(x), t.input(w), v, 1, 1);
                                }),
                                b));
    Tensor pw2 = rand_tensor({2, 3, 3, 3}, rng);
    push("conv2d/stride2", grad_check(probed(pw2, [&](Tape& t, Var v) {
                                        return t.conv2d(v, t.input(w), t.input(b), 2, 1);
                                      }),
                                      x));
  }
  {  // pooling over tie-free inputs
    Tensor x = rand_spread({1, 2, 4, 4}, rng), pw = rand_tensor({1, 2, 2, 2}, rng);
    push("maxpool2d", grad_check(probed(pw, [&](Tape& t, Var v) {
                                   return t.maxpool2d(v, 2, 2);
                                 }),
                                 x));
    Tensor x2 = rand_spread({1, 2, 5, 5}, rng);
    push("adaptive_maxpool2d", grad_check(probed(pw, [&](Tape& t, Var v) {
                                            return t.adaptive_maxpool2d(v, 2, 2);
                                          }),
                                          x2));
  }
  {  // relu away from its kink
    Tensor x({2, 3, 4});
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double mag = 0.2 + 0.8 * rng.uniform();
      x[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    Tensor pw = rand_tensor({2, 3, 4}, rng);
    push("relu", grad_check(probed(pw, [](Tape& t, Var v) { return t.relu(v); }), x));
  }
  {  // elementwise and scalar ops
    Tensor x = rand_tensor({2, 5}, rng), y = rand_tensor({2, 5}, rng);
    Tensor pw = rand_tensor({2, 5}, rng);
    push("add", grad_check(probed(pw, [&](Tape& t, Var v) {
                             return t.add(v, t.input(y));
                           }),
                           x));
    push("mul", grad_check(probed(pw, [&](Tape& t, Var v) {
                             return t.mul(v, t.input(y));
                           }),
                           x));
    push("scalar_mul", grad_check(probed(pw, [](Tape& t, Var v) {
                                    return t.scalar_mul(v, -2.5);
                                  }),
                                  x));
    push("scalar_add", grad_check(probed(pw, [](Tape& t, Var v) {
                                    return t.scalar_add(v, 1.75);
                                  }),
                                  x));
    Tensor pr = rand_tensor({10}, rng);
    push("reshape", grad_check(probed(pr, [](Tape& t, Var v) {
                                 return t.reshape(v, {10});
                               }),
                               x));
    Tensor other = rand_tensor({2, 3}, rng), pc = rand_tensor({2, 8}, rng);
    push("concat", grad_check(probed(pc, [&](Tape& t, Var v) {
                                return t.concat({v, t.input(other)}, 1);
                              }),
                              x));
    push("reduce_sum", grad_check([](Tape& t, Var v) { return t.reduce_sum(v); }, x));
    push("reduce_mean", grad_check([](Tape& t, Var v) { return t.reduce_mean(v); }, x));
  }
  {  // channel_affine
    Tensor x = rand_tensor({2, 3, 4, 4}, rng), pw = rand_tensor({2, 3, 4, 4}, rng);
    std::vector<double> scale = {1.7, -0.4, 2.2}, shift = {0.3, -1.1, 0.0};
    push("channel_affine", grad_check(probed(pw, [&](Tape& t, Var v) {
                                        return t.channel_affine(v, scale, shift);
                                      }),
                                      x));
  }
  {  // softmax and the softmax+cross-entropy composition
    Tensor x = rand_tensor({3, 7}, rng, -3.0, 3.0), pw = rand_tensor({3, 7}, rng);
    push("softmax", grad_check(probed(pw, [](Tape& t, Var v) {
                                 return t.softmax(v, 1);
                               }),
                               x));
    std::vector<int> labels = {static_cast<int>(rng.uniform() * 7) % 7,
                               static_cast<int>(rng.uniform() * 7) % 7,
                               static_cast<int>(rng.uniform() * 7) % 7};
    push("cross_entropy", grad_check(
                              [&](Tape& t, Var v) {
                                return t.cross_entropy(t.softmax(v, 1), labels);
                              },
                              x));
  }
  {  // batchnorm in both modes
    Tensor x = rand_tensor({3, 2, 3, 3}, rng), pw = rand_tensor({3, 2, 3, 3}, rng);
    Tensor gamma = rand_tensor({2}, rng, 0.5, 1.5), beta = rand_tensor({2}, rng);
    auto bn = [&](bool training) {
      return [&, training](Tape& t, Var v) {
        Tensor rm = Tensor::zeros({2}), rv = rand_tensor({2}, rng, 0.5, 1.5);
        return t.batchnorm2d(v, t.input(gamma), t.input(beta), &rm, &rv, training);
      };
    };
    push("batchnorm/train/x", grad_check(probed(pw, bn(true)), x));
    Tensor rm = rand_tensor({2}, rng), rv = rand_tensor({2}, rng, 0.5, 1.5);
    push("batchnorm/eval/x",
         grad_check(probed(pw,
                           [&](Tape& t, Var v) {
                             Tensor m = rm, s = rv;  // keep stats fixed per call
                             return t.batchnorm2d(v, t.input(gamma), t.input(beta),
                                                  &m, &s, false);
                           }),
                    x));
    push("batchnorm/train/gamma", grad_check(probed(pw, [&](Tape& t, Var v) {
                                    Tensor rm2 = Tensor::zeros({2});
                                    Tensor rv2 = Tensor::zeros({2});
                                    rv2.fill(1.0);
                                    return t.batchnorm2d(t.input(x), v, t.input(beta),
                                                         &rm2, &rv2, true);
                                  }),
                                  gamma));
    push("batchnorm/train/beta", grad_check(probed(pw, [&](Tape& t, Var v) {
                                   Tensor rm2 = Tensor::zeros({2});
                                   Tensor rv2 = Tensor::zeros({2});
                                   rv2.fill(1.0);
                                   return t.batchnorm2d(t.input(x), t.input(gamma), v,
                                                        &rm2, &rv2, true);
                                 }),
                                 beta));
  }
  {  // attention primitives
    Tensor feat = rand_tensor({2, 3, 2, 2}, rng), g = rand_tensor({2, 3}, rng);
    Tensor u = rand_tensor({3}, rng), ps = rand_tensor({2, 4}, rng);
    Tensor a = rand_tensor({2, 4}, rng, 0.05, 1.0), pa = rand_tensor({2, 3}, rng);
    push("scores_dp/feat", grad_check(probed(ps, [&](Tape& t, Var v) {
                                        return t.attention_scores_dp(v, t.input(g));
                                      }),
                                      feat));
    push("scores_dp/g", grad_check(probed(ps, [&](Tape& t, Var v) {
                                     return t.attention_scores_dp(t.input(feat), v);
                                   }),
                                   g));
    push("scores_pc/feat", grad_check(probed(ps, [&](Tape& t, Var v) {
                             return t.attention_scores_pc(v, t.input(g), t.input(u));
                           }),
                           feat));
    push("scores_pc/g", grad_check(probed(ps, [&](Tape& t, Var v) {
                          return t.attention_scores_pc(t.input(feat), v, t.input(u));
                        }),
                        g));
    push("scores_pc/u", grad_check(probed(ps, [&](Tape& t, Var v) {
                          return t.attention_scores_pc(t.input(feat), t.input(g), v);
                        }),
                        u));
    push("attend/feat", grad_check(probed(pa, [&](Tape& t, Var v) {
                                     return t.attend(v, t.input(a));
                                   }),
                                   feat));
    push("attend/a", grad_check(probed(pa, [&](Tape& t, Var v) {
                                  return t.attend(t.input(feat), v);
                                }),
                                a));
  }
  return out;
}

// Central-difference check of the full att2-pc network loss with respect to
// sampled input pixels and parameters.
double full_graph_check(uint64_t seed) {
  NetworkSpec spec = preset_spec("vgg-mini-att2-pc-concat", 4, 16);
  Network net = Network::build(spec, seed);
  Rng rng(seed * 104729 + 7);
  Tensor x = rand_tensor({2, 3, 16, 16}, rng, 0.05, 0.95);
  const std::vector<int> labels = {static_cast<int>(rng.uniform() * 4) % 4,
                                   static_cast<int>(rng.uniform() * 4) % 4};

  auto loss_value = [&]() {
    ForwardResult fr = net.forward(x);
    return fr.tape->val(fr.tape->cross_entropy(fr.probs, labels))[0];
  };

  ForwardOptions opts;
  opts.params_require_grad = true;
  opts.input_requires_grad = true;
  ForwardResult fr = net.forward(x, opts);
  Var loss = fr.tape->cross_entropy(fr.probs, labels);
  fr.tape->backward(loss);
  const Tensor gx = fr.tape->grad(fr.input);

  const double h = 1e-5;
  double max_err = 0.0;
  auto rel = [](double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
  };

  for (int probe = 0; probe < 6; ++probe) {  // input coordinates
    const int64_t j = static_cast<int64_t>(rng.uniform() * static_cast<double>(x.numel())) %
                      x.numel();
    const double keep = x[j];
    x[j] = keep + h;
    const double fp = loss_value();
    x[j] = keep - h;
    const double fm = loss_value();
    x[j] = keep;
    max_err = std::max(max_err, rel(gx[j], (fp - fm) / (2 * h)));
  }

  std::vector<std::pair<std::string, Tensor>> param_grads;
  for (const auto& [name, var] : fr.param_vars)
    param_grads.emplace_back(name, fr.tape->grad(var));
  for (int probe = 0; probe < 8 && !param_grads.empty(); ++probe) {
    const size_t pi =
        static_cast<size_t>(rng.uniform() * static_cast<double>(param_grads.size())) %
        param_grads.size();
    Tensor& value = net.param(param_grads[pi].first).value;
    const int64_t j =
        static_cast<int64_t>(rng.uniform() * static_cast<double>(value.numel())) %
        value.numel();
    const double keep = value[j];
    value[j] = keep + h;
    const double fp = loss_value();
    value[j] = keep - h;
    const double fm = loss_value();
    value[j] = keep;
    max_err = std::max(max_err, rel(param_grads[pi].second[j], (fp - fm) / (2 * h)));
  }
  return max_err;
}

void criterion_1() {
  auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name = "-";
  const int seeds = 20;
  for (uint64_t s = 1; s <= seeds; ++s) {
    for (const OpCheck& c : gradient_suite(s))
      if (c.err > worst) {
        worst = c.err;
        worst_name = c.name;
      }
    const double g = full_graph_check(s);
    if (g > worst) {
      worst = g;
      worst_name = "full-att2-pc-graph";
    }
  }
  const double elapsed = secs_since(t0);
  const bool pass = worst < 1e-5 && elapsed < 120.0;
  report(1, pass,
         "max rel err " + fmt(worst) + " (" + worst_name + ") over " +
             std::to_string(seeds) + " seeds, " + fmt(elapsed) + "s");
}

// --- criterion 2: attention invariants -------------------------------------

void criterion_2() {
  auto t0 = Clock::now();
  Rng rng(20260814);
  double worst_sum = 0.0, worst_hull = 0.0, worst_shift = 0.0;
  int net_passes = 0;
  const int passes = 1000;
  for (int pass_i = 0; pass_i < passes; ++pass_i) {
    const int64_t N = 1 + static_cast<int64_t>(rng.uniform() * 3) % 3;
    const int64_t C = 2 + static_cast<int64_t>(rng.uniform() * 5) % 5;
    const int64_t H = 1 + static_cast<int64_t>(rng.uniform() * 5) % 5;
    const int64_t W = 1 + static_cast<int64_t>(rng.uniform() * 5) % 5;
    Tensor feat = rand_tensor({N, C, H, W}, rng, -4.0, 4.0);
    Tensor g = rand_tensor({N, C}, rng, -2.0, 2.0);
    Tensor u = rand_tensor({C}, rng);

    Tape t;
    Var vf = t.input(feat), vg = t.input(g);
    Var scores = pass_i % 2 == 0 ? t.attention_scores_dp(vf, vg)
                                 : t.attention_scores_pc(vf, vg, t.input(u));
    Var a = t.softmax(scores, 1);
    Var ga = t.attend(vf, a);
    const Tensor& av = t.val(a);
    const Tensor& gav = t.val(ga);
    const int64_t HW = H * W;

    for (int64_t n = 0; n < N; ++n) {
      double sum = 0.0;
      for (int64_t i = 0; i < HW; ++i) sum += av.at(n, i);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      for (int64_t c = 0; c < C; ++c) {
        double lo = feat[((n * C + c) * H) * W], hi = lo;
        for (int64_t i = 0; i < HW; ++i) {
          const double v = feat[(n * C + c) * HW + i];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        const double out = gav.at(n, c);
        const double viol = std::max(lo - out, out - hi);
        worst_hull = std::max(worst_hull, viol);
      }
    }

    // Shift invariance: the same constant added to every score of a row.
    const double shift = -5.0 + 10.0 * rng.uniform();
    Tape t2;
    Var shifted = t2.softmax(t2.scalar_add(t2.input(t.val(scores)), shift), 1);
    const Tensor& av2 = t2.val(shifted);
    for (int64_t i = 0; i < av.numel(); ++i)
      worst_shift = std::max(worst_shift, std::abs(av[i] - av2[i]));

    if (pass_i % 100 == 0) {  // whole-network maps obey the same invariant
      Network net = Network::build(
          preset_spec(pass_i % 200 == 0 ? "vgg-mini-att2-pc-concat"
                                        : "vgg-mini-att2-dp-indep",
                      4, 16),
          7 + static_cast<uint64_t>(pass_i));
      auto [probs, maps] = net.predict(rand_tensor({2, 3, 16, 16}, rng, 0.0, 1.0));
      (void)probs;
      for (const Tensor& m : maps)
        for (int64_t n = 0; n < m.dim(0); ++n) {
          double sum = 0.0;
          for (int64_t i = 0; i < m.dim(1) * m.dim(2); ++i)
            sum += m[n * m.dim(1) * m.dim(2) + i];
          worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        }
      ++net_passes;
    }
  }
  const bool pass = worst_sum <= 1e-9 && worst_hull <= 1e-12 && worst_shift <= 1e-12;
  report(2, pass,
         std::to_string(passes) + " passes (+" + std::to_string(net_passes) +
             " full nets): |sum-1| max " + fmt(worst_sum) + ", hull violation max " +
             fmt(worst_hull) + ", shift drift max " + fmt(worst_shift) + " (" +
             fmt(secs_since(t0)) + "s)");
}

// --- criterion 3: oracle equivalence ----------------------------------------

void criterion_3() {
  auto t0 = Clock::now();
  Rng rng(333);
  bool pass = true;
  std::string detail;

  double conv_err = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int64_t N = 1 + static_cast<int64_t>(rng.uniform() * 2) % 2;
    const int64_t C = 1 + static_cast<int64_t>(rng.uniform() * 3) % 3;
    const int64_t H = 3 + static_cast<int64_t>(rng.uniform() * 6) % 6;
    const int64_t W = 3 + static_cast<int64_t>(rng.uniform() * 6) % 6;
    const int64_t K = 1 + static_cast<int64_t>(rng.uniform() * 4) % 4;
    const int k = 1 + 2 * (static_cast<int>(rng.uniform() * 2) % 2);  // 1 or 3
    const int stride = 1 + static_cast<int>(rng.uniform() * 2) % 2;
    const int pad = static_cast<int>(rng.uniform() * 2) % 2;
    Tensor x = rand_tensor({N, C, H, W}, rng);
    Tensor w = rand_tensor({K, C, k, k}, rng);
    Tensor b = rand_tensor({K}, rng);
    Tape t;
    const Tensor& got = t.val(t.conv2d(t.input(x), t.input(w), t.input(b), stride, pad));
    Tensor want = oracles::conv2d_naive(x, w, b, stride, pad);
    for (int64_t i = 0; i < got.numel(); ++i) {
      const double e = std::abs(got[i] - want[i]) /
                       std::max({1.0, std::abs(got[i]), std::abs(want[i])});
      conv_err = std::max(conv_err, e);
    }
  }
  pass = pass && conv_err < 1e-12;
  detail += "conv rel err " + fmt(conv_err);

  int otsu_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int64_t> hist(256, 0);
    const int mode = trial % 3;
    if (mode == 0) {
      for (int b = 0; b < 256; ++b)
        hist[static_cast<size_t>(b)] = static_cast<int64_t>(rng.uniform() * 50);
    } else if (mode == 1) {
      const int c1 = static_cast<int>(rng.uniform() * 256) % 256;
      const int c2 = static_cast<int>(rng.uniform() * 256) % 256;
      for (int rep = 0; rep < 400; ++rep) {
        const int center = rep % 2 == 0 ? c1 : c2;
        const int b = std::clamp(center + static_cast<int>(rng.normal() * 12.0), 0, 255);
        ++hist[static_cast<size_t>(b)];
      }
    } else {
      const int spikes = 1 + static_cast<int>(rng.uniform() * 4) % 4;
      for (int s = 0; s < spikes; ++s)
        hist[static_cast<size_t>(static_cast<int>(rng.uniform() * 256) % 256)] +=
            1 + static_cast<int64_t>(rng.uniform() * 1000);
    }
    if (std::accumulate(hist.begin(), hist.end(), int64_t{0}) == 0) hist[128] = 1;
    if (otsu_threshold_hist(hist) != oracles::otsu_brute_force(hist)) ++otsu_mismatch;
  }
  pass = pass && otsu_mismatch == 0;
  detail += ", otsu mismatches " + std::to_string(otsu_mismatch) + "/1000";

  int jaccard_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t h = 1 + static_cast<int64_t>(rng.uniform() * 16) % 16;
    const int64_t w = 1 + static_cast<int64_t>(rng.uniform() * 16) % 16;
    Tensor a({h, w}), b({h, w});
    const double pa = rng.uniform(), pb = rng.uniform();
    for (int64_t i = 0; i < a.numel(); ++i) {
      a[i] = rng.uniform() < pa ? 1.0 : 0.0;
      b[i] = rng.uniform() < pb ? 1.0 : 0.0;
    }
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      if (a[i] == 1.0 && b[i] == 1.0) ++inter;
      if (a[i] == 1.0 || b[i] == 1.0) ++uni;
    }
    const double want = uni == 0 ? 1.0
                                 : static_cast<double>(inter) / static_cast<double>(uni);
    if (jaccard(a, b) != want) ++jaccard_mismatch;
  }
  pass = pass && jaccard_mismatch == 0;
  detail += ", jaccard mismatches " + std::to_string(jaccard_mismatch) + "/200";

  double hinge_gap = -1e9;
  for (int trial = 0; trial < 8; ++trial) {
    const int64_t n = 20, d = 3;
    Tensor x({n, d});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
    std::vector<int> y;
    for (int64_t i = 0; i < n; ++i) y.push_back(i % 2 == 0 ? 1 : -1);
    for (int64_t i = 0; i < n; ++i) x.at(i, 0) += y[static_cast<size_t>(i)] * 0.5;
    const double C = 1.0;
    Tensor w_sub = train_hinge_binary(x, y, C);
    Tensor w_orc = oracles::svm_dual_cd(x, y, C);
    hinge_gap = std::max(hinge_gap,
                         hinge_objective(x, y, w_sub, C) - hinge_objective(x, y, w_orc, C));
  }
  pass = pass && hinge_gap <= 1e-3;
  detail += ", hinge objective gap " + fmt(hinge_gap);

  const double elapsed = secs_since(t0);
  pass = pass && elapsed < 180.0;
  report(3, pass, detail + " (" + fmt(elapsed) + "s)");
}

// --- criteria 4-9: CLI-driven experiments -----------------------------------

struct TrainedRuns {
  std::vector<double> att2_err, base_err, att2_time, base_time;
};

TrainedRuns criterion_4() {
  TrainedRuns runs;
  bool pass = true;
  std::string detail;
  for (uint64_t seed : {1, 2, 3}) {
    auto [ae, at] = trained("vgg-mini-att2-pc-concat", "att2_s" + std::to_string(seed),
                            seed, kEpochs);
    auto [be, bt] = trained("vgg-mini", "base_s" + std::to_string(seed), seed, kEpochs);
    runs.att2_err.push_back(ae);
    runs.base_err.push_back(be);
    runs.att2_time.push_back(at);
    runs.base_time.push_back(bt);
    detail += "s" + std::to_string(seed) + ": att2 " + fmt(ae) + "% vs base " +
              fmt(be) + "%; ";
    pass = pass && ae <= be + 1.0 && at <= 1800.0 && bt <= 1800.0;
  }
  const double mean_a =
      std::accumulate(runs.att2_err.begin(), runs.att2_err.end(), 0.0) / 3.0;
  const double mean_b =
      std::accumulate(runs.base_err.begin(), runs.base_err.end(), 0.0) / 3.0;
  pass = pass && mean_a < mean_b;
  const double longest =
      std::max(*std::max_element(runs.att2_time.begin(), runs.att2_time.end()),
               *std::max_element(runs.base_time.begin(), runs.base_time.end()));
  report(4, pass,
         detail + "means " + fmt(mean_a) + "% vs " + fmt(mean_b) +
             "%, longest run " + fmt(longest) + "s");
  return runs;
}

void criterion_5(Network& att2, const LabeledImageSet& test_set) {
  auto t0 = Clock::now();
  double mass_sum = 0.0, area_sum = 0.0;
  const int64_t n = test_set.size();
  const int64_t chunk = 50;
  for (int64_t start = 0; start < n; start += chunk) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    LabeledImageSet part = subset(test_set, idx);
    auto [probs, maps] = att2.predict(part.images);
    (void)probs;
    const Tensor& final_level = maps.back();
    for (size_t i = 0; i < idx.size(); ++i) {
      const Box& b = part.boxes[i];
      mass_sum += attention_mass_in_box(slice_image_map(final_level,
                                                        static_cast<int64_t>(i)),
                                        b, kCanvas, kCanvas);
      area_sum += static_cast<double>(b.w * b.h) /
                  static_cast<double>(kCanvas * kCanvas);
    }
  }
  const double mean_mass = mass_sum / static_cast<double>(n);
  const double mean_area = area_sum / static_cast<double>(n);
  const bool pass = mean_mass >= 2.0 * mean_area;
  report(5, pass,
         "mean attention mass in box " + fmt(mean_mass) + " vs box area fraction " +
             fmt(mean_area) + " (ratio " + fmt(mean_mass / mean_area) + ", " +
             fmt(secs_since(t0)) + "s)");
}

void criterion_6(const LabeledImageSet& test_set) {
  const fs::path out = g_work / "segment";
  ensure_run(out, "segment --ckpt " + (train_out("att2_long") / "checkpoint").string() +
                      " --data " + (data_root() / "test" / "manifest.txt").string() +
                      " --out " + out.string());
  nlohmann::json rep = load_json(out / "segmentation.json");
  const double mean_j = rep.at("mean_jaccard").get<double>();

  // Center-box control of the same mean area as the predicted masks.
  double area_sum = 0.0;
  std::vector<Tensor> masks;
  for (const auto& row : rep.at("rows")) {
    Tensor m = load_mask_pgm((out / row.at("mask").get<std::string>()).string());
    for (int64_t i = 0; i < m.numel(); ++i) area_sum += m[i];
    masks.push_back(std::move(m));
  }
  const double mean_area = area_sum / static_cast<double>(masks.size());
  const int64_t side = std::llround(std::sqrt(std::max(0.0, mean_area)));
  Tensor center = Tensor::zeros({kCanvas, kCanvas});
  const int64_t off = (kCanvas - side) / 2;
  for (int64_t r = 0; r < side; ++r)
    for (int64_t c = 0; c < side; ++c)
      if (off + r < kCanvas && off + c < kCanvas) center.at(off + r, off + c) = 1.0;
  double center_sum = 0.0;
  for (int64_t i = 0; i < test_set.size(); ++i)
    center_sum += jaccard(center, test_set.masks[static_cast<size_t>(i)]);
  const double center_mean = center_sum / static_cast<double>(test_set.size());

  const bool pass = mean_j >= 0.3 && mean_j > center_mean;
  report(6, pass,
         "mean jaccard " + fmt(mean_j) + " vs center-box control " + fmt(center_mean) +
             " (control side " + std::to_string(side) + "px)");
}

void criterion_7(Network& att2, const LabeledImageSet& test_set) {
  const fs::path out = g_work / "attack";
  ensure_run(out, "attack --ckpt " + (train_out("att2_long") / "checkpoint").string() +
                      " --data " + (data_root() / "test" / "manifest.txt").string() +
                      " --eps 0,1,2,4,8,16 --limit 200 --out " + out.string());
  nlohmann::json rep = load_json(out / "adversarial.json");
  bool pass = rep.at("images").get<int64_t>() >= 200;
  std::string rates;
  double prev = -1.0;
  for (const auto& row : rep.at("rows")) {
    const double eps = row.at("epsilon").get<double>();
    const double rate = row.at("fooling_rate").get<double>();
    if (eps == 0.0 && rate != 0.0) pass = false;
    if (rate < prev) pass = false;
    prev = rate;
    rates += fmt(eps) + ":" + fmt(rate) + "% ";
  }

  // Exact L-inf budget audit, image by image.
  std::vector<int64_t> idx(200);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor clean = subset(test_set, idx).images;
  double worst_overshoot = -1e300;
  for (double eps : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    Tensor adv = fgsm(att2, clean, eps);
    const int64_t per = clean.numel() / clean.dim(0);
    for (int64_t n = 0; n < clean.dim(0); ++n) {
      double linf = 0.0;
      for (int64_t j = 0; j < per; ++j)
        linf = std::max(linf, std::abs(adv[n * per + j] - clean[n * per + j]) * 255.0);
      worst_overshoot = std::max(worst_overshoot, linf - eps);
      if (linf > eps) pass = false;
    }
  }
  report(7, pass,
         "rates " + rates + "-- worst L-inf overshoot " + fmt(worst_overshoot) +
             "/255 across 5 budgets x 200 images");
}

void criterion_8() {
  const std::string data = heldout_manifest().string();
  const fs::path out_a = g_work / "transfer_att2";
  const fs::path out_b = g_work / "transfer_base";
  const fs::path out_p = g_work / "transfer_perm";
  const std::string common = " --data " + data + " --folds 5 --iters 4000 --seed 11";
  ensure_run(out_a, "transfer --ckpt " + (train_out("att2_s1") / "checkpoint").string() +
                        common + " --out " + out_a.string());
  ensure_run(out_b, "transfer --ckpt " + (train_out("base_s1") / "checkpoint").string() +
                        common + " --out " + out_b.string());
  ensure_run(out_p, "transfer --ckpt " + (train_out("att2_s1") / "checkpoint").string() +
                        common + " --permute-seed 7 --out " + out_p.string());
  const double acc_a = load_json(out_a / "transfer.json").at("mean_accuracy").get<double>();
  const double acc_b = load_json(out_b / "transfer.json").at("mean_accuracy").get<double>();
  const double acc_p = load_json(out_p / "transfer.json").at("mean_accuracy").get<double>();
  const double chance = 100.0 / static_cast<double>(kClasses);
  const bool pass = acc_a >= acc_b - 2.0 && std::abs(acc_p - chance) <= 10.0;
  report(8, pass,
         "att2 " + fmt(acc_a) + "% vs base " + fmt(acc_b) + "% (permuted " + fmt(acc_p) +
             "%, chance " + fmt(chance) + "%)");
}

void criterion_9() {
  const std::string target = (data_root() / "test" / "images" / "img_00000.ppm").string();
  const std::string query = (data_root() / "test" / "images" / "img_00001.ppm").string();

  const fs::path out_dp = g_work / "queryswap_dp";
  ensure_run(out_dp, "queryswap --ckpt " + (train_out("att2_long") / "checkpoint").string() +
                         " --target " + target + " --query " + query + " --out " +
                         out_dp.string());
  nlohmann::json dp = load_json(out_dp / "queryswap.json");
  bool pass = true;
  double min_l1 = 1e300;
  for (const auto& head : dp.at("heads")) {
    min_l1 = std::min(min_l1, head.at("l1_mean").get<double>());
    if (std::abs(head.at("self_sum").get<double>() - 1.0) > 1e-9) pass = false;
    if (std::abs(head.at("query_sum").get<double>() - 1.0) > 1e-9) pass = false;
  }
  pass = pass && min_l1 > 1e-3;

  const fs::path out_pc = g_work / "queryswap_pc";
  ensure_run(out_pc, "queryswap --ckpt " + (train_out("att2_s1") / "checkpoint").string() +
                         " --target " + target + " --query " + query + " --out " +
                         out_pc.string());
  nlohmann::json pc = load_json(out_pc / "queryswap.json");
  std::string pc_mag;
  for (const auto& head : pc.at("heads")) {
    pc_mag += head.at("tap").get<std::string>() + " " +
              fmt(head.at("l1_mean").get<double>()) + " ";
    if (std::abs(head.at("self_sum").get<double>() - 1.0) > 1e-9) pass = false;
    if (std::abs(head.at("query_sum").get<double>() - 1.0) > 1e-9) pass = false;
  }
  report(9, pass,
         "dp min per-cell L1 " + fmt(min_l1) + " (> 1e-3), maps normalized; pc magnitude: " +
             pc_mag);
}

// --- criterion 10: replay every manifest ------------------------------------

bool files_equal(const fs::path& a, const fs::path& b) {
  if (!fs::exists(a) || !fs::exists(b)) return false;
  return read_text_file(a.string()) == read_text_file(b.string());
}

// Compares an output entry (file or directory tree) byte for byte.
bool outputs_equal(const fs::path& orig, const fs::path& fresh, std::string* why) {
  if (fs::is_directory(orig)) {
    if (!fs::is_directory(fresh)) {
      *why = fresh.string() + " missing";
      return false;
    }
    for (const auto& entry : fs::recursive_directory_iterator(orig)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), orig);
      if (!files_equal(entry.path(), fresh / rel)) {
        *why = (fresh / rel).string() + " differs";
        return false;
      }
    }
    return true;
  }
  if (!files_equal(orig, fresh)) {
    *why = fresh.string() + " differs";
    return false;
  }
  return true;
}

void criterion_10() {
  auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  int replayed = 0, compared = 0;
  for (const fs::path& orig : g_replayable) {
    RunManifest m = load_run_manifest((orig / "run_manifest.json").string());
    const fs::path fresh = g_work / "replay" / orig.filename();
    if (!fs::exists(fresh / "run_manifest.json")) {
      std::string cmd = m.command;
      for (const std::string& arg : m.arguments) cmd += " " + arg;
      cmd += " --out " + fresh.string();
      const int rc = run_cli(cmd);
      if (rc != 0) {
        pass = false;
        detail += orig.filename().string() + ": replay exit " + std::to_string(rc) + "; ";
        continue;
      }
    }
    ++replayed;
    for (const std::string& rel : m.outputs) {
      std::string why;
      if (!outputs_equal(orig / rel, fresh / rel, &why)) {
        pass = false;
        detail += why + "; ";
      }
      ++compared;
    }
  }
  report(10, pass,
         std::to_string(replayed) + "/" + std::to_string(g_replayable.size()) +
             " runs replayed, " + std::to_string(compared) +
             " output entries byte-compared" +
             (detail.empty() ? "" : " -- " + detail) + " (" + fmt(secs_since(t0)) + "s)");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <attnet-binary> [workdir]\n", argv[0]);
    return 64;
  }
  g_attnet = argv[1];
  g_work = argc > 2 ? fs::path(argv[2]) : fs::current_path() / "acceptance_work";
  fs::create_directories(g_work);

  criterion_1();
  criterion_2();
  criterion_3();

  ensure_datasets();
  criterion_4();
  trained(kAttPreset, "att2_long", 1, kEpochsAtt, kAttDecayEvery, kAttLr);

  LabeledImageSet test_set = load_dataset((data_root() / "test" / "manifest.txt").string());
  Network att2 = load_checkpoint((train_out("att2_long") / "checkpoint").string());
  criterion_5(att2, test_set);
  criterion_6(test_set);
  criterion_7(att2, test_set);
  criterion_8();
  criterion_9();
  criterion_10();

  std::printf("%s\n", g_failures == 0 ? "acceptance: all criteria passed"
                                      : "acceptance: FAILURES PRESENT");
  return g_failures;
}
