// attnet: command-line surface tying the library's modules into reproducible
// experiment workflows. Every artifact-producing subcommand writes exactly
// one run manifest next to its outputs; given the same inputs, every command
// reproduces its reports byte for byte.
//
// Exit codes: 0 success, 2 usage/config/io failure, 3 numeric failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attnet/adversarial.hpp"
#include "attnet/autodiff.hpp"
#include "attnet/data.hpp"
#include "attnet/errors.hpp"
#include "attnet/image_io.hpp"
#include "attnet/manifest.hpp"
#include "attnet/maps.hpp"
#include "attnet/model.hpp"
#include "attnet/rng.hpp"
#include "attnet/train.hpp"

namespace fs = std::filesystem;
using namespace attnet;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw ConfigError("--out must not be empty");
  fs::create_directories(out);
}

std::string join_path(const std::string& dir, const std::string& rel) {
  return (fs::path(dir) / rel).string();
}

// First N indices of a set, or the whole set when limit <= 0.
LabeledImageSet head_of(const LabeledImageSet& set, int64_t limit) {
  if (limit <= 0 || limit >= set.size()) return set;
  std::vector<int64_t> idx(static_cast<size_t>(limit));
  for (int64_t i = 0; i < limit; ++i) idx[static_cast<size_t>(i)] = i;
  return subset(set, idx);
}

int64_t infer_classes(const LabeledImageSet& a, const LabeledImageSet& b) {
  int top = 1;
  for (int lb : a.labels) top = std::max(top, lb + 1);
  for (int lb : b.labels) top = std::max(top, lb + 1);
  return std::max(top, 2);
}

void write_json_report(const std::string& path, const nlohmann::ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

void finish_manifest(const std::string& out, RunManifest m) {
  m.tool_version = kVersion;
  save_run_manifest(join_path(out, "run_manifest.json"), m);
}

// Tap name for attention head h (heads follow the spec's attention order).
std::string head_tap(const Network& net, size_t h) {
  return net.spec.attention[h].tap;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string spec, data, config, out;
};

int cmd_train(const TrainArgs& a) {
  ensure_out_dir(a.out);
  const std::string train_manifest = join_path(a.data, "train/manifest.txt");
  const std::string test_manifest = join_path(a.data, "test/manifest.txt");
  LabeledImageSet train_set = load_dataset(train_manifest);
  LabeledImageSet test_set = load_dataset(test_manifest);
  if (train_set.labels.empty() || test_set.labels.empty())
    throw ConfigError("train: empty train or test set under " + a.data);
  TrainConfig cfg = load_train_config(a.config);

  RunManifest m;
  m.command = "train";
  m.arguments = {"--spec", a.spec, "--data", a.data, "--config", a.config};
  m.seed = cfg.seed;
  m.input_hashes.emplace_back(a.config, hash_file(a.config));
  m.input_hashes.emplace_back(train_manifest, hash_file(train_manifest));
  m.input_hashes.emplace_back(test_manifest, hash_file(test_manifest));

  NetworkSpec spec;
  if (is_preset_id(a.spec)) {
    spec = preset_spec(a.spec, infer_classes(train_set, test_set), train_set.height());
  } else {
    spec = load_network_spec(a.spec);
    m.input_hashes.emplace_back(a.spec, hash_file(a.spec));
  }

  Network net = Network::build(spec, cfg.seed);
  NormalizationStats stats = fit_normalization(train_set);
  auto [scale, shift] = channel_scale_shift(stats);
  net.set_input_normalization(scale, shift);

  MetricsReport report = train(net, train_set, test_set, cfg,
                               join_path(a.out, "checkpoints"));
  save_checkpoint(join_path(a.out, "checkpoint"), net);
  save_metrics_report(join_path(a.out, "metrics.json"), report);

  m.outputs = {"metrics.json", "checkpoint"};
  if (cfg.checkpoint_every > 0) m.outputs.push_back("checkpoints");
  finish_manifest(a.out, m);
  std::cout << "final test error " << fmt_double(report.final_test_error)
            << "% after " << report.epochs.size() << " epochs\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct AttackArgs {
  std::string ckpt, data, out;
  std::vector<double> eps;
  int64_t limit = 0;
  int64_t dump = 0;
};

int cmd_attack(const AttackArgs& a) {
  ensure_out_dir(a.out);
  if (a.eps.empty()) throw ConfigError("attack: --eps list must not be empty");
  Network net = load_checkpoint(a.ckpt);
  LabeledImageSet set = head_of(load_dataset(a.data), a.limit);
  if (set.labels.empty()) throw ConfigError("attack: empty image set");

  AdversarialReport report = adversarial_sweep(net, set.images, a.eps);
  save_adversarial_report(join_path(a.out, "adversarial.json"), report);

  RunManifest m;
  m.command = "attack";
  m.arguments = {"--ckpt", a.ckpt, "--data", a.data};
  for (double e : a.eps) m.arguments.push_back("--eps=" + fmt_double(e));
  if (a.limit > 0) m.arguments.push_back("--limit=" + std::to_string(a.limit));
  if (a.dump > 0) m.arguments.push_back("--dump=" + std::to_string(a.dump));
  m.input_hashes.emplace_back(a.data, hash_file(a.data));
  m.input_hashes.emplace_back(join_path(a.ckpt, "manifest.json"),
                              hash_file(join_path(a.ckpt, "manifest.json")));
  m.outputs = {"adversarial.json"};

  if (a.dump > 0) {
    LabeledImageSet few = head_of(set, a.dump);
    for (double e : report.epsilons) {
      Tensor adv = fgsm(net, few.images, e);
      const std::string reldir = "perturbed/eps_" + fmt_double(e);
      fs::create_directories(join_path(a.out, reldir));
      for (int64_t i = 0; i < few.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04lld.ppm", static_cast<long long>(i));
        const std::string rel = reldir + "/" + name;
        const int64_t chw = adv.numel() / adv.dim(0);
        Tensor one = Tensor({3, adv.dim(2), adv.dim(3)});
        for (int64_t k = 0; k < chw; ++k) one[k] = adv[i * chw + k];
        save_ppm(join_path(a.out, rel), one);
        m.outputs.push_back(rel);
      }
    }
  }
  finish_manifest(a.out, m);
  for (size_t i = 0; i < report.epsilons.size(); ++i)
    std::cout << "eps " << fmt_double(report.epsilons[i]) << ": fooling rate "
              << fmt_double(report.fooling_rates[i]) << "%\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  std::string ckpt, data, out;
  int64_t limit = 0;
};

int cmd_segment(const SegmentArgs& a) {
  ensure_out_dir(a.out);
  Network net = load_checkpoint(a.ckpt);
  LabeledImageSet set = head_of(load_dataset(a.data), a.limit);

  RunManifest m;
  m.command = "segment";
  m.arguments = {"--ckpt", a.ckpt, "--data", a.data};
  if (a.limit > 0) m.arguments.push_back("--limit=" + std::to_string(a.limit));
  m.input_hashes.emplace_back(a.data, hash_file(a.data));
  m.input_hashes.emplace_back(join_path(a.ckpt, "manifest.json"),
                              hash_file(join_path(a.ckpt, "manifest.json")));

  nlohmann::ordered_json report;
  report["format"] = "attnet-segmentation-v1";
  report["images"] = set.size();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();

  const bool scored = !set.masks.empty();
  double jaccard_sum = 0.0;
  if (set.size() > 0) fs::create_directories(join_path(a.out, "masks"));
  for (int64_t i = 0; i < set.size(); ++i) {
    BinaryMask mask = segment(net, set.image(i));
    char name[32];
    std::snprintf(name, sizeof(name), "mask_%05lld.pgm", static_cast<long long>(i));
    const std::string rel = std::string("masks/") + name;
    save_mask(join_path(a.out, rel), mask);
    m.outputs.push_back(rel);
    nlohmann::ordered_json row;
    row["image"] = i;
    row["mask"] = rel;
    row["threshold"] = mask.threshold;
    if (scored) {
      const double j = jaccard(mask.values, set.masks[static_cast<size_t>(i)]);
      row["jaccard"] = j;
      jaccard_sum += j;
    }
    rows.push_back(row);
  }
  if (scored && set.size() > 0)
    report["mean_jaccard"] = jaccard_sum / static_cast<double>(set.size());
  report["rows"] = rows;
  write_json_report(join_path(a.out, "segmentation.json"), report);
  m.outputs.insert(m.outputs.begin(), "segmentation.json");
  finish_manifest(a.out, m);
  if (scored && set.size() > 0)
    std::cout << "mean jaccard "
              << fmt_double(jaccard_sum / static_cast<double>(set.size())) << "\n";
  std::cout << "wrote " << set.size() << " masks\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TransferArgs {
  std::string ckpt, data, out;
  int64_t folds = 5;
  double C = 1.0;
  uint64_t seed = 0;
  int64_t iters = 0;
  int64_t permute_seed = -1;
};

int cmd_transfer(const TransferArgs& a) {
  ensure_out_dir(a.out);
  Network net = load_checkpoint(a.ckpt);
  LabeledImageSet set = load_dataset(a.data);
  if (set.labels.empty()) throw ConfigError("transfer: empty data set");

  Tensor features = extract_features(net, set);
  std::vector<int> labels = set.labels;
  if (a.permute_seed >= 0) {
    Rng rng(static_cast<uint64_t>(a.permute_seed));
    rng.shuffle(labels);
  }
  TransferResult result =
      linear_transfer(features, labels, a.folds, a.C, a.seed, a.iters);

  nlohmann::ordered_json report;
  report["format"] = "attnet-transfer-v1";
  report["folds"] = a.folds;
  report["permuted_labels"] = a.permute_seed >= 0;
  report["fold_accuracies"] = result.fold_accuracies;
  report["mean_accuracy"] = result.mean_accuracy;
  report["std_accuracy"] = result.std_accuracy;
  write_json_report(join_path(a.out, "transfer.json"), report);

  RunManifest m;
  m.command = "transfer";
  m.arguments = {"--ckpt",  a.ckpt,
                 "--data",  a.data,
                 "--folds", std::to_string(a.folds),
                 "--C",     fmt_double(a.C),
                 "--iters", std::to_string(a.iters)};
  if (a.permute_seed >= 0)
    m.arguments.push_back("--permute-seed=" + std::to_string(a.permute_seed));
  m.seed = a.seed;
  m.input_hashes.emplace_back(a.data, hash_file(a.data));
  m.input_hashes.emplace_back(join_path(a.ckpt, "manifest.json"),
                              hash_file(join_path(a.ckpt, "manifest.json")));
  m.outputs = {"transfer.json"};
  finish_manifest(a.out, m);
  std::cout << "mean transfer accuracy " << fmt_double(result.mean_accuracy)
            << "% over " << a.folds << " folds\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct VisualizeArgs {
  std::string ckpt, data, out;
  std::vector<int64_t> images;
  std::vector<std::string> layers;
};

int cmd_visualize(const VisualizeArgs& a) {
  ensure_out_dir(a.out);
  Network net = load_checkpoint(a.ckpt);
  if (net.spec.attention.empty())
    throw ConfigError("visualize: checkpoint has no attention heads");
  LabeledImageSet set = load_dataset(a.data);
  if (a.images.empty()) throw ConfigError("visualize: --images list must not be empty");

  // Resolve requested layer names against the net's attention taps.
  std::vector<size_t> heads;
  if (a.layers.size() == 1 && a.layers[0] == "all") {
    for (size_t h = 0; h < net.spec.attention.size(); ++h) heads.push_back(h);
  } else {
    for (const std::string& name : a.layers) {
      bool found = false;
      for (size_t h = 0; h < net.spec.attention.size(); ++h)
        if (head_tap(net, h) == name) {
          heads.push_back(h);
          found = true;
          break;
        }
      if (!found)
        throw ConfigError("visualize: unknown layer '" + name +
                          "' (net taps attention at: " + [&] {
                            std::string all;
                            for (size_t h = 0; h < net.spec.attention.size(); ++h)
                              all += (h ? ", " : "") + head_tap(net, h);
                            return all;
                          }() + ")");
    }
  }

  RunManifest m;
  m.command = "visualize";
  m.arguments = {"--ckpt", a.ckpt, "--data", a.data};
  for (int64_t i : a.images) m.arguments.push_back("--images=" + std::to_string(i));
  for (const std::string& l : a.layers) m.arguments.push_back("--layers=" + l);
  m.input_hashes.emplace_back(a.data, hash_file(a.data));
  m.input_hashes.emplace_back(join_path(a.ckpt, "manifest.json"),
                              hash_file(join_path(a.ckpt, "manifest.json")));

  for (int64_t idx : a.images) {
    if (idx < 0 || idx >= set.size())
      throw ConfigError("visualize: image index " + std::to_string(idx) +
                        " outside [0," + std::to_string(set.size()) + ")");
    Tensor image = set.image(idx);
    auto [probs, maps] = net.predict(image.reshaped({1, 3, image.dim(1), image.dim(2)}));
    (void)probs;
    for (size_t h : heads) {
      Tensor map = maps[h].reshaped({maps[h].dim(1), maps[h].dim(2)});
      char stem[64];
      std::snprintf(stem, sizeof(stem), "img%04lld_%s", static_cast<long long>(idx),
                    head_tap(net, h).c_str());
      const std::string overlay_rel = std::string(stem) + "_overlay.ppm";
      const std::string heat_rel = std::string(stem) + "_map.pgm";
      save_heatmap_overlay(join_path(a.out, overlay_rel), image, map);
      FusedMap for_display = fuse(map, map);  // rescale to [0,1] for grayscale
      save_heatmap(join_path(a.out, heat_rel), for_display.values);
      m.outputs.push_back(overlay_rel);
      m.outputs.push_back(heat_rel);
    }
  }
  finish_manifest(a.out, m);
  std::cout << "wrote " << a.images.size() * heads.size() << " overlays\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct QuerySwapArgs {
  std::string ckpt, target, query, out;
};

int cmd_queryswap(const QuerySwapArgs& a) {
  ensure_out_dir(a.out);
  Network net = load_checkpoint(a.ckpt);
  Tensor target = load_ppm(a.target);
  Tensor query = load_ppm(a.query);
  QuerySwapResult res = query_swap(net, target, query);

  RunManifest m;
  m.command = "queryswap";
  m.arguments = {"--ckpt", a.ckpt, "--target", a.target, "--query", a.query};
  m.input_hashes.emplace_back(a.target, hash_file(a.target));
  m.input_hashes.emplace_back(a.query, hash_file(a.query));
  m.input_hashes.emplace_back(join_path(a.ckpt, "manifest.json"),
                              hash_file(join_path(a.ckpt, "manifest.json")));

  nlohmann::ordered_json report;
  report["format"] = "attnet-queryswap-v1";
  nlohmann::ordered_json heads = nlohmann::ordered_json::array();
  m.outputs = {"queryswap.json"};
  for (size_t h = 0; h < res.map_self.size(); ++h) {
    const std::string tap = head_tap(net, h);
    const std::string rel_self = "map_self_" + tap + ".atnt";
    const std::string rel_query = "map_query_" + tap + ".atnt";
    const std::string rel_change = "relchange_" + tap + ".atnt";
    save_tensor(join_path(a.out, rel_self), res.map_self[h]);
    save_tensor(join_path(a.out, rel_query), res.map_query[h]);
    save_tensor(join_path(a.out, rel_change), res.rel_change[h]);
    m.outputs.push_back(rel_self);
    m.outputs.push_back(rel_query);
    m.outputs.push_back(rel_change);

    double l1 = 0.0;
    double self_sum = 0.0;
    double query_sum = 0.0;
    for (int64_t i = 0; i < res.map_self[h].numel(); ++i) {
      l1 += std::abs(res.map_query[h][i] - res.map_self[h][i]);
      self_sum += res.map_self[h][i];
      query_sum += res.map_query[h][i];
    }
    nlohmann::ordered_json row;
    row["tap"] = tap;
    row["grid_h"] = res.map_self[h].dim(0);
    row["grid_w"] = res.map_self[h].dim(1);
    row["l1_total"] = l1;
    row["l1_mean"] = l1 / static_cast<double>(res.map_self[h].numel());
    row["self_sum"] = self_sum;
    row["query_sum"] = query_sum;
    heads.push_back(row);
  }
  report["heads"] = heads;
  write_json_report(join_path(a.out, "queryswap.json"), report);
  finish_manifest(a.out, m);
  std::cout << "wrote query-swap grids for " << res.map_self.size() << " heads\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"attnet: attention-augmented CNN experiments (train, attack, "
               "segment, transfer, visualize, queryswap)"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "max worker threads (results identical)")
      ->capture_default_str();

  TrainArgs ta;
  CLI::App* t = app.add_subcommand("train", "train a net and write metrics + checkpoint");
  t->add_option("--spec", ta.spec, "preset id (e.g. vgg-mini-att2-pc-concat) or spec file")
      ->required();
  t->add_option("--data", ta.data, "dataset root holding train/manifest.txt and test/manifest.txt")
      ->required();
  t->add_option("--config", ta.config, "training config file")->required();
  t->add_option("--out", ta.out, "output directory")->required();

  AttackArgs aa;
  CLI::App* at = app.add_subcommand("attack", "FGSM sweep; writes a fooling-rate report");
  at->add_option("--ckpt", aa.ckpt, "checkpoint directory")->required();
  at->add_option("--data", aa.data, "dataset manifest of clean images")->required();
  at->add_option("--eps", aa.eps, "L-inf budgets in 0-255 units, e.g. 1,2,4,8,16")
      ->required()
      ->delimiter(',');
  at->add_option("--limit", aa.limit, "attack only the first N images");
  at->add_option("--dump", aa.dump, "export the first N perturbed images per budget as PPM");
  at->add_option("--out", aa.out, "output directory")->required();

  SegmentArgs sa;
  CLI::App* sg = app.add_subcommand("segment", "binarize fused attention maps into masks");
  sg->add_option("--ckpt", sa.ckpt, "checkpoint directory (needs >= 2 attention heads)")
      ->required();
  sg->add_option("--data", sa.data, "dataset manifest; ground-truth masks are scored if present")
      ->required();
  sg->add_option("--limit", sa.limit, "segment only the first N images");
  sg->add_option("--out", sa.out, "output directory")->required();

  TransferArgs tr;
  CLI::App* tf = app.add_subcommand("transfer", "frozen-feature linear transfer with k-fold CV");
  tf->add_option("--ckpt", tr.ckpt, "checkpoint directory")->required();
  tf->add_option("--data", tr.data, "dataset manifest")->required();
  tf->add_option("--folds", tr.folds, "cross-validation folds")->capture_default_str();
  tf->add_option("--C", tr.C, "hinge-loss penalty")->capture_default_str();
  tf->add_option("--seed", tr.seed, "fold-split seed")->capture_default_str();
  tf->add_option("--iters", tr.iters, "subgradient iterations (0 = auto)")
      ->capture_default_str();
  tf->add_option("--permute-seed", tr.permute_seed,
                 "permute labels with this seed first (chance control, -1 = off)")
      ->capture_default_str();
  tf->add_option("--out", tr.out, "output directory")->required();

  VisualizeArgs va;
  CLI::App* vz = app.add_subcommand("visualize", "export attention heatmap overlays");
  vz->add_option("--ckpt", va.ckpt, "checkpoint directory")->required();
  vz->add_option("--data", va.data, "dataset manifest")->required();
  vz->add_option("--images", va.images, "image indices, e.g. 0,3,7")
      ->required()
      ->delimiter(',');
  vz->add_option("--layers", va.layers, "tap names (e.g. b3r2,b4r2) or 'all'")
      ->delimiter(',');
  vz->add_option("--out", va.out, "output directory")->required();

  QuerySwapArgs qa;
  CLI::App* qs = app.add_subcommand("queryswap", "recompute attention with a swapped global vector");
  qs->add_option("--ckpt", qa.ckpt, "checkpoint directory")->required();
  qs->add_option("--target", qa.target, "target image (PPM)")->required();
  qs->add_option("--query", qa.query, "query image (PPM)")->required();
  qs->add_option("--out", qa.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  set_num_threads(std::max(1, threads));
  if (va.layers.empty()) va.layers = {"all"};

  if (t->parsed()) return cmd_train(ta);
  if (at->parsed()) return cmd_attack(aa);
  if (sg->parsed()) return cmd_segment(sa);
  if (tf->parsed()) return cmd_transfer(tr);
  if (vz->parsed()) return cmd_visualize(va);
  if (qs->parsed()) return cmd_queryswap(qa);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
