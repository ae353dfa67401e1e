#ifndef ATTNET_TRAIN_HPP_
#define ATTNET_TRAIN_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnet/data.hpp"
#include "attnet/model.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

enum class ScheduleKind { Step, Transfer };

// Optimizer/schedule settings. Text format ("attnet-train v1", "key value"
// lines) round-trips through parse/format.
struct TrainConfig {
  int64_t batch_size = 32;
  double lr0 = 0.01;
  int64_t lr_decay_every = 25;   // step schedule cadence, epochs
  double lr_decay_factor = 0.5;  // in (0,1]
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int64_t epochs = 10;
  uint64_t seed = 1;
  ScheduleKind schedule = ScheduleKind::Step;
  double iter_decay = 0.0;       // per-iteration multiplicative lr decay
  bool augment_flip = false;
  int64_t augment_crop_pad = 0;
  int64_t checkpoint_every = 0;  // epochs; 0 disables cadence checkpoints
};

TrainConfig parse_train_config(const std::string& text);
std::string format_train_config(const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);
void save_train_config(const std::string& path, const TrainConfig& cfg);
// ConfigError on out-of-range fields (lr0 may be 0; the rest per field docs).
void validate_train_config(const TrainConfig& cfg);
// FNV-1a over the canonical text form.
std::string train_config_hash(const TrainConfig& cfg);

// Epoch-level learning rate.
// step: lr0 * factor^floor(epoch / every).
// transfer: lr0 before epoch 30, doubled at 30 and again at 60, then halved
// every 30 epochs from epoch 90 on.
double lr_at(const TrainConfig& cfg, int64_t epoch);

// v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v.
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
              double momentum, double weight_decay);

struct EpochRow {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_error = 0.0;  // percent
  double test_loss = 0.0;
  double test_error = 0.0;   // percent
};

struct MetricsReport {
  std::string run_id;
  std::string config_hash;
  std::vector<EpochRow> epochs;
  double final_test_error = 0.0;      // percent
  double final_test_error_std = 0.0;  // across seeds; 0 for a single run
  double wall_clock_seconds = 0.0;    // informational only; never serialized
};

// Canonical JSON record (run id, config hash, per-epoch rows, final error).
// Deterministic byte-for-byte for identical runs; wall clock is excluded so
// reruns compare equal.
std::string format_metrics_report(const MetricsReport& report);
void save_metrics_report(const std::string& path, const MetricsReport& report);

// Mini-batch SGD under cross-entropy. Mutates net in place; deterministic
// given cfg.seed (shuffle order, augmentation, init all seeded). Saves
// cadence checkpoints under checkpoint_dir/epoch_NNNN when configured.
// NumericError with epoch and lr when the loss stops being finite.
MetricsReport train(Network& net, const LabeledImageSet& train_set,
                    const LabeledImageSet& test_set, const TrainConfig& cfg,
                    const std::string& checkpoint_dir = "");

// Top-1 error in percent; argmax ties break toward the lowest class id.
double evaluate(Network& net, const LabeledImageSet& set, int64_t batch_size = 64);
// (mean cross-entropy, top-1 error %).
std::pair<double, double> evaluate_metrics(Network& net, const LabeledImageSet& set,
                                           int64_t batch_size = 64);

// Frozen forward pass; rows are the classifier input (g for baselines,
// concatenated per-head descriptors for attention nets).
Tensor extract_features(Network& net, const LabeledImageSet& set, int64_t batch_size = 64);

// --- Max-margin linear transfer -------------------------------------------

// Binary hinge objective with an implicit appended bias feature:
//   ||w||^2/(2*C*N) + (1/N) sum_i max(0, 1 - y_i * (w . [x_i;1])).
// x [N,D], y_pm entries +-1, w [D+1].
double hinge_objective(const Tensor& x, const std::vector<int>& y_pm, const Tensor& w,
                       double C);

// Deterministic averaged subgradient descent on the objective above.
// iters <= 0 picks a size-scaled default. Returns w [D+1].
Tensor train_hinge_binary(const Tensor& x, const std::vector<int>& y_pm, double C,
                          int64_t iters = 0);

// One-vs-rest stack of binary classifiers; returns [D+1, classes].
Tensor train_hinge_ovr(const Tensor& x, const std::vector<int>& labels, int classes,
                       double C, int64_t iters = 0);

// Argmax of class scores W^T [x;1], ties to the lowest class id.
std::vector<int> hinge_predict(const Tensor& x, const Tensor& w_ovr);

// Deterministic stratified fold assignment: per class, indices are shuffled
// by a seed-derived stream and dealt round-robin. ConfigError when any class
// has fewer than 2 instances (a training split would lose the class and no
// retry can fix it).
std::vector<std::vector<int64_t>> stratified_folds(const std::vector<int>& labels, int folds,
                                                   uint64_t seed);

struct TransferResult {
  double mean_accuracy = 0.0;  // percent
  double std_accuracy = 0.0;
  std::vector<double> fold_accuracies;
};

// K-fold cross-validated one-vs-rest hinge transfer on frozen features.
TransferResult linear_transfer(const Tensor& features, const std::vector<int>& labels,
                               int folds = 5, double C = 1.0, uint64_t seed = 0,
                               int64_t iters = 0);

}  // namespace attnet

#endif  // ATTNET_TRAIN_HPP_
