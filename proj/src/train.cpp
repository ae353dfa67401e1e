#include "attnet/train.hpp"

#include <Eigen/Dense>
#include <algorithm>
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

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string fmt_double(double v) {
  // Shortest representation that round-trips; keeps config text canonical.
  nlohmann::json j = v;
  return j.dump();
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  bool saw_header = false;
  TrainConfig cfg;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key)) continue;
    if (!saw_header) {
      std::string ver;
      if (key != "attnet-train" || !(ls >> ver) || ver != "v1")
        throw ConfigError("train config must start with 'attnet-train v1'");
      saw_header = true;
      continue;
    }
    if (!(ls >> value))
      throw ConfigError("line " + std::to_string(lineno) + ": '" + key + "' needs a value");
    try {
      if (key == "batch_size") cfg.batch_size = std::stoll(value);
      else if (key == "lr0") cfg.lr0 = std::stod(value);
      else if (key == "lr_decay_every") cfg.lr_decay_every = std::stoll(value);
      else if (key == "lr_decay_factor") cfg.lr_decay_factor = std::stod(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "momentum") cfg.momentum = std::stod(value);
      else if (key == "epochs") cfg.epochs = std::stoll(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "iter_decay") cfg.iter_decay = std::stod(value);
      else if (key == "augment_flip") cfg.augment_flip = std::stoll(value) != 0;
      else if (key == "augment_crop_pad") cfg.augment_crop_pad = std::stoll(value);
      else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoll(value);
      else if (key == "schedule") {
        if (value == "step") cfg.schedule = ScheduleKind::Step;
        else if (value == "transfer") cfg.schedule = ScheduleKind::Transfer;
        else throw ConfigError("unknown schedule '" + value + "'");
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("line " + std::to_string(lineno) + ": bad value '" + value +
                        "' for '" + key + "'");
    }
  }
  if (!saw_header) throw ConfigError("empty train config");
  validate_train_config(cfg);
  return cfg;
}

std::string format_train_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "attnet-train v1\n";
  os << "batch_size " << cfg.batch_size << "\n";
  os << "lr0 " << fmt_double(cfg.lr0) << "\n";
  os << "lr_decay_every " << cfg.lr_decay_every << "\n";
  os << "lr_decay_factor " << fmt_double(cfg.lr_decay_factor) << "\n";
  os << "weight_decay " << fmt_double(cfg.weight_decay) << "\n";
  os << "momentum " << fmt_double(cfg.momentum) << "\n";
  os << "epochs " << cfg.epochs << "\n";
  os << "seed " << cfg.seed << "\n";
  os << "schedule " << (cfg.schedule == ScheduleKind::Step ? "step" : "transfer") << "\n";
  os << "iter_decay " << fmt_double(cfg.iter_decay) << "\n";
  os << "augment_flip " << (cfg.augment_flip ? 1 : 0) << "\n";
  os << "augment_crop_pad " << cfg.augment_crop_pad << "\n";
  os << "checkpoint_every " << cfg.checkpoint_every << "\n";
  return os.str();
}

TrainConfig load_train_config(const std::string& path) {
  return parse_train_config(read_text_file(path));
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  write_text_file(path, format_train_config(cfg));
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.lr0 < 0.0) throw ConfigError("lr0 must be >= 0");
  if (cfg.lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
  if (cfg.lr_decay_factor <= 0.0 || cfg.lr_decay_factor > 1.0)
    throw ConfigError("lr_decay_factor must lie in (0,1]");
  if (cfg.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw ConfigError("momentum must lie in [0,1)");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.iter_decay < 0.0 || cfg.iter_decay >= 1.0)
    throw ConfigError("iter_decay must lie in [0,1)");
  if (cfg.augment_crop_pad < 0) throw ConfigError("augment_crop_pad must be >= 0");
  if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

std::string train_config_hash(const TrainConfig& cfg) {
  return fnv1a64_hex(format_train_config(cfg));
}

double lr_at(const TrainConfig& cfg, int64_t epoch) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  if (cfg.schedule == ScheduleKind::Step)
    return cfg.lr0 * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every));
  if (epoch < 30) return cfg.lr0;
  if (epoch < 60) return 2.0 * cfg.lr0;
  return 4.0 * cfg.lr0 * std::pow(0.5, static_cast<double>((epoch - 60) / 30));
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
              double momentum, double weight_decay) {
  if (!param.same_shape(grad) || !param.same_shape(velocity))
    throw ShapeError("sgd_step: param " + shape_str(param.shape()) + ", grad " +
                     shape_str(grad.shape()) + ", velocity " + shape_str(velocity.shape()) +
                     " must agree");
  for (int64_t i = 0; i < param.numel(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * (grad[i] + weight_decay * param[i]);
    param[i] += velocity[i];
  }
}

std::string format_metrics_report(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["format"] = "attnet-metrics-v1";
  j["run_id"] = report.run_id;
  j["config_hash"] = report.config_hash;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const EpochRow& r : report.epochs) {
    nlohmann::ordered_json row;
    row["epoch"] = r.epoch;
    row["lr"] = r.lr;
    row["train_loss"] = r.train_loss;
    row["train_error"] = r.train_error;
    row["test_loss"] = r.test_loss;
    row["test_error"] = r.test_error;
    rows.push_back(std::move(row));
  }
  j["epochs"] = std::move(rows);
  j["final_test_error"] = report.final_test_error;
  j["final_test_error_std"] = report.final_test_error_std;
  return j.dump(2) + "\n";
}

void save_metrics_report(const std::string& path, const MetricsReport& report) {
  write_text_file(path, format_metrics_report(report));
}

namespace {

Tensor gather_images(const LabeledImageSet& set, const std::vector<int64_t>& order,
                     int64_t begin, int64_t end) {
  const int64_t chw = 3 * set.height() * set.width();
  Tensor batch({end - begin, 3, set.height(), set.width()});
  for (int64_t i = begin; i < end; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    for (int64_t k = 0; k < chw; ++k) batch[(i - begin) * chw + k] = set.images[src * chw + k];
  }
  return batch;
}

std::vector<int> gather_labels(const LabeledImageSet& set, const std::vector<int64_t>& order,
                               int64_t begin, int64_t end) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(end - begin));
  for (int64_t i = begin; i < end; ++i)
    out.push_back(set.labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
  return out;
}

int argmax_row(const Tensor& probs, int64_t row) {
  int best = 0;
  for (int64_t j = 1; j < probs.dim(1); ++j)
    if (probs.at(row, j) > probs.at(row, best)) best = static_cast<int>(j);
  return best;
}

}  // namespace

MetricsReport train(Network& net, const LabeledImageSet& train_set,
                    const LabeledImageSet& test_set, const TrainConfig& cfg,
                    const std::string& checkpoint_dir) {
  validate_train_config(cfg);
  if (train_set.size() == 0 || test_set.size() == 0)
    throw ConfigError("train/test sets must be nonempty");
  for (int label : train_set.labels)
    if (label >= net.spec.classes)
      throw ConfigError("train label " + std::to_string(label) + " >= " +
                        std::to_string(net.spec.classes) + " classes");
  for (int label : test_set.labels)
    if (label >= net.spec.classes)
      throw ConfigError("test label " + std::to_string(label) + " >= " +
                        std::to_string(net.spec.classes) + " classes");

  MetricsReport report;
  report.run_id = net.spec.name + "-seed" + std::to_string(cfg.seed);
  report.config_hash = train_config_hash(cfg);

  // Velocity buffers keyed by registration order.
  std::vector<Tensor> velocity;
  for (const Param& p : net.params)
    velocity.push_back(p.trainable ? Tensor::zeros(p.value.shape()) : Tensor());

  const int64_t n = train_set.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng shuffle_rng(mix_seed(cfg.seed, 0x5Fu));
  const uint64_t aug_root = mix_seed(cfg.seed, 0xA6u);

  int64_t global_iter = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_epoch = lr_at(cfg, epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int64_t wrong = 0;
    for (int64_t begin = 0; begin < n; begin += cfg.batch_size) {
      const int64_t end = std::min(n, begin + cfg.batch_size);
      Tensor batch = gather_images(train_set, order, begin, end);
      if (cfg.augment_flip || cfg.augment_crop_pad > 0) {
        const uint64_t aug_seed =
            mix_seed(aug_root, static_cast<uint64_t>(epoch) * 1000003u +
                                   static_cast<uint64_t>(begin / cfg.batch_size));
        batch = augment(batch, cfg.augment_flip, cfg.augment_crop_pad, aug_seed);
      }
      const std::vector<int> labels = gather_labels(train_set, order, begin, end);

      try {
        ForwardOptions opts;
        opts.training = true;
        opts.params_require_grad = true;
        ForwardResult fr = net.forward(batch, opts);
        Var loss = fr.tape->cross_entropy(fr.probs, labels);
        const double loss_value = fr.tape->val(loss).item();
        if (!std::isfinite(loss_value))
          throw NumericError("loss " + std::to_string(loss_value));
        loss_sum += loss_value * static_cast<double>(end - begin);
        const Tensor& probs = fr.tape->val(fr.probs);
        for (int64_t r = 0; r < end - begin; ++r)
          wrong += argmax_row(probs, r) != labels[static_cast<size_t>(r)];

        fr.tape->backward(loss);
        const double lr_eff =
            cfg.iter_decay == 0.0
                ? lr_epoch
                : lr_epoch * std::pow(1.0 - cfg.iter_decay, static_cast<double>(global_iter));
        for (const auto& [name, v] : fr.param_vars) {
          Param& p = net.param(name);
          const int64_t slot = &p - net.params.data();
          if (fr.tape->has_grad(v)) {
            sgd_step(p.value, fr.tape->grad(v), velocity[static_cast<size_t>(slot)], lr_eff,
                     cfg.momentum, cfg.weight_decay);
          }
        }
        ++global_iter;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (lr " +
                           fmt_double(lr_epoch) + "): " + e.what());
      }
    }

    auto [test_loss, test_error] = evaluate_metrics(net, test_set, cfg.batch_size);
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr_epoch;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.train_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
    row.test_loss = test_loss;
    row.test_error = test_error;
    report.epochs.push_back(row);

    if (cfg.checkpoint_every > 0 && !checkpoint_dir.empty() &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      char sub[32];
      std::snprintf(sub, sizeof(sub), "epoch_%04lld", static_cast<long long>(epoch));
      save_checkpoint((std::filesystem::path(checkpoint_dir) / sub).string(), net);
    }
  }
  report.final_test_error = report.epochs.empty()
                                ? evaluate_metrics(net, test_set).second
                                : report.epochs.back().test_error;
  report.final_test_error_std = 0.0;
  return report;
}

std::pair<double, double> evaluate_metrics(Network& net, const LabeledImageSet& set,
                                           int64_t batch_size) {
  if (set.size() == 0) throw ConfigError("evaluate needs a nonempty set");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const int64_t n = set.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  double loss_sum = 0.0;
  int64_t wrong = 0;
  for (int64_t begin = 0; begin < n; begin += batch_size) {
    const int64_t end = std::min(n, begin + batch_size);
    Tensor batch = gather_images(set, order, begin, end);
    const std::vector<int> labels = gather_labels(set, order, begin, end);
    ForwardResult fr = net.forward(batch);
    Var loss = fr.tape->cross_entropy(fr.probs, labels);
    loss_sum += fr.tape->val(loss).item() * static_cast<double>(end - begin);
    const Tensor& probs = fr.tape->val(fr.probs);
    for (int64_t r = 0; r < end - begin; ++r)
      wrong += argmax_row(probs, r) != labels[static_cast<size_t>(r)];
  }
  return {loss_sum / static_cast<double>(n),
          100.0 * static_cast<double>(wrong) / static_cast<double>(n)};
}

double evaluate(Network& net, const LabeledImageSet& set, int64_t batch_size) {
  return evaluate_metrics(net, set, batch_size).second;
}

Tensor extract_features(Network& net, const LabeledImageSet& set, int64_t batch_size) {
  if (set.size() == 0) throw ConfigError("extract_features needs a nonempty set");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const int64_t n = set.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  Tensor out;
  for (int64_t begin = 0; begin < n; begin += batch_size) {
    const int64_t end = std::min(n, begin + batch_size);
    Tensor batch = gather_images(set, order, begin, end);
    ForwardResult fr = net.forward(batch);
    const Tensor& feats = fr.tape->val(fr.features);
    if (out.empty()) out = Tensor({n, feats.dim(1)});
    for (int64_t r = 0; r < end - begin; ++r)
      for (int64_t j = 0; j < feats.dim(1); ++j) out.at(begin + r, j) = feats.at(r, j);
  }
  return out;
}

// --- Max-margin linear transfer -------------------------------------------

namespace {

void check_hinge_inputs(const Tensor& x, const std::vector<int>& y_pm, double C) {
  if (x.rank() != 2) throw ShapeError("hinge features must be [N,D]");
  if (static_cast<int64_t>(y_pm.size()) != x.dim(0))
    throw ShapeError("hinge label count must match the row count");
  for (int y : y_pm)
    if (y != 1 && y != -1) throw ConfigError("hinge labels must be +-1");
  if (C <= 0.0) throw ConfigError("C must be positive");
}

int64_t default_iters(int64_t n, int64_t iters) {
  if (iters > 0) return iters;
  return std::clamp<int64_t>(6000000 / std::max<int64_t>(n, 1), 2000, 300000);
}

MatRM augmented(const Tensor& x) {
  const int64_t n = x.dim(0), d = x.dim(1);
  MatRM xa(n, d + 1);
  xa.leftCols(d) = Eigen::Map<const MatRM>(x.data(), n, d);
  xa.col(d).setOnes();
  return xa;
}

}  // namespace

double hinge_objective(const Tensor& x, const std::vector<int>& y_pm, const Tensor& w,
                       double C) {
  check_hinge_inputs(x, y_pm, C);
  const int64_t n = x.dim(0), d = x.dim(1);
  if (w.rank() != 1 || w.dim(0) != d + 1)
    throw ShapeError("hinge weights must be [D+1] including the bias slot");
  MatRM xa = augmented(x);
  Eigen::Map<const Eigen::VectorXd> wv(w.data(), d + 1);
  Eigen::VectorXd margins = xa * wv;
  double hinge = 0.0;
  for (int64_t i = 0; i < n; ++i)
    hinge += std::max(0.0, 1.0 - static_cast<double>(y_pm[static_cast<size_t>(i)]) * margins[i]);
  return wv.squaredNorm() / (2.0 * C * static_cast<double>(n)) + hinge / static_cast<double>(n);
}

Tensor train_hinge_binary(const Tensor& x, const std::vector<int>& y_pm, double C,
                          int64_t iters) {
  check_hinge_inputs(x, y_pm, C);
  const int64_t n = x.dim(0), d = x.dim(1);
  const int64_t T = default_iters(n, iters);
  const double lambda = 1.0 / (C * static_cast<double>(n));

  MatRM xa = augmented(x);
  Eigen::VectorXd y(n);
  for (int64_t i = 0; i < n; ++i) y[i] = static_cast<double>(y_pm[static_cast<size_t>(i)]);

  // Full-batch subgradient descent with t-weighted averaging: O(1/T)
  // suboptimality on this lambda-strongly-convex objective.
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd wavg = Eigen::VectorXd::Zero(d + 1);
  double weight_sum = 0.0;
  Eigen::VectorXd coeff(n);
  for (int64_t t = 0; t < T; ++t) {
    Eigen::VectorXd margins = xa * w;
    for (int64_t i = 0; i < n; ++i) coeff[i] = y[i] * margins[i] < 1.0 ? y[i] : 0.0;
    Eigen::VectorXd grad = lambda * w - (xa.transpose() * coeff) / static_cast<double>(n);
    const double eta = 2.0 / (lambda * static_cast<double>(t + 2));
    w -= eta * grad;
    const double rho = static_cast<double>(t + 1);
    wavg += rho * w;
    weight_sum += rho;
  }
  wavg /= weight_sum;

  Tensor out({d + 1});
  for (int64_t i = 0; i <= d; ++i) out[i] = wavg[i];
  return out;
}

Tensor train_hinge_ovr(const Tensor& x, const std::vector<int>& labels, int classes,
                       double C, int64_t iters) {
  if (x.rank() != 2) throw ShapeError("hinge features must be [N,D]");
  if (classes < 2) throw ConfigError("one-vs-rest needs >= 2 classes");
  for (int label : labels)
    if (label < 0 || label >= classes)
      throw ConfigError("label " + std::to_string(label) + " outside 0.." +
                        std::to_string(classes - 1));
  const int64_t d = x.dim(1);
  Tensor w({d + 1, static_cast<int64_t>(classes)});
  std::vector<int> y_pm(labels.size());
  for (int k = 0; k < classes; ++k) {
    for (size_t i = 0; i < labels.size(); ++i) y_pm[i] = labels[i] == k ? 1 : -1;
    Tensor wk = train_hinge_binary(x, y_pm, C, iters);
    for (int64_t j = 0; j <= d; ++j) w.at(j, k) = wk[j];
  }
  return w;
}

std::vector<int> hinge_predict(const Tensor& x, const Tensor& w_ovr) {
  if (x.rank() != 2 || w_ovr.rank() != 2 || w_ovr.dim(0) != x.dim(1) + 1)
    throw ShapeError("hinge_predict: features [N,D] need weights [D+1,T]");
  const int64_t n = x.dim(0), d = x.dim(1), classes = w_ovr.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    double best_score = -1e300;
    for (int64_t k = 0; k < classes; ++k) {
      double s = w_ovr.at(d, k);
      for (int64_t j = 0; j < d; ++j) s += x.at(i, j) * w_ovr.at(j, k);
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

std::vector<std::vector<int64_t>> stratified_folds(const std::vector<int>& labels, int folds,
                                                   uint64_t seed) {
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (static_cast<int64_t>(labels.size()) < folds)
    throw ConfigError("need at least as many points as folds");
  int max_label = 0;
  for (int label : labels) {
    if (label < 0) throw ConfigError("negative class id");
    max_label = std::max(max_label, label);
  }
  std::vector<std::vector<int64_t>> per_class(static_cast<size_t>(max_label + 1));
  for (size_t i = 0; i < labels.size(); ++i)
    per_class[static_cast<size_t>(labels[i])].push_back(static_cast<int64_t>(i));
  for (size_t k = 0; k < per_class.size(); ++k)
    if (!per_class[k].empty() && per_class[k].size() < 2)
      throw ConfigError("class " + std::to_string(k) +
                        " has a single instance; every training split would lose it and no "
                        "stratified retry can help");

  std::vector<std::vector<int64_t>> out(static_cast<size_t>(folds));
  for (size_t k = 0; k < per_class.size(); ++k) {
    auto& idx = per_class[k];
    if (idx.empty()) continue;
    Rng rng(mix_seed(seed, 0xF01D + static_cast<uint64_t>(k)));
    rng.shuffle(idx);
    for (size_t j = 0; j < idx.size(); ++j)
      out[j % static_cast<size_t>(folds)].push_back(idx[j]);
  }
  for (auto& fold : out) std::sort(fold.begin(), fold.end());
  return out;
}

TransferResult linear_transfer(const Tensor& features, const std::vector<int>& labels,
                               int folds, double C, uint64_t seed, int64_t iters) {
  if (features.rank() != 2) throw ShapeError("features must be [N,D]");
  if (static_cast<int64_t>(labels.size()) != features.dim(0))
    throw ShapeError("label count must match feature rows");
  int classes = 0;
  for (int label : labels) classes = std::max(classes, label + 1);
  if (classes < 2) throw ConfigError("transfer needs >= 2 classes");

  const auto fold_idx = stratified_folds(labels, folds, seed);
  const int64_t n = features.dim(0), d = features.dim(1);

  TransferResult result;
  for (int f = 0; f < folds; ++f) {
    std::vector<char> in_test(static_cast<size_t>(n), 0);
    for (int64_t i : fold_idx[static_cast<size_t>(f)]) in_test[static_cast<size_t>(i)] = 1;
    std::vector<int64_t> train_rows, test_rows;
    for (int64_t i = 0; i < n; ++i)
      (in_test[static_cast<size_t>(i)] ? test_rows : train_rows).push_back(i);
    if (test_rows.empty()) throw ConfigError("fold " + std::to_string(f) + " is empty");

    auto gather = [&](const std::vector<int64_t>& rows, Tensor& xs, std::vector<int>& ys) {
      xs = Tensor({static_cast<int64_t>(rows.size()), d});
      ys.clear();
      for (size_t r = 0; r < rows.size(); ++r) {
        for (int64_t j = 0; j < d; ++j) xs.at(static_cast<int64_t>(r), j) = features.at(rows[r], j);
        ys.push_back(labels[static_cast<size_t>(rows[r])]);
      }
    };
    Tensor xtr, xte;
    std::vector<int> ytr, yte;
    gather(train_rows, xtr, ytr);
    gather(test_rows, xte, yte);

    Tensor w = train_hinge_ovr(xtr, ytr, classes, C, iters);
    const std::vector<int> pred = hinge_predict(xte, w);
    int64_t correct = 0;
    for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == yte[i];
    result.fold_accuracies.push_back(100.0 * static_cast<double>(correct) /
                                     static_cast<double>(pred.size()));
  }

  double mean = 0.0;
  for (double a : result.fold_accuracies) mean += a;
  mean /= static_cast<double>(result.fold_accuracies.size());
  double var = 0.0;
  for (double a : result.fold_accuracies) var += (a - mean) * (a - mean);
  var /= static_cast<double>(result.fold_accuracies.size());
  result.mean_accuracy = mean;
  result.std_accuracy = std::sqrt(var);
  return result;
}

}  // namespace attnet
