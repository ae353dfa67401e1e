// Python surface of the attnet core. NumPy float64 arrays cross the boundary
// by copy; all heavy state (networks, tapes) stays on the C++ side.

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "attnet/adversarial.hpp"
#include "attnet/data.hpp"
#include "attnet/errors.hpp"
#include "attnet/maps.hpp"
#include "attnet/model.hpp"
#include "attnet/tensor.hpp"
#include "attnet/train.hpp"

namespace py = pybind11;
using namespace attnet;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& arr) {
  std::vector<int64_t> shape(static_cast<size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    shape[static_cast<size_t>(i)] = arr.shape(i);
  Tensor t(std::move(shape));
  std::memcpy(t.data(), arr.data(), sizeof(double) * static_cast<size_t>(t.numel()));
  return t;
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> arr(t.shape());
  std::memcpy(arr.mutable_data(), t.data(), sizeof(double) * static_cast<size_t>(t.numel()));
  return arr;
}

Box to_box(const std::vector<int64_t>& b) {
  if (b.size() != 4) throw ConfigError("box must be (x, y, w, h)");
  return Box{b[0], b[1], b[2], b[3]};
}

py::dict set_to_dict(const LabeledImageSet& set) {
  py::dict d;
  d["images"] = to_array(set.images);
  d["labels"] = set.labels;
  py::array_t<int64_t> boxes({set.boxes.size(), size_t{4}});
  auto bx = boxes.mutable_unchecked<2>();
  for (size_t i = 0; i < set.boxes.size(); ++i) {
    bx(i, 0) = set.boxes[i].x;
    bx(i, 1) = set.boxes[i].y;
    bx(i, 2) = set.boxes[i].w;
    bx(i, 3) = set.boxes[i].h;
  }
  d["boxes"] = boxes;
  py::list masks;
  for (const Tensor& m : set.masks) masks.append(to_array(m));
  d["masks"] = masks;
  return d;
}

LabeledImageSet make_set(const DoubleArray& images, const std::vector<int>& labels) {
  LabeledImageSet set;
  set.images = to_tensor(images);
  set.labels = labels;
  return set;
}

TrainConfig config_from_kwargs(int64_t epochs, int64_t batch_size, double lr0,
                               double momentum, double weight_decay, uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch_size;
  cfg.lr0 = lr0;
  cfg.momentum = momentum;
  cfg.weight_decay = weight_decay;
  cfg.seed = seed;
  return cfg;
}

py::dict report_to_dict(const MetricsReport& rep) {
  py::dict d;
  py::list rows;
  for (const EpochRow& e : rep.epochs) {
    py::dict r;
    r["epoch"] = e.epoch;
    r["lr"] = e.lr;
    r["train_loss"] = e.train_loss;
    r["train_error"] = e.train_error;
    r["test_error"] = e.test_error;
    rows.append(r);
  }
  d["epochs"] = rows;
  d["final_test_error"] = rep.final_test_error;
  return d;
}

}  // namespace

PYBIND11_MODULE(_attnet, m) {
  m.doc() = "Attention-augmented CNN experiments: f64 tensors, reverse-mode "
            "autodiff, attention heads, FGSM, and attention-map tooling.";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Network>(m, "Network")
      .def_static(
          "build",
          [](const std::string& preset, int64_t classes, int64_t input_hw, uint64_t seed) {
            return Network::build(preset_spec(preset, classes, input_hw), seed);
          },
          py::arg("preset"), py::arg("classes"), py::arg("input_hw"), py::arg("seed"),
          "Construct a preset network, e.g. 'vgg-mini-att2-pc-concat'.")
      .def(
          "predict",
          [](Network& net, const DoubleArray& batch) {
            auto [probs, maps] = net.predict(to_tensor(batch));
            py::list out_maps;
            for (const Tensor& t : maps) out_maps.append(to_array(t));
            return py::make_tuple(to_array(probs), out_maps);
          },
          py::arg("batch"),
          "Class probabilities [N,T] and per-head attention maps [N,H,W].")
      .def(
          "set_input_normalization",
          [](Network& net, const std::vector<double>& scale, const std::vector<double>& shift) {
            net.set_input_normalization(scale, shift);
          },
          py::arg("scale"), py::arg("shift"))
      .def("param_total", &Network::param_total)
      .def("census",
           [](const Network& net) {
             py::list rows;
             for (const CensusRow& r : net.param_census())
               rows.append(py::make_tuple(r.name, r.shape, r.count));
             return rows;
           })
      .def_property_readonly("attention_taps", [](const Network& net) {
        std::vector<std::string> taps;
        for (const auto& head : net.spec.attention) taps.push_back(head.tap);
        return taps;
      });

  m.def("save_checkpoint",
        [](const std::string& dir, Network& net) { save_checkpoint(dir, net); },
        py::arg("dir"), py::arg("net"));
  m.def("load_checkpoint", [](const std::string& dir) { return load_checkpoint(dir); },
        py::arg("dir"));

  m.def(
      "synth_clutter",
      [](int64_t num, int64_t classes, int64_t canvas, int64_t object_size,
         double density, uint64_t seed) {
        return set_to_dict(synth_clutter(num, classes, canvas, object_size, density, seed));
      },
      py::arg("num"), py::arg("classes"), py::arg("canvas"), py::arg("object_size"),
      py::arg("density"), py::arg("seed"),
      "Cluttered-scene dataset with labels, boxes, and ground-truth masks.");

  m.def(
      "fit_channel_stats",
      [](const DoubleArray& images) {
        std::vector<int> labels(static_cast<size_t>(images.shape(0)), 0);
        NormalizationStats stats = fit_normalization(make_set(images, labels));
        auto [scale, shift] = channel_scale_shift(stats);
        return py::make_tuple(scale, shift);
      },
      py::arg("images"),
      "Per-channel (scale, shift) folding mean/std normalization into the net.");

  m.def(
      "train",
      [](Network& net, const DoubleArray& images, const std::vector<int>& labels,
         const DoubleArray& test_images, const std::vector<int>& test_labels,
         int64_t epochs, int64_t batch_size, double lr0, double momentum,
         double weight_decay, uint64_t seed) {
        MetricsReport rep = train(net, make_set(images, labels),
                                  make_set(test_images, test_labels),
                                  config_from_kwargs(epochs, batch_size, lr0, momentum,
                                                     weight_decay, seed),
                                  "");
        return report_to_dict(rep);
      },
      py::arg("net"), py::arg("images"), py::arg("labels"), py::arg("test_images"),
      py::arg("test_labels"), py::arg("epochs") = 1, py::arg("batch_size") = 32,
      py::arg("lr0") = 0.01, py::arg("momentum") = 0.9, py::arg("weight_decay") = 5e-4,
      py::arg("seed") = 1, "SGD training; returns the per-epoch metrics report.");

  m.def(
      "evaluate",
      [](Network& net, const DoubleArray& images, const std::vector<int>& labels) {
        return evaluate(net, make_set(images, labels));
      },
      py::arg("net"), py::arg("images"), py::arg("labels"), "Top-1 error in percent.");

  m.def(
      "extract_features",
      [](Network& net, const DoubleArray& images) {
        std::vector<int> labels(static_cast<size_t>(images.shape(0)), 0);
        return to_array(extract_features(net, make_set(images, labels)));
      },
      py::arg("net"), py::arg("images"), "Frozen classifier-input features [N,D].");

  m.def(
      "linear_transfer",
      [](const DoubleArray& features, const std::vector<int>& labels, int64_t folds,
         double C, uint64_t seed, int64_t iters) {
        TransferResult r = linear_transfer(to_tensor(features), labels, folds, C, seed, iters);
        py::dict d;
        d["mean_accuracy"] = r.mean_accuracy;
        d["std_accuracy"] = r.std_accuracy;
        d["fold_accuracies"] = r.fold_accuracies;
        return d;
      },
      py::arg("features"), py::arg("labels"), py::arg("folds") = 5, py::arg("C") = 1.0,
      py::arg("seed") = 0, py::arg("iters") = 0,
      "Stratified k-fold one-vs-rest hinge transfer.");

  m.def(
      "fgsm",
      [](Network& net, const DoubleArray& images, double epsilon255) {
        return to_array(fgsm(net, to_tensor(images), epsilon255));
      },
      py::arg("net"), py::arg("images"), py::arg("epsilon255"),
      "FGSM perturbation of [0,1] images, budget in 0-255 units.");

  m.def(
      "fooling_rate",
      [](Network& net, const DoubleArray& images, double epsilon255) {
        return fooling_rate(net, to_tensor(images), epsilon255);
      },
      py::arg("net"), py::arg("images"), py::arg("epsilon255"),
      "Percent of images whose argmax flips under attack.");

  m.def(
      "segment",
      [](Network& net, const DoubleArray& image) {
        BinaryMask mask = segment(net, to_tensor(image));
        return py::make_tuple(to_array(mask.values), mask.threshold);
      },
      py::arg("net"), py::arg("image"),
      "Otsu-binarized fused attention mask for one [3,H,W] image.");

  m.def(
      "fused_map",
      [](Network& net, const DoubleArray& image) {
        return to_array(fused_map(net, to_tensor(image)).values);
      },
      py::arg("net"), py::arg("image"),
      "Min-max rescaled sqrt-product fusion of the last two attention maps.");

  m.def(
      "attention_mass_in_box",
      [](const DoubleArray& map, const std::vector<int64_t>& box, int64_t image_h,
         int64_t image_w) {
        return attention_mass_in_box(to_tensor(map), to_box(box), image_h, image_w);
      },
      py::arg("map"), py::arg("box"), py::arg("image_h"), py::arg("image_w"),
      "Fraction of attention mass inside an image-space box.");

  m.def(
      "query_swap",
      [](Network& net, const DoubleArray& target, const DoubleArray& query) {
        QuerySwapResult r = query_swap(net, to_tensor(target), to_tensor(query));
        py::dict d;
        d["layer_ids"] = r.layer_ids;
        py::list ms, mq, rc;
        for (const Tensor& t : r.map_self) ms.append(to_array(t));
        for (const Tensor& t : r.map_query) mq.append(to_array(t));
        for (const Tensor& t : r.rel_change) rc.append(to_array(t));
        d["map_self"] = ms;
        d["map_query"] = mq;
        d["rel_change"] = rc;
        return d;
      },
      py::arg("net"), py::arg("target"), py::arg("query"),
      "Attention maps of target with its own vs a swapped-in global vector.");

  m.def(
      "jaccard",
      [](const DoubleArray& a, const DoubleArray& b) {
        return jaccard(to_tensor(a), to_tensor(b));
      },
      py::arg("pred"), py::arg("truth"), "Intersection over union of {0,1} masks.");

  m.def(
      "otsu_threshold",
      [](const DoubleArray& map) { return otsu_threshold(to_tensor(map)); },
      py::arg("map"), "Otsu threshold (0..255) of a [0,1]-valued map.");
}
