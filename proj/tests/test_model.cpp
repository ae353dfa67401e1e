#include <cstring>
#include <filesystem>
#include <fstream>

#include "attnet/attention.hpp"
#include "attnet/model.hpp"
#include "attnet/rng.hpp"
#include "doctest.h"

using namespace attnet;
namespace fs = std::filesystem;

namespace {

Tensor random_batch(int64_t n, int64_t c, int64_t h, int64_t w, uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, c, h, w});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
  return x;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

fs::path fresh_dir(const std::string& stem) {
  fs::path dir = fs::temp_directory_path() / ("attnet_model_" + stem);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int64_t census_total(const Network& net) {
  int64_t total = 0;
  for (const CensusRow& r : net.param_census()) total += r.count;
  return total;
}

}  // namespace

TEST_CASE("spec text round-trips through parse and format") {
  NetworkSpec s = vgg_mini_spec(2, CompatibilityKind::Parameterised, HeadMode::Concat, 10, 32);
  const std::string text = format_network_spec(s);
  NetworkSpec s2 = parse_network_spec(text);
  CHECK(format_network_spec(s2) == text);
  CHECK(s2.name == "vgg-mini-att2-pc-concat");
  CHECK(s2.layers.size() == s.layers.size());
  CHECK(s2.taps == s.taps);
  CHECK(s2.attention.size() == 2);
  CHECK(s2.head_mode == HeadMode::Concat);

  SUBCASE("comments and blank lines are skipped") {
    NetworkSpec s3 = parse_network_spec("# leading comment\n\nattnet-spec v1\n" +
                                        text.substr(text.find('\n') + 1) + "\n# trailing\n");
    CHECK(format_network_spec(s3) == text);
  }
}

TEST_CASE("spec parser rejects malformed input") {
  CHECK_THROWS_AS(parse_network_spec(""), ConfigError);
  CHECK_THROWS_AS(parse_network_spec("attnet-spec v2\n"), ConfigError);
  CHECK_THROWS_AS(parse_network_spec("attnet-spec v1\nbogus-key 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_network_spec("attnet-spec v1\nlayer c conv out=x\n"), ConfigError);
  CHECK_THROWS_AS(parse_network_spec("attnet-spec v1\nhead_mode sideways\n"), ConfigError);
  CHECK_THROWS_AS(parse_network_spec("attnet-spec v1\nattention kind=dp\n"), ConfigError);
}

TEST_CASE("validate_spec rejects structural violations") {
  NetworkSpec good = vgg_mini_spec(1, CompatibilityKind::DotProduct, HeadMode::Concat, 10, 32);
  CHECK_NOTHROW(validate_spec(good));

  SUBCASE("duplicate layer names") {
    NetworkSpec s = good;
    s.layers[1].name = s.layers[0].name;
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("global_source must exist") {
    NetworkSpec s = good;
    s.global_source = "nope";
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("global_source must be flat") {
    NetworkSpec s = good;
    s.global_source = "b4r2";
    s.taps.clear();
    s.attention.clear();
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("tap must be a declared layer") {
    NetworkSpec s = good;
    s.taps = {"ghost"};
    s.attention.clear();
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("tap must precede the global source") {
    NetworkSpec s = good;
    s.taps = {"g_relu"};
    s.attention.clear();
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("tap must be spatial") {
    NetworkSpec s = good;
    s.taps = {"fc_g"};
    s.attention.clear();
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("attention heads must reference declared taps") {
    NetworkSpec s = good;
    s.attention.push_back({"b1r2", CompatibilityKind::DotProduct});
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("unknown layer kind") {
    NetworkSpec s = good;
    s.layers[0].kind = "whirl";
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("linear on spatial input") {
    NetworkSpec s = good;
    s.layers.insert(s.layers.begin() + 1, {"early_fc", "linear", {{"out", 8}}});
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
  SUBCASE("pool window larger than the map") {
    NetworkSpec s;
    s.name = "tiny";
    s.in_c = 1;
    s.in_h = s.in_w = 2;
    s.classes = 2;
    s.layers = {{"p", "maxpool", {{"k", 4}}},
                {"f", "flatten", {}},
                {"fc", "linear", {{"out", 2}}}};
    s.global_source = "fc";
    CHECK_THROWS_AS(validate_spec(s), ConfigError);
  }
}

TEST_CASE("preset ids build the matching architectures") {
  CHECK(is_preset_id("vgg-mini"));
  CHECK(is_preset_id("vgg-mini-att2-pc-concat"));
  CHECK(is_preset_id("vgg-mini-att3-dp-indep"));
  CHECK(is_preset_id("rn-mini"));
  CHECK(is_preset_id("rn-mini-att2-dp-indep"));
  CHECK_FALSE(is_preset_id("vgg-mini-att4-dp-concat"));
  CHECK_FALSE(is_preset_id("rn-mini-att3-dp-concat"));
  CHECK_FALSE(is_preset_id("resnet50"));
  CHECK_THROWS_AS(preset_spec("alexnet", 10, 32), ConfigError);

  NetworkSpec s = preset_spec("vgg-mini-att2-pc-concat", 10, 32);
  CHECK(s.name == "vgg-mini-att2-pc-concat");
  CHECK(s.taps == std::vector<std::string>{"b3r2", "b4r2"});
  CHECK(s.attention[0].kind == CompatibilityKind::Parameterised);

  NetworkSpec r = preset_spec("rn-mini-att2-dp-indep", 7, 48);
  CHECK(r.classes == 7);
  CHECK(r.in_h == 48);
  CHECK(r.head_mode == HeadMode::Indep);
  CHECK(r.taps == std::vector<std::string>{"l2b2", "l3b2"});
}

TEST_CASE("baseline forward produces a probability row per image") {
  Network net = Network::build(vgg_mini_spec(0, CompatibilityKind::DotProduct,
                                             HeadMode::Concat, 10, 32),
                               7);
  Tensor x = random_batch(3, 3, 32, 32, 11);
  auto [probs, maps] = net.predict(x);
  CHECK(probs.shape() == std::vector<int64_t>{3, 10});
  CHECK(maps.empty());
  for (int64_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < 10; ++j) {
      CHECK(probs.at(i, j) > 0.0);
      sum += probs.at(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("att2 maps sit on the block-3 and block-4 grids") {
  Network net = Network::build(vgg_mini_spec(2, CompatibilityKind::Parameterised,
                                             HeadMode::Concat, 10, 32),
                               7);
  Tensor x = random_batch(2, 3, 32, 32, 12);
  ForwardResult fr = net.forward(x);
  REQUIRE(fr.maps.size() == 2);
  CHECK(fr.map_hw[0] == std::pair<int64_t, int64_t>{8, 8});
  CHECK(fr.map_hw[1] == std::pair<int64_t, int64_t>{4, 4});

  auto [probs, maps] = net.predict(x);
  REQUIRE(maps.size() == 2);
  CHECK(maps[0].shape() == std::vector<int64_t>{2, 8, 8});
  CHECK(maps[1].shape() == std::vector<int64_t>{2, 4, 4});
  for (const Tensor& m : maps) {
    for (int64_t n = 0; n < 2; ++n) {
      double sum = 0.0;
      for (int64_t i = 0; i < m.dim(1) * m.dim(2); ++i) sum += m[n * m.dim(1) * m.dim(2) + i];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("per-image map sets satisfy the map invariants") {
    AttentionMapSet set = net.map_set_for(fr, 1, "img1");
    CHECK(set.layer_ids.size() == 2);
    CHECK(set.maps[0].shape() == std::vector<int64_t>{8, 8});
    CHECK_NOTHROW(validate_map_set(set));
    CHECK_THROWS_AS(net.map_set_for(fr, 5, "img5"), ShapeError);
  }
}

TEST_CASE("same seed builds bitwise-identical networks") {
  NetworkSpec spec = vgg_mini_spec(2, CompatibilityKind::Parameterised, HeadMode::Concat, 10, 32);
  Network a = Network::build(spec, 99);
  Network b = Network::build(spec, 99);
  Network c = Network::build(spec, 100);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].name == b.params[i].name);
    CHECK(bitwise_equal(a.params[i].value, b.params[i].value));
  }
  bool any_diff = false;
  for (size_t i = 0; i < a.params.size(); ++i)
    if (a.params[i].trainable && !bitwise_equal(a.params[i].value, c.params[i].value))
      any_diff = true;
  CHECK(any_diff);

  Tensor x = random_batch(2, 3, 32, 32, 5);
  auto [pa, ma] = a.predict(x);
  auto [pb, mb] = b.predict(x);
  CHECK(bitwise_equal(pa, pb));
}

TEST_CASE("census deltas match the attention bookkeeping") {
  const int64_t classes = 10;
  Network base = Network::build(
      vgg_mini_spec(0, CompatibilityKind::DotProduct, HeadMode::Concat, classes, 32), 1);
  Network att_dp = Network::build(
      vgg_mini_spec(1, CompatibilityKind::DotProduct, HeadMode::Concat, classes, 32), 1);
  Network att_pc = Network::build(
      vgg_mini_spec(1, CompatibilityKind::Parameterised, HeadMode::Concat, classes, 32), 1);
  Network att2_pc = Network::build(
      vgg_mini_spec(2, CompatibilityKind::Parameterised, HeadMode::Concat, classes, 32), 1);

  // Block 4 taps share the 128-wide global descriptor, so a dot-product head
  // adds no parameters and a parameterised one adds exactly dim(u) = 128.
  CHECK(census_total(att_dp) == census_total(base));
  CHECK(census_total(att_pc) - census_total(base) == 128);
  // Two concat heads double the classifier input from 128 to 256
  // (+128*classes weights) and carry two u vectors.
  CHECK(census_total(att2_pc) - census_total(base) == 128 * classes + 2 * 128);

  // att3 reaches block 2 (64 channels), which needs a 128->64 projection.
  Network att3_dp = Network::build(
      vgg_mini_spec(3, CompatibilityKind::DotProduct, HeadMode::Concat, classes, 32), 1);
  bool has_proj = false;
  for (const CensusRow& r : att3_dp.param_census())
    if (r.name == "att.b2r2.proj.w") {
      has_proj = true;
      CHECK(r.shape == std::vector<int64_t>{128, 64});
    }
  CHECK(has_proj);

  for (const CensusRow& r : base.param_census()) CHECK(r.name.find("att.") == std::string::npos);
}

TEST_CASE("declared-but-unattended taps do not change the network") {
  NetworkSpec plain = vgg_mini_spec(0, CompatibilityKind::DotProduct, HeadMode::Concat, 10, 32);
  NetworkSpec tapped = plain;
  tapped.taps = {"b3r2", "b4r2"};
  Network a = Network::build(plain, 3);
  Network b = Network::build(tapped, 3);
  CHECK(census_total(a) == census_total(b));
  Tensor x = random_batch(2, 3, 32, 32, 8);
  auto [pa, ma] = a.predict(x);
  auto [pb, mb] = b.predict(x);
  CHECK(bitwise_equal(pa, pb));
  CHECK(mb.empty());
}

TEST_CASE("indep head mode averages per-head probabilities") {
  Network net = Network::build(vgg_mini_spec(2, CompatibilityKind::DotProduct,
                                             HeadMode::Indep, 6, 32),
                               21);
  CHECK_NOTHROW(net.param("cls.b3r2.w"));
  CHECK_NOTHROW(net.param("cls.b4r2.w"));
  CHECK_THROWS_AS(net.param("cls.w"), ConfigError);

  Tensor x = random_batch(2, 3, 32, 32, 4);
  auto [probs, maps] = net.predict(x);
  for (int64_t i = 0; i < 2; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < 6; ++j) sum += probs.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("rn-mini builds, trains batch statistics, and evaluates deterministically") {
  Network net = Network::build(rn_mini_spec(2, CompatibilityKind::DotProduct,
                                            HeadMode::Concat, 10, 32),
                               5);
  // Running stats start at the identity transform.
  CHECK(net.param("stembn.run_mean").value[0] == 0.0);
  CHECK(net.param("stembn.run_var").value[0] == 1.0);
  CHECK_FALSE(net.param("stembn.run_mean").trainable);

  Tensor x = random_batch(2, 3, 32, 32, 9);
  ForwardOptions train_opts;
  train_opts.training = true;
  (void)net.forward(x, train_opts);
  // One training pass moves the running statistics.
  bool moved = false;
  for (int64_t c = 0; c < 32; ++c)
    if (net.param("stembn.run_mean").value[c] != 0.0) moved = true;
  CHECK(moved);

  auto [p1, m1] = net.predict(x);
  auto [p2, m2] = net.predict(x);
  CHECK(bitwise_equal(p1, p2));  // eval mode leaves the buffers alone
  REQUIRE(m1.size() == 2);
  CHECK(m1[0].shape() == std::vector<int64_t>{2, 16, 16});
  CHECK(m1[1].shape() == std::vector<int64_t>{2, 8, 8});

  SUBCASE("level-2 head projects the global descriptor down to 64") {
    CHECK(net.param("att.l2b2.proj.w").value.shape() == std::vector<int64_t>{128, 64});
    CHECK_THROWS_AS(net.param("att.l3b2.proj.w"), ConfigError);
  }
}

TEST_CASE("forward validates batch shape") {
  Network net = Network::build(vgg_mini_spec(0, CompatibilityKind::DotProduct,
                                             HeadMode::Concat, 10, 32),
                               1);
  CHECK_THROWS_AS(net.forward(Tensor({3, 32, 32})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor({1, 4, 32, 32})), ShapeError);
}

TEST_CASE("non-native input resolutions are pooled back to the native grid") {
  Network net = Network::build(vgg_mini_spec(2, CompatibilityKind::DotProduct,
                                             HeadMode::Concat, 10, 32),
                               13);
  Tensor x = random_batch(2, 3, 48, 48, 3);
  ForwardResult fr = net.forward(x);
  CHECK(fr.tape->val(fr.probs).shape() == std::vector<int64_t>{2, 10});
  // Taps ride the enlarged grids while the descriptor keeps its width.
  CHECK(fr.map_hw[0] == std::pair<int64_t, int64_t>{12, 12});
  CHECK(fr.map_hw[1] == std::pair<int64_t, int64_t>{6, 6});
  CHECK(fr.tape->val(fr.g).dim(1) == net.global_dim());

  Tensor tiny = random_batch(1, 3, 20, 20, 3);
  CHECK_THROWS_AS(net.forward(tiny), ShapeError);
}

TEST_CASE("query override replaces the attention query") {
  Network net = Network::build(vgg_mini_spec(1, CompatibilityKind::DotProduct,
                                             HeadMode::Concat, 10, 32),
                               17);
  Tensor x = random_batch(1, 3, 32, 32, 6);
  ForwardResult base = net.forward(x);
  Tensor g = net.forward(x).tape->val(base.g);

  ForwardOptions opts;
  Tensor zero_g = Tensor::zeros({1, net.global_dim()});
  opts.g_override = &zero_g;
  ForwardResult swapped = net.forward(x, opts);
  // A zero query scores every position equally: the map turns uniform.
  const Tensor& m = swapped.tape->val(swapped.maps[0]);
  for (int64_t i = 0; i < m.numel(); ++i)
    CHECK(m[i] == doctest::Approx(1.0 / 16.0).epsilon(1e-12));

  ForwardOptions same;
  same.g_override = &g;
  ForwardResult self = net.forward(x, same);
  CHECK(bitwise_equal(net.forward(x).tape->val(base.maps[0]),
                      self.tape->val(self.maps[0])));

  Tensor bad = Tensor::zeros({2, net.global_dim()});
  ForwardOptions bad_opts;
  bad_opts.g_override = &bad;
  CHECK_THROWS_AS(net.forward(x, bad_opts), ShapeError);
}

TEST_CASE("input normalization folds into the forward graph") {
  Network net = Network::build(vgg_mini_spec(0, CompatibilityKind::DotProduct,
                                             HeadMode::Concat, 10, 32),
                               23);
  Tensor x = random_batch(2, 3, 32, 32, 31);
  std::vector<double> scale = {2.0, 4.0, 0.5};
  std::vector<double> shift = {-1.0, -2.0, -0.25};

  Network plain = Network::build(vgg_mini_spec(0, CompatibilityKind::DotProduct,
                                               HeadMode::Concat, 10, 32),
                                 23);
  net.set_input_normalization(scale, shift);

  Tensor xn = x;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 32 * 32; ++i) {
        int64_t idx = (n * 3 + c) * 32 * 32 + i;
        xn[idx] = scale[static_cast<size_t>(c)] * x[idx] + shift[static_cast<size_t>(c)];
      }
  auto [p_folded, m1] = net.predict(x);
  auto [p_manual, m2] = plain.predict(xn);
  CHECK(bitwise_equal(p_folded, p_manual));

  CHECK_THROWS_AS(net.set_input_normalization({1.0}, {0.0}), ShapeError);
}

TEST_CASE("trainable parameters surface on the tape with gradients") {
  Network net = Network::build(vgg_mini_spec(1, CompatibilityKind::Parameterised,
                                             HeadMode::Concat, 4, 32),
                               29);
  Tensor x = random_batch(2, 3, 32, 32, 41);
  ForwardOptions opts;
  opts.params_require_grad = true;
  ForwardResult fr = net.forward(x, opts);
  Var loss = fr.tape->cross_entropy(fr.probs, {1, 3});
  fr.tape->backward(loss);

  size_t trainable = 0;
  for (const Param& p : net.params)
    if (p.trainable) ++trainable;
  CHECK(fr.param_vars.size() == trainable);
  bool u_seen = false;
  for (const auto& [name, v] : fr.param_vars) {
    CHECK(fr.tape->has_grad(v));
    CHECK(fr.tape->grad(v).same_shape(net.param(name).value));
    if (name == "att.b4r2.u") u_seen = true;
  }
  CHECK(u_seen);
}

TEST_CASE("checkpoints round-trip bitwise") {
  fs::path dir = fresh_dir("ckpt");
  Network net = Network::build(rn_mini_spec(2, CompatibilityKind::Parameterised,
                                            HeadMode::Indep, 10, 32),
                               77);
  // Mutate a few things so the checkpoint is not just the fresh init.
  Tensor x = random_batch(4, 3, 32, 32, 55);
  ForwardOptions train_opts;
  train_opts.training = true;
  (void)net.forward(x, train_opts);
  net.set_input_normalization({2.0, 2.0, 2.0}, {-1.0, -1.0, -1.0});

  save_checkpoint(dir.string(), net);
  Network back = load_checkpoint(dir.string());

  REQUIRE(back.params.size() == net.params.size());
  for (size_t i = 0; i < net.params.size(); ++i) {
    CHECK(back.params[i].name == net.params[i].name);
    CHECK(back.params[i].trainable == net.params[i].trainable);
    CHECK(bitwise_equal(back.params[i].value, net.params[i].value));
  }
  auto [p1, m1] = net.predict(x);
  auto [p2, m2] = back.predict(x);
  CHECK(bitwise_equal(p1, p2));
  for (size_t h = 0; h < m1.size(); ++h) CHECK(bitwise_equal(m1[h], m2[h]));

  SUBCASE("census total equals the stored payload") {
    int64_t payload_values = 0;
    for (const auto& e : fs::directory_iterator(dir / "params")) {
      Tensor t = load_tensor(e.path().string());
      // File = 12-byte header + 8 bytes per extent + 8 bytes per value.
      CHECK(static_cast<int64_t>(fs::file_size(e.path())) ==
            12 + 8 * t.rank() + 8 * t.numel());
      payload_values += t.numel();
    }
    CHECK(payload_values == census_total(net));
    CHECK(payload_values == net.param_total());
  }

  SUBCASE("tampered spec hash is rejected") {
    std::ofstream(dir / "spec.attnetspec", std::ios::app) << "# tampered\n";
    CHECK_THROWS_AS(load_checkpoint(dir.string()), IoError);
  }
  SUBCASE("missing directory is rejected") {
    CHECK_THROWS_AS(load_checkpoint((dir / "missing").string()), IoError);
  }
}

TEST_CASE("spec files save and load through the filesystem") {
  fs::path dir = fresh_dir("specio");
  NetworkSpec s = rn_mini_spec(0, CompatibilityKind::DotProduct, HeadMode::Concat, 10, 32, true);
  const fs::path file = dir / "net.attnetspec";
  save_network_spec(file.string(), s);
  NetworkSpec s2 = load_network_spec(file.string());
  CHECK(format_network_spec(s2) == format_network_spec(s));
  CHECK_THROWS_AS(load_network_spec((dir / "absent.attnetspec").string()), IoError);
}
