#include <cmath>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "vermouth/expert.hpp"
#include "vermouth/ops.hpp"

using namespace vermouth;
using vermouth::testing::gradcheck;
using vermouth::testing::names_with_prefix;
using vermouth::testing::random_tensor;

TEST_SUITE("expert") {

TEST_CASE("default feature shapes match the bundle resolutions") {
  ExpertConfig cfg;
  ParamStore<float> params;
  Rng rng(1);
  init_expert(params, cfg, 3, 4, rng);
  Rng r2(2);
  auto img = random_tensor<float>({3, 64, 64}, r2);
  const auto f = expert_features(Var<float>(img), params, cfg, 64, 4);
  REQUIRE(f.size() == 3);
  CHECK(f[0].shape() == Shape{16, 16, 16});
  CHECK(f[1].shape() == Shape{32, 8, 8});
  CHECK(f[2].shape() == Shape{64, 4, 4});
  CHECK_THROWS(expert_features(Var<float>(Tensor<float>({3, 32, 32})), params, cfg, 64, 4));
}

TEST_CASE("a zero image gives input-independent features") {
  ExpertConfig cfg;
  ParamStore<double> params;
  Rng rng(3);
  init_expert(params, cfg, 3, 4, rng);
  const Var<double> zero(Tensor<double>({3, 64, 64}));
  const auto a = expert_features(zero, params, cfg, 64, 4);
  for (std::int64_t c = 0; c < 16; ++c) {
    for (std::int64_t i = 1; i < 256; ++i) CHECK(a[0].value()[c * 256 + i] == a[0].value()[c * 256]);
  }
  Var<double> w = params.get("expert.stage0.conv.weight");
  for (auto& v : w.mutable_value().data()) v = -3 * v + 0.25;
  const auto b = expert_features(zero, params, cfg, 64, 4);
  for (std::size_t l = 0; l < a.size(); ++l) CHECK(bitwise_equal(a[l].value(), b[l].value()));
}

TEST_CASE("adapter: zero up-projection is the identity; residual decomposition otherwise") {
  ParamStore<double> params;
  Rng rng(4);
  init_adapter(params, "ad", 6, 2, rng);
  const Var<double> x(random_tensor<double>({6, 5, 5}, rng));
  const auto y0 = adapter(x, params, "ad");
  CHECK(y0.shape() == x.shape());
  CHECK(bitwise_equal(y0.value(), x.value()));

  Var<double> up = params.get("ad.up.weight");
  up.mutable_value() = random_tensor<double>({6, 2, 1, 1}, rng);
  const auto y = adapter(x, params, "ad");
  auto h = ops::silu(ops::conv2d(x, params.get("ad.down.weight"), params.get("ad.down.bias"), 1, 0));
  const auto branch = ops::conv2d(h, params.get("ad.up.weight"), params.get("ad.up.bias"), 1, 0).value();
  double diff2 = 0, branch2 = 0;
  for (std::int64_t i = 0; i < x.value().numel(); ++i) {
    const double d = y.value()[i] - x.value()[i];
    diff2 += d * d;
    branch2 += branch[i] * branch[i];
  }
  CHECK(diff2 > 0);
  CHECK(std::sqrt(diff2) == doctest::Approx(std::sqrt(branch2)).epsilon(1e-12));
  CHECK_THROWS(adapter(Var<double>(random_tensor<double>({5, 5, 5}, rng)), params, "ad"));
}

TEST_CASE("fresh adapters leave the expert output unchanged") {
  ExpertConfig with;
  ParamStore<double> params;
  Rng rng(5);
  init_expert(params, with, 3, 4, rng);
  ExpertConfig without = with;
  without.use_adapters = false;
  const Var<double> img(random_tensor<double>({3, 64, 64}, rng));
  const auto a = expert_features(img, params, with, 64, 4);
  const auto b = expert_features(img, params, without, 64, 4);
  for (std::size_t l = 0; l < a.size(); ++l) CHECK(bitwise_equal(a[l].value(), b[l].value()));
}

TEST_CASE("expert config validation and variants") {
  ExpertConfig cfg;
  cfg.adapter_bottleneck = 16;
  CHECK_THROWS(cfg.validate());
  cfg.use_adapters = false;
  CHECK_NOTHROW(cfg.validate());
  cfg.channels.clear();
  CHECK_THROWS(cfg.validate());
  CHECK(parse_expert_variant(to_string(ExpertVariant::kDeepNarrow)) == ExpertVariant::kDeepNarrow);
  CHECK_THROWS(parse_expert_variant("dino"));

  ExpertConfig deep;
  deep.variant = ExpertVariant::kDeepNarrow;
  ParamStore<float> p;
  Rng rng(6);
  init_expert(p, deep, 3, 4, rng);
  CHECK(p.contains("expert.stage1.conv2.weight"));
  const auto f = expert_features(Var<float>(random_tensor<float>({3, 64, 64}, rng)), p, deep, 64, 4);
  CHECK(f[2].shape() == Shape{64, 4, 4});
}

TEST_CASE("expert and adapter gradients match central differences") {
  for (auto variant : {ExpertVariant::kResidualNet, ExpertVariant::kDeepNarrow}) {
    CAPTURE(to_string(variant));
    ExpertConfig cfg;
    cfg.channels = {4, 6, 8};
    cfg.adapter_bottleneck = 2;
    cfg.variant = variant;
    ParamStore<double> params;
    Rng rng(7);
    init_expert(params, cfg, 3, 2, rng);
    for (const auto& n : names_with_prefix(params, "expert.")) {
      Var<double> p = params.get(n);
      for (auto& v : p.mutable_value().data()) v += 0.1 * rng.uniform(-1, 1);
    }
    const Var<double> img(random_tensor<double>({3, 16, 16}, rng));
    std::vector<Var<double>> targets;
    for (const auto& f : expert_features(img, params, cfg, 16, 2)) {
      targets.emplace_back(random_tensor<double>(f.shape(), rng));
    }
    auto loss = [&] {
      const auto f = expert_features(img, params, cfg, 16, 2);
      std::vector<Var<double>> parts;
      for (std::size_t l = 0; l < f.size(); ++l) parts.push_back(ops::mse(f[l], targets[l]));
      return ops::sum_of(parts);
    };
    const auto r = gradcheck(params, loss, names_with_prefix(params, "expert."), 6, 11);
    CAPTURE(r.worst_name);
    CHECK(r.worst <= 1e-4);
  }
}

}
