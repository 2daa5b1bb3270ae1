#include <cmath>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "vermouth/backbone.hpp"
#include "vermouth/ops.hpp"
#include "vermouth/synth_data.hpp"

using namespace vermouth;
using vermouth::testing::gradcheck;
using vermouth::testing::names_with_prefix;
using vermouth::testing::random_tensor;

namespace {

template <typename T>
ParamStore<T> make_backbone(const BackboneConfig& cfg, std::uint64_t seed = 0) {
  ParamStore<T> params;
  Rng rng(seed);
  init_backbone(params, cfg, rng);
  TextConfig tc;
  tc.dim = cfg.text_dim;
  init_text_encoder(params, tc, rng);
  return params;
}

PromptCondition<double> caption_prompt(const ParamStore<double>& params, const std::string& caption) {
  Rng rng(0);
  PromptRequest req;
  req.caption = caption;
  return make_prompt<double>(req, params, rng);
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("encode_image is a fixed scaled patch projection") {
  const BackboneConfig cfg;
  Tensor<double> zero({3, 64, 64});
  const auto z0 = encode_image(zero, cfg);
  CHECK(z0.shape() == Shape{4, 16, 16});
  for (double v : z0.data()) CHECK(v == 0.0);

  Rng rng(1);
  auto img = random_tensor<double>({3, 64, 64}, rng);
  for (auto& v : img.data()) v = 0.5 + 0.5 * v;
  const auto z = encode_image(img, cfg);
  const auto k = encoder_kernel<double>(cfg);
  const int p = cfg.patch();
  double worst = 0;
  for (int c = 0; c < 4; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        double acc = 0;
        for (int ic = 0; ic < 3; ++ic) {
          for (int dy = 0; dy < p; ++dy) {
            for (int dx = 0; dx < p; ++dx) {
              acc += k[((c * 3 + ic) * p + dy) * p + dx] * img.at(ic, y * p + dy, x * p + dx);
            }
          }
        }
        worst = std::max(worst, std::abs(z.at(c, y, x) - 0.18215 * acc));
      }
    }
  }
  CHECK(worst < 1e-12);
  auto img2 = img;
  for (auto& v : img2.data()) v *= 2;
  const auto z2 = encode_image(img2, cfg);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(std::abs(z2[i] - 2 * z[i]) < 1e-12);
  CHECK_THROWS(encode_image(Tensor<double>({1, 64, 64}), cfg));
  CHECK_THROWS(encode_image(Tensor<double>({3, 32, 32}), cfg));
}

TEST_CASE("unet_forward tap shapes and attention maps") {
  const BackboneConfig cfg;
  auto params = make_backbone<float>(cfg);
  Rng rng(2);
  Var<float> z(random_tensor<float>({4, 16, 16}, rng));
  Var<float> cond(random_tensor<float>({5, 64}, rng));
  const auto out = unet_forward(z, 200, cond, params, cfg, true);
  CHECK(out.eps.shape() == Shape{4, 16, 16});
  const std::map<TapKey, Shape> expected{
      {{Stage::kDown, 0}, {32, 16, 16}}, {{Stage::kDown, 1}, {64, 8, 8}}, {{Stage::kDown, 2}, {128, 4, 4}},
      {{Stage::kMid, 2}, {128, 4, 4}},   {{Stage::kUp, 2}, {128, 4, 4}},  {{Stage::kUp, 1}, {64, 8, 8}},
      {{Stage::kUp, 0}, {32, 16, 16}},
  };
  CHECK(out.bundle.taps.size() == 7);
  for (const auto& [key, shape] : expected) {
    REQUIRE(out.bundle.taps.count(key) == 1);
    CHECK(out.bundle.taps.at(key).shape() == shape);
  }
  CHECK(out.bundle.attn.size() == 7);
  for (const auto& [key, map] : out.bundle.attn) {
    const auto& tap = expected.at(key);
    CHECK(map.shape() == Shape{1, tap.at(1), tap.at(2)});
    for (float v : map.value().data()) CHECK(v >= 0.0f);
  }
  CHECK_THROWS(unet_forward(z, 200, Var<float>(Tensor<float>({2, 32})), params, cfg, false));
  CHECK_THROWS(unet_forward(z, 1001, cond, params, cfg, false));
  CHECK(unet_forward(z, 0, Var<float>(Tensor<float>({0, 64})), params, cfg, false).eps.shape() == Shape{4, 16, 16});
}

TEST_CASE("unet gradients match central differences") {
  const auto cfg = tiny_backbone_config();
  auto params = make_backbone<double>(cfg, 3);
  // Move norm affines and biases off their trivial init so every path is exercised.
  Rng rng(4);
  for (const auto& n : names_with_prefix(params, "unet.")) {
    Var<double> p = params.get(n);
    for (auto& v : p.mutable_value().data()) v += 0.05 * rng.uniform(-1, 1);
  }
  const Var<double> z(random_tensor<double>({4, 4, 4}, rng));
  const Var<double> cond(random_tensor<double>({3, cfg.text_dim}, rng));
  const Var<double> target(random_tensor<double>({4, 4, 4}, rng));
  auto loss = [&] {
    auto out = unet_forward(z, 37, cond, params, cfg, false);
    return ops::mse(out.eps, target);
  };
  const auto names = names_with_prefix(params, "unet.");
  const auto r = gradcheck(params, loss, names, 3, 5);
  CAPTURE(r.worst_name);
  CHECK(r.worst <= 1e-4);
  CHECK(r.tensors == static_cast<int>(names.size()));
}

TEST_CASE("cfg identities") {
  Rng rng(6);
  const auto a = random_tensor<float>({4, 4, 4}, rng);
  const auto b = random_tensor<float>({4, 4, 4}, rng);
  CHECK(bitwise_equal(cfg_eps(a, b, 1.0), a));
  CHECK(bitwise_equal(cfg_eps(a, b, 0.0), b));
  CHECK(cfg_eps(Tensor<double>({1}, 2.0), Tensor<double>({1}, 1.0), 7.5)[0] == 8.5);
  const auto ad = a.cast<double>(), bd = b.cast<double>();
  // Swapping the operands mirrors the scale: cfg(a, b, s) = cfg(b, a, 1 - s).
  // The pair therefore sums to a + b only at s = 1/2.
  for (double s : {-1.0, 0.3, 0.5, 7.5}) {
    CAPTURE(s);
    const auto l = cfg_eps(ad, bd, s), r = cfg_eps(bd, ad, 1 - s);
    for (std::int64_t i = 0; i < ad.numel(); ++i) {
      CHECK(std::abs(l[i] - r[i]) <= 1e-12);
      if (s == 0.5) CHECK(std::abs(l[i] + r[i] - ad[i] - bd[i]) <= 1e-7);
    }
  }
  // Linearity in the pair: cfg(a + c, b + d, s) = cfg(a, b, s) + cfg(c, d, s).
  const auto cd = random_tensor<double>({4, 4, 4}, rng), dd = random_tensor<double>({4, 4, 4}, rng);
  Tensor<double> ac(ad.shape()), bdd(ad.shape());
  for (std::int64_t i = 0; i < ad.numel(); ++i) {
    ac[i] = ad[i] + cd[i];
    bdd[i] = bd[i] + dd[i];
  }
  const auto lhs = cfg_eps(ac, bdd, 7.5), p1 = cfg_eps(ad, bd, 7.5), p2 = cfg_eps(cd, dd, 7.5);
  for (std::int64_t i = 0; i < ad.numel(); ++i) CHECK(std::abs(lhs[i] - p1[i] - p2[i]) <= 1e-12);
  CHECK_THROWS(cfg_eps(a, Tensor<float>({4, 4}), 2.0));
}

TEST_CASE("extract_features stage filter, determinism and cfg identity") {
  const BackboneConfig cfg;
  auto params = make_backbone<double>(cfg, 7);
  const auto table = default_schedule();
  ShapeRecord rec;
  rec.cx = rec.cy = 32;
  rec.radius = 14;
  const auto img = render_photo(rec, 64, 1).image.cast<double>();
  const auto prompt = caption_prompt(params, "a photo of a red circle");

  ExtractOptions o;
  o.stages = {Stage::kMid};
  const auto mid = extract_features(img, prompt, o, params, cfg, table);
  CHECK(mid.taps.size() == 1);
  CHECK(mid.taps.count({Stage::kMid, 2}) == 1);

  ExtractOptions all;
  const auto b1 = extract_features(img, prompt, all, params, cfg, table);
  const auto b2 = extract_features(img, prompt, all, params, cfg, table);
  CHECK(b1.taps.size() == 7);
  for (const auto& [k, v] : b1.taps) CHECK(bitwise_equal(v.value(), b2.taps.at(k).value()));

  const auto direct = unet_forward(Var<double>(encode_image(img, cfg)), 0, prompt.seq, params, cfg, false);
  for (const auto& [k, v] : b1.taps) CHECK_MESSAGE(bitwise_equal(v.value(), direct.bundle.taps.at(k).value()), max_abs_diff(v.value(), direct.bundle.taps.at(k).value()));

  ExtractOptions guided = all;
  guided.cfg_scale = 7.5;
  const auto g = extract_features(img, prompt, guided, params, cfg, table);
  const auto uncond =
      unet_forward(Var<double>(encode_image(img, cfg)), 0, params.get("text.null_embedding"), params, cfg, false);
  for (const auto& [k, v] : g.taps) {
    const auto expect = cfg_eps(direct.bundle.taps.at(k).value(), uncond.bundle.taps.at(k).value(), 7.5);
    CHECK(max_abs_diff(v.value(), expect) < 1e-12);
  }
  CHECK(g.meta.cfg_scale == 7.5);

  ExtractOptions noisy = all;
  noisy.t = 200;
  noisy.noise_mode = NoiseMode::kDdpm;
  noisy.noise_seed = 3;
  const auto n1 = extract_features(img, prompt, noisy, params, cfg, table);
  const auto n2 = extract_features(img, prompt, noisy, params, cfg, table);
  CHECK(bitwise_equal(n1.taps.at({Stage::kUp, 0}).value(), n2.taps.at({Stage::kUp, 0}).value()));
  CHECK_FALSE(bitwise_equal(n1.taps.at({Stage::kUp, 0}).value(), b1.taps.at({Stage::kUp, 0}).value()));
  noisy.noise_mode = NoiseMode::kDdimInversion;
  const auto d = extract_features(img, prompt, noisy, params, cfg, table);
  CHECK(d.meta.noise_mode == NoiseMode::kDdimInversion);

  ExtractOptions none = all;
  none.stages = {};
  CHECK_THROWS(extract_features(img, prompt, none, params, cfg, table));
}

TEST_CASE("stage parsing") {
  CHECK(parse_stages("up+mid") == StageSet{Stage::kUp, Stage::kMid});
  CHECK(parse_stages("all") == StageSet{Stage::kDown, Stage::kMid, Stage::kUp});
  CHECK(parse_stages("none").empty());
  CHECK(parse_stages(to_string(StageSet{Stage::kDown, Stage::kMid})) == StageSet{Stage::kDown, Stage::kMid});
  CHECK_THROWS(parse_stages("left"));
}

TEST_CASE("pretraining lowers the loss; lr 0 is a no-op; dropout 1 uses only the null condition") {
  BackboneConfig cfg;
  const auto data = gen_pretrain_set(32, 64, 11);
  PretrainConfig pc;
  pc.epochs = 3;
  pc.seed = 1;
  {
    auto params = make_backbone<float>(cfg, 8);
    const auto r = pretrain_backbone(data, params, cfg, default_schedule(), pc);
    REQUIRE(r.loss_curve.size() == 3);
    for (double l : r.loss_curve) CHECK(std::isfinite(l));
    CHECK(r.loss_curve.back() < r.loss_curve.front());
  }
  pc.epochs = 1;
  {
    auto params = make_backbone<float>(cfg, 8);
    const auto before = params.to_map();
    auto zero = pc;
    zero.lr = 0.0;
    pretrain_backbone(data, params, cfg, default_schedule(), zero);
    for (const auto& [name, value] : params.to_map()) CHECK(bitwise_equal(value, before.at(name)));
  }
  {
    auto params = make_backbone<float>(cfg, 8);
    auto drop = pc;
    drop.cond_dropout = 1.0;
    const auto r = pretrain_backbone(data, params, cfg, default_schedule(), drop);
    CHECK(r.total_steps == 32);
    CHECK(r.null_condition_steps == r.total_steps);
  }
  auto params = make_backbone<float>(cfg, 8);
  CHECK_THROWS(pretrain_backbone({}, params, cfg, default_schedule(), pc));
}

TEST_CASE("norm-group step changes only norm parameters") {
  const auto cfg = tiny_backbone_config();
  auto params = make_backbone<double>(cfg, 9);
  int norm = 0;
  for (const auto& n : params.names()) {
    if (n.rfind("unet.", 0) == 0 && is_norm_param(n)) ++norm;
  }
  CHECK(norm > 0);
  params.set_trainable([](const std::string& n) { return n.rfind("unet.", 0) == 0 && is_norm_param(n); });
  const auto before = params.to_map();
  Rng rng(10);
  const Var<double> z(random_tensor<double>({4, 4, 4}, rng));
  const Var<double> cond(random_tensor<double>({2, cfg.text_dim}, rng));
  auto out = unet_forward(z, 50, cond, params, cfg, false);
  auto loss = ops::mse(out.eps, Var<double>(random_tensor<double>({4, 4, 4}, rng)));
  loss.backward();
  AdamWConfig oc;
  oc.lr = 1e-2;
  AdamW<double> opt(oc);
  opt.step(params);
  int changed = 0;
  for (const auto& [name, value] : params.to_map()) {
    const bool same = bitwise_equal(value, before.at(name));
    if (!same) ++changed;
    if (!(name.rfind("unet.", 0) == 0 && is_norm_param(name))) CHECK_MESSAGE(same, name);
  }
  CHECK(changed == norm);
}

TEST_CASE("group_count") {
  CHECK(group_count(32) == 8);
  CHECK(group_count(4) == 4);
  CHECK(group_count(12) == 6);
  CHECK(group_count(7) == 7);
  CHECK(group_count(9) == 3);
}

}
