#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "vermouth/ops.hpp"
#include "vermouth/sweep.hpp"
#include "vermouth/task_heads.hpp"

using namespace vermouth;
using vermouth::testing::brute_map;
using vermouth::testing::brute_miou;
using vermouth::testing::dot_cosine;
using vermouth::testing::gradcheck;
using vermouth::testing::random_tensor;

namespace {

Tensor<double> rows_tensor(const std::vector<std::vector<double>>& rows) {
  const auto n = static_cast<std::int64_t>(rows.size());
  const auto d = static_cast<std::int64_t>(rows.front().size());
  Tensor<double> t({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) t[i * d + j] = rows[i][j];
  }
  return t;
}

// Small integer-valued features so that exact similarity ties occur.
std::vector<std::vector<double>> random_rows(Rng& rng, int n, int d, bool coarse) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows) {
    for (auto& v : r) v = coarse ? static_cast<double>(rng.uniform_int(3)) - 1.0 : rng.uniform(-1, 1);
  }
  return rows;
}

RunConfig small_run(Task task) {
  auto cfg = RunConfig::defaults(task);
  cfg.pretrain.images = 8;
  cfg.pretrain.epochs = 1;
  cfg.data.n_per_class = 2;
  cfg.data.n_test_per_class = 2;
  cfg.data.shots = 2;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 2;
  return cfg;
}

}  // namespace

TEST_SUITE("task_heads") {

TEST_CASE("cosine logits: aligned, orthogonal, scale invariant, zero rows") {
  const auto w = rows_tensor({{3, 4, 0}, {0, 0, 2}, {1, 1, 1}});
  const auto v = rows_tensor({{0.6, 0.8, 0}, {0, 0, 0}, {-30, -40, 0}});
  const auto l = cosine_logits(Var<double>(v), w, 0.2).value();
  REQUIRE(l.shape() == Shape{3, 3});
  CHECK(l[0] == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(l[1] == doctest::Approx(0.0));
  CHECK(l[2] == doctest::Approx(5.0 * 1.4 / std::sqrt(3.0)).epsilon(1e-14));
  for (int j = 0; j < 3; ++j) CHECK(l[3 + j] == 0.0);
  for (int j = 0; j < 3; ++j) CHECK(l[6 + j] == doctest::Approx(-l[j]).epsilon(1e-14));

  Rng rng(5);
  const auto a = random_tensor<double>({4, 6}, rng);
  const auto wr = random_tensor<double>({5, 6}, rng);
  auto scaled = a;
  for (auto& x : scaled.data()) x *= 37.5;
  const auto la = cosine_logits(Var<double>(a), wr, 0.07).value();
  const auto ls = cosine_logits(Var<double>(scaled), wr, 0.07).value();
  CHECK(max_abs_diff(la, ls) < 1e-12);
  for (std::int64_t i = 0; i < 4; ++i) {
    for (std::int64_t j = 0; j < 5; ++j) {
      std::vector<double> x(a.raw() + i * 6, a.raw() + i * 6 + 6), y(wr.raw() + j * 6, wr.raw() + j * 6 + 6);
      CHECK(la[i * 5 + j] == doctest::Approx(dot_cosine(x, y) / 0.07).epsilon(1e-12));
    }
  }
}

TEST_CASE("cosine logit map equals the per-position row version") {
  Rng rng(6);
  const auto map = random_tensor<double>({4, 3, 5}, rng);
  const auto w = random_tensor<double>({3, 4}, rng);
  const auto out = cosine_logits_map(Var<double>(map), w, 0.02).value();
  REQUIRE(out.shape() == Shape{3, 3, 5});
  for (std::int64_t p = 0; p < 15; ++p) {
    Tensor<double> row({1, 4});
    for (std::int64_t c = 0; c < 4; ++c) row[c] = map[c * 15 + p];
    const auto l = cosine_logits(Var<double>(row), w, 0.02).value();
    for (std::int64_t n = 0; n < 3; ++n) CHECK(out[n * 15 + p] == doctest::Approx(l[n]).epsilon(1e-13));
  }
}

TEST_CASE("cross-entropy values") {
  Tensor<double> uniform({2, 7}, 0.3);
  CHECK(ce_loss(Var<double>(uniform), {0, 6}).value()[0] == doctest::Approx(std::log(7.0)).epsilon(1e-14));

  const auto peaked = rows_tensor({{10, 0, 0}});
  const double v = ce_loss(Var<double>(peaked), {0}).value()[0];
  CHECK(std::abs(v - 9.07957374672444462752171e-5) / 9.07957374672444462752171e-5 < 1e-12);

  CHECK(ce_loss(Var<double>(peaked), {255}, 255).value()[0] == 0.0);
  const auto two = rows_tensor({{10, 0, 0}, {0, 0, 0}});
  CHECK(ce_loss(Var<double>(two), {0, 255}, 255).value()[0] == doctest::Approx(v).epsilon(1e-14));
  CHECK_THROWS(ce_loss(Var<double>(peaked), {3}));
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot over the counted rows") {
  Rng rng(7);
  const auto x = random_tensor<double>({4, 5}, rng, 3.0);
  Var<double> logits(x, true);
  const std::vector<int> labels{2, -1, 0, 4};
  auto loss = ce_loss(logits, labels, -1);
  loss.backward();
  const auto g = logits.grad();
  for (std::int64_t i = 0; i < 4; ++i) {
    double mx = x[i * 5], z = 0;
    for (int j = 1; j < 5; ++j) mx = std::max(mx, x[i * 5 + j]);
    for (int j = 0; j < 5; ++j) z += std::exp(x[i * 5 + j] - mx);
    for (int j = 0; j < 5; ++j) {
      const double expect =
          labels[i] < 0 ? 0.0 : (std::exp(x[i * 5 + j] - mx) / z - (j == labels[i] ? 1.0 : 0.0)) / 3.0;
      CHECK(std::abs(g[i * 5 + j] - expect) < 1e-10);
    }
  }
}

TEST_CASE("cosine head gradcheck through a linear layer") {
  ParamStore<double> params;
  Rng rng(8);
  params.add("proj.weight", random_tensor<double>({6, 5}, rng));
  params.add("proj.bias", random_tensor<double>({6}, rng));
  const auto x = random_tensor<double>({3, 5}, rng);
  const auto w = random_tensor<double>({4, 6}, rng);
  const auto r = gradcheck(
      params,
      [&] {
        auto v = ops::linear(Var<double>(x), params.get("proj.weight"), params.get("proj.bias"));
        return ce_loss(cosine_logits(v, w, 0.2), {1, 3, 0});
      },
      {"proj.weight", "proj.bias"}, 12);
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("argmax breaks ties to the lowest index; top-1 accuracy") {
  const auto l = rows_tensor({{1, 3, 3}, {2, 2, 2}, {0, -1, 5}});
  CHECK(argmax_rows(l) == std::vector<int>{1, 0, 2});
  CHECK(top1_accuracy(l, {1, 0, 2}) == 1.0);
  CHECK(top1_accuracy(l, {0, 1, 1}) == 0.0);
  CHECK(top1_accuracy(l, {1, 1, 1}) == doctest::Approx(1.0 / 3));
  CHECK_THROWS(top1_accuracy(l, {1, 0}));
  CHECK_THROWS(top1_accuracy(Tensor<double>({0, 3}), {}));
}

TEST_CASE("mAP on a hand-worked ranking") {
  // Ranking relevant, irrelevant, relevant: AP = (1/1 + 2/3) / 2.
  const auto q = rows_tensor({{1, 0}});
  const auto g = rows_tensor({{1, 0}, {1, 0.5}, {1, 1}, {0, 1}});
  const auto r = map_score(q, {0}, g, {0, 1, 0, 1});
  CHECK(r.map == doctest::Approx(5.0 / 6).epsilon(1e-14));
  CHECK(r.excluded_queries == 0);
  const auto perfect = map_score(q, {0}, g, {0, 0, 1, 1});
  CHECK(perfect.map == 1.0);
}

TEST_CASE("mAP agrees with the brute-force definition on random instances") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const int nq = 1 + static_cast<int>(rng.uniform_int(5));
    const int ng = 1 + static_cast<int>(rng.uniform_int(10));
    const int d = 1 + static_cast<int>(rng.uniform_int(4));
    const int classes = 1 + static_cast<int>(rng.uniform_int(4));
    const bool coarse = trial % 2 == 0;
    const auto q = random_rows(rng, nq, d, coarse);
    const auto g = random_rows(rng, ng, d, coarse);
    std::vector<int> ql(nq), gl(ng);
    for (auto& x : ql) x = static_cast<int>(rng.uniform_int(classes));
    for (auto& x : gl) x = static_cast<int>(rng.uniform_int(classes));
    const auto r = map_score(rows_tensor(q), ql, rows_tensor(g), gl);
    CHECK(std::abs(r.map - brute_map(q, ql, g, gl)) < 1e-12);
    int excluded = 0;
    for (int c : ql) excluded += std::count(gl.begin(), gl.end(), c) == 0;
    CHECK(r.excluded_queries == excluded);
    CHECK(static_cast<int>(r.ap.size()) == nq - excluded);
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
  }
}

TEST_CASE("mAP is invariant to positive feature scaling") {
  Rng rng(10);
  const auto q = random_tensor<double>({6, 5}, rng);
  const auto g = random_tensor<double>({12, 5}, rng);
  std::vector<int> ql{0, 1, 2, 0, 1, 2}, gl(12);
  for (int i = 0; i < 12; ++i) gl[i] = i % 3;
  auto q2 = q, g2 = g;
  for (std::int64_t i = 0; i < 6; ++i) {
    for (std::int64_t j = 0; j < 5; ++j) q2[i * 5 + j] *= 0.5 + i;
  }
  for (auto& x : g2.data()) x *= 1e3;
  CHECK(std::abs(map_score(q, ql, g, gl).map - map_score(q2, ql, g2, gl).map) < 1e-12);
}

TEST_CASE("mAP with a rank cutoff") {
  const auto q = rows_tensor({{1, 0}});
  const auto g = rows_tensor({{1, 0}, {1, 0.5}, {1, 1}, {0, 1}});
  // Top 2: relevant, irrelevant; divide by min(2, 2 relevant).
  CHECK(map_score(q, {0}, g, {0, 1, 0, 1}, 2).map == doctest::Approx(0.5));
  CHECK(map_score(q, {0}, g, {0, 1, 0, 1}, 4).map == doctest::Approx(5.0 / 6));
  // One relevant item outside the top 1.
  CHECK(map_score(q, {0}, g, {1, 0, 1, 1}, 1).map == 0.0);
  CHECK(map_score(q, {5}, g, {1, 0, 1, 1}).excluded_queries == 1);
}

TEST_CASE("retrieval returns top-k by cosine with ties to the lower index") {
  Rng rng(11);
  const auto q = random_rows(rng, 5, 3, false);
  auto g = q;
  for (const auto& extra : random_rows(rng, 7, 3, false)) g.push_back(extra);
  const auto top = retrieve(rows_tensor(q), rows_tensor(g), 12);
  for (int i = 0; i < 5; ++i) {
    CHECK(top[i].front() == i);
    auto sorted = top[i];
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> all(12);
    std::iota(all.begin(), all.end(), 0);
    CHECK(sorted == all);
    std::vector<int> oracle(12);
    std::iota(oracle.begin(), oracle.end(), 0);
    std::stable_sort(oracle.begin(), oracle.end(),
                     [&](int a, int b) { return dot_cosine(q[i], g[a]) > dot_cosine(q[i], g[b]); });
    CHECK(top[i] == oracle);
  }
  const auto tied = retrieve(rows_tensor({{1, 0}}), rows_tensor({{0, 1}, {2, 0}, {1, 0}, {3, 0}}), 3);
  CHECK(tied[0] == std::vector<int>{1, 2, 3});
  CHECK_THROWS(retrieve(rows_tensor(q), rows_tensor(g), 13));
  CHECK_THROWS(retrieve(rows_tensor(q), rows_tensor(g), -1));
}

TEST_CASE("mIoU on fixed masks") {
  std::vector<int> a(64);
  for (int i = 0; i < 64; ++i) a[i] = (i % 8) < 4 ? 1 : 2;
  CHECK(miou(a, a, 3, 255) == 1.0);
  std::vector<int> flipped(64);
  for (int i = 0; i < 64; ++i) flipped[i] = a[i] == 1 ? 2 : 1;
  CHECK(miou(flipped, a, 3, 255) == 0.0);

  // Prediction shifted by two columns over an 8x8 grid.
  std::vector<int> pred(64);
  for (int i = 0; i < 64; ++i) pred[i] = (i % 8) < 2 ? 1 : 2;
  CHECK(miou(pred, a, 3, 255) == doctest::Approx(brute_miou(pred, a, 3, 255)).epsilon(1e-15));
  CHECK(miou(pred, a, 3, 255) == doctest::Approx((16.0 / 32 + 32.0 / 48) / 2));

  auto ignored = a;
  for (int i = 0; i < 8; ++i) ignored[i] = 255;
  auto pred_i = a;
  for (int i = 0; i < 8; ++i) pred_i[i] = 0;
  CHECK(miou(pred_i, ignored, 3, 255) == 1.0);
  CHECK_THROWS(miou(std::vector<int>(3), std::vector<int>(4), 3, 255));
}

TEST_CASE("mIoU agrees with the pixel-loop definition on random instances") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(64));
    const int classes = 1 + static_cast<int>(rng.uniform_int(5));
    std::vector<int> pred(n), gt(n);
    for (auto& x : pred) x = static_cast<int>(rng.uniform_int(classes));
    for (auto& x : gt) x = rng.bernoulli(0.1) ? 255 : static_cast<int>(rng.uniform_int(classes));
    const double m = miou(pred, gt, classes, 255);
    CHECK(std::abs(m - brute_miou(pred, gt, classes, 255)) < 1e-12);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
}

TEST_CASE("parameter groups") {
  CHECK(parse_groups("head+expert") == GroupSet{ParamGroup::kHead, ParamGroup::kExpert});
  CHECK(parse_groups("norm") == GroupSet{ParamGroup::kBackboneNorm});
  CHECK(to_string(parse_groups("norm+head")) == to_string(parse_groups("head+norm")));
  CHECK_THROWS(parse_groups("head+bogus"));
  CHECK(parse_groups("").empty());
  auto empty = TaskConfig::defaults(Task::kClassify);
  empty.trainable_groups.clear();
  CHECK_THROWS(empty.validate(true));
  CHECK_NOTHROW(empty.validate(false));
  ExpertConfig e;
  CHECK(in_group("uhead.block0.conv.weight", ParamGroup::kHead, e));
  CHECK_FALSE(in_group("uhead.block0.conv.weight", ParamGroup::kExpert, e));
  CHECK(in_group("expert.stage0.conv.weight", ParamGroup::kExpert, e));
  CHECK_FALSE(in_group("unet.in.weight", ParamGroup::kBackboneNorm, e));
  CHECK_FALSE(in_group("text.embed", ParamGroup::kBackboneNorm, e));
}

TEST_CASE("task defaults") {
  const auto c = TaskConfig::defaults(Task::kClassify);
  const auto s = TaskConfig::defaults(Task::kSegment);
  CHECK(c.temperature == 0.2);
  CHECK(s.temperature == 0.02);
  CHECK(s.trainable_groups.count(ParamGroup::kBackboneNorm) == 1);
  CHECK(c.trainable_groups.count(ParamGroup::kBackboneNorm) == 0);
  CHECK(PipelineConfig::defaults(Task::kClassify).extract.t == 200);
  CHECK(PipelineConfig::defaults(Task::kRetrieve).extract.t == 200);
  CHECK(PipelineConfig::defaults(Task::kSegment).extract.t == 10);
  CHECK(primary_metric(Task::kClassify) == "top1");
  CHECK(primary_metric(Task::kRetrieve) == "map");
  CHECK(primary_metric(Task::kSegment) == "miou");
  CHECK(parse_task(to_string(Task::kRetrieve)) == Task::kRetrieve);
  CHECK_THROWS(parse_task("detect"));
}

TEST_CASE("zero-shot splits keep train and evaluation categories apart") {
  const auto set = gen_sketch_photo_set(default_dataset(Task::kRetrieve));
  const auto sp = task_data(set);
  std::set<std::string> train(sp.train_classes.begin(), sp.train_classes.end());
  for (const auto& n : sp.eval_classes) CHECK(train.count(n) == 0);
  for (const auto& s : sp.gallery) CHECK(train.count(set.class_names.at(s.label)) == 0);
  for (const auto& s : sp.queries) CHECK(train.count(set.class_names.at(s.label)) == 0);
  for (const auto& s : sp.queries) CHECK(s.domain == Domain::kSketch);
  CHECK(!sp.gallery.empty());
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
  auto cfg = small_run(Task::kClassify);
  cfg.train.optim.lr = 0.0;
  const auto backbone = build_backbone<float>(cfg);
  ParamStore<float> trained;
  const auto r = run_single<float>(cfg, 0, backbone, &trained);
  CHECK(r.history.steps > 0);
  ParamStore<float> initial = backbone.clone();
  const auto data = build_task_data(cfg, 0);
  prepare_task_params(cfg.task_config(0), cfg.pipeline(), data, initial, default_schedule());
  const auto before = initial.to_map();
  const auto after = trained.to_map();
  REQUIRE(before.size() == after.size());
  for (const auto& [name, t] : before) CHECK_MESSAGE(bitwise_equal(t, after.at(name)), name);
}

TEST_CASE("segmentation training touches only the head, expert and U-net norm parameters") {
  auto cfg = small_run(Task::kSegment);
  const auto backbone = build_backbone<float>(cfg);
  ParamStore<float> trained;
  run_single<float>(cfg, 0, backbone, &trained);
  ParamStore<float> initial = backbone.clone();
  prepare_task_params(cfg.task_config(0), cfg.pipeline(), build_task_data(cfg, 0), initial, default_schedule());
  const auto before = initial.to_map();
  const auto after = trained.to_map();
  const auto pipe = cfg.pipeline();
  int norm_changed = 0, head_changed = 0;
  for (const auto& [name, t] : before) {
    if (bitwise_equal(t, after.at(name))) continue;
    const bool allowed = in_group(name, ParamGroup::kHead, pipe.expert) ||
                         in_group(name, ParamGroup::kExpert, pipe.expert) ||
                         in_group(name, ParamGroup::kBackboneNorm, pipe.expert);
    CHECK_MESSAGE(allowed, name);
    norm_changed += in_group(name, ParamGroup::kBackboneNorm, pipe.expert);
    head_changed += in_group(name, ParamGroup::kHead, pipe.expert);
  }
  CHECK(norm_changed > 0);
  CHECK(head_changed > 0);
}

TEST_CASE("a disabled expert reproduces the fusion-only configuration") {
  auto base = small_run(Task::kClassify);
  const auto backbone = build_backbone<float>(base);
  auto off = base;
  off.pipe.expert.enabled = false;
  const auto fuse = ablation_config(base, "+fuse");
  ParamStore<float> a, b;
  const auto ra = run_single<float>(off, 0, backbone, &a);
  const auto rb = run_single<float>(fuse, 0, backbone, &b);
  CHECK(ra.eval.metrics == rb.eval.metrics);
  const auto ma = a.to_map();
  const auto mb = b.to_map();
  REQUIRE(ma.size() == mb.size());
  for (const auto& [name, t] : ma) CHECK(bitwise_equal(t, mb.at(name)));
  for (const auto& [name, t] : ma) CHECK(name.rfind("expert.", 0) != 0);
}

}  // TEST_SUITE
