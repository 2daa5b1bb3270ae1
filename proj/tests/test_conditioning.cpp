#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "vermouth/conditioning.hpp"
#include "vermouth/ops.hpp"
#include "vermouth/synth_data.hpp"

using namespace vermouth;
using vermouth::testing::gradcheck;
using vermouth::testing::names_with_prefix;
using vermouth::testing::random_tensor;

namespace {

template <typename T>
ParamStore<T> text_params(std::uint64_t seed = 0, int dim = 64) {
  ParamStore<T> params;
  Rng rng(seed);
  TextConfig tc;
  tc.dim = dim;
  init_text_encoder(params, tc, rng);
  return params;
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST_SUITE("conditioning") {

TEST_CASE("tokenize") {
  CHECK(tokenize("").empty());
  CHECK(tokenize("   ").empty());
  CHECK(tokenize("a red circle") == tokenize("a red circle"));
  CHECK(tokenize("A Red  CIRCLE") == tokenize("a red circle"));
  CHECK(tokenize("a red circle").size() == 3);
  std::string long_text;
  for (int i = 0; i < 30; ++i) long_text += "w" + std::to_string(i) + " ";
  CHECK(tokenize(long_text).size() == kContextLength);
  for (int id : tokenize(long_text)) {
    CHECK(id > kPadId);
    CHECK(id < kVocabSize);
  }
  CHECK(pad_tokens({5, 6}).size() == kContextLength);
  CHECK(pad_tokens({5, 6})[2] == kPadId);
  CHECK(format_template("a photo of a {}", "red circle") == "a photo of a red circle");
}

TEST_CASE("hash collisions over the synthetic caption vocabulary stay below 5%") {
  std::set<std::string> vocab{"a", "photo", "of", "sketch", "and", "background"};
  for (auto s : all_shapes()) vocab.insert(to_string(s));
  for (auto c : all_colors()) vocab.insert(to_string(c));
  std::vector<std::string> v(vocab.begin(), vocab.end());
  long pairs = 0, collisions = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      ++pairs;
      collisions += tokenize(v[i]) == tokenize(v[j]);
    }
  }
  CHECK(static_cast<double>(collisions) / static_cast<double>(pairs) < 0.05);
  std::set<int> ids;
  for (const auto& w : v) ids.insert(tokenize(w)[0]);
  CHECK(ids.size() == v.size());
}

TEST_CASE("encode_text shapes, pooling and projection") {
  auto params = text_params<double>(1);
  const auto one = encode_text(tokenize("circle"), params, false);
  CHECK(one.seq.shape() == Shape{1, 64});
  CHECK(bitwise_equal(one.pooled.value(), one.seq.value()));
  const auto three = encode_text(tokenize("a red circle"), params, false);
  CHECK(three.seq.shape() == Shape{3, 64});
  for (int j = 0; j < 64; ++j) {
    const double m = (three.seq.value()[j] + three.seq.value()[64 + j] + three.seq.value()[128 + j]) / 3;
    CHECK(std::abs(three.pooled.value()[j] - m) < 1e-12);
  }
  const auto proj = encode_text(tokenize("a red circle"), params, true);
  CHECK(proj.seq.shape() == three.seq.shape());
  CHECK(proj.pooled.shape() == three.pooled.shape());
  CHECK_FALSE(bitwise_equal(proj.pooled.value(), three.pooled.value()));
  CHECK(encode_text(pad_tokens(tokenize("a red circle")), params, false).seq.shape() == Shape{3, 64});
  const auto empty = encode_text({}, params, false);
  CHECK(empty.seq.dim(0) == 0);
  CHECK_THROWS(encode_text({kVocabSize}, params, false));
  CHECK_THROWS(encode_text({-1}, params, false));
  CHECK_THROWS(encode_text(std::vector<int>(17, 3), params, false));
}

TEST_CASE("text encoder gradients match central differences") {
  for (bool projection : {false, true}) {
    CAPTURE(projection);
    auto params = text_params<double>(2, 8);
    Rng rng(3);
    for (const auto& n : params.names()) {
      Var<double> p = params.get(n);
      for (auto& v : p.mutable_value().data()) v += 0.1 * rng.uniform(-1, 1);
    }
    const Var<double> ws(random_tensor<double>({4, 8}, rng));
    const Var<double> wp(random_tensor<double>({1, 8}, rng));
    const auto tokens = tokenize("a photo of a red circle");
    auto loss = [&] {
      const auto enc = encode_text(tokens, params, projection);
      auto a = ops::sum_all(ops::mul(ops::silu(ops::slice(enc.seq, 0, 0, 4)), ws));
      return ops::add(a, ops::sum_all(ops::mul(enc.pooled, wp)));
    };
    // Only the rows of the embedding tables that the tokens touch carry gradient.
    std::vector<std::string> names;
    for (const auto& n : params.names()) {
      if (n != "text.token_embedding" && n != "text.position_embedding" && n != "text.null_embedding") names.push_back(n);
      if (!projection && n == "text.projection.weight") names.pop_back();
    }
    auto r = gradcheck(params, loss, names, 8, 4);
    CAPTURE(r.worst_name);
    CHECK(r.worst <= 1e-4);

    params.zero_grad();
    loss().backward();
    const auto g_tok = params.get("text.token_embedding").grad();
    const auto g_pos = params.get("text.position_embedding").grad();
    Var<double> tok = params.get("text.token_embedding");
    Var<double> pos = params.get("text.position_embedding");
    const double h = 1e-5;
    double worst = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      for (int j = 0; j < 8; j += 3) {
        for (auto* pair : {&tok, &pos}) {
          const std::int64_t idx = (pair == &tok ? tokens[i] : static_cast<int>(i)) * 8 + j;
          auto& v = pair->mutable_value()[idx];
          const double keep = v;
          v = keep + h;
          const double fp = loss().value()[0];
          v = keep - h;
          const double fm = loss().value()[0];
          v = keep;
          const double num = (fp - fm) / (2 * h);
          const double ana = pair == &tok ? g_tok[idx] : g_pos[idx];
          worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
        }
      }
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("make_prompt modes") {
  auto params = text_params<float>(5);
  Rng rng(0);
  PromptRequest req;
  req.mode = PromptMode::kNull;
  const auto null = make_prompt<float>(req, params, rng);
  CHECK(null.seq.dim(0) == 1);
  CHECK(bitwise_equal(null.seq.value(), params.get("text.null_embedding").value()));
  CHECK(bitwise_equal(null_prompt(params).seq.value(), null_prompt(params).seq.value()));
  double n2 = 0;
  for (float v : null.pooled.value().data()) n2 += static_cast<double>(v) * v;
  CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-5));

  req.mode = PromptMode::kAligned;
  req.caption = "a red circle";
  const auto aligned = make_prompt<float>(req, params, rng);
  CHECK(aligned.tokens == tokenize("a red circle"));
  CHECK(aligned.seq.dim(0) == 3);
  req.caption.clear();
  CHECK_THROWS(make_prompt<float>(req, params, rng));

  req.mode = PromptMode::kRandom;
  Rng r1(9), r2(9);
  const auto p1 = make_prompt<float>(req, params, r1);
  const auto p2 = make_prompt<float>(req, params, r2);
  CHECK(p1.tokens == p2.tokens);
  CHECK(bitwise_equal(p1.seq.value(), p2.seq.value()));
  CHECK(p1.tokens.size() == kRandomPromptLength);

  req.mode = PromptMode::kAllClasses;
  CHECK_THROWS(make_prompt<float>(req, params, rng));
  req.class_names = {"circle", "square", "red star"};
  const auto all = make_prompt<float>(req, params, rng);
  CHECK(all.seq.dim(0) == 5 + 5 + 6);
  std::vector<std::string> many(40, "hexagon");
  req.class_names = many;
  CHECK(make_prompt<float>(req, params, rng).seq.dim(0) == kAllClassesCapacity);

  CHECK(parse_prompt_mode("aligned") == PromptMode::kAligned);
  CHECK(parse_prompt_mode(to_string(PromptMode::kAllClasses)) == PromptMode::kAllClasses);
  CHECK_THROWS(parse_prompt_mode("blip2"));
}

TEST_CASE("classifier weights: unit rows, permutation, open vocabulary") {
  auto params = text_params<double>(6);
  const std::vector<std::string> a{"circle", "square", "triangle"};
  const auto w = build_classifier_weights(a, "a photo of a {}", params, false);
  REQUIRE(w.weights.shape() == Shape{3, 64});
  for (int k = 0; k < 3; ++k) {
    double n2 = 0;
    for (int j = 0; j < 64; ++j) n2 += w.weights[k * 64 + j] * w.weights[k * 64 + j];
    CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-6);
  }
  const auto perm = build_classifier_weights({"triangle", "circle", "square"}, "a photo of a {}", params, false);
  const int order[] = {2, 0, 1};
  for (int k = 0; k < 3; ++k) {
    for (int j = 0; j < 64; ++j) CHECK(perm.weights[k * 64 + j] == w.weights[order[k] * 64 + j]);
  }
  auto ab = a;
  ab.push_back("star");
  const auto wider = build_classifier_weights(ab, "a photo of a {}", params, false);
  CHECK(wider.weights.dim(0) == 4);
  for (int i = 0; i < 3 * 64; ++i) CHECK(wider.weights[i] == w.weights[i]);
  const auto projected = build_classifier_weights(a, "a photo of a {}", params, true);
  CHECK(projected.projected);
  CHECK_FALSE(bitwise_equal(projected.weights, w.weights));
  CHECK_THROWS(build_classifier_weights({}, "a photo of a {}", params, false));
}

TEST_CASE("captions tokenize to the class-name tokens") {
  DatasetSpec spec;
  spec.categories = {parse_category("circle"), parse_category("red square"), parse_category("star")};
  spec.n_per_class = 3;
  spec.n_test_per_class = 2;
  spec.shots = 3;
  const auto set = gen_classification_set(spec);
  for (const auto& s : set.train.samples) {
    const auto caption_ids = tokenize(s.caption);
    for (const auto& w : words(set.train.class_names[static_cast<std::size_t>(s.label)])) {
      const int id = tokenize(w)[0];
      CHECK(std::find(caption_ids.begin(), caption_ids.end(), id) != caption_ids.end());
    }
  }
}

}
