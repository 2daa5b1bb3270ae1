#include "vermouth/conditioning.hpp"

#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vermouth/ops.hpp"

namespace vermouth {

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::kNull: return "null";
    case PromptMode::kRandom: return "random";
    case PromptMode::kAligned: return "aligned";
    case PromptMode::kAllClasses: return "all-classes";
  }
  return "?";
}

PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "null") return PromptMode::kNull;
  if (s == "random") return PromptMode::kRandom;
  if (s == "aligned" || s == "blip") return PromptMode::kAligned;
  if (s == "all-classes") return PromptMode::kAllClasses;
  throw std::invalid_argument("unknown prompt mode: " + s);
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word && static_cast<int>(ids.size()) < kContextLength) {
    std::uint32_t h = 2166136261u;
    for (char ch : word) {
      h ^= static_cast<std::uint8_t>(std::tolower(static_cast<unsigned char>(ch)));
      h *= 16777619u;
    }
    ids.push_back(1 + static_cast<int>(h % static_cast<std::uint32_t>(kVocabSize - 1)));
  }
  return ids;
}

std::vector<int> pad_tokens(std::vector<int> tokens, int length) {
  if (static_cast<int>(tokens.size()) > length) tokens.resize(static_cast<std::size_t>(length));
  tokens.resize(static_cast<std::size_t>(length), kPadId);
  return tokens;
}

std::string format_template(const std::string& tmpl, const std::string& name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) return tmpl + " " + name;
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

template <typename T>
void init_text_encoder(ParamStore<T>& params, const TextConfig& cfg, Rng& rng) {
  const std::int64_t d = cfg.dim;
  params.add("text.token_embedding", init_uniform<T>({cfg.vocab, d}, T(1), rng));
  params.add("text.position_embedding", init_uniform<T>({cfg.context, d}, T(0.1), rng));
  params.add("text.fc1.weight", init_fan_in<T>({d, d}, d, rng));
  params.add("text.fc1.bias", Tensor<T>({d}));
  params.add("text.fc2.weight", init_fan_in<T>({d, d}, d, rng));
  params.add("text.fc2.bias", Tensor<T>({d}));
  params.add("text.projection.weight", init_fan_in<T>({d, d}, d, rng));
  params.add("text.null_embedding", init_uniform<T>({1, d}, T(1), rng));
}

template <typename T>
TextEncoding<T> encode_text(const std::vector<int>& tokens, const ParamStore<T>& params, bool use_projection) {
  const auto& table = params.get("text.token_embedding");
  const auto d = table.dim(1);
  std::vector<int> ids;
  std::vector<int> positions;
  if (static_cast<std::int64_t>(tokens.size()) > params.get("text.position_embedding").dim(0)) {
    throw std::invalid_argument("token sequence longer than the context length");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= table.dim(0)) {
      throw std::out_of_range("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    }
    if (tokens[i] == kPadId) continue;
    ids.push_back(tokens[i]);
    positions.push_back(static_cast<int>(i));
  }
  TextEncoding<T> out;
  if (ids.empty()) {
    out.seq = Var<T>(Tensor<T>({0, d}));
    out.pooled = Var<T>(Tensor<T>({1, d}));
    return out;
  }
  auto x = ops::add(ops::gather_rows(table, ids), ops::gather_rows(params.get("text.position_embedding"), positions));
  auto hidden = ops::silu(ops::linear(x, params.get("text.fc1.weight"), params.get("text.fc1.bias")));
  auto seq = ops::add(x, ops::linear(hidden, params.get("text.fc2.weight"), params.get("text.fc2.bias")));
  auto pooled = ops::mean_axis(seq, 0);
  if (use_projection) {
    const auto& proj = params.get("text.projection.weight");
    seq = ops::linear(seq, proj, Var<T>());
    pooled = ops::linear(pooled, proj, Var<T>());
  }
  out.seq = seq;
  out.pooled = pooled;
  return out;
}

template <typename T>
PromptCondition<T> null_prompt(const ParamStore<T>& params) {
  PromptCondition<T> p;
  p.mode = PromptMode::kNull;
  p.seq = params.get("text.null_embedding");
  p.pooled = ops::l2_normalize_rows(p.seq);
  return p;
}

template <typename T>
PromptCondition<T> make_prompt(const PromptRequest& req, const ParamStore<T>& params, Rng& rng) {
  PromptCondition<T> p;
  p.mode = req.mode;
  p.projected = req.use_projection;
  switch (req.mode) {
    case PromptMode::kNull: return null_prompt(params);
    case PromptMode::kRandom: {
      for (int i = 0; i < kRandomPromptLength; ++i) {
        p.tokens.push_back(1 + static_cast<int>(rng.uniform_int(kVocabSize - 1)));
      }
      break;
    }
    case PromptMode::kAligned: {
      if (req.caption.empty()) throw std::invalid_argument("aligned prompt needs a caption");
      p.tokens = tokenize(req.caption);
      break;
    }
    case PromptMode::kAllClasses: {
      if (req.class_names.empty()) throw std::invalid_argument("all-classes prompt needs class names");
      std::vector<Var<T>> rows;
      std::vector<Var<T>> pooled;
      std::int64_t used = 0;
      for (const auto& name : req.class_names) {
        auto tokens = tokenize(format_template(req.tmpl, name));
        auto enc = encode_text(tokens, params, req.use_projection);
        pooled.push_back(ops::l2_normalize_rows(enc.pooled));
        const auto take = std::min<std::int64_t>(enc.seq.dim(0), kAllClassesCapacity - used);
        if (take > 0) {
          rows.push_back(take == enc.seq.dim(0) ? enc.seq : ops::slice(enc.seq, 0, 0, take));
          p.tokens.insert(p.tokens.end(), tokens.begin(), tokens.begin() + take);
          used += take;
        }
      }
      p.seq = ops::concat(rows, 0);
      p.pooled = ops::l2_normalize_rows(ops::mean_axis(ops::concat(pooled, 0), 0));
      return p;
    }
  }
  if (p.tokens.empty()) {
    auto np = null_prompt(params);
    np.mode = req.mode;
    return np;
  }
  auto enc = encode_text(p.tokens, params, req.use_projection);
  p.seq = enc.seq;
  p.pooled = ops::l2_normalize_rows(enc.pooled);
  return p;
}

template <typename T>
ClassifierWeights<T> build_classifier_weights(const std::vector<std::string>& class_names, const std::string& tmpl,
                                              const ParamStore<T>& params, bool use_projection) {
  if (class_names.empty()) throw std::invalid_argument("classifier needs at least one class");
  const auto d = params.get("text.token_embedding").dim(1);
  ClassifierWeights<T> cw;
  cw.class_names = class_names;
  cw.tmpl = tmpl;
  cw.projected = use_projection;
  cw.weights = Tensor<T>({static_cast<std::int64_t>(class_names.size()), d});
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    auto enc = encode_text(tokenize(format_template(tmpl, class_names[k])), params, use_projection);
    const auto row = ops::l2_normalize_rows(enc.pooled.detach()).value();
    std::copy(row.data().begin(), row.data().end(), cw.weights.raw() + static_cast<std::int64_t>(k) * d);
  }
  return cw;
}

#define VERMOUTH_INSTANTIATE(T)                                                                              \
  template void init_text_encoder<T>(ParamStore<T>&, const TextConfig&, Rng&);                               \
  template TextEncoding<T> encode_text<T>(const std::vector<int>&, const ParamStore<T>&, bool);              \
  template PromptCondition<T> null_prompt<T>(const ParamStore<T>&);                                          \
  template PromptCondition<T> make_prompt<T>(const PromptRequest&, const ParamStore<T>&, Rng&);              \
  template ClassifierWeights<T> build_classifier_weights<T>(const std::vector<std::string>&, const std::string&, \
                                                            const ParamStore<T>&, bool);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
