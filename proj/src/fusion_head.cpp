#include "vermouth/fusion_head.hpp"

#include <cmath>
#include <stdexcept>

#include "vermouth/ops.hpp"

namespace vermouth {

template <typename T>
FusionInput<T> make_fusion_input(const FeatureBundle<T>& bundle, const std::vector<Var<T>>& expert,
                                 const StageSet& attn_stages) {
  FusionInput<T> in;
  std::map<int, std::vector<Var<T>>> sd, attn;
  for (const auto& [key, v] : bundle.taps) sd[key.level].push_back(v);
  for (const auto& [key, v] : bundle.attn) {
    if (attn_stages.count(key.stage) && sd.count(key.level)) attn[key.level].push_back(v);
  }
  for (auto& [level, parts] : sd) in.sd[level] = ops::concat(parts, 0);
  for (auto& [level, parts] : attn) in.attn[level] = ops::concat(parts, 0);
  for (std::size_t l = 0; l < expert.size(); ++l) {
    const int level = static_cast<int>(l);
    if (in.sd.count(level) && expert[l].defined()) in.expert[level] = expert[l];
  }
  return in;
}

template <typename T>
HeadLayout describe_input(const FusionInput<T>& input, const UHeadConfig& cfg) {
  if (input.sd.empty()) throw std::invalid_argument("fusion input has no diffusion features");
  HeadLayout layout;
  for (const auto& [level, v] : input.sd) {
    layout.levels.push_back(level);
    int c = static_cast<int>(v.dim(0));
    if (auto it = input.expert.find(level); it != input.expert.end()) c += static_cast<int>(it->second.dim(0));
    if (cfg.use_attn_maps) {
      if (auto it = input.attn.find(level); it != input.attn.end()) c += static_cast<int>(it->second.dim(0));
    }
    layout.in_channels[level] = c;
    layout.size[level] = static_cast<int>(v.dim(1));
  }
  for (int level : layout.levels) {
    if (level < 0 || level >= static_cast<int>(cfg.block_channels.size())) {
      throw std::invalid_argument("head has no block configured for level " + std::to_string(level));
    }
  }
  return layout;
}

namespace {

std::vector<int> flow_order(const UHeadConfig& cfg, const HeadLayout& layout) {
  std::vector<int> order = layout.levels;
  if (cfg.flow == Flow::kUp) std::reverse(order.begin(), order.end());
  return order;
}

int block_out(const UHeadConfig& cfg, int level) { return cfg.block_channels.at(static_cast<std::size_t>(level)); }

// Channels entering the final projection.
int final_channels(const UHeadConfig& cfg, const HeadLayout& layout) {
  const auto order = flow_order(cfg, layout);
  return block_out(cfg, order.back());
}

std::string block_name(int level) { return "uhead.block" + std::to_string(level); }
std::string sum_name(int level) { return "uhead.sum" + std::to_string(level); }

template <typename T>
Var<T> resample_to(const Var<T>& x, std::int64_t size) {
  if (x.dim(1) == size) return x;
  if (x.dim(1) > size) {
    Var<T> y = x;
    while (y.dim(1) > size && y.dim(1) % 2 == 0) y = ops::avg_pool2(y);
    if (y.dim(1) != size) y = ops::resize_bilinear(y, size, size);
    return y;
  }
  return ops::resize_bilinear(x, size, size);
}

template <typename T>
Var<T> assemble(const FusionInput<T>& input, const UHeadConfig& cfg, int level) {
  auto sd = input.sd.find(level);
  if (sd == input.sd.end()) throw std::invalid_argument("fusion input missing level " + std::to_string(level));
  Var<T> expert, attn;
  if (auto it = input.expert.find(level); it != input.expert.end()) expert = it->second;
  if (cfg.use_attn_maps) {
    if (auto it = input.attn.find(level); it != input.attn.end()) attn = it->second;
  }
  return concat_expert(sd->second, expert, attn);
}

template <typename T>
void check_layout(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg) {
  for (int level : describe_input(input, cfg).levels) {
    const auto name = (cfg.fusion == FusionKind::kUHead ? block_name(level) : sum_name(level)) + ".conv.weight";
    if (!params.contains(name)) {
      throw std::invalid_argument("head has no parameters for level " + std::to_string(level));
    }
  }
}

template <typename T>
Var<T> attention_pool(const Var<T>& h, const ParamStore<T>& params) {
  auto tokens = ops::to_tokens(h);  // (HW, C)
  const auto c = tokens.dim(1);
  auto keys = ops::linear(tokens, params.get("uhead.pool.key.weight"), Var<T>());
  auto scores = ops::scale(ops::matmul(params.get("uhead.pool.query"), ops::transpose(keys)),
                           T(1) / std::sqrt(static_cast<T>(c)));
  const auto& pos = params.get("uhead.pool.pos_bias");
  if (pos.value().numel() != tokens.dim(0)) {
    throw std::invalid_argument("attention pool configured for " + std::to_string(pos.value().numel()) +
                                " positions, got " + std::to_string(tokens.dim(0)));
  }
  auto weights = ops::softmax_rows(ops::add(scores, pos));
  auto pooled = ops::matmul(weights, tokens);  // (1, C)
  return ops::linear(pooled, params.get("uhead.pool.proj.weight"), params.get("uhead.pool.proj.bias"));
}

}  // namespace

template <typename T>
void init_uhead(ParamStore<T>& params, const UHeadConfig& cfg, const HeadLayout& layout, Rng& rng) {
  const auto order = flow_order(cfg, layout);
  const int k = cfg.kernel;
  int c_final;
  if (cfg.fusion == FusionKind::kUHead) {
    int carry = 0;
    for (int level : order) {
      const int cin = layout.in_channels.at(level) + carry;
      const int cout = block_out(cfg, level);
      params.add(block_name(level) + ".conv.weight",
                 init_fan_in<T>({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng));
      params.add(block_name(level) + ".conv.bias", Tensor<T>({cout}));
      params.add(block_name(level) + ".norm.weight", Tensor<T>({cout}, T(1)));
      params.add(block_name(level) + ".norm.bias", Tensor<T>({cout}));
      carry = cout;
    }
    c_final = carry;
  } else {
    c_final = final_channels(cfg, layout);
    for (int level : order) {
      const int cin = layout.in_channels.at(level);
      params.add(sum_name(level) + ".conv.weight",
                 init_fan_in<T>({c_final, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng));
      params.add(sum_name(level) + ".conv.bias", Tensor<T>({c_final}));
    }
  }
  const int d = cfg.out_dim;
  if (cfg.flow == Flow::kDown) {
    const int side = layout.size.at(order.back());
    params.add("uhead.pool.query", init_uniform<T>({1, c_final}, T(1), rng));
    params.add("uhead.pool.key.weight", init_fan_in<T>({c_final, c_final}, c_final, rng));
    params.add("uhead.pool.pos_bias", Tensor<T>({1, static_cast<std::int64_t>(side) * side}));
    params.add("uhead.pool.proj.weight", init_fan_in<T>({d, c_final}, c_final, rng));
    params.add("uhead.pool.proj.bias", Tensor<T>({d}));
  } else {
    params.add("uhead.proj.weight", init_fan_in<T>({d, c_final, 1, 1}, c_final, rng));
    params.add("uhead.proj.bias", Tensor<T>({d}));
  }
}

std::int64_t uhead_param_count(const UHeadConfig& cfg, const HeadLayout& layout) {
  const auto order = flow_order(cfg, layout);
  const std::int64_t k2 = static_cast<std::int64_t>(cfg.kernel) * cfg.kernel;
  std::int64_t n = 0;
  std::int64_t c_final = final_channels(cfg, layout);
  if (cfg.fusion == FusionKind::kUHead) {
    std::int64_t carry = 0;
    for (int level : order) {
      const std::int64_t cin = layout.in_channels.at(level) + carry;
      const std::int64_t cout = block_out(cfg, level);
      n += cin * k2 * cout + cout  // conv
           + 2 * cout;             // group norm affine
      carry = cout;
    }
  } else {
    for (int level : order) n += layout.in_channels.at(level) * k2 * c_final + c_final;
  }
  const std::int64_t d = cfg.out_dim;
  if (cfg.flow == Flow::kDown) {
    const std::int64_t side = layout.size.at(order.back());
    n += c_final                  // query
         + c_final * c_final      // key projection
         + side * side            // positional bias
         + c_final * d + d;       // output projection
  } else {
    n += c_final * d + d;
  }
  return n;
}

template <typename T>
Var<T> concat_expert(const Var<T>& sd_level, const Var<T>& expert_level, const Var<T>& attn_level) {
  std::vector<Var<T>> parts{sd_level};
  for (const auto* extra : {&expert_level, &attn_level}) {
    if (!extra->defined()) continue;
    if (extra->shape().size() != 3 || extra->dim(1) != sd_level.dim(1) || extra->dim(2) != sd_level.dim(2)) {
      throw std::logic_error("concat_expert: spatial mismatch " + shape_str(extra->shape()) + " vs " +
                             shape_str(sd_level.shape()));
    }
    parts.push_back(*extra);
  }
  return ops::concat(parts, 0);
}

template <typename T>
Var<T> fuse_block(const Var<T>& x, const Var<T>& carry, const ParamStore<T>& params, const std::string& prefix,
                  int max_groups) {
  Var<T> in = x;
  if (carry.defined()) in = ops::concat<T>({resample_to(carry, x.dim(1)), x}, 0);
  const auto& w = params.get(prefix + ".conv.weight");
  if (w.dim(1) != in.dim(0)) {
    throw std::invalid_argument(prefix + ": block expects " + std::to_string(w.dim(1)) + " input channels, got " +
                                std::to_string(in.dim(0)));
  }
  auto y = ops::conv2d(in, w, params.get(prefix + ".conv.bias"), 1, static_cast<int>(w.dim(2) / 2));
  y = ops::group_norm(y, params.get(prefix + ".norm.weight"), params.get(prefix + ".norm.bias"),
                      group_count(static_cast<int>(y.dim(0)), max_groups), T(1e-5));
  return ops::silu(y);
}

namespace {

template <typename T>
Var<T> fuse_levels(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg) {
  check_layout(input, params, cfg);
  const auto layout = describe_input(input, cfg);
  const auto order = flow_order(cfg, layout);
  if (cfg.fusion == FusionKind::kUHead) {
    Var<T> carry;
    for (int level : order) carry = fuse_block(assemble(input, cfg, level), carry, params, block_name(level), cfg.max_groups);
    return carry;
  }
  const auto target = layout.size.at(order.back());
  std::vector<Var<T>> parts;
  for (int level : order) {
    const auto& w = params.get(sum_name(level) + ".conv.weight");
    auto y = ops::conv2d(assemble(input, cfg, level), w, params.get(sum_name(level) + ".conv.bias"), 1,
                         static_cast<int>(w.dim(2) / 2));
    parts.push_back(resample_to(y, target));
  }
  return ops::sum_of(parts);
}

}  // namespace

template <typename T>
GlobalHeadOutput<T> uhead_global(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg) {
  if (cfg.flow != Flow::kDown) throw std::invalid_argument("uhead_global needs the down flow");
  GlobalHeadOutput<T> out;
  out.h = fuse_levels(input, params, cfg);
  out.v = attention_pool(out.h, params);
  return out;
}

template <typename T>
Var<T> uhead_dense(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg, int out_size) {
  if (cfg.flow != Flow::kUp) throw std::invalid_argument("uhead_dense needs the up flow");
  auto h = fuse_levels(input, params, cfg);
  auto y = ops::conv2d(h, params.get("uhead.proj.weight"), params.get("uhead.proj.bias"), 1, 0);
  return ops::resize_bilinear(y, out_size, out_size);
}

#define VERMOUTH_INSTANTIATE(T)                                                                                  \
  template FusionInput<T> make_fusion_input<T>(const FeatureBundle<T>&, const std::vector<Var<T>>&,              \
                                               const StageSet&);                                                 \
  template HeadLayout describe_input<T>(const FusionInput<T>&, const UHeadConfig&);                              \
  template void init_uhead<T>(ParamStore<T>&, const UHeadConfig&, const HeadLayout&, Rng&);                      \
  template Var<T> concat_expert<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> fuse_block<T>(const Var<T>&, const Var<T>&, const ParamStore<T>&, const std::string&, int);    \
  template GlobalHeadOutput<T> uhead_global<T>(const FusionInput<T>&, const ParamStore<T>&, const UHeadConfig&); \
  template Var<T> uhead_dense<T>(const FusionInput<T>&, const ParamStore<T>&, const UHeadConfig&, int);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
