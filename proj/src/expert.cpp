#include "vermouth/expert.hpp"

#include <stdexcept>

#include "vermouth/backbone.hpp"
#include "vermouth/ops.hpp"

namespace vermouth {

std::string to_string(ExpertVariant v) {
  return v == ExpertVariant::kResidualNet ? "resnet" : "deep-narrow";
}

ExpertVariant parse_expert_variant(const std::string& s) {
  if (s == "resnet") return ExpertVariant::kResidualNet;
  if (s == "deep-narrow") return ExpertVariant::kDeepNarrow;
  throw std::invalid_argument("unknown expert variant: " + s);
}

void ExpertConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("expert needs at least one level");
  for (int c : channels) {
    if (c <= 0) throw std::invalid_argument("expert channels must be positive");
    if (use_adapters && adapter_bottleneck >= c) {
      throw std::invalid_argument("adapter bottleneck must be smaller than the channel count");
    }
  }
  if (adapter_bottleneck <= 0) throw std::invalid_argument("adapter bottleneck must be positive");
}

namespace {
std::string stage_name(int l) { return "expert.stage" + std::to_string(l); }
}  // namespace

template <typename T>
void init_adapter(ParamStore<T>& params, const std::string& prefix, int channels, int bottleneck, Rng& rng) {
  params.add(prefix + ".down.weight", init_fan_in<T>({bottleneck, channels, 1, 1}, channels, rng));
  params.add(prefix + ".down.bias", Tensor<T>({bottleneck}));
  params.add(prefix + ".up.weight", Tensor<T>({channels, bottleneck, 1, 1}));
  params.add(prefix + ".up.bias", Tensor<T>({channels}));
}

template <typename T>
void init_expert(ParamStore<T>& params, const ExpertConfig& cfg, int image_channels, int stem_stride, Rng& rng) {
  cfg.validate();
  int prev = image_channels;
  for (int l = 0; l < cfg.levels(); ++l) {
    const int c = cfg.channels[static_cast<std::size_t>(l)];
    const int k = l == 0 ? stem_stride : 3;
    const auto name = stage_name(l);
    params.add(name + ".conv.weight", init_fan_in<T>({c, prev, k, k}, static_cast<std::int64_t>(prev) * k * k, rng));
    params.add(name + ".conv.bias", init_uniform<T>({c}, T(0.1), rng));
    params.add(name + ".norm.weight", Tensor<T>({c}, T(1)));
    params.add(name + ".norm.bias", init_uniform<T>({c}, T(0.1), rng));
    if (cfg.variant == ExpertVariant::kDeepNarrow) {
      params.add(name + ".conv2.weight", init_fan_in<T>({c, c, 3, 3}, static_cast<std::int64_t>(c) * 9, rng));
      params.add(name + ".conv2.bias", Tensor<T>({c}));
    }
    if (cfg.use_adapters) init_adapter(params, "expert.adapter" + std::to_string(l), c, cfg.adapter_bottleneck, rng);
    prev = c;
  }
}

template <typename T>
Var<T> adapter(const Var<T>& feat, const ParamStore<T>& params, const std::string& prefix) {
  const auto& down = params.get(prefix + ".down.weight");
  if (feat.shape().size() != 3 || feat.dim(0) != down.dim(1)) {
    throw std::invalid_argument("adapter: feature has " + std::to_string(feat.shape().empty() ? 0 : feat.dim(0)) +
                                " channels, adapter expects " + std::to_string(down.dim(1)));
  }
  auto h = ops::silu(ops::conv2d(feat, down, params.get(prefix + ".down.bias"), 1, 0));
  auto branch = ops::conv2d(h, params.get(prefix + ".up.weight"), params.get(prefix + ".up.bias"), 1, 0);
  return ops::add(feat, branch);
}

template <typename T>
std::vector<Var<T>> expert_features(const Var<T>& img, const ParamStore<T>& params, const ExpertConfig& cfg,
                                    int image_size, int stem_stride) {
  if (img.shape().size() != 3 || img.dim(1) != image_size || img.dim(2) != image_size) {
    throw std::invalid_argument("expert_features: expected a " + std::to_string(image_size) + "x" +
                                std::to_string(image_size) + " image, got " + shape_str(img.shape()));
  }
  std::vector<Var<T>> feats;
  Var<T> h = img;
  for (int l = 0; l < cfg.levels(); ++l) {
    const auto name = stage_name(l);
    const int stride = l == 0 ? stem_stride : 2;
    const int pad = l == 0 ? 0 : 1;
    h = ops::conv2d(h, params.get(name + ".conv.weight"), params.get(name + ".conv.bias"), stride, pad);
    if (cfg.variant == ExpertVariant::kDeepNarrow) {
      h = ops::conv2d(ops::silu(h), params.get(name + ".conv2.weight"), params.get(name + ".conv2.bias"), 1, 1);
    }
    h = ops::silu(ops::group_norm(h, params.get(name + ".norm.weight"), params.get(name + ".norm.bias"),
                                  group_count(static_cast<int>(h.dim(0)), cfg.max_groups), T(1e-5)));
    if (cfg.use_adapters) h = adapter(h, params, "expert.adapter" + std::to_string(l));
    feats.push_back(h);
  }
  return feats;
}

#define VERMOUTH_INSTANTIATE(T)                                                                               \
  template void init_adapter<T>(ParamStore<T>&, const std::string&, int, int, Rng&);                          \
  template void init_expert<T>(ParamStore<T>&, const ExpertConfig&, int, int, Rng&);                          \
  template Var<T> adapter<T>(const Var<T>&, const ParamStore<T>&, const std::string&);                        \
  template std::vector<Var<T>> expert_features<T>(const Var<T>&, const ParamStore<T>&, const ExpertConfig&, int, \
                                                  int);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
