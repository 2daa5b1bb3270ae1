#pragma once

#include <string>
#include <vector>

#include "vermouth/params.hpp"

namespace vermouth {

// kResidualNet mirrors a shallow ResNet; kDeepNarrow is a second expert
// family (two convs per stage) behind the same interface.
enum class ExpertVariant { kResidualNet, kDeepNarrow };
std::string to_string(ExpertVariant v);
ExpertVariant parse_expert_variant(const std::string& s);

struct ExpertConfig {
  std::vector<int> channels{16, 32, 64};
  int adapter_bottleneck = 8;
  bool enabled = true;
  bool use_adapters = true;
  bool trainable = true;
  ExpertVariant variant = ExpertVariant::kResidualNet;
  int max_groups = 8;

  int levels() const { return static_cast<int>(channels.size()); }
  void validate() const;
};

// stem_stride maps the image onto the finest feature resolution (image/latent).
template <typename T>
void init_expert(ParamStore<T>& params, const ExpertConfig& cfg, int image_channels, int stem_stride, Rng& rng);

template <typename T>
void init_adapter(ParamStore<T>& params, const std::string& prefix, int channels, int bottleneck, Rng& rng);

// feat + up(SiLU(down(feat))) with 1x1 projections; up starts at zero.
template <typename T>
Var<T> adapter(const Var<T>& feat, const ParamStore<T>& params, const std::string& prefix);

// One feature map per level, finest first.
template <typename T>
std::vector<Var<T>> expert_features(const Var<T>& img, const ParamStore<T>& params, const ExpertConfig& cfg,
                                    int image_size, int stem_stride);

}  // namespace vermouth
