#pragma once

#include <map>
#include <string>
#include <vector>

#include "vermouth/backbone.hpp"
#include "vermouth/params.hpp"

namespace vermouth {

// kDown fuses fine->coarse into a global vector; kUp fuses coarse->fine into a
// dense map.
enum class Flow { kDown, kUp };
// kSumBaseline: per-level conv, resample, sum (the ablation baseline).
enum class FusionKind { kUHead, kSumBaseline };

struct UHeadConfig {
  Flow flow = Flow::kDown;
  FusionKind fusion = FusionKind::kUHead;
  std::vector<int> block_channels{32, 64, 64};  // indexed by level
  int out_dim = 64;
  bool use_attn_maps = false;
  int max_groups = 8;
  int kernel = 3;
};

// Per-level inputs keyed by level (0 = finest). Every present level must
// carry an sd entry; expert/attn entries are optional.
template <typename T>
struct FusionInput {
  std::map<int, Var<T>> sd;
  std::map<int, Var<T>> expert;
  std::map<int, Var<T>> attn;
};

// Concatenates bundle taps per level (down, mid, up order) and, for attn_stages,
// the matching attention maps. Expert levels without a bundle level are dropped.
template <typename T>
FusionInput<T> make_fusion_input(const FeatureBundle<T>& bundle, const std::vector<Var<T>>& expert,
                                 const StageSet& attn_stages);

struct HeadLayout {
  std::vector<int> levels;            // ascending
  std::map<int, int> in_channels;     // after [sd; expert; attn] concatenation
  std::map<int, int> size;            // spatial side length
};

template <typename T>
HeadLayout describe_input(const FusionInput<T>& input, const UHeadConfig& cfg);

template <typename T>
void init_uhead(ParamStore<T>& params, const UHeadConfig& cfg, const HeadLayout& layout, Rng& rng);

// Closed-form parameter count of init_uhead for the same config and layout.
std::int64_t uhead_param_count(const UHeadConfig& cfg, const HeadLayout& layout);

// [sd; expert; attn] along channels; absent parts skipped.
template <typename T>
Var<T> concat_expert(const Var<T>& sd_level, const Var<T>& expert_level, const Var<T>& attn_level);

// Conv -> GroupNorm -> SiLU over [resampled carry; x]. carry may be undefined.
template <typename T>
Var<T> fuse_block(const Var<T>& x, const Var<T>& carry, const ParamStore<T>& params, const std::string& prefix,
                  int max_groups = 8);

template <typename T>
struct GlobalHeadOutput {
  Var<T> h;  // coarsest fused map
  Var<T> v;  // (1, out_dim)
};

template <typename T>
GlobalHeadOutput<T> uhead_global(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg);

// (out_dim, out_size, out_size).
template <typename T>
Var<T> uhead_dense(const FusionInput<T>& input, const ParamStore<T>& params, const UHeadConfig& cfg, int out_size);

}  // namespace vermouth
