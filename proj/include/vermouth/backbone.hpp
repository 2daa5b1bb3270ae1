#pragma once

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vermouth/conditioning.hpp"
#include "vermouth/diffusion_math.hpp"
#include "vermouth/params.hpp"

namespace vermouth {

enum class Stage { kDown, kMid, kUp };
std::string to_string(Stage s);

using StageSet = std::set<Stage>;
// Accepts "down", "mid", "up", "+"-joined combinations, "all" and "none".
StageSet parse_stages(const std::string& s);
std::string to_string(const StageSet& stages);

struct TapKey {
  Stage stage;
  int level;  // 0 = finest resolution
  auto operator<=>(const TapKey&) const = default;
};

struct BackboneConfig {
  int image_size = 64;
  int image_channels = 3;
  int latent_channels = 4;
  int latent_size = 16;
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 4};
  int text_dim = 64;
  int heads = 2;
  double input_scale = 0.18215;
  int max_groups = 8;
  int max_time_step = kDefaultTrainSteps;
  // Keep the prepended start token in the exported attention-map average.
  bool attn_include_start_token = false;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int channels(int level) const { return base_channels * channel_multipliers.at(static_cast<std::size_t>(level)); }
  int resolution(int level) const { return latent_size >> level; }
  int patch() const { return image_size / latent_size; }
  int time_dim() const { return 2 * base_channels; }
  void validate() const;
};

// Default-config backbone shrunk for finite-difference checks (4x4 latent).
BackboneConfig tiny_backbone_config();

struct FeatureMeta {
  int t = 0;
  NoiseMode noise_mode = NoiseMode::kNone;
  PromptMode prompt_mode = PromptMode::kNull;
  double cfg_scale = 1.0;
};

template <typename T>
struct FeatureBundle {
  std::map<TapKey, Var<T>> taps;  // (C_i, H_i, W_i)
  std::map<TapKey, Var<T>> attn;  // (1, H_i, W_i), nonnegative
  FeatureMeta meta;

  FeatureBundle detached() const;
  std::vector<int> levels() const;
};

// GroupNorm group count used throughout: min(max_groups, channels), reduced
// until it divides the channel count.
int group_count(int channels, int max_groups = 8);

template <typename T>
void init_backbone(ParamStore<T>& params, const BackboneConfig& cfg, Rng& rng);

// Fixed strided patch projection (no bias) scaled by input_scale.
template <typename T>
Tensor<T> encoder_kernel(const BackboneConfig& cfg);
template <typename T>
Tensor<T> encode_image(const Tensor<T>& img, const BackboneConfig& cfg);

template <typename T>
std::vector<T> timestep_embedding(int t, int dim);

template <typename T>
struct UNetOutput {
  Var<T> eps;
  FeatureBundle<T> bundle;
};

// cond is (n, text_dim); n may be 0. A learned start row is prepended inside
// every cross-attention so the softmax always has a key.
template <typename T>
UNetOutput<T> unet_forward(const Var<T>& z_t, int t, const Var<T>& cond, const ParamStore<T>& params,
                           const BackboneConfig& cfg, bool want_attn);

// eps_uncond + s * (eps_cond - eps_uncond).
template <typename T>
Tensor<T> cfg_eps(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s);
template <typename T>
Var<T> cfg_blend(const Var<T>& cond, const Var<T>& uncond, double s);

struct ExtractOptions {
  int t = 0;
  NoiseMode noise_mode = NoiseMode::kNone;
  double cfg_scale = 1.0;
  StageSet stages{Stage::kDown, Stage::kMid, Stage::kUp};
  bool want_attn = false;
  std::uint64_t noise_seed = 0;
  int ddim_steps = 10;
  // Use the text condition (instead of the null condition) for inversion eps.
  bool ddim_conditional = false;
};

template <typename T>
FeatureBundle<T> extract_features(const Tensor<T>& img, const PromptCondition<T>& prompt, const ExtractOptions& opts,
                                  const ParamStore<T>& params, const BackboneConfig& cfg, const ScheduleTable& table);

struct CaptionedImage {
  Tensor<float> image;
  std::string caption;
};

struct PretrainConfig {
  int epochs = 6;
  int batch_size = 8;
  double lr = 2e-3;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
  bool train_text = true;
};

struct PretrainResult {
  std::vector<double> loss_curve;  // mean loss per epoch
  long null_condition_steps = 0;
  long total_steps = 0;
};

template <typename T>
PretrainResult pretrain_backbone(const std::vector<CaptionedImage>& data, ParamStore<T>& params,
                                 const BackboneConfig& cfg, const ScheduleTable& table, const PretrainConfig& train);

}  // namespace vermouth
