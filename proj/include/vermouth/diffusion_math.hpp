#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vermouth/rng.hpp"
#include "vermouth/tensor.hpp"

namespace vermouth {

enum class ScheduleKind { kScaledLinear, kLinear, kZero };
enum class NoiseMode { kNone, kDdpm, kDdimInversion };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(NoiseMode mode);
NoiseMode parse_noise_mode(const std::string& s);

// Per-step noise rates for a T-step forward process. Vectors are indexed by
// the 1-based step t; index 0 holds the clean-latent anchor (beta 0, alpha_bar 1).
struct ScheduleTable {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::kScaledLinear;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double alpha_bar_at(int t) const;
};

inline constexpr int kDefaultTrainSteps = 1000;
inline constexpr double kDefaultBetaStart = 8.5e-4;
inline constexpr double kDefaultBetaEnd = 1.2e-2;

ScheduleTable make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind);
inline ScheduleTable default_schedule() {
  return make_schedule(kDefaultTrainSteps, kDefaultBetaStart, kDefaultBetaEnd, ScheduleKind::kScaledLinear);
}

template <typename T>
struct NoisedLatent {
  Tensor<T> z_t;
  int t = 0;
  std::optional<Tensor<T>> eps;  // only for DDPM noising
  NoiseMode mode = NoiseMode::kNone;
};

// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const ScheduleTable& table);

template <typename T>
NoisedLatent<T> ddpm_noise(const Tensor<T>& z0, int t, const ScheduleTable& table, Rng& rng);

template <typename T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>& z, int t)>;

// Uniform integer grid 0 = t_0 < ... < t_n = t_target (repeated points dropped).
std::vector<int> ddim_grid(int t_target, int n_steps);

// Deterministic DDIM update run forward in t (latent -> noise).
template <typename T>
NoisedLatent<T> ddim_invert(const Tensor<T>& z0, int t_target, const EpsFn<T>& eps_fn, const ScheduleTable& table,
                            int n_steps);

// Deterministic DDIM sampling chain from t_start back to 0 over the same grid.
// eps_fn is evaluated at the later point of each step.
template <typename T>
Tensor<T> ddim_sample(const Tensor<T>& z_t, int t_start, const EpsFn<T>& eps_fn, const ScheduleTable& table,
                      int n_steps);

// Mean squared error over all elements.
template <typename T>
T simple_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps);

}  // namespace vermouth
