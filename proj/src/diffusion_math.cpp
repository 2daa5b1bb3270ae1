#include "vermouth/diffusion_math.hpp"

#include <cmath>
#include <stdexcept>

namespace vermouth {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kScaledLinear: return "scaled-linear";
    case ScheduleKind::kLinear: return "linear";
    case ScheduleKind::kZero: return "zero";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "scaled-linear") return ScheduleKind::kScaledLinear;
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "zero") return ScheduleKind::kZero;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::kNone: return "none";
    case NoiseMode::kDdpm: return "ddpm";
    case NoiseMode::kDdimInversion: return "ddim-inv";
  }
  return "?";
}

NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "none" || s == "w.o.") return NoiseMode::kNone;
  if (s == "ddpm") return NoiseMode::kDdpm;
  if (s == "ddim-inv" || s == "ddim inv" || s == "ddim") return NoiseMode::kDdimInversion;
  throw std::invalid_argument("unknown noise mode: " + s);
}

double ScheduleTable::alpha_bar_at(int t) const {
  if (t < 0 || t > steps) {
    throw std::out_of_range("time step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t)];
}

ScheduleTable make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0)) {
    throw std::invalid_argument("beta endpoints must lie in (0, 1)");
  }
  if (beta_start > beta_end) throw std::invalid_argument("beta_start exceeds beta_end");

  ScheduleTable table;
  table.steps = steps;
  table.kind = kind;
  table.beta_start = beta_start;
  table.beta_end = beta_end;
  const auto n = static_cast<std::size_t>(steps) + 1;
  table.beta.assign(n, 0.0);
  table.alpha.assign(n, 1.0);
  table.alpha_bar.assign(n, 1.0);

  const double sqrt_start = std::sqrt(beta_start);
  const double sqrt_end = std::sqrt(beta_end);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    double b = 0.0;
    switch (kind) {
      case ScheduleKind::kScaledLinear: {
        const double r = sqrt_start + frac * (sqrt_end - sqrt_start);
        b = r * r;
        break;
      }
      case ScheduleKind::kLinear: b = beta_start + frac * (beta_end - beta_start); break;
      case ScheduleKind::kZero: b = 0.0; break;
    }
    if (t == 1 && kind != ScheduleKind::kZero) b = beta_start;
    if (t == steps && kind != ScheduleKind::kZero && steps > 1) b = beta_end;
    const auto i = static_cast<std::size_t>(t);
    table.beta[i] = b;
    table.alpha[i] = 1.0 - b;
    table.alpha_bar[i] = table.alpha_bar[i - 1] * table.alpha[i];
  }
  return table;
}

namespace {
void check_step(int t, const ScheduleTable& table) {
  if (t < 1 || t > table.steps) {
    throw std::out_of_range("time step " + std::to_string(t) + " outside [1, " + std::to_string(table.steps) + "]");
  }
}
}  // namespace

template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const ScheduleTable& table) {
  require_same_shape(z0, eps, "q_sample");
  check_step(t, table);
  const double ab = table.alpha_bar_at(t);
  const T signal = static_cast<T>(std::sqrt(ab));
  const T noise = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape());
  for (std::int64_t i = 0; i < z0.numel(); ++i) out[i] = signal * z0[i] + noise * eps[i];
  return out;
}

template <typename T>
NoisedLatent<T> ddpm_noise(const Tensor<T>& z0, int t, const ScheduleTable& table, Rng& rng) {
  check_step(t, table);
  Tensor<T> eps(z0.shape());
  for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<T>(rng.normal());
  NoisedLatent<T> out;
  out.z_t = q_sample(z0, t, eps, table);
  out.t = t;
  out.eps = std::move(eps);
  out.mode = NoiseMode::kDdpm;
  return out;
}

std::vector<int> ddim_grid(int t_target, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("DDIM needs at least one step");
  if (t_target < 0) throw std::out_of_range("negative DDIM target step");
  std::vector<int> grid{0};
  for (int k = 1; k <= n_steps; ++k) {
    const int t = static_cast<int>((static_cast<long long>(k) * t_target) / n_steps);
    if (t != grid.back()) grid.push_back(t);
  }
  return grid;
}

template <typename T>
NoisedLatent<T> ddim_invert(const Tensor<T>& z0, int t_target, const EpsFn<T>& eps_fn, const ScheduleTable& table,
                            int n_steps) {
  if (t_target > table.steps) {
    throw std::out_of_range("DDIM target step " + std::to_string(t_target) + " exceeds " +
                            std::to_string(table.steps));
  }
  const auto grid = ddim_grid(t_target, n_steps);
  Tensor<T> z = z0;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const int t_now = grid[k];
    const int t_next = grid[k + 1];
    const double ab_now = table.alpha_bar_at(t_now);
    const double ab_next = table.alpha_bar_at(t_next);
    const double ratio = std::sqrt(ab_next / ab_now);
    const double coef = std::sqrt(1.0 - ab_next) - ratio * std::sqrt(1.0 - ab_now);
    const Tensor<T> eps = eps_fn(z, t_now);
    require_same_shape(z, eps, "ddim_invert eps");
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      z[i] = static_cast<T>(ratio * static_cast<double>(z[i]) + coef * static_cast<double>(eps[i]));
    }
  }
  NoisedLatent<T> out;
  out.z_t = std::move(z);
  out.t = t_target;
  out.mode = NoiseMode::kDdimInversion;
  return out;
}

template <typename T>
Tensor<T> ddim_sample(const Tensor<T>& z_t, int t_start, const EpsFn<T>& eps_fn, const ScheduleTable& table,
                      int n_steps) {
  if (t_start > table.steps) throw std::out_of_range("DDIM start step exceeds schedule length");
  const auto grid = ddim_grid(t_start, n_steps);
  Tensor<T> z = z_t;
  for (std::size_t k = grid.size() - 1; k > 0; --k) {
    const int t_now = grid[k];
    const int t_prev = grid[k - 1];
    const double ab_now = table.alpha_bar_at(t_now);
    const double ab_prev = table.alpha_bar_at(t_prev);
    const double ratio = std::sqrt(ab_prev / ab_now);
    const double coef = std::sqrt(1.0 - ab_prev) - ratio * std::sqrt(1.0 - ab_now);
    const Tensor<T> eps = eps_fn(z, t_now);
    require_same_shape(z, eps, "ddim_sample eps");
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      z[i] = static_cast<T>(ratio * static_cast<double>(z[i]) + coef * static_cast<double>(eps[i]));
    }
  }
  return z;
}

template <typename T>
T simple_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps) {
  require_same_shape(eps_pred, eps, "simple_loss");
  if (eps.numel() == 0) throw std::invalid_argument("simple_loss on empty tensors");
  double acc = 0.0;
  for (std::int64_t i = 0; i < eps.numel(); ++i) {
    const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_pred[i]);
    acc += d * d;
  }
  return static_cast<T>(acc / static_cast<double>(eps.numel()));
}

#define VERMOUTH_INSTANTIATE(T)                                                                             \
  template Tensor<T> q_sample<T>(const Tensor<T>&, int, const Tensor<T>&, const ScheduleTable&);             \
  template NoisedLatent<T> ddpm_noise<T>(const Tensor<T>&, int, const ScheduleTable&, Rng&);                 \
  template NoisedLatent<T> ddim_invert<T>(const Tensor<T>&, int, const EpsFn<T>&, const ScheduleTable&, int); \
  template Tensor<T> ddim_sample<T>(const Tensor<T>&, int, const EpsFn<T>&, const ScheduleTable&, int);      \
  template T simple_loss<T>(const Tensor<T>&, const Tensor<T>&);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
