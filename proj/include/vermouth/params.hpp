#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vermouth/rng.hpp"
#include "vermouth/var.hpp"

namespace vermouth {

// Normalization-layer affine parameters form the "norm" group; membership is
// decided by name so it survives a checkpoint round trip.
bool is_norm_param(const std::string& name);

// Named trainable tensors in insertion order. Modules are stateless and look
// their weights up here by name.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init);
  const Var<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::int64_t count_elements(const std::string& prefix = "") const;

  // Marks exactly the params matching the predicate as trainable.
  void set_trainable(const std::function<bool(const std::string&)>& pred);
  std::vector<std::string> trainable_names() const;
  void zero_grad();

  // Independent copy (fresh nodes, no gradients).
  ParamStore clone() const;

  std::map<std::string, Tensor<T>> to_map() const;
  // Replaces values of every named entry; unknown names are an error.
  void load_map(const std::map<std::string, Tensor<T>>& values);
  // Adds entries that are missing and overwrites existing ones.
  void merge_map(const std::map<std::string, Tensor<T>>& values);

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Deterministic initializers.
template <typename T>
Tensor<T> init_uniform(Shape shape, T bound, Rng& rng);
// He-style bound sqrt(3 / fan_in) * gain.
template <typename T>
Tensor<T> init_fan_in(Shape shape, std::int64_t fan_in, Rng& rng, double gain = 1.0);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Decoupled-weight-decay Adam over the trainable entries of a store.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
  // Scales gradients by grad_scale, clips the global L2 norm, then steps.
  // Returns the pre-clip gradient norm.
  double step(ParamStore<T>& params, double grad_scale = 1.0);
  long steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace vermouth
