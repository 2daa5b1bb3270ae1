#include "vermouth/params.hpp"

#include <cmath>
#include <stdexcept>

namespace vermouth {

bool is_norm_param(const std::string& name) {
  // Any dotted component starting with "norm" (norm, norm1, norm_out, ...).
  std::size_t start = 0;
  while (start <= name.size()) {
    const auto end = name.find('.', start);
    const auto part = name.substr(start, end == std::string::npos ? std::string::npos : end - start);
    if (part.rfind("norm", 0) == 0) return true;
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return false;
}

template <typename T>
Var<T> ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var<T> v(std::move(init), true);
  index_[name] = entries_.size();
  names_.push_back(name);
  entries_.push_back(v);
  return v;
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
std::int64_t ParamStore<T>::count_elements(const std::string& prefix) const {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].rfind(prefix, 0) == 0) n += entries_[i].value().numel();
  }
  return n;
}

template <typename T>
void ParamStore<T>::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (std::size_t i = 0; i < names_.size(); ++i) entries_[i].set_requires_grad(pred(names_[i]));
}

template <typename T>
std::vector<std::string> ParamStore<T>::trainable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (entries_[i].requires_grad()) out.push_back(names_[i]);
  }
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.zero_grad();
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore<T> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.add(names_[i], entries_[i].value()).set_requires_grad(entries_[i].requires_grad());
  }
  return out;
}

template <typename T>
std::map<std::string, Tensor<T>> ParamStore<T>::to_map() const {
  std::map<std::string, Tensor<T>> out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.emplace(names_[i], entries_[i].value());
  return out;
}

template <typename T>
void ParamStore<T>::load_map(const std::map<std::string, Tensor<T>>& values) {
  for (const auto& [name, t] : values) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("checkpoint entry has no matching parameter: " + name);
    const auto& dst = entries_[it->second].value();
    if (dst.shape() != t.shape()) {
      throw std::invalid_argument("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " +
                                  shape_str(dst.shape()));
    }
  }
  for (const auto& [name, t] : values) entries_[index_.at(name)].mutable_value() = t;
}

template <typename T>
void ParamStore<T>::merge_map(const std::map<std::string, Tensor<T>>& values) {
  for (const auto& [name, t] : values) {
    if (contains(name)) {
      entries_[index_.at(name)].mutable_value() = t;
    } else {
      add(name, t);
    }
  }
}

template <typename T>
Tensor<T> init_uniform(Shape shape, T bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> init_fan_in(Shape shape, std::int64_t fan_in, Rng& rng, double gain) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  return init_uniform<T>(std::move(shape), static_cast<T>(bound), rng);
}

template <typename T>
double AdamW<T>::step(ParamStore<T>& params, double grad_scale) {
  const auto names = params.trainable_names();
  double sq = 0.0;
  for (const auto& n : names) {
    const auto& v = params.get(n);
    if (!v.has_grad()) continue;
    for (auto g : v.node()->grad.data()) sq += static_cast<double>(g) * g * grad_scale * grad_scale;
  }
  const double norm = std::sqrt(sq);
  double clip = 1.0;
  if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& n : names) {
    Var<T> v = params.get(n);
    if (!v.has_grad()) continue;
    const Tensor<T>& g = v.node()->grad;
    auto& m = m_[n];
    auto& s = v_[n];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(g.numel()), 0.0);
      s.assign(static_cast<std::size_t>(g.numel()), 0.0);
    }
    auto& w = v.mutable_value();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double gi = static_cast<double>(g[i]) * grad_scale * clip;
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gi;
      s[k] = cfg_.beta2 * s[k] + (1.0 - cfg_.beta2) * gi * gi;
      const double update = (m[k] / bc1) / (std::sqrt(s[k] / bc2) + cfg_.eps) + cfg_.weight_decay * w[i];
      w[i] = static_cast<T>(w[i] - cfg_.lr * update);
    }
  }
  return norm;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class AdamW<float>;
template class AdamW<double>;
template Tensor<float> init_uniform<float>(Shape, float, Rng&);
template Tensor<double> init_uniform<double>(Shape, double, Rng&);
template Tensor<float> init_fan_in<float>(Shape, std::int64_t, Rng&, double);
template Tensor<double> init_fan_in<double>(Shape, std::int64_t, Rng&, double);

}  // namespace vermouth
