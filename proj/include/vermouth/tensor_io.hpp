#pragma once

#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "vermouth/params.hpp"
#include "vermouth/tensor.hpp"

namespace vermouth {

// VMF1 container: "VMF1", u32 LE header length, JSON header
// {"entries": [{name, dtype, shape, offset, length}]}, then LE row-major payloads.
// offset/length are bytes relative to the start of the payload section.

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct TensorEntry {
  std::string name;
  AnyTensor tensor;
};
using TensorList = std::vector<TensorEntry>;

std::string encode_tensors(const TensorList& entries);
TensorList decode_tensors(const std::string& bytes);

void save_tensors(const TensorList& entries, const std::string& path);
TensorList load_tensors(const std::string& path);

const TensorEntry* find_entry(const TensorList& entries, const std::string& name);

template <typename T>
TensorList to_tensor_list(const ParamStore<T>& params);
// Converts entries to T (f32 <-> f64 casts allowed) and loads them by name.
template <typename T>
void load_into(ParamStore<T>& params, const TensorList& entries, bool allow_new = false);

template <typename T>
void save_checkpoint(const ParamStore<T>& params, const std::string& path) {
  save_tensors(to_tensor_list(params), path);
}

}  // namespace vermouth
