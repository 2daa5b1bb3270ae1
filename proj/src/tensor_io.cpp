#include "vermouth/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace vermouth {

namespace {

constexpr char kMagic[4] = {'V', 'M', 'F', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void append_le(std::string& out, const T* data, std::size_t count) {
  const auto* bytes = reinterpret_cast<const char*>(data);
  if constexpr (std::endian::native == std::endian::little) {
    out.append(bytes, count * sizeof(T));
  } else {
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t b = sizeof(T); b-- > 0;) out.push_back(bytes[i * sizeof(T) + b]);
  }
}

template <typename T>
void read_le(const char* src, T* dst, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, count * sizeof(T));
  } else {
    auto* out = reinterpret_cast<char*>(dst);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t b = 0; b < sizeof(T); ++b) out[i * sizeof(T) + b] = src[i * sizeof(T) + sizeof(T) - 1 - b];
  }
}

const char* dtype_of(const AnyTensor& t) { return std::holds_alternative<Tensor<float>>(t) ? "f32" : "f64"; }

}  // namespace

std::string encode_tensors(const TensorList& entries) {
  std::set<std::string> seen;
  nlohmann::json list = nlohmann::json::array();
  std::string payload;
  for (const auto& e : entries) {
    if (e.name.empty()) throw FormatError("tensor entry with an empty name");
    if (!seen.insert(e.name).second) throw FormatError("duplicate tensor name: " + e.name);
    const auto offset = payload.size();
    Shape shape;
    std::visit(
        [&](const auto& t) {
          shape = t.shape();
          append_le(payload, t.raw(), static_cast<std::size_t>(t.numel()));
        },
        e.tensor);
    list.push_back({{"name", e.name},
                    {"dtype", dtype_of(e.tensor)},
                    {"shape", shape},
                    {"offset", offset},
                    {"length", payload.size() - offset}});
  }
  const std::string header = nlohmann::json{{"entries", list}}.dump();
  if (header.size() > 0xFFFFFFFFu) throw FormatError("header too large");
  std::string out(kMagic, 4);
  const auto len = static_cast<std::uint32_t>(header.size());
  append_le(out, &len, 1);
  out += header;
  out += payload;
  return out;
}

TensorList decode_tensors(const std::string& bytes) {
  if (bytes.size() < 8) throw FormatError("file too short for a VMF1 header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic: not a VMF1 file");
  std::uint32_t header_len = 0;
  read_le(bytes.data() + 4, &header_len, 1);
  if (8 + static_cast<std::size_t>(header_len) > bytes.size()) throw FormatError("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("entries") || !header["entries"].is_array()) {
    throw FormatError("header lacks an entries array");
  }
  const std::size_t payload_start = 8 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;
  TensorList out;
  std::set<std::string> seen;
  try {
    for (const auto& e : header["entries"]) {
      const auto name = e.at("name").get<std::string>();
      if (!seen.insert(name).second) throw FormatError("duplicate tensor name: " + name);
      const auto dtype = e.at("dtype").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      for (auto d : shape) {
        if (d < 0) throw FormatError("negative dimension in " + name);
      }
      const auto numel = static_cast<std::uint64_t>(shape_numel(shape));
      const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
      if (width == 0) throw FormatError("unknown dtype '" + dtype + "' for " + name);
      if (length != numel * width) throw FormatError("length does not match shape for " + name);
      if (offset > payload_size || length > payload_size - offset) throw FormatError("truncated payload for " + name);
      const char* src = bytes.data() + payload_start + offset;
      if (width == 4) {
        Tensor<float> t(shape);
        read_le(src, t.raw(), static_cast<std::size_t>(numel));
        out.push_back({name, std::move(t)});
      } else {
        Tensor<double> t(shape);
        read_le(src, t.raw(), static_cast<std::size_t>(numel));
        out.push_back({name, std::move(t)});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed entry: ") + e.what());
  }
  return out;
}

void save_tensors(const TensorList& entries, const std::string& path) {
  const auto bytes = encode_tensors(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

TensorList load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_tensors(ss.str());
}

const TensorEntry* find_entry(const TensorList& entries, const std::string& name) {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
TensorList to_tensor_list(const ParamStore<T>& params) {
  TensorList out;
  for (const auto& n : params.names()) out.push_back({n, params.get(n).value()});
  return out;
}

template <typename T>
void load_into(ParamStore<T>& params, const TensorList& entries, bool allow_new) {
  std::map<std::string, Tensor<T>> values;
  for (const auto& e : entries) {
    values[e.name] = std::visit([](const auto& t) { return t.template cast<T>(); }, e.tensor);
  }
  if (!allow_new) {
    params.load_map(values);
    return;
  }
  // File order is kept for new entries so a re-save reproduces the same bytes.
  std::map<std::string, Tensor<T>> existing;
  for (const auto& [name, t] : values) {
    if (params.contains(name)) existing[name] = t;
  }
  params.load_map(existing);
  for (const auto& e : entries) {
    if (!params.contains(e.name)) params.add(e.name, values.at(e.name));
  }
}

template TensorList to_tensor_list<float>(const ParamStore<float>&);
template TensorList to_tensor_list<double>(const ParamStore<double>&);
template void load_into<float>(ParamStore<float>&, const TensorList&, bool);
template void load_into<double>(ParamStore<double>&, const TensorList&, bool);

}  // namespace vermouth
