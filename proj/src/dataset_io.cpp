#include "vermouth/dataset_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "vermouth/tensor_io.hpp"

namespace vermouth {

namespace {

using nlohmann::ordered_json;

std::string entry_name(const char* kind, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s/%06zu", kind, i);
  return buf;
}

ordered_json shape_json(const ShapeRecord& s) {
  return ordered_json{{"shape", to_string(s.shape)}, {"color", to_string(s.color)}, {"category", s.category},
                      {"cx", s.cx},   {"cy", s.cy},   {"radius", s.radius},        {"rotation", s.rotation}};
}

ShapeRecord shape_from_json(const ordered_json& j) {
  ShapeRecord s;
  s.shape = parse_shape(j.at("shape").get<std::string>());
  s.color = parse_color(j.at("color").get<std::string>());
  s.category = j.at("category").get<int>();
  s.cx = j.at("cx").get<double>();
  s.cy = j.at("cy").get<double>();
  s.radius = j.at("radius").get<double>();
  s.rotation = j.at("rotation").get<double>();
  return s;
}

ordered_json save_split(const std::vector<SampleRecord>& samples, const std::filesystem::path& dir,
                        const std::string& split) {
  TensorList tensors;
  ordered_json rows = ordered_json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    tensors.push_back({entry_name("image", i), s.image});
    ordered_json row{{"caption", s.caption}, {"label", s.label}, {"domain", to_string(s.domain)},
                     {"has_mask", s.mask.has_value()}};
    if (s.mask) {
      const auto n = static_cast<std::int64_t>(s.image.dim(1));
      Tensor<float> m({n, n});
      for (std::int64_t k = 0; k < m.numel(); ++k) m[k] = static_cast<float>((*s.mask)[static_cast<std::size_t>(k)]);
      tensors.push_back({entry_name("mask", i), std::move(m)});
    }
    ordered_json shapes = ordered_json::array();
    for (const auto& sh : s.shapes) shapes.push_back(shape_json(sh));
    row["shapes"] = shapes;
    rows.push_back(row);
  }
  const auto file = split + ".vmf";
  save_tensors(tensors, (dir / file).string());
  return ordered_json{{"file", file}, {"samples", rows}};
}

std::vector<SampleRecord> load_split(const ordered_json& j, const std::filesystem::path& dir) {
  const auto tensors = load_tensors((dir / j.at("file").get<std::string>()).string());
  std::vector<SampleRecord> out;
  const auto& rows = j.at("samples");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    SampleRecord s;
    const auto* img = find_entry(tensors, entry_name("image", i));
    if (!img) throw std::runtime_error("dataset file lacks " + entry_name("image", i));
    s.image = std::visit([](const auto& t) { return t.template cast<float>(); }, img->tensor);
    s.caption = row.at("caption").get<std::string>();
    s.label = row.at("label").get<int>();
    s.domain = row.at("domain").get<std::string>() == "sketch" ? Domain::kSketch : Domain::kPhoto;
    if (row.at("has_mask").get<bool>()) {
      const auto* m = find_entry(tensors, entry_name("mask", i));
      if (!m) throw std::runtime_error("dataset file lacks " + entry_name("mask", i));
      const auto mt = std::visit([](const auto& t) { return t.template cast<float>(); }, m->tensor);
      std::vector<int> mask(static_cast<std::size_t>(mt.numel()));
      for (std::int64_t k = 0; k < mt.numel(); ++k) mask[static_cast<std::size_t>(k)] = static_cast<int>(mt[k]);
      s.mask = std::move(mask);
    }
    for (const auto& sh : row.at("shapes")) s.shapes.push_back(shape_from_json(sh));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_task_data(const TaskData& data, const std::string& dir) {
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);
  ordered_json m;
  m["task"] = to_string(data.task);
  m["train_classes"] = data.train_classes;
  m["eval_classes"] = data.eval_classes;
  m["seen_classes"] = data.seen_classes;
  m["unseen_classes"] = data.unseen_classes;
  ordered_json splits = ordered_json::object();
  const std::pair<const char*, const std::vector<SampleRecord>*> all[] = {
      {"train", &data.train}, {"eval", &data.eval}, {"gallery", &data.gallery}, {"queries", &data.queries}};
  for (const auto& [name, samples] : all) {
    if (!samples->empty()) splits[name] = save_split(*samples, root, name);
  }
  m["splits"] = splits;
  std::ofstream f(root / "manifest.json");
  if (!f) throw std::runtime_error("cannot write " + (root / "manifest.json").string());
  f << m.dump(2) << "\n";
}

TaskData load_task_data(const std::string& dir) {
  const std::filesystem::path root(dir);
  std::ifstream f(root / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir);
  const auto m = ordered_json::parse(f);
  TaskData d;
  d.task = parse_task(m.at("task").get<std::string>());
  d.train_classes = m.at("train_classes").get<std::vector<std::string>>();
  d.eval_classes = m.at("eval_classes").get<std::vector<std::string>>();
  d.seen_classes = m.at("seen_classes").get<std::vector<int>>();
  d.unseen_classes = m.at("unseen_classes").get<std::vector<int>>();
  const auto& splits = m.at("splits");
  std::pair<const char*, std::vector<SampleRecord>*> all[] = {
      {"train", &d.train}, {"eval", &d.eval}, {"gallery", &d.gallery}, {"queries", &d.queries}};
  for (auto& [name, samples] : all) {
    if (splits.contains(name)) *samples = load_split(splits.at(name), root);
  }
  return d;
}

}  // namespace vermouth
