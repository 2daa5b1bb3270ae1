#include "vermouth/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace vermouth {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected a number, got '" + s + "'");
  }
}

long long parse_int(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected an integer, got '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "on" || s == "1" || s == "yes" || s == "w.") return true;
  if (s == "false" || s == "off" || s == "0" || s == "no" || s == "w.o.") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + s + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) {
    const auto a = part.find_first_not_of(' ');
    const auto b = part.find_last_not_of(' ');
    out.push_back(a == std::string::npos ? "" : part.substr(a, b - a + 1));
  }
  return out;
}

template <typename V, typename F>
std::string join(const std::vector<V>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

std::vector<int> parse_ints(const std::string& key, const std::string& s) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) out.push_back(static_cast<int>(parse_int(key, p)));
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define DOUBLE_FIELD(name, member)                                                             \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return fmt_double(c.member); },                             \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); } \
  }
#define INT_FIELD(name, member, type)                                                          \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                         \
        [](RunConfig& c, const std::string& k, const std::string& v) {                         \
          c.member = static_cast<type>(parse_int(k, v));                                       \
        }                                                                                      \
  }
#define BOOL_FIELD(name, member)                                                               \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return fmt_bool(c.member); },                               \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); } \
  }
#define STRING_FIELD(name, member)                                                             \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return c.member; },                                         \
        [](RunConfig& c, const std::string&, const std::string& v) { c.member = v; }           \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      {"task", [](const RunConfig& c) { return to_string(c.task); },
       [](RunConfig& c, const std::string&, const std::string& v) { c = RunConfig::defaults(parse_task(v)); }},
      INT_FIELD("seed", seed, std::uint64_t),
      {"seeds", [](const RunConfig& c) { return join(c.seeds, [](auto s) { return std::to_string(s); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.seeds.clear();
         for (const auto& p : split(v, ',')) c.seeds.push_back(static_cast<std::uint64_t>(parse_int(k, p)));
         if (c.seeds.empty()) throw std::invalid_argument("seeds: empty list");
       }},
      INT_FIELD("train.epochs", train.epochs, int),
      INT_FIELD("train.batch_size", train.batch_size, int),
      DOUBLE_FIELD("train.lr", train.optim.lr),
      DOUBLE_FIELD("train.weight_decay", train.optim.weight_decay),
      DOUBLE_FIELD("train.clip_norm", train.optim.clip_norm),
      DOUBLE_FIELD("train.temperature", train.temperature),
      {"train.groups", [](const RunConfig& c) { return to_string(c.train.trainable_groups); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.train.trainable_groups = parse_groups(v); }},
      INT_FIELD("train.eval_every", train.eval_every, int),
      INT_FIELD("train.ignore_index", train.ignore_index, int),
      INT_FIELD("extract.t", pipe.extract.t, int),
      {"extract.noise", [](const RunConfig& c) { return to_string(c.pipe.extract.noise_mode); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.pipe.extract.noise_mode = parse_noise_mode(v); }},
      {"extract.stages", [](const RunConfig& c) { return to_string(c.pipe.extract.stages); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.pipe.extract.stages = parse_stages(v); }},
      INT_FIELD("extract.ddim_steps", pipe.extract.ddim_steps, int),
      BOOL_FIELD("extract.ddim_conditional", pipe.extract.ddim_conditional),
      BOOL_FIELD("extract.apply_cfg", apply_cfg),
      DOUBLE_FIELD("model.cfg_scale", guidance_scale),
      BOOL_FIELD("model.attn_include_start_token", pipe.backbone.attn_include_start_token),
      {"prompt.mode", [](const RunConfig& c) { return to_string(c.pipe.prompt_mode); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.pipe.prompt_mode = parse_prompt_mode(v); }},
      BOOL_FIELD("prompt.projection", pipe.use_projection),
      STRING_FIELD("prompt.template", pipe.class_template),
      {"head.fusion", [](const RunConfig& c) { return std::string(c.pipe.head.fusion == FusionKind::kUHead ? "uhead" : "sum"); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "uhead") {
           c.pipe.head.fusion = FusionKind::kUHead;
         } else if (v == "sum") {
           c.pipe.head.fusion = FusionKind::kSumBaseline;
         } else {
           throw std::invalid_argument(k + ": expected uhead or sum, got '" + v + "'");
         }
       }},
      {"head.attn_stages", [](const RunConfig& c) {
         return c.pipe.head.use_attn_maps ? to_string(c.pipe.attn_stages) : std::string("none");
       },
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.pipe.attn_stages = parse_stages(v);
         c.pipe.head.use_attn_maps = !c.pipe.attn_stages.empty();
       }},
      {"head.channels", [](const RunConfig& c) { return join(c.pipe.head.block_channels, [](int x) { return std::to_string(x); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.pipe.head.block_channels = parse_ints(k, v); }},
      BOOL_FIELD("expert.enabled", pipe.expert.enabled),
      BOOL_FIELD("expert.adapters", pipe.expert.use_adapters),
      BOOL_FIELD("expert.trainable", pipe.expert.trainable),
      INT_FIELD("expert.bottleneck", pipe.expert.adapter_bottleneck, int),
      {"expert.variant", [](const RunConfig& c) { return to_string(c.pipe.expert.variant); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.pipe.expert.variant = parse_expert_variant(v); }},
      {"expert.channels", [](const RunConfig& c) { return join(c.pipe.expert.channels, [](int x) { return std::to_string(x); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.pipe.expert.channels = parse_ints(k, v); }},
      BOOL_FIELD("retrieval.use_v", pipe.retrieval_use_v),
      {"data.categories", [](const RunConfig& c) { return join(c.data.categories, [](const Category& x) { return x.name(); }); },
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.data.categories.clear();
         for (const auto& p : split(v, ',')) c.data.categories.push_back(parse_category(p));
       }},
      {"data.test_categories", [](const RunConfig& c) { return join(c.data.test_categories, [](int x) { return std::to_string(x); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.test_categories = parse_ints(k, v); }},
      INT_FIELD("data.n_per_class", data.n_per_class, int),
      INT_FIELD("data.n_test_per_class", data.n_test_per_class, int),
      INT_FIELD("data.shots", data.shots, int),
      DOUBLE_FIELD("data.min_radius", data.min_radius),
      DOUBLE_FIELD("data.max_radius", data.max_radius),
      DOUBLE_FIELD("data.color_jitter", data.color_jitter),
      DOUBLE_FIELD("data.texture_amplitude", data.texture_amplitude),
      INT_FIELD("data.max_shapes", data.max_shapes, int),
      INT_FIELD("pretrain.images", pretrain.images, int),
      INT_FIELD("pretrain.epochs", pretrain.epochs, int),
      DOUBLE_FIELD("pretrain.lr", pretrain.lr),
      INT_FIELD("pretrain.batch_size", pretrain.batch_size, int),
      DOUBLE_FIELD("pretrain.cond_dropout", pretrain.cond_dropout),
      INT_FIELD("pretrain.seed", pretrain.seed, std::uint64_t),
      STRING_FIELD("paths.backbone", backbone_path),
      STRING_FIELD("paths.checkpoint", checkpoint_path),
      STRING_FIELD("paths.out", out_dir),
      BOOL_FIELD("report.walltime", record_walltime),
  };
  return f;
}

#undef DOUBLE_FIELD
#undef INT_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

}  // namespace

DatasetSpec default_dataset(Task task) {
  DatasetSpec d;
  switch (task) {
    case Task::kClassify:
      d.categories = {parse_category("circle"), parse_category("cross"), parse_category("ring")};
      d.n_per_class = 16;
      d.shots = 16;
      d.n_test_per_class = 64;
      break;
    case Task::kRetrieve:
      for (auto s : all_shapes()) d.categories.push_back({s, std::nullopt});
      d.test_categories = {6, 7, 8};
      d.n_per_class = 16;
      d.shots = 16;
      d.n_test_per_class = 16;
      break;
    case Task::kSegment:
      d.categories = {parse_category("circle"), parse_category("square"), parse_category("triangle")};
      d.n_per_class = 128;
      d.shots = 128;
      d.n_test_per_class = 16;
      break;
  }
  return d;
}

RunConfig RunConfig::defaults(Task task) {
  RunConfig c;
  c.task = task;
  c.train = TaskConfig::defaults(task);
  c.pipe = PipelineConfig::defaults(task);
  c.data = default_dataset(task);
  return c;
}

void RunConfig::validate() const {
  train.validate(true);
  pipe.backbone.validate();
  pipe.expert.validate();
  data.validate();
  if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
  if (pipe.extract.t < 0 || pipe.extract.t > pipe.backbone.max_time_step) {
    throw std::invalid_argument("extract.t outside [0, " + std::to_string(pipe.backbone.max_time_step) + "]");
  }
  if (pipe.extract.stages.empty()) throw std::invalid_argument("extract.stages must select at least one stage");
  if (pipe.head.out_dim != pipe.backbone.text_dim) throw std::invalid_argument("head output must match the text dim");
}

TaskConfig RunConfig::task_config(std::uint64_t run_seed) const {
  TaskConfig t = train;
  t.task = task;
  t.seed = run_seed;
  return t;
}

PipelineConfig RunConfig::pipeline() const {
  PipelineConfig p = pipe;
  p.extract.cfg_scale = apply_cfg ? guidance_scale : 1.0;
  return p;
}

DatasetSpec RunConfig::dataset(std::uint64_t run_seed) const {
  DatasetSpec d = data;
  d.seed = run_seed;
  d.image_size = pipe.backbone.image_size;
  return d;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw std::invalid_argument("unknown config key: " + key);
}

const std::vector<std::string>& setting_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

Settings settings_from_json(const nlohmann::ordered_json& flat) {
  if (!flat.is_object()) throw std::invalid_argument("config must be a flat JSON object");
  Settings out;
  for (const auto& [k, v] : flat.items()) {
    std::string s;
    if (v.is_string()) {
      s = v.get<std::string>();
    } else if (v.is_boolean()) {
      s = v.get<bool>() ? "true" : "false";
    } else if (v.is_number_integer() || v.is_number_unsigned()) {
      s = v.dump();
    } else if (v.is_number_float()) {
      s = fmt_double(v.get<double>());
    } else if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const auto& x = v[i];
        s += (i ? "," : "") + (x.is_string() ? x.get<std::string>() : x.dump());
      }
    } else {
      throw std::invalid_argument("config key " + k + ": nested objects are not supported; use dotted keys");
    }
    out.emplace_back(k, s);
  }
  return out;
}

Settings read_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read config file: " + path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config file " + path + " is not valid JSON: " + e.what());
  }
  return settings_from_json(j);
}

RunConfig resolve_config(const Settings& settings, Task default_task) {
  Task task = default_task;
  for (const auto& [k, v] : settings) {
    if (k == "task") task = parse_task(v);
  }
  RunConfig cfg = RunConfig::defaults(task);
  for (const auto& [k, v] : settings) {
    if (k != "task") apply_setting(cfg, k, v);
  }
  return cfg;
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& f : fields()) j[f.key] = f.get(cfg);
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  auto j = to_json(cfg);
  // Output locations do not change results.
  for (const char* k : {"paths.backbone", "paths.checkpoint", "paths.out", "report.walltime"}) j.erase(k);
  const auto s = j.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vermouth
