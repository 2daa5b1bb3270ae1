#include "vermouth/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <stdexcept>

#include "vermouth/tensor_io.hpp"

namespace vermouth {

namespace {

std::vector<std::string> split_setting(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(';', start);
    out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

bool as_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

// -1, 0, 1
int compare_settings(const std::string& a, const std::string& b) {
  const auto pa = split_setting(a), pb = split_setting(b);
  for (std::size_t i = 0; i < std::min(pa.size(), pb.size()); ++i) {
    double x, y;
    if (as_number(pa[i], x) && as_number(pb[i], y)) {
      if (x != y) return x < y ? -1 : 1;
    } else if (pa[i] != pb[i]) {
      return pa[i] < pb[i] ? -1 : 1;
    }
  }
  if (pa.size() != pb.size()) return pa.size() < pb.size() ? -1 : 1;
  return 0;
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

bool row_less(const ReportRow& a, const ReportRow& b) {
  if (a.factor != b.factor) return a.factor < b.factor;
  if (const int c = compare_settings(a.setting, b.setting); c != 0) return c < 0;
  if (a.task != b.task) return a.task < b.task;
  if (a.metric != b.metric) return a.metric < b.metric;
  return a.seed < b.seed;
}

void sort_rows(std::vector<ReportRow>& rows) { std::stable_sort(rows.begin(), rows.end(), row_less); }

const std::vector<std::string>& sweep_factors() {
  static const std::vector<std::string> f{"stages", "prompt", "projection", "inversion", "attention", "time-steps"};
  return f;
}

std::string factor_key(const std::string& factor) {
  if (factor == "stages") return "extract.stages";
  if (factor == "prompt") return "prompt.mode";
  if (factor == "projection") return "prompt.projection";
  if (factor == "inversion") return "extract.noise";
  if (factor == "attention") return "head.attn_stages";
  if (factor == "time-steps") return "extract.t";
  throw std::invalid_argument("unknown sweep factor: " + factor);
}

void apply_factor(RunConfig& cfg, const std::string& factor, const std::string& setting) {
  apply_setting(cfg, factor_key(factor), setting);
}

template <typename T>
ParamStore<T> build_backbone(const RunConfig& cfg, PretrainResult* result) {
  ParamStore<T> params;
  Rng rng(derive_seed(cfg.pretrain.seed, 0x424B424Eull));
  init_backbone(params, cfg.pipe.backbone, rng);
  TextConfig tc;
  tc.dim = cfg.pipe.backbone.text_dim;
  init_text_encoder(params, tc, rng);
  if (!cfg.backbone_path.empty()) {
    TensorList keep;
    for (auto& e : load_tensors(cfg.backbone_path)) {
      if (e.name.rfind("unet.", 0) == 0 || e.name.rfind("text.", 0) == 0) keep.push_back(std::move(e));
    }
    if (keep.empty()) throw std::runtime_error(cfg.backbone_path + " holds no backbone parameters");
    load_into(params, keep);
    return params;
  }
  const auto data = gen_pretrain_set(cfg.pretrain.images, cfg.pipe.backbone.image_size,
                                     derive_seed(cfg.pretrain.seed, 0x50524554ull));
  PretrainConfig pc;
  pc.epochs = cfg.pretrain.epochs;
  pc.batch_size = cfg.pretrain.batch_size;
  pc.lr = cfg.pretrain.lr;
  pc.cond_dropout = cfg.pretrain.cond_dropout;
  pc.seed = cfg.pretrain.seed;
  auto r = pretrain_backbone(data, params, cfg.pipe.backbone, default_schedule(), pc);
  if (result) *result = std::move(r);
  return params;
}

TaskData build_task_data(const RunConfig& cfg, std::uint64_t seed) {
  const auto spec = cfg.dataset(seed);
  switch (cfg.task) {
    case Task::kClassify: return task_data(gen_classification_set(spec));
    case Task::kRetrieve: return task_data(gen_sketch_photo_set(spec));
    case Task::kSegment: return task_data(gen_segmentation_set(spec));
  }
  throw std::logic_error("unhandled task");
}

template <typename T>
RunResult run_single(const RunConfig& cfg, std::uint64_t seed, const ParamStore<T>& backbone, ParamStore<T>* trained) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = build_task_data(cfg, seed);
  const auto task = cfg.task_config(seed);
  const auto pipe = cfg.pipeline();
  const auto table = default_schedule();
  auto params = backbone.clone();
  RunResult r;
  r.history = train_task(task, pipe, data, params, table);
  r.eval = evaluate_task(task, pipe, data, params, table);
  r.walltime_s = seconds_since(t0);
  if (trained) *trained = std::move(params);
  return r;
}

template <typename T>
SweepReport run_sweep(const SweepGrid& grid, const RunConfig& base, const ParamStore<T>& backbone) {
  if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
  std::string desc;
  std::string factor_name;
  for (const auto& [factor, values] : grid) {
    factor_key(factor);
    if (values.empty()) throw std::invalid_argument("factor " + factor + " has no values");
    factor_name += (factor_name.empty() ? "" : ";") + factor;
    desc += factor + "=";
    for (const auto& v : values) desc += v + ",";
    desc += ";";
  }
  // Cartesian product, last factor fastest.
  std::vector<std::vector<std::string>> cells{{}};
  for (const auto& [factor, values] : grid) {
    std::vector<std::vector<std::string>> next;
    for (const auto& c : cells) {
      for (const auto& v : values) {
        auto n = c;
        n.push_back(v);
        next.push_back(std::move(n));
      }
    }
    cells = std::move(next);
  }
  SweepReport report;
  report.config_hash = fnv_hex(config_hash(base) + "|" + desc);
  const auto metric = primary_metric(base.task);
  for (const auto& cell : cells) {
    RunConfig cfg = base;
    std::string setting;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      apply_factor(cfg, grid[i].first, cell[i]);
      setting += (i ? ";" : "") + cell[i];
    }
    for (auto seed : base.seeds) {
      const auto r = run_single(cfg, seed, backbone);
      report.rows.push_back({factor_name, setting, to_string(cfg.task), metric, r.eval.metrics.at(metric), seed,
                             base.record_walltime ? r.walltime_s : 0.0});
    }
  }
  sort_rows(report.rows);
  return report;
}

const std::vector<std::string>& ablation_settings() {
  static const std::vector<std::string> s{"baseline", "+fuse", "+expert"};
  return s;
}

RunConfig ablation_config(const RunConfig& base, const std::string& setting) {
  RunConfig cfg = base;
  if (setting == "baseline") {
    cfg.pipe.head.fusion = FusionKind::kSumBaseline;
    cfg.pipe.expert.enabled = false;
  } else if (setting == "+fuse") {
    cfg.pipe.head.fusion = FusionKind::kUHead;
    cfg.pipe.expert.enabled = false;
  } else if (setting == "+expert") {
    cfg.pipe.head.fusion = FusionKind::kUHead;
    cfg.pipe.expert.enabled = true;
  } else {
    throw std::invalid_argument("unknown ablation setting: " + setting);
  }
  if (!cfg.pipe.expert.enabled) cfg.train.trainable_groups.erase(ParamGroup::kExpert);
  return cfg;
}

template <typename T>
SweepReport run_ablation(const RunConfig& base, const ParamStore<T>& backbone) {
  SweepReport report;
  report.config_hash = fnv_hex(config_hash(base) + "|ablation");
  const auto metric = primary_metric(base.task);
  for (const auto& setting : ablation_settings()) {
    const auto cfg = ablation_config(base, setting);
    for (auto seed : base.seeds) {
      const auto r = run_single(cfg, seed, backbone);
      report.rows.push_back({"ablation", setting, to_string(cfg.task), metric, r.eval.metrics.at(metric), seed,
                             base.record_walltime ? r.walltime_s : 0.0});
    }
  }
  sort_rows(report.rows);
  return report;
}

#define VERMOUTH_INSTANTIATE(T)                                                                                 \
  template ParamStore<T> build_backbone<T>(const RunConfig&, PretrainResult*);                                  \
  template RunResult run_single<T>(const RunConfig&, std::uint64_t, const ParamStore<T>&, ParamStore<T>*);      \
  template SweepReport run_sweep<T>(const SweepGrid&, const RunConfig&, const ParamStore<T>&);                  \
  template SweepReport run_ablation<T>(const RunConfig&, const ParamStore<T>&);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
