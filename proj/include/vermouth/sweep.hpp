#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vermouth/run_config.hpp"

namespace vermouth {

inline constexpr const char* kArtifactVersion = "vermouth-0.1.0";

struct ReportRow {
  std::string factor;   // factor names joined with ';'
  std::string setting;  // matching settings joined with ';'
  std::string task;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
  double walltime_s = 0.0;
};

struct SweepReport {
  std::vector<ReportRow> rows;
  std::string config_hash;
  std::string version = kArtifactVersion;
};

// Total order: factor, then settings component-wise (numeric when both parse
// as numbers, else bytewise), then task, metric, seed.
bool row_less(const ReportRow& a, const ReportRow& b);
void sort_rows(std::vector<ReportRow>& rows);

// Sensitivity factors and the config key each one drives:
//   stages -> extract.stages, prompt -> prompt.mode, projection -> prompt.projection,
//   inversion -> extract.noise, attention -> head.attn_stages, time-steps -> extract.t.
const std::vector<std::string>& sweep_factors();
std::string factor_key(const std::string& factor);
void apply_factor(RunConfig& cfg, const std::string& factor, const std::string& setting);

using SweepGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;

// Initialized backbone and text encoder, loaded from cfg.backbone_path when
// set, otherwise pretrained on the synthetic caption set.
template <typename T>
ParamStore<T> build_backbone(const RunConfig& cfg, PretrainResult* result = nullptr);

TaskData build_task_data(const RunConfig& cfg, std::uint64_t seed);

struct RunResult {
  EvalResult eval;
  TrainHistory history;
  double walltime_s = 0.0;
};

// Trains and evaluates one seeded run on a private copy of the backbone.
// trained (optional) receives the final parameters.
template <typename T>
RunResult run_single(const RunConfig& cfg, std::uint64_t seed, const ParamStore<T>& backbone,
                     ParamStore<T>* trained = nullptr);

// Cartesian product of the grid x cfg.seeds; one row per cell and seed with the
// task's primary metric.
template <typename T>
SweepReport run_sweep(const SweepGrid& grid, const RunConfig& base, const ParamStore<T>& backbone);

// baseline (sum fusion, no expert), +fuse (U-head, no expert), +expert.
const std::vector<std::string>& ablation_settings();
RunConfig ablation_config(const RunConfig& base, const std::string& setting);
template <typename T>
SweepReport run_ablation(const RunConfig& base, const ParamStore<T>& backbone);

}  // namespace vermouth
