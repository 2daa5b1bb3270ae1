#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vermouth/task_heads.hpp"

namespace vermouth {

struct PretrainSettings {
  int images = 256;
  int epochs = 4;
  double lr = 2e-3;
  int batch_size = 8;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct RunConfig {
  Task task = Task::kClassify;
  TaskConfig train;
  PipelineConfig pipe;
  DatasetSpec data;
  PretrainSettings pretrain;
  double guidance_scale = 7.5;  // the model's CFG scale
  bool apply_cfg = false;       // blend extracted features with guidance_scale
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0};  // sweep / ablation seeds
  std::string backbone_path;            // load instead of pretraining when set
  std::string checkpoint_path;
  std::string out_dir = ".";
  bool record_walltime = false;

  static RunConfig defaults(Task task);
  void validate() const;
  // Task, pipeline and data spec as used for one seeded run.
  TaskConfig task_config(std::uint64_t run_seed) const;
  PipelineConfig pipeline() const;
  DatasetSpec dataset(std::uint64_t run_seed) const;
};

DatasetSpec default_dataset(Task task);

// Dotted key / string value. "task" resets every other field to that task's
// defaults, so it belongs first. Unknown keys throw std::invalid_argument.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
const std::vector<std::string>& setting_keys();

using Settings = std::vector<std::pair<std::string, std::string>>;
// Flat JSON object -> settings, "task" first, then keys in file order.
Settings settings_from_json(const nlohmann::ordered_json& flat);
Settings read_config_file(const std::string& path);
// Applies the last "task" (or default_task) first, then all other settings in order.
RunConfig resolve_config(const Settings& settings, Task default_task = Task::kClassify);

// Flat, fully resolved view; resolve_config(settings_from_json(to_json(c))) == c.
nlohmann::ordered_json to_json(const RunConfig& cfg);
// FNV-1a 64 over the compact JSON dump without the paths.* and report.* keys,
// as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace vermouth
