#pragma once

#include <string>

#include "vermouth/task_heads.hpp"

namespace vermouth {

// A task dataset on disk: manifest.json (task, classes, per-split captions,
// labels and shape records) plus one VMF1 file per split holding images
// ("image/NNNNNN", f32) and masks ("mask/NNNNNN", f32 class ids).
void save_task_data(const TaskData& data, const std::string& dir);
TaskData load_task_data(const std::string& dir);

}  // namespace vermouth
