#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "vermouth/backbone.hpp"
#include "vermouth/expert.hpp"
#include "vermouth/fusion_head.hpp"
#include "vermouth/synth_data.hpp"

namespace vermouth {

enum class Task { kClassify, kRetrieve, kSegment };
std::string to_string(Task t);
Task parse_task(const std::string& s);

// kBackboneNorm covers the normalization affine parameters of the U-net only.
enum class ParamGroup { kHead, kExpert, kBackboneNorm };
using GroupSet = std::set<ParamGroup>;
std::string to_string(ParamGroup g);
std::string to_string(const GroupSet& groups);
// "head", "expert", "norm", joined with "+".
GroupSet parse_groups(const std::string& s);
bool in_group(const std::string& param_name, ParamGroup g, const ExpertConfig& expert);

struct TaskConfig {
  Task task = Task::kClassify;
  double temperature = 0.2;
  GroupSet trainable_groups{ParamGroup::kHead, ParamGroup::kExpert};
  AdamWConfig optim;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int ignore_index = 255;
  int eval_every = 0;  // epochs between evaluations recorded in the history; 0 = never

  static TaskConfig defaults(Task task);
  void validate(bool training = true) const;
};

// Everything between an image and the aligned feature: diffusion features,
// prompts, expert and head.
struct PipelineConfig {
  BackboneConfig backbone;
  ExtractOptions extract;
  StageSet attn_stages;  // stages whose cross-attention maps enter the head
  PromptMode prompt_mode = PromptMode::kAligned;
  bool use_projection = false;
  std::string class_template = "a photo of a {}";
  UHeadConfig head;
  ExpertConfig expert;
  bool retrieval_use_v = true;  // false ranks on the pooled fused map h

  static PipelineConfig defaults(Task task);
};

// Row-wise cosine similarity of v (n, d) with classifier rows W (N, d), over tau.
// Zero-norm rows give zero similarities.
template <typename T>
Var<T> cosine_logits(const Var<T>& v, const Tensor<T>& w, double tau);
// Same per spatial position: (d, H, W) -> (N, H, W).
template <typename T>
Var<T> cosine_logits_map(const Var<T>& map, const Tensor<T>& w, double tau);

// Mean -log softmax over rows whose label is not ignore_index; 0 if none remain.
template <typename T>
Var<T> ce_loss(const Var<T>& logits, const std::vector<int>& labels, int ignore_index = -1);

// Argmax with ties to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);
template <typename T>
double top1_accuracy(const Tensor<T>& logits, const std::vector<int>& labels);

struct MapResult {
  double map = 0.0;
  std::vector<double> ap;     // per counted query
  int excluded_queries = 0;   // queries without any relevant gallery item
};

// Full-gallery mAP by default. k > 0 truncates the ranking at k and divides by
// min(k, relevant count).
template <typename T>
MapResult map_score(const Tensor<T>& queries, const std::vector<int>& query_labels, const Tensor<T>& gallery,
                    const std::vector<int>& gallery_labels, int k = 0);

// Top-k gallery indices per query by cosine similarity, ties to lower index.
template <typename T>
std::vector<std::vector<int>> retrieve(const Tensor<T>& queries, const Tensor<T>& gallery, int k);

// Per-class IoU over non-ignored pixels; classes absent from both masks are nullopt.
std::vector<std::optional<double>> class_iou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes,
                                             int ignore_index);
double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes, int ignore_index);

// A task-ready view of one of the synthetic sets. Labels of train index
// train_classes; labels/masks of eval index eval_classes.
struct TaskData {
  Task task = Task::kClassify;
  std::vector<std::string> train_classes;
  std::vector<std::string> eval_classes;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> eval;     // classification / segmentation
  std::vector<SampleRecord> gallery;  // retrieval
  std::vector<SampleRecord> queries;
  std::vector<int> seen_classes;      // segmentation ids (background included)
  std::vector<int> unseen_classes;
};

TaskData task_data(const ClassificationSet& set);
TaskData task_data(const SketchPhotoSet& set);
TaskData task_data(const SegmentationSet& set);

struct TrainHistory {
  std::vector<double> loss;                       // mean loss per epoch
  std::vector<std::pair<int, double>> eval;       // (epoch, primary metric)
  long steps = 0;
};

struct EvalResult {
  std::map<std::string, double> metrics;
  int excluded_queries = 0;
};

// Name of the headline metric for a task: top1, map or miou.
std::string primary_metric(Task task);

// Adds head (and expert) parameters if they are missing. Seeded.
template <typename T>
void prepare_task_params(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                         ParamStore<T>& params, const ScheduleTable& table);

template <typename T>
TrainHistory train_task(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                        ParamStore<T>& params, const ScheduleTable& table);

template <typename T>
EvalResult evaluate_task(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                         const ParamStore<T>& params, const ScheduleTable& table);

}  // namespace vermouth
