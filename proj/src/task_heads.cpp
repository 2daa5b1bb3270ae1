#include "vermouth/task_heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "vermouth/ops.hpp"

namespace vermouth {

std::string to_string(Task t) {
  switch (t) {
    case Task::kClassify: return "classify";
    case Task::kRetrieve: return "retrieve";
    case Task::kSegment: return "segment";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "classify") return Task::kClassify;
  if (s == "retrieve") return Task::kRetrieve;
  if (s == "segment") return Task::kSegment;
  throw std::invalid_argument("unknown task: " + s);
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kHead: return "head";
    case ParamGroup::kExpert: return "expert";
    case ParamGroup::kBackboneNorm: return "norm";
  }
  return "?";
}

std::string to_string(const GroupSet& groups) {
  std::string out;
  for (auto g : groups) out += (out.empty() ? "" : "+") + to_string(g);
  return out.empty() ? "none" : out;
}

GroupSet parse_groups(const std::string& s) {
  GroupSet out;
  if (s == "none" || s.empty()) return out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "head") {
      out.insert(ParamGroup::kHead);
    } else if (part == "expert") {
      out.insert(ParamGroup::kExpert);
    } else if (part == "norm" || part == "backbone-norm") {
      out.insert(ParamGroup::kBackboneNorm);
    } else {
      throw std::invalid_argument("unknown parameter group: " + part);
    }
  }
  return out;
}

bool in_group(const std::string& name, ParamGroup g, const ExpertConfig& expert) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  switch (g) {
    case ParamGroup::kHead: return starts("uhead.");
    case ParamGroup::kExpert:
      if (starts("expert.adapter")) return true;
      return expert.trainable && starts("expert.");
    case ParamGroup::kBackboneNorm: return starts("unet.") && is_norm_param(name);
  }
  return false;
}

TaskConfig TaskConfig::defaults(Task task) {
  TaskConfig c;
  c.task = task;
  c.optim.lr = 1e-3;
  c.optim.weight_decay = 5e-4;
  c.optim.clip_norm = 1.0;
  c.epochs = 10;
  switch (task) {
    case Task::kClassify:
      c.temperature = 0.2;
      c.epochs = 60;
      break;
    case Task::kRetrieve:
      c.temperature = 0.2;
      break;
    case Task::kSegment:
      c.temperature = 0.02;
      c.optim.lr = 1e-2;
      c.trainable_groups.insert(ParamGroup::kBackboneNorm);
      break;
  }
  return c;
}

void TaskConfig::validate(bool training) const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (training) {
    if (trainable_groups.empty()) throw std::invalid_argument("no trainable parameter groups");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  }
}

PipelineConfig PipelineConfig::defaults(Task task) {
  PipelineConfig p;
  p.head.out_dim = p.backbone.text_dim;
  p.extract.ddim_steps = 10;
  switch (task) {
    case Task::kClassify:
      p.extract.t = 200;
      p.extract.noise_mode = NoiseMode::kDdpm;
      p.extract.stages = {Stage::kUp, Stage::kMid};
      p.attn_stages = {Stage::kUp};
      p.head.use_attn_maps = true;
      p.use_projection = false;
      p.head.flow = Flow::kDown;
      break;
    case Task::kRetrieve:
      p.extract.t = 200;
      p.extract.noise_mode = NoiseMode::kDdimInversion;
      p.extract.stages = {Stage::kMid, Stage::kUp};
      p.head.use_attn_maps = false;
      p.use_projection = true;
      p.head.flow = Flow::kDown;
      break;
    case Task::kSegment:
      p.extract.t = 10;
      p.extract.noise_mode = NoiseMode::kDdpm;
      p.extract.stages = {Stage::kMid, Stage::kUp};
      p.attn_stages = {Stage::kUp};
      p.head.use_attn_maps = true;
      p.use_projection = false;
      p.head.flow = Flow::kUp;
      break;
  }
  return p;
}

template <typename T>
Var<T> cosine_logits(const Var<T>& v, const Tensor<T>& w, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("cosine_logits: temperature must be positive");
  if (v.shape().size() != 2 || w.rank() != 2 || v.dim(1) != w.dim(1)) {
    throw std::invalid_argument("cosine_logits: feature dim " + shape_str(v.shape()) + " vs classifier " +
                                shape_str(w.shape()));
  }
  auto wn = ops::l2_normalize_rows(Var<T>(w));
  auto sim = ops::matmul(ops::l2_normalize_rows(v), ops::transpose(wn));
  return ops::scale(sim, static_cast<T>(1.0 / tau));
}

template <typename T>
Var<T> cosine_logits_map(const Var<T>& map, const Tensor<T>& w, double tau) {
  if (map.shape().size() != 3) throw std::invalid_argument("cosine_logits_map: expected (d, H, W)");
  const auto h = map.dim(1), wd = map.dim(2);
  auto logits = cosine_logits(ops::to_tokens(map), w, tau);  // (HW, N)
  return ops::from_tokens(logits, h, wd);
}

template <typename T>
Var<T> ce_loss(const Var<T>& logits, const std::vector<int>& labels, int ignore_index) {
  return ops::cross_entropy(logits, labels, ignore_index);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: expected (n, K)");
  const auto n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = static_cast<int>(j);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <typename T>
double top1_accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (labels.empty() || logits.rank() != 2 || logits.dim(0) == 0) {
    throw std::invalid_argument("top1_accuracy: empty batch");
  }
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw std::invalid_argument("top1_accuracy: label count mismatch");
  }
  const auto pred = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

template <typename T>
std::vector<std::vector<double>> cosine_matrix(const Tensor<T>& q, const Tensor<T>& g) {
  if (q.rank() != 2 || g.rank() != 2 || q.dim(1) != g.dim(1)) {
    throw std::invalid_argument("retrieval features must be (n, d) with matching d");
  }
  const auto d = q.dim(1);
  auto norms = [d](const Tensor<T>& m) {
    std::vector<double> out(static_cast<std::size_t>(m.dim(0)));
    for (std::int64_t i = 0; i < m.dim(0); ++i) {
      double s = 0;
      for (std::int64_t j = 0; j < d; ++j) s += static_cast<double>(m[i * d + j]) * static_cast<double>(m[i * d + j]);
      out[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    return out;
  };
  const auto nq = norms(q), ng = norms(g);
  std::vector<std::vector<double>> sim(static_cast<std::size_t>(q.dim(0)),
                                       std::vector<double>(static_cast<std::size_t>(g.dim(0)), 0.0));
  for (std::int64_t i = 0; i < q.dim(0); ++i) {
    for (std::int64_t j = 0; j < g.dim(0); ++j) {
      const double den = nq[static_cast<std::size_t>(i)] * ng[static_cast<std::size_t>(j)];
      if (den <= 0.0) continue;
      double s = 0;
      for (std::int64_t c = 0; c < d; ++c) s += static_cast<double>(q[i * d + c]) * static_cast<double>(g[j * d + c]);
      sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s / den;
    }
  }
  return sim;
}

std::vector<int> rank_desc(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

}  // namespace

template <typename T>
MapResult map_score(const Tensor<T>& queries, const std::vector<int>& query_labels, const Tensor<T>& gallery,
                    const std::vector<int>& gallery_labels, int k) {
  if (static_cast<std::int64_t>(query_labels.size()) != queries.dim(0) ||
      static_cast<std::int64_t>(gallery_labels.size()) != gallery.dim(0)) {
    throw std::invalid_argument("map_score: label count mismatch");
  }
  if (k < 0) throw std::invalid_argument("map_score: negative cutoff");
  const auto sim = cosine_matrix(queries, gallery);
  MapResult r;
  for (std::size_t i = 0; i < sim.size(); ++i) {
    const auto order = rank_desc(sim[i]);
    const int total_rel = static_cast<int>(std::count(gallery_labels.begin(), gallery_labels.end(), query_labels[i]));
    if (total_rel == 0) {
      ++r.excluded_queries;
      continue;
    }
    const std::size_t depth = k > 0 ? std::min<std::size_t>(static_cast<std::size_t>(k), order.size()) : order.size();
    double sum = 0;
    int hits = 0;
    for (std::size_t rank = 0; rank < depth; ++rank) {
      if (gallery_labels[static_cast<std::size_t>(order[rank])] == query_labels[i]) {
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
      }
    }
    const int denom = k > 0 ? std::min(k, total_rel) : total_rel;
    r.ap.push_back(sum / denom);
  }
  if (!r.ap.empty()) r.map = std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / static_cast<double>(r.ap.size());
  return r;
}

template <typename T>
std::vector<std::vector<int>> retrieve(const Tensor<T>& queries, const Tensor<T>& gallery, int k) {
  if (k < 0 || k > gallery.dim(0)) {
    throw std::invalid_argument("retrieve: k = " + std::to_string(k) + " exceeds gallery size " +
                                std::to_string(gallery.dim(0)));
  }
  const auto sim = cosine_matrix(queries, gallery);
  std::vector<std::vector<int>> out;
  for (const auto& row : sim) {
    auto order = rank_desc(row);
    order.resize(static_cast<std::size_t>(k));
    out.push_back(std::move(order));
  }
  return out;
}

std::vector<std::optional<double>> class_iou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes,
                                             int ignore_index) {
  if (pred.size() != gt.size()) throw std::invalid_argument("miou: mask size mismatch");
  if (num_classes < 1) throw std::invalid_argument("miou: need at least one class");
  std::vector<long> inter(static_cast<std::size_t>(num_classes)), uni(static_cast<std::size_t>(num_classes));
  auto check = [&](int v) {
    if (v != ignore_index && (v < 0 || v >= num_classes)) {
      throw std::out_of_range("miou: class id " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  };
  for (std::size_t i = 0; i < gt.size(); ++i) {
    check(gt[i]);
    check(pred[i]);
    if (gt[i] == ignore_index) continue;
    const auto g = static_cast<std::size_t>(gt[i]);
    if (pred[i] == ignore_index) {
      ++uni[g];
      continue;
    }
    const auto p = static_cast<std::size_t>(pred[i]);
    if (p == g) {
      ++inter[g];
      ++uni[g];
    } else {
      ++uni[g];
      ++uni[p];
    }
  }
  std::vector<std::optional<double>> out(static_cast<std::size_t>(num_classes));
  for (std::size_t c = 0; c < out.size(); ++c) {
    if (uni[c] > 0) out[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  }
  return out;
}

double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes, int ignore_index) {
  const auto ious = class_iou(pred, gt, num_classes, ignore_index);
  double s = 0;
  int n = 0;
  for (const auto& v : ious) {
    if (v) {
      s += *v;
      ++n;
    }
  }
  return n > 0 ? s / n : 0.0;
}

TaskData task_data(const ClassificationSet& set) {
  TaskData d;
  d.task = Task::kClassify;
  d.train_classes = set.train.class_names;
  d.eval_classes = set.test.class_names;
  d.train = set.train.samples;
  d.eval = set.test.samples;
  return d;
}

TaskData task_data(const SketchPhotoSet& set) {
  TaskData d;
  d.task = Task::kRetrieve;
  std::map<int, int> remap;
  for (int k : set.train_categories) {
    remap[k] = static_cast<int>(d.train_classes.size());
    d.train_classes.push_back(set.class_names.at(static_cast<std::size_t>(k)));
  }
  for (int k : set.test_categories) {
    if (remap.count(k)) throw std::logic_error("held-out category also used for training");
    d.eval_classes.push_back(set.class_names.at(static_cast<std::size_t>(k)));
  }
  for (const auto* src : {&set.train_photos, &set.train_sketches}) {
    for (auto s : src->samples) {
      s.label = remap.at(s.label);
      d.train.push_back(std::move(s));
    }
  }
  for (const auto& s : set.gallery.samples) {
    if (remap.count(s.label)) throw std::logic_error("gallery contains a training category");
  }
  d.gallery = set.gallery.samples;
  d.queries = set.queries.samples;
  return d;
}

TaskData task_data(const SegmentationSet& set) {
  TaskData d;
  d.task = Task::kSegment;
  std::map<int, int> remap{{0, 0}};
  d.train_classes.push_back(set.class_names.at(0));
  d.seen_classes.push_back(0);
  for (int id : set.seen_classes) {
    remap[id] = static_cast<int>(d.train_classes.size());
    d.train_classes.push_back(set.class_names.at(static_cast<std::size_t>(id)));
    d.seen_classes.push_back(id);
  }
  d.unseen_classes = set.unseen_classes;
  d.eval_classes = set.class_names;
  for (auto s : set.train.samples) {
    if (!s.mask) throw std::invalid_argument("segmentation sample without a mask");
    for (auto& v : *s.mask) {
      auto it = remap.find(v);
      if (it == remap.end()) throw std::logic_error("training mask contains an unseen class");
      v = it->second;
    }
    d.train.push_back(std::move(s));
  }
  d.eval = set.test.samples;
  return d;
}

std::string primary_metric(Task task) {
  switch (task) {
    case Task::kClassify: return "top1";
    case Task::kRetrieve: return "map";
    case Task::kSegment: return "miou";
  }
  return "?";
}

namespace {

constexpr std::uint64_t kTrainStream = 1ull << 32;
constexpr std::uint64_t kEvalStream = 2ull << 32;
constexpr std::uint64_t kGalleryStream = 3ull << 32;
constexpr std::uint64_t kQueryStream = 4ull << 32;

template <typename T>
struct Pipeline {
  const TaskConfig& task;
  const PipelineConfig& pipe;
  const ParamStore<T>& params;
  const ScheduleTable& table;

  FeatureBundle<T> bundle(const SampleRecord& s, std::uint64_t uid, const std::vector<std::string>& classes) const {
    Rng prompt_rng(derive_seed(task.seed, uid ^ 0x50524F4D50ull));
    PromptRequest req;
    req.mode = pipe.prompt_mode;
    req.caption = s.caption;
    req.class_names = classes;
    req.tmpl = pipe.class_template;
    req.use_projection = pipe.use_projection;
    const auto prompt = make_prompt<T>(req, params, prompt_rng);
    ExtractOptions o = pipe.extract;
    o.want_attn = o.want_attn || (pipe.head.use_attn_maps && !pipe.attn_stages.empty());
    o.noise_seed = derive_seed(derive_seed(pipe.extract.noise_seed, task.seed), uid);
    return extract_features(s.image.template cast<T>(), prompt, o, params, pipe.backbone, table);
  }

  FusionInput<T> input(const SampleRecord& s, const FeatureBundle<T>& b) const {
    std::vector<Var<T>> ex;
    if (pipe.expert.enabled) {
      ex = expert_features(Var<T>(s.image.template cast<T>()), params, pipe.expert, pipe.backbone.image_size,
                           pipe.backbone.patch());
    }
    return make_fusion_input(b, ex, pipe.head.use_attn_maps ? pipe.attn_stages : StageSet{});
  }

  // (1, d) aligned feature for global tasks.
  Var<T> global(const FusionInput<T>& in) const { return uhead_global(in, params, pipe.head).v; }

  Var<T> pooled_h(const FusionInput<T>& in) const {
    auto h = uhead_global(in, params, pipe.head).h;
    return ops::mean_axis(ops::to_tokens(h), 0);
  }

  int head_resolution(const FusionInput<T>& in) const { return static_cast<int>(in.sd.begin()->second.dim(1)); }

  // (S*S, N) logits at label resolution.
  Var<T> dense_logits(const FusionInput<T>& in, const Tensor<T>& w) const {
    const int res = head_resolution(in);
    auto map = uhead_dense(in, params, pipe.head, res);
    auto logits = cosine_logits_map(map, w, task.temperature);
    const auto s = pipe.backbone.image_size;
    auto up = ops::resize_bilinear(logits, s, s);
    return ops::transpose(ops::reshape(up, {up.dim(0), static_cast<std::int64_t>(s) * s}));
  }

  Var<T> loss(const SampleRecord& s, const FusionInput<T>& in, const Tensor<T>& w) const {
    if (task.task == Task::kSegment) {
      return ce_loss(dense_logits(in, w), *s.mask, task.ignore_index);
    }
    return ce_loss(cosine_logits(global(in), w, task.temperature), {s.label}, task.ignore_index);
  }
};

template <typename T>
void check_data(const TaskConfig& task, const TaskData& data, bool training) {
  if (data.task != task.task) {
    throw std::invalid_argument("dataset prepared for " + to_string(data.task) + ", task is " + to_string(task.task));
  }
  if (training && data.train.empty()) throw std::invalid_argument("training set is empty");
  if (task.task == Task::kSegment) {
    for (const auto* split : {&data.train, &data.eval}) {
      for (const auto& s : *split) {
        if (!s.mask) throw std::invalid_argument("segmentation sample without a mask");
      }
    }
  }
}

const SampleRecord& layout_sample(const TaskData& data) {
  if (!data.train.empty()) return data.train.front();
  if (!data.eval.empty()) return data.eval.front();
  if (!data.gallery.empty()) return data.gallery.front();
  throw std::invalid_argument("dataset has no samples");
}

}  // namespace

template <typename T>
void prepare_task_params(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                         ParamStore<T>& params, const ScheduleTable& table) {
  Rng rng(derive_seed(task.seed, 0x4845414Dull));
  if (pipe.expert.enabled && !params.contains("expert.stage0.conv.weight")) {
    init_expert(params, pipe.expert, pipe.backbone.image_channels, pipe.backbone.patch(), rng);
  }
  const bool has_head = std::any_of(params.names().begin(), params.names().end(),
                                    [](const std::string& n) { return n.rfind("uhead.", 0) == 0; });
  if (has_head) return;
  Pipeline<T> p{task, pipe, params, table};
  const auto& s = layout_sample(data);
  const auto b = p.bundle(s, 0, data.train_classes.empty() ? data.eval_classes : data.train_classes).detached();
  const auto layout = describe_input(p.input(s, b), pipe.head);
  init_uhead(params, pipe.head, layout, rng);
}

template <typename T>
EvalResult evaluate_task(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                         const ParamStore<T>& params, const ScheduleTable& table) {
  task.validate(false);
  check_data<T>(task, data, false);
  Pipeline<T> p{task, pipe, params, table};
  EvalResult r;
  switch (task.task) {
    case Task::kClassify: {
      if (data.eval.empty()) throw std::invalid_argument("evaluation set is empty");
      const auto w = build_classifier_weights(data.eval_classes, pipe.class_template, params, pipe.use_projection);
      const auto n = static_cast<std::int64_t>(data.eval.size());
      const auto k = w.weights.dim(0);
      Tensor<T> logits({n, k});
      std::vector<int> labels;
      double loss = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const auto& s = data.eval[static_cast<std::size_t>(i)];
        const auto in = p.input(s, p.bundle(s, kEvalStream + static_cast<std::uint64_t>(i), data.eval_classes));
        const auto lg = cosine_logits(p.global(in), w.weights, task.temperature);
        std::copy(lg.value().raw(), lg.value().raw() + k, logits.raw() + i * k);
        loss += static_cast<double>(ce_loss(lg, {s.label}).value()[0]);
        labels.push_back(s.label);
      }
      r.metrics["top1"] = top1_accuracy(logits, labels);
      r.metrics["loss"] = loss / static_cast<double>(n);
      break;
    }
    case Task::kRetrieve: {
      if (data.gallery.empty() || data.queries.empty()) throw std::invalid_argument("retrieval needs queries and a gallery");
      auto embed = [&](const std::vector<SampleRecord>& set, std::uint64_t stream, std::vector<int>& labels) {
        Tensor<T> feats;
        for (std::size_t i = 0; i < set.size(); ++i) {
          const auto in = p.input(set[i], p.bundle(set[i], stream + i, data.eval_classes));
          const auto v = pipe.retrieval_use_v ? p.global(in) : p.pooled_h(in);
          if (i == 0) feats = Tensor<T>({static_cast<std::int64_t>(set.size()), v.dim(1)});
          std::copy(v.value().raw(), v.value().raw() + v.dim(1), feats.raw() + static_cast<std::int64_t>(i) * v.dim(1));
          labels.push_back(set[i].label);
        }
        return feats;
      };
      std::vector<int> ql, gl;
      const auto qf = embed(data.queries, kQueryStream, ql);
      const auto gf = embed(data.gallery, kGalleryStream, gl);
      const auto m = map_score(qf, ql, gf, gl);
      r.metrics["map"] = m.map;
      r.excluded_queries = m.excluded_queries;
      break;
    }
    case Task::kSegment: {
      if (data.eval.empty()) throw std::invalid_argument("evaluation set is empty");
      const auto w = build_classifier_weights(data.eval_classes, pipe.class_template, params, pipe.use_projection);
      const int nc = static_cast<int>(data.eval_classes.size());
      std::vector<int> pred, gt;
      for (std::size_t i = 0; i < data.eval.size(); ++i) {
        const auto& s = data.eval[i];
        const auto in = p.input(s, p.bundle(s, kEvalStream + i, data.eval_classes));
        const auto am = argmax_rows(p.dense_logits(in, w.weights).value());
        pred.insert(pred.end(), am.begin(), am.end());
        gt.insert(gt.end(), s.mask->begin(), s.mask->end());
      }
      r.metrics["miou"] = miou(pred, gt, nc, task.ignore_index);
      // Held-in view: pixels of unseen classes are ignored, mean over background + seen.
      auto gt_seen = gt;
      for (auto& v : gt_seen) {
        if (std::find(data.unseen_classes.begin(), data.unseen_classes.end(), v) != data.unseen_classes.end()) {
          v = task.ignore_index;
        }
      }
      const auto seen_iou = class_iou(pred, gt_seen, nc, task.ignore_index);
      double s_sum = 0;
      int s_n = 0;
      for (int c : data.seen_classes) {
        if (const auto& v = seen_iou.at(static_cast<std::size_t>(c))) {
          s_sum += *v;
          ++s_n;
        }
      }
      r.metrics["miou_seen"] = s_n > 0 ? s_sum / s_n : 0.0;
      if (!data.unseen_classes.empty()) {
        const auto all_iou = class_iou(pred, gt, nc, task.ignore_index);
        double u_sum = 0;
        int u_n = 0;
        for (int c : data.unseen_classes) {
          if (const auto& v = all_iou.at(static_cast<std::size_t>(c))) {
            u_sum += *v;
            ++u_n;
          }
        }
        r.metrics["miou_unseen"] = u_n > 0 ? u_sum / u_n : 0.0;
      }
      double acc = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) acc += pred[i] == gt[i] ? 1 : 0;
      r.metrics["pixel_acc"] = gt.empty() ? 0.0 : acc / static_cast<double>(gt.size());
      break;
    }
  }
  return r;
}

template <typename T>
TrainHistory train_task(const TaskConfig& task, const PipelineConfig& pipe, const TaskData& data,
                        ParamStore<T>& params, const ScheduleTable& table) {
  task.validate(true);
  check_data<T>(task, data, true);
  prepare_task_params(task, pipe, data, params, table);
  auto select = [&](const std::string& n) {
    return std::any_of(task.trainable_groups.begin(), task.trainable_groups.end(),
                       [&](ParamGroup g) { return in_group(n, g, pipe.expert); });
  };
  params.set_trainable(select);
  if (params.trainable_names().empty()) throw std::invalid_argument("selected groups contain no parameters");
  const bool backbone_tuned = task.trainable_groups.count(ParamGroup::kBackboneNorm) != 0;

  Pipeline<T> p{task, pipe, params, table};
  const auto w = build_classifier_weights(data.train_classes, pipe.class_template, params, pipe.use_projection);
  std::vector<std::optional<FeatureBundle<T>>> cache(data.train.size());
  AdamW<T> opt(task.optim);
  Rng shuffle(derive_seed(task.seed, 0x53485546ull));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainHistory h;
  for (int epoch = 0; epoch < task.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    double total = 0;
    int in_batch = 0;
    params.zero_grad();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const auto idx = order[pos];
      const auto& s = data.train[idx];
      FeatureBundle<T> b;
      if (backbone_tuned) {
        b = p.bundle(s, kTrainStream + idx, data.train_classes);
      } else {
        if (!cache[idx]) cache[idx] = p.bundle(s, kTrainStream + idx, data.train_classes).detached();
        b = *cache[idx];
      }
      auto loss = p.loss(s, p.input(s, b), w.weights);
      loss.backward();
      total += static_cast<double>(loss.value()[0]);
      if (++in_batch == task.batch_size || pos + 1 == order.size()) {
        opt.step(params, 1.0 / in_batch);
        params.zero_grad();
        in_batch = 0;
        ++h.steps;
      }
    }
    h.loss.push_back(total / static_cast<double>(order.size()));
    if (task.eval_every > 0 && (epoch + 1) % task.eval_every == 0) {
      params.set_trainable([](const std::string&) { return false; });
      h.eval.emplace_back(epoch + 1, evaluate_task(task, pipe, data, params, table).metrics.at(primary_metric(task.task)));
      params.set_trainable(select);
    }
  }
  params.set_trainable([](const std::string&) { return false; });
  return h;
}

#define VERMOUTH_INSTANTIATE(T)                                                                                    \
  template Var<T> cosine_logits<T>(const Var<T>&, const Tensor<T>&, double);                                       \
  template Var<T> cosine_logits_map<T>(const Var<T>&, const Tensor<T>&, double);                                   \
  template Var<T> ce_loss<T>(const Var<T>&, const std::vector<int>&, int);                                         \
  template std::vector<int> argmax_rows<T>(const Tensor<T>&);                                                      \
  template double top1_accuracy<T>(const Tensor<T>&, const std::vector<int>&);                                     \
  template MapResult map_score<T>(const Tensor<T>&, const std::vector<int>&, const Tensor<T>&,                     \
                                  const std::vector<int>&, int);                                                   \
  template std::vector<std::vector<int>> retrieve<T>(const Tensor<T>&, const Tensor<T>&, int);                     \
  template void prepare_task_params<T>(const TaskConfig&, const PipelineConfig&, const TaskData&, ParamStore<T>&,  \
                                       const ScheduleTable&);                                                      \
  template TrainHistory train_task<T>(const TaskConfig&, const PipelineConfig&, const TaskData&, ParamStore<T>&,   \
                                      const ScheduleTable&);                                                       \
  template EvalResult evaluate_task<T>(const TaskConfig&, const PipelineConfig&, const TaskData&,                  \
                                       const ParamStore<T>&, const ScheduleTable&);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
