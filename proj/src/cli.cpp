#include "vermouth/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "CLI11.hpp"
#include "vermouth/dataset_io.hpp"
#include "vermouth/report.hpp"
#include "vermouth/tensor_io.hpp"

namespace vermouth {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string task;
  std::string seed;
  std::string seeds;
  std::string out;
  std::string backbone;
  std::string checkpoint;
};

struct CommandArgs {
  CommonArgs common;
  std::vector<std::string> factors;
  std::vector<std::string> values;
  std::string report;
  std::string x_factor = "time-steps";
  std::string split = "eval";
  int index = 0;
  std::string format = "both";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "flat JSON config file");
  cmd->add_option("--set", a.sets, "key=value override (repeatable)")->take_all();
  cmd->add_option("--task", a.task, "classify | retrieve | segment");
  cmd->add_option("--seed", a.seed, "run seed");
  cmd->add_option("--seeds", a.seeds, "comma-separated seeds for sweep/ablate");
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--backbone", a.backbone, "backbone checkpoint to load instead of pretraining");
  cmd->add_option("--checkpoint", a.checkpoint, "task checkpoint path");
}

RunConfig resolve(const CommonArgs& a) {
  Settings settings;
  if (!a.config.empty()) settings = read_config_file(a.config);
  if (!a.task.empty()) settings.emplace_back("task", a.task);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    settings.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!a.seed.empty()) settings.emplace_back("seed", a.seed);
  if (!a.seeds.empty()) settings.emplace_back("seeds", a.seeds);
  if (!a.out.empty()) settings.emplace_back("paths.out", a.out);
  if (!a.backbone.empty()) settings.emplace_back("paths.backbone", a.backbone);
  if (!a.checkpoint.empty()) settings.emplace_back("paths.checkpoint", a.checkpoint);
  auto cfg = resolve_config(settings);
  cfg.validate();
  return cfg;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

void write_reports(const SweepReport& report, const RunConfig& cfg, const std::string& stem, const std::string& format) {
  if (format == "json" || format == "both") {
    const auto p = out_path(cfg, stem + ".json");
    write_report(report, p, ReportFormat::kJson);
    std::cerr << "wrote " << p << "\n";
  }
  if (format == "csv" || format == "both") {
    const auto p = out_path(cfg, stem + ".csv");
    write_report(report, p, ReportFormat::kCsv);
    std::cerr << "wrote " << p << "\n";
  }
}

void print_metrics(const EvalResult& r) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : r.metrics) j[k] = v;
  if (r.excluded_queries) j["excluded_queries"] = r.excluded_queries;
  std::cout << j.dump() << "\n";
}

template <typename T>
ParamStore<T> backbone_for(const RunConfig& cfg) {
  PretrainResult pr;
  auto params = build_backbone<T>(cfg, &pr);
  if (!pr.loss_curve.empty()) std::cerr << "pretrained backbone, final loss " << pr.loss_curve.back() << "\n";
  return params;
}

template <typename T>
int cmd_gen_data(const CommandArgs& a) {
  const auto cfg = resolve(a.common);
  const auto data = build_task_data(cfg, cfg.seed);
  fs::create_directories(cfg.out_dir);
  save_task_data(data, cfg.out_dir);
  std::cerr << "wrote " << to_string(cfg.task) << " data to " << cfg.out_dir << "\n";
  return 0;
}

template <typename T>
int cmd_pretrain(const CommandArgs& a) {
  auto cfg = resolve(a.common);
  cfg.backbone_path.clear();
  PretrainResult pr;
  const auto params = build_backbone<T>(cfg, &pr);
  const auto path = cfg.checkpoint_path.empty() ? out_path(cfg, "backbone.vmf") : cfg.checkpoint_path;
  save_checkpoint(params, path);
  nlohmann::ordered_json j{{"loss_curve", pr.loss_curve},
                           {"total_steps", pr.total_steps},
                           {"null_condition_steps", pr.null_condition_steps}};
  std::cout << j.dump() << "\n";
  std::cerr << "wrote " << path << "\n";
  return 0;
}

template <typename T>
int cmd_train(const CommandArgs& a) {
  const auto cfg = resolve(a.common);
  const auto backbone = backbone_for<T>(cfg);
  ParamStore<T> trained;
  const auto r = run_single(cfg, cfg.seed, backbone, &trained);
  const auto ckpt = cfg.checkpoint_path.empty() ? out_path(cfg, "checkpoint.vmf") : cfg.checkpoint_path;
  save_checkpoint(trained, ckpt);
  std::cerr << "wrote " << ckpt << "\n";
  SweepReport report;
  report.config_hash = config_hash(cfg);
  for (const auto& [metric, value] : r.eval.metrics) {
    report.rows.push_back({"train", "default", to_string(cfg.task), metric, value, cfg.seed,
                           cfg.record_walltime ? r.walltime_s : 0.0});
  }
  sort_rows(report.rows);
  write_reports(report, cfg, "report", a.format);
  print_metrics(r.eval);
  return 0;
}

template <typename T>
ParamStore<T> load_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint_path.empty()) throw UsageError("a checkpoint is required (--checkpoint or paths.checkpoint)");
  ParamStore<T> params;
  load_into(params, load_tensors(cfg.checkpoint_path), true);
  return params;
}

template <typename T>
int cmd_eval(const CommandArgs& a) {
  const auto cfg = resolve(a.common);
  const auto params = load_checkpoint<T>(cfg);
  const auto data = build_task_data(cfg, cfg.seed);
  const auto r = evaluate_task(cfg.task_config(cfg.seed), cfg.pipeline(), data, params, default_schedule());
  print_metrics(r);
  return 0;
}

template <typename T>
int cmd_extract(const CommandArgs& a) {
  const auto cfg = resolve(a.common);
  const auto params = cfg.checkpoint_path.empty() ? backbone_for<T>(cfg) : load_checkpoint<T>(cfg);
  const auto data = build_task_data(cfg, cfg.seed);
  const std::vector<SampleRecord>* set = nullptr;
  if (a.split == "train") set = &data.train;
  else if (a.split == "eval") set = &data.eval;
  else if (a.split == "gallery") set = &data.gallery;
  else if (a.split == "queries") set = &data.queries;
  else throw UsageError("unknown split: " + a.split);
  if (a.index < 0 || static_cast<std::size_t>(a.index) >= set->size()) {
    throw UsageError("--index out of range for split " + a.split + " (" + std::to_string(set->size()) + " samples)");
  }
  const auto& s = (*set)[static_cast<std::size_t>(a.index)];
  const auto pipe = cfg.pipeline();
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(a.index)));
  PromptRequest req;
  req.mode = pipe.prompt_mode;
  req.caption = s.caption;
  req.class_names = data.eval_classes;
  req.tmpl = pipe.class_template;
  req.use_projection = pipe.use_projection;
  const auto prompt = make_prompt<T>(req, params, rng);
  auto opts = pipe.extract;
  opts.want_attn = true;
  opts.noise_seed = derive_seed(opts.noise_seed, cfg.seed);
  const auto bundle = extract_features(s.image.template cast<T>(), prompt, opts, params, pipe.backbone, default_schedule());
  TensorList out;
  for (const auto& [key, v] : bundle.taps) {
    out.push_back({"tap/" + to_string(key.stage) + "/" + std::to_string(key.level), v.value()});
  }
  for (const auto& [key, v] : bundle.attn) {
    out.push_back({"attn/" + to_string(key.stage) + "/" + std::to_string(key.level), v.value()});
  }
  const auto path = out_path(cfg, "features.vmf");
  save_tensors(out, path);
  std::cout << nlohmann::ordered_json{{"caption", s.caption}, {"entries", out.size()}, {"path", path}}.dump() << "\n";
  return 0;
}

template <typename T>
int cmd_sweep(const CommandArgs& a) {
  if (a.factors.empty()) throw UsageError("sweep needs at least one --factor");
  if (a.factors.size() != a.values.size()) throw UsageError("every --factor needs a matching --values");
  SweepGrid grid;
  for (std::size_t i = 0; i < a.factors.size(); ++i) {
    factor_key(a.factors[i]);
    std::vector<std::string> vals;
    std::stringstream ss(a.values[i]);
    std::string v;
    while (std::getline(ss, v, ',')) {
      if (!v.empty()) vals.push_back(v);
    }
    grid.emplace_back(a.factors[i], vals);
  }
  const auto cfg = resolve(a.common);
  for (const auto& [factor, vals] : grid) {
    for (const auto& v : vals) {
      RunConfig probe = cfg;
      apply_factor(probe, factor, v);
      probe.validate();
    }
  }
  const auto backbone = backbone_for<T>(cfg);
  const auto report = run_sweep(grid, cfg, backbone);
  write_reports(report, cfg, "sweep", a.format);
  std::cout << report_csv(report);
  return 0;
}

template <typename T>
int cmd_ablate(const CommandArgs& a) {
  const auto cfg = resolve(a.common);
  const auto backbone = backbone_for<T>(cfg);
  const auto report = run_ablation(cfg, backbone);
  write_reports(report, cfg, "ablation", a.format);
  std::cout << report_csv(report);
  return 0;
}

int cmd_plot(const CommandArgs& a) {
  if (a.report.empty()) throw UsageError("plot needs --report");
  const auto report = read_report(a.report);
  const auto out = a.common.out.empty() ? std::string("curves.svg") : a.common.out;
  const auto parent = fs::path(out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  plot_curves(report, a.x_factor, out);
  std::cerr << "wrote " << out << "\n";
  return 0;
}

template <typename T>
int dispatch(const std::string& name, const CommandArgs& a) {
  if (name == "gen-data") return cmd_gen_data<T>(a);
  if (name == "pretrain") return cmd_pretrain<T>(a);
  if (name == "train") return cmd_train<T>(a);
  if (name == "eval") return cmd_eval<T>(a);
  if (name == "extract") return cmd_extract<T>(a);
  if (name == "sweep") return cmd_sweep<T>(a);
  if (name == "ablate") return cmd_ablate<T>(a);
  if (name == "plot") return cmd_plot(a);
  throw UsageError("unknown subcommand " + name);
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"vermouth: diffusion features for perception, toy scale"};
  app.require_subcommand(1);
  CommandArgs args;
  std::string format = "both";
  std::vector<CLI::App*> cmds;
  auto add = [&](const char* name, const char* desc) {
    auto* c = app.add_subcommand(name, desc);
    add_common(c, args.common);
    cmds.push_back(c);
    return c;
  };
  add("gen-data", "render the task's synthetic dataset to --out");
  add("pretrain", "pretrain the toy backbone and save it");
  auto* train = add("train", "train and evaluate one run; writes checkpoint and report");
  add("eval", "evaluate a task checkpoint");
  auto* extract = add("extract", "dump the feature bundle of one sample");
  extract->add_option("--split", args.split, "train | eval | gallery | queries");
  extract->add_option("--index", args.index, "sample index");
  auto* sweep = add("sweep", "sensitivity sweep over one or more factors");
  sweep->add_option("--factor", args.factors, "stages | prompt | projection | inversion | attention | time-steps")
      ->take_all();
  sweep->add_option("--values", args.values, "comma-separated settings for the matching --factor")->take_all();
  auto* ablate = add("ablate", "baseline / +fuse / +expert ablation");
  auto* plot = add("plot", "plot a JSON report as SVG curves (--out is the SVG path)");
  plot->add_option("--report", args.report, "JSON report");
  plot->add_option("--x", args.x_factor, "numeric factor for the x axis");
  for (auto* c : {train, sweep, ablate}) {
    c->add_option("--format", args.format, "json | csv | both")->check(CLI::IsMember({"json", "csv", "both"}));
  }

  auto usage_fail = [&](const std::string& msg) {
    std::cerr << "error: " << msg << "\n\n" << app.help();
    return 1;
  };
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return usage_fail(e.what());
  }

  std::string name;
  for (auto* c : cmds) {
    if (c->parsed()) name = c->get_name();
  }

  const char* env = std::getenv("VERMOUTH_PRECISION");
  const std::string precision = env ? env : "f32";
  if (precision != "f32" && precision != "f64") {
    return usage_fail("VERMOUTH_PRECISION must be f32 or f64, got '" + precision + "'");
  }
  try {
    return precision == "f64" ? dispatch<double>(name, args) : dispatch<float>(name, args);
  } catch (const UsageError& e) {
    return usage_fail(e.what());
  } catch (const std::invalid_argument& e) {
    return usage_fail(e.what());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace vermouth
