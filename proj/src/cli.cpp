#include "liftkd/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>

#include "CLI11.hpp"
#include "liftkd/config.hpp"
#include "liftkd/diffusion.hpp"
#include "liftkd/harness.hpp"
#include "liftkd/place.hpp"

namespace liftkd {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string out_dir;
  std::size_t workers = 1;
};

Denoiser teacher_for(const HarnessConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  if (!cfg.teacher_checkpoint.empty()) return load_checkpoint(cfg.teacher_checkpoint);
  Rng rng(mix_seed(cfg.seed, streams::kTeacherTrain));
  Denoiser teacher = train_teacher(cfg, rng);
  save_checkpoint(teacher, out_dir / "teacher.json");
  out << "trained teacher (" << teacher.size() << " params) -> " << (out_dir / "teacher.json").string()
      << '\n';
  return teacher;
}

/// Checkpoint if configured, otherwise a freshly initialized model.
Denoiser model_or_init(const std::string& checkpoint, const HarnessConfig& cfg,
                       const std::vector<std::size_t>& widths, std::uint64_t stream) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint);
  Rng rng(mix_seed(cfg.seed, stream));
  return Denoiser(cfg.sample_shape(), widths, cfg.steps, rng);
}

void check_compatible(const Denoiser& model, const HarnessConfig& cfg, const char* what) {
  if (model.data_shape() != cfg.sample_shape() || model.num_steps() != cfg.steps) {
    throw ConfigError(std::string("run.") + what,
                      "checkpoint does not match the configured dataset or schedule");
  }
}

void check_checkpoint(const std::string& path, const HarnessConfig& cfg, const char* what) {
  if (path.empty()) return;
  const std::string field = std::string("run.") + what;
  if (!fs::exists(path)) throw ConfigError(field, "file not found: " + path);
  Denoiser model;
  try {
    model = load_checkpoint(path);
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
  check_compatible(model, cfg, what);
}

// Everything that can be rejected without computing, checked before the
// output directory exists.
void preflight(const std::string& command, const HarnessConfig& cfg) {
  if (command == "ablate-scheduler" && cfg.method.kd != KdMode::Lift &&
      cfg.method.kd != KdMode::Place) {
    throw ConfigError("loss.method", "ablate-scheduler needs a lift or place method");
  }
  check_checkpoint(cfg.teacher_checkpoint, cfg, "teacher_checkpoint");
  if (command == "correct-sample" || command == "error-map") {
    check_checkpoint(cfg.student_checkpoint, cfg, "student_checkpoint");
  }
}

int cmd_train_teacher(const HarnessConfig& cfg, const fs::path& dir, std::ostream& out) {
  Rng rng(mix_seed(cfg.seed, streams::kTeacherTrain));
  const Denoiser teacher = train_teacher(cfg, rng);
  save_checkpoint(teacher, dir / "teacher.json");
  Rng eval_rng(mix_seed(cfg.seed, streams::kEvalSampling));
  const SampleQuality q = evaluate_samples(cfg, teacher, eval_rng);
  out << "train-teacher: params=" << teacher.size() << " iterations=" << cfg.teacher_iterations
      << " sw=" << q.sw << " checkpoint=" << (dir / "teacher.json").string() << '\n';
  return kExitOk;
}

int cmd_distill(const HarnessConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Denoiser teacher = teacher_for(cfg, dir, out);
  check_compatible(teacher, cfg, "teacher_checkpoint");
  try {
    const RunReport report = distill(cfg, teacher, cfg.seed);
    write_run_csv(report, dir / "run.csv");
    save_checkpoint(report.student, dir / "student.json");
    out << "distill: method=" << cfg.method.name() << " student_params=" << report.student.size()
        << " final_total=" << report.log.back().total << " sw=" << report.final_sw
        << " log=" << (dir / "run.csv").string() << '\n';
  } catch (const DivergenceError& e) {
    if (e.partial()) write_run_csv(*e.partial(), dir / "run.csv");
    throw;
  }
  return kExitOk;
}

int cmd_correct_sample(const HarnessConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Denoiser teacher =
      model_or_init(cfg.teacher_checkpoint, cfg, cfg.teacher_widths, streams::kTeacherInit);
  const Denoiser student = cfg.student_checkpoint.empty()
                               ? init_student(cfg, cfg.seed)
                               : load_checkpoint(cfg.student_checkpoint);
  check_compatible(teacher, cfg, "teacher_checkpoint");
  check_compatible(student, cfg, "student_checkpoint");
  Shape shape = cfg.sample_shape();
  shape.insert(shape.begin(), cfg.correct_samples);
  Rng rng(mix_seed(cfg.seed, streams::kEvalSampling));
  const CorrectedSampleResult res = corrected_sample(teacher, student, cfg.schedule(), rng, shape);
  write_step_diagnostics_csv(res.steps, dir / "correct_steps.csv");
  {
    std::ofstream f(dir / "sample.json");
    f << to_json(res.x0).dump() << '\n';
  }
  std::size_t improved = 0;
  for (const auto& s : res.steps) improved += s.corrected_mse < s.raw_mse ? 1 : 0;
  out << "correct-sample: steps=" << cfg.steps << " rows=" << res.steps.size()
      << " improved=" << improved << " csv=" << (dir / "correct_steps.csv").string() << '\n';
  return kExitOk;
}

int cmd_error_map(const HarnessConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Denoiser teacher =
      model_or_init(cfg.teacher_checkpoint, cfg, cfg.teacher_widths, streams::kTeacherInit);
  const Denoiser student = cfg.student_checkpoint.empty()
                               ? init_student(cfg, cfg.seed)
                               : load_checkpoint(cfg.student_checkpoint);
  check_compatible(teacher, cfg, "teacher_checkpoint");
  check_compatible(student, cfg, "student_checkpoint");

  const Tensor data = training_data(cfg);
  Rng rng(mix_seed(cfg.seed, streams::kBatches));
  const std::size_t batch = cfg.dataset == DatasetKind::GridPatterns ? 1 : cfg.batch_size;
  const Tensor x0 = draw_batch(data, batch, rng);
  const Tensor noise = randn(rng, x0.shape());
  const std::vector<int> t(batch, cfg.error_map_t);
  const Tensor x_t = forward_noise(x0, t, noise, cfg.schedule());
  Tensor eps_t = teacher.forward(x_t, t).eps;
  Tensor eps_s = student.forward(x_t, t).eps;

  if (cfg.dataset == DatasetKind::GridPatterns) {
    const Shape one(eps_t.shape().begin() + 1, eps_t.shape().end());
    eps_t = eps_t.reshaped(one);
    eps_s = eps_s.reshaped(one);
  } else {
    // Planar batch: coordinates as channels, samples along the spatial axis.
    const std::size_t d = eps_t.dim(1);
    Tensor vt({d, batch, 1}), vs({d, batch, 1});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) {
        vt[j * batch + b] = eps_t[b * d + j];
        vs[j * batch + b] = eps_s[b * d + j];
      }
    }
    eps_t = std::move(vt);
    eps_s = std::move(vs);
  }
  const ErrorMap emap = error_map(eps_t, eps_s);
  export_error_map(emap, dir / "error_map.json");
  out << "error-map: t=" << cfg.error_map_t << " shape=" << shape_string(emap.values.shape())
      << " file=" << (dir / "error_map.json").string() << '\n';
  return kExitOk;
}

int cmd_capacity_gap(const HarnessConfig& cfg, const fs::path& dir, std::size_t workers,
                     std::ostream& out) {
  const GridResult grid = capacity_gap_experiment(cfg, workers);
  write_grid_csv(grid, dir / "capacity_gap.csv");
  for (const auto& c : grid.cells) {
    out << "capacity-gap: method=" << c.method.name() << " teacher_params=" << c.teacher_params
        << " student_params=" << c.student_params << " mean_sw=" << c.mean << " std_sw=" << c.std
        << " diverged=" << c.diverged << '\n';
  }
  return kExitOk;
}

int cmd_ablate_scheduler(const HarnessConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Denoiser teacher = teacher_for(cfg, dir, out);
  check_compatible(teacher, cfg, "teacher_checkpoint");
  const SchedulerAblation ab = ablate_scheduler(cfg, teacher);
  for (std::size_t i = 0; i < ab.kinds.size(); ++i) {
    write_run_csv(ab.reports[i], dir / ("run_" + to_string(ab.kinds[i]) + ".csv"));
  }
  write_ablation_csv(ab, dir / "scheduler_comparison.csv");
  out << "ablate-scheduler:";
  for (std::size_t i = 0; i < ab.kinds.size(); ++i) {
    out << ' ' << to_string(ab.kinds[i]) << "_sw=" << ab.reports[i].final_sw;
  }
  out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Coarse-to-fine knowledge distillation for toy diffusion models"};
  app.require_subcommand(1);
  app.footer("Configuration defaults (section.key = value):\n\n" + serialize_config(HarnessConfig{}));

  Options opt;
  std::string command;
  std::function<int(const HarnessConfig&, const fs::path&)> action;
  auto add = [&](const std::string& name, const std::string& help,
                 std::function<int(const HarnessConfig&, const fs::path&)> fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "Config file")->required();
    sub->add_option("--out", opt.out_dir, "Output directory")->required();
    sub->callback([&action, &command, fn, name] {
      action = fn;
      command = name;
    });
    return sub;
  };

  add("train-teacher", "Train a teacher with the plain denoising loss",
      [&](const HarnessConfig& c, const fs::path& d) { return cmd_train_teacher(c, d, out); });
  add("distill", "Distill a student from a teacher with the configured loss stack",
      [&](const HarnessConfig& c, const fs::path& d) { return cmd_distill(c, d, out); });
  add("correct-sample", "Sample with the per-step regression-corrected student",
      [&](const HarnessConfig& c, const fs::path& d) { return cmd_correct_sample(c, d, out); });
  add("error-map", "Export |eps_teacher - eps_student| at run.error_map_t",
      [&](const HarnessConfig& c, const fs::path& d) { return cmd_error_map(c, d, out); });
  CLI::App* grid = add("capacity-gap", "Teachers x students x methods x seeds experiment",
                       [&](const HarnessConfig& c, const fs::path& d) {
                         return cmd_capacity_gap(c, d, opt.workers, out);
                       });
  grid->add_option("--workers", opt.workers, "Parallel runs")->check(CLI::PositiveNumber);
  add("ablate-scheduler", "Compare adaptive, linear and cosine weight schedules",
      [&](const HarnessConfig& c, const fs::path& d) { return cmd_ablate_scheduler(c, d, out); });

  bool dump_defaults = false;
  app.add_subcommand("defaults", "Print the default configuration")->callback([&] {
    dump_defaults = true;
  });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << "run with --help for usage\n";
    return kExitUsage;
  }

  if (dump_defaults) {
    out << serialize_config(HarnessConfig{});
    return kExitOk;
  }

  HarnessConfig cfg;
  try {
    if (!fs::exists(opt.config)) throw ConfigError("config", "file not found: " + opt.config);
    cfg = load_config(opt.config);
    preflight(command, cfg);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    fs::create_directories(opt.out_dir);
    return action(cfg, opt.out_dir);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace liftkd
