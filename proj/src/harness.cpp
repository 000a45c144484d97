#include "liftkd/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "liftkd/datasets.hpp"
#include "liftkd/diffusion.hpp"
#include "liftkd/place.hpp"

namespace liftkd {

DivergenceError::DivergenceError(long step, const std::string& what, std::optional<RunReport> partial)
    : std::runtime_error("diverged at step " + std::to_string(step) + ": " + what),
      step_(step),
      partial_(std::move(partial)) {}

Tensor training_data(const HarnessConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, streams::kTrainData));
  return make_dataset(cfg.dataset, cfg.samples, rng);
}

Tensor evaluation_data(const HarnessConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, streams::kEvalData));
  return make_dataset(cfg.dataset, cfg.eval_samples, rng);
}

namespace {

struct NoisyBatch {
  Tensor noise;
  Tensor x_t;
  std::vector<int> t;
};

NoisyBatch draw_noisy_batch(const Tensor& data, const NoiseSchedule& sched, std::size_t batch,
                            Rng& rng) {
  NoisyBatch nb;
  const Tensor x0 = draw_batch(data, batch, rng);
  nb.t.resize(batch);
  for (auto& t : nb.t) t = static_cast<int>(rng.uniform_int(1, sched.steps()));
  nb.noise = randn(rng, x0.shape());
  nb.x_t = forward_noise(x0, nb.t, nb.noise, sched);
  return nb;
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void add_scaled(Tensor& dst, double scale, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

// PLACE groups within channel planes. Planar batches [B, D] are viewed as
// D channels whose "spatial" positions are the B samples; image batches
// [B, C, H, W] are grouped per sample and channel.
Tensor to_place_view(const Tensor& x) {
  if (x.rank() == 4) return x;
  if (x.rank() != 2) throw ShapeError("place: unsupported batch layout " + shape_string(x.shape()));
  const std::size_t b = x.dim(0), d = x.dim(1);
  Tensor v({d, b, 1});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) v[j * b + i] = x[i * d + j];
  }
  return v;
}

Tensor from_place_view(const Tensor& v, const Shape& shape) {
  if (shape.size() == 4) return v;
  const std::size_t b = shape[0], d = shape[1];
  Tensor x(shape);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = v[j * b + i];
  }
  return x;
}

}  // namespace

void train_denoiser(Denoiser& model, const HarnessConfig& cfg, long iterations, double lr,
                    Rng& rng) {
  if (iterations <= 0) return;
  const Tensor data = training_data(cfg);
  const NoiseSchedule sched = cfg.schedule();
  AdamState state(model.size());
  for (long step = 0; step < iterations; ++step) {
    const NoisyBatch nb = draw_noisy_batch(data, sched, cfg.batch_size, rng);
    const ForwardResult out = model.forward(nb.x_t, nb.t);
    const double loss = mse(nb.noise.values(), out.eps.values());
    const auto grads = model.backward(out.tape, outkd_gradient(nb.noise, out.eps));
    if (!std::isfinite(loss) || !all_finite(grads)) {
      throw DivergenceError(step, "non-finite denoising loss");
    }
    adam_step(model.parameters(), grads, state, lr);
    if (!all_finite(model.parameters())) throw DivergenceError(step, "non-finite parameters");
  }
}

Denoiser train_teacher(const HarnessConfig& cfg, Rng& rng) {
  Denoiser teacher(cfg.sample_shape(), cfg.teacher_widths, cfg.steps, rng);
  train_denoiser(teacher, cfg, cfg.teacher_iterations, cfg.teacher_lr, rng);
  return teacher;
}

std::size_t feature_layer(int index, const std::vector<std::size_t>& widths) {
  const int n = static_cast<int>(widths.size());
  if (n == 0 || index < -n || index >= n) {
    throw std::out_of_range("feature layer " + std::to_string(index) + " out of range");
  }
  return static_cast<std::size_t>(index < 0 ? n + index : index);
}

LossEvaluation evaluate_loss_stack(const HarnessConfig& cfg, const LossInputs& in,
                                   const LinearMap& regressor, long iter, bool want_grad,
                                   std::optional<double>* coarse_state) {
  const Tensor& eps_s = in.student.eps;
  const Tensor& eps_t = in.teacher.eps;
  require_same_shape(eps_t, eps_s, "loss stack");
  require_same_shape(in.noise, eps_s, "loss stack");

  LossEvaluation ev;
  LossBreakdown& bd = ev.breakdown;
  bd.iter = iter;
  LossGradients& g = ev.grads;

  const Tensor& diff_target = cfg.diff_target == DiffTarget::Noise ? in.noise : eps_t;
  bd.l_diff = mse(diff_target.values(), eps_s.values());
  bd.total = cfg.lambda_diff * bd.l_diff;
  if (want_grad) {
    g.d_eps_diff = outkd_gradient(diff_target, eps_s);
    g.d_eps_total = cfg.lambda_diff * g.d_eps_diff;
  }

  switch (cfg.method.kd) {
    case KdMode::None:
      break;
    case KdMode::OutKd:
      bd.l_outkd = outkd_loss(eps_t, eps_s);
      bd.total += cfg.lambda_outkd * bd.l_outkd;
      if (want_grad) add_scaled(g.d_eps_total, cfg.lambda_outkd, outkd_gradient(eps_t, eps_s));
      break;
    case KdMode::Lift: {
      const WeightScheduler sched = cfg.weight_scheduler();
      auto weight_of = [&](double coarse) {
        double c = coarse;
        if (cfg.coarse_ema > 0.0 && coarse_state != nullptr) {
          if (coarse_state->has_value()) {
            c = cfg.coarse_ema * **coarse_state + (1.0 - cfg.coarse_ema) * coarse;
          }
          *coarse_state = c;
        }
        return scheduled_weight(sched, iter, c);
      };
      Tensor grad;
      if (want_grad) grad = Tensor(eps_s.shape());
      const LiftTerms terms =
          lift_terms(eps_t.values(), eps_s.values(), weight_of,
                     {cfg.relaxed_l2, cfg.coeff_grad}, want_grad ? grad.values() : std::span<double>{});
      bd.l_coarse = terms.coarse;
      bd.l_fine = terms.fine;
      bd.w = terms.w;
      bd.l_lift = terms.loss;
      if (terms.degenerate) ++ev.degenerate_fits;
      bd.total += cfg.lambda_lift * bd.l_lift;
      if (want_grad) add_scaled(g.d_eps_total, cfg.lambda_lift, grad);
      break;
    }
    case KdMode::Place: {
      PlaceOptions opts;
      opts.group_size = cfg.group_size;
      opts.scheduler = cfg.weight_scheduler();
      opts.iter = iter;
      opts.lift = {cfg.relaxed_l2, cfg.coeff_grad};
      opts.pooled_weight = cfg.pooled_w;
      const PlaceResult res =
          place_loss(to_place_view(eps_t), to_place_view(eps_s), opts, want_grad);
      bd.l_coarse = res.mean_coarse;
      bd.l_fine = res.mean_fine;
      bd.w = res.mean_w;
      bd.l_lift = res.loss;
      ev.degenerate_fits += res.degenerate_groups;
      bd.total += cfg.lambda_lift * bd.l_lift;
      if (want_grad) add_scaled(g.d_eps_total, cfg.lambda_lift, from_place_view(res.grad, eps_s.shape()));
      break;
    }
  }

  if (cfg.method.featkd) {
    const std::size_t lt = feature_layer(cfg.teacher_feature_layer, cfg.teacher_widths);
    const std::size_t ls = feature_layer(cfg.student_feature_layer, cfg.student_widths);
    const Tensor& f_t = in.teacher.features.at(lt);
    const Tensor& f_s = in.student.features.at(ls);
    if (want_grad) {
      FeatKdGradients fk = featkd_gradient(f_t, f_s, regressor);
      bd.l_featkd = fk.loss;
      g.feature_grads.push_back({ls, cfg.lambda_featkd * fk.d_student_features});
      g.d_regressor = std::move(fk.d_regressor);
      for (double& v : g.d_regressor) v *= cfg.lambda_featkd;
    } else {
      bd.l_featkd = featkd_loss(f_t, f_s, regressor);
    }
    bd.total += cfg.lambda_featkd * bd.l_featkd;
  }
  return ev;
}

Denoiser init_student(const HarnessConfig& cfg, std::uint64_t run_seed) {
  Rng rng(mix_seed(run_seed, streams::kStudentInit));
  return Denoiser(cfg.sample_shape(), cfg.student_widths, cfg.steps, rng);
}

LinearMap init_regressor(const HarnessConfig& cfg, const Denoiser& teacher,
                         const Denoiser& student, std::uint64_t run_seed) {
  if (!cfg.method.featkd) return LinearMap();
  Rng rng(mix_seed(run_seed, streams::kRegressorInit));
  const std::size_t lt = feature_layer(cfg.teacher_feature_layer, teacher.widths());
  const std::size_t ls = feature_layer(cfg.student_feature_layer, student.widths());
  return LinearMap(student.widths()[ls], teacher.widths()[lt], rng);
}

SampleQuality evaluate_samples(const HarnessConfig& cfg, const NoisePredictor& model, Rng& rng) {
  const NoiseSchedule sched = cfg.schedule();
  Shape shape = cfg.sample_shape();
  shape.insert(shape.begin(), cfg.eval_samples);
  const Tensor generated = sample(model, sched, rng, shape);
  const Tensor reference = evaluation_data(cfg);
  SampleQuality q;
  if (!generated.all_finite()) {
    q.sw = std::numeric_limits<double>::quiet_NaN();
    q.moments = {q.sw, q.sw};
    return q;
  }
  Rng proj(mix_seed(cfg.seed, streams::kProjections));
  q.sw = sliced_wasserstein(generated, reference, cfg.projections, proj);
  q.moments = moment_gap(generated, reference);
  return q;
}

RunReport distill(const HarnessConfig& cfg, const Denoiser& teacher, std::uint64_t run_seed) {
  cfg.validate();
  if (teacher.data_shape() != cfg.sample_shape() || teacher.num_steps() != cfg.steps) {
    throw std::invalid_argument("distill: teacher checkpoint does not match data shape or schedule");
  }
  const auto start = std::chrono::steady_clock::now();
  const Tensor data = training_data(cfg);
  const NoiseSchedule sched = cfg.schedule();

  RunReport report;
  report.seed = run_seed;
  report.student = init_student(cfg, run_seed);
  report.regressor = init_regressor(cfg, teacher, report.student, run_seed);
  report.log.reserve(static_cast<std::size_t>(cfg.iterations));
  report.grad_norms.reserve(static_cast<std::size_t>(cfg.iterations));

  AdamState student_state(report.student.size());
  AdamState regressor_state(report.regressor.parameters().size());
  Rng batch_rng(mix_seed(run_seed, streams::kBatches));
  std::optional<double> coarse_state;

  auto fail = [&](long step, const std::string& what) {
    report.diverged = true;
    report.diverged_step = step;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    throw DivergenceError(step, what, std::move(report));
  };

  for (long step = 0; step < cfg.iterations; ++step) {
    const NoisyBatch nb = draw_noisy_batch(data, sched, cfg.batch_size, batch_rng);
    const ForwardResult t_out = teacher.forward(nb.x_t, nb.t);
    const ForwardResult s_out = report.student.forward(nb.x_t, nb.t);
    if (!t_out.eps.all_finite() || !s_out.eps.all_finite()) fail(step, "non-finite model output");
    LossEvaluation ev = evaluate_loss_stack(cfg, {nb.noise, t_out, s_out}, report.regressor, step,
                                            true, &coarse_state);
    if (!std::isfinite(ev.breakdown.total)) fail(step, "non-finite objective");

    const auto grads =
        report.student.backward(s_out.tape, ev.grads.d_eps_total, ev.grads.feature_grads);
    const auto diff_grads = report.student.backward(s_out.tape, ev.grads.d_eps_diff);
    const double grad_norm = l2_norm(diff_grads);
    if (!all_finite(grads) || !std::isfinite(grad_norm)) fail(step, "non-finite gradient");

    adam_step(report.student.parameters(), grads, student_state, cfg.lr);
    if (cfg.method.featkd) {
      adam_step(report.regressor.parameters(), ev.grads.d_regressor, regressor_state, cfg.lr);
    }
    if (!all_finite(report.student.parameters())) fail(step, "non-finite parameters");

    report.degenerate_fits += ev.degenerate_fits;
    report.log.push_back(ev.breakdown);
    report.grad_norms.push_back(grad_norm);
  }

  Rng eval_rng(mix_seed(run_seed, streams::kEvalSampling));
  const SampleQuality q = evaluate_samples(cfg, report.student, eval_rng);
  report.final_sw = q.sw;
  report.final_moments = q.moments;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void write_run_csv(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "step,l_diff,l_outkd,l_coarse,l_fine,w,l_lift,l_featkd,total,grad_norm\n";
  for (std::size_t i = 0; i < report.log.size(); ++i) {
    const LossBreakdown& b = report.log[i];
    out << b.iter << ',' << b.l_diff << ',' << b.l_outkd << ',' << b.l_coarse << ',' << b.l_fine
        << ',' << b.w << ',' << b.l_lift << ',' << b.l_featkd << ',' << b.total << ','
        << report.grad_norms[i] << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

const GridCell& GridResult::cell(const Method& m, std::size_t teacher_params,
                                 std::size_t student_params) const {
  for (const auto& c : cells) {
    if (c.method == m && c.teacher_params == teacher_params && c.student_params == student_params) {
      return c;
    }
  }
  throw std::out_of_range("no grid cell for method " + m.name());
}

GridResult capacity_gap_experiment(const HarnessConfig& cfg, std::size_t workers,
                                   const std::vector<Denoiser>* teachers) {
  cfg.validate();
  std::vector<Denoiser> trained;
  if (teachers == nullptr) {
    if (cfg.grid_teachers.size() == 1 && !cfg.teacher_checkpoint.empty()) {
      trained.push_back(load_checkpoint(cfg.teacher_checkpoint));
      if (trained.back().widths() != cfg.grid_teachers.front()) {
        throw std::invalid_argument("teacher checkpoint widths differ from grid.teachers");
      }
    } else {
      for (const auto& widths : cfg.grid_teachers) {
        HarnessConfig tcfg = cfg;
        tcfg.teacher_widths = widths;
        Rng rng(mix_seed(cfg.seed, streams::kTeacherTrain));
        trained.push_back(train_teacher(tcfg, rng));
      }
    }
    teachers = &trained;
  }
  if (teachers->size() != cfg.grid_teachers.size()) {
    throw std::invalid_argument("capacity_gap_experiment: one teacher per grid.teachers entry");
  }

  const std::size_t data_dim = element_count(cfg.sample_shape());
  struct Job {
    std::size_t teacher;
    HarnessConfig cfg;
    std::uint64_t seed;
  };
  GridResult result;
  std::vector<Job> jobs;
  for (std::size_t ti = 0; ti < teachers->size(); ++ti) {
    for (const auto& sw : cfg.grid_students) {
      for (const auto& m : cfg.grid_methods) {
        GridCell cell;
        cell.method = m;
        cell.teacher_params = (*teachers)[ti].size();
        cell.student_params = Denoiser::param_count(data_dim, sw);
        result.cells.push_back(cell);
        for (auto seed : cfg.seeds) {
          HarnessConfig rc = cfg;
          rc.teacher_widths = (*teachers)[ti].widths();
          rc.student_widths = sw;
          rc.method = m;
          jobs.push_back({ti, rc, seed});
          GridRun run;
          run.method = m;
          run.teacher_widths = rc.teacher_widths;
          run.teacher_params = cell.teacher_params;
          run.student_widths = sw;
          run.student_params = cell.student_params;
          run.seed = seed;
          result.runs.push_back(run);
        }
      }
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      GridRun& run = result.runs[j];
      try {
        const RunReport rep = distill(jobs[j].cfg, (*teachers)[jobs[j].teacher], jobs[j].seed);
        run.final_sw = rep.final_sw;
        run.moments = rep.final_moments;
        run.diverged = !std::isfinite(rep.final_sw);
      } catch (const DivergenceError&) {
        run.diverged = true;
        run.final_sw = std::numeric_limits<double>::quiet_NaN();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  const std::size_t per_cell = cfg.seeds.size();
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    GridCell& cell = result.cells[c];
    std::vector<double> vals;
    for (std::size_t r = c * per_cell; r < (c + 1) * per_cell; ++r) {
      if (result.runs[r].diverged) {
        ++cell.diverged;
      } else {
        vals.push_back(result.runs[r].final_sw);
      }
    }
    cell.completed = vals.size();
    if (vals.empty()) {
      cell.mean = cell.std = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double s = 0.0;
    for (double v : vals) s += v;
    cell.mean = s / static_cast<double>(vals.size());
    if (vals.size() > 1) {
      double ss = 0.0;
      for (double v : vals) ss += (v - cell.mean) * (v - cell.mean);
      cell.std = std::sqrt(ss / static_cast<double>(vals.size() - 1));
    }
  }
  return result;
}

void write_grid_csv(const GridResult& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "method,teacher_params,student_params,seed,final_sw,mean,std,diverged\n";
  for (const auto& run : grid.runs) {
    const GridCell& cell = grid.cell(run.method, run.teacher_params, run.student_params);
    out << run.method.name() << ',' << run.teacher_params << ',' << run.student_params << ','
        << run.seed << ',' << run.final_sw << ',' << cell.mean << ',' << cell.std << ','
        << (run.diverged ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

SchedulerAblation ablate_scheduler(const HarnessConfig& cfg, const Denoiser& teacher) {
  if (cfg.method.kd != KdMode::Lift && cfg.method.kd != KdMode::Place) {
    throw std::invalid_argument("ablate_scheduler: method must use lift or place");
  }
  SchedulerAblation ab;
  for (auto kind : {WeightScheduler::Kind::Adaptive, WeightScheduler::Kind::Linear,
                    WeightScheduler::Kind::Cosine}) {
    HarnessConfig c = cfg;
    c.scheduler = kind;
    ab.kinds.push_back(kind);
    ab.reports.push_back(distill(c, teacher, cfg.seed));
  }
  return ab;
}

void write_ablation_csv(const SchedulerAblation& ablation, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "scheduler,final_sw,mean_err,cov_err,final_total\n";
  for (std::size_t i = 0; i < ablation.kinds.size(); ++i) {
    const RunReport& r = ablation.reports[i];
    out << to_string(ablation.kinds[i]) << ',' << r.final_sw << ',' << r.final_moments.mean_err
        << ',' << r.final_moments.cov_err << ',' << (r.log.empty() ? 0.0 : r.log.back().total)
        << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace liftkd
