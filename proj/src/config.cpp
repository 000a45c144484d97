#include "liftkd/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace liftkd {

using nlohmann::json;

std::string to_string(KdMode mode) {
  switch (mode) {
    case KdMode::None: return "none";
    case KdMode::OutKd: return "outkd";
    case KdMode::Lift: return "lift";
    case KdMode::Place: return "place";
  }
  return "unknown";
}

KdMode kd_mode_from_string(const std::string& name) {
  if (name == "none") return KdMode::None;
  if (name == "outkd") return KdMode::OutKd;
  if (name == "lift") return KdMode::Lift;
  if (name == "place") return KdMode::Place;
  throw std::invalid_argument("unknown kd mode '" + name + "'");
}

std::string Method::name() const {
  std::string base = kd == KdMode::None ? (featkd ? "" : "finetune") : to_string(kd);
  if (featkd) base += base.empty() ? "featkd" : "+featkd";
  return base;
}

Method Method::parse(const std::string& name) {
  Method m;
  std::stringstream ss(name);
  std::string token;
  bool any = false;
  while (std::getline(ss, token, '+')) {
    any = true;
    if (token == "featkd") {
      m.featkd = true;
    } else if (token == "finetune") {
      m.kd = KdMode::None;
    } else {
      const KdMode mode = kd_mode_from_string(token);
      // "lift+place" spelled as two tokens means PLACE (group-wise LIFT).
      if (m.kd == KdMode::Place && mode == KdMode::Lift) continue;
      if (m.kd == KdMode::Lift && mode == KdMode::Place) {
        m.kd = KdMode::Place;
        continue;
      }
      if (m.kd != KdMode::None) throw std::invalid_argument("method '" + name + "' has two output terms");
      m.kd = mode;
    }
  }
  if (!any) throw std::invalid_argument("empty method name");
  return m;
}

WeightScheduler HarnessConfig::weight_scheduler() const {
  WeightScheduler s;
  s.kind = scheduler;
  s.total_iters = iterations;
  s.fixed_value = fixed_w;
  return s;
}

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<json(const HarnessConfig&)> get;
  std::function<void(HarnessConfig&, const json&)> set;
  std::string path() const { return section + "." + key; }
};

template <class T>
T as(const json& v) {
  return v.get<T>();
}

std::vector<std::size_t> widths_from(const json& v) {
  auto w = v.get<std::vector<std::size_t>>();
  return w;
}

std::string coeff_grad_name(CoeffGrad g) { return g == CoeffGrad::Stop ? "stop" : "full"; }
CoeffGrad coeff_grad_from(const std::string& s) {
  if (s == "stop") return CoeffGrad::Stop;
  if (s == "full") return CoeffGrad::Full;
  throw std::invalid_argument("expected \"stop\" or \"full\"");
}
std::string diff_target_name(DiffTarget t) { return t == DiffTarget::Noise ? "noise" : "teacher"; }
DiffTarget diff_target_from(const std::string& s) {
  if (s == "noise") return DiffTarget::Noise;
  if (s == "teacher") return DiffTarget::Teacher;
  throw std::invalid_argument("expected \"noise\" or \"teacher\"");
}

#define LIFTKD_FIELD(sec, name, member, to_json_expr, from_json_expr)                 \
  Field {                                                                             \
    sec, name, [](const HarnessConfig& c) -> json { return to_json_expr(c.member); }, \
        [](HarnessConfig& c, const json& v) { c.member = from_json_expr(v); }         \
  }

json identity(const auto& v) { return json(v); }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(LIFTKD_FIELD("data", "kind", dataset, [](DatasetKind k) { return json(to_string(k)); },
                             [](const json& v) { return dataset_kind_from_string(v.get<std::string>()); }));
    f.push_back(LIFTKD_FIELD("data", "samples", samples, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("schedule", "steps", steps, identity, as<int>));
    f.push_back(LIFTKD_FIELD("schedule", "beta_start", beta_start, identity, as<double>));
    f.push_back(LIFTKD_FIELD("schedule", "beta_end", beta_end, identity, as<double>));
    f.push_back(LIFTKD_FIELD("model", "teacher_widths", teacher_widths, identity, widths_from));
    f.push_back(LIFTKD_FIELD("model", "student_widths", student_widths, identity, widths_from));
    f.push_back(LIFTKD_FIELD("model", "teacher_feature_layer", teacher_feature_layer, identity, as<int>));
    f.push_back(LIFTKD_FIELD("model", "student_feature_layer", student_feature_layer, identity, as<int>));
    f.push_back(LIFTKD_FIELD("loss", "method", method, [](const Method& m) { return json(m.name()); },
                             [](const json& v) { return Method::parse(v.get<std::string>()); }));
    f.push_back(LIFTKD_FIELD("loss", "lambda_diff", lambda_diff, identity, as<double>));
    f.push_back(LIFTKD_FIELD("loss", "lambda_outkd", lambda_outkd, identity, as<double>));
    f.push_back(LIFTKD_FIELD("loss", "lambda_lift", lambda_lift, identity, as<double>));
    f.push_back(LIFTKD_FIELD("loss", "lambda_featkd", lambda_featkd, identity, as<double>));
    f.push_back(LIFTKD_FIELD("loss", "group_size", group_size, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("loss", "scheduler", scheduler,
                             [](WeightScheduler::Kind k) { return json(to_string(k)); },
                             [](const json& v) { return scheduler_kind_from_string(v.get<std::string>()); }));
    f.push_back(LIFTKD_FIELD("loss", "fixed_w", fixed_w, identity, as<double>));
    f.push_back(LIFTKD_FIELD("loss", "relaxed_l2", relaxed_l2, identity, as<bool>));
    f.push_back(LIFTKD_FIELD("loss", "coeff_grad", coeff_grad, [](CoeffGrad g) { return json(coeff_grad_name(g)); },
                             [](const json& v) { return coeff_grad_from(v.get<std::string>()); }));
    f.push_back(LIFTKD_FIELD("loss", "diff_target", diff_target,
                             [](DiffTarget t) { return json(diff_target_name(t)); },
                             [](const json& v) { return diff_target_from(v.get<std::string>()); }));
    f.push_back(LIFTKD_FIELD("loss", "pooled_w", pooled_w, identity, as<bool>));
    f.push_back(LIFTKD_FIELD("loss", "coarse_ema", coarse_ema, identity, as<double>));
    f.push_back(LIFTKD_FIELD("train", "iterations", iterations, identity, as<long>));
    f.push_back(LIFTKD_FIELD("train", "batch_size", batch_size, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("train", "lr", lr, identity, as<double>));
    f.push_back(LIFTKD_FIELD("train", "teacher_iterations", teacher_iterations, identity, as<long>));
    f.push_back(LIFTKD_FIELD("train", "teacher_lr", teacher_lr, identity, as<double>));
    f.push_back(LIFTKD_FIELD("eval", "samples", eval_samples, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("eval", "projections", projections, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("run", "seed", seed, identity, as<std::uint64_t>));
    f.push_back(LIFTKD_FIELD("run", "seeds", seeds, identity, as<std::vector<std::uint64_t>>));
    f.push_back(LIFTKD_FIELD("run", "teacher_checkpoint", teacher_checkpoint, identity, as<std::string>));
    f.push_back(LIFTKD_FIELD("run", "student_checkpoint", student_checkpoint, identity, as<std::string>));
    f.push_back(LIFTKD_FIELD("run", "error_map_t", error_map_t, identity, as<int>));
    f.push_back(LIFTKD_FIELD("run", "correct_samples", correct_samples, identity, as<std::size_t>));
    f.push_back(LIFTKD_FIELD("grid", "teachers", grid_teachers, identity,
                             as<std::vector<std::vector<std::size_t>>>));
    f.push_back(LIFTKD_FIELD("grid", "students", grid_students, identity,
                             as<std::vector<std::vector<std::size_t>>>));
    f.push_back(LIFTKD_FIELD(
        "grid", "methods", grid_methods,
        [](const std::vector<Method>& ms) {
          json arr = json::array();
          for (const auto& m : ms) arr.push_back(m.name());
          return arr;
        },
        [](const json& v) {
          std::vector<Method> ms;
          for (const auto& s : v.get<std::vector<std::string>>()) ms.push_back(Method::parse(s));
          return ms;
        }));
    return f;
  }();
  return table;
}

#undef LIFTKD_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require(bool ok, const char* field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

void check_widths(const std::vector<std::size_t>& w, const char* field) {
  for (auto v : w) require(v > 0, field, "widths must be positive");
}

void check_feature_layer(int layer, const std::vector<std::size_t>& widths, const char* field) {
  const int n = static_cast<int>(widths.size());
  require(layer >= -n && layer < n, field, "feature layer index out of range for the widths");
}

}  // namespace

void HarnessConfig::validate() const {
  require(samples >= 2, "data.samples", "need at least 2 samples");
  require(steps >= 1, "schedule.steps", "must be >= 1");
  require(beta_start > 0.0 && beta_start < 1.0, "schedule.beta_start", "must lie in (0, 1)");
  require(beta_end >= beta_start && beta_end < 1.0, "schedule.beta_end", "must lie in [beta_start, 1)");
  check_widths(teacher_widths, "model.teacher_widths");
  check_widths(student_widths, "model.student_widths");
  const std::pair<double, const char*> lambdas[] = {{lambda_diff, "loss.lambda_diff"},
                                                     {lambda_outkd, "loss.lambda_outkd"},
                                                     {lambda_lift, "loss.lambda_lift"},
                                                     {lambda_featkd, "loss.lambda_featkd"}};
  for (const auto& [value, name] : lambdas) {
    require(value >= 0.0 && std::isfinite(value), name, "must be finite and >= 0");
  }
  if (method.featkd) {
    require(!teacher_widths.empty(), "model.teacher_widths", "featkd needs a hidden layer");
    require(!student_widths.empty(), "model.student_widths", "featkd needs a hidden layer");
    check_feature_layer(teacher_feature_layer, teacher_widths, "model.teacher_feature_layer");
    check_feature_layer(student_feature_layer, student_widths, "model.student_feature_layer");
  }
  require(group_size >= 2, "loss.group_size", "must be >= 2");
  require(fixed_w >= 0.0 && fixed_w <= 1.0, "loss.fixed_w", "must lie in [0, 1]");
  require(coarse_ema >= 0.0 && coarse_ema < 1.0, "loss.coarse_ema", "must lie in [0, 1)");
  require(coarse_ema == 0.0 || method.kd == KdMode::Lift, "loss.coarse_ema",
          "coarse-loss smoothing is only supported with method lift");
  require(iterations >= 1, "train.iterations", "must be >= 1");
  require(batch_size >= 2, "train.batch_size", "must be >= 2");
  require(lr > 0.0, "train.lr", "must be > 0");
  require(teacher_iterations >= 0, "train.teacher_iterations", "must be >= 0");
  require(teacher_lr > 0.0, "train.teacher_lr", "must be > 0");
  require(eval_samples >= 2, "eval.samples", "must be >= 2");
  require(projections >= 1, "eval.projections", "must be >= 1");
  require(!seeds.empty(), "run.seeds", "need at least one seed");
  require(error_map_t >= 1 && error_map_t <= steps, "run.error_map_t", "must lie in [1, steps]");
  require(correct_samples >= 1, "run.correct_samples", "must be >= 1");
  require(!grid_teachers.empty(), "grid.teachers", "need at least one teacher");
  require(!grid_students.empty(), "grid.students", "need at least one student");
  require(!grid_methods.empty(), "grid.methods", "need at least one method");
  for (const auto& w : grid_teachers) check_widths(w, "grid.teachers");
  for (const auto& w : grid_students) check_widths(w, "grid.students");

  // PLACE groups positions within each channel plane.
  auto check_place = [&](const Method& m, const char* field) {
    if (m.kd != KdMode::Place) return;
    const std::size_t plane = dataset == DatasetKind::GridPatterns ? 64 : batch_size;
    if (plane % group_size != 0) {
      throw ConfigError(field, "group size " + std::to_string(group_size) +
                                   " must divide the grouped plane size " + std::to_string(plane));
    }
  };
  check_place(method, "loss.group_size");
  for (const auto& m : grid_methods) check_place(m, "loss.group_size");
}

HarnessConfig parse_config(const std::string& text) {
  HarnessConfig cfg;
  std::map<std::string, const Field*> by_path;
  for (const auto& f : fields()) by_path[f.path()] = &f;

  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']' && t.find('=') == std::string::npos) {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string path = section + "." + key;
    const auto it = by_path.find(path);
    if (it == by_path.end()) throw ConfigError(path, "unknown setting");
    try {
      it->second->set(cfg, json::parse(trim(t.substr(eq + 1))));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(path, std::string("invalid value: ") + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

HarnessConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const HarnessConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(cfg).dump() << '\n';
  }
  return out.str();
}

}  // namespace liftkd
