#include "niwmeta/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "niwmeta/version.hpp"

namespace niwmeta {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Strict JSON reading

class Section {
 public:
  Section(const json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const char* key) const { return j_->contains(key); }

  template <class T>
  void get(const char* key, T& out, bool required = false) {
    used_.insert(key);
    const auto it = j_->find(key);
    if (it == j_->end()) {
      if (required) throw ConfigError("missing required field: " + field(key));
      return;
    }
    read(*it, field(key), out);
  }

  Section child(const char* key, bool required = false) {
    used_.insert(key);
    const auto it = j_->find(key);
    if (it == j_->end()) {
      if (required) throw ConfigError("missing required field: " + field(key));
      return Section(empty(), field(key));
    }
    return Section(*it, field(key));
  }

  /// Rejects keys that no `get` or `child` asked for.
  void finish() const {
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown field: " + field(it.key()));
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const json& v, const std::string& name, double& out) {
    if (!v.is_number()) throw ConfigError(name + " must be a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& name, bool& out) {
    if (!v.is_boolean()) throw ConfigError(name + " must be a boolean");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& name, std::string& out) {
    if (!v.is_string()) throw ConfigError(name + " must be a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, const std::string& name, std::uint64_t& out) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(name + " must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, const std::string& name, long& out) {
    if (!v.is_number_integer()) throw ConfigError(name + " must be an integer");
    out = v.get<long>();
  }
  static void read(const json& v, const std::string& name, int& out) {
    long x = 0;
    read(v, name, x);
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
      throw ConfigError(name + " is out of range");
    }
    out = static_cast<int>(x);
  }
  template <class T>
  static void read(const json& v, const std::string& name, std::vector<T>& out) {
    if (!v.is_array()) throw ConfigError(name + " must be an array");
    std::vector<T> tmp(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], name + "[" + std::to_string(i) + "]", tmp[i]);
    out = std::move(tmp);
  }

  const json* j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class E, class F>
E parse_enum(const std::string& name, const std::string& value, F from_string) {
  try {
    return from_string(value);
  } catch (const DomainError&) {
    throw ConfigError(name + ": unknown value '" + value + "'");
  }
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "momentum") return OptimizerKind::momentum;
  throw DomainError("unknown optimizer: " + s);
}
const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "momentum"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "sine_line") return TaskKind::sine_line;
  if (s == "blobs") return TaskKind::blobs;
  throw DomainError("unknown task kind: " + s);
}
const char* to_string(TaskKind k) { return k == TaskKind::sine_line ? "sine_line" : "blobs"; }

void parse_sine_line(Section s, SineLineConfig& c) {
  s.get("amplitude_min", c.amplitude_min);
  s.get("amplitude_max", c.amplitude_max);
  s.get("phase_min", c.phase_min);
  s.get("phase_max", c.phase_max);
  s.get("frequency_min", c.frequency_min);
  s.get("frequency_max", c.frequency_max);
  s.get("slope_min", c.slope_min);
  s.get("slope_max", c.slope_max);
  s.get("intercept_min", c.intercept_min);
  s.get("intercept_max", c.intercept_max);
  s.get("x_min", c.x_min);
  s.get("x_max", c.x_max);
  s.get("sine_probability", c.sine_probability);
  s.get("k_shot", c.k_shot);
  s.get("k_query", c.k_query);
  s.get("noise_std", c.noise_std);
  s.finish();
}

void parse_blobs(Section s, BlobConfig& c) {
  s.get("n_way", c.n_way);
  s.get("k_shot", c.k_shot);
  s.get("k_query", c.k_query);
  s.get("dim", c.dim);
  s.get("spread", c.spread);
  s.get("center_radius", c.center_radius);
  s.finish();
}

json sine_line_json(const SineLineConfig& c) {
  return {{"amplitude_min", c.amplitude_min}, {"amplitude_max", c.amplitude_max},
          {"phase_min", c.phase_min},         {"phase_max", c.phase_max},
          {"frequency_min", c.frequency_min}, {"frequency_max", c.frequency_max},
          {"slope_min", c.slope_min},         {"slope_max", c.slope_max},
          {"intercept_min", c.intercept_min}, {"intercept_max", c.intercept_max},
          {"x_min", c.x_min},                 {"x_max", c.x_max},
          {"sine_probability", c.sine_probability},
          {"k_shot", c.k_shot},               {"k_query", c.k_query},
          {"noise_std", c.noise_std}};
}

json blobs_json(const BlobConfig& c) {
  return {{"n_way", c.n_way}, {"k_shot", c.k_shot},   {"k_query", c.k_query},
          {"dim", c.dim},     {"spread", c.spread}, {"center_radius", c.center_radius}};
}

json backbone_json(const MlpSpec& spec) {
  return {{"widths", spec.widths}, {"activation", to_string(spec.activation)}};
}

json head_json(const HeadConfig& h) {
  return {{"kind", to_string(h.kind)},
          {"ridge_lambda", h.ridge_lambda},
          {"temperature", h.temperature},
          {"normalize_features", h.normalize_features},
          {"sigma_obs", h.sigma_obs}};
}

void parse_backbone(Section s, MlpSpec& spec) {
  s.get("widths", spec.widths);
  std::string act = to_string(spec.activation);
  s.get("activation", act);
  spec.activation = parse_enum<Activation>("backbone.activation", act, activation_from_string);
  s.finish();
}

void parse_head(Section s, HeadConfig& h) {
  std::string kind = to_string(h.kind);
  s.get("kind", kind);
  h.kind = parse_enum<HeadKind>("head.kind", kind, head_kind_from_string);
  s.get("ridge_lambda", h.ridge_lambda);
  s.get("temperature", h.temperature);
  s.get("normalize_features", h.normalize_features);
  s.get("sigma_obs", h.sigma_obs);
  s.finish();
}

MlpSpec backbone_from_json(const json& j) {
  MlpSpec spec;
  parse_backbone(Section(j, "backbone"), spec);
  return spec;
}

HeadConfig head_from_json(const json& j) {
  HeadConfig h;
  parse_head(Section(j, "head"), h);
  return h;
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from_json(const json& j, const std::string& name) {
  if (!j.is_array()) throw IncompatibleModel(name + " must be an array");
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw IncompatibleModel(name + " must contain numbers");
    v[static_cast<Index>(i)] = j[i].get<double>();
  }
  return v;
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double tail_average(const std::vector<double>& v, Index window) {
  if (v.empty()) return 0.0;
  const std::size_t w = std::min<std::size_t>(v.size(), static_cast<std::size_t>(window));
  double s = 0.0;
  for (std::size_t i = v.size() - w; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(w);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");
  std::string method;
  root.get("method", method, true);
  cfg.train.method = parse_enum<Method>("method", method, method_from_string);
  root.get("seed", cfg.train.seed, true);
  root.get("out_dir", cfg.out_dir);

  {
    Section task = root.child("task", true);
    std::string kind;
    task.get("kind", kind, true);
    cfg.tasks.kind = parse_enum<TaskKind>("task.kind", kind, task_kind_from_string);
    parse_sine_line(task.child("sine_line"), cfg.tasks.sine_line);
    parse_blobs(task.child("blobs"), cfg.tasks.blobs);
    task.finish();
  }
  // Classification runs default to a 2-d input backbone with an NCC head.
  if (cfg.tasks.kind == TaskKind::blobs) {
    cfg.train.backbone.widths.front() = cfg.tasks.blobs.dim;
    cfg.train.head.kind = HeadKind::ncc;
  }
  parse_backbone(root.child("backbone"), cfg.train.backbone);
  parse_head(root.child("head"), cfg.train.head);

  {
    Section t = root.child("train", true);
    long episodes = 0;
    t.get("episodes", episodes, true);
    cfg.train.episodes = episodes;
    t.get("outer_lr", cfg.train.outer_lr, true);
    t.get("mc_samples", cfg.train.mc_samples);
    t.get("grad_clip", cfg.train.grad_clip);
    std::string opt = to_string(cfg.train.optimizer);
    t.get("optimizer", opt);
    cfg.train.optimizer = parse_enum<OptimizerKind>("train.optimizer", opt, optimizer_from_string);
    t.get("momentum", cfg.train.momentum);
    t.get("inner_steps", cfg.train.inner_steps);
    t.get("inner_lr", cfg.train.inner_lr);
    t.get("init_v0", cfg.train.init_v0);
    t.get("init_n0_excess", cfg.train.init_n0_excess);
    long window = cfg.train.smoothing_window;
    t.get("smoothing_window", window);
    cfg.train.smoothing_window = window;
    t.finish();
  }
  {
    Section s = root.child("sgld");
    s.get("steps", cfg.train.sgld.steps);
    s.get("burn_in", cfg.train.sgld.burn_in);
    s.get("step_size", cfg.train.sgld.step_size);
    s.get("precision_floor", cfg.train.sgld.precision_floor);
    s.get("precision_cap", cfg.train.sgld.precision_cap);
    s.finish();
  }
  {
    Section e = root.child("eval");
    EvalSettings& ev = cfg.eval;
    e.get("after_train", cfg.eval_after_train);
    long n = ev.test_episodes;
    e.get("test_episodes", n);
    ev.test_episodes = n;
    n = ev.validation_episodes;
    e.get("validation_episodes", n);
    ev.validation_episodes = n;
    e.get("mv_steps", ev.mv_steps);
    e.get("adapt_lr", ev.adapt.lr);
    e.get("adapt_mc_samples", ev.adapt.mc_samples);
    e.get("likelihood_weight", ev.adapt.likelihood_weight);
    e.get("ms_samples", ev.ms_samples);
    e.get("n_bins", ev.n_bins);
    e.get("temperature_grid", ev.temperature_grid);
    e.finish();
  }
  {
    Section b = root.child("bound");
    b.get("enabled", cfg.bound.enabled);
    long n = cfg.bound.check.n_tasks;
    b.get("n_tasks", n);
    cfg.bound.check.n_tasks = n;
    n = cfg.bound.check.heldout_points;
    b.get("heldout_points", n);
    cfg.bound.check.heldout_points = n;
    b.finish();
  }
  {
    Section b = root.child("bench");
    long n = cfg.bench.episodes;
    b.get("episodes", n);
    cfg.bench.episodes = n;
    n = cfg.bench.warmup;
    b.get("warmup", n);
    cfg.bench.warmup = n;
    b.get("sgld_steps", cfg.bench.sgld_steps);
    b.get("fomaml_steps", cfg.bench.fomaml_steps);
    b.finish();
  }
  root.finish();
  cfg.bound.check.sgld = cfg.train.sgld;

  try {
    cfg.tasks.validate();
    cfg.train.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (cfg.train.backbone.widths.front() != cfg.tasks.input_dim()) {
    throw ConfigError("backbone.widths[0] must equal the task input dimension (" +
                      std::to_string(cfg.tasks.input_dim()) + ")");
  }
  const bool regression = cfg.tasks.task_type() == TaskType::regression;
  if (regression != (cfg.train.head.kind == HeadKind::ridge)) {
    throw ConfigError("head.kind must be ridge for sine_line and ncc for blobs");
  }
  const EvalSettings& ev = cfg.eval;
  if (ev.test_episodes < 1) throw ConfigError("eval.test_episodes must be >= 1");
  if (ev.validation_episodes < 1) throw ConfigError("eval.validation_episodes must be >= 1");
  if (ev.ms_samples < 2) throw ConfigError("eval.ms_samples must be >= 2");
  if (ev.n_bins < 1) throw ConfigError("eval.n_bins must be >= 1");
  if (!(ev.adapt.lr >= 0.0)) throw ConfigError("eval.adapt_lr must be >= 0");
  if (ev.adapt.mc_samples < 1) throw ConfigError("eval.adapt_mc_samples must be >= 1");
  if (!(ev.adapt.likelihood_weight >= 0.0)) throw ConfigError("eval.likelihood_weight must be >= 0");
  for (int mv : ev.mv_steps) {
    if (mv < 0) throw ConfigError("eval.mv_steps entries must be >= 0");
  }
  if (ev.temperature_grid.empty()) throw ConfigError("eval.temperature_grid must not be empty");
  for (double t : ev.temperature_grid) {
    if (!(t > 0.0)) throw ConfigError("eval.temperature_grid entries must be > 0");
  }
  if (cfg.bound.check.n_tasks < 1 || cfg.bound.check.heldout_points < 1) {
    throw ConfigError("bound.n_tasks and bound.heldout_points must be >= 1");
  }
  if (cfg.bench.episodes < 1 || cfg.bench.warmup < 0) {
    throw ConfigError("bench.episodes must be >= 1 and bench.warmup >= 0");
  }
  for (int s : cfg.bench.sgld_steps) {
    if (s < 1) throw ConfigError("bench.sgld_steps entries must be >= 1");
  }
  for (int s : cfg.bench.fomaml_steps) {
    if (s < 1) throw ConfigError("bench.fomaml_steps entries must be >= 1");
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  json j;
  j["method"] = to_string(t.method);
  j["seed"] = t.seed;
  j["out_dir"] = cfg.out_dir;
  j["task"] = {{"kind", to_string(cfg.tasks.kind)},
               {"sine_line", sine_line_json(cfg.tasks.sine_line)},
               {"blobs", blobs_json(cfg.tasks.blobs)}};
  j["backbone"] = backbone_json(t.backbone);
  j["head"] = head_json(t.head);
  j["train"] = {{"episodes", t.episodes},
                {"outer_lr", t.outer_lr},
                {"mc_samples", t.mc_samples},
                {"grad_clip", t.grad_clip},
                {"optimizer", to_string(t.optimizer)},
                {"momentum", t.momentum},
                {"inner_steps", t.inner_steps},
                {"inner_lr", t.inner_lr},
                {"init_v0", t.init_v0},
                {"init_n0_excess", t.init_n0_excess},
                {"smoothing_window", t.smoothing_window}};
  j["sgld"] = {{"steps", t.sgld.steps},
               {"burn_in", t.sgld.burn_in},
               {"step_size", t.sgld.step_size},
               {"precision_floor", t.sgld.precision_floor},
               {"precision_cap", t.sgld.precision_cap}};
  const EvalSettings& e = cfg.eval;
  j["eval"] = {{"after_train", cfg.eval_after_train},
               {"test_episodes", e.test_episodes},
               {"validation_episodes", e.validation_episodes},
               {"mv_steps", e.mv_steps},
               {"adapt_lr", e.adapt.lr},
               {"adapt_mc_samples", e.adapt.mc_samples},
               {"likelihood_weight", e.adapt.likelihood_weight},
               {"ms_samples", e.ms_samples},
               {"n_bins", e.n_bins},
               {"temperature_grid", e.temperature_grid}};
  j["bound"] = {{"enabled", cfg.bound.enabled},
                {"n_tasks", cfg.bound.check.n_tasks},
                {"heldout_points", cfg.bound.check.heldout_points}};
  j["bench"] = {{"episodes", cfg.bench.episodes},
                {"warmup", cfg.bench.warmup},
                {"sgld_steps", cfg.bench.sgld_steps},
                {"fomaml_steps", cfg.bench.fomaml_steps}};
  return j;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const json full = config_to_json(cfg);
  json training;
  for (const char* key : {"method", "seed", "task", "backbone", "head", "train", "sgld"}) {
    training[key] = full[key];
  }
  const std::string text = training.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Artifacts

json model_to_json(const ModelArtifact& a) {
  const TrainedModel& m = a.model;
  json j;
  j["format"] = kArtifactFormat;
  j["library_version"] = kLibraryVersion;
  j["config_hash"] = hash_hex(a.config_hash);
  j["method"] = to_string(m.method);
  j["backbone"] = backbone_json(m.backbone);
  j["head"] = head_json(m.head);
  j["params"] = vec_json(m.params);
  if (m.posterior) {
    j["posterior"] = {{"m0", vec_json(m.posterior->m0)},
                      {"rho_v", vec_json(m.posterior->rho_v)},
                      {"rho_n", m.posterior->rho_n}};
  } else {
    j["posterior"] = nullptr;
  }
  j["inner_steps"] = m.inner_steps;
  j["inner_lr"] = m.inner_lr;
  j["epsilon_star"] = a.epsilon_star;
  j["query_size"] = a.query_size;
  return j;
}

ModelArtifact model_from_json(const json& j) {
  if (!j.is_object()) throw IncompatibleModel("model artifact must be a JSON object");
  if (!j.contains("format") || j["format"] != kArtifactFormat) {
    throw IncompatibleModel("model artifact format mismatch (expected " +
                            std::to_string(kArtifactFormat) + ")");
  }
  if (!j.contains("library_version") || j["library_version"] != kLibraryVersion) {
    throw IncompatibleModel(std::string("model artifact library version mismatch (expected ") +
                            kLibraryVersion + ")");
  }
  ModelArtifact a;
  try {
    TrainedModel& m = a.model;
    m.method = method_from_string(j.at("method").get<std::string>());
    m.backbone = backbone_from_json(j.at("backbone"));
    m.head = head_from_json(j.at("head"));
    m.params = vec_from_json(j.at("params"), "params");
    if (!j.at("posterior").is_null()) {
      const json& p = j.at("posterior");
      GlobalPosterior post;
      post.m0 = vec_from_json(p.at("m0"), "posterior.m0");
      post.rho_v = vec_from_json(p.at("rho_v"), "posterior.rho_v");
      post.rho_n = p.at("rho_n").get<double>();
      if (post.rho_v.size() != post.m0.size()) throw IncompatibleModel("posterior size mismatch");
      m.posterior = std::move(post);
    }
    m.inner_steps = j.at("inner_steps").get<int>();
    m.inner_lr = j.at("inner_lr").get<double>();
    a.epsilon_star = j.at("epsilon_star").get<double>();
    a.query_size = j.at("query_size").get<Index>();
    const std::string hex = j.at("config_hash").get<std::string>();
    a.config_hash = std::stoull(hex, nullptr, 16);
  } catch (const IncompatibleModel&) {
    throw;
  } catch (const std::exception& e) {
    throw IncompatibleModel(std::string("malformed model artifact: ") + e.what());
  }
  if (a.model.params.size() != a.model.backbone.param_count()) {
    throw IncompatibleModel("model params do not match the backbone size");
  }
  if (a.model.method == Method::niw_meta && !a.model.posterior) {
    throw IncompatibleModel("niw_meta model without a global posterior");
  }
  return a;
}

namespace {

json variant_json(const VariantMetrics& v, TaskType task) {
  json j{{"name", v.name}, {"mv_steps", v.mv_steps}};
  if (task == TaskType::regression) {
    j["mse"] = v.mse;
    j["r_ece"] = v.r_ece;
  } else {
    j["accuracy"] = v.accuracy;
    j["ece"] = v.ece;
    j["ece_tuned"] = v.ece_tuned;
    j["temperature"] = v.temperature;
  }
  if (v.mv_steps >= 0) j["adapt_warning"] = v.adapt_warning;
  return j;
}

}  // namespace

json eval_report_to_json(const EvalReport& rep) {
  json variants = json::array();
  for (const auto& v : rep.variants) variants.push_back(variant_json(v, rep.task));
  return {{"method", to_string(rep.method)},
          {"task", rep.task == TaskType::regression ? "regression" : "classification"},
          {"episodes", rep.episodes},
          {"point", variant_json(rep.point, rep.task)},
          {"variants", variants}};
}

json bound_report_to_json(const BoundReport& rep) {
  return {{"epsilon_star", rep.epsilon_star},
          {"epsilon_star_kind", "smoothed training objective (upper-bound proxy)"},
          {"n", rep.n},
          {"lhs", rep.lhs},
          {"rhs", rep.rhs},
          {"holds", rep.holds},
          {"n_tasks", rep.n_tasks}};
}

void write_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, target);
}

// ---------------------------------------------------------------------------
// Bench

std::vector<BenchRow> run_bench(const ExperimentConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  const Rng root(cfg.train.seed);
  Rng episode_rng = root.split(streams::bench);
  const Index total = cfg.bench.warmup + cfg.bench.episodes;
  const std::vector<Episode> episodes = sample_episodes(cfg.tasks, total, episode_rng);

  const auto time_steps = [&](auto&& step) {
    std::vector<double> secs;
    secs.reserve(static_cast<std::size_t>(cfg.bench.episodes));
    for (Index i = 0; i < total; ++i) {
      const auto t0 = Clock::now();
      step(episodes[static_cast<std::size_t>(i)]);
      const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
      if (i >= cfg.bench.warmup) secs.push_back(dt);
    }
    return median(secs);
  };

  Rng init_rng = root.split(streams::init);
  const GlobalPosterior init = initial_posterior(cfg.train, init_rng);
  // Steps are not applied to the parameters being timed: outer_lr only
  // scales the update, so timing is unaffected, and identical starting
  // points keep the comparison fair.
  std::vector<BenchRow> rows;
  {
    TrainConfig t = cfg.train;
    t.method = Method::protonet;
    BaselineTrainer tr(t, init.m0);
    rows.push_back({"protonet", 0, time_steps([&](const Episode& ep) { tr.step(ep); }), 1.0});
  }
  for (int steps : cfg.bench.sgld_steps) {
    TrainConfig t = cfg.train;
    t.method = Method::niw_meta;
    t.sgld.steps = steps;
    t.sgld.burn_in = std::min(t.sgld.burn_in, steps - 1);
    NiwMetaTrainer tr(t, init, root.split(streams::algorithm));
    rows.push_back({"niw_meta", steps, time_steps([&](const Episode& ep) { tr.step(ep); }), 0.0});
  }
  for (int steps : cfg.bench.fomaml_steps) {
    TrainConfig t = cfg.train;
    t.method = Method::fomaml;
    t.inner_steps = steps;
    BaselineTrainer tr(t, init.m0);
    rows.push_back({"fomaml", steps, time_steps([&](const Episode& ep) { tr.step(ep); }), 0.0});
  }
  const double base = rows.front().median_seconds;
  for (auto& r : rows) r.ratio_to_protonet = base > 0.0 ? r.median_seconds / base : 0.0;
  rows.front().ratio_to_protonet = 1.0;
  return rows;
}

std::string bench_to_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "method,steps,median_seconds,ratio_to_protonet\r\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.steps << ',' << format_double(r.median_seconds) << ','
       << format_double(r.ratio_to_protonet) << "\r\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitModel = 4;

void report_error(const std::string& kind, const std::string& message, const json& extra = {}) {
  json j{{"error", kind}, {"message", message}};
  if (extra.is_object()) j.update(extra);
  std::cerr << j.dump() << std::endl;
}

struct CommonArgs {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
  std::string model;
};

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args.config);
  if (args.seed_set) cfg.train.seed = args.seed;
  if (!args.out.empty()) cfg.out_dir = args.out;
  if (cfg.out_dir.empty()) throw ConfigError("missing required field: out_dir (or pass --out)");
  return cfg;
}

std::string out_path(const ExperimentConfig& cfg, const char* name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

std::string trace_csv(const RunRecord& rec) {
  std::ostringstream os;
  os << "episode,objective,loss,elbo\r\n";
  const bool has_elbo = !rec.elbo_trace.empty();
  for (std::size_t i = 0; i < rec.objective_trace.size(); ++i) {
    os << i << ',' << format_double(rec.objective_trace[i]) << ','
       << format_double(rec.loss_trace[i]) << ',';
    if (has_elbo) os << format_double(rec.elbo_trace[i]);
    os << "\r\n";
  }
  return os.str();
}

json episode_time_stats(const std::vector<double>& secs) {
  if (secs.empty()) return json::object();
  double total = 0.0;
  for (double s : secs) total += s;
  std::vector<double> sorted = secs;
  std::sort(sorted.begin(), sorted.end());
  return {{"total", total},
          {"mean", total / static_cast<double>(secs.size())},
          {"median", median(secs)},
          {"p90", sorted[static_cast<std::size_t>(0.9 * static_cast<double>(sorted.size() - 1))]},
          {"max", sorted.back()}};
}

json header(std::uint64_t hash) {
  return {{"format", kArtifactFormat},
          {"library_version", kLibraryVersion},
          {"config_hash", hash_hex(hash)}};
}

int cmd_train(const CommonArgs& args) {
  using Clock = std::chrono::steady_clock;
  const ExperimentConfig cfg = resolve_config(args);
  const std::uint64_t hash = config_hash(cfg);

  const auto t0 = Clock::now();
  TrainResult res;
  try {
    res = train(cfg.train, cfg.tasks);
  } catch (const TrainingError& e) {
    report_error("numeric", e.what(), {{"episode", e.episode()}});
    return kExitNumeric;
  }
  const double train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  const RunRecord& rec = res.record;

  json run = header(hash);
  run["method"] = to_string(cfg.train.method);
  run["config"] = config_to_json(cfg);
  run["config"].erase("out_dir");  // where a run is written is not part of it
  run["train"] = {{"episodes", cfg.train.episodes},
                  {"final_objective_smoothed", tail_average(rec.objective_trace, cfg.train.smoothing_window)},
                  {"final_loss_smoothed", tail_average(rec.loss_trace, cfg.train.smoothing_window)},
                  {"query_size", rec.query_size}};
  if (cfg.train.method == Method::niw_meta) {
    run["train"]["epsilon_star"] = rec.epsilon_star;
    run["train"]["epsilon_star_kind"] = "smoothed training objective (upper-bound proxy)";
  }

  double eval_seconds = 0.0;
  try {
    const auto e0 = Clock::now();
    if (cfg.eval_after_train) {
      run["metrics"] = eval_report_to_json(evaluate(res.model, cfg.tasks, cfg.eval, cfg.train.seed));
    }
    if (cfg.bound.enabled && res.model.posterior) {
      Rng rng = Rng(cfg.train.seed).split(streams::bound);
      run["bound"] = bound_report_to_json(
          pac_bayes_check(rec.epsilon_star, rec.query_size, res.model, cfg.tasks, cfg.bound.check, rng));
    }
    eval_seconds = std::chrono::duration<double>(Clock::now() - e0).count();
  } catch (const NumericError& e) {
    report_error("numeric", e.what(), {{"stage", "evaluation"}});
    return kExitNumeric;
  }

  ModelArtifact artifact{res.model, hash, rec.epsilon_star, rec.query_size};
  json timing = header(hash);
  timing["train_seconds"] = train_seconds;
  timing["eval_seconds"] = eval_seconds;
  timing["episode_seconds"] = episode_time_stats(rec.episode_seconds);

  write_atomic(out_path(cfg, "trace.csv"), trace_csv(rec));
  write_atomic(out_path(cfg, "model.json"), model_to_json(artifact).dump() + "\n");
  write_atomic(out_path(cfg, "timing.json"), timing.dump(2) + "\n");
  write_atomic(out_path(cfg, "run.json"), run.dump(2) + "\n");
  std::cout << "wrote " << out_path(cfg, "run.json") << '\n';
  if (run.contains("metrics")) std::cout << run["metrics"].dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const std::uint64_t hash = config_hash(cfg);
  const std::string model_path = args.model.empty() ? out_path(cfg, "model.json") : args.model;

  ModelArtifact artifact;
  try {
    std::ifstream in(model_path);
    if (!in) throw IncompatibleModel("cannot read model artifact: " + model_path);
    json j;
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw IncompatibleModel(std::string("model artifact is not valid JSON: ") + e.what());
    }
    artifact = model_from_json(j);
    const TrainedModel& m = artifact.model;
    if (!(m.backbone == cfg.train.backbone)) {
      throw IncompatibleModel("model backbone does not match the config backbone");
    }
    if (m.head.kind != cfg.train.head.kind) throw IncompatibleModel("model head kind does not match the config");
    if (artifact.config_hash != hash && !args.force) {
      throw IncompatibleModel("config hash " + hash_hex(hash) + " differs from the model's " +
                              hash_hex(artifact.config_hash) + " (use --force to override)");
    }
  } catch (const IncompatibleModel& e) {
    report_error("incompatible_model", e.what());
    return kExitModel;
  }

  json out = header(hash);
  out["model_config_hash"] = hash_hex(artifact.config_hash);
  out["seed"] = cfg.train.seed;
  try {
    out["metrics"] = eval_report_to_json(evaluate(artifact.model, cfg.tasks, cfg.eval, cfg.train.seed));
    if (cfg.bound.enabled && artifact.model.posterior) {
      Rng rng = Rng(cfg.train.seed).split(streams::bound);
      out["bound"] = bound_report_to_json(pac_bayes_check(artifact.epsilon_star, artifact.query_size,
                                                          artifact.model, cfg.tasks, cfg.bound.check, rng));
    }
  } catch (const NumericError& e) {
    report_error("numeric", e.what(), {{"stage", "evaluation"}});
    return kExitNumeric;
  }
  write_atomic(out_path(cfg, "eval.json"), out.dump(2) + "\n");
  std::cout << out["metrics"].dump(2) << '\n';
  return kExitOk;
}

int cmd_bench(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const std::vector<BenchRow> rows = run_bench(cfg);
  const std::string csv = bench_to_csv(rows);
  write_atomic(out_path(cfg, "bench.csv"), csv);
  std::cout << csv;
  return kExitOk;
}

json reduction_json(const ReductionReport& r) {
  json j{{"mode", r.mode}, {"passed", r.passed}};
  if (r.mode == "protonet") {
    j["max_abs_diff"] = r.max_abs_diff;
    j["control_rel_diff"] = r.control_rel_diff;
  } else {
    j["running_mean_gap"] = r.running_mean_gap;
    j["final_distance"] = r.distances.empty() ? 0.0 : r.distances.back();
  }
  return j;
}

int cmd_reduce(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const ReductionReport proto = reduction_check(ReductionMode::protonet, cfg.train.seed);
  const ReductionReport rep = reduction_check(ReductionMode::reptile, cfg.train.seed);
  json out = header(config_hash(cfg));
  out["protonet"] = reduction_json(proto);
  out["reptile"] = reduction_json(rep);
  write_atomic(out_path(cfg, "reduce.json"), out.dump(2) + "\n");
  std::cout << out.dump(2) << '\n';
  return proto.passed && rep.passed ? kExitOk : kExitFailed;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"NIW-Meta hierarchical Bayesian few-shot meta-learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kLibraryVersion);

  CommonArgs args;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "experiment config (JSON)")->required();
    sub->add_option("--out", args.out, "output directory (overrides out_dir)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { args.seed = s; args.seed_set = true; },
        "seed (overrides the config)");
    sub->add_flag("--force", args.force, "ignore a config hash mismatch");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "train a model; writes run.json, trace.csv, model.json");
  CLI::App* eval_cmd = app.add_subcommand("eval", "meta-test a trained model; writes eval.json");
  CLI::App* bench_cmd = app.add_subcommand("bench", "per-episode timing table; writes bench.csv");
  CLI::App* reduce_cmd = app.add_subcommand("reduce-check", "ProtoNet and Reptile reduction checks");
  for (CLI::App* sub : {train_cmd, eval_cmd, bench_cmd, reduce_cmd}) add_common(sub);
  eval_cmd->add_option("--model", args.model, "model artifact (default: <out>/model.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(args);
    if (*eval_cmd) return cmd_eval(args);
    if (*bench_cmd) return cmd_bench(args);
    return cmd_reduce(args);
  } catch (const ConfigError& e) {
    report_error("invalid_config", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    report_error("numeric", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    report_error("failure", e.what());
    return kExitFailed;
  }
}

}  // namespace niwmeta
