#include "niwmeta/tasks.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace niwmeta {

double TaskMeta::curve_value(double x) const {
  switch (kind) {
    case CurveKind::sine:
      return amplitude * std::sin(frequency * x - phase);
    case CurveKind::line:
      return slope * x + intercept;
    case CurveKind::blobs:
      break;
  }
  throw DomainError("TaskMeta::curve_value: not a regression task");
}

const char* to_string(CurveKind kind) {
  switch (kind) {
    case CurveKind::sine: return "sine";
    case CurveKind::line: return "line";
    case CurveKind::blobs: return "blobs";
  }
  return "?";
}

CurveKind curve_kind_from_string(const std::string& s) {
  if (s == "sine") return CurveKind::sine;
  if (s == "line") return CurveKind::line;
  if (s == "blobs") return CurveKind::blobs;
  throw DomainError("unknown curve kind: " + s);
}

void TaskDistribution::validate() const {
  auto range = [](double lo, double hi, const char* name) {
    if (!(lo <= hi)) throw DomainError(std::string("task range is empty: ") + name);
  };
  if (kind == TaskKind::sine_line) {
    const auto& c = sine_line;
    range(c.amplitude_min, c.amplitude_max, "amplitude");
    range(c.phase_min, c.phase_max, "phase");
    range(c.frequency_min, c.frequency_max, "frequency");
    range(c.slope_min, c.slope_max, "slope");
    range(c.intercept_min, c.intercept_max, "intercept");
    range(c.x_min, c.x_max, "x");
    if (c.k_shot < 1 || c.k_query < 1) throw DomainError("sine_line: k_shot and k_query must be >= 1");
    if (c.sine_probability < 0.0 || c.sine_probability > 1.0) {
      throw DomainError("sine_line: sine_probability must be in [0, 1]");
    }
    if (c.noise_std < 0.0) throw DomainError("sine_line: noise_std must be >= 0");
  } else {
    const auto& b = blobs;
    if (b.n_way < 2) throw DomainError("blobs: n_way must be >= 2");
    if (b.k_shot < 1 || b.k_query < 1 || b.dim < 1) {
      throw DomainError("blobs: k_shot, k_query and dim must be >= 1");
    }
    if (b.spread < 0.0 || b.center_radius < 0.0) throw DomainError("blobs: negative spread/radius");
  }
}

namespace {

DataSet regression_points(const TaskMeta& meta, Index count, double x_min, double x_max,
                          Rng& rng) {
  DataSet ds;
  ds.inputs.resize(count, 1);
  ds.targets.resize(count);
  for (Index i = 0; i < count; ++i) {
    const double x = rng.uniform(x_min, x_max);
    ds.inputs(i, 0) = x;
    double y = meta.curve_value(x);
    if (meta.noise_std > 0.0) y += meta.noise_std * rng.normal();
    ds.targets[i] = y;
  }
  return ds;
}

DataSet blob_points(const TaskMeta& meta, int per_class, Rng& rng) {
  const Index n_way = meta.centers.rows();
  const Index dim = meta.centers.cols();
  DataSet ds;
  ds.inputs.resize(n_way * per_class, dim);
  ds.labels.resize(static_cast<std::size_t>(n_way * per_class));
  Index row = 0;
  for (Index c = 0; c < n_way; ++c) {
    for (int k = 0; k < per_class; ++k, ++row) {
      for (Index j = 0; j < dim; ++j) {
        ds.inputs(row, j) = meta.centers(c, j) + meta.spread * rng.normal();
      }
      ds.labels[static_cast<std::size_t>(row)] = static_cast<int>(c);
    }
  }
  return ds;
}

}  // namespace

Episode sample_sine_line_episode(const SineLineConfig& cfg, Rng& rng) {
  Episode ep;
  TaskMeta& m = ep.meta;
  m.noise_std = cfg.noise_std;
  if (rng.uniform() < cfg.sine_probability) {
    m.kind = CurveKind::sine;
    m.amplitude = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
    m.frequency = rng.uniform(cfg.frequency_min, cfg.frequency_max);
    m.phase = rng.uniform(cfg.phase_min, cfg.phase_max);
  } else {
    m.kind = CurveKind::line;
    m.slope = rng.uniform(cfg.slope_min, cfg.slope_max);
    m.intercept = rng.uniform(cfg.intercept_min, cfg.intercept_max);
  }
  ep.support = regression_points(m, cfg.k_shot, cfg.x_min, cfg.x_max, rng);
  ep.query = regression_points(m, cfg.k_query, cfg.x_min, cfg.x_max, rng);
  return ep;
}

Episode sample_sine_line_episode(Rng& rng) { return sample_sine_line_episode(SineLineConfig{}, rng); }

Episode sample_blob_episode(int n_way, int k_shot, int k_query, int dim, double spread, Rng& rng,
                            double center_radius) {
  if (n_way < 2) throw DomainError("sample_blob_episode: n_way must be >= 2");
  if (k_shot < 1 || k_query < 1 || dim < 1) {
    throw DomainError("sample_blob_episode: k_shot, k_query and dim must be >= 1");
  }
  if (spread < 0.0) throw DomainError("sample_blob_episode: spread must be >= 0");
  Episode ep;
  ep.n_way = n_way;
  TaskMeta& m = ep.meta;
  m.kind = CurveKind::blobs;
  m.spread = spread;
  m.centers.resize(n_way, dim);
  for (int c = 0; c < n_way; ++c) {
    // Uniform in the ball: isotropic direction, radius ~ R u^(1/dim).
    Vec dir = rng.normal_vec(dim);
    const double norm = dir.norm();
    const double radius = center_radius * std::pow(rng.uniform(), 1.0 / dim);
    m.centers.row(c) = (norm > 0.0 ? dir / norm : dir) * radius;
  }
  ep.support = blob_points(m, k_shot, rng);
  ep.query = blob_points(m, k_query, rng);
  return ep;
}

Episode sample_episode(const TaskDistribution& dist, Rng& rng) {
  if (dist.kind == TaskKind::sine_line) return sample_sine_line_episode(dist.sine_line, rng);
  const auto& b = dist.blobs;
  return sample_blob_episode(b.n_way, b.k_shot, b.k_query, b.dim, b.spread, rng, b.center_radius);
}

std::vector<Episode> sample_episodes(const TaskDistribution& dist, Index count, Rng& rng) {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) out.push_back(sample_episode(dist, rng));
  return out;
}

DataSet sample_from_task(const TaskMeta& meta, Index count, const TaskDistribution& dist,
                         Rng& rng) {
  if (meta.kind == CurveKind::blobs) {
    const Index n_way = meta.centers.rows();
    const int per_class = static_cast<int>((count + n_way - 1) / n_way);
    return blob_points(meta, per_class, rng);
  }
  return regression_points(meta, count, dist.sine_line.x_min, dist.sine_line.x_max, rng);
}

namespace {

nlohmann::json dataset_to_json(const DataSet& ds) {
  nlohmann::json j;
  nlohmann::json xs = nlohmann::json::array();
  for (Index i = 0; i < ds.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < ds.input_dim(); ++c) row.push_back(ds.inputs(i, c));
    xs.push_back(std::move(row));
  }
  j["x"] = std::move(xs);
  if (ds.is_classification()) {
    j["label"] = ds.labels;
  } else {
    j["y"] = std::vector<double>(ds.targets.data(), ds.targets.data() + ds.targets.size());
  }
  return j;
}

DataSet dataset_from_json(const nlohmann::json& j) {
  DataSet ds;
  const auto& xs = j.at("x");
  const Index n = static_cast<Index>(xs.size());
  const Index dim = n > 0 ? static_cast<Index>(xs.at(0).size()) : 0;
  ds.inputs.resize(n, dim);
  for (Index i = 0; i < n; ++i) {
    const auto& row = xs.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(row.size()) != dim) throw DimensionError("episode json: ragged inputs");
    for (Index c = 0; c < dim; ++c) ds.inputs(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  if (j.contains("label")) {
    ds.labels = j.at("label").get<std::vector<int>>();
    require_same_size(static_cast<Index>(ds.labels.size()), n, "episode json labels");
  } else {
    const auto ys = j.at("y").get<std::vector<double>>();
    require_same_size(static_cast<Index>(ys.size()), n, "episode json targets");
    ds.targets = Eigen::Map<const Vec>(ys.data(), n);
  }
  return ds;
}

}  // namespace

nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json meta;
  const TaskMeta& m = ep.meta;
  meta["kind"] = to_string(m.kind);
  switch (m.kind) {
    case CurveKind::sine:
      meta["amplitude"] = m.amplitude;
      meta["frequency"] = m.frequency;
      meta["phase"] = m.phase;
      break;
    case CurveKind::line:
      meta["slope"] = m.slope;
      meta["intercept"] = m.intercept;
      break;
    case CurveKind::blobs: {
      nlohmann::json centers = nlohmann::json::array();
      for (Index c = 0; c < m.centers.rows(); ++c) {
        std::vector<double> row(static_cast<std::size_t>(m.centers.cols()));
        for (Index k = 0; k < m.centers.cols(); ++k) row[static_cast<std::size_t>(k)] = m.centers(c, k);
        centers.push_back(row);
      }
      meta["centers"] = std::move(centers);
      meta["spread"] = m.spread;
      meta["n_way"] = ep.n_way;
      break;
    }
  }
  meta["noise_std"] = m.noise_std;
  return {{"task_meta", meta}, {"support", dataset_to_json(ep.support)},
          {"query", dataset_to_json(ep.query)}};
}

Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  const auto& meta = j.at("task_meta");
  TaskMeta& m = ep.meta;
  m.kind = curve_kind_from_string(meta.at("kind").get<std::string>());
  m.noise_std = meta.value("noise_std", 0.0);
  switch (m.kind) {
    case CurveKind::sine:
      m.amplitude = meta.at("amplitude").get<double>();
      m.frequency = meta.at("frequency").get<double>();
      m.phase = meta.at("phase").get<double>();
      break;
    case CurveKind::line:
      m.slope = meta.at("slope").get<double>();
      m.intercept = meta.at("intercept").get<double>();
      break;
    case CurveKind::blobs: {
      const auto rows = meta.at("centers").get<std::vector<std::vector<double>>>();
      const Index dim = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
      m.centers.resize(static_cast<Index>(rows.size()), dim);
      for (std::size_t c = 0; c < rows.size(); ++c) {
        for (Index k = 0; k < dim; ++k) m.centers(static_cast<Index>(c), k) = rows[c].at(static_cast<std::size_t>(k));
      }
      m.spread = meta.at("spread").get<double>();
      ep.n_way = meta.at("n_way").get<int>();
      break;
    }
  }
  ep.support = dataset_from_json(j.at("support"));
  ep.query = dataset_from_json(j.at("query"));
  return ep;
}

void write_episodes_jsonl(std::ostream& os, const std::vector<Episode>& episodes) {
  for (const auto& ep : episodes) os << episode_to_json(ep).dump() << '\n';
}

std::vector<Episode> read_episodes_jsonl(std::istream& is) {
  std::vector<Episode> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(episode_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace niwmeta
