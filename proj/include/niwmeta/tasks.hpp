#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "niwmeta/episode.hpp"
#include "niwmeta/numerics.hpp"

namespace niwmeta {

/// Sine-Line generator settings. Defaults follow the usual sinusoid/line
/// protocol; none of the ranges are special.
struct SineLineConfig {
  double amplitude_min = 0.1, amplitude_max = 5.0;
  double phase_min = 0.0, phase_max = 3.14159265358979323846;
  double frequency_min = 0.8, frequency_max = 1.2;
  double slope_min = -3.0, slope_max = 3.0;
  double intercept_min = -3.0, intercept_max = 3.0;
  double x_min = -5.0, x_max = 5.0;
  double sine_probability = 0.5;
  int k_shot = 5;
  int k_query = 45;
  double noise_std = 0.0;
};

struct BlobConfig {
  int n_way = 5;
  int k_shot = 5;
  int k_query = 15;
  int dim = 2;
  double spread = 1.0;
  double center_radius = 3.0;  // centers uniform in a ball of this radius
};

enum class TaskKind { sine_line, blobs };

struct TaskDistribution {
  TaskKind kind = TaskKind::sine_line;
  SineLineConfig sine_line;
  BlobConfig blobs;

  int input_dim() const { return kind == TaskKind::sine_line ? 1 : blobs.dim; }
  TaskType task_type() const {
    return kind == TaskKind::sine_line ? TaskType::regression : TaskType::classification;
  }
  void validate() const;
};

Episode sample_sine_line_episode(const SineLineConfig& cfg, Rng& rng);
Episode sample_sine_line_episode(Rng& rng);
Episode sample_blob_episode(int n_way, int k_shot, int k_query, int dim, double spread,
                            Rng& rng, double center_radius = 3.0);
Episode sample_episode(const TaskDistribution& dist, Rng& rng);

/// `count` episodes drawn sequentially from `rng`.
std::vector<Episode> sample_episodes(const TaskDistribution& dist, Index count, Rng& rng);

/// Fresh points from the same task as `ep` (same curve or blob centers).
DataSet sample_from_task(const TaskMeta& meta, Index count, const TaskDistribution& dist,
                         Rng& rng);

// One JSON object per line: {"task_meta": ..., "support": ..., "query": ...}.
nlohmann::json episode_to_json(const Episode& ep);
Episode episode_from_json(const nlohmann::json& j);
void write_episodes_jsonl(std::ostream& os, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_jsonl(std::istream& is);

}  // namespace niwmeta
