#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "niwmeta/eval.hpp"
#include "niwmeta/trainer.hpp"

namespace niwmeta {

/// Invalid or incomplete experiment configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model artifact that cannot be used with the given config (exit code 4).
class IncompatibleModel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BoundSettings {
  bool enabled = false;
  BoundCheckConfig check;
};

struct BenchSettings {
  Index episodes = 200;
  Index warmup = 20;
  std::vector<int> sgld_steps{2, 5};
  std::vector<int> fomaml_steps{1, 2, 5};
};

struct ExperimentConfig {
  TrainConfig train;
  TaskDistribution tasks;
  EvalSettings eval;
  bool eval_after_train = true;
  BoundSettings bound;
  BenchSettings bench;
  std::string out_dir;
};

/// Strict parse: unknown keys and wrong types are rejected, and the error
/// names the offending field. `method`, `seed`, `task.kind`,
/// `train.episodes` and `train.outer_lr` are required.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

/// Fully expanded config, defaults included. Parsing it again yields the
/// same config.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// FNV-1a 64 of the canonical training sections (method, seed, task, train,
/// sgld, head, backbone). Evaluation and bench settings are excluded.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

/// Contents of model.json: the trained model plus what the bound check needs.
struct ModelArtifact {
  TrainedModel model;
  std::uint64_t config_hash = 0;
  double epsilon_star = 0.0;
  Index query_size = 0;
};

nlohmann::json model_to_json(const ModelArtifact& artifact);
/// Throws IncompatibleModel on a format or library version mismatch or a
/// malformed document.
ModelArtifact model_from_json(const nlohmann::json& j);

nlohmann::json eval_report_to_json(const EvalReport& rep);
nlohmann::json bound_report_to_json(const BoundReport& rep);

struct BenchRow {
  std::string method;
  int steps = 0;  // SGLD iterations M_L or inner steps; 0 for protonet
  double median_seconds = 0.0;
  double ratio_to_protonet = 0.0;
};

/// Median per-episode wall clock on identical episodes.
std::vector<BenchRow> run_bench(const ExperimentConfig& cfg);
std::string bench_to_csv(const std::vector<BenchRow>& rows);

/// Write-to-temp then rename, so readers never see a partial file.
void write_atomic(const std::string& path, const std::string& content);

/// Entry point of the `niwmeta` binary; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace niwmeta
