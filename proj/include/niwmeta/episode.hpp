#pragma once

#include <string>
#include <vector>

#include "niwmeta/numerics.hpp"

namespace niwmeta {

enum class TaskType { regression, classification };

/// Labeled points, one input per row. Regression uses `targets`,
/// classification uses `labels`; the other member stays empty.
struct DataSet {
  RowMat inputs;
  Vec targets;
  std::vector<int> labels;

  Index size() const { return inputs.rows(); }
  Index input_dim() const { return inputs.cols(); }
  bool is_classification() const { return !labels.empty(); }
};

enum class CurveKind { sine, line, blobs };

/// Everything needed to regenerate the ground truth of one task.
struct TaskMeta {
  CurveKind kind = CurveKind::sine;
  double amplitude = 0.0;
  double frequency = 0.0;
  double phase = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  double noise_std = 0.0;
  RowMat centers;  // blobs: one class center per row
  double spread = 0.0;

  /// Noise-free regression target at scalar input x.
  double curve_value(double x) const;
};

struct Episode {
  DataSet support;
  DataSet query;
  TaskMeta meta;
  int n_way = 0;  // classification only

  TaskType type() const {
    return support.is_classification() ? TaskType::classification : TaskType::regression;
  }
};

const char* to_string(CurveKind kind);
CurveKind curve_kind_from_string(const std::string& s);

}  // namespace niwmeta
