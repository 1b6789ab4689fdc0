#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "deepcaps/checkpoint.hpp"
#include "deepcaps/config.hpp"

namespace deepcaps {

class Adam {
 public:
  Adam(ParamRegistry<float>& registry, const OptimizerConfig& config);

  // One update with the learning rate for `epoch` (0-based): lr * decay^epoch.
  void step(std::size_t epoch);
  std::uint64_t steps() const { return t_; }

 private:
  ParamRegistry<float>& registry_;
  OptimizerConfig config_;
  std::vector<Tensor<float>> m_, v_;
  std::uint64_t t_ = 0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,train_loss,train_margin,train_recon,train_acc,test_acc,wall_time_s";

struct MetricsRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double train_loss = 0, train_margin = 0, train_recon = 0, train_acc = 0, test_acc = 0;
  double wall_time_s = 0;

  std::string csv() const;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  double initial_loss = 0;  // loss of the first batch, before any update
  double best_test_acc = 0;
  std::filesystem::path metrics_path, last_checkpoint, best_checkpoint;
};

// Writes out_dir/metrics.csv, out_dir/last.ckpt and out_dir/best.ckpt
// (highest test accuracy). Throws NonFiniteLossError naming the step if the
// loss stops being finite. `log` receives progress lines when non-null.
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& test_set, std::ostream* log);

struct EvalResult {
  std::size_t correct = 0, total = 0;
  double accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

// Class norms [N, C] for every sample, computed in inference mode.
Tensor<float> class_scores(Model<float>& model, const Dataset& data, std::size_t batch_size);

EvalResult score(const Tensor<float>& scores, const std::vector<int>& labels, std::size_t classes);
EvalResult evaluate(Model<float>& model, const Dataset& data, std::size_t batch_size);

// Elementwise mean of per-member [N, C] scores, accumulated in double.
Tensor<float> mean_scores(const std::vector<Tensor<float>>& member_scores);

// Mean of per-model class norms, then argmax. ArchitectureMismatchError if
// the members disagree on architecture.
EvalResult ensemble_predict(const std::vector<Checkpoint>& members, const Dataset& data, std::size_t batch_size);

// Winning (largest-norm) class capsule per sample, [N, d], plus class ids.
Tensor<float> winning_vectors(Model<float>& model, const Dataset& data, std::size_t batch_size,
                              std::vector<int>* classes = nullptr);

// Tiles [rows][cols] images of identical [H, W, C] into a binary PGM (C = 1)
// or PPM (C = 3), maxval 255.
void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<Tensor<float>>>& tiles);

struct PerturbRequest {
  std::vector<std::size_t> samples;  // dataset indices, one grid row each
  std::size_t dim = 27;              // 0-based
  double lo = -0.075, hi = 0.075;
  std::size_t steps = 11;
  PerturbMode mode = PerturbMode::Offset;
};

// Rows = samples, columns = sweep steps. Returns the tiles written.
std::vector<std::vector<Tensor<float>>> perturb_grid(Model<float>& model, const Dataset& data,
                                                     const PerturbRequest& request);

// First index of each class in `data`, in class order (classes never seen are skipped).
std::vector<std::size_t> one_per_class(const Dataset& data);

// dim (1-based), variance, rank (1-based) rows.
void write_variance_csv(const std::filesystem::path& path, const std::vector<std::pair<std::size_t, double>>& ranked);

struct BenchRow {
  std::size_t batch = 0;
  std::size_t parameters = 0;
  double mean_ms_per_image = 0, median_ms_per_image = 0;
  std::size_t iterations = 0;
};

std::vector<BenchRow> benchmark_inference(Model<float>& model, const std::vector<std::size_t>& batch_sizes,
                                          std::size_t iterations, std::size_t warmup, std::uint64_t seed);

}  // namespace deepcaps
