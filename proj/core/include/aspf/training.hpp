#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aspf/data.hpp"
#include "aspf/image.hpp"
#include "aspf/model.hpp"

namespace aspf {

// Test hook for the RAdam branch selection. kAuto is the real optimizer.
enum class Rectification { kAuto, kForceOff, kForceOn };

struct ClassWeights {
  enum class Mode { kNone, kInverseFrequency, kExplicit };
  Mode mode = Mode::kNone;
  double fake = 1.0;
  double real = 1.0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 718;
  int epochs = 100;
  std::uint64_t seed = 0;
  // Overrides the model's dropconnect rate while training when set.
  std::optional<double> dropconnect_rate;
  ClassWeights class_weights;
  Rectification rectification = Rectification::kAuto;
};

// Throws kConfig on out-of-range values.
void validate(const TrainConfig& cfg);

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view json);

// ---------------------------------------------------------------------------
// RAdam

// rho_inf = 2 / (1 - beta2) - 1
double radam_rho_inf(double beta2);
// rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t)
double radam_rho(double beta2, std::uint64_t step);
// Variance rectification factor; only meaningful for rho_t > 4.
double radam_rectifier(double rho_t, double rho_inf);

template <class T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
  double rho_inf = 0.0;
  // True when the last step took the adaptive (rectified) branch.
  bool last_rectified = false;
};

// One RAdam update over `params` using their accumulated gradients (tensors
// without a gradient buffer are treated as zero-gradient). `names` labels
// parameters in error messages.
template <class T>
void radam_step(std::span<const Tensor<T>> params, OptimState<T>& state, const TrainConfig& cfg,
                std::span<const std::string> names = {});

// ---------------------------------------------------------------------------
// Loss and metrics

// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
// Class weights multiply each sample's term by the weight of its true class.
template <class T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target,
                   std::optional<std::array<double, 2>> class_weights = std::nullopt);

struct MetricsReport {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// 2pr / (p + r), or 0 when p + r == 0.
double f1_score(double precision, double recall);

// Labels are 1 = real (positive), 0 = fake.
MetricsReport compute_metrics(std::span<const int> predicted, std::span<const int> truth);

// Aligned plain-text confusion matrix (rows = true class, columns = predicted).
std::string confusion_matrix_text(const MetricsReport& report);
// 2x2 grayscale-to-red heatmap, one cell per count, shaded by row-normalized rate.
Image confusion_matrix_heatmap(const MetricsReport& report, std::size_t cell = 64);

// ---------------------------------------------------------------------------
// Loops

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double train_f1 = 0;
  double val_f1 = 0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_f1 = -1;
  // Weights at the epoch with the best validation F1 (earliest on ties).
  std::optional<Model> best;
};

// Called after every epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

TrainResult train(Model& model, const SampleSource& train_set, const SampleSource& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});
TrainResult train(Model& model, const Manifest& train_manifest, const Manifest& val_manifest, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// CSV: epoch,train_loss,val_loss,train_f1,val_f1
std::string history_csv(const std::vector<EpochRecord>& history);

struct Evaluation {
  MetricsReport report;
  std::vector<int> predictions;
  std::vector<float> real_scores;  // probability of "real" per sample
  double loss = 0;
};

// Light models label a sample real iff its sigmoid output >= threshold; heavy
// models take the softmax argmax (ties go to fake) and ignore the threshold.
Evaluation evaluate(const Model& model, const SampleSource& data, double threshold = 0.5,
                    std::size_t batch_size = 64);
Evaluation evaluate(const Model& model, const Manifest& manifest, double threshold = 0.5);

}  // namespace aspf
