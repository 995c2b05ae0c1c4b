#include "aspf/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numeric>
#include <set>

namespace aspf {

using nlohmann::json;

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, "train config: " + what); };
  if (!(cfg.learning_rate > 0)) fail("learning_rate must be positive");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1)) fail("beta1 must be in [0,1)");
  if (!(cfg.beta2 >= 0 && cfg.beta2 < 1)) fail("beta2 must be in [0,1)");
  if (!(cfg.eps > 0)) fail("eps must be positive");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.epochs < 0) fail("epochs must be >= 0");
  if (cfg.dropconnect_rate && !(*cfg.dropconnect_rate >= 0 && *cfg.dropconnect_rate < 1)) {
    fail("dropconnect_rate must be in [0,1)");
  }
  if (cfg.class_weights.mode == ClassWeights::Mode::kExplicit &&
      !(cfg.class_weights.fake > 0 && cfg.class_weights.real > 0)) {
    fail("class weights must be positive");
  }
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j{{"learning_rate", cfg.learning_rate},
         {"beta1", cfg.beta1},
         {"beta2", cfg.beta2},
         {"eps", cfg.eps},
         {"batch_size", cfg.batch_size},
         {"epochs", cfg.epochs},
         {"seed", cfg.seed}};
  j["dropconnect_rate"] = cfg.dropconnect_rate ? json(*cfg.dropconnect_rate) : json(nullptr);
  switch (cfg.class_weights.mode) {
    case ClassWeights::Mode::kNone: j["class_weights"] = "none"; break;
    case ClassWeights::Mode::kInverseFrequency: j["class_weights"] = "inverse_frequency"; break;
    case ClassWeights::Mode::kExplicit: j["class_weights"] = {cfg.class_weights.fake, cfg.class_weights.real}; break;
  }
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig, std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "train config must be an object");
  static const std::set<std::string> kKeys{"learning_rate", "beta1",           "beta2",        "eps", "batch_size",
                                           "epochs",        "dropconnect_rate", "class_weights", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw Error(ErrorCode::kConfig, "unknown key '" + key + "' in train");
  }
  TrainConfig cfg;
  try {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.eps = j.value("eps", cfg.eps);
    if (j.contains("batch_size") && !j["batch_size"].is_number_unsigned()) {
      throw Error(ErrorCode::kConfig, "batch_size must be a positive integer");
    }
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    if (j.contains("seed") && !j["seed"].is_number_unsigned()) {
      throw Error(ErrorCode::kConfig, "seed must be a non-negative integer");
    }
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("dropconnect_rate") && !j["dropconnect_rate"].is_null()) {
      cfg.dropconnect_rate = j["dropconnect_rate"].get<double>();
    }
    if (j.contains("class_weights")) {
      const auto& w = j["class_weights"];
      if (w.is_string() && w == "none") {
        cfg.class_weights.mode = ClassWeights::Mode::kNone;
      } else if (w.is_string() && w == "inverse_frequency") {
        cfg.class_weights.mode = ClassWeights::Mode::kInverseFrequency;
      } else if (w.is_array() && w.size() == 2) {
        cfg.class_weights = {ClassWeights::Mode::kExplicit, w[0].get<double>(), w[1].get<double>()};
      } else {
        throw Error(ErrorCode::kConfig, "class_weights must be \"none\", \"inverse_frequency\" or [fake, real]");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad value in train config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// RAdam

double radam_rho_inf(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

double radam_rho(double beta2, std::uint64_t step) {
  const double t = static_cast<double>(step);
  // 1 - beta2^t via expm1 keeps the digits that the subtraction would cancel.
  const double log_b2t = t * std::log1p(beta2 - 1.0);
  return radam_rho_inf(beta2) - 2.0 * t * std::exp(log_b2t) / -std::expm1(log_b2t);
}

double radam_rectifier(double rho_t, double rho_inf) {
  return std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
}

template <class T>
void radam_step(std::span<const Tensor<T>> params, OptimState<T>& state, const TrainConfig& cfg,
                std::span<const std::string> names) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T{0});
      state.v.emplace_back(p.size(), T{0});
    }
    state.rho_inf = radam_rho_inf(cfg.beta2);
  }
  auto label = [&](std::size_t k) { return k < names.size() ? names[k] : "param[" + std::to_string(k) + "]"; };
  if (state.m.size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "optimizer state tracks " + std::to_string(state.m.size()) +
                                               " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].size()) {
      throw Error(ErrorCode::kShapeMismatch, "optimizer state does not match " + label(k));
    }
    for (const T g : params[k].grad()) {
      if (!std::isfinite(g)) throw Error(ErrorCode::kNonFinite, "gradient of " + label(k));
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  const double rho_t = radam_rho(cfg.beta2, state.step);
  bool adaptive = rho_t > 4.0;
  if (cfg.rectification == Rectification::kForceOff) adaptive = false;
  if (cfg.rectification == Rectification::kForceOn) adaptive = true;
  const double rect = rho_t > 4.0 ? radam_rectifier(rho_t, state.rho_inf) : 1.0;
  state.last_rectified = adaptive;

  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> p = params[k];
    auto values = p.values();
    const auto grad = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad.empty() ? T{0} : grad[i];
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const T m_hat = m[i] / static_cast<T>(bias1);
      if (adaptive) {
        const T v_hat = std::sqrt(v[i] / static_cast<T>(bias2));
        values[i] -= lr * static_cast<T>(rect) * m_hat / (v_hat + eps);
      } else {
        values[i] -= lr * m_hat;
      }
    }
  }
}

template void radam_step<float>(std::span<const Tensor<float>>, OptimState<float>&, const TrainConfig&,
                                std::span<const std::string>);
template void radam_step<double>(std::span<const Tensor<double>>, OptimState<double>&, const TrainConfig&,
                                 std::span<const std::string>);

// ---------------------------------------------------------------------------
// Loss

template <class T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target,
                   std::optional<std::array<double, 2>> class_weights) {
  if (pred.shape() != target.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "bce_loss pred " + shape_string(pred.shape()) + " vs target " + shape_string(target.shape()));
  }
  constexpr T lo = static_cast<T>(1e-7);
  constexpr T hi = static_cast<T>(1.0 - 1e-7);
  const std::size_t n = pred.size();
  std::vector<T> weight(n, T{1});
  if (class_weights) {
    for (std::size_t i = 0; i < n; ++i) {
      weight[i] = static_cast<T>(target[i] >= T{0.5} ? (*class_weights)[1] : (*class_weights)[0]);
    }
  }
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pred[i], lo, hi);
    const T y = target[i];
    total += -weight[i] * (y * std::log(p) + (T{1} - y) * std::log(T{1} - p));
  }
  Tensor<T> out({1}, std::vector<T>{total / static_cast<T>(n)});
  check_finite(out, "bce_loss");
  if (tape.tracks(pred)) {
    out.set_requires_grad();
    tape.record("bce_loss", out, [=]() mutable {
      auto pin = pred;
      const T g = out.grad()[0] / static_cast<T>(n);
      auto dp = pin.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T p = pin[i];
        if (p < lo || p > hi) continue;
        const T y = target[i];
        dp[i] += g * -weight[i] * (y / p - (T{1} - y) / (T{1} - p));
      }
    });
  }
  return out;
}

template Tensor<float> bce_loss<float>(Tape<float>&, const Tensor<float>&, const Tensor<float>&,
                                       std::optional<std::array<double, 2>>);
template Tensor<double> bce_loss<double>(Tape<double>&, const Tensor<double>&, const Tensor<double>&,
                                         std::optional<std::array<double, 2>>);

// ---------------------------------------------------------------------------
// Metrics

double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0 ? 2.0 * precision * recall / denom : 0.0;
}

MetricsReport compute_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.empty()) throw Error(ErrorCode::kEmptyInput, "no predictions");
  if (predicted.size() != truth.size()) throw Error(ErrorCode::kShapeMismatch, "prediction/label count mismatch");
  MetricsReport r;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] != 0;
    const bool t = truth[i] != 0;
    if (p && t) {
      ++r.tp;
    } else if (p) {
      ++r.fp;
    } else if (t) {
      ++r.fn;
    } else {
      ++r.tn;
    }
  }
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
  };
  r.accuracy = ratio(r.tp + r.tn, predicted.size());
  r.precision = ratio(r.tp, r.tp + r.fp);
  r.recall = ratio(r.tp, r.tp + r.fn);
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

std::string confusion_matrix_text(const MetricsReport& r) {
  const std::size_t cells[] = {r.tn, r.fp, r.fn, r.tp};
  std::size_t width = 9;
  for (const auto c : cells) width = std::max(width, std::to_string(c).size());
  auto cell = [&](const std::string& s) { return std::string(width - s.size() + 2, ' ') + s; };
  std::string out = "           " + cell("pred fake") + cell("pred real") + "\n";
  out += "true fake  " + cell(std::to_string(r.tn)) + cell(std::to_string(r.fp)) + "\n";
  out += "true real  " + cell(std::to_string(r.fn)) + cell(std::to_string(r.tp)) + "\n";
  char line[160];
  std::snprintf(line, sizeof line, "accuracy %.6f  precision %.6f  recall %.6f  f1 %.6f\n", r.accuracy, r.precision,
                r.recall, r.f1);
  return out + line;
}

Image confusion_matrix_heatmap(const MetricsReport& r, std::size_t cell) {
  if (cell == 0) throw Error(ErrorCode::kInvalidArgument, "cell size must be positive");
  const double counts[2][2] = {{double(r.tn), double(r.fp)}, {double(r.fn), double(r.tp)}};
  Image img(2 * cell, 2 * cell, 3);
  for (std::size_t row = 0; row < 2; ++row) {
    const double total = counts[row][0] + counts[row][1];
    for (std::size_t col = 0; col < 2; ++col) {
      const double rate = total > 0 ? counts[row][col] / total : 0.0;
      const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - rate)));
      for (std::size_t y = row * cell; y < (row + 1) * cell; ++y) {
        for (std::size_t x = col * cell; x < (col + 1) * cell; ++x) {
          img.at(x, y, 0) = 255;
          img.at(x, y, 1) = fade;
          img.at(x, y, 2) = fade;
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Loops

namespace {

TensorF real_probability(Tape<float>& tape, const Model& model, const TensorF& output) {
  return model.spec().architecture == Architecture::kHeavy ? select_column(tape, output, 1) : output;
}

std::optional<std::array<double, 2>> resolve_weights(const ClassWeights& w, const SampleSource& data) {
  switch (w.mode) {
    case ClassWeights::Mode::kNone: return std::nullopt;
    case ClassWeights::Mode::kExplicit: return std::array<double, 2>{w.fake, w.real};
    case ClassWeights::Mode::kInverseFrequency: {
      std::size_t real = 0;
      for (std::size_t i = 0; i < data.size(); ++i) real += data.label(i) == Label::kReal ? 1 : 0;
      const double n = static_cast<double>(data.size());
      const double fake = n - static_cast<double>(real);
      // A class absent from the data gets weight 1; it never contributes anyway.
      return std::array<double, 2>{fake > 0 ? n / (2.0 * fake) : 1.0, real > 0 ? n / (2.0 * real) : 1.0};
    }
  }
  return std::nullopt;
}

}  // namespace

Evaluation evaluate(const Model& model, const SampleSource& data, double threshold, std::size_t batch_size) {
  if (data.size() == 0) throw Error(ErrorCode::kEmptyInput, "empty evaluation set");
  Evaluation ev;
  std::vector<int> truth;
  double loss_sum = 0;
  std::vector<std::size_t> idx;
  const bool heavy = model.spec().architecture == Architecture::kHeavy;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch batch = data.batch(idx);
    auto tape = Tape<float>::no_grad();
    const TensorF probs = model.forward(tape, batch.images, Mode::kInfer).output;
    const TensorF real = real_probability(tape, model, probs);
    loss_sum += static_cast<double>(bce_loss(tape, real, batch.labels).item()) * static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const bool is_real = heavy ? probs[b * 2 + 1] > probs[b * 2] : real[b] >= threshold;
      ev.predictions.push_back(is_real ? 1 : 0);
      ev.real_scores.push_back(real[b]);
      truth.push_back(batch.labels[b] >= 0.5f ? 1 : 0);
    }
  }
  ev.report = compute_metrics(ev.predictions, truth);
  ev.loss = loss_sum / static_cast<double>(data.size());
  return ev;
}

Evaluation evaluate(const Model& model, const Manifest& manifest, double threshold) {
  if (manifest.empty()) throw Error(ErrorCode::kEmptyInput, "empty manifest");
  const ManifestSource source(manifest, static_cast<std::size_t>(model.spec().height),
                              static_cast<std::size_t>(model.spec().width));
  return evaluate(model, source, threshold);
}

TrainResult train(Model& model, const SampleSource& train_set, const SampleSource& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  validate(cfg);
  if (train_set.size() == 0) throw Error(ErrorCode::kEmptyInput, "empty training set");
  if (val_set.size() == 0) throw Error(ErrorCode::kEmptyInput, "empty validation set");
  TrainResult result;
  if (cfg.epochs == 0) return result;

  Rng rng(cfg.seed);
  OptimState<float> state;
  std::vector<TensorF> params;
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    params.push_back(p.tensor);
    names.push_back(p.name);
  }
  const auto weights = resolve_weights(cfg.class_weights, train_set);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Batch batch = train_set.batch(idx);
      Tape<float> tape;
      try {
        const auto fwd = model.forward(tape, batch.images, Mode::kTrain, &rng, cfg.dropconnect_rate);
        const TensorF loss = bce_loss(tape, real_probability(tape, model, fwd.output), batch.labels, weights);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        tape.backward(loss);
        radam_step<float>(params, state, cfg, names);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNonFinite) throw;
        throw Error(ErrorCode::kNonFinite, "epoch " + std::to_string(epoch) + " batch " +
                                               std::to_string(batch_index) + ": " + e.what());
      }
      model.zero_grad();
    }
    const auto train_eval = evaluate(model, train_set);
    const auto val_eval = evaluate(model, val_set);
    const EpochRecord record{epoch, loss_sum / static_cast<double>(order.size()), val_eval.loss,
                             train_eval.report.f1, val_eval.report.f1};
    result.history.push_back(record);
    if (record.val_f1 > result.best_val_f1) {
      result.best_val_f1 = record.val_f1;
      result.best_epoch = epoch;
      result.best = model.clone();
    }
    if (on_epoch && !on_epoch(record)) break;
  }
  return result;
}

TrainResult train(Model& model, const Manifest& train_manifest, const Manifest& val_manifest, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  if (train_manifest.empty()) throw Error(ErrorCode::kEmptyInput, "empty training manifest");
  if (val_manifest.empty()) throw Error(ErrorCode::kEmptyInput, "empty validation manifest");
  const auto h = static_cast<std::size_t>(model.spec().height);
  const auto w = static_cast<std::size_t>(model.spec().width);
  const ManifestSource train_source(train_manifest, h, w);
  const ManifestSource val_source(val_manifest, h, w);
  return train(model, train_source, val_source, cfg, on_epoch);
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,train_f1,val_f1\n";
  char line[200];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss, r.train_f1,
                  r.val_f1);
    out += line;
  }
  return out;
}

}  // namespace aspf
