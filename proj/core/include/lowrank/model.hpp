#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lowrank/attack_config.hpp"
#include "lowrank/tensor.hpp"

namespace lowrank::model {

enum class LayerKind : std::uint8_t { kDense = 0, kConv2d = 1, kRelu = 2, kFlatten = 3, kMaxPool2d = 4 };

/// One layer of a sequential classifier. Dense uses (in, out); conv2d uses
/// (in, out, kernel, stride, pad) with in/out as channel counts; maxpool2d
/// uses kernel as both window and stride.
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::kDense, in, out, 0, 1, 0}; }
  static LayerSpec conv2d(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride = 1,
                          std::size_t pad = 0) {
    return {LayerKind::kConv2d, c_in, c_out, k, stride, pad};
  }
  static LayerSpec relu() { return {LayerKind::kRelu}; }
  static LayerSpec flatten() { return {LayerKind::kFlatten}; }
  static LayerSpec maxpool2d(std::size_t k) { return {LayerKind::kMaxPool2d, 0, 0, k, k, 0}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Activation shape: {C, H, W} for feature maps, {L} after flatten.
using Shape = std::vector<std::size_t>;

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::array<std::size_t, 3> input_dims{};  // C, N, M
  std::size_t num_classes = 0;

  /// Output shape of every layer (index 0 is the input). Throws
  /// ContractViolation when consecutive shapes do not compose or the final
  /// output is not num_classes >= 2.
  std::vector<Shape> shapes() const;
  void validate() const { (void)shapes(); }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class Architecture { kLinear, kMlp, kCnn };

const char* to_string(Architecture a) noexcept;
Architecture architecture_from_string(const std::string& s);

/// The three reference classifiers: linear softmax; MLP 2x128 relu;
/// conv(8,3x3)-relu-pool2-conv(16,3x3)-relu-pool2-dense.
ModelSpec reference_spec(Architecture arch, std::size_t c, std::size_t n, std::size_t m,
                         std::size_t num_classes);

/// Per-layer weights and biases. Parameter-free layers hold empty vectors.
/// Dense weights are out x in row-major; conv weights out x in x k x k.
struct ModelParams {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
  std::uint64_t seed = 0;

  std::size_t parameter_count() const noexcept;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed);
ModelParams zero_params(const ModelSpec& spec);

struct Model {
  ModelSpec spec;
  ModelParams params;
};

/// Logits as a B x D tensor.
Tensor forward(const Model& model, const Tensor& x);

/// Mean softmax cross-entropy over the batch.
double cross_entropy(const Tensor& logits, const Labels& labels);

/// argmax per row, ties toward the lowest class index.
Labels predict_class(const Model& model, const Tensor& x);
Labels argmax_rows(const Tensor& logits);

struct Gradients {
  double loss = 0.0;
  Tensor logits;        // B x D
  Tensor input;         // d loss / d x, empty unless requested
  ModelParams params;   // d loss / d theta, empty unless requested
};

/// Loss and gradients of mean cross_entropy(forward(x), labels).
Gradients backprop(const Model& model, const Tensor& x, const Labels& labels, bool want_input,
                   bool want_params);

Tensor grad_input(const Model& model, const Tensor& x, const Labels& labels);
ModelParams grad_params(const Model& model, const Tensor& x, const Labels& labels);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  /// When set, every minibatch is replaced by its attacked version.
  std::optional<attacks::AttackConfig> adversarial;

  void validate() const;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch SGD on mean cross-entropy from init_params(spec, cfg.seed).
/// Throws TrainingDiverged on a non-finite loss.
ModelParams train_sgd(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Same loop as train_sgd, but each batch is attacked with cfg.adversarial
/// against the current parameters before the update.
ModelParams adversarial_train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch = {});

}  // namespace lowrank::model
