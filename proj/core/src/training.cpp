#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "lowrank/attacks.hpp"
#include "lowrank/error.hpp"
#include "lowrank/model.hpp"

namespace lowrank::model {

void TrainConfig::validate() const {
  LOWRANK_REQUIRE(epochs >= 1, "epochs must be >= 1");
  LOWRANK_REQUIRE(batch_size >= 1, "batch size must be >= 1");
  LOWRANK_REQUIRE(std::isfinite(learning_rate) && learning_rate >= 0.0,
                  "learning rate must be finite and non-negative");
  if (adversarial) adversarial->validate();
}

namespace {

Tensor gather(const Tensor& images, std::span<const std::size_t> idx) {
  const auto d = images.dims4();
  Tensor out(Dims4{idx.size(), d.c, d.n, d.m});
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::ranges::copy(images.image(idx[k]), out.image(k).begin());
  return out;
}

ModelParams run_training(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch) {
  spec.validate();
  cfg.validate();
  LOWRANK_REQUIRE(data.size() >= 1, "training set is empty");
  LOWRANK_REQUIRE(data.images.dims4().b == data.size(), "image and label counts differ");

  Model m{spec, init_params(spec, cfg.seed)};
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::uint64_t batch_counter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      Tensor x = gather(data.images, idx);
      Labels y(count);
      for (std::size_t k = 0; k < count; ++k) y[k] = data.labels[idx[k]];

      if (cfg.adversarial) {
        attacks::AttackConfig ac = *cfg.adversarial;
        ac.seed = cfg.adversarial->seed + batch_counter;
        x = attacks::run_attack(m, x, y, ac).adversarial;
      }
      ++batch_counter;

      const Gradients g = backprop(m, x, y, false, true);
      if (!std::isfinite(g.loss)) {
        throw TrainingDiverged(epoch, "training diverged: non-finite loss in epoch " +
                                          std::to_string(epoch));
      }
      loss_sum += g.loss * static_cast<double>(count);
      const Labels pred = argmax_rows(g.logits);
      for (std::size_t k = 0; k < count; ++k) correct += pred[k] == y[k] ? 1 : 0;

      for (std::size_t li = 0; li < m.params.weights.size(); ++li) {
        auto& w = m.params.weights[li];
        auto& b = m.params.biases[li];
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.learning_rate * g.params.weights[li][k];
        for (std::size_t k = 0; k < b.size(); ++k) b[k] -= cfg.learning_rate * g.params.biases[li][k];
      }
    }
    const double n = static_cast<double>(data.size());
    if (on_epoch) on_epoch({epoch, loss_sum / n, static_cast<double>(correct) / n});
  }
  return m.params;
}

}  // namespace

ModelParams train_sgd(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  TrainConfig plain = cfg;
  plain.adversarial.reset();
  return run_training(spec, data, plain, on_epoch);
}

ModelParams adversarial_train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch) {
  LOWRANK_REQUIRE(cfg.adversarial.has_value(), "adversarial training needs an attack config");
  return run_training(spec, data, cfg, on_epoch);
}

}  // namespace lowrank::model
