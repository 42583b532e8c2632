#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "lowrank/attack_config.hpp"
#include "lowrank/model.hpp"
#include "lowrank/tensor.hpp"

namespace lowrank::attacks {

/// Low-rank perturbation kept as its channel-wise factors.
///
/// u is B x C x N x r and v is B x C x r x M. Under the Frobenius budget the
/// perturbation is tau * normalize(u (x)_C v), so the factor scale is free.
/// Under the nuclear budget the factors are stored already scaled and the
/// perturbation is u (x)_C v itself; its per-image nuclear norm is the budget.
struct FactoredPerturbation {
  Tensor u;
  Tensor v;
  std::size_t rank = 0;
  double tau = 0.0;
  NormKind norm_kind = NormKind::kFrobenius;

  Tensor materialize() const;
};

using Perturbation = std::variant<Tensor, FactoredPerturbation>;

struct AttackResult {
  Perturbation perturbation;
  /// clamp_box(x + delta, 0, 1).
  Tensor adversarial;
  /// Set for images whose attack vanished (zero gradient or zero product).
  DegenerateFlags degenerate;
  int steps_executed = 0;

  /// The dense B x C x N x M perturbation before clamping.
  Tensor delta() const;
  bool is_factored() const noexcept {
    return std::holds_alternative<FactoredPerturbation>(perturbation);
  }
};

/// Optional inputs some configurations need.
struct AttackContext {
  /// Model the transfer initialization runs FGSM on.
  const model::Model* transfer_source = nullptr;
  /// Per-image nuclear budgets for LoRa-PGD under NormKind::kNuclear.
  /// Empty means every image uses cfg.tau.
  std::vector<double> nuclear_targets;
};

/// max(1, round(p * min(n, m))), rounding half away from zero.
std::size_t rank_from_fraction(double p, std::size_t n, std::size_t m);

/// Single ascent step from the clean image. Frobenius: tau * normalize(grad);
/// linf: tau * sign(grad); nuclear: normalized gradient rescaled to nuclear
/// norm tau.
AttackResult fgsm(const model::Model& model, const Tensor& x, const Labels& labels, double tau,
                  NormKind norm_kind);

/// Full-rank projected gradient ascent. Each step adds tau * grad / ||grad||
/// to the feasible part of the current perturbation and projects back onto
/// the budget sphere (Frobenius, nuclear) or ball (linf, step 2.5 tau/steps).
AttackResult pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                 const AttackConfig& cfg, const AttackContext& ctx = {});

/// Gradient ascent directly on the factors (u, v) of the perturbation.
AttackResult lora_pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                      const AttackConfig& cfg, const AttackContext& ctx = {});

/// pgd followed by a per-channel SVD truncation to rank r, rescaled to the
/// budget.
AttackResult rank_projected_pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                                const AttackConfig& cfg, const AttackContext& ctx = {});

/// Dispatches on cfg.algorithm.
AttackResult run_attack(const model::Model& model, const Tensor& x, const Labels& labels,
                        const AttackConfig& cfg, const AttackContext& ctx = {});

/// LoRa-PGD whose final perturbation is rescaled so each image's nuclear
/// norm equals that of `reference` (typically a full-rank pgd attack).
AttackResult lora_pgd_nuclear_matched(const model::Model& model, const Tensor& x,
                                      const Labels& labels, const AttackConfig& cfg,
                                      const Tensor& reference, const AttackContext& ctx = {});

/// Gaussian u normalized per image, zero v.
std::pair<Tensor, Tensor> init_random(const Dims4& dims, std::size_t r, std::uint64_t seed);
/// factor_split at rank r of FGSM computed on `standard_model`.
std::pair<Tensor, Tensor> init_transfer(const model::Model& standard_model, const Tensor& x,
                                        const Labels& labels, double tau, std::size_t r);
/// factor_split at rank r of FGSM computed on the attacked model.
std::pair<Tensor, Tensor> init_warmup(const model::Model& target_model, const Tensor& x,
                                      const Labels& labels, double tau, std::size_t r);

/// Loss of the LoRa-PGD objective, mean cross-entropy at
/// clamp(x + tau * normalize(u (x)_C v), 0, 1).
double lora_objective(const model::Model& model, const Tensor& x, const Labels& labels,
                      const Tensor& u, const Tensor& v, double tau);

struct FactorGradients {
  double loss = 0.0;
  Tensor du;
  Tensor dv;
};

/// Gradients of lora_objective with respect to u and v.
FactorGradients lora_gradients(const model::Model& model, const Tensor& x, const Labels& labels,
                               const Tensor& u, const Tensor& v, double tau,
                               GradThrough through = GradThrough::kExact);

}  // namespace lowrank::attacks
