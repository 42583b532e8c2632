#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lowrank/attacks.hpp"
#include "lowrank/model.hpp"
#include "lowrank/tensor.hpp"

namespace lowrank::analysis {

// ---- robust accuracy ------------------------------------------------------

struct RobustAccuracyReport {
  std::string model_id;
  attacks::AttackConfig attack;
  /// Written to the `attack` CSV column; defaults to the algorithm name.
  std::string attack_label;
  double rho = 0.0;
  std::size_t n_images = 0;
  double clean_accuracy = 0.0;
  /// 1 where the attacked prediction equals the clean prediction.
  std::vector<std::uint8_t> per_image_stable;
};

/// Attacks one batch. `seed` is the per-batch seed.
using AttackFn =
    std::function<attacks::AttackResult(const Tensor& x, const Labels& labels, std::uint64_t seed)>;

struct EvalOptions {
  std::string model_id = "model";
  std::size_t batch_size = 128;
};

/// Fraction of images whose predicted class survives the attack. Batch k is
/// attacked with seed cfg.seed + k.
RobustAccuracyReport robust_accuracy(const model::Model& model, const Dataset& data,
                                     const attacks::AttackConfig& cfg, const EvalOptions& opts = {},
                                     const attacks::AttackContext& ctx = {});

/// Same, with a caller-supplied attack. `cfg` only labels the report.
RobustAccuracyReport robust_accuracy(const model::Model& model, const Dataset& data,
                                     const attacks::AttackConfig& cfg, const AttackFn& attack,
                                     const EvalOptions& opts = {});

/// LoRa-PGD rescaled per image to the nuclear norm of a full-rank pgd attack
/// with the same steps, tau and seed.
AttackFn nuclear_matched_attack(const model::Model& model, const attacks::AttackConfig& cfg,
                                const attacks::AttackContext& ctx = {});

// ---- spectra --------------------------------------------------------------

/// How the per-index change is measured before the per-channel max
/// normalization.
enum class SpectrumRule : std::uint8_t {
  kMaxNorm,          // "maxnorm-v1": |sigma_j(attacked) - sigma_j(clean)|
  kRelativeMaxNorm,  // "relmax-v1": the same divided by sigma_j(clean)
};

const char* to_string(SpectrumRule rule) noexcept;
SpectrumRule spectrum_rule_from_string(const std::string& s);

struct SpectrumReport {
  /// Length min(N, M); entry j is the mean normalized change of sigma_j.
  std::vector<double> mean_relative_change;
  std::size_t n_images = 0;
  std::string rule_id = to_string(SpectrumRule::kMaxNorm);

  /// Mean over the first or last quarter of the indices (at least one).
  double first_quartile_mean() const;
  double last_quartile_mean() const;
};

/// For each image and channel, the change of sigma_j (see SpectrumRule)
/// divided by its maximum over j; all zeros when nothing changed. Averaged
/// over channels, then over images. Under kRelativeMaxNorm, singular values
/// below 1e-12 sigma_1 are floored at that level, and all-zero clean
/// channels contribute zeros.
SpectrumReport spectrum_change_report(const Tensor& clean, const Tensor& attacked,
                                      SpectrumRule rule = SpectrumRule::kMaxNorm);

/// Mean per-image nuclear norm (channel averaged) of a batch of perturbations.
double nuclear_profile(const Tensor& perturbations);

// ---- resources ------------------------------------------------------------

struct MemoryEstimate {
  std::size_t d = 0, c = 0, n = 0, m = 0;
  std::size_t r = 0;  // 0 when full
  std::uint64_t elements_full = 0;
  std::uint64_t elements_factored = 0;
  /// elements_factored / elements_full; 1 for full storage.
  double ratio = 1.0;

  std::uint64_t elements() const noexcept { return r == 0 ? elements_full : elements_factored; }
};

/// Element counts of a full (D*C*N*M) or rank-r factored (D*C*r*(N+M))
/// perturbation. Pass std::nullopt for full storage; r = 0 is rejected.
MemoryEstimate memory_estimate(std::size_t d, std::size_t c, std::size_t n, std::size_t m,
                               std::optional<std::size_t> r);

struct TimingRow {
  std::string algo;
  MemoryEstimate memory;
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  std::vector<double> samples_ms;
};

struct ResourceReport {
  std::vector<TimingRow> rows;

  const TimingRow* find(const std::string& algo) const;
};

struct TimingOptions {
  int repetitions = 5;
  int warmup = 1;
  /// Worker count for the measured section; 0 keeps the current setting.
  int threads = 0;
};

/// Median wall clock per batch for each config. Configs are run in
/// interleaved order within every repetition.
ResourceReport timing_bench(const model::Model& model, const Tensor& x, const Labels& labels,
                            std::span<const attacks::AttackConfig> configs,
                            const TimingOptions& opts = {});

// ---- CSV ------------------------------------------------------------------

/// Shortest round-trip decimal form.
std::string format_number(double v);

std::string robust_accuracy_csv(std::span<const RobustAccuracyReport> reports);
std::string spectrum_csv(const SpectrumReport& report);
/// With include_timing = false the median_ms column is left empty.
std::string resources_csv(const ResourceReport& report, bool include_timing = true);

}  // namespace lowrank::analysis
