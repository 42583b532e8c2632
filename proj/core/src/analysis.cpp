#include "lowrank/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>

#include "lowrank/error.hpp"
#include "lowrank/linalg.hpp"
#include "lowrank/parallel.hpp"

namespace lowrank::analysis {

namespace {

Labels slice_labels(const Labels& labels, std::size_t first, std::size_t count) {
  return Labels(labels.begin() + static_cast<std::ptrdiff_t>(first),
                labels.begin() + static_cast<std::ptrdiff_t>(first + count));
}

}  // namespace

RobustAccuracyReport robust_accuracy(const model::Model& model, const Dataset& data,
                                     const attacks::AttackConfig& cfg, const AttackFn& attack,
                                     const EvalOptions& opts) {
  LOWRANK_REQUIRE(data.size() >= 1, "robust accuracy needs a nonempty dataset");
  LOWRANK_REQUIRE(opts.batch_size >= 1, "batch size must be >= 1");

  RobustAccuracyReport rep;
  rep.model_id = opts.model_id;
  rep.attack = cfg;
  rep.attack_label = attacks::to_string(cfg.algorithm);
  rep.n_images = data.size();
  rep.per_image_stable.resize(data.size());

  std::size_t stable = 0, correct = 0;
  std::uint64_t batch = 0;
  for (std::size_t first = 0; first < data.size(); first += opts.batch_size, ++batch) {
    const std::size_t count = std::min(opts.batch_size, data.size() - first);
    const Tensor x = data.images.slice_images(first, count);
    const Labels y = slice_labels(data.labels, first, count);
    const Labels clean = model::predict_class(model, x);
    const Labels adv = model::predict_class(model, attack(x, y, cfg.seed + batch).adversarial);
    for (std::size_t k = 0; k < count; ++k) {
      const bool same = clean[k] == adv[k];
      rep.per_image_stable[first + k] = same ? 1 : 0;
      stable += same ? 1 : 0;
      correct += clean[k] == y[k] ? 1 : 0;
    }
  }
  const double n = static_cast<double>(data.size());
  rep.rho = static_cast<double>(stable) / n;
  rep.clean_accuracy = static_cast<double>(correct) / n;
  return rep;
}

RobustAccuracyReport robust_accuracy(const model::Model& model, const Dataset& data,
                                     const attacks::AttackConfig& cfg, const EvalOptions& opts,
                                     const attacks::AttackContext& ctx) {
  cfg.validate();
  const AttackFn fn = [&](const Tensor& x, const Labels& y, std::uint64_t seed) {
    attacks::AttackConfig c = cfg;
    c.seed = seed;
    return attacks::run_attack(model, x, y, c, ctx);
  };
  return robust_accuracy(model, data, cfg, fn, opts);
}

AttackFn nuclear_matched_attack(const model::Model& model, const attacks::AttackConfig& cfg,
                                const attacks::AttackContext& ctx) {
  cfg.validate();
  return [&model, cfg, ctx](const Tensor& x, const Labels& y, std::uint64_t seed) {
    attacks::AttackConfig ref = cfg;
    ref.algorithm = attacks::Algorithm::kPgd;
    ref.norm_kind = NormKind::kFrobenius;
    ref.seed = seed;
    const Tensor reference = attacks::pgd(model, x, y, ref, ctx).delta();
    attacks::AttackConfig c = cfg;
    c.seed = seed;
    return attacks::lora_pgd_nuclear_matched(model, x, y, c, reference, ctx);
  };
}

// ---- spectra ----

namespace {

double range_mean(const std::vector<double>& v, std::size_t first, std::size_t count) {
  double s = 0.0;
  for (std::size_t j = first; j < first + count; ++j) s += v[j];
  return s / static_cast<double>(count);
}

}  // namespace

const char* to_string(SpectrumRule rule) noexcept {
  return rule == SpectrumRule::kMaxNorm ? "maxnorm-v1" : "relmax-v1";
}

SpectrumRule spectrum_rule_from_string(const std::string& s) {
  if (s == "maxnorm-v1") return SpectrumRule::kMaxNorm;
  if (s == "relmax-v1") return SpectrumRule::kRelativeMaxNorm;
  throw ContractViolation("unknown spectrum rule '" + s + "' (expected maxnorm-v1 or relmax-v1)");
}

double SpectrumReport::first_quartile_mean() const {
  LOWRANK_REQUIRE(!mean_relative_change.empty(), "empty spectrum report");
  const std::size_t q = std::max<std::size_t>(1, mean_relative_change.size() / 4);
  return range_mean(mean_relative_change, 0, q);
}

double SpectrumReport::last_quartile_mean() const {
  LOWRANK_REQUIRE(!mean_relative_change.empty(), "empty spectrum report");
  const std::size_t q = std::max<std::size_t>(1, mean_relative_change.size() / 4);
  return range_mean(mean_relative_change, mean_relative_change.size() - q, q);
}

SpectrumReport spectrum_change_report(const Tensor& clean, const Tensor& attacked,
                                      SpectrumRule rule) {
  require_same_shape(clean, attacked, "spectrum_change_report");
  const auto d = clean.dims4();
  const std::size_t k = std::min(d.n, d.m);

  std::vector<std::vector<double>> per_image(d.b, std::vector<double>(k, 0.0));
  parallel_for(d.b, [&](std::size_t b) {
    auto& acc = per_image[b];
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto s0 = linalg::svd(linalg::channel(clean, b, c)).sigma;
      const auto s1 = linalg::svd(linalg::channel(attacked, b, c)).sigma;
      std::vector<double> diff(k);
      for (std::size_t j = 0; j < k; ++j) diff[j] = std::abs(s1[j] - s0[j]);
      if (rule == SpectrumRule::kRelativeMaxNorm) {
        if (s0[0] <= kDegenerateNorm) continue;
        const double floor = 1e-12 * s0[0];
        for (std::size_t j = 0; j < k; ++j) diff[j] /= std::max(s0[j], floor);
      }
      const double top = *std::ranges::max_element(diff);
      if (top <= 0.0) continue;
      for (std::size_t j = 0; j < k; ++j) acc[j] += diff[j] / top;
    }
    for (double& v : acc) v /= static_cast<double>(d.c);
  });

  SpectrumReport rep;
  rep.n_images = d.b;
  rep.rule_id = to_string(rule);
  rep.mean_relative_change.assign(k, 0.0);
  for (const auto& acc : per_image)
    for (std::size_t j = 0; j < k; ++j) rep.mean_relative_change[j] += acc[j];
  for (double& v : rep.mean_relative_change) v /= static_cast<double>(d.b);
  return rep;
}

double nuclear_profile(const Tensor& perturbations) {
  const auto norms = image_norm(perturbations, NormKind::kNuclear);
  return std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(norms.size());
}

// ---- resources ----

MemoryEstimate memory_estimate(std::size_t d, std::size_t c, std::size_t n, std::size_t m,
                               std::optional<std::size_t> r) {
  LOWRANK_REQUIRE(d >= 1 && c >= 1 && n >= 1 && m >= 1, "memory estimate needs positive dims");
  LOWRANK_REQUIRE(!r || *r >= 1, "rank 0 is not a valid factorization; use full storage");
  MemoryEstimate e{d, c, n, m, r.value_or(0)};
  const std::uint64_t dc = static_cast<std::uint64_t>(d) * c;
  e.elements_full = dc * n * m;
  if (r) {
    e.elements_factored = dc * *r * (n + m);
    e.ratio = static_cast<double>(*r * (n + m)) / static_cast<double>(n * m);
  } else {
    e.elements_factored = e.elements_full;
    e.ratio = 1.0;
  }
  return e;
}

const TimingRow* ResourceReport::find(const std::string& algo) const {
  for (const auto& row : rows)
    if (row.algo == algo) return &row;
  return nullptr;
}

namespace {

// Restores the worker count when the measured section ends.
class ThreadScope {
 public:
  explicit ThreadScope(int n) : saved_(thread_count()) {
    if (n > 0) set_thread_count(n);
  }
  ~ThreadScope() { set_thread_count(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  int saved_;
};

double median(std::vector<double> v) {
  std::ranges::sort(v);
  const std::size_t h = v.size() / 2;
  return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

ResourceReport timing_bench(const model::Model& model, const Tensor& x, const Labels& labels,
                            std::span<const attacks::AttackConfig> configs,
                            const TimingOptions& opts) {
  LOWRANK_REQUIRE(opts.warmup >= 1, "timing needs at least one warm-up run");
  LOWRANK_REQUIRE(opts.repetitions >= 1, "timing needs at least one repetition");
  for (const auto& c : configs) c.validate();

  const auto d = x.dims4();
  ResourceReport rep;
  for (const auto& c : configs) {
    TimingRow row;
    row.algo = attacks::to_string(c.algorithm);
    const bool low_rank = attacks::is_low_rank(c.algorithm);
    const auto r = low_rank ? std::optional(attacks::rank_from_fraction(c.rank_fraction, d.n, d.m))
                            : std::nullopt;
    row.memory = memory_estimate(d.b, d.c, d.n, d.m, r);
    rep.rows.push_back(std::move(row));
  }

  ThreadScope scope(opts.threads);
  using Clock = std::chrono::steady_clock;
  for (int rep_i = -opts.warmup; rep_i < opts.repetitions; ++rep_i) {
    for (std::size_t i = 0; i < configs.size(); ++i) {
      const auto t0 = Clock::now();
      const auto res = attacks::run_attack(model, x, labels, configs[i]);
      const auto t1 = Clock::now();
      (void)res;
      if (rep_i >= 0) {
        rep.rows[i].samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
    }
  }
  for (auto& row : rep.rows) {
    row.median_ms = median(row.samples_ms);
    row.min_ms = *std::ranges::min_element(row.samples_ms);
    row.max_ms = *std::ranges::max_element(row.samples_ms);
  }
  return rep;
}

// ---- CSV ----

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string robust_accuracy_csv(std::span<const RobustAccuracyReport> reports) {
  std::string out = "model_id,attack,steps,tau,norm,rank_frac,init,rho,clean_acc,n\n";
  for (const auto& r : reports) {
    const bool low_rank = attacks::is_low_rank(r.attack.algorithm);
    out += r.model_id + ',' + r.attack_label + ',' + std::to_string(r.attack.steps) + ',' +
           format_number(r.attack.tau) + ',' + to_string(r.attack.norm_kind) + ',' +
           (low_rank ? format_number(r.attack.rank_fraction) : std::string()) + ',' +
           attacks::to_string(r.attack.init) + ',' + format_number(r.rho) + ',' +
           format_number(r.clean_accuracy) + ',' + std::to_string(r.n_images) + '\n';
  }
  return out;
}

std::string spectrum_csv(const SpectrumReport& report) {
  std::string out = "index,mean_rel_change\n";
  for (std::size_t j = 0; j < report.mean_relative_change.size(); ++j)
    out += std::to_string(j + 1) + ',' + format_number(report.mean_relative_change[j]) + '\n';
  return out;
}

std::string resources_csv(const ResourceReport& report, bool include_timing) {
  std::string out = "algo,d,c,n,m,r,elements,ratio,median_ms\n";
  for (const auto& row : report.rows) {
    const auto& e = row.memory;
    out += row.algo + ',' + std::to_string(e.d) + ',' + std::to_string(e.c) + ',' +
           std::to_string(e.n) + ',' + std::to_string(e.m) + ',' + std::to_string(e.r) + ',' +
           std::to_string(e.elements()) + ',' + format_number(e.ratio) + ',' +
           (include_timing ? format_number(row.median_ms) : std::string()) + '\n';
  }
  return out;
}

}  // namespace lowrank::analysis
