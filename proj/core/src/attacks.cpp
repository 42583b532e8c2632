#include "lowrank/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lowrank/error.hpp"
#include "lowrank/linalg.hpp"
#include "lowrank/parallel.hpp"

namespace lowrank::attacks {

const char* to_string(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::kFgsm: return "fgsm";
    case Algorithm::kPgd: return "pgd";
    case Algorithm::kLoraPgd: return "lora_pgd";
    case Algorithm::kRankProjectedPgd: return "rank_projected_pgd";
  }
  return "unknown";
}

const char* to_string(Init i) noexcept {
  switch (i) {
    case Init::kRandom: return "random";
    case Init::kTransfer: return "transfer";
    case Init::kWarmup: return "warmup";
  }
  return "unknown";
}

const char* to_string(GradThrough g) noexcept {
  return g == GradThrough::kExact ? "exact" : "straight_through";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "fgsm") return Algorithm::kFgsm;
  if (s == "pgd") return Algorithm::kPgd;
  if (s == "lora_pgd") return Algorithm::kLoraPgd;
  if (s == "rank_projected_pgd") return Algorithm::kRankProjectedPgd;
  throw ContractViolation("unknown attack '" + s + "'");
}

Init init_from_string(const std::string& s) {
  if (s == "random") return Init::kRandom;
  if (s == "transfer") return Init::kTransfer;
  if (s == "warmup") return Init::kWarmup;
  throw ContractViolation("unknown init '" + s + "'");
}

GradThrough grad_through_from_string(const std::string& s) {
  if (s == "exact") return GradThrough::kExact;
  if (s == "straight_through") return GradThrough::kStraightThrough;
  throw ContractViolation("unknown gradient mode '" + s + "'");
}

void AttackConfig::validate() const {
  LOWRANK_REQUIRE(steps >= 1, "attack steps must be >= 1");
  LOWRANK_REQUIRE(std::isfinite(tau) && tau >= 0.0, "attack budget tau must be finite and >= 0");
  if (is_low_rank(algorithm)) {
    LOWRANK_REQUIRE(rank_fraction > 0.0 && rank_fraction <= 1.0,
                    "rank fraction must lie in (0, 1]");
    LOWRANK_REQUIRE(norm_kind != NormKind::kLinf,
                    "low-rank attacks support frobenius and nuclear budgets only");
  }
}

std::size_t rank_from_fraction(double p, std::size_t n, std::size_t m) {
  LOWRANK_REQUIRE(p > 0.0 && p <= 1.0, "rank fraction must lie in (0, 1]");
  const double raw = std::round(p * static_cast<double>(std::min(n, m)));
  return std::max<std::size_t>(1, static_cast<std::size_t>(raw));
}

namespace {

// normalize_per_image with degenerate images set to exactly zero.
Normalized unit_or_zero(const Tensor& z) {
  Normalized n = normalize_per_image(z);
  for (std::size_t b = 0; b < n.degenerate.size(); ++b)
    if (n.degenerate[b]) std::ranges::fill(n.value.image(b), 0.0);
  return n;
}

DegenerateFlags zero_images(const Tensor& d) {
  const auto norms = image_norm(d, NormKind::kFrobenius);
  DegenerateFlags flags(norms.size(), 0);
  for (std::size_t b = 0; b < norms.size(); ++b) flags[b] = norms[b] <= kDegenerateNorm ? 1 : 0;
  return flags;
}

// Unit-Frobenius direction rescaled so each image has nuclear norm target[b].
Tensor rescale_to_nuclear(const Tensor& d, std::span<const double> target) {
  Tensor unit = unit_or_zero(d).value;
  const auto nuc = image_norm(unit, NormKind::kNuclear);
  std::vector<double> scale(nuc.size(), 0.0);
  for (std::size_t b = 0; b < nuc.size(); ++b)
    scale[b] = nuc[b] > kDegenerateNorm ? target[b] / nuc[b] : 0.0;
  return scale_images(unit, scale);
}

// Projection onto the budget set: sphere for frobenius and nuclear, box for linf.
Tensor project_budget(const Tensor& d, double tau, NormKind kind) {
  switch (kind) {
    case NormKind::kFrobenius:
      return tau * unit_or_zero(d).value;
    case NormKind::kLinf:
      if (tau == 0.0) return 0.0 * d;
      return clamp_box(d, -tau, tau);
    case NormKind::kNuclear: {
      const std::vector<double> target(d.dim(0), tau);
      return rescale_to_nuclear(d, target);
    }
  }
  return d;
}

Tensor sign_of(const Tensor& g) {
  Tensor out = g;
  for (double& v : out.values()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return out;
}

Tensor ascent_step(const Tensor& g, const AttackConfig& cfg) {
  if (cfg.norm_kind == NormKind::kLinf) {
    const double alpha = 2.5 * cfg.tau / static_cast<double>(cfg.steps);
    return alpha * sign_of(g);
  }
  return cfg.tau * unit_or_zero(g).value;
}

// Frobenius case of project_budget((adv - x) + ascent_step(g)) in one pass
// per image.
void sphere_step(const Tensor& x, const Tensor& adv, const Tensor& g, double tau, Tensor& delta) {
  const std::size_t per = x.image_size();
  parallel_for(x.dim(0), [&](std::size_t b) {
    const double* px = x.data() + b * per;
    const double* pa = adv.data() + b * per;
    const double* pg = g.data() + b * per;
    double* pd = delta.data() + b * per;
    double gn = 0.0;
    for (std::size_t k = 0; k < per; ++k) gn += pg[k] * pg[k];
    gn = std::sqrt(gn);
    const bool flat = gn <= kDegenerateNorm;
    double wn = 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      pd[k] = (pa[k] - px[k]) + (flat ? 0.0 : tau * (pg[k] / gn));
      wn += pd[k] * pd[k];
    }
    wn = std::sqrt(wn);
    if (wn <= kDegenerateNorm) {
      std::fill(pd, pd + per, 0.0);
    } else {
      for (std::size_t k = 0; k < per; ++k) pd[k] = tau * (pd[k] / wn);
    }
  });
}

// Shared loop of fgsm and pgd, starting from delta.
AttackResult full_rank_ascent(const model::Model& model, const Tensor& x, const Labels& labels,
                              const AttackConfig& cfg, Tensor delta) {
  for (int k = 0; k < cfg.steps; ++k) {
    const Tensor adv = clamp_box(x + delta, 0.0, 1.0);
    const Tensor g = model::grad_input(model, adv, labels);
    if (cfg.norm_kind == NormKind::kFrobenius) {
      sphere_step(x, adv, g, cfg.tau, delta);
    } else {
      delta = project_budget((adv - x) + ascent_step(g, cfg), cfg.tau, cfg.norm_kind);
    }
  }
  AttackResult r;
  r.adversarial = clamp_box(x + delta, 0.0, 1.0);
  r.degenerate = zero_images(delta);
  r.steps_executed = cfg.steps;
  r.perturbation = std::move(delta);
  return r;
}

Tensor fgsm_delta(const model::Model& source, const Tensor& x, const Labels& labels, double tau,
                  NormKind kind) {
  return fgsm(source, x, labels, tau, kind).delta();
}

const model::Model& transfer_model(const AttackContext& ctx) {
  LOWRANK_REQUIRE(ctx.transfer_source != nullptr,
                  "transfer initialization needs a standard (source) model");
  return *ctx.transfer_source;
}

}  // namespace

Tensor FactoredPerturbation::materialize() const {
  Tensor p = channel_matmul(u, v);
  if (norm_kind == NormKind::kNuclear) return p;
  return tau * unit_or_zero(p).value;
}

Tensor AttackResult::delta() const {
  if (const auto* f = std::get_if<FactoredPerturbation>(&perturbation)) return f->materialize();
  return std::get<Tensor>(perturbation);
}

AttackResult fgsm(const model::Model& model, const Tensor& x, const Labels& labels, double tau,
                  NormKind norm_kind) {
  AttackConfig cfg;
  cfg.algorithm = Algorithm::kFgsm;
  cfg.steps = 1;
  cfg.tau = tau;
  cfg.norm_kind = norm_kind;
  cfg.validate();
  return full_rank_ascent(model, x, labels, cfg, Tensor(x.dims4()));
}

AttackResult pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                 const AttackConfig& cfg, const AttackContext& ctx) {
  cfg.validate();
  Tensor start(x.dims4());
  switch (cfg.init) {
    case Init::kRandom:
      break;
    case Init::kTransfer:
      start = fgsm_delta(transfer_model(ctx), x, labels, cfg.tau, cfg.norm_kind);
      break;
    case Init::kWarmup:
      start = fgsm_delta(model, x, labels, cfg.tau, cfg.norm_kind);
      break;
  }
  return full_rank_ascent(model, x, labels, cfg, std::move(start));
}

std::pair<Tensor, Tensor> init_random(const Dims4& dims, std::size_t r, std::uint64_t seed) {
  LOWRANK_REQUIRE(r >= 1 && r <= std::min(dims.n, dims.m), "init_random: rank out of range");
  Tensor u(Dims4{dims.b, dims.c, dims.n, r});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (double& w : u.values()) w = gauss(rng);
  return {normalize_per_image(u).value, Tensor(Dims4{dims.b, dims.c, r, dims.m})};
}

std::pair<Tensor, Tensor> init_transfer(const model::Model& standard_model, const Tensor& x,
                                        const Labels& labels, double tau, std::size_t r) {
  return linalg::factor_split(fgsm_delta(standard_model, x, labels, tau, NormKind::kFrobenius), r);
}

std::pair<Tensor, Tensor> init_warmup(const model::Model& target_model, const Tensor& x,
                                      const Labels& labels, double tau, std::size_t r) {
  return init_transfer(target_model, x, labels, tau, r);
}

namespace {

double frobenius(std::span<const double> v) {
  double acc = 0.0;
  for (double e : v) acc += e * e;
  return std::sqrt(acc);
}

void require_factors(const Tensor& x, const Tensor& u, const Tensor& v) {
  const auto d = x.dims4();
  LOWRANK_REQUIRE(u.rank() == 4 && v.rank() == 4, "factors must be rank-4 tensors");
  LOWRANK_REQUIRE(u.dim(0) == d.b && u.dim(1) == d.c && u.dim(2) == d.n,
                  "u must be B x C x N x r for x of shape " + shape_string(x.shape()));
  LOWRANK_REQUIRE(v.dim(0) == d.b && v.dim(1) == d.c && v.dim(3) == d.m && v.dim(2) == u.dim(3),
                  "v must be B x C x r x M matching u");
}

// pre = x + tau * normalize(p) per image, written into `pre`; returns the
// per-image norms of p.
std::vector<double> lora_preimage(const Tensor& x, const Tensor& p, double tau, Tensor& pre) {
  const std::size_t per = x.image_size();
  std::vector<double> norms(x.dim(0));
  pre = Tensor(x.dims4());
  parallel_for(x.dim(0), [&](std::size_t b) {
    const double* px = x.data() + b * per;
    const double* pp = p.data() + b * per;
    double* out = pre.data() + b * per;
    const double n = frobenius({pp, per});
    norms[b] = n;
    if (n <= kDegenerateNorm) {
      for (std::size_t k = 0; k < per; ++k) out[k] = px[k] + tau * pp[k];
    } else {
      for (std::size_t k = 0; k < per; ++k) out[k] = px[k] + tau * (pp[k] / n);
    }
  });
  return norms;
}

// t += normalize(g) per image, in place.
void add_unit_step(Tensor& t, const Tensor& g) {
  const std::size_t per = t.image_size();
  parallel_for(t.dim(0), [&](std::size_t b) {
    const double* pg = g.data() + b * per;
    double* pt = t.data() + b * per;
    const double n = frobenius({pg, per});
    if (n <= kDegenerateNorm) {
      for (std::size_t k = 0; k < per; ++k) pt[k] += pg[k];
    } else {
      for (std::size_t k = 0; k < per; ++k) pt[k] += pg[k] / n;
    }
  });
}

}  // namespace

double lora_objective(const model::Model& model, const Tensor& x, const Labels& labels,
                      const Tensor& u, const Tensor& v, double tau) {
  require_factors(x, u, v);
  Tensor pre;
  lora_preimage(x, channel_matmul(u, v), tau, pre);
  return model::cross_entropy(model::forward(model, clamp_box(pre, 0.0, 1.0)), labels);
}

FactorGradients lora_gradients(const model::Model& model, const Tensor& x, const Labels& labels,
                               const Tensor& u, const Tensor& v, double tau, GradThrough through) {
  require_factors(x, u, v);
  const Tensor p = channel_matmul(u, v);
  Tensor pre;
  const auto norms = lora_preimage(x, p, tau, pre);
  const auto g = model::backprop(model, clamp_box(pre, 0.0, 1.0), labels, true, false);

  const std::size_t per = x.image_size();
  Tensor gp(x.dims4());
  parallel_for(x.dim(0), [&](std::size_t b) {
    const double* pg = g.input.data() + b * per;
    const double* pr = pre.data() + b * per;
    const double* pp = p.data() + b * per;
    double* out = gp.data() + b * per;
    if (through == GradThrough::kStraightThrough) {
      for (std::size_t k = 0; k < per; ++k) out[k] = tau * pg[k];
      return;
    }
    // Clamp mask, then the Jacobian of normalize (identity when degenerate).
    for (std::size_t k = 0; k < per; ++k) out[k] = (pr[k] > 0.0 && pr[k] < 1.0) ? tau * pg[k] : 0.0;
    const double n = norms[b];
    if (n <= kDegenerateNorm) return;
    double radial = 0.0;
    for (std::size_t k = 0; k < per; ++k) radial += out[k] * pp[k];
    radial /= n;
    for (std::size_t k = 0; k < per; ++k) out[k] = (out[k] - radial * pp[k] / n) / n;
  });
  return {g.loss, channel_matmul_nt(gp, v), channel_matmul_tn(u, gp)};
}

AttackResult lora_pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                      const AttackConfig& cfg, const AttackContext& ctx) {
  cfg.validate();
  const auto d = x.dims4();
  const std::size_t r = rank_from_fraction(cfg.rank_fraction, d.n, d.m);

  Tensor u, v;
  switch (cfg.init) {
    case Init::kRandom:
      std::tie(u, v) = init_random(d, r, cfg.seed);
      break;
    case Init::kTransfer:
      std::tie(u, v) = init_transfer(transfer_model(ctx), x, labels, cfg.tau, r);
      break;
    case Init::kWarmup:
      std::tie(u, v) = init_warmup(model, x, labels, cfg.tau, r);
      break;
  }

  for (int k = 0; k < cfg.steps; ++k) {
    const auto g = lora_gradients(model, x, labels, u, v, cfg.tau, cfg.grad_through);
    add_unit_step(u, g.du);
    add_unit_step(v, g.dv);
  }

  FactoredPerturbation f{std::move(u), std::move(v), r, cfg.tau, cfg.norm_kind};
  if (cfg.norm_kind == NormKind::kNuclear) {
    std::vector<double> target = ctx.nuclear_targets;
    if (target.empty()) target.assign(d.b, cfg.tau);
    LOWRANK_REQUIRE(target.size() == d.b, "one nuclear budget per image required");
    // Fold each image's scale into the factors so u (x)_C v is the final attack.
    const Tensor p = channel_matmul(f.u, f.v);
    const Tensor scaled = rescale_to_nuclear(p, target);
    const auto pn = image_norm(p, NormKind::kFrobenius);
    const auto sn = image_norm(scaled, NormKind::kFrobenius);
    std::vector<double> root(d.b, 0.0);
    for (std::size_t b = 0; b < d.b; ++b)
      root[b] = pn[b] > kDegenerateNorm ? std::sqrt(sn[b] / pn[b]) : 0.0;
    f.u = scale_images(f.u, root);
    f.v = scale_images(f.v, root);
  }

  AttackResult res;
  const Tensor delta = f.materialize();
  res.adversarial = clamp_box(x + delta, 0.0, 1.0);
  res.degenerate = zero_images(delta);
  res.steps_executed = cfg.steps;
  res.perturbation = std::move(f);
  return res;
}

AttackResult lora_pgd_nuclear_matched(const model::Model& model, const Tensor& x,
                                      const Labels& labels, const AttackConfig& cfg,
                                      const Tensor& reference, const AttackContext& ctx) {
  require_same_shape(x, reference, "lora_pgd_nuclear_matched");
  AttackConfig matched = cfg;
  matched.norm_kind = NormKind::kNuclear;
  AttackContext c = ctx;
  c.nuclear_targets = image_norm(reference, NormKind::kNuclear);
  return lora_pgd(model, x, labels, matched, c);
}

AttackResult rank_projected_pgd(const model::Model& model, const Tensor& x, const Labels& labels,
                                const AttackConfig& cfg, const AttackContext& ctx) {
  cfg.validate();
  const auto d = x.dims4();
  const std::size_t r = rank_from_fraction(cfg.rank_fraction, d.n, d.m);
  const AttackResult full = pgd(model, x, labels, cfg, ctx);
  Tensor delta = project_budget(linalg::truncate_rank(full.delta(), r), cfg.tau, cfg.norm_kind);

  AttackResult res;
  res.adversarial = clamp_box(x + delta, 0.0, 1.0);
  res.degenerate = zero_images(delta);
  res.steps_executed = cfg.steps;
  res.perturbation = std::move(delta);
  return res;
}

AttackResult run_attack(const model::Model& model, const Tensor& x, const Labels& labels,
                        const AttackConfig& cfg, const AttackContext& ctx) {
  switch (cfg.algorithm) {
    case Algorithm::kFgsm: return fgsm(model, x, labels, cfg.tau, cfg.norm_kind);
    case Algorithm::kPgd: return pgd(model, x, labels, cfg, ctx);
    case Algorithm::kLoraPgd: return lora_pgd(model, x, labels, cfg, ctx);
    case Algorithm::kRankProjectedPgd: return rank_projected_pgd(model, x, labels, cfg, ctx);
  }
  throw ContractViolation("unknown attack algorithm");
}

}  // namespace lowrank::attacks
