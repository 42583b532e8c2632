#include "lowrank/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "lowrank/error.hpp"
#include "lowrank/parallel.hpp"

namespace lowrank::model {

const char* to_string(Architecture a) noexcept {
  switch (a) {
    case Architecture::kLinear: return "linear";
    case Architecture::kMlp: return "mlp";
    case Architecture::kCnn: return "cnn";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "linear") return Architecture::kLinear;
  if (s == "mlp") return Architecture::kMlp;
  if (s == "cnn") return Architecture::kCnn;
  throw ContractViolation("unknown architecture '" + s + "' (expected linear, mlp or cnn)");
}

namespace {

std::size_t flat(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string layer_error(std::size_t index, const std::string& what) {
  std::ostringstream os;
  os << "layer " << index << ": " << what;
  return os.str();
}

}  // namespace

std::vector<Shape> ModelSpec::shapes() const {
  for (auto d : input_dims) LOWRANK_REQUIRE(d >= 1, "model input dims must be positive");
  std::vector<Shape> out{{input_dims[0], input_dims[1], input_dims[2]}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Shape& in = out.back();
    switch (l.kind) {
      case LayerKind::kDense:
        LOWRANK_REQUIRE(in.size() == 1, layer_error(i, "dense expects a flat input; add flatten"));
        LOWRANK_REQUIRE(l.in == in[0] && l.out >= 1,
                        layer_error(i, "dense input width " + std::to_string(l.in) +
                                           " does not match " + std::to_string(in[0])));
        out.push_back({l.out});
        break;
      case LayerKind::kConv2d: {
        LOWRANK_REQUIRE(in.size() == 3, layer_error(i, "conv2d expects a C x H x W input"));
        LOWRANK_REQUIRE(l.in == in[0] && l.out >= 1 && l.kernel >= 1 && l.stride >= 1,
                        layer_error(i, "conv2d channel count or kernel mismatch"));
        LOWRANK_REQUIRE(in[1] + 2 * l.pad >= l.kernel && in[2] + 2 * l.pad >= l.kernel,
                        layer_error(i, "conv2d kernel larger than padded input"));
        out.push_back({l.out, (in[1] + 2 * l.pad - l.kernel) / l.stride + 1,
                       (in[2] + 2 * l.pad - l.kernel) / l.stride + 1});
        break;
      }
      case LayerKind::kRelu:
        out.push_back(in);
        break;
      case LayerKind::kFlatten:
        out.push_back({flat(in)});
        break;
      case LayerKind::kMaxPool2d:
        LOWRANK_REQUIRE(in.size() == 3, layer_error(i, "maxpool2d expects a C x H x W input"));
        LOWRANK_REQUIRE(l.kernel >= 1 && in[1] >= l.kernel && in[2] >= l.kernel,
                        layer_error(i, "maxpool2d window larger than input"));
        out.push_back({in[0], in[1] / l.kernel, in[2] / l.kernel});
        break;
    }
  }
  LOWRANK_REQUIRE(num_classes >= 2, "model must have at least two classes");
  LOWRANK_REQUIRE(out.back().size() == 1 && out.back()[0] == num_classes,
                  "final layer output must be a flat vector of num_classes logits");
  return out;
}

ModelSpec reference_spec(Architecture arch, std::size_t c, std::size_t n, std::size_t m,
                         std::size_t num_classes) {
  ModelSpec spec;
  spec.input_dims = {c, n, m};
  spec.num_classes = num_classes;
  switch (arch) {
    case Architecture::kLinear:
      spec.layers = {LayerSpec::flatten(), LayerSpec::dense(c * n * m, num_classes)};
      break;
    case Architecture::kMlp:
      spec.layers = {LayerSpec::flatten(),      LayerSpec::dense(c * n * m, 128), LayerSpec::relu(),
                     LayerSpec::dense(128, 128), LayerSpec::relu(),
                     LayerSpec::dense(128, num_classes)};
      break;
    case Architecture::kCnn:
      spec.layers = {LayerSpec::conv2d(c, 8, 3, 1, 1),  LayerSpec::relu(), LayerSpec::maxpool2d(2),
                     LayerSpec::conv2d(8, 16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                     LayerSpec::flatten(),
                     LayerSpec::dense(16 * (n / 2 / 2) * (m / 2 / 2), num_classes)};
      break;
  }
  spec.validate();
  return spec;
}

std::size_t ModelParams::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.size();
  for (const auto& b : biases) n += b.size();
  return n;
}

namespace {

std::pair<std::size_t, std::size_t> param_sizes(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::kDense: return {l.in * l.out, l.out};
    case LayerKind::kConv2d: return {l.out * l.in * l.kernel * l.kernel, l.out};
    default: return {0, 0};
  }
}

std::size_t fan_in(const LayerSpec& l) {
  return l.kind == LayerKind::kDense ? l.in : l.in * l.kernel * l.kernel;
}

}  // namespace

ModelParams zero_params(const ModelSpec& spec) {
  spec.validate();
  ModelParams p;
  for (const auto& l : spec.layers) {
    const auto [nw, nb] = param_sizes(l);
    p.weights.emplace_back(nw, 0.0);
    p.biases.emplace_back(nb, 0.0);
  }
  return p;
}

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams p = zero_params(spec);
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (p.weights[i].empty()) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(spec.layers[i])));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : p.weights[i]) w = dist(rng);
    for (double& b : p.biases[i]) b = dist(rng);
  }
  return p;
}

namespace {

void check_params(const ModelSpec& spec, const ModelParams& params) {
  LOWRANK_REQUIRE(params.weights.size() == spec.layers.size() &&
                      params.biases.size() == spec.layers.size(),
                  "model parameters do not match the layer list");
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [nw, nb] = param_sizes(spec.layers[i]);
    LOWRANK_REQUIRE(params.weights[i].size() == nw && params.biases[i].size() == nb,
                    layer_error(i, "parameter shape mismatch"));
  }
}

void check_input(const ModelSpec& spec, const Tensor& x) {
  const auto d = x.dims4();
  LOWRANK_REQUIRE(d.b >= 1, "empty batch");
  if (d.c != spec.input_dims[0] || d.n != spec.input_dims[1] || d.m != spec.input_dims[2]) {
    throw ContractViolation("input shape " + shape_string(x.shape()) +
                            " does not match model input dims " +
                            shape_string(spec.input_dims));
  }
}

// Activations of one image through the network. acts[0] is the input;
// acts[i + 1] is the output of layer i. pool_index holds the argmax source
// index for maxpool layers.
struct Trace {
  std::vector<std::vector<double>> acts;
  std::vector<std::vector<std::size_t>> pool_index;
};

void forward_image(const ModelSpec& spec, const ModelParams& params,
                   const std::vector<Shape>& shapes, std::span<const double> image, Trace& t) {
  const std::size_t L = spec.layers.size();
  t.acts.resize(L + 1);
  t.pool_index.resize(L);
  t.acts[0].assign(image.begin(), image.end());
  for (std::size_t li = 0; li < L; ++li) {
    const auto& l = spec.layers[li];
    const auto& in = t.acts[li];
    auto& out = t.acts[li + 1];
    const Shape& is = shapes[li];
    const Shape& os = shapes[li + 1];
    out.assign(flat(os), 0.0);
    switch (l.kind) {
      case LayerKind::kDense: {
        const auto& w = params.weights[li];
        const auto& b = params.biases[li];
        for (std::size_t o = 0; o < l.out; ++o) {
          double acc = b[o];
          const double* row = w.data() + o * l.in;
          for (std::size_t k = 0; k < l.in; ++k) acc += row[k] * in[k];
          out[o] = acc;
        }
        break;
      }
      case LayerKind::kConv2d: {
        const auto& w = params.weights[li];
        const auto& b = params.biases[li];
        const std::size_t H = is[1], W = is[2], Ho = os[1], Wo = os[2], K = l.kernel;
        for (std::size_t co = 0; co < l.out; ++co) {
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              double acc = b[co];
              for (std::size_t ci = 0; ci < l.in; ++ci) {
                const double* wk = w.data() + (co * l.in + ci) * K * K;
                const double* plane = in.data() + ci * H * W;
                for (std::size_t ky = 0; ky < K; ++ky) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                  static_cast<std::ptrdiff_t>(l.pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                    static_cast<std::ptrdiff_t>(l.pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    acc += wk[ky * K + kx] * plane[static_cast<std::size_t>(iy) * W +
                                                   static_cast<std::size_t>(ix)];
                  }
                }
              }
              out[(co * Ho + oy) * Wo + ox] = acc;
            }
          }
        }
        break;
      }
      case LayerKind::kRelu:
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
        break;
      case LayerKind::kFlatten:
        out = in;
        break;
      case LayerKind::kMaxPool2d: {
        auto& idx = t.pool_index[li];
        idx.assign(out.size(), 0);
        const std::size_t C = is[0], H = is[1], W = is[2], Ho = os[1], Wo = os[2], K = l.kernel;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              std::size_t best = (c * H + oy * K) * W + ox * K;
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const std::size_t src = (c * H + oy * K + ky) * W + ox * K + kx;
                  if (in[src] > in[best]) best = src;
                }
              const std::size_t dst = (c * Ho + oy) * Wo + ox;
              out[dst] = in[best];
              idx[dst] = best;
            }
        break;
      }
    }
  }
}

// Reverse pass for one image. d_out is d loss / d logits. Parameter
// gradients are accumulated into `pgrad` when non-null; the input gradient
// is written to `d_input` when non-null.
void backward_image(const ModelSpec& spec, const ModelParams& params,
                    const std::vector<Shape>& shapes, const Trace& t, std::vector<double> grad,
                    ModelParams* pgrad, std::span<double> d_input) {
  const bool need_input = !d_input.empty();
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& l = spec.layers[li];
    const auto& in = t.acts[li];
    const Shape& is = shapes[li];
    const Shape& os = shapes[li + 1];
    // Nothing upstream needs a gradient once the first parameter layer is done.
    const bool need_down = need_input || li > 0;
    std::vector<double> down;
    if (need_down) down.assign(in.size(), 0.0);
    switch (l.kind) {
      case LayerKind::kDense: {
        const auto& w = params.weights[li];
        if (pgrad) {
          auto& gw = pgrad->weights[li];
          auto& gb = pgrad->biases[li];
          for (std::size_t o = 0; o < l.out; ++o) {
            const double g = grad[o];
            gb[o] += g;
            if (g == 0.0) continue;
            double* row = gw.data() + o * l.in;
            for (std::size_t k = 0; k < l.in; ++k) row[k] += g * in[k];
          }
        }
        if (need_down) {
          for (std::size_t o = 0; o < l.out; ++o) {
            const double g = grad[o];
            if (g == 0.0) continue;
            const double* row = w.data() + o * l.in;
            for (std::size_t k = 0; k < l.in; ++k) down[k] += g * row[k];
          }
        }
        break;
      }
      case LayerKind::kConv2d: {
        const auto& w = params.weights[li];
        const std::size_t H = is[1], W = is[2], Ho = os[1], Wo = os[2], K = l.kernel;
        for (std::size_t co = 0; co < l.out; ++co) {
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const double g = grad[(co * Ho + oy) * Wo + ox];
              if (g == 0.0) continue;
              if (pgrad) pgrad->biases[li][co] += g;
              for (std::size_t ci = 0; ci < l.in; ++ci) {
                const std::size_t wbase = (co * l.in + ci) * K * K;
                const std::size_t pbase = ci * H * W;
                for (std::size_t ky = 0; ky < K; ++ky) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                  static_cast<std::ptrdiff_t>(l.pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                    static_cast<std::ptrdiff_t>(l.pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::size_t src =
                        pbase + static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
                    if (pgrad) pgrad->weights[li][wbase + ky * K + kx] += g * in[src];
                    if (need_down) down[src] += g * w[wbase + ky * K + kx];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::kRelu:
        if (need_down)
          for (std::size_t k = 0; k < in.size(); ++k) down[k] = in[k] > 0.0 ? grad[k] : 0.0;
        break;
      case LayerKind::kFlatten:
        if (need_down) down = grad;
        break;
      case LayerKind::kMaxPool2d:
        if (need_down) {
          const auto& idx = t.pool_index[li];
          for (std::size_t k = 0; k < grad.size(); ++k) down[idx[k]] += grad[k];
        }
        break;
    }
    if (!need_down) return;
    grad = std::move(down);
  }
  if (need_input) std::ranges::copy(grad, d_input.begin());
}

// Softmax cross-entropy for one row; writes (softmax - onehot) * scale to grad.
double softmax_xent(std::span<const double> z, std::uint32_t label, double scale,
                    std::vector<double>* grad) {
  const double zmax = *std::ranges::max_element(z);
  double denom = 0.0;
  for (double v : z) denom += std::exp(v - zmax);
  const double log_denom = std::log(denom);
  if (grad) {
    grad->resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k)
      (*grad)[k] = scale * (std::exp(z[k] - zmax - log_denom) - (k == label ? 1.0 : 0.0));
  }
  return log_denom - (z[label] - zmax);
}

void check_labels(const Labels& labels, std::size_t batch, std::size_t classes) {
  LOWRANK_REQUIRE(labels.size() == batch, "label count does not match batch size");
  for (auto y : labels) {
    if (y >= classes) {
      throw ContractViolation("label " + std::to_string(y) + " out of range [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

void add_into(ModelParams& acc, const ModelParams& g) {
  for (std::size_t i = 0; i < acc.weights.size(); ++i) {
    for (std::size_t k = 0; k < acc.weights[i].size(); ++k) acc.weights[i][k] += g.weights[i][k];
    for (std::size_t k = 0; k < acc.biases[i].size(); ++k) acc.biases[i][k] += g.biases[i][k];
  }
}

// Images per parameter-gradient partial sum. Fixed so the reduction order
// never depends on the worker count.
constexpr std::size_t kGradGroup = 8;

}  // namespace

Tensor forward(const Model& model, const Tensor& x) {
  check_params(model.spec, model.params);
  check_input(model.spec, x);
  const auto shapes = model.spec.shapes();
  const std::size_t B = x.dim(0), D = model.spec.num_classes;
  Tensor logits(std::vector<std::size_t>{B, D});
  parallel_for(B, [&](std::size_t b) {
    Trace t;
    forward_image(model.spec, model.params, shapes, x.image(b), t);
    std::ranges::copy(t.acts.back(), logits.image(b).begin());
  });
  return logits;
}

double cross_entropy(const Tensor& logits, const Labels& labels) {
  LOWRANK_REQUIRE(logits.rank() == 2, "cross_entropy expects B x D logits");
  check_labels(labels, logits.dim(0), logits.dim(1));
  double acc = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b)
    acc += softmax_xent(logits.image(b), labels[b], 1.0, nullptr);
  return acc / static_cast<double>(labels.size());
}

Labels argmax_rows(const Tensor& logits) {
  LOWRANK_REQUIRE(logits.rank() == 2, "argmax_rows expects B x D logits");
  Labels out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const auto row = logits.image(b);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    out[b] = static_cast<std::uint32_t>(best);
  }
  return out;
}

Labels predict_class(const Model& model, const Tensor& x) { return argmax_rows(forward(model, x)); }

Gradients backprop(const Model& model, const Tensor& x, const Labels& labels, bool want_input,
                   bool want_params) {
  check_params(model.spec, model.params);
  check_input(model.spec, x);
  check_labels(labels, x.dim(0), model.spec.num_classes);
  const auto shapes = model.spec.shapes();
  const std::size_t B = x.dim(0);
  const double scale = 1.0 / static_cast<double>(B);

  Gradients out;
  out.logits = Tensor(std::vector<std::size_t>{B, model.spec.num_classes});
  if (want_input) out.input = Tensor(std::vector<std::size_t>(x.shape().begin(), x.shape().end()));
  std::vector<double> losses(B, 0.0);
  const std::size_t groups = (B + kGradGroup - 1) / kGradGroup;
  std::vector<ModelParams> partial(want_params ? groups : 0);

  parallel_for(groups, [&](std::size_t g) {
    ModelParams* pg = nullptr;
    if (want_params) {
      partial[g] = zero_params(model.spec);
      pg = &partial[g];
    }
    Trace t;
    std::vector<double> dlogits;
    for (std::size_t b = g * kGradGroup; b < std::min(B, (g + 1) * kGradGroup); ++b) {
      forward_image(model.spec, model.params, shapes, x.image(b), t);
      std::ranges::copy(t.acts.back(), out.logits.image(b).begin());
      losses[b] = softmax_xent(t.acts.back(), labels[b], scale, &dlogits);
      backward_image(model.spec, model.params, shapes, t, dlogits, pg,
                     want_input ? out.input.image(b) : std::span<double>{});
    }
  });

  for (double l : losses) out.loss += l;
  out.loss *= scale;
  if (want_params) {
    out.params = zero_params(model.spec);
    for (const auto& p : partial) add_into(out.params, p);
  }
  return out;
}

Tensor grad_input(const Model& model, const Tensor& x, const Labels& labels) {
  return backprop(model, x, labels, true, false).input;
}

ModelParams grad_params(const Model& model, const Tensor& x, const Labels& labels) {
  return backprop(model, x, labels, false, true).params;
}

}  // namespace lowrank::model
