#include "lowrank/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lowrank/error.hpp"
#include "lowrank/linalg.hpp"
#include "lowrank/parallel.hpp"

namespace lowrank {

const char* to_string(NormKind kind) noexcept {
  switch (kind) {
    case NormKind::kFrobenius: return "frobenius";
    case NormKind::kLinf: return "linf";
    case NormKind::kNuclear: return "nuclear";
  }
  return "unknown";
}

NormKind norm_kind_from_string(const std::string& name) {
  if (name == "frobenius" || name == "l2") return NormKind::kFrobenius;
  if (name == "linf") return NormKind::kLinf;
  if (name == "nuclear") return NormKind::kNuclear;
  throw ContractViolation("unknown norm kind '" + name + "'");
}

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(product(shape_), fill) {
  LOWRANK_REQUIRE(!shape_.empty(), "tensor shape must have at least one axis");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  LOWRANK_REQUIRE(!shape_.empty(), "tensor shape must have at least one axis");
  LOWRANK_REQUIRE(product(shape_) == values_.size(),
                  "tensor value count does not match shape " + shape_string(shape_));
}

Tensor::Tensor(const Dims4& d, double fill) : Tensor(std::vector<std::size_t>{d.b, d.c, d.n, d.m}, fill) {}

std::size_t Tensor::dim(std::size_t axis) const {
  LOWRANK_REQUIRE(axis < shape_.size(), "axis out of range");
  return shape_[axis];
}

Dims4 Tensor::dims4() const {
  LOWRANK_REQUIRE(shape_.size() == 4, "expected a rank-4 batch, got shape " + shape_string(shape_));
  return {shape_[0], shape_[1], shape_[2], shape_[3]};
}

std::size_t Tensor::image_size() const noexcept {
  return shape_.empty() || shape_[0] == 0 ? 0 : values_.size() / shape_[0];
}

std::span<double> Tensor::image(std::size_t b) noexcept {
  const auto n = image_size();
  return std::span<double>(values_).subspan(b * n, n);
}

std::span<const double> Tensor::image(std::size_t b) const noexcept {
  const auto n = image_size();
  return std::span<const double>(values_).subspan(b * n, n);
}

Tensor Tensor::slice_images(std::size_t first, std::size_t count) const {
  LOWRANK_REQUIRE(first + count <= shape_.at(0), "image slice out of range");
  auto shape = shape_;
  shape[0] = count;
  const auto n = image_size();
  std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(first * n),
                        values_.begin() + static_cast<std::ptrdiff_t>((first + count) * n));
  return Tensor(std::move(shape), std::move(v));
}

std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!std::ranges::equal(a.shape(), b.shape())) {
    throw ContractViolation(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                            " vs " + shape_string(b.shape()));
  }
}

namespace {

void require_axis(const char* op, const char* axis, std::size_t lhs, std::size_t rhs) {
  if (lhs != rhs) {
    std::ostringstream os;
    os << op << ": mismatched axis " << axis << " (" << lhs << " vs " << rhs << ")";
    throw ContractViolation(os.str());
  }
}

void require_rank4(const char* op, const Tensor& t) {
  if (t.rank() != 4) {
    throw ContractViolation(std::string(op) + ": expected rank-4 operand, got " +
                            shape_string(t.shape()));
  }
}

}  // namespace

Tensor channel_matmul(const Tensor& a, const Tensor& b) {
  require_rank4("channel_matmul", a);
  require_rank4("channel_matmul", b);
  require_axis("channel_matmul", "B", a.dim(0), b.dim(0));
  require_axis("channel_matmul", "C", a.dim(1), b.dim(1));
  require_axis("channel_matmul", "r", a.dim(3), b.dim(2));
  const auto B = a.dim(0), C = a.dim(1), N = a.dim(2), R = a.dim(3), M = b.dim(3);
  Tensor out(Dims4{B, C, N, M});
  parallel_for(B, [&](std::size_t s) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* pa = a.data() + (s * C + c) * N * R;
      const double* pb = b.data() + (s * C + c) * R * M;
      double* po = out.data() + (s * C + c) * N * M;
      for (std::size_t i = 0; i < N; ++i) {
        double* row = po + i * M;
        for (std::size_t k = 0; k < R; ++k) {
          const double aik = pa[i * R + k];
          const double* brow = pb + k * M;
          for (std::size_t j = 0; j < M; ++j) row[j] += aik * brow[j];
        }
      }
    }
  });
  return out;
}

Tensor channel_matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank4("channel_matmul_tn", a);
  require_rank4("channel_matmul_tn", b);
  require_axis("channel_matmul_tn", "B", a.dim(0), b.dim(0));
  require_axis("channel_matmul_tn", "C", a.dim(1), b.dim(1));
  require_axis("channel_matmul_tn", "N", a.dim(2), b.dim(2));
  const auto B = a.dim(0), C = a.dim(1), N = a.dim(2), R = a.dim(3), M = b.dim(3);
  Tensor out(Dims4{B, C, R, M});
  parallel_for(B, [&](std::size_t s) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* pa = a.data() + (s * C + c) * N * R;
      const double* pb = b.data() + (s * C + c) * N * M;
      double* po = out.data() + (s * C + c) * R * M;
      for (std::size_t i = 0; i < N; ++i) {
        const double* brow = pb + i * M;
        for (std::size_t k = 0; k < R; ++k) {
          const double aik = pa[i * R + k];
          double* row = po + k * M;
          for (std::size_t j = 0; j < M; ++j) row[j] += aik * brow[j];
        }
      }
    }
  });
  return out;
}

Tensor channel_matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank4("channel_matmul_nt", a);
  require_rank4("channel_matmul_nt", b);
  require_axis("channel_matmul_nt", "B", a.dim(0), b.dim(0));
  require_axis("channel_matmul_nt", "C", a.dim(1), b.dim(1));
  require_axis("channel_matmul_nt", "M", a.dim(3), b.dim(3));
  const auto B = a.dim(0), C = a.dim(1), N = a.dim(2), M = a.dim(3), R = b.dim(2);
  Tensor out(Dims4{B, C, N, R});
  parallel_for(B, [&](std::size_t s) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* pa = a.data() + (s * C + c) * N * M;
      const double* pb = b.data() + (s * C + c) * R * M;
      double* po = out.data() + (s * C + c) * N * R;
      for (std::size_t i = 0; i < N; ++i) {
        const double* arow = pa + i * M;
        for (std::size_t k = 0; k < R; ++k) {
          const double* brow = pb + k * M;
          double acc = 0.0;
          for (std::size_t j = 0; j < M; ++j) acc += arow[j] * brow[j];
          po[i * R + k] = acc;
        }
      }
    }
  });
  return out;
}

namespace {

double frobenius(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

Normalized normalize_per_image(const Tensor& z) {
  Normalized out{z, DegenerateFlags(z.dim(0), 0)};
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    const double n = frobenius(z.image(b));
    if (n <= kDegenerateNorm) {
      out.degenerate[b] = 1;
      continue;
    }
    for (double& v : out.value.image(b)) v /= n;
  }
  return out;
}

Tensor grad_normalize(const Tensor& z, const Tensor& g_out) {
  require_same_shape(z, g_out, "grad_normalize");
  Tensor out = g_out;
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    const auto zi = z.image(b);
    const double n = frobenius(zi);
    if (n <= kDegenerateNorm) continue;
    const auto gi = g_out.image(b);
    double radial = 0.0;
    for (std::size_t k = 0; k < zi.size(); ++k) radial += gi[k] * zi[k];
    radial /= n;  // <g, z_hat>
    auto oi = out.image(b);
    for (std::size_t k = 0; k < zi.size(); ++k) oi[k] = (gi[k] - radial * zi[k] / n) / n;
  }
  return out;
}

Tensor clamp_box(const Tensor& x, double lo, double hi) {
  LOWRANK_REQUIRE(lo < hi, "clamp_box requires lo < hi");
  Tensor out = x;
  for (double& v : out.values()) v = std::min(std::max(v, lo), hi);
  return out;
}

Tensor clamp_mask(const Tensor& x, double lo, double hi) {
  LOWRANK_REQUIRE(lo < hi, "clamp_mask requires lo < hi");
  Tensor out = x;
  for (double& v : out.values()) v = (v > lo && v < hi) ? 1.0 : 0.0;
  return out;
}

std::vector<double> image_norm(const Tensor& x, NormKind kind) {
  std::vector<double> out(x.dim(0), 0.0);
  switch (kind) {
    case NormKind::kFrobenius:
      for (std::size_t b = 0; b < out.size(); ++b) out[b] = frobenius(x.image(b));
      break;
    case NormKind::kLinf:
      for (std::size_t b = 0; b < out.size(); ++b) {
        for (double v : x.image(b)) out[b] = std::max(out[b], std::abs(v));
      }
      break;
    case NormKind::kNuclear:
      require_rank4("image_norm", x);
      parallel_for(out.size(), [&](std::size_t b) { out[b] = linalg::nuclear_norm(x, b); });
      break;
  }
  return out;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale_images(const Tensor& x, std::span<const double> scale) {
  LOWRANK_REQUIRE(scale.size() == x.dim(0), "scale_images: one scale per image required");
  Tensor out = x;
  for (std::size_t b = 0; b < scale.size(); ++b) {
    for (double& v : out.image(b)) v *= scale[b];
  }
  return out;
}

Dataset Dataset::slice(std::size_t first, std::size_t count) const {
  LOWRANK_REQUIRE(first + count <= labels.size(), "dataset slice out of range");
  return {images.slice_images(first, count),
          Labels(labels.begin() + static_cast<std::ptrdiff_t>(first),
                 labels.begin() + static_cast<std::ptrdiff_t>(first + count))};
}

}  // namespace lowrank
