#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace lowrank {

/// Budget geometry of a perturbation. Norms are always taken per image,
/// jointly over all channels and pixels.
enum class NormKind : std::uint8_t { kFrobenius = 0, kLinf = 1, kNuclear = 2 };

const char* to_string(NormKind kind) noexcept;
NormKind norm_kind_from_string(const std::string& name);

/// Batch dimensions B x C x N x M (images x channels x rows x cols).
struct Dims4 {
  std::size_t b = 0;
  std::size_t c = 0;
  std::size_t n = 0;
  std::size_t m = 0;

  std::size_t count() const noexcept { return b * c * n * m; }
  std::size_t per_image() const noexcept { return c * n * m; }
  friend bool operator==(const Dims4&, const Dims4&) = default;
};

/// Dense row-major tensor of doubles. Rank-4 tensors are batches laid out as
/// [b][c][row][col]; lower ranks appear as per-image model activations.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);
  explicit Tensor(const Dims4& dims, double fill = 0.0);
  /// Brace-list shapes, e.g. Tensor({2, 3}).
  explicit Tensor(std::initializer_list<std::size_t> shape, double fill = 0.0)
      : Tensor(std::vector<std::size_t>(shape), fill) {}

  std::span<const std::size_t> shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  /// Requires rank 4.
  Dims4 dims4() const;

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  double& at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) noexcept {
    return values_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  double at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const noexcept {
    return values_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  /// Number of elements per leading-axis entry.
  std::size_t image_size() const noexcept;
  std::span<double> image(std::size_t b) noexcept;
  std::span<const double> image(std::size_t b) const noexcept;

  /// Copy of images [first, first + count) as a new tensor.
  Tensor slice_images(std::size_t first, std::size_t count) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::string shape_string(std::span<const std::size_t> shape);

/// Per-image flag set when a vector was too small to normalize.
using DegenerateFlags = std::vector<std::uint8_t>;

/// Threshold below which an image counts as the zero vector.
inline constexpr double kDegenerateNorm = 1e-12;

/// out[b,c] = a[b,c] * b[b,c] for every image and channel.
/// a: B x C x N x r, b: B x C x r x M.
Tensor channel_matmul(const Tensor& a, const Tensor& b);
/// out[b,c] = a[b,c]^T * b[b,c]. a: B x C x N x r, b: B x C x N x M.
Tensor channel_matmul_tn(const Tensor& a, const Tensor& b);
/// out[b,c] = a[b,c] * b[b,c]^T. a: B x C x N x M, b: B x C x r x M.
Tensor channel_matmul_nt(const Tensor& a, const Tensor& b);

struct Normalized {
  Tensor value;
  DegenerateFlags degenerate;
};

/// Divides each image by its Frobenius norm. Images with norm <= 1e-12 are
/// returned unchanged and flagged.
Normalized normalize_per_image(const Tensor& z);

/// Vector-Jacobian product of normalize_per_image at z. Identity on
/// degenerate images.
Tensor grad_normalize(const Tensor& z, const Tensor& g_out);

Tensor clamp_box(const Tensor& x, double lo, double hi);

/// 1 where lo < x < hi strictly, 0 elsewhere (the clamp subgradient).
Tensor clamp_mask(const Tensor& x, double lo, double hi);

/// One norm value per image.
std::vector<double> image_norm(const Tensor& x, NormKind kind);

// Elementwise helpers used throughout the attack code.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);

/// Multiplies image b by scale[b].
Tensor scale_images(const Tensor& x, std::span<const double> scale);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Class indices, one per image.
using Labels = std::vector<std::uint32_t>;

/// Images (B x C x N x M, pixels in [0,1]) with their labels.
struct Dataset {
  Tensor images;
  Labels labels;

  std::size_t size() const noexcept { return labels.size(); }
  Dataset slice(std::size_t first, std::size_t count) const;
};

}  // namespace lowrank
