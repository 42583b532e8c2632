#include "lowrank/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lowrank/error.hpp"
#include "lowrank/parallel.hpp"

namespace lowrank::linalg {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  LOWRANK_REQUIRE(values_.size() == rows * cols, "matrix value count does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

Matrix Matrix::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) out(j, i) = (*this)(i, j);
  return out;
}

double Matrix::frobenius() const noexcept {
  double acc = 0.0;
  for (double v : values_) acc += v * v;
  return std::sqrt(acc);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  LOWRANK_REQUIRE(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

// Column-major scratch matrix for the column-oriented sweeps.
struct Columns {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Columns(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double* col(std::size_t j) { return v.data() + j * rows; }
  const double* col(std::size_t j) const { return v.data() + j * rows; }
  double& operator()(std::size_t i, std::size_t j) { return v[j * rows + i]; }
  double operator()(std::size_t i, std::size_t j) const { return v[j * rows + i]; }
};

// Replaces column j of q by a unit vector orthogonal to every column flagged
// in `valid`, using classical Gram-Schmidt (twice) on standard basis vectors.
void complete_column(Columns& q, std::size_t j, const std::vector<bool>& valid) {
  std::vector<double> cand(q.rows);
  for (std::size_t e = 0; e < q.rows; ++e) {
    std::fill(cand.begin(), cand.end(), 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < q.cols; ++k) {
        if (k == j || !valid[k]) continue;
        const double* qk = q.col(k);
        double d = 0.0;
        for (std::size_t i = 0; i < q.rows; ++i) d += qk[i] * cand[i];
        for (std::size_t i = 0; i < q.rows; ++i) cand[i] -= d * qk[i];
      }
    }
    double n = 0.0;
    for (double c : cand) n += c * c;
    n = std::sqrt(n);
    if (n > 0.5) {
      double* qj = q.col(j);
      for (std::size_t i = 0; i < q.rows; ++i) qj[i] = cand[i] / n;
      return;
    }
  }
}

// Hestenes one-sided Jacobi on a tall matrix (rows >= cols).
SvdResult jacobi_tall(const Matrix& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Columns w(n, m), v(m, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) w(i, j) = a(i, j);
  for (std::size_t j = 0; j < m; ++j) v(j, j) = 1.0;

  const double tol = static_cast<double>(n) * kEps;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        double* wp = w.col(p);
        double* wq = w.col(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = wp[i], xq = wq[i];
          wp[i] = c * xp - s * xq;
          wq[i] = s * xp + c * xq;
        }
        double* vp = v.col(p);
        double* vq = v.col(q);
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = vp[i], xq = vq[i];
          vp[i] = c * xp - s * xq;
          vq[i] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(m);
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    const double* wj = w.col(j);
    for (std::size_t i = 0; i < n; ++i) acc += wj[i] * wj[i];
    sigma[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = m ? sigma[order[0]] : 0.0;
  const double floor = smax * 1e-13;
  Columns u(n, m);
  std::vector<bool> valid(m, false);
  SvdResult out{Matrix(n, m), std::vector<double>(m), Matrix(m, m)};
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sigma[j];
    if (sigma[j] > floor && sigma[j] > 0.0) {
      for (std::size_t i = 0; i < n; ++i) u(i, k) = w(i, j) / sigma[j];
      valid[k] = true;
    }
    for (std::size_t i = 0; i < m; ++i) out.vt(k, i) = v(i, j);
  }
  for (std::size_t k = 0; k < m; ++k) {
    if (!valid[k]) {
      complete_column(u, k, valid);
      valid[k] = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) out.u(i, k) = u(i, k);
  return out;
}

// Householder bidiagonalization followed by implicit-shift QR on the
// bidiagonal (Golub-Kahan-Reinsch). Requires rows >= cols.
SvdResult golub_kahan_tall(const Matrix& input) {
  const int m = static_cast<int>(input.rows());
  const int n = static_cast<int>(input.cols());
  Columns a(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = input(i, j);

  const int nu = std::min(m, n);
  std::vector<double> s(std::min(m + 1, n), 0.0), e(n, 0.0), work(m, 0.0);
  Columns u(m, nu), v(n, n);

  const int nct = std::min(m - 1, n);
  const int nrt = std::max(0, std::min(n - 2, m));
  for (int k = 0; k < std::max(nct, nrt); ++k) {
    if (k < nct) {
      s[k] = 0;
      for (int i = k; i < m; ++i) s[k] = std::hypot(s[k], a(i, k));
      if (s[k] != 0.0) {
        if (a(k, k) < 0.0) s[k] = -s[k];
        for (int i = k; i < m; ++i) a(i, k) /= s[k];
        a(k, k) += 1.0;
      }
      s[k] = -s[k];
    }
    for (int j = k + 1; j < n; ++j) {
      if (k < nct && s[k] != 0.0) {
        double t = 0;
        for (int i = k; i < m; ++i) t += a(i, k) * a(i, j);
        t = -t / a(k, k);
        for (int i = k; i < m; ++i) a(i, j) += t * a(i, k);
      }
      e[j] = a(k, j);
    }
    if (k < nct) {
      for (int i = k; i < m; ++i) u(i, k) = a(i, k);
    }
    if (k < nrt) {
      e[k] = 0;
      for (int i = k + 1; i < n; ++i) e[k] = std::hypot(e[k], e[i]);
      if (e[k] != 0.0) {
        if (e[k + 1] < 0.0) e[k] = -e[k];
        for (int i = k + 1; i < n; ++i) e[i] /= e[k];
        e[k + 1] += 1.0;
      }
      e[k] = -e[k];
      if (k + 1 < m && e[k] != 0.0) {
        for (int i = k + 1; i < m; ++i) work[i] = 0.0;
        for (int j = k + 1; j < n; ++j)
          for (int i = k + 1; i < m; ++i) work[i] += e[j] * a(i, j);
        for (int j = k + 1; j < n; ++j) {
          const double t = -e[j] / e[k + 1];
          for (int i = k + 1; i < m; ++i) a(i, j) += t * work[i];
        }
      }
      for (int i = k + 1; i < n; ++i) v(i, k) = e[i];
    }
  }

  int p = std::min(n, m + 1);
  if (nct < n) s[nct] = a(nct, nct);
  if (m < p) s[p - 1] = 0.0;
  if (nrt + 1 < p) e[nrt] = a(nrt, p - 1);
  e[p - 1] = 0.0;

  for (int j = nct; j < nu; ++j) {
    for (int i = 0; i < m; ++i) u(i, j) = 0.0;
    u(j, j) = 1.0;
  }
  for (int k = nct - 1; k >= 0; --k) {
    if (s[k] != 0.0) {
      for (int j = k + 1; j < nu; ++j) {
        double t = 0;
        for (int i = k; i < m; ++i) t += u(i, k) * u(i, j);
        t = -t / u(k, k);
        for (int i = k; i < m; ++i) u(i, j) += t * u(i, k);
      }
      for (int i = k; i < m; ++i) u(i, k) = -u(i, k);
      u(k, k) = 1.0 + u(k, k);
      for (int i = 0; i < k - 1; ++i) u(i, k) = 0.0;
    } else {
      for (int i = 0; i < m; ++i) u(i, k) = 0.0;
      u(k, k) = 1.0;
    }
  }
  for (int k = n - 1; k >= 0; --k) {
    if (k < nrt && e[k] != 0.0) {
      for (int j = k + 1; j < nu; ++j) {
        double t = 0;
        for (int i = k + 1; i < n; ++i) t += v(i, k) * v(i, j);
        t = -t / v(k + 1, k);
        for (int i = k + 1; i < n; ++i) v(i, j) += t * v(i, k);
      }
    }
    for (int i = 0; i < n; ++i) v(i, k) = 0.0;
    v(k, k) = 1.0;
  }

  const int pp = p - 1;
  const double tiny = std::pow(2.0, -966.0);
  int iter = 0;
  const int max_iter = kMaxSweeps * std::max(1, n);
  while (p > 0) {
    int k, kase;
    for (k = p - 2; k >= -1; --k) {
      if (k == -1) break;
      if (std::abs(e[k]) <= tiny + kEps * (std::abs(s[k]) + std::abs(s[k + 1]))) {
        e[k] = 0.0;
        break;
      }
    }
    if (k == p - 2) {
      kase = 4;
    } else {
      int ks;
      for (ks = p - 1; ks >= k; --ks) {
        if (ks == k) break;
        const double t = (ks != p ? std::abs(e[ks]) : 0.0) + (ks != k + 1 ? std::abs(e[ks - 1]) : 0.0);
        if (std::abs(s[ks]) <= tiny + kEps * t) {
          s[ks] = 0.0;
          break;
        }
      }
      if (ks == k) {
        kase = 3;
      } else if (ks == p - 1) {
        kase = 1;
      } else {
        kase = 2;
        k = ks;
      }
    }
    ++k;

    switch (kase) {
      case 1: {  // deflate negligible s[p-1]
        double f = e[p - 2];
        e[p - 2] = 0.0;
        for (int j = p - 2; j >= k; --j) {
          double t = std::hypot(s[j], f);
          const double cs = s[j] / t, sn = f / t;
          s[j] = t;
          if (j != k) {
            f = -sn * e[j - 1];
            e[j - 1] = cs * e[j - 1];
          }
          for (int i = 0; i < n; ++i) {
            t = cs * v(i, j) + sn * v(i, p - 1);
            v(i, p - 1) = -sn * v(i, j) + cs * v(i, p - 1);
            v(i, j) = t;
          }
        }
      } break;
      case 2: {  // split at negligible s[k-1]
        double f = e[k - 1];
        e[k - 1] = 0.0;
        for (int j = k; j < p; ++j) {
          double t = std::hypot(s[j], f);
          const double cs = s[j] / t, sn = f / t;
          s[j] = t;
          f = -sn * e[j];
          e[j] = cs * e[j];
          for (int i = 0; i < m; ++i) {
            t = cs * u(i, j) + sn * u(i, k - 1);
            u(i, k - 1) = -sn * u(i, j) + cs * u(i, k - 1);
            u(i, j) = t;
          }
        }
      } break;
      case 3: {  // one implicit-shift QR step
        const double scale = std::max({std::abs(s[p - 1]), std::abs(s[p - 2]), std::abs(e[p - 2]),
                                       std::abs(s[k]), std::abs(e[k])});
        const double sp = s[p - 1] / scale, spm1 = s[p - 2] / scale, epm1 = e[p - 2] / scale;
        const double sk = s[k] / scale, ek = e[k] / scale;
        const double b = ((spm1 + sp) * (spm1 - sp) + epm1 * epm1) / 2.0;
        const double c = (sp * epm1) * (sp * epm1);
        double shift = 0.0;
        if (b != 0.0 || c != 0.0) {
          shift = std::sqrt(b * b + c);
          if (b < 0.0) shift = -shift;
          shift = c / (b + shift);
        }
        double f = (sk + sp) * (sk - sp) + shift;
        double g = sk * ek;
        for (int j = k; j < p - 1; ++j) {
          double t = std::hypot(f, g);
          double cs = f / t, sn = g / t;
          if (j != k) e[j - 1] = t;
          f = cs * s[j] + sn * e[j];
          e[j] = cs * e[j] - sn * s[j];
          g = sn * s[j + 1];
          s[j + 1] = cs * s[j + 1];
          for (int i = 0; i < n; ++i) {
            t = cs * v(i, j) + sn * v(i, j + 1);
            v(i, j + 1) = -sn * v(i, j) + cs * v(i, j + 1);
            v(i, j) = t;
          }
          t = std::hypot(f, g);
          cs = f / t;
          sn = g / t;
          s[j] = t;
          f = cs * e[j] + sn * s[j + 1];
          s[j + 1] = -sn * e[j] + cs * s[j + 1];
          g = sn * e[j + 1];
          e[j + 1] = cs * e[j + 1];
          if (j < m - 1) {
            for (int i = 0; i < m; ++i) {
              t = cs * u(i, j) + sn * u(i, j + 1);
              u(i, j + 1) = -sn * u(i, j) + cs * u(i, j + 1);
              u(i, j) = t;
            }
          }
        }
        e[p - 2] = f;
        if (++iter > max_iter) {
          // Give up on this block; the residual stays in e[p-2].
          e[p - 2] = 0.0;
        }
      } break;
      case 4: {  // converged: make positive and order
        if (s[k] <= 0.0) {
          s[k] = s[k] < 0.0 ? -s[k] : 0.0;
          for (int i = 0; i <= pp; ++i) v(i, k) = -v(i, k);
        }
        while (k < pp) {
          if (s[k] >= s[k + 1]) break;
          std::swap(s[k], s[k + 1]);
          if (k < n - 1)
            for (int i = 0; i < n; ++i) std::swap(v(i, k + 1), v(i, k));
          if (k < m - 1)
            for (int i = 0; i < m; ++i) std::swap(u(i, k + 1), u(i, k));
          ++k;
        }
        iter = 0;
        --p;
      } break;
    }
  }

  SvdResult out{Matrix(static_cast<std::size_t>(m), static_cast<std::size_t>(nu)),
                std::vector<double>(s.begin(), s.begin() + nu),
                Matrix(static_cast<std::size_t>(nu), static_cast<std::size_t>(n))};
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nu; ++j) out.u(i, j) = u(i, j);
  for (int j = 0; j < nu; ++j)
    for (int i = 0; i < n; ++i) out.vt(j, i) = v(i, j);
  return out;
}

// First entry of largest magnitude in every left singular vector made >= 0.
void fix_signs(SvdResult& r) {
  const std::size_t k = r.sigma.size();
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t i = 0; i < r.u.rows(); ++i) {
      if (std::abs(r.u(i, j)) > best_abs) {
        best_abs = std::abs(r.u(i, j));
        best = i;
      }
    }
    if (r.u(best, j) < 0.0) {
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, j) = -r.u(i, j);
      for (std::size_t i = 0; i < r.vt.cols(); ++i) r.vt(j, i) = -r.vt(j, i);
    }
  }
}

}  // namespace

SvdResult svd(const Matrix& a, SvdMethod method) {
  LOWRANK_REQUIRE(a.rows() >= 1 && a.cols() >= 1, "svd: matrix must be non-empty");
  for (double v : a.values()) LOWRANK_REQUIRE(std::isfinite(v), "svd: non-finite input");

  const bool wide = a.cols() > a.rows();
  const Matrix tall = wide ? a.transposed() : a;
  if (method == SvdMethod::kAuto) {
    method = tall.cols() <= kJacobiMaxColumns ? SvdMethod::kJacobi : SvdMethod::kGolubKahan;
  }
  SvdResult r = method == SvdMethod::kJacobi ? jacobi_tall(tall) : golub_kahan_tall(tall);
  if (wide) {
    // svd(a^T) = U S V^T  =>  a = V S U^T
    SvdResult flipped{r.vt.transposed(), std::move(r.sigma), r.u.transposed()};
    r = std::move(flipped);
  }
  fix_signs(r);
  return r;
}

Matrix channel(const Tensor& x, std::size_t c) {
  LOWRANK_REQUIRE(x.rank() == 3, "channel: expected a C x N x M tensor");
  const std::size_t n = x.dim(1), m = x.dim(2);
  const auto first = x.values().begin() + static_cast<std::ptrdiff_t>(c * n * m);
  return Matrix(n, m, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n * m)));
}

Matrix channel(const Tensor& x, std::size_t b, std::size_t c) {
  LOWRANK_REQUIRE(x.rank() == 4, "channel: expected a B x C x N x M tensor");
  const std::size_t n = x.dim(2), m = x.dim(3);
  const auto first =
      x.values().begin() + static_cast<std::ptrdiff_t>((b * x.dim(1) + c) * n * m);
  return Matrix(n, m, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n * m)));
}

void set_channel(Tensor& x, std::size_t b, std::size_t c, const Matrix& mat) {
  LOWRANK_REQUIRE(x.rank() == 4 && mat.rows() == x.dim(2) && mat.cols() == x.dim(3),
                  "set_channel: shape mismatch");
  std::ranges::copy(mat.values(), x.values().begin() +
                                      static_cast<std::ptrdiff_t>((b * x.dim(1) + c) * mat.values().size()));
}

namespace {

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// View any C x N x M or B x C x N x M tensor as a batch.
Tensor as_batch(const Tensor& x) {
  if (x.rank() == 4) return x;
  LOWRANK_REQUIRE(x.rank() == 3, "expected a C x N x M or B x C x N x M tensor");
  return Tensor({1, x.dim(0), x.dim(1), x.dim(2)},
                std::vector<double>(x.values().begin(), x.values().end()));
}

Tensor drop_batch_axis(const Tensor& x) {
  std::vector<std::size_t> shape(x.shape().begin() + 1, x.shape().end());
  return Tensor(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
}

}  // namespace

double nuclear_norm(const Tensor& x) {
  LOWRANK_REQUIRE(x.rank() == 3, "nuclear_norm: expected a C x N x M tensor");
  double acc = 0.0;
  for (std::size_t c = 0; c < x.dim(0); ++c) acc += sum(svd(channel(x, c)).sigma);
  return acc / static_cast<double>(x.dim(0));
}

double nuclear_norm(const Tensor& batch, std::size_t b) {
  LOWRANK_REQUIRE(batch.rank() == 4, "nuclear_norm: expected a batch");
  double acc = 0.0;
  for (std::size_t c = 0; c < batch.dim(1); ++c) acc += sum(svd(channel(batch, b, c)).sigma);
  return acc / static_cast<double>(batch.dim(1));
}

Tensor truncate_rank(const Tensor& x, std::size_t r) {
  Tensor batch = as_batch(x);
  const auto d = batch.dims4();
  LOWRANK_REQUIRE(r >= 1 && r <= std::min(d.n, d.m), "truncate_rank: rank out of range");
  Tensor out(d);
  parallel_for(d.b, [&](std::size_t b) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto s = svd(channel(batch, b, c));
      Matrix approx(d.n, d.m);
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t i = 0; i < d.n; ++i) {
          const double uk = s.u(i, k) * s.sigma[k];
          for (std::size_t j = 0; j < d.m; ++j) approx(i, j) += uk * s.vt(k, j);
        }
      set_channel(out, b, c, approx);
    }
  });
  return x.rank() == 4 ? out : drop_batch_axis(out);
}

std::pair<Tensor, Tensor> factor_split(const Tensor& x, std::size_t r) {
  Tensor batch = as_batch(x);
  const auto d = batch.dims4();
  LOWRANK_REQUIRE(r >= 1 && r <= std::min(d.n, d.m), "factor_split: rank out of range");
  Tensor u(Dims4{d.b, d.c, d.n, r}), v(Dims4{d.b, d.c, r, d.m});
  parallel_for(d.b, [&](std::size_t b) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto s = svd(channel(batch, b, c));
      for (std::size_t k = 0; k < r; ++k) {
        const double root = std::sqrt(s.sigma[k]);
        for (std::size_t i = 0; i < d.n; ++i) u.at(b, c, i, k) = s.u(i, k) * root;
        for (std::size_t j = 0; j < d.m; ++j) v.at(b, c, k, j) = root * s.vt(k, j);
      }
    }
  });
  if (x.rank() == 4) return {std::move(u), std::move(v)};
  return {drop_batch_axis(u), drop_batch_axis(v)};
}

Matrix singular_spectrum(const Tensor& x) {
  LOWRANK_REQUIRE(x.rank() == 3, "singular_spectrum: expected a C x N x M tensor");
  const std::size_t k = std::min(x.dim(1), x.dim(2));
  Matrix out(x.dim(0), k);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    const auto s = svd(channel(x, c));
    for (std::size_t j = 0; j < k; ++j) out(c, j) = s.sigma[j];
  }
  return out;
}

}  // namespace lowrank::linalg
