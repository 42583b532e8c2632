#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lowrank/error.hpp"
#include "lowrank/linalg.hpp"
#include "support.hpp"

using namespace lowrank;
using namespace lowrank::linalg;
using lowrank::tu::random_matrix;
using lowrank::tu::random_tensor;

namespace {

// Classical cyclic Jacobi for symmetric matrices; eigenvalues only.
std::vector<double> symmetric_eigenvalues(Matrix a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::ranges::sort(ev, std::greater<>());
  return ev;
}

double max_offdiag_gram(const Matrix& cols_matrix) {
  const Matrix g = matmul(cols_matrix.transposed(), cols_matrix);
  double worst = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j)
      worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

Matrix reconstruct(const SvdResult& s) {
  Matrix us = s.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= s.sigma[k];
  return matmul(us, s.vt);
}

double diff_frobenius(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

void expect_valid_svd(const Matrix& a, const SvdResult& s) {
  const std::size_t k = std::min(a.rows(), a.cols());
  ASSERT_EQ(s.sigma.size(), k);
  EXPECT_LE(diff_frobenius(reconstruct(s), a), 1e-10 * std::max(1.0, a.frobenius()));
  EXPECT_LE(max_offdiag_gram(s.u), 1e-10);
  EXPECT_LE(max_offdiag_gram(s.vt.transposed()), 1e-10);
  for (std::size_t j = 0; j < k; ++j) {
    EXPECT_GE(s.sigma[j], 0.0);
    if (j + 1 < k) EXPECT_GE(s.sigma[j], s.sigma[j + 1]);
  }
}

Tensor diag_tensor(std::vector<double> d) {
  const std::size_t n = d.size();
  Tensor t({1, n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = d[i];
  return t;
}

}  // namespace

TEST(Svd, Diagonal) {
  const auto s = svd(Matrix(2, 2, {3.0, 0.0, 0.0, 1.0}));
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 1.0, 1e-14);
}

TEST(Svd, Permutation) {
  const auto s = svd(Matrix(2, 2, {0.0, 1.0, 1.0, 0.0}));
  EXPECT_NEAR(s.sigma[0], 1.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 1.0, 1e-14);
}

TEST(Svd, MatchesEigenOracle) {
  const Matrix a = random_matrix(5, 7, 21);
  const auto s = svd(a);
  const auto ev = symmetric_eigenvalues(matmul(a, a.transposed()));
  for (std::size_t j = 0; j < 5; ++j) EXPECT_LE(tu::rel_err(s.sigma[j], std::sqrt(ev[j])), 1e-9);
}

TEST(Svd, BothMethodsAgree) {
  for (auto [r, c] : {std::pair{6, 4}, {4, 6}, {40, 36}, {9, 9}}) {
    const Matrix a = random_matrix(r, c, 100 + r * c);
    const auto j = svd(a, SvdMethod::kJacobi);
    const auto g = svd(a, SvdMethod::kGolubKahan);
    expect_valid_svd(a, j);
    expect_valid_svd(a, g);
    for (std::size_t k = 0; k < j.sigma.size(); ++k) EXPECT_LE(tu::rel_err(j.sigma[k], g.sigma[k]), 1e-10);
  }
}

TEST(Svd, RandomShapesProperty) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 150; ++t) {
    const std::size_t r = 1 + rng() % 32, c = 1 + rng() % 32;
    const Matrix a = random_matrix(r, c, 500 + t);
    SCOPED_TRACE(std::to_string(r) + "x" + std::to_string(c));
    expect_valid_svd(a, svd(a));
  }
}

TEST(Svd, RankDeficientKeepsOrthonormalBasis) {
  // rank 2 in 6x5
  const Matrix a = matmul(random_matrix(6, 2, 31), random_matrix(2, 5, 32));
  const auto s = svd(a);
  expect_valid_svd(a, s);
  for (std::size_t j = 2; j < 5; ++j) EXPECT_LE(s.sigma[j], 1e-12 * s.sigma[0]);
  const auto z = svd(Matrix(3, 4));
  expect_valid_svd(Matrix(3, 4), z);
}

TEST(Svd, LargeMatrixUsesGolubKahan) {
  const Matrix a = random_matrix(48, 40, 41);
  expect_valid_svd(a, svd(a));
}

TEST(Svd, SignConventionAndDeterminism) {
  const Matrix a = random_matrix(7, 6, 51);
  const auto s1 = svd(a), s2 = svd(a);
  EXPECT_EQ(s1.u, s2.u);
  EXPECT_EQ(s1.sigma, s2.sigma);
  for (std::size_t k = 0; k < s1.u.cols(); ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < s1.u.rows(); ++i)
      if (std::abs(s1.u(i, k)) > std::abs(s1.u(best, k))) best = i;
    EXPECT_GE(s1.u(best, k), 0.0);
  }
}

TEST(Svd, RejectsNonFinite) {
  Matrix a(2, 2, 1.0);
  a(1, 0) = std::nan("");
  EXPECT_THROW(svd(a), ContractViolation);
}

TEST(NuclearNorm, RankOneReplicated) {
  const std::vector<double> u{1.0, 2.0, 2.0}, v{3.0, 4.0};
  Tensor x({3, 3, 2});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) x[(c * 3 + i) * 2 + j] = u[i] * v[j];
  EXPECT_NEAR(nuclear_norm(x), 3.0 * 5.0, 1e-12);
}

TEST(NuclearNorm, Diagonal) { EXPECT_NEAR(nuclear_norm(diag_tensor({3, 2, 1})), 6.0, 1e-12); }

TEST(NuclearNorm, ChannelAverageOfSingularValues) {
  const Tensor x = random_tensor({3, 8, 8}, 61);
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto sig = svd(channel(x, c)).sigma;
    s += std::accumulate(sig.begin(), sig.end(), 0.0);
  }
  EXPECT_NEAR(nuclear_norm(x), s / 3.0, 1e-10);
}

TEST(NuclearNorm, HomogeneityAndTriangle) {
  for (int t = 0; t < 20; ++t) {
    const Tensor a = random_tensor({2, 6, 5}, 70 + t), b = random_tensor({2, 6, 5}, 170 + t);
    const double alpha = -2.5 + 0.3 * t;
    EXPECT_NEAR(nuclear_norm(alpha * a), std::abs(alpha) * nuclear_norm(a), 1e-10 * (1 + std::abs(alpha)));
    EXPECT_LE(nuclear_norm(a + b), nuclear_norm(a) + nuclear_norm(b) + 1e-12);
  }
  EXPECT_EQ(nuclear_norm(Tensor({2, 3, 3})), 0.0);
}

TEST(TruncateRank, FullRankIsIdentity) {
  const Tensor x = random_tensor({2, 5, 7}, 81);
  EXPECT_LE(tu::max_abs_diff(truncate_rank(x, 5), x), 1e-12);
}

TEST(TruncateRank, DiagonalDropsTail) {
  const Tensor out = truncate_rank(diag_tensor({3, 2, 1}), 2);
  EXPECT_LE(tu::max_abs_diff(out, diag_tensor({3, 2, 0})), 1e-12);
}

TEST(TruncateRank, TailEnergyIdentity) {
  const Tensor x = random_tensor({1, 8, 8}, 91);
  const auto sig = svd(channel(x, 0)).sigma;
  double tail = 0.0;
  for (std::size_t j = 3; j < 8; ++j) tail += sig[j] * sig[j];
  const Tensor t = truncate_rank(x, 3);
  EXPECT_NEAR(tu::frobenius((x - t).values()), std::sqrt(tail), 1e-10);
}

TEST(TruncateRank, RangeChecked) {
  const Tensor x = random_tensor({1, 4, 3}, 92);
  EXPECT_THROW(truncate_rank(x, 0), ContractViolation);
  EXPECT_THROW(truncate_rank(x, 4), ContractViolation);
  EXPECT_THROW(factor_split(x, 4), ContractViolation);
}

TEST(TruncateRank, EckartYoungSpotCheck) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  const Tensor x = random_tensor({1, 4, 4}, 93);
  const Tensor best = truncate_rank(x, 1);
  const double best_err = tu::frobenius((x - best).values());
  const double target = tu::frobenius(best.values());
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(4), b(4);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    Tensor cand({1, 4, 4});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) cand[i * 4 + j] = a[i] * b[j];
    cand = (target / tu::frobenius(cand.values())) * cand;
    EXPECT_LE(best_err, tu::frobenius((x - cand).values()) + 1e-12);
  }
}

TEST(FactorSplit, RankOneReconstructs) {
  Tensor x(Dims4{1, 1, 3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) x[i * 4 + j] = (i + 1.0) * (0.5 - j);
  const auto [u, v] = factor_split(x, 1);
  EXPECT_LE(tu::max_abs_diff(channel_matmul(u, v), x), 1e-10);
}

TEST(FactorSplit, LosslessAtFullRank) {
  const Tensor x = random_tensor({1, 2, 5, 5}, 94);
  const auto [u, v] = factor_split(x, 5);
  const Tensor p = channel_matmul(u, v);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(p[i], x[i], 1e-9);
}

TEST(FactorSplit, BalancedFactors) {
  const Tensor x = random_tensor({3, 6, 9}, 95);
  const auto [u, v] = factor_split(x, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    double nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < 6 * 2; ++i) nu += u[c * 12 + i] * u[c * 12 + i];
    for (std::size_t i = 0; i < 2 * 9; ++i) nv += v[c * 18 + i] * v[c * 18 + i];
    EXPECT_NEAR(std::sqrt(nu), std::sqrt(nv), 1e-9);
  }
}

TEST(FactorSplit, EqualsTruncationForEveryRank) {
  const Tensor x = random_tensor({2, 2, 6, 7}, 96);
  for (std::size_t r = 1; r <= 6; ++r) {
    const auto [u, v] = factor_split(x, r);
    EXPECT_LE(tu::max_abs_diff(channel_matmul(u, v), truncate_rank(x, r)), 1e-9) << "r=" << r;
  }
}

TEST(SingularSpectrum, ZeroAndIdentity) {
  const Matrix z = singular_spectrum(Tensor({2, 3, 3}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  const Matrix e = singular_spectrum(diag_tensor({1, 1, 1, 1}));
  for (double v : e.values()) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(SingularSpectrum, RowsSortedAndSumToNuclear) {
  const Tensor x = random_tensor({3, 5, 8}, 97);
  const Matrix s = singular_spectrum(x);
  ASSERT_EQ(s.rows(), 3u);
  ASSERT_EQ(s.cols(), 5u);
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 5; ++j) {
      total += s(c, j);
      if (j + 1 < 5) EXPECT_GE(s(c, j), s(c, j + 1));
    }
  EXPECT_NEAR(total, 3.0 * nuclear_norm(x), 1e-10);
}
