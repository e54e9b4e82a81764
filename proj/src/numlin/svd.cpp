#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "iclgd/errors.hpp"
#include "iclgd/numlin.hpp"

namespace iclgd {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kEps = std::numeric_limits<double>::epsilon();

// Stable descending order; equal keys keep their original index order.
std::vector<std::size_t> descending_order(const Vector& keys) {
  std::vector<std::size_t> idx(keys.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return keys[a] > keys[b]; });
  return idx;
}

// Fills zero columns of u with unit vectors orthogonal to the others.
void complete_orthonormal(std::vector<Vector>& cols, const std::vector<bool>& filled) {
  const std::size_t m = cols.empty() ? 0 : cols.front().size();
  std::vector<bool> done = filled;
  std::size_t next_basis = 0;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (done[j]) continue;
    while (next_basis < m) {
      Vector cand(m, 0.0);
      cand[next_basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < cols.size(); ++k) {
          if (!done[k]) continue;
          const double proj = dot(cand, cols[k]);
          for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * cols[k][i];
        }
      }
      const double nrm = norm2(cand);
      if (nrm > 0.5) {
        for (double& x : cand) x /= nrm;
        cols[j] = std::move(cand);
        done[j] = true;
        break;
      }
    }
  }
}

// Requires m >= n. Columns of `work` are the columns of a.
SvdFactors jacobi_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<Vector> cols(n);
  for (std::size_t j = 0; j < n; ++j) cols[j] = a.col(j);
  std::vector<Vector> vcols(n, Vector(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) vcols[j][j] = 1.0;

  const double fro2 = std::pow(frobenius_norm(a), 2);
  const double rel_tol = std::max(1e-15, static_cast<double>(m) * kEps);
  const double abs_tol = 1e-13 * fro2;

  bool converged = n < 2 || fro2 == 0.0;
  double residual = 0.0;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    residual = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(cols[p], cols[p]);
        const double beta = dot(cols[q], cols[q]);
        const double gamma = dot(cols[p], cols[q]);
        residual = std::max(residual, std::abs(gamma));
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= rel_tol * std::sqrt(alpha) * std::sqrt(beta) &&
            std::abs(gamma) < abs_tol)
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::abs(zeta) > 1e150
                             ? 1.0 / (2.0 * zeta)
                             : std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = cols[p][i];
          const double xq = cols[q][i];
          cols[p][i] = c * xp - s * xq;
          cols[q][i] = s * xp + c * xq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = vcols[p][i];
          const double xq = vcols[q][i];
          vcols[p][i] = c * xp - s * xq;
          vcols[q][i] = s * xp + c * xq;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw ConvergenceError("svd: no convergence after " + std::to_string(kMaxSweeps) + " sweeps",
                           residual);
  }

  Vector sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = norm2(cols[j]);
  const auto order = descending_order(sigma);

  std::vector<Vector> ucols(n);
  std::vector<bool> filled(n, false);
  SvdFactors f{Matrix(m, n), Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double s = sigma[j];
    f.sigma[k] = s;
    ucols[k] = cols[j];
    if (s > 0.0 && std::isfinite(1.0 / s)) {
      for (double& x : ucols[k]) x /= s;
      filled[k] = true;
    } else {
      f.sigma[k] = 0.0;
      std::fill(ucols[k].begin(), ucols[k].end(), 0.0);
    }
    f.v.set_col(k, vcols[j]);
  }
  complete_orthonormal(ucols, filled);
  for (std::size_t k = 0; k < n; ++k) f.u.set_col(k, ucols[k]);
  return f;
}

}  // namespace

SvdFactors svd(const Matrix& a) {
  if (!a.all_finite()) throw std::invalid_argument("svd: non-finite input");
  if (a.rows() >= a.cols()) return jacobi_tall(a);
  SvdFactors t = jacobi_tall(a.transpose());
  return SvdFactors{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

Matrix truncate(const SvdFactors& f, std::size_t r) {
  if (r < 1 || r > f.sigma.size()) {
    throw std::out_of_range("truncate: rank " + std::to_string(r) + " outside [1, " +
                            std::to_string(f.sigma.size()) + "]");
  }
  const std::size_t m = f.u.rows();
  const std::size_t n = f.v.rows();
  Matrix out(m, n);
  for (std::size_t k = 0; k < r; ++k) {
    const double s = f.sigma[k];
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) {
      const double us = f.u(i, k) * s;
      if (us == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += us * f.v(j, k);
    }
  }
  return out;
}

std::size_t clip_rate_to_rank(double xi, std::size_t m, std::size_t n) {
  if (!(xi >= 0.0 && xi < 1.0)) {
    throw std::invalid_argument("clip_rate_to_rank: xi must lie in [0, 1), got " +
                                std::to_string(xi));
  }
  const std::size_t p = std::min(m, n);
  // The nudge absorbs representation error in decimal rates, e.g. (1 - 0.9) * 20.
  const double kept = std::floor((1.0 - xi) * static_cast<double>(p) + 1e-9);
  return std::max<std::size_t>(1, std::min<std::size_t>(p, static_cast<std::size_t>(kept)));
}

double condition_number_2(const Matrix& a) {
  const SvdFactors f = svd(a);
  if (f.sigma.empty() || f.sigma.front() == 0.0) {
    throw std::invalid_argument("condition_number_2: zero matrix");
  }
  const double smax = f.sigma.front();
  const double smin = f.sigma.back();
  if (smin < kSingularFloor * smax) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

std::size_t numerical_rank(const Matrix& a, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
    throw std::invalid_argument("numerical_rank: rel_tol must lie in (0, 1)");
  }
  if (a.empty()) return 0;
  const SvdFactors f = svd(a);
  if (f.sigma.front() == 0.0) return 0;
  const double cut = rel_tol * f.sigma.front();
  return static_cast<std::size_t>(
      std::count_if(f.sigma.begin(), f.sigma.end(), [&](double s) { return s >= cut; }));
}

SymEig sym_eig(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("sym_eig: matrix not square");
  const std::size_t n = a.rows();
  const double tol = 1e-10 * std::max(1.0, max_abs(a));
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > tol) {
        throw std::invalid_argument("sym_eig: asymmetry " + std::to_string(a(i, j) - a(j, i)) +
                                    " at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      }
      w(i, j) = 0.5 * (a(i, j) + a(j, i));
    }
  Matrix v = Matrix::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += w(i, j) * w(i, j);
    return std::sqrt(s);
  };

  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    if (off_norm() == 0.0) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = w(p, q);
        if (apq == 0.0) continue;
        const double app = w(p, p);
        const double aqq = w(q, q);
        // Below rounding of both diagonal entries: annihilate.
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(app) + g == std::abs(app) && std::abs(aqq) + g == std::abs(aqq)) {
          w(p, q) = w(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = std::abs(theta) > 1e150
                             ? 1.0 / (2.0 * theta)
                             : std::copysign(1.0, theta) / (std::abs(theta) + std::hypot(1.0, theta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double wkp = w(k, p);
          const double wkq = w(k, q);
          w(k, p) = c * wkp - s * wkq;
          w(k, q) = s * wkp + c * wkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double wpk = w(p, k);
          const double wqk = w(q, k);
          w(p, k) = c * wpk - s * wqk;
          w(q, k) = s * wpk + c * wqk;
        }
        w(p, q) = w(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged && off_norm() != 0.0) {
    throw ConvergenceError("sym_eig: no convergence after " + std::to_string(kMaxSweeps) +
                               " sweeps",
                           off_norm());
  }

  Vector diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = w(i, i);
  const auto order = descending_order(diag);
  SymEig out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = diag[order[k]];
    out.vectors.set_col(k, v.col(order[k]));
  }
  return out;
}

double trace_log_pd(const Matrix& c) {
  const SymEig e = sym_eig(c);
  double s = 0.0;
  for (double lambda : e.values) {
    if (!(lambda > 0.0)) {
      throw std::domain_error("trace_log_pd: nonpositive eigenvalue " + std::to_string(lambda));
    }
    s += std::log(lambda);
  }
  return s;
}

}  // namespace iclgd
