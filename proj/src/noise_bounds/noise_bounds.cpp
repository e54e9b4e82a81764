#include "iclgd/noise_bounds.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "iclgd/errors.hpp"
#include "iclgd/io.hpp"

namespace iclgd {

NoiseCovariance noise_covariance(const GradientNoiseModel& m) {
  const std::size_t n = m.n_threshold;
  if (n < 2) throw std::invalid_argument("noise_covariance: n_threshold must be >= 2");
  if (m.b < 1 || m.b > n) throw std::invalid_argument("noise_covariance: need 1 <= b <= N");
  if (m.per_example_grads.size() != n) {
    throw DimensionError("noise_covariance: expected N per-example gradients");
  }
  const std::size_t d = m.per_example_grads.front().size();
  Vector mean(d, 0.0);
  for (const Vector& g : m.per_example_grads) {
    if (g.size() != d) throw DimensionError("noise_covariance: gradient lengths differ");
    for (std::size_t i = 0; i < d; ++i) mean[i] += g[i];
  }
  for (double& x : mean) x /= static_cast<double>(n);

  // (1/N) Σ g gᵀ - Ḡ Ḡᵀ accumulated in centered form, which is symmetric and
  // PSD up to rounding.
  Matrix c(d, d);
  Vector centered(d);
  for (const Vector& g : m.per_example_grads) {
    for (std::size_t i = 0; i < d; ++i) centered[i] = g[i] - mean[i];
    for (std::size_t i = 0; i < d; ++i) {
      if (centered[i] == 0.0) continue;
      for (std::size_t j = i; j < d; ++j) c(i, j) += centered[i] * centered[j];
    }
  }
  const double coef = static_cast<double>(n - m.b) /
                      (static_cast<double>(m.b) * static_cast<double>(n - 1)) /
                      static_cast<double>(n);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      c(i, j) *= coef;
      c(j, i) = c(i, j);
    }
  return NoiseCovariance{std::move(c), 0.0};
}

NoiseCovariance regularize(const NoiseCovariance& c) {
  const std::size_t d = c.c.rows();
  if (d == 0) throw std::invalid_argument("regularize: empty covariance");
  const double eps = 1e-8 * (1.0 + trace(c.c) / static_cast<double>(d));
  NoiseCovariance out{c.c, c.regularization_eps + eps};
  for (std::size_t i = 0; i < d; ++i) out.c(i, i) += eps;
  return out;
}

Vector flatten(const Matrix& a) {
  Vector v;
  v.reserve(a.size());
  for (std::size_t j = 0; j < a.cols(); ++j)
    for (std::size_t i = 0; i < a.rows(); ++i) v.push_back(a(i, j));
  return v;
}

std::vector<Vector> per_example_grads_from_trajectory(const TrajectoryRecord& tr, std::size_t t) {
  if (t >= tr.layers.size()) throw std::out_of_range("per_example_grads: layer out of range");
  const Matrix cum = tr.cumulative(t);
  const double n = static_cast<double>(tr.num_demos);
  std::vector<Vector> grads;
  grads.reserve(tr.num_demos);
  for (const Matrix& contrib : tr.layers[t].contributions) grads.push_back(flatten(n * (contrib * cum)));
  return grads;
}

double bound_term(const Matrix& delta_w_t, const Matrix& cumulative, const NoiseCovariance& c,
                  std::size_t d) {
  if (c.c.rows() != d || c.c.cols() != d) {
    throw DimensionError("bound_term: covariance is not d x d");
  }
  const double dw = frobenius_norm(delta_w_t);
  const double cum = frobenius_norm(cumulative);
  const double arg = (dw * dw * cum * cum + trace(c.c)) / static_cast<double>(d);
  if (!(arg > 0.0)) throw std::domain_error("bound_term: nonpositive log argument");
  return static_cast<double>(d) * std::log(arg) - trace_log_pd(c.c);
}

BoundReport assemble_bound(std::vector<LayerBoundTerms> layers, double r, std::size_t n) {
  if (!(r > 0.0)) throw std::invalid_argument("generalization_bound: R must be positive");
  if (n < 1) throw std::invalid_argument("generalization_bound: n must be >= 1");
  BoundReport rep;
  rep.r_subgaussian = r;
  rep.n = n;
  double magnitude = 0.0;
  for (const LayerBoundTerms& l : layers) {
    if (!std::isfinite(l.term)) throw std::domain_error("generalization_bound: non-finite term");
    rep.term_sum += l.term;
    magnitude += std::abs(l.term + l.trace_log_c) + std::abs(l.trace_log_c);
  }
  rep.layers = std::move(layers);
  if (rep.term_sum < -1e-12 * magnitude) {
    rep.vacuous = true;
  } else {
    rep.bound = std::sqrt(r * r / static_cast<double>(n) * std::max(rep.term_sum, 0.0));
  }
  return rep;
}

BoundReport generalization_bound(const TrajectoryRecord& tr,
                                 const std::vector<NoiseCovariance>& noise, double r,
                                 std::size_t n) {
  if (noise.size() != tr.layers.size()) {
    throw DimensionError("generalization_bound: one noise covariance per layer required");
  }
  std::vector<LayerBoundTerms> terms;
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    const NoiseCovariance c = regularize(noise[t]);
    const Matrix cum = tr.cumulative(t);
    const std::size_t d = c.c.rows();
    LayerBoundTerms l;
    l.t = t + 1;
    l.dw_fro2 = std::pow(frobenius_norm(tr.layers[t].delta_w), 2);
    l.cum_fro2 = std::pow(frobenius_norm(cum), 2);
    l.trace_c = trace(c.c);
    l.trace_log_c = trace_log_pd(c.c);
    l.term = bound_term(tr.layers[t].delta_w, cum, c, d);
    l.regularization_eps = c.regularization_eps;
    terms.push_back(l);
  }
  return assemble_bound(std::move(terms), r, n);
}

std::vector<NoiseCovariance> trajectory_noise(const TrajectoryRecord& tr, std::size_t b) {
  std::vector<NoiseCovariance> out;
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    GradientNoiseModel m{tr.num_demos, b, 1.0, per_example_grads_from_trajectory(tr, t)};
    out.push_back(noise_covariance(m));
  }
  return out;
}

UpperBoundCheck ub_delta_w(const Matrix& demos, const LayerWeights& w) {
  w.validate(demos.rows());
  const double q2 = std::pow(frobenius_norm(w.w_q), 2);
  double ub = 0.0;
  for (std::size_t i = 0; i < demos.cols(); ++i) {
    const Vector h = demos.col(i);
    // ||a ⊗ b||_F = ||a|| ||b||
    const double v = norm2(w.w_v * h);
    const double k = norm2(w.w_k * h);
    ub += v * v * k * k * q2;
  }
  const double actual = demos.cols() == 0 ? 0.0 : std::pow(frobenius_norm(delta_w(demos, w)), 2);
  return {ub, actual, actual <= ub + 1e-9 * (1.0 + ub)};
}

UpperBoundCheck ub_mlp_delta_w(const Matrix& demos, const LayerWeights& w,
                               std::optional<std::size_t> split_rank) {
  if (!w.mlp) throw std::invalid_argument("ub_mlp_delta_w: mlp weights absent");
  const Matrix z = delta_w(demos, w);
  const Matrix w_mlp = w.mlp_product();
  const double actual = frobenius_norm(w_mlp * z);
  double ub = actual;
  if (split_rank) {
    const Matrix kept = truncate(svd(w_mlp), *split_rank);
    ub = frobenius_norm(kept * z) + frobenius_norm((w_mlp - kept) * z);
  }
  return {ub, actual, actual <= ub + 1e-9 * (1.0 + ub)};
}

nlohmann::json bound_report_to_json(const BoundReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerBoundTerms& l : r.layers) {
    layers.push_back({{"t", l.t},
                      {"dw_fro2", l.dw_fro2},
                      {"cum_fro2", l.cum_fro2},
                      {"tr_c", l.trace_c},
                      {"tr_log_c", l.trace_log_c},
                      {"term", l.term},
                      {"regularization_eps", l.regularization_eps}});
  }
  nlohmann::json j{{"layers", layers},
                   {"r_subgaussian", r.r_subgaussian},
                   {"n", r.n},
                   {"term_sum", r.term_sum},
                   {"vacuous", r.vacuous}};
  j["bound"] = r.bound ? nlohmann::json(*r.bound) : nlohmann::json(nullptr);
  return j;
}

std::string bound_report_to_csv(const BoundReport& r) {
  std::ostringstream out;
  out << "t,dw_fro2,cum_fro2,tr_c,tr_log_c,term\n";
  for (const LayerBoundTerms& l : r.layers) {
    out << l.t << ',' << format_double(l.dw_fro2) << ',' << format_double(l.cum_fro2) << ','
        << format_double(l.trace_c) << ',' << format_double(l.trace_log_c) << ','
        << format_double(l.term) << '\n';
  }
  return out.str();
}

}  // namespace iclgd
