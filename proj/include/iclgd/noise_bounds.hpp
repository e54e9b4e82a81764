#pragma once
//
// Shot-noise covariance of implicit gradients and the trajectory-based
// generalization bound built from it, plus the norm upper bounds that show
// why truncating a weight matrix cannot inflate the implicit update.
//

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/implicit_gd.hpp"
#include "iclgd/model.hpp"
#include "iclgd/numlin.hpp"

namespace iclgd {

struct GradientNoiseModel {
  std::size_t n_threshold = 0;  // N: shots that define the reference gradient
  std::size_t b = 0;            // shots actually used
  double eta = 1.0;             // carried for completeness; the bound is scale-free in eta
  std::vector<Vector> per_example_grads;
};

struct NoiseCovariance {
  Matrix c;
  double regularization_eps = 0.0;
};

/// (N - b) / (b (N - 1)) ((1/N) Σ g_i g_iᵀ - Ḡ Ḡᵀ), Ḡ the mean gradient.
NoiseCovariance noise_covariance(const GradientNoiseModel& m);

/// c + eps I with eps = 1e-8 (1 + tr(c) / d).
NoiseCovariance regularize(const NoiseCovariance& c);

/// Column-major vec(a).
Vector flatten(const Matrix& a);

/// N vec(contribution_i (I + W_{t-1})) for 0-based layer t, so the mean
/// over demonstrations is vec(G_t).
///
/// The per-example gradient of the dual view is not pinned down by the
/// bound itself; this choice makes the averaging identity exact.
std::vector<Vector> per_example_grads_from_trajectory(const TrajectoryRecord& tr, std::size_t t);

/// d log((||ΔW_t||_F^2 ||I + W_{t-1}||_F^2 + tr C) / d) - tr log C.
/// `c` must already be positive definite.
double bound_term(const Matrix& delta_w_t, const Matrix& cumulative, const NoiseCovariance& c,
                  std::size_t d);

struct LayerBoundTerms {
  std::size_t t = 0;  // 1-based layer
  double dw_fro2 = 0.0;
  double cum_fro2 = 0.0;
  double trace_c = 0.0;
  double trace_log_c = 0.0;
  double term = 0.0;
  double regularization_eps = 0.0;
};

struct BoundReport {
  std::vector<LayerBoundTerms> layers;
  double r_subgaussian = 1.0;
  std::size_t n = 1;
  double term_sum = 0.0;
  bool vacuous = false;         // term_sum < 0: the square root is undefined
  std::optional<double> bound;  // sqrt((R^2 / n) term_sum) unless vacuous
};

/// Square-root assembly of per-layer terms. Sums within rounding of zero
/// (1e-12 relative to the summed magnitudes) are clamped to zero, anything
/// more negative is flagged vacuous.
BoundReport assemble_bound(std::vector<LayerBoundTerms> layers, double r, std::size_t n);

/// Bound over a trajectory. `noise[t]` is the raw covariance of layer t; it is
/// regularized here, and the epsilon is logged in the report.
BoundReport generalization_bound(const TrajectoryRecord& tr,
                                 const std::vector<NoiseCovariance>& noise, double r,
                                 std::size_t n);

/// Noise covariances for every layer from the trajectory's per-demo gradients,
/// pretending only `b` of the N shots are drawn.
std::vector<NoiseCovariance> trajectory_noise(const TrajectoryRecord& tr, std::size_t b);

struct UpperBoundCheck {
  double ub = 0.0;            // the upper-bound surrogate
  double actual = 0.0;        // the quantity it is meant to dominate
  bool dominates = true;      // actual <= ub (1e-9 slack)
};

/// Σ_i ||W_V h_i ⊗ W_K h_i||_F^2 ||W_Q||_F^2 against ||ΔW||_F^2.
///
/// The surrogate tracks truncation monotonically but is not a true bound:
/// with many aligned demonstrations ||ΔW||_F^2 can exceed it, so dominance is
/// reported instead of enforced.
UpperBoundCheck ub_delta_w(const Matrix& demos, const LayerWeights& w);

/// ||W_MLP,r z||_F + ||δ_r z||_F with z = ΔW and W_MLP = W_MLP,r + δ_r split at
/// `split_rank` (full rank when absent), against ||W_MLP z||_F.
UpperBoundCheck ub_mlp_delta_w(const Matrix& demos, const LayerWeights& w,
                               std::optional<std::size_t> split_rank = std::nullopt);

nlohmann::json bound_report_to_json(const BoundReport& r);
// Header: t,dw_fro2,cum_fro2,tr_c,tr_log_c,term
std::string bound_report_to_csv(const BoundReport& r);

}  // namespace iclgd
