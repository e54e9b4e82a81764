#pragma once
//
// Dual forms of the toy attention layers: the implicit update matrix a
// linear layer applies to the query, its layerwise accumulation through a
// stack, and the softmax-kernel and MLP analogues.
//

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/model.hpp"
#include "iclgd/numlin.hpp"

namespace iclgd {

/// (W_V h_i ⊗ W_K h_i) W_Q for every demonstration column h_i of `demos`.
std::vector<Matrix> demo_contributions(const Matrix& demos, const LayerWeights& w);

/// Implicit update W_V H_s (W_K H_s)ᵀ W_Q.
///
/// Also sums the per-demonstration outer products and throws NumericalFault
/// when the two forms differ by more than 1e-11 (1 + max|ΔW|).
Matrix delta_w(const Matrix& demos, const LayerWeights& w);

struct LayerTrajectory {
  Matrix delta_w;                     // ΔW_t from the states entering layer t
  Matrix g;                           // G_t = ΔW_t (I + W_{t-1})
  Matrix w;                           // W_t = W_{t-1} + G_t
  std::vector<Matrix> contributions;  // per-demo terms summing to ΔW_t
};

struct TrajectoryRecord {
  std::vector<LayerTrajectory> layers;
  std::size_t num_demos = 0;
  Vector query_initial;  // h_q^0
  Vector query_final;    // h_q^L from the forward pass
  double final_residual = 0.0;  // ||h_q^L - (h_q^0 + W_L h_q^0)||

  // I + W_{t-1} for 0-based layer index t (I for t = 0).
  Matrix cumulative(std::size_t t) const;
};

/// Runs the linear stack and rebuilds it as accumulated implicit updates.
/// Throws NumericalFault when the final query differs from h_q^0 + W_L h_q^0
/// by more than 1e-9 (1 + max(||h_q^0||, ||h_q^L||)).
TrajectoryRecord trajectory(const PromptSequence& p, const Stack& s);

/// exp(k·q)-weighted average of the demonstration values, normalized over
/// all N + 1 keys including the query's own. Scores are shifted by their max.
Vector softmax_kernel_dual(const Matrix& demos, std::span<const double> query,
                           const LayerWeights& w);

/// W_out W_in ΔW
Matrix mlp_delta_w(const Matrix& demos, const LayerWeights& w);

nlohmann::json trajectory_to_json(const TrajectoryRecord& tr, bool full_matrices = false);

}  // namespace iclgd
