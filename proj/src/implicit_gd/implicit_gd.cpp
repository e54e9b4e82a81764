#include "iclgd/implicit_gd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "iclgd/errors.hpp"

namespace iclgd {

std::vector<Matrix> demo_contributions(const Matrix& demos, const LayerWeights& w) {
  w.validate(demos.rows());
  std::vector<Matrix> out;
  out.reserve(demos.cols());
  for (std::size_t i = 0; i < demos.cols(); ++i) {
    const Vector h = demos.col(i);
    out.push_back(Matrix::outer(w.w_v * h, w.w_k * h) * w.w_q);
  }
  return out;
}

Matrix delta_w(const Matrix& demos, const LayerWeights& w) {
  w.validate(demos.rows());
  const Matrix product = (w.w_v * demos) * (w.w_k * demos).transpose() * w.w_q;

  Matrix outer_sum(demos.rows(), demos.rows());
  for (const Matrix& c : demo_contributions(demos, w)) outer_sum += c;

  const double residual = max_abs_diff(product, outer_sum);
  if (residual > 1e-11 * (1.0 + max_abs(product))) {
    throw NumericalFault("delta_w: matrix-product and outer-sum forms disagree", residual);
  }
  return product;
}

Matrix TrajectoryRecord::cumulative(std::size_t t) const {
  if (t > layers.size()) throw std::out_of_range("TrajectoryRecord::cumulative: bad layer");
  const std::size_t dim = query_initial.size();
  Matrix c = Matrix::identity(dim);
  if (t > 0) c += layers[t - 1].w;
  return c;
}

TrajectoryRecord trajectory(const PromptSequence& p, const Stack& s) {
  if (s.variant() != Variant::linear) {
    throw std::invalid_argument("trajectory: only linear stacks have an implicit-GD trajectory");
  }
  const std::vector<TokenStates> states = forward_stack(p, s);
  const std::size_t dim = s.token_dim();

  TrajectoryRecord tr;
  tr.num_demos = p.num_demos();
  tr.query_initial = states.front().query();
  tr.query_final = states.back().query();

  Matrix w_prev(dim, dim);
  const Matrix eye = Matrix::identity(dim);
  for (std::size_t t = 0; t < s.num_layers(); ++t) {
    const Matrix demos = states[t].demos();
    LayerTrajectory lt;
    lt.delta_w = delta_w(demos, s.layer(t));
    lt.contributions = demo_contributions(demos, s.layer(t));
    lt.g = lt.delta_w * (eye + w_prev);
    lt.w = w_prev + lt.g;
    w_prev = lt.w;
    tr.layers.push_back(std::move(lt));
  }

  const Vector predicted = axpy(1.0, w_prev * tr.query_initial, tr.query_initial);
  Vector diff = tr.query_final;
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= predicted[i];
  tr.final_residual = norm2(diff);
  const double scale = 1.0 + std::max(norm2(tr.query_initial), norm2(tr.query_final));
  if (!(tr.final_residual <= 1e-9 * scale)) {
    throw NumericalFault("trajectory: h_q^L != h_q^0 + W_L h_q^0", tr.final_residual);
  }
  return tr;
}

Vector softmax_kernel_dual(const Matrix& demos, std::span<const double> query,
                           const LayerWeights& w) {
  w.validate(query.size());
  if (demos.cols() > 0 && demos.rows() != query.size()) {
    throw DimensionError("softmax_kernel_dual: demo and query dimensions differ");
  }
  const Vector q = w.w_q * query;
  const std::size_t n = demos.cols();

  // Kernel arguments k_i·q for the N demos and, last, the query's own key.
  Vector exponents(n + 1);
  for (std::size_t i = 0; i < n; ++i) exponents[i] = dot(w.w_k * demos.col(i), q);
  exponents[n] = dot(w.w_k * query, q);
  const double shift = *std::max_element(exponents.begin(), exponents.end());

  double normalizer = 0.0;
  for (double e : exponents) normalizer += std::exp(e - shift);

  Vector update(query.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double kernel = std::exp(exponents[i] - shift);
    const Vector v = w.w_v * demos.col(i);
    for (std::size_t r = 0; r < update.size(); ++r) update[r] += v[r] * kernel;
  }
  for (double& x : update) x /= normalizer;
  return update;
}

Matrix mlp_delta_w(const Matrix& demos, const LayerWeights& w) {
  if (!w.mlp) throw std::invalid_argument("mlp_delta_w: mlp weights absent");
  return w.mlp_product() * delta_w(demos, w);
}

nlohmann::json trajectory_to_json(const TrajectoryRecord& tr, bool full_matrices) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    const LayerTrajectory& lt = tr.layers[t];
    nlohmann::json l{{"t", t + 1},
                     {"delta_w_fro", frobenius_norm(lt.delta_w)},
                     {"g_fro", frobenius_norm(lt.g)},
                     {"w_fro", frobenius_norm(lt.w)}};
    if (full_matrices) {
      l["delta_w"] = matrix_to_json(lt.delta_w);
      l["g"] = matrix_to_json(lt.g);
      l["w"] = matrix_to_json(lt.w);
    }
    layers.push_back(std::move(l));
  }
  return {{"num_demos", tr.num_demos}, {"final_residual", tr.final_residual}, {"layers", layers}};
}

}  // namespace iclgd
