#pragma once
//
// In-context linear regression: task sampling, least-squares and explicit
// gradient-descent baselines, a linear stack that provably runs gradient
// descent, a tiny finite-difference-trained stack, and pruning sweeps.
//

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "iclgd/model.hpp"
#include "iclgd/prune_search.hpp"

namespace iclgd {

using Rng = std::mt19937_64;

struct LinearTask {
  Vector w_true;
  double noise_sigma = 0.0;

  std::size_t dim() const noexcept { return w_true.size(); }
};

// w ~ N(0, I_d)
LinearTask sample_task(std::size_t d, Rng& rng, double noise_sigma = 0.0);

// k demonstrations and a query, x ~ N(0, I_d), y = wᵀx + noise.
PromptSequence sample_prompt(const LinearTask& task, std::size_t k, Rng& rng);

// Minimum-norm least-squares weights of the demonstrations (SVD pseudoinverse).
Vector least_squares_weights(const PromptSequence& p);
double least_squares_baseline(const PromptSequence& p);

struct GdRun {
  double prediction = 0.0;
  std::vector<Vector> iterates;  // w_0 .. w_L
  std::vector<double> losses;    // in-context training loss at each iterate
};

/// w_{t+1} = w_t - (eta / k) Σ (w_tᵀx_i - y_i) x_i from w_0 = 0. Throws
/// std::runtime_error when ||w|| exceeds 1e8.
GdRun explicit_gd_oracle(const PromptSequence& p, std::size_t steps, double eta);

// In-context loss (1 / 2k) Σ (wᵀx_i - y_i)^2.
double in_context_loss(const PromptSequence& p, std::span<const double> w);

/// 0.5 / λ_max((1/k) Σ x_i x_iᵀ), λ_max from 20 power iterations.
double default_eta(const PromptSequence& p);

/// Linear stack on tokens [x; y] (y scalar) with W_Q = W_K = P_x and
/// W_V = -(eta / k) P_y. The query's label slot after L layers holds -w_Lᵀx_q,
/// so read it with Readout::negate.
Stack construct_gd_stack(std::size_t d, std::size_t layers, double eta, std::size_t k);

/// Adds strength e_y e_yᵀ to W_Q and W_K of one layer, which damps the
/// query's accumulated prediction. On a constructed GD stack
/// with 0 < strength < 1 this is the smallest singular direction, so a rank-d
/// truncation removes it exactly.
Stack plant_attention_noise(const Stack& s, std::size_t layer, double strength);

/// Entries i.i.d. N(0, scale^2). linear_mlp layers get a hidden width of
/// mlp_dim (token_dim when 0); softmax layers use scale_divisor sqrt(token_dim).
Stack random_stack(Variant v, std::size_t layers, std::size_t d_in, std::size_t d_out, double scale,
                   Rng& rng, std::size_t mlp_dim = 0);

double normalized_error(double pred, const LinearTask& task, std::span<const double> x_query);

struct TrainConfig {
  std::size_t d = 2;
  std::size_t layers = 1;
  std::size_t k = 4;            // shots per training prompt
  std::size_t train_prompts = 64;
  double eta_train = 0.1;
  std::size_t steps = 100;
  double init_scale = 0.1;
  double grad_clip = 1.0;  // rescale gradients above this norm; 0 disables
};

struct TrainResult {
  Stack stack;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_history;
};

/// Gradient descent on the mean squared query error of a linear stack, with
/// central finite differences (step 1e-5 (1 + |θ|)). Desk scale only:
/// d <= 5, L <= 2, at most 400 parameters. Non-finite losses abort with the
/// offending parameter index.
TrainResult train_toy_stack(const TrainConfig& cfg, Rng& rng);

// Mean squared error of the query readout over prompts with known tasks.
double stack_mse(const Stack& s, const std::vector<PromptSequence>& prompts,
                 const std::vector<LinearTask>& tasks, bool negate = false);

struct SweepConfig {
  std::vector<std::size_t> shots{10};
  std::vector<double> candidates = kDefaultClipCandidates;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::size_t> layers{0};
  std::vector<ModuleSelector> modules{ModuleSelector::attn_all};
  Readout readout{Metric::regression, false};
  std::size_t batch = 64;
  std::size_t d = 5;
};

struct SweepRow {
  std::size_t layer = 0;
  ModuleSelector module = ModuleSelector::all;
  double xi = 0.0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  double score = 0.0;
  double runtime_ms = 0.0;
};

/// Fixed prompt batch per (seed, shots): prompt i of the batch draws from the
/// stream stream_seed(seed, i) so results do not depend on threading.
/// Targets are wᵀx_q; the classification metric compares their signs.
std::vector<Example> sweep_batch(std::size_t d, std::size_t shots, std::uint64_t seed,
                                 std::size_t batch);

/// One row per (layer, module, xi, shots, seed), rows sorted by that tuple.
std::vector<SweepRow> run_prune_sweep(const SweepConfig& cfg, const Stack& s, unsigned threads = 1);

// Header: layer,module,xi,shots,seed,score,runtime_ms
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace iclgd
