#include "iclgd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "iclgd/errors.hpp"
#include "iclgd/icl_bench.hpp"
#include "iclgd/implicit_gd.hpp"
#include "iclgd/io.hpp"
#include "iclgd/noise_bounds.hpp"
#include "iclgd/numlin.hpp"
#include "iclgd/parallel.hpp"
#include "iclgd/prune_search.hpp"

namespace iclgd {

namespace {

// Outcome of one instance: worst residual/tolerance ratio plus the first failure.
struct Outcome {
  double ratio = 0.0;
  std::string failure;

  void check(double residual, double tol, const std::string& what) {
    const double r = std::isnan(residual) ? std::numeric_limits<double>::infinity() : residual / tol;
    ratio = std::max(ratio, r);
    if (r > 1.0 && failure.empty()) {
      std::ostringstream msg;
      msg << what << ": residual " << format_double(residual) << " > " << format_double(tol);
      failure = msg.str();
    }
  }
  void require(bool ok, const std::string& what) {
    if (!ok) {
      ratio = std::max(ratio, std::numeric_limits<double>::infinity());
      if (failure.empty()) failure = what;
    }
  }
};

struct Suite {
  std::string name;
  std::size_t default_instances;
  double tolerance;  // reported only; checks carry their own
  std::function<Outcome(Rng&, bool fault)> run;
};

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Matrix random_matrix(std::size_t r, std::size_t c, double scale, Rng& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(r, c);
  for (double& x : m.entries()) x = normal(rng);
  return m;
}

PromptSequence random_prompt(std::size_t d_in, std::size_t d_out, std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto vec = [&](std::size_t k) {
    Vector v(k);
    for (double& x : v) x = normal(rng);
    return v;
  };
  std::vector<Token> demos;
  for (std::size_t i = 0; i < n; ++i) demos.push_back({vec(d_in), vec(d_out)});
  return PromptSequence(std::move(demos), vec(d_in), d_out);
}

LayerWeights random_layer(std::size_t dim, double scale, Rng& rng) {
  return LayerWeights{random_matrix(dim, dim, scale, rng), random_matrix(dim, dim, scale, rng),
                      random_matrix(dim, dim, scale, rng), std::nullopt, 1.0};
}

constexpr double kRankTol = 1e-9;

// Entry scale that keeps a layer's update around a third of the token norm,
// so deep random stacks neither explode nor vanish.
double stable_scale(std::size_t dim, std::size_t n) {
  const double d = static_cast<double>(dim);
  return std::cbrt(0.3 / (std::sqrt(static_cast<double>(std::max<std::size_t>(n, 1))) * d * d));
}

Outcome linear_dual(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 8), d_out = uniform(rng, 1, 2), n = uniform(rng, 0, 16);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const LayerWeights w = random_layer(dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  const TokenStates h0 = to_states(p);
  const TokenStates h1 = forward_linear_layer(h0, w);
  Matrix dw = delta_w(h0.demos(), w);
  if (fault) dw *= -1.0;
  const Vector hq = h0.query();
  const Vector dual = dw * hq;
  const Vector fwd = h1.query();
  double diff = 0.0;
  for (std::size_t i = 0; i < dim; ++i) diff = std::max(diff, std::abs((fwd[i] - hq[i]) - dual[i]));
  o.check(diff, 1e-11 * (1.0 + norm2(hq)), "query update vs dW h_q");
  return o;
}

Outcome trajectory_identity(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 6), d_out = uniform(rng, 1, 2), n = uniform(rng, 1, 12);
  const std::size_t layers = uniform(rng, 1, 4);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const Stack s = random_stack(Variant::linear, layers, d_in, d_out, stable_scale(dim, n), rng);
  TrajectoryRecord tr;
  try {
    tr = trajectory(p, s);
  } catch (const NumericalFault& e) {
    o.require(false, e.what());
    return o;
  }
  Matrix wl = tr.layers.back().w;
  if (fault) wl -= 2.0 * tr.layers.back().g;
  const Vector pred = axpy(1.0, wl * tr.query_initial, tr.query_initial);
  double diff = 0.0;
  for (std::size_t i = 0; i < dim; ++i) diff += std::pow(pred[i] - tr.query_final[i], 2);
  o.check(std::sqrt(diff), 1e-9 * (1.0 + norm2(tr.query_initial)), "h_q^L vs (I + W_L) h_q^0");
  return o;
}

Outcome kernel_dual(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 6), d_out = uniform(rng, 1, 2), n = uniform(rng, 0, 12);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const LayerWeights w = random_layer(dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  const TokenStates h0 = to_states(p);
  const Vector fwd = forward_softmax_layer(h0, w, false).query();
  const Vector hq = h0.query();
  Vector dual = softmax_kernel_dual(h0.demos(), hq, w);
  if (fault && !dual.empty()) dual[0] += 1e-6;
  double diff = 0.0;
  for (std::size_t i = 0; i < dim; ++i) diff = std::max(diff, std::abs(fwd[i] - hq[i] - dual[i]));
  o.check(diff, 1e-12 * (1.0 + norm2(hq)), "softmax forward vs kernel dual");
  return o;
}

Outcome mlp_dual(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 6), d_out = uniform(rng, 1, 2), n = uniform(rng, 0, 12);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  LayerWeights w = random_layer(dim, scale, rng);
  const std::size_t hidden = uniform(rng, 1, 2 * dim);
  Matrix w_in = random_matrix(hidden, dim, scale, rng);
  w.mlp = MlpWeights{std::move(w_in), random_matrix(dim, hidden, scale, rng)};
  const TokenStates h0 = to_states(p);
  const Vector fwd = forward_mlp_layer(h0, w, true).query();
  const Vector hq = h0.query();
  Matrix z = mlp_delta_w(h0.demos(), w);
  if (fault) z *= 1.0 + 1e-6;
  const Vector dual = z * hq;
  double diff = 0.0;
  for (std::size_t i = 0; i < dim; ++i) diff = std::max(diff, std::abs(fwd[i] - hq[i] - dual[i]));
  o.check(diff, 1e-12 * (1.0 + norm2(hq)), "relaxed mlp forward vs W_MLP dW h_q");
  return o;
}

Outcome svd_reconstruct(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t m = uniform(rng, 1, 10), n = uniform(rng, 1, 10);
  Matrix a = random_matrix(m, n, 1.0, rng);
  // occasionally rank deficient
  if (uniform(rng, 0, 2) == 0 && m > 1) {
    for (std::size_t j = 0; j < n; ++j) a(m - 1, j) = a(0, j);
  }
  const SvdFactors f = svd(a);
  Matrix rec = truncate(f, f.sigma.size());
  if (fault) rec(0, 0) += 1e-6;
  const double scale = 1.0 + max_abs(a);
  o.check(max_abs_diff(rec, a), 1e-12 * scale, "u diag(s) vᵀ vs a");
  const std::size_t p = f.sigma.size();
  o.check(max_abs_diff(f.u.transpose() * f.u, Matrix::identity(p)), 1e-12, "uᵀu = I");
  o.check(max_abs_diff(f.v.transpose() * f.v, Matrix::identity(p)), 1e-12, "vᵀv = I");
  for (std::size_t i = 0; i + 1 < p; ++i) o.require(f.sigma[i] >= f.sigma[i + 1], "sigma not descending");
  for (double s : f.sigma) o.require(s >= 0.0, "negative singular value");
  return o;
}

Outcome eckart_young(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t m = uniform(rng, 1, 10), n = uniform(rng, 1, 10);
  const Matrix a = random_matrix(m, n, 1.0, rng);
  const SvdFactors f = svd(a);
  const double scale = 1.0 + frobenius_norm(a);
  for (std::size_t r = 1; r <= f.sigma.size(); ++r) {
    const Matrix ar = truncate(f, r);
    double tail = 0.0;
    for (std::size_t i = r; i < f.sigma.size(); ++i) tail += f.sigma[i] * f.sigma[i];
    double err = frobenius_norm(a - ar);
    if (fault) err *= 1.01;
    o.check(std::abs(err - std::sqrt(tail)), 1e-10 * scale, "truncation error vs singular tail");
    if (r == f.sigma.size()) continue;
    for (int c = 0; c < 20; ++c) {
      const Matrix cand = random_matrix(m, r, 1.0, rng) * random_matrix(r, n, 1.0, rng);
      o.require(frobenius_norm(a - cand) >= err - 1e-10 * scale, "random rank-r candidate beat truncation");
    }
  }
  return o;
}

Outcome ub_monotone(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 5), d_out = uniform(rng, 1, 2), n = uniform(rng, 1, 10);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  LayerWeights w = random_layer(dim, scale, rng);
  Matrix w_in = random_matrix(dim, dim, scale, rng);
  w.mlp = MlpWeights{std::move(w_in), random_matrix(dim, dim, scale, rng)};
  const Matrix demos = to_states(p).demos();
  const double base = ub_delta_w(demos, w).ub;
  for (Matrix LayerWeights::*field : {&LayerWeights::w_q, &LayerWeights::w_k, &LayerWeights::w_v}) {
    const SvdFactors f = svd(w.*field);
    double prev = 0.0;
    for (std::size_t r = 1; r <= dim; ++r) {
      LayerWeights cut = w;
      cut.*field = truncate(f, r);
      double ub = ub_delta_w(demos, cut).ub;
      if (fault) ub *= 2.0;
      o.check(std::max(0.0, ub - base), 1e-9 * (1.0 + base), "truncated UB above untruncated UB");
      o.check(std::max(0.0, prev - ub), 1e-9 * (1.0 + base), "UB not monotone in rank");
      prev = ub;
    }
  }
  // W_MLP = W_out W_in acting on dW
  const Matrix z = delta_w(demos, w);
  const SvdFactors f = svd(w.mlp_product());
  const double full = frobenius_norm(w.mlp_product() * z);
  double prev = 0.0;
  for (std::size_t r = 1; r <= dim; ++r) {
    const double v = frobenius_norm(truncate(f, r) * z);
    o.check(std::max(0.0, v - full), 1e-9 * (1.0 + full), "truncated W_MLP norm above full");
    o.check(std::max(0.0, prev - v), 1e-9 * (1.0 + full), "W_MLP norm not monotone in rank");
    prev = v;
    const UpperBoundCheck split = ub_mlp_delta_w(demos, w, r);
    o.require(split.dominates, "split-rank W_MLP bound below the actual norm");
  }
  return o;
}

Outcome noise_cov(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t n = uniform(rng, 2, 12), d = uniform(rng, 1, 8);
  std::vector<Vector> grads;
  for (std::size_t i = 0; i < n; ++i) {
    Vector g(d);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& x : g) x = normal(rng);
    grads.push_back(std::move(g));
  }
  const NoiseCovariance full = noise_covariance({n, n, 1.0, grads});
  o.require(max_abs(full.c) == 0.0, "C at b = N is not exactly zero");
  for (std::size_t b = 1; b < n; ++b) {
    Matrix c = noise_covariance({n, b, 1.0, grads}).c;
    if (fault) c(0, 0) -= 1.0;
    o.require(c == c.transpose(), "C not symmetric");
    const SymEig e = sym_eig(c);
    const double lo = *std::min_element(e.values.begin(), e.values.end());
    o.check(std::max(0.0, -lo), 1e-10, "C has a negative eigenvalue");
  }
  return o;
}

Outcome bound(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 3), n = uniform(rng, 2, 8), layers = uniform(rng, 1, 3);
  const PromptSequence p = random_prompt(d_in, 1, n, rng);
  const std::size_t dim = p.token_dim();
  const Stack s = random_stack(Variant::linear, layers, d_in, 1, stable_scale(dim, n), rng);
  const TrajectoryRecord tr = trajectory(p, s);
  const std::size_t b = uniform(rng, 1, n - 1);
  const auto noise = trajectory_noise(tr, b);
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    const NoiseCovariance c = regularize(noise[t]);
    const Matrix cum = tr.cumulative(t);
    const double t1 = bound_term(tr.layers[t].delta_w, cum, c, c.c.rows());
    double t2 = bound_term(2.0 * tr.layers[t].delta_w, cum, c, c.c.rows());
    if (fault) t2 = t1;
    const bool nonzero = frobenius_norm(tr.layers[t].delta_w) * frobenius_norm(cum) > 0.0;
    if (nonzero) o.require(t2 > t1, "bound term did not increase when dW doubled");
    o.require(t1 >= -1e-9 * (1.0 + std::abs(trace_log_pd(c.c))), "negative bound term");
  }
  const BoundReport r1 = generalization_bound(tr, noise, 1.0, n);
  const BoundReport r3 = generalization_bound(tr, noise, 3.0, n);
  o.require(!r1.vacuous && r1.bound && r3.bound, "bound unexpectedly vacuous");
  if (r1.bound && r3.bound) {
    o.check(std::abs(*r3.bound - 3.0 * *r1.bound), 1e-12 * (1.0 + *r3.bound), "R-homogeneity");
  }
  return o;
}

Outcome gd_equivalence(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d = 5, k = 20, layers = 30;
  const LinearTask task = sample_task(d, rng);
  const PromptSequence p = sample_prompt(task, k, rng);
  const double eta = default_eta(p);
  const Stack s = construct_gd_stack(d, layers, eta, k);
  const auto states = forward_stack(p, s);
  const GdRun run = explicit_gd_oracle(p, layers, eta);
  for (std::size_t t = 0; t <= layers; ++t) {
    double slot = -read_prediction(states[t].query(), d)[0];
    if (fault && t == layers) slot = -slot;
    const double oracle = dot(run.iterates[t], p.query().x);
    o.check(std::abs(slot - oracle), 1e-9, "layer " + std::to_string(t) + " readout vs GD iterate");
  }
  o.check(normalized_error(run.prediction, task, p.query().x), 0.05, "GD normalized error");
  return o;
}

Outcome least_squares(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d = uniform(rng, 1, 20);
  const std::size_t k = uniform(rng, d, 2 * d);
  const LinearTask task = sample_task(d, rng);
  const PromptSequence p = sample_prompt(task, k, rng);
  double pred = least_squares_baseline(p);
  if (fault) pred += 1.0;
  o.check(normalized_error(pred, task, p.query().x), 1e-8, "least-squares normalized error");
  return o;
}

Outcome rank_bound(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 8), d_out = uniform(rng, 1, 2), n = uniform(rng, 0, 16);
  const std::size_t layers = uniform(rng, 1, 4);
  const PromptSequence p = random_prompt(d_in, d_out, n, rng);
  const std::size_t dim = p.token_dim();
  const Stack s = random_stack(Variant::linear, layers, d_in, d_out, stable_scale(dim, n), rng);
  const TrajectoryRecord tr = trajectory(p, s);
  const std::size_t cap = std::min(n, dim) - (fault && std::min(n, dim) > 0 ? 1 : 0);
  for (const LayerTrajectory& l : tr.layers) {
    const std::size_t r = numerical_rank(l.delta_w, kRankTol);
    o.require(r <= cap, "rank(dW) = " + std::to_string(r) + " > " + std::to_string(cap));
  }
  return o;
}

Outcome prune_identity(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d_in = uniform(rng, 1, 5), layers = uniform(rng, 1, 3);
  const Stack s = random_stack(Variant::linear_mlp, layers, d_in, 1, 0.5, rng);
  const std::size_t l = uniform(rng, 0, layers - 1);
  Stack kept = clip(s, {l, ModuleSelector::all, 0.0});
  if (fault) kept = clip(s, {l, ModuleSelector::all, 0.5});
  o.require(kept.layer(l).w_q == s.layer(l).w_q && kept.layer(l).w_v == s.layer(l).w_v &&
                kept.layer(l).mlp->w_in == s.layer(l).mlp->w_in,
            "clip at xi = 0 changed the layer");
  const Stack none = magnitude_prune(s, l, ModuleSelector::all, 0.0);
  o.require(none.layer(l).w_k == s.layer(l).w_k, "magnitude prune at 0 changed the layer");
  const Stack half = magnitude_prune(s, l, ModuleSelector::w_q, 0.5);
  const auto& before = s.layer(l).w_q.entries();
  const auto& after = half.layer(l).w_q.entries();
  std::size_t zeros = 0;
  double kept_min = std::numeric_limits<double>::infinity(), cut_max = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (after[i] == 0.0) {
      ++zeros;
      cut_max = std::max(cut_max, std::abs(before[i]));
    } else {
      kept_min = std::min(kept_min, std::abs(after[i]));
    }
  }
  o.require(zeros == before.size() / 2, "magnitude prune removed the wrong count");
  o.require(cut_max <= kept_min, "magnitude prune kept a smaller entry than one it removed");
  return o;
}

Outcome planted_search(Rng& rng, bool fault) {
  Outcome o;
  const std::size_t d = 5, k = 20, layers = 3;
  const LinearTask task = sample_task(d, rng);
  const PromptSequence p = sample_prompt(task, k, rng);
  const double eta = default_eta(p);
  const Stack clean = construct_gd_stack(d, layers, eta, k);
  const Stack planted = plant_attention_noise(clean, layers - 1, 0.8);
  DataSplit split{p.demos(), {}, {}};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto* set : {&split.val, &split.test}) {
    for (int i = 0; i < 32; ++i) {
      Vector x(d);
      for (double& v : x) v = normal(rng);
      const double y = dot(task.w_true, x);
      set->push_back({std::move(x), Vector{y}});
    }
  }
  SearchConfig cfg;
  cfg.readout = {Metric::regression, true};
  const SearchResult res = search(planted, split, cfg);
  o.require(std::find(cfg.candidates.begin(), cfg.candidates.end(), res.xi_star) != cfg.candidates.end(),
            "xi* outside the candidate set");
  o.require(res.val_score_star >= res.trace.front().second, "search lost to the unpruned stack");
  o.require(res.target_layer == layers - 1, "search targeted the wrong layer");
  o.require(clip_rate_to_rank(res.xi_star, d + 1, d + 1) == d, "search did not cut the planted direction");
  const auto test = assemble_examples(split.demos, split.test, 1);
  const Stack chosen = clip(planted, {res.target_layer, ModuleSelector::attn_all, res.xi_star});
  o.require(res.test_score == evaluate(chosen, test, cfg.readout), "test score not reproducible");
  o.require(evaluate(fault ? planted : chosen, test, cfg.readout) == evaluate(clean, test, cfg.readout),
            "recovered stack scores differently from the clean stack");
  return o;
}

const std::vector<Suite>& suites() {
  static const std::vector<Suite> all = {
      {"lemma1", 100, 1e-11, linear_dual},
      {"trajectory", 100, 1e-9, trajectory_identity},
      {"kernel_dual", 100, 1e-12, kernel_dual},
      {"mlp_dual", 100, 1e-12, mlp_dual},
      {"svd", 50, 1e-12, svd_reconstruct},
      {"eckart_young", 50, 1e-10, eckart_young},
      {"ub_monotone", 50, 1e-9, ub_monotone},
      {"noise_cov", 50, 1e-10, noise_cov},
      {"bound", 50, 1e-12, bound},
      {"gd_equivalence", 10, 1e-9, gd_equivalence},
      {"least_squares", 50, 1e-8, least_squares},
      {"rank", 100, 0.0, rank_bound},
      {"prune", 30, 0.0, prune_identity},
      {"planted_search", 5, 0.0, planted_search},
  };
  return all;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const Suite& s : suites()) out.push_back(s.name);
    return out;
  }();
  return names;
}

std::vector<SuiteResult> run_suites(const std::vector<std::string>& which, std::uint64_t seed,
                                    unsigned threads, const std::string& fault,
                                    std::size_t instances) {
  const auto& names = suite_names();
  if (!fault.empty() && std::find(names.begin(), names.end(), fault) == names.end()) {
    throw std::invalid_argument("unknown fault '" + fault + "'");
  }
  std::vector<SuiteResult> results;
  for (std::size_t si = 0; si < suites().size(); ++si) {
    const Suite& suite = suites()[si];
    if (!which.empty() && std::find(which.begin(), which.end(), suite.name) == which.end()) continue;
    const std::size_t count = instances == 0 ? suite.default_instances : instances;
    const std::uint64_t suite_seed = stream_seed(seed, si);
    std::vector<Outcome> outcomes(count);
    parallel_for(count, threads, [&](std::size_t i) {
      Rng rng(stream_seed(suite_seed, i));
      try {
        outcomes[i] = suite.run(rng, fault == suite.name);
      } catch (const std::exception& e) {
        outcomes[i].require(false, std::string("exception: ") + e.what());
      }
    });
    SuiteResult r{suite.name, true, 0.0, suite.tolerance, count, {}};
    for (std::size_t i = 0; i < count; ++i) {
      r.max_residual = std::max(r.max_residual, outcomes[i].ratio);
      if (!outcomes[i].failure.empty() && r.passed) {
        r.passed = false;
        r.failure = "instance " + std::to_string(i) + ": " + outcomes[i].failure;
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

nlohmann::json suite_results_to_json(const std::vector<SuiteResult>& rs) {
  nlohmann::json out = nlohmann::json::array();
  for (const SuiteResult& r : rs) {
    nlohmann::json j{{"suite", r.name},
                     {"passed", r.passed},
                     {"instances", r.instances},
                     {"tolerance", r.tolerance}};
    j["max_residual_ratio"] = std::isfinite(r.max_residual) ? nlohmann::json(r.max_residual)
                                                            : nlohmann::json("inf");
    if (!r.passed) j["failure"] = r.failure;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace iclgd
