#include "iclgd/icl_bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>

#include "iclgd/errors.hpp"
#include "iclgd/io.hpp"
#include "iclgd/parallel.hpp"

namespace iclgd {

namespace {

Vector gaussian_vector(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(d);
  for (double& x : v) x = normal(rng);
  return v;
}

double label_of(const Token& t) { return t.y.at(0); }

}  // namespace

LinearTask sample_task(std::size_t d, Rng& rng, double noise_sigma) {
  if (d < 1) throw std::invalid_argument("sample_task: d must be >= 1");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("sample_task: negative noise");
  return LinearTask{gaussian_vector(d, rng), noise_sigma};
}

PromptSequence sample_prompt(const LinearTask& task, std::size_t k, Rng& rng) {
  const std::size_t d = task.dim();
  if (d < 1) throw std::invalid_argument("sample_prompt: empty task");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Token> demos;
  demos.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    Vector x = gaussian_vector(d, rng);
    double y = dot(task.w_true, x);
    if (task.noise_sigma > 0.0) y += task.noise_sigma * normal(rng);
    demos.push_back(Token{std::move(x), Vector{y}});
  }
  Vector xq = gaussian_vector(d, rng);
  return PromptSequence(std::move(demos), std::move(xq), 1);
}

Vector least_squares_weights(const PromptSequence& p) {
  const std::size_t k = p.num_demos();
  const std::size_t d = p.d_in();
  if (k < 1) throw std::invalid_argument("least_squares: need at least one demonstration");
  Matrix x(k, d);
  Vector y(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Token& t = p.demos()[i];
    for (std::size_t j = 0; j < d; ++j) x(i, j) = t.x[j];
    y[i] = label_of(t);
  }
  const SvdFactors f = svd(x);
  Vector w(d, 0.0);
  if (f.sigma.empty() || f.sigma[0] == 0.0) return w;
  const double cutoff = static_cast<double>(std::max(k, d)) *
                        std::numeric_limits<double>::epsilon() * f.sigma[0];
  for (std::size_t r = 0; r < f.sigma.size(); ++r) {
    if (f.sigma[r] <= cutoff) break;
    double uty = 0.0;
    for (std::size_t i = 0; i < k; ++i) uty += f.u(i, r) * y[i];
    const double c = uty / f.sigma[r];
    for (std::size_t j = 0; j < d; ++j) w[j] += c * f.v(j, r);
  }
  return w;
}

double least_squares_baseline(const PromptSequence& p) {
  return dot(least_squares_weights(p), p.query().x);
}

double in_context_loss(const PromptSequence& p, std::span<const double> w) {
  const std::size_t k = p.num_demos();
  if (k == 0) return 0.0;
  double sum = 0.0;
  for (const Token& t : p.demos()) {
    const double r = dot(w, t.x) - label_of(t);
    sum += r * r;
  }
  return sum / (2.0 * static_cast<double>(k));
}

GdRun explicit_gd_oracle(const PromptSequence& p, std::size_t steps, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("explicit_gd_oracle: eta must be positive");
  const std::size_t d = p.d_in();
  const std::size_t k = p.num_demos();
  GdRun run;
  Vector w(d, 0.0);
  run.iterates.push_back(w);
  run.losses.push_back(in_context_loss(p, w));
  for (std::size_t t = 0; t < steps && k > 0; ++t) {
    Vector grad(d, 0.0);
    for (const Token& tok : p.demos()) {
      const double r = dot(w, tok.x) - label_of(tok);
      for (std::size_t j = 0; j < d; ++j) grad[j] += r * tok.x[j];
    }
    const double scale = eta / static_cast<double>(k);
    for (std::size_t j = 0; j < d; ++j) w[j] -= scale * grad[j];
    const double n = norm2(w);
    if (!(n <= 1e8)) {
      throw std::runtime_error("explicit_gd_oracle: diverged at step " + std::to_string(t + 1) +
                               " (||w|| = " + format_double(n) + ")");
    }
    run.iterates.push_back(w);
    run.losses.push_back(in_context_loss(p, w));
  }
  // k = 0: no gradient, every iterate stays at zero
  while (run.iterates.size() < steps + 1) {
    run.iterates.push_back(w);
    run.losses.push_back(0.0);
  }
  run.prediction = dot(w, p.query().x);
  return run;
}

double default_eta(const PromptSequence& p) {
  const std::size_t d = p.d_in();
  const std::size_t k = p.num_demos();
  if (k == 0) throw std::invalid_argument("default_eta: no demonstrations");
  Vector v(d, 1.0 / std::sqrt(static_cast<double>(d)));
  double lambda = 0.0;
  for (int it = 0; it < 20; ++it) {
    Vector next(d, 0.0);
    for (const Token& t : p.demos()) {
      const double c = dot(t.x, v) / static_cast<double>(k);
      for (std::size_t j = 0; j < d; ++j) next[j] += c * t.x[j];
    }
    lambda = dot(v, next);
    const double n = norm2(next);
    if (n == 0.0) break;
    for (std::size_t j = 0; j < d; ++j) v[j] = next[j] / n;
  }
  if (!(lambda > 0.0)) throw std::domain_error("default_eta: demonstrations span nothing");
  return 0.5 / lambda;
}

Stack construct_gd_stack(std::size_t d, std::size_t layers, double eta, std::size_t k) {
  if (d < 1) throw std::invalid_argument("construct_gd_stack: d must be >= 1");
  if (k < 1) throw std::invalid_argument("construct_gd_stack: k must be >= 1");
  if (!(eta >= 0.0)) throw std::invalid_argument("construct_gd_stack: eta must be >= 0");
  const std::size_t dim = d + 1;
  Matrix px(dim, dim);
  for (std::size_t i = 0; i < d; ++i) px(i, i) = 1.0;
  Matrix wv(dim, dim);
  wv(d, d) = -eta / static_cast<double>(k);
  std::vector<LayerWeights> ls;
  for (std::size_t l = 0; l < layers; ++l) ls.push_back(LayerWeights{px, px, wv, std::nullopt, 1.0});
  return Stack(Variant::linear, std::move(ls), d, 1);
}

Stack plant_attention_noise(const Stack& s, std::size_t layer, double strength) {
  if (layer >= s.num_layers()) throw std::out_of_range("plant_attention_noise: layer out of range");
  if (s.d_out() != 1) throw DimensionError("plant_attention_noise: needs d_out = 1");
  std::vector<LayerWeights> ls = s.layers();
  const std::size_t y = s.d_in();
  ls[layer].w_q(y, y) += strength;
  ls[layer].w_k(y, y) += strength;
  return Stack(s.variant(), std::move(ls), s.d_in(), s.d_out());
}

Stack random_stack(Variant v, std::size_t layers, std::size_t d_in, std::size_t d_out, double scale,
                   Rng& rng, std::size_t mlp_dim) {
  const std::size_t dim = d_in + d_out;
  std::normal_distribution<double> normal(0.0, scale);
  auto draw = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.entries()) x = normal(rng);
    return m;
  };
  std::vector<LayerWeights> ls;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerWeights w{draw(dim, dim), draw(dim, dim), draw(dim, dim), std::nullopt, 1.0};
    if (v == Variant::linear_mlp) {
      const std::size_t h = mlp_dim == 0 ? dim : mlp_dim;
      Matrix w_in = draw(h, dim);
      w.mlp = MlpWeights{std::move(w_in), draw(dim, h)};
    }
    if (v == Variant::softmax) w.scale_divisor = std::sqrt(static_cast<double>(dim));
    ls.push_back(std::move(w));
  }
  return Stack(v, std::move(ls), d_in, d_out);
}

double normalized_error(double pred, const LinearTask& task, std::span<const double> x_query) {
  const double diff = pred - dot(task.w_true, x_query);
  return diff * diff / static_cast<double>(task.dim());
}

double stack_mse(const Stack& s, const std::vector<PromptSequence>& prompts,
                 const std::vector<LinearTask>& tasks, bool negate) {
  if (prompts.size() != tasks.size()) throw DimensionError("stack_mse: prompts and tasks differ");
  if (prompts.empty()) return 0.0;
  const Readout readout{Metric::regression, negate};
  double sum = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const double pred = predict(s, prompts[i], readout)[0];
    const double diff = pred - dot(tasks[i].w_true, prompts[i].query().x);
    sum += diff * diff;
  }
  return sum / static_cast<double>(prompts.size());
}

namespace {

constexpr std::size_t kMatricesPerLayer = 3;

Stack stack_from_params(std::span<const double> theta, std::size_t dim, std::size_t layers,
                        std::size_t d) {
  std::vector<LayerWeights> ls;
  const std::size_t block = dim * dim;
  for (std::size_t l = 0; l < layers; ++l) {
    auto take = [&](std::size_t m) {
      const auto first = theta.begin() + static_cast<std::ptrdiff_t>((l * kMatricesPerLayer + m) * block);
      return Matrix(dim, dim, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(block)));
    };
    ls.push_back(LayerWeights{take(0), take(1), take(2), std::nullopt, 1.0});
  }
  return Stack(Variant::linear, std::move(ls), d, 1);
}

}  // namespace

TrainResult train_toy_stack(const TrainConfig& cfg, Rng& rng) {
  if (cfg.d < 1 || cfg.d > 5) throw std::invalid_argument("train_toy_stack: need 1 <= d <= 5");
  if (cfg.layers < 1 || cfg.layers > 2) throw std::invalid_argument("train_toy_stack: need 1 <= L <= 2");
  const std::size_t dim = cfg.d + 1;
  const std::size_t n_params = cfg.layers * kMatricesPerLayer * dim * dim;
  if (n_params > 400) throw std::invalid_argument("train_toy_stack: more than 400 parameters");
  if (cfg.train_prompts < 1) throw std::invalid_argument("train_toy_stack: no training prompts");

  std::vector<LinearTask> tasks;
  std::vector<PromptSequence> prompts;
  for (std::size_t i = 0; i < cfg.train_prompts; ++i) {
    tasks.push_back(sample_task(cfg.d, rng));
    prompts.push_back(sample_prompt(tasks.back(), cfg.k, rng));
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  Vector theta(n_params);
  for (double& t : theta) t = cfg.init_scale * normal(rng);

  auto loss_at = [&](std::span<const double> th) {
    return stack_mse(stack_from_params(th, dim, cfg.layers, cfg.d), prompts, tasks);
  };

  TrainResult res{stack_from_params(theta, dim, cfg.layers, cfg.d), 0.0, 0.0, {}};
  res.initial_loss = loss_at(theta);
  if (!std::isfinite(res.initial_loss)) throw std::runtime_error("train_toy_stack: non-finite initial loss");
  res.loss_history.push_back(res.initial_loss);

  Vector grad(n_params);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t p = 0; p < n_params; ++p) {
      const double saved = theta[p];
      const double h = 1e-5 * (1.0 + std::abs(saved));
      theta[p] = saved + h;
      const double up = loss_at(theta);
      theta[p] = saved - h;
      const double down = loss_at(theta);
      theta[p] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("train_toy_stack: non-finite loss at parameter " + std::to_string(p) +
                                 ", step " + std::to_string(step));
      }
      grad[p] = (up - down) / (2.0 * h);
    }
    const double gnorm = norm2(grad);
    const double rate = cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip ? cfg.eta_train * cfg.grad_clip / gnorm
                                                                      : cfg.eta_train;
    for (std::size_t p = 0; p < n_params; ++p) {
      theta[p] -= rate * grad[p];
      if (!std::isfinite(theta[p])) {
        throw std::runtime_error("train_toy_stack: non-finite parameter " + std::to_string(p) +
                                 " after step " + std::to_string(step));
      }
    }
    const double loss = loss_at(theta);
    if (!std::isfinite(loss)) {
      // blame the largest step
      std::size_t bad = 0;
      for (std::size_t p = 1; p < n_params; ++p)
        if (std::abs(grad[p]) > std::abs(grad[bad])) bad = p;
      throw std::runtime_error("train_toy_stack: non-finite loss after step " + std::to_string(step) +
                               ", parameter " + std::to_string(bad));
    }
    res.loss_history.push_back(loss);
  }
  res.stack = stack_from_params(theta, dim, cfg.layers, cfg.d);
  res.final_loss = res.loss_history.back();
  return res;
}

std::vector<Example> sweep_batch(std::size_t d, std::size_t shots, std::uint64_t seed,
                                 std::size_t batch) {
  std::vector<Example> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    Rng rng(stream_seed(seed, i));
    const LinearTask task = sample_task(d, rng);
    PromptSequence p = sample_prompt(task, shots, rng);
    const double target = dot(task.w_true, p.query().x);
    out.push_back(Example{std::move(p), Vector{target}});
  }
  return out;
}

std::vector<SweepRow> run_prune_sweep(const SweepConfig& cfg, const Stack& s, unsigned threads) {
  if (cfg.shots.empty() || cfg.candidates.empty() || cfg.seeds.empty() || cfg.layers.empty() ||
      cfg.modules.empty()) {
    throw std::invalid_argument("run_prune_sweep: every sweep axis must be nonempty");
  }
  if (cfg.batch < 1) throw std::invalid_argument("run_prune_sweep: batch must be >= 1");
  if (cfg.d != s.d_in() || s.d_out() != 1) {
    throw DimensionError("run_prune_sweep: stack does not match d_in = d, d_out = 1");
  }
  for (std::size_t l : cfg.layers) {
    if (l >= s.num_layers()) throw std::out_of_range("run_prune_sweep: layer out of range");
  }

  struct BatchKey {
    std::size_t shots;
    std::uint64_t seed;
  };
  std::vector<BatchKey> keys;
  for (std::size_t k : cfg.shots)
    for (std::uint64_t seed : cfg.seeds) keys.push_back({k, seed});
  std::vector<std::vector<Example>> batches(keys.size());
  parallel_for(keys.size(), threads,
               [&](std::size_t i) { batches[i] = sweep_batch(cfg.d, keys[i].shots, keys[i].seed, cfg.batch); });

  struct Cell {
    std::size_t layer;
    ModuleSelector module;
    double xi;
    std::size_t batch;
  };
  std::vector<Cell> cells;
  for (std::size_t l : cfg.layers)
    for (ModuleSelector m : cfg.modules)
      for (double xi : cfg.candidates)
        for (std::size_t b = 0; b < keys.size(); ++b) cells.push_back({l, m, xi, b});

  std::vector<SweepRow> rows(cells.size());
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    const auto start = std::chrono::steady_clock::now();
    const Stack clipped = clip(s, PruneSpec{c.layer, c.module, c.xi});
    const double score = evaluate(clipped, batches[c.batch], cfg.readout);
    const auto stop = std::chrono::steady_clock::now();
    rows[i] = SweepRow{c.layer,
                       c.module,
                       c.xi,
                       keys[c.batch].shots,
                       keys[c.batch].seed,
                       score,
                       std::chrono::duration<double, std::milli>(stop - start).count()};
  });

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::make_tuple(a.layer, to_string(a.module), a.xi, a.shots, a.seed) <
           std::make_tuple(b.layer, to_string(b.module), b.xi, b.shots, b.seed);
  });
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "layer,module,xi,shots,seed,score,runtime_ms\n";
  for (const SweepRow& r : rows) {
    out << r.layer << ',' << to_string(r.module) << ',' << format_double(r.xi) << ',' << r.shots << ','
        << r.seed << ',' << format_double(r.score) << ',' << format_double(r.runtime_ms) << '\n';
  }
  return out.str();
}

}  // namespace iclgd
