#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "iclgd/icl_bench.hpp"
#include "iclgd/implicit_gd.hpp"
#include "iclgd/io.hpp"
#include "iclgd/noise_bounds.hpp"
#include "iclgd/parallel.hpp"
#include "iclgd/prune_search.hpp"
#include "iclgd/verify.hpp"

namespace iclgd::cli {

namespace {

using nlohmann::json;

// JSON has no infinities; spell them out.
json num(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

// Streams for distinct purposes under one run seed.
enum Stream : std::uint64_t { kMatrix = 1, kTask = 2, kPrompt = 3, kTrain = 4, kProbe = 5 };

json stack_spec(const RunConfig& cfg, json fallback) {
  return cfg.params.contains("stack") ? cfg.params["stack"] : std::move(fallback);
}

bool negate_default(const json& spec) {
  const std::string kind = spec.value("generate", "");
  return kind == "gd" || kind == "planted";
}

Readout readout_from(const json& params, const json& spec, Metric fallback) {
  return Readout{metric_from_string(params.value("metric", to_string(fallback))),
                 params.value("negate", negate_default(spec))};
}

void require_task_stack(const Stack& s, std::size_t d) {
  if (s.d_in() != d || s.d_out() != 1) {
    throw ConfigError("stack must have d_in = " + std::to_string(d) + " and d_out = 1");
  }
}

std::string csv_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

int cmd_verify(Context& ctx) {
  const json& p = ctx.cfg.params;
  const auto which = get_or<std::vector<std::string>>(p, "suites", {});
  const auto results = run_suites(which, ctx.cfg.seed, ctx.threads, ctx.fault,
                                  get_or<std::size_t>(p, "instances", 0));
  const SuiteResult* first_fail = nullptr;
  for (const SuiteResult& r : results) {
    ctx.out << (r.passed ? "PASS " : "FAIL ") << r.name << " instances=" << r.instances
            << " max_residual_ratio=" << format_double(r.max_residual) << '\n';
    if (!r.passed && !first_fail) first_fail = &r;
  }
  ctx.summary["suites"] = suite_results_to_json(results);
  ctx.summary["passed"] = first_fail == nullptr;
  ctx.write("verify_report.json", ctx.summary.dump(2) + "\n");
  if (first_fail) {
    ctx.err << "verify: suite " << first_fail->name << " failed: " << first_fail->failure << '\n';
    return 1;
  }
  return 0;
}

int cmd_svd_inspect(Context& ctx) {
  const json& p = ctx.cfg.params;
  Matrix a;
  if (p.contains("matrix")) {
    a = matrix_from_json(p["matrix"]);
  } else {
    const std::size_t rows = get_or<std::size_t>(p, "rows", 6), cols = get_or<std::size_t>(p, "cols", 4);
    if (rows == 0 || cols == 0) throw ConfigError("svd-inspect: rows and cols must be >= 1");
    const double scale = get_or<double>(p, "scale", 1.0);
    if (!(scale > 0.0)) throw ConfigError("svd-inspect: scale must be positive");
    Rng rng(stream_seed(ctx.cfg.seed, kMatrix));
    std::normal_distribution<double> normal(0.0, scale);
    a = Matrix(rows, cols);
    for (double& x : a.entries()) x = normal(rng);
  }
  const SvdFactors f = svd(a);
  const std::size_t k = f.sigma.size();
  std::ostringstream csv;
  csv << "rank,xi,trunc_error,tail_norm\n";
  for (std::size_t r = 1; r <= k; ++r) {
    double tail = 0.0;
    for (std::size_t i = r; i < k; ++i) tail += f.sigma[i] * f.sigma[i];
    const double xi = 1.0 - static_cast<double>(r) / static_cast<double>(k);
    csv << r << ',' << format_double(xi) << ',' << format_double(frobenius_norm(a - truncate(f, r))) << ','
        << format_double(std::sqrt(tail)) << '\n';
  }
  const double cond = max_abs(a) == 0.0 ? std::numeric_limits<double>::infinity() : condition_number_2(a);
  json sigma = json::array();
  for (double s : f.sigma) sigma.push_back(s);
  ctx.summary["sigma"] = sigma;
  ctx.summary["condition_number"] = num(cond);
  ctx.summary["numerical_rank"] = numerical_rank(a, 1e-12);
  ctx.summary["reconstruction_residual"] = max_abs_diff(truncate(f, k), a);
  ctx.summary["matrix"] = matrix_to_json(a);
  ctx.write("svd.csv", csv.str());
  ctx.out << "sigma:";
  for (double s : f.sigma) ctx.out << ' ' << format_double(s);
  ctx.out << "\ncondition_number: " << format_double(cond) << '\n';
  return 0;
}

int cmd_cond_profile(Context& ctx) {
  const json& p = ctx.cfg.params;
  const json spec = stack_spec(ctx.cfg, {{"generate", "random"}, {"variant", "linear_mlp"}});
  const Stack s = build_stack(spec, ctx.cfg.seed, 0.2, 10);
  const ConditionProfile prof = condition_profile(s);
  const ModuleClass cls = module_class_from_string(p.value("module", "attn"));
  const std::size_t target = select_target_layer(prof, get_or<std::size_t>(p, "k", 1), cls);
  std::ostringstream csv;
  csv << "layer,w_q,w_k,w_v,mlp_in,mlp_out,attn_score,mlp_score\n";
  for (const LayerCondition& c : prof) {
    csv << c.layer << ',' << format_double(c.w_q) << ',' << format_double(c.w_k) << ',' << format_double(c.w_v)
        << ',' << csv_cell(c.mlp_in) << ',' << csv_cell(c.mlp_out) << ',' << csv_cell(c.score(ModuleClass::attn))
        << ',' << csv_cell(c.score(ModuleClass::mlp)) << '\n';
  }
  ctx.summary["profile"] = condition_profile_to_json(prof);
  ctx.summary["target_layer"] = target;
  ctx.write("cond_profile.csv", csv.str());
  ctx.out << "target_layer: " << target << '\n';
  return 0;
}

int cmd_prune_sweep(Context& ctx) {
  const json& p = ctx.cfg.params;
  const json spec = stack_spec(ctx.cfg, {{"generate", "planted"}});
  const Stack s = build_stack(spec, ctx.cfg.seed, 0.2, 10);
  SweepConfig sc;
  sc.d = s.d_in();
  if (s.d_out() != 1) throw ConfigError("prune-sweep: stack must have d_out = 1");
  sc.shots = get_or<std::vector<std::size_t>>(p, "shots", {0, 4, 10});
  sc.candidates = get_or<std::vector<double>>(p, "candidates", kDefaultClipCandidates);
  sc.seeds = get_or<std::vector<std::uint64_t>>(p, "seeds", {ctx.cfg.seed});
  std::vector<std::size_t> all_layers(s.num_layers());
  for (std::size_t l = 0; l < all_layers.size(); ++l) all_layers[l] = l;
  sc.layers = get_or<std::vector<std::size_t>>(p, "layers", all_layers);
  sc.modules.clear();
  for (const auto& m : get_or<std::vector<std::string>>(p, "modules", {"attn_all"}))
    sc.modules.push_back(selector_from_string(m));
  sc.readout = readout_from(p, spec, Metric::regression);
  sc.batch = get_or<std::size_t>(p, "batch", 64);
  for (std::size_t l : sc.layers)
    if (l >= s.num_layers()) throw ConfigError("prune-sweep: layer " + std::to_string(l) + " outside the stack");
  const auto rows = run_prune_sweep(sc, s, ctx.threads);
  ctx.write("sweep.csv", sweep_to_csv(rows));
  ctx.summary["rows"] = rows.size();
  ctx.out << "rows: " << rows.size() << '\n';
  return 0;
}

struct TaskSplit {
  LinearTask task;
  DataSplit split;
  double eta;
};

TaskSplit make_split(const json& t, std::uint64_t seed) {
  const std::size_t d = get_or<std::size_t>(t, "d", 5);
  const std::size_t n_demos = get_or<std::size_t>(t, "n_demos", 20);
  const std::size_t n_val = get_or<std::size_t>(t, "n_val", 64), n_test = get_or<std::size_t>(t, "n_test", 64);
  const double noise = get_or<double>(t, "noise", 0.0);
  if (d < 1 || n_demos < 1 || n_val < 1 || n_test < 1) {
    throw ConfigError("algo1.task: d, n_demos, n_val and n_test must be >= 1");
  }
  if (noise < 0.0) throw ConfigError("algo1.task.noise: must be >= 0");
  Rng rng(stream_seed(seed, kTask));
  TaskSplit ts{sample_task(d, rng, noise), {}, 0.0};
  const PromptSequence demos = sample_prompt(ts.task, n_demos, rng);
  ts.split.demos = demos.demos();
  ts.eta = default_eta(demos);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto [set, count] : {std::pair{&ts.split.val, n_val}, std::pair{&ts.split.test, n_test}}) {
    for (std::size_t i = 0; i < count; ++i) {
      Vector x(d);
      for (double& v : x) v = normal(rng);
      const double y = dot(ts.task.w_true, x);
      set->push_back({std::move(x), Vector{y}});
    }
  }
  return ts;
}

int cmd_algo1(Context& ctx) {
  const json& p = ctx.cfg.params;
  const json task = p.value("task", json::object());
  const TaskSplit ts = make_split(task, ctx.cfg.seed);
  const json spec = stack_spec(ctx.cfg, {{"generate", "planted"}, {"d", ts.task.dim()}});
  const Stack s = build_stack(spec, ctx.cfg.seed, ts.eta, ts.split.demos.size());
  require_task_stack(s, ts.task.dim());
  SearchConfig sc;
  sc.candidates = get_or<std::vector<double>>(p, "candidates", kDefaultClipCandidates);
  sc.module = module_class_from_string(p.value("module", "attn"));
  sc.k = get_or<std::size_t>(p, "k", 1);
  sc.readout = readout_from(p, spec, Metric::regression);
  const SearchResult r = search(s, ts.split, sc, ctx.threads);
  ctx.summary["result"] = search_result_to_json(r);
  ctx.summary["eta"] = ts.eta;
  ctx.write("algo1_trace.csv", search_trace_to_csv(r));
  ctx.out << "xi_star: " << format_double(r.xi_star) << "\nval_score: " << format_double(r.val_score_star)
          << "\ntest_score: " << format_double(r.test_score) << '\n';
  return 0;
}

struct ErrorStats {
  double mean = 0.0;
  double stderr_ = 0.0;
};

ErrorStats stats(const std::vector<double>& xs) {
  ErrorStats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    var /= static_cast<double>(xs.size() - 1);
    s.stderr_ = std::sqrt(var / static_cast<double>(xs.size()));
  }
  return s;
}

int cmd_garg_bench(Context& ctx) {
  const json& p = ctx.cfg.params;
  const std::size_t d = get_or<std::size_t>(p, "d", 20);
  const auto shots = get_or<std::vector<std::size_t>>(p, "shots", {20});
  const std::size_t tasks = get_or<std::size_t>(p, "tasks", 500);
  const std::size_t layers = get_or<std::size_t>(p, "gd_layers", 30);
  if (d < 1 || tasks < 1) throw ConfigError("garg-bench: d and tasks must be >= 1");

  const std::vector<std::string> estimators = {"constructed_gd", "explicit_gd", "least_squares", "zero"};
  std::ostringstream csv;
  csv << "shots,estimator,mean_error,stderr,tasks\n";
  json table = json::array();
  std::vector<std::size_t> sorted_shots = shots;
  std::sort(sorted_shots.begin(), sorted_shots.end());
  sorted_shots.erase(std::unique(sorted_shots.begin(), sorted_shots.end()), sorted_shots.end());
  for (std::size_t k : sorted_shots) {
    // errors[e][i]
    std::vector<std::vector<double>> errors(estimators.size(), std::vector<double>(tasks));
    parallel_for(tasks, ctx.threads, [&](std::size_t i) {
      Rng rng(stream_seed(stream_seed(ctx.cfg.seed, k), i));
      const LinearTask task = sample_task(d, rng);
      const PromptSequence prompt = sample_prompt(task, k, rng);
      const auto& xq = prompt.query().x;
      errors[3][i] = normalized_error(0.0, task, xq);
      if (k == 0) return;
      const double eta = default_eta(prompt);
      const Stack s = construct_gd_stack(d, layers, eta, k);
      errors[0][i] = normalized_error(predict(s, prompt, {Metric::regression, true})[0], task, xq);
      errors[1][i] = normalized_error(explicit_gd_oracle(prompt, layers, eta).prediction, task, xq);
      errors[2][i] = normalized_error(least_squares_baseline(prompt), task, xq);
    });
    for (std::size_t e = 0; e < estimators.size(); ++e) {
      if (k == 0 && estimators[e] != "zero") continue;
      const ErrorStats st = stats(errors[e]);
      csv << k << ',' << estimators[e] << ',' << format_double(st.mean) << ',' << format_double(st.stderr_) << ','
          << tasks << '\n';
      table.push_back({{"shots", k}, {"estimator", estimators[e]}, {"mean_error", st.mean}, {"stderr", st.stderr_}});
      ctx.out << "k=" << k << ' ' << estimators[e] << ": " << format_double(st.mean) << '\n';
    }
  }
  ctx.summary["table"] = table;
  ctx.write("garg.csv", csv.str());

  if (p.contains("train")) {
    const json& t = p["train"];
    TrainConfig tc;
    tc.d = get_or<std::size_t>(t, "d", tc.d);
    tc.layers = get_or<std::size_t>(t, "layers", tc.layers);
    tc.k = get_or<std::size_t>(t, "k", tc.k);
    tc.train_prompts = get_or<std::size_t>(t, "train_prompts", tc.train_prompts);
    tc.eta_train = get_or<double>(t, "eta_train", tc.eta_train);
    tc.steps = get_or<std::size_t>(t, "steps", tc.steps);
    tc.init_scale = get_or<double>(t, "init_scale", tc.init_scale);
    tc.grad_clip = get_or<double>(t, "grad_clip", tc.grad_clip);
    const std::size_t probes = get_or<std::size_t>(t, "probe_prompts", 64);
    Rng rng(stream_seed(ctx.cfg.seed, kTrain));
    const TrainResult tr = train_toy_stack(tc, rng);
    Rng probe_rng(stream_seed(ctx.cfg.seed, kProbe));
    std::vector<PromptSequence> prompts;
    std::vector<LinearTask> probe_tasks;
    for (std::size_t i = 0; i < probes; ++i) {
      probe_tasks.push_back(sample_task(tc.d, probe_rng));
      prompts.push_back(sample_prompt(probe_tasks.back(), tc.k, probe_rng));
    }
    const double err = stack_mse(tr.stack, prompts, probe_tasks) / static_cast<double>(tc.d);
    std::ostringstream loss_csv;
    loss_csv << "step,loss\n";
    for (std::size_t i = 0; i < tr.loss_history.size(); ++i)
      loss_csv << i << ',' << format_double(tr.loss_history[i]) << '\n';
    ctx.write("train_loss.csv", loss_csv.str());
    ctx.summary["train"] = {{"initial_loss", tr.initial_loss},
                            {"final_loss", tr.final_loss},
                            {"probe_normalized_error", err},
                            {"stack", stack_to_json(tr.stack, true)}};
    ctx.out << "trained: final_loss " << format_double(tr.final_loss) << " probe_error " << format_double(err)
            << '\n';
  }
  return 0;
}

PromptSequence bound_prompt(const Stack& s, std::size_t shots, std::uint64_t seed) {
  Rng rng(stream_seed(seed, kPrompt));
  std::normal_distribution<double> normal(0.0, 1.0);
  // one linear task per output coordinate
  std::vector<Vector> w(s.d_out(), Vector(s.d_in()));
  for (auto& row : w)
    for (double& x : row) x = normal(rng);
  auto draw = [&] {
    Vector x(s.d_in());
    for (double& v : x) v = normal(rng);
    return x;
  };
  std::vector<Token> demos;
  for (std::size_t i = 0; i < shots; ++i) {
    Vector x = draw();
    Vector y(s.d_out());
    for (std::size_t o = 0; o < s.d_out(); ++o) y[o] = dot(w[o], x);
    demos.push_back({std::move(x), std::move(y)});
  }
  return PromptSequence(std::move(demos), draw(), s.d_out());
}

struct BoundRun {
  BoundReport report;
  std::vector<double> ub;
};

BoundRun run_bound(const Stack& s, const PromptSequence& p, std::size_t b, double r, std::size_t n) {
  const TrajectoryRecord tr = trajectory(p, s);
  BoundRun out{generalization_bound(tr, trajectory_noise(tr, b), r, n), {}};
  const auto states = forward_stack(p, s);
  for (std::size_t t = 0; t < s.num_layers(); ++t) out.ub.push_back(ub_delta_w(states[t].demos(), s.layer(t)).ub);
  return out;
}

int cmd_bound_report(Context& ctx) {
  const json& p = ctx.cfg.params;
  const json spec = stack_spec(ctx.cfg, {{"generate", "gd"}, {"d", 3}});
  const std::size_t shots = get_or<std::size_t>(p, "shots", 8);
  if (shots < 2) throw ConfigError("bound-report: shots must be >= 2");
  const Stack s = build_stack(spec, ctx.cfg.seed, 0.2, shots);
  if (s.variant() != Variant::linear) throw ConfigError("bound-report: needs a linear stack");
  const std::size_t b = get_or<std::size_t>(p, "b", shots / 2);
  if (b < 1 || b > shots) throw ConfigError("bound-report: need 1 <= b <= shots");
  const double r = get_or<double>(p, "r_subgaussian", 1.0);
  if (!(r > 0.0)) throw ConfigError("bound-report: r_subgaussian must be positive");
  const std::size_t n = get_or<std::size_t>(p, "n", shots);
  if (n < 1) throw ConfigError("bound-report: n must be >= 1");

  const PromptSequence prompt = bound_prompt(s, shots, ctx.cfg.seed);
  const BoundRun base = run_bound(s, prompt, b, r, n);
  std::optional<BoundRun> pruned;
  if (p.contains("prune")) {
    const json& ps = p["prune"];
    const PruneSpec spec_p{ps["layer"].get<std::size_t>(), selector_from_string(ps["module"].get<std::string>()),
                           ps["xi"].get<double>()};
    if (spec_p.layer >= s.num_layers()) throw ConfigError("bound-report.prune.layer: outside the stack");
    pruned = run_bound(clip(s, spec_p), prompt, b, r, n);
  }

  std::ostringstream csv;
  csv << "t,dw_fro2,cum_fro2,tr_c,tr_log_c,term,ub_delta_w";
  if (pruned) csv << ",term_pruned,ub_delta_w_pruned,delta_term,delta_ub";
  csv << '\n';
  json ub = json::array();
  for (std::size_t t = 0; t < base.report.layers.size(); ++t) {
    const LayerBoundTerms& l = base.report.layers[t];
    csv << l.t << ',' << format_double(l.dw_fro2) << ',' << format_double(l.cum_fro2) << ','
        << format_double(l.trace_c) << ',' << format_double(l.trace_log_c) << ',' << format_double(l.term) << ','
        << format_double(base.ub[t]);
    if (pruned) {
      const double term2 = pruned->report.layers[t].term;
      csv << ',' << format_double(term2) << ',' << format_double(pruned->ub[t]) << ','
          << format_double(term2 - l.term) << ',' << format_double(pruned->ub[t] - base.ub[t]);
    }
    csv << '\n';
    ub.push_back(base.ub[t]);
  }
  ctx.summary["report"] = bound_report_to_json(base.report);
  ctx.summary["ub_delta_w"] = ub;
  if (pruned) {
    ctx.summary["pruned_report"] = bound_report_to_json(pruned->report);
    json ub2 = json::array();
    for (double u : pruned->ub) ub2.push_back(u);
    ctx.summary["pruned_ub_delta_w"] = ub2;
  }
  ctx.write("bound_report.csv", csv.str());
  ctx.out << "term_sum: " << format_double(base.report.term_sum) << "\nbound: "
          << (base.report.bound ? format_double(*base.report.bound) : "vacuous") << '\n';
  return 0;
}

int cmd_drop_layer_bench(Context& ctx) {
  const json& p = ctx.cfg.params;
  const std::size_t shots = get_or<std::size_t>(p, "shots", 10);
  const json spec = stack_spec(ctx.cfg, {{"generate", "gd"}, {"layers", 4}});
  const Stack s = build_stack(spec, ctx.cfg.seed, 0.2, std::max<std::size_t>(shots, 1));
  if (s.d_out() != 1) throw ConfigError("drop-layer-bench: stack must have d_out = 1");
  if (s.num_layers() < 2) throw ConfigError("drop-layer-bench: stack needs at least two layers");
  const std::size_t batch = get_or<std::size_t>(p, "batch", 64);
  if (batch < 1) throw ConfigError("drop-layer-bench: batch must be >= 1");
  const Readout readout = readout_from(p, spec, Metric::regression);
  const auto data = sweep_batch(s.d_in(), shots, ctx.cfg.seed, batch);
  const double baseline = evaluate(s, data, readout);
  std::vector<double> scores(s.num_layers());
  parallel_for(s.num_layers(), ctx.threads,
               [&](std::size_t l) { scores[l] = evaluate(drop_layer(s, l), data, readout); });
  std::ostringstream csv;
  csv << "dropped_layer,score,delta\n";
  json rows = json::array();
  for (std::size_t l = 0; l < scores.size(); ++l) {
    csv << l << ',' << format_double(scores[l]) << ',' << format_double(scores[l] - baseline) << '\n';
    rows.push_back({{"dropped_layer", l}, {"score", scores[l]}, {"delta", scores[l] - baseline}});
  }
  ctx.summary["baseline"] = baseline;
  ctx.summary["rows"] = rows;
  ctx.write("drop_layer.csv", csv.str());
  ctx.out << "baseline: " << format_double(baseline) << '\n';
  for (std::size_t l = 0; l < scores.size(); ++l)
    ctx.out << "drop " << l << ": " << format_double(scores[l]) << '\n';
  return 0;
}

}  // namespace

void Context::write(const std::string& name, const std::string& content) {
  outputs[name] = git_blob_hash(content);
  if (out_dir) write_text_file(*out_dir / name, content);
}

int dispatch(Context& ctx) {
  const std::string& c = ctx.cfg.command;
  if (!ctx.fault.empty() && c != "verify") throw ConfigError("--inject-fault only applies to verify");
  ctx.summary = {{"command", c}, {"seed", ctx.cfg.seed}, {"config_hash", ctx.cfg.hash()},
                 {"config", json::parse(ctx.cfg.canonical())}};
  int code = 0;
  if (c == "verify") code = cmd_verify(ctx);
  else if (c == "svd-inspect") code = cmd_svd_inspect(ctx);
  else if (c == "cond-profile") code = cmd_cond_profile(ctx);
  else if (c == "prune-sweep") code = cmd_prune_sweep(ctx);
  else if (c == "algo1") code = cmd_algo1(ctx);
  else if (c == "garg-bench") code = cmd_garg_bench(ctx);
  else if (c == "bound-report") code = cmd_bound_report(ctx);
  else if (c == "drop-layer-bench") code = cmd_drop_layer_bench(ctx);
  else throw ConfigError("unknown command '" + c + "'");
  if (c != "verify") {
    json outs = json::object();
    for (const auto& [name, hash] : ctx.outputs) outs[name] = hash;
    ctx.summary["outputs"] = outs;
    const std::string name = c == "algo1" ? "algo1_result.json" : "summary.json";
    ctx.write(name, ctx.summary.dump(2) + "\n");
  }
  ctx.out << "config_hash: " << ctx.cfg.hash() << '\n';
  return code;
}

}  // namespace iclgd::cli
