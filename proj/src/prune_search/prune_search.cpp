#include "iclgd/prune_search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "iclgd/io.hpp"
#include "iclgd/numlin.hpp"
#include "iclgd/parallel.hpp"

namespace iclgd {

namespace {

struct Slot {
  ModuleSelector which;
  Matrix* m;
};

// Concrete matrices named by a selector on one (mutable copy of a) layer.
std::vector<Slot> select_matrices(LayerWeights& w, ModuleSelector sel) {
  auto need_mlp = [&] {
    if (!w.mlp) throw std::invalid_argument("selector " + to_string(sel) + " needs mlp weights");
  };
  switch (sel) {
    case ModuleSelector::w_q: return {{sel, &w.w_q}};
    case ModuleSelector::w_k: return {{sel, &w.w_k}};
    case ModuleSelector::w_v: return {{sel, &w.w_v}};
    case ModuleSelector::mlp_in: need_mlp(); return {{sel, &w.mlp->w_in}};
    case ModuleSelector::mlp_out: need_mlp(); return {{sel, &w.mlp->w_out}};
    case ModuleSelector::attn_all:
      return {{ModuleSelector::w_q, &w.w_q}, {ModuleSelector::w_k, &w.w_k}, {ModuleSelector::w_v, &w.w_v}};
    case ModuleSelector::mlp_all:
      need_mlp();
      return {{ModuleSelector::mlp_in, &w.mlp->w_in}, {ModuleSelector::mlp_out, &w.mlp->w_out}};
    case ModuleSelector::all: {
      std::vector<Slot> out{{ModuleSelector::w_q, &w.w_q}, {ModuleSelector::w_k, &w.w_k}, {ModuleSelector::w_v, &w.w_v}};
      if (w.mlp) {
        out.push_back({ModuleSelector::mlp_in, &w.mlp->w_in});
        out.push_back({ModuleSelector::mlp_out, &w.mlp->w_out});
      }
      return out;
    }
  }
  return {};
}

Stack with_layers(const Stack& s, std::vector<LayerWeights> layers) {
  return Stack(s.variant(), std::move(layers), s.d_in(), s.d_out());
}

void check_layer(const Stack& s, std::size_t layer) {
  if (layer >= s.num_layers()) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside stack of " +
                            std::to_string(s.num_layers()));
  }
}

// Zero matrices have no finite condition number; report them as singular.
double profile_condition(const Matrix& m) {
  if (max_abs(m) == 0.0) return std::numeric_limits<double>::infinity();
  return condition_number_2(m);
}

nlohmann::json cond_json(double c) {
  if (std::isinf(c)) return "inf";
  return c;
}

}  // namespace

std::string to_string(ModuleSelector s) {
  switch (s) {
    case ModuleSelector::w_q: return "w_q";
    case ModuleSelector::w_k: return "w_k";
    case ModuleSelector::w_v: return "w_v";
    case ModuleSelector::mlp_in: return "mlp_in";
    case ModuleSelector::mlp_out: return "mlp_out";
    case ModuleSelector::attn_all: return "attn_all";
    case ModuleSelector::mlp_all: return "mlp_all";
    case ModuleSelector::all: return "all";
  }
  return "unknown";
}

ModuleSelector selector_from_string(const std::string& s) {
  for (auto sel : {ModuleSelector::w_q, ModuleSelector::w_k, ModuleSelector::w_v,
                   ModuleSelector::mlp_in, ModuleSelector::mlp_out, ModuleSelector::attn_all,
                   ModuleSelector::mlp_all, ModuleSelector::all}) {
    if (to_string(sel) == s) return sel;
  }
  throw std::invalid_argument("unknown module selector '" + s + "'");
}

std::string to_string(ModuleClass c) { return c == ModuleClass::attn ? "attn" : "mlp"; }

ModuleClass module_class_from_string(const std::string& s) {
  if (s == "attn") return ModuleClass::attn;
  if (s == "mlp") return ModuleClass::mlp;
  throw std::invalid_argument("unknown module class '" + s + "'");
}

ModuleSelector selector_for(ModuleClass c) {
  return c == ModuleClass::attn ? ModuleSelector::attn_all : ModuleSelector::mlp_all;
}

std::optional<double> LayerCondition::score(ModuleClass c) const {
  if (c == ModuleClass::attn) return std::max({w_q, w_k, w_v});
  if (!mlp_in || !mlp_out) return std::nullopt;
  return std::max(*mlp_in, *mlp_out);
}

ConditionProfile condition_profile(const Stack& s) {
  ConditionProfile p;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    const LayerWeights& w = s.layer(l);
    LayerCondition c{l, profile_condition(w.w_q), profile_condition(w.w_k),
                     profile_condition(w.w_v), std::nullopt, std::nullopt};
    if (w.mlp) {
      c.mlp_in = profile_condition(w.mlp->w_in);
      c.mlp_out = profile_condition(w.mlp->w_out);
    }
    p.push_back(c);
  }
  return p;
}

std::size_t select_target_layer(const ConditionProfile& profile, std::size_t k, ModuleClass o) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (const LayerCondition& c : profile) {
    if (auto s = c.score(o)) scored.emplace_back(*s, c.layer);
  }
  if (scored.empty()) throw std::invalid_argument("select_target_layer: no layer has class " + to_string(o));
  if (k < 1 || k > scored.size()) {
    throw std::invalid_argument("select_target_layer: k must lie in [1, " +
                                std::to_string(scored.size()) + "]");
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  std::size_t deepest = 0;
  for (std::size_t i = 0; i < k; ++i) deepest = std::max(deepest, scored[i].second);
  return deepest;
}

Stack clip(const Stack& s, const PruneSpec& spec) {
  check_layer(s, spec.layer);
  std::vector<LayerWeights> layers = s.layers();
  for (Slot slot : select_matrices(layers[spec.layer], spec.selector)) {
    Matrix& m = *slot.m;
    const std::size_t r = clip_rate_to_rank(spec.xi, m.rows(), m.cols());
    if (r >= std::min(m.rows(), m.cols())) continue;
    m = truncate(svd(m), r);
  }
  return with_layers(s, std::move(layers));
}

Stack magnitude_prune(const Stack& s, std::size_t layer, ModuleSelector sel, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("magnitude_prune: fraction must lie in [0, 1)");
  }
  check_layer(s, layer);
  std::vector<LayerWeights> layers = s.layers();
  for (Slot slot : select_matrices(layers[layer], sel)) {
    auto entries = slot.m->entries();
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(entries.size())));
    std::vector<std::size_t> idx(entries.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(entries[a]) < std::abs(entries[b]);
    });
    for (std::size_t i = 0; i < count; ++i) entries[idx[i]] = 0.0;
  }
  return with_layers(s, std::move(layers));
}

Stack drop_layer(const Stack& s, std::size_t layer) {
  if (s.num_layers() < 2) throw std::invalid_argument("drop_layer: stack has a single layer");
  check_layer(s, layer);
  std::vector<LayerWeights> layers = s.layers();
  layers.erase(layers.begin() + static_cast<std::ptrdiff_t>(layer));
  return with_layers(s, std::move(layers));
}

std::string to_string(Metric m) {
  return m == Metric::classification ? "classification" : "regression";
}

Metric metric_from_string(const std::string& s) {
  if (s == "classification") return Metric::classification;
  if (s == "regression") return Metric::regression;
  throw std::invalid_argument("unknown metric '" + s + "'");
}

Vector predict(const Stack& s, const PromptSequence& p, const Readout& readout) {
  const auto states = forward_stack(p, s);
  Vector y = read_prediction(states.back().query(), p.d_in());
  if (readout.negate) {
    for (double& v : y) v = -v;
  }
  return y;
}

double evaluate(const Stack& s, std::span<const Example> data, const Readout& readout) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  double total = 0.0;
  for (const Example& ex : data) {
    const Vector pred = predict(s, ex.prompt, readout);
    if (pred.size() != ex.target.size()) throw std::invalid_argument("evaluate: target size mismatch");
    if (readout.metric == Metric::classification) {
      bool hit;
      if (pred.size() == 1) {
        hit = (pred[0] >= 0.0) == (ex.target[0] >= 0.0);
      } else {
        const auto arg = [](const Vector& v) {
          return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
        };
        hit = arg(pred) == arg(ex.target);
      }
      total += hit ? 1.0 : 0.0;
    } else {
      double err = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) err += (pred[i] - ex.target[i]) * (pred[i] - ex.target[i]);
      total -= err / static_cast<double>(ex.prompt.d_in());
    }
  }
  return total / static_cast<double>(data.size());
}

std::vector<Example> assemble_examples(const std::vector<Token>& demos,
                                       std::span<const LabeledQuery> queries, std::size_t d_out) {
  std::vector<Example> out;
  out.reserve(queries.size());
  for (const LabeledQuery& q : queries) out.push_back({PromptSequence(demos, q.x, d_out), q.target});
  return out;
}

SearchResult search(const Stack& s, const DataSplit& split, const SearchConfig& cfg,
                    unsigned threads) {
  if (cfg.candidates.empty()) throw std::invalid_argument("search: empty candidate set");
  SearchResult res;
  res.condition_profile = condition_profile(s);
  res.target_layer = select_target_layer(res.condition_profile, cfg.k, cfg.module);
  const ModuleSelector sel = selector_for(cfg.module);

  const auto val = assemble_examples(split.demos, split.val, s.d_out());
  const auto test = assemble_examples(split.demos, split.test, s.d_out());

  std::vector<double> scores(cfg.candidates.size());
  parallel_for(cfg.candidates.size(), threads, [&](std::size_t i) {
    scores[i] = evaluate(clip(s, {res.target_layer, sel, cfg.candidates[i]}), val, cfg.readout);
  });

  double best_xi = 0.0;
  double best = cfg.readout.metric == Metric::classification
                    ? 0.0
                    : -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cfg.candidates.size(); ++i) {
    res.trace.emplace_back(cfg.candidates[i], scores[i]);
    if (scores[i] > best) {
      best = scores[i];
      best_xi = cfg.candidates[i];
    }
  }
  res.xi_star = best_xi;
  res.val_score_star = best;
  res.test_score = evaluate(clip(s, {res.target_layer, sel, best_xi}), test, cfg.readout);
  return res;
}

nlohmann::json condition_profile_to_json(const ConditionProfile& p) {
  nlohmann::json out = nlohmann::json::array();
  for (const LayerCondition& c : p) {
    nlohmann::json j{{"layer", c.layer},
                     {"w_q", cond_json(c.w_q)},
                     {"w_k", cond_json(c.w_k)},
                     {"w_v", cond_json(c.w_v)}};
    if (c.mlp_in) j["mlp_in"] = cond_json(*c.mlp_in);
    if (c.mlp_out) j["mlp_out"] = cond_json(*c.mlp_out);
    out.push_back(std::move(j));
  }
  return out;
}

nlohmann::json search_result_to_json(const SearchResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& [xi, score] : r.trace) trace.push_back({{"xi", xi}, {"val_score", score}});
  nlohmann::json j{{"xi_star", r.xi_star},
                   {"test_score", r.test_score},
                   {"target_layer", r.target_layer},
                   {"condition_profile", condition_profile_to_json(r.condition_profile)},
                   {"trace", trace}};
  j["val_score_star"] = std::isfinite(r.val_score_star) ? nlohmann::json(r.val_score_star)
                                                        : nlohmann::json("-inf");
  return j;
}

std::string search_trace_to_csv(const SearchResult& r) {
  std::ostringstream out;
  out << "xi,val_score\n";
  for (const auto& [xi, score] : r.trace) out << format_double(xi) << ',' << format_double(score) << '\n';
  return out.str();
}

}  // namespace iclgd
