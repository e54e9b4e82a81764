#pragma once
//
// Weight surgery on a Stack (truncated-SVD clipping, magnitude pruning,
// layer dropping) and the condition-number-guided clipping-rate search.
//

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/model.hpp"

namespace iclgd {

enum class ModuleSelector { w_q, w_k, w_v, mlp_in, mlp_out, attn_all, mlp_all, all };
enum class ModuleClass { attn, mlp };

std::string to_string(ModuleSelector s);
ModuleSelector selector_from_string(const std::string& s);
std::string to_string(ModuleClass c);
ModuleClass module_class_from_string(const std::string& s);
ModuleSelector selector_for(ModuleClass c);

struct PruneSpec {
  std::size_t layer = 0;
  ModuleSelector selector = ModuleSelector::all;
  double xi = 0.0;
};

// Condition numbers of one layer's matrices; +infinity marks rank deficiency.
struct LayerCondition {
  std::size_t layer = 0;
  double w_q = 0.0;
  double w_k = 0.0;
  double w_v = 0.0;
  std::optional<double> mlp_in;
  std::optional<double> mlp_out;

  // ATTN: max over q/k/v; MLP: max over in/out (absent without mlp weights).
  std::optional<double> score(ModuleClass c) const;
};

using ConditionProfile = std::vector<LayerCondition>;

ConditionProfile condition_profile(const Stack& s);

/// Deepest layer among the k with the largest class score. Infinite scores
/// rank above finite ones; ties go to the deeper layer. Storage order of the
/// profile does not matter.
std::size_t select_target_layer(const ConditionProfile& profile, std::size_t k, ModuleClass o);

/// Replaces the selected matrices of one layer by their rank-r truncation,
/// r = clip_rate_to_rank(xi, m, n). Matrices whose r is already full rank are
/// kept bit-for-bit.
Stack clip(const Stack& s, const PruneSpec& spec);

/// Zeroes floor(fraction * size) smallest-magnitude entries in each selected
/// matrix; equal magnitudes are taken in row-major index order.
Stack magnitude_prune(const Stack& s, std::size_t layer, ModuleSelector sel, double fraction);

Stack drop_layer(const Stack& s, std::size_t layer);

enum class Metric { classification, regression };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct Example {
  PromptSequence prompt;
  Vector target;
};

struct Readout {
  Metric metric = Metric::regression;
  // The gradient-descent construction accumulates -ŷ in the label slot.
  bool negate = false;
};

/// Prediction of the final query token, sign-adjusted per `readout`.
Vector predict(const Stack& s, const PromptSequence& p, const Readout& readout);

/// classification: accuracy of sign (d_out = 1, sign(0) = +1) or argmax;
/// regression: -mean (pred - target)^2 / d_in.
double evaluate(const Stack& s, std::span<const Example> data, const Readout& readout);

struct LabeledQuery {
  Vector x;
  Vector target;
};

// Demonstrations shared by every query, plus validation and test queries.
struct DataSplit {
  std::vector<Token> demos;
  std::vector<LabeledQuery> val;
  std::vector<LabeledQuery> test;
};

std::vector<Example> assemble_examples(const std::vector<Token>& demos,
                                       std::span<const LabeledQuery> queries, std::size_t d_out);

inline const std::vector<double> kDefaultClipCandidates = {0.0,  0.1,  0.5,  0.75,
                                                          0.9,  0.95, 0.99, 0.995};

struct SearchConfig {
  std::vector<double> candidates = kDefaultClipCandidates;
  ModuleClass module = ModuleClass::attn;
  std::size_t k = 1;
  Readout readout;
};

struct SearchResult {
  double xi_star = 0.0;
  double val_score_star = 0.0;
  double test_score = 0.0;
  ConditionProfile condition_profile;
  std::size_t target_layer = 0;
  std::vector<std::pair<double, double>> trace;  // (xi, val score) in candidate order
};

/// Greedy clipping-rate search on one target layer: strict improvement over
/// the best score so far, starting from 0 (classification) or -infinity
/// (regression, whose scores are never positive).
SearchResult search(const Stack& s, const DataSplit& split, const SearchConfig& cfg,
                    unsigned threads = 1);

nlohmann::json search_result_to_json(const SearchResult& r);
// Header: xi,val_score
std::string search_trace_to_csv(const SearchResult& r);
nlohmann::json condition_profile_to_json(const ConditionProfile& p);

}  // namespace iclgd
