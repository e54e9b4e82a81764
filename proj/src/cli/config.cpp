#include "config.hpp"

#include <algorithm>
#include <cmath>

#include "iclgd/io.hpp"
#include "iclgd/prune_search.hpp"
#include "iclgd/verify.hpp"

namespace iclgd::cli {

namespace {

using nlohmann::json;

const std::vector<std::string> kSelectors = {"w_q",     "w_k",    "w_v",     "mlp_in",
                                             "mlp_out", "attn_all", "mlp_all", "all"};
const std::vector<std::string> kMetrics = {"classification", "regression"};
const std::vector<std::string> kClasses = {"attn", "mlp"};

const Schema kStack = {
    {"generate", Kind::choice, false, {"gd", "planted", "random", "zero"}},
    {"inline", Kind::any},
    {"file", Kind::string},
    {"variant", Kind::choice, false, {"linear", "softmax", "linear_mlp"}},
    {"d", Kind::uint},
    {"d_out", Kind::uint},
    {"layers", Kind::uint},
    {"eta", Kind::number},
    {"k", Kind::uint},
    {"strength", Kind::number},
    {"planted_layer", Kind::uint},
    {"scale", Kind::number},
    {"mlp_dim", Kind::uint},
};

const Schema kTask = {
    {"d", Kind::uint}, {"n_demos", Kind::uint}, {"n_val", Kind::uint}, {"n_test", Kind::uint},
    {"noise", Kind::number},
};

const Schema kTrain = {
    {"d", Kind::uint},          {"layers", Kind::uint},       {"k", Kind::uint},
    {"train_prompts", Kind::uint}, {"eta_train", Kind::number}, {"steps", Kind::uint},
    {"init_scale", Kind::number},  {"probe_prompts", Kind::uint}, {"grad_clip", Kind::number},
};

const Schema kPrune = {
    {"layer", Kind::uint, true},
    {"module", Kind::choice, true, kSelectors},
    {"xi", Kind::number, true},
};

std::map<std::string, Schema> make_schemas() {
  std::map<std::string, Schema> m;
  m["verify"] = {{"suites", Kind::choice_array, false, suite_names()}, {"instances", Kind::uint}};
  m["svd-inspect"] = {{"matrix", Kind::matrix}, {"rows", Kind::uint}, {"cols", Kind::uint},
                      {"scale", Kind::number}};
  m["cond-profile"] = {{"stack", Kind::object, false, {}, &kStack},
                       {"k", Kind::uint},
                       {"module", Kind::choice, false, kClasses}};
  m["prune-sweep"] = {{"stack", Kind::object, false, {}, &kStack},
                      {"shots", Kind::uint_array},
                      {"candidates", Kind::number_array},
                      {"seeds", Kind::uint_array},
                      {"layers", Kind::uint_array},
                      {"modules", Kind::choice_array, false, kSelectors},
                      {"metric", Kind::choice, false, kMetrics},
                      {"negate", Kind::boolean},
                      {"batch", Kind::uint}};
  m["algo1"] = {{"stack", Kind::object, false, {}, &kStack},
                {"task", Kind::object, false, {}, &kTask},
                {"candidates", Kind::number_array},
                {"module", Kind::choice, false, kClasses},
                {"k", Kind::uint},
                {"metric", Kind::choice, false, kMetrics},
                {"negate", Kind::boolean}};
  m["garg-bench"] = {{"d", Kind::uint},
                     {"shots", Kind::uint_array},
                     {"tasks", Kind::uint},
                     {"gd_layers", Kind::uint},
                     {"train", Kind::object, false, {}, &kTrain}};
  m["bound-report"] = {{"stack", Kind::object, false, {}, &kStack},
                       {"shots", Kind::uint},
                       {"b", Kind::uint},
                       {"r_subgaussian", Kind::number},
                       {"n", Kind::uint},
                       {"prune", Kind::object, false, {}, &kPrune}};
  m["drop-layer-bench"] = {{"stack", Kind::object, false, {}, &kStack},
                           {"shots", Kind::uint},
                           {"batch", Kind::uint},
                           {"metric", Kind::choice, false, kMetrics},
                           {"negate", Kind::boolean}};
  return m;
}

const std::map<std::string, Schema>& schemas() {
  static const auto m = make_schemas();
  return m;
}

bool is_finite_number(const json& v) { return v.is_number() && std::isfinite(v.get<double>()); }

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ", ") + x;
  return out;
}

void check_value(const json& v, const Field& f, const std::string& path) {
  auto fail = [&](const std::string& what) { throw ConfigError(path + ": " + what); };
  auto in_choices = [&](const json& s) {
    return s.is_string() &&
           std::find(f.choices.begin(), f.choices.end(), s.get<std::string>()) != f.choices.end();
  };
  switch (f.kind) {
    case Kind::uint:
      if (!v.is_number_unsigned()) fail("expected a nonnegative integer");
      break;
    case Kind::number:
      if (!is_finite_number(v)) fail("expected a finite number");
      break;
    case Kind::boolean:
      if (!v.is_boolean()) fail("expected true or false");
      break;
    case Kind::string:
      if (!v.is_string()) fail("expected a string");
      break;
    case Kind::choice:
      if (!in_choices(v)) fail("expected one of {" + join(f.choices) + "}");
      break;
    case Kind::uint_array:
    case Kind::number_array:
    case Kind::choice_array:
      if (!v.is_array() || v.empty()) fail("expected a nonempty array");
      for (const json& e : v) {
        if (f.kind == Kind::uint_array && !e.is_number_unsigned()) fail("expected nonnegative integers");
        if (f.kind == Kind::number_array && !is_finite_number(e)) fail("expected finite numbers");
        if (f.kind == Kind::choice_array && !in_choices(e)) fail("expected entries from {" + join(f.choices) + "}");
      }
      break;
    case Kind::matrix: {
      if (!v.is_array() || v.empty()) fail("expected a nonempty array of rows");
      const std::size_t cols = v.front().is_array() ? v.front().size() : 0;
      for (const json& row : v) {
        if (!row.is_array() || row.size() != cols || cols == 0) fail("rows must be equal-length nonempty arrays");
        for (const json& e : row)
          if (!is_finite_number(e)) fail("matrix entries must be finite numbers");
      }
      break;
    }
    case Kind::object:
      if (!v.is_object()) fail("expected an object");
      if (f.nested) validate(v, *f.nested, path);
      break;
    case Kind::any:
      break;
  }
}

}  // namespace

void validate(const json& j, const Schema& schema, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = std::find_if(schema.begin(), schema.end(), [&](const Field& f) { return f.name == key; });
    if (it == schema.end()) throw ConfigError(path + ": unknown key '" + key + "'");
    check_value(value, *it, path + "." + key);
  }
  for (const Field& f : schema) {
    if (f.required && !j.contains(f.name)) throw ConfigError(path + ": missing required key '" + f.name + "'");
  }
  if (&schema == &kStack) {
    const int sources = int(j.contains("generate")) + int(j.contains("inline")) + int(j.contains("file"));
    if (sources != 1) throw ConfigError(path + ": exactly one of generate, inline, file is required");
  }
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"verify",       "svd-inspect", "cond-profile",
                                                 "prune-sweep",  "algo1",       "garg-bench",
                                                 "bound-report", "drop-layer-bench"};
  return names;
}

const Schema& params_schema(const std::string& command) {
  const auto it = schemas().find(command);
  if (it == schemas().end()) throw ConfigError("unknown command '" + command + "'");
  return it->second;
}

std::string RunConfig::canonical() const {
  return json{{"command", command}, {"seed", seed}, {"params", params}}.dump();
}

std::string RunConfig::hash() const { return git_blob_hash(canonical()); }

RunConfig parse_config(const std::string& text, const std::string& command_hint,
                       const std::optional<std::uint64_t>& seed_override) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ConfigError("config: empty document");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected an object");
  if (j.empty()) throw ConfigError("config: empty object");
  for (const auto& [key, value] : j.items()) {
    if (key != "command" && key != "seed" && key != "params") {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  RunConfig cfg;
  if (j.contains("command")) {
    if (!j["command"].is_string()) throw ConfigError("config.command: expected a string");
    cfg.command = j["command"].get<std::string>();
    if (!command_hint.empty() && command_hint != cfg.command) {
      throw ConfigError("config.command '" + cfg.command + "' disagrees with '" + command_hint + "'");
    }
  } else {
    cfg.command = command_hint;
  }
  if (cfg.command.empty()) throw ConfigError("config: no command given");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("config.seed: expected a 64-bit unsigned integer");
    cfg.seed = j["seed"].get<std::uint64_t>();
  } else if (!seed_override) {
    throw ConfigError("config: seed is mandatory (set it in the config or pass --seed)");
  }
  if (seed_override) cfg.seed = *seed_override;
  if (j.contains("params")) cfg.params = j["params"];
  validate(cfg.params, params_schema(cfg.command), "config.params");
  return cfg;
}

RunConfig default_config(const std::string& command, std::uint64_t seed) {
  params_schema(command);
  return RunConfig{command, seed, json::object()};
}

Stack build_stack(const json& spec, std::uint64_t seed, double eta, std::size_t k) {
  try {
    if (spec.contains("inline")) return stack_from_json(spec["inline"]);
    if (spec.contains("file")) {
      const std::string path = spec["file"].get<std::string>();
      json j;
      try {
        j = json::parse(read_text_file(path));
      } catch (const json::parse_error& e) {
        throw ConfigError("stack file " + path + ": " + e.what());
      }
      return stack_from_json(j);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("stack: ") + e.what());
  }
  const std::string kind = spec.value("generate", "gd");
  const std::size_t d = get_or<std::size_t>(spec, "d", 5);
  const std::size_t layers = get_or<std::size_t>(spec, "layers", 3);
  if (d < 1 || layers < 1) throw ConfigError("stack: d and layers must be >= 1");
  if (kind == "gd" || kind == "planted") {
    Stack s = construct_gd_stack(d, layers, get_or<double>(spec, "eta", eta), get_or<std::size_t>(spec, "k", k));
    if (kind == "gd") return s;
    const std::size_t at = get_or<std::size_t>(spec, "planted_layer", layers - 1);
    if (at >= layers) throw ConfigError("stack.planted_layer: outside the stack");
    return plant_attention_noise(s, at, get_or<double>(spec, "strength", 0.8));
  }
  const Variant v = variant_from_string(spec.value("variant", "linear"));
  const std::size_t d_out = get_or<std::size_t>(spec, "d_out", 1);
  const std::size_t mlp_dim = get_or<std::size_t>(spec, "mlp_dim", 0);
  if (kind == "random") {
    const double scale = get_or<double>(spec, "scale", 0.3);
    if (!(scale > 0.0)) throw ConfigError("stack.scale: must be positive");
    Rng rng(stream_seed(seed, 0x5eed));
    return random_stack(v, layers, d, d_out, scale, rng, mlp_dim);
  }
  // zero
  const std::size_t dim = d + d_out;
  const std::size_t h = mlp_dim == 0 ? dim : mlp_dim;
  std::vector<LayerWeights> ls;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerWeights w{Matrix(dim, dim), Matrix(dim, dim), Matrix(dim, dim), std::nullopt, 1.0};
    if (v == Variant::linear_mlp) w.mlp = MlpWeights{Matrix(h, dim), Matrix(dim, h)};
    ls.push_back(std::move(w));
  }
  return Stack(v, std::move(ls), d, d_out);
}

}  // namespace iclgd::cli
