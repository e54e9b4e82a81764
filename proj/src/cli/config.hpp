#pragma once
//
// Run configuration: {"command", "seed", "params"} with per-command parameter
// schemas. Validation happens before any computation.
//

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/icl_bench.hpp"
#include "iclgd/model.hpp"

namespace iclgd::cli {

// Bad flags, unreadable or schema-violating config: exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { uint, number, boolean, string, choice, uint_array, number_array, choice_array, matrix, object, any };

struct Field;
using Schema = std::vector<Field>;

struct Field {
  std::string name;
  Kind kind;
  bool required = false;
  std::vector<std::string> choices{};
  const Schema* nested = nullptr;
};

// Throws ConfigError naming the offending path; unknown keys are rejected.
void validate(const nlohmann::json& j, const Schema& schema, const std::string& path);

const std::vector<std::string>& command_names();
const Schema& params_schema(const std::string& command);

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json params = nlohmann::json::object();

  // Canonical (sorted-key) dump of command, seed and params.
  std::string canonical() const;
  std::string hash() const;
};

/// Parses and validates a config document. `seed_override` replaces the
/// config's seed; without either the seed is a ConfigError.
RunConfig parse_config(const std::string& text, const std::string& command_hint,
                       const std::optional<std::uint64_t>& seed_override);

/// Defaults when no config file is given at all.
RunConfig default_config(const std::string& command, std::uint64_t seed);

// Typed accessors with defaults (params are already validated).
template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

/// Builds a stack from a validated "stack" block: exactly one of
/// generate / inline / file. `eta` and `k` feed the GD constructions.
Stack build_stack(const nlohmann::json& spec, std::uint64_t seed, double eta, std::size_t k);

}  // namespace iclgd::cli
