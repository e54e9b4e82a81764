#pragma once
//
// Property suites run by `iclgd verify`. Each suite draws its instances from
// stream_seed(seed, suite index), so reports are identical for any thread count.
//

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace iclgd {

struct SuiteResult {
  std::string name;
  bool passed = true;
  double max_residual = 0.0;  // worst normalized residual, compared against tolerance
  double tolerance = 0.0;
  std::size_t instances = 0;
  std::string failure;  // first failing check
};

const std::vector<std::string>& suite_names();

/// `fault` names a suite whose check is sabotaged on purpose (empty for none).
/// `instances` of 0 uses each suite's default count.
std::vector<SuiteResult> run_suites(const std::vector<std::string>& which, std::uint64_t seed,
                                    unsigned threads, const std::string& fault,
                                    std::size_t instances = 0);

nlohmann::json suite_results_to_json(const std::vector<SuiteResult>& r);

}  // namespace iclgd
