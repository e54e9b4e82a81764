#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "config.hpp"

namespace iclgd::cli {

struct Context {
  RunConfig cfg;
  unsigned threads = 1;
  std::string fault;
  std::optional<std::filesystem::path> out_dir;
  std::ostream& out;
  std::ostream& err;
  nlohmann::json summary = nlohmann::json::object();
  std::map<std::string, std::string> outputs;  // file name -> blob hash

  // Records the content hash and writes into the output directory, if any.
  void write(const std::string& name, const std::string& content);
};

// Runs ctx.cfg.command; returns the exit code.
int dispatch(Context& ctx);

}  // namespace iclgd::cli
