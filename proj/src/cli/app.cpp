#include "iclgd/cli.hpp"

#include <filesystem>
#include <optional>

#include <CLI11.hpp>

#include "commands.hpp"
#include "config.hpp"
#include "iclgd/io.hpp"

namespace iclgd {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"iclgd: implicit-gradient experiments on toy in-context learners", "iclgd"};
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string fault;
  app.add_option("command", command, "verify | svd-inspect | cond-profile | prune-sweep | algo1 | "
                                     "garg-bench | bound-report | drop-layer-bench")
      ->check(CLI::IsMember(cli::command_names()));
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--out", out_dir, "directory for result files");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 1024u));
  app.add_option("--inject-fault", fault, "sabotage one verify suite (testing only)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  try {
    cli::RunConfig cfg;
    if (!config_path.empty()) {
      std::string text;
      try {
        text = read_text_file(config_path);
      } catch (const std::exception& e) {
        throw cli::ConfigError(e.what());
      }
      cfg = cli::parse_config(text, command, seed);
    } else {
      if (command.empty()) throw cli::ConfigError("no command given");
      cfg = cli::default_config(command, seed.value_or(0));
    }
    cli::Context ctx{cfg, threads, fault, std::nullopt, out, err, nlohmann::json::object(), {}};
    if (!out_dir.empty()) {
      ctx.out_dir = std::filesystem::path(out_dir);
      std::filesystem::create_directories(*ctx.out_dir);
    }
    return cli::dispatch(ctx);
  } catch (const cli::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid parameter: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "invalid parameter: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailure;
  }
}

}  // namespace iclgd
