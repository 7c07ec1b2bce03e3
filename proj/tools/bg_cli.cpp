// Command line driver for the branch generation pipeline. Exit codes:
// 0 success, 1 usage error, 2 pipeline error.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bg/pipeline.hpp"

namespace {

struct Args {
  std::string config;
  std::string out_dir = "run";
  std::optional<uint64_t> seed_override;
  bool baseline = false;
};

void attach_common(CLI::App* sub, Args& args) {
  sub->add_option("--config", args.config, "run configuration (json)")
      ->required();
  sub->add_option("--out-dir", args.out_dir, "artifact directory")
      ->capture_default_str();
  sub->add_option("--stage-seed-override", args.seed_override,
                  "replace the derived seed of every stage this command runs");
  sub->add_flag("--baseline", args.baseline,
                "also train and evaluate a policy on the unexpanded dataset");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion branch generation pipeline"};
  app.require_subcommand(1);

  Args args;
  std::vector<std::string> commands = {"collect", "train-tvf", "train-diffusion",
                                       "gen-branches", "expand", "train-dt",
                                       "eval", "all", "plot", "report"};
  for (const std::string& name : commands) {
    CLI::App* sub = app.add_subcommand(name);
    attach_common(sub, args);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const bg::cfg::RunConfig cfg = bg::cfg::load_config(args.config);
    bg::pipe::StageOptions opt;
    opt.out_dir = args.out_dir;
    opt.seed_override = args.seed_override;
    opt.baseline = args.baseline;

    if (command == "all") {
      for (const std::string& stage : bg::pipe::stage_names()) {
        bg::pipe::run_stage(cfg, opt, stage);
        std::printf("%s: done\n", stage.c_str());
      }
    } else if (command == "plot") {
      bg::pipe::load_manifest(cfg, opt);  // refuse mixed-config artifacts
      const std::string svg = bg::pipe::artifact_path(opt, "branches.svg");
      bg::pipe::plot_branches(cfg, bg::pipe::artifact_path(opt, "dataset.bin"),
                              bg::pipe::artifact_path(opt, "candidates.jsonl"), svg);
      std::printf("wrote %s\n", svg.c_str());
    } else if (command == "report") {
      std::fputs(bg::pipe::format_report(cfg, opt).c_str(), stdout);
    } else {
      bg::pipe::run_stage(cfg, opt, command);
      std::printf("%s: done\n", command.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
