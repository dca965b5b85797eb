#include <CLI11.hpp>

#include <iostream>

#include "beamxray/cli.hpp"

using namespace beamxray;

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-beam and broken X-ray experiments on unitary connections"};
  app.footer(cli::help_text());
  std::string config, out;
  std::vector<std::string> sets;
  int threads = 0;
  long long seed = -1;
  bool dump = false;
  app.add_option("--config", config, "scenario file");
  app.add_option("--set", sets, "override, section.key=value (repeatable)");
  app.add_option("--out", out, "output directory (overrides run.output_dir)");
  app.add_option("--threads", threads, "worker threads (default: BEAMXRAY_THREADS or 1)");
  app.add_option("--seed", seed, "overrides run.seed");
  app.add_flag("--dump-config", dump, "print the effective config and exit");
  CLI11_PARSE(app, argc, argv);

  try {
    cli::Scenario s = config.empty() ? cli::Scenario() : cli::Scenario::load(config);
    for (const auto& kv : sets) s.apply_override(kv);
    if (seed >= 0) s.set("run", "seed", std::to_string(seed));
    if (!out.empty()) s.set("run", "output_dir", out);
    if (dump) {
      std::cout << s.dump();
      return 0;
    }
    cli::RunContext ctx;
    ctx.out_dir = s.str("run", "output_dir");
    ctx.threads = resolve_threads(threads);
    return cli::run(s, ctx);
  } catch (const cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 64;
  }
}
