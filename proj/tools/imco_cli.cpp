// Command-line front end: run one method, run the four-way ablation, or run
// the displacement-bound simulation suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "imco/imco.hpp"

namespace {

imco::RunConfig load_with_overrides(const std::string& config_path, const std::vector<std::string>& sets) {
  imco::RunConfig cfg = config_path.empty() ? imco::RunConfig{} : imco::load_run_config(config_path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw imco::ConfigError("--set expects key=value, got '" + kv + "'");
    imco::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void print_metrics(const std::vector<imco::SessionMetrics>& metrics) {
  std::printf("%-8s %8s %8s %9s %11s %9s\n", "session", "acc_all", "acc_base", "acc_novel", "forgetting", "disp_ratio");
  for (const auto& m : metrics) {
    std::printf("%-8d %8.4f %8.4f ", m.session, m.acc_all, m.acc_base);
    if (m.acc_novel < 0)
      std::printf("%9s ", "-");
    else
      std::printf("%9.4f ", m.acc_novel);
    std::printf("%11.4f %9.4f\n", m.forgetting, m.max_disp_ratio);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental few-shot learning by implanting and compressing"};
  app.require_subcommand(1);

  std::string config_path;
  std::string method;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> sets;

  auto* run = app.add_subcommand("run", "Run the full protocol for one method");
  run->add_option("--config", config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
  run->add_option("--method", method, "imco | imco_no_implant | frozen_prototype | naive_finetune");
  auto* seed_opt = run->add_option("--seed", seed, "Master seed");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--set", sets, "Override a config key, key=value (repeatable)");

  int seeds = 5;
  std::string ablate_out;
  auto* ablate = app.add_subcommand("ablate", "Run all four methods over several seeds");
  ablate->add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
  ablate->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
  ablate->add_option("--out", ablate_out, "Write the comparison table as CSV here");
  ablate->add_option("--set", sets, "Override a config key, key=value (repeatable)");

  std::uint64_t bound_seed = 2022;
  int streams = 1000;
  auto* check = app.add_subcommand("check-bounds", "Run the DMF displacement-bound simulations");
  check->add_option("--seed", bound_seed, "Seed for the random gradient streams");
  check->add_option("--streams", streams, "Number of random gradient streams");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      imco::RunConfig cfg = load_with_overrides(config_path, sets);
      if (!method.empty()) cfg.method = imco::parse_method(method);
      if (*seed_opt) cfg.seed = seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      const imco::RunResult result = imco::run_pipeline(cfg);
      std::printf("method %s, seed %llu\n", imco::method_name(cfg.method), static_cast<unsigned long long>(cfg.seed));
      print_metrics(result.metrics);
      if (!cfg.out_dir.empty()) {
        imco::emit_outputs(result, cfg.out_dir);
        std::printf("outputs written to %s\n", cfg.out_dir.c_str());
      }
    } else if (*ablate) {
      const imco::RunConfig cfg = load_with_overrides(config_path, sets);
      const auto rows = imco::run_ablation(cfg, seeds);
      std::printf("final session, median over %d seeds\n", seeds);
      std::printf("%-18s %8s %8s %9s %11s\n", "method", "acc_all", "acc_base", "acc_novel", "forgetting");
      for (const auto& r : rows)
        std::printf("%-18s %8.4f %8.4f %9.4f %11.4f\n", imco::method_name(r.method), r.acc_all, r.acc_base, r.acc_novel,
                    r.forgetting);
      if (!ablate_out.empty()) {
        std::ofstream out(ablate_out);
        if (!out) throw imco::IoError("cannot write " + ablate_out);
        out << "method,acc_all,acc_base,acc_novel,forgetting\n";
        for (const auto& r : rows)
          out << imco::method_name(r.method) << ',' << r.acc_all << ',' << r.acc_base << ',' << r.acc_novel << ','
              << r.forgetting << '\n';
      }
    } else if (*check) {
      const auto s = imco::run_bound_checks(bound_seed, streams);
      std::printf("worst case: displacement %.17g, bound %.17g\n", s.worst_case_displacement, s.worst_case_bound);
      std::printf("random streams: %d, max displacement/bound %.17g\n", s.random_streams, s.random_max_ratio);
      std::printf("%s\n", s.passed ? "PASS" : "FAIL");
      return s.passed ? 0 : 1;
    }
  } catch (const imco::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
