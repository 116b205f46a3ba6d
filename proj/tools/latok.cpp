// Experiment pipeline driver: gen | train | eval | report.
//
// Every config key is mirrored by a --key flag; flags override the file given
// with --config. Exit codes: 0 success, 1 user error (flags, config, missing
// or mismatched files), 2 internal error.
#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "latok/harness.hpp"

namespace {

struct FlagSet {
  std::vector<std::pair<std::string, std::string>> kv;  // in flag order
  std::string config_path;
};

// One string option per config key keeps the file and flag paths identical:
// both funnel through apply_config_kv.
void add_config_flags(CLI::App* cmd, FlagSet& flags) {
  static const char* keys[] = {
      "task",    "box",     "seq_len",     "holes",       "houses",      "attrs",
      "clues",   "operands", "preset",     "hidden",      "layers",      "heads",
      "mlp_ratio", "objective", "window",  "epochs",      "batch",       "lr",
      "weight_decay", "warmup_frac", "decay", "val_count", "dataset", "val_dataset", "resume",
      "sampler", "decode",  "temperature", "latents",     "k",           "episodes",
      "seeds",   "checkpoint", "trace",    "count",       "seed",        "out"};
  cmd->add_option("--config", flags.config_path, "config file of key = value lines");
  for (const char* key : keys) {
    std::string name = key;
    cmd->add_option_function<std::string>(
        "--" + name, [&flags, name](const std::string& v) { flags.kv.emplace_back(name, v); },
        "config key " + name);
  }
}

latok::ExperimentConfig resolve(const FlagSet& flags) {
  latok::ExperimentConfig c;
  if (!flags.config_path.empty()) c = latok::load_config_file(flags.config_path);
  for (const auto& [key, value] : flags.kv) latok::apply_config_kv(c, key, value);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-token diffusion experiment pipeline"};
  app.require_subcommand(1);

  FlagSet gen_flags, train_flags, eval_flags, report_flags;
  CLI::App* gen = app.add_subcommand("gen", "generate a puzzle dataset (NDJSON)");
  add_config_flags(gen, gen_flags);
  CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
  add_config_flags(train, train_flags);
  CLI::App* eval = app.add_subcommand("eval", "run evaluation episodes, write metrics CSV");
  add_config_flags(eval, eval_flags);

  std::string report_csv, report_out = "report";
  CLI::App* report = app.add_subcommand("report", "aggregate a metrics CSV across seeds");
  report->add_option("csv", report_csv, "metrics CSV from eval")->required();
  report->add_option("--out", report_out, "output directory for summary and data files");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) {
      latok::ExperimentConfig c = resolve(gen_flags);
      std::string path = latok::run_gen(c);
      std::printf("wrote %d instances to %s\n", c.count, path.c_str());
    } else if (train->parsed()) {
      latok::ExperimentConfig c = resolve(train_flags);
      latok::TrainResult r = latok::run_train(c);
      std::printf("trained %d epochs; best val %.6f (epoch %d)\nbest: %s\nlast: %s\nlog:  %s\n",
                  r.epochs_run, r.best_val, r.best_epoch, r.best_path.c_str(),
                  r.last_path.c_str(), r.log_path.c_str());
    } else if (eval->parsed()) {
      latok::ExperimentConfig c = resolve(eval_flags);
      auto rows = latok::run_eval(c);
      std::filesystem::create_directories(c.out);
      std::string csv = c.out + "/metrics.csv";
      latok::write_metrics_csv(csv, rows);
      for (const auto& r : rows)
        std::printf("%s %s n=%s seed=%llu acc=%.4f cost=%s\n", r.task.c_str(), r.variant.c_str(),
                    r.n_label.c_str(), (unsigned long long)r.seed, r.accuracy,
                    latok::format_rel_cost(r.rel_cost).c_str());
      std::printf("wrote %zu rows to %s\n", rows.size(), csv.c_str());
    } else if (report->parsed()) {
      latok::ReportResult r = latok::run_report(report_csv, report_out);
      std::fputs(r.summary.c_str(), stdout);
      std::printf("data files in %s\n", report_out.c_str());
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::runtime_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
