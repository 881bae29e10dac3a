// Command-line front end: detect / extract / split / train / eval / report.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <emorec/emorec.hpp>

namespace {

emorec::RunConfig config_for(const std::string& config_path, bool seed_set, uint64_t seed) {
  emorec::RunConfig cfg;
  if (!config_path.empty()) cfg = emorec::load_run_config(config_path);
  if (seed_set) cfg.solver.seed = seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"facial-emotion recognition pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // lets `emorec train --config x` find the app-level option

  std::string config_path;
  uint64_t seed_override = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "key=value run configuration")->envname("EMOREC_CONFIG");
  app.add_option("--seed", seed_override, "override the config seed")
      ->each([&seed_set](const std::string&) { seed_set = true; });

  auto* detect = app.add_subcommand("detect", "detect faces, print a detection CSV");
  std::vector<std::string> detect_images;
  std::string cascade_path, mouth_cascade_path;
  double scale_factor = 1.1;
  int min_neighbors = 3, min_size = 0;
  double group_eps = 0.2;
  detect->add_option("images", detect_images, "PGM images")->required();
  detect->add_option("--cascade", cascade_path, "face cascade XML")->required();
  detect->add_option("--scale-factor", scale_factor, "pyramid step, > 1");
  detect->add_option("--min-neighbors", min_neighbors, "grouping threshold");
  detect->add_option("--min-size", min_size, "smallest window side, 0 = cascade base");
  detect->add_option("--group-eps", group_eps, "rectangle similarity tolerance");

  auto* extract = app.add_subcommand("extract", "crop mouth regions from detected faces");
  std::string extract_dir, out_dir;
  extract->add_option("images", extract_dir, "directory of PGM images")->required();
  extract->add_option("--cascade", cascade_path, "face cascade XML")->required();
  extract->add_option("--mouth-cascade", mouth_cascade_path, "mouth cascade XML")->required();
  extract->add_option("--out", out_dir, "output directory")->required();
  extract->add_option("--scale-factor", scale_factor, "pyramid step, > 1");
  extract->add_option("--min-neighbors", min_neighbors, "grouping threshold");
  extract->add_option("--min-size", min_size, "smallest window side, 0 = cascade base");
  extract->add_option("--group-eps", group_eps, "rectangle similarity tolerance");

  auto* split = app.add_subcommand("split", "print the train/validation/test manifest");

  auto* train = app.add_subcommand("train", "train a network per the config");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string checkpoint_path, dataset_dir, positive_class;
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--dataset", dataset_dir, "dataset directory (overrides config)");
  eval->add_option("--positive-class", positive_class, "class whose F1 is reported");

  auto* report = app.add_subcommand("report", "merge TrainLog CSVs, mark best rows");
  std::vector<std::string> report_csvs;
  report->add_option("logs", report_csvs, "TrainLog CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*detect || *extract) {
      emorec::DetectParams params;
      params.scale_factor = scale_factor;
      params.min_neighbors = min_neighbors;
      params.min_size = min_size;
      params.eps = group_eps;
      if (*detect)
        return emorec::cmd_detect(detect_images, cascade_path, params, std::cout, std::cerr);
      return emorec::cmd_extract(extract_dir, cascade_path, mouth_cascade_path, params, out_dir,
                                 std::cerr);
    }
    emorec::RunConfig cfg = config_for(config_path, seed_set, seed_override);
    if (*split) return emorec::cmd_split(cfg, std::cout, std::cerr);
    if (*train) return emorec::cmd_train(cfg, std::cout, std::cerr);
    if (*eval) {
      if (!positive_class.empty()) cfg.positive_class = positive_class;
      return emorec::cmd_eval(cfg, checkpoint_path, dataset_dir, std::cout, std::cerr);
    }
    return emorec::cmd_report(report_csvs, std::cout, std::cerr);
  } catch (const emorec::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
