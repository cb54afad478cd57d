// Command-line entry points: synth, train, eval, predict, gradcheck,
// dump-attention. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
// failure. GELATTO_THREADS caps worker parallelism.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "gelatto/gradcheck_suite.hpp"
#include "gelatto/runner.hpp"

namespace fs = std::filesystem;
using namespace gelatto;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::string> out_dir;
  std::optional<std::string> data_dir;
  std::optional<std::string> checkpoint;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value sections)");
    cmd->add_option("--seed", seed, "seed override");
    cmd->add_flag("--deterministic", deterministic, "deterministic neighbor grouping everywhere");
    cmd->add_option("--out", out_dir, "output directory override");
    cmd->add_option("--data", data_dir, "dataset directory override");
    cmd->add_option("--checkpoint", checkpoint, "checkpoint path override");
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.scene.seed = *seed;
    }
    if (deterministic) cfg.deterministic = true;
    if (out_dir) cfg.out_dir = *out_dir;
    if (data_dir) cfg.data_dir = *data_dir;
    if (checkpoint) cfg.checkpoint = *checkpoint;
    return cfg;
  }
};

SegModel load_model_checked(const RunConfig& cfg, bool config_had_model) {
  if (cfg.checkpoint.empty()) throw ValidationError("no checkpoint given (--checkpoint or config)");
  LoadedCheckpoint loaded = load_checkpoint(cfg.checkpoint);
  if (config_had_model &&
      ckptdetail::model_config_to_json(loaded.model.cfg) !=
          ckptdetail::model_config_to_json(cfg.model))
    throw ValidationError("checkpoint/config mismatch: [model] section disagrees with '" +
                          cfg.checkpoint + "'");
  return std::move(loaded.model);
}

int cmd_synth(const CommonArgs& args) {
  RunConfig cfg = args.resolve();
  const std::string out = cfg.out_dir;
  synth_dataset(cfg, out);
  std::cout << "wrote " << cfg.synth_train_count << " train / " << cfg.synth_test_count
            << " test scenes under " << out << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  RunConfig cfg = args.resolve();
  cfg.validate();
  if (cfg.data_dir.empty()) throw ValidationError("train: no data directory (--data or config)");
  Dataset train_ds = load_dataset_dir((fs::path(cfg.data_dir) / "train").string(),
                                      static_cast<int>(cfg.model.num_classes));
  Dataset val_ds;
  const std::string test_dir = (fs::path(cfg.data_dir) / "test").string();
  if (fs::is_directory(test_dir))
    val_ds = load_dataset_dir(test_dir, static_cast<int>(cfg.model.num_classes));

  fs::create_directories(cfg.out_dir);
  cfg.to_kv().write((fs::path(cfg.out_dir) / "config_used.cfg").string());
  TrainResult result = train_run(cfg, train_ds, val_ds, &std::cout);
  std::cout << "final checkpoint: " << result.last_path << "\n";
  if (result.best_val_miou >= 0)
    std::cout << "best val mIoU " << result.best_val_miou << " at " << result.best_path << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, bool config_had_model) {
  RunConfig cfg = args.resolve();
  if (cfg.data_dir.empty()) throw ValidationError("eval: no data directory (--data or config)");
  SegModel model = load_model_checked(cfg, config_had_model);
  std::string dir = cfg.data_dir;
  if (fs::is_directory((fs::path(dir) / "test").string())) dir = (fs::path(dir) / "test").string();
  Dataset ds = load_dataset_dir(dir, static_cast<int>(model.cfg.num_classes));
  EvalResult ev = evaluate_dataset(model, ds, cfg);
  std::vector<std::string> class_names;
  for (const auto& c : cfg.scene.classes) class_names.push_back(c.name);
  std::cout << format_metrics_table(ev.metrics, class_names);
  fs::create_directories(cfg.out_dir);
  write_metrics_kv(ev.metrics, (fs::path(cfg.out_dir) / "metrics.kv").string());
  std::cout << "metrics written to " << (fs::path(cfg.out_dir) / "metrics.kv").string() << "\n";
  return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& input, bool config_had_model) {
  RunConfig cfg = args.resolve();
  SegModel model = load_model_checked(cfg, config_had_model);
  PointCloud scene = read_cloud(input);
  scene.validate();
  const auto labels = predict_scene(model, scene, cfg);
  PointCloud out = scene;
  out.labels = labels;  // original coordinates preserved; offsets only used internally
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / "predictions.pts").string();
  write_cloud(out, path);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_gradcheck(bool inject_fault) {
  GradcheckReport report = run_micro_network_gradcheck(1e-4, inject_fault);
  std::cout.setf(std::ios::scientific);
  std::cout << "checked " << report.entries.size() << " parameter tensors, tolerance "
            << report.tolerance << "\n";
  std::cout << "worst: " << report.worst_name << " rel err " << report.worst_err << "\n";
  std::cout << (report.passed ? "PASS" : "FAIL") << "\n";
  return report.passed ? 0 : 3;
}

int cmd_dump_attention(const CommonArgs& args, const std::string& input, std::size_t point,
                       int channel, bool config_had_model) {
  RunConfig cfg = args.resolve();
  SegModel model = load_model_checked(cfg, config_had_model);
  PointCloud scene = read_cloud(input);
  scene.validate();
  AttentionDumpResult res = dump_attention(model, scene, cfg, point, channel, cfg.out_dir);
  std::cout << "channel " << res.channel << ", levels covered: " << res.levels_covered << "\n";
  if (res.eliminated)
    std::cout << "point eliminated by sampling at level " << res.eliminated_at << "\n";
  for (const auto& f : res.files) std::cout << "  " << f << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ge-Latto two-headed point cloud segmentation"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, predict_args, dump_args;
  std::string predict_input, dump_input;
  std::size_t dump_point = 0;
  int dump_channel = -1;
  bool inject_fault = false;

  CLI::App* synth = app.add_subcommand("synth", "generate labeled synthetic scenes");
  synth_args.attach(synth);
  CLI::App* train = app.add_subcommand("train", "train a model");
  train_args.attach(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint with softmax voting");
  eval_args.attach(eval);
  CLI::App* predict = app.add_subcommand("predict", "label a cloud file");
  predict_args.attach(predict);
  predict->add_option("--input", predict_input, "cloud file to label")->required();
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_flag("--inject-fault", inject_fault, "corrupt one backward rule (must fail)");
  CLI::App* dump = app.add_subcommand("dump-attention", "export per-layer attention scores");
  dump_args.attach(dump);
  dump->add_option("--input", dump_input, "cloud file")->required();
  dump->add_option("--point", dump_point, "input point index to trace")->required();
  dump->add_option("--channel", dump_channel, "score channel d (default: random under seed)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_args);
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) {
      const bool had_model = !eval_args.config_path.empty() &&
                             KvFile::parse_file(eval_args.config_path).find("model") != nullptr;
      return cmd_eval(eval_args, had_model);
    }
    if (predict->parsed()) {
      const bool had_model = !predict_args.config_path.empty() &&
                             KvFile::parse_file(predict_args.config_path).find("model") != nullptr;
      return cmd_predict(predict_args, predict_input, had_model);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(inject_fault);
    if (dump->parsed()) {
      const bool had_model = !dump_args.config_path.empty() &&
                             KvFile::parse_file(dump_args.config_path).find("model") != nullptr;
      return cmd_dump_attention(dump_args, dump_input, dump_point, dump_channel, had_model);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IndexError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
