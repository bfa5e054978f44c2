#include <CLI11.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <iomanip>
#include <iostream>

#include "kdtrojan/experiment.hpp"
#include "kdtrojan/report.hpp"

namespace kdt = kdtrojan;
using json = nlohmann::json;

namespace {

struct DataOpts {
  std::string source = "cifar10";
  std::string cifar_dir = "data/cifar-10-batches-bin";
  uint64_t synthetic_seed = 123;
  int64_t synthetic_train = 10000;
  int64_t synthetic_test = 2000;
  int64_t train_subset = 0;
  int64_t test_subset = 0;

  kdt::DataConfig to_config() const {
    kdt::DataConfig c;
    c.source = kdt::data_source_from_string(source);
    c.cifar_dir = cifar_dir;
    c.synthetic_seed = synthetic_seed;
    c.synthetic_train = synthetic_train;
    c.synthetic_test = synthetic_test;
    c.train_subset = train_subset;
    c.test_subset = test_subset;
    return c;
  }
};

void add_data_options(CLI::App* cmd, DataOpts& opts) {
  cmd->add_option("--data-source", opts.source, "Data source: cifar10 or synthetic")
      ->check(CLI::IsMember({"cifar10", "synthetic"}))
      ->capture_default_str();
  cmd->add_option("--cifar-dir", opts.cifar_dir, "Directory with CIFAR-10 binary batches")
      ->capture_default_str();
  cmd->add_option("--synthetic-seed", opts.synthetic_seed, "Synthetic data seed")
      ->capture_default_str();
  cmd->add_option("--synthetic-train", opts.synthetic_train, "Synthetic train size")
      ->capture_default_str();
  cmd->add_option("--synthetic-test", opts.synthetic_test, "Synthetic test size")
      ->capture_default_str();
  cmd->add_option("--train-subset", opts.train_subset, "Cap the train split (0 = all)")
      ->capture_default_str();
  cmd->add_option("--test-subset", opts.test_subset, "Cap the test split (0 = all)")
      ->capture_default_str();
}

struct DistillOpts {
  double temperature = 5.0;
  double alpha = 0.5;
  std::string alpha_mode = "argmax-ce";
  int64_t epochs = 30;
  int64_t batch_size = 128;
  double lr = 1e-3;
  uint64_t data_order_seed = 0;
  int64_t probe_every = 0;

  kdt::DistillConfig to_config() const {
    kdt::DistillConfig c;
    c.temperature = temperature;
    c.alpha = alpha;
    c.alpha_mode = kdt::alpha_mode_from_string(alpha_mode);
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = lr;
    c.data_order_seed = data_order_seed;
    c.probe_every = probe_every;
    return c;
  }
};

void add_distill_options(CLI::App* cmd, DistillOpts& opts) {
  cmd->add_option("--temperature,-T", opts.temperature, "Distillation temperature")
      ->capture_default_str();
  cmd->add_option("--alpha", opts.alpha, "Weight of the tempered KL term")->capture_default_str();
  cmd->add_option("--alpha-mode", opts.alpha_mode, "Second loss term: argmax-ce or second-kl")
      ->check(CLI::IsMember({"argmax-ce", "second-kl"}))
      ->capture_default_str();
  cmd->add_option("--epochs", opts.epochs, "Distillation epochs")->capture_default_str();
  cmd->add_option("--batch-size", opts.batch_size, "Batch size")->capture_default_str();
  cmd->add_option("--lr", opts.lr, "Learning rate")->capture_default_str();
  cmd->add_option("--data-order-seed", opts.data_order_seed, "Batch-order shuffle seed")
      ->capture_default_str();
  cmd->add_option("--probe-every", opts.probe_every,
                  "Evaluate TE/CA/TCA on the test split every N epochs (0 = off)")
      ->capture_default_str();
}

std::ostream& metrics_line(std::ostream& os, const kdt::MetricsTriple& m) {
  os << std::fixed << std::setprecision(2) << "TE " << m.trigger_effectiveness << "  CA "
     << m.clean_accuracy << "  TCA " << m.target_clean_accuracy;
  return os;
}

void dump_patch_json(const kdt::TriggerPatch& patch, const std::filesystem::path& path) {
  json j{{"seed", patch.seed},
         {"kind", kdt::to_string(patch.kind)},
         {"sha256", patch.sha256()},
         {"order", "channel-major (c, row, col)"},
         {"pixels", patch.flat_pixels()}};
  kdt::write_file_text(path, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trojan insertion and evaluation for unlabelled-data knowledge distillation"};
  app.set_config("--config", "", "Read options from an INI/TOML file");
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Torch thread count (0 = library default)");

  // --- train-teacher -----------------------------------------------------
  auto* train_cmd = app.add_subcommand("train-teacher", "Fine-tune the ResNet-18 teacher");
  DataOpts train_data;
  add_data_options(train_cmd, train_data);
  std::string teacher_out;
  uint64_t teacher_seed = 0;
  kdt::FinetuneSchedule schedule;
  bool no_augment = false;
  train_cmd->add_option("--out", teacher_out, "Teacher checkpoint path")->required();
  train_cmd->add_option("--seed", teacher_seed, "Init seed")->capture_default_str();
  train_cmd->add_option("--epochs", schedule.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", schedule.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--lr", schedule.lr, "Peak learning rate (cosine decay)")
      ->capture_default_str();
  train_cmd->add_option("--momentum", schedule.momentum, "SGD momentum")->capture_default_str();
  train_cmd->add_option("--weight-decay", schedule.weight_decay, "Weight decay")
      ->capture_default_str();
  train_cmd->add_option("--shuffle-seed", schedule.shuffle_seed, "Epoch shuffle seed")
      ->capture_default_str();
  train_cmd->add_option("--accuracy-floor", schedule.accuracy_floor,
                        "Warn when test accuracy lands below this")
      ->capture_default_str();
  train_cmd->add_flag("--no-augment", no_augment, "Disable crop/flip augmentation");

  // --- build-dataset -----------------------------------------------------
  auto* build_cmd = app.add_subcommand("build-dataset", "Precompute a poisoned distillation set");
  DataOpts build_data;
  add_data_options(build_cmd, build_data);
  std::string build_teacher_path, build_out, dump_patch_path;
  kdt::PoisonConfig poison;
  std::string soft_source = "poisoned-input", patch_kind = "uniform";
  build_cmd->add_option("--teacher", build_teacher_path, "Teacher checkpoint")->required();
  build_cmd->add_option("--out", build_out, "Output dataset directory")->required();
  build_cmd->add_option("--fraction", poison.poisoned_fraction, "Poisoned fraction in [0,1]")
      ->required();
  build_cmd->add_option("--target-class", poison.target_class, "Target class id")
      ->capture_default_str();
  build_cmd->add_option("--patch-seed", poison.patch_seed, "Trigger patch seed")
      ->capture_default_str();
  build_cmd->add_option("--selection-seed", poison.selection_seed, "Poison selection seed")
      ->capture_default_str();
  build_cmd->add_option("--soft-target-source", soft_source, "poisoned-input or clean-input")
      ->check(CLI::IsMember({"poisoned-input", "clean-input"}))
      ->capture_default_str();
  build_cmd->add_option("--patch-kind", patch_kind, "uniform or binary")
      ->check(CLI::IsMember({"uniform", "binary"}))
      ->capture_default_str();
  build_cmd->add_option("--dump-patch", dump_patch_path, "Also write the 48 patch floats as JSON");

  // --- distill -------------------------------------------------------------
  auto* distill_cmd = app.add_subcommand("distill", "Train a student on a precomputed dataset");
  DataOpts distill_data;
  add_data_options(distill_cmd, distill_data);
  DistillOpts distill_opts;
  add_distill_options(distill_cmd, distill_opts);
  std::string distill_dataset, distill_out;
  uint64_t student_seed = 1;
  distill_cmd->add_option("--dataset", distill_dataset, "Dataset directory")->required();
  distill_cmd->add_option("--out", distill_out, "Output run directory")->required();
  distill_cmd->add_option("--student-seed", student_seed, "Student init seed")
      ->capture_default_str();

  // --- evaluate ------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("evaluate", "Compute TE / CA / TCA for a checkpoint");
  DataOpts eval_data;
  add_data_options(eval_cmd, eval_data);
  std::string eval_model, eval_out, eval_patch_kind = "uniform";
  uint64_t eval_patch_seed = 7;
  int64_t eval_target = 0;
  bool eval_benignity = false;
  eval_cmd->add_option("--model", eval_model, "Model checkpoint")->required();
  eval_cmd->add_option("--patch-seed", eval_patch_seed, "Trigger patch seed")
      ->capture_default_str();
  eval_cmd->add_option("--patch-kind", eval_patch_kind, "uniform or binary")
      ->check(CLI::IsMember({"uniform", "binary"}))
      ->capture_default_str();
  eval_cmd->add_option("--target-class", eval_target, "Target class id")->capture_default_str();
  eval_cmd->add_flag("--benignity", eval_benignity,
                     "Also report clean vs triggered accuracy of the model");
  eval_cmd->add_option("--out", eval_out, "Optional metrics JSON path");

  // --- sweep ---------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "Run the poisoned-percentage sweep");
  DataOpts sweep_data;
  add_data_options(sweep_cmd, sweep_data);
  DistillOpts sweep_distill;
  add_distill_options(sweep_cmd, sweep_distill);
  kdt::SweepSpec sweep_spec;
  std::string sweep_teacher, sweep_root = "runs", sweep_id = "sweep";
  std::string sweep_soft_source = "poisoned-input", sweep_patch_kind = "uniform";
  int64_t sweep_target = 0;
  bool sweep_overwrite = false;
  sweep_cmd->add_option("--teacher", sweep_teacher, "Teacher checkpoint")->required();
  sweep_cmd->add_option("--out", sweep_root, "Sweep root directory")->capture_default_str();
  sweep_cmd->add_option("--id", sweep_id, "Sweep id (subdirectory name)")->capture_default_str();
  sweep_cmd->add_option("--fractions", sweep_spec.fractions, "Poisoned fractions")
      ->delimiter(',')
      ->capture_default_str();
  sweep_cmd->add_option("--runs", sweep_spec.runs_per_fraction, "Runs per fraction")
      ->capture_default_str();
  sweep_cmd->add_option("--base-student-seed", sweep_spec.base_student_seed, "Run i uses base+i")
      ->capture_default_str();
  sweep_cmd->add_option("--base-selection-seed", sweep_spec.base_selection_seed,
                        "Poison selection seed for run i is base+i")
      ->capture_default_str();
  sweep_cmd->add_option("--patch-seed", sweep_spec.patch_seed, "Trigger patch seed")
      ->capture_default_str();
  sweep_cmd->add_option("--target-class", sweep_target, "Target class id")->capture_default_str();
  sweep_cmd->add_option("--soft-target-source", sweep_soft_source, "poisoned-input or clean-input")
      ->check(CLI::IsMember({"poisoned-input", "clean-input"}))
      ->capture_default_str();
  sweep_cmd->add_option("--sweep-patch-kind", sweep_patch_kind, "uniform or binary")
      ->check(CLI::IsMember({"uniform", "binary"}))
      ->capture_default_str();
  sweep_cmd->add_flag("--overwrite", sweep_overwrite, "Redo completed run directories");

  // --- report --------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "Aggregate run records into table and figures");
  std::string report_runs, report_out;
  report_cmd->add_option("--runs", report_runs, "Sweep directory with record.json files")
      ->required();
  report_cmd->add_option("--out", report_out, "Report output directory (default <runs>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(kdt::ErrorCode::usage);
  }

  try {
    if (threads > 0) torch::set_num_threads(threads);
    auto log = [](const std::string& line) { std::cout << line << std::endl; };

    if (app.got_subcommand(train_cmd)) {
      schedule.augment = !no_augment;
      auto data = kdt::load_data(train_data.to_config());
      auto teacher = kdt::build_teacher(teacher_seed);
      std::cout << "training teacher on " << data.train.size() << " images, " << schedule.epochs
                << " epochs" << std::endl;
      auto report = kdt::finetune_teacher(teacher, data.train, data.test, schedule,
                                          [&](int64_t epoch, double loss) {
                                            std::cout << "epoch " << (epoch + 1) << "/"
                                                      << schedule.epochs << "  loss " << loss
                                                      << std::endl;
                                          });
      kdt::save_checkpoint(teacher, teacher_out);
      json j{{"test_accuracy", report.test_accuracy},
             {"accuracy_floor", report.accuracy_floor},
             {"met_floor", report.met_floor},
             {"epoch_losses", report.epoch_losses},
             {"parameter_hash", teacher.parameter_hash()}};
      kdt::write_file_text(teacher_out + ".report.json", j.dump(2) + "\n");
      std::cout << std::fixed << std::setprecision(2) << "teacher test accuracy "
                << report.test_accuracy << "%  (checkpoint " << teacher_out << ")" << std::endl;
      if (!report.met_floor) {
        std::cout << "WARNING: accuracy below the configured floor of " << schedule.accuracy_floor
                  << "%; downstream runs are flagged" << std::endl;
      }
    } else if (app.got_subcommand(build_cmd)) {
      poison.soft_target_source = kdt::soft_target_source_from_string(soft_source);
      poison.patch_kind = kdt::patch_kind_from_string(patch_kind);
      auto teacher = kdt::load_checkpoint(build_teacher_path);
      auto data = kdt::load_data(build_data.to_config());
      auto dataset = kdt::build_dataset(data.train, teacher, poison);
      kdt::save_dataset(dataset, build_out);
      if (!dump_patch_path.empty()) {
        dump_patch_json(kdt::generate_patch(poison.patch_seed, poison.patch_kind),
                        dump_patch_path);
      }
      std::cout << "wrote " << dataset.size() << " examples (" << dataset.manifest.poisoned_count
                << " poisoned) to " << build_out << "\ndataset sha256 "
                << dataset.manifest.dataset_sha256 << std::endl;
    } else if (app.got_subcommand(distill_cmd)) {
      auto dataset = kdt::load_dataset(distill_dataset);
      auto config = distill_opts.to_config();
      auto student = kdt::build_student(kdt::StudentSpec{}, student_seed);
      std::optional<kdt::ProbeBundle> probe;
      if (config.probe_every > 0) {
        auto data = kdt::load_data(distill_data.to_config());
        probe = kdt::ProbeBundle{data.test,
                                 kdt::generate_patch(dataset.manifest.config.patch_seed,
                                                     dataset.manifest.config.patch_kind),
                                 dataset.manifest.config.target_class};
      }
      auto curve = kdt::distill(student, dataset, config, probe);
      std::filesystem::create_directories(distill_out);
      kdt::save_checkpoint(student, std::filesystem::path(distill_out) / "student.ckpt");
      kdt::write_curve(curve, std::filesystem::path(distill_out) / "curves.jsonl");
      std::cout << "distilled " << config.epochs << " epochs; final loss "
                << (curve.empty() ? 0.0 : curve.back().loss) << "; wrote " << distill_out
                << std::endl;
    } else if (app.got_subcommand(eval_cmd)) {
      auto model = kdt::load_checkpoint(eval_model);
      auto data = kdt::load_data(eval_data.to_config());
      auto patch = kdt::generate_patch(eval_patch_seed, kdt::patch_kind_from_string(eval_patch_kind));
      auto metrics = kdt::evaluate_all(model, data.test, patch, eval_target);
      metrics_line(std::cout, metrics) << std::endl;
      json j{{"trigger_effectiveness", metrics.trigger_effectiveness},
             {"clean_accuracy", metrics.clean_accuracy},
             {"target_clean_accuracy", metrics.target_clean_accuracy}};
      if (eval_benignity) {
        auto b = kdt::teacher_benignity(model, data.test, patch);
        std::cout << std::fixed << std::setprecision(2) << "benignity: clean " << b.clean_accuracy
                  << "  triggered " << b.triggered_accuracy << "  delta " << b.delta << std::endl;
        j["benignity"] = {{"clean_accuracy", b.clean_accuracy},
                          {"triggered_accuracy", b.triggered_accuracy},
                          {"delta", b.delta}};
      }
      if (!eval_out.empty()) kdt::write_file_text(eval_out, j.dump(2) + "\n");
    } else if (app.got_subcommand(sweep_cmd)) {
      std::sort(sweep_spec.fractions.begin(), sweep_spec.fractions.end());
      sweep_spec.fractions.erase(
          std::unique(sweep_spec.fractions.begin(), sweep_spec.fractions.end()),
          sweep_spec.fractions.end());
      kdt::RunConfig base;
      base.data = sweep_data.to_config();
      base.distill = sweep_distill.to_config();
      base.poison.target_class = sweep_target;
      base.poison.soft_target_source = kdt::soft_target_source_from_string(sweep_soft_source);
      base.poison.patch_kind = kdt::patch_kind_from_string(sweep_patch_kind);
      base.teacher_checkpoint = sweep_teacher;
      base.overwrite = sweep_overwrite;
      auto table = kdt::run_sweep(sweep_spec, base, sweep_root, sweep_id, log);
      std::cout << "\n" << kdt::format_table(table);
      std::optional<kdt::LabeledDataset> gallery;
      try {
        gallery = kdt::load_data(base.data).test.head(8);
      } catch (const std::exception&) {
        // no data for a gallery; table and plot still get written
      }
      auto paths = kdt::write_report(
          table, std::filesystem::path(sweep_root) / sweep_id / "report", gallery,
          kdt::generate_patch(sweep_spec.patch_seed, base.poison.patch_kind));
      std::cout << "report written to " << paths.table_txt.parent_path() << std::endl;
    } else if (app.got_subcommand(report_cmd)) {
      auto records = kdt::load_run_records(report_runs);
      if (records.empty()) {
        kdt::fail(kdt::ErrorCode::missing_input,
                  "no completed run records under " + report_runs);
      }
      auto table = kdt::aggregate_records(records);
      std::cout << kdt::format_table(table);
      std::optional<kdt::LabeledDataset> gallery;
      std::optional<kdt::TriggerPatch> patch;
      try {
        gallery = kdt::load_data(records.front().config.data).test.head(8);
        patch = kdt::generate_patch(records.front().config.poison.patch_seed,
                                    records.front().config.poison.patch_kind);
      } catch (const std::exception&) {
      }
      const auto out =
          report_out.empty() ? std::filesystem::path(report_runs) / "report" : std::filesystem::path(report_out);
      auto paths = kdt::write_report(table, out, gallery, patch);
      std::cout << "report written to " << paths.table_txt.parent_path() << std::endl;
    }
  } catch (const kdt::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
