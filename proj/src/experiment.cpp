#include "kdtrojan/experiment.hpp"

#include <torch/version.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace kdtrojan {

using json = nlohmann::json;

std::string to_string(DataSource source) {
  return source == DataSource::cifar10 ? "cifar10" : "synthetic";
}

DataSource data_source_from_string(const std::string& name) {
  if (name == "cifar10") return DataSource::cifar10;
  if (name == "synthetic") return DataSource::synthetic;
  fail(ErrorCode::usage, "unknown data source: " + name);
}

LoadedData load_data(const DataConfig& config) {
  LoadedData data;
  if (config.source == DataSource::cifar10) {
    data.train = load_cifar10(config.cifar_dir, Split::train);
    data.test = load_cifar10(config.cifar_dir, Split::test);
  } else {
    data.train = make_synthetic(config.synthetic_train, config.synthetic_seed);
    data.test = make_synthetic(config.synthetic_test, config.synthetic_seed + 1);
  }
  if (config.train_subset > 0) data.train = data.train.head(config.train_subset);
  if (config.test_subset > 0) data.test = data.test.head(config.test_subset);
  return data;
}

EnvFingerprint environment_fingerprint() {
  EnvFingerprint env;
  env.torch_version = TORCH_VERSION;
  env.threads = torch::get_num_threads();
#ifdef NDEBUG
  env.build_type = "release";
#else
  env.build_type = "debug";
#endif
  return env;
}

namespace {

json data_config_to_json(const DataConfig& c) {
  return json{{"source", to_string(c.source)},
              {"cifar_dir", c.cifar_dir.string()},
              {"synthetic_seed", c.synthetic_seed},
              {"synthetic_train", c.synthetic_train},
              {"synthetic_test", c.synthetic_test},
              {"train_subset", c.train_subset},
              {"test_subset", c.test_subset}};
}

DataConfig data_config_from_json(const json& j) {
  DataConfig c;
  c.source = data_source_from_string(j.at("source").get<std::string>());
  c.cifar_dir = j.at("cifar_dir").get<std::string>();
  c.synthetic_seed = j.at("synthetic_seed").get<uint64_t>();
  c.synthetic_train = j.at("synthetic_train").get<int64_t>();
  c.synthetic_test = j.at("synthetic_test").get<int64_t>();
  c.train_subset = j.at("train_subset").get<int64_t>();
  c.test_subset = j.at("test_subset").get<int64_t>();
  return c;
}

json poison_config_to_json(const PoisonConfig& c) {
  return json{{"target_class", c.target_class},
              {"poisoned_fraction", c.poisoned_fraction},
              {"patch_seed", c.patch_seed},
              {"selection_seed", c.selection_seed},
              {"soft_target_source", to_string(c.soft_target_source)},
              {"patch_kind", to_string(c.patch_kind)}};
}

PoisonConfig poison_config_from_json(const json& j) {
  PoisonConfig c;
  c.target_class = j.at("target_class").get<int64_t>();
  c.poisoned_fraction = j.at("poisoned_fraction").get<double>();
  c.patch_seed = j.at("patch_seed").get<uint64_t>();
  c.selection_seed = j.at("selection_seed").get<uint64_t>();
  c.soft_target_source = soft_target_source_from_string(j.at("soft_target_source").get<std::string>());
  c.patch_kind = patch_kind_from_string(j.at("patch_kind").get<std::string>());
  return c;
}

json distill_config_to_json(const DistillConfig& c) {
  return json{{"temperature", c.temperature}, {"alpha", c.alpha},
              {"alpha_mode", to_string(c.alpha_mode)}, {"epochs", c.epochs},
              {"batch_size", c.batch_size},   {"lr", c.lr},
              {"data_order_seed", c.data_order_seed}, {"probe_every", c.probe_every}};
}

DistillConfig distill_config_from_json(const json& j) {
  DistillConfig c;
  c.temperature = j.at("temperature").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.alpha_mode = alpha_mode_from_string(j.at("alpha_mode").get<std::string>());
  c.epochs = j.at("epochs").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr = j.at("lr").get<double>();
  c.data_order_seed = j.at("data_order_seed").get<uint64_t>();
  c.probe_every = j.at("probe_every").get<int64_t>();
  return c;
}

json metrics_to_json(const MetricsTriple& m) {
  return json{{"trigger_effectiveness", m.trigger_effectiveness},
              {"clean_accuracy", m.clean_accuracy},
              {"target_clean_accuracy", m.target_clean_accuracy}};
}

MetricsTriple metrics_from_json(const json& j) {
  MetricsTriple m;
  m.trigger_effectiveness = j.at("trigger_effectiveness").get<double>();
  m.clean_accuracy = j.at("clean_accuracy").get<double>();
  m.target_clean_accuracy = j.at("target_clean_accuracy").get<double>();
  return m;
}

json curve_to_json(const TrainingCurve& curve) {
  json arr = json::array();
  for (const auto& log : curve) {
    json j{{"epoch", log.epoch}, {"loss", log.loss}};
    if (log.probe) j["probe"] = metrics_to_json(*log.probe);
    arr.push_back(std::move(j));
  }
  return arr;
}

TrainingCurve curve_from_json(const json& arr) {
  TrainingCurve curve;
  for (const auto& j : arr) {
    EpochLog log;
    log.epoch = j.at("epoch").get<int64_t>();
    log.loss = j.at("loss").get<double>();
    if (j.contains("probe")) log.probe = metrics_from_json(j.at("probe"));
    curve.push_back(std::move(log));
  }
  return curve;
}

constexpr const char* kIncompleteMarker = "INCOMPLETE";

void log_line(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

}  // namespace

std::string RunRecord::to_json_text() const {
  json j{{"config",
          {{"data", data_config_to_json(config.data)},
           {"poison", poison_config_to_json(config.poison)},
           {"distill", distill_config_to_json(config.distill)},
           {"student_seed", config.student_seed},
           {"teacher_checkpoint", config.teacher_checkpoint.string()},
           {"out_dir", config.out_dir.string()},
           {"dataset_cache_dir", config.dataset_cache_dir.string()}}},
         {"teacher_hash", teacher_hash},
         {"dataset_sha256", dataset_sha256},
         {"metrics", metrics_to_json(metrics)},
         {"curve", curve_to_json(curve)},
         {"wall_seconds", wall_seconds},
         {"env",
          {{"torch_version", env.torch_version},
           {"threads", env.threads},
           {"build_type", env.build_type}}}};
  return j.dump(2) + "\n";
}

RunRecord RunRecord::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::io, "run record is not valid JSON");
  RunRecord r;
  const auto& c = j.at("config");
  r.config.data = data_config_from_json(c.at("data"));
  r.config.poison = poison_config_from_json(c.at("poison"));
  r.config.distill = distill_config_from_json(c.at("distill"));
  r.config.student_seed = c.at("student_seed").get<uint64_t>();
  r.config.teacher_checkpoint = c.at("teacher_checkpoint").get<std::string>();
  r.config.out_dir = c.at("out_dir").get<std::string>();
  r.config.dataset_cache_dir = c.at("dataset_cache_dir").get<std::string>();
  r.teacher_hash = j.at("teacher_hash").get<std::string>();
  r.dataset_sha256 = j.at("dataset_sha256").get<std::string>();
  r.metrics = metrics_from_json(j.at("metrics"));
  r.curve = curve_from_json(j.at("curve"));
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.env.torch_version = j.at("env").at("torch_version").get<std::string>();
  r.env.threads = j.at("env").at("threads").get<int>();
  r.env.build_type = j.at("env").at("build_type").get<std::string>();
  return r;
}

namespace {

// Poisoned datasets are cached per (teacher weights, poison config, source
// data); every sweep run at the same fraction reuses the same build.
std::filesystem::path dataset_cache_path(const std::filesystem::path& cache_dir,
                                         const std::string& teacher_hash,
                                         const PoisonConfig& poison, const std::string& data_id) {
  Sha256 h;
  h.update(teacher_hash);
  h.update(poison_config_to_json(poison).dump());
  h.update(data_id);
  return cache_dir / h.hex_digest().substr(0, 16);
}

PoisonedDataset obtain_dataset(const RunConfig& config, const Classifier& teacher,
                               const LabeledDataset& train, const LogFn& log) {
  if (config.dataset_cache_dir.empty()) {
    log_line(log, "building poisoned dataset (fraction " +
                      fraction_label(config.poison.poisoned_fraction) + "%)");
    return build_dataset(train, teacher, config.poison);
  }
  const auto dir = dataset_cache_path(config.dataset_cache_dir, teacher.parameter_hash(),
                                      config.poison, train.sha256());
  if (std::filesystem::exists(dir / "manifest.json")) {
    log_line(log, "reusing cached dataset " + dir.string());
    auto ds = load_dataset(dir);
    require_same_teacher(ds.manifest, teacher);
    return ds;
  }
  log_line(log, "building poisoned dataset (fraction " +
                    fraction_label(config.poison.poisoned_fraction) + "%) -> " + dir.string());
  auto ds = build_dataset(train, teacher, config.poison);
  save_dataset(ds, dir);
  return ds;
}

}  // namespace

RunRecord run_single(const RunConfig& config, const LogFn& log) {
  const auto start = std::chrono::steady_clock::now();
  config.poison.validate();
  config.distill.validate();

  const auto record_path = config.out_dir / "record.json";
  const auto marker_path = config.out_dir / kIncompleteMarker;
  if (!config.overwrite && std::filesystem::exists(record_path) &&
      !std::filesystem::exists(marker_path)) {
    log_line(log, "run already complete: " + record_path.string());
    return RunRecord::from_json_text(read_file_bytes(record_path));
  }

  if (!std::filesystem::exists(config.teacher_checkpoint)) {
    fail(ErrorCode::missing_input,
         "teacher checkpoint not found: " + config.teacher_checkpoint.string() +
             " (run train-teacher first)");
  }
  auto teacher = load_checkpoint(config.teacher_checkpoint);

  std::error_code ec;
  std::filesystem::create_directories(config.out_dir / "checkpoints", ec);
  if (ec) fail(ErrorCode::io, "cannot create run directory: " + config.out_dir.string());
  write_file_text(marker_path, "run in progress\n");

  auto data = load_data(config.data);
  auto dataset = obtain_dataset(config, teacher, data.train, log);

  auto student = build_student(StudentSpec{}, config.student_seed);
  std::optional<ProbeBundle> probe;
  if (config.distill.probe_every > 0) {
    probe = ProbeBundle{data.test, generate_patch(config.poison.patch_seed, config.poison.patch_kind),
                        config.poison.target_class};
  }
  log_line(log, "distilling student (seed " + std::to_string(config.student_seed) + ", " +
                    std::to_string(config.distill.epochs) + " epochs)");
  auto curve = distill(student, dataset, config.distill, probe);

  const auto patch = generate_patch(config.poison.patch_seed, config.poison.patch_kind);
  RunRecord record;
  record.config = config;
  record.teacher_hash = teacher.parameter_hash();
  record.dataset_sha256 = dataset.manifest.dataset_sha256;
  record.metrics = evaluate_all(student, data.test, patch, config.poison.target_class);
  record.curve = std::move(curve);
  record.env = environment_fingerprint();
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  save_checkpoint(student, config.out_dir / "checkpoints" / "student.ckpt");
  write_curve(record.curve, config.out_dir / "curves.jsonl");
  write_file_text(record_path, record.to_json_text());
  std::filesystem::remove(marker_path);
  log_line(log, "run complete: TE " + std::to_string(record.metrics.trigger_effectiveness) +
                    "  CA " + std::to_string(record.metrics.clean_accuracy) + "  TCA " +
                    std::to_string(record.metrics.target_clean_accuracy));
  return record;
}

void SweepSpec::validate() const {
  if (fractions.empty()) fail(ErrorCode::validation, "sweep needs at least one fraction");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0)) {
      fail(ErrorCode::validation, "sweep fractions must lie in [0,1]");
    }
    if (i > 0 && fractions[i] <= fractions[i - 1]) {
      fail(ErrorCode::validation, "sweep fractions must be sorted and unique");
    }
  }
  if (runs_per_fraction < 1) fail(ErrorCode::validation, "runs per fraction must be >= 1");
}

std::string fraction_label(double fraction) {
  std::ostringstream ss;
  ss << std::setprecision(10) << fraction * 100.0;
  return ss.str();
}

SweepTable run_sweep(const SweepSpec& spec, const RunConfig& base,
                     const std::filesystem::path& sweep_root, const std::string& sweep_id,
                     const LogFn& log) {
  spec.validate();
  std::vector<RunRecord> records;
  std::vector<SweepCell> failures;

  for (const double fraction : spec.fractions) {
    for (int64_t i = 0; i < spec.runs_per_fraction; ++i) {
      RunConfig config = base;
      config.poison.poisoned_fraction = fraction;
      config.poison.patch_seed = spec.patch_seed;
      config.poison.selection_seed = spec.base_selection_seed + static_cast<uint64_t>(i);
      config.student_seed = spec.base_student_seed + static_cast<uint64_t>(i);
      config.distill.data_order_seed = config.student_seed;
      config.out_dir = sweep_root / sweep_id / fraction_label(fraction) /
                       ("seed" + std::to_string(config.student_seed));
      if (config.dataset_cache_dir.empty()) {
        config.dataset_cache_dir = sweep_root / sweep_id / "datasets";
      }
      log_line(log, "[sweep " + sweep_id + "] fraction " + fraction_label(fraction) + "% run " +
                        std::to_string(i + 1) + "/" + std::to_string(spec.runs_per_fraction));
      try {
        records.push_back(run_single(config, log));
      } catch (const std::exception& e) {
        log_line(log, std::string("cell failed: ") + e.what());
        SweepCell cell;
        cell.fraction = fraction;
        cell.run_index = i;
        cell.student_seed = config.student_seed;
        cell.error = e.what();
        failures.push_back(std::move(cell));
      }
    }
  }

  auto table = aggregate_records(records);
  for (auto& cell : failures) table.cells.push_back(cell);
  // Fractions whose every run failed still get a (empty) row.
  for (const double fraction : spec.fractions) {
    const bool present = std::any_of(table.rows.begin(), table.rows.end(),
                                     [&](const SweepRow& r) { return r.fraction == fraction; });
    if (!present) table.rows.push_back(SweepRow{fraction, 0, {}});
  }
  std::sort(table.rows.begin(), table.rows.end(),
            [](const SweepRow& a, const SweepRow& b) { return a.fraction < b.fraction; });
  return table;
}

SweepTable aggregate_records(const std::vector<RunRecord>& records) {
  SweepTable table;
  std::vector<double> fractions;
  for (const auto& r : records) {
    const double f = r.config.poison.poisoned_fraction;
    if (std::find(fractions.begin(), fractions.end(), f) == fractions.end()) {
      fractions.push_back(f);
    }
  }
  std::sort(fractions.begin(), fractions.end());

  for (const double f : fractions) {
    SweepRow row;
    row.fraction = f;
    for (const auto& r : records) {
      if (r.config.poison.poisoned_fraction != f) continue;
      row.mean.trigger_effectiveness += r.metrics.trigger_effectiveness;
      row.mean.clean_accuracy += r.metrics.clean_accuracy;
      row.mean.target_clean_accuracy += r.metrics.target_clean_accuracy;
      ++row.runs;

      SweepCell cell;
      cell.fraction = f;
      cell.run_index = row.runs - 1;
      cell.student_seed = r.config.student_seed;
      cell.metrics = r.metrics;
      table.cells.push_back(std::move(cell));
    }
    if (row.runs > 0) {
      row.mean.trigger_effectiveness /= static_cast<double>(row.runs);
      row.mean.clean_accuracy /= static_cast<double>(row.runs);
      row.mean.target_clean_accuracy /= static_cast<double>(row.runs);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<RunRecord> load_run_records(const std::filesystem::path& sweep_dir) {
  if (!std::filesystem::exists(sweep_dir)) {
    fail(ErrorCode::missing_input, "sweep directory not found: " + sweep_dir.string());
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(sweep_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "record.json") {
      paths.push_back(entry.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<RunRecord> records;
  for (const auto& p : paths) {
    if (std::filesystem::exists(p.parent_path() / kIncompleteMarker)) continue;
    records.push_back(RunRecord::from_json_text(read_file_bytes(p)));
  }
  return records;
}

int count_adjacent_inversions(const std::vector<double>& values, bool nondecreasing) {
  int inversions = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const bool ok = nondecreasing ? values[i] >= values[i - 1] : values[i] <= values[i - 1];
    if (!ok) ++inversions;
  }
  return inversions;
}

}  // namespace kdtrojan
