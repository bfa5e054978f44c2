#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdtrojan/data.hpp"
#include "kdtrojan/distiller.hpp"
#include "kdtrojan/evaluator.hpp"
#include "kdtrojan/models.hpp"
#include "kdtrojan/poisoner.hpp"

namespace kdtrojan {

enum class DataSource { cifar10, synthetic };

std::string to_string(DataSource source);
DataSource data_source_from_string(const std::string& name);

struct DataConfig {
  DataSource source = DataSource::cifar10;
  std::filesystem::path cifar_dir = "data/cifar-10-batches-bin";
  uint64_t synthetic_seed = 123;
  int64_t synthetic_train = 10000;
  int64_t synthetic_test = 2000;
  // Desk-scale subset caps; 0 keeps the full split.
  int64_t train_subset = 0;
  int64_t test_subset = 0;
};

struct LoadedData {
  LabeledDataset train;
  LabeledDataset test;
};
LoadedData load_data(const DataConfig& config);

struct RunConfig {
  DataConfig data;
  PoisonConfig poison;
  DistillConfig distill;
  uint64_t student_seed = 1;
  std::filesystem::path teacher_checkpoint;
  std::filesystem::path out_dir;
  std::filesystem::path dataset_cache_dir;  // empty disables dataset reuse
  bool overwrite = false;  // false: a completed run directory is returned as-is
};

struct EnvFingerprint {
  std::string torch_version;
  int threads = 0;
  std::string build_type;
};
EnvFingerprint environment_fingerprint();

struct RunRecord {
  RunConfig config;
  std::string teacher_hash;
  std::string dataset_sha256;
  MetricsTriple metrics;
  TrainingCurve curve;
  double wall_seconds = 0.0;
  EnvFingerprint env;

  std::string to_json_text() const;
  static RunRecord from_json_text(const std::string& text);
};

using LogFn = std::function<void(const std::string&)>;

// One end-to-end run: load teacher, build or reuse the cached poisoned
// dataset, distill a fresh student, evaluate, persist everything under
// config.out_dir. A completed run directory short-circuits unless
// config.overwrite is set; an interrupted run leaves an INCOMPLETE marker
// and is redone on the next call.
RunRecord run_single(const RunConfig& config, const LogFn& log = {});

struct SweepSpec {
  std::vector<double> fractions{0.0, 0.10, 0.25, 0.50, 0.75, 0.90, 1.0};
  int64_t runs_per_fraction = 3;
  uint64_t base_student_seed = 1;
  uint64_t base_selection_seed = 100;
  uint64_t patch_seed = 7;

  void validate() const;
};

struct SweepCell {
  double fraction = 0.0;
  int64_t run_index = 0;
  uint64_t student_seed = 0;
  std::optional<MetricsTriple> metrics;
  std::string error;  // nonempty when the cell failed
};

struct SweepRow {
  double fraction = 0.0;
  int64_t runs = 0;  // surviving cells
  MetricsTriple mean;
};

struct SweepTable {
  std::vector<SweepRow> rows;   // sorted by fraction
  std::vector<SweepCell> cells;
};

// Runs fractions x seeds; failed cells are reported and skipped in the
// aggregate. Run i of every fraction shares student seed base+i so per-seed
// comparisons are paired. Output lands under <sweep_root>/<sweep_id>/.
SweepTable run_sweep(const SweepSpec& spec, const RunConfig& base,
                     const std::filesystem::path& sweep_root, const std::string& sweep_id,
                     const LogFn& log = {});

// Unweighted per-fraction means recomputed from persisted records.
SweepTable aggregate_records(const std::vector<RunRecord>& records);

// Scans a sweep directory for record.json files (incomplete runs become
// failed cells).
std::vector<RunRecord> load_run_records(const std::filesystem::path& sweep_dir);

// Adjacent-pair order violations in a metric column.
int count_adjacent_inversions(const std::vector<double>& values, bool nondecreasing);

// Directory label for a fraction, in percent ("0", "25", "12.5", "100").
std::string fraction_label(double fraction);

}  // namespace kdtrojan
