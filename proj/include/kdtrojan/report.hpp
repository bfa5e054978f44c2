#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "kdtrojan/experiment.hpp"

namespace kdtrojan {

// Fixed-width text table in the poisoned% / TE / CA / TCA column order,
// with run counts and adjacent-inversion footers. Deterministic: equal
// tables format to identical bytes.
std::string format_table(const SweepTable& table);

std::string format_csv(const SweepTable& table);

// Line plot of the three metrics against poisoned percentage.
std::string render_metrics_svg(const SweepTable& table);

// Grid PNG: sample images (rows) at increasing patch opacity (columns).
void write_gallery_png(const std::filesystem::path& path, const torch::Tensor& images,
                       const TriggerPatch& patch, const std::vector<double>& opacities);

struct ReportPaths {
  std::filesystem::path table_txt;
  std::filesystem::path summary_csv;
  std::filesystem::path metrics_svg;
  std::optional<std::filesystem::path> gallery_png;
};

// Emits table + csv + plot (+ gallery when sample images are supplied)
// under out_dir.
ReportPaths write_report(const SweepTable& table, const std::filesystem::path& out_dir,
                         const std::optional<LabeledDataset>& gallery_images = std::nullopt,
                         std::optional<TriggerPatch> patch = std::nullopt);

}  // namespace kdtrojan
