#include "kdtrojan/report.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <iomanip>
#include <sstream>

namespace kdtrojan {

namespace {

std::string num2(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

std::vector<double> column(const SweepTable& table, double MetricsTriple::*member) {
  std::vector<double> out;
  for (const auto& row : table.rows) {
    if (row.runs > 0) out.push_back(row.mean.*member);
  }
  return out;
}

}  // namespace

std::string format_table(const SweepTable& table) {
  std::ostringstream ss;
  ss << std::setw(10) << "Poisoned %" << std::setw(23) << "Trigger Effectiveness" << std::setw(16)
     << "Clean Accuracy" << std::setw(23) << "Target Clean Accuracy" << std::setw(6) << "Runs"
     << "\n";
  ss << std::string(78, '-') << "\n";
  for (const auto& row : table.rows) {
    ss << std::setw(10) << fraction_label(row.fraction);
    if (row.runs > 0) {
      ss << std::setw(23) << num2(row.mean.trigger_effectiveness) << std::setw(16)
         << num2(row.mean.clean_accuracy) << std::setw(23) << num2(row.mean.target_clean_accuracy);
    } else {
      ss << std::setw(23) << "-" << std::setw(16) << "-" << std::setw(23) << "-";
    }
    ss << std::setw(6) << row.runs << "\n";
  }
  ss << "\n";
  ss << "TE adjacent inversions (expect nondecreasing): "
     << count_adjacent_inversions(column(table, &MetricsTriple::trigger_effectiveness), true)
     << "\n";
  ss << "TCA adjacent inversions (expect nonincreasing): "
     << count_adjacent_inversions(column(table, &MetricsTriple::target_clean_accuracy), false)
     << "\n";
  return ss.str();
}

std::string format_csv(const SweepTable& table) {
  std::ostringstream ss;
  ss << "poisoned_percent,runs,trigger_effectiveness,clean_accuracy,target_clean_accuracy\n";
  for (const auto& row : table.rows) {
    ss << fraction_label(row.fraction) << "," << row.runs << ",";
    if (row.runs > 0) {
      ss << num2(row.mean.trigger_effectiveness) << "," << num2(row.mean.clean_accuracy) << ","
         << num2(row.mean.target_clean_accuracy);
    } else {
      ss << ",,";
    }
    ss << "\n";
  }
  return ss.str();
}

std::string render_metrics_svg(const SweepTable& table) {
  constexpr double kW = 640, kH = 440;
  constexpr double kLeft = 60, kRight = 20, kTop = 30, kBottom = 50;
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;

  auto sx = [&](double percent) { return kLeft + plot_w * percent / 100.0; };
  auto sy = [&](double value) { return kTop + plot_h * (1.0 - value / 100.0); };

  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2);
  ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  ss << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  ss << "<text x=\"" << kW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
     << "Metrics vs poisoned percentage</text>\n";

  for (int v = 0; v <= 100; v += 20) {
    ss << "<line x1=\"" << kLeft << "\" y1=\"" << sy(v) << "\" x2=\"" << kW - kRight << "\" y2=\""
       << sy(v) << "\" stroke=\"#dddddd\"/>\n";
    ss << "<text x=\"" << kLeft - 8 << "\" y=\"" << sy(v) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << v << "</text>\n";
  }
  for (int p = 0; p <= 100; p += 25) {
    ss << "<text x=\"" << sx(p) << "\" y=\"" << kH - kBottom + 18
       << "\" text-anchor=\"middle\" font-size=\"11\">" << p << "</text>\n";
  }
  ss << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">poisoned %</text>\n";
  ss << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
     << kH - kBottom << "\" stroke=\"black\"/>\n";
  ss << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight
     << "\" y2=\"" << kH - kBottom << "\" stroke=\"black\"/>\n";

  struct Series {
    const char* name;
    const char* color;
    double MetricsTriple::*member;
  };
  const Series series[] = {
      {"Trigger Effectiveness", "#c0392b", &MetricsTriple::trigger_effectiveness},
      {"Clean Accuracy", "#2980b9", &MetricsTriple::clean_accuracy},
      {"Target Clean Accuracy", "#27ae60", &MetricsTriple::target_clean_accuracy},
  };
  int legend_y = static_cast<int>(kTop) + 10;
  for (const auto& s : series) {
    std::ostringstream pts;
    pts << std::fixed << std::setprecision(2);
    for (const auto& row : table.rows) {
      if (row.runs == 0) continue;
      pts << sx(row.fraction * 100.0) << "," << sy(row.mean.*s.member) << " ";
    }
    ss << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << s.color
       << "\" stroke-width=\"2\"/>\n";
    for (const auto& row : table.rows) {
      if (row.runs == 0) continue;
      ss << "<circle cx=\"" << sx(row.fraction * 100.0) << "\" cy=\"" << sy(row.mean.*s.member)
         << "\" r=\"3\" fill=\"" << s.color << "\"/>\n";
    }
    ss << "<rect x=\"" << kW - 230 << "\" y=\"" << legend_y - 9 << "\" width=\"12\" height=\"12\""
       << " fill=\"" << s.color << "\"/>\n";
    ss << "<text x=\"" << kW - 212 << "\" y=\"" << legend_y + 2 << "\" font-size=\"11\">" << s.name
       << "</text>\n";
    legend_y += 18;
  }
  ss << "</svg>\n";
  return ss.str();
}

void write_gallery_png(const std::filesystem::path& path, const torch::Tensor& images,
                       const TriggerPatch& patch, const std::vector<double>& opacities) {
  if (images.dim() != 4 || images.size(0) == 0) {
    fail(ErrorCode::validation, "gallery needs a nonempty image batch");
  }
  const int64_t rows = std::min<int64_t>(images.size(0), 8);
  const int64_t cols = static_cast<int64_t>(opacities.size());
  const int64_t scale = 3, pad = 2, side = 32;
  const int64_t cell = side * scale + pad;
  const int64_t height = rows * cell + pad;
  const int64_t width = cols * cell + pad;

  cv::Mat canvas(static_cast<int>(height), static_cast<int>(width), CV_8UC3,
                 cv::Scalar(255, 255, 255));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      auto img = apply_patch(images[r], patch, Opacity(opacities[static_cast<std::size_t>(c)]));
      auto hwc = (img.clamp(0, 1) * 255.0f).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
      const auto* src = hwc.data_ptr<uint8_t>();
      const int64_t y0 = pad + r * cell;
      const int64_t x0 = pad + c * cell;
      for (int64_t y = 0; y < side * scale; ++y) {
        auto* row_ptr = canvas.ptr<cv::Vec3b>(static_cast<int>(y0 + y));
        for (int64_t x = 0; x < side * scale; ++x) {
          const int64_t sy = y / scale, sx2 = x / scale;
          const auto* px = src + (sy * side + sx2) * 3;
          row_ptr[x0 + x] = cv::Vec3b(px[2], px[1], px[0]);  // RGB -> BGR
        }
      }
    }
  }
  if (!cv::imwrite(path.string(), canvas)) {
    fail(ErrorCode::io, "cannot write gallery: " + path.string());
  }
}

ReportPaths write_report(const SweepTable& table, const std::filesystem::path& out_dir,
                         const std::optional<LabeledDataset>& gallery_images,
                         std::optional<TriggerPatch> patch) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create report directory: " + out_dir.string());

  ReportPaths paths;
  paths.table_txt = out_dir / "table.txt";
  paths.summary_csv = out_dir / "summary.csv";
  paths.metrics_svg = out_dir / "metrics.svg";
  write_file_text(paths.table_txt, format_table(table));
  write_file_text(paths.summary_csv, format_csv(table));
  write_file_text(paths.metrics_svg, render_metrics_svg(table));

  if (gallery_images && patch && gallery_images->size() > 0) {
    paths.gallery_png = out_dir / "gallery.png";
    // Columns mirror the opacity extremes discussed alongside the patch
    // examples: invisible, faint, patch-dominated, full.
    write_gallery_png(*paths.gallery_png, gallery_images->images, *patch,
                      {0.0, 0.0018, 0.5883, 1.0});
  }
  return paths;
}

}  // namespace kdtrojan
