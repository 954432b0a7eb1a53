#ifndef OVERLAP_REPORT_HPP
#define OVERLAP_REPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "overlap/common.hpp"
#include "overlap/config.hpp"
#include "overlap/harness.hpp"

namespace overlap {

inline constexpr const char* kBundleVersion = "v1";

namespace detail {

// Enough digits for an exact double round trip.
inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// results CSV: one row per repetition. Column order is frozen:
// o,shared_data_fraction,rep,clean_acc,attacked_acc,success,whitebox_success
inline void emit_results_csv(const GridResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "o,shared_data_fraction,rep,clean_acc,attacked_acc,success,whitebox_success\n";
  for (const CellResult& c : result.cells) {
    for (std::size_t r = 0; r < c.reps.size(); ++r) {
      const RepRecord& rec = c.reps[r];
      out << c.shared_classes << ',' << detail::fmt_full(c.data_fraction) << ',' << r << ','
          << detail::fmt_full(rec.clean_acc) << ',' << detail::fmt_full(rec.attacked_acc) << ','
          << detail::fmt_full(rec.success) << ',' << detail::fmt_full(rec.whitebox_success)
          << '\n';
    }
  }
}

// summary CSV: one row per cell. Column order is frozen:
// o,shared_data_fraction,mean_success,std_success
inline void emit_summary_csv(const GridResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "o,shared_data_fraction,mean_success,std_success\n";
  for (const CellResult& c : result.cells) {
    out << c.shared_classes << ',' << detail::fmt_full(c.data_fraction) << ','
        << detail::fmt_full(c.mean_success) << ',' << detail::fmt_full(c.std_success) << '\n';
  }
}

// JSON result bundle embedding the full GridSpec for provenance.
inline nlohmann::json bundle_to_json(const GridResult& result) {
  nlohmann::json root;
  root["format_version"] = kBundleVersion;
  root["tool_version"] = result.tool_version;
  root["spec"] = config::grid_to_json(result.spec);
  nlohmann::json cells = nlohmann::json::array();
  for (const CellResult& c : result.cells) {
    nlohmann::json cj;
    cj["o"] = c.shared_classes;
    cj["shared_data_fraction"] = c.data_fraction;
    cj["mean_success"] = c.mean_success;
    cj["std_success"] = c.std_success;
    nlohmann::json reps = nlohmann::json::array();
    for (const RepRecord& r : c.reps) {
      nlohmann::json rj;
      rj["clean_acc"] = r.clean_acc;
      rj["attacked_acc"] = r.attacked_acc;
      rj["success"] = r.success;
      rj["whitebox_success"] = r.whitebox_success;
      rj["cell_seed"] = r.cell_seed;
      reps.push_back(rj);
    }
    cj["reps"] = reps;
    cells.push_back(cj);
  }
  root["cells"] = cells;
  nlohmann::json corr;
  corr["shared_classes"] = {{"r", result.r_shared_classes.r},
                            {"defined", result.r_shared_classes.defined}};
  corr["shared_data"] = {{"r", result.r_shared_data.r}, {"defined", result.r_shared_data.defined}};
  root["correlations"] = corr;
  return root;
}

inline void save_bundle(const GridResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << bundle_to_json(result).dump(2) << "\n";
}

inline GridResult load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  nlohmann::json root = nlohmann::json::parse(in, nullptr, false);
  if (root.is_discarded()) throw FormatError(path + ": invalid JSON");
  const std::string version = root.value("format_version", "");
  if (version != kBundleVersion) {
    throw FormatError(path + ": bundle format version '" + version + "' is not '" +
                      kBundleVersion + "'");
  }
  GridResult result;
  try {
    result.tool_version = root.value("tool_version", "");
    result.spec = config::parse_grid(root.at("spec"));
    for (const nlohmann::json& cj : root.at("cells")) {
      CellResult c;
      c.shared_classes = cj.at("o").get<int>();
      c.data_fraction = cj.at("shared_data_fraction").get<double>();
      c.mean_success = cj.at("mean_success").get<double>();
      c.std_success = cj.at("std_success").get<double>();
      for (const nlohmann::json& rj : cj.at("reps")) {
        RepRecord r;
        r.clean_acc = rj.at("clean_acc").get<double>();
        r.attacked_acc = rj.at("attacked_acc").get<double>();
        r.success = rj.at("success").get<double>();
        r.whitebox_success = rj.at("whitebox_success").get<double>();
        r.cell_seed = rj.value("cell_seed", std::uint64_t{0});
        c.reps.push_back(r);
      }
      result.cells.push_back(std::move(c));
    }
    const nlohmann::json& corr = root.at("correlations");
    result.r_shared_classes.r = corr.at("shared_classes").at("r").get<double>();
    result.r_shared_classes.defined = corr.at("shared_classes").at("defined").get<bool>();
    result.r_shared_data.r = corr.at("shared_data").at("r").get<double>();
    result.r_shared_data.defined = corr.at("shared_data").at("defined").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad bundle: " + e.what());
  }
  return result;
}

struct Color {
  int r = 0, g = 0, b = 0;
};

// Heatmap layout mirrors the figures: rows are shared-class counts
// descending, columns are shared-data fractions ascending.
struct HeatmapSpec {
  std::vector<std::vector<double>> matrix;  // [row][col]
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::string title;
  Color ramp_low{255, 255, 255};
  Color ramp_high{200, 16, 16};
  bool fixed_unit_range = false;  // map over [0, 1] instead of [min, max]
  bool annotate = true;

  void validate() const {
    if (matrix.empty() || matrix[0].empty()) throw ShapeError("heatmap matrix is empty");
    for (const auto& row : matrix) {
      if (row.size() != matrix[0].size()) throw ShapeError("heatmap matrix is ragged");
      for (double v : row) {
        if (!std::isfinite(v)) throw NumericError("heatmap matrix holds a non-finite value");
      }
    }
    if (row_labels.size() != matrix.size() || col_labels.size() != matrix[0].size()) {
      throw ShapeError("heatmap label counts do not match the matrix");
    }
  }
};

namespace detail {

inline std::string hex_color(const Color& lo, const Color& hi, double t) {
  auto lerp = [t](int a, int b) {
    return static_cast<int>(std::lround(a + (b - a) * t));
  };
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", lerp(lo.r, hi.r), lerp(lo.g, hi.g),
                lerp(lo.b, hi.b));
  return buf;
}

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

// Standalone deterministic SVG: one rect per cell with a linearly
// interpolated fill, optional 2-decimal annotations, and axis tick labels. A
// constant matrix under auto range maps every cell to the ramp midpoint.
inline void emit_heatmap(const HeatmapSpec& spec, const std::string& path) {
  spec.validate();
  const std::size_t rows = spec.matrix.size();
  const std::size_t cols = spec.matrix[0].size();
  double lo = spec.matrix[0][0], hi = spec.matrix[0][0];
  for (const auto& row : spec.matrix)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (spec.fixed_unit_range) {
    lo = 0.0;
    hi = 1.0;
  }

  const int cell = 64, left = 70, top = 46, bottom = 34;
  const int width = left + cell * static_cast<int>(cols) + 10;
  const int height = top + cell * static_cast<int>(rows) + bottom;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "  <text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">"
      << spec.title << "</text>\n";
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = spec.matrix[i][j];
      const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
      const int x = left + static_cast<int>(j) * cell;
      const int y = top + static_cast<int>(i) * cell;
      out << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"" << detail::hex_color(spec.ramp_low, spec.ramp_high, t)
          << "\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
      if (spec.annotate) {
        out << "  <text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 5
            << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
            << detail::fmt2(v) << "</text>\n";
      }
    }
  }
  for (std::size_t i = 0; i < rows; ++i) {
    out << "  <text x=\"" << left - 8 << "\" y=\"" << top + static_cast<int>(i) * cell + cell / 2 + 5
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">"
        << spec.row_labels[i] << "</text>\n";
  }
  for (std::size_t j = 0; j < cols; ++j) {
    out << "  <text x=\"" << left + static_cast<int>(j) * cell + cell / 2 << "\" y=\""
        << top + static_cast<int>(rows) * cell + 20
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
        << spec.col_labels[j] << "</text>\n";
  }
  out << "</svg>\n";
}

// Cell means (or stds) arranged for the heatmap: one row per shared-class
// count, descending; one column per data fraction, ascending.
inline HeatmapSpec heatmap_from_grid(const GridResult& result, bool use_std,
                                     const std::string& title) {
  std::vector<int> os;
  std::vector<double> ps;
  for (const CellResult& c : result.cells) {
    if (std::find(os.begin(), os.end(), c.shared_classes) == os.end())
      os.push_back(c.shared_classes);
    if (std::find(ps.begin(), ps.end(), c.data_fraction) == ps.end()) ps.push_back(c.data_fraction);
  }
  std::sort(os.rbegin(), os.rend());
  std::sort(ps.begin(), ps.end());

  HeatmapSpec spec;
  spec.title = title;
  spec.matrix.assign(os.size(), std::vector<double>(ps.size(), 0.0));
  for (const CellResult& c : result.cells) {
    const std::size_t i = static_cast<std::size_t>(
        std::find(os.begin(), os.end(), c.shared_classes) - os.begin());
    const std::size_t j =
        static_cast<std::size_t>(std::find(ps.begin(), ps.end(), c.data_fraction) - ps.begin());
    spec.matrix[i][j] = use_std ? c.std_success : c.mean_success;
  }
  for (int o : os) spec.row_labels.push_back(std::to_string(o));
  for (double p : ps) spec.col_labels.push_back(detail::fmt2(p));
  if (use_std) spec.ramp_high = Color{30, 60, 200};  // blue for spread, red for success
  return spec;
}

}  // namespace overlap

#endif  // OVERLAP_REPORT_HPP
