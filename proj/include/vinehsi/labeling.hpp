#ifndef VINEHSI_LABELING_HPP
#define VINEHSI_LABELING_HPP

/// Per-pixel labels from annotation polygons intersected with a vegetation
/// mask. Point-in-polygon uses the even-odd rule evaluated at pixel centers
/// (x + 0.5, y + 0.5); overlapping polygons resolve by list order (later
/// wins).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::labeling {

struct PolygonAnnotation {
  std::uint16_t class_id = 0;
  std::vector<std::pair<double, double>> vertices;  // (x = sample, y = line)

  double signed_area() const {
    double a = 0.0;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& [x0, y0] = vertices[i];
      const auto& [x1, y1] = vertices[(i + 1) % n];
      a += x0 * y1 - x1 * y0;
    }
    return 0.5 * a;
  }

  void validate() const {
    if (class_id == 0) throw IoError("polygon class_id must be positive");
    if (vertices.size() < 3) throw IoError("polygon needs at least 3 vertices");
    if (std::abs(signed_area()) < 1e-12) throw IoError("degenerate polygon (zero area)");
  }

  /// Even-odd ray crossing test.
  bool contains(double x, double y) const {
    bool inside = false;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& [xi, yi] = vertices[i];
      const auto& [xj, yj] = vertices[j];
      if ((yi > y) != (yj > y)) {
        double x_cross = xj + (y - yj) / (yi - yj) * (xi - xj);
        if (x < x_cross) inside = !inside;
      }
    }
    return inside;
  }
};

struct LabelRaster {
  std::size_t lines = 0;
  std::size_t samples = 0;
  Tensor<std::uint16_t> labels;  // 0 = unlabeled

  std::uint16_t at(std::size_t l, std::size_t s) const { return labels(l, s); }
};

/// `id<TAB>name` per line.
using ClassTable = std::map<std::uint16_t, std::string>;

inline ClassTable load_class_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  ClassTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto tab = t.find('\t');
    if (tab == std::string::npos)
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected id<TAB>name");
    long long id = parse_int(trim(t.substr(0, tab)), "class id");
    if (id <= 0 || id > 65535)
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": class id out of range");
    table[static_cast<std::uint16_t>(id)] = trim(t.substr(tab + 1));
  }
  if (table.empty()) throw IoError(path.string() + ": empty class table");
  return table;
}

inline void save_class_table(const ClassTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [id, name] : table) out << id << "\t" << name << "\n";
}

/// One polygon per line: `class_id ; x0 y0 x1 y1 ...`
inline std::vector<PolygonAnnotation> parse_annotations(const std::string& text,
                                                        const std::string& origin,
                                                        const ClassTable* table = nullptr) {
  std::vector<PolygonAnnotation> polys;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    auto semi = t.find(';');
    if (semi == std::string::npos) throw IoError(where + ": expected 'class_id ; coords'");
    long long id = parse_int(trim(t.substr(0, semi)), "class id");
    if (id <= 0 || id > 65535) throw IoError(where + ": class id out of range");

    std::vector<std::string> nums;
    for (const std::string& tok : split(t.substr(semi + 1), ' '))
      if (!tok.empty()) nums.push_back(tok);
    if (nums.size() < 6 || nums.size() % 2 != 0)
      throw IoError(where + ": expected an even list of at least 6 coordinates");

    PolygonAnnotation poly;
    poly.class_id = static_cast<std::uint16_t>(id);
    for (std::size_t i = 0; i < nums.size(); i += 2)
      poly.vertices.emplace_back(parse_double(nums[i], "x"), parse_double(nums[i + 1], "y"));
    try {
      poly.validate();
    } catch (const IoError& e) {
      throw IoError(where + ": " + e.what());
    }
    if (table && !table->count(poly.class_id))
      throw IoError(where + ": class id " + std::to_string(id) + " not in class table");
    polys.push_back(std::move(poly));
  }
  return polys;
}

inline std::vector<PolygonAnnotation> load_annotations(const std::filesystem::path& path,
                                                       const ClassTable* table = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str(), path.string(), table);
}

inline void save_annotations(const std::vector<PolygonAnnotation>& polys,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& poly : polys) {
    out << poly.class_id << " ;";
    char buf[64];
    for (const auto& [x, y] : poly.vertices) {
      std::snprintf(buf, sizeof buf, " %.17g %.17g", x, y);
      out << buf;
    }
    out << "\n";
  }
}

/// mask(p) = ndvi(p) >= threshold.
inline Tensor<std::uint16_t> threshold_mask(const Tensor<float>& ndvi, double threshold) {
  if (ndvi.rank() != 2) throw ConfigError("ndvi raster must be rank 2");
  Tensor<std::uint16_t> mask({ndvi.extent(0), ndvi.extent(1)});
  for (std::size_t i = 0; i < ndvi.size(); ++i)
    mask[i] = ndvi[i] >= threshold ? 1 : 0;
  return mask;
}

/// Pixel gets a polygon's class iff its center lies inside the polygon and
/// the mask is set there. Later polygons overwrite earlier ones.
inline LabelRaster rasterize_labels(const std::vector<PolygonAnnotation>& polys,
                                    const Tensor<std::uint16_t>& mask) {
  if (mask.rank() != 2) throw ConfigError("mask must be rank 2");
  LabelRaster raster;
  raster.lines = mask.extent(0);
  raster.samples = mask.extent(1);
  raster.labels = Tensor<std::uint16_t>({raster.lines, raster.samples});

  for (const auto& poly : polys) {
    poly.validate();
    double xmin = poly.vertices[0].first, xmax = xmin;
    double ymin = poly.vertices[0].second, ymax = ymin;
    for (const auto& [x, y] : poly.vertices) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    // Clip the candidate window to the raster; vertices may lie outside.
    const auto l0 = static_cast<std::size_t>(std::max(0.0, std::floor(ymin)));
    const auto l1 = std::min<std::size_t>(raster.lines, static_cast<std::size_t>(
                                                            std::max(0.0, std::ceil(ymax))));
    const auto s0 = static_cast<std::size_t>(std::max(0.0, std::floor(xmin)));
    const auto s1 = std::min<std::size_t>(raster.samples, static_cast<std::size_t>(
                                                              std::max(0.0, std::ceil(xmax))));
    for (std::size_t l = l0; l < l1; ++l)
      for (std::size_t s = s0; s < s1; ++s) {
        if (!mask(l, s)) continue;
        if (poly.contains(static_cast<double>(s) + 0.5, static_cast<double>(l) + 0.5))
          raster.labels(l, s) = poly.class_id;
      }
  }
  return raster;
}

/// Count of pixels per nonzero class.
inline std::map<std::uint16_t, std::size_t> label_histogram(const Tensor<std::uint16_t>& labels) {
  std::map<std::uint16_t, std::size_t> hist;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) ++hist[labels[i]];
  return hist;
}

}  // namespace vinehsi::labeling

#endif
