#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "lvm/harness.hpp"
#include "lvm/image.hpp"

namespace lvm {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace

std::string render_csv_table(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot open '" + csv_path + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(split_csv_line(line));
  }
  if (rows.empty()) return "(empty)\n";

  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  std::vector<std::size_t> widths(cols, 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], r[c].size());
  }

  std::string out;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    const auto& r = rows[ri];
    for (std::size_t c = 0; c < r.size(); ++c) {
      out += r[c];
      if (c + 1 < r.size()) out += std::string(widths[c] - r[c].size() + 2, ' ');
    }
    out += "\n";
    if (ri == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += widths[c] + (c + 1 < cols ? 2 : 0);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

void write_line_plot(const std::string& path, const std::vector<double>& xs,
                     const std::vector<std::vector<double>>& series, int width, int height) {
  if (xs.size() < 2) throw std::invalid_argument("write_line_plot: need at least 2 points");
  for (const auto& ys : series) {
    if (ys.size() != xs.size()) {
      throw std::invalid_argument("write_line_plot: series length mismatch");
    }
  }
  double x_lo = xs[0], x_hi = xs[0], y_lo = series[0][0], y_hi = series[0][0];
  for (const double x : xs) {
    x_lo = std::min(x_lo, x);
    x_hi = std::max(x_hi, x);
  }
  for (const auto& ys : series) {
    for (const double y : ys) {
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  if (y_hi == y_lo) y_hi = y_lo + 1.0;

  const int margin = 24;
  Image img(height, width, 1.0f);
  auto px = [&](double x) {
    return margin + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) *
                                                 (width - 2 * margin)));
  };
  auto py = [&](double y) {
    return height - margin -
           static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)));
  };

  // axes
  for (int x = margin; x < width - margin; ++x) {
    img.at(height - margin, x, 0) = img.at(height - margin, x, 1) = img.at(height - margin, x, 2) = 0.6f;
  }
  for (int y = margin; y <= height - margin; ++y) {
    img.at(y, margin, 0) = img.at(y, margin, 1) = img.at(y, margin, 2) = 0.6f;
  }

  const float palette[4][3] = {
      {0.85f, 0.2f, 0.2f}, {0.2f, 0.45f, 0.85f}, {0.15f, 0.6f, 0.25f}, {0.7f, 0.5f, 0.1f}};
  for (std::size_t si = 0; si < series.size(); ++si) {
    const float* color = palette[si % 4];
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
      int x0 = px(xs[i]), y0 = py(series[si][i]);
      int x1 = px(xs[i + 1]), y1 = py(series[si][i + 1]);
      const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
      for (int sidx = 0; sidx <= steps; ++sidx) {
        const double t = static_cast<double>(sidx) / steps;
        const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
        const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
        for (int dy = 0; dy <= 1; ++dy) {
          const int yy = std::clamp(y + dy, 0, height - 1);
          const int xx = std::clamp(x, 0, width - 1);
          img.at(yy, xx, 0) = color[0];
          img.at(yy, xx, 1) = color[1];
          img.at(yy, xx, 2) = color[2];
        }
      }
    }
  }
  write_ppm(path, img);
}

}  // namespace lvm
