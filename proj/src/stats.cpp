#include "dlvit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "dlvit/error.hpp"

namespace dlvit {

double Histogram::edge(std::size_t k) const {
  if (k == counts.size()) return hi;
  return lo + width() * static_cast<double>(k);
}

std::size_t Histogram::mode_bin() const {
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins) {
  if (bins < 1) throw ContractError("histogram: need at least one bin");
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw ContractError("histogram: need finite lo < hi");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  for (double v : values) {
    if (std::isnan(v)) throw NumericError("histogram: NaN value");
    ++h.total;
    if (v < lo) {
      ++h.underflow;
      continue;
    }
    if (v >= hi) {
      ++h.overflow;
      continue;
    }
    auto k = static_cast<std::size_t>((v - lo) / h.width());
    k = std::min(k, bins - 1);
    // the division can land one bin off near an edge
    while (k > 0 && v < h.edge(k)) --k;
    while (k + 1 < bins && v >= h.edge(k + 1)) ++k;
    ++h.counts[k];
  }
  return h;
}

Moments moments(std::span<const double> values) {
  Moments m;
  m.count = values.size();
  if (values.empty()) return m;
  m.min = std::numeric_limits<double>::infinity();
  m.max = -m.min;
  double sum = 0;
  for (double v : values) {
    if (std::isnan(v)) throw NumericError("moments: NaN value");
    sum += v;
    m.min = std::min(m.min, v);
    m.max = std::max(m.max, v);
  }
  m.mean = sum / static_cast<double>(m.count);
  double ss = 0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(ss / static_cast<double>(m.count));
  return m;
}

HistogramRange default_range(std::span<const double> values, std::size_t bins, double sigmas) {
  if (values.empty()) throw ContractError("default_range: no values");
  const Moments m = moments(values);
  if (m.stddev == 0.0 || !std::isfinite(m.stddev)) return {m.mean - 0.5, m.mean + 0.5, bins};
  return {m.mean - sigmas * m.stddev, m.mean + sigmas * m.stddev, bins};
}

SpatialGrid spatial_grid(std::span<const std::size_t> index, std::span<const double> values, std::size_t side) {
  if (index.size() != values.size()) throw ContractError("spatial_grid: index and value counts differ");
  const std::size_t cells = side * side;
  std::vector<std::vector<double>> per_cell(cells);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= cells) {
      throw IndexError("spatial_grid: token index " + std::to_string(index[i]) + " outside a " + std::to_string(side) +
                       "x" + std::to_string(side) + " grid");
    }
    if (std::isnan(values[i])) throw NumericError("spatial_grid: NaN value");
    per_cell[index[i]].push_back(values[i]);
  }
  SpatialGrid g;
  g.side = side;
  g.mean.assign(cells, std::numeric_limits<double>::quiet_NaN());
  g.count.assign(cells, 0);
  for (std::size_t c = 0; c < cells; ++c) {
    auto& v = per_cell[c];
    if (v.empty()) continue;
    // fixed summation order so the result does not depend on record order
    std::sort(v.begin(), v.end());
    double sum = 0;
    for (double x : v) sum += x;
    g.count[c] = v.size();
    g.mean[c] = sum / static_cast<double>(v.size());
  }
  return g;
}

BorderCenter border_vs_center(const SpatialGrid& g) {
  double bs = 0, cs = 0;
  std::size_t bn = 0, cn = 0;
  for (std::size_t r = 0; r < g.side; ++r)
    for (std::size_t c = 0; c < g.side; ++c) {
      const std::size_t i = r * g.side + c;
      if (g.empty(i)) continue;
      const bool border = r == 0 || c == 0 || r + 1 == g.side || c + 1 == g.side;
      (border ? bs : cs) += g.mean[i];
      ++(border ? bn : cn);
    }
  BorderCenter out;
  out.border = bn ? bs / static_cast<double>(bn) : std::numeric_limits<double>::quiet_NaN();
  out.center = cn ? cs / static_cast<double>(cn) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_histogram_csv(const std::filesystem::path& path, const Histogram& h) {
  auto out = open_out(path);
  out << "kind,lo,hi,count\n";
  out << "under,-inf," << num(h.lo) << ',' << h.underflow << '\n';
  for (std::size_t k = 0; k < h.bins(); ++k)
    out << "bin," << num(h.edge(k)) << ',' << num(h.edge(k + 1)) << ',' << h.counts[k] << '\n';
  out << "over," << num(h.hi) << ",inf," << h.overflow << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void write_grid_csv(const std::filesystem::path& path, const SpatialGrid& g) {
  auto out = open_out(path);
  out << "row,col,mean,count\n";
  for (std::size_t r = 0; r < g.side; ++r)
    for (std::size_t c = 0; c < g.side; ++c) {
      const std::size_t i = r * g.side + c;
      out << r << ',' << c << ',' << (g.empty(i) ? std::string() : num(g.mean[i])) << ',' << g.count[i] << '\n';
    }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace dlvit
