#pragma once

// Histograms, spatial patch grids and summary moments.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dlvit {

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<std::uint64_t> counts;
  std::uint64_t underflow = 0, overflow = 0, total = 0;

  std::size_t bins() const { return counts.size(); }
  double width() const { return (hi - lo) / static_cast<double>(counts.size()); }
  double edge(std::size_t k) const;
  // Index of the most populated bin (first one on ties).
  std::size_t mode_bin() const;
};

// Uniform half-open bins [e_k, e_k+1) over [lo, hi); v < lo goes to underflow,
// v >= hi to overflow. NaN values raise NumericError.
Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins);

struct Moments {
  std::size_t count = 0;
  double mean = 0, stddev = 0, min = 0, max = 0;
};
Moments moments(std::span<const double> values);

// mean +- 5 sigma with 101 bins; a zero-spread sample uses [mean - 0.5, mean + 0.5].
struct HistogramRange {
  double lo, hi;
  std::size_t bins;
};
HistogramRange default_range(std::span<const double> values, std::size_t bins = 101, double sigmas = 5.0);

struct SpatialGrid {
  std::size_t side = 0;
  std::vector<double> mean;  // row-major side x side
  std::vector<std::uint64_t> count;

  bool empty(std::size_t cell) const { return count.at(cell) == 0; }
  double at(std::size_t row, std::size_t col) const { return mean.at(row * side + col); }
};

// Mean of the values landing in each cell; index[i] = row * side + col.
// Cells without values have count 0 and mean NaN.
SpatialGrid spatial_grid(std::span<const std::size_t> index, std::span<const double> values, std::size_t side);

// Means over the cells on the outer ring and over the remaining inner cells.
struct BorderCenter {
  double border = 0, center = 0;
};
BorderCenter border_vs_center(const SpatialGrid& grid);

// kind,lo,hi,count with "under" and "over" rows around the bins.
void write_histogram_csv(const std::filesystem::path& path, const Histogram& h);
// row,col,mean,count; the mean field is empty for cells without values.
void write_grid_csv(const std::filesystem::path& path, const SpatialGrid& g);

}  // namespace dlvit
