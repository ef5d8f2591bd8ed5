#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dlvit/error.hpp"
#include "dlvit/rng.hpp"
#include "dlvit/stats.hpp"

using namespace dlvit;

namespace {

std::uint64_t conserved(const Histogram& h) {
  return std::accumulate(h.counts.begin(), h.counts.end(), std::uint64_t{0}) + h.underflow + h.overflow;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dlvit_test_stats_" + name);
}

}  // namespace

TEST_CASE("half-open bin boundaries") {
  const std::vector<double> at_min{0.0};
  Histogram h = histogram(at_min, 0.0, 1.0, 10);
  CHECK(h.counts[0] == 1);
  CHECK(h.total == 1);

  const std::vector<double> at_max{1.0};
  h = histogram(at_max, 0.0, 1.0, 10);
  CHECK(h.overflow == 1);
  CHECK(conserved(h) == 1);

  const std::vector<double> below{-1e-12};
  CHECK(histogram(below, 0.0, 1.0, 10).underflow == 1);

  // every interior edge belongs to the bin on its right
  h = histogram(std::vector<double>{0.1, 0.2, 0.3, 0.7}, 0.0, 1.0, 10);
  for (std::size_t k = 0; k < 10; ++k) {
    const double e = h.edge(k);
    const auto one = histogram(std::vector<double>{e}, 0.0, 1.0, 10);
    CHECK(one.counts[k] == 1);
  }
}

TEST_CASE("edges strictly increase and span the range") {
  const Histogram h = histogram({}, -3.0, 2.0, 101);
  CHECK(h.edge(0) == -3.0);
  CHECK(h.edge(101) == 2.0);
  for (std::size_t k = 0; k < 101; ++k) CHECK(h.edge(k) < h.edge(k + 1));
}

TEST_CASE("total is conserved") {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(rng.below(500));
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    const auto bins = 1 + rng.below(40);
    const Histogram h = histogram(v, -1.0, 1.0, bins);
    CHECK(h.total == v.size());
    CHECK(conserved(h) == h.total);
  }
  // degenerate: all values identical
  const std::vector<double> same(17, 0.25);
  const Histogram h = histogram(same, 0.0, 1.0, 4);
  CHECK(h.counts[1] == 17);
  CHECK(conserved(h) == 17);
}

TEST_CASE("uniform samples fill bins within 5 sigma") {
  SplitMix64 rng(99);
  std::vector<double> v(10000);
  for (auto& x : v) x = rng.uniform();
  const std::size_t bins = 20;
  const Histogram h = histogram(v, 0.0, 1.0, bins);
  const double p = 1.0 / bins, n = 10000;
  const double mu = n * p, sigma = std::sqrt(n * p * (1 - p));
  for (auto c : h.counts) CHECK(std::fabs(static_cast<double>(c) - mu) < 5 * sigma);
  CHECK(h.underflow == 0);
  CHECK(h.overflow == 0);
}

TEST_CASE("histogram rejects bad input") {
  CHECK_THROWS_AS(histogram(std::vector<double>{0.5}, 0.0, 1.0, 0), ContractError);
  CHECK_THROWS_AS(histogram(std::vector<double>{0.5}, 1.0, 1.0, 3), ContractError);
  CHECK_THROWS_AS(histogram(std::vector<double>{0.5, std::nan("")}, 0.0, 1.0, 3), NumericError);
}

TEST_CASE("mode bin") {
  const Histogram h = histogram(std::vector<double>{0.1, 0.55, 0.56, 0.9}, 0.0, 1.0, 10);
  CHECK(h.mode_bin() == 5);
}

TEST_CASE("moments and default range") {
  const std::vector<double> v{1, 2, 3, 4};
  const Moments m = moments(v);
  CHECK(m.count == 4);
  CHECK(m.mean == 2.5);
  CHECK(m.stddev == doctest::Approx(std::sqrt(1.25)));
  CHECK(m.min == 1);
  CHECK(m.max == 4);
  const HistogramRange r = default_range(v);
  CHECK(r.bins == 101);
  CHECK(r.lo == doctest::Approx(2.5 - 5 * std::sqrt(1.25)));
  CHECK(r.hi == doctest::Approx(2.5 + 5 * std::sqrt(1.25)));
  const HistogramRange flat = default_range(std::vector<double>(5, 3.0));
  CHECK(flat.lo == 2.5);
  CHECK(flat.hi == 3.5);
  CHECK_THROWS_AS(default_range(std::vector<double>{}), ContractError);
}

TEST_CASE("one value per cell reproduces the input") {
  const std::size_t side = 5;
  std::vector<std::size_t> idx(side * side);
  std::vector<double> val(side * side);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = i;
    val[i] = std::sin(static_cast<double>(i)) * 3.0;
  }
  const SpatialGrid g = spatial_grid(idx, val, side);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    CHECK(g.mean[i] == val[i]);
    CHECK(g.count[i] == 1);
  }
}

TEST_CASE("duplicated values leave the grid unchanged") {
  std::vector<std::size_t> idx{0, 1, 2, 3};
  std::vector<double> val{1.5, -2.0, 0.25, 7.0};
  const SpatialGrid a = spatial_grid(idx, val, 2);
  auto idx2 = idx;
  auto val2 = val;
  idx2.insert(idx2.end(), idx.begin(), idx.end());
  val2.insert(val2.end(), val.begin(), val.end());
  const SpatialGrid b = spatial_grid(idx2, val2, 2);
  CHECK(a.mean == b.mean);
  for (std::size_t i = 0; i < 4; ++i) CHECK(b.count[i] == 2);
}

TEST_CASE("checkerboard in, checkerboard out") {
  const std::size_t side = 8;
  std::vector<std::size_t> idx;
  std::vector<double> val;
  for (int rep = 0; rep < 3; ++rep)
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        idx.push_back(r * side + c);
        val.push_back((r + c) % 2 ? 1.0 : -1.0);
      }
  const SpatialGrid g = spatial_grid(idx, val, side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) CHECK(g.at(r, c) == ((r + c) % 2 ? 1.0 : -1.0));
}

TEST_CASE("grid is invariant to record order") {
  SplitMix64 rng(12);
  std::vector<std::size_t> idx(400);
  std::vector<double> val(400);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = rng.below(16);
    val[i] = rng.normal() * 1e3 + rng.uniform() * 1e-9;
  }
  const SpatialGrid a = spatial_grid(idx, val, 4);
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      const std::size_t j = rng.below(i + 1);
      std::swap(idx[i], idx[j]);
      std::swap(val[i], val[j]);
    }
    const SpatialGrid b = spatial_grid(idx, val, 4);
    CHECK(a.mean == b.mean);
    CHECK(a.count == b.count);
  }
}

TEST_CASE("empty cells are flagged, not zero") {
  const SpatialGrid g = spatial_grid(std::vector<std::size_t>{0}, std::vector<double>{0.0}, 2);
  CHECK(!g.empty(0));
  CHECK(g.mean[0] == 0.0);
  CHECK(g.empty(3));
  CHECK(std::isnan(g.mean[3]));
}

TEST_CASE("grid errors") {
  CHECK_THROWS_AS(spatial_grid(std::vector<std::size_t>{4}, std::vector<double>{1.0}, 2), IndexError);
  CHECK_THROWS_AS(spatial_grid(std::vector<std::size_t>{0}, std::vector<double>{std::nan("")}, 2), NumericError);
  CHECK_THROWS_AS(spatial_grid(std::vector<std::size_t>{0, 1}, std::vector<double>{1.0}, 2), ContractError);
}

TEST_CASE("border versus center") {
  std::vector<std::size_t> idx;
  std::vector<double> val;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      idx.push_back(r * 4 + c);
      const bool border = r == 0 || c == 0 || r == 3 || c == 3;
      val.push_back(border ? 1.0 : 5.0);
    }
  const BorderCenter bc = border_vs_center(spatial_grid(idx, val, 4));
  CHECK(bc.border == 1.0);
  CHECK(bc.center == 5.0);
}

TEST_CASE("csv schemas") {
  const Histogram h = histogram(std::vector<double>{-5, 0.1, 0.6, 9}, 0.0, 1.0, 2);
  const auto hp = temp_file("hist.csv");
  write_histogram_csv(hp, h);
  const auto hl = lines_of(hp);
  REQUIRE(hl.size() == 5);
  CHECK(hl[0] == "kind,lo,hi,count");
  CHECK(hl[1] == "under,-inf,0,1");
  CHECK(hl[2] == "bin,0,0.5,1");
  CHECK(hl[3] == "bin,0.5,1,1");
  CHECK(hl[4] == "over,1,inf,1");

  const SpatialGrid g = spatial_grid(std::vector<std::size_t>{0, 0, 3}, std::vector<double>{1, 2, 0.25}, 2);
  const auto gp = temp_file("grid.csv");
  write_grid_csv(gp, g);
  const auto gl = lines_of(gp);
  REQUIRE(gl.size() == 5);  // header + N cells
  CHECK(gl[0] == "row,col,mean,count");
  CHECK(gl[1] == "0,0,1.5,2");
  CHECK(gl[2] == "0,1,,0");
  CHECK(gl[4] == "1,1,0.25,1");
  std::filesystem::remove(hp);
  std::filesystem::remove(gp);
  CHECK_THROWS_AS(write_grid_csv("/nonexistent_dir/x.csv", g), IoError);
}
