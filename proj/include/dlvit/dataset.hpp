#pragma once

// Raster images, CSV manifests and the synthetic shapes dataset.
//
// Raster file: "DLIM" | u32 height | u32 width | u32 channels | u8 pixels (HWC).
// Manifest CSV: path,label,relevance_path (paths relative to the manifest).
// A relevance grid is a single-channel raster of 0/1 bytes, one per patch.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dlvit/rng.hpp"

namespace dlvit {

struct ModelConfig;

struct Raster {
  std::uint32_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // HWC

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

std::string encode_raster(const Raster& r);
Raster decode_raster(const std::string& bytes, const std::string& source = "raster");
void write_raster(const std::filesystem::path& path, const Raster& r);
Raster read_raster(const std::filesystem::path& path);

// Per-channel v = pixel / 255 * scale + shift. Empty vectors mean identity.
struct PixelAffine {
  std::vector<float> scale, shift;
};

// HWC bytes -> channel-major floats.
std::vector<float> raster_to_chw(const Raster& r, const PixelAffine& affine = {});
// Inverse of the identity normalisation; values are rounded to the nearest byte.
Raster chw_to_raster(const std::vector<float>& chw, std::size_t height, std::size_t width, std::size_t channels);

struct ManifestEntry {
  std::string path;
  int label = 0;
  std::string relevance_path;  // empty when absent
};

struct DatasetManifest {
  std::filesystem::path root;  // directory the entry paths are relative to
  std::vector<ManifestEntry> entries;
  std::size_t num_classes = 0;
  std::string split;
};

DatasetManifest read_manifest(const std::filesystem::path& csv);
void write_manifest(const std::filesystem::path& csv, const DatasetManifest& m);

struct Sample {
  std::string id;
  int label = 0;
  std::vector<float> pixels;            // CHW in [0, 1]
  std::vector<std::uint8_t> relevance;  // grid_side^2 flags, empty when unknown
};

struct Dataset {
  std::size_t image_size = 0;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  std::size_t grid_side = 0;  // side of the relevance grid, 0 when absent
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  // ConfigError when image size, channels or class count do not fit the model.
  void check_compatible(const ModelConfig& config) const;
};

// Reads every entry in manifest order. Missing or unreadable files raise
// IoError naming the entry.
Dataset load_dataset(const DatasetManifest& manifest, const PixelAffine& affine = {});

// Streams samples one at a time, in manifest order or in a seeded shuffle.
class ImageStream {
 public:
  explicit ImageStream(DatasetManifest manifest, std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                       PixelAffine affine = {});
  std::optional<Sample> next();
  std::size_t size() const { return order_.size(); }

 private:
  DatasetManifest manifest_;
  PixelAffine affine_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// One producer thread decodes images into a bounded queue; any number of
// threads may call next(). A read error is rethrown to the consumer that
// reaches it, after which the stream reports exhaustion.
class PrefetchStream {
 public:
  explicit PrefetchStream(DatasetManifest manifest, std::size_t capacity = 64,
                          std::optional<std::uint64_t> shuffle_seed = std::nullopt, PixelAffine affine = {});
  ~PrefetchStream();
  PrefetchStream(const PrefetchStream&) = delete;
  PrefetchStream& operator=(const PrefetchStream&) = delete;

  std::optional<Sample> next();
  std::size_t size() const { return size_; }

 private:
  struct State;
  std::unique_ptr<State> state_;
  std::size_t size_ = 0;
};

// Fisher-Yates permutation of 0..n-1 driven by SplitMix64(seed).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

// Writes images/, relevance/ and a manifest CSV under dir; returns the manifest.
DatasetManifest write_dataset(const std::filesystem::path& dir, const Dataset& data, const std::string& split);

// ---- synthetic shapes -----------------------------------------------------

enum class ShapeKind {
  disk,
  square,
  ring,
  plus,
  cross,
  hbar,
  vbar,
  triangle,
  diamond,
  frame,
};
inline constexpr std::size_t kShapeKinds = 10;
const char* shape_name(ShapeKind k);

// True when the point (u, v), in units of the object scale, lies inside the
// shape. Every shape fits in the square [-1, 1]^2.
bool shape_contains(ShapeKind k, double u, double v);

struct SyntheticSpec {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t num_classes = 10;  // the first num_classes shapes
  double scale_min = 6.0;        // half-extent in pixels
  double scale_max = 10.0;
  double jitter = 3.0;        // centre offset drawn from [-jitter, jitter] on each axis
  double noise = 0.25;        // background pixels uniform in [0, noise]
  std::uint64_t seed = 0;

  // ConfigError on impossible settings, e.g. an object larger than the canvas.
  void validate() const;
};

// Class-balanced, classes interleaved; ids are "img_000000", "img_000001", ...
// Pixels are exact byte values / 255 so a write/read round trip is lossless.
Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n_per_class);

}  // namespace dlvit
