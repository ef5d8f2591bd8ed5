#include "dlvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <deque>
#include <exception>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <utility>

#include "dlvit/error.hpp"
#include "dlvit/vit.hpp"

namespace dlvit {

namespace fs = std::filesystem;

// ---- raster ---------------------------------------------------------------

namespace {

constexpr char kRasterMagic[4] = {'D', 'L', 'I', 'M'};
constexpr std::size_t kRasterHeader = 16;

std::uint32_t read_u32(const std::string& b, std::size_t off) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::string encode_raster(const Raster& r) {
  if (r.pixels.size() != static_cast<std::size_t>(r.height) * r.width * r.channels) {
    throw ContractError("raster: pixel count does not match its dimensions");
  }
  std::string out(kRasterMagic, 4);
  append_u32(out, r.height);
  append_u32(out, r.width);
  append_u32(out, r.channels);
  out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
  return out;
}

Raster decode_raster(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kRasterMagic, 4) != 0) {
    throw FormatError(source + ": not a raster file (bad magic)");
  }
  if (bytes.size() < kRasterHeader) throw CorruptionError(source + ": raster header truncated", bytes.size());
  Raster r;
  r.height = read_u32(bytes, 4);
  r.width = read_u32(bytes, 8);
  r.channels = read_u32(bytes, 12);
  const std::size_t n = static_cast<std::size_t>(r.height) * r.width * r.channels;
  if (bytes.size() - kRasterHeader != n) {
    throw CorruptionError(source + ": expected " + std::to_string(n) + " pixel bytes, found " +
                              std::to_string(bytes.size() - kRasterHeader),
                          std::min(bytes.size(), kRasterHeader + n));
  }
  r.pixels.assign(bytes.begin() + kRasterHeader, bytes.end());
  return r;
}

void write_raster(const fs::path& path, const Raster& r) { spit(path, encode_raster(r)); }

Raster read_raster(const fs::path& path) { return decode_raster(slurp(path), path.string()); }

std::vector<float> raster_to_chw(const Raster& r, const PixelAffine& affine) {
  const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
  if (!affine.scale.empty() && affine.scale.size() != r.channels) throw ConfigError("pixel affine: one scale per channel");
  if (!affine.shift.empty() && affine.shift.size() != r.channels) throw ConfigError("pixel affine: one shift per channel");
  std::vector<float> out(hw * r.channels);
  for (std::size_t c = 0; c < r.channels; ++c) {
    const float sc = affine.scale.empty() ? 1.0f : affine.scale[c];
    const float sh = affine.shift.empty() ? 0.0f : affine.shift[c];
    for (std::size_t i = 0; i < hw; ++i) {
      const float v = static_cast<float>(r.pixels[i * r.channels + c]) / 255.0f;
      out[c * hw + i] = affine.scale.empty() && affine.shift.empty() ? v : v * sc + sh;
    }
  }
  return out;
}

Raster chw_to_raster(const std::vector<float>& chw, std::size_t height, std::size_t width, std::size_t channels) {
  const std::size_t hw = height * width;
  if (chw.size() != hw * channels) throw ContractError("chw_to_raster: size does not match dimensions");
  Raster r;
  r.height = static_cast<std::uint32_t>(height);
  r.width = static_cast<std::uint32_t>(width);
  r.channels = static_cast<std::uint32_t>(channels);
  r.pixels.resize(chw.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      const float v = std::clamp(chw[c * hw + i], 0.0f, 1.0f);
      r.pixels[i * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return r;
}

// ---- manifest -------------------------------------------------------------

DatasetManifest read_manifest(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open manifest " + csv.string());
  DatasetManifest m;
  m.root = csv.parent_path();
  m.split = csv.stem().string();
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("path,", 0) == 0) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() < 2 || fields.size() > 3) {
      throw FormatError(csv.string() + " line " + std::to_string(lineno) + ": expected path,label[,relevance_path]");
    }
    ManifestEntry e;
    e.path = fields[0];
    try {
      std::size_t used = 0;
      e.label = std::stoi(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw FormatError(csv.string() + " line " + std::to_string(lineno) + ": bad label '" + fields[1] + "'");
    }
    if (e.label < 0) throw FormatError(csv.string() + " line " + std::to_string(lineno) + ": negative label");
    if (fields.size() == 3) e.relevance_path = fields[2];
    max_label = std::max(max_label, e.label);
    m.entries.push_back(std::move(e));
  }
  m.num_classes = static_cast<std::size_t>(max_label + 1);
  return m;
}

void write_manifest(const fs::path& csv, const DatasetManifest& m) {
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write manifest " + csv.string());
  out << "path,label,relevance_path\n";
  for (const auto& e : m.entries) out << e.path << ',' << e.label << ',' << e.relevance_path << '\n';
  if (!out) throw IoError("write failed: " + csv.string());
}

// ---- loading --------------------------------------------------------------

namespace {

Sample load_entry(const DatasetManifest& m, std::size_t index, const PixelAffine& affine, Raster* shape_out) {
  const ManifestEntry& e = m.entries.at(index);
  Sample s;
  s.id = fs::path(e.path).stem().string();
  s.label = e.label;
  try {
    Raster r = read_raster(m.root / e.path);
    s.pixels = raster_to_chw(r, affine);
    if (shape_out) {
      shape_out->height = r.height;
      shape_out->width = r.width;
      shape_out->channels = r.channels;
    }
    if (!e.relevance_path.empty()) {
      Raster g = read_raster(m.root / e.relevance_path);
      if (g.channels != 1 || g.height != g.width) throw FormatError("relevance grid must be square and single-channel");
      s.relevance = std::move(g.pixels);
    }
  } catch (const Error& err) {
    throw IoError("manifest entry " + std::to_string(index) + " (" + e.path + "): " + err.what());
  }
  return s;
}

}  // namespace

void Dataset::check_compatible(const ModelConfig& config) const {
  if (samples.empty()) return;
  if (image_size != config.image_size || channels != config.channels) {
    throw ConfigError("dataset images are " + std::to_string(image_size) + "px x " + std::to_string(channels) +
                      " channels but the model expects " + std::to_string(config.image_size) + "px x " +
                      std::to_string(config.channels));
  }
  if (num_classes > config.num_classes) {
    throw ConfigError("dataset has " + std::to_string(num_classes) + " classes, model only " +
                      std::to_string(config.num_classes));
  }
  if (grid_side != 0 && grid_side != config.grid_side()) {
    throw ConfigError("relevance grids are " + std::to_string(grid_side) + " wide, model patch grid is " +
                      std::to_string(config.grid_side()));
  }
}

Dataset load_dataset(const DatasetManifest& manifest, const PixelAffine& affine) {
  Dataset d;
  d.num_classes = manifest.num_classes;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    Raster dims;
    Sample s = load_entry(manifest, i, affine, &dims);
    if (dims.height != dims.width) throw IoError("entry " + manifest.entries[i].path + ": image is not square");
    if (i == 0) {
      d.image_size = dims.height;
      d.channels = dims.channels;
    } else if (dims.height != d.image_size || dims.channels != d.channels) {
      throw IoError("entry " + manifest.entries[i].path + ": dimensions differ from the first image");
    }
    if (!s.relevance.empty()) {
      const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(s.relevance.size()))));
      if (d.grid_side == 0) d.grid_side = side;
      if (side != d.grid_side) throw IoError("entry " + manifest.entries[i].path + ": relevance grid size differs");
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

ImageStream::ImageStream(DatasetManifest manifest, std::optional<std::uint64_t> shuffle_seed, PixelAffine affine)
    : manifest_(std::move(manifest)), affine_(std::move(affine)) {
  if (shuffle_seed) {
    order_ = shuffled_order(manifest_.entries.size(), *shuffle_seed);
  } else {
    order_.resize(manifest_.entries.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
}

struct PrefetchStream::State {
  std::mutex mu;
  std::condition_variable not_full, not_empty;
  std::deque<Sample> queue;
  std::size_t capacity = 1;
  bool done = false, stop = false;
  std::exception_ptr error;
  std::thread producer;
};

PrefetchStream::PrefetchStream(DatasetManifest manifest, std::size_t capacity,
                               std::optional<std::uint64_t> shuffle_seed, PixelAffine affine)
    : state_(std::make_unique<State>()), size_(manifest.entries.size()) {
  if (capacity == 0) throw ConfigError("prefetch queue capacity must be positive");
  state_->capacity = capacity;
  State* st = state_.get();
  st->producer = std::thread([st, stream = ImageStream(std::move(manifest), shuffle_seed, std::move(affine))]() mutable {
    try {
      while (auto s = stream.next()) {
        std::unique_lock lock(st->mu);
        st->not_full.wait(lock, [st] { return st->stop || st->queue.size() < st->capacity; });
        if (st->stop) return;
        st->queue.push_back(std::move(*s));
        st->not_empty.notify_one();
      }
    } catch (...) {
      std::lock_guard lock(st->mu);
      st->error = std::current_exception();
    }
    std::lock_guard lock(st->mu);
    st->done = true;
    st->not_empty.notify_all();
  });
}

PrefetchStream::~PrefetchStream() {
  {
    std::lock_guard lock(state_->mu);
    state_->stop = true;
  }
  state_->not_full.notify_all();
  state_->producer.join();
}

std::optional<Sample> PrefetchStream::next() {
  std::unique_lock lock(state_->mu);
  state_->not_empty.wait(lock, [this] { return !state_->queue.empty() || state_->done; });
  if (!state_->queue.empty()) {
    Sample s = std::move(state_->queue.front());
    state_->queue.pop_front();
    state_->not_full.notify_one();
    return s;
  }
  if (state_->error) std::rethrow_exception(std::exchange(state_->error, nullptr));
  return std::nullopt;
}

std::optional<Sample> ImageStream::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  return load_entry(manifest_, order_[pos_++], affine_, nullptr);
}

DatasetManifest write_dataset(const fs::path& dir, const Dataset& data, const std::string& split) {
  fs::create_directories(dir / "images");
  const bool with_grid = data.grid_side != 0;
  if (with_grid) fs::create_directories(dir / "relevance");
  DatasetManifest m;
  m.root = dir;
  m.split = split;
  m.num_classes = data.num_classes;
  for (const Sample& s : data.samples) {
    ManifestEntry e;
    e.path = "images/" + s.id + ".dlim";
    e.label = s.label;
    write_raster(dir / e.path, chw_to_raster(s.pixels, data.image_size, data.image_size, data.channels));
    if (with_grid && !s.relevance.empty()) {
      e.relevance_path = "relevance/" + s.id + ".dlim";
      Raster g;
      g.height = g.width = static_cast<std::uint32_t>(data.grid_side);
      g.channels = 1;
      g.pixels = s.relevance;
      write_raster(dir / e.relevance_path, g);
    }
    m.entries.push_back(std::move(e));
  }
  write_manifest(dir / (split + ".csv"), m);
  return m;
}

// ---- synthetic shapes -----------------------------------------------------

const char* shape_name(ShapeKind k) {
  static const char* names[] = {"disk", "square", "ring", "plus", "cross", "hbar", "vbar", "triangle", "diamond", "frame"};
  return names[static_cast<std::size_t>(k)];
}

bool shape_contains(ShapeKind k, double u, double v) {
  const double au = std::fabs(u), av = std::fabs(v);
  const double r2 = u * u + v * v;
  const double box = std::max(au, av);
  switch (k) {
    case ShapeKind::disk: return r2 <= 1.0;
    case ShapeKind::square: return box <= 1.0;
    case ShapeKind::ring: return r2 <= 1.0 && r2 >= 0.36;
    case ShapeKind::plus: return box <= 1.0 && (au <= 0.3 || av <= 0.3);
    case ShapeKind::cross: return box <= 1.0 && (std::fabs(u - v) <= 0.42 || std::fabs(u + v) <= 0.42);
    case ShapeKind::hbar: return au <= 1.0 && av <= 0.3;
    case ShapeKind::vbar: return av <= 1.0 && au <= 0.3;
    case ShapeKind::triangle: return v >= -1.0 && v <= 1.0 && au <= (v + 1.0) * 0.5;
    case ShapeKind::diamond: return au + av <= 1.0;
    case ShapeKind::frame: return box <= 1.0 && box >= 0.6;
  }
  return false;
}

void SyntheticSpec::validate() const {
  if (num_classes < 2 || num_classes > kShapeKinds) {
    throw ConfigError("synthetic: num_classes must be in [2, " + std::to_string(kShapeKinds) + "]");
  }
  if (patch_size == 0 || image_size % patch_size != 0) throw ConfigError("synthetic: image_size % patch_size != 0");
  if (channels == 0) throw ConfigError("synthetic: channels must be positive");
  if (!(scale_min > 0.0) || scale_min > scale_max) throw ConfigError("synthetic: need 0 < scale_min <= scale_max");
  if (2.0 * scale_max > static_cast<double>(image_size)) {
    throw ConfigError("synthetic: object extent " + std::to_string(2.0 * scale_max) + "px exceeds the " +
                      std::to_string(image_size) + "px canvas");
  }
  if (jitter < 0.0 || noise < 0.0 || noise > 1.0) throw ConfigError("synthetic: jitter >= 0 and noise in [0, 1]");
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n_per_class) {
  spec.validate();
  const std::size_t w = spec.image_size, ch = spec.channels, side = w / spec.patch_size;
  Dataset d;
  d.image_size = w;
  d.channels = ch;
  d.num_classes = spec.num_classes;
  d.grid_side = side;
  SplitMix64 rng(spec.seed);
  const auto noise_max = static_cast<std::uint32_t>(std::lround(spec.noise * 255.0));
  std::size_t index = 0;
  for (std::size_t rep = 0; rep < n_per_class; ++rep) {
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls, ++index) {
      const auto kind = static_cast<ShapeKind>(cls);
      const double cx = 0.5 * static_cast<double>(w) + rng.uniform(-spec.jitter, spec.jitter);
      const double cy = 0.5 * static_cast<double>(w) + rng.uniform(-spec.jitter, spec.jitter);
      const double s = rng.uniform(spec.scale_min, spec.scale_max);
      // bright colour: every channel in [0.45, 1], one of them pushed to full
      std::vector<std::uint8_t> colour(ch);
      for (auto& c : colour) c = static_cast<std::uint8_t>(115 + rng.below(141));
      colour[rng.below(ch)] = 255;

      Raster img;
      img.height = img.width = static_cast<std::uint32_t>(w);
      img.channels = static_cast<std::uint32_t>(ch);
      img.pixels.resize(w * w * ch);
      std::vector<std::uint8_t> grid(side * side, 0);
      for (std::size_t y = 0; y < w; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double u = (static_cast<double>(x) + 0.5 - cx) / s;
          const double v = (static_cast<double>(y) + 0.5 - cy) / s;
          const bool inside = shape_contains(kind, u, v);
          for (std::size_t c = 0; c < ch; ++c) {
            img.pixels[(y * w + x) * ch + c] =
                inside ? colour[c] : static_cast<std::uint8_t>(rng.below(noise_max + 1));
          }
          if (inside) grid[(y / spec.patch_size) * side + x / spec.patch_size] = 1;
        }
      Sample smp;
      char id[32];
      std::snprintf(id, sizeof id, "img_%06zu", index);
      smp.id = id;
      smp.label = static_cast<int>(cls);
      smp.pixels = raster_to_chw(img);
      smp.relevance = std::move(grid);
      d.samples.push_back(std::move(smp));
    }
  }
  return d;
}

}  // namespace dlvit
