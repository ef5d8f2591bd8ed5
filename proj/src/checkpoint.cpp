#include "dlvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "dlvit/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace dlvit {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'V', 'T'};
constexpr std::uint8_t kDtypeF32 = 0;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw CorruptionError(source_ + ": truncated while reading " + what, pos_);
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(std::span<float> out, const char* what) {
    const std::size_t n = out.size() * sizeof(float);
    need(n, what);
    std::memcpy(out.data(), bytes_.data() + pos_, n);
    pos_ += n;
  }

 private:
  const std::string& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TensorMap& tensors) {
  std::string out;
  out.append(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!t.defined()) throw ContractError("checkpoint: tensor '" + name + "' is undefined");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, kDtypeF32);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    const auto data = t.data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  return out;
}

TensorMap decode_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.remaining() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(source + ": not a checkpoint file (bad magic)");
  }
  r.bytes(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.offset();
    const auto len = r.get<std::uint32_t>("name length");
    std::string name = r.bytes(len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32) throw FormatError(source + ": tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint32_t>("rank");
    r.need(static_cast<std::size_t>(rank) * 8, "dims");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("dims");
      if (d != 0 && numel > std::numeric_limits<std::size_t>::max() / sizeof(float) / d) {
        throw CorruptionError(source + ": tensor '" + name + "' has an impossible size", start);
      }
      numel *= d;
    }
    if (r.remaining() < numel * sizeof(float)) {
      throw CorruptionError(source + ": truncated in payload of '" + name + "'", r.offset());
    }
    std::vector<float> data(numel);
    r.floats(data, "payload");
    if (!out.emplace(name, Tensor::from(std::move(shape), std::move(data))).second) {
      throw CorruptionError(source + ": duplicate tensor name '" + name + "'", start);
    }
  }
  if (r.remaining() != 0) throw CorruptionError(source + ": trailing bytes after the last tensor", r.offset());
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

TensorMap merge(TensorMap base, const TensorMap& extra) {
  for (const auto& [k, v] : extra) base[k] = v;
  return base;
}

}  // namespace dlvit
