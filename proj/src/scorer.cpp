#include "dlvit/scorer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dlvit/error.hpp"
#include "dlvit/parallel.hpp"

namespace dlvit {

const char* dl_sign_name(DlSign s) { return s == DlSign::importance ? "importance" : "eq7-literal"; }

DlSign parse_dl_sign(const std::string& s) {
  if (s == "importance") return DlSign::importance;
  if (s == "eq7-literal") return DlSign::eq7_literal;
  throw ConfigError("unknown dl sign '" + s + "' (expected importance or eq7-literal)");
}

std::vector<DeltaLossRecord> score_image(const VitModel& model, const TokenMatrix& tokens, int label,
                                         const ScoreOptions& opts) {
  const std::size_t n = tokens.size();
  if (label < 0 || static_cast<std::size_t>(label) >= model.config().num_classes) {
    throw IndexError("score_image: label " + std::to_string(label) + " out of range for image " + tokens.image_id);
  }
  const KeepMask base = opts.base_mask ? *opts.base_mask : KeepMask::all(n);
  std::vector<KeepMask> masks;
  masks.reserve(n + 1);
  masks.push_back(base);
  for (std::size_t i = 0; i < n; ++i) masks.push_back(masked_variant(tokens, i, &base));

  const std::size_t total = n + 1;
  const std::size_t chunk = opts.chunk == 0 ? total : opts.chunk;
  std::vector<double> losses(total);
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t count = std::min(chunk, total - start);
    std::vector<TokenMatrix> batch(count, tokens);
    std::vector<KeepMask> bm(masks.begin() + static_cast<std::ptrdiff_t>(start),
                             masks.begin() + static_cast<std::ptrdiff_t>(start + count));
    // a variant that drops the last kept token has no defined loss; it is
    // only possible when base keeps one token, and then dl is forced below
    for (auto& m : bm)
      if (m.kept_count() == 0) m = base;
    const Tensor logits = model.forward_batch(batch, bm, nullptr, opts.forward);
    const std::vector<int> labels(count, label);
    const auto l = cross_entropy_rows(logits, labels);
    std::copy(l.begin(), l.end(), losses.begin() + static_cast<std::ptrdiff_t>(start));
  }
  for (double l : losses) {
    if (!std::isfinite(l)) throw NumericError("score_image: non-finite loss for image " + tokens.image_id);
  }

  std::vector<DeltaLossRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.image_id = tokens.image_id;
    r.token_index = i;
    r.base_loss = losses[0];
    // a token that is already dropped changes nothing when masked again
    r.masked_loss = base.kept(i) ? losses[i + 1] : losses[0];
    r.dl = signed_dl(r.base_loss, r.masked_loss, opts.sign);
  }
  return out;
}

std::vector<DeltaLossRecord> score_dataset(const VitModel& model, const Dataset& data, const ScoreOptions& opts,
                                           std::size_t threads) {
  data.check_compatible(model.config());
  std::vector<std::vector<DeltaLossRecord>> per_image(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i, std::size_t) {
    const Sample& s = data.samples[i];
    per_image[i] = score_image(model, model.embed(s.pixels, s.id), s.label, opts);
  });
  std::vector<DeltaLossRecord> out;
  out.reserve(data.size() * model.config().num_patches());
  for (auto& v : per_image) std::move(v.begin(), v.end(), std::back_inserter(out));
  std::stable_sort(out.begin(), out.end(), [](const DeltaLossRecord& a, const DeltaLossRecord& b) {
    return a.image_id != b.image_id ? a.image_id < b.image_id : a.token_index < b.token_index;
  });
  return out;
}

std::vector<int> pseudo_label(std::span<const DeltaLossRecord> records, double rho) {
  if (std::isnan(rho)) throw ConfigError("pseudo_label: rho is NaN");
  std::vector<int> labels(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) labels[i] = records[i].dl > rho ? 1 : 0;
  return labels;
}

void apply_labels(std::vector<DeltaLossRecord>& records, double rho) {
  const auto labels = pseudo_label(records, rho);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].label = labels[i];
}

std::vector<DeltaLossRecord> with_sign(std::vector<DeltaLossRecord> records, DlSign sign) {
  for (auto& r : records) {
    r.dl = signed_dl(r.base_loss, r.masked_loss, sign);
    r.label = -1;
  }
  return records;
}

double rho_for_label_ratio(std::span<const DeltaLossRecord> records, double keep_fraction) {
  if (records.empty()) throw ContractError("rho_for_label_ratio: no records");
  if (!(keep_fraction > 0.0 && keep_fraction < 1.0)) throw ConfigError("label ratio must lie in (0, 1)");
  std::vector<double> dl;
  dl.reserve(records.size());
  for (const auto& r : records) dl.push_back(r.dl);
  std::sort(dl.begin(), dl.end());
  // values strictly above dl[k] are labelled 1
  const auto k = static_cast<std::size_t>(std::floor((1.0 - keep_fraction) * static_cast<double>(dl.size())));
  return dl[std::min(k, dl.size() - 1)];
}

DlStatistics dl_statistics(std::span<const DeltaLossRecord> records, std::size_t grid_side,
                           std::optional<HistogramRange> range) {
  if (records.empty()) throw ContractError("dl_statistics: no records");
  std::vector<double> dl;
  std::vector<std::size_t> idx;
  dl.reserve(records.size());
  idx.reserve(records.size());
  for (const auto& r : records) {
    dl.push_back(r.dl);
    idx.push_back(r.token_index);
  }
  DlStatistics s;
  s.moments = moments(dl);
  const HistogramRange hr = range ? *range : default_range(dl);
  s.histogram = histogram(dl, hr.lo, hr.hi, hr.bins);
  s.grid = spatial_grid(idx, dl, grid_side);
  return s;
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw FormatError(where + ": bad number '" + s + "'");
  return v;
}

}  // namespace

void write_records_csv(const std::filesystem::path& path, std::span<const DeltaLossRecord> records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image_id,token_index,base_loss,masked_loss,dl,label\n";
  for (const auto& r : records) {
    out << r.image_id << ',' << r.token_index << ',' << fmt17(r.base_loss) << ',' << fmt17(r.masked_loss) << ','
        << fmt17(r.dl) << ',';
    if (r.label >= 0) out << r.label;
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<DeltaLossRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<DeltaLossRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("image_id,", 0) == 0)) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno);
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw FormatError(where + ": expected 6 fields");
    DeltaLossRecord r;
    r.image_id = f[0];
    r.token_index = static_cast<std::size_t>(parse_double(f[1], where));
    r.base_loss = parse_double(f[2], where);
    r.masked_loss = parse_double(f[3], where);
    r.dl = parse_double(f[4], where);
    r.label = f[5].empty() ? -1 : static_cast<int>(parse_double(f[5], where));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dlvit
