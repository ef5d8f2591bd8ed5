#pragma once

// Per-token delta-loss scoring against a frozen backbone and thresholded
// pseudo-labels.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlvit/dataset.hpp"
#include "dlvit/stats.hpp"
#include "dlvit/vit.hpp"

namespace dlvit {

// importance:  dl = L_i - L  (loss increase when token i is masked)
// eq7_literal: dl = L - L_i
enum class DlSign { importance, eq7_literal };

const char* dl_sign_name(DlSign s);
// Accepts "importance" and "eq7-literal"; ConfigError otherwise.
DlSign parse_dl_sign(const std::string& s);

inline double signed_dl(double base_loss, double masked_loss, DlSign sign) {
  return sign == DlSign::importance ? masked_loss - base_loss : base_loss - masked_loss;
}

struct DeltaLossRecord {
  std::string image_id;
  std::size_t token_index = 0;
  double base_loss = 0;    // L
  double masked_loss = 0;  // L_i
  double dl = 0;
  int label = -1;  // -1 until pseudo-labelled

  bool operator==(const DeltaLossRecord&) const = default;
};

struct ScoreOptions {
  DlSign sign = DlSign::importance;
  ForwardOptions forward;
  // Sequences per forward call; 0 scores all N + 1 variants in one batch.
  std::size_t chunk = 0;
  // Tokens already dropped before scoring; their dl is 0 by definition.
  const KeepMask* base_mask = nullptr;
};

// L on the unmasked tokens plus L_i for each single-token masked variant:
// N + 1 forward passes, batched. NumericError naming the image on a
// non-finite loss.
std::vector<DeltaLossRecord> score_image(const VitModel& model, const TokenMatrix& tokens, int label,
                                         const ScoreOptions& opts = {});

// Scores every sample on `threads` workers. Records are returned sorted by
// (image_id, token_index) whatever the completion order.
std::vector<DeltaLossRecord> score_dataset(const VitModel& model, const Dataset& data, const ScoreOptions& opts = {},
                                           std::size_t threads = 1);

// label = dl > rho. rho must not be NaN.
std::vector<int> pseudo_label(std::span<const DeltaLossRecord> records, double rho);
void apply_labels(std::vector<DeltaLossRecord>& records, double rho);

// Recomputes dl from the stored losses under another convention; labels are cleared.
std::vector<DeltaLossRecord> with_sign(std::vector<DeltaLossRecord> records, DlSign sign);

// rho such that roughly `keep_fraction` of the dl values exceed it.
double rho_for_label_ratio(std::span<const DeltaLossRecord> records, double keep_fraction);

struct DlStatistics {
  Moments moments;
  Histogram histogram;
  SpatialGrid grid;  // mean dl per patch position
};

// Histogram over `range` (default: mean +- 5 sigma, 101 bins). ContractError
// on empty input.
DlStatistics dl_statistics(std::span<const DeltaLossRecord> records, std::size_t grid_side,
                           std::optional<HistogramRange> range = std::nullopt);

// image_id,token_index,base_loss,masked_loss,dl,label with 17 significant
// digits; the label field is empty until labelled.
void write_records_csv(const std::filesystem::path& path, std::span<const DeltaLossRecord> records);
std::vector<DeltaLossRecord> read_records_csv(const std::filesystem::path& path);

}  // namespace dlvit
