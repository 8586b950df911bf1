#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tlab/attacks.hpp"
#include "tlab/dataset.hpp"
#include "tlab/models.hpp"

namespace tlab {

enum class AsrMode { all, clean_correct };

const char* asr_mode_name(AsrMode mode);
AsrMode parse_asr_mode(const std::string& name);

struct AsrResult {
  double pct = 0.0;  // attack success rate in [0,100]
  int n = 0;         // evaluated inputs (the denominator)
};

/// Misclassification rate of the adversarial inputs on the target.
/// mode=all counts every input; mode=clean_correct restricts to inputs the
/// target classifies correctly when clean (MetricError when that set is
/// empty).
AsrResult asr_detail(const Network<float>& target, const AdversarialBatch& batch, AsrMode mode);
double asr(const Network<float>& target, const AdversarialBatch& batch, AsrMode mode);

struct NamedModel {
  std::string id;
  Network<float> net;
  std::string hash;  // param_hash of net

  static NamedModel of(std::string id, Network<float> net);
};

struct ReportRow {
  std::string proxy;
  std::string target;
  std::string attack;     // "<name>:<mode>"
  std::string transform;
  double asr_pct = 0.0;
  double clean_acc_pct = 0.0;
  int n = 0;
  uint64_t seed = 0;
};

struct TransferReport {
  std::vector<ReportRow> rows;
  std::string artifact_version = kVersion;
  int64_t created_unix = 0;
  std::string config_echo;
};

struct MatrixOptions {
  std::vector<AsrMode> modes = {AsrMode::clean_correct, AsrMode::all};
  bool include_diagonal = false;  // white-box proxy==target rows
};

/// Crafts each attack once per proxy over `data`, then scores the same batch
/// against every target (self-transfer rows only with include_diagonal).
/// Model geometry is validated before any attack runs.
TransferReport transfer_matrix(const std::vector<NamedModel>& proxies,
                               const std::vector<NamedModel>& targets,
                               const std::vector<AttackSpec>& attacks, const LabeledDataset& data,
                               const MatrixOptions& opts = {});

struct SweepRow {
  int s = 0;
  std::string target;
  double asr_pct = 0.0;
};

/// MaskBlock patch-size sweep. s=0 rows run the identity transform (the plain
/// iterative baseline). Sizes are emitted in ascending order.
std::vector<SweepRow> patch_sweep(const NamedModel& proxy, const std::vector<NamedModel>& targets,
                                  const AttackSpec& base, std::vector<int> sizes,
                                  const LabeledDataset& data,
                                  AsrMode mode = AsrMode::clean_correct);

// Reports. CSV columns are fixed:
//   proxy,target,attack,transform,asr_pct,clean_acc_pct,n,seed
// with percentages at 2 decimals, UTF-8, LF line endings.
std::string report_to_csv(const TransferReport& report);
TransferReport report_from_csv(const std::string& csv);
void write_report_csv(const TransferReport& report, const std::filesystem::path& path);

/// Markdown rendering: one proxy-by-target pivot table per attack label.
std::string report_to_markdown(const TransferReport& report);
void write_report_markdown(const TransferReport& report, const std::filesystem::path& path);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::string sweep_to_markdown(const std::vector<SweepRow>& rows);

std::string curve_to_csv(const std::vector<LossCurveRow>& rows);
void write_curve_csv(const std::vector<LossCurveRow>& rows, const std::filesystem::path& path);

}  // namespace tlab
