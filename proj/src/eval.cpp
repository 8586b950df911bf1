#include "tlab/eval.hpp"

#include <algorithm>
#include <ctime>
#include <map>
#include <sstream>

namespace tlab {

const char* asr_mode_name(AsrMode mode) {
  return mode == AsrMode::all ? "all" : "clean_correct";
}

AsrMode parse_asr_mode(const std::string& name) {
  if (name == "all") return AsrMode::all;
  if (name == "clean_correct") return AsrMode::clean_correct;
  throw ConfigError("unknown ASR mode '" + name + "' (all, clean_correct)");
}

AsrResult asr_detail(const Network<float>& target, const AdversarialBatch& batch, AsrMode mode) {
  const auto adv_pred = predict(target, batch.adversarials());
  const int B = batch.originals.dim(0);

  if (mode == AsrMode::all) {
    int fooled = 0;
    for (int b = 0; b < B; ++b)
      if (adv_pred.labels[static_cast<size_t>(b)] != batch.labels[static_cast<size_t>(b)]) ++fooled;
    return {100.0 * fooled / B, B};
  }

  const auto clean_pred = predict(target, batch.originals);
  int evaluated = 0, fooled = 0;
  for (int b = 0; b < B; ++b) {
    if (clean_pred.labels[static_cast<size_t>(b)] != batch.labels[static_cast<size_t>(b)]) continue;
    ++evaluated;
    if (adv_pred.labels[static_cast<size_t>(b)] != batch.labels[static_cast<size_t>(b)]) ++fooled;
  }
  if (evaluated == 0)
    throw MetricError("clean_correct ASR is undefined: the target classifies no input correctly");
  return {100.0 * fooled / evaluated, evaluated};
}

double asr(const Network<float>& target, const AdversarialBatch& batch, AsrMode mode) {
  return asr_detail(target, batch, mode).pct;
}

NamedModel NamedModel::of(std::string id, Network<float> net) {
  NamedModel m;
  m.id = std::move(id);
  m.hash = param_hash(net);
  m.net = std::move(net);
  return m;
}

namespace {

void check_roster_compat(const std::vector<NamedModel>& proxies,
                         const std::vector<NamedModel>& targets, const LabeledDataset& data) {
  if (proxies.empty() || targets.empty())
    throw ConfigError("transfer matrix needs at least one proxy and one target");
  const auto& ref = proxies.front().net.arch;
  auto check = [&](const NamedModel& m) {
    if (m.net.arch.input_shape != ref.input_shape || m.net.arch.class_count != ref.class_count)
      throw ModelCompatError("model '" + m.id + "' expects input [" +
                             std::to_string(m.net.arch.input_shape[0]) + "," +
                             std::to_string(m.net.arch.input_shape[1]) + "," +
                             std::to_string(m.net.arch.input_shape[2]) + "] x " +
                             std::to_string(m.net.arch.class_count) +
                             " classes, incompatible with the roster");
  };
  for (const auto& m : proxies) check(m);
  for (const auto& m : targets) check(m);
  if (data.channels() != ref.input_shape[0] || data.height() != ref.input_shape[1] ||
      data.width() != ref.input_shape[2])
    throw ModelCompatError("dataset geometry does not match the model roster");
}

double clean_accuracy_pct(const Network<float>& net, const AdversarialBatch& batch) {
  const auto pred = predict(net, batch.originals);
  const int B = batch.originals.dim(0);
  int correct = 0;
  for (int b = 0; b < B; ++b)
    if (pred.labels[static_cast<size_t>(b)] == batch.labels[static_cast<size_t>(b)]) ++correct;
  return 100.0 * correct / B;
}

}  // namespace

TransferReport transfer_matrix(const std::vector<NamedModel>& proxies,
                               const std::vector<NamedModel>& targets,
                               const std::vector<AttackSpec>& attacks, const LabeledDataset& data,
                               const MatrixOptions& opts) {
  check_roster_compat(proxies, targets, data);
  if (attacks.empty()) throw ConfigError("transfer matrix needs at least one attack");
  if (opts.modes.empty()) throw ConfigError("transfer matrix needs at least one ASR mode");

  TransferReport report;
  report.created_unix = static_cast<int64_t>(std::time(nullptr));

  for (const auto& proxy : proxies) {
    for (const auto& raw : attacks) {
      const AttackSpec spec = normalized(raw);
      const AdversarialBatch batch = craft(spec, proxy.net, data.images, data.labels);
      for (const auto& target : targets) {
        if (!opts.include_diagonal && target.hash == proxy.hash) continue;
        const double clean_pct = clean_accuracy_pct(target.net, batch);
        for (AsrMode mode : opts.modes) {
          const AsrResult r = asr_detail(target.net, batch, mode);
          report.rows.push_back(ReportRow{proxy.id, target.id,
                                          spec.name + ":" + asr_mode_name(mode),
                                          transform_to_string(spec.transform), r.pct, clean_pct,
                                          r.n, spec.seed});
        }
      }
    }
  }
  return report;
}

std::vector<SweepRow> patch_sweep(const NamedModel& proxy, const std::vector<NamedModel>& targets,
                                  const AttackSpec& base, std::vector<int> sizes,
                                  const LabeledDataset& data, AsrMode mode) {
  if (std::find(sizes.begin(), sizes.end(), 0) == sizes.end())
    throw ConfigError("patch sweep sizes must include 0 (the unmasked baseline)");
  check_roster_compat({proxy}, targets, data);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());

  std::vector<SweepRow> rows;
  for (int s : sizes) {
    AttackSpec spec = base;
    spec.transform = s == 0 ? identity_transform() : maskblock_transform(s);
    const AdversarialBatch batch = craft(normalized(spec), proxy.net, data.images, data.labels);
    for (const auto& target : targets)
      rows.push_back(SweepRow{s, target.id, asr(target.net, batch, mode)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report formats.
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCsvHeader = "proxy,target,attack,transform,asr_pct,clean_acc_pct,n,seed";

void check_csv_field(const std::string& v) {
  if (v.find(',') != std::string::npos || v.find('\n') != std::string::npos)
    throw IoError("report field may not contain commas or newlines: '" + v + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

std::string report_to_csv(const TransferReport& report) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : report.rows) {
    check_csv_field(r.proxy);
    check_csv_field(r.target);
    check_csv_field(r.attack);
    check_csv_field(r.transform);
    os << r.proxy << ',' << r.target << ',' << r.attack << ',' << r.transform << ','
       << format_fixed(r.asr_pct, 2) << ',' << format_fixed(r.clean_acc_pct, 2) << ',' << r.n
       << ',' << r.seed << '\n';
  }
  return os.str();
}

TransferReport report_from_csv(const std::string& csv) {
  std::stringstream ss(csv);
  std::string line;
  if (!std::getline(ss, line) || line != kCsvHeader)
    throw IoError("report CSV header mismatch, got '" + line + "'");
  TransferReport report;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw IoError("report CSV row has " + std::to_string(f.size()) + " fields");
    ReportRow r;
    r.proxy = f[0];
    r.target = f[1];
    r.attack = f[2];
    r.transform = f[3];
    r.asr_pct = std::stod(f[4]);
    r.clean_acc_pct = std::stod(f[5]);
    r.n = std::stoi(f[6]);
    r.seed = std::stoull(f[7]);
    report.rows.push_back(std::move(r));
  }
  return report;
}

void write_report_csv(const TransferReport& report, const std::filesystem::path& path) {
  write_file_atomic(path, report_to_csv(report));
}

std::string report_to_markdown(const TransferReport& report) {
  std::ostringstream os;
  os << "# Transfer report\n\nartifact version: " << report.artifact_version << "\n";
  if (!report.config_echo.empty()) os << "\nconfig: " << report.config_echo << "\n";

  // Group rows per attack label, keeping first-seen order.
  std::vector<std::string> attacks;
  for (const auto& r : report.rows)
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end())
      attacks.push_back(r.attack);

  for (const auto& attack : attacks) {
    std::vector<std::string> proxies, targets;
    std::string transform;
    std::map<std::pair<std::string, std::string>, double> cell;
    for (const auto& r : report.rows) {
      if (r.attack != attack) continue;
      transform = r.transform;
      if (std::find(proxies.begin(), proxies.end(), r.proxy) == proxies.end())
        proxies.push_back(r.proxy);
      if (std::find(targets.begin(), targets.end(), r.target) == targets.end())
        targets.push_back(r.target);
      cell[{r.proxy, r.target}] = r.asr_pct;
    }
    os << "\n## " << attack << " (transform: " << transform << ")\n\n";
    os << "| proxy \\ target |";
    for (const auto& t : targets) os << ' ' << t << " |";
    os << "\n|---|";
    for (size_t i = 0; i < targets.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& p : proxies) {
      os << "| " << p << " |";
      for (const auto& t : targets) {
        const auto it = cell.find({p, t});
        if (it == cell.end())
          os << " - |";
        else
          os << ' ' << format_fixed(it->second, 2) << " |";
      }
      os << '\n';
    }
  }
  return os.str();
}

void write_report_markdown(const TransferReport& report, const std::filesystem::path& path) {
  write_file_atomic(path, report_to_markdown(report));
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "s,target,asr_pct\n";
  for (const auto& r : rows) {
    check_csv_field(r.target);
    os << r.s << ',' << r.target << ',' << format_fixed(r.asr_pct, 2) << '\n';
  }
  return os.str();
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  write_file_atomic(path, sweep_to_csv(rows));
}

std::string sweep_to_markdown(const std::vector<SweepRow>& rows) {
  std::vector<int> sizes;
  std::vector<std::string> targets;
  std::map<std::pair<int, std::string>, double> cell;
  for (const auto& r : rows) {
    if (std::find(sizes.begin(), sizes.end(), r.s) == sizes.end()) sizes.push_back(r.s);
    if (std::find(targets.begin(), targets.end(), r.target) == targets.end())
      targets.push_back(r.target);
    cell[{r.s, r.target}] = r.asr_pct;
  }
  std::ostringstream os;
  os << "# Patch size sweep\n\n| s |";
  for (const auto& t : targets) os << ' ' << t << " |";
  os << "\n|---|";
  for (size_t i = 0; i < targets.size(); ++i) os << "---|";
  os << '\n';
  for (int s : sizes) {
    os << "| " << s << " |";
    for (const auto& t : targets) {
      const auto it = cell.find({s, t});
      if (it == cell.end())
        os << " - |";
      else
        os << ' ' << format_fixed(it->second, 2) << " |";
    }
    os << '\n';
  }
  return os.str();
}

std::string curve_to_csv(const std::vector<LossCurveRow>& rows) {
  std::ostringstream os;
  os << "s,masked_loss,clean_loss\n";
  for (const auto& r : rows)
    os << r.s << ',' << format_fixed(r.masked_loss, 6) << ',' << format_fixed(r.clean_loss, 6)
       << '\n';
  return os.str();
}

void write_curve_csv(const std::vector<LossCurveRow>& rows, const std::filesystem::path& path) {
  write_file_atomic(path, curve_to_csv(rows));
}

}  // namespace tlab
