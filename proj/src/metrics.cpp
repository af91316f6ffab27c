#include "lldm/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lldm {

using nlohmann::json;

std::vector<std::size_t> EvalMatrix::default_epochs(std::size_t last, std::size_t every) {
  std::vector<std::size_t> out;
  for (std::size_t e = 0; e <= last; e += every) out.push_back(e);
  return out;
}

void EvalMatrix::set(std::size_t i, std::size_t j, std::size_t e, double rate) {
  entries[{i, j, e}] = rate;
}

std::optional<double> EvalMatrix::find(std::size_t i, std::size_t j, std::size_t e) const {
  auto it = entries.find({i, j, e});
  if (it == entries.end()) return std::nullopt;
  return it->second;
}

double EvalMatrix::at(std::size_t i, std::size_t j, std::size_t e) const {
  auto v = find(i, j, e);
  if (!v) {
    throw MetricsError(MetricsError::Code::kMissingEntry, "missing entry (i=" + std::to_string(i) +
                                                              ", j=" + std::to_string(j) +
                                                              ", e=" + std::to_string(e) + ")");
  }
  return *v;
}

std::vector<double> EvalMatrix::diagonal(std::size_t k) const {
  std::vector<double> d;
  d.reserve(eval_epochs.size());
  for (std::size_t e : eval_epochs) d.push_back(at(k, k, e));
  return d;
}

std::string EvalMatrix::to_json() const {
  json entries_json = json::array();
  for (const auto& [key, rate] : entries) {
    const auto& [i, j, e] = key;
    entries_json.push_back({{"i", i}, {"j", j}, {"e", e}, {"rate", rate}});
  }
  json out = {{"K", K}, {"eval_epochs", eval_epochs}, {"entries", entries_json}};
  return out.dump(2);
}

EvalMatrix EvalMatrix::from_json(const std::string& text) {
  EvalMatrix m;
  try {
    const json in = json::parse(text);
    m.K = in.at("K").get<std::size_t>();
    m.eval_epochs = in.at("eval_epochs").get<std::vector<std::size_t>>();
    for (const auto& e : in.at("entries")) {
      m.set(e.at("i").get<std::size_t>(), e.at("j").get<std::size_t>(), e.at("e").get<std::size_t>(),
            e.at("rate").get<double>());
    }
  } catch (const json::exception& ex) {
    throw MetricsError(MetricsError::Code::kBadMatrix, std::string("evaluation matrix: ") + ex.what());
  }
  return m;
}

BestCheckpoint best_checkpoint(std::span<const double> diag) {
  if (diag.empty()) throw MetricsError(MetricsError::Code::kBadMatrix, "empty diagonal");
  BestCheckpoint best{diag[0], 0};
  for (std::size_t e = 1; e < diag.size(); ++e) {
    if (diag[e] > best.rate) best = {diag[e], e};
  }
  return best;
}

MetricReport compute_metrics(const EvalMatrix& m, const MetricOptions& options) {
  if (m.K == 0 || m.eval_epochs.empty()) {
    throw MetricsError(MetricsError::Code::kBadMatrix, "matrix needs at least one task and one epoch");
  }
  const std::size_t K = m.K;
  MetricReport r;
  r.fwt_k.resize(K);
  r.nbt_k.resize(K);
  r.auc_k.resize(K);
  r.best_epoch.resize(K);
  r.best_rate.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto diag = m.diagonal(k);
    const BestCheckpoint b = best_checkpoint(diag);
    r.best_rate[k] = b.rate;
    r.best_epoch[k] = m.eval_epochs[b.index];
    // Learning stops at e*: later checkpoints count as the best one.
    double sum = 0.0;
    for (std::size_t e = 0; e < diag.size(); ++e) sum += e > b.index ? b.rate : diag[e];
    r.fwt_k[k] = sum / static_cast<double>(diag.size());
  }
  for (std::size_t k = 0; k < K; ++k) {
    double drop = 0.0, later = 0.0;
    for (std::size_t t = k + 1; t < K; ++t) {
      const double c = m.at(t, k, r.best_epoch[t]);
      drop += r.best_rate[k] - c;
      later += c;
    }
    const std::size_t after = K - 1 - k;
    r.nbt_k[k] = after == 0 ? 0.0 : drop / static_cast<double>(after);
    r.auc_k[k] = (r.fwt_k[k] + later) / static_cast<double>(after + 1);
  }
  auto mean = [](const std::vector<double>& v, std::size_t n) {
    return n == 0 ? 0.0 : std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), 0.0) /
                              static_cast<double>(n);
  };
  r.fwt = mean(r.fwt_k, K);
  r.auc = mean(r.auc_k, K);
  r.nbt = mean(r.nbt_k, options.nbt_include_last ? K : K - 1);
  return r;
}

std::string MetricReport::to_json() const {
  json out = {{"fwt", fwt},     {"nbt", nbt},       {"auc", auc},
              {"fwt_k", fwt_k}, {"nbt_k", nbt_k},   {"auc_k", auc_k},
              {"best_epoch", best_epoch}, {"best_rate", best_rate}};
  return out.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  const json in = json::parse(text);
  MetricReport r;
  r.fwt = in.at("fwt");
  r.nbt = in.at("nbt");
  r.auc = in.at("auc");
  r.fwt_k = in.at("fwt_k").get<std::vector<double>>();
  r.nbt_k = in.at("nbt_k").get<std::vector<double>>();
  r.auc_k = in.at("auc_k").get<std::vector<double>>();
  r.best_epoch = in.at("best_epoch").get<std::vector<std::size_t>>();
  r.best_rate = in.at("best_rate").get<std::vector<double>>();
  return r;
}

std::string MetricReport::csv_header() { return "fwt,nbt,auc"; }

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << fwt << ',' << nbt << ',' << auc;
  return os.str();
}

MeanSe mean_se(std::span<const double> values) {
  MeanSe out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  // Sorted so the sums do not depend on seed order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

std::string SeedAggregate::to_json() const {
  auto pair = [](const MeanSe& m) { return json{{"mean", m.mean}, {"se", m.se}}; };
  return json{{"fwt", pair(fwt)}, {"nbt", pair(nbt)}, {"auc", pair(auc)}, {"seeds", seeds}}.dump(2);
}

SeedAggregate aggregate_seeds(std::span<const MetricReport> reports) {
  SeedAggregate a;
  a.seeds = reports.size();
  std::vector<double> f, n, u;
  for (const auto& r : reports) {
    f.push_back(r.fwt);
    n.push_back(r.nbt);
    u.push_back(r.auc);
  }
  a.fwt = mean_se(f);
  a.nbt = mean_se(n);
  a.auc = mean_se(u);
  return a;
}

}  // namespace lldm
