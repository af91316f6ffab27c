#pragma once

// Success-rate tensor c[i][j][e] and the FWT / NBT / AUC summaries over it.
// Task indices are 0-based positions in the learning order; `e` is an
// epoch value from eval_epochs, not an index.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace lldm {

class MetricsError : public std::runtime_error {
 public:
  enum class Code { kMissingEntry, kBadMatrix };
  MetricsError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

struct EvalMatrix {
  std::size_t K = 0;
  std::vector<std::size_t> eval_epochs;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> entries;

  static std::vector<std::size_t> default_epochs(std::size_t last = 50, std::size_t every = 5);

  void set(std::size_t i, std::size_t j, std::size_t e, double rate);
  std::optional<double> find(std::size_t i, std::size_t j, std::size_t e) const;
  // Throws kMissingEntry naming (i, j, e).
  double at(std::size_t i, std::size_t j, std::size_t e) const;
  std::vector<double> diagonal(std::size_t k) const;

  std::string to_json() const;
  static EvalMatrix from_json(const std::string& text);
  bool operator==(const EvalMatrix&) const = default;
};

struct BestCheckpoint {
  double rate = 0.0;
  std::size_t index = 0;  // position in the epoch list
};

// Earliest maximum of a non-empty sequence.
BestCheckpoint best_checkpoint(std::span<const double> diag);

struct MetricOptions {
  // Count NBT_K (an empty sum, defined as 0) in the suite-level mean.
  bool nbt_include_last = true;
};

struct MetricReport {
  double fwt = 0.0, nbt = 0.0, auc = 0.0;
  std::vector<double> fwt_k, nbt_k, auc_k;
  std::vector<std::size_t> best_epoch;
  std::vector<double> best_rate;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  static std::string csv_header();
  std::string csv_row() const;
};

MetricReport compute_metrics(const EvalMatrix& m, const MetricOptions& options = {});

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

// Mean and stddev / sqrt(n) with the sample stddev; one value gives SE 0.
MeanSe mean_se(std::span<const double> values);

struct SeedAggregate {
  MeanSe fwt, nbt, auc;
  std::size_t seeds = 0;
  std::string to_json() const;
};

SeedAggregate aggregate_seeds(std::span<const MetricReport> reports);

}  // namespace lldm
