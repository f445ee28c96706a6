#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pkgsentry/classifiers.hpp"
#include "pkgsentry/core.hpp"
#include "pkgsentry/dataset.hpp"
#include "pkgsentry/orchestrator.hpp"

namespace pkgsentry {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::uint64_t seed = 0;
  double test_fraction = 0.2;  // grouped by package_id
};

struct Split {
  DatasetManifest train;
  DatasetManifest test;
  std::vector<std::string> train_packages;  // sorted
  std::vector<std::string> test_packages;   // sorted
};

/// Sorted package ids are shuffled with seeded_shuffle (SplitMix64
/// Fisher-Yates); the first ceil(fraction * P) go to test, clamped so both
/// sides keep at least one package. Error(Split) for fewer than 2 packages.
Split split_by_package(const DatasetManifest& manifest, const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t n() const { return tp + fp + fn + tn; }
  void add(Label truth, Label predicted);
  bool operator==(const ConfusionMatrix&) const = default;
};

struct MetricsReport {
  ConfusionMatrix cm;
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> balanced_accuracy;
  std::map<std::string, std::string> undefined;  // metric -> reason
};

/// Undefined ratios stay empty with a reason instead of reading as 0.
MetricsReport metrics(const ConfusionMatrix& cm);
Json to_json(const MetricsReport& report);

double f1_from(double precision, double recall);
double balanced_accuracy_from(double tpr, double tnr);

enum class Metric { Accuracy, Precision, Recall, F1, BalancedAccuracy };
std::string_view to_string(Metric metric);
std::optional<Metric> parse_metric(std::string_view name);
std::optional<double> select_metric(const MetricsReport& report, Metric metric);

// ---------------------------------------------------------------------------
// McNemar
// ---------------------------------------------------------------------------

enum class McNemarMethod { ExactBinomial, ChiSquareContinuity };
std::string_view to_string(McNemarMethod method);

struct McNemarResult {
  std::uint64_t n01 = 0;  // baseline correct, candidate wrong
  std::uint64_t n10 = 0;  // candidate correct, baseline wrong
  double p_value = 1.0;
  double log10_p = 0.0;
  McNemarMethod method = McNemarMethod::ExactBinomial;
  bool zero_discordant = false;
};

Json to_json(const McNemarResult& r);

struct PairedPrediction {
  Label truth = Label::Benign;
  Label baseline = Label::Benign;
  Label candidate = Label::Benign;
};

McNemarResult mcnemar_counts(std::uint64_t n01, std::uint64_t n10,
                             McNemarMethod method = McNemarMethod::ExactBinomial);
McNemarResult mcnemar(const std::vector<PairedPrediction>& paired,
                      McNemarMethod method = McNemarMethod::ExactBinomial);

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct PredictionRow {
  std::string package_id;
  Label truth = Label::Benign;
  Label predicted = Label::Benign;
};

/// Percentile (2.5%, 97.5%) interval over package-level resamples with
/// replacement. Error(Precondition) for empty rows or n_resamples < 100;
/// Error(DegenerateBootstrap) when the metric is undefined in more than half
/// of the resamples.
std::pair<double, double> bootstrap_ci(const std::vector<PredictionRow>& rows, Metric metric,
                                       std::size_t n_resamples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Efficiency
// ---------------------------------------------------------------------------

struct StepLatency {
  std::size_t count = 0;
  double total_ms = 0.0;
  double mean_ms = 0.0;
};

struct EfficiencyReport {
  std::map<std::string, StepLatency> per_step;  // keyed by audit step name
  std::size_t runs = 0;
  std::size_t files = 0;
  double wall_ms = 0.0;
  double files_per_second = 0.0;
  std::optional<std::uint64_t> peak_rss_kb;
  std::uint64_t llm_calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  double tokens_per_decision = 0.0;
  bool tokens_estimated = false;
};

Json to_json(const EfficiencyReport& r);

/// files / seconds; 0 when seconds is 0.
double throughput(std::size_t files, double seconds);

/// Per-step mean of audit latencies; files/s over the summed scan wall times.
EfficiencyReport measure_efficiency(const std::vector<ScanResult>& runs);

// ---------------------------------------------------------------------------
// Pipeline comparison
// ---------------------------------------------------------------------------

/// A package-level predictor. `prepare` (optional) sees the training split
/// before each seed's test run.
struct Pipeline {
  std::string name;
  std::function<void(const DatasetManifest& train, std::uint64_t seed)> prepare;
  std::function<Label(const std::string& package_id, const std::vector<SourceFile>& files)> predict;
};

struct PackageOutcome {
  std::string package_id;
  Label truth = Label::Benign;  // malicious iff any entry is
  std::optional<Label> predicted;
  std::optional<std::string> error;
};

Json to_json(const PackageOutcome& o);

/// Predictions for every package of `manifest` (sorted by package id), using
/// up to `width` worker threads.
std::vector<PackageOutcome> run_pipeline(const Pipeline& pipeline, const DatasetManifest& manifest,
                                         std::size_t width = 1);

/// Confusion matrix over outcomes without errors.
ConfusionMatrix confusion(const std::vector<PackageOutcome>& outcomes);
ConfusionMatrix confusion(const std::vector<EvalRow>& rows);

struct SeedRow {
  std::uint64_t seed = 0;
  std::size_t test_packages = 0;
  MetricsReport a;
  MetricsReport b;
  std::size_t errors_a = 0;
  std::size_t errors_b = 0;
};

struct MeanStd {
  std::optional<double> mean;
  std::optional<double> stddev;  // sample standard deviation; 0 for one seed
};

struct ComparisonReport {
  std::string name_a;
  std::string name_b;
  std::vector<SeedRow> seeds;
  std::map<std::string, MeanStd> aggregate_a;  // by metric name
  std::map<std::string, MeanStd> aggregate_b;
  McNemarResult mcnemar;  // a is the baseline, b the candidate
  double test_fraction = 0.2;
};

Json to_json(const ComparisonReport& r);

/// Error(Comparison) when either pipeline errors on more than 10% of a
/// seed's test packages.
ComparisonReport compare_pipelines(const DatasetManifest& manifest, const Pipeline& a, const Pipeline& b,
                                   double test_fraction, const std::vector<std::uint64_t>& seeds,
                                   std::size_t width = 1, McNemarMethod method = McNemarMethod::ExactBinomial);

MeanStd mean_std(const std::vector<std::optional<double>>& values);

// ---------------------------------------------------------------------------
// Markdown
// ---------------------------------------------------------------------------

std::string render_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);
std::string render_comparison(const ComparisonReport& report);

}  // namespace pkgsentry
