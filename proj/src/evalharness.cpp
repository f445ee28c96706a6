#include "pkgsentry/evalharness.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>

namespace pkgsentry {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

Split split_by_package(const DatasetManifest& manifest, const SplitSpec& spec) {
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw Error(ErrorKind::Split, "test fraction must lie in (0,1)");
  }
  auto packages = manifest.package_ids();
  const auto p = packages.size();
  if (p < 2) throw Error(ErrorKind::Split, "a package-level split needs at least 2 packages");

  seeded_shuffle(packages, spec.seed);
  auto n_test = static_cast<std::size_t>(std::ceil(spec.test_fraction * static_cast<double>(p) - 1e-9));
  n_test = std::clamp<std::size_t>(n_test, 1, p - 1);

  Split split;
  split.test_packages.assign(packages.begin(), packages.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train_packages.assign(packages.begin() + static_cast<std::ptrdiff_t>(n_test), packages.end());
  std::sort(split.test_packages.begin(), split.test_packages.end());
  std::sort(split.train_packages.begin(), split.train_packages.end());
  split.test = manifest.subset(split.test_packages);
  split.train = manifest.subset(split.train_packages);
  return split;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

void ConfusionMatrix::add(Label truth, Label predicted) {
  if (truth == Label::Malicious) {
    (predicted == Label::Malicious ? tp : fn) += 1;
  } else {
    (predicted == Label::Malicious ? fp : tn) += 1;
  }
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string counts(const ConfusionMatrix& cm) {
  return "tp=" + std::to_string(cm.tp) + " fp=" + std::to_string(cm.fp) + " fn=" + std::to_string(cm.fn) +
         " tn=" + std::to_string(cm.tn);
}

}  // namespace

double f1_from(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double balanced_accuracy_from(double tpr, double tnr) { return (tpr + tnr) / 2.0; }

MetricsReport metrics(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.cm = cm;
  const auto ctx = counts(cm);
  r.accuracy = ratio(cm.tp + cm.tn, cm.n());
  if (!r.accuracy) r.undefined["accuracy"] = "n=0 (" + ctx + ")";
  r.precision = ratio(cm.tp, cm.tp + cm.fp);
  if (!r.precision) r.undefined["precision"] = "tp+fp=0 (" + ctx + ")";
  r.recall = ratio(cm.tp, cm.tp + cm.fn);
  if (!r.recall) r.undefined["recall"] = "tp+fn=0 (" + ctx + ")";
  if (r.precision && r.recall) {
    if (*r.precision + *r.recall > 0.0) {
      r.f1 = f1_from(*r.precision, *r.recall);
    } else {
      r.undefined["f1"] = "precision+recall=0 (" + ctx + ")";
    }
  } else {
    r.undefined["f1"] = "precision or recall undefined (" + ctx + ")";
  }
  const auto tnr = ratio(cm.tn, cm.tn + cm.fp);
  if (r.recall && tnr) {
    r.balanced_accuracy = balanced_accuracy_from(*r.recall, *tnr);
  } else {
    r.undefined["balanced_accuracy"] = "a class is absent (" + ctx + ")";
  }
  return r;
}

namespace {

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

Json to_json(const MetricsReport& r) {
  return {{"confusion", {{"tp", r.cm.tp}, {"fp", r.cm.fp}, {"fn", r.cm.fn}, {"tn", r.cm.tn}}},
          {"accuracy", opt(r.accuracy)},
          {"precision", opt(r.precision)},
          {"recall", opt(r.recall)},
          {"f1", opt(r.f1)},
          {"balanced_accuracy", opt(r.balanced_accuracy)},
          {"undefined", r.undefined}};
}

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::Accuracy: return "accuracy";
    case Metric::Precision: return "precision";
    case Metric::Recall: return "recall";
    case Metric::F1: return "f1";
    case Metric::BalancedAccuracy: return "balanced_accuracy";
  }
  return "unknown";
}

std::optional<Metric> parse_metric(std::string_view name) {
  for (auto m : {Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1, Metric::BalancedAccuracy}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

std::optional<double> select_metric(const MetricsReport& r, Metric metric) {
  switch (metric) {
    case Metric::Accuracy: return r.accuracy;
    case Metric::Precision: return r.precision;
    case Metric::Recall: return r.recall;
    case Metric::F1: return r.f1;
    case Metric::BalancedAccuracy: return r.balanced_accuracy;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// McNemar
// ---------------------------------------------------------------------------

std::string_view to_string(McNemarMethod method) {
  return method == McNemarMethod::ExactBinomial ? "exact_binomial" : "chi_square_continuity";
}

Json to_json(const McNemarResult& r) {
  return {{"n01", r.n01},
          {"n10", r.n10},
          {"p_value", r.p_value},
          {"log10_p", r.log10_p},
          {"method", to_string(r.method)},
          {"zero_discordant", r.zero_discordant}};
}

McNemarResult mcnemar_counts(std::uint64_t n01, std::uint64_t n10, McNemarMethod method) {
  McNemarResult r;
  r.n01 = n01;
  r.n10 = n10;
  r.method = method;
  const std::uint64_t n = n01 + n10;
  if (n == 0) {
    r.zero_discordant = true;
    return r;
  }
  if (method == McNemarMethod::ExactBinomial) {
    // log of 2 * sum_{i <= m} C(n, i) / 2^n, accumulated with log-sum-exp.
    const auto m = std::min(n01, n10);
    const double nd = static_cast<double>(n);
    std::vector<double> terms;
    terms.reserve(m + 1);
    for (std::uint64_t i = 0; i <= m; ++i) {
      const double id = static_cast<double>(i);
      terms.push_back(std::lgamma(nd + 1) - std::lgamma(id + 1) - std::lgamma(nd - id + 1) - nd * std::log(2.0));
    }
    const double top = *std::max_element(terms.begin(), terms.end());
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - top);
    const double log_p = std::min(0.0, std::log(2.0) + top + std::log(sum));
    r.p_value = std::exp(log_p);
    r.log10_p = log_p / std::log(10.0);
  } else {
    const double diff = std::fabs(static_cast<double>(n01) - static_cast<double>(n10)) - 1.0;
    const double stat = diff * diff / static_cast<double>(n);
    // Survival function of chi-square with one degree of freedom.
    r.p_value = std::erfc(std::sqrt(stat / 2.0));
    r.log10_p = r.p_value > 0 ? std::log10(r.p_value) : -std::numeric_limits<double>::infinity();
  }
  return r;
}

McNemarResult mcnemar(const std::vector<PairedPrediction>& paired, McNemarMethod method) {
  std::uint64_t n01 = 0, n10 = 0;
  for (const auto& p : paired) {
    const bool base_ok = p.baseline == p.truth;
    const bool cand_ok = p.candidate == p.truth;
    if (base_ok && !cand_ok) ++n01;
    if (cand_ok && !base_ok) ++n10;
  }
  return mcnemar_counts(n01, n10, method);
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

namespace {

/// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

std::pair<double, double> bootstrap_ci(const std::vector<PredictionRow>& rows, Metric metric,
                                       std::size_t n_resamples, std::uint64_t seed) {
  if (rows.empty()) throw Error(ErrorKind::Precondition, "bootstrap needs at least one row");
  if (n_resamples < 100) throw Error(ErrorKind::Precondition, "bootstrap needs at least 100 resamples");

  std::map<std::string, ConfusionMatrix> per_package;
  for (const auto& r : rows) per_package[r.package_id].add(r.truth, r.predicted);
  std::vector<ConfusionMatrix> groups;
  for (const auto& [_, cm] : per_package) groups.push_back(cm);

  SplitMix64 rng(seed);
  std::vector<double> values;
  values.reserve(n_resamples);
  std::size_t undefined = 0;
  for (std::size_t s = 0; s < n_resamples; ++s) {
    ConfusionMatrix cm;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& pick = groups[static_cast<std::size_t>(rng.below(groups.size()))];
      cm.tp += pick.tp;
      cm.fp += pick.fp;
      cm.fn += pick.fn;
      cm.tn += pick.tn;
    }
    if (auto v = select_metric(metrics(cm), metric)) {
      values.push_back(*v);
    } else {
      ++undefined;
    }
  }
  if (undefined * 2 > n_resamples) {
    throw Error(ErrorKind::DegenerateBootstrap, std::string(to_string(metric)) + " undefined in " +
                                                    std::to_string(undefined) + " of " +
                                                    std::to_string(n_resamples) + " resamples");
  }
  std::sort(values.begin(), values.end());
  return {quantile(values, 0.025), quantile(values, 0.975)};
}

// ---------------------------------------------------------------------------
// Efficiency
// ---------------------------------------------------------------------------

double throughput(std::size_t files, double seconds) {
  return seconds > 0.0 ? static_cast<double>(files) / seconds : 0.0;
}

EfficiencyReport measure_efficiency(const std::vector<ScanResult>& runs) {
  EfficiencyReport r;
  r.runs = runs.size();
  for (const auto& run : runs) {
    for (const auto& rec : run.audit.records()) {
      auto& step = r.per_step[std::string(to_string(rec.step))];
      ++step.count;
      step.total_ms += rec.latency_ms;
    }
    r.files += run.files_processed();
    if (const auto it = run.timings_ms.find("total"); it != run.timings_ms.end()) r.wall_ms += it->second;
    r.llm_calls += run.llm.calls;
    r.prompt_tokens += run.llm.prompt_tokens;
    r.completion_tokens += run.llm.completion_tokens;
    r.tokens_estimated = r.tokens_estimated || run.llm.estimated;
  }
  for (auto& [_, step] : r.per_step) step.mean_ms = step.total_ms / static_cast<double>(step.count);
  r.files_per_second = throughput(r.files, r.wall_ms / 1000.0);
  if (r.runs > 0) {
    r.tokens_per_decision = static_cast<double>(r.prompt_tokens + r.completion_tokens) / static_cast<double>(r.runs);
  }
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) == 0 && usage.ru_maxrss > 0) {
    r.peak_rss_kb = static_cast<std::uint64_t>(usage.ru_maxrss);
  }
  return r;
}

Json to_json(const EfficiencyReport& r) {
  Json steps = Json::object();
  for (const auto& [name, s] : r.per_step) {
    steps[name] = {{"count", s.count}, {"total_ms", s.total_ms}, {"mean_ms", s.mean_ms}};
  }
  return {{"per_step", steps},
          {"runs", r.runs},
          {"files", r.files},
          {"wall_ms", r.wall_ms},
          {"files_per_second", r.files_per_second},
          {"peak_rss_kb", r.peak_rss_kb ? Json(*r.peak_rss_kb) : Json("unavailable")},
          {"llm_calls", r.llm_calls},
          {"prompt_tokens", r.prompt_tokens},
          {"completion_tokens", r.completion_tokens},
          {"tokens_per_decision", r.tokens_per_decision},
          {"tokens_estimated", r.tokens_estimated}};
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

Json to_json(const PackageOutcome& o) {
  Json j = {{"package_id", o.package_id}, {"truth", to_string(o.truth)}};
  j["predicted"] = o.predicted ? Json(std::string(to_string(*o.predicted))) : Json(nullptr);
  if (o.error) j["error"] = *o.error;
  return j;
}

std::vector<PackageOutcome> run_pipeline(const Pipeline& pipeline, const DatasetManifest& manifest,
                                         std::size_t width) {
  const auto packages = manifest.package_ids();
  std::map<std::string, std::vector<const DatasetEntry*>> members;
  for (const auto& e : manifest.entries) members[e.package_id].push_back(&e);

  std::vector<PackageOutcome> out(packages.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < packages.size(); i = next++) {
      auto& o = out[i];
      o.package_id = packages[i];
      std::vector<SourceFile> files;
      for (const auto* e : members[packages[i]]) {
        if (e->label == Label::Malicious) o.truth = Label::Malicious;
      }
      try {
        for (const auto* e : members[packages[i]]) files.push_back(manifest.load_entry(*e));
        o.predicted = pipeline.predict(packages[i], files);
      } catch (const Error& e) {
        o.error = std::string(to_string(e.kind())) + ": " + e.detail();
      } catch (const std::exception& e) {
        o.error = e.what();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(width, 1), packages.size());
  if (threads <= 1) {
    worker();
  } else {
    // `members` is only read concurrently after construction.
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return out;
}

ConfusionMatrix confusion(const std::vector<PackageOutcome>& outcomes) {
  ConfusionMatrix cm;
  for (const auto& o : outcomes) {
    if (o.predicted) cm.add(o.truth, *o.predicted);
  }
  return cm;
}

ConfusionMatrix confusion(const std::vector<EvalRow>& rows) {
  ConfusionMatrix cm;
  for (const auto& r : rows) {
    if (r.verdict) cm.add(r.truth, r.verdict->label);
  }
  return cm;
}

MeanStd mean_std(const std::vector<std::optional<double>>& values) {
  std::vector<double> defined;
  for (const auto& v : values) {
    if (v) defined.push_back(*v);
  }
  MeanStd out;
  if (defined.empty()) return out;
  double sum = 0.0;
  for (double v : defined) sum += v;
  const double mean = sum / static_cast<double>(defined.size());
  double ss = 0.0;
  for (double v : defined) ss += (v - mean) * (v - mean);
  out.mean = mean;
  out.stddev = defined.size() > 1 ? std::sqrt(ss / static_cast<double>(defined.size() - 1)) : 0.0;
  return out;
}

namespace {

constexpr Metric kAllMetrics[] = {Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1,
                                  Metric::BalancedAccuracy};

std::map<std::string, MeanStd> aggregate(const std::vector<SeedRow>& rows, bool side_a) {
  std::map<std::string, MeanStd> out;
  for (auto m : kAllMetrics) {
    std::vector<std::optional<double>> values;
    for (const auto& row : rows) values.push_back(select_metric(side_a ? row.a : row.b, m));
    out[std::string(to_string(m))] = mean_std(values);
  }
  return out;
}

Json to_json(const MeanStd& m) { return {{"mean", opt(m.mean)}, {"stddev", opt(m.stddev)}}; }

Json to_json(const std::map<std::string, MeanStd>& agg) {
  Json j = Json::object();
  for (const auto& [name, m] : agg) j[name] = to_json(m);
  return j;
}

}  // namespace

ComparisonReport compare_pipelines(const DatasetManifest& manifest, const Pipeline& a, const Pipeline& b,
                                   double test_fraction, const std::vector<std::uint64_t>& seeds,
                                   std::size_t width, McNemarMethod method) {
  if (seeds.empty()) throw Error(ErrorKind::Precondition, "comparison needs at least one seed");
  ComparisonReport report;
  report.name_a = a.name;
  report.name_b = b.name;
  report.test_fraction = test_fraction;
  std::vector<PairedPrediction> paired;

  for (const auto seed : seeds) {
    const auto split = split_by_package(manifest, {seed, test_fraction});
    if (a.prepare) a.prepare(split.train, seed);
    if (b.prepare) b.prepare(split.train, seed);
    const auto out_a = run_pipeline(a, split.test, width);
    const auto out_b = run_pipeline(b, split.test, width);

    SeedRow row;
    row.seed = seed;
    row.test_packages = out_a.size();
    std::string diagnostics;
    for (std::size_t i = 0; i < out_a.size(); ++i) {
      if (out_a[i].error) {
        ++row.errors_a;
        diagnostics += "\n  " + a.name + " " + out_a[i].package_id + ": " + *out_a[i].error;
      }
      if (out_b[i].error) {
        ++row.errors_b;
        diagnostics += "\n  " + b.name + " " + out_b[i].package_id + ": " + *out_b[i].error;
      }
      if (out_a[i].predicted && out_b[i].predicted) {
        paired.push_back({out_a[i].truth, *out_a[i].predicted, *out_b[i].predicted});
      }
    }
    const auto limit = static_cast<double>(row.test_packages) * 0.10;
    if (static_cast<double>(row.errors_a) > limit || static_cast<double>(row.errors_b) > limit) {
      throw Error(ErrorKind::Comparison, "seed " + std::to_string(seed) + ": error rate above 10% (" + a.name +
                                             " " + std::to_string(row.errors_a) + ", " + b.name + " " +
                                             std::to_string(row.errors_b) + " of " +
                                             std::to_string(row.test_packages) + ")" + diagnostics);
    }
    row.a = metrics(confusion(out_a));
    row.b = metrics(confusion(out_b));
    report.seeds.push_back(std::move(row));
  }
  report.aggregate_a = aggregate(report.seeds, true);
  report.aggregate_b = aggregate(report.seeds, false);
  report.mcnemar = mcnemar(paired, method);
  return report;
}

Json to_json(const ComparisonReport& r) {
  Json seeds = Json::array();
  for (const auto& s : r.seeds) {
    seeds.push_back({{"seed", s.seed},
                     {"test_packages", s.test_packages},
                     {"a", to_json(s.a)},
                     {"b", to_json(s.b)},
                     {"errors_a", s.errors_a},
                     {"errors_b", s.errors_b}});
  }
  return {{"pipeline_a", r.name_a},
          {"pipeline_b", r.name_b},
          {"test_fraction", r.test_fraction},
          {"seeds", seeds},
          {"aggregate", {{"a", to_json(r.aggregate_a)}, {"b", to_json(r.aggregate_b)}}},
          {"mcnemar", to_json(r.mcnemar)}};
}

// ---------------------------------------------------------------------------
// Markdown
// ---------------------------------------------------------------------------

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

std::string fmt(const MeanStd& m) {
  if (!m.mean) return "n/a";
  return fmt(m.mean) + " ± " + fmt(m.stddev);
}

std::string sci(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", p);
  return buf;
}

}  // namespace

std::string render_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "| Model | Accuracy | Precision | Recall | F1 | Balanced Acc. |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& [name, m] : rows) {
    out += "| " + name + " | " + fmt(m.accuracy) + " | " + fmt(m.precision) + " | " + fmt(m.recall) + " | " +
           fmt(m.f1) + " | " + fmt(m.balanced_accuracy) + " |\n";
  }
  return out;
}

std::string render_comparison(const ComparisonReport& r) {
  std::string out = "| Pipeline | Accuracy | Precision | Recall | F1 | Balanced Acc. |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& [name, agg] : {std::pair{r.name_a, &r.aggregate_a}, std::pair{r.name_b, &r.aggregate_b}}) {
    out += "| " + name + " | " + fmt(agg->at("accuracy")) + " | " + fmt(agg->at("precision")) + " | " +
           fmt(agg->at("recall")) + " | " + fmt(agg->at("f1")) + " | " + fmt(agg->at("balanced_accuracy")) + " |\n";
  }
  out += "\n| Comparison | n01 | n10 | p-value |\n|---|---|---|---|\n";
  out += "| " + r.name_a + " vs " + r.name_b + " | " + std::to_string(r.mcnemar.n01) + " | " +
         std::to_string(r.mcnemar.n10) + " | " + sci(r.mcnemar.p_value) + " |\n";
  return out;
}

}  // namespace pkgsentry
