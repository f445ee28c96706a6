#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "pkgsentry/evalharness.hpp"

using namespace pkgsentry;

namespace {

// Independent exact binomial oracle: direct summation of the pmf in long double.
long double exact_two_sided(std::uint64_t n01, std::uint64_t n10) {
  const std::uint64_t n = n01 + n10;
  const std::uint64_t m = std::min(n01, n10);
  long double term = std::pow(0.5L, static_cast<long double>(n));  // C(n, 0) / 2^n
  long double sum = 0.0L;
  for (std::uint64_t i = 0; i <= m; ++i) {
    sum += term;
    term = term * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
  }
  return std::min(1.0L, 2.0L * sum);
}

DatasetManifest toy_manifest(std::size_t packages, std::size_t files_per_package = 2) {
  std::string jsonl;
  for (std::size_t p = 0; p < packages; ++p) {
    for (std::size_t f = 0; f < files_per_package; ++f) {
      const bool mal = p % 2 == 0 && f == 0;
      Json line = {{"id", "p" + std::to_string(p) + "_f" + std::to_string(f)},
                   {"package_id", "p" + std::to_string(p)},
                   {"content", mal ? "exec(base64.b64decode(x))\n" : "x = " + std::to_string(f) + "\n"},
                   {"relative_path", "m" + std::to_string(f) + ".py"},
                   {"label", mal ? "malicious" : "benign"}};
      jsonl += line.dump() + "\n";
    }
  }
  return DatasetManifest::parse_jsonl(jsonl, "toy");
}

Pipeline oracle_pipeline(const std::string& name) {
  return {name, nullptr, [](const std::string&, const std::vector<SourceFile>& files) {
            for (const auto& f : files) {
              if (f.content.find("exec(") != std::string::npos) return Label::Malicious;
            }
            return Label::Benign;
          }};
}

}  // namespace

TEST_CASE("split by package") {
  const auto m = toy_manifest(10);
  const auto s = split_by_package(m, {42, 0.2});
  CHECK(s.test_packages.size() == 2);
  CHECK(s.train_packages.size() == 8);
  CHECK(s.test.entries.size() == 4);
  CHECK(std::is_sorted(s.test_packages.begin(), s.test_packages.end()));
  const auto again = split_by_package(m, {42, 0.2});
  CHECK(again.test_packages == s.test_packages);
  CHECK(again.test.to_jsonl() == s.test.to_jsonl());
  std::set<std::string> train(s.train_packages.begin(), s.train_packages.end());
  for (const auto& p : s.test_packages) CHECK_FALSE(train.count(p));

  // Independent oracle: shuffle the sorted ids with the same generator, take ceil(0.2 * 10).
  auto ids = m.package_ids();
  seeded_shuffle(ids, 42);
  std::vector<std::string> expected(ids.begin(), ids.begin() + 2);
  std::sort(expected.begin(), expected.end());
  CHECK(s.test_packages == expected);

  // Extreme fractions keep both sides non-empty.
  CHECK(split_by_package(m, {1, 0.99}).train_packages.size() == 1);
  CHECK(split_by_package(m, {1, 0.01}).test_packages.size() == 1);

  try {
    split_by_package(toy_manifest(1, 3), {1, 0.2});
    FAIL("expected split error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Split);
  }
}

TEST_CASE("metrics") {
  const auto balanced6000 = metrics({2931, 69, 69, 2931});
  CHECK(*balanced6000.accuracy == doctest::Approx(0.977).epsilon(0.0005));
  CHECK(*balanced6000.precision == doctest::Approx(0.977).epsilon(0.0005));
  CHECK(*balanced6000.recall == doctest::Approx(0.977).epsilon(0.0005));
  CHECK(*balanced6000.f1 == doctest::Approx(0.977).epsilon(0.0005));
  CHECK(*balanced6000.balanced_accuracy == doctest::Approx(*balanced6000.accuracy));

  const auto perfect = metrics({1, 0, 0, 1});
  for (const auto& v : {perfect.accuracy, perfect.precision, perfect.recall, perfect.f1, perfect.balanced_accuracy}) {
    REQUIRE(v.has_value());
    CHECK(*v == 1.0);
  }

  const auto none_predicted = metrics({0, 0, 3, 7});
  CHECK_FALSE(none_predicted.precision.has_value());
  CHECK_FALSE(none_predicted.f1.has_value());
  CHECK(none_predicted.undefined.count("precision"));
  CHECK(*none_predicted.recall == 0.0);
  CHECK(*none_predicted.accuracy == doctest::Approx(0.7));
  const auto j = to_json(none_predicted);
  CHECK(j["precision"].is_null());

  CHECK(f1_from(0.963, 0.955) == doctest::Approx(0.957).epsilon(0.005 / 0.957));
  CHECK(std::fabs(balanced_accuracy_from(0.403, 0.999) - 0.701) <= 0.001);
  CHECK(parse_metric("balanced_accuracy") == Metric::BalancedAccuracy);
  CHECK_FALSE(parse_metric("auc").has_value());
}

TEST_CASE("balanced matrices have balanced accuracy equal to accuracy") {
  SplitMix64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto pos = 1 + rng.below(50);
    const auto tp = rng.below(pos + 1);
    const auto fp = rng.below(pos + 1);
    const auto m = metrics({tp, fp, pos - tp, pos - fp});
    CHECK(*m.balanced_accuracy == doctest::Approx(*m.accuracy));
  }
}

TEST_CASE("McNemar exact and chi-square") {
  const auto a = mcnemar_counts(14, 267);
  CHECK(a.method == McNemarMethod::ExactBinomial);
  CHECK(a.p_value == doctest::Approx(static_cast<double>(exact_two_sided(14, 267))).epsilon(1e-9));
  CHECK(a.log10_p == doctest::Approx(std::log10(static_cast<double>(exact_two_sided(14, 267)))).epsilon(1e-9));
  const auto b = mcnemar_counts(15, 268);
  CHECK(b.p_value == doctest::Approx(static_cast<double>(exact_two_sided(15, 268))).epsilon(1e-9));

  const auto tie = mcnemar_counts(5, 5);
  CHECK(tie.p_value == 1.0);
  CHECK(static_cast<double>(exact_two_sided(5, 5)) == 1.0);
  CHECK(mcnemar_counts(3, 9).p_value == doctest::Approx(598.0 / 4096.0));

  const auto zero = mcnemar_counts(0, 0);
  CHECK(zero.p_value == 1.0);
  CHECK(zero.zero_discordant);

  // (|3 - 9| - 1)^2 / 12 with one degree of freedom.
  const auto chi = mcnemar_counts(3, 9, McNemarMethod::ChiSquareContinuity);
  CHECK(chi.p_value == doctest::Approx(std::erfc(std::sqrt(25.0 / 12.0 / 2.0))));
  CHECK(chi.p_value == doctest::Approx(0.14891467).epsilon(1e-6));
  CHECK(mcnemar_counts(14, 267, McNemarMethod::ChiSquareContinuity).p_value > a.p_value);
}

TEST_CASE("McNemar counts and symmetry") {
  SplitMix64 rng(11);
  for (int round = 0; round < 50; ++round) {
    std::vector<PairedPrediction> paired, swapped;
    std::uint64_t n01 = 0, n10 = 0;
    for (int i = 0; i < 40; ++i) {
      const auto pick = [&] { return rng.below(2) ? Label::Malicious : Label::Benign; };
      PairedPrediction p{pick(), pick(), pick()};
      n01 += p.baseline == p.truth && p.candidate != p.truth;
      n10 += p.candidate == p.truth && p.baseline != p.truth;
      paired.push_back(p);
      swapped.push_back({p.truth, p.candidate, p.baseline});
    }
    const auto r = mcnemar(paired);
    const auto s = mcnemar(swapped);
    CHECK(r.n01 == n01);
    CHECK(r.n10 == n10);
    CHECK(s.n01 == r.n10);
    CHECK(s.n10 == r.n01);
    CHECK(s.p_value == r.p_value);
    CHECK(r.p_value >= 0.0);
    CHECK(r.p_value <= 1.0);
  }
}

TEST_CASE("bootstrap intervals") {
  std::vector<PredictionRow> perfect;
  for (int i = 0; i < 20; ++i) {
    const auto l = i % 3 ? Label::Benign : Label::Malicious;
    perfect.push_back({"p" + std::to_string(i), l, l});
  }
  const auto ci = bootstrap_ci(perfect, Metric::Accuracy, 200, 1);
  CHECK(ci.first == 1.0);
  CHECK(ci.second == 1.0);

  SplitMix64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PredictionRow> rows;
    ConfusionMatrix cm;
    const auto n = 10 + rng.below(30);
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto truth = rng.below(2) ? Label::Malicious : Label::Benign;
      const auto pred = rng.below(4) ? truth : (truth == Label::Malicious ? Label::Benign : Label::Malicious);
      rows.push_back({"pkg" + std::to_string(i), truth, pred});
      cm.add(truth, pred);
    }
    const auto point = *metrics(cm).accuracy;
    const auto [lo, hi] = bootstrap_ci(rows, Metric::Accuracy, 200, trial);
    CHECK(lo <= point);
    CHECK(point <= hi);
    if (trial < 5) CHECK(bootstrap_ci(rows, Metric::Accuracy, 200, trial) == std::make_pair(lo, hi));
  }

  std::vector<PredictionRow> all_benign;
  for (int i = 0; i < 10; ++i) all_benign.push_back({"b" + std::to_string(i), Label::Benign, Label::Benign});
  try {
    bootstrap_ci(all_benign, Metric::Precision, 100, 1);
    FAIL("expected degenerate bootstrap");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateBootstrap);
  }
  CHECK_THROWS_AS(bootstrap_ci({}, Metric::Accuracy, 100, 1), Error);
  CHECK_THROWS_AS(bootstrap_ci(perfect, Metric::Accuracy, 99, 1), Error);
}

TEST_CASE("efficiency") {
  CHECK(throughput(10, 2.0) == 5.0);
  CHECK(throughput(10, 0.0) == 0.0);

  std::vector<ScanResult> runs(2);
  double classify_sum = 0.0;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    runs[r].audit.append(AuditStep::Extract, "d", Json::object(), "extractor", 2.0);
    for (int i = 0; i < 3; ++i) {
      const double ms = 1.0 + static_cast<double>(r) + 0.5 * i;
      classify_sum += ms;
      runs[r].audit.append(AuditStep::ClassifyFile, "d", Json::object(), "lexical", ms);
    }
    runs[r].timings_ms["total"] = 500.0;
  }
  PackageRef ref;
  ref.name = "x";
  std::vector<FileVerdict> fvs;
  for (int i = 0; i < 5; ++i) fvs.push_back(FileVerdict::make("f" + std::to_string(i) + ".py", 0.1, 0.5, "t"));
  for (auto& run : runs) {
    run.verdict = PackageVerdict(ref, Label::Benign, "", {}, fvs);
    for (int i = 0; i < 5; ++i) run.manifest.selected.push_back(SourceFile::from_text("x", "f" + std::to_string(i) + ".py", ""));
  }

  const auto e = measure_efficiency(runs);
  CHECK(e.files == 10);
  CHECK(e.wall_ms == 1000.0);
  CHECK(e.files_per_second == 10.0);
  CHECK(e.per_step.at("classify_file").count == 6);
  CHECK(e.per_step.at("classify_file").mean_ms == doctest::Approx(classify_sum / 6));
  CHECK(e.per_step.at("extract").mean_ms == 2.0);
  CHECK(e.llm_calls == 0);
  CHECK(e.tokens_per_decision == 0.0);
  const auto j = to_json(e);
  CHECK((j["peak_rss_kb"].is_number() || j["peak_rss_kb"] == "unavailable"));
}

TEST_CASE("identical pipelines compare with p = 1") {
  const auto m = toy_manifest(20);
  const auto r = compare_pipelines(m, oracle_pipeline("a"), oracle_pipeline("b"), 0.2, {1, 2, 3});
  CHECK(r.seeds.size() == 3);
  CHECK(r.mcnemar.zero_discordant);
  CHECK(r.mcnemar.p_value == 1.0);
  for (const auto& s : r.seeds) CHECK(*s.a.accuracy == 1.0);
  CHECK(*r.aggregate_a.at("accuracy").mean == 1.0);
  CHECK(*r.aggregate_a.at("accuracy").stddev == 0.0);
  const auto md = render_comparison(r);
  CHECK(md.find("| a | 1.0000 ± 0.0000") != std::string::npos);
  CHECK(md.find("| a vs b | 0 | 0 | 1 |") != std::string::npos);
  CHECK(canonical_json(to_json(r)) ==
        canonical_json(to_json(compare_pipelines(m, oracle_pipeline("a"), oracle_pipeline("b"), 0.2, {1, 2, 3}))));
}

TEST_CASE("threshold-shifted pipelines disagree exactly where scores straddle") {
  // Package scores are fixed; the two pipelines differ only in threshold.
  const auto m = toy_manifest(30, 1);
  std::map<std::string, double> score;
  SplitMix64 rng(17);
  for (const auto& id : m.package_ids()) score[id] = static_cast<double>(rng.below(1000)) / 1000.0;
  const auto thresholded = [&](const std::string& name, double t) {
    return Pipeline{name, nullptr, [&score, t](const std::string& id, const std::vector<SourceFile>&) {
                      return score.at(id) >= t ? Label::Malicious : Label::Benign;
                    }};
  };
  const std::vector<std::uint64_t> seeds{4, 5};
  const auto r = compare_pipelines(m, thresholded("low", 0.3), thresholded("high", 0.7), 0.3, seeds);

  std::uint64_t n01 = 0, n10 = 0;
  for (const auto seed : seeds) {
    const auto split = split_by_package(m, {seed, 0.3});
    for (const auto& id : split.test_packages) {
      const bool truth = split.test.subset({id}).entries.front().label == Label::Malicious;
      const bool low = score[id] >= 0.3;
      const bool high = score[id] >= 0.7;
      if (low == high) continue;
      (low == truth ? n01 : n10) += 1;
    }
  }
  CHECK(r.mcnemar.n01 == n01);
  CHECK(r.mcnemar.n10 == n10);
  CHECK(n01 + n10 > 0);
}

TEST_CASE("comparisons abort when a pipeline errors too often") {
  const auto m = toy_manifest(20);
  Pipeline flaky{"flaky", nullptr, [](const std::string& id, const std::vector<SourceFile>&) -> Label {
                   if ((id.back() - '0') % 2) throw Error(ErrorKind::Io, "boom");
                   return Label::Benign;
                 }};
  try {
    compare_pipelines(m, oracle_pipeline("a"), flaky, 0.5, {9});
    FAIL("expected comparison error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Comparison);
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
}

TEST_CASE("run_pipeline outcomes and prepare hook") {
  const auto m = toy_manifest(6);
  std::vector<std::uint64_t> prepared;
  Pipeline p = oracle_pipeline("p");
  p.prepare = [&](const DatasetManifest& train, std::uint64_t seed) {
    CHECK_FALSE(train.entries.empty());
    prepared.push_back(seed);
  };
  const auto serial = run_pipeline(p, m, 1);
  const auto parallel = run_pipeline(p, m, 4);
  REQUIRE(serial.size() == 6);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].package_id == parallel[i].package_id);
    CHECK(serial[i].predicted == parallel[i].predicted);
  }
  CHECK(serial[0].package_id == "p0");
  CHECK(serial[0].truth == Label::Malicious);
  CHECK(serial[1].truth == Label::Benign);
  CHECK(confusion(serial) == ConfusionMatrix{3, 0, 0, 3});
  compare_pipelines(m, p, oracle_pipeline("q"), 0.5, {1, 2});
  CHECK(prepared == std::vector<std::uint64_t>{1, 2});
}

TEST_CASE("mean and sample standard deviation") {
  const auto ms = mean_std({0.9, 1.0, std::nullopt, 0.8});
  CHECK(*ms.mean == doctest::Approx(0.9));
  CHECK(*ms.stddev == doctest::Approx(0.1));
  CHECK(*mean_std({0.5}).stddev == 0.0);
  CHECK_FALSE(mean_std({std::nullopt}).mean.has_value());
}

TEST_CASE("markdown metrics table") {
  const auto table = render_metrics_table({{"lexical", metrics({1, 0, 0, 1})}, {"none", metrics({0, 0, 1, 1})}});
  CHECK(table.starts_with("| Model | Accuracy | Precision | Recall | F1 | Balanced Acc. |\n|---|---|---|---|---|---|\n"));
  CHECK(table.find("| lexical | 1.0000 | 1.0000 | 1.0000 | 1.0000 | 1.0000 |") != std::string::npos);
  CHECK(table.find("| none | 0.5000 | n/a | 0.0000 | n/a | 0.5000 |") != std::string::npos);
}

TEST_CASE("manifest parsing") {
  const auto m = DatasetManifest::parse_jsonl(
      "{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\n\n{\"id\": \"b\", \"content\": \"y\", \"label\": \"MALICIOUS\"}\n");
  CHECK(m.entries.size() == 2);
  CHECK(m.entries[0].package_id == "a");
  CHECK(m.entries[1].label == Label::Malicious);
  CHECK(DatasetManifest::parse_jsonl(m.to_jsonl()).to_jsonl() == m.to_jsonl());
  for (const char* bad : {"{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\nnot json\n",
                          "{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\n{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\n",
                          "{\"id\": \"a\", \"content\": \"x\", \"label\": \"benign\"}\n{\"id\": \"c\", \"label\": \"benign\"}\n"}) {
    try {
      DatasetManifest::parse_jsonl(bad);
      FAIL("expected manifest error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Manifest);
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
}
