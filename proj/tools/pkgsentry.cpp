#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "pkgsentry/classifiers.hpp"
#include "pkgsentry/core.hpp"
#include "pkgsentry/dataset.hpp"
#include "pkgsentry/evalharness.hpp"
#include "pkgsentry/extractor.hpp"
#include "pkgsentry/fetcher.hpp"
#include "pkgsentry/llm.hpp"
#include "pkgsentry/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace pkgsentry;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitMalicious = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LlmOptions {
  std::string base;
  std::string model;
  std::string key_env;
  double timeout_s = 60.0;
  unsigned retries = 3;
  double rpm = 0.0;

  std::shared_ptr<LlmGateway> gateway() const {
    LlmConfig cfg;
    if (!base.empty()) {
      // An explicit flag beats the environment.
      setenv("PKGSENTRY_LLM_BASE", base.c_str(), 1);
      cfg.base_url = base;
    }
    if (!model.empty()) cfg.model = model;
    if (!key_env.empty()) cfg.api_key_env = key_env;
    cfg.timeout_s = timeout_s;
    cfg.max_retries = retries;
    cfg.requests_per_minute = rpm;
    return std::make_shared<LlmGateway>(cfg);
  }
};

void add_llm_options(CLI::App* cmd, LlmOptions& o) {
  cmd->add_option("--llm-base", o.base, "Chat completions base URL (overrides PKGSENTRY_LLM_BASE)");
  cmd->add_option("--llm-model", o.model, "Model name sent to the endpoint");
  cmd->add_option("--llm-key-env", o.key_env, "Environment variable holding the API key");
  cmd->add_option("--llm-timeout", o.timeout_s, "Per-request timeout in seconds");
  cmd->add_option("--llm-retries", o.retries, "Retries on 429/5xx/transport errors");
  cmd->add_option("--llm-rpm", o.rpm, "Requests per minute limit (0 = unlimited)");
}

/// "lexical", "tfidf:MODEL" or "llm", optionally suffixed with "@THRESHOLD".
ClassifierHandle make_classifier(const std::string& spec_in, const LlmOptions& llm, double default_threshold) {
  std::string spec = spec_in;
  double threshold = default_threshold;
  if (const auto at = spec.rfind('@'); at != std::string::npos) {
    try {
      threshold = std::stod(spec.substr(at + 1));
    } catch (const std::exception&) {
      throw UsageError("bad threshold in classifier spec '" + spec_in + "'");
    }
    spec.resize(at);
  }
  if (spec == "lexical") return std::make_shared<LexicalClassifier>(threshold);
  if (spec.rfind("tfidf:", 0) == 0) {
    auto model = std::make_shared<TfidfStackingModel>(TfidfStackingModel::load(spec.substr(6)));
    return std::make_shared<TfidfClassifier>(std::move(model), threshold);
  }
  if (spec == "llm") return std::make_shared<LlmRemoteClassifier>(llm.gateway(), threshold);
  throw UsageError("unknown classifier '" + spec_in + "' (expected lexical, tfidf:MODEL or llm)");
}

void parse_mode(const std::string& mode, PipelineConfig& cfg) {
  if (mode == "multi") {
    cfg.mode = PipelineMode::MultiAgent;
  } else if (mode == "sa-concat") {
    cfg.mode = PipelineMode::SAConcat;
  } else if (mode.rfind("sa-topk", 0) == 0) {
    cfg.mode = PipelineMode::SATopK;
    if (mode.size() > 7) {
      if (mode[7] != ':') throw UsageError("bad mode '" + mode + "'");
      try {
        cfg.top_k = std::stoul(mode.substr(8));
      } catch (const std::exception&) {
        throw UsageError("bad K in mode '" + mode + "'");
      }
    }
  } else {
    throw UsageError("unknown mode '" + mode + "' (expected multi, sa-concat or sa-topk:K)");
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  if (path == "-") {
    std::cout << text;
    return;
  }
  write_file_atomic(path, text);
}

std::string pretty(const Json& j) { return canonical_json(j) + "\n"; }

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw UsageError("bad seed '" + item + "'");
    }
  }
  if (seeds.empty()) throw UsageError("no seeds given");
  return seeds;
}

std::vector<SourceFile> load_files(const DatasetManifest& m) {
  std::vector<SourceFile> files;
  for (const auto& e : m.entries) files.push_back(m.load_entry(e));
  return files;
}

std::vector<Label> labels_of(const DatasetManifest& m) {
  std::vector<Label> labels;
  for (const auto& e : m.entries) labels.push_back(e.label);
  return labels;
}

Pipeline classifier_pipeline(const std::string& name, ClassifierHandle classifier) {
  Pipeline p;
  p.name = name;
  p.predict = [classifier](const std::string&, const std::vector<SourceFile>& files) {
    std::vector<FileVerdict> verdicts;
    for (const auto& f : files) verdicts.push_back(classify_file(*classifier, f));
    return aggregate_verdict(verdicts).first;
  };
  return p;
}

/// Pipeline specs: a classifier spec, "tfidf-train[@THR]", "sa-concat" or "sa-topk:K".
Pipeline make_pipeline(const std::string& spec, const LlmOptions& llm, const PipelineConfig& base) {
  if (spec == "sa-concat" || spec.rfind("sa-topk", 0) == 0) {
    PipelineConfig cfg = base;
    parse_mode(spec, cfg);
    auto gateway = llm.gateway();
    Pipeline p;
    p.name = spec;
    p.predict = [cfg, gateway](const std::string& package_id, const std::vector<SourceFile>& files) {
      ScanResult result;
      PackageRef ref;
      try {
        ref.name = normalize_name(package_id);
      } catch (const Error&) {
        ref.name = "package";
      }
      run_single_agent(ref, files, cfg, *gateway, result);
      return result.verdict->label();
    };
    return p;
  }
  if (spec.rfind("tfidf-train", 0) == 0) {
    double threshold = base.threshold;
    if (const auto at = spec.find('@'); at != std::string::npos) threshold = std::stod(spec.substr(at + 1));
    auto state = std::make_shared<ClassifierHandle>();
    Pipeline p;
    p.name = spec;
    p.prepare = [state, threshold](const DatasetManifest& train, std::uint64_t seed) {
      auto model = std::make_shared<TfidfStackingModel>(
          train_tfidf_stacking(load_files(train), labels_of(train), TfidfHyper{}, seed));
      *state = std::make_shared<TfidfClassifier>(std::move(model), threshold);
    };
    p.predict = [state](const std::string&, const std::vector<SourceFile>& files) {
      std::vector<FileVerdict> verdicts;
      for (const auto& f : files) verdicts.push_back(classify_file(**state, f));
      return aggregate_verdict(verdicts).first;
    };
    return p;
  }
  return classifier_pipeline(spec, make_classifier(spec, llm, base.threshold));
}

int report_error(const Error& e) {
  std::cerr << "error";
  if (!e.stage().empty()) std::cerr << " [stage " << e.stage() << "]";
  std::cerr << " (" << to_string(e.kind()) << "): " << e.detail() << "\n";
  return e.kind() == ErrorKind::Manifest ? kExitUsage : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pkgsentry: staged malicious-package scanner and evaluation harness"};
  app.set_config("--config", "", "TOML configuration file; command-line flags take precedence");
  app.require_subcommand(1);

  LlmOptions llm;
  PipelineConfig pipeline_cfg;
  double threshold = 0.5;

  // scan
  auto* scan = app.add_subcommand("scan", "Scan one package and print its verdict")->configurable();
  std::string scan_package_q, scan_archive, scan_dir, scan_classifier = "lexical", scan_mode = "multi";
  std::string scan_out, scan_audit, scan_snapshot, scan_work;
  bool scan_llm_justify = false;
  std::uint64_t budget = pipeline_cfg.context_budget_tokens;
  std::size_t width = pipeline_cfg.concurrency_width;
  scan->add_option("--package", scan_package_q, "Registry query, NAME or NAME==VERSION");
  scan->add_option("--archive", scan_archive, "Local sdist (.tar.gz or .zip)");
  scan->add_option("--dir", scan_dir, "Local unpacked package directory");
  scan->add_option("--classifier", scan_classifier, "lexical | tfidf:MODEL | llm, optional @THRESHOLD");
  scan->add_option("--mode", scan_mode, "multi | sa-concat | sa-topk:K");
  scan->add_option("--threshold", threshold, "Malicious score threshold");
  scan->add_option("--budget", budget, "Context budget in tokens for sa-concat");
  scan->add_option("--width", width, "Concurrent file classifications");
  scan->add_option("--out", scan_out, "Write the full ScanResult JSON here");
  scan->add_option("--audit", scan_audit, "Write the audit log as JSONL here");
  scan->add_option("--snapshot", scan_snapshot, "Offline registry metadata (JSON file or directory)");
  scan->add_option("--work-dir", scan_work, "Scratch directory");
  scan->add_flag("--llm-justify", scan_llm_justify, "Ask the Verdict agent for the justification text");
  add_llm_options(scan, llm);

  // fetch
  auto* fetch = app.add_subcommand("fetch", "Resolve and download a source archive")->configurable();
  std::string fetch_q, fetch_dest = ".", fetch_snapshot;
  fetch->add_option("--package", fetch_q, "Registry query")->required();
  fetch->add_option("--dest", fetch_dest, "Download directory");
  fetch->add_option("--snapshot", fetch_snapshot, "Offline registry metadata");

  // extract
  auto* extract = app.add_subcommand("extract", "Unpack and select source files")->configurable();
  std::string ex_archive, ex_dir, ex_out, ex_dest;
  extract->add_option("--archive", ex_archive, "Archive to unpack");
  extract->add_option("--dir", ex_dir, "Directory to list");
  extract->add_option("--dest", ex_dest, "Unpack destination (must be empty)");
  extract->add_option("--out", ex_out, "Write the manifest JSON here");

  // train
  auto* train = app.add_subcommand("train", "Train the TF-IDF stacking model")->configurable();
  std::string tr_manifest, tr_out;
  std::uint64_t tr_seed = 0;
  TfidfHyper hyper;
  train->add_option("--manifest", tr_manifest, "Training manifest (JSONL)")->required();
  train->add_option("--out", tr_out, "Model output path")->required();
  train->add_option("--seed", tr_seed, "Training seed");
  train->add_option("--min-df", hyper.min_df, "Minimum document frequency");
  train->add_option("--epochs", hyper.epochs, "Gradient epochs for base learners");
  train->add_option("--lr", hyper.lr, "Learning rate for base learners");
  train->add_option("--l2", hyper.l2, "L2 penalty");
  train->add_option("--folds", hyper.folds, "Out-of-fold stacking folds");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a classifier on a package-level split")->configurable();
  std::string ev_manifest, ev_classifier = "lexical", ev_out;
  std::uint64_t ev_split_seed = 0;
  double ev_test_frac = 0.2;
  std::size_t ev_bootstrap = 0;
  bool ev_all = false;
  eval->add_option("--manifest", ev_manifest, "Evaluation manifest (JSONL)")->required();
  eval->add_option("--classifier", ev_classifier, "lexical | tfidf:MODEL | llm, optional @THRESHOLD");
  eval->add_option("--split-seed", ev_split_seed, "Split seed");
  eval->add_option("--test-frac", ev_test_frac, "Fraction of packages held out");
  eval->add_flag("--all", ev_all, "Evaluate on every entry instead of the test split");
  eval->add_option("--bootstrap", ev_bootstrap, "Bootstrap resamples for a 95% accuracy interval (>= 100)");
  eval->add_option("--out", ev_out, "Write the JSON report here");
  add_llm_options(eval, llm);

  // compare
  auto* compare = app.add_subcommand("compare", "Compare two pipelines with McNemar's test")->configurable();
  std::string cmp_manifest, cmp_seeds = "0", cmp_out, cmp_method = "exact";
  std::vector<std::string> cmp_pipelines;
  double cmp_test_frac = 0.2;
  compare->add_option("--manifest", cmp_manifest, "Manifest (JSONL)")->required();
  compare->add_option("--pipeline", cmp_pipelines, "Baseline then candidate pipeline spec")->expected(2)->required();
  compare->add_option("--seeds", cmp_seeds, "Comma-separated split seeds");
  compare->add_option("--test-frac", cmp_test_frac, "Fraction of packages held out");
  compare->add_option("--method", cmp_method, "exact | chi2")->check(CLI::IsMember({"exact", "chi2"}));
  compare->add_option("--width", width, "Concurrent package predictions");
  compare->add_option("--budget", budget, "Context budget in tokens for sa-concat");
  compare->add_option("--out", cmp_out, "Write the JSON report here");
  add_llm_options(compare, llm);

  // report
  auto* report = app.add_subcommand("report", "Render reports")->configurable();
  std::string rp_input, rp_corpus, rp_classifier = "lexical", rp_out;
  report->add_option("--input", rp_input, "eval or compare JSON to render as Markdown");
  report->add_option("--efficiency", rp_corpus, "Scan every package directory under this path and report efficiency");
  report->add_option("--classifier", rp_classifier, "Classifier for --efficiency");
  report->add_option("--out", rp_out, "Write the JSON report here");
  report->add_option("--width", width, "Concurrent file classifications");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    pipeline_cfg.threshold = threshold;
    pipeline_cfg.context_budget_tokens = budget;
    pipeline_cfg.concurrency_width = width;

    if (*scan) {
      const int sources = !scan_package_q.empty() + !scan_archive.empty() + !scan_dir.empty();
      if (sources != 1) throw UsageError("scan needs exactly one of --package, --archive, --dir");
      parse_mode(scan_mode, pipeline_cfg);
      ScanContext ctx;
      ctx.config = pipeline_cfg;
      ctx.work_dir = scan_work;
      if (pipeline_cfg.mode == PipelineMode::MultiAgent) {
        ctx.classifier = make_classifier(scan_classifier, llm, threshold);
        if (scan_llm_justify) ctx.gateway = llm.gateway();
      } else {
        ctx.gateway = llm.gateway();
      }
      if (!scan_snapshot.empty()) ctx.metadata = std::make_shared<SnapshotSource>(SnapshotSource::load(scan_snapshot));
      const ScanInput input = !scan_package_q.empty() ? ScanInput::package(scan_package_q)
                              : !scan_archive.empty() ? ScanInput::archive(scan_archive)
                                                      : ScanInput::directory(scan_dir);
      const auto result = scan_package(input, ctx);
      const auto& v = *result.verdict;
      std::string label = std::string(to_string(v.label()));
      for (auto& c : label) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      std::cout << label << " " << v.package().name << (v.package().version.empty() ? "" : "==" + v.package().version)
                << " | " << v.justification() << "\n";
      write_text(scan_out, pretty(to_json(result)));
      write_text(scan_audit, result.audit.to_jsonl());
      return v.label() == Label::Malicious ? kExitMalicious : kExitOk;
    }

    if (*fetch) {
      RegistryEndpoint endpoint;
      PackageRef ref;
      if (!fetch_snapshot.empty()) {
        auto source = SnapshotSource::load(fetch_snapshot);
        ref = resolve_package(fetch_q, source);
      } else {
        ref = resolve_package(fetch_q, endpoint);
      }
      fs::create_directories(fetch_dest);
      const auto info = download_sdist(ref, endpoint, fetch_dest);
      std::cout << pretty({{"package", to_json(ref)}, {"archive", to_json(info)}});
      return kExitOk;
    }

    if (*extract) {
      if (ex_archive.empty() == ex_dir.empty()) throw UsageError("extract needs exactly one of --archive, --dir");
      std::vector<std::string> entries;
      std::string root = ex_dir;
      std::optional<fs::path> scratch;
      if (!ex_archive.empty()) {
        if (ex_dest.empty()) {
          scratch = fs::temp_directory_path() / ("pkgsentry-extract-" + std::to_string(::getpid()));
          fs::remove_all(*scratch);
          fs::create_directories(*scratch);
          root = scratch->string();
        } else {
          fs::create_directories(ex_dest);
          root = ex_dest;
        }
        entries = unpack(inspect_archive(ex_archive), root);
      } else {
        entries = list_directory(root);
      }
      const auto manifest = select_files(entries, SelectionRules{}, directory_loader(root), fs::path(root).filename().string());
      const auto text = pretty(to_json(manifest));
      if (scratch) fs::remove_all(*scratch);
      if (ex_out.empty()) std::cout << text;
      write_text(ex_out, text);
      return kExitOk;
    }

    if (*train) {
      const auto manifest = DatasetManifest::load(tr_manifest);
      const auto model = train_tfidf_stacking(load_files(manifest), labels_of(manifest), hyper, tr_seed);
      model.save(tr_out);
      std::cout << "model " << tr_out << " sha256=" << sha256_hex(model.serialize())
                << " vocabulary=" << model.vocabulary.size() << " seed=" << tr_seed << "\n";
      return kExitOk;
    }

    if (*eval) {
      const auto manifest = DatasetManifest::load(ev_manifest);
      const auto classifier = make_classifier(ev_classifier, llm, threshold);
      const auto target = ev_all ? manifest : split_by_package(manifest, {ev_split_seed, ev_test_frac}).test;
      const auto rows = evaluate_backend_on_manifest(*classifier, target);
      const auto m = metrics(confusion(rows));
      std::size_t errors = 0;
      Json row_json = Json::array();
      std::vector<PredictionRow> prediction_rows;
      for (const auto& r : rows) {
        row_json.push_back(to_json(r));
        if (r.error) ++errors;
        else prediction_rows.push_back({r.package_id, r.truth, r.verdict->label});
      }
      Json out = {{"kind", "eval"},
                  {"manifest", manifest.name},
                  {"classifier", ev_classifier},
                  {"split_seed", ev_split_seed},
                  {"test_fraction", ev_all ? Json(nullptr) : Json(ev_test_frac)},
                  {"metrics", to_json(m)},
                  {"error_rows", errors},
                  {"rows", row_json}};
      if (ev_bootstrap > 0) {
        const auto [lo, hi] = bootstrap_ci(prediction_rows, Metric::Accuracy, ev_bootstrap, ev_split_seed);
        out["accuracy_ci95"] = {lo, hi};
      }
      std::cout << render_metrics_table({{ev_classifier, m}});
      std::cout << "error rows: " << errors << " of " << rows.size() << "\n";
      write_text(ev_out, pretty(out));
      return kExitOk;
    }

    if (*compare) {
      const auto manifest = DatasetManifest::load(cmp_manifest);
      const auto a = make_pipeline(cmp_pipelines.at(0), llm, pipeline_cfg);
      const auto b = make_pipeline(cmp_pipelines.at(1), llm, pipeline_cfg);
      const auto method = cmp_method == "chi2" ? McNemarMethod::ChiSquareContinuity : McNemarMethod::ExactBinomial;
      const auto result = compare_pipelines(manifest, a, b, cmp_test_frac, parse_seeds(cmp_seeds), width, method);
      Json out = to_json(result);
      out["kind"] = "compare";
      std::cout << render_comparison(result);
      write_text(cmp_out, pretty(out));
      return kExitOk;
    }

    if (*report) {
      if (rp_input.empty() == rp_corpus.empty()) throw UsageError("report needs exactly one of --input, --efficiency");
      if (!rp_input.empty()) {
        const auto bytes = read_file_bytes(rp_input);
        const Json doc = Json::parse(std::string(bytes.begin(), bytes.end()), nullptr, false);
        if (doc.is_discarded() || !doc.is_object()) throw Error(ErrorKind::Parse, rp_input + " is not a JSON object");
        const auto kind = doc.value("kind", "");
        auto from_json = [](const Json& j) {
          const auto& c = j.at("confusion");
          return metrics({c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                          c.at("fn").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>()});
        };
        if (kind == "eval") {
          std::cout << render_metrics_table({{doc.at("classifier").get<std::string>(), from_json(doc.at("metrics"))}});
        } else if (kind == "compare") {
          std::vector<std::pair<std::string, MetricsReport>> rows;
          for (const auto& s : doc.at("seeds")) {
            const auto seed = std::to_string(s.at("seed").get<std::uint64_t>());
            rows.emplace_back(doc.at("pipeline_a").get<std::string>() + " (seed " + seed + ")", from_json(s.at("a")));
            rows.emplace_back(doc.at("pipeline_b").get<std::string>() + " (seed " + seed + ")", from_json(s.at("b")));
          }
          std::cout << render_metrics_table(rows);
          const auto& mc = doc.at("mcnemar");
          std::cout << "\nMcNemar (" << mc.at("method").get<std::string>() << "): n01=" << mc.at("n01")
                    << " n10=" << mc.at("n10") << " p=" << mc.at("p_value") << "\n";
        } else {
          throw UsageError(rp_input + " is neither an eval nor a compare report");
        }
        return kExitOk;
      }
      ScanContext ctx;
      ctx.config = pipeline_cfg;
      ctx.classifier = make_classifier(rp_classifier, llm, threshold);
      std::vector<ScanResult> runs;
      std::vector<fs::path> dirs;
      for (const auto& entry : fs::directory_iterator(rp_corpus)) {
        if (entry.is_directory()) dirs.push_back(entry.path());
      }
      std::sort(dirs.begin(), dirs.end());
      for (const auto& d : dirs) runs.push_back(scan_package(ScanInput::directory(d.string()), ctx));
      const auto eff = measure_efficiency(runs);
      std::cout << "| Step | Calls | Mean latency (ms) |\n|---|---|---|\n";
      for (const auto& [name, s] : eff.per_step) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f", s.mean_ms);
        std::cout << "| " << name << " | " << s.count << " | " << buf << " |\n";
      }
      std::cout << "\nfiles/s: " << eff.files_per_second << " over " << eff.files << " files in " << eff.runs
                << " packages\n";
      write_text(rp_out, pretty(to_json(eff)));
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    return report_error(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
