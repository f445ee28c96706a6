#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkgsentry/core.hpp"
#include "pkgsentry/dataset.hpp"
#include "pkgsentry/llm.hpp"
#include "pkgsentry/signals.hpp"

namespace pkgsentry {

enum class ClassifierKind { Lexical, TfidfStacking, LlmRemote };

std::string_view to_string(ClassifierKind kind);

/// Score of one text window. `trace` carries backend-specific detail that the
/// orchestrator mirrors into the audit log (LLM transcripts, for instance).
struct WindowScore {
  double score = 0.0;
  std::optional<std::string> rationale;
  Json trace;
};

/// File-level classifier. Scores are malicious probabilities in [0, 1].
/// Implementations are immutable after construction and safe to share
/// between threads.
class Classifier {
 public:
  Classifier(std::string id, ClassifierKind kind, double threshold);
  virtual ~Classifier() = default;

  const std::string& id() const noexcept { return id_; }
  ClassifierKind kind() const noexcept { return kind_; }
  double threshold() const noexcept { return threshold_; }

  /// Largest input, in estimated tokens, scored in one piece; 0 = unbounded.
  virtual std::uint64_t window_tokens() const { return 0; }

  virtual WindowScore score_window(const SourceFile& file, std::string_view text) const = 0;

 private:
  std::string id_;
  ClassifierKind kind_;
  double threshold_;
};

using ClassifierHandle = std::shared_ptr<const Classifier>;

/// Overlapping code-point windows of `window_tokens * 4` characters with a
/// stride of half a window. The last window always reaches the end of text.
std::vector<std::string_view> split_windows(std::string_view text, std::uint64_t window_tokens);

/// Max over window scores; the rationale and trace of the maximal window win.
WindowScore score_long_file(const Classifier& classifier, const SourceFile& file);

/// Scores the file (windowed when it exceeds the backend window) and applies
/// the threshold. Backend failures surface as Error(ClassificationUnavailable).
FileVerdict classify_file(const Classifier& classifier, const SourceFile& file,
                          Json* trace = nullptr);

// ---------------------------------------------------------------------------
// Lexical scorer
// ---------------------------------------------------------------------------

struct LexicalWeights {
  double bias = -3.0;
  double sys_exec = 2.0;
  double encoded_payload = 1.5;
  double net_call = 1.5;
  double file_manip = 1.0;
  double dynamic_import = 1.5;
  double decode_then_exec = 5.0;
  double install_hook = 1.5;
};

/// Logistic over indicator counts. Each count c > 0 contributes
/// weight * (1 + ln(min(c, 8))).
class LexicalClassifier final : public Classifier {
 public:
  explicit LexicalClassifier(double threshold = 0.5, LexicalWeights weights = {},
                             const PatternTable* table = nullptr);

  WindowScore score_window(const SourceFile& file, std::string_view text) const override;

  double score_indicators(const IndicatorVector& v) const;

 private:
  LexicalWeights weights_;
  const PatternTable* table_;
};

/// True for files named setup.py at any depth.
bool is_setup_script(std::string_view relative_path);

// ---------------------------------------------------------------------------
// TF-IDF stacking
// ---------------------------------------------------------------------------

enum class BaseLearner { Logistic, Hinge, ComplementNB };

std::string_view to_string(BaseLearner learner);

struct TfidfHyper {
  std::uint32_t min_df = 2;
  int ngram_min = 1;
  int ngram_max = 2;
  std::vector<BaseLearner> base_learners{BaseLearner::Logistic, BaseLearner::Hinge,
                                         BaseLearner::ComplementNB};
  double l2 = 1e-4;
  std::uint32_t epochs = 300;
  double lr = 1.0;
  std::uint32_t folds = 5;
  double nb_alpha = 1.0;
  std::uint32_t meta_epochs = 500;
  double meta_lr = 0.5;
};

Json to_json(const TfidfHyper& hyper);
TfidfHyper tfidf_hyper_from_json(const Json& j);

struct LinearModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
};

using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct TfidfStackingModel {
  std::map<std::string, std::uint32_t> vocabulary;  // term -> column
  Eigen::VectorXd idf;
  std::vector<BaseLearner> learner_kinds;
  std::vector<LinearModel> base_learners;
  LinearModel meta_learner;
  Eigen::VectorXd meta_offsets;  // standardization of base outputs
  Eigen::VectorXd meta_scales;
  TfidfHyper hyper;
  std::uint64_t train_seed = 0;

  /// L2-normalized log-TF * IDF row for one document.
  Eigen::SparseVector<double> featurize(std::string_view text) const;
  /// Raw base-learner outputs (logit / margin / log-ratio).
  Eigen::VectorXd base_outputs(const Eigen::SparseVector<double>& x) const;
  double predict_proba(std::string_view text) const;

  /// PKSM container, little-endian.
  Bytes serialize() const;
  static TfidfStackingModel deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static TfidfStackingModel load(const std::string& path);
};

inline constexpr std::uint16_t kPksmVersion = 1;

/// Smoothed IDF: ln((1 + n_docs) / (1 + df)) + 1.
double smoothed_idf(std::uint64_t n_docs, std::uint64_t df);

/// Deterministic given the seed and independent of the order of `train`.
/// Error(DegenerateData) when only one label is present,
/// Error(Precondition) for min_df == 0 or an empty vocabulary.
TfidfStackingModel train_tfidf_stacking(const std::vector<SourceFile>& files, const std::vector<Label>& labels,
                                        const TfidfHyper& hyper, std::uint64_t seed);

class TfidfClassifier final : public Classifier {
 public:
  TfidfClassifier(std::shared_ptr<const TfidfStackingModel> model, double threshold = 0.5);

  WindowScore score_window(const SourceFile& file, std::string_view text) const override;
  const TfidfStackingModel& model() const noexcept { return *model_; }

 private:
  std::shared_ptr<const TfidfStackingModel> model_;
};

// ---------------------------------------------------------------------------
// Remote LLM classifier
// ---------------------------------------------------------------------------

/// Sends the Rationale prompt per window. A "score" number in [0, 1] in the
/// reply is used when present; otherwise the decision maps to 1.0 / 0.0.
class LlmRemoteClassifier final : public Classifier {
 public:
  LlmRemoteClassifier(std::shared_ptr<LlmGateway> gateway, double threshold = 0.5,
                      std::uint64_t window_tokens = 2048);

  std::uint64_t window_tokens() const override { return window_tokens_; }
  WindowScore score_window(const SourceFile& file, std::string_view text) const override;

 private:
  std::shared_ptr<LlmGateway> gateway_;
  std::uint64_t window_tokens_;
};

// ---------------------------------------------------------------------------
// Manifest evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string id;
  std::string package_id;
  Label truth = Label::Benign;
  std::optional<FileVerdict> verdict;
  std::optional<std::string> error;
};

Json to_json(const EvalRow& row);

/// One row per entry in manifest order; load and classification failures
/// become error rows.
std::vector<EvalRow> evaluate_backend_on_manifest(const Classifier& classifier,
                                                  const DatasetManifest& manifest);

}  // namespace pkgsentry
