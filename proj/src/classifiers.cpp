#include "pkgsentry/classifiers.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>

namespace pkgsentry {

std::string_view to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::Lexical: return "lexical";
    case ClassifierKind::TfidfStacking: return "tfidf_stacking";
    case ClassifierKind::LlmRemote: return "llm_remote";
  }
  return "unknown";
}

Classifier::Classifier(std::string id, ClassifierKind kind, double threshold)
    : id_(std::move(id)), kind_(kind), threshold_(threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorKind::Precondition, "classifier threshold must lie in (0,1)");
  }
}

std::vector<std::string_view> split_windows(std::string_view text, std::uint64_t window_tokens) {
  std::vector<std::size_t> starts;  // byte offset of every code point
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) starts.push_back(i);
  }
  const std::size_t n = starts.size();
  const std::size_t width = window_tokens == 0 ? n : static_cast<std::size_t>(window_tokens * 4);
  if (n <= width || width == 0) return {text};
  const std::size_t stride = std::max<std::size_t>(1, width / 2);
  auto offset = [&](std::size_t cp) { return cp < n ? starts[cp] : text.size(); };

  std::vector<std::string_view> windows;
  for (std::size_t begin = 0;; begin += stride) {
    const std::size_t end = std::min(begin + width, n);
    windows.push_back(text.substr(offset(begin), offset(end) - offset(begin)));
    if (end == n) break;
  }
  return windows;
}

WindowScore score_long_file(const Classifier& classifier, const SourceFile& file) {
  const auto limit = classifier.window_tokens();
  if (limit == 0 || file.token_estimate <= limit) return classifier.score_window(file, file.content);

  std::optional<WindowScore> best;
  Json window_scores = Json::array();
  for (const auto window : split_windows(file.content, limit)) {
    auto scored = classifier.score_window(file, window);
    window_scores.push_back(scored.score);
    if (!best || scored.score > best->score) best = std::move(scored);
  }
  best->trace["window_scores"] = std::move(window_scores);
  return *best;
}

FileVerdict classify_file(const Classifier& classifier, const SourceFile& file, Json* trace) {
  const auto start = std::chrono::steady_clock::now();
  WindowScore scored = score_long_file(classifier, file);
  const double latency =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  if (!(scored.score >= 0.0 && scored.score <= 1.0)) {
    throw Error(ErrorKind::ClassificationUnavailable,
                classifier.id() + " produced score outside [0,1] for " + file.relative_path);
  }
  if (trace) *trace = std::move(scored.trace);
  return FileVerdict::make(file.relative_path, scored.score, classifier.threshold(), classifier.id(),
                           std::move(scored.rationale), latency);
}

// ---------------------------------------------------------------------------
// Lexical
// ---------------------------------------------------------------------------

bool is_setup_script(std::string_view relative_path) {
  const auto slash = relative_path.rfind('/');
  const auto base = slash == std::string_view::npos ? relative_path : relative_path.substr(slash + 1);
  return base == "setup.py";
}

LexicalClassifier::LexicalClassifier(double threshold, LexicalWeights weights, const PatternTable* table)
    : Classifier("lexical", ClassifierKind::Lexical, threshold),
      weights_(weights),
      table_(table ? table : &PatternTable::builtin()) {}

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double count_term(std::uint32_t count) {
  if (count == 0) return 0.0;
  return 1.0 + std::log(static_cast<double>(std::min<std::uint32_t>(count, 8)));
}

}  // namespace

double LexicalClassifier::score_indicators(const IndicatorVector& v) const {
  double z = weights_.bias;
  z += weights_.sys_exec * count_term(v.sys_exec);
  z += weights_.encoded_payload * count_term(v.encoded_payload);
  z += weights_.net_call * count_term(v.net_call);
  z += weights_.file_manip * count_term(v.file_manip);
  z += weights_.dynamic_import * count_term(v.dynamic_import);
  if (v.decode_then_exec) z += weights_.decode_then_exec;
  if (v.install_hook) z += weights_.install_hook;
  return sigmoid(z);
}

WindowScore LexicalClassifier::score_window(const SourceFile& file, std::string_view text) const {
  const auto indicators = extract_indicators(tokenize_source(text), *table_, is_setup_script(file.relative_path));
  WindowScore out;
  out.score = score_indicators(indicators);
  const auto active = indicators.active();
  if (active.empty()) {
    out.rationale = "no indicators";
  } else {
    std::string r = "indicators: ";
    for (std::size_t i = 0; i < active.size(); ++i) r += (i ? ", " : "") + active[i];
    out.rationale = std::move(r);
  }
  out.trace = {{"indicators", to_json(indicators)}};
  return out;
}

// ---------------------------------------------------------------------------
// TF-IDF stacking
// ---------------------------------------------------------------------------

std::string_view to_string(BaseLearner learner) {
  switch (learner) {
    case BaseLearner::Logistic: return "logistic";
    case BaseLearner::Hinge: return "hinge";
    case BaseLearner::ComplementNB: return "complement_nb";
  }
  return "unknown";
}

namespace {

BaseLearner parse_learner(const std::string& name) {
  for (auto l : {BaseLearner::Logistic, BaseLearner::Hinge, BaseLearner::ComplementNB}) {
    if (to_string(l) == name) return l;
  }
  throw Error(ErrorKind::Format, "unknown base learner '" + name + "'");
}

}  // namespace

Json to_json(const TfidfHyper& h) {
  Json learners = Json::array();
  for (auto l : h.base_learners) learners.push_back(std::string(to_string(l)));
  return {{"min_df", h.min_df},       {"ngram_min", h.ngram_min}, {"ngram_max", h.ngram_max},
          {"base_learners", learners}, {"l2", h.l2},               {"epochs", h.epochs},
          {"lr", h.lr},               {"folds", h.folds},         {"nb_alpha", h.nb_alpha},
          {"meta_epochs", h.meta_epochs}, {"meta_lr", h.meta_lr}};
}

TfidfHyper tfidf_hyper_from_json(const Json& j) {
  TfidfHyper h;
  try {
    h.min_df = j.value("min_df", h.min_df);
    h.ngram_min = j.value("ngram_min", h.ngram_min);
    h.ngram_max = j.value("ngram_max", h.ngram_max);
    if (j.contains("base_learners")) {
      h.base_learners.clear();
      for (const auto& name : j.at("base_learners")) h.base_learners.push_back(parse_learner(name.get<std::string>()));
    }
    h.l2 = j.value("l2", h.l2);
    h.epochs = j.value("epochs", h.epochs);
    h.lr = j.value("lr", h.lr);
    h.folds = j.value("folds", h.folds);
    h.nb_alpha = j.value("nb_alpha", h.nb_alpha);
    h.meta_epochs = j.value("meta_epochs", h.meta_epochs);
    h.meta_lr = j.value("meta_lr", h.meta_lr);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad hyperparameters: ") + e.what());
  }
  return h;
}

double smoothed_idf(std::uint64_t n_docs, std::uint64_t df) {
  return std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + static_cast<double>(df))) + 1.0;
}

namespace {

using TermCounts = std::map<std::string, std::uint32_t>;

TermCounts count_terms(std::string_view text, int min_n, int max_n) {
  TermCounts counts;
  for (auto& term : ngram_terms(tokenize_source(text), min_n, max_n)) ++counts[std::move(term)];
  return counts;
}

Eigen::SparseVector<double> tfidf_row(const TermCounts& counts, const std::map<std::string, std::uint32_t>& vocab,
                                      const Eigen::VectorXd& idf) {
  Eigen::SparseVector<double> row(static_cast<Eigen::Index>(vocab.size()));
  double norm2 = 0.0;
  std::vector<std::pair<std::uint32_t, double>> entries;
  for (const auto& [term, count] : counts) {
    const auto it = vocab.find(term);
    if (it == vocab.end()) continue;
    const double v = (1.0 + std::log(static_cast<double>(count))) * idf[it->second];
    entries.emplace_back(it->second, v);
    norm2 += v * v;
  }
  std::sort(entries.begin(), entries.end());
  const double inv = norm2 > 0 ? 1.0 / std::sqrt(norm2) : 0.0;
  row.reserve(static_cast<Eigen::Index>(entries.size()));
  for (const auto& [col, v] : entries) row.insert(col) = v * inv;
  return row;
}

Eigen::VectorXd sigmoid(const Eigen::VectorXd& z) {
  return z.unaryExpr([](double v) { return pkgsentry::sigmoid(v); });
}

LinearModel train_logistic(const SparseRows& x, const Eigen::VectorXd& y, double l2, std::uint32_t epochs,
                           double lr) {
  const double n = static_cast<double>(x.rows());
  LinearModel m{Eigen::VectorXd::Zero(x.cols()), 0.0};
  for (std::uint32_t e = 0; e < epochs; ++e) {
    const Eigen::VectorXd g = sigmoid((x * m.weights).array() + m.bias) - y;
    const Eigen::VectorXd grad = (x.transpose() * g) / n + l2 * m.weights;
    m.weights -= lr * grad;
    m.bias -= lr * g.mean();
  }
  return m;
}

LinearModel train_hinge(const SparseRows& x, const Eigen::VectorXd& y01, double l2, std::uint32_t epochs,
                        double lr) {
  const double n = static_cast<double>(x.rows());
  const Eigen::VectorXd y = 2.0 * y01.array() - 1.0;
  LinearModel m{Eigen::VectorXd::Zero(x.cols()), 0.0};
  for (std::uint32_t e = 0; e < epochs; ++e) {
    const Eigen::VectorXd margin = y.array() * ((x * m.weights).array() + m.bias);
    const Eigen::VectorXd active = (margin.array() < 1.0).cast<double>() * y.array();
    const Eigen::VectorXd grad = -(x.transpose() * active) / n + l2 * m.weights;
    const double step = lr / std::sqrt(1.0 + e / 10.0);
    m.weights -= step * grad;
    m.bias += step * active.mean();
  }
  return m;
}

LinearModel train_complement_nb(const SparseRows& x, const Eigen::VectorXd& y, double alpha) {
  const Eigen::VectorXd mal = x.transpose() * y;
  const Eigen::VectorXd ben = x.transpose() * (Eigen::VectorXd::Ones(y.size()) - y);
  const double v = static_cast<double>(x.cols());
  const Eigen::ArrayXd theta_mal = (mal.array() + alpha) / (alpha * v + mal.sum());
  const Eigen::ArrayXd theta_ben = (ben.array() + alpha) / (alpha * v + ben.sum());
  return {(theta_mal.log() - theta_ben.log()).matrix(), 0.0};
}

LinearModel train_base(BaseLearner kind, const SparseRows& x, const Eigen::VectorXd& y, const TfidfHyper& h) {
  switch (kind) {
    case BaseLearner::Logistic: return train_logistic(x, y, h.l2, h.epochs, h.lr);
    case BaseLearner::Hinge: return train_hinge(x, y, h.l2, h.epochs, h.lr);
    case BaseLearner::ComplementNB: return train_complement_nb(x, y, h.nb_alpha);
  }
  return {};
}

SparseRows stack_rows(const std::vector<Eigen::SparseVector<double>>& rows, const std::vector<std::size_t>& pick,
                      Eigen::Index cols) {
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t r = 0; r < pick.size(); ++r) {
    for (Eigen::SparseVector<double>::InnerIterator it(rows[pick[r]]); it; ++it) {
      triplets.emplace_back(static_cast<Eigen::Index>(r), it.index(), it.value());
    }
  }
  SparseRows m(static_cast<Eigen::Index>(pick.size()), cols);
  m.setFromTriplets(triplets.begin(), triplets.end());
  return m;
}

Eigen::VectorXd select(const Eigen::VectorXd& v, const std::vector<std::size_t>& pick) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(pick.size()));
  for (std::size_t i = 0; i < pick.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(pick[i])];
  return out;
}

}  // namespace

Eigen::SparseVector<double> TfidfStackingModel::featurize(std::string_view text) const {
  return tfidf_row(count_terms(text, hyper.ngram_min, hyper.ngram_max), vocabulary, idf);
}

Eigen::VectorXd TfidfStackingModel::base_outputs(const Eigen::SparseVector<double>& x) const {
  Eigen::VectorXd z(static_cast<Eigen::Index>(base_learners.size()));
  for (std::size_t b = 0; b < base_learners.size(); ++b) {
    z[static_cast<Eigen::Index>(b)] = x.dot(base_learners[b].weights) + base_learners[b].bias;
  }
  return z;
}

double TfidfStackingModel::predict_proba(std::string_view text) const {
  const Eigen::VectorXd z = (base_outputs(featurize(text)) - meta_offsets).cwiseQuotient(meta_scales);
  return sigmoid(z.dot(meta_learner.weights) + meta_learner.bias);
}

TfidfStackingModel train_tfidf_stacking(const std::vector<SourceFile>& files, const std::vector<Label>& labels,
                                        const TfidfHyper& hyper, std::uint64_t seed) {
  if (files.size() != labels.size()) throw Error(ErrorKind::Precondition, "files and labels differ in length");
  if (hyper.min_df == 0) throw Error(ErrorKind::Precondition, "min_df must be >= 1");
  if (hyper.base_learners.empty()) throw Error(ErrorKind::Precondition, "no base learners configured");
  const bool has_mal = std::count(labels.begin(), labels.end(), Label::Malicious) > 0;
  const bool has_ben = std::count(labels.begin(), labels.end(), Label::Benign) > 0;
  if (!has_mal || !has_ben) throw Error(ErrorKind::DegenerateData, "training data contains a single label");

  // Canonical document order makes the floating-point sums order-independent.
  std::vector<std::size_t> order(files.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(files[a].package_id, files[a].relative_path, files[a].content, labels[a]) <
           std::tie(files[b].package_id, files[b].relative_path, files[b].content, labels[b]);
  });

  const std::size_t n = files.size();
  std::vector<TermCounts> docs;
  docs.reserve(n);
  std::map<std::string, std::uint32_t> df;
  for (auto i : order) {
    docs.push_back(count_terms(files[i].content, hyper.ngram_min, hyper.ngram_max));
    for (const auto& [term, _] : docs.back()) ++df[term];
  }

  TfidfStackingModel model;
  model.hyper = hyper;
  model.train_seed = seed;
  model.learner_kinds = hyper.base_learners;
  std::vector<double> idf_values;
  for (const auto& [term, count] : df) {
    if (count < hyper.min_df) continue;
    model.vocabulary.emplace(term, static_cast<std::uint32_t>(idf_values.size()));
    idf_values.push_back(smoothed_idf(n, count));
  }
  if (model.vocabulary.empty()) throw Error(ErrorKind::Precondition, "vocabulary is empty at this min_df");
  model.idf = Eigen::Map<Eigen::VectorXd>(idf_values.data(), static_cast<Eigen::Index>(idf_values.size()));
  const auto v = model.idf.size();

  std::vector<Eigen::SparseVector<double>> rows;
  rows.reserve(n);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r) {
    rows.push_back(tfidf_row(docs[r], model.vocabulary, model.idf));
    y[static_cast<Eigen::Index>(r)] = labels[order[r]] == Label::Malicious ? 1.0 : 0.0;
  }

  // Package-grouped folds.
  std::vector<std::string> packages;
  for (auto i : order) packages.push_back(files[i].package_id);
  std::sort(packages.begin(), packages.end());
  packages.erase(std::unique(packages.begin(), packages.end()), packages.end());
  seeded_shuffle(packages, seed);
  const std::size_t k = std::min<std::size_t>(std::max<std::uint32_t>(hyper.folds, 2), packages.size());
  std::map<std::string, std::size_t> fold_of;
  for (std::size_t p = 0; p < packages.size(); ++p) fold_of[packages[p]] = p % std::max<std::size_t>(k, 1);

  const auto b_count = static_cast<Eigen::Index>(hyper.base_learners.size());
  Eigen::MatrixXd oof(static_cast<Eigen::Index>(n), b_count);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const SparseRows x_all = stack_rows(rows, all, v);

  if (k < 2) {
    // A single package cannot be split; fall back to in-sample base outputs.
    for (Eigen::Index b = 0; b < b_count; ++b) {
      const auto m = train_base(hyper.base_learners[static_cast<std::size_t>(b)], x_all, y, hyper);
      oof.col(b) = (x_all * m.weights).array() + m.bias;
    }
  } else {
    for (std::size_t f = 0; f < k; ++f) {
      std::vector<std::size_t> train_idx, hold_idx;
      for (std::size_t r = 0; r < n; ++r) {
        (fold_of[files[order[r]].package_id] == f ? hold_idx : train_idx).push_back(r);
      }
      if (hold_idx.empty()) continue;
      const SparseRows xt = stack_rows(rows, train_idx, v);
      const SparseRows xh = stack_rows(rows, hold_idx, v);
      const Eigen::VectorXd yt = select(y, train_idx);
      for (Eigen::Index b = 0; b < b_count; ++b) {
        const auto m = train_base(hyper.base_learners[static_cast<std::size_t>(b)], xt, yt, hyper);
        const Eigen::VectorXd out = (xh * m.weights).array() + m.bias;
        for (std::size_t i = 0; i < hold_idx.size(); ++i) {
          oof(static_cast<Eigen::Index>(hold_idx[i]), b) = out[static_cast<Eigen::Index>(i)];
        }
      }
    }
  }

  for (auto kind : hyper.base_learners) model.base_learners.push_back(train_base(kind, x_all, y, hyper));

  model.meta_offsets = oof.colwise().mean().transpose();
  model.meta_scales.resize(b_count);
  for (Eigen::Index b = 0; b < b_count; ++b) {
    const double sd = std::sqrt((oof.col(b).array() - model.meta_offsets[b]).square().mean());
    model.meta_scales[b] = sd > 1e-12 ? sd : 1.0;
  }
  const Eigen::MatrixXd z =
      (oof.rowwise() - model.meta_offsets.transpose()).array().rowwise() / model.meta_scales.transpose().array();
  LinearModel meta{Eigen::VectorXd::Zero(b_count), 0.0};
  for (std::uint32_t e = 0; e < hyper.meta_epochs; ++e) {
    const Eigen::VectorXd g = sigmoid((z * meta.weights).array() + meta.bias) - y;
    meta.weights -= hyper.meta_lr * ((z.transpose() * g) / static_cast<double>(n) + hyper.l2 * meta.weights);
    meta.bias -= hyper.meta_lr * g.mean();
  }
  model.meta_learner = std::move(meta);
  return model;
}

// Container layout: "PKSM" | u16 version | u32 header length | header JSON |
// f64 idf[V] | per learner: f64 weights[V], f64 bias |
// f64 meta weights[B], f64 meta bias, f64 offsets[B], f64 scales[B].

namespace {

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(Bytes& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_vec(Bytes& out, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v[i]);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint(8)); }
  Eigen::VectorXd vec(std::size_t n) {
    need(n * 8);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = f64();
    return v;
  }
  std::string_view text(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorKind::Format, "model file truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Bytes TfidfStackingModel::serialize() const {
  std::vector<std::string> terms(vocabulary.size());
  for (const auto& [term, col] : vocabulary) terms.at(col) = term;
  Json learners = Json::array();
  for (auto l : learner_kinds) learners.push_back(std::string(to_string(l)));
  const Json header = {{"format", "PKSM"},
                       {"hyper", to_json(hyper)},
                       {"train_seed", train_seed},
                       {"learners", learners},
                       {"vocabulary", terms}};
  const std::string header_text = canonical_json(header);

  Bytes out{'P', 'K', 'S', 'M'};
  put_u16(out, kPksmVersion);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.insert(out.end(), header_text.begin(), header_text.end());
  put_vec(out, idf);
  for (const auto& m : base_learners) {
    put_vec(out, m.weights);
    put_f64(out, m.bias);
  }
  put_vec(out, meta_learner.weights);
  put_f64(out, meta_learner.bias);
  put_vec(out, meta_offsets);
  put_vec(out, meta_scales);
  return out;
}

TfidfStackingModel TfidfStackingModel::deserialize(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (in.text(4) != "PKSM") throw Error(ErrorKind::Format, "not a PKSM model file");
  const auto version = in.uint(2);
  if (version != kPksmVersion) {
    throw Error(ErrorKind::Format, "unsupported PKSM version " + std::to_string(version));
  }
  const auto header_len = in.uint(4);
  const Json header = Json::parse(in.text(header_len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw Error(ErrorKind::Format, "corrupt PKSM header");

  TfidfStackingModel m;
  try {
    m.hyper = tfidf_hyper_from_json(header.at("hyper"));
    m.train_seed = header.at("train_seed").get<std::uint64_t>();
    for (const auto& name : header.at("learners")) m.learner_kinds.push_back(parse_learner(name.get<std::string>()));
    const auto& terms = header.at("vocabulary");
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (!m.vocabulary.emplace(terms[i].get<std::string>(), static_cast<std::uint32_t>(i)).second) {
        throw Error(ErrorKind::Format, "duplicate vocabulary term");
      }
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::Format, std::string("corrupt PKSM header: ") + e.what());
  }
  const std::size_t v = m.vocabulary.size();
  const std::size_t b = m.learner_kinds.size();
  m.idf = in.vec(v);
  for (std::size_t i = 0; i < b; ++i) {
    LinearModel lm;
    lm.weights = in.vec(v);
    lm.bias = in.f64();
    m.base_learners.push_back(std::move(lm));
  }
  m.meta_learner.weights = in.vec(b);
  m.meta_learner.bias = in.f64();
  m.meta_offsets = in.vec(b);
  m.meta_scales = in.vec(b);
  if (in.remaining() != 0) throw Error(ErrorKind::Format, "trailing bytes after PKSM payload");
  return m;
}

void TfidfStackingModel::save(const std::string& path) const {
  const auto bytes = serialize();
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

TfidfStackingModel TfidfStackingModel::load(const std::string& path) {
  return deserialize(read_file_bytes(path));
}

TfidfClassifier::TfidfClassifier(std::shared_ptr<const TfidfStackingModel> model, double threshold)
    : Classifier("tfidf_stacking", ClassifierKind::TfidfStacking, threshold), model_(std::move(model)) {
  if (!model_) throw Error(ErrorKind::Precondition, "tfidf classifier needs a model");
}

WindowScore TfidfClassifier::score_window(const SourceFile&, std::string_view text) const {
  WindowScore out;
  out.score = model_->predict_proba(text);
  return out;
}

// ---------------------------------------------------------------------------
// Remote LLM
// ---------------------------------------------------------------------------

LlmRemoteClassifier::LlmRemoteClassifier(std::shared_ptr<LlmGateway> gateway, double threshold,
                                         std::uint64_t window_tokens)
    : Classifier("llm_remote", ClassifierKind::LlmRemote, threshold),
      gateway_(std::move(gateway)),
      window_tokens_(window_tokens) {
  if (!gateway_) throw Error(ErrorKind::Precondition, "llm classifier needs a gateway");
}

WindowScore LlmRemoteClassifier::score_window(const SourceFile& file, std::string_view text) const {
  const auto messages = render_prompt(prompt_template(TemplateId::Rationale),
                                      {{"path", file.relative_path}, {"code", std::string(text)}});
  try {
    const auto reply = gateway_->complete(messages);
    const auto parsed = parse_json_decision(reply.text, {"decision", "rationale"});
    WindowScore out;
    const auto score = parsed.object.find("score");
    if (score != parsed.object.end() && score->is_number() && score->get<double>() >= 0.0 &&
        score->get<double>() <= 1.0) {
      out.score = score->get<double>();
    } else {
      out.score = parsed.decision == Label::Malicious ? 1.0 : 0.0;
    }
    const auto& rationale = parsed.object["rationale"];
    out.rationale = rationale.is_string() ? rationale.get<std::string>() : rationale.dump();
    out.trace = {{"transcript", to_json(reply.transcript)},
                 {"usage",
                  {{"prompt_tokens", reply.usage.prompt_tokens},
                   {"completion_tokens", reply.usage.completion_tokens},
                   {"estimated", reply.usage.estimated}}},
                 {"repaired", parsed.repaired}};
    return out;
  } catch (const Error& e) {
    throw Error(ErrorKind::ClassificationUnavailable,
                file.relative_path + ": " + std::string(to_string(e.kind())) + ": " + e.detail());
  }
}

// ---------------------------------------------------------------------------
// Manifest evaluation
// ---------------------------------------------------------------------------

Json to_json(const EvalRow& row) {
  Json j = {{"id", row.id}, {"package_id", row.package_id}, {"truth", std::string(to_string(row.truth))}};
  if (row.verdict) j["verdict"] = to_json(*row.verdict, false);
  if (row.error) j["error"] = *row.error;
  return j;
}

std::vector<EvalRow> evaluate_backend_on_manifest(const Classifier& classifier, const DatasetManifest& manifest) {
  std::vector<EvalRow> rows;
  rows.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries) {
    EvalRow row{entry.id, entry.package_id, entry.label, std::nullopt, std::nullopt};
    try {
      row.verdict = classify_file(classifier, manifest.load_entry(entry));
    } catch (const Error& e) {
      row.error = std::string(to_string(e.kind())) + ": " + e.detail();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace pkgsentry
