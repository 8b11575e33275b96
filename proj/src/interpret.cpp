#include "saetm/interpret.hpp"

#include "saetm/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace saetm::interpret {

using json = nlohmann::ordered_json;

BowCorpus BowCorpus::build(int vocab_size, std::vector<BowDoc> docs, double smoothing) {
  require(vocab_size > 0, ErrorCode::InvalidArgument, "vocabulary must be non-empty");
  require(smoothing > 0.0, ErrorCode::InvalidArgument, "smoothing pseudo-count must be > 0");
  BowCorpus c;
  c.vocab_size = vocab_size;
  c.df = VectorXd::Zero(vocab_size);
  VectorXd totals = VectorXd::Constant(vocab_size, smoothing);
  for (auto& doc : docs) {
    std::map<int, int> counts;
    for (int w : doc.tokens) {
      require(w >= 0 && w < vocab_size, ErrorCode::VocabRange,
              "document '" + doc.id + "' references word_id " + std::to_string(w) +
                  " outside vocabulary of size " + std::to_string(vocab_size));
      ++counts[w];
    }
    doc.counts.assign(counts.begin(), counts.end());
    for (const auto& [w, n] : doc.counts) {
      c.df[w] += 1.0;
      totals[w] += n;
    }
  }
  c.p0 = totals / totals.sum();
  c.docs = std::move(docs);
  return c;
}

VectorXd idf_weights(const BowCorpus& corpus) {
  const double n = corpus.n_docs();
  VectorXd raw = VectorXd::Zero(corpus.vocab_size);
  double top = 0.0;
  for (int w = 0; w < corpus.vocab_size; ++w) {
    if (corpus.df[w] < 1.0) continue;
    raw[w] = std::log(n / corpus.df[w]);
    top = std::max(top, raw[w]);
  }
  if (top <= 0.0) return VectorXd::Zero(corpus.vocab_size);
  return raw / top;
}

double idf_weight(int word_id, const BowCorpus& corpus) {
  require(word_id >= 0 && word_id < corpus.vocab_size, ErrorCode::VocabRange, "word id out of range");
  require(corpus.df[word_id] >= 1.0, ErrorCode::DomainError,
          "word " + std::to_string(word_id) + " occurs in no document");
  return idf_weights(corpus)[word_id];
}

std::vector<int> EmissionMatrix::active_features() const {
  std::vector<int> out;
  for (std::size_t k = 0; k < active_mask.size(); ++k)
    if (active_mask[k]) out.push_back(static_cast<int>(k));
  return out;
}

void InterpretConfig::validate() const {
  require((pi > 0.0 || (allow_zero_pi && pi == 0.0)) && pi < 1.0, ErrorCode::InvalidArgument,
          "pi must lie in (0, 1)");
  require(steps >= 1, ErrorCode::InvalidArgument, "steps must be >= 1");
  require(batch_size >= 0, ErrorCode::InvalidArgument, "batch_size must be >= 0");
  require(learning_rate > 0.0, ErrorCode::InvalidArgument, "learning_rate must be > 0");
}

double doc_likelihood(const BowDoc& doc, const VectorXd& theta, const MatrixXd& b, const VectorXd& p0,
                      double pi, const VectorXd& word_weights) {
  require(theta.size() == b.rows(), ErrorCode::DimensionMismatch, "theta must have K entries");
  double total = 0.0;
  for (const auto& [w, count] : doc.counts) {
    const double mix = pi * p0[w] + (1.0 - pi) * b.col(w).dot(theta);
    const double term = count * word_weights[w] * std::log(mix);
    require(std::isfinite(term), ErrorCode::NonFinite,
            "zero mixture probability for word " + std::to_string(w) + " in document '" + doc.id + "'");
    total += term;
  }
  return total;
}

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    const double top = logits.row(k).maxCoeff();
    out.row(k) = (logits.row(k).array() - top).exp();
    out.row(k) /= out.row(k).sum();
  }
  return out;
}

EmissionGradient emission_loss_and_gradient(const BowCorpus& corpus, const SparseRows<double>& theta,
                                            const MatrixXd& logits, double pi,
                                            const VectorXd& word_weights,
                                            const std::vector<int>& doc_indices) {
  const MatrixXd b = softmax_rows(logits);
  MatrixXd grad_b = MatrixXd::Zero(b.rows(), b.cols());
  EmissionGradient g;
  int used = 0;
  std::vector<std::pair<Eigen::Index, double>> nz;
  for (int d : doc_indices) {
    nz.clear();
    for (SparseRows<double>::InnerIterator it(theta, d); it; ++it)
      if (it.value() > 0.0) nz.emplace_back(it.col(), it.value());
    if (nz.empty()) continue;
    ++used;
    for (const auto& [w, count] : corpus.docs[static_cast<std::size_t>(d)].counts) {
      const double weight = count * word_weights[w];
      if (weight == 0.0) continue;
      double topical = 0.0;
      for (const auto& [k, t] : nz) topical += b(k, w) * t;
      const double mix = pi * corpus.p0[w] + (1.0 - pi) * topical;
      g.loss -= weight * std::log(mix);
      const double scale = weight * (1.0 - pi) / mix;
      for (const auto& [k, t] : nz) grad_b(k, w) -= scale * t;
    }
  }
  if (used > 0) {
    g.loss /= used;
    grad_b /= used;
  }
  // Softmax backward per row: dL/dz = b * (g - <b, g>).
  g.logits.resize(b.rows(), b.cols());
  for (Eigen::Index k = 0; k < b.rows(); ++k) {
    const double inner = b.row(k).dot(grad_b.row(k));
    g.logits.row(k) = b.row(k).array() * (grad_b.row(k).array() - inner);
  }
  return g;
}

EmissionMatrix learn_emissions(const BowCorpus& corpus, const SparseRows<double>& theta,
                               const InterpretConfig& cfg, InterpretReport* report) {
  cfg.validate();
  require(theta.rows() == corpus.n_docs(), ErrorCode::Alignment,
          "activation rows (" + std::to_string(theta.rows()) + ") differ from corpus documents (" +
              std::to_string(corpus.n_docs()) + ")");
  const auto k_features = theta.cols();
  const auto vocab = corpus.vocab_size;
  InterpretReport local;
  InterpretReport& rep = report ? *report : local;

  EmissionMatrix out;
  out.feature_prior = VectorXd::Zero(k_features);
  out.active_mask.assign(static_cast<std::size_t>(k_features), false);
  std::vector<int> usable;
  for (int d = 0; d < corpus.n_docs(); ++d) {
    bool any = false;
    for (SparseRows<double>::InnerIterator it(theta, d); it; ++it) {
      if (it.value() <= 0.0) continue;
      any = true;
      out.feature_prior[it.col()] += it.value();
      out.active_mask[static_cast<std::size_t>(it.col())] = true;
    }
    if (any) usable.push_back(d);
  }
  rep.skipped_docs = corpus.n_docs() - static_cast<int>(usable.size());
  require(!usable.empty(), ErrorCode::DomainError, "no document has a nonzero activation");
  out.feature_prior /= static_cast<double>(usable.size());
  const auto active = std::count(out.active_mask.begin(), out.active_mask.end(), true);
  if (2 * active < k_features)
    rep.warnings.push_back(std::to_string(k_features - active) + " of " + std::to_string(k_features) +
                           " features are never active");

  const VectorXd weights = cfg.idf_weighting ? idf_weights(corpus) : VectorXd::Ones(vocab);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.init_noise);
  MatrixXd logits(k_features, vocab);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = noise(rng);

  MatrixXd m = MatrixXd::Zero(k_features, vocab);
  MatrixXd v = MatrixXd::Zero(k_features, vocab);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const bool full_batch = cfg.batch_size == 0 || cfg.batch_size >= static_cast<int>(usable.size());
  std::vector<int> order = usable;
  std::size_t cursor = order.size();
  std::vector<int> batch;
  for (int step = 1; step <= cfg.steps; ++step) {
    if (full_batch) {
      batch = usable;
    } else {
      batch.clear();
      while (static_cast<int>(batch.size()) < cfg.batch_size) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        batch.push_back(order[cursor++]);
      }
    }
    const EmissionGradient g = emission_loss_and_gradient(corpus, theta, logits, cfg.pi, weights, batch);
    require(std::isfinite(g.loss), ErrorCode::NonFinite,
            "non-finite emission loss at step " + std::to_string(step));
    rep.losses.push_back(g.loss);
    m = kBeta1 * m + (1.0 - kBeta1) * g.logits;
    v = kBeta2 * v + (1.0 - kBeta2) * g.logits.cwiseProduct(g.logits);
    const double c1 = 1.0 - std::pow(kBeta1, step);
    const double c2 = 1.0 - std::pow(kBeta2, step);
    logits.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
  }
  out.b = softmax_rows(logits);
  return out;
}

std::vector<std::pair<int, double>> top_words(const Eigen::Ref<const VectorXd>& row, int n) {
  require(n >= 0 && n <= row.size(), ErrorCode::InvalidArgument, "n must lie in [0, V]");
  std::vector<int> ids(static_cast<std::size_t>(row.size()));
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + n, ids.end(), [&](int a, int b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  std::vector<std::pair<int, double>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.emplace_back(ids[static_cast<std::size_t>(i)], row[ids[static_cast<std::size_t>(i)]]);
  return out;
}

std::vector<BowDoc> read_corpus_jsonl(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<BowDoc> docs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::CorpusParse, where + ": " + e.what());
    }
    require(j.is_object() && j.contains("id") && j["id"].is_string(), ErrorCode::CorpusParse,
            where + ": missing string field \"id\"");
    require(j.contains("tokens") && j["tokens"].is_array(), ErrorCode::CorpusParse,
            where + ": missing array field \"tokens\"");
    BowDoc doc;
    doc.id = j["id"].get<std::string>();
    for (const auto& t : j["tokens"]) {
      require(t.is_number_integer(), ErrorCode::CorpusParse, where + ": tokens must be integers");
      const auto w = t.get<long long>();
      require(w >= 0 && w <= std::numeric_limits<int>::max(), ErrorCode::VocabRange,
              where + ": word id " + std::to_string(w) + " out of range");
      doc.tokens.push_back(static_cast<int>(w));
    }
    if (j.contains("group") && !j["group"].is_null()) {
      require(j["group"].is_string(), ErrorCode::CorpusParse, where + ": \"group\" must be a string");
      doc.group = j["group"].get<std::string>();
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::string corpus_jsonl(const std::vector<BowDoc>& docs) {
  std::string out;
  for (const auto& doc : docs) {
    json j;
    j["id"] = doc.id;
    j["tokens"] = doc.tokens;
    if (doc.group) j["group"] = *doc.group;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::string> read_vocab(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.push_back(line);
  }
  return vocab;
}

std::string vocab_text(const std::vector<std::string>& vocab) {
  std::string out;
  for (const auto& token : vocab) {
    out += token;
    out += '\n';
  }
  return out;
}

namespace {
constexpr std::string_view kEmissionMagic = "EMIS1";
}

std::vector<unsigned char> emission_bytes(const EmissionMatrix& e) {
  io::ByteWriter w;
  w.magic(kEmissionMagic);
  w.put(static_cast<std::uint32_t>(e.b.rows()));
  w.put(static_cast<std::uint32_t>(e.b.cols()));
  w.put_f32_block(e.b);
  w.put_f32_block(e.feature_prior.transpose());
  for (bool active : e.active_mask) w.put(static_cast<std::uint8_t>(active ? 1 : 0));
  return w.bytes();
}

EmissionMatrix parse_emissions(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  require(r.magic(kEmissionMagic), ErrorCode::Checkpoint, "bad emission magic");
  const auto k = r.get<std::uint32_t>();
  const auto v = r.get<std::uint32_t>();
  const std::size_t expected = 4ull * k * v + 4ull * k + k;
  require(r.remaining() == expected, ErrorCode::Checkpoint,
          "emission payload is " + std::to_string(r.remaining()) + " bytes, expected " +
              std::to_string(expected));
  EmissionMatrix e;
  e.b.resize(k, v);
  e.feature_prior.resize(k);
  r.get_f32_block(e.b);
  r.get_f32_block(e.feature_prior);
  e.active_mask.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) e.active_mask[i] = r.get<std::uint8_t>() != 0;
  // Undo float32 rounding so rows are stochastic to double precision.
  for (Eigen::Index i = 0; i < e.b.rows(); ++i) {
    const double s = e.b.row(i).sum();
    if (s > 0.0) e.b.row(i) /= s;
  }
  return e;
}

void save_emissions(const EmissionMatrix& e, const std::filesystem::path& path) {
  io::write_file_atomic(path, emission_bytes(e));
}

EmissionMatrix load_emissions(const std::filesystem::path& path) {
  return parse_emissions(io::read_file(path));
}

std::string emission_summary_json(const EmissionMatrix& e, const std::vector<std::string>& vocab, int n) {
  json j;
  j["k"] = e.b.rows();
  j["v"] = e.b.cols();
  json features = json::array();
  const int take = std::min<int>(n, static_cast<int>(e.b.cols()));
  for (Eigen::Index k = 0; k < e.b.rows(); ++k) {
    json f;
    f["id"] = k;
    f["active"] = static_cast<bool>(e.active_mask[static_cast<std::size_t>(k)]);
    f["prior"] = e.feature_prior[k];
    json words = json::array();
    for (const auto& [w, p] : top_words(e.b.row(k).transpose(), take)) {
      json entry;
      entry["token"] = w < static_cast<int>(vocab.size()) ? vocab[static_cast<std::size_t>(w)] : std::to_string(w);
      entry["p"] = p;
      words.push_back(entry);
    }
    f["top_words"] = words;
    features.push_back(f);
  }
  j["features"] = features;
  return j.dump(2) + "\n";
}

}  // namespace saetm::interpret
