#include "saetm/merge.hpp"

#include "saetm/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace saetm::merge {

using json = nlohmann::ordered_json;

double WordEmbeddingTable::coverage() const {
  if (covered.empty()) return 0.0;
  return static_cast<double>(std::count(covered.begin(), covered.end(), true)) /
         static_cast<double>(covered.size());
}

WordEmbeddingTable WordEmbeddingTable::load_text(const std::filesystem::path& path,
                                                 const std::vector<std::string>& vocab) {
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], static_cast<int>(i));

  std::istringstream in(io::read_text(path));
  std::string line;
  std::vector<std::pair<int, std::vector<double>>> rows;
  Eigen::Index dim = -1;
  bool first = true;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<double> values;
    std::string field;
    while (fields >> field) {
      char* end = nullptr;
      const double x = std::strtod(field.c_str(), &end);
      require(end == field.c_str() + field.size(), ErrorCode::CorpusParse,
              path.string() + ":" + std::to_string(line_no) + ": bad vector component '" + field + "'");
      values.push_back(x);
    }
    if (first) {
      first = false;
      // word2vec text header: "<count> <dim>"
      if (values.size() == 1 && token.find_first_not_of("0123456789") == std::string::npos) continue;
    }
    require(!values.empty(), ErrorCode::CorpusParse,
            path.string() + ":" + std::to_string(line_no) + ": no vector components");
    if (dim < 0) dim = static_cast<Eigen::Index>(values.size());
    require(static_cast<Eigen::Index>(values.size()) == dim, ErrorCode::DimensionMismatch,
            path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                " components");
    const auto it = index.find(token);
    if (it == index.end()) continue;
    rows.emplace_back(it->second, std::move(values));
  }
  require(dim > 0, ErrorCode::CorpusParse, path.string() + ": no embeddings");

  WordEmbeddingTable table;
  table.vectors = MatrixXd::Zero(static_cast<Eigen::Index>(vocab.size()), dim);
  table.covered.assign(vocab.size(), false);
  for (const auto& [id, values] : rows) {
    for (Eigen::Index j = 0; j < dim; ++j) table.vectors(id, j) = values[static_cast<std::size_t>(j)];
    require(table.vectors.row(id).allFinite(), ErrorCode::NonFinite, "non-finite embedding for '" +
                                                                         vocab[static_cast<std::size_t>(id)] + "'");
    table.covered[static_cast<std::size_t>(id)] = true;
  }
  return table;
}

std::string WordEmbeddingTable::to_text(const std::vector<std::string>& vocab) const {
  std::ostringstream out;
  out.precision(17);
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    if (!covered[static_cast<std::size_t>(i)]) continue;
    out << vocab[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) out << ' ' << vectors(i, j);
    out << '\n';
  }
  return out.str();
}

VectorXd top_p_truncate(const VectorXd& dist, double p) {
  require(p > 0.0 && p <= 1.0, ErrorCode::InvalidArgument, "p must lie in (0, 1]");
  if (p >= 1.0) return dist;
  std::vector<int> order(static_cast<std::size_t>(dist.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[a] > dist[b]; });
  const double total = dist.sum();
  VectorXd out = VectorXd::Zero(dist.size());
  double mass = 0.0;
  for (int w : order) {
    out[w] = dist[w];
    mass += dist[w];
    if (mass >= p * total - 1e-12) break;
  }
  return out / mass;
}

VectorXd topic_embedding(const VectorXd& row, const WordEmbeddingTable& table, double p) {
  require(row.size() == table.vocab_size(), ErrorCode::DimensionMismatch,
          "emission row and embedding table disagree on vocabulary size");
  const VectorXd truncated = top_p_truncate(row, p);
  VectorXd out = VectorXd::Zero(table.dim());
  double mass = 0.0;
  for (Eigen::Index w = 0; w < truncated.size(); ++w) {
    if (truncated[w] <= 0.0 || !table.covered[static_cast<std::size_t>(w)]) continue;
    out += truncated[w] * table.vectors.row(w).transpose();
    mass += truncated[w];
  }
  require(mass > 0.0, ErrorCode::EmptySupport, "no word in the truncated support has an embedding");
  return out / mass;
}

double partition_inertia(const MatrixXd& points, const std::vector<int>& labels, int k) {
  MatrixXd sums = MatrixXd::Zero(k, points.cols());
  VectorXd counts = VectorXd::Zero(k);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
    counts[labels[static_cast<std::size_t>(i)]] += 1.0;
  }
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    inertia += (points.row(i) - sums.row(c) / counts[c]).squaredNorm();
  }
  return inertia;
}

namespace {

MatrixXd kmeans_plus_plus(const MatrixXd& points, int k, std::mt19937_64& rng) {
  const auto m = points.rows();
  MatrixXd centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, m - 1);
  centers.row(0) = points.row(first(rng));
  VectorXd d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      chosen = m - 1;
      for (Eigen::Index i = 0; i < m; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = first(rng);
    }
    centers.row(c) = points.row(chosen);
    d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  return centers;
}

// Single-point moves that lower the exact inertia, accounting for both
// centroids shifting. Leaves no cluster empty.
void hartigan(const MatrixXd& points, int k, std::vector<int>& labels) {
  const auto m = points.rows();
  MatrixXd centers = MatrixXd::Zero(k, points.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    centers.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
    ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  for (int c = 0; c < k; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) /= counts[static_cast<std::size_t>(c)];
  bool moved = true;
  for (int pass = 0; moved && pass < 1000; ++pass) {
    moved = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      const int a = labels[static_cast<std::size_t>(i)];
      const double na = counts[static_cast<std::size_t>(a)];
      if (na <= 1) continue;
      const double leave = na / (na - 1.0) * (points.row(i) - centers.row(a)).squaredNorm();
      int best = a;
      double best_gain = 1e-12 * std::max(1.0, leave);
      for (int b = 0; b < k; ++b) {
        if (b == a) continue;
        const double nb = counts[static_cast<std::size_t>(b)];
        const double join = nb / (nb + 1.0) * (points.row(i) - centers.row(b)).squaredNorm();
        if (leave - join > best_gain) {
          best_gain = leave - join;
          best = b;
        }
      }
      if (best == a) continue;
      const double nb = counts[static_cast<std::size_t>(best)];
      centers.row(a) = (centers.row(a) * na - points.row(i)) / (na - 1.0);
      centers.row(best) = (centers.row(best) * nb + points.row(i)) / (nb + 1.0);
      --counts[static_cast<std::size_t>(a)];
      ++counts[static_cast<std::size_t>(best)];
      labels[static_cast<std::size_t>(i)] = best;
      moved = true;
    }
  }
}

KMeansResult lloyd(const MatrixXd& points, MatrixXd centers, const KMeansOptions& opts) {
  const auto m = points.rows();
  const auto k = static_cast<int>(centers.rows());
  KMeansResult r;
  r.labels.assign(static_cast<std::size_t>(m), 0);
  VectorXd dist(m);
  double previous = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    r.iterations = iter + 1;
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dd = (points.row(i) - centers.row(c)).squaredNorm();
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      r.labels[static_cast<std::size_t>(i)] = best;
      dist[i] = best_d;
      inertia += best_d;
    }
    r.inertia_history.push_back(inertia);
    r.inertia = inertia;

    MatrixXd sums = MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < m; ++i) {
      sums.row(r.labels[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
    }
    bool repaired = false;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      // Empty cluster: take over the point farthest from its centroid.
      Eigen::Index far = 0;
      dist.maxCoeff(&far);
      const int old = r.labels[static_cast<std::size_t>(far)];
      if (counts[static_cast<std::size_t>(old)] <= 1) continue;
      sums.row(old) -= points.row(far);
      --counts[static_cast<std::size_t>(old)];
      sums.row(c) = points.row(far);
      counts[static_cast<std::size_t>(c)] = 1;
      r.labels[static_cast<std::size_t>(far)] = c;
      dist[far] = 0.0;
      repaired = true;
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];

    const bool converged = !repaired && std::isfinite(previous) &&
                           (inertia == 0.0 || (previous - inertia) <= opts.tolerance * previous);
    previous = inertia;
    if (converged) break;
  }
  if (opts.hartigan_refine) hartigan(points, k, r.labels);
  // Centroids are the means of the final labels; report the inertia of that pairing.
  r.centroids = MatrixXd::Zero(k, points.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    r.centroids.row(r.labels[static_cast<std::size_t>(i)]) += points.row(i);
    ++counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
  }
  for (int c = 0; c < k; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) r.centroids.row(c) /= counts[static_cast<std::size_t>(c)];
  r.inertia = partition_inertia(points, r.labels, k);
  if (opts.hartigan_refine) r.inertia_history.push_back(r.inertia);
  return r;
}

}  // namespace

KMeansResult kmeans(const MatrixXd& points, int k, std::uint64_t seed, const KMeansOptions& opts) {
  require(k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
  require(k <= points.rows(), ErrorCode::InvalidArgument,
          "k (" + std::to_string(k) + ") exceeds number of points (" + std::to_string(points.rows()) + ")");
  require(opts.restarts >= 1, ErrorCode::InvalidArgument, "restarts must be >= 1");
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int run = 0; run < opts.restarts; ++run) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(run));
    KMeansResult r = lloyd(points, kmeans_plus_plus(points, k, rng), opts);
    if (r.inertia < best.inertia) best = std::move(r);
  }
  return best;
}

TopicModel merge_topics(const interpret::EmissionMatrix& emissions, const std::vector<int>& features,
                        const std::vector<int>& labels, int k_prime) {
  require(features.size() == labels.size(), ErrorCode::DimensionMismatch,
          "labels must align with retained features");
  require(k_prime >= 1, ErrorCode::InvalidArgument, "k_prime must be >= 1");
  TopicModel model;
  model.k_prime = k_prime;
  model.topics.resize(static_cast<std::size_t>(k_prime));
  for (std::size_t i = 0; i < features.size(); ++i) {
    const int k = features[i];
    require(k >= 0 && k < emissions.n_features(), ErrorCode::InvalidArgument, "feature id out of range");
    require(labels[i] >= 0 && labels[i] < k_prime, ErrorCode::InvalidArgument, "label out of range");
    model.topics[static_cast<std::size_t>(labels[i])].members.push_back(k);
  }
  for (int t = 0; t < k_prime; ++t) {
    Topic& topic = model.topics[static_cast<std::size_t>(t)];
    require(!topic.members.empty(), ErrorCode::InvalidArgument, "topic " + std::to_string(t) + " has no members");
    double total = 0.0;
    for (int k : topic.members) total += emissions.feature_prior[k];
    topic.word_dist = VectorXd::Zero(emissions.vocab_size());
    if (topic.members.size() == 1) {
      // Singleton clusters copy the row, so K' = K is exactly the identity.
      topic.word_dist = emissions.b.row(topic.members.front()).transpose();
    } else if (total > 0.0) {
      for (int k : topic.members)
        topic.word_dist += emissions.feature_prior[k] * emissions.b.row(k).transpose();
      topic.word_dist /= total;
    } else {
      model.warnings.push_back("topic " + std::to_string(t) + " has zero prior mass; using uniform weights");
      for (int k : topic.members) topic.word_dist += emissions.b.row(k).transpose();
      topic.word_dist /= static_cast<double>(topic.members.size());
    }
    topic.prevalence = total;
  }
  return model;
}

TopicMerger::TopicMerger(const interpret::EmissionMatrix& emissions, const WordEmbeddingTable& table,
                         std::vector<int> features, double top_p)
    : emissions_(emissions), features_(std::move(features)) {
  embeddings_.resize(static_cast<Eigen::Index>(features_.size()), table.dim());
  for (std::size_t i = 0; i < features_.size(); ++i)
    embeddings_.row(static_cast<Eigen::Index>(i)) =
        topic_embedding(emissions.b.row(features_[i]).transpose(), table, top_p).transpose();
}

TopicMerger::TopicMerger(const interpret::EmissionMatrix& emissions, const MatrixXd& directions,
                         std::vector<int> features)
    : emissions_(emissions), features_(std::move(features)) {
  require(directions.rows() == emissions.n_features(), ErrorCode::DimensionMismatch,
          "decoder directions must have one row per feature");
  embeddings_.resize(static_cast<Eigen::Index>(features_.size()), directions.cols());
  for (std::size_t i = 0; i < features_.size(); ++i)
    embeddings_.row(static_cast<Eigen::Index>(i)) = directions.row(features_[i]).normalized();
}

TopicMerger::TopicMerger(Precomputed, const interpret::EmissionMatrix& emissions, MatrixXd embeddings,
                         std::vector<int> features)
    : emissions_(emissions), features_(std::move(features)), embeddings_(std::move(embeddings)) {
  require(embeddings_.rows() == static_cast<Eigen::Index>(features_.size()), ErrorCode::DimensionMismatch,
          "one embedding row per retained feature required");
}

TopicMerger TopicMerger::from_embeddings(const interpret::EmissionMatrix& emissions, MatrixXd embeddings,
                                         std::vector<int> features) {
  return TopicMerger(Precomputed{}, emissions, std::move(embeddings), std::move(features));
}

TopicModel TopicMerger::remerge(int k_prime, std::uint64_t seed, const KMeansOptions& opts) const {
  require(k_prime <= static_cast<int>(features_.size()), ErrorCode::InvalidArgument,
          "k_prime (" + std::to_string(k_prime) + ") exceeds retained features (" +
              std::to_string(features_.size()) + ")");
  const KMeansResult clusters = kmeans(embeddings_, k_prime, seed, opts);
  TopicModel model = merge_topics(emissions_, features_, clusters.labels, k_prime);
  model.seed = seed;
  model.emission_hash = emission_hash(emissions_);
  return model;
}

std::string emission_hash(const interpret::EmissionMatrix& emissions) {
  return io::sha256_hex(interpret::emission_bytes(emissions));
}

std::string topic_model_json(const TopicModel& model, const std::vector<std::string>& vocab, int top_n) {
  json j;
  j["k_prime"] = model.k_prime;
  j["seed"] = model.seed;
  j["emission_hash"] = model.emission_hash;
  json topics = json::array();
  for (std::size_t t = 0; t < model.topics.size(); ++t) {
    const Topic& topic = model.topics[t];
    json entry;
    entry["id"] = t;
    entry["prevalence"] = topic.prevalence;
    entry["members"] = topic.members;
    json words = json::array();
    const int take = std::min<int>(top_n, static_cast<int>(topic.word_dist.size()));
    for (const auto& [w, p] : interpret::top_words(topic.word_dist, take)) {
      json word;
      word["token"] = w < static_cast<int>(vocab.size()) ? vocab[static_cast<std::size_t>(w)] : std::to_string(w);
      word["p"] = p;
      words.push_back(word);
    }
    entry["top_words"] = words;
    topics.push_back(entry);
  }
  j["topics"] = topics;
  return j.dump(2) + "\n";
}

std::vector<TopicSummary> read_topic_json(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorpusParse, path.string() + ": " + e.what());
  }
  require(j.contains("topics") && j["topics"].is_array(), ErrorCode::CorpusParse,
          path.string() + ": missing \"topics\" array");
  std::vector<TopicSummary> out;
  for (const auto& t : j["topics"]) {
    TopicSummary s;
    s.id = t.at("id").get<int>();
    s.prevalence = t.at("prevalence").get<double>();
    s.members = t.at("members").get<std::vector<int>>();
    for (const auto& w : t.at("top_words")) s.top_tokens.push_back(w.at("token").get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace saetm::merge
