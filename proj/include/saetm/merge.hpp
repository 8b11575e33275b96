#pragma once

// Topic merging: feature embeddings from emission rows (or decoder rows),
// k-means over them, and prior-weighted averaging of emission rows per cluster.

#include "saetm/common.hpp"
#include "saetm/interpret.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace saetm::merge {

struct WordEmbeddingTable {
  MatrixXd vectors;            // V x d_w, zero rows where not covered
  std::vector<bool> covered;

  Eigen::Index vocab_size() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
  double coverage() const;

  /// Reads "token v1 ... v_d" lines; tokens absent from `vocab` are ignored.
  /// An optional leading "count dim" header line (word2vec text) is skipped.
  static WordEmbeddingTable load_text(const std::filesystem::path& path,
                                      const std::vector<std::string>& vocab);
  std::string to_text(const std::vector<std::string>& vocab) const;
};

/// Smallest highest-probability prefix whose mass reaches p, renormalized.
/// Ties at the cut go to the lower word id.
VectorXd top_p_truncate(const VectorXd& dist, double p);

/// sum_i B_ki w_i over the top-p support, uncovered words dropped and the
/// remaining mass renormalized. Throws E_EMPTY_SUPPORT when nothing is covered.
VectorXd topic_embedding(const VectorXd& row, const WordEmbeddingTable& table, double p = 0.9);

struct KMeansOptions {
  int max_iterations = 300;
  double tolerance = 1e-6;  // relative inertia change
  int restarts = 10;        // independent k-means++ seeds; best inertia wins
  bool hartigan_refine = true;  // single-point improving moves after Lloyd converges
};

struct KMeansResult {
  std::vector<int> labels;
  MatrixXd centroids;
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_history;  // after each assignment step of the winning run
};

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed.
KMeansResult kmeans(const MatrixXd& points, int k, std::uint64_t seed, const KMeansOptions& opts = {});

/// Sum of squared distances of points to the mean of their cluster.
double partition_inertia(const MatrixXd& points, const std::vector<int>& labels, int k);

struct Topic {
  VectorXd word_dist;
  double prevalence = 0.0;
  std::vector<int> members;  // feature ids
};

struct TopicModel {
  int k_prime = 0;
  std::uint64_t seed = 0;
  std::string emission_hash;
  std::vector<Topic> topics;
  std::vector<std::string> warnings;
};

/// Merges emission rows of `features` grouped by `labels` (aligned with
/// `features`) into k_prime topics: P(k)-weighted average of member rows.
TopicModel merge_topics(const interpret::EmissionMatrix& emissions, const std::vector<int>& features,
                        const std::vector<int>& labels, int k_prime);

/// Re-clusters cached feature embeddings into any number of topics without
/// refitting the SAE or the emissions.
class TopicMerger {
 public:
  /// Word-embedding mode.
  TopicMerger(const interpret::EmissionMatrix& emissions, const WordEmbeddingTable& table,
              std::vector<int> features, double top_p = 0.9);
  /// Decoder-direction mode: `directions` is K x d (rows are features).
  TopicMerger(const interpret::EmissionMatrix& emissions, const MatrixXd& directions,
              std::vector<int> features);
  /// Precomputed embeddings, one row per retained feature (e.g. from a cache).
  static TopicMerger from_embeddings(const interpret::EmissionMatrix& emissions, MatrixXd embeddings,
                                     std::vector<int> features);

  TopicModel remerge(int k_prime, std::uint64_t seed, const KMeansOptions& opts = {}) const;

  const MatrixXd& embeddings() const { return embeddings_; }
  const std::vector<int>& features() const { return features_; }

 private:
  struct Precomputed {};
  TopicMerger(Precomputed, const interpret::EmissionMatrix& emissions, MatrixXd embeddings,
              std::vector<int> features);

  const interpret::EmissionMatrix& emissions_;
  std::vector<int> features_;
  MatrixXd embeddings_;
};

std::string emission_hash(const interpret::EmissionMatrix& emissions);

/// Stable-key JSON: {"k_prime","seed","topics":[{"id","prevalence","members","top_words"}]}.
std::string topic_model_json(const TopicModel& model, const std::vector<std::string>& vocab, int top_n = 20);

/// Top-word view of a topic JSON file, enough for evaluation.
struct TopicSummary {
  int id = 0;
  double prevalence = 0.0;
  std::vector<int> members;
  std::vector<std::string> top_tokens;
};
std::vector<TopicSummary> read_topic_json(const std::filesystem::path& path);

}  // namespace saetm::merge
