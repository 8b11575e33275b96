#pragma once

// Interprets SAE features as word distributions: the emission matrix B is fit
// to bag-of-words documents under a background-unigram mixture, with each
// token's log term weighted by its normalized inverse document frequency.

#include "saetm/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace saetm::interpret {

struct BowDoc {
  std::string id;
  std::vector<int> tokens;  // as read, in order
  std::optional<std::string> group;
  std::vector<std::pair<int, int>> counts;  // (word_id, count), sorted by word_id
};

struct BowCorpus {
  int vocab_size = 0;
  std::vector<BowDoc> docs;
  VectorXd df;  // document frequency per word
  VectorXd p0;  // smoothed background unigram distribution

  int n_docs() const { return static_cast<int>(docs.size()); }

  /// Fills counts, df and p0 (add-`smoothing` pseudo-counts). Throws
  /// E_VOCAB_RANGE for word ids outside [0, vocab_size).
  static BowCorpus build(int vocab_size, std::vector<BowDoc> docs, double smoothing = 0.5);
};

/// log(N / df(w)) / max_j log(N / df(w_j)); the max runs over words with df >= 1.
double idf_weight(int word_id, const BowCorpus& corpus);
/// All weights at once; words with df = 0 get weight 0. When every word
/// occurs in every document the weights are all 0.
VectorXd idf_weights(const BowCorpus& corpus);

struct EmissionMatrix {
  MatrixXd b;                 // K x V, row-stochastic
  VectorXd feature_prior;     // P(k): mean theta_k over documents with s > 0
  std::vector<bool> active_mask;

  Eigen::Index n_features() const { return b.rows(); }
  Eigen::Index vocab_size() const { return b.cols(); }
  std::vector<int> active_features() const;
};

struct InterpretConfig {
  double pi = 0.3;
  int steps = 500;
  int batch_size = 0;  // documents per step; 0 means all
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  bool idf_weighting = true;
  double init_noise = 0.01;
  // Permits pi = 0 (no background). Only recovery tests set this; the
  // pipeline and CLI always require 0 < pi < 1.
  bool allow_zero_pi = false;

  void validate() const;
};

/// Sum over tokens of count * weight(w) * log(pi P0(w) + (1 - pi) sum_k B_kw theta_k).
double doc_likelihood(const BowDoc& doc, const VectorXd& theta, const MatrixXd& b, const VectorXd& p0,
                      double pi, const VectorXd& word_weights);

struct InterpretReport {
  std::vector<double> losses;
  int skipped_docs = 0;
  std::vector<std::string> warnings;
};

/// Loss (mean negative weighted log-likelihood over documents with nonzero
/// theta) and its gradient with respect to the row logits of B.
struct EmissionGradient {
  double loss = 0.0;
  MatrixXd logits;
};

EmissionGradient emission_loss_and_gradient(const BowCorpus& corpus, const SparseRows<double>& theta,
                                            const MatrixXd& logits, double pi,
                                            const VectorXd& word_weights,
                                            const std::vector<int>& doc_indices);

MatrixXd softmax_rows(const MatrixXd& logits);

/// Fits B by Adam on softmax row logits. `theta` rows align with corpus docs;
/// empty rows (s = 0) are skipped.
EmissionMatrix learn_emissions(const BowCorpus& corpus, const SparseRows<double>& theta,
                               const InterpretConfig& cfg, InterpretReport* report = nullptr);

/// The n most probable words, descending, ties by lower id.
std::vector<std::pair<int, double>> top_words(const Eigen::Ref<const VectorXd>& row, int n);

// Files ---------------------------------------------------------------------

/// JSON-lines corpus: {"id": str, "tokens": [int...], "group": str?}.
std::vector<BowDoc> read_corpus_jsonl(const std::filesystem::path& path);
std::string corpus_jsonl(const std::vector<BowDoc>& docs);
/// One token per line; line number is the word id.
std::vector<std::string> read_vocab(const std::filesystem::path& path);
std::string vocab_text(const std::vector<std::string>& vocab);

/// "EMIS1", u32 K, u32 V, f32 B rows, then f32 prior (K) and u8 active mask (K).
std::vector<unsigned char> emission_bytes(const EmissionMatrix& e);
EmissionMatrix parse_emissions(std::vector<unsigned char> bytes);
void save_emissions(const EmissionMatrix& e, const std::filesystem::path& path);
EmissionMatrix load_emissions(const std::filesystem::path& path);

/// Human-readable summary with the top-n words per feature.
std::string emission_summary_json(const EmissionMatrix& e, const std::vector<std::string>& vocab,
                                  int n = 20);

}  // namespace saetm::interpret
