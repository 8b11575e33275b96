#pragma once

// Data plumbing and the end-to-end run: embedding files, dataset ingestion,
// per-group topic activity statistics, the INI pipeline config, and the
// staged, hash-gated pipeline itself.

#include "saetm/common.hpp"
#include "saetm/eval.hpp"
#include "saetm/interpret.hpp"
#include "saetm/merge.hpp"
#include "saetm/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace saetm::pipeline {

namespace fs = std::filesystem;

// Embedding files ---------------------------------------------------------------
//
// "EMBV1", u8 dtype (0 = float32 little-endian), u64 n_rows, u32 dim, then the
// row-major payload. An optional sidecar "<file>.ids" lists one doc id per row.

struct EmbeddingFile {
  Matrix<float> rows;
  std::vector<std::string> ids;  // empty when there is no sidecar
};

std::vector<unsigned char> embedding_bytes(const Matrix<float>& rows);
Matrix<float> parse_embeddings(std::vector<unsigned char> bytes);
EmbeddingFile read_embeddings(const fs::path& path);
void write_embeddings(const fs::path& path, const Matrix<float>& rows, const std::vector<std::string>& ids = {});
fs::path ids_sidecar(const fs::path& embedding_path);

// Sparse activation files ---------------------------------------------------------
//
// "ACTS1", u64 n_rows, u32 K, then per row u32 nnz followed by nnz (u32 col, f32 value).

std::vector<unsigned char> activation_bytes(const SparseRows<double>& acts);
SparseRows<double> parse_activations(std::vector<unsigned char> bytes);
void save_activations(const SparseRows<double>& acts, const fs::path& path);
SparseRows<double> load_activations(const fs::path& path);

/// Row-normalized activations (theta = a / s); zero rows stay zero.
SparseRows<double> theta_of(const SparseRows<double>& acts);

// Ingestion -------------------------------------------------------------------

struct Dataset {
  Matrix<float> embeddings;
  std::vector<std::string> embedding_ids;
  std::vector<std::string> vocab;
  interpret::BowCorpus corpus;
  VectorXd idf;

  std::vector<std::string> doc_groups() const;
};

/// Loads and cross-checks the three inputs. Errors: E_EMB_MAGIC, E_EMB_SIZE,
/// E_VOCAB_RANGE, E_ALIGN (row count or id order differs from the corpus),
/// E_CORPUS_PARSE.
Dataset ingest(const fs::path& embedding_path, const fs::path& corpus_path, const fs::path& vocab_path);

/// Writes embeddings.emb (+ .ids), corpus.jsonl and vocab.txt into `dir`.
void export_dataset(const Dataset& data, const fs::path& dir);

// Group statistics ----------------------------------------------------------------

struct GroupStats {
  std::vector<std::string> groups;  // sorted
  std::vector<int> group_sizes;
  std::vector<int> topic_ids;
  MatrixXd activity;               // groups x topics, in [0, 1]
  VectorXd variance;               // per topic, population variance across groups
  VectorXd macro_ratio;            // per topic, mean of the group ratios
  std::vector<bool> over_active;   // macro_ratio > threshold
  double threshold = 0.30;
};

/// A topic is active in a document when any member feature has activation > 0.
/// `doc_groups` aligns with activation rows. When `known_groups` is non-empty,
/// labels outside it are rejected (E_INVALID_ARG), as are empty labels.
GroupStats topic_activity(const SparseRows<double>& acts, const std::vector<merge::TopicSummary>& topics,
                          const std::vector<std::string>& doc_groups,
                          const std::vector<std::string>& known_groups = {}, double threshold = 0.30);

/// Topic ids by descending cross-group variance, over-active topics excluded,
/// ties by lower id.
std::vector<int> top_variance_topics(const GroupStats& stats, int n);

std::string activity_csv(const GroupStats& stats);
std::string variance_csv(const GroupStats& stats);
/// Grouped bar chart of activity ratios for the listed topics.
std::string activity_svg(const GroupStats& stats, const std::vector<int>& topic_ids);

// Configuration -------------------------------------------------------------------

struct PipelineConfig {
  std::uint64_t seed = 0;
  fs::path out_dir = "saetm_out";

  // [data]
  fs::path embeddings;
  fs::path corpus;
  fs::path vocab;
  fs::path word_embeddings;  // optional; enables word-embedding merge and diversity

  // [sae]
  fs::path sae_checkpoint;  // optional pretrained model; skips training
  sae::ActivationKind activation = sae::ActivationKind::BatchTopK;
  int expansion = 4;
  sae::TrainConfig train;

  // [interpret]
  interpret::InterpretConfig interpret;

  // [merge]
  std::vector<int> k_prime{10};
  double top_p = 0.9;
  std::string merge_space = "words";  // words | decoder
  int kmeans_restarts = 10;

  // [eval]
  std::string judge = "stub:random";  // stub:<mode> | http
  eval::HttpJudgeConfig http;
  int trials_per_topic = 10;
  int rating_samples = 1;
  int concurrency = 1;
  int max_retries = 2;
  bool classify = false;
  int top_words = 20;

  // [stats]
  double over_active_threshold = 0.30;
  int top_variance = 10;

  /// Relative paths in the file resolve against its directory.
  static PipelineConfig load(const fs::path& path);
  static PipelineConfig parse(const std::string& text, const fs::path& base_dir = {});
  void validate() const;
};

std::vector<int> parse_int_list(const std::string& text);

// Running ---------------------------------------------------------------------------

struct StageRecord {
  std::string stage;
  std::string input_hash;
  bool cached = false;
};

struct PipelineResult {
  std::vector<StageRecord> stages;
  std::vector<fs::path> artifacts;
  fs::path report;
};

using LogFn = std::function<void(const std::string&)>;

/// Stages: sae (train or load) -> encode -> interpret -> embed -> per K':
/// merge -> eval -> stats, then report. Each stage is skipped when its stamp
/// matches the hash of its inputs. Failures throw E_STAGE naming the stage.
PipelineResult run_pipeline(const PipelineConfig& cfg, const LogFn& log = {});

std::unique_ptr<eval::JudgeClient> make_judge(const PipelineConfig& cfg);

/// Topic-word lists, intruder/rating tasks and judging for one topic file.
eval::EvalReport evaluate_topics(const std::vector<merge::TopicSummary>& topics,
                                 const std::vector<std::string>& vocab,
                                 const merge::WordEmbeddingTable* table, eval::JudgeClient& judge,
                                 const PipelineConfig& cfg, std::uint64_t seed);

// Synthetic fixture -----------------------------------------------------------------

struct FixtureSpec {
  int topics = 16;
  int docs = 2000;
  int vocab = 200;
  int dim = 32;
  int word_dim = 16;
  int groups = 3;
  int doc_length = 40;
  std::uint64_t seed = 7;
};

struct Fixture {
  MatrixXd true_emissions;  // K* x V
  MatrixXd true_directions; // K* x d
  fs::path config;
};

/// Writes embeddings, corpus, vocab, word vectors, the ground-truth emission
/// matrix and a ready-to-run pipeline.ini into `dir`.
Fixture write_fixture(const fs::path& dir, const FixtureSpec& spec = {});

}  // namespace saetm::pipeline
