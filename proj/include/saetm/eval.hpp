#pragma once

// Topic quality: word mover's distance diversity, and LLM-judge coherence
// tasks (intruder detection and 0-100 rating) with pluggable judges.

#include "saetm/common.hpp"
#include "saetm/merge.hpp"

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace saetm::eval {

/// A topic as seen by the metrics: its top words as vocabulary ids and tokens.
struct TopicWords {
  int id = 0;
  std::vector<int> word_ids;
  std::vector<std::string> tokens;
};

std::vector<TopicWords> topic_words(const merge::TopicModel& model, const std::vector<std::string>& vocab,
                                    int top_n = 20);
std::vector<TopicWords> topic_words(const std::vector<merge::TopicSummary>& topics,
                                    const std::vector<std::string>& vocab);

// Optimal transport -----------------------------------------------------------

struct TransportSolution {
  double cost = 0.0;
  MatrixXd plan;  // rows sum to 1/n, columns to 1/m
};

/// Exact optimal transport between uniform marginals for an n x m cost
/// matrix, solved as an integer min-cost flow (supplies m, demands n).
TransportSolution uniform_transport(const MatrixXd& cost);

/// WMD between two word lists: uniform mass over covered words, Euclidean
/// ground cost. Throws E_EMPTY_SUPPORT when either side has no covered word.
double wmd(const std::vector<int>& topic_a, const std::vector<int>& topic_b,
           const merge::WordEmbeddingTable& table);

struct DiversityResult {
  double mean = 0.0;
  MatrixXd pairwise;  // NaN where a pair was excluded
  int excluded_pairs = 0;
  int dropped_words = 0;  // uncovered top words across topics
};

/// Mean WMD over unordered topic pairs.
DiversityResult diversity(const std::vector<TopicWords>& topics, const merge::WordEmbeddingTable& table);

std::string pairwise_csv(const DiversityResult& d, const std::vector<TopicWords>& topics);

// Judge tasks -----------------------------------------------------------------

enum class TaskKind { Intruder, Rating, Classify };

struct JudgeTask {
  TaskKind kind = TaskKind::Intruder;
  int topic_id = 0;
  int trial_id = 0;
  std::vector<std::string> words;  // shown to the judge, in order
  std::string answer;              // intruder word (Intruder only)
  std::string prompt;
};

extern const char* const kIntruderTemplate;
extern const char* const kRatingTemplate;
extern const char* const kClassifyTemplate;

/// Substitutes "{words}" in a template.
std::string render_prompt(const std::string& tmpl, const std::vector<std::string>& words);

struct TaskSet {
  std::vector<JudgeTask> tasks;
  std::vector<std::string> warnings;
};

/// Five words from a topic's top list plus one intruder from the top list of
/// a uniformly chosen other topic that is absent from the target's list.
TaskSet make_intruder_tasks(const std::vector<TopicWords>& topics, int trials_per_topic, std::uint64_t seed);

/// One task per topic and sample, rendered from the coherence template.
TaskSet make_rating_tasks(const std::vector<TopicWords>& topics, int samples_per_topic = 1);

/// Optional abstract/concrete classification pass.
TaskSet make_classify_tasks(const std::vector<TopicWords>& topics);

// Judges ----------------------------------------------------------------------

/// Retryable failure (network, timeout, 5xx).
class JudgeTransportError : public Error {
 public:
  explicit JudgeTransportError(const std::string& message) : Error(ErrorCode::Judge, message) {}
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  /// Returns the raw text completion for the task's prompt.
  virtual std::string complete(const JudgeTask& task) = 0;
  virtual std::string describe() const = 0;
};

/// Offline judges for tests and CI.
class StubJudge final : public JudgeClient {
 public:
  enum class Mode {
    Oracle,       // intruder: the true answer; rating: fixed score
    AlwaysWrong,  // intruder: first non-intruder word
    Random,       // intruder: uniform candidate; rating: uniform 0..100
    EchoFirst,    // intruder: first listed word
    Malformed,    // unparseable output for every task
  };

  explicit StubJudge(Mode mode, std::uint64_t seed = 0, int fixed_score = 50)
      : mode_(mode), seed_(seed), fixed_score_(fixed_score) {}

  std::string complete(const JudgeTask& task) override;
  std::string describe() const override;

  static Mode parse_mode(const std::string& name);

 private:
  Mode mode_;
  std::uint64_t seed_;
  int fixed_score_;
};

struct HttpJudgeConfig {
  std::string base_url;  // e.g. http://localhost:8000
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key_env = "SAETM_JUDGE_API_KEY";
  std::chrono::milliseconds timeout{60000};
  double temperature = 0.0;
};

/// Chat-completion HTTP judge: POST {"model", "messages": [{"role": "user",
/// "content": prompt}]}, reads choices[0].message.content.
class HttpJudge final : public JudgeClient {
 public:
  explicit HttpJudge(HttpJudgeConfig cfg);
  std::string complete(const JudgeTask& task) override;
  std::string describe() const override;

 private:
  HttpJudgeConfig cfg_;
  std::string api_key_;
};

// Scoring ---------------------------------------------------------------------

struct RunOptions {
  int concurrency_limit = 1;  // 1 = serial, deterministic order
  int max_retries = 2;
};

struct TaskResult {
  std::optional<double> score;  // 0/100 for intruder, 0..100 for rating
  std::optional<std::string> label;  // classification
  std::string raw;
  std::string error;
  int attempts = 0;
};

struct JudgeOutcome {
  std::vector<TaskResult> results;
  std::map<int, double> per_topic;  // mean score per topic
  std::map<int, int> per_topic_count;
  double macro_mean = 0.0;
  int scored = 0;
  int failed = 0;
};

/// Case- and whitespace-insensitive match of the reply against the six shown
/// words; returns the matched word or nothing.
std::optional<std::string> parse_intruder_reply(const std::string& reply, const std::vector<std::string>& words);
/// Reads the "score" field of the JSON object in the reply, clamped to [0, 100].
std::optional<double> parse_rating_reply(const std::string& reply);

/// Submits every task, retrying transport failures, then macro-averages the
/// per-topic means. Throws E_JUDGE "no scored tasks" when nothing scored.
JudgeOutcome run_judge(const std::vector<JudgeTask>& tasks, JudgeClient& judge, const RunOptions& opts = {});

struct EvalReport {
  double c_i = 0.0;
  double c_r = 0.0;
  double diversity = 0.0;
  int diversity_excluded_pairs = 0;
  int diversity_dropped_words = 0;
  std::map<int, double> topic_c_i;
  std::map<int, double> topic_c_r;
  std::string judge;
  int trials_per_topic = 0;
  int failed_tasks = 0;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

}  // namespace saetm::eval
