#include "saetm/eval.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace saetm::eval {

using json = nlohmann::ordered_json;

std::vector<TopicWords> topic_words(const merge::TopicModel& model, const std::vector<std::string>& vocab,
                                    int top_n) {
  std::vector<TopicWords> out;
  for (std::size_t t = 0; t < model.topics.size(); ++t) {
    TopicWords tw;
    tw.id = static_cast<int>(t);
    const auto& dist = model.topics[t].word_dist;
    for (const auto& [w, p] : interpret::top_words(dist, std::min<int>(top_n, static_cast<int>(dist.size())))) {
      tw.word_ids.push_back(w);
      tw.tokens.push_back(w < static_cast<int>(vocab.size()) ? vocab[static_cast<std::size_t>(w)]
                                                             : std::to_string(w));
    }
    out.push_back(std::move(tw));
  }
  return out;
}

std::vector<TopicWords> topic_words(const std::vector<merge::TopicSummary>& topics,
                                    const std::vector<std::string>& vocab) {
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], static_cast<int>(i));
  std::vector<TopicWords> out;
  for (const auto& t : topics) {
    TopicWords tw;
    tw.id = t.id;
    tw.tokens = t.top_tokens;
    for (const auto& token : t.top_tokens) {
      const auto it = index.find(token);
      tw.word_ids.push_back(it == index.end() ? -1 : it->second);
    }
    out.push_back(std::move(tw));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transport

namespace {

// Successive shortest paths with Dijkstra on reduced costs. Graph sizes here
// are at most 2 + 20 + 20 nodes, so dense adjacency is fine.
class MinCostFlow {
 public:
  explicit MinCostFlow(int nodes) : adj_(static_cast<std::size_t>(nodes)) {}

  int add_edge(int from, int to, std::int64_t cap, double cost) {
    adj_[static_cast<std::size_t>(from)].push_back(static_cast<int>(edges_.size()));
    edges_.push_back({to, cap, cost});
    adj_[static_cast<std::size_t>(to)].push_back(static_cast<int>(edges_.size()));
    edges_.push_back({from, 0, -cost});
    return static_cast<int>(edges_.size()) - 2;
  }

  std::int64_t flow_on(int edge) const { return edges_[static_cast<std::size_t>(edge ^ 1)].cap; }

  void run(int source, int sink, std::int64_t demand) {
    const auto n = adj_.size();
    std::vector<double> potential(n, 0.0);
    std::vector<double> dist(n);
    std::vector<int> prev_edge(n);
    std::vector<bool> done(n);
    constexpr double kInf = std::numeric_limits<double>::infinity();
    while (demand > 0) {
      std::fill(dist.begin(), dist.end(), kInf);
      std::fill(prev_edge.begin(), prev_edge.end(), -1);
      std::fill(done.begin(), done.end(), false);
      dist[static_cast<std::size_t>(source)] = 0.0;
      for (std::size_t iter = 0; iter < n; ++iter) {
        int u = -1;
        for (std::size_t v = 0; v < n; ++v)
          if (!done[v] && dist[v] < kInf && (u < 0 || dist[v] < dist[static_cast<std::size_t>(u)]))
            u = static_cast<int>(v);
        if (u < 0) break;
        done[static_cast<std::size_t>(u)] = true;
        for (int e : adj_[static_cast<std::size_t>(u)]) {
          const Edge& edge = edges_[static_cast<std::size_t>(e)];
          if (edge.cap <= 0) continue;
          const auto v = static_cast<std::size_t>(edge.to);
          // Reduced costs are nonnegative up to rounding.
          const double reduced = std::max(0.0, edge.cost + potential[static_cast<std::size_t>(u)] - potential[v]);
          const double cand = dist[static_cast<std::size_t>(u)] + reduced;
          if (cand < dist[v]) {
            dist[v] = cand;
            prev_edge[v] = e;
          }
        }
      }
      require(dist[static_cast<std::size_t>(sink)] < kInf, ErrorCode::DomainError, "transport infeasible");
      for (std::size_t v = 0; v < n; ++v)
        if (dist[v] < kInf) potential[v] += dist[v];
      std::int64_t push = demand;
      for (int v = sink; v != source;) {
        const int e = prev_edge[static_cast<std::size_t>(v)];
        push = std::min(push, edges_[static_cast<std::size_t>(e)].cap);
        v = edges_[static_cast<std::size_t>(e ^ 1)].to;
      }
      for (int v = sink; v != source;) {
        const int e = prev_edge[static_cast<std::size_t>(v)];
        edges_[static_cast<std::size_t>(e)].cap -= push;
        edges_[static_cast<std::size_t>(e ^ 1)].cap += push;
        v = edges_[static_cast<std::size_t>(e ^ 1)].to;
      }
      demand -= push;
    }
  }

 private:
  struct Edge {
    int to;
    std::int64_t cap;
    double cost;
  };
  std::vector<std::vector<int>> adj_;
  std::vector<Edge> edges_;
};

}  // namespace

TransportSolution uniform_transport(const MatrixXd& cost) {
  const auto n = static_cast<int>(cost.rows());
  const auto m = static_cast<int>(cost.cols());
  require(n > 0 && m > 0, ErrorCode::EmptySupport, "transport needs non-empty marginals");
  require(cost.allFinite(), ErrorCode::NonFinite, "transport cost must be finite");
  const int source = 0;
  const int sink = n + m + 1;
  MinCostFlow flow(n + m + 2);
  for (int i = 0; i < n; ++i) flow.add_edge(source, 1 + i, m, 0.0);
  for (int j = 0; j < m; ++j) flow.add_edge(1 + n + j, sink, n, 0.0);
  std::vector<int> cell(static_cast<std::size_t>(n * m));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      cell[static_cast<std::size_t>(i * m + j)] = flow.add_edge(1 + i, 1 + n + j, static_cast<std::int64_t>(n) * m, cost(i, j));
  flow.run(source, sink, static_cast<std::int64_t>(n) * m);

  TransportSolution out;
  out.plan = MatrixXd::Zero(n, m);
  const double unit = 1.0 / (static_cast<double>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const auto units = flow.flow_on(cell[static_cast<std::size_t>(i * m + j)]);
      if (units == 0) continue;
      out.plan(i, j) = static_cast<double>(units) * unit;
      out.cost += out.plan(i, j) * cost(i, j);
    }
  return out;
}

namespace {

std::vector<int> covered_words(const std::vector<int>& words, const merge::WordEmbeddingTable& table) {
  std::vector<int> out;
  for (int w : words)
    if (w >= 0 && w < table.vocab_size() && table.covered[static_cast<std::size_t>(w)]) out.push_back(w);
  return out;
}

}  // namespace

double wmd(const std::vector<int>& topic_a, const std::vector<int>& topic_b,
           const merge::WordEmbeddingTable& table) {
  const auto a = covered_words(topic_a, table);
  const auto b = covered_words(topic_b, table);
  require(!a.empty() && !b.empty(), ErrorCode::EmptySupport, "topic has no covered word");
  MatrixXd cost(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (table.vectors.row(a[i]) - table.vectors.row(b[j])).norm();
  return uniform_transport(cost).cost;
}

DiversityResult diversity(const std::vector<TopicWords>& topics, const merge::WordEmbeddingTable& table) {
  const auto n = static_cast<Eigen::Index>(topics.size());
  require(n >= 2, ErrorCode::InvalidArgument, "diversity needs at least two topics");
  DiversityResult out;
  out.pairwise = MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> usable(static_cast<std::size_t>(n));
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto& words = topics[static_cast<std::size_t>(t)].word_ids;
    const auto covered = covered_words(words, table);
    out.dropped_words += static_cast<int>(words.size() - covered.size());
    usable[static_cast<std::size_t>(t)] = !covered.empty();
    if (usable[static_cast<std::size_t>(t)]) out.pairwise(t, t) = 0.0;
  }
  double total = 0.0;
  int pairs = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (!usable[static_cast<std::size_t>(i)] || !usable[static_cast<std::size_t>(j)]) {
        ++out.excluded_pairs;
        continue;
      }
      const double d = wmd(topics[static_cast<std::size_t>(i)].word_ids,
                           topics[static_cast<std::size_t>(j)].word_ids, table);
      out.pairwise(i, j) = out.pairwise(j, i) = d;
      total += d;
      ++pairs;
    }
  require(pairs > 0, ErrorCode::EmptySupport, "no topic pair has covered words");
  out.mean = total / pairs;
  return out;
}

std::string pairwise_csv(const DiversityResult& d, const std::vector<TopicWords>& topics) {
  std::ostringstream out;
  out.precision(17);
  out << "topic";
  for (const auto& t : topics) out << ',' << t.id;
  out << '\n';
  for (Eigen::Index i = 0; i < d.pairwise.rows(); ++i) {
    out << topics[static_cast<std::size_t>(i)].id;
    for (Eigen::Index j = 0; j < d.pairwise.cols(); ++j) {
      out << ',';
      if (!std::isnan(d.pairwise(i, j))) out << d.pairwise(i, j);
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Prompts and tasks

const char* const kIntruderTemplate =
    "From the following list of words, identify the single word that does not belong with the others. "
    "The words are: {words}.\n"
    "\n"
    "Your response must be only the single intruder word and nothing else.";

const char* const kRatingTemplate =
    "You are an expert in semantics and lexical relationships. Your task is to evaluate the coherence of "
    "the following list of words: '{words}'.\n"
    "\n"
    "Coherence is how well the words belong to a single, clear, and specific category.\n"
    "\n"
    "  - A score of 100 means the words are extremely coherent (e.g., all are types of citrus fruits).\n"
    "  - A score around 50 means the words are moderately coherent (e.g., all are 'vehicles' but mix cars, "
    "boats, and planes).\n"
    "  - A score of 0 means the words are completely unrelated.\n"
    "\n"
    "Provide your analysis as a JSON object with two keys: \"rationale\" and \"score\".\n"
    "\n"
    "  - \"rationale\": A brief, one-sentence explanation for your score.\n"
    "  - \"score\": An integer between 0 and 100.\n"
    "\n"
    "Your response MUST be only the JSON object and nothing else.";

const char* const kClassifyTemplate =
    "Classify the topic described by the following list of words as either abstract or concrete. "
    "Abstract topics are concerned with general image properties, such as mood, perspective, geometry, or "
    "layout. Concrete topics are concerned with objects visible in the images. The words are: {words}.\n"
    "\n"
    "Your response must be only the single word \"abstract\" or \"concrete\" and nothing else.";

std::string render_prompt(const std::string& tmpl, const std::vector<std::string>& words) {
  std::string joined;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) joined += ", ";
    joined += words[i];
  }
  std::string out = tmpl;
  const std::string key = "{words}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + joined.size()))
    out.replace(pos, key.size(), joined);
  return out;
}

TaskSet make_intruder_tasks(const std::vector<TopicWords>& topics, int trials_per_topic, std::uint64_t seed) {
  require(topics.size() >= 2, ErrorCode::InvalidArgument, "intruder tasks need at least two topics");
  require(trials_per_topic >= 1, ErrorCode::InvalidArgument, "trials_per_topic must be >= 1");
  TaskSet out;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < topics.size(); ++t) {
    const auto& target = topics[t];
    const std::set<std::string> own(target.tokens.begin(), target.tokens.end());
    if (own.size() < 5) {
      out.warnings.push_back("topic " + std::to_string(target.id) + " has fewer than 5 distinct top words");
      continue;
    }
    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < topics.size(); ++o) {
      if (o == t) continue;
      const bool has_outside = std::any_of(topics[o].tokens.begin(), topics[o].tokens.end(),
                                           [&](const std::string& w) { return !own.count(w); });
      if (has_outside)
        others.push_back(o);
      else
        out.warnings.push_back("topics " + std::to_string(target.id) + " and " + std::to_string(topics[o].id) +
                               " have fully overlapping top words; pair skipped");
    }
    if (others.empty()) continue;
    // Keep the topic's own order for sampling.
    std::vector<std::string> ordered;
    for (const auto& w : target.tokens)
      if (std::find(ordered.begin(), ordered.end(), w) == ordered.end()) ordered.push_back(w);

    for (int trial = 0; trial < trials_per_topic; ++trial) {
      JudgeTask task;
      task.kind = TaskKind::Intruder;
      task.topic_id = target.id;
      task.trial_id = trial;
      std::vector<std::string> chosen;
      std::sample(ordered.begin(), ordered.end(), std::back_inserter(chosen), 5, rng);
      std::uniform_int_distribution<std::size_t> pick_other(0, others.size() - 1);
      const auto& other = topics[others[pick_other(rng)]];
      std::vector<std::string> candidates;
      for (const auto& w : other.tokens)
        if (!own.count(w) && std::find(candidates.begin(), candidates.end(), w) == candidates.end())
          candidates.push_back(w);
      std::uniform_int_distribution<std::size_t> pick_word(0, candidates.size() - 1);
      task.answer = candidates[pick_word(rng)];
      chosen.push_back(task.answer);
      std::shuffle(chosen.begin(), chosen.end(), rng);
      task.words = std::move(chosen);
      task.prompt = render_prompt(kIntruderTemplate, task.words);
      out.tasks.push_back(std::move(task));
    }
  }
  return out;
}

TaskSet make_rating_tasks(const std::vector<TopicWords>& topics, int samples_per_topic) {
  require(samples_per_topic >= 1, ErrorCode::InvalidArgument, "samples_per_topic must be >= 1");
  TaskSet out;
  for (const auto& topic : topics) {
    if (topic.tokens.size() < 20)
      out.warnings.push_back("topic " + std::to_string(topic.id) + " has only " +
                             std::to_string(topic.tokens.size()) + " top words");
    for (int s = 0; s < samples_per_topic; ++s) {
      JudgeTask task;
      task.kind = TaskKind::Rating;
      task.topic_id = topic.id;
      task.trial_id = s;
      task.words = topic.tokens;
      task.prompt = render_prompt(kRatingTemplate, task.words);
      out.tasks.push_back(std::move(task));
    }
  }
  return out;
}

TaskSet make_classify_tasks(const std::vector<TopicWords>& topics) {
  TaskSet out;
  for (const auto& topic : topics) {
    JudgeTask task;
    task.kind = TaskKind::Classify;
    task.topic_id = topic.id;
    task.words = topic.tokens;
    task.prompt = render_prompt(kClassifyTemplate, task.words);
    out.tasks.push_back(std::move(task));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Judges

std::string StubJudge::complete(const JudgeTask& task) {
  // Per-task stream so results do not depend on submission order.
  std::seed_seq seq{static_cast<std::uint64_t>(seed_), static_cast<std::uint64_t>(task.topic_id),
                    static_cast<std::uint64_t>(task.trial_id), static_cast<std::uint64_t>(task.kind)};
  std::mt19937_64 rng(seq);
  switch (mode_) {
    case Mode::Malformed:
      return "I cannot answer that {";
    case Mode::EchoFirst:
      if (task.kind == TaskKind::Rating) return R"({"rationale":"stub","score":)" + std::to_string(fixed_score_) + "}";
      return task.words.empty() ? std::string() : task.words.front();
    case Mode::Oracle:
      if (task.kind == TaskKind::Intruder) return task.answer;
      if (task.kind == TaskKind::Classify) return "concrete";
      return R"({"rationale":"stub","score":)" + std::to_string(fixed_score_) + "}";
    case Mode::AlwaysWrong:
      if (task.kind == TaskKind::Intruder) {
        for (const auto& w : task.words)
          if (w != task.answer) return w;
        return std::string();
      }
      if (task.kind == TaskKind::Classify) return "abstract";
      return R"({"rationale":"stub","score":)" + std::to_string(fixed_score_) + "}";
    case Mode::Random:
      if (task.kind == TaskKind::Intruder) {
        if (task.words.empty()) return std::string();
        std::uniform_int_distribution<std::size_t> pick(0, task.words.size() - 1);
        return task.words[pick(rng)];
      }
      if (task.kind == TaskKind::Classify) return std::bernoulli_distribution(0.5)(rng) ? "abstract" : "concrete";
      return R"({"rationale":"stub","score":)" + std::to_string(std::uniform_int_distribution<int>(0, 100)(rng)) + "}";
  }
  return std::string();
}

std::string StubJudge::describe() const {
  switch (mode_) {
    case Mode::Oracle: return "stub:oracle";
    case Mode::AlwaysWrong: return "stub:wrong";
    case Mode::Random: return "stub:random";
    case Mode::EchoFirst: return "stub:echo";
    case Mode::Malformed: return "stub:malformed";
  }
  return "stub";
}

StubJudge::Mode StubJudge::parse_mode(const std::string& name) {
  if (name == "oracle") return Mode::Oracle;
  if (name == "wrong") return Mode::AlwaysWrong;
  if (name == "random") return Mode::Random;
  if (name == "echo") return Mode::EchoFirst;
  if (name == "malformed") return Mode::Malformed;
  throw Error(ErrorCode::InvalidArgument, "unknown stub judge '" + name + "' (oracle|wrong|random|echo|malformed)");
}

HttpJudge::HttpJudge(HttpJudgeConfig cfg) : cfg_(std::move(cfg)) {
  require(!cfg_.base_url.empty(), ErrorCode::InvalidArgument, "judge base_url is empty");
  if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
}

std::string HttpJudge::complete(const JudgeTask& task) {
  httplib::Client client(cfg_.base_url);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - seconds);
  client.set_connection_timeout(seconds.count(), micros.count());
  client.set_read_timeout(seconds.count(), micros.count());
  client.set_write_timeout(seconds.count(), micros.count());

  json body;
  body["model"] = cfg_.model;
  body["messages"] = json::array({json{{"role", "user"}, {"content", task.prompt}}});
  body["temperature"] = cfg_.temperature;
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
  if (!res) throw JudgeTransportError("judge request failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500)
    throw JudgeTransportError("judge returned HTTP " + std::to_string(res->status));
  if (res->status != 200) throw Error(ErrorCode::Judge, "judge returned HTTP " + std::to_string(res->status));

  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Judge, std::string("judge response is not JSON: ") + e.what());
  }
  try {
    const auto& choice = reply.at("choices").at(0);
    if (choice.contains("message")) return choice.at("message").at("content").get<std::string>();
    return choice.at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Judge, std::string("unexpected judge response shape: ") + e.what());
  }
}

std::string HttpJudge::describe() const { return cfg_.base_url + cfg_.path + " model=" + cfg_.model; }

// ---------------------------------------------------------------------------
// Scoring

namespace {

std::string normalize_word(const std::string& s) {
  std::string out;
  for (unsigned char c : s)
    if (!std::isspace(c)) out.push_back(static_cast<char>(std::tolower(c)));
  const auto strip = [](char c) { return c == '"' || c == '\'' || c == '.' || c == '`' || c == '*' || c == ','; };
  while (!out.empty() && strip(out.front())) out.erase(out.begin());
  while (!out.empty() && strip(out.back())) out.pop_back();
  return out;
}

}  // namespace

std::optional<std::string> parse_intruder_reply(const std::string& reply, const std::vector<std::string>& words) {
  const std::string got = normalize_word(reply);
  for (const auto& w : words)
    if (normalize_word(w) == got) return w;
  return std::nullopt;
}

std::optional<double> parse_rating_reply(const std::string& reply) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
  try {
    const auto j = json::parse(reply.substr(open, close - open + 1));
    if (!j.is_object() || !j.contains("score")) return std::nullopt;
    const auto& s = j["score"];
    double score;
    if (s.is_number())
      score = s.get<double>();
    else if (s.is_string())
      score = std::stod(s.get<std::string>());
    else
      return std::nullopt;
    if (!std::isfinite(score)) return std::nullopt;
    return std::clamp(score, 0.0, 100.0);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

namespace {

TaskResult judge_one(const JudgeTask& task, JudgeClient& judge, const RunOptions& opts) {
  TaskResult r;
  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    r.attempts = attempt + 1;
    try {
      r.raw = judge.complete(task);
      r.error.clear();
      break;
    } catch (const JudgeTransportError& e) {
      r.error = e.what();
    } catch (const std::exception& e) {
      r.error = e.what();
      return r;
    }
  }
  if (!r.error.empty()) return r;
  switch (task.kind) {
    case TaskKind::Intruder: {
      const auto match = parse_intruder_reply(r.raw, task.words);
      r.score = (match && *match == task.answer) ? 100.0 : 0.0;
      break;
    }
    case TaskKind::Rating:
      r.score = parse_rating_reply(r.raw);
      if (!r.score) r.error = "unparseable rating response";
      break;
    case TaskKind::Classify: {
      const std::string got = normalize_word(r.raw);
      if (got == "abstract" || got == "concrete")
        r.label = got;
      else
        r.error = "unparseable classification response";
      break;
    }
  }
  return r;
}

}  // namespace

JudgeOutcome run_judge(const std::vector<JudgeTask>& tasks, JudgeClient& judge, const RunOptions& opts) {
  require(opts.concurrency_limit >= 1, ErrorCode::InvalidArgument, "concurrency_limit must be >= 1");
  JudgeOutcome out;
  out.results.resize(tasks.size());
  if (opts.concurrency_limit == 1 || tasks.size() <= 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) out.results[i] = judge_one(tasks[i], judge, opts);
  } else {
    std::atomic<std::size_t> next{0};
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(opts.concurrency_limit), tasks.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) out.results[i] = judge_one(tasks[i], judge, opts);
      });
    for (auto& t : pool) t.join();
  }

  std::map<int, double> sums;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& r = out.results[i];
    if (tasks[i].kind == TaskKind::Classify) {
      if (r.label) ++out.scored; else ++out.failed;
      continue;
    }
    if (!r.score || !r.error.empty()) {
      ++out.failed;
      continue;
    }
    ++out.scored;
    sums[tasks[i].topic_id] += *r.score;
    ++out.per_topic_count[tasks[i].topic_id];
  }
  require(out.scored > 0, ErrorCode::Judge, "no scored tasks");
  double total = 0.0;
  for (const auto& [topic, sum] : sums) {
    const double mean = sum / out.per_topic_count[topic];
    out.per_topic[topic] = mean;
    total += mean;
  }
  out.macro_mean = out.per_topic.empty() ? 0.0 : total / static_cast<double>(out.per_topic.size());
  return out;
}

std::string EvalReport::to_json() const {
  json j;
  j["c_i"] = c_i;
  j["c_r"] = c_r;
  j["diversity"] = diversity;
  j["diversity_excluded_pairs"] = diversity_excluded_pairs;
  j["diversity_dropped_words"] = diversity_dropped_words;
  j["judge"] = judge;
  j["trials_per_topic"] = trials_per_topic;
  j["failed_tasks"] = failed_tasks;
  json topics = json::array();
  std::set<int> ids;
  for (const auto& [id, v] : topic_c_i) ids.insert(id);
  for (const auto& [id, v] : topic_c_r) ids.insert(id);
  for (int id : ids) {
    json t;
    t["id"] = id;
    if (auto it = topic_c_i.find(id); it != topic_c_i.end()) t["c_i"] = it->second;
    if (auto it = topic_c_r.find(id); it != topic_c_r.end()) t["c_r"] = it->second;
    topics.push_back(t);
  }
  j["topics"] = topics;
  j["warnings"] = warnings;
  return j.dump(2) + "\n";
}

}  // namespace saetm::eval
