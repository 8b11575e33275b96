#include "saetm/binary_io.hpp"
#include "saetm/interpret.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace saetm;
using namespace saetm::interpret;
namespace fs = std::filesystem;

namespace {

BowDoc doc(std::string id, std::vector<int> tokens) {
  BowDoc d;
  d.id = std::move(id);
  d.tokens = std::move(tokens);
  return d;
}

SparseRows<double> sparse(const MatrixXd& m) {
  SparseRows<double> s = m.sparseView(0.0, 0.0);
  s.makeCompressed();
  return s;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("saetm_interpret_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST(BowCorpus, CountsDfAndSmoothedBackground) {
  const auto c = BowCorpus::build(4, {doc("a", {0, 0, 1}), doc("b", {1, 2})});
  EXPECT_EQ(c.n_docs(), 2);
  ASSERT_EQ(c.docs[0].counts.size(), 2u);
  EXPECT_EQ(c.docs[0].counts[0], std::make_pair(0, 2));
  EXPECT_EQ(c.docs[0].counts[1], std::make_pair(1, 1));
  EXPECT_EQ(c.df[0], 1.0);
  EXPECT_EQ(c.df[1], 2.0);
  EXPECT_EQ(c.df[3], 0.0);
  EXPECT_NEAR(c.p0.sum(), 1.0, 1e-12);
  // counts (2, 2, 1, 0) + 0.5 each over 7
  EXPECT_NEAR(c.p0[0], 2.5 / 7.0, 1e-15);
  EXPECT_NEAR(c.p0[3], 0.5 / 7.0, 1e-15);
  EXPECT_TRUE((c.p0.array() > 0).all());
  EXPECT_TRUE((c.df.array() <= c.n_docs()).all());
}

TEST(BowCorpus, RejectsOutOfRangeWords) {
  try {
    BowCorpus::build(3, {doc("x", {0, 3})});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VocabRange);
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
  }
  EXPECT_THROW(BowCorpus::build(3, {doc("x", {-1})}), Error);
  EXPECT_THROW(BowCorpus::build(0, {}), Error);
}

TEST(Idf, Examples) {
  // N = 100; word 0 in every doc, word 1 in 10 docs, word 2 in 1 doc.
  std::vector<BowDoc> docs;
  for (int i = 0; i < 100; ++i) {
    std::vector<int> t{0};
    if (i < 10) t.push_back(1);
    if (i == 0) t.push_back(2);
    docs.push_back(doc(std::to_string(i), t));
  }
  const auto c = BowCorpus::build(4, docs);
  EXPECT_EQ(idf_weight(0, c), 0.0);
  EXPECT_DOUBLE_EQ(idf_weight(2, c), 1.0);
  EXPECT_NEAR(idf_weight(1, c), 0.5, 1e-15);
  EXPECT_THROW(idf_weight(3, c), Error);  // df = 0
  EXPECT_THROW(idf_weight(4, c), Error);
  const VectorXd w = idf_weights(c);
  EXPECT_EQ(w[3], 0.0);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(w[i], idf_weight(i, c));
}

TEST(Idf, BoundsAndOrderingProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> word(0, 29);
  std::vector<BowDoc> docs;
  for (int i = 0; i < 60; ++i) {
    std::vector<int> t;
    for (int j = 0; j < 1 + i % 7; ++j) t.push_back(word(rng) % (1 + i % 30));
    docs.push_back(doc(std::to_string(i), t));
  }
  const auto c = BowCorpus::build(30, docs);
  const VectorXd w = idf_weights(c);
  EXPECT_TRUE((w.array() >= 0).all() && (w.array() <= 1).all());
  for (int a = 0; a < 30; ++a)
    for (int b = 0; b < 30; ++b)
      if (c.df[a] >= 1 && c.df[b] >= 1 && c.df[a] < c.df[b]) EXPECT_GT(w[a], w[b]);
}

TEST(Idf, EveryWordEverywhereIsAllZero) {
  const auto c = BowCorpus::build(2, {doc("a", {0, 1}), doc("b", {1, 0})});
  EXPECT_EQ(idf_weights(c), VectorXd::Zero(2));
  EXPECT_EQ(idf_weight(1, c), 0.0);
}

TEST(DocLikelihood, DirectEvaluation) {
  auto c = BowCorpus::build(2, {doc("a", {0})});
  c.p0 << 0.1, 0.9;
  MatrixXd b(1, 2);
  b << 0.5, 0.5;
  const double ll = doc_likelihood(c.docs[0], VectorXd::Ones(1), b, c.p0, 0.3, VectorXd::Ones(2));
  EXPECT_NEAR(ll, std::log(0.38), 1e-15);
}

TEST(DocLikelihood, CountsAndWeightsMultiply) {
  auto c = BowCorpus::build(3, {doc("a", {0, 2, 2, 2})});
  c.p0 << 0.2, 0.3, 0.5;
  MatrixXd b(2, 3);
  b << 0.1, 0.2, 0.7, 0.6, 0.3, 0.1;
  const VectorXd theta = (VectorXd(2) << 0.25, 0.75).finished();
  const VectorXd w = (VectorXd(3) << 0.5, 1.0, 0.8).finished();
  const double pi = 0.4;
  auto mix = [&](int word) { return pi * c.p0[word] + (1 - pi) * (b(0, word) * 0.25 + b(1, word) * 0.75); };
  const double expected = 0.5 * std::log(mix(0)) + 3 * 0.8 * std::log(mix(2));
  EXPECT_NEAR(doc_likelihood(c.docs[0], theta, b, c.p0, pi, w), expected, 1e-14);
}

TEST(DocLikelihood, ZeroMixtureIsNonFinite) {
  auto c = BowCorpus::build(2, {doc("a", {1})});
  c.p0 << 1.0, 0.0;
  MatrixXd b(1, 2);
  b << 1.0, 0.0;
  try {
    doc_likelihood(c.docs[0], VectorXd::Ones(1), b, c.p0, 0.3, VectorXd::Ones(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFinite);
  }
}

TEST(EmissionGradient, MatchesFiniteDifferences) {
  // V = 5, K = 3, 4 documents.
  const auto c = BowCorpus::build(5, {doc("a", {0, 1, 1, 4}), doc("b", {2, 3}), doc("c", {4, 4, 0}),
                                      doc("d", {1, 2, 3, 3})});
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd logits(3, 5);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
  MatrixXd theta(4, 3);
  theta << 0.2, 0.8, 0, 1, 0, 0, 0.3, 0.3, 0.4, 0, 0.5, 0.5;
  const auto th = sparse(theta);
  const VectorXd weights = idf_weights(c);
  const std::vector<int> all{0, 1, 2, 3};
  const auto g = emission_loss_and_gradient(c, th, logits, 0.3, weights, all);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double h = 1e-6;
    MatrixXd up = logits, down = logits;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double fd = (emission_loss_and_gradient(c, th, up, 0.3, weights, all).loss -
                       emission_loss_and_gradient(c, th, down, 0.3, weights, all).loss) /
                      (2 * h);
    EXPECT_NEAR(g.logits.data()[i], fd, 1e-5 * std::max(1e-3, std::abs(fd)) + 1e-9);
  }
  // Loss equals the mean negative weighted likelihood.
  const MatrixXd b = softmax_rows(logits);
  double total = 0;
  for (int d = 0; d < 4; ++d) total -= doc_likelihood(c.docs[d], theta.row(d).transpose(), b, c.p0, 0.3, weights);
  EXPECT_NEAR(g.loss, total / 4, 1e-12);
}

TEST(EmissionGradient, PiNearOneDecouplesB) {
  const auto c = BowCorpus::build(3, {doc("a", {0, 1, 2, 2})});
  MatrixXd logits(2, 3);
  logits << 0.1, -0.4, 0.3, 1.0, 0.2, -0.5;
  MatrixXd theta(1, 2);
  theta << 0.5, 0.5;
  const auto g = emission_loss_and_gradient(c, sparse(theta), logits, 1.0 - 1e-12, VectorXd::Ones(3), {0});
  EXPECT_LT(g.logits.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(EmissionGradient, ZeroThetaDocsContributeNothing) {
  const auto c = BowCorpus::build(3, {doc("a", {0, 1}), doc("b", {2, 2})});
  MatrixXd logits = MatrixXd::Zero(2, 3);
  logits(0, 1) = 0.7;
  MatrixXd theta(2, 2);
  theta << 0.4, 0.6, 0, 0;
  const auto both = emission_loss_and_gradient(c, sparse(theta), logits, 0.3, VectorXd::Ones(3), {0, 1});
  const auto first = emission_loss_and_gradient(c, sparse(theta), logits, 0.3, VectorXd::Ones(3), {0});
  EXPECT_EQ(both.loss, first.loss);
  EXPECT_TRUE(both.logits == first.logits);
}

TEST(LearnEmissions, RecoversPeakedRows) {
  // K = 4, V = 20; each row puts most mass on five words.
  const int K = 4, V = 20, docs = 2000, length = 50;
  MatrixXd b_true = MatrixXd::Constant(K, V, 0.02 / 15);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < 5; ++j) b_true(k, 5 * k + j) = (0.98 / 5) * (1.0 + 0.1 * (j - 2));
  b_true.array().colwise() /= b_true.rowwise().sum().array();

  std::mt19937_64 rng(21);
  std::gamma_distribution<double> gam(0.5, 1.0);
  MatrixXd theta(docs, K);
  std::vector<BowDoc> corpus_docs;
  for (int d = 0; d < docs; ++d) {
    for (int k = 0; k < K; ++k) theta(d, k) = gam(rng) + 1e-12;
    theta.row(d) /= theta.row(d).sum();
    const RowVector<double> mix = theta.row(d) * b_true;
    std::discrete_distribution<int> pick(mix.data(), mix.data() + V);
    std::vector<int> t(length);
    for (int& w : t) w = pick(rng);
    corpus_docs.push_back(doc(std::to_string(d), t));
  }
  const auto c = BowCorpus::build(V, corpus_docs);
  InterpretConfig cfg;
  cfg.pi = 0.0;
  cfg.allow_zero_pi = true;
  cfg.idf_weighting = false;
  cfg.steps = 300;
  cfg.learning_rate = 0.05;
  InterpretReport rep;
  const auto e = learn_emissions(c, sparse(theta), cfg, &rep);
  for (int k = 0; k < K; ++k) {
    EXPECT_NEAR(e.b.row(k).sum(), 1.0, 1e-8);
    const double tv = 0.5 * (e.b.row(k) - b_true.row(k)).cwiseAbs().sum();
    EXPECT_LT(tv, 0.05) << "row " << k;
    // Same top-5 set.
    std::set<int> learned, truth;
    for (const auto& [w, p] : top_words(e.b.row(k).transpose(), 5)) learned.insert(w);
    for (const auto& [w, p] : top_words(b_true.row(k).transpose(), 5)) truth.insert(w);
    EXPECT_EQ(learned, truth);
  }
  EXPECT_TRUE((e.b.array() >= 0).all());
  EXPECT_NEAR(e.feature_prior.sum(), 1.0, 1e-8);

  // Smoothed loss is non-increasing on this fixed corpus.
  for (std::size_t i = 20; i + 10 <= rep.losses.size(); i += 10) {
    double a = 0, b = 0;
    for (int j = 0; j < 10; ++j) {
      a += rep.losses[i - 10 + j];
      b += rep.losses[i + j];
    }
    EXPECT_LE(b, a + 1e-9);
  }
}

TEST(LearnEmissions, InactiveFeatureStaysAtInit) {
  const auto c = BowCorpus::build(4, {doc("a", {0, 1}), doc("b", {2, 3}), doc("c", {0, 0}), doc("z", {3})});
  MatrixXd theta(4, 3);
  theta << 1, 0, 0, 0, 1, 0, 0.5, 0.5, 0, 0, 0, 0;
  InterpretConfig cfg;
  cfg.steps = 50;
  cfg.seed = 4;
  InterpretReport rep;
  const auto e = learn_emissions(c, sparse(theta), cfg, &rep);
  EXPECT_EQ(e.active_mask, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(e.active_features(), (std::vector<int>{0, 1}));
  EXPECT_EQ(rep.skipped_docs, 1);
  EXPECT_TRUE(rep.warnings.empty());

  // Same initial logits as the learner draws.
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.init_noise);
  MatrixXd init(3, 4);
  for (Eigen::Index i = 0; i < init.size(); ++i) init.data()[i] = noise(rng);
  EXPECT_LT((e.b.row(2) - softmax_rows(init).row(2)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(e.feature_prior[0], 1.5 / 3, 1e-15);
  EXPECT_EQ(e.feature_prior[2], 0.0);
}

TEST(LearnEmissions, WarnsWhenMostFeaturesDead) {
  const auto c = BowCorpus::build(3, {doc("a", {0, 1}), doc("b", {2})});
  MatrixXd theta = MatrixXd::Zero(2, 5);
  theta(0, 0) = 1;
  theta(1, 1) = 1;
  InterpretConfig cfg;
  cfg.steps = 2;
  InterpretReport rep;
  learn_emissions(c, sparse(theta), cfg, &rep);
  ASSERT_EQ(rep.warnings.size(), 1u);
  EXPECT_NE(rep.warnings[0].find("3 of 5"), std::string::npos);
}

TEST(LearnEmissions, Errors) {
  const auto c = BowCorpus::build(3, {doc("a", {0, 1}), doc("b", {2})});
  InterpretConfig cfg;
  EXPECT_THROW(learn_emissions(c, sparse(MatrixXd::Identity(3, 3)), cfg), Error);  // misaligned
  EXPECT_THROW(learn_emissions(c, sparse(MatrixXd::Zero(2, 3)), cfg), Error);      // nothing active
  for (double pi : {0.0, 1.0, -0.1, 1.5}) {
    cfg.pi = pi;
    EXPECT_THROW(cfg.validate(), Error) << pi;
  }
  cfg.pi = 0.0;
  cfg.allow_zero_pi = true;
  EXPECT_NO_THROW(cfg.validate());
  cfg.pi = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_EQ(InterpretConfig{}.pi, 0.3);
}

TEST(TopWords, TieBreaks) {
  const VectorXd hot = VectorXd::Unit(6, 4);
  const auto t = top_words(hot, 3);
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[0].first, 4);
  EXPECT_EQ(t[1].first, 0);
  EXPECT_EQ(t[2].first, 1);
  const auto u = top_words(VectorXd::Constant(5, 0.2), 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(u[i].first, i);
  EXPECT_THROW(top_words(hot, 7), Error);
}

TEST(CorpusFiles, RoundTripAndErrors) {
  TempDir dir;
  std::vector<BowDoc> docs{doc("d1", {0, 3, 3}), doc("d2", {})};
  docs[1].group = "g";
  const std::string text = corpus_jsonl(docs);
  write(dir.path() / "c.jsonl", text);
  const auto back = read_corpus_jsonl(dir.path() / "c.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].tokens, docs[0].tokens);
  EXPECT_FALSE(back[0].group.has_value());
  EXPECT_EQ(back[1].group.value(), "g");
  EXPECT_EQ(corpus_jsonl(back), text);

  auto expect_code = [&](const std::string& body, ErrorCode code) {
    write(dir.path() / "bad.jsonl", body);
    try {
      read_corpus_jsonl(dir.path() / "bad.jsonl");
      ADD_FAILURE() << body;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code) << body;
      EXPECT_NE(std::string(e.what()).find(":1"), std::string::npos);
    }
  };
  expect_code("{\"id\": \"a\", \"tokens\": [1, 2\n", ErrorCode::CorpusParse);
  expect_code("{\"tokens\": [1]}\n", ErrorCode::CorpusParse);
  expect_code("{\"id\": \"a\"}\n", ErrorCode::CorpusParse);
  expect_code("{\"id\": \"a\", \"tokens\": [1.5]}\n", ErrorCode::CorpusParse);
  expect_code("{\"id\": \"a\", \"tokens\": [-2]}\n", ErrorCode::VocabRange);
  expect_code("{\"id\": \"a\", \"tokens\": [], \"group\": 3}\n", ErrorCode::CorpusParse);
  EXPECT_THROW(read_corpus_jsonl(dir.path() / "missing.jsonl"), Error);
}

TEST(VocabFiles, LineNumberIsId) {
  TempDir dir;
  write(dir.path() / "v.txt", "alpha\r\nbeta\ngamma\n");
  const auto v = read_vocab(dir.path() / "v.txt");
  EXPECT_EQ(v, (std::vector<std::string>{"alpha", "beta", "gamma"}));
  EXPECT_EQ(vocab_text(v), "alpha\nbeta\ngamma\n");
}

TEST(EmissionFiles, RoundTrip) {
  EmissionMatrix e;
  e.b = softmax_rows((MatrixXd(2, 3) << 0.1, 0.2, 0.3, 1.0, -1.0, 0.0).finished());
  e.feature_prior = (VectorXd(2) << 0.25, 0.75).finished();
  e.active_mask = {true, false};
  const auto bytes = emission_bytes(e);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "EMIS1");
  EXPECT_EQ(bytes.size(), 5 + 8 + 4 * 6 + 4 * 2 + 2u);
  const auto back = parse_emissions(bytes);
  EXPECT_EQ(emission_bytes(back), bytes);
  EXPECT_EQ(back.active_mask, e.active_mask);
  EXPECT_LT((back.b - e.b).cwiseAbs().maxCoeff(), 1e-7);

  TempDir dir;
  save_emissions(e, dir.path() / "e.bin");
  EXPECT_EQ(emission_bytes(load_emissions(dir.path() / "e.bin")), bytes);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(parse_emissions(truncated), Error);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_emissions(bad), Error);
}

TEST(EmissionFiles, SummaryJson) {
  EmissionMatrix e;
  e.b = (MatrixXd(1, 3) << 0.2, 0.5, 0.3).finished();
  e.feature_prior = VectorXd::Ones(1);
  e.active_mask = {true};
  const auto j = nlohmann::json::parse(emission_summary_json(e, {"x", "y", "z"}, 2));
  const auto& words = j["features"][0]["top_words"];
  ASSERT_EQ(words.size(), 2u);
  EXPECT_EQ(words[0]["token"], "y");
  EXPECT_EQ(words[1]["token"], "z");
}
