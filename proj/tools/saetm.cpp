// saetm: command-line front end for the SAE topic model library.
//
// Exit codes: 0 success, 2 validation error, 3 stage failure.

#include "saetm/binary_io.hpp"
#include "saetm/checkpoint.hpp"
#include "saetm/ctm.hpp"
#include "saetm/eval.hpp"
#include "saetm/interpret.hpp"
#include "saetm/merge.hpp"
#include "saetm/pipeline.hpp"
#include "saetm/sae.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <iostream>
#include <numeric>

namespace fs = std::filesystem;
using namespace saetm;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--seed", c.seed, "random seed")->capture_default_str();
  cmd->add_option("--config", c.config, "INI config file (pipeline schema)");
  auto* o = cmd->add_option("--out", c.out, "output path");
  if (out_required) o->required();
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::optional<pipeline::PipelineConfig> maybe_config(const Common& c) {
  if (c.config.empty()) return std::nullopt;
  return pipeline::PipelineConfig::load(c.config);
}

MatrixXd load_embedding_matrix(const std::string& path) {
  return pipeline::read_embeddings(path).rows.cast<double>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saetm - sparse autoencoders as topic models"};
  app.require_subcommand(1);

  // ctm ----------------------------------------------------------------------
  auto* ctm = app.add_subcommand("ctm", "continuous topic model sampler and checks");
  ctm->require_subcommand(1);

  Common ctm_sample_c;
  int n_topics = 8, dim = 16, n_docs = 1000, support = 0;
  double alpha = 0.1, shape = 1.0, rate = 1.0, rho = 3.0, noise = 1e-3;
  auto* ctm_sample = ctm->add_subcommand("sample", "draw documents from a random CTM into an EMBV1 file");
  add_common(ctm_sample, ctm_sample_c);
  ctm_sample->add_option("--topics", n_topics)->capture_default_str()->check(CLI::PositiveNumber);
  ctm_sample->add_option("--dim", dim)->capture_default_str()->check(CLI::PositiveNumber);
  ctm_sample->add_option("--docs", n_docs)->capture_default_str()->check(CLI::PositiveNumber);
  ctm_sample->add_option("--alpha", alpha)->capture_default_str();
  ctm_sample->add_option("--shape", shape)->capture_default_str();
  ctm_sample->add_option("--rate", rate)->capture_default_str();
  ctm_sample->add_option("--rho", rho, "Poisson rate of contributions")->capture_default_str();
  ctm_sample->add_option("--noise", noise, "noise variance")->capture_default_str();
  ctm_sample->add_option("--support", support, "fixed number of active topics (0 = Poisson)")->capture_default_str();

  Common ctm_verify_c;
  std::int64_t draws = 200000;
  auto* ctm_verify = ctm->add_subcommand("verify", "Monte Carlo check of the aggregated-strength limit law");
  add_common(ctm_verify, ctm_verify_c, false);
  ctm_verify->add_option("--draws", draws)->capture_default_str()->check(CLI::PositiveNumber);

  // sae ----------------------------------------------------------------------
  auto* sae_cmd = app.add_subcommand("sae", "train and apply sparse autoencoders");
  sae_cmd->require_subcommand(1);

  Common sae_train_c;
  std::string train_emb, activation = "batch_topk";
  int expansion = 4, k_active = 3, steps = 1500, batch = 256;
  double lr = 1e-3, l1 = 0.0;
  auto* sae_train = sae_cmd->add_subcommand("train", "train an SAE checkpoint");
  add_common(sae_train, sae_train_c);
  sae_train->add_option("--embeddings", train_emb)->required();
  sae_train->add_option("--activation", activation, "relu_l1 | topk | batch_topk")->capture_default_str();
  sae_train->add_option("--expansion", expansion)->capture_default_str();
  sae_train->add_option("--k", k_active)->capture_default_str();
  sae_train->add_option("--l1", l1)->capture_default_str();
  sae_train->add_option("--steps", steps)->capture_default_str();
  sae_train->add_option("--batch-size", batch)->capture_default_str();
  sae_train->add_option("--lr", lr)->capture_default_str();

  Common sae_encode_c;
  std::string enc_ckpt, enc_emb;
  auto* sae_encode = sae_cmd->add_subcommand("encode", "encode embeddings into an ACTS1 activation file");
  add_common(sae_encode, sae_encode_c);
  sae_encode->add_option("--checkpoint", enc_ckpt)->required();
  sae_encode->add_option("--embeddings", enc_emb)->required();

  // interpret ------------------------------------------------------------------
  Common interp_c;
  std::string interp_acts, interp_corpus, interp_vocab;
  interpret::InterpretConfig icfg;
  bool no_idf = false;
  auto* interp = app.add_subcommand("interpret", "learn the feature-word emission matrix");
  add_common(interp, interp_c);
  interp->add_option("--activations", interp_acts)->required();
  interp->add_option("--corpus", interp_corpus)->required();
  interp->add_option("--vocab", interp_vocab)->required();
  interp->add_option("--pi", icfg.pi)->capture_default_str();
  interp->add_option("--steps", icfg.steps)->capture_default_str();
  interp->add_option("--lr", icfg.learning_rate)->capture_default_str();
  interp->add_flag("--no-idf", no_idf, "disable IDF token weighting");

  // merge -----------------------------------------------------------------------
  Common merge_c;
  std::string merge_emis, merge_vocab, merge_words, merge_ckpt, merge_k = "10";
  double top_p = 0.9;
  int restarts = 10;
  auto* merge_cmd = app.add_subcommand("merge", "cluster features into K' topics (one JSON per K')");
  add_common(merge_cmd, merge_c);
  merge_cmd->add_option("--emissions", merge_emis)->required();
  merge_cmd->add_option("--vocab", merge_vocab)->required();
  merge_cmd->add_option("--word-embeddings", merge_words, "text word vectors (word-embedding space)");
  merge_cmd->add_option("--checkpoint", merge_ckpt, "SAE checkpoint (decoder-direction space)");
  merge_cmd->add_option("--k-prime", merge_k, "comma-separated topic counts")->capture_default_str();
  merge_cmd->add_option("--top-p", top_p)->capture_default_str();
  merge_cmd->add_option("--restarts", restarts)->capture_default_str();

  // eval ------------------------------------------------------------------------
  Common eval_c;
  std::string eval_topics, eval_vocab, eval_words, judge = "stub:random", base_url, model_name;
  int trials = 10, concurrency = 1;
  auto* eval_cmd = app.add_subcommand("eval", "diversity and judge-based coherence for a topic JSON");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--topics", eval_topics)->required();
  eval_cmd->add_option("--vocab", eval_vocab)->required();
  eval_cmd->add_option("--word-embeddings", eval_words);
  eval_cmd->add_option("--judge", judge, "stub:<oracle|wrong|random|echo|malformed> | http")->capture_default_str();
  eval_cmd->add_option("--base-url", base_url);
  eval_cmd->add_option("--model", model_name);
  eval_cmd->add_option("--trials", trials)->capture_default_str();
  eval_cmd->add_option("--concurrency", concurrency)->capture_default_str();

  // stats -----------------------------------------------------------------------
  Common stats_c;
  std::string stats_acts, stats_topics, stats_corpus;
  double threshold = 0.30;
  int top_n = 10;
  auto* stats_cmd = app.add_subcommand("stats", "per-group topic activity ratios and plot data");
  add_common(stats_cmd, stats_c);
  stats_cmd->add_option("--activations", stats_acts)->required();
  stats_cmd->add_option("--topics", stats_topics)->required();
  stats_cmd->add_option("--corpus", stats_corpus)->required();
  stats_cmd->add_option("--threshold", threshold)->capture_default_str();
  stats_cmd->add_option("--top", top_n)->capture_default_str();

  // pipeline --------------------------------------------------------------------
  auto* pipe = app.add_subcommand("pipeline", "end-to-end runs");
  pipe->require_subcommand(1);
  Common pipe_c;
  bool seed_given = false;
  auto* pipe_run = pipe->add_subcommand("run", "train -> interpret -> merge -> evaluate -> report");
  add_common(pipe_run, pipe_c, false);
  pipe_run->get_option("--config")->required();
  pipe_run->callback([&] { seed_given = pipe_run->count("--seed") > 0; });

  // fixture ---------------------------------------------------------------------
  Common fix_c;
  pipeline::FixtureSpec fspec;
  auto* fixture = app.add_subcommand("fixture", "write the synthetic fixture dataset and config");
  add_common(fixture, fix_c);
  fixture->add_option("--docs", fspec.docs)->capture_default_str();
  fixture->add_option("--topics", fspec.topics)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*ctm_sample) {
      std::mt19937_64 rng(ctm_sample_c.seed);
      std::normal_distribution<double> normal;
      MatrixXd mu(n_topics, dim);
      for (Eigen::Index i = 0; i < mu.size(); ++i) mu.data()[i] = normal(rng);
      mu.rowwise().normalize();
      const auto params = ctm::CtmParams::isotropic(mu, alpha, shape, rate, rho, noise);
      params.validate();
      Matrix<float> rows(n_docs, dim);
      std::vector<std::string> ids;
      for (int i = 0; i < n_docs; ++i) {
        const auto s = support > 0 ? ctm::sample_fixed_support_document(params, support, ctm_sample_c.seed + 1 + i)
                                   : ctm::sample_document(params, ctm_sample_c.seed + 1 + i);
        rows.row(i) = s.embedding.transpose().cast<float>();
        ids.push_back("doc" + std::to_string(i));
      }
      pipeline::write_embeddings(ctm_sample_c.out, rows, ids);
      io::write_file_atomic(ctm_sample_c.out + ".topics", [&] {
        std::ostringstream t;
        t.precision(9);
        for (Eigen::Index k = 0; k < mu.rows(); ++k) {
          for (Eigen::Index c = 0; c < mu.cols(); ++c) t << (c ? " " : "") << mu(k, c);
          t << '\n';
        }
        return t.str();
      }());
      std::cout << "wrote " << n_docs << " documents to " << ctm_sample_c.out << '\n';
    } else if (*ctm_verify) {
      // kappa = 2, beta = 1, theta_k = 0.5: S_k should approach Ga(1, 1).
      bool ok = true;
      json out = json::array();
      double prev_excess = std::numeric_limits<double>::infinity();
      for (double r : {1e2, 1e3, 1e4}) {
        const double a0 = 2.0 / r;
        const auto s = ctm::sample_aggregated_strength(0.5 * r, a0, 1.0, draws, ctm_verify_c.seed);
        const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        double var = 0.0;
        for (double v : s) var += (v - mean) * (v - mean);
        var /= static_cast<double>(s.size() - 1);
        std::cout << "rho_d=" << r << " mean=" << mean << " var=" << var << '\n';
        out.push_back({{"rho_d", r}, {"mean", mean}, {"variance", var}});
        ok = ok && var - 1.0 < prev_excess;
        prev_excess = var - 1.0;
      }
      if (!ctm_verify_c.out.empty()) io::write_file_atomic(ctm_verify_c.out, out.dump(2) + "\n");
      std::cout << (ok ? "variance excess decreases with rho_d" : "variance excess is not monotone") << '\n';
      return ok ? 0 : kExitStage;
    } else if (*sae_train) {
      sae::TrainConfig tc;
      tc.seed = sae_train_c.seed;
      tc.k_active = k_active;
      tc.l1_beta = l1;
      tc.steps = steps;
      tc.batch_size = batch;
      tc.learning_rate = lr;
      sae::TrainReport rep;
      const MatrixXd x = load_embedding_matrix(train_emb);
      const auto model = sae::train_on_matrix(x, expansion, sae::parse_activation_kind(activation), tc, &rep);
      sae::save_checkpoint(model, sae_train_c.out);
      std::cout << "R^2 " << sae::r_squared(model, x) << ", dead features " << rep.dead_features.size() << '\n';
    } else if (*sae_encode) {
      const auto model = sae::load_checkpoint<double>(enc_ckpt);
      const MatrixXd x = load_embedding_matrix(enc_emb);
      require(x.cols() == model.d_in(), ErrorCode::DimensionMismatch, "embedding dim differs from checkpoint");
      pipeline::save_activations(sae::encode(model, x).values, sae_encode_c.out);
    } else if (*interp) {
      if (auto cfg = maybe_config(interp_c)) icfg = cfg->interpret;
      icfg.seed = interp_c.seed;
      if (no_idf) icfg.idf_weighting = false;
      const auto vocab = interpret::read_vocab(interp_vocab);
      auto corpus = interpret::BowCorpus::build(static_cast<int>(vocab.size()),
                                                interpret::read_corpus_jsonl(interp_corpus));
      const auto acts = pipeline::load_activations(interp_acts);
      require(acts.rows() == corpus.n_docs(), ErrorCode::Alignment, "activation rows differ from corpus documents");
      interpret::InterpretReport rep;
      const auto e = interpret::learn_emissions(corpus, pipeline::theta_of(acts), icfg, &rep);
      for (const auto& w : rep.warnings) log_line("warning: " + w);
      interpret::save_emissions(e, interp_c.out);
      io::write_file_atomic(interp_c.out + ".json", interpret::emission_summary_json(e, vocab));
    } else if (*merge_cmd) {
      require(merge_words.empty() != merge_ckpt.empty(), ErrorCode::InvalidArgument,
              "give exactly one of --word-embeddings or --checkpoint");
      const auto vocab = interpret::read_vocab(merge_vocab);
      const auto emissions = interpret::load_emissions(merge_emis);
      std::optional<merge::TopicMerger> merger;
      if (!merge_words.empty()) {
        const auto table = merge::WordEmbeddingTable::load_text(merge_words, vocab);
        merger.emplace(emissions, table, emissions.active_features(), top_p);
      } else {
        const auto model = sae::load_checkpoint<double>(merge_ckpt);
        merger.emplace(emissions, MatrixXd(sae::feature_directions(model)), emissions.active_features());
      }
      fs::create_directories(merge_c.out);
      merge::KMeansOptions opts;
      opts.restarts = restarts;
      for (int k : pipeline::parse_int_list(merge_k)) {
        const auto model = merger->remerge(k, merge_c.seed * 7919ULL + static_cast<std::uint64_t>(k), opts);
        for (const auto& w : model.warnings) log_line("warning: " + w);
        const fs::path p = fs::path(merge_c.out) / ("topics_k" + std::to_string(k) + ".json");
        io::write_file_atomic(p, merge::topic_model_json(model, vocab));
        std::cout << p.string() << '\n';
      }
    } else if (*eval_cmd) {
      pipeline::PipelineConfig cfg;
      if (auto loaded = maybe_config(eval_c)) cfg = *loaded;
      cfg.seed = eval_c.seed;
      if (eval_cmd->count("--judge")) cfg.judge = judge;
      if (eval_cmd->count("--trials")) cfg.trials_per_topic = trials;
      if (eval_cmd->count("--concurrency")) cfg.concurrency = concurrency;
      if (!base_url.empty()) cfg.http.base_url = base_url;
      if (!model_name.empty()) cfg.http.model = model_name;
      require(cfg.judge == "http" || cfg.judge.rfind("stub:", 0) == 0, ErrorCode::InvalidArgument,
              "--judge must be http or stub:<mode>");
      const auto vocab = interpret::read_vocab(eval_vocab);
      std::optional<merge::WordEmbeddingTable> table;
      if (!eval_words.empty()) table = merge::WordEmbeddingTable::load_text(eval_words, vocab);
      auto client = pipeline::make_judge(cfg);
      const auto rep = pipeline::evaluate_topics(merge::read_topic_json(eval_topics), vocab,
                                                 table ? &*table : nullptr, *client, cfg, cfg.seed);
      io::write_file_atomic(eval_c.out, rep.to_json());
      std::cout << "C_I " << rep.c_i << "  C_R " << rep.c_r << "  D " << rep.diversity << '\n';
    } else if (*stats_cmd) {
      const auto acts = pipeline::load_activations(stats_acts);
      const auto topics = merge::read_topic_json(stats_topics);
      const auto docs = interpret::read_corpus_jsonl(stats_corpus);
      std::vector<std::string> groups;
      for (const auto& d : docs) groups.push_back(d.group.value_or("all"));
      const auto stats = pipeline::topic_activity(acts, topics, groups, {}, threshold);
      fs::create_directories(stats_c.out);
      const fs::path out(stats_c.out);
      io::write_file_atomic(out / "activity.csv", pipeline::activity_csv(stats));
      io::write_file_atomic(out / "variance.csv", pipeline::variance_csv(stats));
      const auto top = pipeline::top_variance_topics(stats, top_n);
      io::write_file_atomic(out / "activity.svg", pipeline::activity_svg(stats, top));
      std::cout << "top-variance topics:";
      for (int t : top) std::cout << ' ' << t;
      std::cout << '\n';
    } else if (*pipe_run) {
      auto cfg = pipeline::PipelineConfig::load(pipe_c.config);
      if (seed_given) cfg.seed = pipe_c.seed;
      if (!pipe_c.out.empty()) cfg.out_dir = pipe_c.out;
      const auto result = pipeline::run_pipeline(cfg, log_line);
      int cached = 0;
      for (const auto& s : result.stages) cached += s.cached ? 1 : 0;
      std::cout << result.stages.size() << " stages (" << cached << " cached); report: " << result.report.string()
                << '\n';
    } else if (*fixture) {
      fspec.seed = fix_c.seed ? fix_c.seed : fspec.seed;
      const auto fx = pipeline::write_fixture(fix_c.out, fspec);
      std::cout << "fixture written; run: saetm pipeline run --config " << fx.config.string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return e.code() == ErrorCode::Stage ? kExitStage : kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "E_STAGE: " << e.what() << '\n';
    return kExitStage;
  }
  return 0;
}
