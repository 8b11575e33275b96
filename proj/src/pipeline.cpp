#include "saetm/pipeline.hpp"

#include "saetm/binary_io.hpp"
#include "saetm/checkpoint.hpp"
#include "saetm/ctm.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace saetm::pipeline {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Embedding files

namespace {
constexpr std::string_view kEmbMagic = "EMBV1";
constexpr std::string_view kActsMagic = "ACTS1";
constexpr std::string_view kFeatMagic = "FEMB1";
}  // namespace

std::vector<unsigned char> embedding_bytes(const Matrix<float>& rows) {
  io::ByteWriter w;
  w.magic(kEmbMagic);
  w.put(static_cast<std::uint8_t>(0));
  w.put(static_cast<std::uint64_t>(rows.rows()));
  w.put(static_cast<std::uint32_t>(rows.cols()));
  w.put_f32_block(rows);
  return w.bytes();
}

Matrix<float> parse_embeddings(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  require(r.magic(kEmbMagic), ErrorCode::EmbMagic, "embedding file does not start with EMBV1");
  const auto dtype = r.get<std::uint8_t>();
  require(dtype == 0, ErrorCode::EmbMagic, "unsupported embedding dtype " + std::to_string(dtype));
  const auto n_rows = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint32_t>();
  const std::uint64_t expected = n_rows * dim * 4;
  require(r.remaining() == expected, ErrorCode::EmbSize,
          "payload is " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(expected) +
              " (" + std::to_string(n_rows) + " rows x " + std::to_string(dim) + " x 4)");
  Matrix<float> rows(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(dim));
  r.get_f32_block(rows);
  require(rows.allFinite(), ErrorCode::NonFinite, "embedding payload contains non-finite values");
  return rows;
}

fs::path ids_sidecar(const fs::path& embedding_path) {
  fs::path p = embedding_path;
  p += ".ids";
  return p;
}

EmbeddingFile read_embeddings(const fs::path& path) {
  EmbeddingFile out;
  out.rows = parse_embeddings(io::read_file(path));
  const fs::path sidecar = ids_sidecar(path);
  if (fs::exists(sidecar)) {
    std::istringstream in(io::read_text(sidecar));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      out.ids.push_back(line);
    }
    require(static_cast<Eigen::Index>(out.ids.size()) == out.rows.rows(), ErrorCode::Alignment,
            "id sidecar has " + std::to_string(out.ids.size()) + " lines for " +
                std::to_string(out.rows.rows()) + " rows");
  }
  return out;
}

void write_embeddings(const fs::path& path, const Matrix<float>& rows, const std::vector<std::string>& ids) {
  io::write_file_atomic(path, embedding_bytes(rows));
  if (!ids.empty()) {
    require(static_cast<Eigen::Index>(ids.size()) == rows.rows(), ErrorCode::Alignment,
            "one id per embedding row required");
    std::string text;
    for (const auto& id : ids) text += id + '\n';
    io::write_file_atomic(ids_sidecar(path), text);
  }
}

// ---------------------------------------------------------------------------
// Activation files

std::vector<unsigned char> activation_bytes(const SparseRows<double>& acts) {
  io::ByteWriter w;
  w.magic(kActsMagic);
  w.put(static_cast<std::uint64_t>(acts.rows()));
  w.put(static_cast<std::uint32_t>(acts.cols()));
  for (Eigen::Index r = 0; r < acts.rows(); ++r) {
    std::vector<std::pair<std::uint32_t, float>> entries;
    for (SparseRows<double>::InnerIterator it(acts, r); it; ++it)
      if (it.value() != 0.0) entries.emplace_back(static_cast<std::uint32_t>(it.col()), static_cast<float>(it.value()));
    w.put(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [c, v] : entries) {
      w.put(c);
      w.put(v);
    }
  }
  return w.bytes();
}

SparseRows<double> parse_activations(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  require(r.magic(kActsMagic), ErrorCode::EmbMagic, "activation file does not start with ACTS1");
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint32_t>();
  std::vector<Eigen::Triplet<double, std::int64_t>> triplets;
  for (std::uint64_t i = 0; i < rows; ++i) {
    const auto nnz = r.get<std::uint32_t>();
    for (std::uint32_t j = 0; j < nnz; ++j) {
      const auto c = r.get<std::uint32_t>();
      const auto v = r.get<float>();
      require(c < cols, ErrorCode::EmbSize, "activation column out of range");
      triplets.emplace_back(static_cast<std::int64_t>(i), static_cast<std::int64_t>(c), static_cast<double>(v));
    }
  }
  require(r.remaining() == 0, ErrorCode::EmbSize, "trailing bytes after activation rows");
  SparseRows<double> out(static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols));
  out.setFromTriplets(triplets.begin(), triplets.end());
  return out;
}

void save_activations(const SparseRows<double>& acts, const fs::path& path) {
  io::write_file_atomic(path, activation_bytes(acts));
}

SparseRows<double> load_activations(const fs::path& path) { return parse_activations(io::read_file(path)); }

SparseRows<double> theta_of(const SparseRows<double>& acts) {
  SparseRows<double> out = acts;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double s = 0.0;
    for (SparseRows<double>::InnerIterator it(out, r); it; ++it) s += it.value();
    if (s <= 0.0) continue;
    for (SparseRows<double>::InnerIterator it(out, r); it; ++it) it.valueRef() /= s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion

std::vector<std::string> Dataset::doc_groups() const {
  std::vector<std::string> out;
  out.reserve(corpus.docs.size());
  for (const auto& d : corpus.docs) out.push_back(d.group.value_or(""));
  return out;
}

Dataset ingest(const fs::path& embedding_path, const fs::path& corpus_path, const fs::path& vocab_path) {
  Dataset data;
  EmbeddingFile emb = read_embeddings(embedding_path);
  data.embeddings = std::move(emb.rows);
  data.embedding_ids = std::move(emb.ids);
  data.vocab = interpret::read_vocab(vocab_path);
  require(!data.vocab.empty(), ErrorCode::VocabRange, "vocabulary is empty");
  auto docs = interpret::read_corpus_jsonl(corpus_path);
  require(static_cast<Eigen::Index>(docs.size()) == data.embeddings.rows(), ErrorCode::Alignment,
          std::to_string(data.embeddings.rows()) + " embedding rows but " + std::to_string(docs.size()) +
              " corpus documents");
  if (!data.embedding_ids.empty())
    for (std::size_t i = 0; i < docs.size(); ++i)
      require(docs[i].id == data.embedding_ids[i], ErrorCode::Alignment,
              "row " + std::to_string(i) + " has id '" + data.embedding_ids[i] + "' but corpus line has '" +
                  docs[i].id + "'");
  data.corpus = interpret::BowCorpus::build(static_cast<int>(data.vocab.size()), std::move(docs));
  data.idf = interpret::idf_weights(data.corpus);
  return data;
}

void export_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  write_embeddings(dir / "embeddings.emb", data.embeddings, data.embedding_ids);
  io::write_file_atomic(dir / "corpus.jsonl", interpret::corpus_jsonl(data.corpus.docs));
  io::write_file_atomic(dir / "vocab.txt", interpret::vocab_text(data.vocab));
}

// ---------------------------------------------------------------------------
// Group statistics

GroupStats topic_activity(const SparseRows<double>& acts, const std::vector<merge::TopicSummary>& topics,
                          const std::vector<std::string>& doc_groups,
                          const std::vector<std::string>& known_groups, double threshold) {
  require(static_cast<Eigen::Index>(doc_groups.size()) == acts.rows(), ErrorCode::Alignment,
          "group labels must align with activation rows");
  const std::set<std::string> known(known_groups.begin(), known_groups.end());
  std::map<std::string, int> index;
  for (const auto& g : doc_groups) {
    require(!g.empty(), ErrorCode::InvalidArgument, "document without a group label");
    require(known.empty() || known.count(g), ErrorCode::InvalidArgument, "unknown group label '" + g + "'");
    index.emplace(g, 0);
  }
  require(!index.empty(), ErrorCode::InvalidArgument, "no documents");

  GroupStats s;
  s.threshold = threshold;
  for (auto& [name, i] : index) {
    i = static_cast<int>(s.groups.size());
    s.groups.push_back(name);
  }
  const auto n_groups = static_cast<Eigen::Index>(s.groups.size());
  const auto n_topics = static_cast<Eigen::Index>(topics.size());
  s.group_sizes.assign(s.groups.size(), 0);
  std::vector<std::vector<int>> topics_of_feature(static_cast<std::size_t>(acts.cols()));
  for (std::size_t t = 0; t < topics.size(); ++t) {
    s.topic_ids.push_back(topics[t].id);
    for (int k : topics[t].members) {
      require(k >= 0 && k < acts.cols(), ErrorCode::InvalidArgument, "topic member outside activation columns");
      topics_of_feature[static_cast<std::size_t>(k)].push_back(static_cast<int>(t));
    }
  }

  MatrixXd counts = MatrixXd::Zero(n_groups, n_topics);
  std::vector<char> seen(topics.size());
  for (Eigen::Index r = 0; r < acts.rows(); ++r) {
    const int g = index.at(doc_groups[static_cast<std::size_t>(r)]);
    ++s.group_sizes[static_cast<std::size_t>(g)];
    std::fill(seen.begin(), seen.end(), 0);
    for (SparseRows<double>::InnerIterator it(acts, r); it; ++it) {
      if (!(it.value() > 0.0)) continue;
      for (int t : topics_of_feature[static_cast<std::size_t>(it.col())]) seen[static_cast<std::size_t>(t)] = 1;
    }
    for (Eigen::Index t = 0; t < n_topics; ++t)
      if (seen[static_cast<std::size_t>(t)]) counts(g, t) += 1.0;
  }
  s.activity.resize(n_groups, n_topics);
  for (Eigen::Index g = 0; g < n_groups; ++g)
    s.activity.row(g) = counts.row(g) / static_cast<double>(s.group_sizes[static_cast<std::size_t>(g)]);
  s.macro_ratio = s.activity.colwise().mean().transpose();
  s.variance.resize(n_topics);
  s.over_active.resize(topics.size());
  for (Eigen::Index t = 0; t < n_topics; ++t) {
    s.variance[t] = (s.activity.col(t).array() - s.macro_ratio[t]).square().mean();
    s.over_active[static_cast<std::size_t>(t)] = s.macro_ratio[t] > threshold;
  }
  return s;
}

std::vector<int> top_variance_topics(const GroupStats& stats, int n) {
  require(!stats.groups.empty(), ErrorCode::InvalidArgument, "stats have no groups");
  std::vector<std::size_t> order;
  for (std::size_t t = 0; t < stats.topic_ids.size(); ++t)
    if (!stats.over_active[t]) order.push_back(t);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double va = stats.variance[static_cast<Eigen::Index>(a)];
    const double vb = stats.variance[static_cast<Eigen::Index>(b)];
    if (va != vb) return va > vb;
    return stats.topic_ids[a] < stats.topic_ids[b];
  });
  std::vector<int> out;
  for (std::size_t i = 0; i < order.size() && static_cast<int>(i) < n; ++i) out.push_back(stats.topic_ids[order[i]]);
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string activity_csv(const GroupStats& stats) {
  std::string out = "topic,group,group_size,activity_ratio\n";
  for (std::size_t t = 0; t < stats.topic_ids.size(); ++t)
    for (std::size_t g = 0; g < stats.groups.size(); ++g)
      out += std::to_string(stats.topic_ids[t]) + ',' + stats.groups[g] + ',' + std::to_string(stats.group_sizes[g]) +
             ',' + fmt(stats.activity(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(t))) + '\n';
  return out;
}

std::string variance_csv(const GroupStats& stats) {
  std::string out = "topic,macro_ratio,variance,over_active\n";
  for (std::size_t t = 0; t < stats.topic_ids.size(); ++t)
    out += std::to_string(stats.topic_ids[t]) + ',' + fmt(stats.macro_ratio[static_cast<Eigen::Index>(t)]) + ',' +
           fmt(stats.variance[static_cast<Eigen::Index>(t)]) + ',' + (stats.over_active[t] ? "1" : "0") + '\n';
  return out;
}

std::string activity_svg(const GroupStats& stats, const std::vector<int>& topic_ids) {
  static const char* kColors[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1"};
  const int n_groups = static_cast<int>(stats.groups.size());
  const int bar = 12;
  const int gap = 16;
  const int plot_h = 200;
  const int left = 40;
  const int top = 20;
  const int slot = n_groups * bar + gap;
  const int width = left + std::max<int>(1, static_cast<int>(topic_ids.size())) * slot + 120;
  const int height = top + plot_h + 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 120 << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = top + plot_h - tick * plot_h / 4;
    svg << "<text x=\"2\" y=\"" << y + 3 << "\">" << fmt(tick * 0.25).substr(0, 4) << "</text>\n";
  }
  std::map<int, std::size_t> column;
  for (std::size_t t = 0; t < stats.topic_ids.size(); ++t) column[stats.topic_ids[t]] = t;
  for (std::size_t i = 0; i < topic_ids.size(); ++i) {
    const auto it = column.find(topic_ids[i]);
    if (it == column.end()) continue;
    const int x0 = left + static_cast<int>(i) * slot + gap / 2;
    for (int g = 0; g < n_groups; ++g) {
      const double ratio = stats.activity(g, static_cast<Eigen::Index>(it->second));
      const int h = static_cast<int>(std::lround(ratio * plot_h));
      svg << "<rect x=\"" << x0 + g * bar << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar - 1
          << "\" height=\"" << h << "\" fill=\"" << kColors[g % 7] << "\"/>\n";
    }
    svg << "<text x=\"" << x0 << "\" y=\"" << top + plot_h + 14 << "\">t" << topic_ids[i] << "</text>\n";
  }
  for (int g = 0; g < n_groups; ++g) {
    const int y = top + 10 + g * 14;
    svg << "<rect x=\"" << width - 110 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\""
        << kColors[g % 7] << "\"/>\n";
    svg << "<text x=\"" << width - 95 << "\" y=\"" << y << "\">" << stats.groups[static_cast<std::size_t>(g)]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

// ---------------------------------------------------------------------------
// Configuration

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    const std::string trimmed = item.substr(b, e - b + 1);
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(trimmed, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == trimmed.size() && used > 0, ErrorCode::ConfigParse, "not an integer: '" + trimmed + "'");
    out.push_back(v);
  }
  return out;
}

namespace {

namespace pt = boost::property_tree;

class Section {
 public:
  Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::optional<std::string> raw(const std::string& key) const {
    if (!tree_) return std::nullopt;
    const auto child = tree_->get_child_optional(key);
    if (!child) return std::nullopt;
    return child->data();
  }

  template <typename T>
  void read(const std::string& key, T& target) const {
    const auto text = raw(key);
    if (!text) return;
    std::istringstream in(*text);
    T value{};
    if constexpr (std::is_same_v<T, bool>) {
      std::string word;
      in >> word;
      if (word == "true" || word == "1" || word == "yes" || word == "on")
        value = true;
      else if (word == "false" || word == "0" || word == "no" || word == "off")
        value = false;
      else
        throw Error(ErrorCode::ConfigParse, where(key) + ": expected a boolean, got '" + *text + "'");
    } else {
      in >> value;
      require(!in.fail() && (in >> std::ws).eof(), ErrorCode::ConfigParse,
              where(key) + ": cannot parse '" + *text + "'");
    }
    target = value;
  }

  void read_path(const std::string& key, fs::path& target, const fs::path& base) const {
    const auto text = raw(key);
    if (!text) return;
    if (text->empty()) {
      target.clear();
      return;
    }
    const fs::path p(*text);
    target = (p.is_absolute() || base.empty()) ? p : base / p;
  }

  void check_keys(const std::set<std::string>& allowed) const {
    if (!tree_) return;
    for (const auto& [key, child] : *tree_)
      require(allowed.count(key), ErrorCode::ConfigParse, "unknown key [" + name_ + "] " + key);
  }

  std::string where(const std::string& key) const { return "[" + name_ + "] " + key; }

 private:
  const pt::ptree* tree_;
  std::string name_;
};

}  // namespace

PipelineConfig PipelineConfig::parse(const std::string& text, const fs::path& base_dir) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorCode::ConfigParse, e.what());
  }
  const std::set<std::string> sections{"run", "data", "sae", "interpret", "merge", "eval", "stats"};
  for (const auto& [name, child] : tree) {
    require(sections.count(name), ErrorCode::ConfigParse, "unknown section [" + name + "]");
    require(child.data().empty() || !child.empty(), ErrorCode::ConfigParse,
            "key '" + name + "' outside a section");
  }
  const auto section = [&](const std::string& name) {
    const auto child = tree.get_child_optional(name);
    return Section(child ? &*child : nullptr, name);
  };

  PipelineConfig c;
  const Section run = section("run");
  run.check_keys({"seed", "out"});
  run.read("seed", c.seed);
  run.read_path("out", c.out_dir, base_dir);

  const Section data = section("data");
  data.check_keys({"embeddings", "corpus", "vocab", "word_embeddings"});
  data.read_path("embeddings", c.embeddings, base_dir);
  data.read_path("corpus", c.corpus, base_dir);
  data.read_path("vocab", c.vocab, base_dir);
  data.read_path("word_embeddings", c.word_embeddings, base_dir);

  const Section s = section("sae");
  s.check_keys({"checkpoint", "activation", "expansion", "k", "l1_beta", "steps", "batch_size", "learning_rate",
                "dead_feature_window", "resample_dead"});
  s.read_path("checkpoint", c.sae_checkpoint, base_dir);
  if (const auto a = s.raw("activation")) {
    try {
      c.activation = sae::parse_activation_kind(*a);
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigParse, s.where("activation") + ": " + e.what());
    }
  }
  s.read("expansion", c.expansion);
  s.read("k", c.train.k_active);
  s.read("l1_beta", c.train.l1_beta);
  s.read("steps", c.train.steps);
  s.read("batch_size", c.train.batch_size);
  s.read("learning_rate", c.train.learning_rate);
  s.read("dead_feature_window", c.train.dead_feature_window);
  s.read("resample_dead", c.train.resample_dead);

  const Section ip = section("interpret");
  ip.check_keys({"pi", "steps", "batch_size", "learning_rate", "idf_weighting"});
  ip.read("pi", c.interpret.pi);
  ip.read("steps", c.interpret.steps);
  ip.read("batch_size", c.interpret.batch_size);
  ip.read("learning_rate", c.interpret.learning_rate);
  ip.read("idf_weighting", c.interpret.idf_weighting);

  const Section m = section("merge");
  m.check_keys({"k_prime", "top_p", "space", "restarts"});
  if (const auto k = m.raw("k_prime")) c.k_prime = parse_int_list(*k);
  m.read("top_p", c.top_p);
  if (const auto sp = m.raw("space")) c.merge_space = *sp;
  m.read("restarts", c.kmeans_restarts);

  const Section e = section("eval");
  e.check_keys({"judge", "trials_per_topic", "rating_samples", "concurrency", "max_retries", "classify", "top_words",
                "base_url", "endpoint_path", "model", "api_key_env", "timeout_ms", "temperature"});
  if (const auto j = e.raw("judge")) c.judge = *j;
  e.read("trials_per_topic", c.trials_per_topic);
  e.read("rating_samples", c.rating_samples);
  e.read("concurrency", c.concurrency);
  e.read("max_retries", c.max_retries);
  e.read("classify", c.classify);
  e.read("top_words", c.top_words);
  if (const auto v = e.raw("base_url")) c.http.base_url = *v;
  if (const auto v = e.raw("endpoint_path")) c.http.path = *v;
  if (const auto v = e.raw("model")) c.http.model = *v;
  if (const auto v = e.raw("api_key_env")) c.http.api_key_env = *v;
  long long timeout_ms = c.http.timeout.count();
  e.read("timeout_ms", timeout_ms);
  c.http.timeout = std::chrono::milliseconds(timeout_ms);
  e.read("temperature", c.http.temperature);

  const Section st = section("stats");
  st.check_keys({"over_active_threshold", "top_variance"});
  st.read("over_active_threshold", c.over_active_threshold);
  st.read("top_variance", c.top_variance);

  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigParse, e.what());
  }
  return parse(text, path.parent_path());
}

void PipelineConfig::validate() const {
  const auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::ConfigParse, msg); };
  check(!embeddings.empty() && !corpus.empty() && !vocab.empty(), "[data] embeddings, corpus and vocab are required");
  check(expansion >= 1, "[sae] expansion must be >= 1");
  check(train.steps >= 1 && train.batch_size >= 1, "[sae] steps and batch_size must be >= 1");
  check(train.learning_rate > 0.0, "[sae] learning_rate must be > 0");
  if (activation != sae::ActivationKind::ReluL1) check(train.k_active >= 1, "[sae] k must be >= 1");
  check(interpret.pi > 0.0 && interpret.pi < 1.0, "[interpret] pi must lie in (0, 1)");
  check(interpret.steps >= 1 && interpret.learning_rate > 0.0, "[interpret] steps and learning_rate must be positive");
  check(!k_prime.empty(), "[merge] k_prime needs at least one value");
  for (int k : k_prime) check(k >= 1, "[merge] k_prime values must be >= 1");
  check(top_p > 0.0 && top_p <= 1.0, "[merge] top_p must lie in (0, 1]");
  check(merge_space == "words" || merge_space == "decoder", "[merge] space must be 'words' or 'decoder'");
  check(merge_space == "decoder" || !word_embeddings.empty(),
        "[merge] space = words needs [data] word_embeddings");
  check(kmeans_restarts >= 1, "[merge] restarts must be >= 1");
  check(judge == "http" || judge.rfind("stub:", 0) == 0, "[eval] judge must be 'http' or 'stub:<mode>'");
  if (judge == "http") check(!http.base_url.empty() && !http.model.empty(), "[eval] http judge needs base_url and model");
  check(trials_per_topic >= 1 && rating_samples >= 1, "[eval] trials_per_topic and rating_samples must be >= 1");
  check(concurrency >= 1 && max_retries >= 0, "[eval] concurrency must be >= 1, max_retries >= 0");
  check(top_words >= 5, "[eval] top_words must be >= 5");
  check(over_active_threshold >= 0.0 && over_active_threshold <= 1.0, "[stats] over_active_threshold must lie in [0, 1]");
  check(top_variance >= 1, "[stats] top_variance must be >= 1");
}

// ---------------------------------------------------------------------------
// Running

std::unique_ptr<eval::JudgeClient> make_judge(const PipelineConfig& cfg) {
  if (cfg.judge == "http") return std::make_unique<eval::HttpJudge>(cfg.http);
  return std::make_unique<eval::StubJudge>(eval::StubJudge::parse_mode(cfg.judge.substr(5)), cfg.seed);
}

eval::EvalReport evaluate_topics(const std::vector<merge::TopicSummary>& topics,
                                 const std::vector<std::string>& vocab, const merge::WordEmbeddingTable* table,
                                 eval::JudgeClient& judge, const PipelineConfig& cfg, std::uint64_t seed) {
  eval::EvalReport report;
  report.judge = judge.describe();
  report.trials_per_topic = cfg.trials_per_topic;
  const auto words = eval::topic_words(topics, vocab);
  eval::RunOptions opts{cfg.concurrency, cfg.max_retries};

  auto intruder = eval::make_intruder_tasks(words, cfg.trials_per_topic, seed);
  report.warnings.insert(report.warnings.end(), intruder.warnings.begin(), intruder.warnings.end());
  const auto ci = eval::run_judge(intruder.tasks, judge, opts);
  report.c_i = ci.macro_mean;
  report.topic_c_i = ci.per_topic;
  report.failed_tasks += ci.failed;

  auto rating = eval::make_rating_tasks(words, cfg.rating_samples);
  report.warnings.insert(report.warnings.end(), rating.warnings.begin(), rating.warnings.end());
  const auto cr = eval::run_judge(rating.tasks, judge, opts);
  report.c_r = cr.macro_mean;
  report.topic_c_r = cr.per_topic;
  report.failed_tasks += cr.failed;

  if (cfg.classify) {
    const auto classify = eval::make_classify_tasks(words);
    const auto out = eval::run_judge(classify.tasks, judge, opts);
    for (std::size_t i = 0; i < classify.tasks.size(); ++i)
      if (const auto& label = out.results[i].label)
        report.warnings.push_back("topic " + std::to_string(classify.tasks[i].topic_id) + " classified " + *label);
  }

  if (table) {
    const auto d = eval::diversity(words, *table);
    report.diversity = d.mean;
    report.diversity_excluded_pairs = d.excluded_pairs;
    report.diversity_dropped_words = d.dropped_words;
    if (d.dropped_words > 0)
      report.warnings.push_back(std::to_string(d.dropped_words) + " top words have no word embedding");
  } else {
    report.warnings.push_back("no word embeddings configured; diversity not computed");
  }
  return report;
}

namespace {

std::string file_hash(const fs::path& p) { return io::sha256_hex(io::read_file(p)); }

std::vector<unsigned char> feature_embedding_bytes(const std::vector<int>& features, const MatrixXd& emb) {
  io::ByteWriter w;
  w.magic(kFeatMagic);
  w.put(static_cast<std::uint32_t>(features.size()));
  w.put(static_cast<std::uint32_t>(emb.cols()));
  for (int f : features) w.put(static_cast<std::int32_t>(f));
  for (Eigen::Index i = 0; i < emb.size(); ++i) w.put(emb.data()[i]);
  return w.bytes();
}

std::pair<std::vector<int>, MatrixXd> parse_feature_embeddings(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  require(r.magic(kFeatMagic), ErrorCode::Stage, "bad feature embedding cache");
  const auto n = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  std::vector<int> features(n);
  for (auto& f : features) f = r.get<std::int32_t>();
  MatrixXd emb(n, d);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = r.get<double>();
  return {std::move(features), std::move(emb)};
}

class StageRunner {
 public:
  StageRunner(fs::path out, const LogFn& log, PipelineResult& result)
      : out_(std::move(out)), log_(log), result_(result) {
    fs::create_directories(out_ / "stamps");
  }

  template <typename F>
  void run(const std::string& stage, const std::string& input_hash, const std::vector<fs::path>& outputs, F&& body) {
    const fs::path stamp = out_ / "stamps" / (stage + ".stamp");
    bool fresh = fs::exists(stamp) && io::read_text(stamp) == input_hash;
    for (const auto& o : outputs) fresh = fresh && fs::exists(o);
    if (fresh) {
      say("[" + stage + "] up to date (" + input_hash.substr(0, 12) + ")");
    } else {
      say("[" + stage + "] running");
      try {
        body();
      } catch (const std::exception& e) {
        append_log(stage, input_hash, "failed");
        throw Error(ErrorCode::Stage, "stage '" + stage + "' failed: " + e.what());
      }
      io::write_file_atomic(stamp, input_hash);
    }
    append_log(stage, input_hash, fresh ? "cached" : "computed");
    result_.stages.push_back({stage, input_hash, fresh});
    for (const auto& o : outputs) result_.artifacts.push_back(o);
  }

  void say(const std::string& msg) const {
    if (log_) log_(msg);
  }

 private:
  void append_log(const std::string& stage, const std::string& hash, const std::string& action) {
    json j;
    j["stage"] = stage;
    j["input_hash"] = hash;
    j["action"] = action;
    const fs::path p = out_ / "hash_log.jsonl";
    std::string text = fs::exists(p) ? io::read_text(p) : std::string();
    text += j.dump() + "\n";
    io::write_file_atomic(p, text);
  }

  fs::path out_;
  const LogFn& log_;
  PipelineResult& result_;
};

std::string hash_of(const json& j) { return io::sha256_hex(j.dump()); }

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const LogFn& log) {
  cfg.validate();
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  PipelineResult result;
  StageRunner runner(out, log, result);

  // Alignment is checked before anything runs.
  Dataset data;
  try {
    data = ingest(cfg.embeddings, cfg.corpus, cfg.vocab);
  } catch (const Error& e) {
    throw Error(e.code(), std::string("ingest: ") + e.what());
  }
  const std::string emb_hash = file_hash(cfg.embeddings);
  const std::string corpus_hash = file_hash(cfg.corpus);
  const std::string vocab_hash = file_hash(cfg.vocab);
  const std::string words_hash = cfg.word_embeddings.empty() ? "" : file_hash(cfg.word_embeddings);
  std::optional<merge::WordEmbeddingTable> table;
  if (!cfg.word_embeddings.empty()) table = merge::WordEmbeddingTable::load_text(cfg.word_embeddings, data.vocab);

  // sae
  const fs::path ckpt = out / "sae.ckpt";
  json sae_in;
  if (!cfg.sae_checkpoint.empty()) {
    sae_in["load"] = file_hash(cfg.sae_checkpoint);
  } else {
    sae_in["embeddings"] = emb_hash;
    sae_in["activation"] = sae::to_string(cfg.activation);
    sae_in["expansion"] = cfg.expansion;
    sae_in["k"] = cfg.train.k_active;
    sae_in["l1_beta"] = cfg.train.l1_beta;
    sae_in["steps"] = cfg.train.steps;
    sae_in["batch_size"] = cfg.train.batch_size;
    sae_in["lr"] = cfg.train.learning_rate;
    sae_in["dead_window"] = cfg.train.dead_feature_window;
    sae_in["resample"] = cfg.train.resample_dead;
    sae_in["seed"] = cfg.seed;
  }
  runner.run("sae", hash_of(sae_in), {ckpt}, [&] {
    if (!cfg.sae_checkpoint.empty()) {
      const auto model = sae::load_checkpoint<double>(cfg.sae_checkpoint);
      require(model.d_in() == data.embeddings.cols(), ErrorCode::DimensionMismatch,
              "checkpoint expects d = " + std::to_string(model.d_in()) + ", embeddings have " +
                  std::to_string(data.embeddings.cols()));
      sae::save_checkpoint(model, ckpt);
      return;
    }
    sae::TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    sae::TrainReport rep;
    const MatrixXd x = data.embeddings.cast<double>();
    const auto model = sae::train_on_matrix(x, cfg.expansion, cfg.activation, tc, &rep);
    runner.say("[sae] final loss " + std::to_string(rep.losses.empty() ? 0.0 : rep.losses.back()) +
               ", R^2 " + std::to_string(sae::r_squared(model, x)));
    sae::save_checkpoint(model, ckpt);
  });
  const std::string ckpt_hash = file_hash(ckpt);

  // encode
  const fs::path acts_path = out / "activations.bin";
  runner.run("encode", hash_of(json{{"checkpoint", ckpt_hash}, {"embeddings", emb_hash}}), {acts_path}, [&] {
    const auto model = sae::load_checkpoint<double>(ckpt);
    const MatrixXd x = data.embeddings.cast<double>();
    std::vector<Eigen::Triplet<double, std::int64_t>> trip;
    const Eigen::Index chunk = 1024;
    for (Eigen::Index r0 = 0; r0 < x.rows(); r0 += chunk) {
      const Eigen::Index n = std::min(chunk, x.rows() - r0);
      const auto a = sae::encode(model, MatrixXd(x.middleRows(r0, n)));
      for (Eigen::Index r = 0; r < n; ++r)
        for (SparseRows<double>::InnerIterator it(a.values, r); it; ++it)
          trip.emplace_back(r0 + r, it.col(), it.value());
    }
    SparseRows<double> acts(x.rows(), model.n_features());
    acts.setFromTriplets(trip.begin(), trip.end());
    save_activations(acts, acts_path);
  });
  const std::string acts_hash = file_hash(acts_path);

  // interpret
  const fs::path emis_path = out / "emissions.bin";
  const fs::path emis_summary = out / "emissions.json";
  json interp_in{{"activations", acts_hash}, {"corpus", corpus_hash}, {"vocab", vocab_hash},
                 {"pi", cfg.interpret.pi}, {"steps", cfg.interpret.steps},
                 {"batch_size", cfg.interpret.batch_size}, {"lr", cfg.interpret.learning_rate},
                 {"idf", cfg.interpret.idf_weighting}, {"seed", cfg.seed}};
  runner.run("interpret", hash_of(interp_in), {emis_path, emis_summary}, [&] {
    interpret::InterpretConfig ic = cfg.interpret;
    ic.seed = cfg.seed + 1;
    interpret::InterpretReport rep;
    const auto acts = load_activations(acts_path);
    const auto e = interpret::learn_emissions(data.corpus, theta_of(acts), ic, &rep);
    for (const auto& w : rep.warnings) runner.say("[interpret] warning: " + w);
    interpret::save_emissions(e, emis_path);
    // The summary is rendered from the saved (float32) matrix, like every later stage.
    io::write_file_atomic(emis_summary,
                          interpret::emission_summary_json(interpret::load_emissions(emis_path), data.vocab));
  });
  const std::string emis_hash = file_hash(emis_path);
  const auto emissions = interpret::load_emissions(emis_path);

  // embed: feature embeddings cached for every later K'
  const fs::path feat_path = out / "feature_embeddings.bin";
  json embed_in{{"emissions", emis_hash}, {"space", cfg.merge_space}, {"top_p", cfg.top_p}};
  if (cfg.merge_space == "words")
    embed_in["word_embeddings"] = words_hash;
  else
    embed_in["checkpoint"] = ckpt_hash;
  runner.run("embed", hash_of(embed_in), {feat_path}, [&] {
    std::vector<int> features;
    MatrixXd emb;
    if (cfg.merge_space == "words") {
      std::vector<VectorXd> rows;
      int skipped = 0;
      for (int k : emissions.active_features()) {
        try {
          rows.push_back(merge::topic_embedding(emissions.b.row(k).transpose(), *table, cfg.top_p));
          features.push_back(k);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::EmptySupport) throw;
          ++skipped;
        }
      }
      if (skipped) runner.say("[embed] " + std::to_string(skipped) + " features have no covered top words; dropped");
      emb.resize(static_cast<Eigen::Index>(rows.size()), table->dim());
      for (std::size_t i = 0; i < rows.size(); ++i) emb.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    } else {
      const auto model = sae::load_checkpoint<double>(ckpt);
      merge::TopicMerger m(emissions, MatrixXd(sae::feature_directions(model)), emissions.active_features());
      features = m.features();
      emb = m.embeddings();
    }
    io::write_file_atomic(feat_path, feature_embedding_bytes(features, emb));
  });
  const std::string feat_hash = file_hash(feat_path);
  auto [features, feat_emb] = parse_feature_embeddings(io::read_file(feat_path));
  const auto merger = merge::TopicMerger::from_embeddings(emissions, feat_emb, features);

  std::unique_ptr<eval::JudgeClient> judge;
  json report;
  report["seed"] = cfg.seed;
  report["sae_checkpoint"] = ckpt_hash;
  report["emission_hash"] = emis_hash;
  report["features"] = emissions.n_features();
  report["retained_features"] = features.size();
  json runs = json::array();

  for (int k_prime : cfg.k_prime) {
    const std::string tag = "k" + std::to_string(k_prime);
    const fs::path topics_path = out / ("topics_" + tag + ".json");
    const std::uint64_t merge_seed = cfg.seed * 7919ULL + static_cast<std::uint64_t>(k_prime);
    json merge_in{{"features", feat_hash}, {"emissions", emis_hash}, {"vocab", vocab_hash}, {"k_prime", k_prime},
                  {"seed", merge_seed}, {"restarts", cfg.kmeans_restarts}, {"top_words", cfg.top_words}};
    runner.run("merge_" + tag, hash_of(merge_in), {topics_path}, [&] {
      merge::KMeansOptions opts;
      opts.restarts = cfg.kmeans_restarts;
      const auto model = merger.remerge(k_prime, merge_seed, opts);
      for (const auto& w : model.warnings) runner.say("[merge_" + tag + "] warning: " + w);
      io::write_file_atomic(topics_path, merge::topic_model_json(model, data.vocab, cfg.top_words));
    });
    const std::string topics_hash = file_hash(topics_path);

    const fs::path eval_path = out / ("eval_" + tag + ".json");
    const fs::path wmd_path = out / ("wmd_" + tag + ".csv");
    json eval_in{{"topics", topics_hash}, {"judge", cfg.judge}, {"trials", cfg.trials_per_topic},
                 {"rating_samples", cfg.rating_samples}, {"classify", cfg.classify},
                 {"word_embeddings", words_hash}, {"seed", cfg.seed}};
    if (cfg.judge == "http") eval_in["endpoint"] = cfg.http.base_url + cfg.http.path + "|" + cfg.http.model;
    std::vector<fs::path> eval_outputs{eval_path};
    if (table) eval_outputs.push_back(wmd_path);
    runner.run("eval_" + tag, hash_of(eval_in), eval_outputs, [&] {
      if (!judge) judge = make_judge(cfg);
      const auto topics = merge::read_topic_json(topics_path);
      const auto rep = evaluate_topics(topics, data.vocab, table ? &*table : nullptr, *judge, cfg,
                                       cfg.seed + 1000ULL + static_cast<std::uint64_t>(k_prime));
      io::write_file_atomic(eval_path, rep.to_json());
      if (table) {
        const auto words = eval::topic_words(topics, data.vocab);
        io::write_file_atomic(wmd_path, eval::pairwise_csv(eval::diversity(words, *table), words));
      }
    });

    const fs::path act_csv = out / ("activity_" + tag + ".csv");
    const fs::path var_csv = out / ("variance_" + tag + ".csv");
    const fs::path svg = out / ("activity_" + tag + ".svg");
    json stats_in{{"topics", topics_hash}, {"activations", acts_hash}, {"corpus", corpus_hash},
                  {"threshold", cfg.over_active_threshold}, {"top", cfg.top_variance}};
    runner.run("stats_" + tag, hash_of(stats_in), {act_csv, var_csv, svg}, [&] {
      const auto topics = merge::read_topic_json(topics_path);
      auto groups = data.doc_groups();
      for (auto& g : groups)
        if (g.empty()) g = "all";
      const auto stats = topic_activity(load_activations(acts_path), topics, groups, {}, cfg.over_active_threshold);
      io::write_file_atomic(act_csv, activity_csv(stats));
      io::write_file_atomic(var_csv, variance_csv(stats));
      io::write_file_atomic(svg, activity_svg(stats, top_variance_topics(stats, cfg.top_variance)));
    });

    json entry;
    entry["k_prime"] = k_prime;
    entry["topics"] = topics_path.filename().string();
    entry["topics_hash"] = topics_hash;
    entry["eval"] = json::parse(io::read_text(eval_path));
    entry["activity_csv"] = act_csv.filename().string();
    runs.push_back(entry);
  }
  report["runs"] = runs;

  result.report = out / "report.json";
  io::write_file_atomic(result.report, report.dump(2) + "\n");
  result.artifacts.push_back(result.report);
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic fixture

Fixture write_fixture(const fs::path& dir, const FixtureSpec& spec) {
  require(spec.topics >= 2 && spec.docs >= 1 && spec.dim >= 2 && spec.groups >= 1, ErrorCode::InvalidArgument,
          "fixture dimensions too small");
  const int per_topic = (spec.vocab - 8) / spec.topics;
  require(per_topic >= 5, ErrorCode::InvalidArgument, "vocabulary too small for the number of topics");
  const int n_common = spec.vocab - per_topic * spec.topics;
  fs::create_directories(dir);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Fixture fx;
  const auto K = static_cast<Eigen::Index>(spec.topics);
  const auto V = static_cast<Eigen::Index>(spec.vocab);
  fx.true_directions.resize(K, spec.dim);
  for (Eigen::Index i = 0; i < fx.true_directions.size(); ++i) fx.true_directions.data()[i] = normal(rng);
  fx.true_directions.rowwise().normalize();

  std::vector<std::string> vocab;
  for (int k = 0; k < spec.topics; ++k)
    for (int j = 0; j < per_topic; ++j) vocab.push_back("t" + std::to_string(k) + "w" + std::to_string(j));
  for (int j = 0; j < n_common; ++j) vocab.push_back("common" + std::to_string(j));

  // Each topic puts 90% of its mass on its own words (Zipf-shaped).
  fx.true_emissions = MatrixXd::Constant(K, V, 0.1 / static_cast<double>(V));
  for (int k = 0; k < spec.topics; ++k) {
    double z = 0.0;
    for (int j = 0; j < per_topic; ++j) z += 1.0 / (j + 1);
    for (int j = 0; j < per_topic; ++j) fx.true_emissions(k, k * per_topic + j) += 0.9 / (j + 1) / z;
  }

  // Word vectors cluster around a per-topic centre.
  MatrixXd word_vecs(V, spec.word_dim);
  MatrixXd centres(K, spec.word_dim);
  for (Eigen::Index i = 0; i < centres.size(); ++i) centres.data()[i] = 2.0 * normal(rng);
  for (Eigen::Index w = 0; w < V; ++w)
    for (Eigen::Index c = 0; c < word_vecs.cols(); ++c) {
      const double base = w < K * per_topic ? centres(w / per_topic, c) : 0.0;
      word_vecs(w, c) = base + 0.4 * normal(rng);
    }

  // Groups favour different topics so activity varies across them.
  std::vector<ctm::CtmParams> params;
  for (int g = 0; g < spec.groups; ++g) {
    auto p = ctm::CtmParams::isotropic(fx.true_directions, 0.1, 4.0, 4.0, 3.0, 1e-4);
    for (int k = 0; k < spec.topics; ++k) p.alpha[k] = (k % spec.groups == g) ? 0.3 : 0.05;
    params.push_back(std::move(p));
  }

  Matrix<float> emb(spec.docs, spec.dim);
  std::vector<std::string> ids;
  std::vector<interpret::BowDoc> docs;
  char name[32];
  for (int i = 0; i < spec.docs; ++i) {
    const int g = i % spec.groups;
    const auto s = ctm::sample_document(params[static_cast<std::size_t>(g)], spec.seed * 1000003ULL + static_cast<std::uint64_t>(i));
    emb.row(i) = s.embedding.transpose().cast<float>();
    VectorXd weight = VectorXd::Zero(K);
    for (std::size_t c = 0; c < s.assignments.size(); ++c) weight[s.assignments[c]] += s.strengths[c];
    const double total = weight.sum();

    interpret::BowDoc doc;
    std::snprintf(name, sizeof name, "doc%05d", i);
    doc.id = name;
    doc.group = "g" + std::to_string(g);
    for (int t = 0; t < spec.doc_length; ++t) {
      if (total <= 0.0 || unif(rng) < 0.3) {
        doc.tokens.push_back(static_cast<int>(K * per_topic) + static_cast<int>(unif(rng) * n_common) % n_common);
        continue;
      }
      double u = unif(rng) * total;
      Eigen::Index k = 0;
      while (k + 1 < K && u >= weight[k]) u -= weight[k++];
      double v = unif(rng);
      Eigen::Index w = 0;
      while (w + 1 < V && v >= fx.true_emissions(k, w)) v -= fx.true_emissions(k, w++);
      doc.tokens.push_back(static_cast<int>(w));
    }
    ids.push_back(doc.id);
    docs.push_back(std::move(doc));
  }

  write_embeddings(dir / "embeddings.emb", emb, ids);
  io::write_file_atomic(dir / "corpus.jsonl", interpret::corpus_jsonl(docs));
  io::write_file_atomic(dir / "vocab.txt", interpret::vocab_text(vocab));
  merge::WordEmbeddingTable table{word_vecs, std::vector<bool>(static_cast<std::size_t>(V), true)};
  io::write_file_atomic(dir / "word_vectors.txt", table.to_text(vocab));
  interpret::EmissionMatrix truth{fx.true_emissions, VectorXd::Constant(K, 1.0 / static_cast<double>(K)),
                                  std::vector<bool>(static_cast<std::size_t>(K), true)};
  interpret::save_emissions(truth, dir / "true_emissions.bin");

  fx.config = dir / "pipeline.ini";
  const std::string ini =
      "[run]\n"
      "seed = " + std::to_string(spec.seed) + "\n"
      "out = out\n"
      "\n"
      "[data]\n"
      "embeddings = embeddings.emb\n"
      "corpus = corpus.jsonl\n"
      "vocab = vocab.txt\n"
      "word_embeddings = word_vectors.txt\n"
      "\n"
      "[sae]\n"
      "activation = batch_topk\n"
      "expansion = 4\n"
      "k = 3\n"
      "steps = 1500\n"
      "batch_size = 256\n"
      "learning_rate = 0.002\n"
      "\n"
      "[interpret]\n"
      "pi = 0.3\n"
      "steps = 300\n"
      "learning_rate = 0.05\n"
      "\n"
      "[merge]\n"
      "k_prime = 8, 16\n"
      "top_p = 0.9\n"
      "space = words\n"
      "\n"
      "[eval]\n"
      "judge = stub:random\n"
      "trials_per_topic = 10\n"
      "\n"
      "[stats]\n"
      "over_active_threshold = 0.3\n"
      "top_variance = 10\n";
  io::write_file_atomic(fx.config, ini);
  return fx;
}

}  // namespace saetm::pipeline
