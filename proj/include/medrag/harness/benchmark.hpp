#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/encoder.hpp"
#include "medrag/error.hpp"
#include "medrag/generator.hpp"
#include "medrag/harness/config.hpp"
#include "medrag/harness/pipeline.hpp"
#include "medrag/kb.hpp"
#include "medrag/rng.hpp"

// Synthetic chest-film VQA: each image may carry one of four findings as a
// bright quarter-block; questions ask about one finding; the knowledge base
// holds single-finding reports, affirmed or negated.
namespace medrag::harness {

inline constexpr std::size_t kMinInstances = 20;
inline constexpr const char* kPositiveLabel = "Yes";

struct FindingSpec {
  std::string name;    // as asked in questions
  std::string phrase;  // as written in reports
  std::size_t block_row, block_col;  // quarter-block of the image
};

inline const std::vector<FindingSpec>& finding_table() {
  static const std::vector<FindingSpec> table{
      {"consolidation", "consolidation in the right lower lobe", 3, 0},
      {"pleural effusion", "pleural effusion at the left base", 3, 3},
      {"cardiomegaly", "cardiomegaly with enlarged heart borders", 1, 1},
      {"pneumothorax", "pneumothorax at the right apex", 0, 3},
  };
  return table;
}

inline const std::vector<std::string>& question_templates() {
  static const std::vector<std::string> t{"is there {}?", "does this image show {}?",
                                          "any evidence of {}?"};
  return t;
}

inline std::string make_question(std::size_t template_index, std::size_t finding) {
  std::string q = question_templates().at(template_index);
  q.replace(q.find("{}"), 2, finding_table().at(finding).name);
  return q;
}

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline std::string make_report(std::size_t finding, bool affirmed) {
  const auto& phrase = finding_table().at(finding).phrase;
  return (affirmed ? capitalize(phrase) : "No " + phrase) + ".";
}

/// Every token a benchmark question or report can contain.
inline std::vector<std::string> benchmark_vocabulary() {
  std::set<std::string> v;
  for (std::size_t f = 0; f < finding_table().size(); ++f) {
    for (std::size_t t = 0; t < question_templates().size(); ++t) {
      for (auto& tok : tokenize(make_question(t, f))) v.insert(tok);
    }
    for (bool a : {true, false}) {
      for (auto& tok : tokenize(make_report(f, a))) v.insert(tok);
    }
  }
  return {v.begin(), v.end()};
}

struct ReportSubject {
  std::size_t finding = 0;
  bool affirmed = false;
};

/// Which finding a report is about and whether it is affirmed.
inline std::optional<ReportSubject> parse_subject(std::string_view report) {
  std::string low(report);
  for (char& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::optional<ReportSubject> best;
  std::size_t best_pos = std::string::npos;
  for (std::size_t f = 0; f < finding_table().size(); ++f) {
    const auto pos = low.find(finding_table()[f].phrase);
    if (pos == std::string::npos || pos >= best_pos) continue;
    best_pos = pos;
    const bool negated = pos >= 3 && low.compare(pos - 3, 3, "no ") == 0 &&
                         (pos == 3 || !std::isalnum(static_cast<unsigned char>(low[pos - 4])));
    best = ReportSubject{f, !negated};
  }
  return best;
}

struct BenchConfig {
  std::size_t n = 300;        // VQA instances (half train, half test)
  std::size_t kb_size = 0;    // 0 means n
  std::size_t dim = kDefaultEmbeddingDim;
  double noise = 0.1;         // per-pixel Gaussian sd
  std::size_t height = 16, width = 16, patch = kDefaultPatch;
  double background = 0.2;
  double lesion = 0.9;
  TrainConfig train{.l2 = 1e-3};
  double min_clean_accuracy = 90.0;  // percent, on the test split

  std::size_t kb_entries() const { return kb_size ? kb_size : n; }

  void validate() const {
    if (n < kMinInstances) {
      throw PreconditionError("benchmark: n=" + std::to_string(n) + " is below the minimum of " +
                              std::to_string(kMinInstances));
    }
    if (height % 4 || width % 4) throw PreconditionError("benchmark: image sides must be multiples of 4");
    if (!(noise >= 0.0)) throw PreconditionError("benchmark: noise must be >= 0");
    if (!(background > 0.0 && background <= 1.0 && lesion >= 0.0 && lesion <= 1.0)) {
      throw PreconditionError("benchmark: intensities must lie in [0,1] with background > 0");
    }
  }
};

/// Fills a finding's quarter-block with `level`.
inline void set_finding_region(PixelGrid& g, std::size_t finding, double level) {
  const auto& f = finding_table().at(finding);
  const std::size_t bh = g.height / 4, bw = g.width / 4;
  for (std::size_t r = f.block_row * bh; r < (f.block_row + 1) * bh; ++r) {
    for (std::size_t c = f.block_col * bw; c < (f.block_col + 1) * bw; ++c) g.at(r, c) = level;
  }
}

/// Renders an image whose only finding (if any) is `present`.
inline PixelGrid render_image(std::optional<std::size_t> present, const BenchConfig& cfg, double noise,
                              Rng& rng) {
  PixelGrid g(cfg.height, cfg.width, cfg.background);
  if (present) set_finding_region(g, *present, cfg.lesion);
  if (noise > 0.0) {
    for (double& v : g.values) v += noise * standard_normal(rng);
  }
  clamp_unit(g);
  return g;
}

struct VQAInstance {
  std::string id;
  PixelGrid image;
  std::string question;
  std::string gold;
  std::size_t finding = 0;  // the finding asked about
  int condition = -1;       // latent: finding present in the image, -1 for none
  bool train = false;
};

struct Benchmark {
  std::uint64_t seed = 0;
  BenchConfig config;
  PipelineConfig pipeline;
  std::shared_ptr<const Encoders> encoders;
  std::vector<VQAInstance> instances;
  KnowledgeBase kb;
  ToyAnswerModel model;

  std::vector<const VQAInstance*> split(bool train) const {
    std::vector<const VQAInstance*> out;
    for (const auto& i : instances) {
      if (i.train == train) out.push_back(&i);
    }
    return out;
  }

  BilinearReranker reranker() const { return pipeline.make_reranker(encoders->dim()); }
  Query query(const VQAInstance& inst) const { return make_query(*encoders, inst.image, inst.question); }

  /// SHA-256 over the serialized benchmark, model and KB.
  std::string digest() const;
};

/// First derived hash seed under which the benchmark vocabulary maps to
/// distinct coordinates, so no two benchmark words share an embedding axis.
inline std::uint64_t collision_free_text_seed(std::uint64_t seed, std::size_t dim) {
  const auto vocab = benchmark_vocabulary();
  if (vocab.size() > dim) {
    throw PreconditionError("benchmark: embedding dimension " + std::to_string(dim) +
                            " is smaller than the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  for (std::uint64_t k = 0; k < 1'000'000; ++k) {
    const TextEncoder te(derive_seed(seed, 0x7e47'0000 + k), dim);
    std::set<std::size_t> used;
    bool ok = true;
    for (const auto& t : vocab) ok = ok && used.insert(te.token_index(t)).second;
    if (ok) return te.seed();
  }
  throw PreconditionError("benchmark: no collision-free text hash seed found; raise the dimension");
}

inline std::shared_ptr<const Encoders> make_encoders(std::uint64_t seed, const BenchConfig& cfg) {
  return std::make_shared<const Encoders>(
      Encoders{TextEncoder(collision_free_text_seed(seed, cfg.dim), cfg.dim),
               ImageEncoder(derive_seed(seed, 0x1a6e), cfg.dim, cfg.height, cfg.width, cfg.patch)});
}

namespace detail {

inline std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// A present-finding draw for a "No" answer about `asked`: nothing, or a different finding.
/// k = 0: no finding; otherwise the k-th finding other than `asked`.
inline std::optional<std::size_t> other_condition(std::size_t k, std::size_t asked) {
  const std::size_t nf = finding_table().size();
  if (k == 0) return std::nullopt;
  std::size_t seen = 0;
  for (std::size_t f = 0; f < nf; ++f) {
    if (f != asked && ++seen == k) return f;
  }
  return std::nullopt;
}

inline std::optional<std::size_t> other_condition(Rng& rng, std::size_t asked) {
  return other_condition(pick(rng, finding_table().size()), asked);
}

inline double clean_accuracy(const Benchmark& b, const RelevanceModel& rr, bool use_rag) {
  const auto test = b.split(false);
  std::size_t ok = 0;
  PipelineConfig p = b.pipeline;
  if (!use_rag) p.rerank.K = 0;
  for (const auto* inst : test) {
    ok += run_pipeline(b.query(*inst), b.kb.entries(), p, rr, b.model).answer == inst->gold;
  }
  return test.empty() ? 0.0 : 100.0 * static_cast<double>(ok) / static_cast<double>(test.size());
}

}  // namespace detail

/// Generates instances and KB, then trains the answer model on the train
/// split's clean pipeline features (with and without retrieved context).
inline Benchmark synth_benchmark(std::uint64_t seed, const BenchConfig& cfg = {},
                                 const PipelineConfig& pipeline = {}) {
  cfg.validate();
  pipeline.retrieval.validate();
  auto enc = make_encoders(seed, cfg);
  const std::size_t nf = finding_table().size();

  Rng rng_inst(derive_seed(seed, 0x1157));
  std::vector<VQAInstance> instances;
  const std::size_t n_train = cfg.n / 2;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    VQAInstance v;
    char id[32];
    std::snprintf(id, sizeof id, "q%04zu", i);
    v.id = id;
    v.finding = detail::pick(rng_inst, nf);
    const bool yes = detail::pick(rng_inst, 2) == 0;
    const std::optional<std::size_t> present = yes ? std::optional(v.finding)
                                                   : detail::other_condition(rng_inst, v.finding);
    v.condition = present ? static_cast<int>(*present) : -1;
    v.image = render_image(present, cfg, cfg.noise, rng_inst);
    v.question = make_question(detail::pick(rng_inst, question_templates().size()), v.finding);
    v.gold = yes ? "Yes" : "No";
    v.train = i < n_train;
    instances.push_back(std::move(v));
  }

  Rng rng_kb(derive_seed(seed, 0x0cb0));
  KnowledgeBase kb(enc);
  // Stratified: alternate affirmed and negated reports, cycling through
  // findings and (for negations) every condition the image may show instead.
  struct Slot {
    std::size_t finding;
    bool affirmed;
    std::size_t other;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < cfg.kb_entries(); ++i) {
    const std::size_t j = i / 2;
    slots.push_back(i % 2 == 0 ? Slot{j % nf, true, 0} : Slot{(j / nf) % nf, false, j % nf});
  }
  std::shuffle(slots.begin(), slots.end(), rng_kb);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t f = slots[i].finding;
    const bool affirmed = slots[i].affirmed;
    const auto present = affirmed ? std::optional(f) : detail::other_condition(slots[i].other, f);
    PixelGrid img = render_image(present, cfg, cfg.noise, rng_kb);
    std::string report = make_report(f, affirmed);
    char id[32];
    std::snprintf(id, sizeof id, "kb%04zu", i);
    kb.insert_benign(make_entry(*enc, id, std::move(report), std::move(img)));
  }

  Benchmark b{seed, cfg, pipeline, enc, std::move(instances), std::move(kb),
              ToyAnswerModel(AnswerVocab::yes_no(), cfg.dim)};
  const auto rr = b.reranker();
  std::vector<TrainingExample> data;
  for (const auto* inst : b.split(true)) {
    const Query q = b.query(*inst);
    const std::size_t label = b.model.vocab().index_of(inst->gold);
    const auto ctx = top_k(top_m(q, b.kb, pipeline.retrieval), q, pipeline.rerank, rr);
    data.push_back({b.model.features(q, context_of(ctx)), label});
    data.push_back({b.model.features(q, {}), label});
  }
  train(b.model, data, cfg.train);

  const double acc = detail::clean_accuracy(b, rr, true);
  if (acc < cfg.min_clean_accuracy) {
    throw PreconditionError("benchmark: clean-RAG accuracy " + codec::format_fixed(acc, 2) +
                            "% is below " + codec::format_fixed(cfg.min_clean_accuracy, 2) + "%; use a larger n or a lower noise level");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Configuration keys.

inline const std::set<std::string>& bench_config_keys() {
  static const std::set<std::string> k{
      "bench.n", "bench.kb_size", "bench.dim", "bench.noise", "bench.height", "bench.width",
      "bench.patch", "bench.background", "bench.lesion", "train.epochs", "train.lr", "train.l2",
      "retrieval.theta", "retrieval.M", "retrieval.w_img", "rerank.K", "rerank.seed",
      "rerank.spread"};
  return k;
}

inline BenchConfig bench_config_from(const ConfigMap& c) {
  BenchConfig b;
  b.n = c.get("bench.n", b.n);
  b.kb_size = c.get("bench.kb_size", b.kb_size);
  b.dim = c.get("bench.dim", b.dim);
  b.noise = c.get("bench.noise", b.noise);
  b.height = c.get("bench.height", b.height);
  b.width = c.get("bench.width", b.width);
  b.patch = c.get("bench.patch", b.patch);
  b.background = c.get("bench.background", b.background);
  b.lesion = c.get("bench.lesion", b.lesion);
  b.train.epochs = c.get("train.epochs", b.train.epochs);
  b.train.learning_rate = c.get("train.lr", b.train.learning_rate);
  b.train.l2 = c.get("train.l2", b.train.l2);
  return b;
}

inline PipelineConfig pipeline_config_from(const ConfigMap& c) {
  PipelineConfig p;
  p.retrieval.theta = c.get("retrieval.theta", p.retrieval.theta);
  p.retrieval.M = c.get("retrieval.M", p.retrieval.M);
  p.retrieval.w_img = c.get("retrieval.w_img", p.retrieval.w_img);
  p.rerank.K = c.get("rerank.K", p.rerank.K);
  p.rerank.model_seed = c.get_u64("rerank.seed", p.rerank.model_seed);
  p.rerank_spread = c.get("rerank.spread", p.rerank_spread);
  p.retrieval.validate();
  return p;
}

inline ConfigMap to_config(const BenchConfig& b, const PipelineConfig& p) {
  ConfigMap c;
  auto num = [](double v) { return codec::format_double(v); };
  c.set("bench.n", std::to_string(b.n));
  c.set("bench.kb_size", std::to_string(b.kb_size));
  c.set("bench.dim", std::to_string(b.dim));
  c.set("bench.noise", num(b.noise));
  c.set("bench.height", std::to_string(b.height));
  c.set("bench.width", std::to_string(b.width));
  c.set("bench.patch", std::to_string(b.patch));
  c.set("bench.background", num(b.background));
  c.set("bench.lesion", num(b.lesion));
  c.set("train.epochs", std::to_string(b.train.epochs));
  c.set("train.lr", num(b.train.learning_rate));
  c.set("train.l2", num(b.train.l2));
  c.set("retrieval.theta", num(p.retrieval.theta));
  c.set("retrieval.M", std::to_string(p.retrieval.M));
  c.set("retrieval.w_img", num(p.retrieval.w_img));
  c.set("rerank.K", std::to_string(p.rerank.K));
  c.set("rerank.seed", std::to_string(p.rerank.model_seed));
  c.set("rerank.spread", num(p.rerank_spread));
  return c;
}

// ---------------------------------------------------------------------------
// Persistence. A benchmark directory holds:
//   bench.cfg      settings and seed
//   encoders.txt   RAGENC v1 header, then the image projection rows
//   instances.tsv  RAGBENCH v1 header, then one instance per line
//   kb.ragkb       the benign knowledge base
//   model.txt      the trained answer model

inline void write_encoders(std::ostream& out, const Encoders& enc) {
  const auto& im = enc.image;
  out << "RAGENC v1 dim=" << enc.dim() << " text_seed=" << enc.text.seed() << " height=" << im.height()
      << " width=" << im.width() << " patch=" << im.patch() << '\n';
  const std::size_t nfeat = im.features();
  for (std::size_t i = 0; i < im.dim(); ++i) {
    out << codec::join_doubles(std::span<const double>(im.matrix()).subspan(i * nfeat, nfeat)) << '\n';
  }
}

namespace detail {

/// Parses `key=value` header tokens after the magic words.
inline std::uint64_t header_value(const std::vector<std::string_view>& toks, std::string_view key,
                                  const std::string& origin) {
  for (auto t : toks) {
    if (t.size() > key.size() && t.substr(0, key.size()) == key && t[key.size()] == '=') {
      std::uint64_t v;
      if (codec::parse_int(t.substr(key.size() + 1), v)) return v;
      break;
    }
  }
  throw FormatError(origin + ": header lacks a valid '" + std::string(key) + "'");
}

}  // namespace detail

inline std::shared_ptr<const Encoders> read_encoders(std::istream& in, const std::string& origin = "encoders") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(origin + ": empty file");
  const auto toks = codec::split_ws(line);
  if (toks.size() < 2 || toks[0] != "RAGENC" || toks[1] != "v1") {
    throw FormatError(origin + ": expected 'RAGENC v1' header");
  }
  const std::size_t dim = detail::header_value(toks, "dim", origin);
  const std::uint64_t text_seed = detail::header_value(toks, "text_seed", origin);
  const std::size_t h = detail::header_value(toks, "height", origin);
  const std::size_t w = detail::header_value(toks, "width", origin);
  const std::size_t p = detail::header_value(toks, "patch", origin);
  if (p == 0 || h % p || w % p) throw FormatError(origin + ": image shape not divisible by patch");
  const std::size_t nfeat = (h / p) * (w / p);
  std::vector<double> m;
  m.reserve(dim * nfeat);
  for (std::size_t i = 0; i < dim; ++i) {
    if (!std::getline(in, line)) throw FormatError(origin + ": missing projection row " + std::to_string(i + 1));
    const auto vals = codec::split_ws(line);
    if (vals.size() != nfeat) throw FormatError(origin + ": projection row " + std::to_string(i + 1) + " has wrong width");
    for (auto v : vals) {
      double x;
      if (!codec::parse_double(v, x)) throw FormatError(origin + ": bad value in projection row " + std::to_string(i + 1));
      m.push_back(x);
    }
  }
  try {
    return std::make_shared<const Encoders>(
        Encoders{TextEncoder(text_seed, dim), ImageEncoder(std::move(m), dim, h, w, p)});
  } catch (const PreconditionError& e) {
    throw FormatError(origin + ": " + e.what());
  }
}

inline std::shared_ptr<const Encoders> load_encoders(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open encoders '" + path + "'");
  return read_encoders(in, path);
}

inline void write_instances(std::ostream& out, std::span<const VQAInstance> inst) {
  out << "RAGBENCH v1 n=" << inst.size() << '\n';
  for (const auto& v : inst) {
    out << v.id << '\t' << (v.train ? "train" : "test") << '\t' << v.finding << '\t' << v.condition
        << '\t' << v.gold << '\t' << v.question << '\t' << v.image.height << 'x' << v.image.width << ':'
        << codec::base64_encode(codec::doubles_to_bytes(v.image.values)) << '\n';
  }
}

inline std::vector<VQAInstance> read_instances(std::istream& in, const std::string& origin = "instances") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(origin + ": empty file");
  const auto head = codec::split_ws(line);
  if (head.size() != 3 || head[0] != "RAGBENCH" || head[1] != "v1") {
    throw FormatError(origin + ": expected 'RAGBENCH v1 n=<count>' header");
  }
  const std::size_t n = detail::header_value(head, "n", origin);
  std::vector<VQAInstance> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto f = codec::split(line, '\t');
    if (f.size() != 7) throw FormatError(where + ": expected 7 tab-separated fields");
    VQAInstance v;
    v.id = f[0];
    if (f[1] != "train" && f[1] != "test") throw FormatError(where + ": split must be train or test");
    v.train = f[1] == "train";
    if (!codec::parse_int(f[2], v.finding) || v.finding >= finding_table().size() ||
        !codec::parse_int(f[3], v.condition) || v.condition < -1 ||
        v.condition >= static_cast<int>(finding_table().size())) {
      throw FormatError(where + ": bad finding or condition");
    }
    v.gold = f[4];
    v.question = f[5];
    const auto colon = f[6].find(':');
    const auto x = f[6].find('x');
    std::size_t h = 0, w = 0;
    if (colon == std::string_view::npos || x == std::string_view::npos || x > colon ||
        !codec::parse_int(f[6].substr(0, x), h) || !codec::parse_int(f[6].substr(x + 1, colon - x - 1), w)) {
      throw FormatError(where + ": malformed image field");
    }
    try {
      v.image = PixelGrid(h, w, codec::bytes_to_doubles(codec::base64_decode(f[6].substr(colon + 1))));
    } catch (const Error& e) {
      throw FormatError(where + ": " + e.what());
    }
    out.push_back(std::move(v));
  }
  if (out.size() != n) throw FormatError(origin + ": header announces " + std::to_string(n) + " instances, found " + std::to_string(out.size()));
  return out;
}

inline std::string Benchmark::digest() const {
  std::ostringstream s;
  s << "seed=" << seed << '\n';
  to_config(config, pipeline).write(s);
  write_encoders(s, *encoders);
  write_instances(s, instances);
  kb.write(s);
  for (std::size_t a = 0; a < model.vocab().size(); ++a) {
    s << model.vocab()[a] << ' ' << codec::format_double(model.bias(a)) << ' '
      << codec::join_doubles(model.weights(a)) << '\n';
  }
  return codec::sha256_hex(s.str());
}

inline void save_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw FormatError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("bench.cfg");
    out << "# synthetic benchmark settings\nbench.seed = " << b.seed << '\n';
    to_config(b.config, b.pipeline).write(out);
  }
  {
    auto out = open("encoders.txt");
    write_encoders(out, *b.encoders);
  }
  {
    auto out = open("instances.tsv");
    write_instances(out, b.instances);
  }
  b.kb.save((dir / "kb.ragkb").string());
  b.model.save((dir / "model.txt").string());
}

inline Benchmark load_benchmark(const std::filesystem::path& dir) {
  auto cfg = ConfigMap::load((dir / "bench.cfg").string());
  auto known = bench_config_keys();
  known.insert("bench.seed");
  cfg.require_known(known);
  auto enc = load_encoders((dir / "encoders.txt").string());
  std::ifstream inst_in(dir / "instances.tsv", std::ios::binary);
  if (!inst_in) throw FormatError("cannot open " + (dir / "instances.tsv").string());
  auto instances = read_instances(inst_in, (dir / "instances.tsv").string());
  auto kb = KnowledgeBase::load((dir / "kb.ragkb").string(), enc);
  auto model = ToyAnswerModel::load((dir / "model.txt").string());
  if (model.dim() != enc->dim()) throw FormatError("model dimension does not match encoders");
  return Benchmark{cfg.get_u64("bench.seed", 0), bench_config_from(cfg), pipeline_config_from(cfg),
                   std::move(enc), std::move(instances), std::move(kb), std::move(model)};
}

}  // namespace medrag::harness
