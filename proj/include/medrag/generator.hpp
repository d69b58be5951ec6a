#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/error.hpp"
#include "medrag/kb.hpp"
#include "medrag/retrieval.hpp"
#include "medrag/rng.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

/// Ordered, unique answer labels.
class AnswerVocab {
 public:
  AnswerVocab(std::vector<std::string> labels) : labels_(std::move(labels)) {
    if (labels_.empty()) throw PreconditionError("answer vocab must be nonempty");
    std::set<std::string> uniq(labels_.begin(), labels_.end());
    if (uniq.size() != labels_.size()) throw PreconditionError("answer vocab labels must be unique");
  }

  static AnswerVocab yes_no() { return AnswerVocab({"Yes", "No"}); }

  std::size_t size() const { return labels_.size(); }
  const std::string& operator[](std::size_t i) const { return labels_[i]; }
  const std::vector<std::string>& labels() const { return labels_; }

  std::size_t index_of(std::string_view label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] == label) return i;
    }
    throw PreconditionError("answer label '" + std::string(label) + "' not in vocabulary");
  }
  bool contains(std::string_view label) const {
    return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
  }

  friend bool operator==(const AnswerVocab&, const AnswerVocab&) = default;

 private:
  std::vector<std::string> labels_;
};

/// Which context embedding a gradient is taken with respect to.
enum class ContextBlock { text, image };

/// Feature layout: [question; query image; mean context text; mean context image].
struct FeatureLayout {
  std::size_t dim;
  std::size_t question() const { return 0; }
  std::size_t image() const { return dim; }
  std::size_t ctx_text() const { return 2 * dim; }
  std::size_t ctx_image() const { return 3 * dim; }
  std::size_t size() const { return 4 * dim; }
  std::size_t offset(ContextBlock b) const { return b == ContextBlock::text ? ctx_text() : ctx_image(); }
  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

/// Light view of one context pair's embeddings.
struct ContextItem {
  std::span<const double> text_emb;
  std::span<const double> image_emb;
};

inline std::vector<ContextItem> context_of(std::span<const KBEntry> entries) {
  std::vector<ContextItem> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back({e.text_emb, e.image_emb});
  return out;
}

inline std::vector<ContextItem> context_of(std::span<const Candidate> cands) {
  std::vector<ContextItem> out;
  out.reserve(cands.size());
  for (const auto& c : cands) out.push_back({c.entry.text_emb, c.entry.image_emb});
  return out;
}

/// Affine-softmax answer model over pooled query and context embeddings.
/// Logits are affine in every context embedding, so gradients are exact.
class ToyAnswerModel {
 public:
  ToyAnswerModel(AnswerVocab vocab, std::size_t dim)
      : vocab_(std::move(vocab)), layout_{dim},
        weights_(vocab_.size() * layout_.size(), 0.0), bias_(vocab_.size(), 0.0) {
    if (dim == 0) throw PreconditionError("answer model: dimension must be > 0");
  }

  /// Seeded Gaussian weights with the given scale.
  static ToyAnswerModel random(AnswerVocab vocab, std::size_t dim, std::uint64_t seed,
                               double scale = 1.0) {
    ToyAnswerModel m(std::move(vocab), dim);
    Rng rng(derive_seed(seed, 0x9e4));
    for (double& w : m.weights_) w = scale * standard_normal(rng);
    for (double& b : m.bias_) b = scale * standard_normal(rng);
    return m;
  }

  const AnswerVocab& vocab() const { return vocab_; }
  std::size_t dim() const { return layout_.dim; }
  const FeatureLayout& layout() const { return layout_; }

  std::span<double> weights(std::size_t answer) {
    return std::span<double>(weights_).subspan(answer * layout_.size(), layout_.size());
  }
  std::span<const double> weights(std::size_t answer) const {
    return std::span<const double>(weights_).subspan(answer * layout_.size(), layout_.size());
  }
  double& bias(std::size_t answer) { return bias_[answer]; }
  double bias(std::size_t answer) const { return bias_[answer]; }

  Vec features(const Query& q, std::span<const ContextItem> ctx) const {
    const std::size_t d = layout_.dim;
    if (q.question_emb.size() != d || q.image_emb.size() != d) {
      throw PreconditionError("answer model: query dimension mismatch");
    }
    Vec f(layout_.size(), 0.0);
    std::copy(q.question_emb.begin(), q.question_emb.end(), f.begin());
    std::copy(q.image_emb.begin(), q.image_emb.end(), f.begin() + static_cast<std::ptrdiff_t>(d));
    if (ctx.empty()) return f;
    const double inv = 1.0 / static_cast<double>(ctx.size());
    for (const auto& c : ctx) {
      if (c.text_emb.size() != d || c.image_emb.size() != d) {
        throw PreconditionError("answer model: context dimension mismatch");
      }
      for (std::size_t i = 0; i < d; ++i) {
        f[layout_.ctx_text() + i] += inv * c.text_emb[i];
        f[layout_.ctx_image() + i] += inv * c.image_emb[i];
      }
    }
    return f;
  }

  Vec logits(std::span<const double> f) const {
    Vec z(vocab_.size());
    for (std::size_t a = 0; a < vocab_.size(); ++a) z[a] = dot(weights(a), f) + bias_[a];
    return z;
  }

  Vec distribution_from_features(std::span<const double> f) const {
    Vec z = logits(f);
    if (!all_finite(z)) throw NumericError("answer model: non-finite logits");
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& x : z) {
      x = std::exp(x - m);
      s += x;
    }
    for (double& x : z) x /= s;
    return z;
  }

  double log_prob_from_features(std::size_t answer, std::span<const double> f) const {
    const Vec z = logits(f);
    if (!all_finite(z)) throw NumericError("answer model: non-finite logits");
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double x : z) s += std::exp(x - m);
    return z[answer] - m - std::log(s);
  }

  /// d log p(answer) / d features = w_answer - sum_b p_b w_b.
  Vec grad_log_prob_features(std::size_t answer, std::span<const double> f) const {
    const Vec p = distribution_from_features(f);
    Vec g(weights(answer).begin(), weights(answer).end());
    for (std::size_t b = 0; b < vocab_.size(); ++b) axpy(-p[b], weights(b), g);
    return g;
  }

  friend bool operator==(const ToyAnswerModel&, const ToyAnswerModel&) = default;

  void save(const std::string& path) const;
  static ToyAnswerModel load(const std::string& path);

 private:
  AnswerVocab vocab_;
  FeatureLayout layout_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

inline Vec answer_distribution(const Query& q, std::span<const ContextItem> ctx,
                               const ToyAnswerModel& model) {
  return model.distribution_from_features(model.features(q, ctx));
}

inline Vec answer_distribution(const Query& q, std::span<const KBEntry> ctx,
                               const ToyAnswerModel& model) {
  return answer_distribution(q, context_of(ctx), model);
}

inline std::size_t argmax_first(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

/// Most probable label; ties go to the lowest vocabulary index.
inline const std::string& generate(const Query& q, std::span<const ContextItem> ctx,
                                   const ToyAnswerModel& model) {
  return model.vocab()[argmax_first(answer_distribution(q, ctx, model))];
}

inline const std::string& generate(const Query& q, std::span<const KBEntry> ctx,
                                   const ToyAnswerModel& model) {
  return generate(q, context_of(ctx), model);
}

/// Exact gradient of log P(answer) with respect to one context entry's
/// text or image embedding. The context mean contributes a 1/|ctx| factor.
inline Vec grad_logp(std::string_view answer, const Query& q, std::span<const ContextItem> ctx,
                     std::size_t entry_index, ContextBlock wrt, const ToyAnswerModel& model) {
  if (entry_index >= ctx.size()) throw PreconditionError("grad_logp: entry not in context");
  const std::size_t a = model.vocab().index_of(answer);
  const Vec gf = model.grad_log_prob_features(a, model.features(q, ctx));
  const std::size_t off = model.layout().offset(wrt);
  const double inv = 1.0 / static_cast<double>(ctx.size());
  Vec g(model.dim());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = inv * gf[off + i];
  return g;
}

inline Vec grad_logp(std::string_view answer, const Query& q, std::span<const KBEntry> ctx,
                     std::string_view entry_id, ContextBlock wrt, const ToyAnswerModel& model) {
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (ctx[i].id == entry_id) return grad_logp(answer, q, context_of(ctx), i, wrt, model);
  }
  throw PreconditionError("grad_logp: entry '" + std::string(entry_id) + "' not in context");
}

// ---------------------------------------------------------------------------
// Training: L2-regularized multinomial logistic regression, full-batch
// gradient descent from zero weights (deterministic).

struct TrainingExample {
  Vec features;
  std::size_t label;
};

struct TrainConfig {
  std::size_t epochs = 1500;
  double learning_rate = 1.0;
  double l2 = 1e-4;
};

inline void train(ToyAnswerModel& model, std::span<const TrainingExample> data,
                  const TrainConfig& cfg = {}) {
  if (data.empty()) throw PreconditionError("train: no examples");
  const std::size_t nv = model.vocab().size();
  const std::size_t nf = model.layout().size();
  const double inv_n = 1.0 / static_cast<double>(data.size());
  std::vector<double> gw(nv * nf);
  Vec gb(nv);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (const auto& ex : data) {
      const Vec p = model.distribution_from_features(ex.features);
      for (std::size_t a = 0; a < nv; ++a) {
        const double r = p[a] - (a == ex.label ? 1.0 : 0.0);
        gb[a] += r * inv_n;
        for (std::size_t j = 0; j < nf; ++j) gw[a * nf + j] += r * inv_n * ex.features[j];
      }
    }
    for (std::size_t a = 0; a < nv; ++a) {
      auto w = model.weights(a);
      for (std::size_t j = 0; j < nf; ++j) {
        w[j] -= cfg.learning_rate * (gw[a * nf + j] + cfg.l2 * w[j]);
      }
      model.bias(a) -= cfg.learning_rate * gb[a];
    }
  }
}

// ---------------------------------------------------------------------------
// Persistence: `RAGGEN v1 dim=<d> vocab=<n>` then `<label>\t<bias> <w_1> ... <w_4d>`.

inline void ToyAnswerModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write model: " + path);
  out << "RAGGEN v1 dim=" << dim() << " vocab=" << vocab_.size() << '\n';
  for (std::size_t a = 0; a < vocab_.size(); ++a) {
    out << vocab_[a] << '\t' << codec::format_double(bias_[a]) << ' '
        << codec::join_doubles(weights(a)) << '\n';
  }
  if (!out) throw FormatError("write failed: " + path);
}

inline ToyAnswerModel ToyAnswerModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("model file is empty");
  const auto head = codec::split_ws(line);
  std::size_t dim = 0, n = 0;
  if (head.size() != 4 || head[0] != "RAGGEN" || head[1] != "v1" ||
      head[2].substr(0, 4) != "dim=" || !codec::parse_int(head[2].substr(4), dim) ||
      head[3].substr(0, 6) != "vocab=" || !codec::parse_int(head[3].substr(6), n) || dim == 0 ||
      n == 0) {
    throw FormatError("model: bad header '" + line + "'");
  }
  std::vector<std::string> labels;
  std::vector<double> bias, weights;
  for (std::size_t a = 0; a < n; ++a) {
    if (!std::getline(in, line)) throw FormatError("model: missing row " + std::to_string(a));
    const auto fields = codec::split(line, '\t');
    if (fields.size() != 2) throw FormatError("model: malformed row " + std::to_string(a));
    labels.emplace_back(fields[0]);
    const auto vals = codec::split_ws(fields[1]);
    if (vals.size() != 1 + 4 * dim) throw FormatError("model: wrong value count in row " + std::to_string(a));
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double v;
      if (!codec::parse_double(vals[i], v)) throw FormatError("model: bad value in row " + std::to_string(a));
      (i == 0 ? bias : weights).push_back(v);
    }
  }
  ToyAnswerModel m(AnswerVocab(std::move(labels)), dim);
  m.weights_ = std::move(weights);
  m.bias_ = std::move(bias);
  return m;
}

}  // namespace medrag
