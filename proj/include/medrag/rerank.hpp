#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "medrag/error.hpp"
#include "medrag/retrieval.hpp"
#include "medrag/rng.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

/// Scores how relevant a knowledge-base entry is to a query.
class RelevanceModel {
 public:
  virtual ~RelevanceModel() = default;
  virtual double score(const Query& q, const KBEntry& e) const = 0;
};

/// r = (q_txt^T W e_txt + q_img^T W e_img) / 2 with a fixed d x d matrix W.
class BilinearReranker final : public RelevanceModel {
 public:
  /// Seeded default: W = I + N(0, spread^2 / d). Close enough to the identity
  /// that it agrees with retrieval on clean data, far enough to reorder.
  BilinearReranker(std::uint64_t seed, std::size_t dim, double spread = 0.3) : dim_(dim) {
    if (dim == 0) throw PreconditionError("reranker: dimension must be > 0");
    Rng rng(derive_seed(seed, 0x7e7a));
    const double s = spread / std::sqrt(static_cast<double>(dim));
    w_.resize(dim * dim);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        w_[i * dim + j] = (i == j ? 1.0 : 0.0) + s * standard_normal(rng);
      }
    }
  }

  BilinearReranker(std::vector<double> w, std::size_t dim) : dim_(dim), w_(std::move(w)) {
    if (w_.size() != dim * dim) throw PreconditionError("reranker: matrix must be dim x dim");
  }

  std::size_t dim() const { return dim_; }
  const std::vector<double>& matrix() const { return w_; }

  double bilinear(std::span<const double> a, std::span<const double> b) const {
    if (a.size() != dim_ || b.size() != dim_) throw PreconditionError("relevance: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) row += w_[i * dim_ + j] * b[j];
      s += a[i] * row;
    }
    return s;
  }

  /// a^T W (gradient of a^T W b with respect to b).
  Vec left_product(std::span<const double> a) const {
    if (a.size() != dim_) throw PreconditionError("relevance: dimension mismatch");
    Vec out(dim_, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = 0; j < dim_; ++j) out[j] += a[i] * w_[i * dim_ + j];
    }
    return out;
  }

  double score(const Query& q, const KBEntry& e) const override {
    return 0.5 * (bilinear(q.question_emb, e.text_emb) + bilinear(q.image_emb, e.image_emb));
  }

 private:
  std::size_t dim_;
  std::vector<double> w_;
};

struct RerankConfig {
  std::size_t K = 5;
  std::uint64_t model_seed = 0;
};

inline double relevance(const Query& q, const KBEntry& e, const RelevanceModel& model) {
  const double r = model.score(q, e);
  if (!std::isfinite(r)) throw NumericError("relevance: non-finite score for '" + e.id + "'");
  return r;
}

/// Re-orders candidates purely by relevance (ties by id) and keeps K.
/// K = 0 is allowed and yields an empty context (RAG disabled).
inline std::vector<Candidate> top_k(std::vector<Candidate> candidates, const Query& q,
                                    const RerankConfig& cfg, const RelevanceModel& model) {
  for (auto& c : candidates) c.relevance = relevance(q, c.entry, model);
  const std::size_t keep = std::min(cfg.K, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                    candidates.end(), [](const Candidate& a, const Candidate& b) {
                      return ranks_before(a.relevance, a.entry.id, b.relevance, b.entry.id);
                    });
  candidates.resize(keep);
  return candidates;
}

}  // namespace medrag
