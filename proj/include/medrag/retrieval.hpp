#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "medrag/error.hpp"
#include "medrag/kb.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

/// An input image-question pair, already embedded.
struct Query {
  Vec image_emb;
  Vec question_emb;
  std::string question;
};

struct RetrievalConfig {
  double theta = 0.2;
  std::size_t M = 10;
  double w_img = 0.5;

  void validate() const {
    if (M < 1) throw PreconditionError("retrieval: M must be >= 1");
    if (!(w_img >= 0.0 && w_img <= 1.0)) throw PreconditionError("retrieval: w_img must be in [0,1]");
  }
};

/// A scored knowledge-base entry travelling through the pipeline.
struct Candidate {
  KBEntry entry;
  double retrieval_score = 0.0;
  double relevance = 0.0;  // filled by the reranker
};

/// s = w_img * cos(query image, entry image) + (1 - w_img) * cos(question, entry text).
inline double score_pair(const Query& q, const KBEntry& e, const RetrievalConfig& cfg) {
  double s = 0.0;
  if (cfg.w_img > 0.0) s += cfg.w_img * cosine(q.image_emb, e.image_emb);
  if (cfg.w_img < 1.0) s += (1.0 - cfg.w_img) * cosine(q.question_emb, e.text_emb);
  return s;
}

/// Descending score, ascending id on ties.
inline bool ranks_before(double sa, const std::string& ida, double sb, const std::string& idb) {
  return sa != sb ? sa > sb : ida < idb;
}

/// Threshold first, then cut to the M best. Exhaustive scan.
inline std::vector<Candidate> top_m(const Query& q, std::span<const KBEntry> entries,
                                    const RetrievalConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<double, const KBEntry*>> scored;
  scored.reserve(entries.size());
  for (const auto& e : entries) {
    const double s = score_pair(q, e, cfg);
    if (s >= cfg.theta) scored.emplace_back(s, &e);
  }
  const auto by_rank = [](const auto& a, const auto& b) {
    return ranks_before(a.first, a.second->id, b.first, b.second->id);
  };
  const std::size_t keep = std::min(cfg.M, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                    scored.end(), by_rank);
  std::vector<Candidate> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back({*scored[i].second, scored[i].first, 0.0});
  return out;
}

inline std::vector<Candidate> top_m(const Query& q, const KnowledgeBase& kb,
                                    const RetrievalConfig& cfg) {
  return top_m(q, std::span<const KBEntry>(kb.entries()), cfg);
}

}  // namespace medrag
