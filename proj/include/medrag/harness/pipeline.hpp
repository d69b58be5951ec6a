#pragma once

#include <span>
#include <string>
#include <vector>

#include "medrag/encoder.hpp"
#include "medrag/generator.hpp"
#include "medrag/kb.hpp"
#include "medrag/rerank.hpp"
#include "medrag/retrieval.hpp"

namespace medrag::harness {

struct PipelineConfig {
  RetrievalConfig retrieval;
  RerankConfig rerank;
  double rerank_spread = 0.3;

  BilinearReranker make_reranker(std::size_t dim) const {
    return BilinearReranker(rerank.model_seed, dim, rerank_spread);
  }
};

/// What each stage produced for one query.
struct StageTrace {
  std::vector<Candidate> top_m;
  std::vector<Candidate> top_k;
  std::string answer;
};

inline Query make_query(const Encoders& enc, const PixelGrid& image, std::string question) {
  Query q;
  q.image_emb = enc.image.embed(image);
  q.question_emb = enc.text.embed(question);
  q.question = std::move(question);
  return q;
}

/// retrieve Top-M -> rerank Top-K -> generate.
inline StageTrace run_pipeline(const Query& q, std::span<const KBEntry> entries,
                               const PipelineConfig& cfg, const RelevanceModel& reranker,
                               const ToyAnswerModel& model) {
  StageTrace t;
  t.top_m = top_m(q, entries, cfg.retrieval);
  t.top_k = top_k(t.top_m, q, cfg.rerank, reranker);
  t.answer = generate(q, context_of(t.top_k), model);
  return t;
}

}  // namespace medrag::harness
