#pragma once

#include <string>
#include <vector>

#include "medrag/encoder.hpp"
#include "medrag/error.hpp"
#include "medrag/kb.hpp"

namespace medrag::harness {

/// Two tagged rows per entry, image first: `<id>:image` and `<id>:text`.
inline std::vector<EmbeddingRecord> embedding_records(const KnowledgeBase& kb) {
  if (kb.empty()) throw PreconditionError("export: knowledge base is empty");
  std::vector<EmbeddingRecord> out;
  out.reserve(2 * kb.size());
  for (const auto& e : kb.entries()) {
    const std::string origin(to_string(e.provenance.tag));
    out.push_back({e.id + ":image", origin + "-image", e.image_emb});
    out.push_back({e.id + ":text", origin + "-text", e.text_emb});
  }
  return out;
}

inline void export_embeddings(const KnowledgeBase& kb, const std::string& path) {
  save_embeddings(path, embedding_records(kb));
}

}  // namespace medrag::harness
