#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/encoder.hpp"
#include "medrag/error.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

inline constexpr double kDefaultStealthEps = 0.15;
inline constexpr std::int64_t kLogicalEpoch = 1'700'000'000;

enum class EntryTag { benign, injected };

inline std::string_view to_string(EntryTag t) {
  return t == EntryTag::benign ? "benign" : "injected";
}

struct Provenance {
  std::string source = "local";
  std::int64_t timestamp = 0;  // 0 means "assign on insert"
  std::string digest;
  EntryTag tag = EntryTag::benign;
  // Injected entries only: the benign pair the stealth check was measured against.
  std::string base_id;
  double dsem = 0.0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// One image-report pair. Either raw modality may be absent (external image
/// reference, or a text embedding optimized directly with no decoded text);
/// when present, the embedding must be the encoder's output for it.
struct KBEntry {
  std::string id;
  std::optional<std::string> report_text;
  std::optional<PixelGrid> image;
  std::string image_ref;  // used only when `image` is empty
  Vec image_emb;
  Vec text_emb;
  Provenance provenance;

  friend bool operator==(const KBEntry&, const KBEntry&) = default;
};

/// Builds a fully raw entry and its embeddings.
inline KBEntry make_entry(const Encoders& enc, std::string id, std::string report,
                          PixelGrid image) {
  KBEntry e;
  e.id = std::move(id);
  e.text_emb = enc.text.embed(report);
  e.image_emb = enc.image.embed(image);
  e.report_text = std::move(report);
  e.image = std::move(image);
  return e;
}

/// D_sem = 1 - (cos(img_a, img_b) + cos(txt_a, txt_b)) / 2, range [0, 2].
inline double semantic_distance(std::span<const double> img_a, std::span<const double> txt_a,
                                std::span<const double> img_b, std::span<const double> txt_b) {
  return 1.0 - 0.5 * (cosine(img_a, img_b) + cosine(txt_a, txt_b));
}

inline double semantic_distance(const KBEntry& a, const KBEntry& b) {
  return semantic_distance(a.image_emb, a.text_emb, b.image_emb, b.text_emb);
}

namespace detail {

inline bool is_token_safe(std::string_view s) {
  return !s.empty() && std::none_of(s.begin(), s.end(), [](char c) {
    return c == '\t' || c == '\n' || c == '\r' || c == ' ';
  });
}

inline std::string encode_image_field(const KBEntry& e) {
  if (e.image) {
    return "grid:" + std::to_string(e.image->height) + "x" + std::to_string(e.image->width) +
           ":" + codec::base64_encode(codec::doubles_to_bytes(e.image->values));
  }
  if (!e.image_ref.empty()) return "ref:" + e.image_ref;
  return "-";
}

inline std::string encode_lineage(const Provenance& p) {
  if (p.tag == EntryTag::benign) return "-";
  return "base=" + p.base_id + ";dsem=" + codec::format_double(p.dsem);
}

/// Every persisted field except the digest, tab-joined in file order.
inline std::vector<std::string> entry_fields(const KBEntry& e) {
  std::string embs = codec::join_doubles(e.image_emb);
  embs += ' ';
  embs += codec::join_doubles(e.text_emb);
  return {e.id,
          std::string(to_string(e.provenance.tag)),
          e.provenance.source,
          std::to_string(e.provenance.timestamp),
          e.report_text ? codec::base64_encode(*e.report_text) : std::string("-"),
          encode_image_field(e),
          std::move(embs),
          encode_lineage(e.provenance)};
}

inline std::string canonical_form(const KBEntry& e) {
  std::string out;
  for (const auto& f : entry_fields(e)) {
    out += f;
    out += '\t';
  }
  return out;
}

}  // namespace detail

inline std::string compute_digest(const KBEntry& e) {
  return codec::sha256_hex(detail::canonical_form(e));
}

struct InjectionOutcome {
  bool accepted = false;
  double dsem = 0.0;
  std::string id;
  std::string reason;  // empty when accepted
};

/// The semi-open knowledge base. Append-only between rollbacks, so every
/// live snapshot's digest list is a prefix of the current digest list.
///
/// Thread safety follows the standard-library container contract: any
/// number of concurrent const calls, or one mutating call with no readers.
class KnowledgeBase {
 public:
  explicit KnowledgeBase(std::shared_ptr<const Encoders> encoders,
                         double stealth_eps = kDefaultStealthEps)
      : encoders_(std::move(encoders)), stealth_eps_(stealth_eps) {
    if (!encoders_) throw PreconditionError("knowledge base: encoders required");
    if (std::isnan(stealth_eps_) || stealth_eps_ < 0.0) {
      throw PreconditionError("knowledge base: stealth eps must be >= 0");
    }
  }

  const Encoders& encoders() const { return *encoders_; }
  std::shared_ptr<const Encoders> encoders_ptr() const { return encoders_; }
  std::size_t dim() const { return encoders_->dim(); }
  double stealth_eps() const { return stealth_eps_; }
  void set_stealth_eps(double eps) {
    if (std::isnan(eps) || eps < 0.0) throw PreconditionError("stealth eps must be >= 0");
    stealth_eps_ = eps;
  }

  const std::vector<KBEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t count(EntryTag tag) const {
    return static_cast<std::size_t>(std::count_if(
        entries_.begin(), entries_.end(),
        [tag](const KBEntry& e) { return e.provenance.tag == tag; }));
  }

  const KBEntry* find(std::string_view id) const {
    for (const auto& e : entries_) {
      if (e.id == id) return &e;
    }
    return nullptr;
  }

  std::vector<std::string> digests() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.provenance.digest);
    return out;
  }

  /// Id of the first entry whose stored digest does not verify, if any.
  std::optional<std::string> first_tampered() const {
    for (const auto& e : entries_) {
      if (compute_digest(e) != e.provenance.digest) return e.id;
    }
    return std::nullopt;
  }

  std::string insert_benign(KBEntry entry) {
    validate_new(entry);
    entry.provenance.tag = EntryTag::benign;
    entry.provenance.base_id.clear();
    entry.provenance.dsem = 0.0;
    return append(std::move(entry));
  }

  /// Stealth gate: stores the candidate as injected iff D_sem to `base_id`
  /// is within stealth_eps; otherwise reports the measured distance.
  InjectionOutcome submit_injection(KBEntry candidate, std::string_view base_id) {
    const KBEntry* base = find(base_id);
    if (!base) throw PreconditionError("submit_injection: unknown base '" + std::string(base_id) + "'");
    if (base->provenance.tag != EntryTag::benign) {
      throw PreconditionError("submit_injection: base '" + std::string(base_id) + "' is not benign");
    }
    validate_new(candidate);
    InjectionOutcome out;
    out.id = candidate.id;
    out.dsem = semantic_distance(candidate, *base);
    if (!(out.dsem <= stealth_eps_)) {
      out.reason = "semantic distance " + codec::format_double(out.dsem) +
                   " exceeds stealth eps " + codec::format_double(stealth_eps_);
      return out;
    }
    candidate.provenance.tag = EntryTag::injected;
    candidate.provenance.base_id = std::string(base_id);
    candidate.provenance.dsem = out.dsem;
    append(std::move(candidate));
    out.accepted = true;
    return out;
  }

  std::string snapshot() {
    std::string id = "snap-" + std::to_string(next_snapshot_++);
    snapshots_.push_back({id, digests()});
    return id;
  }

  void rollback(std::string_view snapshot_id) {
    auto it = std::find_if(snapshots_.begin(), snapshots_.end(),
                           [&](const auto& s) { return s.first == snapshot_id; });
    if (it == snapshots_.end()) {
      throw PreconditionError("rollback: unknown snapshot '" + std::string(snapshot_id) + "'");
    }
    const auto& kept = it->second;
    if (kept.size() > entries_.size() ||
        !std::equal(kept.begin(), kept.end(), entries_.begin(),
                    [](const std::string& d, const KBEntry& e) { return d == e.provenance.digest; })) {
      throw Error("rollback: snapshot is not a prefix of the entry history");
    }
    entries_.resize(kept.size());
    snapshots_.erase(std::next(it), snapshots_.end());
  }

  const std::vector<std::pair<std::string, std::vector<std::string>>>& snapshots() const {
    return snapshots_;
  }

  bool has_snapshot(std::string_view id) const {
    return std::any_of(snapshots_.begin(), snapshots_.end(),
                       [&](const auto& s) { return s.first == id; });
  }

  void write(std::ostream& out) const;
  void save(const std::string& path) const;
  static KnowledgeBase read(std::istream& in, std::shared_ptr<const Encoders> encoders);
  static KnowledgeBase load(const std::string& path, std::shared_ptr<const Encoders> encoders);

  friend bool operator==(const KnowledgeBase& a, const KnowledgeBase& b) {
    return a.dim() == b.dim() && a.stealth_eps_ == b.stealth_eps_ &&
           a.next_snapshot_ == b.next_snapshot_ && a.entries_ == b.entries_ &&
           a.snapshots_ == b.snapshots_;
  }

 private:
  void check_embedding(const Vec& v, const char* what) const {
    if (v.size() != dim()) {
      throw PreconditionError(std::string(what) + ": dimension " + std::to_string(v.size()) +
                              " differs from knowledge base dimension " + std::to_string(dim()));
    }
    if (!all_finite(v)) throw PreconditionError(std::string(what) + ": non-finite component");
    if (norm2(v) == 0.0) throw DegenerateInputError(std::string(what) + ": zero vector");
  }

  static bool close(const Vec& a, const Vec& b) {
    return a.size() == b.size() && max_relative_error(a, b) <= 1e-12;
  }

  void validate_new(const KBEntry& e) const {
    if (!detail::is_token_safe(e.id)) {
      throw PreconditionError("entry id must be nonempty without whitespace: '" + e.id + "'");
    }
    if (!detail::is_token_safe(e.provenance.source)) {
      throw PreconditionError("entry '" + e.id + "': source label must be nonempty without whitespace");
    }
    if (find(e.id)) throw PreconditionError("duplicate entry id '" + e.id + "'");
    check_embedding(e.image_emb, "image embedding");
    check_embedding(e.text_emb, "text embedding");
    if (e.report_text && !close(encoders_->text.embed(*e.report_text), e.text_emb)) {
      throw PreconditionError("entry '" + e.id + "': text embedding inconsistent with report text");
    }
    if (e.image && !close(encoders_->image.embed(*e.image), e.image_emb)) {
      throw PreconditionError("entry '" + e.id + "': image embedding inconsistent with image");
    }
    if (!e.image && !e.image_ref.empty() && !detail::is_token_safe(e.image_ref)) {
      throw PreconditionError("entry '" + e.id + "': image reference contains whitespace");
    }
  }

  std::string append(KBEntry e) {
    if (e.provenance.timestamp == 0) {
      std::int64_t latest = kLogicalEpoch - 1;
      for (const auto& x : entries_) latest = std::max(latest, x.provenance.timestamp);
      e.provenance.timestamp = latest + 1;
    }
    e.provenance.digest = compute_digest(e);
    entries_.push_back(std::move(e));
    return entries_.back().id;
  }

  std::shared_ptr<const Encoders> encoders_;
  double stealth_eps_;
  std::uint64_t next_snapshot_ = 1;
  std::vector<KBEntry> entries_;
  std::vector<std::pair<std::string, std::vector<std::string>>> snapshots_;
};

// ---------------------------------------------------------------------------
// Persistence.
//
//   RAGKB v1 dim=<d> eps=<stealth eps> next_snap=<n>
//   <id>\t<tag>\t<source>\t<timestamp>\t<digest>\t<b64 report|->\t<image>\t<embs>\t<lineage>
//   ---SNAPSHOTS---
//   <snap id>\t<digest> <digest> ...
//   ---CHECKSUM--- <sha256 of all preceding bytes>

inline constexpr std::string_view kSnapshotSentinel = "---SNAPSHOTS---";
inline constexpr std::string_view kChecksumSentinel = "---CHECKSUM---";

inline void KnowledgeBase::write(std::ostream& out) const {
  std::string body = "RAGKB v1 dim=" + std::to_string(dim()) +
                     " eps=" + codec::format_double(stealth_eps_) +
                     " next_snap=" + std::to_string(next_snapshot_) + "\n";
  for (const auto& e : entries_) {
    auto fields = detail::entry_fields(e);
    fields.insert(fields.begin() + 4, e.provenance.digest);
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) body += '\t';
      body += fields[i];
    }
    body += '\n';
  }
  body += kSnapshotSentinel;
  body += '\n';
  for (const auto& [id, ds] : snapshots_) {
    body += id;
    body += '\t';
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (i) body += ' ';
      body += ds[i];
    }
    body += '\n';
  }
  out << body << kChecksumSentinel << ' ' << codec::sha256_hex(body) << '\n';
}

inline void KnowledgeBase::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write knowledge base: " + path);
  write(out);
  if (!out) throw FormatError("write failed: " + path);
}

namespace detail {

inline bool header_value(std::string_view tok, std::string_view key, std::string_view& value) {
  if (tok.size() <= key.size() + 1 || tok.substr(0, key.size()) != key || tok[key.size()] != '=') {
    return false;
  }
  value = tok.substr(key.size() + 1);
  return true;
}

inline PixelGrid decode_grid_field(std::string_view field, const std::string& id) {
  // grid:<H>x<W>:<b64>
  const auto parts = codec::split(field.substr(5), ':');
  if (parts.size() != 2) throw FormatError("entry '" + id + "': malformed image field");
  const auto dims = codec::split(parts[0], 'x');
  std::size_t h = 0, w = 0;
  if (dims.size() != 2 || !codec::parse_int(dims[0], h) || !codec::parse_int(dims[1], w)) {
    throw FormatError("entry '" + id + "': malformed grid shape");
  }
  auto values = codec::bytes_to_doubles(codec::base64_decode(parts[1]));
  if (values.size() != h * w) throw FormatError("entry '" + id + "': grid payload size mismatch");
  return PixelGrid(h, w, std::move(values));
}

}  // namespace detail

inline KnowledgeBase KnowledgeBase::read(std::istream& in,
                                         std::shared_ptr<const Encoders> encoders) {
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::string_view> lines = codec::split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw FormatError("knowledge base file is empty");

  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw FormatError("knowledge base line " + std::to_string(lineno + 1) + ": " + msg);
  };

  const auto head = codec::split_ws(lines[0]);
  if (head.size() < 3 || head[0] != "RAGKB") fail("missing RAGKB header");
  if (head[1] != "v1") fail("unsupported format version '" + std::string(head[1]) + "'");
  std::size_t dim = 0;
  double eps = kDefaultStealthEps;
  std::uint64_t next_snap = 1;
  for (std::size_t i = 2; i < head.size(); ++i) {
    std::string_view v;
    if (detail::header_value(head[i], "dim", v)) {
      if (!codec::parse_int(v, dim)) fail("bad dim");
    } else if (detail::header_value(head[i], "eps", v)) {
      if (!codec::parse_double(v, eps)) fail("bad eps");
    } else if (detail::header_value(head[i], "next_snap", v)) {
      if (!codec::parse_int(v, next_snap)) fail("bad next_snap");
    } else {
      fail("unknown header field '" + std::string(head[i]) + "'");
    }
  }
  if (!encoders) throw PreconditionError("knowledge base: encoders required");
  if (dim != encoders->dim()) {
    fail("dimension " + std::to_string(dim) + " differs from encoder dimension " +
         std::to_string(encoders->dim()));
  }

  KnowledgeBase kb(std::move(encoders), eps);
  kb.next_snapshot_ = next_snap;
  bool in_snapshots = false;
  bool saw_checksum = false;
  std::size_t body_end = 0;  // byte offset where the checksum line starts
  std::size_t offset = lines[0].size() + 1;

  for (lineno = 1; lineno < lines.size(); ++lineno) {
    const std::string_view line = lines[lineno];
    if (saw_checksum) fail("content after checksum line");
    if (line.substr(0, kChecksumSentinel.size()) == kChecksumSentinel) {
      if (!in_snapshots) fail("checksum before snapshot section");
      body_end = offset;
      saw_checksum = true;
      offset += line.size() + 1;
      continue;
    }
    offset += line.size() + 1;
    if (line == kSnapshotSentinel) {
      if (in_snapshots) fail("duplicate snapshot sentinel");
      in_snapshots = true;
      continue;
    }
    const auto fields = codec::split(line, '\t');
    if (in_snapshots) {
      if (fields.size() != 2 || fields[0].empty()) fail("malformed snapshot record");
      std::vector<std::string> ds;
      for (auto d : codec::split_ws(fields[1])) ds.emplace_back(d);
      kb.snapshots_.emplace_back(std::string(fields[0]), std::move(ds));
      continue;
    }
    if (fields.size() != 9) fail("expected 9 tab-separated fields, got " + std::to_string(fields.size()));
    KBEntry e;
    e.id = std::string(fields[0]);
    if (!detail::is_token_safe(e.id)) fail("bad entry id");
    if (fields[1] == "benign") {
      e.provenance.tag = EntryTag::benign;
    } else if (fields[1] == "injected") {
      e.provenance.tag = EntryTag::injected;
    } else {
      fail("entry '" + e.id + "': unknown tag");
    }
    e.provenance.source = std::string(fields[2]);
    if (!codec::parse_int(fields[3], e.provenance.timestamp)) fail("entry '" + e.id + "': bad timestamp");
    e.provenance.digest = std::string(fields[4]);
    try {
      if (fields[5] != "-") e.report_text = codec::base64_decode(fields[5]);
      const auto img = fields[6];
      if (img.substr(0, 5) == "grid:") {
        e.image = detail::decode_grid_field(img, e.id);
      } else if (img.substr(0, 4) == "ref:") {
        e.image_ref = std::string(img.substr(4));
      } else if (img != "-") {
        fail("entry '" + e.id + "': malformed image field");
      }
    } catch (const TamperError&) {
      throw;
    } catch (const FormatError& err) {
      throw TamperError("knowledge base entry '" + e.id + "' is corrupt: " + err.what());
    }
    const auto vals = codec::split_ws(fields[7]);
    if (vals.size() != 2 * dim) fail("entry '" + e.id + "': expected " + std::to_string(2 * dim) + " embedding values");
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double v;
      if (!codec::parse_double(vals[i], v)) fail("entry '" + e.id + "': bad embedding value");
      (i < dim ? e.image_emb : e.text_emb).push_back(v);
    }
    if (e.provenance.tag == EntryTag::injected) {
      std::string_view lineage = fields[8];
      const auto parts = codec::split(lineage, ';');
      std::string_view base, ds;
      if (parts.size() != 2 || !detail::header_value(parts[0], "base", base) ||
          !detail::header_value(parts[1], "dsem", ds) || !codec::parse_double(ds, e.provenance.dsem)) {
        fail("entry '" + e.id + "': malformed lineage field");
      }
      e.provenance.base_id = std::string(base);
    } else if (fields[8] != "-") {
      fail("entry '" + e.id + "': benign entry with lineage field");
    }
    if (compute_digest(e) != e.provenance.digest) {
      throw TamperError("knowledge base entry '" + e.id + "' failed digest verification");
    }
    if (kb.find(e.id)) fail("duplicate entry id '" + e.id + "'");
    kb.entries_.push_back(std::move(e));
  }
  if (!in_snapshots) throw FormatError("knowledge base: missing snapshot section");
  if (!saw_checksum) throw FormatError("knowledge base: missing checksum line");
  const auto tail = codec::split_ws(lines.back());
  if (tail.size() != 2 || codec::sha256_hex(std::string_view(text).substr(0, body_end)) != tail[1]) {
    throw TamperError("knowledge base: file checksum mismatch");
  }
  const auto live = kb.digests();
  for (const auto& [id, ds] : kb.snapshots_) {
    if (ds.size() > live.size() || !std::equal(ds.begin(), ds.end(), live.begin())) {
      throw TamperError("knowledge base: snapshot '" + id + "' is not a prefix of the entries");
    }
  }
  return kb;
}

inline KnowledgeBase KnowledgeBase::load(const std::string& path,
                                         std::shared_ptr<const Encoders> encoders) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open knowledge base: " + path);
  return read(in, std::move(encoders));
}

}  // namespace medrag
