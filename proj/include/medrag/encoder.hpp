#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/error.hpp"
#include "medrag/rng.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

inline constexpr std::size_t kDefaultEmbeddingDim = 64;
inline constexpr std::size_t kDefaultPatch = 4;

/// Lowercased tokens, split on anything that is not a letter or digit.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Hashed bag-of-tokens text encoder (stand-in for a CLIP text tower).
class TextEncoder {
 public:
  explicit TextEncoder(std::uint64_t seed = 0, std::size_t dim = kDefaultEmbeddingDim)
      : seed_(seed), dim_(dim) {
    if (dim == 0) throw PreconditionError("text encoder: dimension must be > 0");
  }

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::size_t token_index(std::string_view token) const {
    return static_cast<std::size_t>(hash_text(token, seed_) % dim_);
  }

  /// Token counts before normalization.
  Vec raw(std::string_view text) const {
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw PreconditionError("embed_text: empty text");
    Vec v(dim_, 0.0);
    for (const auto& t : tokens) v[token_index(t)] += 1.0;
    return v;
  }

  Vec embed(std::string_view text) const { return normalized(raw(text)); }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

/// Mean-pools non-overlapping patches, applies a fixed linear projection,
/// then L2-normalizes. Linear up to the final normalization, so pixel
/// gradients are exact.
class ImageEncoder {
 public:
  /// Seeded Gaussian projection, entries N(0, 1/features).
  ImageEncoder(std::uint64_t seed, std::size_t dim, std::size_t height, std::size_t width,
               std::size_t patch = kDefaultPatch)
      : dim_(dim), height_(height), width_(width), patch_(patch) {
    check_shape();
    Rng rng(derive_seed(seed, 0x1a6e));
    const double scale = 1.0 / std::sqrt(static_cast<double>(features()));
    matrix_.resize(dim_ * features());
    for (double& m : matrix_) m = scale * standard_normal(rng);
  }

  /// Explicit row-major dim x features projection.
  ImageEncoder(std::vector<double> matrix, std::size_t dim, std::size_t height,
               std::size_t width, std::size_t patch)
      : dim_(dim), height_(height), width_(width), patch_(patch), matrix_(std::move(matrix)) {
    check_shape();
    if (matrix_.size() != dim_ * features()) {
      throw PreconditionError("image encoder: matrix size does not match dim x features");
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t patch() const { return patch_; }
  std::size_t features() const { return (height_ / patch_) * (width_ / patch_); }
  const std::vector<double>& matrix() const { return matrix_; }

  Vec pool(const PixelGrid& img) const {
    check_image(img);
    const std::size_t pw = width_ / patch_;
    Vec f(features(), 0.0);
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) {
        f[(r / patch_) * pw + c / patch_] += img.at(r, c);
      }
    }
    const double inv = 1.0 / static_cast<double>(patch_ * patch_);
    for (double& x : f) x *= inv;
    return f;
  }

  Vec project(std::span<const double> feats) const {
    Vec e(dim_, 0.0);
    const std::size_t nf = features();
    for (std::size_t i = 0; i < dim_; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < nf; ++j) s += matrix_[i * nf + j] * feats[j];
      e[i] = s;
    }
    return e;
  }

  /// Embedding before normalization (linear in the pixels).
  Vec pre_norm(const PixelGrid& img) const { return project(pool(img)); }

  Vec embed(const PixelGrid& img) const {
    const Vec e = pre_norm(img);
    if (norm2(e) == 0.0) throw DegenerateInputError("embed_image: image has no direction");
    return normalized(e);
  }

  /// Pixel gradient of <g, embed(img)> for an upstream gradient g.
  PixelGrid embed_vjp(const PixelGrid& img, std::span<const double> g) const {
    return pre_norm_vjp(normalize_vjp(pre_norm(img), g));
  }

  /// Pixel gradient of <g, pre_norm(img)>; independent of the image.
  PixelGrid pre_norm_vjp(std::span<const double> g) const {
    if (g.size() != dim_) throw PreconditionError("image encoder vjp: dimension mismatch");
    const std::size_t nf = features();
    Vec gf(nf, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = 0; j < nf; ++j) gf[j] += matrix_[i * nf + j] * g[i];
    }
    const double inv = 1.0 / static_cast<double>(patch_ * patch_);
    const std::size_t pw = width_ / patch_;
    PixelGrid out(height_, width_);
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) {
        out.at(r, c) = gf[(r / patch_) * pw + c / patch_] * inv;
      }
    }
    return out;
  }

 private:
  void check_shape() const {
    if (dim_ == 0 || patch_ == 0) throw PreconditionError("image encoder: zero dim or patch");
    if (height_ % patch_ != 0 || width_ % patch_ != 0) {
      throw PreconditionError("image encoder: image size not divisible by patch size");
    }
  }
  void check_image(const PixelGrid& img) const {
    if (img.height % patch_ != 0 || img.width % patch_ != 0) {
      throw PreconditionError("embed_image: image size not divisible by patch size");
    }
    if (img.height != height_ || img.width != width_) {
      throw PreconditionError("embed_image: image shape differs from encoder shape");
    }
  }

  std::size_t dim_;
  std::size_t height_;
  std::size_t width_;
  std::size_t patch_;
  std::vector<double> matrix_;
};

/// The pair of towers sharing one embedding space.
struct Encoders {
  TextEncoder text;
  ImageEncoder image;

  std::size_t dim() const { return text.dim(); }
};

// ---------------------------------------------------------------------------
// Embedding files: `<id>\t[<tag>\t]<v1> <v2> ... <vd>`, '#' comment lines.

struct EmbeddingRecord {
  std::string id;
  std::string tag;  // empty when the file has no tag column
  Vec values;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

inline std::vector<EmbeddingRecord> read_embeddings(std::istream& in, std::size_t dim) {
  std::vector<EmbeddingRecord> out;
  std::set<std::string, std::less<>> seen;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw FormatError("embeddings line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = codec::split(line, '\t');
    if (fields.size() != 2 && fields.size() != 3) fail("expected <id><TAB>[<tag><TAB>]<values>");
    EmbeddingRecord rec;
    rec.id = std::string(fields[0]);
    if (rec.id.empty()) fail("empty id");
    if (fields.size() == 3) rec.tag = std::string(fields[1]);
    for (auto tok : codec::split_ws(fields.back())) {
      double v;
      if (!codec::parse_double(tok, v) || !std::isfinite(v)) {
        fail("bad value '" + std::string(tok) + "'");
      }
      rec.values.push_back(v);
    }
    if (rec.values.size() != dim) {
      fail("dimension mismatch: got " + std::to_string(rec.values.size()) + ", expected " +
           std::to_string(dim));
    }
    if (!seen.insert(rec.id).second) fail("duplicate id '" + rec.id + "'");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<EmbeddingRecord> load_embeddings(const std::string& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open embeddings file: " + path);
  return read_embeddings(in, dim);
}

inline void write_embeddings(std::ostream& out, std::span<const EmbeddingRecord> records) {
  for (const auto& r : records) {
    out << r.id << '\t';
    if (!r.tag.empty()) out << r.tag << '\t';
    out << codec::join_doubles(r.values) << '\n';
  }
}

inline void save_embeddings(const std::string& path, std::span<const EmbeddingRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write embeddings file: " + path);
  write_embeddings(out, records);
  if (!out) throw FormatError("write failed: " + path);
}

}  // namespace medrag
