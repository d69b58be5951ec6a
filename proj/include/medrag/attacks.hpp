#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/encoder.hpp"
#include "medrag/error.hpp"
#include "medrag/generator.hpp"
#include "medrag/kb.hpp"
#include "medrag/rerank.hpp"
#include "medrag/retrieval.hpp"
#include "medrag/vecmath.hpp"

namespace medrag {

// ===========================================================================
// Black-box textual attack: negation flip.

struct NegationRules {
  std::vector<std::string> findings;  // lowercase phrases
  std::vector<std::string> negators;  // lowercase, longest first

  static const NegationRules& standard() {
    static const NegationRules rules{
        {"acute cardiopulmonary abnormality", "acute cardiopulmonary process",
         "consolidation", "pleural effusion", "effusion", "pneumothorax", "cardiomegaly",
         "enlarged cardiac silhouette", "pulmonary edema", "edema", "focal airspace disease",
         "airspace opacity", "opacity", "atelectasis", "pneumonia", "nodule", "mass",
         "fracture", "infiltrate", "lymphadenopathy", "mediastinal widening"},
        {"no evidence of", "no signs of", "no sign of", "negative for", "absence of",
         "free of", "without", "no"}};
    return rules;
  }
};

struct FlipResult {
  std::string text;
  std::size_t sentences_flipped = 0;
  bool no_op() const { return sentences_flipped == 0; }
};

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool word_at(const std::string& hay, std::size_t pos, std::string_view word) {
  if (hay.compare(pos, word.size(), word) != 0) return false;
  if (pos > 0 && is_word_char(hay[pos - 1])) return false;
  const std::size_t end = pos + word.size();
  return end >= hay.size() || !is_word_char(hay[end]);
}

/// Flips the first finding phrase of one sentence; returns false if none.
inline bool flip_sentence(std::string& sentence, const NegationRules& rules) {
  const std::string low = lower(sentence);
  std::size_t best = std::string::npos, best_len = 0;
  for (const auto& f : rules.findings) {
    for (std::size_t p = low.find(f); p != std::string::npos; p = low.find(f, p + 1)) {
      if (!word_at(low, p, f)) continue;
      if (p < best || (p == best && f.size() > best_len)) {
        best = p;
        best_len = f.size();
      }
      break;
    }
  }
  if (best == std::string::npos) return false;

  // Leading negator immediately before the finding?
  std::size_t stop = best;
  while (stop > 0 && low[stop - 1] == ' ') --stop;
  for (const auto& n : rules.negators) {
    if (stop >= n.size() && word_at(low, stop - n.size(), n)) {
      const std::size_t from = stop - n.size();
      const bool capital = std::isupper(static_cast<unsigned char>(sentence[from])) != 0;
      sentence.erase(from, best - from);
      if (capital) sentence[from] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[from])));
      return true;
    }
  }
  const bool capital = std::isupper(static_cast<unsigned char>(sentence[best])) != 0;
  const bool sentence_start = low.find_first_not_of(' ') == best;
  if (capital && sentence_start) {
    sentence[best] = static_cast<char>(std::tolower(static_cast<unsigned char>(sentence[best])));
    sentence.insert(best, "No ");
  } else {
    sentence.insert(best, "no ");
  }
  return true;
}

}  // namespace detail

/// Rule-based caption corruption: per sentence, delete the negator leading
/// the first finding phrase, or insert "no " before it when affirmed.
inline FlipResult ta_blackbox(std::string_view report,
                              const NegationRules& rules = NegationRules::standard()) {
  FlipResult out;
  std::string sentence;
  auto flush = [&] {
    if (detail::flip_sentence(sentence, rules)) ++out.sentences_flipped;
    out.text += sentence;
    sentence.clear();
  };
  for (char c : report) {
    if (c == '.' || c == ';' || c == '!' || c == '?' || c == '\n') {
      flush();
      out.text += c;
    } else {
      sentence += c;
    }
  }
  flush();
  return out;
}

// ===========================================================================
// Shared ascent machinery.

enum class StepMode {
  backtracking,  // halve the step until the objective strictly increases
  fixed,         // plain x + step * grad, as written
};

struct TraceRow {
  std::size_t iter = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::optional<double> dsem;
};

/// Optional attacker-side stealth budget: iterates must keep D_sem to the
/// benign base pair within eps.
struct StealthBudget {
  Vec base_image_emb;
  Vec base_text_emb;
  double eps = kDefaultStealthEps;

  double distance(std::span<const double> image_emb, std::span<const double> text_emb) const {
    return semantic_distance(image_emb, text_emb, base_image_emb, base_text_emb);
  }
};

struct AttackResult {
  Vec text_emb;                  // empty when the attack does not touch text
  std::optional<PixelGrid> image;
  Vec image_emb;                 // empty when the attack does not touch the image
  std::vector<TraceRow> trace;   // row 0 is the starting point
  double grad_norm_at_exit = 0.0;
  std::optional<double> dsem;
  bool within_stealth = true;
  std::string stop_reason;

  double initial_objective() const { return trace.front().objective; }
  double final_objective() const { return trace.back().objective; }
  std::size_t steps_taken() const { return trace.size() - 1; }
};

inline void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace) {
  out << "iter,objective,grad_norm,dsem\n";
  for (const auto& r : trace) {
    out << r.iter << ',' << codec::format_double(r.objective) << ','
        << codec::format_double(r.grad_norm) << ',';
    if (r.dsem) out << codec::format_double(*r.dsem);
    out << '\n';
  }
}

namespace detail {

inline constexpr double kGradTol = 1e-8;
inline constexpr std::size_t kMaxHalvings = 50;

inline double block_norm(const Vec& v) { return norm2(v); }
inline double block_norm(const PixelGrid& g) { return norm2(g.values); }

/// Runs an objective, mapping direction-less inputs to -inf.
template <class Eval, class X>
double safe_eval(Eval& eval, const X& x) {
  try {
    return eval(x);
  } catch (const DegenerateInputError&) {
    return -std::numeric_limits<double>::infinity();
  }
}

/// One gradient step on a block. Backtracking accepts the first halving
/// that strictly increases the objective and stays feasible; fixed mode
/// takes the full step unless it is infeasible.
template <class X, class Move, class Eval, class Feasible>
bool ascent_step(X& x, double& fx, const X& grad, double step, StepMode mode, Move&& move,
                 Eval&& eval, Feasible&& feasible) {
  const std::size_t tries = mode == StepMode::backtracking ? kMaxHalvings + 1 : 1;
  double a = step;
  for (std::size_t k = 0; k < tries; ++k, a *= 0.5) {
    X cand = move(x, grad, a);
    const double fc = safe_eval(eval, cand);
    if (mode == StepMode::fixed) {
      if (!std::isfinite(fc)) throw NumericError("attack: objective became non-finite");
      if (!feasible(cand)) return false;
      x = std::move(cand);
      fx = fc;
      return true;
    }
    if (std::isfinite(fc) && fc > fx && feasible(cand)) {
      x = std::move(cand);
      fx = fc;
      return true;
    }
  }
  return false;
}

inline Vec add_scaled(const Vec& x, const Vec& g, double a) {
  Vec out = x;
  axpy(a, g, out);
  return out;
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite objective");
}

}  // namespace detail

// ===========================================================================
// White-box textual attack.

struct TAConfig {
  double alpha = 0.05;
  std::size_t iters = 500;
  std::string target_answer = "No";
  StepMode step = StepMode::backtracking;

  void validate() const {
    if (!(alpha > 0.0)) throw PreconditionError("TA: alpha must be > 0");
  }
};

/// L_TA(T) = sum_i log P(target | Q_i, I, T), with (I, T) as the sole context pair.
inline double ta_objective(std::span<const Query> queries, std::span<const double> image_emb,
                           std::span<const double> text, const ToyAnswerModel& model,
                           std::size_t target) {
  const ContextItem ctx[] = {{text, image_emb}};
  double s = 0.0;
  for (const auto& q : queries) s += model.log_prob_from_features(target, model.features(q, ctx));
  return s;
}

inline Vec ta_gradient(std::span<const Query> queries, std::span<const double> image_emb,
                       std::span<const double> text, const ToyAnswerModel& model,
                       std::size_t target) {
  const ContextItem ctx[] = {{text, image_emb}};
  Vec g(model.dim(), 0.0);
  for (const auto& q : queries) {
    axpy(1.0, grad_logp(model.vocab()[target], q, ctx, 0, ContextBlock::text, model), g);
  }
  return g;
}

/// Gradient ascent on L_TA in text-embedding space: T <- T + alpha * grad.
inline AttackResult ta_whitebox(std::span<const Query> queries, std::span<const double> image_emb,
                                std::span<const double> t_init, const ToyAnswerModel& model,
                                const TAConfig& cfg, const StealthBudget* budget = nullptr) {
  cfg.validate();
  if (queries.empty()) throw PreconditionError("TA: need at least one query");
  const std::size_t target = model.vocab().index_of(cfg.target_answer);
  Vec img(image_emb.begin(), image_emb.end());
  auto eval = [&](const Vec& t) { return ta_objective(queries, img, t, model, target); };
  auto grad = [&](const Vec& t) { return ta_gradient(queries, img, t, model, target); };
  auto dsem = [&](const Vec& t) -> std::optional<double> {
    if (!budget) return std::nullopt;
    try {
      return budget->distance(img, t);
    } catch (const DegenerateInputError&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  auto feasible = [&](const Vec& t) { return !budget || *dsem(t) <= budget->eps; };

  AttackResult r;
  Vec t(t_init.begin(), t_init.end());
  double ft = eval(t);
  detail::require_finite(ft, "TA");
  Vec g = grad(t);
  r.trace.push_back({0, ft, norm2(g), dsem(t)});
  r.stop_reason = "iteration budget reached";
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    if (norm2(g) < detail::kGradTol) {
      r.stop_reason = "gradient norm below tolerance";
      break;
    }
    if (!detail::ascent_step(t, ft, g, cfg.alpha, cfg.step, detail::add_scaled, eval, feasible)) {
      r.stop_reason = "no admissible ascent step";
      break;
    }
    g = grad(t);
    r.trace.push_back({it, ft, norm2(g), dsem(t)});
  }
  r.grad_norm_at_exit = norm2(g);
  r.dsem = dsem(t);
  r.within_stealth = feasible(t);
  r.text_emb = std::move(t);
  return r;
}

// ===========================================================================
// Visual attack, global setting.

enum class VAMode { pixel, embedding };

struct VAConfig {
  double alpha = 0.05;
  std::size_t iters = 500;
  VAMode mode = VAMode::pixel;
  StepMode step = StepMode::backtracking;

  void validate() const {
    if (!(alpha > 0.0)) throw PreconditionError("VA: alpha must be > 0");
  }
};

/// L_VA = sum_i cos(e, f_T(Q_i)).
inline double va_objective(std::span<const double> image_emb, std::span<const Query> queries) {
  double s = 0.0;
  for (const auto& q : queries) s += cosine(image_emb, q.question_emb);
  return s;
}

inline Vec va_gradient(std::span<const double> image_emb, std::span<const Query> queries) {
  Vec g(image_emb.size(), 0.0);
  for (const auto& q : queries) axpy(1.0, cosine_grad(image_emb, q.question_emb), g);
  return g;
}

/// Pixel-space L_VA through the encoder (cosine ignores the normalization).
inline double va_objective_pixels(const PixelGrid& img, std::span<const Query> queries,
                                  const ImageEncoder& enc) {
  return va_objective(enc.pre_norm(img), queries);
}

inline PixelGrid va_gradient_pixels(const PixelGrid& img, std::span<const Query> queries,
                                    const ImageEncoder& enc) {
  return enc.pre_norm_vjp(va_gradient(enc.pre_norm(img), queries));
}

/// Gradient ascent on L_VA. Pixel mode clamps to [0,1] every step. With a
/// budget, the injected pair is assumed to keep the base's report text.
inline AttackResult va_global(std::span<const Query> queries, const PixelGrid& img_init,
                              const ImageEncoder& enc, const VAConfig& cfg,
                              const StealthBudget* budget = nullptr) {
  cfg.validate();
  if (queries.empty()) throw PreconditionError("VA: need at least one query");
  auto dsem_of = [&](std::span<const double> e) -> std::optional<double> {
    if (!budget) return std::nullopt;
    return budget->distance(e, budget->base_text_emb);
  };

  AttackResult r;
  r.stop_reason = "iteration budget reached";
  if (cfg.mode == VAMode::embedding) {
    Vec e = enc.embed(img_init);
    auto eval = [&](const Vec& x) { return va_objective(x, queries); };
    auto feasible = [&](const Vec& x) {
      if (!budget) return true;
      try {
        return *dsem_of(x) <= budget->eps;
      } catch (const DegenerateInputError&) {
        return false;
      }
    };
    double fe = eval(e);
    detail::require_finite(fe, "VA");
    Vec g = va_gradient(e, queries);
    r.trace.push_back({0, fe, norm2(g), dsem_of(e)});
    for (std::size_t it = 1; it <= cfg.iters; ++it) {
      if (norm2(g) < detail::kGradTol) {
        r.stop_reason = "gradient norm below tolerance";
        break;
      }
      if (!detail::ascent_step(e, fe, g, cfg.alpha, cfg.step, detail::add_scaled, eval, feasible)) {
        r.stop_reason = "no admissible ascent step";
        break;
      }
      g = va_gradient(e, queries);
      r.trace.push_back({it, fe, norm2(g), dsem_of(e)});
    }
    r.grad_norm_at_exit = norm2(g);
    r.dsem = dsem_of(e);
    r.within_stealth = feasible(e);
    r.image_emb = std::move(e);
    return r;
  }

  PixelGrid img = img_init;
  enc.embed(img);  // degenerate images fail here
  auto eval = [&](const PixelGrid& x) { return va_objective_pixels(x, queries, enc); };
  auto move = [](const PixelGrid& x, const PixelGrid& g, double a) {
    PixelGrid out = x;
    axpy(a, g.values, out.values);
    clamp_unit(out);
    return out;
  };
  auto feasible = [&](const PixelGrid& x) {
    if (!budget) return true;
    try {
      return *dsem_of(enc.embed(x)) <= budget->eps;
    } catch (const DegenerateInputError&) {
      return false;
    }
  };
  double fi = eval(img);
  detail::require_finite(fi, "VA");
  PixelGrid g = va_gradient_pixels(img, queries, enc);
  r.trace.push_back({0, fi, detail::block_norm(g), dsem_of(enc.embed(img))});
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    if (detail::block_norm(g) < detail::kGradTol) {
      r.stop_reason = "gradient norm below tolerance";
      break;
    }
    if (!detail::ascent_step(img, fi, g, cfg.alpha, cfg.step, move, eval, feasible)) {
      r.stop_reason = "no admissible ascent step";
      break;
    }
    g = va_gradient_pixels(img, queries, enc);
    r.trace.push_back({it, fi, detail::block_norm(g), dsem_of(enc.embed(img))});
  }
  r.grad_norm_at_exit = detail::block_norm(g);
  r.image_emb = enc.embed(img);
  r.dsem = dsem_of(r.image_emb);
  r.within_stealth = feasible(img);
  r.image = std::move(img);
  return r;
}

// ===========================================================================
// Joint image-text objectives and the alternating projected ascent used by
// CMCI and by the stage-targeted crafting of the ablation study.

/// A scalar objective of an (image, text embedding) pair.
class PairObjective {
 public:
  virtual ~PairObjective() = default;
  virtual double value(const PixelGrid& image, std::span<const double> text) const = 0;
  virtual PixelGrid grad_image(const PixelGrid& image, std::span<const double> text) const = 0;
  virtual Vec grad_text(const PixelGrid& image, std::span<const double> text) const = 0;
};

/// Unweighted sum of other objectives, which must outlive it.
class SumObjective final : public PairObjective {
 public:
  explicit SumObjective(std::vector<const PairObjective*> terms) : terms_(std::move(terms)) {
    if (terms_.empty()) throw PreconditionError("sum objective: no terms");
  }

  double value(const PixelGrid& image, std::span<const double> text) const override {
    double s = 0.0;
    for (const auto* t : terms_) s += t->value(image, text);
    return s;
  }
  PixelGrid grad_image(const PixelGrid& image, std::span<const double> text) const override {
    PixelGrid g = terms_.front()->grad_image(image, text);
    for (std::size_t i = 1; i < terms_.size(); ++i) {
      axpy(1.0, terms_[i]->grad_image(image, text).values, g.values);
    }
    return g;
  }
  Vec grad_text(const PixelGrid& image, std::span<const double> text) const override {
    Vec g = terms_.front()->grad_text(image, text);
    for (std::size_t i = 1; i < terms_.size(); ++i) axpy(1.0, terms_[i]->grad_text(image, text), g);
    return g;
  }

 private:
  std::vector<const PairObjective*> terms_;
};

/// lambda1 * cos(f_I(I), T) + lambda2 * log P(target | Q, I, T).
class CmciObjective final : public PairObjective {
 public:
  CmciObjective(const Query& q, const ToyAnswerModel& model, const ImageEncoder& enc,
                std::size_t target, double lambda1, double lambda2)
      : q_(q), model_(model), enc_(enc), target_(target), l1_(lambda1), l2_(lambda2) {}

  double align(const PixelGrid& image, std::span<const double> text) const {
    return cosine(enc_.pre_norm(image), text);
  }

  double misalign(const PixelGrid& image, std::span<const double> text) const {
    const Vec e = enc_.embed(image);
    const ContextItem ctx[] = {{text, e}};
    return model_.log_prob_from_features(target_, model_.features(q_, ctx));
  }

  double value(const PixelGrid& image, std::span<const double> text) const override {
    double v = 0.0;
    if (l1_ != 0.0) v += l1_ * align(image, text);
    if (l2_ != 0.0) v += l2_ * misalign(image, text);
    return v;
  }

  PixelGrid grad_image(const PixelGrid& image, std::span<const double> text) const override {
    const Vec pre = enc_.pre_norm(image);
    Vec g_pre(pre.size(), 0.0);
    if (l1_ != 0.0) axpy(l1_, cosine_grad(pre, text), g_pre);
    if (l2_ != 0.0) {
      const Vec e = normalized(pre);
      const ContextItem ctx[] = {{text, e}};
      const Vec g_e = grad_logp(model_.vocab()[target_], q_, ctx, 0, ContextBlock::image, model_);
      axpy(l2_, normalize_vjp(pre, g_e), g_pre);
    }
    return enc_.pre_norm_vjp(g_pre);
  }

  Vec grad_text(const PixelGrid& image, std::span<const double> text) const override {
    const Vec e = enc_.embed(image);
    Vec g(text.size(), 0.0);
    if (l1_ != 0.0) axpy(l1_, cosine_grad(text, e), g);
    if (l2_ != 0.0) {
      const ContextItem ctx[] = {{text, e}};
      axpy(l2_, grad_logp(model_.vocab()[target_], q_, ctx, 0, ContextBlock::text, model_), g);
    }
    return g;
  }

 private:
  const Query& q_;
  const ToyAnswerModel& model_;
  const ImageEncoder& enc_;
  std::size_t target_;
  double l1_, l2_;
};

/// sum_i s(Q_i, (I, T)): the retriever's score, for retriever-stage poisoning.
class RetrievalScoreObjective final : public PairObjective {
 public:
  RetrievalScoreObjective(std::span<const Query> queries, const ImageEncoder& enc, double w_img)
      : queries_(queries), enc_(enc), w_(w_img) {}

  double value(const PixelGrid& image, std::span<const double> text) const override {
    const Vec pre = enc_.pre_norm(image);
    double s = 0.0;
    for (const auto& q : queries_) {
      s += w_ * cosine(q.image_emb, pre) + (1.0 - w_) * cosine(q.question_emb, text);
    }
    return s;
  }
  PixelGrid grad_image(const PixelGrid& image, std::span<const double>) const override {
    const Vec pre = enc_.pre_norm(image);
    Vec g(pre.size(), 0.0);
    for (const auto& q : queries_) axpy(w_, cosine_grad(pre, q.image_emb), g);
    return enc_.pre_norm_vjp(g);
  }
  Vec grad_text(const PixelGrid&, std::span<const double> text) const override {
    Vec g(text.size(), 0.0);
    for (const auto& q : queries_) axpy(1.0 - w_, cosine_grad(text, q.question_emb), g);
    return g;
  }

 private:
  std::span<const Query> queries_;
  const ImageEncoder& enc_;
  double w_;
};

/// sum_i r(Q_i, (I, T)) under the bilinear reranker, for reranker-stage poisoning.
/// The text enters the reranker normalized, as stored in the knowledge base.
class RelevanceObjective final : public PairObjective {
 public:
  RelevanceObjective(std::span<const Query> queries, const ImageEncoder& enc,
                     const BilinearReranker& reranker)
      : queries_(queries), enc_(enc), rr_(reranker) {}

  double value(const PixelGrid& image, std::span<const double> text) const override {
    const Vec e = enc_.embed(image);
    const Vec t = normalized(text);
    double s = 0.0;
    for (const auto& q : queries_) {
      s += 0.5 * (rr_.bilinear(q.question_emb, t) + rr_.bilinear(q.image_emb, e));
    }
    return s;
  }
  PixelGrid grad_image(const PixelGrid& image, std::span<const double>) const override {
    Vec g(enc_.dim(), 0.0);
    for (const auto& q : queries_) axpy(0.5, rr_.left_product(q.image_emb), g);
    return enc_.embed_vjp(image, g);
  }
  Vec grad_text(const PixelGrid&, std::span<const double> text) const override {
    Vec g(text.size(), 0.0);
    for (const auto& q : queries_) axpy(0.5, rr_.left_product(q.question_emb), g);
    return normalize_vjp(text, g);
  }

 private:
  std::span<const Query> queries_;
  const ImageEncoder& enc_;
  const BilinearReranker& rr_;
};

enum class UpdateOrder { image_first, text_first };

struct PairAscentConfig {
  double alpha = 0.05;      // image step
  double beta_step = 0.05;  // text step
  double eps_ball = 0.1;    // L-inf radius around the base image
  std::size_t iters = 500;
  UpdateOrder order = UpdateOrder::image_first;
  StepMode step = StepMode::backtracking;
};

/// Alternating ascent: I <- Pi_eps(I + alpha grad_I), T <- T + beta grad_T.
/// Every iterate satisfies |I - base_image|_inf <= eps_ball.
inline AttackResult pair_ascent(const PairObjective& obj, const PixelGrid& base_image,
                                std::span<const double> text_init, const ImageEncoder& enc,
                                const PairAscentConfig& cfg, const StealthBudget* budget = nullptr) {
  if (!(cfg.alpha > 0.0) || !(cfg.beta_step > 0.0)) throw PreconditionError("pair ascent: steps must be > 0");
  if (!(cfg.eps_ball >= 0.0)) throw PreconditionError("pair ascent: eps_ball must be >= 0");

  PixelGrid img = project_linf(base_image, base_image, cfg.eps_ball);
  Vec text(text_init.begin(), text_init.end());

  auto dsem = [&](const PixelGrid& i, const Vec& t) -> std::optional<double> {
    if (!budget) return std::nullopt;
    try {
      return budget->distance(enc.embed(i), t);
    } catch (const DegenerateInputError&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  auto feasible = [&](const PixelGrid& i, const Vec& t) { return !budget || *dsem(i, t) <= budget->eps; };
  auto grad_norm = [&](const PixelGrid& i, const Vec& t) {
    const double a = detail::block_norm(obj.grad_image(i, t));
    const double b = norm2(obj.grad_text(i, t));
    return std::sqrt(a * a + b * b);
  };
  auto move_image = [&](const PixelGrid& x, const PixelGrid& g, double a) {
    PixelGrid out = x;
    axpy(a, g.values, out.values);
    return project_linf(out, base_image, cfg.eps_ball);
  };

  AttackResult r;
  double f = obj.value(img, text);
  detail::require_finite(f, "pair ascent");
  double gn = grad_norm(img, text);
  r.trace.push_back({0, f, gn, dsem(img, text)});
  r.stop_reason = "iteration budget reached";

  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    if (gn < detail::kGradTol) {
      r.stop_reason = "gradient norm below tolerance";
      break;
    }
    bool moved = false;
    for (int phase = 0; phase < 2; ++phase) {
      const bool image_phase = (phase == 0) == (cfg.order == UpdateOrder::image_first);
      if (image_phase) {
        const PixelGrid g = obj.grad_image(img, text);
        auto eval = [&](const PixelGrid& x) { return obj.value(x, text); };
        auto ok = [&](const PixelGrid& x) { return feasible(x, text); };
        moved |= detail::ascent_step(img, f, g, cfg.alpha, cfg.step, move_image, eval, ok);
      } else {
        const Vec g = obj.grad_text(img, text);
        auto eval = [&](const Vec& x) { return obj.value(img, x); };
        auto ok = [&](const Vec& x) { return feasible(img, x); };
        moved |= detail::ascent_step(text, f, g, cfg.beta_step, cfg.step, detail::add_scaled, eval, ok);
      }
    }
    if (!moved) {
      r.stop_reason = "no admissible ascent step";
      break;
    }
    gn = grad_norm(img, text);
    r.trace.push_back({it, f, gn, dsem(img, text)});
  }
  r.grad_norm_at_exit = gn;
  r.dsem = dsem(img, text);
  r.within_stealth = feasible(img, text);
  r.image_emb = enc.embed(img);
  r.image = std::move(img);
  r.text_emb = std::move(text);
  return r;
}

struct CMCIConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double alpha = 0.05;
  double beta_step = 0.05;
  double eps_ball = 0.1;
  std::size_t iters = 500;
  std::string target = "No";
  UpdateOrder order = UpdateOrder::image_first;
  StepMode step = StepMode::backtracking;

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 == 0.0 && lambda2 == 0.0)) {
      throw PreconditionError("CMCI: lambdas must be >= 0 and not both 0");
    }
    if (!(eps_ball >= 0.0)) throw PreconditionError("CMCI: eps_ball must be >= 0");
  }
  PairAscentConfig ascent() const { return {alpha, beta_step, eps_ball, iters, order, step}; }
};

/// Cross-modal conflict injection from (base image, initial text embedding).
inline AttackResult cmci(const PixelGrid& base_image, std::span<const double> text_init,
                         const Query& query, const ToyAnswerModel& model, const ImageEncoder& enc,
                         const CMCIConfig& cfg, const StealthBudget* budget = nullptr) {
  cfg.validate();
  if (!model.vocab().contains(cfg.target)) {
    throw PreconditionError("CMCI: target label '" + cfg.target + "' not in vocabulary");
  }
  const CmciObjective obj(query, model, enc, model.vocab().index_of(cfg.target), cfg.lambda1,
                          cfg.lambda2);
  return pair_ascent(obj, base_image, text_init, enc, cfg.ascent(), budget);
}

// ===========================================================================
// Stealth check.

struct StealthVerdict {
  bool within = false;
  double dsem = 0.0;
};

inline StealthVerdict check_stealth(std::span<const double> image_emb, std::span<const double> text_emb,
                                    std::span<const double> base_image_emb,
                                    std::span<const double> base_text_emb, double eps) {
  const double d = semantic_distance(image_emb, text_emb, base_image_emb, base_text_emb);
  return {d <= eps, d};
}

inline StealthVerdict check_stealth(const PixelGrid& image, std::string_view text,
                                    const PixelGrid& base_image, std::string_view base_text,
                                    const Encoders& enc, double eps) {
  return check_stealth(enc.image.embed(image), enc.text.embed(text), enc.image.embed(base_image),
                       enc.text.embed(base_text), eps);
}

}  // namespace medrag
