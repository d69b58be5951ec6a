#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "medrag/attacks.hpp"
#include "medrag/diffusion.hpp"
#include "medrag/harness/benchmark.hpp"
#include "medrag/harness/config.hpp"
#include "medrag/harness/metrics.hpp"
#include "medrag/harness/pipeline.hpp"

namespace medrag::harness {

enum class AttackKind { none, rag_clean, textpo, imapo, mixed, mixed_superpose };
enum class Intensity { standard, plusplus };
enum class TargetComponent { all, retriever, reranker, generator };

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::rag_clean: return "rag_clean";
    case AttackKind::textpo: return "textpo";
    case AttackKind::imapo: return "imapo";
    case AttackKind::mixed: return "mixed";
    case AttackKind::mixed_superpose: return "mixed-superpose";
  }
  return "?";
}

inline AttackKind parse_attack_kind(std::string_view s) {
  for (auto k : {AttackKind::none, AttackKind::rag_clean, AttackKind::textpo, AttackKind::imapo,
                 AttackKind::mixed, AttackKind::mixed_superpose}) {
    if (s == to_string(k)) return k;
  }
  throw PreconditionError("unknown attack kind '" + std::string(s) +
                          "' (none, rag_clean, textpo, imapo, mixed, mixed-superpose)");
}

inline std::string_view to_string(TargetComponent t) {
  switch (t) {
    case TargetComponent::all: return "all";
    case TargetComponent::retriever: return "retriever";
    case TargetComponent::reranker: return "reranker";
    case TargetComponent::generator: return "generator";
  }
  return "?";
}

inline TargetComponent parse_target(std::string_view s) {
  for (auto t : {TargetComponent::all, TargetComponent::retriever, TargetComponent::reranker,
                 TargetComponent::generator}) {
    if (s == to_string(t)) return t;
  }
  throw PreconditionError("unknown target component '" + std::string(s) +
                          "' (all, retriever, reranker, generator)");
}

inline Intensity parse_intensity(std::string_view s) {
  if (s == "standard") return Intensity::standard;
  if (s == "plusplus" || s == "++") return Intensity::plusplus;
  throw PreconditionError("unknown intensity '" + std::string(s) + "' (standard, plusplus)");
}

/// Optimizer settings shared by every crafted injection.
struct AttackSettings {
  TAConfig ta;
  VAConfig va{.iters = 10};
  CMCIConfig cmci;
  double seed_sigma = 0.05;          // spread of the diffusion prior around the prompt's image
  std::size_t diffusion_steps = 200;
  bool respect_gate = true;          // keep iterates inside the KB's stealth radius
};

struct ExperimentConfig {
  double poison_rate = 0.0;
  AttackKind attack = AttackKind::rag_clean;
  Intensity intensity = Intensity::standard;
  TargetComponent target = TargetComponent::all;
  std::uint64_t seed = 0;
  AttackSettings attacks;
  std::optional<double> stealth_eps;  // overrides the knowledge base's gate radius
  std::size_t threads = 0;            // 0: hardware concurrency

  bool injects() const {
    return attack != AttackKind::none && attack != AttackKind::rag_clean && poison_rate > 0.0;
  }

  void validate() const {
    if (!(poison_rate >= 0.0 && poison_rate <= 1.0)) {
      throw PreconditionError("poison rate must lie in [0,1]");
    }
    if (target != TargetComponent::all && attack != AttackKind::mixed) {
      throw PreconditionError("component-targeted poisoning requires attack kind 'mixed'");
    }
    if (stealth_eps && !(*stealth_eps >= 0.0 && *stealth_eps <= 2.0)) {
      throw PreconditionError("stealth eps must lie in [0,2]");
    }
    attacks.ta.validate();
    attacks.va.validate();
    attacks.cmci.validate();
  }

  std::string label() const;
};

inline std::string percent_label(double rate) {
  std::string s = codec::format_fixed(rate * 100.0, 2);
  while (s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s + "%";
}

inline std::string ExperimentConfig::label() const {
  if (attack == AttackKind::none) return "LVLM (no RAG)";
  if (attack == AttackKind::rag_clean || !(poison_rate > 0.0)) return "+ RAG";
  const std::string pct = " (" + percent_label(poison_rate) + ")";
  if (target != TargetComponent::all) {
    std::string t(to_string(target));
    t[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
    return "+ RAG + " + t + " Poisoning" + pct;
  }
  return "+ " + std::string(to_string(attack)) + (intensity == Intensity::plusplus ? "++" : "") + pct;
}

struct InjectionSummary {
  std::size_t benign = 0;
  std::size_t attempts = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<InjectionOutcome> outcomes;

  double acceptance_rate() const {
    return attempts ? static_cast<double>(accepted) / static_cast<double>(attempts) : 1.0;
  }
};

/// Runs fn(i) for i in [0, n) over up to `threads` workers (0: hardware).
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Number of injection bases: floor(rate * benign), tolerant of decimal rates like 0.29.
inline std::size_t injection_count(double rate, std::size_t benign) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(benign) + 1e-9));
}

/// Everything an attacker-side crafting step reads.
struct PoisonContext {
  const Benchmark& bench;
  const BilinearReranker& reranker;
  AttackSettings settings;
  TargetComponent target = TargetComponent::all;
  std::size_t threads = 0;
};

namespace detail {

inline std::vector<Query> attacker_queries(const Encoders& enc, std::size_t finding,
                                           std::span<const double> image_emb) {
  std::vector<Query> qs;
  for (std::size_t t = 0; t < question_templates().size(); ++t) {
    Query q;
    q.question = make_question(t, finding);
    q.question_emb = enc.text.embed(q.question);
    q.image_emb.assign(image_emb.begin(), image_emb.end());
    qs.push_back(std::move(q));
  }
  return qs;
}

inline TAConfig scaled(TAConfig c, Intensity i) {
  if (i == Intensity::plusplus) c.iters *= 2;
  return c;
}
inline VAConfig scaled(VAConfig c, Intensity i) {
  if (i == Intensity::plusplus) c.iters *= 2;
  return c;
}
inline CMCIConfig scaled(CMCIConfig c, Intensity i) {
  if (i == Intensity::plusplus) c.iters *= 2;
  return c;
}

/// Noise-free image of what the flipped report describes: the asked
/// finding alone when it is affirmed, an empty field otherwise.
inline PixelGrid flipped_template(const PixelGrid& base, const ReportSubject& sub,
                                  const BenchConfig& bc) {
  PixelGrid mu(base.height, base.width, bc.background);
  if (!sub.affirmed) set_finding_region(mu, sub.finding, bc.lesion);
  return mu;
}

/// Diffusion seed for an image showing the opposite state of the base's finding.
inline PixelGrid synthesize_flipped_image(const KBEntry& base, const ReportSubject& sub,
                                          const std::string& prompt, const BenchConfig& bc,
                                          const AttackSettings& s, Rng& rng) {
  const PixelGrid mu = flipped_template(*base.image, sub, bc);
  const auto schedule = diffusion::NoiseSchedule::linear(s.diffusion_steps);
  const diffusion::AnalyticGaussianDenoiser prior(mu.values, s.seed_sigma, schedule);
  return diffusion::synthesize_seed(prompt, mu.height, mu.width, schedule, prior, rng);
}

inline KBEntry entry_from(const Encoders& enc, std::string id, std::optional<std::string> report,
                          Vec text_emb, PixelGrid image) {
  KBEntry e;
  e.id = std::move(id);
  e.image_emb = enc.image.embed(image);
  e.image = std::move(image);
  if (report) {
    e.text_emb = enc.text.embed(*report);
    e.report_text = std::move(report);
  } else {
    e.text_emb = normalized(text_emb);
  }
  e.provenance.source = "external";
  return e;
}

/// Crafts one adversarial pair from a benign base, or explains why it cannot.
inline std::optional<KBEntry> craft(const KBEntry& base, std::size_t index, AttackKind kind,
                                    Intensity intensity, std::uint64_t seed, double stealth_eps,
                                    const PoisonContext& ctx, std::string& why) {
  if (!base.report_text || !base.image) {
    why = "base lacks a raw report or image";
    return std::nullopt;
  }
  const auto sub = parse_subject(*base.report_text);
  if (!sub) {
    why = "base report names no known finding";
    return std::nullopt;
  }
  const Encoders& enc = *ctx.bench.encoders;
  const ToyAnswerModel& model = ctx.bench.model;
  const AttackSettings& s = ctx.settings;
  const std::string target = sub->affirmed ? "No" : "Yes";
  const auto queries = attacker_queries(enc, sub->finding, base.image_emb);
  const std::string flipped = ta_blackbox(*base.report_text).text;
  // A hair inside the gate: stored text is renormalized, which moves D_sem by rounding.
  const StealthBudget budget{base.image_emb, base.text_emb, stealth_eps - 1e-9};
  const StealthBudget* b = s.respect_gate ? &budget : nullptr;
  Rng rng(derive_seed(seed, 0x1000 + index));
  const std::string id = "inj-" + std::string(to_string(kind)) + "-" + base.id;
  const bool plus = intensity == Intensity::plusplus;

  auto textpo_text = [&]() -> std::pair<std::optional<std::string>, Vec> {
    if (!plus) return {flipped, {}};
    TAConfig c = scaled(s.ta, intensity);
    c.target_answer = target;
    auto r = ta_whitebox(queries, base.image_emb, enc.text.embed(flipped), model, c, b);
    return {std::nullopt, std::move(r.text_emb)};
  };
  auto seed_image = [&]() {
    return synthesize_flipped_image(base, *sub, flipped, ctx.bench.config, s, rng);
  };
  auto imapo_image = [&]() {
    auto r = va_global(queries, seed_image(), enc.image, scaled(s.va, intensity), b);
    return std::move(*r.image);
  };

  if (ctx.target != TargetComponent::all) {
    CMCIConfig c = s.cmci;
    c.target = target;
    const PixelGrid& img0 = *base.image;
    const Vec t0 = enc.text.embed(flipped);
    AttackResult r;
    if (ctx.target == TargetComponent::generator) {
      c.lambda1 = 0.0;
      r = cmci(img0, t0, queries.front(), model, enc.image, c, b);
    } else if (ctx.target == TargetComponent::retriever) {
      const RetrievalScoreObjective obj(queries, enc.image, ctx.bench.pipeline.retrieval.w_img);
      r = pair_ascent(obj, img0, t0, enc.image, c.ascent(), b);
    } else {
      const RelevanceObjective obj(queries, enc.image, ctx.reranker);
      r = pair_ascent(obj, img0, t0, enc.image, c.ascent(), b);
    }
    return entry_from(enc, id, std::nullopt, std::move(r.text_emb), std::move(*r.image));
  }

  switch (kind) {
    case AttackKind::textpo: {
      auto [report, emb] = textpo_text();
      return entry_from(enc, id, std::move(report), std::move(emb), *base.image);
    }
    case AttackKind::imapo:
      return entry_from(enc, id, *base.report_text, {}, imapo_image());
    case AttackKind::mixed: {
      CMCIConfig c = scaled(s.cmci, intensity);
      c.target = target;
      auto [report, emb] = textpo_text();
      const Vec t0 = report ? enc.text.embed(*report) : std::move(emb);
      // Every stage's objective at once; the ablations keep one term each.
      const CmciObjective misled(queries.front(), model, enc.image, model.vocab().index_of(target),
                                 c.lambda1, c.lambda2);
      const RetrievalScoreObjective retrieved(queries, enc.image, ctx.bench.pipeline.retrieval.w_img);
      const RelevanceObjective reranked(queries, enc.image, ctx.reranker);
      const SumObjective obj({&misled, &retrieved, &reranked});
      auto r = pair_ascent(obj, *base.image, t0, enc.image, c.ascent(), b);
      return entry_from(enc, id, std::nullopt, std::move(r.text_emb), std::move(*r.image));
    }
    case AttackKind::mixed_superpose: {
      auto [report, emb] = textpo_text();
      return entry_from(enc, id, std::move(report), std::move(emb), imapo_image());
    }
    default:
      why = "attack kind does not inject";
      return std::nullopt;
  }
}

}  // namespace detail

/// Selects floor(rate * benign) bases by a seeded shuffle, crafts one
/// injection per base, and submits each through the stealth gate in order.
inline InjectionSummary poison_kb(KnowledgeBase& kb, double rate, AttackKind kind,
                                  Intensity intensity, std::uint64_t seed, const PoisonContext& ctx) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw PreconditionError("poison rate must lie in [0,1]");
  InjectionSummary sum;
  std::vector<const KBEntry*> benign;
  for (const auto& e : kb.entries()) {
    if (e.provenance.tag == EntryTag::benign) benign.push_back(&e);
  }
  sum.benign = benign.size();
  if (kind == AttackKind::none || kind == AttackKind::rag_clean) return sum;
  Rng rng(derive_seed(seed, 0xba5e));
  std::shuffle(benign.begin(), benign.end(), rng);
  benign.resize(injection_count(rate, benign.size()));
  sum.attempts = benign.size();

  std::vector<std::optional<KBEntry>> crafted(benign.size());
  std::vector<std::string> why(benign.size());
  const double eps = kb.stealth_eps();
  parallel_for(benign.size(), ctx.threads, [&](std::size_t i) {
    crafted[i] = detail::craft(*benign[i], i, kind, intensity, seed, eps, ctx, why[i]);
  });
  std::vector<std::string> base_ids;
  for (const auto* e : benign) base_ids.push_back(e->id);
  for (std::size_t i = 0; i < crafted.size(); ++i) {
    InjectionOutcome out;
    if (crafted[i]) {
      out = kb.submit_injection(std::move(*crafted[i]), base_ids[i]);
    } else {
      out.id = base_ids[i];
      out.reason = why[i];
    }
    (out.accepted ? sum.accepted : sum.rejected)++;
    sum.outcomes.push_back(std::move(out));
  }
  return sum;
}

/// Runs one query with the poisoned entries' influence confined to `target`.
///   all / retriever: injected entries compete in retrieval.
///   reranker: retrieval sees benign entries only; injected entries that
///     would have made Top-M join the rerank pool.
///   generator: retrieval and reranking see benign entries only; injected
///     entries that would have made Top-M are appended to the context.
inline StageTrace run_scoped(const Query& q, std::span<const KBEntry> entries, TargetComponent target,
                             const PipelineConfig& cfg, const RelevanceModel& reranker,
                             const ToyAnswerModel& model) {
  if (target == TargetComponent::all || target == TargetComponent::retriever) {
    return run_pipeline(q, entries, cfg, reranker, model);
  }
  std::vector<KBEntry> benign;
  for (const auto& e : entries) {
    if (e.provenance.tag == EntryTag::benign) benign.push_back(e);
  }
  StageTrace t;
  t.top_m = top_m(q, benign, cfg.retrieval);
  std::vector<Candidate> extra;
  for (auto& c : top_m(q, entries, cfg.retrieval)) {
    if (c.entry.provenance.tag == EntryTag::injected) extra.push_back(std::move(c));
  }
  if (target == TargetComponent::reranker) {
    std::vector<Candidate> pool = t.top_m;
    pool.insert(pool.end(), extra.begin(), extra.end());
    t.top_k = top_k(std::move(pool), q, cfg.rerank, reranker);
    t.answer = generate(q, context_of(t.top_k), model);
  } else {
    t.top_k = top_k(t.top_m, q, cfg.rerank, reranker);
    std::vector<Candidate> ctx = t.top_k;
    ctx.insert(ctx.end(), extra.begin(), extra.end());
    t.answer = generate(q, context_of(ctx), model);
  }
  return t;
}

struct ExperimentResult {
  MetricsReport report;
  InjectionSummary injections;
  std::vector<std::string> predictions;  // test split order
};

/// Answers every test instance against `kb`. With `use_rag` false the
/// context is empty.
inline ExperimentResult evaluate(const Benchmark& bench, const KnowledgeBase& kb,
                                 TargetComponent target, bool use_rag, std::string label,
                                 std::size_t threads = 0) {
  const auto rr = bench.reranker();
  PipelineConfig p = bench.pipeline;
  if (!use_rag) p.rerank.K = 0;
  const auto test = bench.split(false);
  ExperimentResult res;
  res.injections.benign = kb.count(EntryTag::benign);
  std::vector<std::string> golds;
  for (const auto* inst : test) golds.push_back(inst->gold);
  res.predictions.resize(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const Query q = bench.query(*test[i]);
    res.predictions[i] = run_scoped(q, kb.entries(), target, p, rr, bench.model).answer;
  });
  res.report = metrics(res.predictions, golds, kPositiveLabel, std::move(label));
  return res;
}

/// Poisons a copy of the benchmark's knowledge base as configured, then evaluates.
inline ExperimentResult run_experiment(const Benchmark& bench, const ExperimentConfig& cfg) {
  cfg.validate();
  KnowledgeBase kb = bench.kb;
  if (cfg.stealth_eps) kb.set_stealth_eps(*cfg.stealth_eps);
  InjectionSummary inj;
  if (cfg.injects()) {
    const auto rr = bench.reranker();
    const PoisonContext ctx{bench, rr, cfg.attacks, cfg.target, cfg.threads};
    inj = poison_kb(kb, cfg.poison_rate, cfg.attack, cfg.intensity, cfg.seed, ctx);
  }
  auto res = evaluate(bench, kb, cfg.target, cfg.attack != AttackKind::none, cfg.label(), cfg.threads);
  if (cfg.injects()) res.injections = std::move(inj);
  return res;
}

/// How many test queries each stage's output differs on, poisoned vs clean.
struct StageChanges {
  std::size_t queries = 0;
  std::size_t top_m = 0;   // Top-M id set differs
  std::size_t top_k = 0;   // Top-K id sequence differs
  std::size_t answer = 0;
};

inline StageChanges stage_changes(const Benchmark& bench, const KnowledgeBase& poisoned,
                                  TargetComponent target) {
  const auto rr = bench.reranker();
  auto ids = [](const std::vector<Candidate>& cs) {
    std::vector<std::string> out;
    for (const auto& c : cs) out.push_back(c.entry.id);
    return out;
  };
  StageChanges ch;
  for (const auto* inst : bench.split(false)) {
    const Query q = bench.query(*inst);
    const auto clean = run_pipeline(q, bench.kb.entries(), bench.pipeline, rr, bench.model);
    const auto hit = run_scoped(q, poisoned.entries(), target, bench.pipeline, rr, bench.model);
    auto m0 = ids(clean.top_m), m1 = ids(hit.top_m);
    std::sort(m0.begin(), m0.end());
    std::sort(m1.begin(), m1.end());
    ++ch.queries;
    ch.top_m += m0 != m1;
    ch.top_k += ids(clean.top_k) != ids(hit.top_k);
    ch.answer += clean.answer != hit.answer;
  }
  return ch;
}

// ---------------------------------------------------------------------------
// Standard grids.

inline ExperimentConfig condition(AttackKind k, Intensity i, double rate, std::uint64_t seed,
                                  const AttackSettings& s = {}) {
  ExperimentConfig c;
  c.attack = k;
  c.intensity = i;
  c.poison_rate = rate;
  c.seed = seed;
  c.attacks = s;
  return c;
}

/// The no-RAG baseline, kept apart from the attack grid.
inline ExperimentConfig baseline_condition(std::uint64_t seed) {
  return condition(AttackKind::none, Intensity::standard, 0.0, seed);
}

/// Clean RAG followed by the six attacked conditions of the main comparison.
inline std::vector<ExperimentConfig> attack_grid(std::uint64_t seed, const AttackSettings& s = {}) {
  using K = AttackKind;
  using I = Intensity;
  return {condition(K::rag_clean, I::standard, 0.0, seed, s),
          condition(K::textpo, I::standard, 0.15, seed, s),
          condition(K::imapo, I::standard, 0.15, seed, s),
          condition(K::textpo, I::plusplus, 0.35, seed, s),
          condition(K::imapo, I::plusplus, 0.35, seed, s),
          condition(K::mixed, I::standard, 0.15, seed, s),
          condition(K::mixed, I::plusplus, 0.35, seed, s)};
}

/// Clean RAG plus 15% mixed poisoning aimed at each stage.
inline std::vector<ExperimentConfig> ablation_grid(std::uint64_t seed, const AttackSettings& s = {}) {
  std::vector<ExperimentConfig> out{condition(AttackKind::rag_clean, Intensity::standard, 0.0, seed, s)};
  for (auto t : {TargetComponent::retriever, TargetComponent::reranker, TargetComponent::generator}) {
    auto c = condition(AttackKind::mixed, Intensity::standard, 0.15, seed, s);
    c.target = t;
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration keys for attacks and experiments.

inline const std::set<std::string>& attack_config_keys() {
  static const std::set<std::string> k{
      "ta.alpha", "ta.iters", "va.alpha", "va.iters", "va.mode", "cmci.lambda1", "cmci.lambda2",
      "cmci.alpha", "cmci.beta", "cmci.eps_ball", "cmci.iters", "cmci.order", "attack.step",
      "attack.respect_gate", "attack.seed_sigma", "attack.diffusion_steps", "kb.stealth_eps",
      "experiment.rate", "experiment.attack", "experiment.intensity", "experiment.target",
      "experiment.threads"};
  return k;
}

inline AttackSettings attack_settings_from(const ConfigMap& c) {
  AttackSettings s;
  s.ta.alpha = c.get("ta.alpha", s.ta.alpha);
  s.ta.iters = c.get("ta.iters", s.ta.iters);
  s.va.alpha = c.get("va.alpha", s.va.alpha);
  s.va.iters = c.get("va.iters", s.va.iters);
  const std::string mode = c.get("va.mode", std::string("pixel"));
  if (mode != "pixel" && mode != "embedding") throw FormatError("va.mode must be pixel or embedding");
  s.va.mode = mode == "pixel" ? VAMode::pixel : VAMode::embedding;
  s.cmci.lambda1 = c.get("cmci.lambda1", s.cmci.lambda1);
  s.cmci.lambda2 = c.get("cmci.lambda2", s.cmci.lambda2);
  s.cmci.alpha = c.get("cmci.alpha", s.cmci.alpha);
  s.cmci.beta_step = c.get("cmci.beta", s.cmci.beta_step);
  s.cmci.eps_ball = c.get("cmci.eps_ball", s.cmci.eps_ball);
  s.cmci.iters = c.get("cmci.iters", s.cmci.iters);
  const std::string order = c.get("cmci.order", std::string("image_first"));
  if (order != "image_first" && order != "text_first") {
    throw FormatError("cmci.order must be image_first or text_first");
  }
  s.cmci.order = order == "image_first" ? UpdateOrder::image_first : UpdateOrder::text_first;
  const std::string step = c.get("attack.step", std::string("backtracking"));
  if (step != "backtracking" && step != "fixed") throw FormatError("attack.step must be backtracking or fixed");
  const StepMode sm = step == "fixed" ? StepMode::fixed : StepMode::backtracking;
  s.ta.step = s.va.step = s.cmci.step = sm;
  const std::string gate = c.get("attack.respect_gate", std::string("true"));
  if (gate != "true" && gate != "false") throw FormatError("attack.respect_gate must be true or false");
  s.respect_gate = gate == "true";
  s.seed_sigma = c.get("attack.seed_sigma", s.seed_sigma);
  s.diffusion_steps = c.get("attack.diffusion_steps", s.diffusion_steps);
  return s;
}

/// Experiment settings from a config file; absent keys keep their defaults.
inline ExperimentConfig experiment_config_from(const ConfigMap& c, std::uint64_t seed) {
  ExperimentConfig e;
  e.seed = seed;
  e.attacks = attack_settings_from(c);
  e.poison_rate = c.get("experiment.rate", e.poison_rate);
  e.attack = parse_attack_kind(c.get("experiment.attack", std::string(to_string(e.attack))));
  e.intensity = parse_intensity(c.get("experiment.intensity", std::string("standard")));
  e.target = parse_target(c.get("experiment.target", std::string("all")));
  e.threads = c.get("experiment.threads", e.threads);
  if (c.has("kb.stealth_eps")) e.stealth_eps = c.get("kb.stealth_eps", kDefaultStealthEps);
  return e;
}

}  // namespace medrag::harness
