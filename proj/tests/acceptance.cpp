// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "medrag/attacks.hpp"
#include "medrag/diffusion.hpp"
#include "medrag/harness/benchmark.hpp"
#include "medrag/harness/experiment.hpp"
#include "medrag/harness/metrics.hpp"
#include "medrag/kb.hpp"
#include "medrag/retrieval.hpp"

using namespace medrag;
using namespace medrag::harness;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

void report(int n, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << n << "  " << name;
  if (!o.detail.empty()) std::cout << "  (" << o.detail << ")";
  std::cout << std::endl;
}

Vec random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

Vec random_unit(std::mt19937_64& rng, std::size_t d) { return normalized(random_vec(rng, d)); }

PixelGrid random_grid(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  PixelGrid g(h, w);
  for (auto& v : g.values) v = u(rng);
  return g;
}

Query random_query(std::mt19937_64& rng, std::size_t d) { return {random_unit(rng, d), random_unit(rng, d), "q"}; }

PixelGrid pixel_fd(const std::function<double(const PixelGrid&)>& f, const PixelGrid& x) {
  const auto flat = [&](std::span<const double> p) {
    return f(PixelGrid(x.height, x.width, std::vector<double>(p.begin(), p.end())));
  };
  return PixelGrid(x.height, x.width, finite_diff_grad(flat, x.values, 1e-5));
}

std::string num(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome reference_f1() {
  const std::array<std::array<double, 3>, 3> rows{{{72.43, 86.92, 79.02}, {47.08, 56.50, 51.36}, {77.27, 72.72, 74.93}}};
  Outcome o;
  for (const auto& r : rows) {
    const double f = std::stod(fixed2(f1_score(r[0], r[1])));
    if (std::abs(f - r[2]) > 0.02) o.pass = false;
    o.detail += (o.detail.empty() ? "" : ", ") + fixed2(f1_score(r[0], r[1]));
  }
  return o;
}

Outcome gradients() {
  double worst = 0.0;
  std::mt19937_64 rng(101);
  const std::size_t d = 6;
  const ImageEncoder enc(7, d, 8, 8, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 500 + trial);
    std::vector<Query> qs;
    for (int i = 0; i < 1 + trial % 3; ++i) qs.push_back(random_query(rng, d));
    const Vec img = random_unit(rng, d), t = random_vec(rng, d);

    const std::size_t target = trial % 2;
    const Vec ta_fd = finite_diff_grad([&](std::span<const double> x) { return ta_objective(qs, img, x, m, target); }, t, 1e-5);
    worst = std::max(worst, max_relative_error(ta_gradient(qs, img, t, m, target), ta_fd));

    const PixelGrid g = random_grid(rng, 8, 8);
    const PixelGrid va_fd = pixel_fd([&](const PixelGrid& x) { return va_objective_pixels(x, qs, enc); }, g);
    worst = std::max(worst, max_relative_error(va_gradient_pixels(g, qs, enc).values, va_fd.values));

    std::uniform_real_distribution<double> l(0.1, 2.0);
    const CmciObjective cm(qs[0], m, enc, trial % 2, l(rng), l(rng));
    const PixelGrid ci = pixel_fd([&](const PixelGrid& x) { return cm.value(x, t); }, g);
    worst = std::max(worst, max_relative_error(cm.grad_image(g, t).values, ci.values));
    const Vec ct = finite_diff_grad([&](std::span<const double> x) { return cm.value(g, x); }, t, 1e-5);
    worst = std::max(worst, max_relative_error(cm.grad_text(g, t), ct));
  }
  return {worst <= 1e-4, "worst relative error " + num(worst)};
}

bool monotone(const AttackResult& r) {
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    if (r.trace[i].objective < r.trace[i - 1].objective) return false;
  }
  return !r.trace.empty();
}

Outcome monotone_traces() {
  std::mt19937_64 rng(202);
  const std::size_t d = 8;
  const ImageEncoder enc(9, d, 8, 8, 4);
  std::size_t bad = 0;
  for (int i = 0; i < 50; ++i) {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 900 + i);
    const std::vector<Query> qs{random_query(rng, d), random_query(rng, d), random_query(rng, d)};
    bad += !monotone(ta_whitebox(qs, random_unit(rng, d), random_unit(rng, d), m, {0.05, 50}));
    VAConfig va;
    va.iters = 50;
    bad += !monotone(va_global(qs, random_grid(rng, 8, 8), enc, va));
    CMCIConfig cc;
    cc.iters = 50;
    bad += !monotone(cmci(random_grid(rng, 8, 8), random_unit(rng, d), qs[0], m, enc, cc));
  }
  return {bad == 0, std::to_string(bad) + " of 150 traces decrease"};
}

Outcome cmci_ball() {
  std::mt19937_64 rng(303);
  const std::size_t d = 8;
  const ImageEncoder enc(10, d, 8, 8, 4);
  std::uniform_real_distribution<double> u(0.0, 0.2);
  std::size_t bad = 0, runs = 0;
  for (int i = 0; i < 30; ++i) {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 1300 + i);
    const Query q = random_query(rng, d);
    const PixelGrid base = random_grid(rng, 8, 8);
    CMCIConfig cc;
    cc.eps_ball = u(rng);
    cc.alpha = 0.5;
    for (std::size_t k = 0; k <= 20; k += 5) {
      cc.iters = k;
      const auto r = cmci(base, random_unit(rng, d), q, m, enc, cc);
      ++runs;
      bool ok = linf_distance(*r.image, base) <= cc.eps_ball;
      for (double v : r.image->values) ok = ok && v >= 0.0 && v <= 1.0;
      bad += !ok;
    }
  }
  return {bad == 0, std::to_string(bad) + " of " + std::to_string(runs) + " runs leave the ball"};
}

Outcome diffusion_checks() {
  using namespace medrag::diffusion;
  const auto s = NoiseSchedule::linear();
  Outcome o;
  double worst = 0.0;
  Rng rng(404);
  const Vec x0 = random_vec(rng, 16);
  for (std::size_t t = 1; t <= s.steps(); ++t) {
    const auto n = forward_marginal(x0, t, s, rng);
    const Vec est = estimate_x0(n.x_t, t, s, TrueNoiseOracle(n.eps));
    for (std::size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(est[i] - x0[i]));
  }
  bool mono = true;
  for (std::size_t t = 1; t <= s.steps(); ++t) mono = mono && s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0;

  // Chain of single steps vs the closed-form marginal, per coordinate.
  const Vec start{0.7, -0.3};
  const std::size_t draws = 10000;
  std::size_t outside = 0;
  for (std::size_t t : {1u, 50u, 200u}) {
    std::vector<double> sum(2, 0.0), sq(2, 0.0);
    for (std::size_t k = 0; k < draws; ++k) {
      Vec x = start;
      for (std::size_t j = 1; j <= t; ++j) x = forward_step(x, j, s, rng);
      for (std::size_t i = 0; i < 2; ++i) {
        sum[i] += x[i];
        sq[i] += x[i] * x[i];
      }
    }
    const double ab = s.alpha_bar(t), var = 1.0 - ab;
    for (std::size_t i = 0; i < 2; ++i) {
      const double mean = sum[i] / draws;
      const double v = sq[i] / draws - mean * mean;
      if (std::abs(mean - std::sqrt(ab) * start[i]) > 3.0 * std::sqrt(var / draws)) ++outside;
      // Sample variance has standard error var * sqrt(2 / (n - 1)).
      if (std::abs(v - var) > 3.0 * var * std::sqrt(2.0 / (draws - 1))) ++outside;
    }
  }
  o.pass = worst <= 1e-9 && mono && outside == 0;
  o.detail = "x0 error " + num(worst) + ", alpha_bar " + (mono ? "monotone" : "not monotone") + ", " +
             std::to_string(outside) + " moments outside 3 sigma";
  return o;
}

Outcome topm_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(1, 1000);
  std::size_t bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = size(rng), d = 8;
    std::vector<KBEntry> kb(n);
    for (std::size_t i = 0; i < n; ++i) {
      kb[i].id = "e" + std::to_string(i);
      kb[i].image_emb = random_unit(rng, d);
      kb[i].text_emb = random_unit(rng, d);
    }
    if (n > 5) {
      kb.push_back(kb[2]);
      kb.back().id = "dup";
    }
    const Query q{random_unit(rng, d), random_unit(rng, d), "q"};
    const RetrievalConfig cfg{-0.3 + 0.6 * u(rng), 1 + static_cast<std::size_t>(u(rng) * 30), u(rng)};
    std::vector<std::pair<double, std::string>> want;
    for (const auto& e : kb) {
      const double sc = cfg.w_img * cosine(q.image_emb, e.image_emb) + (1 - cfg.w_img) * cosine(q.question_emb, e.text_emb);
      if (sc >= cfg.theta) want.emplace_back(-sc, e.id);
    }
    std::sort(want.begin(), want.end());
    if (want.size() > cfg.M) want.resize(cfg.M);
    const auto got = top_m(q, kb, cfg);
    bool ok = got.size() == want.size();
    for (std::size_t i = 0; ok && i < got.size(); ++i) ok = got[i].entry.id == want[i].second;
    bad += !ok;
  }
  return {bad == 0, std::to_string(bad) + " of 200 mismatches"};
}

std::shared_ptr<const Encoders> small_encoders() {
  static auto enc = std::make_shared<const Encoders>(Encoders{TextEncoder(1, 16), ImageEncoder(2, 16, 8, 8, 4)});
  return enc;
}

KBEntry emb_entry(std::string id, Vec img, Vec txt) {
  KBEntry e;
  e.id = std::move(id);
  e.image_emb = std::move(img);
  e.text_emb = std::move(txt);
  return e;
}

Outcome gate_soundness() {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> mix(0.0, 1.0);
  KnowledgeBase kb(small_encoders(), kDefaultStealthEps);
  const Vec img = random_unit(rng, 16), txt = random_unit(rng, 16);
  kb.insert_benign(emb_entry("base", img, txt));
  std::size_t bad = 0, accepted = 0;
  for (int i = 0; i < 1000; ++i) {
    const double a = mix(rng), b = mix(rng);
    Vec ci = random_unit(rng, 16), ct = random_unit(rng, 16);
    for (std::size_t k = 0; k < 16; ++k) {
      ci[k] = img[k] + a * ci[k];
      ct[k] = txt[k] + b * ct[k];
    }
    const double dsem = 1.0 - 0.5 * (cosine(img, ci) + cosine(txt, ct));
    const auto out = kb.submit_injection(emb_entry("c" + std::to_string(i), ci, ct), "base");
    if (out.accepted != (dsem <= kDefaultStealthEps)) ++bad;
    accepted += out.accepted;
  }
  for (const auto& e : kb.entries()) {
    if (e.provenance.tag == EntryTag::injected) {
      const double dsem = 1.0 - 0.5 * (cosine(img, e.image_emb) + cosine(txt, e.text_emb));
      if (dsem > kDefaultStealthEps) ++bad;
    }
  }
  return {bad == 0 && accepted > 0 && accepted < 1000,
          std::to_string(accepted) + " of 1000 accepted, " + std::to_string(bad) + " violations"};
}

Outcome kb_integrity() {
  std::mt19937_64 rng(707);
  std::uniform_int_distribution<int> op(0, 9);
  std::size_t script_failures = 0, roundtrip_failures = 0, undetected = 0;
  for (int script = 0; script < 100; ++script) {
    KnowledgeBase kb(small_encoders());
    std::map<std::string, KnowledgeBase> saved;
    std::vector<std::string> live;
    std::size_t next = 0;
    for (int step = 0; step < 40; ++step) {
      const int o = op(rng);
      const std::string id = "x" + std::to_string(next++);
      if (o < 4 || kb.count(EntryTag::benign) == 0) {
        kb.insert_benign(emb_entry(id, random_unit(rng, 16), random_unit(rng, 16)));
      } else if (o < 6) {
        std::vector<const KBEntry*> benign;
        for (const auto& e : kb.entries()) {
          if (e.provenance.tag == EntryTag::benign) benign.push_back(&e);
        }
        const auto& base = *benign[rng() % benign.size()];
        Vec ci = base.image_emb, ct = base.text_emb;
        const Vec di = random_unit(rng, 16), dt = random_unit(rng, 16);
        for (std::size_t k = 0; k < 16; ++k) {
          ci[k] += 0.3 * di[k];
          ct[k] += 0.3 * dt[k];
        }
        kb.submit_injection(emb_entry(id, ci, ct), base.id);
      } else if (o < 8) {
        const auto s = kb.snapshot();
        saved.insert_or_assign(s, kb);
        live.push_back(s);
      } else if (!live.empty()) {
        const std::size_t pick = rng() % live.size();
        const auto s = live[pick];
        kb.rollback(s);
        // Snapshot ids are never reissued, so the id counter is not part of the restored state.
        const auto& then = saved.at(s);
        if (!(kb.entries() == then.entries() && kb.snapshots() == then.snapshots())) ++script_failures;
        live.resize(pick + 1);
      }
    }
    std::stringstream ss;
    kb.write(ss);
    const std::string text = ss.str();
    std::istringstream in(text);
    if (!(KnowledgeBase::read(in, small_encoders()) == kb)) ++roundtrip_failures;

    std::string bad = text;
    const std::size_t pos = rng() % bad.size();
    bad[pos] = static_cast<char>(bad[pos] ^ (1 << (rng() % 7)));
    try {
      std::istringstream bin(bad);
      KnowledgeBase::read(bin, small_encoders());
      ++undetected;
    } catch (const Error&) {
    }
  }
  return {script_failures + roundtrip_failures + undetected == 0,
          std::to_string(script_failures) + " rollback, " + std::to_string(roundtrip_failures) + " round-trip, " +
              std::to_string(undetected) + " undetected corruptions over 100 scripts"};
}

struct GridRun {
  std::map<std::string, double> f1;  // by label
  double clean = 0.0, text15 = 0.0, image15 = 0.0, mixedpp35 = 0.0, others_min = 1e300;
};

GridRun run_grid(std::uint64_t seed) {
  const auto b = synth_benchmark(seed);
  GridRun g;
  const auto grid = attack_grid(seed);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double f = std::stod(fixed2(run_experiment(b, grid[i]).report.f1));
    g.f1[grid[i].label()] = f;
    if (i == 0) g.clean = f;
    if (i == 1) g.text15 = f;
    if (i == 2) g.image15 = f;
    if (i == 6) g.mixedpp35 = f;
    if (i != 6) g.others_min = std::min(g.others_min, f);
  }
  return g;
}

Outcome degradation() {
  std::size_t holds = 0;
  std::string per_seed;
  double default_drop = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto g = run_grid(seed);
    const bool ok = g.clean > g.text15 && g.clean > g.image15 && g.mixedpp35 <= g.others_min;
    holds += ok;
    if (seed == 1) default_drop = g.clean - g.mixedpp35;
    per_seed += (per_seed.empty() ? "" : " ") + std::to_string(seed) + (ok ? ":ok" : ":no");
    std::cout << "      seed " << seed;
    for (const auto& [label, f] : g.f1) std::cout << " | " << label << " " << fixed2(f);
    std::cout << std::endl;
  }
  return {holds >= 8 && default_drop >= 10.0,
          std::to_string(holds) + "/10 seeds [" + per_seed + "], default-seed drop " + fixed2(default_drop)};
}

Outcome ablation() {
  const auto b = synth_benchmark(1);
  const auto rr = b.reranker();
  const auto grid = ablation_grid(1);
  const double clean = run_experiment(b, grid[0]).report.f1;
  Outcome o;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const auto& cfg = grid[i];
    KnowledgeBase kb = b.kb;
    const PoisonContext ctx{b, rr, cfg.attacks, cfg.target, cfg.threads};
    poison_kb(kb, cfg.poison_rate, cfg.attack, cfg.intensity, cfg.seed, ctx);
    const auto ch = stage_changes(b, kb, cfg.target);
    const double f1 = evaluate(b, kb, cfg.target, true, cfg.label(), cfg.threads).report.f1;
    bool ok = f1 <= clean;
    switch (cfg.target) {
      case TargetComponent::retriever: ok = ok && ch.top_m > 0; break;
      case TargetComponent::reranker: ok = ok && ch.top_m == 0 && ch.top_k > 0; break;
      default: ok = ok && ch.top_m == 0 && ch.top_k == 0 && ch.answer > 0;
    }
    o.pass = o.pass && ok;
    o.detail += std::string(o.detail.empty() ? "" : "; ") + std::string(to_string(cfg.target)) + " M/K/ans " +
                std::to_string(ch.top_m) + "/" + std::to_string(ch.top_k) + "/" + std::to_string(ch.answer) +
                " F1 " + fixed2(f1);
  }
  o.detail += "; clean F1 " + fixed2(clean);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"F1 reproduces reference precision/recall pairs", reference_f1},
      {"attack gradients agree with central differences", gradients},
      {"optimizer traces are monotone", monotone_traces},
      {"CMCI iterates stay in the L-inf ball", cmci_ball},
      {"diffusion identities and chain/marginal agreement", diffusion_checks},
      {"top_m equals brute force", topm_oracle},
      {"stealth gate soundness", gate_soundness},
      {"knowledge base rollback, round trip and tamper detection", kb_integrity},
      {"degradation pattern across seeds", degradation},
      {"component ablation isolation", ablation},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(static_cast<int>(i + 1), criteria[i].first, o);
    failed += !o.pass;
  }
  std::cout << (failed ? "FAILED " + std::to_string(failed) + " criteria" : std::string("ALL PASS")) << std::endl;
  return failed ? 1 : 0;
}
