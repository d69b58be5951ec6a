#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "medrag/attacks.hpp"

using namespace medrag;
using Catch::Approx;

namespace {

Vec random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

Vec random_unit(std::mt19937_64& rng, std::size_t d) { return normalized(random_vec(rng, d)); }

PixelGrid random_grid(std::mt19937_64& rng, std::size_t h, std::size_t w, double lo = 0.1, double hi = 0.9) {
  std::uniform_real_distribution<double> u(lo, hi);
  PixelGrid g(h, w);
  for (auto& v : g.values) v = u(rng);
  return g;
}

Query random_query(std::mt19937_64& rng, std::size_t d) {
  return {random_unit(rng, d), random_unit(rng, d), "q"};
}

void check_monotone(const AttackResult& r) {
  REQUIRE_FALSE(r.trace.empty());
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    CHECK(r.trace[i].iter == i);
    if (r.trace[i - 1].grad_norm >= 1e-8) {
      CHECK(r.trace[i].objective > r.trace[i - 1].objective);
    } else {
      CHECK(r.trace[i].objective >= r.trace[i - 1].objective);
    }
  }
}

PixelGrid pixel_fd(const std::function<double(const PixelGrid&)>& f, const PixelGrid& x) {
  const auto flat = [&](std::span<const double> p) {
    return f(PixelGrid(x.height, x.width, std::vector<double>(p.begin(), p.end())));
  };
  return PixelGrid(x.height, x.width, finite_diff_grad(flat, x.values, 1e-5));
}

// The committed CMCI reference run.
struct GoldenFixture {
  Encoders enc{TextEncoder(11, 8), ImageEncoder(12, 8, 16, 16, 4)};
  ToyAnswerModel model = ToyAnswerModel::random(AnswerVocab({"Normal Bone", "Fracture"}), 8, 13);
  Query query;
  PixelGrid base;
  Vec text0;
  CMCIConfig cfg;

  GoldenFixture() {
    std::mt19937_64 rng(14);
    base = random_grid(rng, 16, 16);
    query = {enc.image.embed(random_grid(rng, 16, 16)), enc.text.embed("is there a fracture of the distal radius"), "q"};
    text0 = enc.text.embed("transverse fracture of the distal radius with dorsal angulation");
    cfg.target = "Normal Bone";
    cfg.iters = 200;
    cfg.lambda1 = 3.0;  // a scale-1 model spans ~9 nats of log-prob; weight alignment to match
  }

  AttackResult run() const { return cmci(base, text0, query, model, enc.image, cfg); }

  double p_target(const PixelGrid& img, std::span<const double> text) const {
    const Vec e = enc.image.embed(img);
    const ContextItem ctx[] = {{text, e}};
    return answer_distribution(query, ctx, model)[model.vocab().index_of(cfg.target)];
  }
};

const std::string kGoldenPath = std::string(MEDRAG_FIXTURES) + "/cmci_golden_trace.csv";

}  // namespace

TEST_CASE("negation flip examples") {
  CHECK(ta_blackbox("no acute cardiopulmonary abnormality").text == "acute cardiopulmonary abnormality");
  CHECK(ta_blackbox("consolidation in the right lower lobe").text == "no consolidation in the right lower lobe");
  CHECK(ta_blackbox("Pleural effusion is present. Heart size is normal.").text ==
        "No pleural effusion is present. Heart size is normal.");
  CHECK(ta_blackbox("The lungs are free of consolidation.").text == "The lungs are consolidation.");
  const auto none = ta_blackbox("Heart size is normal.");
  CHECK(none.no_op());
  CHECK(none.text == "Heart size is normal.");
  CHECK(ta_blackbox("No pneumothorax; small effusion.").sentences_flipped == 2);
}

TEST_CASE("negation flip is an involution on single-rule sentences") {
  for (const char* s : {"no acute cardiopulmonary abnormality", "consolidation in the right lower lobe",
                        "No pneumothorax.", "Small left pleural effusion.", "There is no focal airspace disease.",
                        "mild cardiomegaly. no edema", "Nodule in the left apex."}) {
    CHECK(ta_blackbox(ta_blackbox(s).text).text == s);
  }
}

TEST_CASE("TA gradient matches central differences") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 5;
    const auto m = ToyAnswerModel::random(AnswerVocab({"Yes", "No", "Other"}), d, trial);
    std::vector<Query> qs;
    for (int i = 0; i < 1 + trial % 3; ++i) qs.push_back(random_query(rng, d));
    const Vec img = random_unit(rng, d), t = random_vec(rng, d);
    const std::size_t target = trial % 3;
    const Vec fd = finite_diff_grad([&](std::span<const double> x) { return ta_objective(qs, img, x, m, target); }, t, 1e-5);
    CHECK(max_relative_error(ta_gradient(qs, img, t, m, target), fd) <= 1e-4);
  }
}

TEST_CASE("VA gradients match central differences") {
  std::mt19937_64 rng(2);
  const ImageEncoder enc(3, 6, 8, 8, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Query> qs;
    for (int i = 0; i < 1 + trial % 3; ++i) qs.push_back(random_query(rng, 6));
    const Vec e = random_vec(rng, 6);
    const Vec fd = finite_diff_grad([&](std::span<const double> x) { return va_objective(x, qs); }, e, 1e-5);
    CHECK(max_relative_error(va_gradient(e, qs), fd) <= 1e-4);
    const PixelGrid img = random_grid(rng, 8, 8);
    const PixelGrid fdp = pixel_fd([&](const PixelGrid& x) { return va_objective_pixels(x, qs, enc); }, img);
    CHECK(max_relative_error(va_gradient_pixels(img, qs, enc).values, fdp.values) <= 1e-4);
  }
}

TEST_CASE("pair objective gradients match central differences") {
  std::mt19937_64 rng(3);
  const std::size_t d = 6;
  const ImageEncoder enc(4, d, 8, 8, 4);
  const BilinearReranker rr(5, d);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 100 + trial);
    std::vector<Query> qs{random_query(rng, d), random_query(rng, d)};
    std::uniform_real_distribution<double> l(0.1, 2.0);
    const CmciObjective cm(qs[0], m, enc, trial % 2, l(rng), l(rng));
    const RetrievalScoreObjective rs(qs, enc, 0.3);
    const RelevanceObjective rel(qs, enc, rr);
    const SumObjective sum({&cm, &rs, &rel});
    const PixelGrid img = random_grid(rng, 8, 8);
    const Vec t = random_vec(rng, d);
    for (const PairObjective* obj : {static_cast<const PairObjective*>(&cm), static_cast<const PairObjective*>(&rs),
                                     static_cast<const PairObjective*>(&rel), static_cast<const PairObjective*>(&sum)}) {
      const PixelGrid fdi = pixel_fd([&](const PixelGrid& x) { return obj->value(x, t); }, img);
      CHECK(max_relative_error(obj->grad_image(img, t).values, fdi.values) <= 1e-4);
      const Vec fdt = finite_diff_grad([&](std::span<const double> x) { return obj->value(img, x); }, t, 1e-5);
      CHECK(max_relative_error(obj->grad_text(img, t), fdt) <= 1e-4);
    }
  }
}

TEST_CASE("white-box TA") {
  std::mt19937_64 rng(4);
  const std::size_t d = 6;
  SECTION("zero iterations return the start") {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 1);
    const std::vector<Query> qs{random_query(rng, d)};
    const Vec img = random_unit(rng, d), t0 = random_unit(rng, d);
    const auto r = ta_whitebox(qs, img, t0, m, {0.05, 0});
    CHECK(r.text_emb == t0);
    CHECK(r.steps_taken() == 0);
  }
  SECTION("ascent is monotone and ends no lower") {
    for (int trial = 0; trial < 10; ++trial) {
      const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 10 + trial);
      const std::vector<Query> qs{random_query(rng, d), random_query(rng, d), random_query(rng, d)};
      const auto r = ta_whitebox(qs, random_unit(rng, d), random_unit(rng, d), m, {0.05, 100});
      check_monotone(r);
      CHECK(r.final_objective() >= r.initial_objective());
    }
  }
  SECTION("moves along the weight difference") {
    ToyAnswerModel m(AnswerVocab::yes_no(), d);
    const Vec wy = random_vec(rng, d), wn = random_vec(rng, d);
    const std::size_t off = m.layout().ctx_text();
    for (std::size_t i = 0; i < d; ++i) {
      m.weights(0)[off + i] = wy[i];
      m.weights(1)[off + i] = wn[i];
    }
    Vec diff = wn;
    axpy(-1.0, wy, diff);
    const std::vector<Query> qs{random_query(rng, d)};
    Vec t0 = random_unit(rng, d);
    for (auto& x : t0) x *= 0.01;
    const auto r = ta_whitebox(qs, random_unit(rng, d), t0, m, {0.5, 2000});
    CHECK(cosine(r.text_emb, diff) >= 0.99);
    check_monotone(r);
  }
  SECTION("errors") {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 1);
    const std::vector<Query> qs{random_query(rng, d)};
    const Vec v = random_unit(rng, d);
    CHECK_THROWS_AS(ta_whitebox({}, v, v, m, {}), PreconditionError);
    CHECK_THROWS_AS(ta_whitebox(qs, v, v, m, {0.0, 10}), PreconditionError);
    TAConfig c;
    c.target_answer = "Maybe";
    CHECK_THROWS_AS(ta_whitebox(qs, v, v, m, c), PreconditionError);
  }
}

TEST_CASE("VA-global") {
  std::mt19937_64 rng(5);
  SECTION("single query aligns the embedding") {
    const ImageEncoder enc(6, 8, 8, 8, 4);
    const std::vector<Query> qs{random_query(rng, 8)};
    VAConfig c;
    c.mode = VAMode::embedding;
    const auto r = va_global(qs, random_grid(rng, 8, 8), enc, c);
    CHECK(cosine(r.image_emb, qs[0].question_emb) >= 0.999);
    check_monotone(r);
  }
  SECTION("opposite queries cancel") {
    const ImageEncoder enc(6, 8, 8, 8, 4);
    const Query q = random_query(rng, 8);
    Query neg = q;
    for (auto& x : neg.question_emb) x = -x;
    const std::vector<Query> qs{q, neg};
    for (VAMode mode : {VAMode::embedding, VAMode::pixel}) {
      VAConfig c;
      c.mode = mode;
      c.iters = 50;
      const auto r = va_global(qs, random_grid(rng, 8, 8), enc, c);
      for (const auto& row : r.trace) CHECK(row.objective <= 1e-9);
    }
  }
  SECTION("three queries in d=4 reach the dense-grid optimum") {
    const ImageEncoder enc(7, 4, 8, 8, 4);
    const std::vector<Query> qs{random_query(rng, 4), random_query(rng, 4), random_query(rng, 4)};
    // Coarse search over the unit 3-sphere in hyperspherical coordinates.
    const int n = 90;
    const double pi = std::acos(-1.0);
    double best = -10;
    for (int a = 0; a <= n; ++a) {
      for (int b = 0; b <= n; ++b) {
        for (int c = 0; c < 2 * n; ++c) {
          const double t1 = pi * a / n, t2 = pi * b / n, t3 = pi * c / n;
          const Vec e{std::cos(t1), std::sin(t1) * std::cos(t2), std::sin(t1) * std::sin(t2) * std::cos(t3),
                      std::sin(t1) * std::sin(t2) * std::sin(t3)};
          double s = 0;
          for (const auto& q : qs) s += dot(e, q.question_emb);
          best = std::max(best, s);
        }
      }
    }
    VAConfig c;
    c.mode = VAMode::embedding;
    const auto r = va_global(qs, random_grid(rng, 8, 8), enc, c);
    CHECK(r.final_objective() == Approx(best).margin(1e-3));
    CHECK(r.final_objective() >= best - 1e-9);
    check_monotone(r);
  }
  SECTION("pixel mode is monotone and stays in range") {
    const ImageEncoder enc(8, 8, 8, 8, 4);
    const std::vector<Query> qs{random_query(rng, 8), random_query(rng, 8)};
    VAConfig c;
    c.iters = 100;
    const auto r = va_global(qs, random_grid(rng, 8, 8), enc, c);
    check_monotone(r);
    for (double v : r.image->values) CHECK((v >= 0.0 && v <= 1.0));
  }
  SECTION("scale of the embedding does not matter") {
    const std::vector<Query> qs{random_query(rng, 8), random_query(rng, 8)};
    const Vec e = random_vec(rng, 8);
    Vec big = e;
    for (auto& x : big) x *= 17.0;
    CHECK(va_objective(big, qs) == Approx(va_objective(e, qs)).margin(1e-12));
  }
  SECTION("zero image is rejected") {
    const ImageEncoder enc(6, 8, 8, 8, 4);
    const std::vector<Query> qs{random_query(rng, 8)};
    CHECK_THROWS_AS(va_global(qs, PixelGrid(8, 8, 0.0), enc, {}), DegenerateInputError);
  }
}

TEST_CASE("CMCI") {
  std::mt19937_64 rng(6);
  const std::size_t d = 8;
  const ImageEncoder enc(9, d, 8, 8, 4);
  const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 21);
  const Query q = random_query(rng, d);
  const PixelGrid base = random_grid(rng, 8, 8);
  const Vec t0 = random_unit(rng, d);

  SECTION("alignment only") {
    CMCIConfig c;
    c.lambda2 = 0.0;
    c.iters = 100;
    const auto r = cmci(base, t0, q, m, enc, c);
    CHECK(cosine(r.image_emb, r.text_emb) >= cosine(enc.embed(base), t0));
    check_monotone(r);
  }
  SECTION("zero ball keeps the image") {
    CMCIConfig c;
    c.eps_ball = 0.0;
    c.iters = 50;
    const auto r = cmci(base, t0, q, m, enc, c);
    CHECK(*r.image == base);
    CHECK(r.text_emb != t0);
  }
  SECTION("every iterate stays in the ball") {
    CMCIConfig c;
    c.eps_ball = 0.05;
    for (std::size_t k = 0; k <= 25; ++k) {
      c.iters = k;
      const auto r = cmci(base, t0, q, m, enc, c);
      CHECK(linf_distance(*r.image, base) <= c.eps_ball);
      for (double v : r.image->values) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
  SECTION("text-first order is also monotone") {
    CMCIConfig c;
    c.order = UpdateOrder::text_first;
    c.iters = 60;
    check_monotone(cmci(base, t0, q, m, enc, c));
  }
  SECTION("fixed steps follow the plain update") {
    CMCIConfig c;
    c.step = StepMode::fixed;
    c.iters = 1;
    c.lambda1 = 0.0;
    c.eps_ball = 0.0;
    const auto r = cmci(base, t0, q, m, enc, c);
    const CmciObjective obj(q, m, enc, m.vocab().index_of("No"), 0.0, 1.0);
    Vec want = t0;
    axpy(c.beta_step, obj.grad_text(base, t0), want);
    CHECK(max_relative_error(r.text_emb, want) <= 1e-14);
  }
  SECTION("errors") {
    CMCIConfig c;
    c.lambda1 = c.lambda2 = 0.0;
    CHECK_THROWS_AS(cmci(base, t0, q, m, enc, c), PreconditionError);
    c = {};
    c.target = "Normal Bone";
    CHECK_THROWS_AS(cmci(base, t0, q, m, enc, c), PreconditionError);
    c = {};
    c.eps_ball = -1;
    CHECK_THROWS_AS(cmci(base, t0, q, m, enc, c), PreconditionError);
  }
}

TEST_CASE("stealth budget bounds every accepted iterate") {
  std::mt19937_64 rng(7);
  const std::size_t d = 8;
  const ImageEncoder enc(9, d, 8, 8, 4);
  const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 22);
  const Query q = random_query(rng, d);
  const PixelGrid base = random_grid(rng, 8, 8);
  const Vec t0 = random_unit(rng, d);
  const StealthBudget budget{enc.embed(base), t0, 0.05};
  CMCIConfig c;
  c.iters = 100;
  const auto r = cmci(base, t0, q, m, enc, c, &budget);
  for (const auto& row : r.trace) CHECK(*row.dsem <= 0.05);
  CHECK(r.within_stealth);
  const auto t = ta_whitebox(std::vector<Query>{q}, enc.embed(base), t0, m, {0.05, 100}, &budget);
  for (const auto& row : t.trace) CHECK(*row.dsem <= 0.05);
}

TEST_CASE("check_stealth examples") {
  std::mt19937_64 rng(8);
  const Vec img = random_unit(rng, 8), txt = random_unit(rng, 8);
  const auto same = check_stealth(img, txt, img, txt, 0.0);
  CHECK(same.within);
  CHECK(same.dsem == Approx(0.0).margin(1e-15));
  Vec opp = txt;
  for (auto& x : opp) x = -x;
  Vec opi = img;
  for (auto& x : opi) x = -x;
  CHECK(check_stealth(opi, opp, img, txt, 2.0).within);

  Vec o = random_unit(rng, 8);
  axpy(-dot(o, txt), txt, o);
  o = normalized(o);
  Vec near(8);
  for (std::size_t i = 0; i < 8; ++i) near[i] = 0.9 * txt[i] + std::sqrt(0.19) * o[i];
  const auto v = check_stealth(img, near, img, txt, 0.04);
  CHECK_FALSE(v.within);
  CHECK(v.dsem == Approx(0.05).margin(1e-12));

  const Encoders enc{TextEncoder(1, 8), ImageEncoder(2, 8, 8, 8, 4)};
  const PixelGrid g = random_grid(rng, 8, 8);
  CHECK(check_stealth(g, "left effusion", g, "left effusion", enc, 0.0).within);
}

TEST_CASE("trace CSV") {
  std::vector<TraceRow> rows{{0, 1.5, 0.25, std::nullopt}, {1, 2.0, 0.125, 0.01}};
  std::ostringstream out;
  write_trace_csv(out, rows);
  CHECK(out.str() == "iter,objective,grad_norm,dsem\n0,1.5,0.25,\n1,2,0.125,0.01\n");
}

TEST_CASE("CMCI reference trace matches the committed golden file") {
  const GoldenFixture fx;
  const auto r = fx.run();
  std::ifstream in(kGoldenPath);
  REQUIRE(in);
  std::string line;
  std::getline(in, line);
  CHECK(line == "iter,objective,grad_norm,dsem");
  std::size_t i = 0;
  while (std::getline(in, line)) {
    const auto f = codec::split(line, ',');
    REQUIRE(f.size() == 4);
    REQUIRE(i < r.trace.size());
    double obj = 0, gn = 0;
    REQUIRE(codec::parse_double(f[1], obj));
    REQUIRE(codec::parse_double(f[2], gn));
    CHECK(r.trace[i].objective == Approx(obj).epsilon(1e-9).margin(1e-12));
    CHECK(r.trace[i].grad_norm == Approx(gn).epsilon(1e-6).margin(1e-12));
    ++i;
  }
  CHECK(i == r.trace.size());
  CHECK(r.steps_taken() == 200);
  CHECK(fx.p_target(*r.image, r.text_emb) > fx.p_target(fx.base, fx.text0));
  CHECK(cosine(r.image_emb, r.text_emb) >= 0.7);
  check_monotone(r);
}

TEST_CASE("regenerate the CMCI golden trace", "[.regen]") {
  const auto r = GoldenFixture().run();
  std::ofstream out(kGoldenPath);
  write_trace_csv(out, r.trace);
}
