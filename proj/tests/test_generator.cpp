#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "medrag/generator.hpp"

using namespace medrag;
using Catch::Approx;

namespace {

Vec random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

KBEntry entry(std::string id, Vec img, Vec txt) {
  KBEntry e;
  e.id = std::move(id);
  e.image_emb = std::move(img);
  e.text_emb = std::move(txt);
  return e;
}

std::vector<KBEntry> random_context(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::vector<KBEntry> ctx;
  for (std::size_t i = 0; i < n; ++i) ctx.push_back(entry("c" + std::to_string(i), random_vec(rng, d), random_vec(rng, d)));
  return ctx;
}

// log p(answer) evaluated in extended precision, straight from the weights.
long double logp_ld(const ToyAnswerModel& m, const Query& q, const std::vector<KBEntry>& ctx, std::size_t answer) {
  const std::size_t d = m.dim();
  std::vector<long double> f(4 * d, 0.0L);
  for (std::size_t i = 0; i < d; ++i) {
    f[i] = q.question_emb[i];
    f[d + i] = q.image_emb[i];
    for (const auto& e : ctx) {
      f[2 * d + i] += static_cast<long double>(e.text_emb[i]) / ctx.size();
      f[3 * d + i] += static_cast<long double>(e.image_emb[i]) / ctx.size();
    }
  }
  std::vector<long double> z(m.vocab().size());
  for (std::size_t a = 0; a < z.size(); ++a) {
    z[a] = m.bias(a);
    for (std::size_t i = 0; i < f.size(); ++i) z[a] += static_cast<long double>(m.weights(a)[i]) * f[i];
  }
  const long double top = *std::max_element(z.begin(), z.end());
  long double s = 0.0L;
  for (long double v : z) s += std::exp(v - top);
  return z[answer] - top - std::log(s);
}

}  // namespace

TEST_CASE("vocabulary rules") {
  CHECK_THROWS_AS(AnswerVocab(std::vector<std::string>{}), PreconditionError);
  CHECK_THROWS_AS(AnswerVocab({"Yes", "Yes"}), PreconditionError);
  const auto v = AnswerVocab::yes_no();
  CHECK(v.index_of("No") == 1);
  CHECK_THROWS_AS(v.index_of("Maybe"), PreconditionError);
}

TEST_CASE("answer distribution examples") {
  const Query q{{0, 1}, {1, 0}, "q"};
  SECTION("zero model is uniform and answers the first label") {
    ToyAnswerModel m(AnswerVocab({"a", "b", "c"}), 2);
    const Vec p = answer_distribution(q, std::vector<KBEntry>{}, m);
    for (double x : p) CHECK(x == Approx(1.0 / 3).margin(1e-15));
    CHECK(generate(q, std::vector<KBEntry>{}, m) == "a");
  }
  SECTION("hand softmax with logits (1, -1)") {
    ToyAnswerModel m(AnswerVocab::yes_no(), 2);
    m.weights(0)[0] = 1.0;   // question block, first coordinate
    m.weights(1)[0] = -1.0;
    const Vec p = answer_distribution(q, std::vector<KBEntry>{}, m);
    CHECK(p[0] == Approx(0.8808).margin(5e-5));
    CHECK(p[1] == Approx(0.1192).margin(5e-5));
    CHECK(p[0] == Approx(std::exp(2.0) / (std::exp(2.0) + 1)).margin(1e-15));
    CHECK(generate(q, std::vector<KBEntry>{}, m) == "Yes");
  }
  SECTION("a poisoned context entry flips the answer") {
    ToyAnswerModel m(AnswerVocab::yes_no(), 2);
    const std::size_t t = m.layout().ctx_text();
    m.weights(0)[t] = 1.0;
    m.weights(1)[t + 1] = 1.0;
    std::vector<KBEntry> ctx{entry("b", {1, 0}, {1, 0})};
    CHECK(generate(q, ctx, m) == "Yes");
    // Means become (0, 0.5): logits (0, 0.5).
    ctx.push_back(entry("adv", {1, 0}, {-1, 1}));
    CHECK(generate(q, ctx, m) == "No");
    const Vec p = answer_distribution(q, ctx, m);
    CHECK(p[1] == Approx(1.0 / (1.0 + std::exp(-0.5))).margin(1e-15));
  }
  SECTION("dimension mismatch") {
    ToyAnswerModel m(AnswerVocab::yes_no(), 2);
    CHECK_THROWS_AS(answer_distribution(Query{{1, 0, 0}, {1, 0}, "q"}, std::vector<KBEntry>{}, m), PreconditionError);
    CHECK_THROWS_AS(answer_distribution(q, std::vector<KBEntry>{entry("x", {1}, {1})}, m), PreconditionError);
  }
}

TEST_CASE("distribution is normalized, positive and order free") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = ToyAnswerModel::random(AnswerVocab({"a", "b", "c", "d"}), 5, trial, 2.0);
    const Query q{random_vec(rng, 5), random_vec(rng, 5), "q"};
    auto ctx = random_context(rng, 1 + trial % 4, 5);
    const Vec p = answer_distribution(q, ctx, m);
    double s = 0;
    for (double x : p) {
      CHECK(x > 0.0);
      s += x;
    }
    CHECK(s == Approx(1.0).margin(1e-12));
    std::reverse(ctx.begin(), ctx.end());
    const Vec pr = answer_distribution(q, ctx, m);
    CHECK(max_relative_error(p, pr) <= 1e-14);
  }
}

TEST_CASE("grad_logp matches central differences") {
  std::mt19937_64 rng(2);
  const std::size_t d = 4;
  for (int trial = 0; trial < 120; ++trial) {
    const auto m = ToyAnswerModel::random(AnswerVocab({"Yes", "No", "Maybe"}), d, 1000 + trial);
    const Query q{random_vec(rng, d), random_vec(rng, d), "q"};
    auto ctx = random_context(rng, 1 + trial % 3, d);
    const std::size_t k = trial % ctx.size();
    const std::string answer = m.vocab()[trial % 3];
    for (ContextBlock b : {ContextBlock::text, ContextBlock::image}) {
      const Vec analytic = grad_logp(answer, q, ctx, ctx[k].id, b, m);
      Vec& slot = b == ContextBlock::text ? ctx[k].text_emb : ctx[k].image_emb;
      const Vec x0 = slot;
      // Central differences in extended precision so the oracle resolves
      // gradients of log p near p = 1.
      const long double h = 1e-5L;
      Vec fd(d);
      for (std::size_t i = 0; i < d; ++i) {
        slot = x0;
        slot[i] = static_cast<double>(x0[i] + h);
        const long double hp = slot[i] - static_cast<long double>(x0[i]);
        const long double fp = logp_ld(m, q, ctx, trial % 3);
        slot[i] = static_cast<double>(x0[i] - h);
        const long double hm = static_cast<long double>(x0[i]) - slot[i];
        const long double fm = logp_ld(m, q, ctx, trial % 3);
        fd[i] = static_cast<double>((fp - fm) / (hp + hm));
      }
      slot = x0;
      CHECK(max_relative_error(analytic, fd) <= 1e-6);
    }
  }
}

TEST_CASE("grad_logp special cases") {
  std::mt19937_64 rng(3);
  const std::size_t d = 3;
  const Query q{random_vec(rng, d), random_vec(rng, d), "q"};
  const auto ctx1 = random_context(rng, 1, d);
  SECTION("zero weights give a zero gradient") {
    ToyAnswerModel m(AnswerVocab::yes_no(), d);
    for (double g : grad_logp("No", q, ctx1, "c0", ContextBlock::text, m)) CHECK(g == 0.0);
  }
  SECTION("two identical entries halve the gradient") {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 5);
    std::vector<KBEntry> ctx2{ctx1[0], ctx1[0]};
    ctx2[1].id = "c1";
    for (ContextBlock b : {ContextBlock::text, ContextBlock::image}) {
      const Vec g1 = grad_logp("Yes", q, ctx1, "c0", b, m);
      const Vec g2 = grad_logp("Yes", q, ctx2, "c0", b, m);
      for (std::size_t i = 0; i < d; ++i) CHECK(g2[i] == Approx(0.5 * g1[i]).margin(1e-15));
    }
  }
  SECTION("entry must be in context") {
    const auto m = ToyAnswerModel::random(AnswerVocab::yes_no(), d, 5);
    CHECK_THROWS_AS(grad_logp("Yes", q, ctx1, "nope", ContextBlock::text, m), PreconditionError);
  }
}

TEST_CASE("training separates a linearly separable set and the model round trips") {
  std::mt19937_64 rng(4);
  const std::size_t d = 3;
  ToyAnswerModel m(AnswerVocab::yes_no(), d);
  std::vector<TrainingExample> data;
  for (int i = 0; i < 60; ++i) {
    const Query q{random_vec(rng, d), random_vec(rng, d), "q"};
    const auto ctx = random_context(rng, 2, d);
    const Vec f = m.features(q, context_of(std::span<const KBEntry>(ctx)));
    data.push_back({f, f[m.layout().ctx_text()] > 0 ? 0u : 1u});
  }
  train(m, data, {500, 1.0, 1e-4});
  std::size_t right = 0;
  for (const auto& ex : data) right += argmax_first(m.distribution_from_features(ex.features)) == ex.label;
  CHECK(right >= 57);
  CHECK_THROWS_AS(train(m, std::vector<TrainingExample>{}), PreconditionError);

  const auto path = (std::filesystem::temp_directory_path() / "medrag_model_roundtrip.txt").string();
  m.save(path);
  CHECK(ToyAnswerModel::load(path) == m);
  std::remove(path.c_str());
  CHECK_THROWS_AS(ToyAnswerModel::load(path), FormatError);
}
