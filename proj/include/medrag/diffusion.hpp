#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medrag/error.hpp"
#include "medrag/rng.hpp"
#include "medrag/vecmath.hpp"

// Minimal DDPM: closed-form forward noising, the reverse update, and the
// x0 estimate, over flat real vectors.
namespace medrag::diffusion {

class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw PreconditionError("noise schedule: no steps");
    alpha_bar_.reserve(betas_.size() + 1);
    alpha_bar_.push_back(1.0);
    for (double b : betas_) {
      if (!(b > 0.0 && b < 1.0)) throw PreconditionError("noise schedule: beta must lie in (0,1)");
      alpha_bar_.push_back(alpha_bar_.back() * (1.0 - b));
    }
  }

  /// Evenly spaced betas from `first` to `last` over `steps` steps.
  static NoiseSchedule linear(std::size_t steps = 200, double first = 1e-4, double last = 0.02) {
    if (steps == 0) throw PreconditionError("noise schedule: no steps");
    std::vector<double> b(steps);
    for (std::size_t i = 0; i < steps; ++i) {
      b[i] = steps == 1 ? first
                        : first + (last - first) * static_cast<double>(i) / static_cast<double>(steps - 1);
    }
    return NoiseSchedule(std::move(b));
  }

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_[check_step(t) - 1]; }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }

  /// Product of (1 - beta_i) for i <= t; 1 at t = 0.
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw PreconditionError("alpha_bar: t=" + std::to_string(t) + " out of range");
    return alpha_bar_[t];
  }

  std::size_t check_step(std::size_t t) const {
    if (t < 1 || t > steps()) {
      throw PreconditionError("diffusion step t=" + std::to_string(t) + " out of range [1," +
                              std::to_string(steps()) + "]");
    }
    return t;
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

inline double alpha_bar(const NoiseSchedule& s, std::size_t t) { return s.alpha_bar(t); }

/// Predicts the noise component of x_t.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Vec predict(std::span<const double> x_t, std::size_t t) const = 0;
};

/// Returns the noise that was actually drawn. Test-only.
class TrueNoiseOracle final : public NoisePredictor {
 public:
  explicit TrueNoiseOracle(Vec eps) : eps_(std::move(eps)) {}
  Vec predict(std::span<const double> x_t, std::size_t) const override {
    if (x_t.size() != eps_.size()) throw PreconditionError("noise oracle: shape mismatch");
    return eps_;
  }

 private:
  Vec eps_;
};

/// Exact posterior-mean denoiser for data x0 ~ N(mu, sigma^2 I).
class AnalyticGaussianDenoiser final : public NoisePredictor {
 public:
  AnalyticGaussianDenoiser(Vec mu, double sigma, NoiseSchedule schedule)
      : mu_(std::move(mu)), sigma_(sigma), schedule_(std::move(schedule)) {
    if (!(sigma_ >= 0.0)) throw PreconditionError("gaussian denoiser: sigma must be >= 0");
  }

  Vec posterior_mean(std::span<const double> x_t, std::size_t t) const {
    if (x_t.size() != mu_.size()) throw PreconditionError("gaussian denoiser: shape mismatch");
    const double ab = schedule_.alpha_bar(schedule_.check_step(t));
    const double s2 = sigma_ * sigma_;
    const double denom = ab * s2 + (1.0 - ab);
    Vec m(x_t.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = (std::sqrt(ab) * s2 * x_t[i] + (1.0 - ab) * mu_[i]) / denom;
    }
    return m;
  }

  Vec predict(std::span<const double> x_t, std::size_t t) const override {
    const double ab = schedule_.alpha_bar(schedule_.check_step(t));
    const Vec m = posterior_mean(x_t, t);
    Vec eps(x_t.size());
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - sa * m[i]) / sn;
    return eps;
  }

 private:
  Vec mu_;
  double sigma_;
  NoiseSchedule schedule_;
};

struct Noised {
  Vec x_t;
  Vec eps;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, eps ~ N(0, I).
inline Noised forward_marginal(std::span<const double> x0, std::size_t t,
                               const NoiseSchedule& s, Rng& rng) {
  const double ab = s.alpha_bar(s.check_step(t));
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  Noised out{Vec(x0.size()), Vec(x0.size())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out.eps[i] = standard_normal(rng);
    out.x_t[i] = sa * x0[i] + sn * out.eps[i];
  }
  return out;
}

/// One Markov step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z.
inline Vec forward_step(std::span<const double> x_prev, std::size_t t, const NoiseSchedule& s,
                        Rng& rng) {
  const double b = s.beta(t);
  const double keep = std::sqrt(1.0 - b), add = std::sqrt(b);
  Vec x(x_prev.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = keep * x_prev[i] + add * standard_normal(rng);
  return x;
}

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
inline Vec estimate_x0(std::span<const double> x_t, std::size_t t, const NoiseSchedule& s,
                       const NoisePredictor& predictor) {
  const double ab = s.alpha_bar(s.check_step(t));
  if (!(ab > 0.0)) throw NumericError("estimate_x0: alpha_bar underflowed to 0");
  const Vec eps = predictor.predict(x_t, t);
  if (eps.size() != x_t.size()) throw PreconditionError("estimate_x0: predictor shape mismatch");
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  Vec x0(x_t.size());
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (x_t[i] - sn * eps[i]) / sa;
  return x0;
}

enum class ReverseVariance {
  printed,    // sqrt(1 - alpha_t) z, i.e. sqrt(beta_t) z
  posterior,  // beta_t (1 - abar_{t-1}) / (1 - abar_t)
};

struct ReverseOptions {
  ReverseVariance variance = ReverseVariance::printed;
  bool suppress_final_noise = true;  // z = 0 at t = 1
};

/// x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z.
inline Vec reverse_step(std::span<const double> x_t, std::size_t t, const NoiseSchedule& s,
                        const NoisePredictor& predictor, Rng& rng, const ReverseOptions& opt = {}) {
  const double a = s.alpha(t);
  const double ab = s.alpha_bar(t);
  const Vec eps = predictor.predict(x_t, t);
  if (eps.size() != x_t.size()) throw PreconditionError("reverse_step: predictor shape mismatch");
  double sigma = 0.0;
  if (!(t == 1 && opt.suppress_final_noise)) {
    sigma = opt.variance == ReverseVariance::printed
                ? std::sqrt(1.0 - a)
                : std::sqrt((1.0 - a) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab));
  }
  const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
  const double inv = 1.0 / std::sqrt(a);
  Vec x(x_t.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = inv * (x_t[i] - coef * eps[i]);
    if (sigma > 0.0) x[i] += sigma * standard_normal(rng);
  }
  return x;
}

/// Full reverse chain from x_T ~ N(0, I).
inline Vec sample(std::size_t n, const NoiseSchedule& s, const NoisePredictor& predictor, Rng& rng,
                  const ReverseOptions& opt = {}) {
  Vec x(n);
  for (double& v : x) v = standard_normal(rng);
  for (std::size_t t = s.steps(); t >= 1; --t) x = reverse_step(x, t, s, predictor, rng, opt);
  return x;
}

/// Prompt-seeded synthesis: the prompt hash selects the noise stream, the
/// predictor carries whatever the image should look like. Clamped to [0,1].
inline PixelGrid synthesize_seed(std::string_view prompt, std::size_t height, std::size_t width,
                                 const NoiseSchedule& s, const NoisePredictor& predictor, Rng& rng,
                                 const ReverseOptions& opt = {}) {
  Rng chain(derive_seed(rng(), hash_text(prompt, 0x5eed)));
  PixelGrid g(height, width, sample(height * width, s, predictor, chain, opt));
  clamp_unit(g);
  return g;
}

}  // namespace medrag::diffusion
