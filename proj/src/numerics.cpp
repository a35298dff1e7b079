#include "stgrat/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stgrat {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

std::string shape_string(const Matrix& m) { return shape_string(m.rows(), m.cols()); }

void Rng::reseed(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
  has_spare_ = false;
  spare_ = 0;
}

// xoshiro256**
std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

Real Rng::uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

Real Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  Real u1 = uniform();
  while (u1 <= 0) u1 = uniform();
  const Real u2 = uniform();
  const Real r = std::sqrt(-2.0 * std::log(u1));
  const Real theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below: n must be positive");
  // Lemire's nearly-divisionless rejection.
  const std::uint64_t threshold = (0 - n) % n;
  while (true) {
    const std::uint64_t x = next_u64();
    const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
  }
}

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t acc = 0x6A09E667F3BCC909ULL;
  for (auto p : parts) {
    std::uint64_t x = acc ^ p;
    acc = splitmix64(x);
  }
  return acc;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(a) + " x " + shape_string(b) + ")");
  }
  return a * b;
}

Vector softmax(const Vector& v) {
  if (v.size() == 0) throw ContractError("softmax: empty input");
  const Real shift = v.maxCoeff();
  Vector out = (v.array() - shift).exp().matrix();
  out /= out.sum();
  return out;
}

Real gelu(Real x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Real gelu_derivative(Real x) {
  const Real cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const Real pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix gelu(const Matrix& x) { return x.unaryExpr([](Real v) { return gelu(v); }); }

Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias, Real eps) {
  if (x.size() < 1) throw ContractError("layer_norm: empty input");
  if (gain.size() != x.size() || bias.size() != x.size()) {
    throw ShapeError("layer_norm: gain/bias length must equal input length");
  }
  const Real mean = x.mean();
  const Real var = (x.array() - mean).square().mean();
  const Vector normed = (x.array() - mean) / std::sqrt(var + eps);
  return (normed.array() * gain.array() + bias.array()).matrix();
}

Matrix dropout_mask(Index rows, Index cols, Real rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0, 1)");
  Matrix mask(rows, cols);
  const Real keep_scale = 1.0 / (1.0 - rate);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

Matrix dropout(const Matrix& x, Real rate, Mode mode, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0) return x;
  return x.cwiseProduct(dropout_mask(x.rows(), x.cols(), rate, rng));
}

Matrix xavier_init(Index rows, Index cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw ContractError("xavier_init: dimensions must be positive");
  const Real bound = std::sqrt(6.0 / static_cast<Real>(rows + cols));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Real warmup_learning_rate(std::int64_t step, Index d_model, std::int64_t warmup) {
  if (step < 1) throw ContractError("warmup_learning_rate: step must be >= 1");
  if (warmup < 1) throw ContractError("warmup_learning_rate: warmup must be >= 1");
  const Real s = static_cast<Real>(step);
  const Real w = static_cast<Real>(warmup);
  return std::pow(static_cast<Real>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

void adam_update(std::vector<Matrix*> params, const std::vector<const Matrix*>& grads, OptimizerState& state,
                 Real lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_update: parameter/gradient count mismatch");
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_update: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = *grads[i];
    if (g.rows() != params[i]->rows() || g.cols() != params[i]->cols() ||
        state.first_moment[i].rows() != g.rows() || state.first_moment[i].cols() != g.cols()) {
      throw ShapeError("adam_update: shape mismatch for parameter " + std::to_string(i) + " (" +
                       shape_string(*params[i]) + " vs gradient " + shape_string(g) + ")");
    }
  }
  state.step += 1;
  const auto& s = state.settings;
  const Real t = static_cast<Real>(state.step);
  const Real c1 = 1.0 - std::pow(s.beta1, t);
  const Real c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix& g = *grads[i];
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
    params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.eps);
  }
}

void adam_update(std::vector<Matrix>& params, const std::vector<Matrix>& grads, OptimizerState& state, Real lr) {
  std::vector<Matrix*> p;
  std::vector<const Matrix*> g;
  for (auto& m : params) p.push_back(&m);
  for (const auto& m : grads) g.push_back(&m);
  adam_update(std::move(p), g, state, lr);
}

Real gradient_check(const GradientFunction& f, const Matrix& x, Real eps) {
  Matrix analytic = Matrix::Zero(x.rows(), x.cols());
  f(x, &analytic);
  Matrix probe = x;
  Real worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const Real orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const Real up = f(probe, nullptr);
    probe.data()[i] = orig - eps;
    const Real down = f(probe, nullptr);
    probe.data()[i] = orig;
    const Real numeric = (up - down) / (2 * eps);
    const Real a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max<Real>(1.0, std::abs(a)));
  }
  return worst;
}

void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace stgrat
