#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace stgrat {

using Real = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a precondition on an argument is violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(Index rows, Index cols);
std::string shape_string(const Matrix& m);

/// Deterministic 64-bit generator. Distributions are implemented here rather than
/// through <random> so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }
  void reseed(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  Real uniform();
  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }
  Real normal();
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(Real p) { return uniform() < p; }

 private:
  std::uint64_t state_[4] = {};
  bool has_spare_ = false;
  Real spare_ = 0;
};

/// Hashes an ordered tuple of integers into a seed (splitmix64 chain).
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

enum class Mode { train, eval };

/// Keeps freed large blocks on the heap instead of unmapping them (glibc).
/// Training allocates many same-sized temporaries per step; reuse avoids page
/// faults dominating the run time. Idempotent, no-op on other allocators.
void tune_allocator();

Matrix matmul(const Matrix& a, const Matrix& b);
Vector softmax(const Vector& v);

Real gelu(Real x);
Real gelu_derivative(Real x);
Matrix gelu(const Matrix& x);

constexpr Real kLayerNormEps = 1e-5;
Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias, Real eps = kLayerNormEps);

/// Inverted dropout: survivors are rescaled by 1/(1-rate) in train mode.
Matrix dropout(const Matrix& x, Real rate, Mode mode, Rng& rng);
/// Multiplier matrix (0 or 1/(1-rate)) used by the differentiable dropout.
Matrix dropout_mask(Index rows, Index cols, Real rate, Rng& rng);

Matrix xavier_init(Index rows, Index cols, Rng& rng);

Real warmup_learning_rate(std::int64_t step, Index d_model, std::int64_t warmup);

struct AdamSettings {
  Real beta1 = 0.9;
  Real beta2 = 0.98;
  Real eps = 1e-9;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t warmup_steps = 4000;
  Index d_model = 128;
  AdamSettings settings;

  /// Learning rate the next update will use (before any external scale).
  Real scheduled_rate() const { return warmup_learning_rate(step + 1, d_model, warmup_steps); }
};

/// One Adam step with bias correction. Moments are created on first use.
void adam_update(std::vector<Matrix*> params, const std::vector<const Matrix*>& grads, OptimizerState& state, Real lr);
void adam_update(std::vector<Matrix>& params, const std::vector<Matrix>& grads, OptimizerState& state, Real lr);

/// Scalar function with analytic gradient: returns f(x) and writes df/dx into grad.
using GradientFunction = std::function<Real(const Matrix& x, Matrix* grad)>;

/// Max over entries of |analytic - central difference| / max(1, |analytic|).
Real gradient_check(const GradientFunction& f, const Matrix& x, Real eps = 1e-5);

}  // namespace stgrat
