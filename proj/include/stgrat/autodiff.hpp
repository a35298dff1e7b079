#pragma once

// Reverse-mode differentiation over dense matrices. A Tape records every
// operation of one forward pass; backward() walks it in reverse, accumulating
// gradients. Each Tape belongs to a single thread.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stgrat/numerics.hpp"

namespace stgrat {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

class Tape {
 public:
  explicit Tape(bool track_gradients = true) : tracking_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return tracking_; }

  Var constant(Matrix value);
  /// Non-owning constant; `value` must outlive the tape.
  Var constant_ref(const Matrix& value);
  /// Differentiable leaf whose gradient is read back with gradient().
  Var input(Matrix value);
  /// Differentiable leaf referencing external storage. After backward() the
  /// leaf's gradient is added into `grad_sink` when it is non-null.
  Var parameter(const Matrix& value, Matrix* grad_sink);

  const Matrix& value(int id) const;
  /// Gradient of the last backward() w.r.t. node `id` (zeros if unreached).
  Matrix gradient(Var v) const;

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  /// Lazily zero-initialised gradient buffer for node `id`.
  Matrix& grad(int id);

  /// Appends an op result. `backward` runs only if the node needs a gradient.
  Var push(Matrix value, bool needs_grad, std::function<void()> backward);
  bool any_needs_grad(std::initializer_list<Var> vars) const;

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and propagates to every leaf.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix gradient;
    bool has_gradient = false;
    bool needs_grad = false;
    Matrix* sink = nullptr;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool tracking_;
};

namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, Real s);
/// a + row broadcast over every row; `row` is 1 x cols.
Var add_row(Var a, Var row);
Var gelu(Var a);
/// Row-wise layer normalisation with 1 x cols gain and bias.
Var layer_norm_rows(Var x, Var gain, Var bias, Real eps = kLayerNormEps);
/// Multiplies by a precomputed dropout multiplier matrix.
Var apply_mask(Var x, Matrix mask);
Var dropout(Var x, Real rate, Mode mode, Rng& rng);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Index start, Index count);
/// Copy of `a` with the listed rows replaced by the 1 x cols `row`.
Var replace_rows(Var a, Var row, const std::vector<Index>& rows);
/// Stacks `repeats` copies of `a` vertically.
Var tile_rows(Var a, Index repeats);
Var sum(Var a);
/// sum over mask-true entries of |pred - target|, divided by `denominator`.
/// Subgradient at ties is zero.
Var masked_abs_sum(Var pred, const Matrix& target, const Matrix& mask, Real denominator);
/// sum_k coeffs(0, k) * basis[k]; `coeffs` is 1 x basis.size().
Var linear_combination(Var coeffs, const std::vector<const Matrix*>& basis);

}  // namespace ad

/// Strongly typed handle into a ParameterSet.
struct ParamId {
  int index = -1;
  bool valid() const { return index >= 0; }
  friend bool operator==(ParamId, ParamId) = default;
};

struct Parameter {
  std::string name;
  Matrix value;
};

/// Ordered, named collection of learnable matrices.
class ParameterSet {
 public:
  ParamId add(std::string name, Matrix init);
  std::size_t size() const { return items_.size(); }
  Parameter& operator[](ParamId id) { return items_[static_cast<std::size_t>(id.index)]; }
  const Parameter& operator[](ParamId id) const { return items_[static_cast<std::size_t>(id.index)]; }
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::optional<ParamId> find(const std::string& name) const;
  std::size_t scalar_count() const;
  std::vector<Matrix> zero_gradients() const;

 private:
  std::vector<Parameter> items_;
};

/// Lazily binds parameters of a ParameterSet onto one Tape.
class ParamBinder {
 public:
  /// `grads` (nullable) receives the accumulated gradients after backward().
  ParamBinder(Tape& tape, const ParameterSet& params, std::vector<Matrix>* grads);
  Var operator()(ParamId id);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParameterSet& params_;
  std::vector<Matrix>* grads_;
  std::vector<std::optional<Var>> bound_;
};

}  // namespace stgrat
