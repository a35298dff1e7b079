#include "stgrat/autodiff.hpp"

#include <cmath>

namespace stgrat {

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = tracking_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  Node n;
  n.external = &value;
  n.needs_grad = tracking_;
  n.sink = grad_sink;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.owned;
}

Matrix Tape::gradient(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.has_gradient) return Matrix::Zero(value(v.id).rows(), value(v.id).cols());
  return n.gradient;
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.has_gradient) {
    const Matrix& v = n.external ? *n.external : n.owned;
    n.gradient = Matrix::Zero(v.rows(), v.cols());
    n.has_gradient = true;
  }
  return n.gradient;
}

Var Tape::push(Matrix value, bool needs_grad, std::function<void()> backward) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = tracking_ && needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

bool Tape::any_needs_grad(std::initializer_list<Var> vars) const {
  for (const auto& v : vars) {
    if (nodes_[static_cast<std::size_t>(v.id)].needs_grad) return true;
  }
  return false;
}

void Tape::backward(Var loss) {
  if (!tracking_) throw ContractError("backward: tape was created without gradient tracking");
  const Matrix& l = value(loss.id);
  if (l.rows() != 1 || l.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + shape_string(l));
  for (auto& n : nodes_) {
    n.has_gradient = false;
    n.gradient.resize(0, 0);
  }
  grad(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.has_gradient && n.backward) n.backward();
  }
  for (auto& n : nodes_) {
    if (n.sink && n.has_gradient) *n.sink += n.gradient;
  }
}

namespace ad {

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + shape_string(a) + " vs " + shape_string(b) + ")");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape* t = a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(av) + " x " + shape_string(bv) + ")");
  }
  Matrix out = av * bv;
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, b}), [t, a, b, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) t->grad(a.id).noalias() += g * t->value(b.id).transpose();
    if (t->needs_grad(b.id)) t->grad(b.id).noalias() += t->value(a.id).transpose() * g;
  });
}

Var add(Var a, Var b) {
  Tape* t = a.tape;
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, b}), [t, a, b, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) t->grad(a.id) += g;
    if (t->needs_grad(b.id)) t->grad(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  Tape* t = a.tape;
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value() - b.value();
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, b}), [t, a, b, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) t->grad(a.id) += g;
    if (t->needs_grad(b.id)) t->grad(b.id) -= g;
  });
}

Var hadamard(Var a, Var b) {
  Tape* t = a.tape;
  require_same_shape("hadamard", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, b}), [t, a, b, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) t->grad(a.id) += g.cwiseProduct(t->value(b.id));
    if (t->needs_grad(b.id)) t->grad(b.id) += g.cwiseProduct(t->value(a.id));
  });
}

Var scale(Var a, Real s) {
  Tape* t = a.tape;
  Matrix out = a.value() * s;
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a}), [t, a, s, out_id] { t->grad(a.id) += s * t->grad(out_id); });
}

Var add_row(Var a, Var row) {
  Tape* t = a.tape;
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(av.cols()) + " row, got " + shape_string(rv));
  }
  Matrix out = av.rowwise() + rv.row(0);
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, row}), [t, a, row, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) t->grad(a.id) += g;
    if (t->needs_grad(row.id)) t->grad(row.id) += g.colwise().sum();
  });
}

Var gelu(Var a) {
  Tape* t = a.tape;
  Matrix out = stgrat::gelu(a.value());
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a}), [t, a, out_id] {
    const Matrix& x = t->value(a.id);
    t->grad(a.id) += t->grad(out_id).cwiseProduct(x.unaryExpr([](Real v) { return gelu_derivative(v); }));
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, Real eps) {
  Tape* t = x.tape;
  const Matrix& xv = x.value();
  const Index d = xv.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(d));
  }
  Matrix normed(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Real mean = xv.row(r).mean();
    const Real var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({x, gain, bias}),
                 [t, x, gain, bias, out_id, normed = std::move(normed), inv_std = std::move(inv_std)] {
                   const Matrix& g = t->grad(out_id);
                   if (t->needs_grad(gain.id)) t->grad(gain.id) += g.cwiseProduct(normed).colwise().sum();
                   if (t->needs_grad(bias.id)) t->grad(bias.id) += g.colwise().sum();
                   if (t->needs_grad(x.id)) {
                     Matrix& gx = t->grad(x.id);
                     const auto gamma = t->value(gain.id).row(0).array();
                     for (Index r = 0; r < g.rows(); ++r) {
                       const RowVector gn = (g.row(r).array() * gamma).matrix();
                       const Real m1 = gn.mean();
                       const Real m2 = gn.cwiseProduct(normed.row(r)).mean();
                       gx.row(r) += (inv_std(r) * (gn.array() - m1 - normed.row(r).array() * m2)).matrix();
                     }
                   }
                 });
}

Var apply_mask(Var x, Matrix mask) {
  Tape* t = x.tape;
  require_same_shape("apply_mask", x.value(), mask);
  Matrix out = x.value().cwiseProduct(mask);
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({x}),
                 [t, x, out_id, mask = std::move(mask)] { t->grad(x.id) += t->grad(out_id).cwiseProduct(mask); });
}

Var dropout(Var x, Real rate, Mode mode, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0) return x;
  return apply_mask(x, dropout_mask(x.rows(), x.cols(), rate, rng));
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape* t = parts.front().tape;
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
    needs = needs || t->needs_grad(p.id);
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), needs, [t, parts, out_id] {
    const Matrix& g = t->grad(out_id);
    Index offset = 0;
    for (const auto& p : parts) {
      const Index c = t->value(p.id).cols();
      if (t->needs_grad(p.id)) t->grad(p.id) += g.middleCols(offset, c);
      offset += c;
    }
  });
}

Var slice_cols(Var a, Index start, Index count) {
  Tape* t = a.tape;
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, count);
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a}), [t, a, start, count, out_id] {
    t->grad(a.id).middleCols(start, count) += t->grad(out_id);
  });
}

Var replace_rows(Var a, Var row, const std::vector<Index>& rows) {
  Tape* t = a.tape;
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("replace_rows: row must be 1x" + std::to_string(a.cols()));
  Matrix out = a.value();
  for (Index r : rows) {
    if (r < 0 || r >= out.rows()) throw ShapeError("replace_rows: row index out of range");
    out.row(r) = row.value().row(0);
  }
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a, row}), [t, a, row, rows, out_id] {
    const Matrix& g = t->grad(out_id);
    if (t->needs_grad(a.id)) {
      Matrix ga = g;
      for (Index r : rows) ga.row(r).setZero();
      t->grad(a.id) += ga;
    }
    if (t->needs_grad(row.id)) {
      Matrix& gr = t->grad(row.id);
      for (Index r : rows) gr.row(0) += g.row(r);
    }
  });
}

Var tile_rows(Var a, Index repeats) {
  Tape* t = a.tape;
  if (repeats < 1) throw ContractError("tile_rows: repeats must be >= 1");
  const Index r = a.rows();
  Matrix out = a.value().replicate(repeats, 1);
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a}), [t, a, r, repeats, out_id] {
    const Matrix& g = t->grad(out_id);
    Matrix& ga = t->grad(a.id);
    for (Index k = 0; k < repeats; ++k) ga += g.middleRows(k * r, r);
  });
}

Var sum(Var a) {
  Tape* t = a.tape;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({a}),
                 [t, a, out_id] { t->grad(a.id).array() += t->grad(out_id)(0, 0); });
}

Var masked_abs_sum(Var pred, const Matrix& target, const Matrix& mask, Real denominator) {
  Tape* t = pred.tape;
  require_same_shape("masked_abs_sum", pred.value(), target);
  require_same_shape("masked_abs_sum", pred.value(), mask);
  if (!(denominator > 0)) throw ContractError("masked_abs_sum: denominator must be positive");
  Matrix sign(target.rows(), target.cols());
  Real total = 0;
  const Matrix& p = pred.value();
  for (Index i = 0; i < p.size(); ++i) {
    const bool on = mask.data()[i] != 0;
    const Real diff = p.data()[i] - target.data()[i];
    total += on ? std::abs(diff) : 0.0;
    sign.data()[i] = on ? (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / denominator : 0.0;
  }
  Matrix out(1, 1);
  out(0, 0) = total / denominator;
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({pred}), [t, pred, out_id, sign = std::move(sign)] {
    t->grad(pred.id) += t->grad(out_id)(0, 0) * sign;
  });
}

Var linear_combination(Var coeffs, const std::vector<const Matrix*>& basis) {
  Tape* t = coeffs.tape;
  if (basis.empty()) throw ContractError("linear_combination: empty basis");
  if (coeffs.rows() != 1 || coeffs.cols() != static_cast<Index>(basis.size())) {
    throw ShapeError("linear_combination: expected 1x" + std::to_string(basis.size()) + " coefficients, got " +
                     shape_string(coeffs.value()));
  }
  Matrix out = Matrix::Zero(basis.front()->rows(), basis.front()->cols());
  for (std::size_t k = 0; k < basis.size(); ++k) {
    require_same_shape("linear_combination", out, *basis[k]);
    out += coeffs.value()(0, static_cast<Index>(k)) * *basis[k];
  }
  const int out_id = static_cast<int>(t->size());
  return t->push(std::move(out), t->any_needs_grad({coeffs}), [t, coeffs, basis, out_id] {
    const Matrix& g = t->grad(out_id);
    Matrix& gc = t->grad(coeffs.id);
    for (std::size_t k = 0; k < basis.size(); ++k) gc(0, static_cast<Index>(k)) += g.cwiseProduct(*basis[k]).sum();
  });
}

}  // namespace ad

ParamId ParameterSet::add(std::string name, Matrix init) {
  if (find(name)) throw ContractError("ParameterSet: duplicate parameter name '" + name + "'");
  items_.push_back({std::move(name), std::move(init)});
  return {static_cast<int>(items_.size() - 1)};
}

std::optional<ParamId> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].name == name) return ParamId{static_cast<int>(i)};
  }
  return std::nullopt;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<Matrix> ParameterSet::zero_gradients() const {
  std::vector<Matrix> g;
  g.reserve(items_.size());
  for (const auto& p : items_) g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  return g;
}

ParamBinder::ParamBinder(Tape& tape, const ParameterSet& params, std::vector<Matrix>* grads)
    : tape_(tape), params_(params), grads_(grads), bound_(params.size()) {
  if (grads_ && grads_->size() != params.size()) throw ShapeError("ParamBinder: gradient buffer count mismatch");
}

Var ParamBinder::operator()(ParamId id) {
  if (!id.valid() || static_cast<std::size_t>(id.index) >= bound_.size()) {
    throw ContractError("ParamBinder: invalid parameter id");
  }
  auto& slot = bound_[static_cast<std::size_t>(id.index)];
  if (!slot) {
    Matrix* sink = grads_ ? &(*grads_)[static_cast<std::size_t>(id.index)] : nullptr;
    slot = tape_.parameter(params_[id].value, sink);
  }
  return *slot;
}

}  // namespace stgrat
