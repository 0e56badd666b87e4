#include "ontraffic/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ontraffic::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::string dims(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << "[" << r << ", " << c << "]";
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tape::Node& a, const Tape::Node& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + dims(a.rows, a.cols) +
                   " and " + dims(b.rows, b.cols));
}

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

using Arr = Eigen::Map<Eigen::ArrayXd>;
using ArrC = Eigen::Map<const Eigen::ArrayXd>;

// Row i of an (r x c) operand broadcast to `cols` columns; a single column
// is expanded into `scratch`.
const double* row_of(const double* p, std::size_t r, std::size_t c, std::size_t i, std::size_t cols,
                     Buffer& scratch) {
  const double* src = p + (r == 1 ? 0 : i) * c;
  if (c == cols) return src;
  std::fill(scratch.begin(), scratch.end(), src[0]);
  return scratch.data();
}

// Adds the gradient of output row i into an (r x c) operand that was
// broadcast along its size-1 dimensions.
void accumulate_row(double* grad, std::size_t r, std::size_t c, std::size_t i, const Eigen::ArrayXd& row) {
  double* dst = grad + (r == 1 ? 0 : i) * c;
  if (c == static_cast<std::size_t>(row.size())) {
    Arr(dst, row.size()) += row;
  } else {
    dst[0] += row.sum();
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

const char* bin_name(BinOp op) {
  switch (op) {
    case BinOp::kAdd: return "add";
    case BinOp::kSub: return "sub";
    case BinOp::kMul: return "mul";
    case BinOp::kDiv: return "div";
  }
  return "?";
}

Var binary(Var a, Var b, BinOp op) {
  Tape& tape = same_tape(a, b, bin_name(op));
  const auto& na = tape.node(a.id);
  const auto& nb = tape.node(b.id);
  auto fit = [](std::size_t x, std::size_t y, std::size_t& out) {
    if (x == y || y == 1) {
      out = x;
      return true;
    }
    if (x == 1) {
      out = y;
      return true;
    }
    return false;
  };
  std::size_t rows = 0, cols = 0;
  if (!fit(na.rows, nb.rows, rows) || !fit(na.cols, nb.cols, cols)) {
    shape_fail(bin_name(op), na, nb);
  }
  const std::size_t ar = na.rows, ac = na.cols, br = nb.rows, bc = nb.cols;
  const double* pa = na.data();
  const double* pb = nb.data();
  Buffer out(rows * cols);
  Buffer sa(cols), sb(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    ArrC x(row_of(pa, ar, ac, i, cols, sa), static_cast<Eigen::Index>(cols));
    ArrC y(row_of(pb, br, bc, i, cols, sb), static_cast<Eigen::Index>(cols));
    Arr o(out.data() + i * cols, static_cast<Eigen::Index>(cols));
    switch (op) {
      case BinOp::kAdd: o = x + y; break;
      case BinOp::kSub: o = x - y; break;
      case BinOp::kMul: o = x * y; break;
      case BinOp::kDiv:
        if ((y == 0.0).any()) throw DomainError("div: division by exact zero");
        o = x / y;
        break;
    }
  }
  const bool needs = na.needs_grad || nb.needs_grad;
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(rows, cols, std::move(out), needs,
                   [ia, ib, op, rows, cols, ar, ac, br, bc](Tape& t, std::size_t self) {
                     const Buffer& g = t.node(self).grad;
                     const double* va = t.node(ia).data();
                     const double* vb = t.node(ib).data();
                     const bool want_a = t.node(ia).needs_grad, want_b = t.node(ib).needs_grad;
                     double* gpa = want_a ? t.grad_buffer(ia).data() : nullptr;
                     double* gpb = want_b ? t.grad_buffer(ib).data() : nullptr;
                     Buffer sa(cols), sb(cols);
                     Eigen::ArrayXd tmp(static_cast<Eigen::Index>(cols));
                     for (std::size_t i = 0; i < rows; ++i) {
                       ArrC gi(g.data() + i * cols, static_cast<Eigen::Index>(cols));
                       ArrC x(row_of(va, ar, ac, i, cols, sa), static_cast<Eigen::Index>(cols));
                       ArrC y(row_of(vb, br, bc, i, cols, sb), static_cast<Eigen::Index>(cols));
                       if (want_a) {
                         switch (op) {
                           case BinOp::kAdd:
                           case BinOp::kSub: tmp = gi; break;
                           case BinOp::kMul: tmp = gi * y; break;
                           case BinOp::kDiv: tmp = gi / y; break;
                         }
                         accumulate_row(gpa, ar, ac, i, tmp);
                       }
                       if (want_b) {
                         switch (op) {
                           case BinOp::kAdd: tmp = gi; break;
                           case BinOp::kSub: tmp = -gi; break;
                           case BinOp::kMul: tmp = gi * x; break;
                           case BinOp::kDiv: tmp = -gi * x / (y * y); break;
                         }
                         accumulate_row(gpb, br, bc, i, tmp);
                       }
                     }
                   });
}

// Elementwise unary op with derivative expressed through (x, y).
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  Buffer out(na.size());
  const double* pa = na.data();
  fwd(std::span<const double>(pa, na.size()), std::span<double>(out));
  const std::size_t ia = a.id;
  return tape.push(na.rows, na.cols, std::move(out), na.needs_grad,
                   [ia, deriv](Tape& t, std::size_t self) {
                     const auto& n = t.node(self);
                     const double* x = t.node(ia).data();
                     const double* y = n.data();
                     auto& ga = t.grad_buffer(ia);
                     for (std::size_t i = 0; i < n.size(); ++i) ga[i] += n.grad[i] * deriv(x[i], y[i]);
                   });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(data.begin(), data.end()), requires_grad_(requires_grad) {
  if (shape_.empty()) throw ShapeError("tensor: empty shape");
  std::size_t n = 1;
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape_));
    n *= d;
  }
  if (n != data_.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " holds " + std::to_string(n) +
                     " values but data has " + std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data, bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

void Tensor::set_grad(std::vector<double> g) {
  if (g.size() != data_.size()) throw ShapeError("tensor: gradient size mismatch");
  grad_ = std::move(g);
}

// ---- Var ----------------------------------------------------------------

std::size_t Var::rows() const { return tape->node(id).rows; }
std::size_t Var::cols() const { return tape->node(id).cols; }

std::span<const double> Var::value() const {
  const auto& n = tape->node(id);
  return {n.data(), n.size()};
}

double Var::item() const {
  const auto& n = tape->node(id);
  if (n.size() != 1) throw ShapeError("item: value has shape " + dims(n.rows, n.cols));
  return n.data()[0];
}

// ---- Tape ---------------------------------------------------------------

Var Tape::push(std::size_t rows, std::size_t cols, Buffer value, bool needs_grad,
               std::function<void(Tape&, std::size_t)> bw) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.owned = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::input(const Tensor& t) {
  if (t.rank() > 2) throw ShapeError("tape: rank > 2 tensor " + shape_string(t.shape()));
  Node n;
  n.rows = t.rows();
  n.cols = t.cols();
  n.borrowed = t.data().data();
  n.needs_grad = t.requires_grad();
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::watch(Tensor& t) {
  Var v = input(t);
  nodes_[v.id].sink = t.requires_grad() ? &t : nullptr;
  return v;
}

Var Tape::constant(Tensor t) {
  if (t.rank() > 2) throw ShapeError("tape: rank > 2 tensor " + shape_string(t.shape()));
  const std::size_t r = t.rows(), c = t.cols();
  return push(r, c, Buffer(t.data().begin(), t.data().end()), false, nullptr);
}

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
  if (rows * cols != data.size()) throw ShapeError("constant: data size does not match " + dims(rows, cols));
  return push(rows, cols, Buffer(data.begin(), data.end()), false, nullptr);
}

Buffer& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var out) {
  if (nodes_.empty()) throw std::logic_error("backward: empty tape");
  if (out.tape != this) throw std::invalid_argument("backward: output belongs to another tape");
  if (backward_done_) throw std::logic_error("backward: gradients already populated; call reset_grads() first");
  const auto& no = nodes_[out.id];
  if (no.size() != 1) throw ShapeError("backward: output must be scalar, got " + dims(no.rows, no.cols));
  for (const auto& n : nodes_) {
    if (n.sink != nullptr && n.sink->grad().has_value()) {
      throw std::logic_error("backward: leaf gradient not reset since the previous backward");
    }
  }
  backward_done_ = true;
  if (!no.needs_grad) {
    for (auto& n : nodes_)
      if (n.sink != nullptr) n.sink->set_grad(std::vector<double>(n.size(), 0.0));
    return;
  }
  grad_buffer(out.id)[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.sink != nullptr) n.sink->set_grad(n.grad.empty() ? std::vector<double>(n.size(), 0.0) : std::vector<double>(n.grad.begin(), n.grad.end()));
  }
}

void Tape::reset_grads() {
  for (auto& n : nodes_) {
    n.grad.clear();
    if (n.sink != nullptr) n.sink->zero_grad();
  }
  backward_done_ = false;
}

std::vector<double> Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.empty()) return std::vector<double>(n.size(), 0.0);
  return {n.grad.begin(), n.grad.end()};
}

Tensor Tape::value(Var v) const {
  const auto& n = nodes_.at(v.id);
  return Tensor({n.rows, n.cols}, std::vector<double>(n.data(), n.data() + n.size()));
}

// ---- primitives ---------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "matmul");
  const auto& na = tape.node(a.id);
  const auto& nb = tape.node(b.id);
  if (na.cols != nb.rows) shape_fail("matmul", na, nb);
  const std::size_t m = na.rows, k = na.cols, n = nb.cols;
  Buffer out(m * n);
  Map(out.data(), m, n).noalias() = MapC(na.data(), m, k) * MapC(nb.data(), k, n);
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(m, n, std::move(out), na.needs_grad || nb.needs_grad,
                   [ia, ib, m, k, n](Tape& t, std::size_t self) {
                     MapC g(t.node(self).grad.data(), m, n);
                     if (t.node(ia).needs_grad) {
                       Map(t.grad_buffer(ia).data(), m, k).noalias() +=
                           g * MapC(t.node(ib).data(), k, n).transpose();
                     }
                     if (t.node(ib).needs_grad) {
                       Map(t.grad_buffer(ib).data(), k, n).noalias() +=
                           MapC(t.node(ia).data(), m, k).transpose() * g;
                     }
                   });
}

Var transpose(Var a) {
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  const std::size_t r = na.rows, c = na.cols;
  Buffer out(r * c);
  Map(out.data(), c, r) = MapC(na.data(), r, c).transpose();
  const std::size_t ia = a.id;
  return tape.push(c, r, std::move(out), na.needs_grad, [ia, r, c](Tape& t, std::size_t self) {
    Map(t.grad_buffer(ia).data(), r, c) += MapC(t.node(self).grad.data(), c, r).transpose();
  });
}

Var add(Var a, Var b) { return binary(a, b, BinOp::kAdd); }
Var sub(Var a, Var b) { return binary(a, b, BinOp::kSub); }
Var mul(Var a, Var b) { return binary(a, b, BinOp::kMul); }
Var div(Var a, Var b) { return binary(a, b, BinOp::kDiv); }

Var scale(Var a, double s) {
  return unary(
      a, [s](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = s * x[i];
      },
      [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, [s](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + s;
      },
      [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        Eigen::Map<Eigen::ArrayXd>(y.data(), y.size()) =
            Eigen::Map<const Eigen::ArrayXd>(x.data(), x.size()).exp();
      },
      [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (!(x[i] > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x[i]));
          y[i] = std::log(x[i]);
        }
      },
      [](double x, double) { return 1.0 / x; });
}

void tanh_inplace(std::span<double> x) {
  // tanh(x) = 1 - 2 / (exp(2x) + 1) vectorises through Eigen's exp; the
  // scalar std::tanh is several times slower on the hot path.
  Eigen::Map<Eigen::ArrayXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
  v = 1.0 - 2.0 / ((2.0 * v).exp() + 1.0);
}

void tanh_inplace(std::span<float> x) {
  Eigen::Map<Eigen::ArrayXf> v(x.data(), static_cast<Eigen::Index>(x.size()));
  v = v.tanh();
}

Var tanh(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        std::copy(x.begin(), x.end(), y.begin());
        tanh_inplace(y);
      },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) {
          y[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::abs(x[i])));
        }
      },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Var abs(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::abs(x[i]);
      },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(
      a, [](std::span<const double> x, std::span<double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i];
      },
      [](double x, double) { return 2.0 * x; });
}

Var sum(Var a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum: axis must be 0 or 1");
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  const std::size_t r = na.rows, c = na.cols;
  const std::size_t orows = axis == 0 ? 1 : r, ocols = axis == 0 ? c : 1;
  Buffer out(orows * ocols, 0.0);
  const double* p = na.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += p[i * c + j];
  const std::size_t ia = a.id;
  return tape.push(orows, ocols, std::move(out), na.needs_grad, [ia, r, c, axis](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 0 ? j : i];
  });
}

Var sum_all(Var a) { return sum(sum(a, 0), 1); }

Var mean(Var a) {
  const double n = static_cast<double>(a.tape->node(a.id).size());
  return scale(sum_all(a), 1.0 / n);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Tape& tape = *parts[0].tape;
  const auto& first = tape.node(parts[0].id);
  std::size_t rows = 0, cols = 0;
  bool needs = false;
  for (const Var& v : parts) {
    const auto& n = tape.node(v.id);
    if (v.tape != &tape) throw std::invalid_argument("concat: operands live on different tapes");
    if (axis == 0 && n.cols != first.cols) shape_fail("concat", first, n);
    if (axis == 1 && n.rows != first.rows) shape_fail("concat", first, n);
    rows = axis == 0 ? rows + n.rows : n.rows;
    cols = axis == 1 ? cols + n.cols : n.cols;
    needs = needs || n.needs_grad;
  }
  Buffer out(rows * cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& v : parts) {
    const auto& n = tape.node(v.id);
    ids.push_back(v.id);
    offsets.push_back(off);
    if (axis == 0) {
      std::copy(n.data(), n.data() + n.size(), out.begin() + static_cast<std::ptrdiff_t>(off * cols));
      off += n.rows;
    } else {
      Map(out.data(), rows, cols).middleCols(static_cast<Eigen::Index>(off), n.cols) = MapC(n.data(), n.rows, n.cols);
      off += n.cols;
    }
  }
  return tape.push(rows, cols, std::move(out), needs, [ids, offsets, rows, cols, axis](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& n = t.node(ids[k]);
      if (!n.needs_grad) continue;
      auto& gk = t.grad_buffer(ids[k]);
      if (axis == 0) {
        const double* src = g.data() + offsets[k] * cols;
        for (std::size_t i = 0; i < n.size(); ++i) gk[i] += src[i];
      } else {
        Map(gk.data(), n.rows, n.cols) +=
            MapC(g.data(), rows, cols).middleCols(static_cast<Eigen::Index>(offsets[k]), n.cols);
      }
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  if (begin >= end || end > na.cols) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + dims(na.rows, na.cols));
  }
  const std::size_t r = na.rows, c = na.cols, w = end - begin;
  Buffer out(r * w);
  Map(out.data(), r, w) = MapC(na.data(), r, c).middleCols(static_cast<Eigen::Index>(begin), w);
  const std::size_t ia = a.id;
  return tape.push(r, w, std::move(out), na.needs_grad, [ia, r, c, w, begin](Tape& t, std::size_t self) {
    Map(t.grad_buffer(ia).data(), r, c).middleCols(static_cast<Eigen::Index>(begin), w) +=
        MapC(t.node(self).grad.data(), r, w);
  });
}

Var broadcast_to(Var a, std::size_t rows, std::size_t cols) {
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  if ((na.rows != rows && na.rows != 1) || (na.cols != cols && na.cols != 1)) {
    throw ShapeError("broadcast: cannot broadcast " + dims(na.rows, na.cols) + " to " + dims(rows, cols));
  }
  Var zero = tape.constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  return add(zero, a);
}

Var softmax(Var a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Tape& tape = *a.tape;
  const auto& na = tape.node(a.id);
  const std::size_t r = na.rows, c = na.cols;
  const std::size_t groups = axis == 0 ? c : r, len = axis == 0 ? r : c;
  auto idx = [=](std::size_t g, std::size_t k) { return axis == 0 ? k * c + g : g * c + k; };
  const double* x = na.data();
  Buffer out(r * c);
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[idx(g, k)]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(x[idx(g, k)] - mx);
      out[idx(g, k)] = e;
      total += e;
    }
    for (std::size_t k = 0; k < len; ++k) out[idx(g, k)] /= total;
  }
  const std::size_t ia = a.id;
  return tape.push(r, c, std::move(out), na.needs_grad, [ia, groups, len, idx](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    const double* y = n.data();
    const auto& g = n.grad;
    auto& ga = t.grad_buffer(ia);
    for (std::size_t grp = 0; grp < groups; ++grp) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[idx(grp, k)] * y[idx(grp, k)];
      for (std::size_t k = 0; k < len; ++k) ga[idx(grp, k)] += y[idx(grp, k)] * (g[idx(grp, k)] - dot);
    }
  });
}

double gradient_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  std::vector<double> analytic;
  {
    Tape tape;
    Var in = tape.input(probe);
    Var out = f(tape, in);
    tape.backward(out);
    analytic = tape.grad(in);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var in = tape.input(at);
    return f(tape, in).item();
  };
  double worst = 0.0;
  Tensor shifted(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = shifted[i];
    shifted[i] = orig + eps;
    const double up = eval(shifted);
    shifted[i] = orig - eps;
    const double down = eval(shifted);
    shifted[i] = orig;
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-12));
  }
  return worst;
}

}  // namespace ontraffic::ad
