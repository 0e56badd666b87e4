#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ontraffic::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Raised when operand shapes do not conform to an op's broadcasting or
/// contraction rules. The message names the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inputs outside an op's mathematical domain (e.g. log of 0).
/// 64-byte aligned storage so vectorised kernels take the same path (and
/// round the same way) for every buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense row-major array of doubles. Rank 0 is not used; rank-1 tensors
/// behave as a single row wherever a matrix is expected.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  /// Matrix view: rank-1 tensors are 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  /// Gradient slot written by Tape::backward for leaves registered with
  /// Tape::watch. Must be cleared with zero_grad() before the next backward.
  const std::optional<std::vector<double>>& grad() const { return grad_; }
  void zero_grad() { grad_.reset(); }
  void set_grad(std::vector<double> g);

 private:
  Shape shape_;
  Buffer data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const double> value() const;
  double item() const;
};

/// Define-by-run reverse-mode tape over rank <= 2 values.
///
/// Leaves come in two flavours: `input` borrows a const tensor (which must
/// outlive the tape) and keeps its gradient on the tape, so several tapes can
/// share one read-only parameter set; `watch` additionally writes the
/// gradient into the tensor's own grad slot on backward.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(const Tensor& t);
  Var watch(Tensor& t);
  Var constant(Tensor t);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> data);

  /// Populates gradients of every requires_grad leaf. Throws if `out` is not
  /// a scalar, if the tape is empty, or if gradients from a previous
  /// backward have not been reset.
  void backward(Var out);
  void reset_grads();

  /// Gradient of the last backward w.r.t. `v` (zeros if v did not influence
  /// the output).
  std::vector<double> grad(Var v) const;
  Tensor value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Internal interface for op implementations.
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Buffer owned;
    const double* borrowed = nullptr;
    Buffer grad;
    bool needs_grad = false;
    Tensor* sink = nullptr;
    std::function<void(Tape&, std::size_t)> backward;

    const double* data() const { return borrowed ? borrowed : owned.data(); }
    std::size_t size() const { return rows * cols; }
  };

  Var push(std::size_t rows, std::size_t cols, Buffer value,
           bool needs_grad, std::function<void(Tape&, std::size_t)> bw);
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  /// Gradient buffer of node `id`, allocated on first use.
  Buffer& grad_buffer(std::size_t id);

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives ---------------------------------------------------------
// Binary elementwise ops broadcast size-1 dimensions of either operand.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var abs(Var a);
Var square(Var a);
/// axis 0 reduces rows (result 1 x cols); axis 1 reduces columns (rows x 1).
Var sum(Var a, int axis);
Var sum_all(Var a);
Var mean(Var a);
Var concat(std::span<const Var> parts, int axis);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var broadcast_to(Var a, std::size_t rows, std::size_t cols);
Var softmax(Var a, int axis);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

/// Vectorised tanh over a raw buffer, shared with the inference path.
void tanh_inplace(std::span<double> x);
void tanh_inplace(std::span<float> x);

/// Max over coordinates of |autodiff - central difference| /
/// (|central difference| + 1e-12) for a scalar-valued f at x.
double gradient_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                      double eps);

}  // namespace ontraffic::ad
