#pragma once

// Minimal tape-based reverse-mode differentiation over column-major Eigen
// matrices. Every value is a matrix; a batch of vectors is laid out one
// vector per column. A Graph lives for one forward/backward pass.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mposm::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Owns the learnable tensors of a model, iterated in name order so that
// serialization and optimizer state are independent of construction order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;

  void zero_grad();
  bool all_finite() const;

 private:
  std::map<std::string, std::unique_ptr<Parameter>> params_;
};

class Graph;

class Expr {
 public:
  Expr() = default;
  Expr(Graph* graph, int index) : graph_(graph), index_(index) {}

  Graph& graph() const { return *graph_; }
  int index() const { return index_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int index_ = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Expr constant(Matrix value);
  // Leaf bound to a parameter; gradients accumulate directly into p.grad.
  Expr param(Parameter& p);
  // Gathers columns of a parameter; the gradient is scattered sparsely.
  Expr lookup(Parameter& p, std::span<const int> columns);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 node and runs the tape backwards.
  void backward(Expr loss);

  Expr add_node(Matrix value, std::vector<int> inputs, BackwardFn backward);

  const Matrix& value(int i) const;
  // Returns the gradient buffer of node i, allocating zeros on first use.
  Matrix& grad(int i);
  bool has_grad(int i) const;
  bool requires_grad(int i) const { return nodes_[i].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear algebra.
Expr matmul(Expr a, Expr b);
Expr operator+(Expr a, Expr b);
Expr operator-(Expr a, Expr b);
Expr cmul(Expr a, Expr b);
Expr cmul(Expr a, const Matrix& mask);
Expr scale(Expr a, double s);
Expr add_scalar(Expr a, double s);
Expr add_bias(Expr a, Expr column);    // a + column broadcast across columns
Expr add_row(Expr a, Expr row);        // a + row broadcast across rows
Expr tanh(Expr a);
Expr sigmoid(Expr a);
Expr log(Expr a);
Expr transpose(Expr a);

// Shape manipulation.
Expr concat_rows(std::span<const Expr> parts);
Expr concat_cols(std::span<const Expr> parts);
Expr slice_rows(Expr a, Eigen::Index start, Eigen::Index n);
Expr slice_cols(Expr a, Eigen::Index start, Eigen::Index n);
Expr gather_cols(Expr a, std::span<const int> columns);

// Column-wise probability operations.
Expr softmax_cols(Expr a);
Expr log_softmax_cols(Expr a);
Expr logsumexp_cols(Expr a);                       // 1 x cols
Expr pick_rows(Expr a, std::span<const int> rows);  // 1 x cols: a(rows[c], c)
Expr sum(Expr a);                                  // 1 x 1

// Straight-through Gumbel-Softmax. Forward emits one_hot(argmax(logits +
// noise)) per column (ties to the lowest row); backward differentiates
// softmax((logits + noise) / tau). With relaxed=true the forward value is the
// soft sample itself, which makes the backward pass the exact gradient.
Expr gumbel_straight_through(Expr logits, const Matrix& noise, double tau,
                             bool relaxed = false);

// Appends a MASK row to a one-hot matrix; masked columns become the MASK
// indicator and stop gradient to the original column.
Expr with_mask_row(Expr onehots, std::span<const unsigned char> masked);

// One-directional LSTM over a time-major batch. Column t*batch + b of `x`
// holds step t of sequence b; `valid` flags real (non-padding) steps. State
// carries unchanged across padding, so the forward direction's final output is
// the state at the last real step and the reverse direction starts at zero.
// Gate order in the 4H rows is input, forget, cell, output.
Expr lstm(Expr x, Expr w_input, Expr w_hidden, Expr bias, Eigen::Index batch,
          std::span<const unsigned char> valid, bool reverse);

// Same recurrence, given the input pre-activations W_i x + b directly.
Expr lstm_gates(Expr gates_in, Expr w_hidden, Eigen::Index batch, std::span<const unsigned char> valid,
                bool reverse);

}  // namespace mposm::ad
