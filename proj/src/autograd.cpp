#include "mposm/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace mposm::ad {

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(const std::string& name, Eigen::Index rows,
                             Eigen::Index cols) {
  if (params_.count(name)) {
    throw std::logic_error(fmt::format("duplicate parameter '{}'", name));
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Matrix::Zero(rows, cols);
  p->grad = Matrix::Zero(rows, cols);
  auto& ref = *p;
  params_.emplace(name, std::move(p));
  return ref;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto* p = find(name);
  if (!p) throw std::out_of_range(fmt::format("no parameter '{}'", name));
  return *p;
}

const Parameter& ParameterSet::at(const std::string& name) const {
  const auto* p = find(name);
  if (!p) throw std::out_of_range(fmt::format("no parameter '{}'", name));
  return *p;
}

Parameter* ParameterSet::find(const std::string& name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

const Parameter* ParameterSet::find(const std::string& name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : it->second.get();
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& [_, p] : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& [_, p] : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) p->zero_grad();
}

bool ParameterSet::all_finite() const {
  for (const auto& [_, p] : params_) {
    if (!p->value.allFinite()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph

const Matrix& Expr::value() const { return graph_->value(index_); }

Expr Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Expr Graph::param(Parameter& p) {
  Node n;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Expr Graph::lookup(Parameter& p, std::span<const int> columns) {
  Matrix out(p.value.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    out.col(static_cast<Eigen::Index>(c)) = p.value.col(columns[c]);
  }
  std::vector<int> ids(columns.begin(), columns.end());
  Node n;
  n.value = std::move(out);
  n.requires_grad = true;
  n.backward = [&p, ids = std::move(ids)](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (p.grad.size() != p.value.size()) p.zero_grad();
    for (std::size_t c = 0; c < ids.size(); ++c) {
      p.grad.col(ids[c]) += d.col(static_cast<Eigen::Index>(c));
    }
  };
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Expr Graph::add_node(Matrix value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(int i) const {
  const Node& n = nodes_[i];
  return n.param ? n.param->value : n.value;
}

Matrix& Graph::grad(int i) {
  Node& n = nodes_[i];
  if (n.param) {
    if (n.param->grad.size() != n.param->value.size()) n.param->zero_grad();
    return n.param->grad;
  }
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

bool Graph::has_grad(int i) const { return nodes_[i].grad.size() != 0; }

void Graph::backward(Expr loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward() requires a 1x1 loss");
  }
  grad(loss.index())(0, 0) += 1.0;
  for (int i = loss.index(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && n.requires_grad && n.grad.size() != 0) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(fmt::format("{}: shape mismatch {}x{} vs {}x{}", op,
                                            a.rows(), a.cols(), b.rows(), b.cols()));
  }
}

}  // namespace

Expr matmul(Expr a, Expr b) {
  Graph& g = a.graph();
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(fmt::format("matmul: {}x{} * {}x{}", a.rows(), a.cols(),
                                            b.rows(), b.cols()));
  }
  Matrix out = a.value() * b.value();
  int ia = a.index(), ib = b.index();
  return g.add_node(std::move(out), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia).noalias() += d * g.value(ib).transpose();
    if (g.requires_grad(ib)) g.grad(ib).noalias() += g.value(ia).transpose() * d;
  });
}

Expr operator+(Expr a, Expr b) {
  check_same_shape(a.value(), b.value(), "add");
  int ia = a.index(), ib = b.index();
  return a.graph().add_node(a.value() + b.value(), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += d;
    if (g.requires_grad(ib)) g.grad(ib) += d;
  });
}

Expr operator-(Expr a, Expr b) {
  check_same_shape(a.value(), b.value(), "sub");
  int ia = a.index(), ib = b.index();
  return a.graph().add_node(a.value() - b.value(), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += d;
    if (g.requires_grad(ib)) g.grad(ib) -= d;
  });
}

Expr cmul(Expr a, Expr b) {
  check_same_shape(a.value(), b.value(), "cmul");
  int ia = a.index(), ib = b.index();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.graph().add_node(std::move(out), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += d.cwiseProduct(g.value(ib));
    if (g.requires_grad(ib)) g.grad(ib) += d.cwiseProduct(g.value(ia));
  });
}

Expr cmul(Expr a, const Matrix& mask) {
  check_same_shape(a.value(), mask, "cmul");
  int ia = a.index();
  return a.graph().add_node(a.value().cwiseProduct(mask), {ia},
                            [ia, mask](Graph& g, int self) {
                              g.grad(ia) += g.grad(self).cwiseProduct(mask);
                            });
}

Expr scale(Expr a, double s) {
  int ia = a.index();
  return a.graph().add_node(a.value() * s, {ia}, [ia, s](Graph& g, int self) {
    g.grad(ia) += s * g.grad(self);
  });
}

Expr add_scalar(Expr a, double s) {
  int ia = a.index();
  Matrix out = a.value().array() + s;
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    g.grad(ia) += g.grad(self);
  });
}

Expr add_bias(Expr a, Expr column) {
  if (column.cols() != 1 || column.rows() != a.rows()) {
    throw std::invalid_argument("add_bias: bias must be a column matching rows");
  }
  int ia = a.index(), ib = column.index();
  Matrix out = a.value().colwise() + column.value().col(0);
  return a.graph().add_node(std::move(out), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += d;
    if (g.requires_grad(ib)) g.grad(ib) += d.rowwise().sum();
  });
}

Expr add_row(Expr a, Expr row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: row must be 1 x cols");
  }
  int ia = a.index(), ib = row.index();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.graph().add_node(std::move(out), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += d;
    if (g.requires_grad(ib)) g.grad(ib) += d.colwise().sum();
  });
}

Expr tanh(Expr a) {
  int ia = a.index();
  Matrix out = a.value().array().tanh();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    g.grad(ia).array() += g.grad(self).array() * (1.0 - y.array().square());
  });
}

Expr sigmoid(Expr a) {
  int ia = a.index();
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    g.grad(ia).array() += g.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Expr log(Expr a) {
  int ia = a.index();
  Matrix out = a.value().array().log();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    g.grad(ia).array() += g.grad(self).array() / g.value(ia).array();
  });
}

Expr transpose(Expr a) {
  int ia = a.index();
  Matrix out = a.value().transpose();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    g.grad(ia) += g.grad(self).transpose();
  });
}

Expr concat_rows(std::span<const Expr> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph& g = parts[0].graph();
  Eigen::Index cols = parts[0].cols(), rows = 0;
  std::vector<int> inputs;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    inputs.push_back(p.index());
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return g.add_node(std::move(out), inputs, [inputs](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Eigen::Index r = 0;
    for (int i : inputs) {
      Eigen::Index n = g.value(i).rows();
      if (g.requires_grad(i)) g.grad(i) += d.middleRows(r, n);
      r += n;
    }
  });
}

Expr concat_cols(std::span<const Expr> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Graph& g = parts[0].graph();
  Eigen::Index rows = parts[0].rows(), cols = 0;
  std::vector<int> inputs;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    inputs.push_back(p.index());
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return g.add_node(std::move(out), inputs, [inputs](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Eigen::Index c = 0;
    for (int i : inputs) {
      Eigen::Index n = g.value(i).cols();
      if (g.requires_grad(i)) g.grad(i) += d.middleCols(c, n);
      c += n;
    }
  });
}

Expr slice_rows(Expr a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.rows()) throw std::out_of_range("slice_rows");
  int ia = a.index();
  Matrix out = a.value().middleRows(start, n);
  return a.graph().add_node(std::move(out), {ia}, [ia, start, n](Graph& g, int self) {
    g.grad(ia).middleRows(start, n) += g.grad(self);
  });
}

Expr slice_cols(Expr a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw std::out_of_range("slice_cols");
  int ia = a.index();
  Matrix out = a.value().middleCols(start, n);
  return a.graph().add_node(std::move(out), {ia}, [ia, start, n](Graph& g, int self) {
    g.grad(ia).middleCols(start, n) += g.grad(self);
  });
}

Expr gather_cols(Expr a, std::span<const int> columns) {
  const Matrix& v = a.value();
  Matrix out(v.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c] < 0 || columns[c] >= v.cols()) throw std::out_of_range("gather_cols");
    out.col(static_cast<Eigen::Index>(c)) = v.col(columns[c]);
  }
  int ia = a.index();
  std::vector<int> ids(columns.begin(), columns.end());
  return a.graph().add_node(std::move(out), {ia}, [ia, ids = std::move(ids)](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Matrix& ga = g.grad(ia);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      ga.col(ids[c]) += d.col(static_cast<Eigen::Index>(c));
    }
  });
}

Expr softmax_cols(Expr a) {
  Matrix out = a.value();
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    auto col = out.col(c);
    col.array() = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
  int ia = a.index();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    RowVector dot = (d.cwiseProduct(y)).colwise().sum();
    g.grad(ia).array() += y.array() * (d.rowwise() - dot).array();
  });
}

Expr log_softmax_cols(Expr a) {
  Matrix out = a.value();
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    auto col = out.col(c);
    double m = col.maxCoeff();
    double lse = m + std::log((col.array() - m).exp().sum());
    col.array() -= lse;
  }
  int ia = a.index();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    RowVector total = d.colwise().sum();
    g.grad(ia).array() += d.array() - y.array().exp() * total.replicate(y.rows(), 1).array();
  });
}

Expr logsumexp_cols(Expr a) {
  const Matrix& v = a.value();
  Matrix out(1, v.cols());
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    double m = v.col(c).maxCoeff();
    out(0, c) = std::isinf(m) && m < 0 ? m : m + std::log((v.col(c).array() - m).exp().sum());
  }
  int ia = a.index();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    const Matrix& x = g.value(ia);
    const Matrix& y = g.value(self);
    const Matrix& d = g.grad(self);
    Matrix& ga = g.grad(ia);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (std::isinf(y(0, c))) continue;
      ga.col(c).array() += d(0, c) * (x.col(c).array() - y(0, c)).exp();
    }
  });
}

Expr pick_rows(Expr a, std::span<const int> rows) {
  const Matrix& v = a.value();
  if (static_cast<Eigen::Index>(rows.size()) != v.cols()) {
    throw std::invalid_argument("pick_rows: one row index per column required");
  }
  Matrix out(1, v.cols());
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    if (rows[c] < 0 || rows[c] >= v.rows()) throw std::out_of_range("pick_rows");
    out(0, c) = v(rows[c], c);
  }
  int ia = a.index();
  std::vector<int> ids(rows.begin(), rows.end());
  return a.graph().add_node(std::move(out), {ia}, [ia, ids = std::move(ids)](Graph& g, int self) {
    const Matrix& d = g.grad(self);
    Matrix& ga = g.grad(ia);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      ga(ids[c], static_cast<Eigen::Index>(c)) += d(0, static_cast<Eigen::Index>(c));
    }
  });
}

Expr sum(Expr a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  int ia = a.index();
  return a.graph().add_node(std::move(out), {ia}, [ia](Graph& g, int self) {
    g.grad(ia).array() += g.grad(self)(0, 0);
  });
}

Expr gumbel_straight_through(Expr logits, const Matrix& noise, double tau, bool relaxed) {
  check_same_shape(logits.value(), noise, "gumbel_straight_through");
  if (!(tau > 0)) throw std::invalid_argument("gumbel temperature must be positive");
  const Matrix perturbed = logits.value() + noise;
  Matrix soft(perturbed.rows(), perturbed.cols());
  Matrix out = Matrix::Zero(perturbed.rows(), perturbed.cols());
  for (Eigen::Index c = 0; c < perturbed.cols(); ++c) {
    Eigen::Index best = 0;
    // maxCoeff reports the first maximal index, i.e. ties go to the lowest row.
    double m = perturbed.col(c).maxCoeff(&best);
    auto col = soft.col(c);
    col.array() = ((perturbed.col(c).array() - m) / tau).exp();
    col /= col.sum();
    if (relaxed) {
      out.col(c) = col;
    } else {
      out(best, c) = 1.0;
    }
  }
  int il = logits.index();
  return logits.graph().add_node(
      std::move(out), {il}, [il, soft = std::move(soft), tau](Graph& g, int self) {
        const Matrix& d = g.grad(self);
        RowVector dot = d.cwiseProduct(soft).colwise().sum();
        g.grad(il).array() += soft.array() * (d.rowwise() - dot).array() / tau;
      });
}

Expr with_mask_row(Expr onehots, std::span<const unsigned char> masked) {
  const Matrix& v = onehots.value();
  if (static_cast<Eigen::Index>(masked.size()) != v.cols()) {
    throw std::invalid_argument("with_mask_row: one flag per column required");
  }
  Matrix out = Matrix::Zero(v.rows() + 1, v.cols());
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    if (masked[c]) {
      out(v.rows(), c) = 1.0;
    } else {
      out.col(c).head(v.rows()) = v.col(c);
    }
  }
  int ia = onehots.index();
  std::vector<unsigned char> flags(masked.begin(), masked.end());
  return onehots.graph().add_node(
      std::move(out), {ia}, [ia, flags = std::move(flags)](Graph& g, int self) {
        const Matrix& d = g.grad(self);
        Matrix& ga = g.grad(ia);
        for (Eigen::Index c = 0; c < ga.cols(); ++c) {
          if (!flags[c]) ga.col(c) += d.col(c).head(ga.rows());
        }
      });
}

// ---------------------------------------------------------------------------
// Fused LSTM

namespace {

struct LstmTape {
  Matrix gates;      // 4H x T*B, post-activation i, f, g, o
  Matrix cell_new;   // tanh(c_new) per step, H x T*B
  Matrix cell_prev;  // c_{t-1} as seen by step t
  Matrix hidden_prev;
};

}  // namespace

Expr lstm(Expr x, Expr w_input, Expr w_hidden, Expr bias, Eigen::Index batch,
          std::span<const unsigned char> valid, bool reverse) {
  const Eigen::Index hidden = w_hidden.cols();
  if (w_input.rows() != 4 * hidden || w_input.cols() != x.rows() || bias.rows() != 4 * hidden ||
      bias.cols() != 1) {
    throw std::invalid_argument("lstm: weight shapes inconsistent");
  }
  return lstm_gates(add_bias(matmul(w_input, x), bias), w_hidden, batch, valid, reverse);
}

Expr lstm_gates(Expr gates_in, Expr w_hidden, Eigen::Index batch, std::span<const unsigned char> valid,
                bool reverse) {
  const Eigen::Index hidden = w_hidden.cols();
  const Eigen::Index total = gates_in.cols();
  if (batch <= 0 || total % batch != 0) throw std::invalid_argument("lstm: bad batch");
  if (w_hidden.rows() != 4 * hidden || gates_in.rows() != 4 * hidden) {
    throw std::invalid_argument("lstm: weight shapes inconsistent");
  }
  if (static_cast<Eigen::Index>(valid.size()) != total) {
    throw std::invalid_argument("lstm: one validity flag per column required");
  }
  const Eigen::Index steps = total / batch;
  const Matrix& wh = w_hidden.value();

  auto tape = std::make_shared<LstmTape>();
  tape->gates = gates_in.value();
  tape->cell_new.resize(hidden, total);
  tape->cell_prev.resize(hidden, total);
  tape->hidden_prev.resize(hidden, total);
  Matrix out(hidden, total);

  Matrix h = Matrix::Zero(hidden, batch);
  Matrix c = Matrix::Zero(hidden, batch);
  Matrix pre(4 * hidden, batch);
  for (Eigen::Index s = 0; s < steps; ++s) {
    const Eigen::Index t = reverse ? steps - 1 - s : s;
    const Eigen::Index off = t * batch;
    pre.noalias() = wh * h;
    auto gates = tape->gates.middleCols(off, batch);
    gates += pre;
    gates.topRows(2 * hidden) =
        (1.0 + (-gates.topRows(2 * hidden).array()).exp()).inverse().matrix();
    gates.middleRows(2 * hidden, hidden) = gates.middleRows(2 * hidden, hidden).array().tanh().matrix();
    gates.bottomRows(hidden) = (1.0 + (-gates.bottomRows(hidden).array()).exp()).inverse().matrix();
    tape->cell_prev.middleCols(off, batch) = c;
    tape->hidden_prev.middleCols(off, batch) = h;
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (!valid[off + b]) continue;
      auto gi = gates.col(b).segment(0, hidden).array();
      auto gf = gates.col(b).segment(hidden, hidden).array();
      auto gg = gates.col(b).segment(2 * hidden, hidden).array();
      auto go = gates.col(b).segment(3 * hidden, hidden).array();
      c.col(b).array() = gf * c.col(b).array() + gi * gg;
      tape->cell_new.col(off + b) = c.col(b).array().tanh().matrix();
      h.col(b).array() = go * tape->cell_new.col(off + b).array();
    }
    out.middleCols(off, batch) = h;
  }

  const int ig = gates_in.index(), iwh = w_hidden.index();
  std::vector<unsigned char> flags(valid.begin(), valid.end());
  return gates_in.graph().add_node(
      std::move(out), {ig, iwh},
      [=, tape = std::move(tape), flags = std::move(flags)](Graph& g, int self) {
        const Matrix& d_out = g.grad(self);
        const Matrix& whv = g.value(iwh);
        Matrix d_gates = Matrix::Zero(4 * hidden, total);
        Matrix dh = Matrix::Zero(hidden, batch);
        Matrix dc = Matrix::Zero(hidden, batch);
        Matrix dh_prev(hidden, batch);
        for (Eigen::Index s = steps - 1; s >= 0; --s) {
          const Eigen::Index t = reverse ? steps - 1 - s : s;
          const Eigen::Index off = t * batch;
          dh += d_out.middleCols(off, batch);
          for (Eigen::Index b = 0; b < batch; ++b) {
            if (!flags[off + b]) continue;  // state (and its gradient) carries through
            auto gcol = tape->gates.col(off + b);
            auto gi = gcol.segment(0, hidden).array();
            auto gf = gcol.segment(hidden, hidden).array();
            auto gg = gcol.segment(2 * hidden, hidden).array();
            auto go = gcol.segment(3 * hidden, hidden).array();
            auto tc = tape->cell_new.col(off + b).array();
            Eigen::ArrayXd dhb = dh.col(b).array();
            Eigen::ArrayXd dcb = dc.col(b).array() + dhb * go * (1.0 - tc.square());
            auto dg = d_gates.col(off + b);
            dg.segment(0, hidden) = (dcb * gg * gi * (1.0 - gi)).matrix();
            dg.segment(hidden, hidden) =
                (dcb * tape->cell_prev.col(off + b).array() * gf * (1.0 - gf)).matrix();
            dg.segment(2 * hidden, hidden) = (dcb * gi * (1.0 - gg.square())).matrix();
            dg.segment(3 * hidden, hidden) = (dhb * tc * go * (1.0 - go)).matrix();
            dc.col(b) = (dcb * gf).matrix();
            dh.col(b).setZero();
          }
          dh_prev.noalias() = whv.transpose() * d_gates.middleCols(off, batch);
          dh += dh_prev;
        }
        if (g.requires_grad(iwh)) g.grad(iwh).noalias() += d_gates * tape->hidden_prev.transpose();
        if (g.requires_grad(ig)) g.grad(ig) += d_gates;
      });
}

}  // namespace mposm::ad
