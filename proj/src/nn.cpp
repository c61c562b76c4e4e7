#include "mposm/nn.hpp"

#include <cmath>

namespace mposm::nn {

void init_uniform(ad::Parameter& p, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = u(rng);
  }
}

void init_normal(ad::Parameter& p, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = n(rng);
  }
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  if (rate <= 0.0) return Matrix::Ones(rows, cols);
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = keep(rng) ? s : 0.0;
  }
  return m;
}

Linear Linear::create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                      Eigen::Index out, Rng& rng) {
  Linear l{prefix, in, out};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  init_uniform(params.add(l.weight(), out, in), bound, rng);
  init_uniform(params.add(l.bias(), out, 1), bound, rng);
  return l;
}

Expr Linear::operator()(Graph& g, ParameterSet& params, Expr x) const {
  return ad::add_bias(ad::matmul(g.param(params.at(weight())), x), g.param(params.at(bias())));
}

Lstm Lstm::create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                  Eigen::Index hidden, Rng& rng) {
  Lstm l{prefix, in, hidden};
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  init_uniform(params.add(prefix + ".w_input", 4 * hidden, in), bound, rng);
  init_uniform(params.add(prefix + ".w_hidden", 4 * hidden, hidden), bound, rng);
  init_uniform(params.add(prefix + ".bias", 4 * hidden, 1), bound, rng);
  return l;
}

Expr Lstm::operator()(Graph& g, ParameterSet& params, Expr x, Eigen::Index batch,
                      std::span<const unsigned char> valid, bool reverse) const {
  return ad::lstm(x, g.param(params.at(prefix + ".w_input")),
                  g.param(params.at(prefix + ".w_hidden")), g.param(params.at(prefix + ".bias")),
                  batch, valid, reverse);
}

Expr Lstm::factored(Graph& g, ParameterSet& params, Expr basis, Expr selector, Eigen::Index batch,
                    std::span<const unsigned char> valid, bool reverse) const {
  Expr projected = ad::matmul(g.param(params.at(prefix + ".w_input")), basis);
  Expr gates = ad::add_bias(ad::matmul(projected, selector), g.param(params.at(prefix + ".bias")));
  return ad::lstm_gates(gates, g.param(params.at(prefix + ".w_hidden")), batch, valid, reverse);
}

BiLstm BiLstm::create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                      Eigen::Index hidden, Rng& rng) {
  BiLstm b;
  b.forward = Lstm::create(params, prefix + ".fwd", in, hidden, rng);
  b.backward = Lstm::create(params, prefix + ".bwd", in, hidden, rng);
  return b;
}

Expr BiLstm::operator()(Graph& g, ParameterSet& params, Expr x, Eigen::Index batch,
                        std::span<const unsigned char> valid) const {
  Expr parts[2] = {forward(g, params, x, batch, valid, false),
                   backward(g, params, x, batch, valid, true)};
  return ad::concat_rows(parts);
}

Expr BiLstm::factored(Graph& g, ParameterSet& params, Expr basis, Expr selector, Eigen::Index batch,
                      std::span<const unsigned char> valid) const {
  Expr parts[2] = {forward.factored(g, params, basis, selector, batch, valid, false),
                   backward.factored(g, params, basis, selector, batch, valid, true)};
  return ad::concat_rows(parts);
}

}  // namespace mposm::nn
