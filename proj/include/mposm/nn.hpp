#pragma once

// Layers are thin descriptors naming their tensors inside a ParameterSet, so
// a parameter set can be copied, serialized, or transplanted independently.

#include <span>
#include <string>

#include "mposm/autograd.hpp"
#include "mposm/corpus.hpp"

namespace mposm::nn {

using ad::Expr;
using ad::Graph;
using ad::Matrix;
using ad::ParameterSet;

void init_uniform(ad::Parameter& p, double bound, Rng& rng);
void init_normal(ad::Parameter& p, double stddev, Rng& rng);

// Inverted-dropout mask: entries are 0 or 1/(1-rate).
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

struct Linear {
  std::string prefix;
  Eigen::Index in = 0;
  Eigen::Index out = 0;

  static Linear create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                       Eigen::Index out, Rng& rng);
  std::string weight() const { return prefix + ".weight"; }
  std::string bias() const { return prefix + ".bias"; }
  Expr operator()(Graph& g, ParameterSet& params, Expr x) const;
};

struct Lstm {
  std::string prefix;
  Eigen::Index in = 0;
  Eigen::Index hidden = 0;

  static Lstm create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                     Eigen::Index hidden, Rng& rng);
  Expr operator()(Graph& g, ParameterSet& params, Expr x, Eigen::Index batch,
                  std::span<const unsigned char> valid, bool reverse) const;
  // Input given as basis * selector; projects the basis first.
  Expr factored(Graph& g, ParameterSet& params, Expr basis, Expr selector, Eigen::Index batch,
                std::span<const unsigned char> valid, bool reverse) const;
};

// Two independent LSTMs; output rows are [forward; backward].
struct BiLstm {
  Lstm forward;
  Lstm backward;

  static BiLstm create(ParameterSet& params, const std::string& prefix, Eigen::Index in,
                       Eigen::Index hidden, Rng& rng);
  Eigen::Index output_dim() const { return forward.hidden + backward.hidden; }
  Expr operator()(Graph& g, ParameterSet& params, Expr x, Eigen::Index batch,
                  std::span<const unsigned char> valid) const;
  Expr factored(Graph& g, ParameterSet& params, Expr basis, Expr selector, Eigen::Index batch,
                std::span<const unsigned char> valid) const;
};

}  // namespace mposm::nn
