#pragma once

#include <map>
#include <string>

#include "mposm/autograd.hpp"

namespace mposm {

class Adam {
 public:
  struct Moments {
    ad::Matrix first;
    ad::Matrix second;
  };

  explicit Adam(double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ad::ParameterSet& params);

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }
  std::uint64_t steps() const { return t_; }

  // Exposed for checkpointing.
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t steps, double lr) {
    t_ = steps;
    lr_ = lr;
  }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mposm
