#include "mposm/optimizer.hpp"

#include <cmath>

namespace mposm {

void Adam::step(ad::ParameterSet& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto* p : params.all()) {
    if (p->grad.size() != p->value.size()) continue;
    auto& m = moments_[p->name];
    if (m.first.size() != p->value.size()) {
      m.first = ad::Matrix::Zero(p->value.rows(), p->value.cols());
      m.second = ad::Matrix::Zero(p->value.rows(), p->value.cols());
    }
    m.first = beta1_ * m.first + (1.0 - beta1_) * p->grad;
    m.second = beta2_ * m.second + (1.0 - beta2_) * p->grad.cwiseAbs2();
    p->value.array() -=
        lr_ * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + eps_);
  }
}

}  // namespace mposm
