#include "virda/optim.hpp"

#include <cmath>

namespace virda {

template <typename Scalar>
AdamW<Scalar>::AdamW(std::vector<Group> groups, double b1, double b2, double e, double wd)
    : beta1(b1), beta2(b2), eps(e), weight_decay(wd), groups_(std::move(groups)) {
  std::unordered_set<const Parameter<Scalar>*> seen;
  for (const auto& g : groups_) {
    if (!(g.lr > 0.0)) throw ConfigError("optimizer group '" + g.name + "' needs a positive lr");
    for (const auto* p : g.params) {
      if (!seen.insert(p).second)
        throw ConfigError("parameter '" + p->name + "' appears in more than one optimizer group");
    }
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(const std::unordered_set<const Parameter<Scalar>*>* active) {
  for (auto& g : groups_) {
    for (auto* p : g.params) {
      if (active != nullptr && active->count(p) == 0) continue;
      State& s = state_[p];
      if (s.t == 0) {
        s.m = RowMatrix<Scalar>::Zero(p->value.rows(), p->value.cols());
        s.v = RowMatrix<Scalar>::Zero(p->value.rows(), p->value.cols());
      }
      s.t += 1;
      const Scalar lr = static_cast<Scalar>(g.lr);
      const Scalar b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
      p->value *= Scalar(1) - lr * static_cast<Scalar>(weight_decay);
      s.m = b1 * s.m + (Scalar(1) - b1) * p->grad;
      s.v = b2 * s.v + (Scalar(1) - b2) * p->grad.cwiseAbs2();
      const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(beta1, s.t));
      const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(beta2, s.t));
      p->value.array() -=
          lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + static_cast<Scalar>(eps));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace virda
