#ifndef VIRDA_OPTIM_HPP_
#define VIRDA_OPTIM_HPP_

#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "virda/parameter.hpp"

namespace virda {

/// AdamW with decoupled weight decay and per-parameter step counts.
template <typename Scalar>
class AdamW {
 public:
  struct Group {
    std::string name;
    double lr = 1e-3;
    ParamList<Scalar> params;
  };

  AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.0);

  /// Updates every parameter, or only those in `active` when given. Skipped
  /// parameters keep their values and moment estimates.
  void step(const std::unordered_set<const Parameter<Scalar>*>* active = nullptr);

  const std::vector<Group>& groups() const { return groups_; }
  double beta1, beta2, eps, weight_decay;

 private:
  struct State {
    RowMatrix<Scalar> m, v;
    long t = 0;
  };
  std::vector<Group> groups_;
  std::unordered_map<const Parameter<Scalar>*, State> state_;
};

}  // namespace virda

#endif  // VIRDA_OPTIM_HPP_
