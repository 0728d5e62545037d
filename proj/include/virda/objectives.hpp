#ifndef VIRDA_OBJECTIVES_HPP_
#define VIRDA_OBJECTIVES_HPP_

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

inline constexpr double kProbEps = 1e-7;
inline constexpr double kVarianceFloor = 1e-6;

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean cross-entropy of probability rows against integer labels.
/// When `dprobs` is given it receives dL/dprobs (overwritten).
template <typename Scalar>
Scalar loss_sup(const RowMatrix<Scalar>& probs, const std::vector<int>& labels,
                RowMatrix<Scalar>* dprobs = nullptr);

/// Discriminator binary cross-entropy, source labelled 1 and target 0:
///   -mean(log d_s) - mean(log(1 - d_t)).
template <typename Scalar>
Scalar loss_adv(const Vector<Scalar>& d_s, const Vector<Scalar>& d_t, Vector<Scalar>* dd_s = nullptr,
                Vector<Scalar>* dd_t = nullptr);

/// Per-cell sample mean and unbiased variance of M probability matrices.
template <typename Scalar>
struct UncertaintyEstimate {
  RowMatrix<Scalar> mean;
  RowMatrix<Scalar> var;
  int passes = 0;
};

template <typename Scalar>
struct UncertaintyGrad {
  RowMatrix<Scalar> dmean;
  RowMatrix<Scalar> dvar;
};

template <typename Scalar>
UncertaintyEstimate<Scalar> summarize_passes(const std::vector<RowMatrix<Scalar>>& samples);

/// dL/dp_m for every pass given dL/dmean and dL/dvar.
template <typename Scalar>
std::vector<RowMatrix<Scalar>> summarize_passes_backward(
    const std::vector<RowMatrix<Scalar>>& samples, const UncertaintyEstimate<Scalar>& estimate,
    const UncertaintyGrad<Scalar>& grad);

/// Runs `pass` M times, each with an independent generator derived from `seed`.
template <typename Scalar>
UncertaintyEstimate<Scalar> estimate_uncertainty(
    const std::function<RowMatrix<Scalar>(Rng&)>& pass, int passes, std::uint64_t seed);

/// KL(N(mu_a, var_a + eps) || N(mu_b, var_b + eps)) for one cell.
double gaussian_kl(double mu_a, double var_a, double mu_b, double var_b);

/// Cell-averaged Gaussian KL between source and target estimates paired by
/// batch index. With `aggregate` the estimates are first averaged over the
/// batch and the KL is averaged over classes only.
template <typename Scalar>
Scalar loss_unc(const UncertaintyEstimate<Scalar>& q_s, const UncertaintyEstimate<Scalar>& q_t,
                UncertaintyGrad<Scalar>* dq_s = nullptr, UncertaintyGrad<Scalar>* dq_t = nullptr,
                bool aggregate = false);

/// Mean row KL(p_weak || p_strong); p_weak is treated as constant.
template <typename Scalar>
Scalar loss_distrib(const RowMatrix<Scalar>& p_weak, const RowMatrix<Scalar>& p_strong,
                    RowMatrix<Scalar>* dstrong = nullptr);

template <typename Scalar>
struct UnsupResult {
  Scalar value = 0;
  int kept = 0;
};

/// Confidence-filtered pseudo-label cross-entropy.
template <typename Scalar>
UnsupResult<Scalar> loss_unsup(const RowMatrix<Scalar>& p_weak, const RowMatrix<Scalar>& p_strong,
                               double tau, RowMatrix<Scalar>* dstrong = nullptr);

/// Argmax with ties resolved to the lowest index.
template <typename Derived>
int argmax_row(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = static_cast<int>(c);
  return best;
}

enum class LossTerm { sup, adv, unc, unsup, distrib };
inline constexpr LossTerm kAllTerms[] = {LossTerm::sup, LossTerm::adv, LossTerm::unc,
                                         LossTerm::unsup, LossTerm::distrib};
std::string to_string(LossTerm t);

/// Which objectives take part in a step, and whether the reprogramming layers
/// are in the cascade at all (off for the source-only baseline).
struct LossMask {
  bool sup = true;
  bool adv = true;
  bool unc = true;
  bool unsup = true;
  bool distrib = true;
  bool use_vr = true;

  bool enabled(LossTerm t) const;
  bool any_target() const { return adv || unc || unsup || distrib; }
  bool any_intra() const { return unsup || distrib; }
  /// Comma list of enabled terms, or "source_only".
  std::string str() const;
  bool operator==(const LossMask&) const = default;

  static LossMask full() { return {}; }
  static LossMask source_only() { return {true, false, false, false, false, false}; }
  /// Accepts "all"/"full", "source_only", "inter", "intra" and comma lists of
  /// sup, adv, unc, unsup, distrib (e.g. "inter,unsup").
  static LossMask parse(const std::string& text);
};

struct LossWeights {
  double sup = 1.0;
  double adv = 1.0;
  double unc = 1.0;
  double unsup = 1.0;
  double distrib = 1.0;
  double of(LossTerm t) const;
};

struct LossParts {
  double sup = 0.0;
  double adv = 0.0;
  double unc = 0.0;
  double unsup = 0.0;
  double distrib = 0.0;
  int kept = 0;
  double of(LossTerm t) const;
};

struct LossReport {
  double sup = 0.0;
  double adv = 0.0;
  double unc = 0.0;
  double inter = 0.0;
  double unsup = 0.0;
  double distrib = 0.0;
  double intra = 0.0;
  double total = 0.0;
  int kept = 0;
  LossMask mask;
};

/// Weighted sums of the enabled parts; throws NonFiniteLoss naming the first
/// non-finite enabled part.
LossReport total_losses(const LossParts& parts, const LossMask& mask = {},
                        const LossWeights& weights = {});

}  // namespace virda

#endif  // VIRDA_OBJECTIVES_HPP_
