#include "virda/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace virda {

namespace {

template <typename Scalar>
Scalar clamp_prob(Scalar p) {
  return std::max(p, static_cast<Scalar>(kProbEps));
}

void check_same(Index r1, Index c1, Index r2, Index c2, const char* what) {
  if (r1 != r2 || c1 != c2) {
    throw ConfigError(std::string(what) + ": shape mismatch (" + std::to_string(r1) + "x" +
                      std::to_string(c1) + " vs " + std::to_string(r2) + "x" +
                      std::to_string(c2) + ")");
  }
}

}  // namespace

template <typename Scalar>
Scalar loss_sup(const RowMatrix<Scalar>& probs, const std::vector<int>& labels,
                RowMatrix<Scalar>* dprobs) {
  const Index k = probs.rows();
  if (static_cast<Index>(labels.size()) != k) throw ConfigError("loss_sup: label count mismatch");
  if (k == 0) throw ConfigError("loss_sup: empty batch");
  if (dprobs != nullptr) dprobs->setZero(k, probs.cols());
  Scalar total = 0;
  for (Index i = 0; i < k; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probs.cols()) {
      throw ConfigError("loss_sup: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(probs.cols()) + ")");
    }
    const Scalar p = clamp_prob(probs(i, y));
    total -= std::log(p);
    if (dprobs != nullptr) (*dprobs)(i, y) = -Scalar(1) / (p * Scalar(k));
  }
  return total / Scalar(k);
}

template <typename Scalar>
Scalar loss_adv(const Vector<Scalar>& d_s, const Vector<Scalar>& d_t, Vector<Scalar>* dd_s,
                Vector<Scalar>* dd_t) {
  if (d_s.size() == 0 || d_t.size() == 0) throw ConfigError("loss_adv: empty batch");
  const Scalar ks = Scalar(d_s.size());
  const Scalar kt = Scalar(d_t.size());
  Scalar src = 0, tgt = 0;
  if (dd_s != nullptr) dd_s->resize(d_s.size());
  if (dd_t != nullptr) dd_t->resize(d_t.size());
  for (Index i = 0; i < d_s.size(); ++i) {
    const Scalar p = clamp_prob(d_s(i));
    src -= std::log(p);
    if (dd_s != nullptr) (*dd_s)(i) = -Scalar(1) / (p * ks);
  }
  for (Index i = 0; i < d_t.size(); ++i) {
    const Scalar q = clamp_prob(Scalar(1) - d_t(i));
    tgt -= std::log(q);
    if (dd_t != nullptr) (*dd_t)(i) = Scalar(1) / (q * kt);
  }
  return src / ks + tgt / kt;
}

template <typename Scalar>
UncertaintyEstimate<Scalar> summarize_passes(const std::vector<RowMatrix<Scalar>>& samples) {
  if (samples.size() < 2) throw ConfigError("uncertainty estimate needs at least 2 passes");
  const Scalar m = Scalar(samples.size());
  UncertaintyEstimate<Scalar> est;
  est.passes = static_cast<int>(samples.size());
  est.mean = RowMatrix<Scalar>::Zero(samples[0].rows(), samples[0].cols());
  for (const auto& s : samples) {
    check_same(s.rows(), s.cols(), est.mean.rows(), est.mean.cols(), "uncertainty passes");
    est.mean += s;
  }
  est.mean /= m;
  est.var = RowMatrix<Scalar>::Zero(est.mean.rows(), est.mean.cols());
  for (const auto& s : samples) est.var.array() += (s - est.mean).array().square();
  est.var /= (m - Scalar(1));
  return est;
}

template <typename Scalar>
std::vector<RowMatrix<Scalar>> summarize_passes_backward(
    const std::vector<RowMatrix<Scalar>>& samples, const UncertaintyEstimate<Scalar>& est,
    const UncertaintyGrad<Scalar>& grad) {
  const Scalar m = Scalar(samples.size());
  std::vector<RowMatrix<Scalar>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(grad.dmean / m +
                  ((s - est.mean).array() * grad.dvar.array() * (Scalar(2) / (m - Scalar(1))))
                      .matrix());
  }
  return out;
}

template <typename Scalar>
UncertaintyEstimate<Scalar> estimate_uncertainty(
    const std::function<RowMatrix<Scalar>(Rng&)>& pass, int passes, std::uint64_t seed) {
  if (passes < 2) throw ConfigError("uncertainty estimate needs M >= 2");
  std::vector<RowMatrix<Scalar>> samples;
  for (int m = 0; m < passes; ++m) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(m)));
    samples.push_back(pass(rng));
  }
  return summarize_passes(samples);
}

double gaussian_kl(double mu_a, double var_a, double mu_b, double var_b) {
  const double va = var_a + kVarianceFloor;
  const double vb = var_b + kVarianceFloor;
  const double diff = mu_a - mu_b;
  return 0.5 * (std::log(vb / va) + (va + diff * diff) / vb - 1.0);
}

namespace {

// KL of one cell and its partial derivatives w.r.t. (mu_a, var_a, mu_b, var_b).
template <typename Scalar>
Scalar kl_cell(Scalar mu_a, Scalar var_a, Scalar mu_b, Scalar var_b, Scalar g[4]) {
  const Scalar va = var_a + Scalar(kVarianceFloor);
  const Scalar vb = var_b + Scalar(kVarianceFloor);
  const Scalar diff = mu_a - mu_b;
  g[0] = diff / vb;
  g[1] = Scalar(0.5) * (Scalar(1) / vb - Scalar(1) / va);
  g[2] = -diff / vb;
  g[3] = Scalar(0.5) * (Scalar(1) / vb - (va + diff * diff) / (vb * vb));
  return Scalar(0.5) * (std::log(vb / va) + (va + diff * diff) / vb - Scalar(1));
}

}  // namespace

template <typename Scalar>
Scalar loss_unc(const UncertaintyEstimate<Scalar>& q_s, const UncertaintyEstimate<Scalar>& q_t,
                UncertaintyGrad<Scalar>* dq_s, UncertaintyGrad<Scalar>* dq_t, bool aggregate) {
  check_same(q_s.mean.rows(), q_s.mean.cols(), q_t.mean.rows(), q_t.mean.cols(), "loss_unc");
  check_same(q_s.var.rows(), q_s.var.cols(), q_s.mean.rows(), q_s.mean.cols(), "loss_unc");
  check_same(q_t.var.rows(), q_t.var.cols(), q_t.mean.rows(), q_t.mean.cols(), "loss_unc");
  const Index k = q_s.mean.rows();
  const Index c = q_s.mean.cols();
  if (k == 0 || c == 0) throw ConfigError("loss_unc: empty estimate");
  auto zero = [&](UncertaintyGrad<Scalar>* g) {
    if (g == nullptr) return;
    g->dmean.setZero(k, c);
    g->dvar.setZero(k, c);
  };
  zero(dq_s);
  zero(dq_t);
  Scalar total = 0;
  Scalar g[4];
  if (!aggregate) {
    const Scalar norm = Scalar(1) / Scalar(k * c);
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < c; ++j) {
        total += kl_cell(q_s.mean(i, j), q_s.var(i, j), q_t.mean(i, j), q_t.var(i, j), g);
        if (dq_s != nullptr) {
          dq_s->dmean(i, j) = g[0] * norm;
          dq_s->dvar(i, j) = g[1] * norm;
        }
        if (dq_t != nullptr) {
          dq_t->dmean(i, j) = g[2] * norm;
          dq_t->dvar(i, j) = g[3] * norm;
        }
      }
    }
    return total * norm;
  }
  const RowMatrix<Scalar> ms = q_s.mean.colwise().mean();
  const RowMatrix<Scalar> vs = q_s.var.colwise().mean();
  const RowMatrix<Scalar> mt = q_t.mean.colwise().mean();
  const RowMatrix<Scalar> vt = q_t.var.colwise().mean();
  const Scalar norm = Scalar(1) / Scalar(c);
  for (Index j = 0; j < c; ++j) {
    total += kl_cell(ms(0, j), vs(0, j), mt(0, j), vt(0, j), g);
    const Scalar spread = norm / Scalar(k);
    if (dq_s != nullptr) {
      dq_s->dmean.col(j).setConstant(g[0] * spread);
      dq_s->dvar.col(j).setConstant(g[1] * spread);
    }
    if (dq_t != nullptr) {
      dq_t->dmean.col(j).setConstant(g[2] * spread);
      dq_t->dvar.col(j).setConstant(g[3] * spread);
    }
  }
  return total * norm;
}

template <typename Scalar>
Scalar loss_distrib(const RowMatrix<Scalar>& p_weak, const RowMatrix<Scalar>& p_strong,
                    RowMatrix<Scalar>* dstrong) {
  check_same(p_weak.rows(), p_weak.cols(), p_strong.rows(), p_strong.cols(), "loss_distrib");
  const Index k = p_weak.rows();
  if (k == 0) throw ConfigError("loss_distrib: empty batch");
  if (dstrong != nullptr) dstrong->setZero(k, p_weak.cols());
  Scalar total = 0;
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < p_weak.cols(); ++j) {
      const Scalar pw = p_weak(i, j);
      if (pw <= Scalar(0)) continue;
      const Scalar ps = clamp_prob(p_strong(i, j));
      total += pw * (std::log(clamp_prob(pw)) - std::log(ps));
      if (dstrong != nullptr) (*dstrong)(i, j) = -pw / (ps * Scalar(k));
    }
  }
  return total / Scalar(k);
}

template <typename Scalar>
UnsupResult<Scalar> loss_unsup(const RowMatrix<Scalar>& p_weak, const RowMatrix<Scalar>& p_strong,
                               double tau, RowMatrix<Scalar>* dstrong) {
  check_same(p_weak.rows(), p_weak.cols(), p_strong.rows(), p_strong.cols(), "loss_unsup");
  const Index k = p_weak.rows();
  if (dstrong != nullptr) dstrong->setZero(k, p_weak.cols());
  std::vector<std::pair<Index, int>> kept;
  for (Index i = 0; i < k; ++i) {
    const int y = argmax_row(p_weak.row(i));
    if (p_weak(i, y) >= static_cast<Scalar>(tau)) kept.emplace_back(i, y);
  }
  UnsupResult<Scalar> out;
  out.kept = static_cast<int>(kept.size());
  if (kept.empty()) return out;
  const Scalar n = Scalar(kept.size());
  for (const auto& [i, y] : kept) {
    const Scalar ps = clamp_prob(p_strong(i, y));
    out.value -= std::log(ps);
    if (dstrong != nullptr) (*dstrong)(i, y) = -Scalar(1) / (ps * n);
  }
  out.value /= n;
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(LossTerm t) {
  switch (t) {
    case LossTerm::sup: return "sup";
    case LossTerm::adv: return "adv";
    case LossTerm::unc: return "unc";
    case LossTerm::unsup: return "unsup";
    case LossTerm::distrib: return "distrib";
  }
  return "?";
}

bool LossMask::enabled(LossTerm t) const {
  switch (t) {
    case LossTerm::sup: return sup;
    case LossTerm::adv: return adv;
    case LossTerm::unc: return unc;
    case LossTerm::unsup: return unsup;
    case LossTerm::distrib: return distrib;
  }
  return false;
}

std::string LossMask::str() const {
  if (!use_vr) return "source_only";
  std::string out;
  for (LossTerm t : kAllTerms) {
    if (!enabled(t)) continue;
    if (!out.empty()) out += ",";
    out += to_string(t);
  }
  return out.empty() ? "none" : out;
}

LossMask LossMask::parse(const std::string& text) {
  if (text == "source_only" || text == "source-only") return source_only();
  if (text == "all" || text == "full") return full();
  LossMask m{false, false, false, false, false, true};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item == "sup") {
      m.sup = true;
    } else if (item == "adv") {
      m.adv = true;
    } else if (item == "unc") {
      m.unc = true;
    } else if (item == "unsup") {
      m.unsup = true;
    } else if (item == "distrib") {
      m.distrib = true;
    } else if (item == "inter") {
      m.sup = m.adv = m.unc = true;
    } else if (item == "intra") {
      m.unsup = m.distrib = true;
    } else {
      throw ConfigError("unknown loss term '" + item +
                        "' (expected sup, adv, unc, unsup, distrib, inter, intra, all, "
                        "source_only)");
    }
  }
  if (!(m.sup || m.adv || m.unc || m.unsup || m.distrib))
    throw ConfigError("loss mask '" + text + "' enables no objective");
  return m;
}

double LossWeights::of(LossTerm t) const {
  switch (t) {
    case LossTerm::sup: return sup;
    case LossTerm::adv: return adv;
    case LossTerm::unc: return unc;
    case LossTerm::unsup: return unsup;
    case LossTerm::distrib: return distrib;
  }
  return 0.0;
}

double LossParts::of(LossTerm t) const {
  switch (t) {
    case LossTerm::sup: return sup;
    case LossTerm::adv: return adv;
    case LossTerm::unc: return unc;
    case LossTerm::unsup: return unsup;
    case LossTerm::distrib: return distrib;
  }
  return 0.0;
}

LossReport total_losses(const LossParts& parts, const LossMask& mask, const LossWeights& weights) {
  for (LossTerm t : kAllTerms) {
    if (mask.enabled(t) && !std::isfinite(parts.of(t))) {
      std::ostringstream msg;
      msg << "non-finite loss L_" << to_string(t) << " = " << parts.of(t);
      throw NonFiniteLoss(msg.str());
    }
  }
  auto term = [&](LossTerm t) { return mask.enabled(t) ? parts.of(t) : 0.0; };
  LossReport r;
  r.mask = mask;
  r.sup = term(LossTerm::sup);
  r.adv = term(LossTerm::adv);
  r.unc = term(LossTerm::unc);
  r.unsup = term(LossTerm::unsup);
  r.distrib = term(LossTerm::distrib);
  r.kept = mask.unsup ? parts.kept : 0;
  r.inter = weights.sup * r.sup + weights.adv * r.adv + weights.unc * r.unc;
  r.intra = weights.unsup * r.unsup + weights.distrib * r.distrib;
  r.total = r.inter + r.intra;
  return r;
}

#define VIRDA_INSTANTIATE_OBJECTIVES(S)                                                          \
  template S loss_sup(const RowMatrix<S>&, const std::vector<int>&, RowMatrix<S>*);             \
  template S loss_adv(const Vector<S>&, const Vector<S>&, Vector<S>*, Vector<S>*);              \
  template UncertaintyEstimate<S> summarize_passes(const std::vector<RowMatrix<S>>&);           \
  template std::vector<RowMatrix<S>> summarize_passes_backward(                                 \
      const std::vector<RowMatrix<S>>&, const UncertaintyEstimate<S>&,                          \
      const UncertaintyGrad<S>&);                                                               \
  template UncertaintyEstimate<S> estimate_uncertainty(                                         \
      const std::function<RowMatrix<S>(Rng&)>&, int, std::uint64_t);                           \
  template S loss_unc(const UncertaintyEstimate<S>&, const UncertaintyEstimate<S>&,             \
                      UncertaintyGrad<S>*, UncertaintyGrad<S>*, bool);                          \
  template S loss_distrib(const RowMatrix<S>&, const RowMatrix<S>&, RowMatrix<S>*);             \
  template UnsupResult<S> loss_unsup(const RowMatrix<S>&, const RowMatrix<S>&, double,          \
                                     RowMatrix<S>*);

VIRDA_INSTANTIATE_OBJECTIVES(float)
VIRDA_INSTANTIATE_OBJECTIVES(double)

#undef VIRDA_INSTANTIATE_OBJECTIVES

}  // namespace virda
