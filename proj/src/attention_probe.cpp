#include "sotu/attention_probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "sotu/rng.hpp"

namespace sotu {

void AttentionInstance::validate() const {
  if (x.rank() != 2 || x.shape()[0] < 2) {
    throw Error(Errc::ShapeMismatch, "attention input must be [n,d] with n >= 2");
  }
  const auto d = x.shape()[1];
  for (const auto* w : {&w_q, &w_k, &w_v}) {
    if (w->rank() != 2 || w->shape()[0] != d) {
      throw Error(Errc::ShapeMismatch, "projection " + shape_str(w->shape()) + " vs input dim " +
                                           std::to_string(d));
    }
  }
  if (w_q.shape() != w_k.shape()) throw Error(Errc::ShapeMismatch, "W_Q and W_K differ in shape");
  if (dw_q.shape() != w_q.shape() || dw_k.shape() != w_k.shape() || dw_v.shape() != w_v.shape()) {
    throw Error(Errc::ShapeMismatch, "perturbation shapes do not match weights");
  }
}

DenseTensor attention_scores(const DenseTensor& x, const DenseTensor& w_q, const DenseTensor& w_k) {
  const auto q = matmul(x, w_q);
  const auto k = matmul(x, w_k);
  const double dk = static_cast<double>(w_q.shape()[1]);
  return scale(matmul(q, transpose(k)), 1.0 / std::sqrt(dk));
}

DenseTensor row_softmax(const DenseTensor& scores) {
  if (scores.rank() != 2) throw Error(Errc::ShapeMismatch, "softmax needs a rank-2 tensor");
  const auto rows = scores.shape()[0], cols = scores.shape()[1];
  auto s = scores.values();
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = s.data() + i * cols;
    const double m = *std::max_element(r, r + cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += (out[i * cols + j] = std::exp(r[j] - m));
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] /= sum;
  }
  return DenseTensor(scores.shape(), std::move(out));
}

DenseTensor attention_map(const AttentionInstance& inst) {
  inst.validate();
  return row_softmax(attention_scores(inst.x, inst.w_q, inst.w_k));
}

DenseTensor perturbed_attention_map(const AttentionInstance& inst) {
  inst.validate();
  return row_softmax(attention_scores(inst.x, ew_combine(inst.w_q, inst.dw_q, Combine::add),
                                      ew_combine(inst.w_k, inst.dw_k, Combine::add)));
}

BoundReport perturbation_bound_check(const AttentionInstance& inst) {
  inst.validate();
  const auto s = attention_scores(inst.x, inst.w_q, inst.w_k);
  const auto s_hat = attention_scores(inst.x, ew_combine(inst.w_q, inst.dw_q, Combine::add),
                                      ew_combine(inst.w_k, inst.dw_k, Combine::add));
  return bound_check_from_scores(s, s_hat);
}

BoundReport bound_check_from_scores(const DenseTensor& s, const DenseTensor& s_hat) {
  if (s.shape() != s_hat.shape()) throw Error(Errc::ShapeMismatch, "score matrices differ in shape");
  double ratio_min = std::numeric_limits<double>::infinity();
  double ratio_max = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = std::exp(s_hat[i] - s[i]);
    if (!std::isfinite(r) || r == 0.0) {
      throw Error(Errc::NonFinite, "score ratio overflows; perturbation too large");
    }
    ratio_min = std::min(ratio_min, r);
    ratio_max = std::max(ratio_max, r);
  }
  const auto a = row_softmax(s);
  const auto a_hat = row_softmax(s_hat);
  BoundReport rep;
  rep.delta_min = ratio_min - 1.0;
  rep.delta_max = ratio_max - 1.0;
  const double lo_factor = ratio_min / ratio_max;
  const double hi_factor = ratio_max / ratio_min;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double lo = lo_factor * a[i];
    const double hi = hi_factor * a[i];
    const double excursion = std::max({0.0, (lo - a_hat[i]) / a[i], (a_hat[i] - hi) / a[i]});
    rep.max_violation = std::max(rep.max_violation, excursion);
  }
  return rep;
}

namespace {

DenseTensor normal_tensor(Shape shape, double sd, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sd * rng.normal();
  return DenseTensor(std::move(shape), std::move(v));
}

double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

AttentionInstance random_attention_instance(std::size_t n, std::size_t d, std::size_t dk,
                                            double max_score_change, std::uint64_t seed) {
  Rng rng(seed);
  const double w_sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto x = normal_tensor({n, d}, 1.0, rng);
  auto wq = normal_tensor({d, dk}, w_sd, rng);
  auto wk = normal_tensor({d, dk}, w_sd, rng);
  auto wv = normal_tensor({d, dk}, w_sd, rng);
  const double p_sd = 0.05 * w_sd;
  auto dq = normal_tensor({d, dk}, p_sd, rng);
  auto dk_ = normal_tensor({d, dk}, p_sd, rng);
  auto dv = normal_tensor({d, dk}, p_sd, rng);
  AttentionInstance inst{std::move(x), std::move(wq), std::move(wk), std::move(wv),
                         std::move(dq), std::move(dk_), std::move(dv)};
  inst.validate();
  const auto s = attention_scores(inst.x, inst.w_q, inst.w_k);
  for (int guard = 0; guard < 64; ++guard) {
    const auto s_hat = attention_scores(inst.x, ew_combine(inst.w_q, inst.dw_q, Combine::add),
                                        ew_combine(inst.w_k, inst.dw_k, Combine::add));
    if (max_abs_diff(s, s_hat) <= max_score_change) return inst;
    inst.dw_q = scale(inst.dw_q, 0.5);
    inst.dw_k = scale(inst.dw_k, 0.5);
    inst.dw_v = scale(inst.dw_v, 0.5);
  }
  throw Error(Errc::Internal, "could not shrink perturbation below the score bound");
}

MaskProbe random_mask_probe(std::size_t n, std::size_t d, std::size_t dk, double delta_scale,
                            std::uint64_t seed) {
  Rng rng(seed);
  const double w_sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto x = normal_tensor({n, d}, 1.0, rng);
  auto bq = normal_tensor({d, dk}, w_sd, rng);
  auto bk = normal_tensor({d, dk}, w_sd, rng);
  auto bv = normal_tensor({d, dk}, w_sd, rng);
  auto fq = ew_combine(bq, normal_tensor({d, dk}, delta_scale * w_sd, rng), Combine::add);
  auto fk = ew_combine(bk, normal_tensor({d, dk}, delta_scale * w_sd, rng), Combine::add);
  auto fv = ew_combine(bv, normal_tensor({d, dk}, delta_scale * w_sd, rng), Combine::add);
  return MaskProbe{std::move(x), std::move(fq), std::move(fk), std::move(fv),
                   std::move(bq), std::move(bk), std::move(bv)};
}

namespace {

// Coordinates with mask value 1 keep the fine-tuned weight; the rest revert
// to the base. Selecting (rather than adding a masked delta) keeps both the
// all-kept and all-dropped cases bit-exact.
DenseTensor masked_weight(const DenseTensor& tuned, const DenseTensor& base, double keep,
                          std::uint64_t seed, std::uint64_t ordinal) {
  if (tuned.shape() != base.shape()) throw Error(Errc::ShapeMismatch, "weight vs base");
  std::vector<double> v(tuned.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = counter_uniform(seed, ordinal, i) < keep ? tuned[i] : base[i];
  }
  return DenseTensor(tuned.shape(), std::move(v));
}

}  // namespace

StabilitySummary mask_stability_report(const MaskProbe& probe, double mask_rate,
                                       std::uint64_t seed, std::size_t trials) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
    throw Error(Errc::InvalidProbability, "mask rate must lie in [0,1]");
  }
  if (trials == 0) throw Error(Errc::InvalidArgument, "at least one trial required");
  const double keep = 1.0 - mask_rate;
  const auto a = row_softmax(attention_scores(probe.x, probe.w_q, probe.w_k));
  StabilitySummary out;
  out.mask_rate = mask_rate;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto trial_seed = derive_seed(seed, t);
    const auto q = masked_weight(probe.w_q, probe.base_q, keep, trial_seed, 0);
    const auto k = masked_weight(probe.w_k, probe.base_k, keep, trial_seed, 1);
    const auto a_hat = row_softmax(attention_scores(probe.x, q, k));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a_hat[i] / a[i] - 1.0));
    if (!std::isfinite(worst)) throw Error(Errc::NonFinite, "attention ratio overflow");
    out.max_rel_change.push_back(worst);
  }
  double sum = 0.0;
  for (double v : out.max_rel_change) {
    sum += v;
    out.max = std::max(out.max, v);
  }
  out.mean = sum / static_cast<double>(trials);
  return out;
}

void write_stability_csv(std::span<const StabilitySummary> reports,
                         const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open '" + path.string() + "' for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "p,trial,max_rel_change\n";
  for (const auto& r : reports) {
    for (std::size_t t = 0; t < r.max_rel_change.size(); ++t) {
      out << r.mask_rate << ',' << t << ',' << r.max_rel_change[t] << '\n';
    }
    out << r.mask_rate << ",mean," << r.mean << '\n';
    out << r.mask_rate << ",max," << r.max << '\n';
  }
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

}  // namespace sotu
