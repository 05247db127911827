#include "sotu/delta_ops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "sotu/checkpoint_io.hpp"
#include "sotu/rng.hpp"

namespace sotu {

ParamSet compute_delta(const ParamSet& theta_ft, const ParamSet& theta_pre) {
  require_same_layout(theta_ft, theta_pre);
  ParamSet out;
  for (std::size_t i = 0; i < theta_ft.size(); ++i) {
    const auto& ft = theta_ft.entries()[i];
    out.add(ft.name, ew_combine(ft.tensor, theta_pre.entries()[i].tensor, Combine::sub));
  }
  return out;
}

SparseDelta mask_delta(const ParamSet& delta, double mask_rate, std::uint64_t seed,
                       const Fingerprint& base) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
    throw Error(Errc::InvalidProbability, "mask rate must lie in [0,1]");
  }
  const double keep = 1.0 - mask_rate;
  SparseDelta out;
  out.base = base;
  out.keep_prob = keep;
  out.seed = seed;
  std::uint64_t ordinal = 0;
  for (const auto& e : delta) {
    SparseTensor t;
    t.name = e.name;
    t.shape = e.tensor.shape();
    auto v = e.tensor.values();
    for (std::uint64_t i = 0; i < v.size(); ++i) {
      if (counter_uniform(seed, ordinal, i) < keep) {
        t.indices.push_back(i);
        t.values.push_back(v[i]);
      }
    }
    out.tensors.push_back(std::move(t));
    ++ordinal;
  }
  return out;
}

ParamSet to_dense(const SparseDelta& delta) {
  ParamSet out;
  for (const auto& t : delta.tensors) {
    std::vector<double> v(t.numel(), 0.0);
    for (std::size_t k = 0; k < t.indices.size(); ++k) v[t.indices[k]] = t.values[k];
    out.add(t.name, DenseTensor(t.shape, std::move(v)));
  }
  return out;
}

namespace {

void require_delta_layout(const SparseDelta& d, const ParamSet& ref) {
  if (d.tensors.size() != ref.size()) {
    throw Error(Errc::NameMismatch, "delta holds " + std::to_string(d.tensors.size()) +
                                        " tensors, base holds " + std::to_string(ref.size()));
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& e = ref.entries()[i];
    if (d.tensors[i].name != e.name) {
      throw Error(Errc::NameMismatch, "delta tensor '" + d.tensors[i].name + "' vs base '" + e.name + "'");
    }
    if (d.tensors[i].shape != e.tensor.shape()) {
      throw Error(Errc::ShapeMismatch, "delta tensor '" + e.name + "'");
    }
  }
}

void require_shared_layout(std::span<const SparseDelta> deltas) {
  const auto& first = deltas.front();
  for (const auto& d : deltas.subspan(1)) {
    if (d.base != first.base) throw Error(Errc::BaseMismatch, "deltas were computed against different bases");
    if (d.tensors.size() != first.tensors.size()) throw Error(Errc::NameMismatch, "delta tensor counts differ");
    for (std::size_t i = 0; i < d.tensors.size(); ++i) {
      if (d.tensors[i].name != first.tensors[i].name) {
        throw Error(Errc::NameMismatch, "tensor '" + d.tensors[i].name + "' vs '" + first.tensors[i].name + "'");
      }
      if (d.tensors[i].shape != first.tensors[i].shape) {
        throw Error(Errc::ShapeMismatch, "tensor '" + d.tensors[i].name + "'");
      }
    }
  }
}

double sparse_dot(const SparseTensor& a, const SparseTensor& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.indices.size() && j < b.indices.size()) {
    if (a.indices[i] < b.indices[j]) {
      ++i;
    } else if (b.indices[j] < a.indices[i]) {
      ++j;
    } else {
      s += a.values[i++] * b.values[j++];
    }
  }
  return s;
}

double delta_dot(const SparseDelta& a, const SparseDelta& b) {
  double s = 0.0;
  for (std::size_t t = 0; t < a.tensors.size(); ++t) s += sparse_dot(a.tensors[t], b.tensors[t]);
  return s;
}

}  // namespace

ParamSet merge_deltas(const ParamSet& theta_pre, std::span<const SparseDelta> deltas) {
  if (deltas.empty()) return theta_pre;
  const auto base = fingerprint(theta_pre);
  std::vector<std::vector<double>> acc;
  acc.reserve(theta_pre.size());
  for (const auto& e : theta_pre) acc.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
  for (const auto& d : deltas) {
    if (d.base != base) {
      throw Error(Errc::BaseMismatch, "delta base " + d.base.hex().substr(0, 12) +
                                          " does not match " + base.hex().substr(0, 12));
    }
    require_delta_layout(d, theta_pre);
    for (std::size_t t = 0; t < d.tensors.size(); ++t) {
      const auto& st = d.tensors[t];
      auto& a = acc[t];
      for (std::size_t k = 0; k < st.indices.size(); ++k) a[st.indices[k]] += st.values[k];
    }
  }
  ParamSet out;
  for (std::size_t t = 0; t < theta_pre.size(); ++t) {
    const auto& e = theta_pre.entries()[t];
    out.add(e.name, DenseTensor(e.tensor.shape(), std::move(acc[t])));
  }
  return out;
}

SquareMatrix delta_cosine_matrix(std::span<const SparseDelta> deltas) {
  if (deltas.empty()) throw Error(Errc::EmptyList, "no deltas");
  require_shared_layout(deltas);
  const std::size_t n = deltas.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = std::sqrt(delta_dot(deltas[i], deltas[i]));
    if (norms[i] == 0.0) {
      throw Error(Errc::ZeroDelta, "delta " + std::to_string(i + 1) + " is all zero; cosine undefined");
    }
  }
  SquareMatrix m(n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double c = delta_dot(deltas[i], deltas[j]) / (norms[i] * norms[j]);
      c = std::clamp(c, -1.0, 1.0);
      m(i, j) = c;
      m(j, i) = c;
    }
  }
  return m;
}

CollisionReport collision_report(std::span<const SparseDelta> deltas) {
  if (deltas.empty()) throw Error(Errc::EmptyList, "no deltas");
  require_shared_layout(deltas);
  const std::size_t n = deltas.size();
  CollisionReport r;
  r.pairwise_overlap = SquareMatrix(n);
  std::vector<std::size_t> pair_counts(n * n, 0);
  for (std::size_t t = 0; t < deltas.front().tensors.size(); ++t) {
    const auto numel = deltas.front().tensors[t].numel();
    r.coordinates += numel;
    std::vector<std::uint32_t> owners(numel, 0);
    for (std::size_t d = 0; d < n; ++d) {
      for (auto idx : deltas[d].tensors[t].indices) ++owners[idx];
    }
    for (auto c : owners) {
      if (c >= 1) ++r.kept_any;
      if (c >= 2) ++r.kept_multi;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = deltas[i].tensors[t].indices;
      pair_counts[i * n + i] += a.size();
      for (std::size_t j = i + 1; j < n; ++j) {
        const auto& b = deltas[j].tensors[t].indices;
        std::size_t x = 0, y = 0, shared = 0;
        while (x < a.size() && y < b.size()) {
          if (a[x] < b[y]) {
            ++x;
          } else if (b[y] < a[x]) {
            ++y;
          } else {
            ++shared;
            ++x;
            ++y;
          }
        }
        pair_counts[i * n + j] += shared;
      }
    }
  }
  const double total = static_cast<double>(r.coordinates);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double f = total > 0 ? static_cast<double>(pair_counts[i * n + j]) / total : 0.0;
      r.pairwise_overlap(i, j) = f;
      r.pairwise_overlap(j, i) = f;
    }
  }
  r.multi_collision_rate =
      r.kept_any == 0 ? 0.0 : static_cast<double>(r.kept_multi) / static_cast<double>(r.kept_any);
  return r;
}

double binomial_multi_collision_rate(std::size_t tasks, double keep_prob) {
  const double drop = 1.0 - keep_prob;
  const double t = static_cast<double>(tasks);
  const double none = std::pow(drop, t);
  const double exactly_one = t * keep_prob * std::pow(drop, t - 1.0);
  const double any = 1.0 - none;
  return any > 0.0 ? (any - exactly_one) / any : 0.0;
}

double mean_abs_off_diagonal(const SquareMatrix& m) {
  if (m.n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j)
      if (i != j) s += std::abs(m(i, j));
  return s / static_cast<double>(m.n * (m.n - 1));
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open '" + path.string() + "' for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  return out;
}

void write_matrix(std::ostream& out, const SquareMatrix& m) {
  out << "task";
  for (std::size_t j = 0; j < m.n; ++j) out << ',' << j + 1;
  out << '\n';
  for (std::size_t i = 0; i < m.n; ++i) {
    out << i + 1;
    for (std::size_t j = 0; j < m.n; ++j) out << ',' << m(i, j);
    out << '\n';
  }
}

}  // namespace

void write_matrix_csv(const SquareMatrix& m, const std::filesystem::path& path) {
  auto out = open_csv(path);
  write_matrix(out, m);
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

void write_collisions_csv(const CollisionReport& report, const std::filesystem::path& path) {
  auto out = open_csv(path);
  write_matrix(out, report.pairwise_overlap);
  out << "multi_collision_rate," << report.multi_collision_rate << '\n';
  out << "coordinates," << report.coordinates << '\n';
  out << "kept_any," << report.kept_any << '\n';
  out << "kept_multi," << report.kept_multi << '\n';
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

}  // namespace sotu
