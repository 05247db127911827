#include "sotu/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <string>

#include "binio.hpp"
#include "sotu/rng.hpp"

namespace sotu {

Nonlinearity parse_nonlinearity(std::string_view s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "none") return Nonlinearity::none;
  throw Error(Errc::InvalidArgument, "unknown nonlinearity '" + std::string(s) + "'");
}

const char* to_string(Nonlinearity n) noexcept { return n == Nonlinearity::relu ? "relu" : "none"; }

DenseTensor make_projection(const ProjectionSpec& spec, std::size_t in_dim) {
  if (in_dim == 0 || spec.out_dim == 0) {
    throw Error(Errc::InvalidArgument, "projection dimensions must be positive");
  }
  Rng rng(spec.seed);
  std::vector<double> p(spec.out_dim * in_dim);
  for (auto& v : p) v = rng.normal();
  return DenseTensor({spec.out_dim, in_dim}, std::move(p));
}

Projection build_projection(const ProjectionSpec& spec, std::size_t in_dim) {
  return Projection{spec, make_projection(spec, in_dim)};
}

std::vector<double> project(const Projection& proj, std::span<const double> embedding) {
  const auto rows = proj.matrix.shape()[0];
  const auto cols = proj.matrix.shape()[1];
  if (embedding.size() != cols) {
    throw Error(Errc::ShapeMismatch, "projection expects " + std::to_string(cols) +
                                         " inputs, got " + std::to_string(embedding.size()));
  }
  auto p = proj.matrix.values();
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += p[i * cols + j] * embedding[j];
    out[i] = proj.spec.nonlinearity == Nonlinearity::relu ? std::max(s, 0.0) : s;
  }
  return out;
}

std::vector<double> feature_batch(const ParamSet& backbone, Activation act,
                                  std::span<const double> rows, std::size_t n,
                                  const Projection* proj) {
  auto emb = embed_batch(backbone, act, rows, n);
  if (!proj) return emb;
  const std::size_t e = emb.size() / n;
  std::vector<double> out;
  out.reserve(n * proj->spec.out_dim);
  for (std::size_t r = 0; r < n; ++r) {
    auto f = project(*proj, std::span<const double>(emb).subspan(r * e, e));
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

std::vector<double> feature(const ParamSet& backbone, Activation act, std::span<const double> x,
                            const Projection* proj) {
  return feature_batch(backbone, act, x, 1, proj);
}

bool PrototypeSet::contains(ClassId id) const noexcept {
  return std::find(class_ids_.begin(), class_ids_.end(), id) != class_ids_.end();
}

void PrototypeSet::set_projection(std::optional<ProjectionSpec> spec) {
  if (!empty() && projection_ != spec) {
    throw Error(Errc::InvalidArgument, "prototype set already uses a different projection");
  }
  projection_ = spec;
}

void PrototypeSet::add(ClassId id, std::vector<double> prototype) {
  if (contains(id)) {
    throw Error(Errc::ClassCollision, "class " + std::to_string(id) + " already has a prototype");
  }
  if (prototype.empty()) throw Error(Errc::InvalidArgument, "empty prototype");
  if (empty()) {
    feature_dim_ = prototype.size();
  } else if (prototype.size() != feature_dim_) {
    throw Error(Errc::ShapeMismatch, "prototype dimension " + std::to_string(prototype.size()) +
                                         " vs " + std::to_string(feature_dim_));
  }
  for (double v : prototype) {
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "prototype is not finite");
  }
  class_ids_.push_back(id);
  prototypes_.insert(prototypes_.end(), prototype.begin(), prototype.end());
}

bool PrototypeSet::bit_identical(const PrototypeSet& other) const {
  return class_ids_ == other.class_ids_ && feature_dim_ == other.feature_dim_ &&
         projection_ == other.projection_ && prototypes_.size() == other.prototypes_.size() &&
         std::memcmp(prototypes_.data(), other.prototypes_.data(),
                     prototypes_.size() * sizeof(double)) == 0;
}

std::vector<std::size_t> select_buffer(const LabeledDataset& data, std::size_t buffer_per_class,
                                       std::uint64_t seed) {
  if (buffer_per_class == 0) throw Error(Errc::InvalidArgument, "buffer_per_class must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::size_t> taken(data.classes().size(), 0);
  std::vector<std::size_t> rows;
  for (auto r : order) {
    auto& t = taken[data.class_index(data.label(r))];
    if (t < buffer_per_class) {
      ++t;
      rows.push_back(r);
    }
  }
  return rows;
}

void build_prototypes(PrototypeSet& protos, const ParamSet& backbone, Activation act,
                      const LabeledDataset& data, std::size_t buffer_per_class,
                      const Projection* proj, std::uint64_t seed) {
  for (auto c : data.classes()) {
    if (protos.contains(c)) {
      throw Error(Errc::ClassCollision, "class " + std::to_string(c) + " recurs across tasks");
    }
  }
  std::optional<ProjectionSpec> spec;
  if (proj) spec = proj->spec;
  if (!protos.empty() && protos.projection() != spec) {
    throw Error(Errc::InvalidArgument, "prototype set already uses a different projection");
  }

  const auto rows = select_buffer(data, buffer_per_class, seed);
  const auto buffer = data.subset(rows);
  const auto feats = feature_batch(backbone, act, buffer.features(), buffer.size(), proj);
  const std::size_t dim = feats.size() / buffer.size();

  const auto& classes = data.classes();
  std::vector<std::vector<double>> sums(classes.size(), std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(classes.size(), 0);
  for (std::size_t r = 0; r < buffer.size(); ++r) {
    const auto ci = data.class_index(buffer.label(r));
    ++counts[ci];
    for (std::size_t j = 0; j < dim; ++j) sums[ci][j] += feats[r * dim + j];
  }
  PrototypeSet staged = protos;
  staged.set_projection(spec);
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    if (counts[ci] == 0) {
      throw Error(Errc::InvalidArgument, "class " + std::to_string(classes[ci]) + " has no examples");
    }
    for (auto& v : sums[ci]) v /= static_cast<double>(counts[ci]);
    staged.add(classes[ci], std::move(sums[ci]));
  }
  protos = std::move(staged);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

ClassId ncm_predict(const PrototypeSet& protos, std::span<const double> feature) {
  if (protos.empty()) throw Error(Errc::EmptyPrototypeSet, "no prototypes to compare against");
  if (feature.size() != protos.feature_dim()) {
    throw Error(Errc::ShapeMismatch, "feature has " + std::to_string(feature.size()) +
                                         " entries, prototypes have " +
                                         std::to_string(protos.feature_dim()));
  }
  if (std::all_of(feature.begin(), feature.end(), [](double v) { return v == 0.0; })) {
    throw Error(Errc::ZeroFeature, "cosine similarity undefined for a zero feature");
  }
  const auto& ids = protos.class_ids();
  ClassId best_id = ids[0];
  double best = cosine_similarity(feature, protos.prototype(0));
  for (std::size_t i = 1; i < ids.size(); ++i) {
    const double c = cosine_similarity(feature, protos.prototype(i));
    if (c > best || (c == best && ids[i] < best_id)) {
      best = c;
      best_id = ids[i];
    }
  }
  return best_id;
}

// .protos layout after the shared header (entry count = number of classes):
//   u64 feature_dim, then per class: i64 id, f64 values[feature_dim],
//   then u8 has_projection, u64 out_dim, u64 seed, u8 nonlinearity.
void save_prototypes(const PrototypeSet& protos, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.header(ArtifactKind::prototypes, protos.size());
  w.u64(protos.feature_dim());
  for (std::size_t i = 0; i < protos.size(); ++i) {
    w.i64(protos.class_ids()[i]);
    for (double v : protos.prototype(i)) w.f64(v);
  }
  const auto& p = protos.projection();
  w.u8(p ? 1 : 0);
  w.u64(p ? p->out_dim : 0);
  w.u64(p ? p->seed : 0);
  w.u8(p ? static_cast<std::uint8_t>(p->nonlinearity) : 0);
  write_file(path, w.take());
}

PrototypeSet load_prototypes(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  detail::ByteReader r(bytes);
  const auto count = r.header(ArtifactKind::prototypes);
  const auto dim = r.u64();
  if (count > 0 && dim == 0) throw Error(Errc::Format, "zero feature dimension");
  std::vector<std::pair<ClassId, std::vector<double>>> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = r.i64();
    r.need_elems(dim, 8);
    std::vector<double> v(dim);
    for (auto& x : v) x = r.f64();
    entries.emplace_back(id, std::move(v));
  }
  const bool has_proj = r.u8() != 0;
  ProjectionSpec spec;
  spec.out_dim = r.u64();
  spec.seed = r.u64();
  const auto nl = r.u8();
  if (nl > 1) throw Error(Errc::Format, "unknown nonlinearity code");
  spec.nonlinearity = static_cast<Nonlinearity>(nl);
  r.finish();

  PrototypeSet protos;
  try {
    protos.set_projection(has_proj ? std::optional<ProjectionSpec>(spec) : std::nullopt);
    for (auto& [id, v] : entries) protos.add(id, std::move(v));
  } catch (const Error& e) {
    throw Error(Errc::Format, e.what());
  }
  return protos;
}

}  // namespace sotu
