#include "sotu/checkpoint_io.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "binio.hpp"

namespace sotu {

using detail::ByteReader;
using detail::ByteWriter;

std::string Fingerprint::hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : digest) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 15]);
  }
  return s;
}

std::size_t SparseDelta::num_kept() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.indices.size();
  return n;
}

std::size_t SparseDelta::num_coordinates() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

void SparseDelta::validate() const {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw Error(Errc::Format, "keep probability outside [0,1]");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    if (t.name.empty()) throw Error(Errc::Format, "empty tensor name");
    for (std::size_t j = 0; j < i; ++j) {
      if (tensors[j].name == t.name) throw Error(Errc::Format, "duplicate tensor '" + t.name + "'");
    }
    if (t.indices.size() != t.values.size()) {
      throw Error(Errc::Format, "tensor '" + t.name + "' index/value count mismatch");
    }
    const auto n = t.numel();
    for (std::size_t k = 0; k < t.indices.size(); ++k) {
      if (t.indices[k] >= n || (k > 0 && t.indices[k] <= t.indices[k - 1])) {
        throw Error(Errc::Format, "tensor '" + t.name + "' indices not strictly increasing in range");
      }
      if (!std::isfinite(t.values[k])) throw Error(Errc::NonFinite, "tensor '" + t.name + "'");
    }
  }
}

bool SparseDelta::bit_identical(const SparseDelta& other) const {
  if (base != other.base || seed != other.seed || tensors.size() != other.tensors.size() ||
      std::memcmp(&keep_prob, &other.keep_prob, sizeof(double)) != 0) {
    return false;
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& a = tensors[i];
    const auto& b = other.tensors[i];
    if (a.name != b.name || a.shape != b.shape || a.indices != b.indices ||
        a.values.size() != b.values.size() ||
        std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> serialize_paramset(const ParamSet& ps) {
  ByteWriter w;
  w.header(ArtifactKind::param_set, ps.size());
  for (const auto& e : ps) {
    w.str(e.name);
    detail::write_shape(w, e.tensor.shape());
    for (double v : e.tensor.values()) w.f64(v);
  }
  return w.take();
}

ParamSet deserialize_paramset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  const auto count = r.header(ArtifactKind::param_set);
  ParamSet ps;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = r.str();
    auto shape = detail::read_shape(r);
    const auto n = shape_numel(shape);
    r.need_elems(n, 8);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    try {
      ps.add(std::move(name), DenseTensor(std::move(shape), std::move(values)));
    } catch (const Error& e) {
      throw Error(Errc::Format, e.what());
    }
  }
  r.finish();
  return ps;
}

std::vector<std::uint8_t> serialize_sparse_delta(const SparseDelta& d) {
  ByteWriter w;
  w.header(ArtifactKind::sparse_delta, d.tensors.size());
  for (const auto& t : d.tensors) {
    w.str(t.name);
    detail::write_shape(w, t.shape);
    w.u64(t.indices.size());
    for (auto i : t.indices) w.u64(i);
    for (double v : t.values) w.f64(v);
  }
  w.bytes(d.base.digest.data(), d.base.digest.size());
  w.f64(d.keep_prob);
  w.u64(d.seed);
  return w.take();
}

SparseDelta deserialize_sparse_delta(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  const auto count = r.header(ArtifactKind::sparse_delta);
  SparseDelta d;
  for (std::uint64_t i = 0; i < count; ++i) {
    SparseTensor t;
    t.name = r.str();
    t.shape = detail::read_shape(r);
    const auto kept = r.u64();
    r.need_elems(kept, 16);
    t.indices.resize(kept);
    t.values.resize(kept);
    for (auto& idx : t.indices) idx = r.u64();
    for (auto& v : t.values) v = r.f64();
    d.tensors.push_back(std::move(t));
  }
  r.bytes(d.base.digest.data(), d.base.digest.size());
  d.keep_prob = r.f64();
  d.seed = r.u64();
  r.finish();
  try {
    d.validate();
  } catch (const Error& e) {
    throw Error(Errc::Format, e.what());
  }
  return d;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Errc::Io, "read failed for '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

void save_paramset(const ParamSet& ps, const std::filesystem::path& path) {
  write_file(path, serialize_paramset(ps));
}

ParamSet load_paramset(const std::filesystem::path& path) {
  return deserialize_paramset(read_file(path));
}

void save_sparse_delta(const SparseDelta& d, const std::filesystem::path& path) {
  write_file(path, serialize_sparse_delta(d));
}

SparseDelta load_sparse_delta(const std::filesystem::path& path) {
  return deserialize_sparse_delta(read_file(path));
}

Fingerprint fingerprint(const ParamSet& ps) {
  const auto bytes = serialize_paramset(ps);
  Fingerprint fp;
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), fp.digest.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != fp.digest.size()) {
    throw Error(Errc::Internal, "SHA-256 digest failed");
  }
  return fp;
}

}  // namespace sotu
