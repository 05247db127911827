#include "sotu/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "sotu/errors.hpp"

namespace sotu {

LabeledDataset::LabeledDataset(std::size_t dim, std::vector<double> features,
                               std::vector<ClassId> labels, std::vector<ClassId> classes)
    : dim_(dim), features_(std::move(features)), labels_(std::move(labels)),
      classes_(std::move(classes)) {
  if (dim_ == 0) throw Error(Errc::InvalidArgument, "dataset dimension must be positive");
  if (labels_.empty()) throw Error(Errc::EmptyBatch, "dataset has no rows");
  if (features_.size() != labels_.size() * dim_) {
    throw Error(Errc::ShapeMismatch, "feature matrix does not match " +
                                         std::to_string(labels_.size()) + " x " + std::to_string(dim_));
  }
  for (double v : features_) {
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "dataset feature is not finite");
  }
  if (classes_.empty()) classes_ = labels_;
  std::sort(classes_.begin(), classes_.end());
  classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
  for (auto l : labels_) {
    if (!std::binary_search(classes_.begin(), classes_.end(), l)) {
      throw Error(Errc::InvalidArgument, "label " + std::to_string(l) + " not in declared class set");
    }
  }
}

std::size_t LabeledDataset::class_index(ClassId label) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), label);
  if (it == classes_.end() || *it != label) {
    throw Error(Errc::InvalidArgument, "label " + std::to_string(label) + " not in class set");
  }
  return static_cast<std::size_t>(it - classes_.begin());
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  std::vector<double> f;
  std::vector<ClassId> l;
  f.reserve(rows.size() * dim_);
  l.reserve(rows.size());
  for (auto r : rows) {
    if (r >= size()) throw Error(Errc::InvalidArgument, "row index out of range");
    auto x = row(r);
    f.insert(f.end(), x.begin(), x.end());
    l.push_back(labels_[r]);
  }
  return LabeledDataset(dim_, std::move(f), std::move(l));
}

LabeledDataset concat(std::span<const LabeledDataset> parts) {
  if (parts.empty()) throw Error(Errc::EmptyList, "nothing to concatenate");
  const auto dim = parts.front().dim();
  std::vector<double> f;
  std::vector<ClassId> l;
  std::vector<ClassId> classes;
  for (const auto& p : parts) {
    if (p.dim() != dim) throw Error(Errc::ShapeMismatch, "datasets differ in dimension");
    f.insert(f.end(), p.features().begin(), p.features().end());
    l.insert(l.end(), p.labels().begin(), p.labels().end());
    classes.insert(classes.end(), p.classes().begin(), p.classes().end());
  }
  return LabeledDataset(dim, std::move(f), std::move(l), std::move(classes));
}

void save_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < ds.dim(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.row(i)) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << ds.label(i) << '\n';
  }
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

namespace {

template <class T>
T parse_number(std::string_view field, std::size_t line_no) {
  T v{};
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw Error(Errc::Format, "line " + std::to_string(line_no) + ": cannot parse '" +
                                  std::string(field) + "'");
  }
  return v;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

LabeledDataset load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::Format, "missing CSV header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_fields(line);
  if (header.size() < 2 || header.back() != "label") {
    throw Error(Errc::Format, "CSV header must be f0,...,f{d-1},label");
  }
  const std::size_t dim = header.size() - 1;
  for (std::size_t j = 0; j < dim; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw Error(Errc::Format, "unexpected CSV column '" + std::string(header[j]) + "'");
    }
  }
  std::vector<double> f;
  std::vector<ClassId> l;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != dim + 1) {
      throw Error(Errc::Format, "line " + std::to_string(line_no) + ": expected " +
                                    std::to_string(dim + 1) + " fields");
    }
    for (std::size_t j = 0; j < dim; ++j) f.push_back(parse_number<double>(fields[j], line_no));
    l.push_back(parse_number<ClassId>(fields[dim], line_no));
  }
  return LabeledDataset(dim, std::move(f), std::move(l));
}

}  // namespace sotu
