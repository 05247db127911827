#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sotu/sparse_delta.hpp"
#include "sotu/tensor.hpp"

// Container layout shared by every artifact (all integers little-endian):
//
//   "SOTU" | u8 version | u8 kind | u64 entry_count | entries... | trailer
//
// ParamSet entry:    u64 name_len, name, u64 rank, u64 dims[rank], f64 values[numel]
// SparseDelta entry: u64 name_len, name, u64 rank, u64 dims[rank],
//                    u64 kept, u64 indices[kept], f64 values[kept]
// SparseDelta trailer: 32-byte base fingerprint, f64 keep_prob, u64 seed
//
// Files end exactly after the last field; trailing bytes are a FormatError.

namespace sotu {

inline constexpr std::uint8_t kFormatVersion = 1;

enum class ArtifactKind : std::uint8_t { param_set = 0, sparse_delta = 1, prototypes = 2 };

std::vector<std::uint8_t> serialize_paramset(const ParamSet& ps);
ParamSet deserialize_paramset(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> serialize_sparse_delta(const SparseDelta& d);
SparseDelta deserialize_sparse_delta(const std::vector<std::uint8_t>& bytes);

void save_paramset(const ParamSet& ps, const std::filesystem::path& path);
ParamSet load_paramset(const std::filesystem::path& path);

void save_sparse_delta(const SparseDelta& d, const std::filesystem::path& path);
SparseDelta load_sparse_delta(const std::filesystem::path& path);

/// SHA-256 of serialize_paramset(ps).
Fingerprint fingerprint(const ParamSet& ps);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sotu
