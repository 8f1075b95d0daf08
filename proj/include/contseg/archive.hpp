#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "contseg/synth.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

// Raw tensor file: magic, rank, little-endian extents, little-endian doubles.
void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor_file(const std::filesystem::path& path);

// Hash of the canonical spec manifest text; archives are content-addressed
// by this value, which is what makes regeneration idempotent.
std::uint64_t spec_hash(const DomainSpec& spec);

// Canonical key = value manifest for one domain directory. The full form
// appends the ordered subject-id lists of both splits, so loading an archive
// reproduces the exact sample order of in-memory generation.
std::string spec_manifest_text(const DomainSpec& spec, int n_train, int n_test);
std::string domain_manifest_text(const DomainSpec& spec);
DomainSpec parse_spec_manifest(const std::string& text);

// True when the directory already holds a complete archive whose manifest
// matches the spec; computable without generating any volumes.
bool domain_archive_up_to_date(const std::filesystem::path& dir,
                               const DomainSpec& spec);

// Writes <dir>/<spec.name>/ with manifest.txt plus per-subject image/label
// tensor files under train/ and test/. Returns false when an archive with a
// matching spec hash and complete file set is already in place (no bytes
// rewritten), true when it wrote the domain.
bool write_domain_archive(const std::filesystem::path& dir, const Domain& domain);

Domain read_domain_archive(const std::filesystem::path& dir,
                           const std::string& name);

// Convenience loops over a cohort. read_archive preserves the given order.
int write_archive(const std::filesystem::path& dir,
                  const std::vector<Domain>& domains);
std::vector<Domain> read_archive(const std::filesystem::path& dir,
                                 const std::vector<std::string>& names);

}  // namespace contseg
