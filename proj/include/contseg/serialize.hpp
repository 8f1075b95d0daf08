#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace contseg {

// Little-endian binary primitives shared by the checkpoint and dataset
// formats. Writers emit LE bytes explicitly so files are identical across
// hosts; readers validate stream health and throw IoError on short reads.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, const void* data, std::size_t n);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_bytes(std::istream& is, void* data, std::size_t n);
std::string read_string(std::istream& is);

// Writes content to path atomically (temp file + rename).
void atomic_write_file(const std::filesystem::path& path,
                       const std::string& content);

// Whole-file read; IoError when missing/unreadable.
std::string read_file(const std::filesystem::path& path);

// FNV-1a 64-bit hash, printed as 16 lowercase hex digits elsewhere.
std::uint64_t fnv1a64(std::string_view text);
std::string hash_hex(std::uint64_t hash);

// Canonical double formatting used by every text artifact: %.17g, which
// round-trips IEEE doubles exactly.
std::string format_double(double v);
double parse_double(const std::string& text);

}  // namespace contseg
