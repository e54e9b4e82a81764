#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace iclgd {

// 17 significant digits (bit-faithful round trip), '.' decimal regardless of
// locale.
std::string format_double(double x);

// SHA-1 of "blob <len>\0<content>", i.e. what `git hash-object` prints.
std::string git_blob_hash(std::string_view content);

void write_text_file(const std::filesystem::path& path, std::string_view content);
std::string read_text_file(const std::filesystem::path& path);

// Independent stream seed for (seed, index); splitmix64 finalizer.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace iclgd
