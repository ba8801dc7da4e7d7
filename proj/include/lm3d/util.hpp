#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>

#include "json.hpp"

namespace lm3d {

using json = nlohmann::json;

/// SHA-1 of "blob <size>\0<bytes>", i.e. the id git assigns to the content.
std::string git_blob_sha1(std::string_view bytes);
std::string file_sha1(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Reads a JSON document; throws ConfigNotFound / ConfigInvalid.
json read_json_file(const std::filesystem::path& path);

/// Child generator for an (a, b, c) index path under a base seed. Parallel
/// and serial callers obtain identical streams.
std::mt19937_64 child_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace lm3d
