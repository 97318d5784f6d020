#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace medseg {

/// Whole-file read; throws IoError naming the path.
std::string read_file(const std::filesystem::path& path);

/// Writes `<path>.tmp` then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace medseg
