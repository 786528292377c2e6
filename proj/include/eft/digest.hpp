#pragma once

#include <string>
#include <string_view>

namespace eft {

std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's full contents; throws IoError when unreadable.
std::string file_sha256(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace eft
