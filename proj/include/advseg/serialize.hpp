#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "advseg/tensor.hpp"

namespace advseg {

// SSTN1 container: the 5-byte magic "SSTN1", rank as u32, one u32 per
// extent, then the payload as little-endian f64 in row-major order.
// All integers are little-endian.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes `content` to `path` in binary mode, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace advseg
