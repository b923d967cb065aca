#pragma once

// Framed binary files: one compact JSON header line terminated by '\n',
// followed by a payload of little-endian IEEE-754 doubles. Checkpoints,
// datasets and the field-basis cache all use this layout.

#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace nmcmc::io {

struct FramedFile {
  nlohmann::json header;
  std::vector<double> payload;
};

/// Writes atomically (temp file + rename).
void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const double> payload);

/// Throws FormatError for a missing file, malformed header, or a payload
/// whose byte length is not a multiple of 8.
FramedFile read_framed(const std::filesystem::path& path);

/// Writes text atomically.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace nmcmc::io
