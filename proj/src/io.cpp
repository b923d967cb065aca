#include "nmcmc/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "nmcmc/errors.hpp"

namespace nmcmc::io {

namespace {

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffU) << (8 * (7 - i));
    return r;
  }
}

std::filesystem::path temp_path(const std::filesystem::path& path) {
  return path.string() + ".tmp";
}

}  // namespace

void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const double> payload) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    const std::string line = header.dump();
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    std::vector<char> bytes(payload.size() * 8);
    for (std::size_t i = 0; i < payload.size(); ++i) {
      const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(payload[i]));
      std::memcpy(bytes.data() + 8 * i, &le, 8);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

FramedFile read_framed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header line");
  FramedFile f;
  try {
    f.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0)
    throw FormatError(path.string() + ": payload is not a whole number of doubles");
  f.payload.resize(bytes.size() / 8);
  for (std::size_t i = 0; i < f.payload.size(); ++i) {
    std::uint64_t le = 0;
    std::memcpy(&le, bytes.data() + 8 * i, 8);
    f.payload[i] = std::bit_cast<double>(to_little_endian(le));
  }
  return f;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace nmcmc::io
