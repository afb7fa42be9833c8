#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "despk/io_util.hpp"

namespace despk {

struct WavData {
  int sample_rate = 0;
  std::vector<double> samples;  // mono, scaled to [-1, 1)
};

namespace detail {

inline std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void wr_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void wr_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

/// Reads a 16-bit PCM mono RIFF/WAVE file.
inline WavData read_wav(const std::string& path) {
  std::string raw = read_text_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  const std::size_t n = raw.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw std::runtime_error(path + ": not a RIFF/WAVE file");

  WavData wav;
  int channels = 0, bits = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const char* id = raw.data() + pos;
    std::uint32_t size = detail::rd_u32(p + pos + 4);
    pos += 8;
    if (pos + size > n) throw std::runtime_error(path + ": truncated chunk");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16) throw std::runtime_error(path + ": short fmt chunk");
      std::uint16_t format = detail::rd_u16(p + pos);
      channels = detail::rd_u16(p + pos + 2);
      wav.sample_rate = static_cast<int>(detail::rd_u32(p + pos + 4));
      bits = detail::rd_u16(p + pos + 14);
      if (format != 1) throw std::runtime_error(path + ": only PCM (format 1) supported");
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error(path + ": data chunk before fmt");
      if (channels != 1) throw std::runtime_error(path + ": expected mono, got " +
                                                  std::to_string(channels) + " channels");
      if (bits != 16) throw std::runtime_error(path + ": expected 16-bit samples");
      std::size_t count = size / 2;
      wav.samples.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        auto v = static_cast<std::int16_t>(detail::rd_u16(p + pos + 2 * i));
        wav.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return wav;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }
  throw std::runtime_error(path + ": no data chunk found");
}

/// Writes samples (clipped to [-1, 1]) as 16-bit PCM mono.
inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
  std::string out;
  out.reserve(44 + samples.size() * 2);
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out += "RIFF";
  detail::wr_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::wr_u32(out, 16);
  detail::wr_u16(out, 1);  // PCM
  detail::wr_u16(out, 1);  // mono
  detail::wr_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::wr_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
  detail::wr_u16(out, 2);   // block align
  detail::wr_u16(out, 16);  // bits
  out += "data";
  detail::wr_u32(out, data_bytes);
  for (double s : samples) {
    double c = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
    auto v = static_cast<std::int16_t>(std::lrint(c * 32767.0));
    detail::wr_u16(out, static_cast<std::uint16_t>(v));
  }
  write_text_file(path, out);
}

}  // namespace despk
