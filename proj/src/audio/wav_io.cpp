#include "stemdiff/audio/wav_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "stemdiff/core/error.hpp"

namespace stemdiff::audio {

namespace {

std::uint32_t read_u32(const char* p) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24;
}

std::uint16_t read_u16(const char* p) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                    static_cast<unsigned char>(p[1]) << 8);
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

void put_u16(std::ofstream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

}  // namespace

MonoAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(where + ": not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t channels = 0;
  std::uint16_t bits = 0;
  std::uint16_t format = 0;
  MonoAudio audio;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw FormatError(where + ": truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(where + ": short fmt chunk");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      audio.sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(where + ": data chunk before fmt chunk");
      if (format != 1 || bits != 16 || channels != 1) {
        throw FormatError(where + ": expected mono 16-bit PCM, got format " + std::to_string(format) + ", " +
                          std::to_string(channels) + " channel(s), " + std::to_string(bits) + " bits");
      }
      const std::size_t n = size / 2;
      audio.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto raw = static_cast<std::int16_t>(read_u16(bytes.data() + body + 2 * i));
        audio.samples[i] = static_cast<float>(raw) / 32768.0f;
      }
      if (audio.sample_rate <= 0) throw FormatError(where + ": invalid sample rate");
      return audio;
    }
    pos = body + size + (size & 1);
  }
  throw FormatError(where + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const std::vector<float>& samples, int sample_rate) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, data_bytes);
  for (float s : samples) {
    const float clipped = std::clamp(s, -1.0f, 1.0f);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32767.0f))));
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace stemdiff::audio
