// SPDX-License-Identifier: Apache-2.0
#include "voicy/wav.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <vector>

namespace voicy {
namespace {

static_assert(std::endian::native == std::endian::little,
              "WAV I/O assumes a little-endian host");

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
std::uint16_t le16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

void put32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xFF);
}
void put16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(v & 0xFF);
  out.push_back(v >> 8);
}
void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

}  // namespace

dsp::Waveform read_wav(const std::string& path, std::optional<int> expected_rate_hz) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_wav: cannot open " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: " + path + " is not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      if (std::memcmp(chunk, "data", 4) == 0) {
        data = bytes.data() + body;
        data_size = bytes.size() - body;
      }
      break;
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw std::runtime_error("read_wav: truncated fmt chunk in " + path);
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == kFormatExtensible && size >= 40) format = le16(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = size;
    }
    pos = body + size + (size & 1);
  }
  if (format == 0) throw std::runtime_error("read_wav: missing fmt chunk in " + path);
  if (!data) throw std::runtime_error("read_wav: missing data chunk in " + path);
  if (channels != 1)
    throw std::runtime_error("read_wav: " + path + " has " + std::to_string(channels) +
                             " channels; only mono is supported");
  if (expected_rate_hz && static_cast<int>(rate) != *expected_rate_hz)
    throw std::runtime_error("read_wav: " + path + " is sampled at " + std::to_string(rate) +
                             " Hz; expected " + std::to_string(*expected_rate_hz) +
                             " Hz (resampling is not supported)");

  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool pcm24 = format == kFormatPcm && bits == 24;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !pcm24 && !f32)
    throw std::runtime_error("read_wav: unsupported encoding (format " +
                             std::to_string(format) + ", " + std::to_string(bits) +
                             " bits) in " + path);

  const std::size_t width = bits / 8;
  const std::size_t n = data_size / width;
  dsp::Waveform wave;
  wave.sample_rate_hz = static_cast<int>(rate);
  wave.samples.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = data + i * width;
    double v = 0.0;
    if (pcm16) {
      v = static_cast<std::int16_t>(le16(p)) / 32768.0;
    } else if (pcm24) {
      std::int32_t s = std::int32_t(p[0]) | std::int32_t(p[1]) << 8 | std::int32_t(p[2]) << 16;
      if (s & 0x800000) s -= 0x1000000;
      v = s / 8388608.0;
    } else {
      float f;
      std::memcpy(&f, p, 4);
      v = f;
    }
    if (!std::isfinite(v)) throw std::runtime_error("read_wav: non-finite sample in " + path);
    wave.samples[static_cast<Eigen::Index>(i)] = v;
  }
  return wave;
}

void write_wav(const std::string& path, const dsp::Waveform& wave, WavEncoding encoding) {
  if (wave.sample_rate_hz <= 0) throw std::invalid_argument("write_wav: invalid sample rate");
  const std::uint16_t bits = encoding == WavEncoding::Pcm16   ? 16
                             : encoding == WavEncoding::Pcm24 ? 24
                                                              : 32;
  const std::uint16_t format = encoding == WavEncoding::Float32 ? kFormatFloat : kFormatPcm;
  const std::uint32_t width = bits / 8;
  const auto n = static_cast<std::uint32_t>(wave.size());
  const std::uint32_t data_size = n * width;

  std::vector<unsigned char> out;
  out.reserve(44 + data_size);
  put_tag(out, "RIFF");
  put32(out, 36 + data_size);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put32(out, 16);
  put16(out, format);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(wave.sample_rate_hz));
  put32(out, static_cast<std::uint32_t>(wave.sample_rate_hz) * width);
  put16(out, static_cast<std::uint16_t>(width));
  put16(out, bits);
  put_tag(out, "data");
  put32(out, data_size);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double v = wave.samples[i];
    if (!std::isfinite(v)) throw std::invalid_argument("write_wav: non-finite sample");
    if (encoding == WavEncoding::Float32) {
      const float f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      put32(out, u);
    } else if (encoding == WavEncoding::Pcm16) {
      const double c = std::clamp(v, -1.0, 32767.0 / 32768.0);
      put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
    } else {
      const double c = std::clamp(v, -1.0, 8388607.0 / 8388608.0);
      const auto s = static_cast<std::int32_t>(std::lround(c * 8388608.0));
      for (int b = 0; b < 3; ++b) out.push_back((static_cast<std::uint32_t>(s) >> (8 * b)) & 0xFF);
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_wav: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_wav: failed writing " + path);
}

}  // namespace voicy
