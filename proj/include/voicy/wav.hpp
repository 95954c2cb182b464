// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "voicy/dsp.hpp"

namespace voicy {

enum class WavEncoding { Pcm16, Pcm24, Float32 };

/// Reads a mono WAV file (16/24-bit PCM or 32-bit float). When
/// `expected_rate_hz` is set, any other rate is rejected; no resampling is
/// performed.
dsp::Waveform read_wav(const std::string& path,
                       std::optional<int> expected_rate_hz = dsp::kDefaultSampleRate);

void write_wav(const std::string& path, const dsp::Waveform& wave,
               WavEncoding encoding = WavEncoding::Float32);

}  // namespace voicy
