// SPDX-License-Identifier: Apache-2.0
//
// Image-source shoebox simulation, RIR convolution, SNR-controlled mixing and
// the three-condition (clean / reverb / noisy_reverb) dataset builder.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "voicy/corpus.hpp"
#include "voicy/dsp.hpp"
#include "voicy/rng.hpp"

namespace voicy::scene {

using Point3 = Eigen::Vector3d;
using dsp::Waveform;

inline constexpr double kSpeedOfSound = 343.0;  // m/s

struct ShoeboxRoom {
  Eigen::Vector3d dims{5.0, 4.0, 3.0};  // meters
  double absorption = 0.3;              // uniform energy absorption, (0, 1]
  int max_order = 20;

  void validate() const;
  bool contains(const Point3& p) const;
  double volume() const { return dims.prod(); }
  double surface() const {
    return 2.0 * (dims.x() * dims.y() + dims.x() * dims.z() + dims.y() * dims.z());
  }
};

struct ScenePlacement {
  Point3 speech_pos;
  Point3 white_noise_pos;
  Point3 external_noise_pos;
  Point3 mic_pos;
};

struct Rir {
  Eigen::VectorXd taps;
  int sample_rate_hz = dsp::kDefaultSampleRate;
};

struct NoiseMixResult {
  Waveform mixed;
  double achieved_snr_db = 0.0;
  double noise_scale = 0.0;
};

/// Nearest-sample image-source response: each image contributes
/// r^reflections / (4 pi d) at round(d / c * fs), with r = sqrt(1 - absorption).
Rir simulate_rir(const ShoeboxRoom& room, const Point3& src, const Point3& mic, int fs);

long direct_path_delay(const Point3& src, const Point3& mic, int fs);

/// Full linear convolution through the FFT.
Eigen::VectorXd fft_convolve(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
Waveform apply_rir(const Waveform& wave, const Rir& rir);

/// Tiles then truncates `noise` to the signal length, then scales it so the
/// mixture has exactly `target_snr_db`.
NoiseMixResult mix_at_snr(const Waveform& signal, const Waveform& noise, double target_snr_db);

/// Reference-based SNR: 10 log10(P_clean / P_(degraded - clean)).
double estimate_snr(const Waveform& clean, const Waveform& degraded);

double sabine_t60(const ShoeboxRoom& room);
/// Inverse of Sabine's formula; may exceed 1 for rooms that cannot reach t60.
double absorption_for_t60(const Eigen::Vector3d& dims, double t60_s);

/// Schroeder energy-decay curve in dB, normalized to 0 dB at index 0.
Eigen::VectorXd energy_decay_curve_db(const Rir& rir);
/// Zero-phase brickwall band-pass through the FFT; keeps the tap count.
Rir band_limit(const Rir& rir, double lo_hz, double hi_hz);
/// T60 from a line fit to the decay curve between start_db and end_db,
/// measured on the band-limited response. Nearest-sample images all carry
/// positive gains, so their coincident late taps pile up near DC and would
/// bias a broadband decay toward longer times.
double schroeder_t60(const Rir& rir, double start_db = -5.0, double end_db = -25.0,
                     double band_lo_hz = 100.0, double band_hi_hz = 10000.0);

Waveform white_noise(Eigen::Index n, int fs, std::uint64_t seed);
/// Several amplitude-modulated harmonic voices at random pitches; a stand-in
/// for recorded environmental noise.
Waveform synthetic_babble(Eigen::Index n, int fs, std::uint64_t seed);

struct SceneRender {
  Waveform reverberant_speech;
  Waveform mixed;
};

/// Like render_scene but also returns the reverberant speech the noises were
/// mixed against.
SceneRender render_scene_components(const ShoeboxRoom& room, const ScenePlacement& placement,
                                    const Waveform& speech, const Waveform& external_noise,
                                    double white_snr_db, double external_snr_db,
                                    std::uint64_t seed);

Waveform render_scene(const ShoeboxRoom& room, const ScenePlacement& placement,
                      const Waveform& speech, const Waveform& external_noise,
                      double white_snr_db, double external_snr_db, std::uint64_t seed);

struct SamplerConfig {
  Eigen::Vector3d dims_min{3.0, 3.0, 2.4};
  Eigen::Vector3d dims_max{8.0, 8.0, 3.5};
  double t60_min = 0.12;
  double t60_max = 1.25;
  double noisy_t60_max = 0.6;  // noisy scenes are less reverberant on average
  int max_order = 20;
  double wall_margin = 0.5;
  double snr_min = -2.2;
  double snr_mean = 16.0;
  double snr_max = 35.0;
  double white_share_min = 0.2;
  double white_share_max = 0.8;
  std::vector<std::string> noise_paths;  // empty: synthetic babble

  void validate() const;
};

struct SampledRoom {
  ShoeboxRoom room;
  double t60_s = 0.0;
};

SampledRoom sample_room(const SamplerConfig& cfg, double t60_min, double t60_max, Rng& rng);
ScenePlacement sample_placement(const ShoeboxRoom& room, double margin, Rng& rng);

/// Stratified draw of n combined SNR targets, uniform on an interval inside
/// [snr_min, snr_max] whose midpoint is snr_mean.
std::vector<double> sample_snr_targets(const SamplerConfig& cfg, std::size_t n,
                                       std::uint64_t seed);

/// Adds a reverb and a noisy_reverb sibling for every clean record. Derived
/// audio is aligned to the direct path, truncated to the clean length and
/// RMS-matched to the clean utterance.
corpus::Manifest build_dataset(const std::filesystem::path& manifest_in,
                               const std::filesystem::path& out_dir, const SamplerConfig& cfg,
                               std::uint64_t seed, int threads = 1);

}  // namespace voicy::scene
