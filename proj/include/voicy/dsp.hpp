// SPDX-License-Identifier: Apache-2.0
//
// Framing, STFT/iSTFT, mel filterbank, log-mel extraction and Griffin-Lim
// reconstruction. Everything is a pure function templated on the sample
// scalar; `double` is what the pipeline instantiates.
#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace voicy::dsp {

inline constexpr int kDefaultSampleRate = 24000;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ComplexMatrix =
    Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct BasicWaveform {
  Vector<Scalar> samples;
  int sample_rate_hz = kDefaultSampleRate;

  Eigen::Index size() const { return samples.size(); }
};

enum class Window { Hann };

struct StftConfig {
  int fft_size = 1024;
  int win_size = 1024;
  int hop_size = 256;
  Window window = Window::Hann;

  void validate() const {
    if (fft_size <= 0 || win_size <= 0 || hop_size <= 0)
      throw std::invalid_argument("stft config: sizes must be positive");
    if (win_size > fft_size)
      throw std::invalid_argument("stft config: win_size exceeds fft_size");
    if (hop_size > win_size)
      throw std::invalid_argument("stft config: hop_size exceeds win_size");
    if (fft_size % 2 != 0)
      throw std::invalid_argument("stft config: fft_size must be even");
    if (win_size % hop_size != 0)
      throw std::invalid_argument(
          "stft config: win_size must be a multiple of hop_size (COLA)");
  }
};

struct MelConfig {
  int n_mels = 80;
  double f_min_hz = 50.0;
  double f_max_hz = 12000.0;
  double log_floor = 1e-10;

  void validate(int sample_rate_hz) const {
    if (n_mels <= 0) throw std::invalid_argument("mel config: n_mels must be positive");
    if (!(log_floor > 0.0))
      throw std::invalid_argument("mel config: log_floor must be positive");
    if (!(f_min_hz >= 0.0 && f_min_hz < f_max_hz))
      throw std::invalid_argument("mel config: need 0 <= f_min < f_max");
    if (f_max_hz > sample_rate_hz / 2.0)
      throw std::invalid_argument("mel config: f_max " + std::to_string(f_max_hz) +
                                  " Hz exceeds Nyquist " +
                                  std::to_string(sample_rate_hz / 2.0) + " Hz");
  }
};

template <typename Scalar>
struct BasicComplexSpectrogram {
  ComplexMatrix<Scalar> values;  // frames x (fft_size / 2 + 1)
  StftConfig config;
  int sample_rate_hz = kDefaultSampleRate;

  Eigen::Index frames() const { return values.rows(); }
};

template <typename Scalar>
struct BasicMelSpectrogram {
  Matrix<Scalar> values;  // frames x n_mels, natural log of mel power
  int hop_size = 256;
  int sample_rate_hz = kDefaultSampleRate;

  Eigen::Index frames() const { return values.rows(); }
  Eigen::Index mels() const { return values.cols(); }
};

using Waveform = BasicWaveform<double>;
using ComplexSpectrogram = BasicComplexSpectrogram<double>;
using MelSpectrogram = BasicMelSpectrogram<double>;

/// Periodic Hann window.
template <typename Scalar>
Vector<Scalar> hann_window(int n) {
  Vector<Scalar> w(n);
  for (int i = 0; i < n; ++i)
    w[i] = Scalar(0.5) - Scalar(0.5) * std::cos(Scalar(2) * std::numbers::pi_v<Scalar> *
                                                 Scalar(i) / Scalar(n));
  return w;
}

inline Eigen::Index frame_count(Eigen::Index n_samples, const StftConfig& cfg) {
  if (n_samples < cfg.win_size) return 0;
  return 1 + (n_samples - cfg.win_size) / cfg.hop_size;
}

inline Eigen::Index synthesis_length(Eigen::Index n_frames, const StftConfig& cfg) {
  if (n_frames <= 0) return 0;
  return (n_frames - 1) * cfg.hop_size + cfg.win_size;
}

template <typename Scalar>
Scalar mean_power(const BasicWaveform<Scalar>& wave) {
  if (wave.size() == 0) return Scalar(0);
  return wave.samples.squaredNorm() / Scalar(wave.size());
}

template <typename Scalar>
BasicComplexSpectrogram<Scalar> stft(const BasicWaveform<Scalar>& wave,
                                     const StftConfig& cfg) {
  cfg.validate();
  if (wave.size() < cfg.win_size)
    throw std::invalid_argument("stft: input too short (" + std::to_string(wave.size()) +
                                " samples, window is " + std::to_string(cfg.win_size) + ")");
  const Eigen::Index n_frames = frame_count(wave.size(), cfg);
  const Eigen::Index bins = cfg.fft_size / 2 + 1;
  const Vector<Scalar> window = hann_window<Scalar>(cfg.win_size);

  BasicComplexSpectrogram<Scalar> out;
  out.config = cfg;
  out.sample_rate_hz = wave.sample_rate_hz;
  out.values.resize(n_frames, bins);

  Eigen::FFT<Scalar> fft;
  fft.SetFlag(Eigen::FFT<Scalar>::HalfSpectrum);
  std::vector<Scalar> frame(cfg.fft_size, Scalar(0));
  std::vector<std::complex<Scalar>> spectrum;
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    const Eigen::Index start = t * cfg.hop_size;
    for (int i = 0; i < cfg.win_size; ++i) frame[i] = wave.samples[start + i] * window[i];
    fft.fwd(spectrum, frame);
    for (Eigen::Index k = 0; k < bins; ++k) out.values(t, k) = spectrum[k];
  }
  return out;
}

/// Least-squares overlap-add inverse: each frame is windowed again and the
/// sum is divided by the accumulated squared window.
template <typename Scalar>
BasicWaveform<Scalar> istft(const BasicComplexSpectrogram<Scalar>& spec) {
  const StftConfig& cfg = spec.config;
  cfg.validate();
  if (spec.values.cols() != cfg.fft_size / 2 + 1)
    throw std::invalid_argument("istft: spectrogram has " + std::to_string(spec.values.cols()) +
                                " bins, expected " + std::to_string(cfg.fft_size / 2 + 1));
  const Eigen::Index n_frames = spec.frames();
  const Eigen::Index length = synthesis_length(n_frames, cfg);
  const Vector<Scalar> window = hann_window<Scalar>(cfg.win_size);

  Vector<Scalar> acc = Vector<Scalar>::Zero(length);
  Vector<Scalar> norm = Vector<Scalar>::Zero(length);
  Eigen::FFT<Scalar> fft;
  fft.SetFlag(Eigen::FFT<Scalar>::HalfSpectrum);
  std::vector<std::complex<Scalar>> spectrum(spec.values.cols());
  std::vector<Scalar> frame;
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    for (Eigen::Index k = 0; k < spec.values.cols(); ++k) spectrum[k] = spec.values(t, k);
    fft.inv(frame, spectrum, cfg.fft_size);
    const Eigen::Index start = t * cfg.hop_size;
    for (int i = 0; i < cfg.win_size; ++i) {
      acc[start + i] += frame[i] * window[i];
      norm[start + i] += window[i] * window[i];
    }
  }
  // The edges are covered only by window tails; dividing by their tiny sum
  // of squares would blow up any error there, so the divisor is floored.
  const Scalar floor = Scalar(1e-3) * norm.maxCoeff();
  BasicWaveform<Scalar> out;
  out.sample_rate_hz = spec.sample_rate_hz;
  out.samples = Vector<Scalar>::Zero(length);
  for (Eigen::Index n = 0; n < length; ++n)
    if (norm[n] > Scalar(0)) out.samples[n] = acc[n] / std::max(norm[n], floor);
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_mels + 2 band edges (Hz), uniformly spaced on the mel scale. Filter m
/// rises from edge m, peaks at edge m + 1 and falls to edge m + 2.
inline std::vector<double> mel_band_edges(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.f_min_hz);
  const double hi = hz_to_mel(cfg.f_max_hz);
  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));
  edges.front() = cfg.f_min_hz;
  edges.back() = cfg.f_max_hz;
  return edges;
}

/// Triangular filters with unit peak, n_mels x (fft_size / 2 + 1).
template <typename Scalar>
Matrix<Scalar> mel_filterbank(const MelConfig& cfg, int fft_size, int sample_rate_hz) {
  cfg.validate(sample_rate_hz);
  const std::vector<double> edges = mel_band_edges(cfg);
  const int bins = fft_size / 2 + 1;
  Matrix<Scalar> fb = Matrix<Scalar>::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate_hz / fft_size;
      double w = 0.0;
      if (f > lo && f <= center)
        w = (f - lo) / (center - lo);
      else if (f > center && f < hi)
        w = (hi - f) / (hi - center);
      fb(m, k) = static_cast<Scalar>(w);
    }
    if (!(fb.row(m).sum() > Scalar(0)))
      throw std::invalid_argument("mel filterbank: filter " + std::to_string(m) +
                                  " covers no FFT bin; increase fft_size or reduce n_mels");
  }
  return fb;
}

template <typename Scalar>
Matrix<Scalar> power_spectrum(const BasicComplexSpectrogram<Scalar>& spec) {
  return spec.values.cwiseAbs2();
}

template <typename Scalar>
BasicMelSpectrogram<Scalar> mel_from_power(const Matrix<Scalar>& power,
                                           const Matrix<Scalar>& filterbank,
                                           const MelConfig& mel_cfg, int hop_size,
                                           int sample_rate_hz) {
  BasicMelSpectrogram<Scalar> out;
  out.hop_size = hop_size;
  out.sample_rate_hz = sample_rate_hz;
  out.values = (power * filterbank.transpose())
                   .array()
                   .max(static_cast<Scalar>(mel_cfg.log_floor))
                   .log()
                   .matrix();
  return out;
}

/// values = log(max(filterbank * |STFT|^2, log_floor)).
template <typename Scalar>
BasicMelSpectrogram<Scalar> mel_spectrogram(const BasicWaveform<Scalar>& wave,
                                            const StftConfig& stft_cfg,
                                            const MelConfig& mel_cfg) {
  mel_cfg.validate(wave.sample_rate_hz);
  const auto spec = stft(wave, stft_cfg);
  const Matrix<Scalar> fb =
      mel_filterbank<Scalar>(mel_cfg, stft_cfg.fft_size, wave.sample_rate_hz);
  return mel_from_power<Scalar>(power_spectrum(spec), fb, mel_cfg, stft_cfg.hop_size,
                                wave.sample_rate_hz);
}

/// Non-negative linear-spectrum power estimate from mel power. Starts from
/// the normalized transpose and refines with multiplicative NNLS updates.
template <typename Scalar>
Matrix<Scalar> invert_mel_power(const Matrix<Scalar>& mel_power,
                                const Matrix<Scalar>& filterbank, int nnls_iters = 50) {
  const Scalar tiny = Scalar(1e-30);
  const Vector<Scalar> col_sum = filterbank.colwise().sum().transpose();
  const Matrix<Scalar> projected = mel_power * filterbank;  // frames x bins
  Matrix<Scalar> power(projected.rows(), projected.cols());
  for (Eigen::Index k = 0; k < projected.cols(); ++k) {
    if (col_sum[k] > tiny)
      power.col(k) = projected.col(k) / col_sum[k];
    else
      power.col(k).setZero();
  }
  const Matrix<Scalar> gram = filterbank.transpose() * filterbank;
  for (int it = 0; it < nnls_iters; ++it) {
    const Matrix<Scalar> denom = power * gram;
    power = power.cwiseProduct(projected).cwiseQuotient(denom.array().max(tiny).matrix());
  }
  return power;
}

/// Griffin-Lim from a log-mel spectrogram, starting from zero phase. When
/// `spectral_error` is given it receives || |STFT(x_i)| - target ||_F after
/// each iteration i.
template <typename Scalar>
BasicWaveform<Scalar> griffin_lim(const BasicMelSpectrogram<Scalar>& mel,
                                  const StftConfig& stft_cfg, const MelConfig& mel_cfg,
                                  int n_iters, std::vector<Scalar>* spectral_error = nullptr) {
  if (n_iters < 1) throw std::invalid_argument("griffin_lim: n_iters must be >= 1");
  stft_cfg.validate();
  if (mel.mels() != mel_cfg.n_mels)
    throw std::invalid_argument("griffin_lim: mel has " + std::to_string(mel.mels()) +
                                " bands, config expects " + std::to_string(mel_cfg.n_mels));
  if (mel.frames() < 1) throw std::invalid_argument("griffin_lim: empty mel spectrogram");

  const Matrix<Scalar> fb =
      mel_filterbank<Scalar>(mel_cfg, stft_cfg.fft_size, mel.sample_rate_hz);
  const Matrix<Scalar> mel_power = mel.values.array().exp().matrix();
  const Matrix<Scalar> target = invert_mel_power<Scalar>(mel_power, fb).cwiseSqrt();

  BasicComplexSpectrogram<Scalar> estimate;
  estimate.config = stft_cfg;
  estimate.sample_rate_hz = mel.sample_rate_hz;
  estimate.values = target.template cast<std::complex<Scalar>>();

  if (spectral_error) spectral_error->clear();
  BasicWaveform<Scalar> wave;
  for (int it = 0; it < n_iters; ++it) {
    wave = istft(estimate);
    const auto rebuilt = stft(wave, stft_cfg);
    if (spectral_error)
      spectral_error->push_back((rebuilt.values.cwiseAbs() - target).norm());
    for (Eigen::Index t = 0; t < target.rows(); ++t) {
      for (Eigen::Index k = 0; k < target.cols(); ++k) {
        const std::complex<Scalar> z = rebuilt.values(t, k);
        const Scalar mag = std::abs(z);
        estimate.values(t, k) = mag > Scalar(0) ? target(t, k) * (z / mag)
                                                : std::complex<Scalar>(target(t, k), 0);
      }
    }
  }
  return wave;
}

}  // namespace voicy::dsp
