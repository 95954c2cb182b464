// SPDX-License-Identifier: Apache-2.0
#include "voicy/scene.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "voicy/parallel.hpp"
#include "voicy/wav.hpp"

namespace voicy::scene {

namespace fs = std::filesystem;

void ShoeboxRoom::validate() const {
  if (!(dims.array() > 0.0).all()) throw std::invalid_argument("room: dimensions must be positive");
  if (!(absorption > 0.0 && absorption <= 1.0))
    throw std::invalid_argument("room: absorption must lie in (0, 1]");
  if (max_order < 0) throw std::invalid_argument("room: max_order must be non-negative");
}

bool ShoeboxRoom::contains(const Point3& p) const {
  return (p.array() > 0.0).all() && (p.array() < dims.array()).all();
}

long direct_path_delay(const Point3& src, const Point3& mic, int fs) {
  return std::lround((src - mic).norm() / kSpeedOfSound * fs);
}

Rir simulate_rir(const ShoeboxRoom& room, const Point3& src, const Point3& mic, int fs) {
  room.validate();
  if (fs <= 0) throw std::invalid_argument("simulate_rir: sample rate must be positive");
  if (!room.contains(src)) throw std::invalid_argument("simulate_rir: source outside room");
  if (!room.contains(mic)) throw std::invalid_argument("simulate_rir: microphone outside room");
  if ((src - mic).norm() == 0.0)
    throw std::invalid_argument("simulate_rir: source and microphone coincide (zero distance)");

  const int order = room.max_order;
  const double reflection = std::sqrt(1.0 - room.absorption);
  std::vector<double> gain(order + 1);
  for (int i = 0; i <= order; ++i) gain[i] = std::pow(reflection, i);

  std::vector<double> taps;
  const double samples_per_meter = fs / kSpeedOfSound;
  const auto axis = [&](int n, int q, int dim) {
    return (1 - 2 * q) * src[dim] + 2.0 * n * room.dims[dim];
  };
  for (int nx = -order; nx <= order; ++nx) {
    for (int qx = 0; qx <= 1; ++qx) {
      const int rx = std::abs(2 * nx - qx);
      if (rx > order) continue;
      const double dx = axis(nx, qx, 0) - mic.x();
      for (int ny = -order; ny <= order; ++ny) {
        for (int qy = 0; qy <= 1; ++qy) {
          const int ry = std::abs(2 * ny - qy);
          if (rx + ry > order) continue;
          const double dy = axis(ny, qy, 1) - mic.y();
          for (int nz = -order; nz <= order; ++nz) {
            for (int qz = 0; qz <= 1; ++qz) {
              const int rz = std::abs(2 * nz - qz);
              const int reflections = rx + ry + rz;
              if (reflections > order) continue;
              const double dz = axis(nz, qz, 2) - mic.z();
              const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
              const auto delay = static_cast<std::size_t>(std::lround(d * samples_per_meter));
              if (delay >= taps.size()) taps.resize(delay + 1, 0.0);
              taps[delay] += gain[reflections] / (4.0 * std::numbers::pi * d);
            }
          }
        }
      }
    }
  }
  Rir rir;
  rir.sample_rate_hz = fs;
  rir.taps = Eigen::Map<const Eigen::VectorXd>(taps.data(), static_cast<Eigen::Index>(taps.size()));
  return rir;
}

Eigen::VectorXd fft_convolve(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() == 0 || b.size() == 0) return Eigen::VectorXd();
  const Eigen::Index n = a.size() + b.size() - 1;
  Eigen::Index nfft = 1;
  while (nfft < n) nfft <<= 1;
  std::vector<double> pa(nfft, 0.0), pb(nfft, 0.0);
  std::copy(a.data(), a.data() + a.size(), pa.begin());
  std::copy(b.data(), b.data() + b.size(), pb.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, pa);
  fft.fwd(fb, pb);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> out;
  fft.inv(out, fa);
  return Eigen::Map<const Eigen::VectorXd>(out.data(), n);
}

Waveform apply_rir(const Waveform& wave, const Rir& rir) {
  if (wave.sample_rate_hz != rir.sample_rate_hz)
    throw std::invalid_argument("apply_rir: sample-rate mismatch (" +
                                std::to_string(wave.sample_rate_hz) + " vs " +
                                std::to_string(rir.sample_rate_hz) + " Hz)");
  Waveform out;
  out.sample_rate_hz = wave.sample_rate_hz;
  out.samples = fft_convolve(wave.samples, rir.taps);
  return out;
}

namespace {

Eigen::VectorXd tile_to(const Eigen::VectorXd& x, Eigen::Index n) {
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = x[i % x.size()];
  return out;
}

double db(double ratio) { return 10.0 * std::log10(ratio); }

}  // namespace

NoiseMixResult mix_at_snr(const Waveform& signal, const Waveform& noise, double target_snr_db) {
  if (signal.size() == 0 || noise.size() == 0)
    throw std::invalid_argument("mix_at_snr: zero power (empty input)");
  const Eigen::VectorXd tiled = tile_to(noise.samples, signal.size());
  const double p_signal = signal.samples.squaredNorm() / signal.size();
  const double p_noise = tiled.squaredNorm() / signal.size();
  if (!(p_signal > 0.0)) throw std::invalid_argument("mix_at_snr: zero power signal");
  if (!(p_noise > 0.0)) throw std::invalid_argument("mix_at_snr: zero power noise");

  NoiseMixResult r;
  r.noise_scale = std::sqrt(p_signal / (p_noise * std::pow(10.0, target_snr_db / 10.0)));
  const Eigen::VectorXd scaled = r.noise_scale * tiled;
  r.mixed.sample_rate_hz = signal.sample_rate_hz;
  r.mixed.samples = signal.samples + scaled;
  r.achieved_snr_db = db(p_signal / (scaled.squaredNorm() / signal.size()));
  return r;
}

double estimate_snr(const Waveform& clean, const Waveform& degraded) {
  if (clean.size() != degraded.size())
    throw std::invalid_argument("estimate_snr: length mismatch");
  const double p_clean = clean.samples.squaredNorm();
  const double p_noise = (degraded.samples - clean.samples).squaredNorm();
  if (p_noise == 0.0) throw std::invalid_argument("estimate_snr: infinite SNR (no noise)");
  if (p_clean == 0.0) throw std::invalid_argument("estimate_snr: zero power reference");
  return db(p_clean / p_noise);
}

double sabine_t60(const ShoeboxRoom& room) {
  return 0.161 * room.volume() / (room.surface() * room.absorption);
}

double absorption_for_t60(const Eigen::Vector3d& dims, double t60_s) {
  ShoeboxRoom room;
  room.dims = dims;
  return 0.161 * room.volume() / (room.surface() * t60_s);
}

Eigen::VectorXd energy_decay_curve_db(const Rir& rir) {
  const Eigen::Index n = rir.taps.size();
  Eigen::VectorXd edc(n);
  double acc = 0.0;
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    acc += rir.taps[i] * rir.taps[i];
    edc[i] = acc;
  }
  if (!(edc[0] > 0.0)) throw std::invalid_argument("energy decay: RIR has no energy");
  const double total = edc[0];
  for (Eigen::Index i = 0; i < n; ++i)
    edc[i] = edc[i] > 0.0 ? db(edc[i] / total) : -std::numeric_limits<double>::infinity();
  return edc;
}

Rir band_limit(const Rir& rir, double lo_hz, double hi_hz) {
  if (!(lo_hz >= 0.0 && lo_hz < hi_hz)) throw std::invalid_argument("band_limit: need 0 <= lo < hi");
  Eigen::Index n = 1;
  while (n < 2 * rir.taps.size()) n <<= 1;
  std::vector<double> x(n, 0.0);
  std::copy(rir.taps.data(), rir.taps.data() + rir.taps.size(), x.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, x);
  for (std::size_t k = 0; k < spectrum.size(); ++k) {
    const double f = static_cast<double>(k) * rir.sample_rate_hz / static_cast<double>(n);
    if (f < lo_hz || f > hi_hz) spectrum[k] = 0.0;
  }
  std::vector<double> y;
  fft.inv(y, spectrum);
  Rir out;
  out.sample_rate_hz = rir.sample_rate_hz;
  out.taps = Eigen::Map<const Eigen::VectorXd>(y.data(), rir.taps.size());
  return out;
}

double schroeder_t60(const Rir& rir, double start_db, double end_db, double band_lo_hz,
                     double band_hi_hz) {
  const Eigen::VectorXd edc = energy_decay_curve_db(band_limit(rir, band_lo_hz, band_hi_hz));
  double st = 0, sy = 0, stt = 0, sty = 0;
  long count = 0;
  for (Eigen::Index i = 0; i < edc.size(); ++i) {
    if (edc[i] > start_db || edc[i] < end_db) continue;
    const double t = static_cast<double>(i) / rir.sample_rate_hz;
    st += t;
    sy += edc[i];
    stt += t * t;
    sty += t * edc[i];
    ++count;
  }
  if (count < 2) throw std::runtime_error("schroeder_t60: decay range not reached");
  const double slope = (count * sty - st * sy) / (count * stt - st * st);
  if (!(slope < 0.0)) throw std::runtime_error("schroeder_t60: non-decaying response");
  return -60.0 / slope;
}

Waveform white_noise(Eigen::Index n, int fs, std::uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  w.sample_rate_hz = fs;
  w.samples.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) w.samples[i] = rng.normal();
  return w;
}

Waveform synthetic_babble(Eigen::Index n, int fs, std::uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  w.sample_rate_hz = fs;
  w.samples = Eigen::VectorXd::Zero(n);
  constexpr int kVoices = 4;
  for (int v = 0; v < kVoices; ++v) {
    const double f0 = rng.uniform(90.0, 260.0);
    const double mod_hz = rng.uniform(2.0, 6.0);
    const double mod_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int h = 1; h * f0 < 3500.0; ++h) {
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double omega = 2.0 * std::numbers::pi * h * f0 / fs;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double env =
            0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * mod_hz * i / fs + mod_phase);
        w.samples[i] += env * std::sin(omega * i + phase) / h;
      }
    }
  }
  const double rms = std::sqrt(w.samples.squaredNorm() / std::max<Eigen::Index>(n, 1));
  if (rms > 0) w.samples *= 0.1 / rms;
  return w;
}

SceneRender render_scene_components(const ShoeboxRoom& room, const ScenePlacement& placement,
                                    const Waveform& speech, const Waveform& external_noise,
                                    double white_snr_db, double external_snr_db,
                                    std::uint64_t seed) {
  room.validate();
  for (const Point3* p : {&placement.speech_pos, &placement.white_noise_pos,
                          &placement.external_noise_pos, &placement.mic_pos})
    if (!room.contains(*p)) throw std::invalid_argument("render_scene: placement outside room");
  if (!(speech.samples.squaredNorm() > 0.0))
    throw std::invalid_argument("render_scene: zero power speech");
  const int fs = speech.sample_rate_hz;

  SceneRender out;
  out.reverberant_speech =
      apply_rir(speech, simulate_rir(room, placement.speech_pos, placement.mic_pos, fs));

  Waveform ext_src;
  ext_src.sample_rate_hz = external_noise.sample_rate_hz;
  if (external_noise.size() == 0) throw std::invalid_argument("render_scene: empty external noise");
  ext_src.samples = tile_to(external_noise.samples, speech.size());
  const Waveform ext =
      apply_rir(ext_src, simulate_rir(room, placement.external_noise_pos, placement.mic_pos, fs));
  const Waveform white = apply_rir(
      white_noise(speech.size(), fs, seed),
      simulate_rir(room, placement.white_noise_pos, placement.mic_pos, fs));

  const Eigen::Index n = out.reverberant_speech.size();
  const double white_scale = mix_at_snr(out.reverberant_speech, white, white_snr_db).noise_scale;
  const double ext_scale = mix_at_snr(out.reverberant_speech, ext, external_snr_db).noise_scale;
  out.mixed.sample_rate_hz = fs;
  out.mixed.samples = out.reverberant_speech.samples + white_scale * tile_to(white.samples, n) +
                      ext_scale * tile_to(ext.samples, n);
  return out;
}

Waveform render_scene(const ShoeboxRoom& room, const ScenePlacement& placement,
                      const Waveform& speech, const Waveform& external_noise,
                      double white_snr_db, double external_snr_db, std::uint64_t seed) {
  return render_scene_components(room, placement, speech, external_noise, white_snr_db,
                                 external_snr_db, seed)
      .mixed;
}

void SamplerConfig::validate() const {
  if (!(dims_min.array() > 0.0).all() || !(dims_min.array() <= dims_max.array()).all())
    throw std::invalid_argument("sampler: invalid room dimension range");
  if (!((dims_min.array() - 2.0 * wall_margin) > 0.0).all())
    throw std::invalid_argument("sampler: wall margin leaves no interior");
  if (!(t60_min > 0.0 && t60_min <= t60_max))
    throw std::invalid_argument("sampler: invalid T60 range");
  if (max_order < 0) throw std::invalid_argument("sampler: max_order must be non-negative");
  if (!(snr_min <= snr_mean && snr_mean <= snr_max))
    throw std::invalid_argument("sampler: SNR mean must lie in [snr_min, snr_max]");
  if (!(white_share_min > 0.0 && white_share_min <= white_share_max && white_share_max < 1.0))
    throw std::invalid_argument("sampler: white-noise share must lie in (0, 1)");
}

SampledRoom sample_room(const SamplerConfig& cfg, double t60_min, double t60_max, Rng& rng) {
  SampledRoom s;
  s.t60_s = rng.uniform(t60_min, t60_max);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Eigen::Vector3d dims;
    for (int k = 0; k < 3; ++k) dims[k] = rng.uniform(cfg.dims_min[k], cfg.dims_max[k]);
    const double a = absorption_for_t60(dims, s.t60_s);
    if (a > 0.0 && a <= 1.0) {
      s.room.dims = dims;
      s.room.absorption = a;
      s.room.max_order = cfg.max_order;
      return s;
    }
  }
  throw std::runtime_error("sample_room: no room in the configured range reaches T60 " +
                           std::to_string(s.t60_s) + " s");
}

ScenePlacement sample_placement(const ShoeboxRoom& room, double margin, Rng& rng) {
  const auto point = [&] {
    Point3 p;
    for (int k = 0; k < 3; ++k) p[k] = rng.uniform(margin, room.dims[k] - margin);
    return p;
  };
  ScenePlacement pl;
  pl.mic_pos = point();
  const auto away = [&] {
    for (;;) {
      Point3 p = point();
      if ((p - pl.mic_pos).norm() >= 0.5) return p;
    }
  };
  pl.speech_pos = away();
  pl.white_noise_pos = away();
  pl.external_noise_pos = away();
  return pl;
}

std::vector<double> sample_snr_targets(const SamplerConfig& cfg, std::size_t n,
                                       std::uint64_t seed) {
  cfg.validate();
  double lo = cfg.snr_min, hi = 2.0 * cfg.snr_mean - cfg.snr_min;
  if (hi > cfg.snr_max) {
    lo = 2.0 * cfg.snr_mean - cfg.snr_max;
    hi = cfg.snr_max;
  }
  Rng rng(seed);
  std::vector<std::size_t> strata(n);
  for (std::size_t i = 0; i < n; ++i) strata[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(strata[i - 1], strata[rng.index(i)]);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = lo + (hi - lo) * (static_cast<double>(strata[i]) + rng.uniform()) /
                      static_cast<double>(n);
  return out;
}

namespace {

// Removes the direct-path delay, keeps `n` samples and matches the RMS of
// `reference`.
Waveform align_to_clean(const Waveform& x, long delay, const Waveform& reference) {
  Waveform out;
  out.sample_rate_hz = x.sample_rate_hz;
  const Eigen::Index n = reference.size();
  out.samples = Eigen::VectorXd::Zero(n);
  const Eigen::Index avail = std::clamp<Eigen::Index>(x.size() - delay, 0, n);
  out.samples.head(avail) = x.samples.segment(delay, avail);
  const double p = out.samples.squaredNorm();
  if (p > 0.0) out.samples *= std::sqrt(reference.samples.squaredNorm() / p);
  return out;
}

std::string rebase(const fs::path& target, const fs::path& out_dir) {
  const fs::path abs_target = fs::absolute(target).lexically_normal();
  const fs::path abs_dir = fs::absolute(out_dir).lexically_normal();
  return abs_target.lexically_relative(abs_dir).generic_string();
}

}  // namespace

corpus::Manifest build_dataset(const fs::path& manifest_in, const fs::path& out_dir,
                               const SamplerConfig& cfg, std::uint64_t seed, int threads) {
  using corpus::Condition;
  using corpus::ManifestRecord;
  cfg.validate();
  const corpus::Manifest in = corpus::load_manifest(manifest_in);
  std::vector<const ManifestRecord*> clean;
  for (const auto& r : in.records)
    if (r.condition == Condition::Clean) clean.push_back(&r);

  std::error_code ec;
  fs::create_directories(out_dir / "audio", ec);
  if (ec || !fs::is_directory(out_dir / "audio"))
    throw std::runtime_error("build_dataset: cannot create " + (out_dir / "audio").string());

  const std::vector<double> snr_targets =
      sample_snr_targets(cfg, clean.size(), derive_seed(seed, "snr-targets"));
  std::vector<std::array<ManifestRecord, 3>> rows(clean.size());

  parallel_for(clean.size(), threads, [&](std::size_t i) {
    const ManifestRecord& src = *clean[i];
    const std::uint64_t utt_seed = derive_seed(seed, src.id);
    Rng rng(utt_seed);

    ManifestRecord base = src;
    base.audio_path = rebase(in.resolve(src.audio_path), out_dir);
    if (!src.alignment_path.empty())
      base.alignment_path = rebase(in.resolve(src.alignment_path), out_dir);
    base.snr_db.reset();
    base.t60_s.reset();

    ManifestRecord reverb = base;
    reverb.condition = Condition::Reverb;
    reverb.audio_path = "audio/" + src.id + "_reverb.wav";
    reverb.seed = utt_seed;
    reverb.spec_hash.reset();
    ManifestRecord noisy = reverb;
    noisy.condition = Condition::NoisyReverb;
    noisy.audio_path = "audio/" + src.id + "_noisy_reverb.wav";

    try {
      if (!src.alignment_path.empty() && !fs::exists(in.resolve(src.alignment_path)))
        throw std::runtime_error("missing alignment " + in.resolve(src.alignment_path).string());
      const Waveform speech = read_wav(in.resolve(src.audio_path).string());
      const int fs_hz = speech.sample_rate_hz;

      const SampledRoom rev_room = sample_room(cfg, cfg.t60_min, cfg.t60_max, rng);
      const ScenePlacement rev_place = sample_placement(rev_room.room, cfg.wall_margin, rng);
      const Waveform reverberant = apply_rir(
          speech, simulate_rir(rev_room.room, rev_place.speech_pos, rev_place.mic_pos, fs_hz));
      write_wav((out_dir / reverb.audio_path).string(),
                align_to_clean(reverberant,
                               direct_path_delay(rev_place.speech_pos, rev_place.mic_pos, fs_hz),
                               speech));
      reverb.t60_s = rev_room.t60_s;

      const SampledRoom noisy_room = sample_room(
          cfg, cfg.t60_min, std::max(cfg.t60_min, std::min(cfg.noisy_t60_max, cfg.t60_max)), rng);
      const ScenePlacement noisy_place = sample_placement(noisy_room.room, cfg.wall_margin, rng);
      Waveform external;
      if (cfg.noise_paths.empty()) {
        external = synthetic_babble(speech.size(), fs_hz, rng.next());
      } else {
        external = read_wav(cfg.noise_paths[rng.index(cfg.noise_paths.size())], fs_hz);
      }
      const double share = rng.uniform(cfg.white_share_min, cfg.white_share_max);
      const double target = snr_targets[i];
      const double white_snr = target - 10.0 * std::log10(share);
      const double external_snr = target - 10.0 * std::log10(1.0 - share);
      const SceneRender scene = render_scene_components(noisy_room.room, noisy_place, speech,
                                                        external, white_snr, external_snr,
                                                        rng.next());
      write_wav((out_dir / noisy.audio_path).string(),
                align_to_clean(scene.mixed,
                               direct_path_delay(noisy_place.speech_pos, noisy_place.mic_pos, fs_hz),
                               speech));
      noisy.t60_s = noisy_room.t60_s;
      noisy.snr_db = estimate_snr(scene.reverberant_speech, scene.mixed);
    } catch (const std::exception& e) {
      reverb.error = e.what();
      noisy.error = e.what();
    }
    rows[i] = {base, reverb, noisy};
  });

  corpus::Manifest out;
  out.base_dir = out_dir;
  for (auto& triple : rows)
    for (auto& r : triple) out.records.push_back(std::move(r));
  corpus::write_manifest(out, out_dir / "manifest.jsonl");
  return out;
}

}  // namespace voicy::scene
