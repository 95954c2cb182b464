// SPDX-License-Identifier: Apache-2.0
//
// Utterance bookkeeping: manifests, phoneme inventories, forced-alignment
// ingestion and the synthetic toy corpus. File formats are documented in
// docs/formats.md.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "voicy/dsp.hpp"

namespace voicy::corpus {

enum class Condition { Clean, Reverb, NoisyReverb };

std::string to_string(Condition c);
Condition parse_condition(const std::string& s);

struct ManifestRecord {
  std::string id;
  std::string speaker_id;
  Condition condition = Condition::Clean;
  std::string audio_path;
  std::string alignment_path;
  std::optional<double> snr_db;
  std::optional<double> t60_s;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> spec_hash;
  std::optional<std::string> error;

  bool operator==(const ManifestRecord&) const = default;
};

/// Records plus the directory relative paths are resolved against.
struct Manifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& path) const;
};

std::string record_to_line(const ManifestRecord& record);
ManifestRecord record_from_line(const std::string& line, std::size_t line_no);

/// Line-at-a-time reader; never holds more than one record.
class ManifestReader {
 public:
  explicit ManifestReader(const std::filesystem::path& path);
  bool next(ManifestRecord& record);

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  std::size_t line_no_ = 0;
};

/// Rejects duplicate (id, condition) pairs.
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct PhonemeInventory {
  std::string id;
  std::vector<std::string> symbols;  // symbols[0] is the silence symbol

  int size() const { return static_cast<int>(symbols.size()); }
  int silence_index() const { return 0; }
  /// Aligner pause labels ("", "sp", "spn", "sil") map to the silence index.
  std::optional<int> find(const std::string& symbol) const;
};

inline constexpr const char* kSilence = "sil";

PhonemeInventory toy_inventory(int n_phonemes);
PhonemeInventory load_inventory(const std::filesystem::path& path);
void write_inventory(const PhonemeInventory& inventory, const std::filesystem::path& path);

struct AlignmentRow {
  std::string symbol;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct PhonemeSequence {
  std::vector<int> symbols;
  std::string inventory_id;
};

/// Parses and validates a tab-separated alignment (time-ordered,
/// non-overlapping, end > start, non-empty).
std::vector<AlignmentRow> read_alignment(const std::filesystem::path& path);
void write_alignment(const std::vector<AlignmentRow>& rows, const std::filesystem::path& path);
PhonemeSequence load_alignment(const std::filesystem::path& path,
                               const PhonemeInventory& inventory);

struct ToyCorpusSpec {
  int n_speakers = 4;
  int utterances_per_speaker = 20;
  int inventory_size = 8;
  double min_segment_s = 0.08;
  double max_segment_s = 0.16;
  int min_segments = 3;
  int max_segments = 8;
  double edge_silence_s = 0.05;
  int sample_rate_hz = dsp::kDefaultSampleRate;
  std::uint64_t seed = 7;

  void validate() const;
  std::string hash() const;
};

/// Resonances and pitch scale that give one toy speaker its timbre.
struct ToySpeaker {
  double pitch_scale = 1.0;
  std::vector<double> formants_hz;
  std::vector<double> bandwidths_hz;
};

ToySpeaker toy_speaker(const ToyCorpusSpec& spec, int speaker);

struct ToyUtterance {
  dsp::Waveform wave;
  std::vector<AlignmentRow> alignment;
};

/// `phonemes` are inventory indices (>= 1), `durations_s` one per phoneme.
/// Leading and trailing silence are added.
ToyUtterance synthesize_toy_utterance(const ToyCorpusSpec& spec, const ToySpeaker& speaker,
                                      const std::vector<int>& phonemes,
                                      const std::vector<double>& durations_s,
                                      std::uint64_t seed);

/// Writes wav/, align/, inventory.txt and manifest.jsonl under out_dir.
Manifest make_toy_corpus(const ToyCorpusSpec& spec, const std::filesystem::path& out_dir,
                         int threads = 1);

}  // namespace voicy::corpus
