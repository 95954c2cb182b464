// SPDX-License-Identifier: Apache-2.0
//
// Listening-test statistics and objective proxies.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace voicy {
class VoicyModel;
}

namespace voicy::eval {

enum class Metric { Naturalness, Similarity };

std::string to_string(Metric m);
Metric parse_metric(const std::string& s);

/// One rating. snr_db is empty for clean stimuli.
struct ScoreRecord {
  std::string system;
  std::string utterance;
  std::string rater;
  Metric metric = Metric::Naturalness;
  double score = 0.0;
  std::optional<double> snr_db;

  bool operator==(const ScoreRecord&) const = default;
};

/// One JSON object per line:
///   {"system":..,"utterance":..,"rater":..,"metric":"naturalness"|"similarity",
///    "score":0..100,"snr_db":<number>|"clean"}   (snr_db optional)
ScoreRecord score_from_line(const std::string& line, std::size_t line_no);
std::string score_to_line(const ScoreRecord& r);
std::vector<ScoreRecord> load_scores(const std::filesystem::path& path);

/// Per-utterance SNR: nullopt marks a clean utterance.
using SnrMap = std::map<std::string, std::optional<double>>;

/// Tab-separated "utterance<TAB>snr_db|clean" lines; '#' starts a comment.
SnrMap load_snr_map(const std::filesystem::path& path);
/// SNR tags carried by the score records themselves.
SnrMap snr_map_from_scores(const std::vector<ScoreRecord>& records);

// -- Wilcoxon signed-rank ---------------------------------------------------

enum class TestMode { Auto, Exact, NormalApprox };

struct TestResult {
  double statistic = 0.0;  // W+, sum of ranks of positive differences
  double p_value = 1.0;    // two-sided
  int n_effective = 0;     // pairs with a nonzero difference
  TestMode mode = TestMode::Exact;
};

std::string to_string(TestMode m);

/// Paired test on x - y. Zero differences are dropped and tied magnitudes
/// share their average rank. Exact mode counts all 2^n sign assignments
/// (by dynamic programming over doubled rank sums); approximate mode uses
/// the normal approximation with tie and continuity corrections. Auto picks
/// exact when n_effective <= exact_threshold.
TestResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                TestMode mode = TestMode::Auto, int exact_threshold = 25);

// -- Aggregation ------------------------------------------------------------

struct SummaryRow {
  std::string system;
  Metric metric = Metric::Naturalness;
  double mean = 0.0;
  std::optional<double> ci95;  // Student-t half-width; empty when n = 1
  std::size_t n = 0;
};

/// Groups by (system, metric), sorted by system then metric.
std::vector<SummaryRow> mushra_summary(const std::vector<ScoreRecord>& records);

struct BucketRow {
  std::string bucket;  // "[lo,hi)", "clean", "<lo" or ">=hi"
  std::string system;
  Metric metric = Metric::Naturalness;
  std::optional<double> mean;  // empty when n = 0
  std::size_t n = 0;
};

/// Half-open buckets [e_i, e_{i+1}) for every (system, metric), emitted even
/// when empty; "clean" and the out-of-range buckets only when populated.
/// Throws when edges are not strictly increasing or an utterance has no SNR.
std::vector<BucketRow> snr_bucket_report(const std::vector<ScoreRecord>& records, const SnrMap& snr,
                                         const std::vector<double>& edges);

struct PairwiseRow {
  Metric metric = Metric::Naturalness;
  std::string system_a;
  std::string system_b;
  std::size_t n_pairs = 0;
  std::optional<TestResult> result;  // empty when every paired difference is zero or no pairs
};

/// Every ordered pair of distinct systems per metric, paired on
/// (utterance, rater).
std::vector<PairwiseRow> pairwise_wilcoxon(const std::vector<ScoreRecord>& records,
                                           TestMode mode = TestMode::Auto, int exact_threshold = 25);

std::string format_summary(const std::vector<SummaryRow>& rows);
std::string format_buckets(const std::vector<BucketRow>& rows);
std::string format_pairwise(const std::vector<PairwiseRow>& rows);

// -- Objective proxies ------------------------------------------------------

struct ObjectiveScores {
  double mel_mse = 0.0;
  double speaker_cosine = 0.0;
};

double mel_mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Mean squared log-mel error against the clean reference and cosine
/// between the speaker embeddings of the converted and target utterances.
ObjectiveScores objective_proxies(const Eigen::MatrixXd& converted, const Eigen::MatrixXd& reference_clean,
                                  const Eigen::MatrixXd& target_ref, const VoicyModel& model);

}  // namespace voicy::eval
