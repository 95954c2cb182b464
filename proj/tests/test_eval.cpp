// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "voicy/eval.hpp"
#include "voicy/npy.hpp"
#include "voicy/rng.hpp"

using namespace voicy;
using namespace voicy::eval;
namespace fs = std::filesystem;

namespace {

/// Two-sided p by enumerating every sign assignment of the nonzero
/// differences, with ties given average ranks.
double brute_force_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  const std::size_t n = d.size();
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(d[j]) < std::abs(d[i])) ++below;
      if (std::abs(d[j]) == std::abs(d[i])) ++equal;
    }
    rank[i] = below + (equal + 1) / 2.0;
  }
  double observed = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += rank[i];
    if (d[i] > 0) observed += rank[i];
  }
  const double centre = total / 2;
  std::size_t extreme = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) w += rank[i];
    if (std::abs(w - centre) >= std::abs(observed - centre) - 1e-9) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(std::size_t{1} << n);
}

ScoreRecord rec(std::string sys, std::string utt, std::string rater, Metric m, double score,
                std::optional<double> snr = std::nullopt) {
  return {std::move(sys), std::move(utt), std::move(rater), m, score, snr};
}

}  // namespace

TEST_CASE("exact Wilcoxon p equals full enumeration on random samples") {
  Rng rng(2024);
  int cases = 0;
  while (cases < 1000) {
    const std::size_t n = 1 + rng.index(10);
    std::vector<double> x(n), y(n);
    // Integer-valued scores produce ties and zero differences.
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.index(6));
      y[i] = static_cast<double>(rng.index(6));
    }
    if (x == y) continue;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) any |= x[i] != y[i];
    if (!any) continue;
    const auto r = wilcoxon_signed_rank(x, y, TestMode::Exact);
    REQUIRE(r.p_value == doctest::Approx(brute_force_p(x, y)).epsilon(1e-12));
    ++cases;
  }
  CHECK(cases == 1000);
}

TEST_CASE("three positive differences give p = 0.25") {
  const auto r = wilcoxon_signed_rank({1, 2, 3}, {0, 0, 0}, TestMode::Exact);
  CHECK(r.p_value == 0.25);
  CHECK(r.statistic == 6.0);
  CHECK(r.n_effective == 3);
}

TEST_CASE("Wilcoxon is symmetric, bounded and drops zero differences") {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(40);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(rng.uniform(0, 100));
      y[i] = std::round(rng.uniform(0, 100));
    }
    x[0] = y[0] + 1;
    const auto a = wilcoxon_signed_rank(x, y);
    const auto b = wilcoxon_signed_rank(y, x);
    CHECK(a.p_value == doctest::Approx(b.p_value).epsilon(1e-12));
    CHECK(a.p_value > 0.0);
    CHECK(a.p_value <= 1.0);
  }
  const auto with_zero = wilcoxon_signed_rank({5, 1, 2, 3}, {5, 0, 0, 0}, TestMode::Exact);
  CHECK(with_zero.n_effective == 3);
  CHECK(with_zero.p_value == 0.25);
  CHECK_THROWS_WITH(wilcoxon_signed_rank({1, 2}, {1, 2}), doctest::Contains("degenerate"));
  CHECK_THROWS(wilcoxon_signed_rank({1, 2}, {1}));
}

TEST_CASE("normal approximation tracks the exact distribution for moderate n") {
  Rng rng(9);
  std::vector<double> x(25), y(25);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform(0, 10) + 1.0;
    y[i] = rng.uniform(0, 10);
  }
  const auto exact = wilcoxon_signed_rank(x, y, TestMode::Exact);
  const auto approx = wilcoxon_signed_rank(x, y, TestMode::NormalApprox);
  CHECK(exact.statistic == approx.statistic);
  CHECK(std::abs(exact.p_value - approx.p_value) < 0.01);
  CHECK(wilcoxon_signed_rank(x, y).mode == TestMode::Exact);
  CHECK(wilcoxon_signed_rank(x, y, TestMode::Auto, 10).mode == TestMode::NormalApprox);
}

TEST_CASE("MUSHRA means match an independent streaming pass") {
  Rng rng(77);
  std::vector<ScoreRecord> records;
  const std::vector<std::string> systems{"anchor", "proposed", "reference"};
  for (const auto& s : systems)
    for (int u = 0; u < 30; ++u)
      for (int r = 0; r < 7; ++r)
        for (Metric m : {Metric::Naturalness, Metric::Similarity})
          records.push_back(rec(s, "u" + std::to_string(u), "r" + std::to_string(r), m, rng.uniform(0, 100)));
  const auto rows = mushra_summary(records);
  CHECK(rows.size() == 6);
  for (const auto& row : rows) {
    // Welford update in record order.
    double mean = 0, m2 = 0;
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.system == row.system && r.metric == row.metric) {
        ++n;
        const double delta = r.score - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (r.score - mean);
      }
    CHECK(row.n == n);
    CHECK(std::abs(row.mean - mean) <= 1e-12);
    // t quantile for 209 degrees of freedom.
    const double sd = std::sqrt(m2 / static_cast<double>(n - 1));
    REQUIRE(row.ci95);
    CHECK(*row.ci95 == doctest::Approx(1.97137946154570 * sd / std::sqrt(static_cast<double>(n))).epsilon(1e-10));
  }
  const auto single = mushra_summary({rec("a", "u", "r", Metric::Similarity, 40)});
  CHECK_FALSE(single[0].ci95.has_value());
}

TEST_CASE("SNR buckets are half-open and clean stimuli are separate") {
  std::vector<ScoreRecord> rs{rec("s", "a", "r", Metric::Naturalness, 10), rec("s", "b", "r", Metric::Naturalness, 20),
                              rec("s", "c", "r", Metric::Naturalness, 30), rec("s", "d", "r", Metric::Naturalness, 40)};
  SnrMap snr{{"a", 4.0}, {"b", 5.0}, {"c", std::nullopt}, {"d", 12.0}};
  const auto rows = snr_bucket_report(rs, snr, {0, 5, 10});
  std::map<std::string, BucketRow> by;
  for (const auto& r : rows) by[r.bucket] = r;
  CHECK(by.at("[0,5)").n == 1);
  CHECK(*by.at("[0,5)").mean == 10.0);
  CHECK(by.at("[5,10)").n == 1);
  CHECK(*by.at("[5,10)").mean == 20.0);
  CHECK(by.at("clean").n == 1);
  CHECK(by.at(">=10").n == 1);
  CHECK(by.count("<0") == 0);
  CHECK_THROWS(snr_bucket_report(rs, snr, {0, 5, 5}));
  CHECK_THROWS(snr_bucket_report(rs, {{"a", 1.0}}, {0, 5}));

  const auto empty = snr_bucket_report({rec("s", "a", "r", Metric::Naturalness, 10)}, {{"a", 1.0}}, {0, 5, 10});
  bool saw_empty = false;
  for (const auto& r : empty)
    if (r.bucket == "[5,10)" && r.metric == Metric::Naturalness) {
      saw_empty = true;
      CHECK(r.n == 0);
      CHECK_FALSE(r.mean.has_value());
    }
  CHECK(saw_empty);
}

TEST_CASE("pairwise tests pair on utterance and rater") {
  std::vector<ScoreRecord> rs;
  for (int u = 0; u < 3; ++u) {
    rs.push_back(rec("A", "u" + std::to_string(u), "r", Metric::Similarity, 50.0 + u + 1));
    rs.push_back(rec("B", "u" + std::to_string(u), "r", Metric::Similarity, 50.0));
  }
  const auto rows = pairwise_wilcoxon(rs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].system_a == "A");
  CHECK(rows[0].n_pairs == 3);
  CHECK(rows[0].result->p_value == 0.25);
  CHECK(rows[1].result->statistic == 0.0);
  rs.push_back(rs.front());
  CHECK_THROWS_WITH(pairwise_wilcoxon(rs), doctest::Contains("duplicate"));
}

TEST_CASE("score records parse, validate and round trip") {
  const auto r = score_from_line(R"({"system":"s","utterance":"u","rater":"r","metric":"similarity","score":42.5,"snr_db":"clean"})", 1);
  CHECK(r.metric == Metric::Similarity);
  CHECK_FALSE(r.snr_db.has_value());
  CHECK(score_from_line(score_to_line(r), 1) == r);
  const auto noisy = rec("s", "u", "r", Metric::Naturalness, 0, -2.5);
  CHECK(score_from_line(score_to_line(noisy), 1) == noisy);
  CHECK_THROWS(score_from_line(R"({"system":"s","utterance":"u","rater":"r","metric":"similarity","score":101})", 3));
  CHECK_THROWS(score_from_line(R"({"system":"s","utterance":"u","rater":"r","metric":"mos","score":1})", 3));
  CHECK_THROWS(score_from_line("not json", 3));
}

TEST_CASE("formatted tables have headers and NA for missing values") {
  const auto text = format_summary(mushra_summary({rec("a", "u", "r", Metric::Similarity, 40)}));
  CHECK(text.rfind("system\tmetric\tmean\tci95\tn\n", 0) == 0);
  CHECK(text.find("NA") != std::string::npos);
}

TEST_CASE("mel MSE on a small case") {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 1, 0, 3, 8;
  CHECK(mel_mse(a, b) == 5.0);
  CHECK_THROWS(mel_mse(a, Eigen::MatrixXd::Zero(3, 2)));
}

TEST_CASE("npy files round trip exactly") {
  const fs::path dir = fs::path(VOICY_TEST_TMP);
  fs::create_directories(dir);
  Eigen::MatrixXd m(3, 5);
  Rng rng(1);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  write_npy(dir / "m.npy", m);
  CHECK(read_npy(dir / "m.npy") == m);
  std::ifstream in(dir / "m.npy", std::ios::binary);
  std::string head(10, '\0');
  in.read(head.data(), 10);
  CHECK(head.substr(1, 5) == "NUMPY");
  const auto header_len = static_cast<unsigned char>(head[8]) | static_cast<unsigned char>(head[9]) << 8;
  CHECK((10 + header_len) % 64 == 0);
}
