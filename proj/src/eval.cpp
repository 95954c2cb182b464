// SPDX-License-Identifier: Apache-2.0
#include "voicy/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "voicy/model.hpp"

namespace voicy::eval {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Metric m) { return m == Metric::Naturalness ? "naturalness" : "similarity"; }

Metric parse_metric(const std::string& s) {
  if (s == "naturalness") return Metric::Naturalness;
  if (s == "similarity") return Metric::Similarity;
  throw std::invalid_argument("unknown metric '" + s + "'");
}

std::string to_string(TestMode m) {
  switch (m) {
    case TestMode::Exact: return "exact";
    case TestMode::NormalApprox: return "normal_approx";
    case TestMode::Auto: return "auto";
  }
  return "auto";
}

ScoreRecord score_from_line(const std::string& line, std::size_t line_no) {
  const auto fail = [&](const std::string& what) {
    return std::invalid_argument("scores line " + std::to_string(line_no) + ": " + what);
  };
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
  ScoreRecord r;
  try {
    r.system = j.at("system").get<std::string>();
    r.utterance = j.at("utterance").get<std::string>();
    r.rater = j.at("rater").get<std::string>();
    r.metric = parse_metric(j.at("metric").get<std::string>());
    r.score = j.at("score").get<double>();
    if (j.contains("snr_db")) {
      const auto& s = j.at("snr_db");
      if (s.is_string()) {
        if (s.get<std::string>() != "clean") throw fail("snr_db must be a number or \"clean\"");
      } else {
        r.snr_db = s.get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw fail(e.what());
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
  if (r.system.empty() || r.utterance.empty()) throw fail("system and utterance must be non-empty");
  if (!(r.score >= 0.0 && r.score <= 100.0)) throw fail("score outside [0, 100]");
  return r;
}

std::string score_to_line(const ScoreRecord& r) {
  ordered_json j;
  j["system"] = r.system;
  j["utterance"] = r.utterance;
  j["rater"] = r.rater;
  j["metric"] = to_string(r.metric);
  j["score"] = r.score;
  if (r.snr_db)
    j["snr_db"] = *r.snr_db;
  else
    j["snr_db"] = "clean";
  return j.dump();
}

std::vector<ScoreRecord> load_scores(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scores file " + path.string());
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(score_from_line(line, n));
  }
  return out;
}

SnrMap load_snr_map(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open SNR map " + path.string());
  SnrMap out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id, value;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, value, '\t') || id.empty())
      throw std::invalid_argument("SNR map line " + std::to_string(n) + ": expected id<TAB>snr");
    if (value == "clean") {
      out[id] = std::nullopt;
    } else {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || !std::isfinite(v))
        throw std::invalid_argument("SNR map line " + std::to_string(n) + ": bad SNR '" + value + "'");
      out[id] = v;
    }
  }
  return out;
}

SnrMap snr_map_from_scores(const std::vector<ScoreRecord>& records) {
  SnrMap out;
  for (const auto& r : records) {
    const auto [it, inserted] = out.emplace(r.utterance, r.snr_db);
    if (!inserted && it->second != r.snr_db)
      throw std::invalid_argument("utterance '" + r.utterance + "' has conflicting SNR tags");
  }
  return out;
}

// -- Wilcoxon ---------------------------------------------------------------

namespace {

struct RankedDifferences {
  std::vector<long> doubled_ranks;  // 2 x average rank, always an integer
  std::vector<bool> positive;
  double tie_term = 0.0;            // sum of t^3 - t over tie groups
};

RankedDifferences rank_differences(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("wilcoxon: samples differ in length");
  if (x.empty()) throw std::invalid_argument("wilcoxon: empty sample");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] - y[i];
    if (!std::isfinite(v)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (v != 0.0) d.push_back(v);
  }
  if (d.empty()) throw std::invalid_argument("wilcoxon: degenerate sample (all differences are zero)");
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
  RankedDifferences out;
  out.doubled_ranks.assign(d.size(), 0);
  out.positive.assign(d.size(), false);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    // Ranks i+1 .. j+1 averaged, doubled: (i+1) + (j+1).
    const long doubled = static_cast<long>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) out.doubled_ranks[order[k]] = doubled;
    const double t = static_cast<double>(j - i + 1);
    out.tie_term += t * t * t - t;
    i = j + 1;
  }
  for (std::size_t k = 0; k < d.size(); ++k) out.positive[k] = d[k] > 0.0;
  return out;
}

}  // namespace

TestResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                TestMode mode, int exact_threshold) {
  if (exact_threshold < 0 || exact_threshold > 50)
    throw std::invalid_argument("wilcoxon: exact threshold must lie in [0, 50]");
  const RankedDifferences rd = rank_differences(x, y);
  const int n = static_cast<int>(rd.doubled_ranks.size());
  long total2 = 0, w2 = 0;
  for (int i = 0; i < n; ++i) {
    total2 += rd.doubled_ranks[i];
    if (rd.positive[i]) w2 += rd.doubled_ranks[i];
  }
  TestResult r;
  r.n_effective = n;
  r.statistic = static_cast<double>(w2) / 2.0;
  if (mode == TestMode::Auto) mode = n <= exact_threshold ? TestMode::Exact : TestMode::NormalApprox;
  if (mode == TestMode::Exact && n > exact_threshold)
    throw std::invalid_argument("wilcoxon: exact mode needs n_effective <= " + std::to_string(exact_threshold) +
                                ", got " + std::to_string(n));
  r.mode = mode;

  if (mode == TestMode::Exact) {
    // counts[s]: sign assignments whose positive doubled ranks sum to s.
    std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
    counts[0] = 1.0;
    long reach = 0;
    for (long rank : rd.doubled_ranks) {
      for (long s = reach; s >= 0; --s)
        if (counts[s] != 0.0) counts[s + rank] += counts[s];
      reach += rank;
    }
    const long observed = std::labs(2 * w2 - total2);
    double extreme = 0.0;
    for (long s = 0; s <= total2; ++s)
      if (std::labs(2 * s - total2) >= observed) extreme += counts[s];
    r.p_value = std::min(1.0, std::ldexp(extreme, -n));
    return r;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - rd.tie_term / 48.0;
  const double dev = std::abs(r.statistic - mean) - 0.5;
  if (dev <= 0.0 || var <= 0.0) {
    r.p_value = 1.0;
  } else {
    r.p_value = std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
  }
  return r;
}

// -- Aggregation ------------------------------------------------------------

namespace {

SummaryRow summarize(const std::string& system, Metric metric, const std::vector<double>& scores) {
  SummaryRow row;
  row.system = system;
  row.metric = metric;
  row.n = scores.size();
  double sum = 0.0;
  for (double s : scores) sum += s;
  row.mean = sum / static_cast<double>(scores.size());
  if (scores.size() >= 2) {
    double ss = 0.0;
    for (double s : scores) ss += (s - row.mean) * (s - row.mean);
    const double sd = std::sqrt(ss / static_cast<double>(scores.size() - 1));
    const boost::math::students_t dist(static_cast<double>(scores.size() - 1));
    row.ci95 = boost::math::quantile(dist, 0.975) * sd / std::sqrt(static_cast<double>(scores.size()));
  }
  return row;
}

std::string bucket_label(double lo, double hi) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "[%g,%g)", lo, hi);
  return buf;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::vector<SummaryRow> mushra_summary(const std::vector<ScoreRecord>& records) {
  std::map<std::pair<std::string, Metric>, std::vector<double>> groups;
  for (const auto& r : records) groups[{r.system, r.metric}].push_back(r.score);
  std::vector<SummaryRow> rows;
  for (const auto& [key, scores] : groups) rows.push_back(summarize(key.first, key.second, scores));
  return rows;
}

std::vector<BucketRow> snr_bucket_report(const std::vector<ScoreRecord>& records, const SnrMap& snr,
                                         const std::vector<double>& edges) {
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("SNR bucket edges must be strictly increasing");
  for (double e : edges)
    if (!std::isfinite(e)) throw std::invalid_argument("SNR bucket edges must be finite");

  std::vector<std::string> labels;  // in output order
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) labels.push_back(bucket_label(edges[i], edges[i + 1]));
  const auto bucket_of = [&](const std::optional<double>& v) -> std::string {
    if (!v) return "clean";
    if (edges.empty()) return "snr";
    if (*v < edges.front()) return "<" + fmt(edges.front());
    if (*v >= edges.back()) return ">=" + fmt(edges.back());
    const auto it = std::upper_bound(edges.begin(), edges.end(), *v);
    const std::size_t i = static_cast<std::size_t>(it - edges.begin()) - 1;
    return labels[i];
  };

  std::set<std::pair<std::string, Metric>> groups;
  std::map<std::tuple<std::string, std::string, Metric>, std::vector<double>> cells;
  std::set<std::string> extra;
  for (const auto& r : records) {
    const auto it = snr.find(r.utterance);
    if (it == snr.end()) throw std::invalid_argument("no SNR or clean tag for utterance '" + r.utterance + "'");
    const std::string b = bucket_of(it->second);
    groups.insert({r.system, r.metric});
    cells[{b, r.system, r.metric}].push_back(r.score);
    if (std::find(labels.begin(), labels.end(), b) == labels.end()) extra.insert(b);
  }
  std::vector<std::string> order;
  if (!edges.empty() && extra.contains("<" + fmt(edges.front()))) order.push_back("<" + fmt(edges.front()));
  order.insert(order.end(), labels.begin(), labels.end());
  if (!edges.empty() && extra.contains(">=" + fmt(edges.back()))) order.push_back(">=" + fmt(edges.back()));
  if (extra.contains("snr")) order.push_back("snr");
  if (extra.contains("clean")) order.push_back("clean");

  std::vector<BucketRow> rows;
  for (const auto& b : order)
    for (const auto& [system, metric] : groups) {
      BucketRow row;
      row.bucket = b;
      row.system = system;
      row.metric = metric;
      const auto it = cells.find({b, system, metric});
      if (it != cells.end()) {
        row.n = it->second.size();
        row.mean = summarize(system, metric, it->second).mean;
      }
      rows.push_back(row);
    }
  return rows;
}

std::vector<PairwiseRow> pairwise_wilcoxon(const std::vector<ScoreRecord>& records, TestMode mode,
                                           int exact_threshold) {
  // metric -> system -> (utterance, rater) -> score
  std::map<Metric, std::map<std::string, std::map<std::pair<std::string, std::string>, double>>> table;
  for (const auto& r : records) {
    auto& cell = table[r.metric][r.system];
    if (!cell.emplace(std::make_pair(r.utterance, r.rater), r.score).second)
      throw std::invalid_argument("duplicate score for system '" + r.system + "', utterance '" + r.utterance +
                                  "', rater '" + r.rater + "'");
  }
  std::vector<PairwiseRow> rows;
  for (const auto& [metric, systems] : table)
    for (const auto& [a, sa] : systems)
      for (const auto& [b, sb] : systems) {
        if (a == b) continue;
        std::vector<double> x, y;
        for (const auto& [key, score] : sa) {
          const auto it = sb.find(key);
          if (it == sb.end()) continue;
          x.push_back(score);
          y.push_back(it->second);
        }
        PairwiseRow row;
        row.metric = metric;
        row.system_a = a;
        row.system_b = b;
        row.n_pairs = x.size();
        bool any = false;
        for (std::size_t i = 0; i < x.size(); ++i) any |= x[i] != y[i];
        if (any) row.result = wilcoxon_signed_rank(x, y, mode, exact_threshold);
        rows.push_back(row);
      }
  return rows;
}

std::string format_summary(const std::vector<SummaryRow>& rows) {
  std::string out = "system\tmetric\tmean\tci95\tn\n";
  for (const auto& r : rows)
    out += r.system + "\t" + to_string(r.metric) + "\t" + fmt(r.mean) + "\t" + (r.ci95 ? fmt(*r.ci95) : "NA") +
           "\t" + std::to_string(r.n) + "\n";
  return out;
}

std::string format_buckets(const std::vector<BucketRow>& rows) {
  std::string out = "bucket\tsystem\tmetric\tmean\tn\n";
  for (const auto& r : rows)
    out += r.bucket + "\t" + r.system + "\t" + to_string(r.metric) + "\t" + (r.mean ? fmt(*r.mean) : "NA") +
           "\t" + std::to_string(r.n) + "\n";
  return out;
}

std::string format_pairwise(const std::vector<PairwiseRow>& rows) {
  std::string out = "metric\tsystem_a\tsystem_b\tn_pairs\tn_effective\tW\tp_value\tmode\n";
  for (const auto& r : rows) {
    out += to_string(r.metric) + "\t" + r.system_a + "\t" + r.system_b + "\t" + std::to_string(r.n_pairs) + "\t";
    if (r.result)
      out += std::to_string(r.result->n_effective) + "\t" + fmt(r.result->statistic) + "\t" +
             fmt(r.result->p_value) + "\t" + to_string(r.result->mode) + "\n";
    else
      out += "0\tNA\tNA\tNA\n";
  }
  return out;
}

// -- Objective proxies ------------------------------------------------------

double mel_mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mel_mse: shapes differ (" + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()) + " frames)");
  if (a.size() == 0) throw std::invalid_argument("mel_mse: empty input");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

ObjectiveScores objective_proxies(const Eigen::MatrixXd& converted, const Eigen::MatrixXd& reference_clean,
                                  const Eigen::MatrixXd& target_ref, const VoicyModel& model) {
  ObjectiveScores s;
  s.mel_mse = mel_mse(converted, reference_clean);
  const Eigen::RowVectorXd a = model.encode_speaker(converted);
  const Eigen::RowVectorXd b = model.encode_speaker(target_ref);
  s.speaker_cosine = a.dot(b) / (a.norm() * b.norm());
  return s;
}

}  // namespace voicy::eval
