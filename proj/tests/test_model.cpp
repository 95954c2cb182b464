// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "voicy/checkpoint.hpp"
#include "voicy/gradcheck_suite.hpp"
#include "voicy/model.hpp"
#include "voicy/rng.hpp"
#include "voicy/training.hpp"

using namespace voicy;
using Mat = Eigen::MatrixXd;
namespace fs = std::filesystem;

namespace {

Mat random_mel(int frames, std::uint64_t seed, int mels = 80) {
  Rng rng(seed);
  Mat m(frames, mels);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-6.0, 1.0);
  return m;
}

std::vector<int> random_phonemes(int n, int inventory, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> p(n);
  for (auto& x : p) x = static_cast<int>(rng.index(static_cast<std::size_t>(inventory)));
  return p;
}

ModelConfig small_config(std::uint64_t seed = 0) {
  ModelConfig c = gradcheck_model_config(seed);
  return c;
}

UtterancePair make_pair(const ModelConfig& c, int frames, std::uint64_t seed) {
  UtterancePair p;
  p.source = random_mel(frames, seed * 4 + 1, c.n_mels);
  p.clean_target = random_mel(frames, seed * 4 + 2, c.n_mels);
  p.speaker_ref = random_mel(frames + 3, seed * 4 + 3, c.n_mels);
  p.phonemes = random_phonemes(7, c.inventory_size, seed * 4 + 4);
  return p;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

std::string temp_dir(const std::string& name) {
  const fs::path p = fs::path(VOICY_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("module output shapes follow the configuration") {
  const auto model = VoicyModel::create(ModelConfig{});
  const Mat mel = random_mel(160, 1);
  CHECK(model.encode_content(mel).rows() == 10);
  CHECK(model.encode_content(mel).cols() == 32);
  const auto u = model.encode_speaker(mel);
  CHECK(u.size() == 64);
  CHECK(u.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(model.encode_asr(mel).size() == model.encode_phonetic({1, 2, 3}).size());
  CHECK(model.encode_phonetic({4}).allFinite());
  const Mat out = model.decode(model.encode_content(mel), u, model.encode_asr(mel), 160);
  CHECK(out.rows() == 160);
  CHECK(out.cols() == 80);
  CHECK(model.convert(mel, random_mel(40, 2)).rows() == 160);
}

TEST_CASE("modules reject malformed inputs") {
  const auto model = VoicyModel::create(ModelConfig{});
  CHECK_THROWS(model.encode_speaker(random_mel(7, 1)));
  CHECK_THROWS(model.encode_asr(random_mel(7, 1)));
  CHECK_THROWS(model.encode_content(random_mel(15, 1)));
  CHECK_THROWS(model.encode_content(random_mel(32, 1, 40)));
  CHECK_THROWS(model.encode_phonetic({}));
  CHECK_THROWS(model.encode_phonetic({9}));
  CHECK_THROWS(model.encode_phonetic({-1}));
  const Mat mel = random_mel(32, 3);
  CHECK_THROWS(model.decode(model.encode_content(mel), Eigen::RowVectorXd::Zero(10), model.encode_asr(mel), 32));
  UtterancePair pair;
  pair.source = random_mel(32, 1);
  pair.clean_target = random_mel(31, 2);
  pair.speaker_ref = random_mel(32, 3);
  pair.phonemes = {1, 2};
  CHECK_THROWS_WITH(model.compute_loss(pair), doctest::Contains("frames"));
}

TEST_CASE("initialization is deterministic and the speaker encoder ignores the model seed") {
  ModelConfig a, b;
  a.seed = 3;
  b.seed = 4;
  const auto m1 = VoicyModel::create(a), m2 = VoicyModel::create(a), m3 = VoicyModel::create(b);
  CHECK(m1.parameters() == m2.parameters());
  const Mat mel = random_mel(48, 5);
  CHECK(m1.encode_speaker(mel) == m3.encode_speaker(mel));
  CHECK(m1.encode_content(mel) != m3.encode_content(mel));
  for (const auto& [path, p] : m1.parameters()) CHECK(p.trainable == !starts_with(path, "speaker/"));
}

TEST_CASE("phonetic encoder distinguishes a single substitution") {
  const auto model = VoicyModel::create(ModelConfig{});
  const auto p1 = model.encode_phonetic({1, 2, 3, 4, 5});
  const auto p2 = model.encode_phonetic({1, 2, 6, 4, 5});
  CHECK((p1 - p2).norm() > 0.0);
}

TEST_CASE("decoder output depends on the speaker embedding") {
  const auto model = VoicyModel::create(ModelConfig{});
  const Mat mel = random_mel(64, 8);
  const Mat c = model.encode_content(mel);
  const auto r = model.encode_asr(mel);
  const Mat a = model.decode(c, model.encode_speaker(random_mel(50, 9)), r, 64);
  const Mat b = model.decode(c, model.encode_speaker(random_mel(50, 10)), r, 64);
  CHECK((a - b).norm() > 0.0);
}

TEST_CASE("reconstruction loss vanishes when the decoder emits the clean target") {
  ModelConfig cfg = small_config();
  auto model = VoicyModel::create(cfg);
  Eigen::RowVectorXd frame = random_mel(1, 11, cfg.n_mels).row(0);
  auto& w = model.parameters().at("decoder/out/w").value;
  auto& b = model.parameters().at("decoder/out/b").value;
  w.setZero();
  b = frame;
  UtterancePair pair = make_pair(cfg, 32, 1);
  pair.clean_target = frame.replicate(32, 1);
  CHECK(model.compute_loss(pair).recon == 0.0);
}

TEST_CASE("phonetic loss vanishes when the acoustic vector equals the phonetic one") {
  ModelConfig cfg = small_config();
  auto model = VoicyModel::create(cfg);
  UtterancePair pair = make_pair(cfg, 32, 2);
  model.parameters().at("asr/proj/w").value.setZero();
  model.parameters().at("asr/proj/b").value = model.encode_phonetic(pair.phonemes);
  CHECK(model.compute_loss(pair).phonetic == 0.0);
}

TEST_CASE("weighted loss arithmetic") {
  grad::Parameters none;
  grad::Tape<double> tape(none);
  const auto one = [&](double v) { return tape.constant(Mat::Constant(1, 1, v)); };
  const auto total = tape.weighted_sum({{1.0, one(1.0)}, {2.0, one(0.5)}, {3.0, one(0.2)}});
  CHECK(tape.scalar(total) == doctest::Approx(2.6).epsilon(1e-15));
}

TEST_CASE("total loss decomposes into its weighted terms") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig cfg = small_config(seed);
    cfg.beta = 0.3 + static_cast<double>(seed);
    cfg.lambda = 2.5 - 0.4 * static_cast<double>(seed);
    const auto model = VoicyModel::create(cfg);
    const auto r = model.compute_loss(make_pair(cfg, 32, seed));
    CHECK(std::abs(r.total - (r.recon + cfg.beta * r.phonetic + cfg.lambda * r.content)) <= 1e-10);
  }
}

TEST_CASE("with zero phonetic weight the acoustic encoder gets exactly zero gradient") {
  ModelConfig cfg = small_config();
  cfg.beta = 0.0;
  const auto model = VoicyModel::create(cfg);
  grad::Gradients<double> g;
  model.compute_loss(make_pair(cfg, 32, 3), &g);
  std::size_t seen = 0;
  for (const auto& [path, m] : g)
    if (starts_with(path, "asr/")) {
      ++seen;
      CHECK(m.cwiseAbs().maxCoeff() == 0.0);
    }
  CHECK(seen > 0);
}

TEST_CASE("no gradient reaches the speaker encoder") {
  const ModelConfig cfg = small_config();
  const auto model = VoicyModel::create(cfg);
  grad::Gradients<double> g;
  model.compute_loss(make_pair(cfg, 32, 4), &g);
  for (const auto& [path, m] : g) CHECK_FALSE(starts_with(path, "speaker/"));
}

TEST_CASE("composite loss matches central differences on a 32-frame pair") {
  const ModelConfig cfg = gradcheck_model_config(5);
  auto model = VoicyModel::create(cfg);
  const auto report = gradient_check_loss(model, gradcheck_pair(cfg, 32, 5), {});
  CHECK(report.checked == report.total_scalars);
  CHECK(report.max_relative_error < 1e-4);
}

TEST_CASE("gradient check detects a one percent error in one gradient entry") {
  const ModelConfig cfg = gradcheck_model_config(6);
  auto model = VoicyModel::create(cfg);
  const UtterancePair pair = gradcheck_pair(cfg, 32, 6);
  DetachedTargets fixed;
  grad::Gradients<double> g;
  model.compute_loss(pair, &g, nullptr, &fixed);
  // Largest entry of the decoder output weights, scaled by 1.01.
  auto& gw = g.at("decoder/out/w");
  Eigen::Index r = 0, c = 0;
  gw.cwiseAbs().maxCoeff(&r, &c);
  gw(r, c) *= 1.01;
  const std::function<double(const grad::Parameters&)> loss = [&](const grad::Parameters& p) {
    return VoicyModel(cfg, p).compute_loss(pair, nullptr, &fixed).total;
  };
  const auto report = grad::gradient_check(model.parameters(), loss, g, {});
  CHECK(report.max_relative_error > 1e-3);
  CHECK(report.worst.path == "decoder/out/w");
}

TEST_CASE("train_step is deterministic, keeps the speaker encoder and uses threads consistently") {
  const ModelConfig cfg = small_config();
  std::vector<UtterancePair> batch;
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(make_pair(cfg, 32, 10 + i));
  auto run = [&](int threads) {
    auto model = VoicyModel::create(cfg);
    grad::Adam<double> opt;
    std::vector<LossReport> reports;
    for (int s = 0; s < 3; ++s) reports.push_back(train_step(model, opt, batch, threads));
    return std::make_tuple(model.parameters(), opt.state(), reports);
  };
  const auto [p1, o1, r1] = run(1);
  const auto [p2, o2, r2] = run(1);
  const auto [p3, o3, r3] = run(3);
  CHECK(p1 == p2);
  CHECK(o1 == o2);
  CHECK(p1 == p3);
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].total == r2[i].total);
    CHECK(std::abs(r1[i].total - (r1[i].recon + cfg.beta * r1[i].phonetic + cfg.lambda * r1[i].content)) <=
          1e-10);
  }
  const auto fresh = VoicyModel::create(cfg);
  for (const auto& [path, p] : fresh.parameters()) {
    const bool same = p.value == p1.at(path).value;
    CHECK(same == starts_with(path, "speaker/"));
  }
}

TEST_CASE("speaker encoder bytes survive 100 training steps") {
  ModelConfig cfg = small_config(9);
  auto model = VoicyModel::create(cfg);
  std::vector<std::vector<unsigned char>> before;
  for (const auto& [path, p] : model.parameters())
    if (starts_with(path, "speaker/")) {
      std::vector<unsigned char> bytes(static_cast<std::size_t>(p.value.size()) * sizeof(double));
      std::memcpy(bytes.data(), p.value.data(), bytes.size());
      before.push_back(bytes);
    }
  grad::Adam<double> opt(grad::AdamConfig{1e-2, 0.9, 0.999, 1e-8});
  std::vector<UtterancePair> batch{make_pair(cfg, 24, 1), make_pair(cfg, 24, 2)};
  for (int s = 0; s < 100; ++s) train_step(model, opt, batch);
  std::size_t i = 0;
  for (const auto& [path, p] : model.parameters())
    if (starts_with(path, "speaker/")) {
      CHECK(std::memcmp(before[i].data(), p.value.data(), before[i].size()) == 0);
      ++i;
    }
  CHECK(i == before.size());
}

TEST_CASE("non-finite loss raises diverged and leaves the state untouched") {
  const ModelConfig cfg = small_config();
  auto model = VoicyModel::create(cfg);
  grad::Adam<double> opt;
  UtterancePair pair = make_pair(cfg, 32, 1);
  pair.clean_target(0, 0) = 1e200;  // squares to infinity
  const auto before = model.parameters();
  CHECK_THROWS_WITH(train_step(model, opt, {pair}), doctest::Contains("diverged"));
  CHECK(model.parameters() == before);
  CHECK(opt.state().step == 0);
}

TEST_CASE("standardization round trip and fitting") {
  ModelConfig cfg;
  std::vector<Mat> mels{random_mel(40, 1), random_mel(30, 2)};
  fit_standardization(cfg, mels);
  const auto model = VoicyModel::create(cfg);
  const Mat z = model.standardize(mels[0]);
  CHECK((model.destandardize(z) - mels[0]).cwiseAbs().maxCoeff() < 1e-12);
  Mat all(70, 80);
  all << mels[0], mels[1];
  const Mat zs = model.standardize(all);
  CHECK(zs.colwise().mean().cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("checkpoint round trip restores model, optimizer and config") {
  const ModelConfig cfg = small_config(2);
  auto model = VoicyModel::create(cfg);
  grad::Adam<double> opt;
  train_step(model, opt, {make_pair(cfg, 32, 1)});
  TrainConfig tc;
  tc.seed = 2;
  const fs::path path = fs::path(temp_dir("ckpt")) / "model.bin";
  save_checkpoint(make_checkpoint(model, opt, tc), path);
  CHECK(fs::exists(checkpoint_sidecar_path(path)));
  const auto [restored, state] = restore_checkpoint(load_checkpoint(path));
  CHECK(restored.parameters() == model.parameters());
  CHECK(state == opt.state());
  CHECK(restored.config().to_json() == cfg.to_json());
  CHECK(checkpoint_train_config(load_checkpoint(path)).seed == 2);

  // Saving again reproduces the same bytes.
  const fs::path again = path.parent_path() / "again.bin";
  save_checkpoint(make_checkpoint(restored, grad::Adam<double>(state), tc), again);
  std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const ModelConfig cfg = small_config();
  const auto model = VoicyModel::create(cfg);
  const fs::path dir = temp_dir("ckpt_bad");
  const fs::path good = dir / "good.bin";
  save_checkpoint(make_checkpoint(model, grad::Adam<double>(), TrainConfig{}), good);
  std::ifstream in(good, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return dir / name;
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_WITH(load_checkpoint(write("flip.bin", flipped)), doctest::Contains("checksum"));
  CHECK_THROWS_WITH(load_checkpoint(write("magic.bin", "NOTVOICY" + bytes.substr(8))), doctest::Contains("magic"));
  CHECK_THROWS(load_checkpoint(write("short.bin", bytes.substr(0, 20))));
  CHECK_THROWS(load_checkpoint(dir / "missing.bin"));

  // A structurally valid checkpoint whose parameters do not fit the config.
  Checkpoint wrong = make_checkpoint(model, grad::Adam<double>(), TrainConfig{});
  wrong.params.at("decoder/out/b").value = Mat::Zero(1, 3);
  save_checkpoint(wrong, dir / "shape.bin");
  CHECK_THROWS(restore_checkpoint(load_checkpoint(dir / "shape.bin")));
  Checkpoint thawed = make_checkpoint(model, grad::Adam<double>(), TrainConfig{});
  thawed.params.set_trainable("speaker/", true);
  save_checkpoint(thawed, dir / "thawed.bin");
  CHECK_THROWS(restore_checkpoint(load_checkpoint(dir / "thawed.bin")));
}

TEST_CASE("learning-rate schedule decays by cosine and then holds") {
  TrainConfig tc;
  tc.optimizer.learning_rate = 1e-3;
  tc.decay_steps = 100;
  tc.final_lr_fraction = 0.1;
  CHECK(tc.learning_rate_at(1) == doctest::Approx(1e-3).epsilon(1e-3));
  CHECK(tc.learning_rate_at(100) == doctest::Approx(1e-4));
  CHECK(tc.learning_rate_at(1000) == doctest::Approx(1e-4));
  for (int s = 2; s <= 100; ++s) CHECK(tc.learning_rate_at(s) <= tc.learning_rate_at(s - 1));
  tc.decay_steps = 0;
  CHECK(tc.learning_rate_at(50) == 1e-3);
}

TEST_CASE("model configuration survives JSON") {
  ModelConfig cfg = small_config(3);
  fit_standardization(cfg, {random_mel(20, 1, cfg.n_mels)});
  const auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  auto bad = cfg.to_json();
  bad["content"]["downsample"] = 0;
  CHECK_THROWS(ModelConfig::from_json(bad));
}
