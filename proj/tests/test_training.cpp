#include "nvs/training.hpp"
#include "support.hpp"

#include <doctest.h>

#include <numeric>
#include <sstream>

using namespace nvs;
using namespace nvs::testing;
namespace fs = std::filesystem;

namespace {

PairBatch random_pairs(const XUNetConfig& c, int b, Rng& rng) {
  auto d = random_batch<float>(c, b, rng);
  PairBatch p;
  p.x1 = d.x;
  p.x2 = Tensor<float>(d.x.shape());
  for (Index i = 0; i < p.x2.size(); ++i) p.x2[i] = static_cast<float>(rng.uniform(-1, 1));
  p.p1 = d.pose_x;
  p.p2 = d.pose_z;
  p.camera = d.camera;
  return p;
}

double mean(const std::vector<double>& v, std::size_t a, std::size_t b) {
  return std::accumulate(v.begin() + a, v.begin() + b, 0.0) / static_cast<double>(b - a);
}

}  // namespace

TEST_CASE("initial loss is the variance of the noise") {
  auto tc = TrainConfig::smoke();
  Trainer trainer(XUNetConfig::tiny(), tc);
  Rng rng(1);
  auto r = trainer.train_step(random_pairs(XUNetConfig::tiny(), 8, rng));
  CHECK(std::abs(r.loss - 1.0) <= 0.05);
}

TEST_CASE("EMA equals the parameters at step zero and uses the half-life decay") {
  Trainer trainer(micro_config(), TrainConfig::smoke());
  const auto& p = *trainer.state().params;
  for (std::size_t i = 0; i < p.size(); ++i) CHECK((trainer.state().ema[i].array() == p[i].value().array()).all());
  auto c = TrainConfig::paper();
  CHECK(c.ema_decay() == doctest::Approx(0.999823).epsilon(1e-6));
  CHECK(c.ema_decay() == doctest::Approx(std::exp(128 * std::log(0.5) / 500000.0)));
  for (int b : {1, 128, 100000}) {
    c.batch_size = b;
    CHECK(c.ema_decay() > 0.0);
    CHECK(c.ema_decay() < 1.0);
  }
  // Constant parameters: after half_life / batch updates the gap halves.
  c.batch_size = 1000;
  std::vector<Tensor<float>> ema{Tensor<float>::zeros({1})};
  ParamRegistry reg;
  reg.add("w", {1}, Init::ones());
  ParamStore<float> params(reg);
  Rng rng(0);
  params.initialize(rng);
  for (int i = 0; i < 500; ++i) ema_update(ema, params, c.ema_decay());
  CHECK(ema[0][0] == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("linear warmup") {
  auto c = TrainConfig::paper();
  CHECK(c.lr_at(5e6) == doctest::Approx(0.5e-4));
  CHECK(c.lr_at(0) == 0.0);
  CHECK(c.lr_at(2e7) == doctest::Approx(1e-4));
  Trainer trainer(micro_config(), TrainConfig::smoke());
  Rng rng(2);
  auto r = trainer.train_step(random_pairs(micro_config(), 8, rng));
  CHECK(r.lr == doctest::Approx(1e-3 * 8 / 400));
}

TEST_CASE("full-size training preset hyperparameters") {
  auto c = TrainConfig::paper();
  CHECK(c.batch_size == 128);
  CHECK(c.peak_lr == 1e-4);
  CHECK(c.warmup_examples == 1e7);
  CHECK(c.uncond_prob == 0.1);
  CHECK(c.adam_beta1 == 0.9);
  CHECK(c.adam_beta2 == 0.99);
  CHECK(c.adam_eps == 1e-8);
  CHECK(c.weight_decay == 0.0);
  CHECK(c.ema_half_life_examples == 5e5);
}

TEST_CASE("diffusion training has no gradient clipping") {
  nlohmann::json j = TrainConfig::paper();
  for (const auto& [key, value] : j.items()) CHECK(key.find("clip") == std::string::npos);
  // First Adam step moves every parameter with a nonzero gradient by lr in
  // the sign direction, with no rescaling of the gradient.
  Trainer trainer(micro_config(), TrainConfig::smoke());
  auto& params = *trainer.state().params;
  std::vector<Tensor<float>> before;
  for (std::size_t i = 0; i < params.size(); ++i) before.push_back(params[i].value());
  Rng rng(3);
  const auto r = trainer.train_step(random_pairs(micro_config(), 8, rng));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    for (Index k = 0; k < g.size(); ++k) {
      if (std::abs(g[k]) < 1e-4f) continue;
      const float expected = before[i][k] - static_cast<float>(r.lr) * (g[k] > 0 ? 1.0f : -1.0f);
      CHECK(params[i].value()[k] == doctest::Approx(expected).epsilon(1e-3));
    }
  }
}

TEST_CASE("unconditional fraction over 10000 steps") {
  auto tc = TrainConfig::smoke();
  tc.batch_size = 1;
  Trainer trainer(micro_config(), tc);
  Rng rng(4);
  auto pairs = random_pairs(micro_config(), 1, rng);
  int uncond = 0;
  for (int i = 0; i < 10000; ++i) uncond += trainer.train_step(pairs).uncond;
  CHECK(std::abs(uncond / 10000.0 - 0.1) <= 0.01);
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto tc = TrainConfig::smoke();
  tc.batch_size = 2;
  std::vector<double> runs[2];
  for (auto& losses : runs) {
    Trainer trainer(XUNetConfig::tiny(), tc);
    Rng rng(5);
    for (int i = 0; i < 100; ++i) losses.push_back(trainer.train_step(random_pairs(XUNetConfig::tiny(), 2, rng)).loss);
  }
  CHECK(runs[0] == runs[1]);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  TempDir tmp("ckpt");
  auto tc = TrainConfig::smoke();
  tc.batch_size = 2;
  Trainer trainer(XUNetConfig::tiny(), tc);
  Rng data(6);
  for (int i = 0; i < 3; ++i) trainer.train_step(random_pairs(XUNetConfig::tiny(), 2, data));
  trainer.save(tmp.path / "a.ckpt");
  Trainer loaded = Trainer::load(tmp.path / "a.ckpt");
  loaded.save(tmp.path / "b.ckpt");
  CHECK(read_bytes(tmp.path / "a.ckpt") == read_bytes(tmp.path / "b.ckpt"));
  CHECK(loaded.state().step == 3);

  auto next = random_pairs(XUNetConfig::tiny(), 2, data);
  const double direct = trainer.train_step(next).loss;
  const double resumed = loaded.train_step(next).loss;
  CHECK(direct == resumed);
  const auto& a = *trainer.state().params;
  const auto& b = *loaded.state().params;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i].value().array() == b[i].value().array()).all());

  CHECK_THROWS_WITH(Trainer::load(tmp.path / "missing.ckpt"), doctest::Contains("checkpoint not found"));

  auto bytes = read_bytes(tmp.path / "a.ckpt");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(tmp.path / name, std::ios::binary) << content;
    return tmp.path / name;
  };
  auto versioned = bytes;
  versioned[8] = 7;
  CHECK_THROWS_WITH(Trainer::load(write("v.ckpt", versioned)), doctest::Contains("version mismatch"));
  auto flipped = bytes;
  flipped[flipped.size() - 5] ^= 0x10;
  CHECK_THROWS_WITH(Trainer::load(write("f.ckpt", flipped)), doctest::Contains("corrupt"));
  CHECK_THROWS_WITH(Trainer::load(write("t.ckpt", bytes.substr(0, bytes.size() / 2))), doctest::Contains("corrupt"));
  CHECK_THROWS_WITH(Trainer::load(write("g.ckpt", "garbage")), doctest::Contains("corrupt"));
}

TEST_CASE("sampling weights come from the EMA") {
  TempDir tmp("ema");
  Trainer trainer(micro_config(), TrainConfig::smoke());
  Rng rng(7);
  for (int i = 0; i < 3; ++i) trainer.train_step(random_pairs(micro_config(), 4, rng));
  trainer.save(tmp.path / "m.ckpt");
  auto loaded = load_model(tmp.path / "m.ckpt");
  for (std::size_t i = 0; i < loaded.params.size(); ++i) {
    CHECK((loaded.params[i].value().array() == trainer.state().ema[i].array()).all());
  }
}

TEST_CASE("key = value config files") {
  auto c = TrainConfig::from_text("# desk run\nbatch_size = 4\npeak_lr=3e-4 \nobjective = regression\n", TrainConfig::desk());
  CHECK(c.batch_size == 4);
  CHECK(c.peak_lr == 3e-4);
  CHECK(c.objective == Objective::regression);
  CHECK(c.warmup_examples == TrainConfig::desk().warmup_examples);
  CHECK_THROWS_WITH(TrainConfig::from_text("grad_clip = 1\n", {}), doctest::Contains("unknown key"));
  CHECK_THROWS_AS(TrainConfig::from_text("uncond_prob = 2\n", {}), std::invalid_argument);
  nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<TrainConfig>()) == j);
}

TEST_CASE("non-finite loss aborts") {
  Trainer trainer(micro_config(), TrainConfig::smoke());
  Rng rng(8);
  auto pairs = random_pairs(micro_config(), 2, rng);
  pairs.x2[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH(trainer.train_step(pairs), doctest::Contains("non-finite loss"));
}

TEST_CASE("regression objective trains at the minimum log-SNR") {
  auto tc = TrainConfig::smoke();
  tc.objective = Objective::regression;
  Trainer trainer(micro_config(), tc);
  Rng rng(9);
  auto r = trainer.train_step(random_pairs(micro_config(), 4, rng));
  CHECK(r.uncond == 0);
  CHECK(std::isfinite(r.loss));
}

TEST_CASE("loss decreases on an 8-scene dataset") {
  TempDir tmp("decrease");
  DatasetOptions o;
  o.num_scenes = 8;
  o.views_per_scene = 10;
  o.resolution = 16;
  o.seed = 10;
  make_dataset(tmp.path, o);
  auto data = load_dataset(tmp.path);
  auto tc = TrainConfig::smoke();
  tc.batch_size = 4;
  Trainer trainer(XUNetConfig::tiny(), tc);
  PairSampler sampler(data, "train", 11);
  auto losses = train_loop(trainer, sampler, 1000, nullptr);
  const double early = mean(losses, 0, 100), late = mean(losses, 900, 1000);
  MESSAGE("mean loss steps 0-100: " << early << ", steps 900-1000: " << late);
  CHECK(late < early);
}
