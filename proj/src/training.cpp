#include "nvs/training.hpp"

#include "nvs/hash.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace nvs {

namespace fs = std::filesystem;
using nlohmann::json;

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 16;
  c.peak_lr = 2e-4;
  c.warmup_examples = 16'000;
  c.ema_half_life_examples = 20'000;
  c.total_steps = 20'000;
  c.log_every = 50;
  c.checkpoint_every = 1000;
  return c;
}

TrainConfig TrainConfig::smoke() {
  TrainConfig c;
  c.batch_size = 8;
  c.peak_lr = 1e-3;
  c.warmup_examples = 400;
  c.ema_half_life_examples = 200;
  c.total_steps = 200;
  c.log_every = 10;
  return c;
}

TrainConfig TrainConfig::named(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  if (name == "smoke") return smoke();
  throw std::invalid_argument("unknown train config '" + name + "' (expected paper, desk or smoke)");
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

TrainConfig TrainConfig::from_text(const std::string& text, TrainConfig base) {
  json j = base;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!j.contains(key)) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (j[key].is_string()) {
      j[key] = value;
    } else {
      try {
        j[key] = json::parse(value);
      } catch (const json::exception&) {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
      }
    }
  }
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), std::move(base));
}

void TrainConfig::validate() const {
  if (batch_size <= 0 || peak_lr <= 0 || warmup_examples <= 0 || ema_half_life_examples <= 0 || total_steps < 0 ||
      adam_eps <= 0 || weight_decay < 0 || log_every <= 0 || checkpoint_every < 0) {
    throw std::invalid_argument("invalid train config: sizes, rates and intervals must be positive");
  }
  if (!(uncond_prob >= 0 && uncond_prob <= 1)) throw std::invalid_argument("invalid train config: uncond_prob outside [0, 1]");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw std::invalid_argument("invalid train config: Adam betas outside [0, 1)");
  }
}

double TrainConfig::lr_at(double examples_seen) const { return peak_lr * std::min(1.0, examples_seen / warmup_examples); }

double TrainConfig::ema_decay() const { return std::pow(0.5, batch_size / ema_half_life_examples); }

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"peak_lr", c.peak_lr},
           {"warmup_examples", c.warmup_examples},
           {"uncond_prob", c.uncond_prob},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay},
           {"ema_half_life_examples", c.ema_half_life_examples},
           {"total_steps", c.total_steps},
           {"seed", c.seed},
           {"log_every", c.log_every},
           {"checkpoint_every", c.checkpoint_every},
           {"objective", c.objective == Objective::diffusion ? "diffusion" : "regression"}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_examples = j.value("warmup_examples", d.warmup_examples);
  c.uncond_prob = j.value("uncond_prob", d.uncond_prob);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.ema_half_life_examples = j.value("ema_half_life_examples", d.ema_half_life_examples);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.seed = j.value("seed", d.seed);
  c.log_every = j.value("log_every", d.log_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  const auto objective = j.value("objective", std::string("diffusion"));
  if (objective == "diffusion") {
    c.objective = Objective::diffusion;
  } else if (objective == "regression") {
    c.objective = Objective::regression;
  } else {
    throw std::invalid_argument("unknown objective '" + objective + "'");
  }
}

void ema_update(std::vector<Tensor<float>>& ema, const ParamStore<float>& params, double decay) {
  const auto d = static_cast<float>(decay);
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i].array() = d * ema[i].array() + (1.0f - d) * params[i].value().array();
}

Trainer::Trainer(XUNetConfig model_config, TrainConfig train_config, NoiseSchedule schedule)
    : model_(std::make_shared<Denoiser>(std::move(model_config))),
      config_(std::move(train_config)),
      schedule_(schedule),
      adam_{config_.adam_beta1, config_.adam_beta2, config_.adam_eps, config_.weight_decay} {
  config_.validate();
  state_.rng = Rng(config_.seed);
  state_.params = std::make_unique<ParamStore<float>>(model_->registry());
  state_.params->initialize(state_.rng);
  for (std::size_t i = 0; i < state_.params->size(); ++i) state_.ema.push_back((*state_.params)[i].value());
  state_.adam = adam_.init(*state_.params);
}

StepResult Trainer::train_step(const PairBatch& pairs) {
  auto& rng = state_.rng;
  auto& params = *state_.params;
  const Index b = pairs.x1.dim(0);
  const Index frame = pairs.x1.size() / b;

  DenoiserBatch<float> batch;
  batch.x = pairs.x1;
  batch.z = Tensor<float>(pairs.x2.shape());
  batch.pose_x = pairs.p1;
  batch.pose_z = pairs.p2;
  batch.camera = pairs.camera;
  Tensor<float> eps = rng.normal_tensor<float>(pairs.x2.shape());
  StepResult result;
  for (Index i = 0; i < b; ++i) {
    const double t = config_.objective == Objective::regression ? 1.0 : rng.uniform();
    const double logsnr = schedule_(t);
    batch.z.array().segment(i * frame, frame) =
        q_sample(pairs.x2.array().segment(i * frame, frame), logsnr, eps.array().segment(i * frame, frame));
    batch.logsnr_x.push_back(schedule_.logsnr_max);
    batch.logsnr_z.push_back(logsnr);
    batch.cond_mask.push_back(1);
    if (config_.objective == Objective::diffusion && rng.bernoulli(config_.uncond_prob)) {
      make_unconditional(batch, i, rng, schedule_.logsnr_min);
      ++result.uncond;
    }
  }

  nn::ForwardContext ctx{true, 0.0, &rng};
  params.zero_grad();
  auto loss = ag::mse(model_->forward(params, batch, ctx), eps);
  result.loss = loss.value()[0];
  if (!std::isfinite(result.loss)) {
    throw std::runtime_error("non-finite loss at step " + std::to_string(state_.step) + " (examples seen " +
                             std::to_string(static_cast<long long>(state_.examples_seen)) + ")");
  }
  ag::backward(loss);
  state_.examples_seen += static_cast<double>(b);
  result.lr = config_.lr_at(state_.examples_seen);
  adam_.update(params, state_.adam, result.lr);
  ema_update(state_.ema, params, std::pow(0.5, static_cast<double>(b) / config_.ema_half_life_examples));
  ++state_.step;
  return result;
}

ParamStore<float> Trainer::ema_params() const {
  ParamStore<float> out(model_->registry());
  for (std::size_t i = 0; i < out.size(); ++i) out[i].mutable_value() = state_.ema[i];
  out.set_requires_grad(false);
  return out;
}

// Checkpoint layout: 8-byte magic, u32 version, u64 header length, JSON
// header, then raw little-endian float32 tensors in header order.
namespace {

constexpr char kMagic[8] = {'N', 'V', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void Trainer::save(const fs::path& path) const {
  std::string blob;
  json tensors = json::array();
  auto put = [&](const std::string& group, const std::string& name, const Tensor<float>& t) {
    tensors.push_back({{"group", group}, {"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
    blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  };
  const auto& specs = model_->registry().specs();
  for (std::size_t i = 0; i < specs.size(); ++i) put("params", specs[i].name, (*state_.params)[i].value());
  for (std::size_t i = 0; i < specs.size(); ++i) put("ema", specs[i].name, state_.ema[i]);
  for (std::size_t i = 0; i < specs.size(); ++i) put("adam_m", specs[i].name, state_.adam.m[i]);
  for (std::size_t i = 0; i < specs.size(); ++i) put("adam_v", specs[i].name, state_.adam.v[i]);
  json header{{"model", model_->config()},
              {"train", config_},
              {"schedule", {{"logsnr_min", schedule_.logsnr_min}, {"logsnr_max", schedule_.logsnr_max}}},
              {"step", state_.step},
              {"examples_seen", state_.examples_seen},
              {"adam_count", state_.adam.count},
              {"rng", state_.rng.state()},
              {"blob_bytes", blob.size()},
              {"blob_fnv1a", fnv1a(blob)},
              {"tensors", tensors}};
  const std::string text = header.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

namespace {

struct RawCheckpoint {
  json header;
  std::string blob;
};

RawCheckpoint read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), {}};
  const std::string corrupt = "corrupt checkpoint " + path.string() + ": ";
  constexpr std::size_t prefix = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < prefix || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(corrupt + "bad magic");
  }
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  std::memcpy(&len, bytes.data() + sizeof kMagic + sizeof version, sizeof len);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version mismatch: file has version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersion));
  }
  if (len > bytes.size() - prefix) throw std::runtime_error(corrupt + "truncated header");
  RawCheckpoint raw;
  try {
    raw.header = json::parse(bytes.substr(prefix, len));
  } catch (const json::exception& e) {
    throw std::runtime_error(corrupt + "unreadable header (" + e.what() + ")");
  }
  raw.blob = bytes.substr(prefix + len);
  if (raw.blob.size() != raw.header.value("blob_bytes", std::uint64_t{0})) throw std::runtime_error(corrupt + "truncated data");
  if (fnv1a(raw.blob) != raw.header.value("blob_fnv1a", std::uint64_t{0})) throw std::runtime_error(corrupt + "checksum mismatch");
  return raw;
}

void fill(Tensor<float>& t, const json& entry, const std::string& blob, const std::string& name) {
  if (entry.at("shape").get<Shape>() != t.shape()) throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
  if (offset + bytes > blob.size()) throw std::runtime_error("checkpoint tensor " + name + " is out of range");
  std::memcpy(t.data(), blob.data() + offset, bytes);
}

}  // namespace

Trainer Trainer::load(const fs::path& path) {
  auto raw = read_checkpoint(path);
  const auto& h = raw.header;
  NoiseSchedule schedule{h.at("schedule").at("logsnr_min").get<double>(), h.at("schedule").at("logsnr_max").get<double>()};
  Trainer t(h.at("model").get<XUNetConfig>(), h.at("train").get<TrainConfig>(), schedule);
  const auto& specs = t.model_->registry().specs();
  std::map<std::pair<std::string, std::string>, const json*> index;
  for (const auto& e : h.at("tensors")) index[{e.at("group").get<std::string>(), e.at("name").get<std::string>()}] = &e;
  auto entry = [&](const std::string& group, const std::string& name) -> const json& {
    auto it = index.find({group, name});
    if (it == index.end()) throw std::runtime_error("checkpoint is missing " + group + "/" + name);
    return *it->second;
  };
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& name = specs[i].name;
    fill((*t.state_.params)[i].mutable_value(), entry("params", name), raw.blob, name);
    fill(t.state_.ema[i], entry("ema", name), raw.blob, name);
    fill(t.state_.adam.m[i], entry("adam_m", name), raw.blob, name);
    fill(t.state_.adam.v[i], entry("adam_v", name), raw.blob, name);
  }
  t.state_.step = h.at("step").get<std::int64_t>();
  t.state_.examples_seen = h.at("examples_seen").get<double>();
  t.state_.adam.count = h.at("adam_count").get<std::int64_t>();
  t.state_.rng.set_state(h.at("rng").get<std::string>());
  return t;
}

std::vector<double> train_loop(Trainer& trainer, PairSampler& sampler, int steps, std::ostream* log,
                               const fs::path& checkpoint) {
  std::vector<double> losses;
  const auto& c = trainer.config();
  for (int i = 0; i < steps; ++i) {
    const auto r = trainer.train_step(sampler.next(c.batch_size));
    losses.push_back(r.loss);
    const auto step = trainer.state().step;
    if (log && (step % c.log_every == 0 || i + 1 == steps)) {
      *log << step << " " << r.loss << " " << r.lr << " " << static_cast<long long>(trainer.state().examples_seen) << "\n";
      log->flush();
    }
    if (!checkpoint.empty() && c.checkpoint_every > 0 && step % c.checkpoint_every == 0) trainer.save(checkpoint);
  }
  if (!checkpoint.empty()) trainer.save(checkpoint);
  return losses;
}

LoadedModel load_model(const fs::path& checkpoint) {
  Trainer t = Trainer::load(checkpoint);
  LoadedModel m{t.model_shared(), t.ema_params(), t.schedule(), t.config()};
  return m;
}

}  // namespace nvs
