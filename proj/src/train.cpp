#include "factorforge/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace factorforge {

// ---------------------------------------------------------------------------
// Configuration and schedule

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (!(peak_lr > initial_lr) || initial_lr < 0) fail("peak_lr must exceed initial_lr >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("Adam betas must lie in [0, 1)");
  if (adam_eps <= 0) fail("adam_eps must be positive");
  if (grad_clip < 0) fail("grad_clip must be >= 0");
  if (batch_tokens < 1) fail("batch_tokens must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (val_fraction < 0 || val_fraction >= 1) fail("val_fraction must lie in [0, 1)");
  if (val_samples < 0) fail("val_samples must be >= 0");
  if (log_every < 1) fail("log_every must be >= 1");
  if (eval_every < 1 || eval_every % log_every != 0) fail("eval_every must be a positive multiple of log_every");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"warmup_steps", warmup_steps}, {"peak_lr", peak_lr},       {"initial_lr", initial_lr},
          {"beta1", beta1},               {"beta2", beta2},           {"adam_eps", adam_eps},
          {"grad_clip", grad_clip},       {"batch_tokens", batch_tokens}, {"epochs", epochs},
          {"max_steps", max_steps},       {"val_fraction", val_fraction}, {"val_samples", val_samples},
          {"log_every", log_every},       {"eval_every", eval_every}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.initial_lr = j.at("initial_lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.batch_tokens = j.at("batch_tokens").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.max_steps = j.at("max_steps").get<std::int64_t>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.val_samples = j.at("val_samples").get<int>();
  c.log_every = j.at("log_every").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

double lr_schedule(std::int64_t step, const TrainConfig& tc) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  const auto warmup = static_cast<double>(tc.warmup_steps);
  const auto s = static_cast<double>(step);
  if (s <= warmup) return tc.initial_lr + (tc.peak_lr - tc.initial_lr) * s / warmup;
  return tc.peak_lr * std::sqrt(warmup / s);
}

TrainingExample to_example(const CorpusRecord& record, int w_max) {
  return {record.index, record.grid(w_max), record.expr};
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'F', 'F', 'C', 'K', 'P', 'T', '1', '\n'};

void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void write_floats(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(data[i]);
      const char b[4] = {static_cast<char>(u & 0xFF), static_cast<char>((u >> 8) & 0xFF),
                         static_cast<char>((u >> 16) & 0xFF), static_cast<char>(u >> 24)};
      os.write(b, 4);
    }
  }
}

void read_floats(std::istream& is, float* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(data[i]);
      data[i] = std::bit_cast<float>((u >> 24) | ((u >> 8) & 0xFF00u) | ((u << 8) & 0xFF0000u) | (u << 24));
    }
  }
}

struct BlobEntry {
  std::string name;
  std::vector<int> shape;
  const float* data;
  std::size_t count;
};

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  const ParamLayout layout(model);
  if (params.size() != layout.size()) throw std::invalid_argument("checkpoint: parameter size mismatch");
  std::vector<BlobEntry> blobs;
  for (const auto& t : layout.tensors())
    blobs.push_back({t.name, {t.rows, t.cols}, params.data() + t.offset, t.size()});
  const int n = static_cast<int>(params.size());
  if (!adam.m.empty()) {
    blobs.push_back({"optimizer.m", {n}, adam.m.data(), adam.m.size()});
    blobs.push_back({"optimizer.v", {n}, adam.v.data(), adam.v.size()});
  }
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& b : blobs) {
    manifest.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"bytes", b.count * 4}});
    offset += b.count * 4;
  }
  nlohmann::ordered_json header = {
      {"format", "factorforge-checkpoint/1"},
      {"model", model.to_json()},
      {"train", train.to_json()},
      {"state",
       {{"step", step},
        {"epoch", epoch},
        {"batch_in_epoch", batch_in_epoch},
        {"epoch_seed", epoch_seed},
        {"adam_t", adam.t},
        {"best_val_accuracy", best_val_accuracy},
        {"rng", rng_state}}},
      {"vocabulary", Vocabulary(model.w_max).to_json()},
      {"tensors", manifest},
  };
  const std::string text = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint: " + path.string());
    os.write(kMagic, sizeof kMagic);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blobs) write_floats(os, b.data, b.count);
    if (!os) throw DataError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint file");
  const std::uint64_t len = read_u64(is);
  if (!is || len > (1ULL << 31)) throw DataError(path.string() + ": corrupt checkpoint header");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError(path.string() + ": truncated checkpoint header");
  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format") != "factorforge-checkpoint/1") throw DataError("unsupported checkpoint format");
    c.model = ModelConfig::from_json(header.at("model"));
    c.model.validate();
    c.train = TrainConfig::from_json(header.at("train"));
    const auto& st = header.at("state");
    c.step = st.at("step").get<std::int64_t>();
    c.epoch = st.at("epoch").get<std::int64_t>();
    c.batch_in_epoch = st.at("batch_in_epoch").get<std::int64_t>();
    c.epoch_seed = st.at("epoch_seed").get<std::uint64_t>();
    c.adam.t = st.at("adam_t").get<std::int64_t>();
    c.best_val_accuracy = st.at("best_val_accuracy").get<double>();
    c.rng_state = st.at("rng").get<std::string>();
    Vocabulary::from_json(header.at("vocabulary"));
    if (Vocabulary(c.model.w_max).decoder_size() != c.model.decoder_vocab)
      throw DataError("vocabulary does not match the model config");

    const ParamLayout layout(c.model);
    c.params.resize(layout.size());
    const auto& tensors = header.at("tensors");
    std::size_t expected_offset = 0;
    std::size_t i = 0;
    for (const auto& t : layout.tensors()) {
      if (i >= tensors.size()) throw DataError("missing tensor " + t.name);
      const auto& e = tensors[i++];
      if (e.at("name") != t.name || e.at("shape") != std::vector<int>{t.rows, t.cols} ||
          e.at("offset").get<std::size_t>() != expected_offset || e.at("bytes").get<std::size_t>() != t.size() * 4)
        throw DataError("tensor manifest mismatch at " + t.name);
      read_floats(is, c.params.data() + t.offset, t.size());
      expected_offset += t.size() * 4;
    }
    if (i < tensors.size()) {
      if (tensors.size() != i + 2) throw DataError("unexpected tensors in checkpoint");
      for (auto* buf : {&c.adam.m, &c.adam.v}) {
        const auto& e = tensors[i++];
        if (e.at("bytes").get<std::size_t>() != layout.size() * 4 ||
            e.at("offset").get<std::size_t>() != expected_offset)
          throw DataError("optimizer state mismatch");
        buf->resize(layout.size());
        read_floats(is, buf->data(), buf->size());
        expected_offset += layout.size() * 4;
      }
    }
    if (!is) throw DataError("truncated tensor data");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return c;
}

Transformer<float> Checkpoint::build() const {
  Transformer<float> m(model);
  if (params.size() != m.params().size()) throw DataError("checkpoint parameter count mismatch");
  m.params() = params;
  return m;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const ModelConfig& mc, const TrainConfig& tc)
    : rng(make_stream(tc.seed, 0)), tc_(tc), model_(mc) {
  tc_.validate();
  model_.initialize(rng);
  adam_.m.assign(model_.params().size(), 0.0f);
  adam_.v.assign(model_.params().size(), 0.0f);
  grads_.assign(model_.params().size(), 0.0f);
}

Trainer::Trainer(const Checkpoint& ckpt)
    : epoch(ckpt.epoch),
      batch_in_epoch(ckpt.batch_in_epoch),
      epoch_seed(ckpt.epoch_seed),
      best_val_accuracy(ckpt.best_val_accuracy),
      tc_(ckpt.train),
      model_(ckpt.build()),
      adam_(ckpt.adam),
      step_(ckpt.step) {
  restore_rng_state(rng, ckpt.rng_state);
  if (adam_.m.size() != model_.params().size()) {
    adam_.m.assign(model_.params().size(), 0.0f);
    adam_.v.assign(model_.params().size(), 0.0f);
  }
  grads_.assign(model_.params().size(), 0.0f);
}

Trainer::StepResult Trainer::step(std::span<const TrainingExample* const> batch, std::int64_t batch_id) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::fill(grads_.begin(), grads_.end(), 0.0f);
  int total = 0;
  for (const auto* ex : batch) total += static_cast<int>(ex->target.size()) - 1;
  const float scale = 1.0f / static_cast<float>(total);
  double loss_sum = 0.0;
  for (const auto* ex : batch) loss_sum += model_.accumulate_gradients(ex->grid, ex->target, scale, grads_).loss_sum;
  StepResult r;
  r.tokens = total;
  r.loss = loss_sum / total;
  double sq = 0.0;
  for (float g : grads_) sq += static_cast<double>(g) * g;
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm))
    throw NumericError("non-finite loss at step " + std::to_string(step_) + " (batch " + std::to_string(batch_id) +
                       ")");
  const double clip = tc_.grad_clip > 0 && r.grad_norm > tc_.grad_clip ? tc_.grad_clip / r.grad_norm : 1.0;
  r.lr = lr_schedule(step_, tc_);
  ++adam_.t;
  const double c1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(adam_.t));
  const double c2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(adam_.t));
  const auto b1 = static_cast<float>(tc_.beta1), b2 = static_cast<float>(tc_.beta2);
  const auto step_size = static_cast<float>(r.lr / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(tc_.adam_eps);
  const auto fclip = static_cast<float>(clip);
  auto& p = model_.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float g = grads_[i] * fclip;
    adam_.m[i] = b1 * adam_.m[i] + (1.0f - b1) * g;
    adam_.v[i] = b2 * adam_.v[i] + (1.0f - b2) * g * g;
    p[i] -= step_size * adam_.m[i] / (std::sqrt(adam_.v[i] * inv_c2) + eps);
  }
  ++step_;
  return r;
}

Trainer::EvalResult Trainer::evaluate(std::span<const TrainingExample* const> samples) const {
  EvalResult r;
  double loss = 0.0;
  int correct = 0;
  for (const auto* ex : samples) {
    const auto s = model_.evaluate(ex->grid, ex->target);
    loss += s.loss_sum;
    correct += s.correct;
    r.tokens += s.tokens;
  }
  if (r.tokens > 0) {
    r.loss = loss / r.tokens;
    r.accuracy = static_cast<double>(correct) / r.tokens;
  }
  return r;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model = model_.config();
  c.train = tc_;
  c.params = model_.params();
  c.adam = adam_;
  c.step = step_;
  c.epoch = epoch;
  c.batch_in_epoch = batch_in_epoch;
  c.epoch_seed = epoch_seed;
  c.rng_state = rng_state(rng);
  c.best_val_accuracy = best_val_accuracy;
  return c;
}

// ---------------------------------------------------------------------------
// Data handling

DataSplit split_samples(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_stream(seed, 0x5A11D);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  DataSplit s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingExample> data,
                                                   std::span<const std::size_t> indices, int batch_tokens,
                                                   std::uint64_t seed) {
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].target.size() < data[b].target.size();
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  int tokens = 0;
  for (std::size_t i : order) {
    const int t = static_cast<int>(data[i].target.size()) - 1;
    if (!current.empty() && tokens + t > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += t;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  Rng rng(seed);
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

// ---------------------------------------------------------------------------
// Loop

TrainSummary train(std::span<const TrainingExample> data, const ModelConfig& mc, const TrainConfig& tc,
                   const std::filesystem::path& out, const std::filesystem::path& log, const Checkpoint* resume) {
  mc.validate();
  tc.validate();
  if (data.empty()) throw DataError("training corpus is empty");
  TrainSummary summary;

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (static_cast<int>(data[i].target.size()) > mc.max_len)
      ++summary.skipped_too_long;
    else
      usable.push_back(i);
  }
  if (summary.skipped_too_long > 0)
    spdlog::warn("skipping {} samples longer than max_len {}", summary.skipped_too_long, mc.max_len);
  if (usable.empty()) throw DataError("no training sample fits within max_len");

  const DataSplit split = split_samples(usable.size(), tc.val_fraction, tc.seed);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i : split.train) train_idx.push_back(usable[i]);
  for (std::size_t i : split.val) val_idx.push_back(usable[i]);
  if (train_idx.empty()) throw DataError("training split is empty");
  summary.train_samples = train_idx.size();
  summary.val_samples = val_idx.size();
  std::vector<const TrainingExample*> val_set;
  for (std::size_t i = 0; i < val_idx.size() && static_cast<int>(i) < tc.val_samples; ++i)
    val_set.push_back(&data[val_idx[i]]);

  Trainer trainer = resume ? Trainer(*resume) : Trainer(mc, tc);
  if (resume && trainer.model().config().to_json() != mc.to_json())
    throw ConfigError("resume checkpoint model config differs from the requested one");

  const bool append = resume && std::filesystem::exists(log);
  std::ofstream csv(log, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw DataError("cannot write training log: " + log.string());
  if (!append) csv << "step,lr,train_loss,val_loss,val_acc\n";

  const auto last_path = std::filesystem::path(out.string() + ".last");
  bool saved_best = resume != nullptr && std::filesystem::exists(out);
  std::int64_t last_eval_step = -1;
  auto run_eval = [&] {
    const auto r = trainer.evaluate(val_set);
    last_eval_step = trainer.global_step();
    summary.last_val_loss = r.loss;
    if (!val_set.empty() && r.accuracy > trainer.best_val_accuracy) {
      trainer.best_val_accuracy = r.accuracy;
      trainer.checkpoint().save(out);
      saved_best = true;
    }
    return r;
  };

  double interval_loss = 0.0;
  int interval_steps = 0;
  bool stop = false;
  while (trainer.epoch < tc.epochs) {
    if (trainer.batch_in_epoch == 0) trainer.epoch_seed = trainer.rng();
    const auto batches = make_batches(data, train_idx, tc.batch_tokens, trainer.epoch_seed);
    while (trainer.batch_in_epoch < static_cast<std::int64_t>(batches.size())) {
      if (tc.max_steps > 0 && trainer.global_step() >= tc.max_steps) {
        stop = true;
        break;
      }
      const auto& b = batches[static_cast<std::size_t>(trainer.batch_in_epoch)];
      std::vector<const TrainingExample*> ptrs;
      for (std::size_t i : b) ptrs.push_back(&data[i]);
      Trainer::StepResult r;
      try {
        r = trainer.step(ptrs, trainer.batch_in_epoch);
      } catch (const NumericError&) {
        trainer.checkpoint().save(last_path);
        throw;
      }
      ++trainer.batch_in_epoch;
      interval_loss += r.loss;
      ++interval_steps;
      const std::int64_t s = trainer.global_step();
      if (s % tc.log_every == 0) {
        std::string val_loss, val_acc;
        if (s % tc.eval_every == 0 && !val_set.empty()) {
          const auto v = run_eval();
          val_loss = fmt::format("{:.6f}", v.loss);
          val_acc = fmt::format("{:.6f}", v.accuracy);
          trainer.checkpoint().save(last_path);
        }
        const double mean = interval_loss / interval_steps;
        csv << s << ',' << fmt::format("{:.6e}", r.lr) << ',' << fmt::format("{:.6f}", mean) << ',' << val_loss
            << ',' << val_acc << '\n';
        csv.flush();
        spdlog::info("step {} lr {:.3e} loss {:.4f}{}", s, r.lr, mean,
                     val_acc.empty() ? "" : " val_loss " + val_loss + " val_acc " + val_acc);
        interval_loss = 0.0;
        interval_steps = 0;
      }
    }
    if (stop) break;
    ++trainer.epoch;
    trainer.batch_in_epoch = 0;
  }
  if (last_eval_step != trainer.global_step() && !val_set.empty()) run_eval();
  if (!saved_best) {
    trainer.checkpoint().save(out);
    saved_best = true;
  }
  trainer.checkpoint().save(last_path);
  summary.steps = trainer.global_step();
  summary.best_val_accuracy = trainer.best_val_accuracy;
  return summary;
}

}  // namespace factorforge
