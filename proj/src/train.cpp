#include "bf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "bf/errors.hpp"

namespace bf {

namespace {

constexpr int kTrigramA = 1;
constexpr int kTrigramB = 2;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ToyTaskSpec::validate() const {
  if (vocab < 4) throw ConfigError("toy task vocab must be at least 4, got " + std::to_string(vocab));
  if (seq_len < kSubsampleMinLength)
    throw ConfigError("toy task seq_len must be at least " + std::to_string(kSubsampleMinLength) +
                      ", got " + std::to_string(seq_len));
  if (noise < 0.0) throw ConfigError("toy task noise must be non-negative");
  if (task == ToyTask::SeqClass) {
    if (seq_len < 11) throw ConfigError("seqclass needs seq_len >= 11 to place its patterns");
    const int dist = seqclass_pair_index(seq_len) - seqclass_pair_lo_index(seq_len);
    if (2 * dist < seq_len)
      throw ConfigError("seqclass pair distance must be at least seq_len/2");
  }
}

// The long-range pair sits at the centers of the first and last subsampled
// frames (raw index 4i+3 is the center of output frame i), so both symbols
// survive the valid convolutions intact.
int seqclass_pair_lo_index(int) { return 3; }

int seqclass_pair_index(int t) { return 4 * (subsampled_length(t) - 1) + 3; }

int seqclass_label(const std::vector<int>& symbols) {
  const int t = static_cast<int>(symbols.size());
  bool local = false;
  for (int i = 0; i + 2 < t; ++i)
    if (symbols[i] == kTrigramA && symbols[i + 1] == kTrigramB && symbols[i + 2] == kTrigramA) {
      local = true;
      break;
    }
  const bool global = symbols[static_cast<std::size_t>(seqclass_pair_lo_index(t))] == 1 &&
                      symbols[static_cast<std::size_t>(seqclass_pair_index(t))] == 1;
  return 2 * (local ? 1 : 0) + (global ? 1 : 0);
}

int copy_target_index(int sub_index, int raw_len) {
  // Each subsampled frame covers raw frames [4i, 4i+6]; use the center.
  return std::min(4 * sub_index + 3, raw_len - 1);
}

ToyBatch generate_toy_batch(const ToyTaskSpec& spec, int batch, int feature_dim,
                            std::mt19937_64& rng) {
  spec.validate();
  if (feature_dim < spec.vocab)
    throw ConfigError("feature_dim " + std::to_string(feature_dim) +
                      " cannot hold one-hot vocab " + std::to_string(spec.vocab));
  const int t = spec.seq_len;
  std::uniform_int_distribution<int> sym(0, spec.vocab - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ToyBatch out;
  for (int b = 0; b < batch; ++b) {
    std::vector<int> s(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) s[static_cast<std::size_t>(i)] = sym(rng);

    if (spec.task == ToyTask::SeqClass) {
      // Long-range fact: a conjunction over a pair >= t/2 apart — both pair
      // symbols equal 1. Pair symbols are drawn from {0, 1}, balanced so the
      // fact holds with probability 1/2, and both indices sit at subsampled
      // frame centers (the valid convolutions cannot see the final frames).
      const int lo = seqclass_pair_lo_index(t);
      const int hi = seqclass_pair_index(t);
      const bool want_global = coin(rng) < 0.5;
      if (want_global) {
        s[static_cast<std::size_t>(lo)] = 1;
        s[static_cast<std::size_t>(hi)] = 1;
      } else {
        std::uniform_int_distribution<int> other(0, 2);  // (0,0) (0,1) (1,0)
        const int pick = other(rng);
        s[static_cast<std::size_t>(lo)] = pick == 2 ? 1 : 0;
        s[static_cast<std::size_t>(hi)] = pick == 1 ? 1 : 0;
      }
      // Local fact: the marker trigram, planted/destroyed away from the pair.
      const bool want_local = coin(rng) < 0.5;
      if (want_local) {
        std::uniform_int_distribution<int> pos(lo + 1, hi - 4);
        const int p = pos(rng);
        s[static_cast<std::size_t>(p)] = kTrigramA;
        s[static_cast<std::size_t>(p + 1)] = kTrigramB;
        s[static_cast<std::size_t>(p + 2)] = kTrigramA;
      } else {
        bool found = true;
        while (found) {
          found = false;
          for (int i = 0; i + 2 < t; ++i)
            if (s[static_cast<std::size_t>(i)] == kTrigramA &&
                s[static_cast<std::size_t>(i + 1)] == kTrigramB &&
                s[static_cast<std::size_t>(i + 2)] == kTrigramA) {
              s[static_cast<std::size_t>(i + 1)] = 0;
              found = true;
            }
        }
      }
    }

    Tensor feats = Tensor::zeros({t, feature_dim});
    for (int i = 0; i < t; ++i) feats.at(i, s[static_cast<std::size_t>(i)]) = 1.0;
    if (spec.noise > 0.0)
      for (std::size_t i = 0; i < feats.numel(); ++i) feats.data()[i] += spec.noise * gauss(rng);

    std::vector<int> targets;
    if (spec.task == ToyTask::SeqClass) {
      targets.push_back(seqclass_label(s));
    } else {
      const int sub = subsampled_length(t);
      for (int i = 0; i < sub; ++i)
        targets.push_back(s[static_cast<std::size_t>(copy_target_index(i, t))]);
    }
    out.symbols.push_back(std::move(s));
    out.features.push_back(std::move(feats));
    out.targets.push_back(std::move(targets));
  }
  return out;
}

Tensor label_smoothed_ce(const Tensor& logits, const std::vector<int>& targets, double smoothing) {
  if (logits.ndim() != 2 || logits.cols() < 2)
    throw ConfigError("label_smoothed_ce requires [n x C] logits with C >= 2");
  const int n = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("label_smoothed_ce: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  Tensor q = Tensor::full({n, c}, smoothing / c);
  for (int i = 0; i < n; ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= c)
      throw ContractError("label_smoothed_ce target out of range: " + std::to_string(tgt));
    q.at(i, tgt) += 1.0 - smoothing;
  }
  Tensor logp = log_softmax_rows(logits);
  return scale(sum_all(mul(q, logp)), -1.0 / n);
}

double lr_at_step(long step, const LrSchedule& sched) {
  if (step < 1) throw ContractError("lr_at_step requires step >= 1");
  if (sched.warmup < 1) throw ConfigError("warmup must be at least 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(sched.warmup);
  return sched.base * std::pow(static_cast<double>(sched.d), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

void AdamOptimizer::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
  step_++;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != t.numel()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    const bool has_grad = t.has_grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double g = has_grad ? t.grad()[i] : 0.0;
      if (std::isnan(g)) throw ContractError("NaN gradient in parameter " + name);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t.data()[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps) + lr * cfg_.weight_decay * t.data()[i];
    }
  }
}

void TransformerBlockParams::visit(const std::string& prefix, const ParamVisitor& v) {
  ln1.visit(prefix + ".ln1", v);
  attn.visit(prefix + ".attn", v);
  ln2.visit(prefix + ".ln2", v);
  ff1.visit(prefix + ".ff1", v);
  ff2.visit(prefix + ".ff2", v);
}

void ControlEncoderParams::visit(const ParamVisitor& v) {
  subsampler.visit("subsample", v);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].visit("block" + std::to_string(i), v);
}

ControlEncoderParams init_control_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ControlEncoderParams p;
  p.subsampler = SubsamplerParams::init(cfg.feature_dim, cfg.d, rng);
  for (int i = 0; i < cfg.num_blocks; ++i) {
    TransformerBlockParams b;
    b.ln1 = LayerNormParams::init(cfg.d);
    b.attn = MhsaParams::init(cfg.d, cfg.heads, rng);
    b.ln2 = LayerNormParams::init(cfg.d);
    b.ff1 = LinearParams::init(cfg.d, cfg.d_hidden, rng);
    b.ff2 = LinearParams::init(cfg.d_hidden, cfg.d, rng);
    b.dropout_p = cfg.dropout;
    p.blocks.push_back(std::move(b));
  }
  return p;
}

Tensor control_encoder_forward(const Tensor& features, const EncoderConfig& cfg,
                               ControlEncoderParams& params, bool training, std::mt19937_64& rng,
                               std::vector<AttentionTrace>* traces) {
  Tensor h = conv_subsample(features, params.subsampler);
  h = add(h, sinusoidal_pe(h.rows(), cfg.d));
  if (traces) traces->assign(params.blocks.size(), AttentionTrace{});
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& b = params.blocks[i];
    AttentionTrace* tr = traces ? &(*traces)[i] : nullptr;
    h = add(h, dropout(multi_head_attention(layer_norm(h, b.ln1), b.attn, tr), b.dropout_p,
                       training, rng));
    Tensor ff = linear(gelu(linear(layer_norm(h, b.ln2), b.ff1)), b.ff2);
    h = add(h, dropout(ff, b.dropout_p, training, rng));
  }
  return h;
}

ToyModel ToyModel::init(ModelKind kind, const EncoderConfig& cfg, const ToyTaskSpec& task) {
  cfg.validate();
  task.validate();
  if (cfg.feature_dim < task.vocab)
    throw ConfigError("encoder feature_dim must cover the task vocab");
  ToyModel m;
  m.kind = kind;
  m.cfg = cfg;
  m.task = task;
  std::mt19937_64 rng(cfg.seed);
  if (kind == ModelKind::Branchformer)
    m.encoder = init_encoder(cfg, rng);
  else
    m.control = init_control_encoder(cfg, rng);
  m.head = LinearParams::init(cfg.d, task.num_classes(), rng);
  // Small head init keeps the untrained loss calibrated near ln(C).
  for (std::size_t i = 0; i < m.head.weight.numel(); ++i) m.head.weight.data()[i] *= 0.1;
  return m;
}

std::vector<std::pair<std::string, Tensor>> ToyModel::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  const ParamVisitor v = [&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); };
  if (kind == ModelKind::Branchformer)
    encoder.visit(v);
  else
    control.visit(v);
  head.visit("head", v);
  return out;
}

Tensor ToyModel::forward(const Tensor& features, bool training, std::mt19937_64& rng,
                         ForwardSinks* sinks, std::vector<AttentionTrace>* control_traces) {
  Tensor h = kind == ModelKind::Branchformer
                 ? encoder_forward(features, cfg, encoder, training, rng, sinks)
                 : control_encoder_forward(features, cfg, control, training, rng, control_traces);
  if (task.task == ToyTask::SeqClass) return linear(mean_rows(h), head);
  return linear(h, head);
}

ToyModel ToyModel::pruned() const {
  if (kind != ModelKind::Branchformer)
    throw ConfigError("only the two-branch model can be pruned");
  ToyModel m = *this;
  m.encoder = prune_to_cgmlp(cfg, encoder);
  return m;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "num_blocks", "feature_dim", "d",         "d_hidden",       "heads",
      "kernel",     "attention",   "merge",     "dropout",        "branch_dropout",
      "seed",       "task",        "vocab",     "seq_len",        "noise",
      "task_seed",  "model",       "steps",     "batch_size",     "lr_base",
      "warmup",     "label_smoothing", "checkpoint_every", "out_dir"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown train config key: " + key);

  nlohmann::json enc;
  for (const char* k : {"num_blocks", "feature_dim", "d", "d_hidden", "heads", "kernel",
                        "attention", "merge", "dropout", "branch_dropout", "seed"})
    enc[k] = j.at(k);

  TrainConfig cfg;
  cfg.encoder = encoder_config_from_json(enc);
  cfg.task.task = toy_task_from_string(j.at("task").get<std::string>());
  cfg.task.vocab = j.at("vocab").get<int>();
  cfg.task.seq_len = j.at("seq_len").get<int>();
  cfg.task.noise = j.at("noise").get<double>();
  cfg.task.seed = j.at("task_seed").get<std::uint64_t>();
  cfg.model = model_kind_from_string(j.value("model", "branchformer"));
  cfg.steps = j.at("steps").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.lr_base = j.at("lr_base").get<double>();
  cfg.warmup = j.at("warmup").get<int>();
  cfg.label_smoothing = j.value("label_smoothing", 0.1);
  cfg.checkpoint_every = j.value("checkpoint_every", 1000);
  cfg.out_dir = j.value("out_dir", "run");
  cfg.task.validate();
  if (cfg.steps < 0 || cfg.batch_size < 1) throw ConfigError("invalid steps/batch_size");
  return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = encoder_config_to_json(cfg.encoder);
  j["task"] = to_string(cfg.task.task);
  j["vocab"] = cfg.task.vocab;
  j["seq_len"] = cfg.task.seq_len;
  j["noise"] = cfg.task.noise;
  j["task_seed"] = cfg.task.seed;
  j["model"] = to_string(cfg.model);
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["lr_base"] = cfg.lr_base;
  j["warmup"] = cfg.warmup;
  j["label_smoothing"] = cfg.label_smoothing;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["out_dir"] = cfg.out_dir;
  return j;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
  return train_config_from_json(j);
}

namespace {

int argmax_row(const Tensor& logits, int row) {
  int best = 0;
  for (int c = 1; c < logits.cols(); ++c)
    if (logits.at(row, c) > logits.at(row, best)) best = c;
  return best;
}

// Fraction of correct predictions for one sample.
double sample_accuracy(const Tensor& logits, const std::vector<int>& targets) {
  int correct = 0;
  for (int r = 0; r < logits.rows(); ++r)
    if (argmax_row(logits, r) == targets[static_cast<std::size_t>(r)]) correct++;
  return static_cast<double>(correct) / logits.rows();
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "config.json");
    os << train_config_to_json(cfg).dump(2) << '\n';
  }

  TrainResult result;
  result.model = ToyModel::init(cfg.model, cfg.encoder, cfg.task);
  ToyModel& model = result.model;
  auto params = model.named_params();

  std::mt19937_64 data_rng(cfg.task.seed);
  std::mt19937_64 model_rng(cfg.encoder.seed ^ 0x9e3779b97f4a7c15ull);
  AdamOptimizer opt(cfg.adam);
  LrSchedule sched{cfg.lr_base, cfg.encoder.d, cfg.warmup};

  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.csv");
  metrics << "step,loss,acc,lr\n";

  auto save = [&](const std::string& name) {
    const std::string path = (fs::path(cfg.out_dir) / name).string();
    if (cfg.model == ModelKind::Branchformer) save_checkpoint(path, cfg.encoder, model.encoder);
    return path;
  };

  for (int step = 1; step <= cfg.steps; ++step) {
    ToyBatch batch = generate_toy_batch(cfg.task, cfg.batch_size, cfg.encoder.feature_dim, data_rng);
    for (auto& [name, t] : params) t.zero_grad();

    Tensor total;
    double acc = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Tensor logits = model.forward(batch.features[static_cast<std::size_t>(b)], /*training=*/true,
                                    model_rng);
      Tensor loss = label_smoothed_ce(logits, batch.targets[static_cast<std::size_t>(b)],
                                      cfg.label_smoothing);
      acc += sample_accuracy(logits, batch.targets[static_cast<std::size_t>(b)]);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.0 / cfg.batch_size);
    acc /= cfg.batch_size;

    const double loss_value = total.value();
    if (std::isnan(loss_value)) {
      metrics.flush();
      throw ContractError("training diverged (NaN loss) at step " + std::to_string(step) +
                          "; last checkpoint retained");
    }
    backward(total);
    const double lr = lr_at_step(step, sched);
    opt.step(params, lr);

    result.losses.push_back(loss_value);
    metrics << step << ',' << fmt(loss_value) << ',' << fmt(acc) << ',' << fmt(lr) << '\n';

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
        cfg.model == ModelKind::Branchformer)
      save("ckpt_" + std::to_string(step) + ".bin");
  }
  metrics.flush();

  if (cfg.model == ModelKind::Branchformer) result.final_checkpoint = save("final.bin");
  result.final_train_accuracy = evaluate_accuracy(model, 200, cfg.task.seed + 9001);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "summary.json");
    nlohmann::json j;
    j["final_train_accuracy"] = result.final_train_accuracy;
    j["steps"] = cfg.steps;
    os << j.dump(2) << '\n';
  }
  return result;
}

double evaluate_accuracy(ToyModel& model, int n_samples, std::uint64_t seed,
                         bool pruned_inference) {
  ToyModel pruned_copy;
  ToyModel* m = &model;
  if (pruned_inference) {
    pruned_copy = model.pruned();
    m = &pruned_copy;
  }
  NoGradGuard ng;
  std::mt19937_64 data_rng(seed);
  std::mt19937_64 fwd_rng(0);
  ToyTaskSpec spec = model.task;
  double acc = 0.0;
  ToyBatch batch = generate_toy_batch(spec, n_samples, model.cfg.feature_dim, data_rng);
  for (int i = 0; i < n_samples; ++i) {
    Tensor logits =
        m->forward(batch.features[static_cast<std::size_t>(i)], /*training=*/false, fwd_rng);
    acc += sample_accuracy(logits, batch.targets[static_cast<std::size_t>(i)]);
  }
  return acc / n_samples;
}

GradCheckReport grad_check(ToyModel& model, const Tensor& features,
                           const std::vector<int>& targets, double tolerance) {
  auto params = model.named_params();

  auto loss_value = [&]() {
    std::mt19937_64 rng(42);
    Tensor logits = model.forward(features, /*training=*/false, rng);
    return label_smoothed_ce(logits, targets, 0.1);
  };

  for (auto& [name, t] : params) t.zero_grad();
  Tensor loss = loss_value();
  backward(loss);

  GradCheckReport report;
  const double h = 1e-5;
  NoGradGuard ng;
  for (auto& [name, t] : params) {
    GradCheckReport::Entry entry;
    entry.name = name;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = loss_value().value();
      t.data()[i] = orig - h;
      const double down = loss_value().value();
      t.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      // The floor absorbs central-difference roundoff (~1e-11 for an O(1)
      // loss at step 1e-5) on near-zero gradients.
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(analytic - numeric) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

ToyModel grad_check_build_model(const TrainConfig& cfg) {
  return ToyModel::init(cfg.model, cfg.encoder, cfg.task);
}

GradCheckReport grad_check_from_config(const TrainConfig& cfg, double tolerance) {
  ToyModel model = grad_check_build_model(cfg);
  std::mt19937_64 rng(cfg.task.seed);
  ToyBatch batch = generate_toy_batch(cfg.task, 1, cfg.encoder.feature_dim, rng);
  return grad_check(model, batch.features[0], batch.targets[0], tolerance);
}

const char* to_string(ModelKind k) {
  return k == ModelKind::Branchformer ? "branchformer" : "transformer_control";
}

const char* to_string(ToyTask t) { return t == ToyTask::SeqClass ? "seqclass" : "symbolcopy"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "branchformer") return ModelKind::Branchformer;
  if (s == "transformer_control") return ModelKind::TransformerControl;
  throw ConfigError("unknown model kind: " + s);
}

ToyTask toy_task_from_string(const std::string& s) {
  if (s == "seqclass") return ToyTask::SeqClass;
  if (s == "symbolcopy") return ToyTask::SymbolCopy;
  throw ConfigError("unknown toy task: " + s);
}

}  // namespace bf
