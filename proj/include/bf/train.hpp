#pragma once

#include <map>
#include <string>
#include <vector>

#include "bf/checkpoint.hpp"
#include "bf/encoder.hpp"

namespace bf {

enum class ToyTask { SeqClass, SymbolCopy };

// Synthetic supervised tasks.
//
// SeqClass: symbol sequences with two planted binary facts — a local one
// (the trigram 1,2,1 occurs somewhere) and a long-range one (the symbols at
// two probe positions >= T/2 apart are both 1). The 4-way label is
// 2*local + global, so neither branch alone is trivially sufficient.
//
// SymbolCopy: per-position symbol prediction after subsampling alignment.
struct ToyTaskSpec {
  ToyTask task = ToyTask::SeqClass;
  int vocab = 8;
  int seq_len = 24;
  double noise = 0.05;
  std::uint64_t seed = 1;

  int num_classes() const { return task == ToyTask::SeqClass ? 4 : vocab; }
  void validate() const;
};

struct ToyBatch {
  std::vector<std::vector<int>> symbols;   // raw symbol sequences
  std::vector<Tensor> features;            // [T x F] one-hot + noise
  std::vector<std::vector<int>> targets;   // SeqClass: 1 label; SymbolCopy: per subsampled frame
};

// Indices of the long-range pair (>= T/2 apart, at centers of the first and
// last subsampled frames so the subsampler preserves both symbols).
int seqclass_pair_lo_index(int t);
int seqclass_pair_index(int t);
int seqclass_label(const std::vector<int>& symbols);
// Raw frame index a subsampled frame is aligned to for SymbolCopy targets.
int copy_target_index(int sub_index, int raw_len);

ToyBatch generate_toy_batch(const ToyTaskSpec& spec, int batch, int feature_dim,
                            std::mt19937_64& rng);

// Cross entropy against (1-eps) one-hot + eps/C uniform. logits: [n x C],
// one target per row; mean over rows.
Tensor label_smoothed_ce(const Tensor& logits, const std::vector<int>& targets, double smoothing);

struct LrSchedule {
  double base = 1.0;
  int d = 256;
  int warmup = 500;
};

// base * d^{-0.5} * min(s^{-0.5}, s * warmup^{-1.5}); peaks at s = warmup.
double lr_at_step(long step, const LrSchedule& sched);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 1e-6;
};

// Bias-corrected Adam with decoupled weight decay over a named parameter set.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);
  long step_count() const { return step_; }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Standard pre-norm transformer encoder layers over the same subsampler and
// positional encoding; the control model for attention-map comparisons.
struct TransformerBlockParams {
  LayerNormParams ln1, ln2;
  MhsaParams attn;
  LinearParams ff1, ff2;
  double dropout_p = 0.1;

  void visit(const std::string& prefix, const ParamVisitor& v);
};

struct ControlEncoderParams {
  SubsamplerParams subsampler;
  std::vector<TransformerBlockParams> blocks;

  void visit(const ParamVisitor& v);
};

ControlEncoderParams init_control_encoder(const EncoderConfig& cfg, std::mt19937_64& rng);
Tensor control_encoder_forward(const Tensor& features, const EncoderConfig& cfg,
                               ControlEncoderParams& params, bool training, std::mt19937_64& rng,
                               std::vector<AttentionTrace>* traces = nullptr);

enum class ModelKind { Branchformer, TransformerControl };

// Encoder plus the task head: mean-pool + linear for SeqClass, per-frame
// linear for SymbolCopy.
struct ToyModel {
  ModelKind kind = ModelKind::Branchformer;
  EncoderConfig cfg;
  ToyTaskSpec task;
  EncoderParams encoder;
  ControlEncoderParams control;
  LinearParams head;

  static ToyModel init(ModelKind kind, const EncoderConfig& cfg, const ToyTaskSpec& task);
  std::vector<std::pair<std::string, Tensor>> named_params();
  // Logits: [1 x C] for SeqClass, [T' x vocab] for SymbolCopy.
  Tensor forward(const Tensor& features, bool training, std::mt19937_64& rng,
                 ForwardSinks* sinks = nullptr, std::vector<AttentionTrace>* control_traces = nullptr);
  ToyModel pruned() const;
};

struct TrainConfig {
  EncoderConfig encoder;
  ToyTaskSpec task;
  ModelKind model = ModelKind::Branchformer;
  int steps = 2000;
  int batch_size = 16;
  double lr_base = 0.15;
  int warmup = 500;
  double label_smoothing = 0.1;
  AdamConfig adam;
  int checkpoint_every = 1000;
  std::string out_dir = "run";
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);

struct TrainResult {
  std::vector<double> losses;
  double final_train_accuracy = 0.0;
  std::string final_checkpoint;
  ToyModel model;
};

TrainResult train(const TrainConfig& cfg);

// Accuracy over n fresh samples from the task distribution, inference mode.
double evaluate_accuracy(ToyModel& model, int n_samples, std::uint64_t seed,
                         bool pruned_inference = false);

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central finite differences (step 1e-5) on every parameter scalar against
// the tape gradients; rel err denominator max(|a|, |b|, 1e-6).
GradCheckReport grad_check(ToyModel& model, const Tensor& features,
                           const std::vector<int>& targets, double tolerance = 1e-4);

ToyModel grad_check_build_model(const TrainConfig& cfg);
GradCheckReport grad_check_from_config(const TrainConfig& cfg, double tolerance = 1e-4);

const char* to_string(ModelKind k);
const char* to_string(ToyTask t);
ModelKind model_kind_from_string(const std::string& s);
ToyTask toy_task_from_string(const std::string& s);

}  // namespace bf
