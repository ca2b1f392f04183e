#ifndef CTL_MODEL_HPP_
#define CTL_MODEL_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ctl/tokenizer.hpp"

namespace ctl {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int model_dim = 64;
  int ff_dim = 256;
  int max_seq_len = 256;  // full-scale runs used 4096
  double dropout = 0.0;
  std::uint64_t seed = 7;

  std::vector<std::string> Validate() const;
  Json ToJson() const;
  static ModelConfig FromJson(const Json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct OptimizerConfig {
  double learning_rate = 1e-3;  // full-scale runs used 1e-5
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_ratio = 0.1;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int grad_accum = 2;
  int epochs = 3;    // upper bound when early stopping is active
  int patience = 1;  // epochs without held-out improvement before stopping

  std::vector<std::string> Validate() const;
  Json ToJson() const;
  static OptimizerConfig FromJson(const Json& j);
  bool operator==(const OptimizerConfig&) const = default;
};

// Linear warmup over warmup_ratio * total_steps, then constant.
double LearningRate(const OptimizerConfig& opt, std::int64_t step, std::int64_t total_steps);

enum class LabelMode {
  kConceptsOnly,  // supervise only next tokens that are concept tokens
  kFullLm,        // supervise every next token except padding
};
const char* LabelModeName(LabelMode m);
LabelMode ParseLabelMode(const std::string& s);

struct TrainingExample {
  std::vector<int> input_ids;
  std::vector<int> label_ids;  // Vocabulary::kIgnoreLabel where unsupervised
};

// Concatenates "<s>" + note for every note and cuts the stream into windows of
// exactly max_seq_len ids; the last window is padded.
std::vector<TrainingExample> PackExamples(const std::vector<EncodedNote>& notes, const Vocabulary& vocab,
                                          int max_seq_len, LabelMode mode = LabelMode::kConceptsOnly);

// Label for position j is token j+1 when supervised under `mode`.
std::vector<int> DeriveLabels(const std::vector<int>& ids, const Vocabulary& vocab, LabelMode mode);

// Mean negative log-likelihood over rows whose label is not the ignore
// sentinel. Writes d(loss)/d(logits) when `dlogits` is non-null. Zero when no
// row is supervised.
double SelectiveNll(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                    Eigen::MatrixXd* dlogits = nullptr);

class NextTokenModel {
 public:
  virtual ~NextTokenModel() = default;
  // Logits over the vocabulary for the token following `prefix`.
  virtual Eigen::VectorXd NextLogits(const std::vector<int>& prefix) const = 0;
};

struct ParamInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
};

// Pre-norm decoder-only transformer with learned positions and tied
// input/output embeddings. All parameters live in one flat buffer.
class Transformer : public NextTokenModel {
 public:
  Transformer(const ModelConfig& config, int vocab_size);

  const ModelConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }

  void InitRandom(std::uint64_t seed);
  void SetEmbeddings(const EmbeddingMatrix& embeddings);
  EmbeddingMatrix Embeddings() const;

  // Logits for every position (rows) of `ids`; ids.size() <= max_seq_len.
  Eigen::MatrixXd Forward(const std::vector<int>& ids) const;
  Eigen::VectorXd NextLogits(const std::vector<int>& prefix) const override;

  // Loss of one sequence; adds scale * d(loss)/d(params) into `grads`.
  // Dropout is applied only when `dropout_rng` is non-null.
  double ForwardBackward(const std::vector<int>& ids, const std::vector<int>& labels,
                         std::vector<double>& grads, double scale, Rng* dropout_rng = nullptr) const;

 private:
  struct Cache;
  void RunForward(const std::vector<int>& ids, Cache& cache, Rng* dropout_rng) const;

  ModelConfig config_;
  int vocab_size_;
  std::vector<double> params_;
  std::vector<ParamInfo> layout_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::vector<LayerOffsets> layers_;
};

// Mean loss over all supervised positions of a batch.
double BatchLoss(const Transformer& model, const std::vector<TrainingExample>& batch);

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> heldout_losses;  // one per finished epoch
  std::int64_t steps = 0;
  int epochs_run = 0;
};

// AdamW with warmup, gradient accumulation, divergence abort and early
// stopping on `heldout` (when non-empty). Single-threaded and deterministic.
TrainResult Train(Transformer& model, const std::vector<TrainingExample>& train,
                  const std::vector<TrainingExample>& heldout, const OptimizerConfig& opt,
                  std::uint64_t seed,
                  const std::function<void(std::int64_t, double)>& on_step = nullptr);

struct RankFilter {
  std::optional<ConceptType> type;
  std::set<std::string> exclude;
};

struct RankedCode {
  std::string code;
  double probability = 0.0;
};

// Concept codes ordered by next-token probability (ties: code ascending).
std::vector<RankedCode> RankFromLogits(const Eigen::VectorXd& logits, const Vocabulary& vocab,
                                       const RankFilter& filter, int n);
std::vector<RankedCode> RankNext(const NextTokenModel& model, const Vocabulary& vocab,
                                 std::vector<int> prefix, int max_seq_len, const RankFilter& filter,
                                 int n);

struct Checkpoint {
  ModelConfig model;
  OptimizerConfig optimizer;
  Vocabulary vocab;
  LabelMode label_mode = LabelMode::kConceptsOnly;
  std::vector<double> params;
  std::int64_t step = 0;
};

Checkpoint MakeCheckpoint(const Transformer& model, const OptimizerConfig& opt, const Vocabulary& vocab,
                          LabelMode mode, std::int64_t step);
Transformer ModelFromCheckpoint(const Checkpoint& ckpt);
void SaveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

}  // namespace ctl

#endif  // CTL_MODEL_HPP_
