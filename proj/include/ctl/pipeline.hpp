#ifndef CTL_PIPELINE_HPP_
#define CTL_PIPELINE_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctl/eval.hpp"
#include "ctl/model.hpp"
#include "ctl/risk.hpp"

namespace ctl {

inline constexpr const char* kToolVersion = "ctl 0.1.0";

struct RunConfig {
  std::uint64_t seed = 7;
  std::string work_dir = "run";
  int jobs = 1;

  std::string corpus_source = "synthetic";  // synthetic | file
  std::string corpus_path;
  std::string lexicon_path;
  int n_patients = 2000;
  double test_fraction = 0.05;
  double heldout_fraction = 0.05;  // of the training patients, for early stopping

  int context_tokens = 50;
  int bucket_days = 1;
  bool include_context = true;
  CodePlacement placement = CodePlacement::kAfterMention;

  int min_freq = 1;
  ConceptInit concept_init = ConceptInit::kNameMean;

  ModelConfig model;
  OptimizerConfig optimizer;
  LabelMode label_mode = LabelMode::kConceptsOnly;

  std::vector<Window> t_grid{30, 365, std::nullopt};
  std::vector<int> n_grid{1, 5, 10};
  std::string target_code;  // optional extra metric restricted to one code

  bool risk_enabled = true;
  RiskCriteria risk;
  int risk_epochs = 1;
  std::string oracle = "exact";  // exact | table | llm
  std::string equivalence_table;
  JudgeConfig judge;
  std::string judge_api_key_env = "CTL_JUDGE_API_KEY";

  // Keys as read, after includes; used for hashing.
  std::map<std::string, std::string> raw;
};

// key=value lines, '#' comments, "include = other.cfg" relative to the file.
std::map<std::string, std::string> ReadConfigFile(const std::filesystem::path& path);
RunConfig RunConfigFromMap(const std::map<std::string, std::string>& kv);
RunConfig LoadRunConfig(const std::filesystem::path& path);
// Applies environment overrides for endpoint secrets only.
void ApplySecretEnv(RunConfig& cfg);
std::string ConfigHash(const RunConfig& cfg);

// One message per violated precondition, prefixed with the module name.
std::vector<std::string> ValidateConfig(const RunConfig& cfg);

EvalGrid GridOf(const RunConfig& cfg);
RenderOptions RenderOf(const RunConfig& cfg);

struct StageRecord {
  std::string name;
  std::string fingerprint;
  std::map<std::string, std::string> outputs;  // file name -> sha256
  std::string started_at;
  std::string finished_at;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // path -> sha256
  std::vector<StageRecord> stages;
  std::vector<std::string> executed;  // stages run (not resumed) by this invocation
  std::string started_at;
  std::string finished_at;

  Json ToJson() const;
  static RunManifest FromJson(const Json& j);
};

struct PipelineOptions {
  bool resume = true;
  std::optional<std::string> fail_at_stage;  // test hook: inject a failure
};

// gen/ingest -> annotate -> timeline -> reconstruct -> vocab -> train -> eval
// (-> risk). Throws StageError naming the stage on failure.
RunManifest RunPipeline(const RunConfig& cfg, const PipelineOptions& options = {});

// Shared by the pipeline and the CLI subcommands.
struct TrainedModel {
  Checkpoint checkpoint;
  TrainResult result;
};
TrainedModel TrainOnNotes(const std::vector<ReconstructedNote>& train_notes,
                          const std::vector<ReconstructedNote>& heldout_notes, const Vocabulary& vocab,
                          const ModelConfig& model_cfg, const OptimizerConfig& opt, LabelMode mode,
                          ConceptInit init, std::uint64_t seed);

std::vector<std::optional<int>> ScoreRiskPredictions(const std::vector<RiskPrediction>& preds,
                                                     const RunConfig& cfg, const Lexicon& lexicon);

std::vector<TrainingExample> Stage2Examples(const std::vector<RiskExample>& examples, const Corpus& corpus,
                                            const Vocabulary& vocab, const RenderOptions& render, int max_len);
std::vector<RiskPrediction> PredictRisk(const Transformer& model, const Vocabulary& vocab,
                                        const std::vector<RiskExample>& examples, const Corpus& corpus,
                                        const RenderOptions& render);

std::string NowIso();

}  // namespace ctl

#endif  // CTL_PIPELINE_HPP_
