#ifndef CTL_RISK_HPP_
#define CTL_RISK_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctl/eval.hpp"
#include "ctl/model.hpp"
#include "ctl/reconstruct.hpp"
#include "ctl/timeline.hpp"

namespace ctl {

struct RiskCriteria {
  int max_history_concepts = 50;
  int window_days = 30;       // labels come from (split_day, split_day + window]
  int min_future_days = 30;   // last concept day - split_day
  int min_window_disorders = 5;
};

struct RiskSplit {
  PatientTimeline history;  // events up to and including the split concept
  std::vector<ConceptEvent> future;
  DayIndex split_day = 0;
};

// Split index = min(floor(concepts / 2), max_history_concepts) concepts.
// nullopt when the timeline has fewer than two concepts.
std::optional<RiskSplit> SplitTimeline(const PatientTimeline& t, int max_history_concepts = 50);

struct RiskExample {
  std::string patient_id;
  PatientTimeline history;
  DayIndex split_day = 0;
  std::vector<std::string> labels;  // new disorders, by first future occurrence
};

struct RiskExclusion {
  std::string patient_id;
  std::string reason;
};

// Pure per-patient predicate; exclusions are returned and logged.
std::optional<RiskExample> MakeRiskExample(const PatientTimeline& t, const ConceptCatalog& catalog,
                                           const RiskCriteria& criteria, std::string* reason = nullptr);
std::vector<RiskExample> BuildRiskDataset(const std::vector<PatientTimeline>& timelines,
                                          const ConceptCatalog& catalog, const RiskCriteria& criteria = {},
                                          std::vector<RiskExclusion>* excluded = nullptr, int jobs = 1);

Json RiskExampleToJson(const RiskExample& e);
RiskExample RiskExampleFromJson(const Json& j);
std::vector<RiskExample> LoadRiskExamples(const std::filesystem::path& path);
void WriteRiskExamples(const std::vector<RiskExample>& examples, const std::filesystem::path& path);
inline const SchemaTag kRiskExamplesSchema{"risk_examples", 1};

// "<s>" + encoded rendered history.
std::vector<int> HistoryIds(const PatientTimeline& history, const DocumentIndex& docs, const Vocabulary& vocab,
                            const RenderOptions& options = {});

// history + "<risk>" + label codes; only label codes are supervised. Oldest
// ids are dropped when the sequence exceeds max_seq_len.
TrainingExample BuildStage2Example(const std::vector<int>& history_ids, const std::vector<std::string>& labels,
                                   const Vocabulary& vocab, int max_seq_len);

// One epoch by default, optimizer settings otherwise inherited.
Checkpoint FinetuneStage2(const Checkpoint& ckpt, const Vocabulary& data_vocab,
                          const std::vector<TrainingExample>& examples, int epochs = 1,
                          std::uint64_t seed = 7);

// Greedy decoding from "<risk>" over disorder codes that are neither in the
// history nor already emitted. Fewer than k codes (with a warning) when the
// disorder vocabulary runs out.
std::vector<std::string> PredictTopK(const NextTokenModel& model, const Vocabulary& vocab,
                                     std::vector<int> history_ids, const std::set<std::string>& history_codes,
                                     int max_seq_len, int k = 5);

struct RiskPrediction {
  std::string patient_id;
  std::vector<std::string> predictions;
  std::vector<std::string> labels;
};
std::vector<RiskPrediction> LoadRiskPredictions(const std::filesystem::path& path);
void WriteRiskPredictions(const std::vector<RiskPrediction>& preds, const std::filesystem::path& path);
inline const SchemaTag kRiskPredictionsSchema{"risk_predictions", 1};

// ---------------------------------------------------------------------------
// Scoring.

class MatchOracle {
 public:
  virtual ~MatchOracle() = default;
  virtual int Count(const std::vector<std::string>& predictions, const std::vector<std::string>& labels) const = 0;
};

class ExactMatchOracle : public MatchOracle {
 public:
  int Count(const std::vector<std::string>& predictions, const std::vector<std::string>& labels) const override;
};

// Codes or names in the same equivalence class match; unlisted keys form
// their own class. Count = sum over classes of min(#predictions, #labels).
class TableMatchOracle : public MatchOracle {
 public:
  explicit TableMatchOracle(std::map<std::string, std::string> key_to_class)
      : classes_(std::move(key_to_class)) {}
  static TableMatchOracle Load(const std::filesystem::path& path);  // TSV: key<TAB>class
  int Count(const std::vector<std::string>& predictions, const std::vector<std::string>& labels) const override;

 private:
  std::string ClassOf(const std::string& key) const;
  std::map<std::string, std::string> classes_;
};

struct RiskReport {
  std::string model;
  std::optional<double> at_least_1;  // percentages of support
  std::optional<double> at_least_2;
  std::optional<double> at_least_3;
  long support = 0;
};

// nullopt counts (unjudged patients) are left out of the support.
RiskReport AggregateRisk(const std::string& model, const std::vector<std::optional<int>>& counts);
std::string RiskReportToTsv(const std::vector<RiskReport>& reports);

// ---------------------------------------------------------------------------
// External judge.

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JudgeResult {
  std::string explanation;
  int number_of_direct_matches = 0;
};

struct JudgeConfig {
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4-turbo";
  std::string auth_header = "Authorization";
  std::string api_key;  // sent as "<auth_header>: Bearer <api_key>" when set
  double temperature = 0.0;
  int max_retries = 3;
  int timeout_seconds = 60;
  int concurrency = 4;
  int retry_backoff_ms = 200;
};

// First balanced {...} object in `text`; retried with single quotes turned
// into double quotes when the strict parse fails.
std::optional<Json> ExtractJsonObject(const std::string& text);
// Throws JudgeError when the reply carries no usable count.
JudgeResult ParseJudgeReply(const std::string& content, std::size_t n_predictions);

std::string JudgeUserMessage(const std::vector<std::string>& labels, const std::vector<std::string>& predictions);

class JudgeClient {
 public:
  explicit JudgeClient(JudgeConfig config) : config_(std::move(config)) {}
  // Names, not codes.
  JudgeResult Judge(const std::vector<std::string>& predictions, const std::vector<std::string>& labels) const;
  const JudgeConfig& config() const { return config_; }

 private:
  JudgeConfig config_;
};

struct JudgeRequest {
  std::string patient_id;
  std::vector<std::string> predictions;
  std::vector<std::string> labels;
};

struct JudgeOutcome {
  std::string patient_id;
  std::optional<JudgeResult> result;
  std::string error;
};

// Concurrent up to config().concurrency; output ordered by patient_id.
std::vector<JudgeOutcome> JudgeMany(const JudgeClient& client, std::vector<JudgeRequest> requests);

// ---------------------------------------------------------------------------
// Baseline prompts.

enum class PromptFormat { kGpt4, kBioMistral, kMedAlpaca, kMeditron };
PromptFormat ParsePromptFormat(const std::string& s);
const char* PromptFormatName(PromptFormat f);

struct BaselinePrompt {
  std::string system;  // empty for single-string formats
  std::string user;
  std::string Text() const;  // what a single-string endpoint receives
};

// Replaces {name} placeholders in one pass; other braces are left alone.
std::string FillTemplate(std::string_view tpl, const std::map<std::string, std::string>& values);

BaselinePrompt RenderBaselinePrompt(const std::string& history, PromptFormat format, int limit = 5);

// Sequence budget in whitespace tokens (context length minus 128 generated
// tokens); nullopt when the format has no practical limit.
std::optional<int> PromptBudget(PromptFormat format);
int CountWhitespaceTokens(std::string_view text);

}  // namespace ctl

#endif  // CTL_RISK_HPP_
