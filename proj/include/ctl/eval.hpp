#ifndef CTL_EVAL_HPP_
#define CTL_EVAL_HPP_

#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctl/model.hpp"
#include "ctl/reconstruct.hpp"
#include "ctl/timeline.hpp"

namespace ctl {

enum class Temporality { kNew, kRecurring };
const char* TemporalityName(Temporality t);

using ConceptCatalog = std::map<std::string, ConceptType>;  // code -> type
ConceptCatalog CatalogFromLexicon(const Lexicon& lexicon);
ConceptCatalog CatalogFromVocabulary(const Vocabulary& vocab);

// Concept codes and bucket days of a timeline, in order.
struct TimelineView {
  std::string patient_id;
  std::vector<std::string> codes;
  std::vector<DayIndex> days;
};
TimelineView ViewOf(const PatientTimeline& t);

struct EvalPoint {
  std::string patient_id;
  int position = 0;  // index among the timeline's concept events
  std::string gold_code;
  ConceptType gold_type = ConceptType::kDisorder;
  DayIndex occurred_at = 0;
  Temporality temporality = Temporality::kNew;
};

// One point per concept event that has at least one concept before it.
// Codes missing from the catalog get no point.
std::vector<EvalPoint> EnumerateEvalPoints(const TimelineView& view, const ConceptCatalog& catalog);
std::vector<EvalPoint> EnumerateEvalPoints(const PatientTimeline& t, const ConceptCatalog& catalog);

// T window in days; nullopt means the rest of the timeline.
using Window = std::optional<int>;

// `candidates` are already filtered to the point's type and cut to N.
bool PrecisionHit(const EvalPoint& point, const std::vector<std::string>& candidates,
                  const TimelineView& view, Window t_days);

// `ranked[i]` is the full ranking made before concept i (entry 0 unused).
bool RecallHit(const EvalPoint& occurrence, const std::vector<EvalPoint>& points,
               const std::vector<std::vector<std::string>>& ranked, const ConceptCatalog& catalog,
               Window t_days, int n);

// Top-n codes of `ranked` whose catalog type is `type`.
std::vector<std::string> TopOfType(const std::vector<std::string>& ranked, const ConceptCatalog& catalog,
                                   ConceptType type, int n);

class Predictor {
 public:
  virtual ~Predictor() = default;
  // For each concept index i >= 1, every catalog code ranked best first using
  // only what precedes concept i. Entry 0 may be empty.
  virtual std::vector<std::vector<std::string>> Rank(const PatientTimeline& t) const = 0;
};

// Ranks the true concept first, then the rest of the catalog by code.
class OraclePredictor : public Predictor {
 public:
  explicit OraclePredictor(ConceptCatalog catalog) : catalog_(std::move(catalog)) {}
  std::vector<std::vector<std::string>> Rank(const PatientTimeline& t) const override;

 private:
  ConceptCatalog catalog_;
};

// Renders each timeline to a note and scores it with the language model.
class ModelPredictor : public Predictor {
 public:
  ModelPredictor(const Transformer& model, const Vocabulary& vocab, const Corpus& corpus,
                 RenderOptions options = {});
  std::vector<std::vector<std::string>> Rank(const PatientTimeline& t) const override;

 private:
  const Transformer& model_;
  const Vocabulary& vocab_;
  std::map<std::string, const PatientRecord*> records_;
  RenderOptions options_;
};

struct ScoredTimeline {
  TimelineView view;
  std::vector<EvalPoint> points;
  std::vector<std::vector<std::string>> ranked;
};

std::vector<ScoredTimeline> ScoreTimelines(const Predictor& predictor,
                                           const std::vector<PatientTimeline>& timelines,
                                           const ConceptCatalog& catalog, int jobs = 1);

struct EvalGrid {
  std::vector<Window> t_days{30, 365, std::nullopt};
  std::vector<int> n{1, 5, 10};
  std::vector<ConceptType> types{std::begin(kAllConceptTypes), std::end(kAllConceptTypes)};
};

struct MetricsRow {
  std::optional<ConceptType> type;  // nullopt = All (micro average)
  Window t_days;
  int n = 1;
  long support_new = 0;
  long support_recurring = 0;
  long precision_hits_new = 0;
  long precision_hits_recurring = 0;
  long recall_hits_new = 0;
  long recall_hits_recurring = 0;

  std::optional<double> precision_new() const;
  std::optional<double> precision_recurring() const;
  std::optional<double> recall_new() const;
  std::optional<double> recall_recurring() const;
};

struct MetricsOptions {
  std::optional<std::string> gold_code;  // score only points of this code
};

std::vector<MetricsRow> ComputeMetrics(const std::vector<ScoredTimeline>& scored,
                                       const ConceptCatalog& catalog, const EvalGrid& grid = {},
                                       const MetricsOptions& options = {});
std::vector<MetricsRow> ComputeMetrics(const Predictor& predictor,
                                       const std::vector<PatientTimeline>& timelines,
                                       const ConceptCatalog& catalog, const EvalGrid& grid = {},
                                       const MetricsOptions& options = {}, int jobs = 1);

const MetricsRow* FindRow(const std::vector<MetricsRow>& rows, std::optional<ConceptType> type,
                          Window t_days, int n);

struct ConceptPrecision {
  std::string code;
  double precision = 0.0;
  long tp = 0;
  long fp = 0;
};

// Groups points of `type` and `temporality` by the top-1 predicted code.
// Sorted by precision desc, TP desc, code.
std::vector<ConceptPrecision> PerConceptReport(const std::vector<ScoredTimeline>& scored,
                                               const ConceptCatalog& catalog, ConceptType type,
                                               Temporality temporality = Temporality::kNew, int n = 1,
                                               Window t_days = 30);

std::string MetricsToTsv(const std::vector<MetricsRow>& rows);
Json MetricsToJson(const std::vector<MetricsRow>& rows);
std::string PerConceptToTsv(const std::vector<ConceptPrecision>& rows, const Lexicon* lexicon = nullptr);

}  // namespace ctl

#endif  // CTL_EVAL_HPP_
