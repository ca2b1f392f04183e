#include "ctl/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace ctl {

const char* TemporalityName(Temporality t) { return t == Temporality::kNew ? "new" : "recurring"; }

ConceptCatalog CatalogFromLexicon(const Lexicon& lexicon) {
  ConceptCatalog c;
  for (const auto& e : lexicon.entries()) c[e.code] = e.concept_type;
  return c;
}

ConceptCatalog CatalogFromVocabulary(const Vocabulary& vocab) {
  ConceptCatalog c;
  for (int id : vocab.ConceptIds()) c[vocab.at(id).token] = vocab.at(id).type;
  return c;
}

TimelineView ViewOf(const PatientTimeline& t) {
  TimelineView v;
  v.patient_id = t.patient_id;
  for (const auto* c : t.Concepts()) {
    v.codes.push_back(c->code());
    v.days.push_back(c->bucket_date);
  }
  return v;
}

std::vector<EvalPoint> EnumerateEvalPoints(const TimelineView& view, const ConceptCatalog& catalog) {
  std::vector<EvalPoint> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < view.codes.size(); ++i) {
    const auto& code = view.codes[i];
    auto it = catalog.find(code);
    if (i > 0 && it != catalog.end()) {
      EvalPoint p;
      p.patient_id = view.patient_id;
      p.position = static_cast<int>(i);
      p.gold_code = code;
      p.gold_type = it->second;
      p.occurred_at = view.days[i];
      p.temporality = seen.count(code) ? Temporality::kRecurring : Temporality::kNew;
      out.push_back(std::move(p));
    }
    seen.insert(code);
  }
  return out;
}

std::vector<EvalPoint> EnumerateEvalPoints(const PatientTimeline& t, const ConceptCatalog& catalog) {
  return EnumerateEvalPoints(ViewOf(t), catalog);
}

namespace {

bool InWindow(DayIndex day, DayIndex from, Window t_days) {
  return day >= from && (!t_days || day <= from + *t_days);
}

bool SeenBefore(const TimelineView& view, const std::string& code, int position) {
  for (int i = 0; i < position; ++i) {
    if (view.codes[static_cast<std::size_t>(i)] == code) return true;
  }
  return false;
}

}  // namespace

bool PrecisionHit(const EvalPoint& point, const std::vector<std::string>& candidates,
                  const TimelineView& view, Window t_days) {
  for (const auto& c : candidates) {
    const bool recurring = SeenBefore(view, c, point.position);
    if (recurring != (point.temporality == Temporality::kRecurring)) continue;
    for (std::size_t q = static_cast<std::size_t>(point.position); q < view.codes.size(); ++q) {
      if (view.codes[q] == c && InWindow(view.days[q], point.occurred_at, t_days)) return true;
    }
  }
  return false;
}

std::vector<std::string> TopOfType(const std::vector<std::string>& ranked, const ConceptCatalog& catalog,
                                   ConceptType type, int n) {
  std::vector<std::string> out;
  for (const auto& code : ranked) {
    if (static_cast<int>(out.size()) >= n) break;
    auto it = catalog.find(code);
    if (it != catalog.end() && it->second == type) out.push_back(code);
  }
  return out;
}

bool RecallHit(const EvalPoint& occurrence, const std::vector<EvalPoint>& points,
               const std::vector<std::vector<std::string>>& ranked, const ConceptCatalog& catalog,
               Window t_days, int n) {
  for (const auto& p : points) {
    if (p.position > occurrence.position) continue;
    const DayIndex lo = t_days ? occurrence.occurred_at - *t_days : p.occurred_at;
    if (p.occurred_at < lo || p.occurred_at > occurrence.occurred_at) continue;
    const auto top = TopOfType(ranked.at(static_cast<std::size_t>(p.position)), catalog, occurrence.gold_type, n);
    if (std::find(top.begin(), top.end(), occurrence.gold_code) != top.end()) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Predictors.

std::vector<std::vector<std::string>> OraclePredictor::Rank(const PatientTimeline& t) const {
  const auto view = ViewOf(t);
  std::vector<std::vector<std::string>> out(view.codes.size());
  for (std::size_t i = 1; i < view.codes.size(); ++i) {
    auto& r = out[i];
    r.push_back(view.codes[i]);
    for (const auto& [code, type] : catalog_) {
      if (code != view.codes[i]) r.push_back(code);
    }
  }
  return out;
}

ModelPredictor::ModelPredictor(const Transformer& model, const Vocabulary& vocab, const Corpus& corpus,
                               RenderOptions options)
    : model_(model), vocab_(vocab), options_(options) {
  if (model.vocab_size() != vocab.size()) throw DataError("model and vocabulary sizes differ");
  for (const auto& p : corpus.patients) records_[p.patient_id] = &p;
}

std::vector<std::vector<std::string>> ModelPredictor::Rank(const PatientTimeline& t) const {
  auto it = records_.find(t.patient_id);
  if (it == records_.end()) throw IntegrityError("no corpus record for patient '" + t.patient_id + "'");
  const auto note = RenderNote(t, IndexDocuments(*it->second), options_);
  const auto enc = Encode(note, vocab_);
  std::vector<int> ids{vocab_.bos_id()};
  ids.insert(ids.end(), enc.token_ids.begin(), enc.token_ids.end());

  const int limit = model_.config().max_seq_len;
  const auto head_len = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(limit));
  const Eigen::MatrixXd head = model_.Forward(std::vector<int>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(head_len)));

  std::vector<std::vector<std::string>> out(enc.concept_positions.size());
  for (std::size_t i = 1; i < enc.concept_positions.size(); ++i) {
    const int pos = enc.concept_positions[i] + 1;  // index in ids
    Eigen::VectorXd logits;
    if (pos <= limit) {
      logits = head.row(pos - 1).transpose();
    } else {
      logits = model_.NextLogits(std::vector<int>(ids.begin() + (pos - limit), ids.begin() + pos));
    }
    for (auto& rc : RankFromLogits(logits, vocab_, {}, -1)) out[i].push_back(std::move(rc.code));
  }
  return out;
}

std::vector<ScoredTimeline> ScoreTimelines(const Predictor& predictor,
                                           const std::vector<PatientTimeline>& timelines,
                                           const ConceptCatalog& catalog, int jobs) {
  std::vector<ScoredTimeline> out(timelines.size());
  ParallelFor(timelines.size(), jobs, [&](std::size_t i) {
    auto& s = out[i];
    s.view = ViewOf(timelines[i]);
    s.points = EnumerateEvalPoints(s.view, catalog);
    s.ranked = predictor.Rank(timelines[i]);
    if (s.ranked.size() != s.view.codes.size()) {
      throw IntegrityError("predictor returned " + std::to_string(s.ranked.size()) + " rankings for " +
                           std::to_string(s.view.codes.size()) + " concepts of patient '" +
                           s.view.patient_id + "'");
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Metrics.

namespace {

std::optional<double> Ratio(long hits, long support) {
  if (support == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(support);
}

}  // namespace

std::optional<double> MetricsRow::precision_new() const { return Ratio(precision_hits_new, support_new); }
std::optional<double> MetricsRow::precision_recurring() const {
  return Ratio(precision_hits_recurring, support_recurring);
}
std::optional<double> MetricsRow::recall_new() const { return Ratio(recall_hits_new, support_new); }
std::optional<double> MetricsRow::recall_recurring() const {
  return Ratio(recall_hits_recurring, support_recurring);
}

std::vector<MetricsRow> ComputeMetrics(const std::vector<ScoredTimeline>& scored,
                                       const ConceptCatalog& catalog, const EvalGrid& grid,
                                       const MetricsOptions& options) {
  for (auto t : grid.t_days) {
    if (t && *t < 0) throw ConfigError("eval: T window must be non-negative");
  }
  for (int n : grid.n) {
    if (n < 1) throw ConfigError("eval: N must be >= 1");
  }
  std::vector<MetricsRow> rows;
  for (auto t_days : grid.t_days) {
    for (int n : grid.n) {
      MetricsRow all;
      all.t_days = t_days;
      all.n = n;
      for (auto type : grid.types) {
        MetricsRow row;
        row.type = type;
        row.t_days = t_days;
        row.n = n;
        for (const auto& s : scored) {
          for (const auto& p : s.points) {
            if (p.gold_type != type) continue;
            if (options.gold_code && p.gold_code != *options.gold_code) continue;
            const auto cands = TopOfType(s.ranked.at(static_cast<std::size_t>(p.position)), catalog, type, n);
            const bool ph = PrecisionHit(p, cands, s.view, t_days);
            const bool rh = RecallHit(p, s.points, s.ranked, catalog, t_days, n);
            if (p.temporality == Temporality::kNew) {
              ++row.support_new;
              row.precision_hits_new += ph;
              row.recall_hits_new += rh;
            } else {
              ++row.support_recurring;
              row.precision_hits_recurring += ph;
              row.recall_hits_recurring += rh;
            }
          }
        }
        all.support_new += row.support_new;
        all.support_recurring += row.support_recurring;
        all.precision_hits_new += row.precision_hits_new;
        all.precision_hits_recurring += row.precision_hits_recurring;
        all.recall_hits_new += row.recall_hits_new;
        all.recall_hits_recurring += row.recall_hits_recurring;
        rows.push_back(row);
      }
      rows.push_back(all);
    }
  }
  return rows;
}

std::vector<MetricsRow> ComputeMetrics(const Predictor& predictor,
                                       const std::vector<PatientTimeline>& timelines,
                                       const ConceptCatalog& catalog, const EvalGrid& grid,
                                       const MetricsOptions& options, int jobs) {
  return ComputeMetrics(ScoreTimelines(predictor, timelines, catalog, jobs), catalog, grid, options);
}

const MetricsRow* FindRow(const std::vector<MetricsRow>& rows, std::optional<ConceptType> type,
                          Window t_days, int n) {
  for (const auto& r : rows) {
    if (r.type == type && r.t_days == t_days && r.n == n) return &r;
  }
  return nullptr;
}

std::vector<ConceptPrecision> PerConceptReport(const std::vector<ScoredTimeline>& scored,
                                               const ConceptCatalog& catalog, ConceptType type,
                                               Temporality temporality, int n, Window t_days) {
  std::map<std::string, ConceptPrecision> by_code;
  for (const auto& s : scored) {
    for (const auto& p : s.points) {
      if (p.gold_type != type || p.temporality != temporality) continue;
      const auto cands = TopOfType(s.ranked.at(static_cast<std::size_t>(p.position)), catalog, type, n);
      if (cands.empty()) continue;
      auto& row = by_code[cands.front()];
      row.code = cands.front();
      if (PrecisionHit(p, cands, s.view, t_days)) ++row.tp;
      else ++row.fp;
    }
  }
  std::vector<ConceptPrecision> out;
  for (auto& [code, row] : by_code) {
    row.precision = static_cast<double>(row.tp) / static_cast<double>(row.tp + row.fp);
    out.push_back(row);
  }
  std::sort(out.begin(), out.end(), [](const ConceptPrecision& a, const ConceptPrecision& b) {
    if (a.precision != b.precision) return a.precision > b.precision;
    if (a.tp != b.tp) return a.tp > b.tp;
    return a.code < b.code;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

namespace {

std::string Fmt(std::optional<double> v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

std::string TypeLabel(std::optional<ConceptType> t) { return t ? ConceptTypeName(*t) : "All"; }
std::string WindowLabel(Window t) { return t ? std::to_string(*t) : "inf"; }

Json OptJson(std::optional<double> v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

std::string MetricsToTsv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "type\tT_days\tN\tprecision_new\tprecision_recurring\trecall_new\trecall_recurring\tsupport_new\t"
         "support_recurring\n";
  for (const auto& r : rows) {
    out << TypeLabel(r.type) << '\t' << WindowLabel(r.t_days) << '\t' << r.n << '\t' << Fmt(r.precision_new())
        << '\t' << Fmt(r.precision_recurring()) << '\t' << Fmt(r.recall_new()) << '\t'
        << Fmt(r.recall_recurring()) << '\t' << r.support_new << '\t' << r.support_recurring << '\n';
  }
  return out.str();
}

Json MetricsToJson(const std::vector<MetricsRow>& rows) {
  Json arr = Json::array();
  for (const auto& r : rows) {
    arr.push_back({{"type", TypeLabel(r.type)},
                   {"T_days", r.t_days ? Json(*r.t_days) : Json(nullptr)},
                   {"N", r.n},
                   {"precision_new", OptJson(r.precision_new())},
                   {"precision_recurring", OptJson(r.precision_recurring())},
                   {"recall_new", OptJson(r.recall_new())},
                   {"recall_recurring", OptJson(r.recall_recurring())},
                   {"support_new", r.support_new},
                   {"support_recurring", r.support_recurring}});
  }
  return arr;
}

std::string PerConceptToTsv(const std::vector<ConceptPrecision>& rows, const Lexicon* lexicon) {
  std::ostringstream out;
  out << "code\tname\tP\tTP\tFP\n";
  for (const auto& r : rows) {
    const ConceptEntry* e = lexicon ? lexicon->Find(r.code) : nullptr;
    char p[16];
    std::snprintf(p, sizeof(p), "%.2f", r.precision);
    out << r.code << '\t' << (e ? e->canonical_name : "") << '\t' << p << '\t' << r.tp << '\t' << r.fp << '\n';
  }
  return out.str();
}

}  // namespace ctl
