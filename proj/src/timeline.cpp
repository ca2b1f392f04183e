#include "ctl/timeline.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>

namespace ctl {

namespace {

bool MentionBefore(const ConceptMention& a, const ConceptMention& b) {
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  if (a.doc_id != b.doc_id) return a.doc_id < b.doc_id;
  if (a.mention_span.start != b.mention_span.start) {
    return a.mention_span.start < b.mention_span.start;
  }
  return a.code < b.code;
}

DayIndex FloorDiv(DayIndex a, DayIndex b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

std::string Plural(std::int64_t n, const char* unit) {
  std::string s = "<" + std::to_string(n) + " " + unit;
  if (n != 1) s += 's';
  return s + " later>";
}

}  // namespace

std::vector<const ConceptEvent*> PatientTimeline::Concepts() const {
  std::vector<const ConceptEvent*> out;
  for (const auto& e : events) {
    if (const auto* c = std::get_if<ConceptEvent>(&e)) out.push_back(c);
  }
  return out;
}

std::size_t PatientTimeline::ConceptCount() const {
  return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [](const auto& e) {
    return std::holds_alternative<ConceptEvent>(e);
  }));
}

std::string AgeDecade(int age_years) {
  const int decade = std::clamp(age_years, 0, 100) / 10 * 10;
  return std::to_string(decade) + "s";
}

std::string DemographicToken(const DemographicEvent& e) {
  std::string value = e.value;
  for (auto& c : value) {
    if (std::isspace(static_cast<unsigned char>(c))) c = '_';
  }
  switch (e.kind) {
    case DemographicKind::kSex: return "<sex:" + value + ">";
    case DemographicKind::kEthnicity: return "<ethnicity:" + value + ">";
    case DemographicKind::kAgeDecade: return "<age:" + value + ">";
  }
  return "<" + value + ">";
}

std::string SeparatorToken(std::int64_t g) {
  if (g < 1) throw std::invalid_argument("separator gap must be >= 1 day");
  if (g <= 7) return Plural(g, "day");
  if (g <= 30) return Plural(g / 7, "week");
  if (g <= 364) return Plural(g / 30, "month");
  const std::int64_t years = g / 365;
  if (years > 10) return "<10+ years later>";
  return Plural(years, "year");
}

std::vector<std::string> AllSeparatorTokens() {
  std::vector<std::string> out;
  for (int d = 1; d <= 7; ++d) out.push_back(Plural(d, "day"));
  for (int w = 1; w <= 4; ++w) out.push_back(Plural(w, "week"));
  for (int m = 1; m <= 12; ++m) out.push_back(Plural(m, "month"));
  for (int y = 1; y <= 10; ++y) out.push_back(Plural(y, "year"));
  out.push_back("<10+ years later>");
  return out;
}

std::vector<ConceptEvent> BucketMentions(const std::vector<ConceptMention>& mentions,
                                         int bucket_days) {
  if (bucket_days < 1) throw ConfigError("bucket_days must be >= 1");
  std::map<std::pair<std::string, DayIndex>, const ConceptMention*> best;
  for (const auto& m : mentions) {
    const auto key = std::make_pair(m.code, FloorDiv(m.day(), bucket_days));
    auto [it, inserted] = best.emplace(key, &m);
    if (!inserted && MentionBefore(m, *it->second)) it->second = &m;
  }
  std::vector<ConceptEvent> out;
  out.reserve(best.size());
  for (const auto& [key, m] : best) out.push_back({*m, m->day()});
  std::sort(out.begin(), out.end(), [](const ConceptEvent& a, const ConceptEvent& b) {
    return MentionBefore(a.mention, b.mention);
  });
  return out;
}

std::vector<ConceptMention> FilterSingletons(const std::vector<ConceptMention>& mentions) {
  std::unordered_map<std::string, int> counts;
  for (const auto& m : mentions) ++counts[m.code];
  std::vector<ConceptMention> out;
  for (const auto& m : mentions) {
    if (counts[m.code] != 1) out.push_back(m);
  }
  return out;
}

std::vector<TimelineEvent> InsertSeparators(const std::vector<ConceptEvent>& events,
                                            int bucket_days) {
  std::vector<TimelineEvent> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i > 0) {
      const auto gap = events[i].bucket_date - events[i - 1].bucket_date;
      if (gap > bucket_days) out.push_back(SeparatorEvent{SeparatorToken(gap)});
    }
    out.push_back(events[i]);
  }
  return out;
}

std::optional<PatientTimeline> BuildTimeline(const PatientRecord& record,
                                             const std::vector<ConceptMention>& mentions,
                                             int bucket_days) {
  for (const auto& m : mentions) {
    if (m.patient_id != record.patient_id) {
      throw DataError("mention for patient '" + m.patient_id + "' passed to timeline of '" +
                      record.patient_id + "'");
    }
  }
  const auto concepts = BucketMentions(FilterSingletons(mentions), bucket_days);
  if (concepts.empty()) {
    Log(LogLevel::kInfo, "timeline",
        mentions.empty() ? "dropped: no concept mentions" : "dropped: only singleton concepts",
        record.patient_id);
    return std::nullopt;
  }
  const auto body = InsertSeparators(concepts, bucket_days);

  PatientTimeline t;
  t.patient_id = record.patient_id;
  std::string decade = AgeDecade(YearsBetween(record.birth_date, concepts.front().bucket_date));
  t.events.push_back(DemographicEvent{DemographicKind::kSex, SexCode(record.sex)});
  t.events.push_back(DemographicEvent{DemographicKind::kEthnicity, record.ethnicity});
  t.events.push_back(DemographicEvent{DemographicKind::kAgeDecade, decade});
  for (const auto& e : body) {
    if (const auto* c = std::get_if<ConceptEvent>(&e)) {
      const auto now = AgeDecade(YearsBetween(record.birth_date, c->bucket_date));
      if (now != decade) {
        decade = now;
        t.events.push_back(DemographicEvent{DemographicKind::kAgeDecade, decade});
      }
    }
    t.events.push_back(e);
  }
  return t;
}

std::vector<PatientTimeline> BuildTimelines(const Corpus& corpus,
                                            const std::vector<ConceptMention>& mentions,
                                            int bucket_days, int jobs) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.patients.size(); ++i) index[corpus.patients[i].patient_id] = i;
  std::vector<std::vector<ConceptMention>> grouped(corpus.patients.size());
  for (const auto& m : mentions) {
    auto it = index.find(m.patient_id);
    if (it == index.end()) throw DataError("mention for unknown patient '" + m.patient_id + "'");
    grouped[it->second].push_back(m);
  }
  std::vector<std::optional<PatientTimeline>> built(corpus.patients.size());
  ParallelFor(corpus.patients.size(), jobs, [&](std::size_t i) {
    const auto& p = corpus.patients[i];
    if (p.documents.empty()) {
      Log(LogLevel::kInfo, "timeline", "dropped: patient has no documents", p.patient_id);
      return;
    }
    built[i] = BuildTimeline(p, grouped[i], bucket_days);
  });
  std::vector<PatientTimeline> out;
  for (auto& t : built) {
    if (t) out.push_back(std::move(*t));
  }
  return out;
}

std::vector<std::string> ValidateTimeline(const PatientTimeline& t) {
  std::vector<std::string> v;
  const auto& ev = t.events;
  const DemographicKind prefix[] = {DemographicKind::kSex, DemographicKind::kEthnicity,
                                    DemographicKind::kAgeDecade};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto* d = i < ev.size() ? std::get_if<DemographicEvent>(&ev[i]) : nullptr;
    if (d == nullptr || d->kind != prefix[i]) {
      v.push_back("event " + std::to_string(i) + " is not the expected demographic prefix");
    }
  }
  static const auto ladder = [] {
    auto all = AllSeparatorTokens();
    return std::set<std::string>(all.begin(), all.end());
  }();
  std::set<std::pair<std::string, DayIndex>> seen;
  DayIndex last_day = INT64_MIN;
  bool prev_separator = false;
  std::size_t concepts = 0;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    const bool is_sep = std::holds_alternative<SeparatorEvent>(ev[i]);
    if (is_sep && prev_separator) v.push_back("adjacent separators at " + std::to_string(i));
    if (is_sep && !ladder.count(std::get<SeparatorEvent>(ev[i]).gap_class)) {
      v.push_back("unknown separator '" + std::get<SeparatorEvent>(ev[i]).gap_class + "'");
    }
    prev_separator = is_sep;
    if (const auto* c = std::get_if<ConceptEvent>(&ev[i])) {
      ++concepts;
      if (c->bucket_date < last_day) v.push_back("concept dates decrease at " + std::to_string(i));
      last_day = c->bucket_date;
      if (!seen.emplace(c->code(), c->bucket_date).second) {
        v.push_back("duplicate (code, day) for " + c->code());
      }
      if (c->mention.patient_id != t.patient_id) v.push_back("foreign mention at " + std::to_string(i));
    }
  }
  if (concepts == 0) v.push_back("timeline has no concept events");
  return v;
}

// ---------------------------------------------------------------------------

namespace {

const char* KindName(DemographicKind k) {
  switch (k) {
    case DemographicKind::kSex: return "sex";
    case DemographicKind::kEthnicity: return "ethnicity";
    case DemographicKind::kAgeDecade: return "age_decade";
  }
  return "sex";
}

DemographicKind ParseKind(const std::string& s) {
  if (s == "sex") return DemographicKind::kSex;
  if (s == "ethnicity") return DemographicKind::kEthnicity;
  if (s == "age_decade") return DemographicKind::kAgeDecade;
  throw DataError("unknown demographic kind '" + s + "'");
}

}  // namespace

Json TimelineToJson(const PatientTimeline& t) {
  Json events = Json::array();
  for (const auto& e : t.events) {
    std::visit(
        [&](const auto& ev) {
          using E = std::decay_t<decltype(ev)>;
          if constexpr (std::is_same_v<E, DemographicEvent>) {
            events.push_back({{"kind", "demographic"}, {"field", KindName(ev.kind)}, {"value", ev.value}});
          } else if constexpr (std::is_same_v<E, ConceptEvent>) {
            events.push_back({{"kind", "concept"},
                              {"bucket_day", FormatDate(ev.bucket_date)},
                              {"mention", MentionToJson(ev.mention)}});
          } else {
            events.push_back({{"kind", "separator"}, {"token", ev.gap_class}});
          }
        },
        e);
  }
  return Json{{"patient_id", t.patient_id}, {"events", events}};
}

PatientTimeline TimelineFromJson(const Json& j) {
  PatientTimeline t;
  t.patient_id = j.at("patient_id").get<std::string>();
  for (const auto& e : j.at("events")) {
    const auto kind = e.at("kind").get<std::string>();
    if (kind == "demographic") {
      t.events.push_back(DemographicEvent{ParseKind(e.at("field").get<std::string>()),
                                          e.at("value").get<std::string>()});
    } else if (kind == "concept") {
      t.events.push_back(ConceptEvent{MentionFromJson(e.at("mention")),
                                      ParseDate(e.at("bucket_day").get<std::string>())});
    } else if (kind == "separator") {
      t.events.push_back(SeparatorEvent{e.at("token").get<std::string>()});
    } else {
      throw DataError("unknown timeline event kind '" + kind + "'");
    }
  }
  return t;
}

std::vector<PatientTimeline> LoadTimelines(const std::filesystem::path& path) {
  std::vector<PatientTimeline> out;
  for (const auto& r : ReadRecords(path, kTimelinesSchema)) {
    try {
      out.push_back(TimelineFromJson(r.value));
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    } catch (const DataError& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteTimelines(const std::vector<PatientTimeline>& timelines,
                    const std::filesystem::path& path) {
  RecordWriter w(path, kTimelinesSchema);
  for (const auto& t : timelines) w.Write(TimelineToJson(t));
  w.Close();
}

}  // namespace ctl
