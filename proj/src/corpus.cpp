#include "ctl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace ctl {

std::string SexCode(Sex s) {
  switch (s) {
    case Sex::kMale: return "M";
    case Sex::kFemale: return "F";
    case Sex::kUnknown: return "U";
  }
  return "U";
}

Sex ParseSex(std::string_view s) {
  if (s == "M") return Sex::kMale;
  if (s == "F") return Sex::kFemale;
  if (s == "U") return Sex::kUnknown;
  throw DataError("invalid sex '" + std::string(s) + "' (expected M, F or U)");
}

std::string ConceptTypeName(ConceptType t) {
  switch (t) {
    case ConceptType::kDisorder: return "Disorder";
    case ConceptType::kSubstance: return "Substance";
    case ConceptType::kFinding: return "Finding";
    case ConceptType::kProcedure: return "Procedure";
  }
  return "Disorder";
}

ConceptType ParseConceptType(std::string_view s) {
  if (s == "Disorder") return ConceptType::kDisorder;
  if (s == "Substance") return ConceptType::kSubstance;
  if (s == "Finding") return ConceptType::kFinding;
  if (s == "Procedure") return ConceptType::kProcedure;
  throw DataError("unknown concept type '" + std::string(s) + "'");
}

const PatientRecord* Corpus::Find(std::string_view patient_id) const {
  for (const auto& p : patients) {
    if (p.patient_id == patient_id) return &p;
  }
  return nullptr;
}

std::size_t Corpus::DocumentCount() const {
  std::size_t n = 0;
  for (const auto& p : patients) n += p.documents.size();
  return n;
}

// ---------------------------------------------------------------------------
// Loading and writing.

namespace {

std::string RequireString(const Record& r, const char* key, const std::string& source) {
  auto it = r.value.find(key);
  if (it == r.value.end() || !it->is_string()) {
    throw ParseError(source, r.line, std::string("missing or non-string field '") + key + "'");
  }
  return it->get<std::string>();
}

void SortDocuments(PatientRecord& p) {
  std::stable_sort(p.documents.begin(), p.documents.end(),
                   [](const ClinicalDocument& a, const ClinicalDocument& b) {
                     if (a.created_at != b.created_at) return a.created_at < b.created_at;
                     return a.doc_id < b.doc_id;
                   });
}

}  // namespace

Corpus CorpusFromRecords(const std::vector<Record>& records, const std::string& source) {
  Corpus corpus;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::pair<const Record*, ClinicalDocument>> docs;
  std::set<std::pair<std::string, std::string>> seen_docs;

  for (const auto& r : records) {
    const std::string pid = RequireString(r, "patient_id", source);
    if (r.value.contains("doc_id")) {
      ClinicalDocument d;
      d.patient_id = pid;
      d.doc_id = RequireString(r, "doc_id", source);
      try {
        d.created_at = ParseTimestamp(RequireString(r, "created_at", source));
      } catch (const ParseError&) {
        throw;
      } catch (const DataError& e) {
        throw ParseError(source, r.line, e.what());
      }
      d.text = RequireString(r, "text", source);
      if (d.text.empty()) throw ParseError(source, r.line, "empty document text");
      if (!seen_docs.emplace(pid, d.doc_id).second) {
        throw DuplicateError(source + ":" + std::to_string(r.line) + ": duplicate document (" +
                             pid + ", " + d.doc_id + ")");
      }
      docs.emplace_back(&r, std::move(d));
    } else {
      PatientRecord p;
      p.patient_id = pid;
      try {
        p.sex = ParseSex(RequireString(r, "sex", source));
        p.birth_date = ParseDate(RequireString(r, "birth_date", source));
      } catch (const ParseError&) {
        throw;
      } catch (const DataError& e) {
        throw ParseError(source, r.line, e.what());
      }
      p.ethnicity = RequireString(r, "ethnicity", source);
      if (index.count(pid)) {
        throw DuplicateError(source + ":" + std::to_string(r.line) + ": duplicate patient '" +
                             pid + "'");
      }
      index[pid] = corpus.patients.size();
      corpus.patients.push_back(std::move(p));
    }
  }
  for (auto& [rec, doc] : docs) {
    auto it = index.find(doc.patient_id);
    if (it == index.end()) {
      throw ParseError(source, rec->line,
                       "document for patient '" + doc.patient_id + "' without a header record");
    }
    auto& p = corpus.patients[it->second];
    if (doc.day() < p.birth_date) {
      throw ParseError(source, rec->line, "document created before the patient's birth date");
    }
    p.documents.push_back(std::move(doc));
  }
  for (auto& p : corpus.patients) SortDocuments(p);
  return corpus;
}

Corpus LoadCorpus(const std::filesystem::path& path) {
  return CorpusFromRecords(ReadRecords(path, kCorpusSchema), path.string());
}

void WriteCorpus(const Corpus& corpus, const std::filesystem::path& path) {
  RecordWriter w(path, kCorpusSchema);
  for (const auto& p : corpus.patients) {
    w.Write(Json{{"patient_id", p.patient_id},
                 {"sex", SexCode(p.sex)},
                 {"ethnicity", p.ethnicity},
                 {"birth_date", FormatDate(p.birth_date)}});
    for (const auto& d : p.documents) {
      w.Write(Json{{"patient_id", d.patient_id},
                   {"doc_id", d.doc_id},
                   {"created_at", FormatTimestamp(d.created_at)},
                   {"text", d.text}});
    }
  }
  w.Close();
}

// ---------------------------------------------------------------------------
// Synthetic configuration.

SyntheticConfig DefaultSyntheticConfig(std::size_t n_patients, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n_patients = n_patients;
  cfg.seed = seed;
  using T = ConceptType;
  cfg.concepts = {
      {"16114001", "Fracture of ankle", T::kDisorder, {"ankle fracture"}, 0.5},
      {"128053003", "Deep venous thrombosis", T::kDisorder, {"DVT"}, 0.12},
      {"73211009", "Diabetes mellitus", T::kDisorder, {"diabetes", "T2DM"}, 0.15},
      {"38341003", "Hypertension", T::kDisorder, {"high blood pressure", "HTN"}, 0.15},
      {"195967001", "Asthma", T::kDisorder, {}, 0.08},
      {"233604007", "Pneumonia", T::kDisorder, {}, 0.1},
      {"49436004", "Atrial fibrillation", T::kDisorder, {"AF", "afib"}, 0.1},
      {"84114007", "Heart failure", T::kDisorder, {"cardiac failure"}, 0.08},
      {"13645005", "Chronic obstructive lung disease", T::kDisorder, {"COPD"}, 0.08},
      {"40930008", "Hypothyroidism", T::kDisorder, {}, 0.06},
      {"271737000", "Anemia", T::kDisorder, {"anaemia"}, 0.1},
      {"59282003", "Pulmonary embolism", T::kDisorder, {"PE"}, 0.05},
      {"91302008", "Sepsis", T::kDisorder, {}, 0.06},
      {"14669001", "Acute kidney injury", T::kDisorder, {"AKI"}, 0.08},
      {"55822004", "Hyperlipidemia", T::kDisorder, {"high cholesterol"}, 0.1},
      {"235595009", "Gastroesophageal reflux disease", T::kDisorder, {"GERD", "reflux"}, 0.08},
      {"68566005", "Urinary tract infection", T::kDisorder, {"UTI"}, 0.08},
      {"35489007", "Depressive disorder", T::kDisorder, {"depression"}, 0.08},
      {"372567009", "Metformin", T::kSubstance, {}, 0.1},
      {"67866001", "Insulin", T::kSubstance, {}, 0.08},
      {"372756006", "Warfarin", T::kSubstance, {"coumadin"}, 0.08},
      {"372877000", "Heparin", T::kSubstance, {}, 0.08},
      {"387458008", "Aspirin", T::kSubstance, {"ASA"}, 0.12},
      {"387475002", "Furosemide", T::kSubstance, {"lasix"}, 0.08},
      {"386873009", "Lisinopril", T::kSubstance, {}, 0.08},
      {"387137007", "Omeprazole", T::kSubstance, {}, 0.08},
      {"386661006", "Fever", T::kFinding, {"pyrexia"}, 0.12},
      {"267036007", "Dyspnea", T::kFinding, {"shortness of breath", "SOB"}, 0.12},
      {"29857009", "Chest pain", T::kFinding, {}, 0.1},
      {"49727002", "Cough", T::kFinding, {}, 0.1},
      {"267038008", "Edema", T::kFinding, {"swelling"}, 0.1},
      {"422587007", "Nausea", T::kFinding, {}, 0.08},
      {"84229001", "Fatigue", T::kFinding, {"tiredness"}, 0.1},
      {"40701008", "Echocardiography", T::kProcedure, {"echo"}, 0.08},
      {"399208008", "Chest x-ray", T::kProcedure, {"CXR"}, 0.1},
      {"302497006", "Hemodialysis", T::kProcedure, {}, 0.04},
      {"73761001", "Colonoscopy", T::kProcedure, {}, 0.05},
      {"112798008", "Intubation", T::kProcedure, {}, 0.04},
  };
  cfg.transition_rules = {{"16114001", "128053003", 0.9, 1}};
  cfg.episode_probability = 0.3;
  cfg.lead_in_probability = 0.8;
  const std::map<std::string, std::vector<std::string>> lead_ins = {
      {"128053003", {"calf tender and warm", "unilateral leg tenderness"}},
      {"233604007", {"productive sputum and crackles", "consolidation on auscultation"}},
      {"91302008", {"hypotensive and tachycardic", "rigors with raised lactate"}},
      {"14669001", {"creatinine rising", "urine output low"}},
      {"84114007", {"bibasal crackles and raised jvp", "orthopnoea worsening"}},
  };
  for (auto& c : cfg.concepts) {
    if (auto it = lead_ins.find(c.code); it != lead_ins.end()) c.lead_ins = it->second;
  }
  cfg.noise_vocabulary = {
      "seen",      "today",     "stable",   "overnight", "reviewed",  "labs",
      "vitals",    "family",    "discussed", "follow",   "up",        "clinic",
      "ward",      "morning",   "evening",  "comfortable", "denies",  "mild",
      "improved",  "nursing",   "admitted", "discharged", "home",     "team",
      "consult",   "appetite",  "sleep",    "walking",  "tolerating", "diet",
      "afebrile",  "alert",     "oriented", "resting",  "bed",       "mobilising",
      "physio",    "review",    "bloods",   "sent",     "awaiting",  "results",
      "wife",      "son",       "daughter", "present",  "updated",   "remains",
      "well",      "settled",   "no",       "acute",    "distress",  "the",
      "and",       "with",      "was",      "is",       "on",        "in"};
  return cfg;
}

void ValidateSyntheticConfig(const SyntheticConfig& cfg) {
  std::unordered_set<std::string> codes;
  for (const auto& c : cfg.concepts) {
    if (c.code.empty() || c.name.empty()) throw ConfigError("synthetic concept with empty code or name");
    if (!codes.insert(c.code).second) throw ConfigError("duplicate synthetic concept code " + c.code);
    if (c.prevalence < 0.0 || c.prevalence > 1.0) {
      throw ConfigError("prevalence of " + c.code + " outside [0,1]");
    }
  }
  for (const auto& r : cfg.transition_rules) {
    if (r.probability < 0.0 || r.probability > 1.0) {
      throw ConfigError("rule probability outside [0,1]");
    }
    if (!codes.count(r.source) || !codes.count(r.target)) {
      throw ConfigError("rule references unknown code " + r.source + " -> " + r.target);
    }
    if (r.lag_days < 0) throw ConfigError("rule lag must be >= 0 days");
  }
  if (cfg.min_docs_per_patient < 1 || cfg.max_docs_per_patient < cfg.min_docs_per_patient) {
    throw ConfigError("invalid docs_per_patient range");
  }
  if (cfg.timeline_span_days < 1) throw ConfigError("timeline_span_days must be >= 1");
  if (cfg.lead_in_probability < 0.0 || cfg.lead_in_probability > 1.0) {
    throw ConfigError("lead_in_probability outside [0,1]");
  }
  if (cfg.episode_probability < 0.0 || cfg.episode_probability > 1.0) {
    throw ConfigError("episode_probability outside [0,1]");
  }
  if (cfg.episode_min_disorders < 1 || cfg.episode_max_disorders < cfg.episode_min_disorders ||
      cfg.episode_span_days < 0) {
    throw ConfigError("invalid episode settings");
  }
  if (cfg.noise_vocabulary.empty()) throw ConfigError("noise vocabulary is empty");
}

SyntheticConfig SyntheticConfigFromJson(const Json& j) {
  SyntheticConfig cfg;
  try {
    cfg.n_patients = j.value("n_patients", std::size_t{0});
    cfg.seed = j.value("seed", std::uint64_t{7});
    cfg.min_docs_per_patient = j.value("min_docs_per_patient", 2);
    cfg.max_docs_per_patient = j.value("max_docs_per_patient", 6);
    cfg.timeline_span_days = j.value("timeline_span_days", 720);
    if (j.value("use_default_concepts", false) || !j.contains("concepts")) {
      const auto def = DefaultSyntheticConfig(cfg.n_patients, cfg.seed);
      cfg.concepts = def.concepts;
      cfg.transition_rules = def.transition_rules;
      cfg.noise_vocabulary = def.noise_vocabulary;
      cfg.episode_probability = def.episode_probability;
      cfg.lead_in_probability = def.lead_in_probability;
    }
    if (j.contains("concepts")) {
      cfg.concepts.clear();
      for (const auto& c : j.at("concepts")) {
        SyntheticConcept sc;
        sc.code = c.at("code").get<std::string>();
        sc.name = c.at("name").get<std::string>();
        sc.type = ParseConceptType(c.at("type").get<std::string>());
        sc.synonyms = c.value("synonyms", std::vector<std::string>{});
        sc.prevalence = c.value("prevalence", 0.1);
        sc.lead_ins = c.value("lead_ins", std::vector<std::string>{});
        cfg.concepts.push_back(std::move(sc));
      }
    }
    if (j.contains("transition_rules")) {
      cfg.transition_rules.clear();
      for (const auto& r : j.at("transition_rules")) {
        cfg.transition_rules.push_back({r.at("source").get<std::string>(),
                                        r.at("target").get<std::string>(),
                                        r.at("probability").get<double>(),
                                        r.value("lag_days", 1)});
      }
    }
    cfg.episode_probability = j.value("episode_probability", cfg.episode_probability);
    cfg.lead_in_probability = j.value("lead_in_probability", cfg.lead_in_probability);
    cfg.episode_min_disorders = j.value("episode_min_disorders", cfg.episode_min_disorders);
    cfg.episode_max_disorders = j.value("episode_max_disorders", cfg.episode_max_disorders);
    cfg.episode_span_days = j.value("episode_span_days", cfg.episode_span_days);
    if (j.contains("noise_vocabulary")) {
      cfg.noise_vocabulary = j.at("noise_vocabulary").get<std::vector<std::string>>();
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid synthetic config: ") + e.what());
  }
  ValidateSyntheticConfig(cfg);
  return cfg;
}

Json SyntheticConfigToJson(const SyntheticConfig& cfg) {
  Json concepts = Json::array();
  for (const auto& c : cfg.concepts) {
    concepts.push_back({{"code", c.code},
                        {"name", c.name},
                        {"type", ConceptTypeName(c.type)},
                        {"synonyms", c.synonyms},
                        {"prevalence", c.prevalence},
                        {"lead_ins", c.lead_ins}});
  }
  Json rules = Json::array();
  for (const auto& r : cfg.transition_rules) {
    rules.push_back({{"source", r.source},
                     {"target", r.target},
                     {"probability", r.probability},
                     {"lag_days", r.lag_days}});
  }
  return Json{{"n_patients", cfg.n_patients},
              {"seed", cfg.seed},
              {"min_docs_per_patient", cfg.min_docs_per_patient},
              {"max_docs_per_patient", cfg.max_docs_per_patient},
              {"timeline_span_days", cfg.timeline_span_days},
              {"episode_probability", cfg.episode_probability},
              {"lead_in_probability", cfg.lead_in_probability},
              {"episode_min_disorders", cfg.episode_min_disorders},
              {"episode_max_disorders", cfg.episode_max_disorders},
              {"episode_span_days", cfg.episode_span_days},
              {"concepts", concepts},
              {"transition_rules", rules},
              {"noise_vocabulary", cfg.noise_vocabulary}};
}

// ---------------------------------------------------------------------------
// Synthetic generation.

namespace {

constexpr const char* kEthnicities[] = {"white", "black", "asian", "hispanic", "other"};

const std::vector<std::string>& MainTemplates(ConceptType t) {
  static const std::vector<std::string> kDisorder = {
      "patient presents with {} .", "assessment : {} .", "history notable for {} .",
      "new diagnosis of {} ."};
  static const std::vector<std::string> kSubstance = {"started on {} .", "continue {} .",
                                                      "given {} overnight ."};
  static const std::vector<std::string> kFinding = {"reports {} .", "examination shows {} .",
                                                    "complains of {} ."};
  static const std::vector<std::string> kProcedure = {"{} performed .", "underwent {} .",
                                                      "scheduled for {} ."};
  switch (t) {
    case ConceptType::kDisorder: return kDisorder;
    case ConceptType::kSubstance: return kSubstance;
    case ConceptType::kFinding: return kFinding;
    case ConceptType::kProcedure: return kProcedure;
  }
  return kDisorder;
}

const std::vector<std::string>& RepeatTemplates() {
  static const std::vector<std::string> k = {"plan : monitor {} .",
                                             "will continue to follow {} .",
                                             "impression remains {} ."};
  return k;
}

std::string Fill(const std::string& tmpl, const std::string& value) {
  std::string out = tmpl;
  const auto pos = out.find("{}");
  out.replace(pos, 2, value);
  return out;
}

template <typename T>
const T& Pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.UniformInt(0, static_cast<std::int64_t>(v.size()) - 1))];
}

std::string SurfaceForm(Rng& rng, const SyntheticConcept& c) {
  if (!c.synonyms.empty() && rng.Bernoulli(0.3)) return Pick(rng, c.synonyms);
  std::string name = c.name;
  for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return name;
}

std::string FillerSentence(Rng& rng, const SyntheticConfig& cfg) {
  const auto n = rng.UniformInt(3, 8);
  std::string s;
  for (std::int64_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += Pick(rng, cfg.noise_vocabulary);
  }
  const double u = rng.Uniform();
  s += u < 0.8 ? " ." : (u < 0.9 ? " !" : " ?");
  return s;
}

struct PlannedEvent {
  std::int64_t offset;  // days since the patient's first day
  std::size_t concept_index;
};

}  // namespace

Corpus GenerateSynthetic(const SyntheticConfig& cfg) {
  ValidateSyntheticConfig(cfg);
  Corpus corpus;
  if (cfg.n_patients == 0) return corpus;
  Rng rng(cfg.seed);
  std::unordered_map<std::string, std::size_t> by_code;
  for (std::size_t i = 0; i < cfg.concepts.size(); ++i) by_code[cfg.concepts[i].code] = i;

  const DayIndex epoch_start = ParseDate("2150-01-01");
  const int width = std::max<int>(5, static_cast<int>(std::to_string(cfg.n_patients).size()));

  for (std::size_t pi = 0; pi < cfg.n_patients; ++pi) {
    PatientRecord p;
    std::string num = std::to_string(pi + 1);
    p.patient_id = "P" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(width, num.size()), '0') + num;
    const double u = rng.Uniform();
    p.sex = u < 0.49 ? Sex::kMale : (u < 0.98 ? Sex::kFemale : Sex::kUnknown);
    p.ethnicity = kEthnicities[rng.UniformInt(0, 4)];
    const DayIndex first_day = epoch_start + rng.UniformInt(0, 3650);
    const auto age_days = rng.UniformInt(18 * 365, 90 * 365);
    p.birth_date = first_day - age_days;

    // Background events, then rule-triggered events.
    std::vector<PlannedEvent> events;
    for (std::size_t ci = 0; ci < cfg.concepts.size(); ++ci) {
      if (rng.Bernoulli(cfg.concepts[ci].prevalence)) {
        events.push_back({rng.UniformInt(0, cfg.timeline_span_days), ci});
      }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const PlannedEvent& a, const PlannedEvent& b) { return a.offset < b.offset; });
    const std::vector<PlannedEvent> background = events;
    for (const auto& rule : cfg.transition_rules) {
      const std::size_t src = by_code.at(rule.source);
      const std::size_t dst = by_code.at(rule.target);
      for (const auto& e : background) {
        if (e.concept_index != src) continue;
        if (rng.Bernoulli(rule.probability)) {
          const std::int64_t delay = rule.lag_days == 0 ? 0 : rng.UniformInt(1, rule.lag_days);
          events.push_back({e.offset + delay, dst});
        }
      }
    }
    if (cfg.episode_probability > 0.0 && rng.Bernoulli(cfg.episode_probability)) {
      std::vector<std::size_t> pool;
      for (std::size_t ci = 0; ci < cfg.concepts.size(); ++ci) {
        if (cfg.concepts[ci].type != ConceptType::kDisorder) continue;
        const bool in_rule = std::any_of(cfg.transition_rules.begin(), cfg.transition_rules.end(), [&](const auto& r) {
          return r.source == cfg.concepts[ci].code || r.target == cfg.concepts[ci].code;
        });
        if (!in_rule) pool.push_back(ci);
      }
      rng.Shuffle(pool);
      const auto k = std::min<std::size_t>(
          pool.size(), static_cast<std::size_t>(rng.UniformInt(cfg.episode_min_disorders, cfg.episode_max_disorders)));
      // The episode follows the first half of the patient's concepts and is
      // followed by at least one later event; pad with non-disorder events.
      std::vector<std::size_t> others;
      for (std::size_t ci = 0; ci < cfg.concepts.size(); ++ci) {
        if (cfg.concepts[ci].type != ConceptType::kDisorder) others.push_back(ci);
      }
      if (k > 0 && !others.empty()) {
        while (events.size() < k + 1 && !others.empty()) {
          events.push_back({rng.UniformInt(0, cfg.timeline_span_days), Pick(rng, others)});
        }
        std::stable_sort(events.begin(), events.end(),
                         [](const PlannedEvent& a, const PlannedEvent& b) { return a.offset < b.offset; });
        // Never separate a rule source from its target.
        int max_lag = 0;
        for (const auto& r : cfg.transition_rules) max_lag = std::max(max_lag, r.lag_days);
        std::size_t split = (events.size() + k) / 2;
        while (split > 0 && split < events.size() && events[split].offset - events[split - 1].offset <= max_lag) ++split;
        if (split == events.size()) {
          events.push_back({events.back().offset + 1, Pick(rng, others)});
        }
        const std::int64_t start = (split == 0 ? 0 : events[split - 1].offset) + rng.UniformInt(max_lag + 1, max_lag + 5);
        const std::int64_t shift = start + cfg.episode_span_days + 31 - events[split].offset;
        for (std::size_t i = split; i < events.size(); ++i) events[i].offset += std::max<std::int64_t>(shift, 0);
        for (std::size_t i = 0; i < k; ++i) events.push_back({start + rng.UniformInt(0, cfg.episode_span_days), pool[i]});
      }
    }
    if (events.empty()) events.push_back({rng.UniformInt(0, cfg.timeline_span_days),
                                          static_cast<std::size_t>(rng.UniformInt(0, static_cast<std::int64_t>(cfg.concepts.size()) - 1))});

    std::map<std::int64_t, std::vector<std::size_t>> by_day;
    for (const auto& e : events) {
      auto& v = by_day[e.offset];
      if (std::find(v.begin(), v.end(), e.concept_index) == v.end()) v.push_back(e.concept_index);
    }

    // Follow-up documents re-mention earlier concepts on later days.
    const auto target_docs = rng.UniformInt(cfg.min_docs_per_patient, cfg.max_docs_per_patient);
    std::map<std::int64_t, std::vector<std::size_t>> followups;
    const std::int64_t last_event = by_day.rbegin()->first;
    for (auto extra = target_docs - static_cast<std::int64_t>(by_day.size()); extra > 0; --extra) {
      const std::int64_t day = rng.UniformInt(by_day.begin()->first, last_event + 60);
      if (by_day.count(day) || followups.count(day)) continue;
      std::vector<std::size_t> seen;
      for (const auto& [d, cs] : by_day) {
        if (d >= day) break;
        seen.insert(seen.end(), cs.begin(), cs.end());
      }
      auto& mention = followups[day];
      if (!seen.empty()) {
        mention.push_back(Pick(rng, seen));
        if (seen.size() > 1 && rng.Bernoulli(0.3)) {
          const auto other = Pick(rng, seen);
          if (other != mention.front()) mention.push_back(other);
        }
      }
    }
    std::map<std::int64_t, std::pair<std::vector<std::size_t>, bool>> docs;
    for (auto& [d, cs] : by_day) docs[d] = {cs, true};
    for (auto& [d, cs] : followups) docs[d] = {cs, false};

    int doc_no = 0;
    for (const auto& [offset, entry] : docs) {
      const auto& [concepts, is_event] = entry;
      std::vector<std::string> sentences;
      const auto n_fill = rng.UniformInt(1, 3);
      for (std::int64_t i = 0; i < n_fill; ++i) sentences.push_back(FillerSentence(rng, cfg));
      for (std::size_t ci : concepts) {
        const auto& c = cfg.concepts[ci];
        if (is_event) {
          std::string main = Fill(Pick(rng, MainTemplates(c.type)), SurfaceForm(rng, c));
          if (!c.lead_ins.empty() && rng.Bernoulli(cfg.lead_in_probability)) {
            main = Pick(rng, c.lead_ins) + " , " + main;
          }
          sentences.push_back(std::move(main));
          if (rng.Bernoulli(0.85)) {
            sentences.push_back(Fill(Pick(rng, RepeatTemplates()), SurfaceForm(rng, c)));
          }
        } else {
          sentences.push_back(Fill(Pick(rng, RepeatTemplates()), SurfaceForm(rng, c)));
          sentences.push_back(FillerSentence(rng, cfg));
        }
        if (rng.Bernoulli(0.5)) sentences.push_back(FillerSentence(rng, cfg));
      }
      std::string text;
      for (std::size_t i = 0; i < sentences.size(); ++i) {
        if (i) text += rng.Bernoulli(0.2) ? "\n" : " ";
        text += sentences[i];
      }
      ClinicalDocument d;
      d.patient_id = p.patient_id;
      d.doc_id = "D" + std::to_string(++doc_no);
      d.created_at = (first_day + offset) * 86400 + rng.UniformInt(6, 20) * 3600 +
                     rng.UniformInt(0, 59) * 60;
      d.text = std::move(text);
      p.documents.push_back(std::move(d));
    }
    corpus.patients.push_back(std::move(p));
  }
  return corpus;
}

// ---------------------------------------------------------------------------

std::pair<Corpus, Corpus> SplitPatients(const Corpus& corpus, double test_fraction,
                                        std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie strictly between 0 and 1");
  }
  const std::size_t n = corpus.patients.size();
  if (n < 2) throw DataError("cannot split a corpus with fewer than 2 patients");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.Shuffle(order);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
  Corpus train, test;
  for (std::size_t i = 0; i < n; ++i) {
    (is_test[i] ? test : train).patients.push_back(corpus.patients[i]);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace ctl
