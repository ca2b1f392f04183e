#ifndef CTL_CORPUS_HPP_
#define CTL_CORPUS_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctl/common.hpp"

namespace ctl {

enum class Sex { kMale, kFemale, kUnknown };
std::string SexCode(Sex s);  // "M", "F", "U"
Sex ParseSex(std::string_view s);

struct ClinicalDocument {
  std::string patient_id;
  std::string doc_id;
  Timestamp created_at = 0;
  std::string text;

  DayIndex day() const { return DayOf(created_at); }
  bool operator==(const ClinicalDocument&) const = default;
};

struct PatientRecord {
  std::string patient_id;
  Sex sex = Sex::kUnknown;
  std::string ethnicity;
  DayIndex birth_date = 0;
  std::vector<ClinicalDocument> documents;  // ascending by created_at

  bool operator==(const PatientRecord&) const = default;
};

struct Corpus {
  std::vector<PatientRecord> patients;

  const PatientRecord* Find(std::string_view patient_id) const;
  std::size_t DocumentCount() const;
  bool operator==(const Corpus&) const = default;
};

enum class ConceptType { kDisorder, kSubstance, kFinding, kProcedure };
std::string ConceptTypeName(ConceptType t);
ConceptType ParseConceptType(std::string_view s);
inline constexpr ConceptType kAllConceptTypes[] = {
    ConceptType::kDisorder, ConceptType::kSubstance, ConceptType::kFinding,
    ConceptType::kProcedure};

struct SyntheticConcept {
  std::string code;
  std::string name;
  ConceptType type = ConceptType::kDisorder;
  std::vector<std::string> synonyms;
  // Probability that a patient carries this concept as a background event.
  double prevalence = 0.1;
  // Clinical findings written before the diagnosis sentence of an event
  // document; they are plain text, never lexicon matches.
  std::vector<std::string> lead_ins{};
};

struct TransitionRule {
  std::string source;
  std::string target;
  double probability = 0.0;
  int lag_days = 1;
};

struct SyntheticConfig {
  std::size_t n_patients = 0;
  std::vector<SyntheticConcept> concepts;
  std::vector<TransitionRule> transition_rules;
  int min_docs_per_patient = 2;
  int max_docs_per_patient = 6;
  int timeline_span_days = 720;
  // Comorbidity episode: after the background events, a burst of distinct
  // disorders not involved in any rule, spread over episode_span_days.
  double episode_probability = 0.0;
  double lead_in_probability = 0.0;
  int episode_min_disorders = 6;
  int episode_max_disorders = 8;
  int episode_span_days = 20;
  std::vector<std::string> noise_vocabulary;
  std::uint64_t seed = 7;
};

// The built-in desk-scale configuration: a small clinical lexicon with the
// planted rule "fracture of ankle -> deep venous thrombosis within 1 day".
SyntheticConfig DefaultSyntheticConfig(std::size_t n_patients, std::uint64_t seed);
SyntheticConfig SyntheticConfigFromJson(const Json& j);
Json SyntheticConfigToJson(const SyntheticConfig& cfg);
void ValidateSyntheticConfig(const SyntheticConfig& cfg);

Corpus LoadCorpus(const std::filesystem::path& path);
void WriteCorpus(const Corpus& corpus, const std::filesystem::path& path);
// Builds a corpus from already-parsed records (header and document lines).
Corpus CorpusFromRecords(const std::vector<Record>& records, const std::string& source);

Corpus GenerateSynthetic(const SyntheticConfig& cfg);

// Uniform seeded sampling of round(test_fraction * n) test patients.
std::pair<Corpus, Corpus> SplitPatients(const Corpus& corpus, double test_fraction,
                                        std::uint64_t seed);

inline const SchemaTag kCorpusSchema{"corpus", 1};

}  // namespace ctl

#endif  // CTL_CORPUS_HPP_
