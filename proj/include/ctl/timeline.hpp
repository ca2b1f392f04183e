#ifndef CTL_TIMELINE_HPP_
#define CTL_TIMELINE_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ctl/annotator.hpp"
#include "ctl/corpus.hpp"

namespace ctl {

enum class DemographicKind { kSex, kEthnicity, kAgeDecade };

struct DemographicEvent {
  DemographicKind kind = DemographicKind::kSex;
  std::string value;
  bool operator==(const DemographicEvent&) const = default;
};

struct ConceptEvent {
  ConceptMention mention;  // bucket representative
  DayIndex bucket_date = 0;
  const std::string& code() const { return mention.code; }
  bool operator==(const ConceptEvent&) const = default;
};

struct SeparatorEvent {
  std::string gap_class;
  bool operator==(const SeparatorEvent&) const = default;
};

using TimelineEvent = std::variant<DemographicEvent, ConceptEvent, SeparatorEvent>;

struct PatientTimeline {
  std::string patient_id;
  std::vector<TimelineEvent> events;

  std::vector<const ConceptEvent*> Concepts() const;
  std::size_t ConceptCount() const;
  bool operator==(const PatientTimeline&) const = default;
};

// Special-token spelling of a demographic event, e.g. "<sex:M>", "<age:60s>".
std::string DemographicToken(const DemographicEvent& e);
std::string AgeDecade(int age_years);  // "0s" .. "100s"

// Separator ladder for a gap of `gap_days` >= 1:
// 1-7 days, 8-30 -> weeks (floor g/7), 31-364 -> months (floor g/30),
// >= 365 -> years (floor g/365, "10+" beyond ten). A count of 1 is singular.
std::string SeparatorToken(std::int64_t gap_days);
// Every token the ladder can emit.
std::vector<std::string> AllSeparatorTokens();

// Keeps the earliest mention (timestamp, doc_id, start token) of each
// (code, bucket) group; output is chronological.
std::vector<ConceptEvent> BucketMentions(const std::vector<ConceptMention>& mentions,
                                         int bucket_days = 1);

// Drops codes with exactly one raw mention in the patient's record.
std::vector<ConceptMention> FilterSingletons(const std::vector<ConceptMention>& mentions);

// Interleaves a separator between consecutive concepts more than
// `bucket_days` apart.
std::vector<TimelineEvent> InsertSeparators(const std::vector<ConceptEvent>& events,
                                            int bucket_days = 1);

// filter_singletons -> bucket -> separators -> demographics. Returns nullopt
// (and logs why) when no concept survives.
std::optional<PatientTimeline> BuildTimeline(const PatientRecord& record,
                                             const std::vector<ConceptMention>& mentions,
                                             int bucket_days = 1);

std::vector<PatientTimeline> BuildTimelines(const Corpus& corpus,
                                            const std::vector<ConceptMention>& mentions,
                                            int bucket_days = 1, int jobs = 1);

// Structural validator; empty result means the timeline is well formed.
std::vector<std::string> ValidateTimeline(const PatientTimeline& t);

Json TimelineToJson(const PatientTimeline& t);
PatientTimeline TimelineFromJson(const Json& j);
std::vector<PatientTimeline> LoadTimelines(const std::filesystem::path& path);
void WriteTimelines(const std::vector<PatientTimeline>& timelines,
                    const std::filesystem::path& path);

inline const SchemaTag kTimelinesSchema{"timelines", 1};

}  // namespace ctl

#endif  // CTL_TIMELINE_HPP_
