#ifndef CTL_RECONSTRUCT_HPP_
#define CTL_RECONSTRUCT_HPP_

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ctl/annotator.hpp"
#include "ctl/timeline.hpp"

namespace ctl {

struct TextSegment {
  std::string text;
  bool operator==(const TextSegment&) const = default;
};
struct ConceptTokenSegment {
  std::string code;
  bool operator==(const ConceptTokenSegment&) const = default;
};
struct SpecialTokenSegment {
  std::string token;
  bool operator==(const SpecialTokenSegment&) const = default;
};
using NoteSegment = std::variant<TextSegment, ConceptTokenSegment, SpecialTokenSegment>;

struct ReconstructedNote {
  std::string patient_id;
  std::vector<NoteSegment> segments;
  bool operator==(const ReconstructedNote&) const = default;
};

struct ContextGroup {
  std::string doc_id;
  Span span;
  std::vector<ConceptEvent> members;  // ascending mention start
};

// Contexts in the same document whose token ranges overlap or touch are
// unioned. Groups come out in chronological order of their first member.
std::vector<ContextGroup> MergeContexts(std::vector<ConceptEvent> events);

enum class CodePlacement {
  kAfterMention,    // surface text kept, code token follows it
  kReplaceMention,  // surface text dropped
};

struct RenderOptions {
  bool include_context = true;  // false -> concepts-only ablation
  CodePlacement placement = CodePlacement::kAfterMention;
};

// Documents of one patient keyed by doc_id.
using DocumentIndex = std::map<std::string, TokenizedDocument>;
DocumentIndex IndexDocuments(const PatientRecord& record);

ReconstructedNote RenderNote(const PatientTimeline& timeline, const DocumentIndex& docs,
                             const RenderOptions& options = {});

std::vector<ReconstructedNote> RenderNotes(const std::vector<PatientTimeline>& timelines,
                                           const Corpus& corpus,
                                           const RenderOptions& options = {}, int jobs = 1);

// Human-readable form: codes wrapped as [[code]].
std::string FlattenNote(const ReconstructedNote& note);
// Codes replaced by canonical names (for prompts to name-only models).
std::string RenderWithNames(const ReconstructedNote& note, const Lexicon& lexicon);

Json NoteToJson(const ReconstructedNote& note);
ReconstructedNote NoteFromJson(const Json& j);
std::vector<ReconstructedNote> LoadNotes(const std::filesystem::path& path);
void WriteNotes(const std::vector<ReconstructedNote>& notes, const std::filesystem::path& path);

inline const SchemaTag kNotesSchema{"notes", 1};

}  // namespace ctl

#endif  // CTL_RECONSTRUCT_HPP_
