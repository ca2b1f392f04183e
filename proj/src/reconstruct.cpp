#include "ctl/reconstruct.hpp"

#include <algorithm>
#include <unordered_map>

namespace ctl {

namespace {

bool EventBefore(const ConceptEvent& a, const ConceptEvent& b) {
  const auto& x = a.mention;
  const auto& y = b.mention;
  if (x.timestamp != y.timestamp) return x.timestamp < y.timestamp;
  if (x.doc_id != y.doc_id) return x.doc_id < y.doc_id;
  if (x.mention_span.start != y.mention_span.start) {
    return x.mention_span.start < y.mention_span.start;
  }
  return x.code < y.code;
}

void AppendText(std::vector<NoteSegment>& out, const std::string& text) {
  if (text.empty()) return;
  if (!out.empty()) {
    if (auto* t = std::get_if<TextSegment>(&out.back())) {
      t->text += ' ';
      t->text += text;
      return;
    }
  }
  out.push_back(TextSegment{text});
}

std::string Join(const TokenizedDocument& doc, int start, int end) {
  if (end < start) return {};
  return JoinTokens(doc, Span{start, end});
}

// Emits one merged context with its concept tokens; the only place that
// decides where a code token sits relative to its mention.
void EmitGroup(const ContextGroup& g, const TokenizedDocument& doc, CodePlacement placement,
               std::vector<NoteSegment>& out) {
  int cursor = g.span.start;
  for (const auto& m : g.members) {
    const auto& ms = m.mention.mention_span;
    if (placement == CodePlacement::kAfterMention) {
      AppendText(out, Join(doc, cursor, ms.end));
    } else {
      AppendText(out, Join(doc, cursor, ms.start - 1));
    }
    out.push_back(ConceptTokenSegment{m.code()});
    cursor = ms.end + 1;
  }
  AppendText(out, Join(doc, cursor, g.span.end));
}

void CheckResolvable(const ConceptEvent& e, const DocumentIndex& docs) {
  const auto& m = e.mention;
  auto it = docs.find(m.doc_id);
  if (it == docs.end()) {
    throw IntegrityError("context references unknown document '" + m.doc_id + "' of patient '" +
                         m.patient_id + "'");
  }
  const int n = static_cast<int>(it->second.tokens.size());
  const auto& c = m.context_span;
  const auto& s = m.mention_span;
  if (c.start < 0 || c.end >= n || c.start > c.end || s.start < c.start || s.end > c.end ||
      s.start > s.end) {
    throw IntegrityError("unresolvable span in document '" + m.doc_id + "' of patient '" +
                         m.patient_id + "'");
  }
}

}  // namespace

std::vector<ContextGroup> MergeContexts(std::vector<ConceptEvent> events) {
  std::sort(events.begin(), events.end(), EventBefore);
  // Group by document in first-appearance order, then sweep intervals.
  std::vector<std::string> doc_order;
  std::unordered_map<std::string, std::vector<ConceptEvent>> by_doc;
  for (auto& e : events) {
    auto& v = by_doc[e.mention.doc_id];
    if (v.empty()) doc_order.push_back(e.mention.doc_id);
    v.push_back(std::move(e));
  }
  std::vector<std::pair<ConceptEvent, ContextGroup>> keyed;  // (earliest member, group)
  for (const auto& doc_id : doc_order) {
    auto& v = by_doc[doc_id];
    std::sort(v.begin(), v.end(), [](const ConceptEvent& a, const ConceptEvent& b) {
      const auto& x = a.mention.context_span;
      const auto& y = b.mention.context_span;
      if (x.start != y.start) return x.start < y.start;
      return EventBefore(a, b);
    });
    std::vector<ContextGroup> groups;
    for (auto& e : v) {
      const Span c = e.mention.context_span;
      if (!groups.empty() && c.start <= groups.back().span.end + 1) {
        groups.back().span.end = std::max(groups.back().span.end, c.end);
        groups.back().members.push_back(std::move(e));
      } else {
        groups.push_back(ContextGroup{doc_id, c, {}});
        groups.back().members.push_back(std::move(e));
      }
    }
    for (auto& g : groups) {
      std::sort(g.members.begin(), g.members.end(), [](const ConceptEvent& a, const ConceptEvent& b) {
        return a.mention.mention_span.start < b.mention.mention_span.start;
      });
      const ConceptEvent first = *std::min_element(g.members.begin(), g.members.end(), EventBefore);
      keyed.emplace_back(first, std::move(g));
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return EventBefore(a.first, b.first); });
  std::vector<ContextGroup> out;
  out.reserve(keyed.size());
  for (auto& [first, g] : keyed) out.push_back(std::move(g));
  return out;
}

DocumentIndex IndexDocuments(const PatientRecord& record) {
  DocumentIndex idx;
  for (const auto& d : record.documents) idx.emplace(d.doc_id, TokenizeDocument(d));
  return idx;
}

ReconstructedNote RenderNote(const PatientTimeline& timeline, const DocumentIndex& docs,
                             const RenderOptions& options) {
  ReconstructedNote note;
  note.patient_id = timeline.patient_id;
  std::vector<ConceptEvent> run;
  auto flush = [&] {
    if (run.empty()) return;
    for (const auto& e : run) CheckResolvable(e, docs);
    if (!options.include_context) {
      for (const auto& e : run) note.segments.push_back(ConceptTokenSegment{e.code()});
    } else {
      for (const auto& g : MergeContexts(run)) {
        EmitGroup(g, docs.at(g.doc_id), options.placement, note.segments);
      }
    }
    run.clear();
  };
  for (const auto& e : timeline.events) {
    if (const auto* c = std::get_if<ConceptEvent>(&e)) {
      run.push_back(*c);
      continue;
    }
    flush();
    if (const auto* d = std::get_if<DemographicEvent>(&e)) {
      note.segments.push_back(SpecialTokenSegment{DemographicToken(*d)});
    } else {
      note.segments.push_back(SpecialTokenSegment{std::get<SeparatorEvent>(e).gap_class});
    }
  }
  flush();
  return note;
}

std::vector<ReconstructedNote> RenderNotes(const std::vector<PatientTimeline>& timelines,
                                           const Corpus& corpus, const RenderOptions& options,
                                           int jobs) {
  std::unordered_map<std::string, const PatientRecord*> records;
  for (const auto& p : corpus.patients) records[p.patient_id] = &p;
  std::vector<ReconstructedNote> out(timelines.size());
  ParallelFor(timelines.size(), jobs, [&](std::size_t i) {
    auto it = records.find(timelines[i].patient_id);
    if (it == records.end()) {
      throw IntegrityError("timeline for patient '" + timelines[i].patient_id +
                           "' has no corpus record");
    }
    out[i] = RenderNote(timelines[i], IndexDocuments(*it->second), options);
  });
  return out;
}

std::string FlattenNote(const ReconstructedNote& note) {
  std::string out;
  for (const auto& s : note.segments) {
    if (!out.empty()) out += ' ';
    if (const auto* t = std::get_if<TextSegment>(&s)) {
      out += t->text;
    } else if (const auto* c = std::get_if<ConceptTokenSegment>(&s)) {
      out += "[[" + c->code + "]]";
    } else {
      out += std::get<SpecialTokenSegment>(s).token;
    }
  }
  return out;
}

std::string RenderWithNames(const ReconstructedNote& note, const Lexicon& lexicon) {
  std::string out;
  for (const auto& s : note.segments) {
    if (!out.empty()) out += ' ';
    if (const auto* t = std::get_if<TextSegment>(&s)) {
      out += t->text;
    } else if (const auto* c = std::get_if<ConceptTokenSegment>(&s)) {
      const auto* e = lexicon.Find(c->code);
      out += e ? e->canonical_name : c->code;
    } else {
      out += std::get<SpecialTokenSegment>(s).token;
    }
  }
  return out;
}

Json NoteToJson(const ReconstructedNote& note) {
  Json segs = Json::array();
  for (const auto& s : note.segments) {
    if (const auto* t = std::get_if<TextSegment>(&s)) {
      segs.push_back({{"text", t->text}});
    } else if (const auto* c = std::get_if<ConceptTokenSegment>(&s)) {
      segs.push_back({{"concept", c->code}});
    } else {
      segs.push_back({{"special", std::get<SpecialTokenSegment>(s).token}});
    }
  }
  return Json{{"patient_id", note.patient_id}, {"segments", segs}};
}

ReconstructedNote NoteFromJson(const Json& j) {
  ReconstructedNote n;
  n.patient_id = j.at("patient_id").get<std::string>();
  for (const auto& s : j.at("segments")) {
    if (s.contains("text")) {
      n.segments.push_back(TextSegment{s.at("text").get<std::string>()});
    } else if (s.contains("concept")) {
      n.segments.push_back(ConceptTokenSegment{s.at("concept").get<std::string>()});
    } else if (s.contains("special")) {
      n.segments.push_back(SpecialTokenSegment{s.at("special").get<std::string>()});
    } else {
      throw DataError("note segment without text/concept/special");
    }
  }
  return n;
}

std::vector<ReconstructedNote> LoadNotes(const std::filesystem::path& path) {
  std::vector<ReconstructedNote> out;
  for (const auto& r : ReadRecords(path, kNotesSchema)) {
    try {
      out.push_back(NoteFromJson(r.value));
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    } catch (const DataError& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteNotes(const std::vector<ReconstructedNote>& notes, const std::filesystem::path& path) {
  RecordWriter w(path, kNotesSchema);
  for (const auto& n : notes) w.Write(NoteToJson(n));
  w.Close();
}

}  // namespace ctl
