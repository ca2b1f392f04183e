#include "ctl/annotator.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <unordered_set>

namespace ctl {

namespace {

bool IsPunct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
bool IsSpace(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string Fold(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool EndsSentence(const std::string& tok) { return tok == "." || tok == "!" || tok == "?"; }

}  // namespace

std::vector<std::string> TokenizeText(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (IsSpace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else if (IsPunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenizedDocument TokenizeDocument(const ClinicalDocument& doc) {
  TokenizedDocument out;
  out.patient_id = doc.patient_id;
  out.doc_id = doc.doc_id;
  out.created_at = doc.created_at;
  std::string cur;
  bool newline_pending = false;
  auto push = [&](std::string tok) {
    if (newline_pending && !out.tokens.empty()) {
      const int last = out.tokens.back().id;
      if (out.sentence_boundaries.empty() || out.sentence_boundaries.back() != last) {
        out.sentence_boundaries.push_back(last);
      }
    }
    newline_pending = false;
    const int id = static_cast<int>(out.tokens.size());
    const bool ends = EndsSentence(tok);
    out.tokens.push_back({std::move(tok), id});
    if (ends) out.sentence_boundaries.push_back(id);
  };
  for (char c : doc.text) {
    if (IsSpace(c)) {
      if (!cur.empty()) push(std::move(cur)), cur.clear();
      if (c == '\n') newline_pending = true;
    } else if (IsPunct(c)) {
      if (!cur.empty()) push(std::move(cur)), cur.clear();
      push(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) push(std::move(cur));
  return out;
}

std::string JoinTokens(const TokenizedDocument& doc, Span span) {
  std::string out;
  for (int i = span.start; i <= span.end; ++i) {
    if (i > span.start) out += ' ';
    out += doc.tokens[static_cast<std::size_t>(i)].text;
  }
  return out;
}

Span ExtractContext(const TokenizedDocument& doc, Span mention, int window) {
  const auto& b = doc.sentence_boundaries;
  const int last = static_cast<int>(doc.tokens.size()) - 1;
  // Sentence start: one past the last boundary strictly before the mention.
  int sentence_start = 0;
  auto it = std::lower_bound(b.begin(), b.end(), mention.start);
  if (it != b.begin()) sentence_start = *std::prev(it) + 1;
  // Sentence end: the first boundary at or after the mention end.
  int sentence_end = last;
  auto jt = std::lower_bound(b.begin(), b.end(), mention.end);
  if (jt != b.end()) sentence_end = *jt;

  Span ctx;
  ctx.start = std::max({sentence_start, mention.start - window, 0});
  ctx.end = std::min({sentence_end, mention.end + window, last});
  return ctx;
}

// ---------------------------------------------------------------------------

Lexicon Lexicon::Build(std::vector<ConceptEntry> entries) {
  if (entries.empty()) throw DataError("lexicon has no entries");
  std::sort(entries.begin(), entries.end(),
            [](const ConceptEntry& a, const ConceptEntry& b) { return a.code < b.code; });
  Lexicon lex;
  lex.root_ = std::make_shared<Node>();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.code.empty()) throw DataError("lexicon entry with empty code");
    if (e.canonical_name.empty()) throw DataError("lexicon entry " + e.code + " has an empty name");
    if (i > 0 && entries[i - 1].code == e.code) {
      throw DuplicateError("duplicate lexicon code " + e.code);
    }
    std::vector<std::string> surfaces{e.canonical_name};
    surfaces.insert(surfaces.end(), e.synonyms.begin(), e.synonyms.end());
    for (const auto& surface : surfaces) {
      const auto toks = TokenizeText(Fold(surface));
      if (toks.empty()) throw DataError("lexicon entry " + e.code + " has an empty synonym");
      Node* node = lex.root_.get();
      for (const auto& t : toks) {
        auto& child = node->children[t];
        if (!child) child = std::make_unique<Node>();
        node = child.get();
      }
      if (!node->code.empty() && node->code != e.code) {
        throw DataError("ambiguous lexicon surface '" + surface + "' maps to both " +
                        node->code + " and " + e.code);
      }
      node->code = e.code;
    }
  }
  lex.entries_ = std::move(entries);
  return lex;
}

const ConceptEntry* Lexicon::Find(std::string_view code) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), code,
                             [](const ConceptEntry& e, std::string_view c) { return e.code < c; });
  if (it == entries_.end() || it->code != code) return nullptr;
  return &*it;
}

std::string Lexicon::Resolve(std::string_view surface) const {
  const Node* node = root_.get();
  for (const auto& t : TokenizeText(Fold(surface))) {
    auto it = node->children.find(t);
    if (it == node->children.end()) return {};
    node = it->second.get();
  }
  return node->code;
}

std::vector<Lexicon::Match> Lexicon::AllMatches(const std::vector<Token>& tokens) const {
  std::vector<Match> out;
  std::vector<std::string> folded;
  folded.reserve(tokens.size());
  for (const auto& t : tokens) folded.push_back(Fold(t.text));
  for (std::size_t i = 0; i < folded.size(); ++i) {
    const Node* node = root_.get();
    for (std::size_t j = i; j < folded.size(); ++j) {
      auto it = node->children.find(folded[j]);
      if (it == node->children.end()) break;
      node = it->second.get();
      if (!node->code.empty()) {
        out.push_back({static_cast<int>(i), static_cast<int>(j - i + 1), node->code});
      }
    }
  }
  return out;
}

std::vector<ConceptMention> AnnotateDocument(const TokenizedDocument& doc, const Lexicon& lexicon,
                                             int context_window) {
  auto candidates = lexicon.AllMatches(doc.tokens);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Lexicon::Match& a, const Lexicon::Match& b) {
                     if (a.length != b.length) return a.length > b.length;
                     return a.start < b.start;
                   });
  std::vector<bool> taken(doc.tokens.size(), false);
  std::vector<ConceptMention> out;
  for (const auto& m : candidates) {
    bool free = true;
    for (int k = m.start; k < m.start + m.length; ++k) free = free && !taken[static_cast<std::size_t>(k)];
    if (!free) continue;
    for (int k = m.start; k < m.start + m.length; ++k) taken[static_cast<std::size_t>(k)] = true;
    ConceptMention cm;
    cm.code = m.code;
    cm.patient_id = doc.patient_id;
    cm.doc_id = doc.doc_id;
    cm.timestamp = doc.created_at;
    cm.mention_span = {m.start, m.start + m.length - 1};
    cm.context_span = ExtractContext(doc, cm.mention_span, context_window);
    cm.context_text = JoinTokens(doc, cm.context_span);
    out.push_back(std::move(cm));
  }
  std::sort(out.begin(), out.end(), [](const ConceptMention& a, const ConceptMention& b) {
    return a.mention_span.start < b.mention_span.start;
  });
  return out;
}

std::vector<ConceptMention> AnnotateCorpus(const Corpus& corpus, const Lexicon& lexicon,
                                           int context_window, int jobs) {
  std::vector<std::vector<ConceptMention>> per_patient(corpus.patients.size());
  ParallelFor(corpus.patients.size(), jobs, [&](std::size_t i) {
    auto& out = per_patient[i];
    for (const auto& d : corpus.patients[i].documents) {
      auto ms = AnnotateDocument(TokenizeDocument(d), lexicon, context_window);
      out.insert(out.end(), std::make_move_iterator(ms.begin()), std::make_move_iterator(ms.end()));
    }
    std::stable_sort(out.begin(), out.end(), [](const ConceptMention& a, const ConceptMention& b) {
      if (a.doc_id != b.doc_id) return a.doc_id < b.doc_id;
      return a.mention_span.start < b.mention_span.start;
    });
  });
  std::vector<ConceptMention> all;
  for (auto& v : per_patient) {
    all.insert(all.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  }
  return all;
}

// ---------------------------------------------------------------------------
// Files.

std::vector<ConceptEntry> LoadLexiconEntries(const std::filesystem::path& path) {
  std::vector<ConceptEntry> out;
  for (const auto& r : ReadRecords(path, kLexiconSchema)) {
    try {
      ConceptEntry e;
      e.code = r.value.at("code").get<std::string>();
      e.canonical_name = r.value.at("name").get<std::string>();
      e.concept_type = ParseConceptType(r.value.at("type").get<std::string>());
      e.synonyms = r.value.value("synonyms", std::vector<std::string>{});
      out.push_back(std::move(e));
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    } catch (const DataError& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteLexicon(const std::vector<ConceptEntry>& entries, const std::filesystem::path& path) {
  RecordWriter w(path, kLexiconSchema);
  for (const auto& e : entries) {
    w.Write(Json{{"code", e.code},
                 {"name", e.canonical_name},
                 {"type", ConceptTypeName(e.concept_type)},
                 {"synonyms", e.synonyms}});
  }
  w.Close();
}

std::vector<ConceptEntry> LexiconFromSynthetic(const SyntheticConfig& cfg) {
  std::vector<ConceptEntry> out;
  for (const auto& c : cfg.concepts) out.push_back({c.code, c.name, c.type, c.synonyms});
  return out;
}

Json MentionToJson(const ConceptMention& m) {
  return Json{{"code", m.code},
              {"patient_id", m.patient_id},
              {"doc_id", m.doc_id},
              {"timestamp", FormatTimestamp(m.timestamp)},
              {"mention_span", {m.mention_span.start, m.mention_span.end}},
              {"context_span", {m.context_span.start, m.context_span.end}},
              {"context_text", m.context_text}};
}

ConceptMention MentionFromJson(const Json& j) {
  ConceptMention m;
  m.code = j.at("code").get<std::string>();
  m.patient_id = j.at("patient_id").get<std::string>();
  m.doc_id = j.at("doc_id").get<std::string>();
  m.timestamp = ParseTimestamp(j.at("timestamp").get<std::string>());
  const auto& ms = j.at("mention_span");
  const auto& cs = j.at("context_span");
  m.mention_span = {ms.at(0).get<int>(), ms.at(1).get<int>()};
  m.context_span = {cs.at(0).get<int>(), cs.at(1).get<int>()};
  m.context_text = j.at("context_text").get<std::string>();
  return m;
}

std::vector<ConceptMention> LoadMentions(const std::filesystem::path& path) {
  std::vector<ConceptMention> out;
  for (const auto& r : ReadRecords(path, kMentionsSchema)) {
    try {
      out.push_back(MentionFromJson(r.value));
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    } catch (const DataError& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteMentions(const std::vector<ConceptMention>& mentions, const std::filesystem::path& path) {
  RecordWriter w(path, kMentionsSchema);
  for (const auto& m : mentions) w.Write(MentionToJson(m));
  w.Close();
}

}  // namespace ctl
