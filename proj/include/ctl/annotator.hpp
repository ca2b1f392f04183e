#ifndef CTL_ANNOTATOR_HPP_
#define CTL_ANNOTATOR_HPP_

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctl/common.hpp"
#include "ctl/corpus.hpp"

namespace ctl {

struct ConceptEntry {
  std::string code;
  std::string canonical_name;
  ConceptType concept_type = ConceptType::kDisorder;
  std::vector<std::string> synonyms;
};

struct Token {
  std::string text;
  int id = 0;
};

struct TokenizedDocument {
  std::string patient_id;
  std::string doc_id;
  Timestamp created_at = 0;
  std::vector<Token> tokens;
  // Index of the last token of each sentence, ascending.
  std::vector<int> sentence_boundaries;
};

// Inclusive token-id range.
struct Span {
  int start = 0;
  int end = 0;
  int width() const { return end - start + 1; }
  bool operator==(const Span&) const = default;
};

struct ConceptMention {
  std::string code;
  std::string patient_id;
  std::string doc_id;
  Timestamp timestamp = 0;
  Span mention_span;
  Span context_span;
  std::string context_text;

  DayIndex day() const { return DayOf(timestamp); }
  bool operator==(const ConceptMention&) const = default;
};

// Case-insensitive multi-word dictionary over canonical names and synonyms.
class Lexicon {
 public:
  static Lexicon Build(std::vector<ConceptEntry> entries);

  const ConceptEntry* Find(std::string_view code) const;
  // Code of the exact (case-folded, tokenized) surface string, or empty.
  std::string Resolve(std::string_view surface) const;
  const std::vector<ConceptEntry>& entries() const { return entries_; }

  struct Match {
    int start;
    int length;
    std::string code;
  };
  // Every dictionary match in the token sequence (all starts, all lengths).
  std::vector<Match> AllMatches(const std::vector<Token>& tokens) const;

 private:
  struct Node {
    std::map<std::string, std::unique_ptr<Node>> children;
    std::string code;
  };

  std::vector<ConceptEntry> entries_;  // sorted by code
  std::shared_ptr<Node> root_;
};

// Whitespace tokenization with each ASCII punctuation character as its own token.
// Sentences end after '.', '!' or '?' tokens and at newline runs.
TokenizedDocument TokenizeDocument(const ClinicalDocument& doc);
std::vector<std::string> TokenizeText(std::string_view text);

// Enclosing sentence when both of its edges lie within `window` tokens of the
// mention; each side otherwise falls back to mention +/- window, clamped to
// the document.
Span ExtractContext(const TokenizedDocument& doc, Span mention, int window = 50);

// Non-overlapping mentions: candidates are taken longest first, then earliest.
// Result is ordered by start token.
std::vector<ConceptMention> AnnotateDocument(const TokenizedDocument& doc, const Lexicon& lexicon,
                                             int context_window = 50);

std::string JoinTokens(const TokenizedDocument& doc, Span span);

// Annotates every document of every patient. Output is ordered by patient (corpus
// order) and then (doc_id, start token).
std::vector<ConceptMention> AnnotateCorpus(const Corpus& corpus, const Lexicon& lexicon,
                                           int context_window = 50, int jobs = 1);

std::vector<ConceptEntry> LoadLexiconEntries(const std::filesystem::path& path);
void WriteLexicon(const std::vector<ConceptEntry>& entries, const std::filesystem::path& path);
std::vector<ConceptEntry> LexiconFromSynthetic(const SyntheticConfig& cfg);

Json MentionToJson(const ConceptMention& m);
ConceptMention MentionFromJson(const Json& j);
std::vector<ConceptMention> LoadMentions(const std::filesystem::path& path);
void WriteMentions(const std::vector<ConceptMention>& mentions, const std::filesystem::path& path);

inline const SchemaTag kLexiconSchema{"lexicon", 1};
inline const SchemaTag kMentionsSchema{"mentions", 1};

}  // namespace ctl

#endif  // CTL_ANNOTATOR_HPP_
