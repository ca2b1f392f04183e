#include <gtest/gtest.h>

#include <algorithm>

#include "ctl/annotator.hpp"

using namespace ctl;

namespace {

ClinicalDocument Doc(const std::string& text, const std::string& id = "d1") {
  return {"p1", id, 0, text};
}

std::vector<ConceptEntry> SmallLexicon() {
  return {{"1", "hypertension", ConceptType::kDisorder, {"high blood pressure"}},
          {"2", "diabetes", ConceptType::kDisorder, {}},
          {"3", "diabetes mellitus", ConceptType::kDisorder, {"T1DM"}},
          {"4", "aspirin", ConceptType::kSubstance, {}}};
}

std::string Repeat(const std::string& word, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += (i ? " " : "") + word;
  return s;
}

}  // namespace

TEST(Lexicon, ResolvesCanonicalNamesAndSynonyms) {
  const auto lex = Lexicon::Build(SmallLexicon());
  EXPECT_EQ(lex.Resolve("hypertension"), "1");
  EXPECT_EQ(lex.Resolve("Diabetes Mellitus"), "3");
  EXPECT_EQ(lex.Resolve("t1dm"), "3");
  EXPECT_EQ(lex.Resolve("High Blood Pressure"), "1");
  EXPECT_EQ(lex.Resolve("gout"), "");
  ASSERT_NE(lex.Find("4"), nullptr);
  EXPECT_EQ(lex.Find("4")->concept_type, ConceptType::kSubstance);
}

TEST(Lexicon, BuildErrors) {
  EXPECT_THROW(Lexicon::Build({}), DataError);
  auto dup = SmallLexicon();
  dup.push_back(dup[0]);
  EXPECT_THROW(Lexicon::Build(dup), DuplicateError);
  auto empty_name = SmallLexicon();
  empty_name[1].canonical_name = "";
  EXPECT_ANY_THROW(Lexicon::Build(empty_name));
  auto ambiguous = SmallLexicon();
  ambiguous[3].synonyms = {"t1dm"};
  EXPECT_ANY_THROW(Lexicon::Build(ambiguous));
}

TEST(Tokenize, SentenceBoundaries) {
  const auto doc = TokenizeDocument(Doc("No hypertension. Stable."));
  ASSERT_EQ(doc.tokens.size(), 5u);
  EXPECT_EQ(doc.tokens[1].text, "hypertension");
  EXPECT_EQ(doc.tokens[2].text, ".");
  ASSERT_FALSE(doc.sentence_boundaries.empty());
  EXPECT_EQ(doc.sentence_boundaries[0], 2);
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) EXPECT_EQ(doc.tokens[i].id, static_cast<int>(i));
}

TEST(Tokenize, WhitespaceAndTwoWords) {
  EXPECT_TRUE(TokenizeDocument(Doc("   ")).tokens.empty());
  const auto doc = TokenizeDocument(Doc("severe hypertension"));
  ASSERT_EQ(doc.tokens.size(), 2u);
  EXPECT_EQ(doc.tokens[0].id, 0);
  EXPECT_EQ(doc.tokens[1].id, 1);
}

TEST(Tokenize, NewlineRunEndsSentence) {
  const auto doc = TokenizeDocument(Doc("chest pain\n\nno fever"));
  ASSERT_EQ(doc.tokens.size(), 4u);
  EXPECT_EQ(doc.sentence_boundaries.front(), 1);
}

TEST(Annotate, LongestMatchWins) {
  const auto lex = Lexicon::Build(SmallLexicon());
  const auto mentions = AnnotateDocument(TokenizeDocument(Doc("known diabetes mellitus type 2 .")), lex);
  ASSERT_EQ(mentions.size(), 1u);
  EXPECT_EQ(mentions[0].code, "3");
  EXPECT_EQ(mentions[0].mention_span, (Span{1, 2}));
}

TEST(Annotate, NoTermNoMentions) {
  const auto lex = Lexicon::Build(SmallLexicon());
  EXPECT_TRUE(AnnotateDocument(TokenizeDocument(Doc("patient walking well .")), lex).empty());
}

TEST(Annotate, TwoMentionsShareSentenceContext) {
  const auto lex = Lexicon::Build(SmallLexicon());
  // tokens: 0 Seen 1 . 2 hypertension 3 on 4 aspirin 5 . 6 Home 7 .
  const auto doc = TokenizeDocument(Doc("Seen. hypertension on aspirin. Home."));
  const auto mentions = AnnotateDocument(doc, lex);
  ASSERT_EQ(mentions.size(), 2u);
  EXPECT_EQ(mentions[0].mention_span, (Span{2, 2}));
  EXPECT_EQ(mentions[1].mention_span, (Span{4, 4}));
  EXPECT_EQ(mentions[0].context_span, (Span{2, 5}));
  EXPECT_EQ(mentions[1].context_span, (Span{2, 5}));
  EXPECT_EQ(mentions[0].context_text, "hypertension on aspirin .");
}

TEST(Annotate, NegatedMentionIsKept) {
  const auto lex = Lexicon::Build(SmallLexicon());
  const auto mentions = AnnotateDocument(TokenizeDocument(Doc("No hypertension.")), lex);
  ASSERT_EQ(mentions.size(), 1u);
  EXPECT_EQ(mentions[0].context_text, "No hypertension .");
}

TEST(Context, SentenceWhenBoundariesAreNear) {
  // Sentence of 12 tokens (11 words and the full stop) between two others.
  const std::string text = "Intro here. " + Repeat("word", 5) + " hypertension " + Repeat("word", 5) + ". Done.";
  const auto doc = TokenizeDocument(Doc(text));
  const Span mention{8, 8};
  ASSERT_EQ(doc.tokens[8].text, "hypertension");
  EXPECT_EQ(ExtractContext(doc, mention), (Span{3, 14}));
}

TEST(Context, BoundaryFreeBlockUsesFiftyEachSide) {
  const auto doc = TokenizeDocument(Doc(Repeat("word", 400)));
  EXPECT_EQ(ExtractContext(doc, {200, 200}), (Span{150, 250}));
  EXPECT_EQ(ExtractContext(doc, {200, 201}), (Span{150, 251}));
}

TEST(Context, ClampsAtDocumentStart) {
  const auto doc = TokenizeDocument(Doc(Repeat("word", 400)));
  EXPECT_EQ(ExtractContext(doc, {3, 3}).start, 0);
  EXPECT_EQ(ExtractContext(doc, {398, 398}).end, 399);
}

TEST(Annotate, PropertiesOverGeneratedCorpus) {
  const auto cfg = DefaultSyntheticConfig(60, 5);
  const auto corpus = GenerateSynthetic(cfg);
  auto entries = LexiconFromSynthetic(cfg);
  const auto lex = Lexicon::Build(entries);
  std::reverse(entries.begin(), entries.end());
  const auto lex_rev = Lexicon::Build(entries);

  const auto all = AnnotateCorpus(corpus, lex, 50, 1);
  EXPECT_EQ(all, AnnotateCorpus(corpus, lex_rev, 50, 3));
  ASSERT_FALSE(all.empty());

  for (const auto& p : corpus.patients) {
    for (const auto& d : p.documents) {
      const auto doc = TokenizeDocument(d);
      const auto ms = AnnotateDocument(doc, lex);
      for (std::size_t i = 0; i < ms.size(); ++i) {
        const auto& m = ms[i];
        EXPECT_LE(m.context_span.start, m.mention_span.start);
        EXPECT_GE(m.context_span.end, m.mention_span.end);
        EXPECT_LE(m.context_span.width(), m.mention_span.width() + 100);
        EXPECT_EQ(m.context_text, JoinTokens(doc, m.context_span));
        if (i) EXPECT_LT(ms[i - 1].mention_span.end, m.mention_span.start);
      }
    }
  }
}

TEST(Annotate, MentionsFileRoundTrip) {
  const auto cfg = DefaultSyntheticConfig(10, 5);
  const auto mentions = AnnotateCorpus(GenerateSynthetic(cfg), Lexicon::Build(LexiconFromSynthetic(cfg)));
  const auto path = std::filesystem::temp_directory_path() / "ctl_annotator_mentions.jsonl";
  WriteMentions(mentions, path);
  EXPECT_EQ(LoadMentions(path), mentions);
  const auto lpath = std::filesystem::temp_directory_path() / "ctl_annotator_lexicon.jsonl";
  WriteLexicon(LexiconFromSynthetic(cfg), lpath);
  EXPECT_EQ(LoadLexiconEntries(lpath).size(), LexiconFromSynthetic(cfg).size());
}
