#include <gtest/gtest.h>

#include <set>

#include "ctl/tokenizer.hpp"

using namespace ctl;

namespace {

ReconstructedNote Note(std::vector<NoteSegment> segs, const std::string& id = "p") { return {id, std::move(segs)}; }

std::vector<ConceptEntry> Entries() {
  return {{"200", "diabetes mellitus", ConceptType::kDisorder, {}},
          {"100", "aspirin", ConceptType::kSubstance, {}},
          {"300", "rare zebra", ConceptType::kFinding, {}}};
}

std::vector<ReconstructedNote> TinyNotes() {
  return {Note({TextSegment{"bp high , diabetes mellitus noted"}, ConceptTokenSegment{"200"},
                SpecialTokenSegment{"<3 days later>"}, TextSegment{"aspirin started"}, ConceptTokenSegment{"100"}}),
          Note({SpecialTokenSegment{"<sex:F>"}, TextSegment{"bp stable"}}, "q")};
}

}  // namespace

TEST(BaseVocab, EveryWordAtMinFreqOne) {
  const auto v = FitBaseVocab(TinyNotes(), 1);
  for (const char* w : {"bp", "high", ",", "diabetes", "mellitus", "noted", "aspirin", "started", "stable"}) {
    EXPECT_NE(v.WordId(w), v.oov_id()) << w;
  }
  EXPECT_TRUE(v.FindSpecial(kBosToken).has_value());
  EXPECT_TRUE(v.FindSpecial("<3 days later>").has_value());
  EXPECT_TRUE(v.FindSpecial("<10+ years later>").has_value());
}

TEST(BaseVocab, RareWordsBecomeOov) {
  const auto v = FitBaseVocab(TinyNotes(), 2);
  EXPECT_NE(v.WordId("bp"), v.oov_id());
  EXPECT_EQ(v.WordId("high"), v.oov_id());
}

TEST(BaseVocab, DeterministicAndErrors) {
  EXPECT_EQ(FitBaseVocab(TinyNotes(), 1).Serialize(), FitBaseVocab(TinyNotes(), 1).Serialize());
  EXPECT_THROW(FitBaseVocab({}, 1), DataError);
  EXPECT_THROW(FitBaseVocab({Note({ConceptTokenSegment{"1"}})}, 1), DataError);
}

TEST(ConceptTokens, NameMeanInit) {
  auto v = FitBaseVocab(TinyNotes(), 1);
  const auto base = InitBaseEmbeddings(v, 8, 3);
  const auto [v2, emb] = AddConceptTokens(v, base, Entries());
  ASSERT_EQ(emb.rows(), v2.size());
  const int dm = v2.ConceptId("200");
  const Eigen::VectorXd mean = (base.row(v.WordId("diabetes")) + base.row(v.WordId("mellitus"))) / 2.0;
  EXPECT_LT((emb.row(dm).transpose() - mean).cwiseAbs().maxCoeff(), 1e-6);
  // Single word: exactly the word row.
  EXPECT_EQ(emb.row(v2.ConceptId("100")), base.row(v.WordId("aspirin")));
  // OOV words contribute the OOV row.
  EXPECT_EQ(emb.row(v2.ConceptId("300")), base.row(v.oov_id()));
  // Existing rows and ids are untouched; concepts appended in code order.
  EXPECT_EQ(emb.topRows(base.rows()), base);
  EXPECT_EQ(v2.ConceptId("100"), v.size());
  EXPECT_EQ(v2.ConceptId("200"), v.size() + 1);
  EXPECT_EQ(v2.ConceptId("300"), v.size() + 2);
  EXPECT_EQ(v2.WordId("bp"), v.WordId("bp"));
}

TEST(ConceptTokens, AllMeanInitAndDuplicate) {
  auto v = FitBaseVocab(TinyNotes(), 1);
  const auto base = InitBaseEmbeddings(v, 8, 3);
  const auto [v2, emb] = AddConceptTokens(v, base, Entries(), ConceptInit::kAllMean);
  const Eigen::RowVectorXd all = base.colwise().mean();
  EXPECT_LT((emb.row(v2.ConceptId("100")) - all).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(AddConceptTokens(v2, emb, {Entries()[0]}), DuplicateError);
}

TEST(ConceptTokens, InitPropertyOverGeneratedLexicon) {
  const auto cfg = DefaultSyntheticConfig(30, 9);
  const auto entries = LexiconFromSynthetic(cfg);
  const auto corpus = GenerateSynthetic(cfg);
  const auto notes = RenderNotes(BuildTimelines(corpus, AnnotateCorpus(corpus, Lexicon::Build(entries))), corpus);
  const auto vocab = BuildVocabulary(notes, entries);
  const auto emb = InitEmbeddings(vocab, 16, 4);
  EXPECT_EQ(vocab.ConceptCount(), static_cast<int>(entries.size()));
  for (const auto& e : entries) {
    const auto ids = NameTokenIds(vocab, e.canonical_name);
    ASSERT_FALSE(ids.empty());
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(16);
    for (int id : ids) {
      EXPECT_NE(id, vocab.oov_id()) << e.canonical_name;
      mean += emb.row(id);
    }
    mean /= static_cast<double>(ids.size());
    EXPECT_LT((emb.row(vocab.ConceptId(e.code)) - mean).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_TRUE(emb.allFinite());
}

TEST(Encode, HandEncoding) {
  auto v = FitBaseVocab({Note({TextSegment{"bp high"}})}, 1);
  v.AddConcept({"X", "bp", ConceptType::kFinding, {}});
  const auto enc = Encode(Note({TextSegment{"bp high"}, ConceptTokenSegment{"X"}}), v);
  ASSERT_EQ(enc.token_ids.size(), 3u);
  EXPECT_EQ(enc.token_ids[0], v.WordId("bp"));
  EXPECT_EQ(enc.token_ids[2], v.ConceptId("X"));
  EXPECT_EQ(enc.concept_positions, std::vector<int>{2});
  EXPECT_TRUE(Encode(Note({TextSegment{"bp"}}), v).concept_positions.empty());
  EXPECT_THROW(Encode(Note({ConceptTokenSegment{"nope"}}), v), DataError);
}

TEST(Encode, SpecialsAreNotConceptPositions) {
  auto v = FitBaseVocab(TinyNotes(), 1);
  v = AddConceptTokens(v, InitBaseEmbeddings(v, 4, 1), Entries()).first;
  const auto enc = Encode(TinyNotes()[0], v);
  for (int p : enc.concept_positions) EXPECT_TRUE(v.IsConcept(enc.token_ids[static_cast<std::size_t>(p)]));
  EXPECT_EQ(enc.concept_positions.size(), 2u);
}

TEST(Encode, DecodeRoundTrip) {
  const auto cfg = DefaultSyntheticConfig(30, 2);
  const auto entries = LexiconFromSynthetic(cfg);
  const auto corpus = GenerateSynthetic(cfg);
  const auto notes = RenderNotes(BuildTimelines(corpus, AnnotateCorpus(corpus, Lexicon::Build(entries))), corpus);
  const auto vocab = BuildVocabulary(notes, entries);
  for (const auto& n : notes) EXPECT_EQ(Decode(Encode(n, vocab), vocab), n);
}

TEST(VocabFile, RoundTripAndHash) {
  auto v = FitBaseVocab(TinyNotes(), 1);
  v = AddConceptTokens(v, InitBaseEmbeddings(v, 4, 1), Entries()).first;
  const auto path = std::filesystem::temp_directory_path() / "ctl_tokenizer_vocab.txt";
  WriteVocabulary(v, path);
  const auto back = LoadVocabulary(path);
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.Hash(), v.Hash());
  EXPECT_EQ(back.ConceptIds(ConceptType::kSubstance), std::vector<int>{v.ConceptId("100")});
  // Disjoint contiguous id spaces: specials, then words, then concepts.
  int phase = 0;
  for (int id = 0; id < v.size(); ++id) {
    const int k = v.IsSpecial(id) ? 0 : v.IsConcept(id) ? 2 : 1;
    EXPECT_GE(k, phase);
    phase = k;
  }
  EXPECT_LT(Vocabulary::kIgnoreLabel, 0);
}
