#ifndef CTL_TOKENIZER_HPP_
#define CTL_TOKENIZER_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ctl/annotator.hpp"
#include "ctl/reconstruct.hpp"

namespace ctl {

enum class TokenKind { kSpecial, kBase, kConcept };

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<s>";
inline constexpr const char* kRiskToken = "<risk>";
inline constexpr const char* kOovToken = "<unk>";

// Ids are laid out as [specials][base words][concepts]; concepts are only
// ever appended, so existing ids never move.
class Vocabulary {
 public:
  static constexpr int kIgnoreLabel = -1;

  struct Entry {
    TokenKind kind = TokenKind::kBase;
    std::string token;  // word, special spelling, or concept code
    ConceptType type = ConceptType::kDisorder;  // concepts only
    std::string name;                            // concepts only
  };

  int size() const { return static_cast<int>(entries_.size()); }
  const Entry& at(int id) const { return entries_.at(static_cast<std::size_t>(id)); }

  bool IsConcept(int id) const { return at(id).kind == TokenKind::kConcept; }
  bool IsSpecial(int id) const { return at(id).kind == TokenKind::kSpecial; }

  // Base word id, or the OOV id when the word is not in the vocabulary.
  int WordId(const std::string& word) const;
  std::optional<int> FindSpecial(const std::string& token) const;
  int SpecialId(const std::string& token) const;  // throws DataError
  std::optional<int> FindConcept(const std::string& code) const;
  int ConceptId(const std::string& code) const;  // throws DataError

  int pad_id() const { return SpecialId(kPadToken); }
  int bos_id() const { return SpecialId(kBosToken); }
  int risk_id() const { return SpecialId(kRiskToken); }
  int oov_id() const { return oov_id_; }

  // Concept ids in ascending id order, optionally restricted to one type.
  std::vector<int> ConceptIds(std::optional<ConceptType> type = std::nullopt) const;
  int ConceptCount() const;

  std::string Serialize() const;  // text form without the schema line
  static Vocabulary Deserialize(const std::string& text, const std::string& source = "vocab");
  std::string Hash() const;

  void AddSpecial(const std::string& token);
  void AddWord(const std::string& word);
  void AddConcept(const ConceptEntry& entry);

  bool operator==(const Vocabulary& o) const { return Serialize() == o.Serialize(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> words_;
  std::unordered_map<std::string, int> specials_;
  std::unordered_map<std::string, int> concepts_;
  int oov_id_ = -1;
};

using EmbeddingMatrix = Eigen::MatrixXd;  // rows = vocabulary ids

struct EncodedNote {
  std::string patient_id;
  std::vector<int> token_ids;
  std::vector<int> concept_positions;  // indices of concept ids in token_ids
};

// Word-level vocabulary over Text segments with frequency >= min_freq, plus
// the OOV word and every special token the pipeline can emit.
Vocabulary FitBaseVocab(const std::vector<ReconstructedNote>& notes, int min_freq = 1);

EmbeddingMatrix InitBaseEmbeddings(const Vocabulary& vocab, int dim, std::uint64_t seed,
                                   double stddev = 0.02);

enum class ConceptInit {
  kNameMean,  // mean of the rows of the canonical name's words
  kAllMean,   // mean of every existing row
};

std::pair<Vocabulary, EmbeddingMatrix> AddConceptTokens(Vocabulary vocab, EmbeddingMatrix embeddings,
                                                        std::vector<ConceptEntry> entries,
                                                        ConceptInit init = ConceptInit::kNameMean);

// Embeddings for a vocabulary that already holds concepts: seeded random rows
// for non-concept ids, then concept rows initialised as AddConceptTokens does.
EmbeddingMatrix InitEmbeddings(const Vocabulary& vocab, int dim, std::uint64_t seed,
                               ConceptInit init = ConceptInit::kNameMean);

// Vocabulary from notes plus one token per lexicon entry.
Vocabulary BuildVocabulary(const std::vector<ReconstructedNote>& notes,
                           const std::vector<ConceptEntry>& entries, int min_freq = 1);

// Base ids of the canonical name words. Words are looked up as written, then
// lowercased; anything else maps to OOV.
std::vector<int> NameTokenIds(const Vocabulary& vocab, const std::string& name);

EncodedNote Encode(const ReconstructedNote& note, const Vocabulary& vocab);
ReconstructedNote Decode(const EncodedNote& encoded, const Vocabulary& vocab);

Vocabulary LoadVocabulary(const std::filesystem::path& path);
void WriteVocabulary(const Vocabulary& vocab, const std::filesystem::path& path);

inline const SchemaTag kVocabSchema{"vocab", 1};

}  // namespace ctl

#endif  // CTL_TOKENIZER_HPP_
