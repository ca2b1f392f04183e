#include "ctl/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace ctl {

namespace {

const char* KindName(TokenKind k) {
  switch (k) {
    case TokenKind::kSpecial: return "special";
    case TokenKind::kBase: return "base";
    case TokenKind::kConcept: return "concept";
  }
  return "base";
}

TokenKind ParseKind(const std::string& s) {
  if (s == "special") return TokenKind::kSpecial;
  if (s == "base") return TokenKind::kBase;
  if (s == "concept") return TokenKind::kConcept;
  throw DataError("unknown token kind '" + s + "'");
}

std::vector<std::string> SplitTabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string Lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

int Vocabulary::WordId(const std::string& word) const {
  auto it = words_.find(word);
  return it == words_.end() ? oov_id_ : it->second;
}

std::optional<int> Vocabulary::FindSpecial(const std::string& token) const {
  auto it = specials_.find(token);
  if (it == specials_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::SpecialId(const std::string& token) const {
  auto id = FindSpecial(token);
  if (!id) throw DataError("special token " + token + " is not in the vocabulary");
  return *id;
}

std::optional<int> Vocabulary::FindConcept(const std::string& code) const {
  auto it = concepts_.find(code);
  if (it == concepts_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::ConceptId(const std::string& code) const {
  auto id = FindConcept(code);
  if (!id) throw DataError("concept code " + code + " is not in the vocabulary");
  return *id;
}

std::vector<int> Vocabulary::ConceptIds(std::optional<ConceptType> type) const {
  std::vector<int> out;
  for (int id = 0; id < size(); ++id) {
    const auto& e = entries_[static_cast<std::size_t>(id)];
    if (e.kind == TokenKind::kConcept && (!type || e.type == *type)) out.push_back(id);
  }
  return out;
}

int Vocabulary::ConceptCount() const { return static_cast<int>(concepts_.size()); }

void Vocabulary::AddSpecial(const std::string& token) {
  if (!words_.empty() || !concepts_.empty()) {
    throw DataError("special tokens must be registered before base words and concepts");
  }
  if (specials_.count(token)) throw DuplicateError("duplicate special token " + token);
  specials_[token] = size();
  entries_.push_back({TokenKind::kSpecial, token, ConceptType::kDisorder, ""});
}

void Vocabulary::AddWord(const std::string& word) {
  if (!concepts_.empty()) throw DataError("base words must be registered before concepts");
  if (word.empty() || word.find_first_of(" \t\n") != std::string::npos) {
    throw DataError("invalid base word '" + word + "'");
  }
  if (words_.count(word)) throw DuplicateError("duplicate base word " + word);
  words_[word] = size();
  if (word == kOovToken) oov_id_ = size();
  entries_.push_back({TokenKind::kBase, word, ConceptType::kDisorder, ""});
}

void Vocabulary::AddConcept(const ConceptEntry& entry) {
  if (concepts_.count(entry.code)) throw DuplicateError("concept " + entry.code + " already present");
  concepts_[entry.code] = size();
  entries_.push_back({TokenKind::kConcept, entry.code, entry.concept_type, entry.canonical_name});
}

std::string Vocabulary::Serialize() const {
  std::ostringstream out;
  for (int id = 0; id < size(); ++id) {
    const auto& e = entries_[static_cast<std::size_t>(id)];
    out << id << '\t' << KindName(e.kind) << '\t' << e.token << '\t'
        << (e.kind == TokenKind::kConcept ? ConceptTypeName(e.type) : "") << '\t' << e.name
        << '\n';
  }
  return out.str();
}

Vocabulary Vocabulary::Deserialize(const std::string& text, const std::string& source) {
  Vocabulary v;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = SplitTabs(line);
    try {
      if (f.size() != 5) throw DataError("expected 5 tab-separated fields");
      if (std::stoi(f[0]) != v.size()) throw DataError("ids are not contiguous");
      switch (ParseKind(f[1])) {
        case TokenKind::kSpecial: v.AddSpecial(f[2]); break;
        case TokenKind::kBase: v.AddWord(f[2]); break;
        case TokenKind::kConcept: v.AddConcept({f[2], f[4], ParseConceptType(f[3]), {}}); break;
      }
    } catch (const std::invalid_argument&) {
      throw ParseError(source, lineno, "bad id");
    } catch (const DataError& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  if (v.oov_id_ < 0) throw DataError(source + ": vocabulary has no " + kOovToken + " entry");
  if (!v.FindSpecial(kBosToken)) throw DataError(source + ": vocabulary has no <s> entry");
  return v;
}

std::string Vocabulary::Hash() const { return Sha256Hex(Serialize()); }

Vocabulary FitBaseVocab(const std::vector<ReconstructedNote>& notes, int min_freq) {
  if (notes.empty()) throw DataError("cannot fit a vocabulary on zero notes");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, int> freq;
  std::set<std::string> seen_specials;
  for (const auto& n : notes) {
    for (const auto& s : n.segments) {
      if (const auto* t = std::get_if<TextSegment>(&s)) {
        for (const auto& w : TokenizeText(t->text)) ++freq[w];
      } else if (const auto* sp = std::get_if<SpecialTokenSegment>(&s)) {
        seen_specials.insert(sp->token);
      }
    }
  }
  if (freq.empty()) throw DataError("notes contain no text to build a vocabulary from");

  std::vector<std::string> specials{kPadToken, kBosToken, kRiskToken};
  for (const auto& s : AllSeparatorTokens()) specials.push_back(s);
  for (const char* sex : {"M", "F", "U"}) {
    specials.push_back(DemographicToken({DemographicKind::kSex, sex}));
  }
  for (int age = 0; age <= 100; age += 10) {
    specials.push_back(DemographicToken({DemographicKind::kAgeDecade, AgeDecade(age)}));
  }
  std::set<std::string> registered(specials.begin(), specials.end());
  for (const auto& s : seen_specials) {
    if (registered.insert(s).second) specials.push_back(s);
  }

  Vocabulary v;
  for (const auto& s : specials) v.AddSpecial(s);
  v.AddWord(kOovToken);
  for (const auto& [w, c] : freq) {
    if (c >= min_freq && w != kOovToken) v.AddWord(w);
  }
  return v;
}

EmbeddingMatrix InitBaseEmbeddings(const Vocabulary& vocab, int dim, std::uint64_t seed,
                                   double stddev) {
  if (dim < 1) throw ConfigError("embedding dimension must be positive");
  Rng rng(seed);
  EmbeddingMatrix e(vocab.size(), dim);
  for (int r = 0; r < e.rows(); ++r) {
    for (int c = 0; c < dim; ++c) e(r, c) = rng.Normal(0.0, stddev);
  }
  return e;
}

std::vector<int> NameTokenIds(const Vocabulary& vocab, const std::string& name) {
  std::vector<int> ids;
  for (const auto& w : TokenizeText(name)) {
    int id = vocab.WordId(w);
    if (id == vocab.oov_id()) id = vocab.WordId(Lower(w));
    ids.push_back(id);
  }
  return ids;
}

std::pair<Vocabulary, EmbeddingMatrix> AddConceptTokens(Vocabulary vocab, EmbeddingMatrix embeddings,
                                                        std::vector<ConceptEntry> entries,
                                                        ConceptInit init) {
  if (embeddings.rows() != vocab.size()) {
    throw DataError("embedding rows (" + std::to_string(embeddings.rows()) +
                    ") do not match vocabulary size (" + std::to_string(vocab.size()) + ")");
  }
  std::sort(entries.begin(), entries.end(),
            [](const ConceptEntry& a, const ConceptEntry& b) { return a.code < b.code; });
  const Eigen::RowVectorXd all_mean = embeddings.colwise().mean();
  const auto old_rows = embeddings.rows();
  embeddings.conservativeResize(old_rows + static_cast<Eigen::Index>(entries.size()), Eigen::NoChange);
  Eigen::Index row = old_rows;
  for (const auto& e : entries) {
    if (vocab.FindConcept(e.code)) throw DuplicateError("concept " + e.code + " already present");
    Eigen::RowVectorXd r;
    if (init == ConceptInit::kAllMean) {
      r = all_mean;
    } else {
      const auto ids = NameTokenIds(vocab, e.canonical_name);
      if (ids.empty()) throw DataError("concept " + e.code + " has an empty name");
      r = Eigen::RowVectorXd::Zero(embeddings.cols());
      for (int id : ids) r += embeddings.row(id);
      r /= static_cast<double>(ids.size());
    }
    vocab.AddConcept(e);
    embeddings.row(row++) = r;
  }
  return {std::move(vocab), std::move(embeddings)};
}

EmbeddingMatrix InitEmbeddings(const Vocabulary& vocab, int dim, std::uint64_t seed, ConceptInit init) {
  Vocabulary base;
  std::vector<ConceptEntry> entries;
  for (int id = 0; id < vocab.size(); ++id) {
    const auto& e = vocab.at(id);
    switch (e.kind) {
      case TokenKind::kSpecial: base.AddSpecial(e.token); break;
      case TokenKind::kBase: base.AddWord(e.token); break;
      case TokenKind::kConcept: entries.push_back({e.token, e.name, e.type, {}}); break;
    }
  }
  auto [full, emb] = AddConceptTokens(base, InitBaseEmbeddings(base, dim, seed), entries, init);
  if (full.Serialize() != vocab.Serialize()) {
    throw DataError("vocabulary concepts are not in canonical order; cannot derive embeddings");
  }
  return emb;
}

Vocabulary BuildVocabulary(const std::vector<ReconstructedNote>& notes,
                           const std::vector<ConceptEntry>& entries, int min_freq) {
  // The base vocabulary stands in for a pretrained tokenizer, so it also
  // covers every canonical-name word; names absent from the notes would
  // otherwise all initialise to the OOV row.
  std::vector<ReconstructedNote> fit = notes;
  ReconstructedNote names;
  names.patient_id = "<lexicon>";
  for (const auto& e : entries) names.segments.push_back(TextSegment{e.canonical_name});
  fit.push_back(std::move(names));
  auto base = FitBaseVocab(fit, min_freq);
  std::set<std::string> missing;
  for (const auto& e : entries) {
    for (const auto& w : TokenizeText(e.canonical_name)) {
      if (base.WordId(w) == base.oov_id() && base.WordId(Lower(w)) == base.oov_id()) missing.insert(Lower(w));
    }
  }
  for (const auto& w : missing) base.AddWord(w);
  const auto rows = base.size();
  return AddConceptTokens(std::move(base), EmbeddingMatrix::Zero(rows, 1), entries).first;
}

EncodedNote Encode(const ReconstructedNote& note, const Vocabulary& vocab) {
  EncodedNote out;
  out.patient_id = note.patient_id;
  for (const auto& s : note.segments) {
    if (const auto* t = std::get_if<TextSegment>(&s)) {
      for (const auto& w : TokenizeText(t->text)) out.token_ids.push_back(vocab.WordId(w));
    } else if (const auto* c = std::get_if<ConceptTokenSegment>(&s)) {
      out.concept_positions.push_back(static_cast<int>(out.token_ids.size()));
      out.token_ids.push_back(vocab.ConceptId(c->code));
    } else {
      const auto& tok = std::get<SpecialTokenSegment>(s).token;
      out.token_ids.push_back(vocab.FindSpecial(tok).value_or(vocab.oov_id()));
    }
  }
  return out;
}

ReconstructedNote Decode(const EncodedNote& encoded, const Vocabulary& vocab) {
  ReconstructedNote note;
  note.patient_id = encoded.patient_id;
  for (int id : encoded.token_ids) {
    if (id < 0 || id >= vocab.size()) throw DataError("token id out of range");
    const auto& e = vocab.at(id);
    switch (e.kind) {
      case TokenKind::kBase:
        if (!note.segments.empty()) {
          if (auto* t = std::get_if<TextSegment>(&note.segments.back())) {
            t->text += ' ' + e.token;
            break;
          }
        }
        note.segments.push_back(TextSegment{e.token});
        break;
      case TokenKind::kConcept:
        note.segments.push_back(ConceptTokenSegment{e.token});
        break;
      case TokenKind::kSpecial:
        note.segments.push_back(SpecialTokenSegment{e.token});
        break;
    }
  }
  return note;
}

Vocabulary LoadVocabulary(const std::filesystem::path& path) {
  std::string body;
  for (const auto& [line, text] : ReadRawLines(path, kVocabSchema)) body += text + '\n';
  return Vocabulary::Deserialize(body, path.string());
}

void WriteVocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  WriteFileAtomic(path, SchemaLine(kVocabSchema) + "\n" + vocab.Serialize());
}

}  // namespace ctl
