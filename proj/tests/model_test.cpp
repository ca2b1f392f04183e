#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "ctl/model.hpp"

using namespace ctl;

namespace {

Vocabulary SmallVocab() {
  auto v = FitBaseVocab({{"p", {TextSegment{"a b c d e f g h"}}}}, 1);
  v.AddConcept({"10", "a b", ConceptType::kDisorder, {}});
  v.AddConcept({"20", "c", ConceptType::kSubstance, {}});
  v.AddConcept({"30", "d", ConceptType::kDisorder, {}});
  v.AddConcept({"40", "e f", ConceptType::kFinding, {}});
  return v;
}

ModelConfig Tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.max_seq_len = 16;
  c.seed = 3;
  return c;
}

std::vector<int> RandomIds(Rng& rng, int vocab_size, int n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (auto& x : ids) x = static_cast<int>(rng.UniformInt(0, vocab_size - 1));
  return ids;
}

// Generated corpus encoded with its own vocabulary.
struct Data {
  Vocabulary vocab;
  std::vector<EncodedNote> encoded;
};

Data Generated(std::size_t n) {
  const auto cfg = DefaultSyntheticConfig(n, 21);
  const auto entries = LexiconFromSynthetic(cfg);
  const auto corpus = GenerateSynthetic(cfg);
  const auto notes = RenderNotes(BuildTimelines(corpus, AnnotateCorpus(corpus, Lexicon::Build(entries))), corpus);
  Data d{BuildVocabulary(notes, entries), {}};
  for (const auto& note : notes) d.encoded.push_back(Encode(note, d.vocab));
  return d;
}

}  // namespace

TEST(Pack, TwoNotesIntoThreeWindows) {
  const auto v = SmallVocab();
  const int c = v.ConceptId("20");
  EncodedNote a{"a", {}, {}}, b{"b", {}, {}};
  for (int i = 0; i < 10; ++i) {
    a.token_ids.push_back(i == 4 ? c : v.WordId("a"));
    b.token_ids.push_back(v.WordId("b"));
  }
  a.concept_positions = {4};
  const auto ex = PackExamples({a, b}, v, 8);
  ASSERT_EQ(ex.size(), 3u);  // 22 ids in windows of 8
  std::vector<int> stream;
  for (const auto& e : ex) {
    ASSERT_EQ(e.input_ids.size(), 8u);
    ASSERT_EQ(e.label_ids.size(), 8u);
    stream.insert(stream.end(), e.input_ids.begin(), e.input_ids.end());
  }
  EXPECT_EQ(stream[0], v.bos_id());
  EXPECT_EQ(stream[11], v.bos_id());
  EXPECT_EQ(stream[5], c);
  for (int i = 22; i < 24; ++i) EXPECT_EQ(stream[static_cast<std::size_t>(i)], v.pad_id());
  // Only the position before the concept is supervised, with the concept id.
  for (std::size_t w = 0; w < ex.size(); ++w) {
    for (std::size_t j = 0; j < 8; ++j) {
      const auto pos = w * 8 + j;
      if (pos == 4) {
        EXPECT_EQ(ex[w].label_ids[j], c);
      } else {
        EXPECT_EQ(ex[w].label_ids[j], Vocabulary::kIgnoreLabel) << pos;
      }
    }
  }
  EXPECT_THROW(PackExamples({}, v, 8), DataError);
}

TEST(Pack, FullLmSupervisesEverythingButPadding) {
  const auto v = SmallVocab();
  const std::vector<int> ids{v.bos_id(), v.WordId("a"), v.ConceptId("10"), v.pad_id()};
  const auto labels = DeriveLabels(ids, v, LabelMode::kFullLm);
  EXPECT_EQ(labels, (std::vector<int>{v.WordId("a"), v.ConceptId("10"), Vocabulary::kIgnoreLabel,
                                      Vocabulary::kIgnoreLabel}));
  EXPECT_EQ(DeriveLabels(ids, v, LabelMode::kConceptsOnly),
            (std::vector<int>{Vocabulary::kIgnoreLabel, v.ConceptId("10"), Vocabulary::kIgnoreLabel,
                              Vocabulary::kIgnoreLabel}));
}

TEST(Loss, AllIgnoredIsZero) {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Random(4, 9);
  Eigen::MatrixXd d;
  EXPECT_EQ(SelectiveNll(logits, std::vector<int>(4, Vocabulary::kIgnoreLabel), &d), 0.0);
  EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Loss, UniformLogitsGiveLogV) {
  const int v = 37;
  Eigen::MatrixXd logits = Eigen::MatrixXd::Constant(3, v, 0.7);
  const double loss = SelectiveNll(logits, {Vocabulary::kIgnoreLabel, 5, Vocabulary::kIgnoreLabel});
  EXPECT_NEAR(loss, std::log(static_cast<double>(v)), 1e-12);
}

TEST(Loss, IgnoredRowsHaveNoInfluence) {
  Rng rng(4);
  Eigen::MatrixXd logits(5, 11);
  for (int i = 0; i < logits.size(); ++i) logits.data()[i] = rng.Normal(0.0, 2.0);
  const std::vector<int> labels{Vocabulary::kIgnoreLabel, 3, Vocabulary::kIgnoreLabel, 7, Vocabulary::kIgnoreLabel};
  Eigen::MatrixXd d;
  const double base = SelectiveNll(logits, labels, &d);
  for (int r : {0, 2, 4}) {
    EXPECT_EQ(d.row(r).cwiseAbs().maxCoeff(), 0.0);
    auto moved = logits;
    moved.row(r).array() += 5.0;
    moved(r, 2) -= 40.0;
    EXPECT_LT(std::abs(SelectiveNll(moved, labels) - base), 1e-8);
  }
  // Gradient of the supervised rows against finite differences.
  const double h = 1e-6;
  for (int r : {1, 3}) {
    for (int c = 0; c < 11; ++c) {
      auto p = logits, m = logits;
      p(r, c) += h;
      m(r, c) -= h;
      EXPECT_NEAR(d(r, c), (SelectiveNll(p, labels) - SelectiveNll(m, labels)) / (2 * h), 1e-7);
    }
  }
}

TEST(Schedule, WarmupThenConstant) {
  OptimizerConfig opt;
  opt.learning_rate = 2e-3;
  opt.warmup_ratio = 0.1;
  EXPECT_NEAR(LearningRate(opt, 5, 100), 0.5 * 2e-3, 1e-15);
  EXPECT_NEAR(LearningRate(opt, 10, 100), 2e-3, 1e-15);
  EXPECT_NEAR(LearningRate(opt, 99, 100), 2e-3, 1e-15);
  opt.warmup_ratio = 0.0;
  EXPECT_NEAR(LearningRate(opt, 0, 100), 2e-3, 1e-15);
}

TEST(Config, Validation) {
  auto c = Tiny();
  EXPECT_TRUE(c.Validate().empty());
  c.n_heads = 3;
  EXPECT_FALSE(c.Validate().empty());
  c = Tiny();
  c.max_seq_len = 8;
  EXPECT_FALSE(c.Validate().empty());
  OptimizerConfig o;
  EXPECT_TRUE(o.Validate().empty());
  o.beta2 = 1.0;
  EXPECT_FALSE(o.Validate().empty());
  o = {};
  o.warmup_ratio = 1.5;
  EXPECT_FALSE(o.Validate().empty());
  EXPECT_EQ(ModelConfig::FromJson(Tiny().ToJson()), Tiny());
}

TEST(Transformer, GradientMatchesFiniteDifferences) {
  const auto v = SmallVocab();
  Transformer model(Tiny(), v.size());
  model.InitRandom(11);
  Rng rng(2);
  // Larger weights than the default init so that every block contributes.
  for (auto& p : model.params()) p += rng.Normal(0.0, 0.3);
  const auto ids = RandomIds(rng, v.size(), 12);
  std::vector<int> labels(ids.size(), Vocabulary::kIgnoreLabel);
  for (std::size_t j = 0; j + 1 < ids.size(); j += 2) labels[j] = ids[j + 1];

  std::vector<double> grads(model.params().size(), 0.0);
  model.ForwardBackward(ids, labels, grads, 1.0);
  auto loss_at = [&](std::size_t k, double delta) {
    const double old = model.params()[k];
    model.params()[k] = old + delta;
    std::vector<double> scratch(model.params().size(), 0.0);
    const double l = model.ForwardBackward(ids, labels, scratch, 0.0);
    model.params()[k] = old;
    return l;
  };
  const double h = 1e-5;
  int checked = 0;
  double worst = 0.0;
  while (checked < 100) {
    const auto k = static_cast<std::size_t>(rng.UniformInt(0, static_cast<std::int64_t>(model.params().size()) - 1));
    const double numeric = (loss_at(k, h) - loss_at(k, -h)) / (2 * h);
    const double denom = std::max(std::abs(numeric) + std::abs(grads[k]), 1e-6);
    worst = std::max(worst, std::abs(numeric - grads[k]) / denom);
    ++checked;
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Transformer, Causality) {
  const auto v = SmallVocab();
  Transformer model(Tiny(), v.size());
  model.InitRandom(5);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto ids = RandomIds(rng, v.size(), 14);
    const auto before = model.Forward(ids);
    const auto p = static_cast<std::size_t>(rng.UniformInt(1, 13));
    ids[p] = (ids[p] + 1) % v.size();
    const auto after = model.Forward(ids);
    const auto rows = static_cast<Eigen::Index>(p);
    EXPECT_LT((before.topRows(rows) - after.topRows(rows)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_GT((before.row(rows) - after.row(rows)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Transformer, CheckpointRoundTripIsBitExact) {
  const auto v = SmallVocab();
  Transformer model(Tiny(), v.size());
  model.InitRandom(8);
  const auto path = std::filesystem::temp_directory_path() / "ctl_model_test.ckpt";
  SaveCheckpoint(MakeCheckpoint(model, OptimizerConfig{}, v, LabelMode::kConceptsOnly, 42), path);
  const auto ckpt = LoadCheckpoint(path);
  EXPECT_EQ(ckpt.step, 42);
  EXPECT_EQ(ckpt.vocab, v);
  const auto back = ModelFromCheckpoint(ckpt);
  const std::vector<int> ids{1, 2, 3, 4, 5};
  const Eigen::MatrixXd a = model.Forward(ids), b = back.Forward(ids);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())), 0);
  WriteFileAtomic(path, "not a checkpoint");
  EXPECT_THROW(LoadCheckpoint(path), DataError);
}

TEST(Rank, FilterAndOracle) {
  const auto v = SmallVocab();
  Transformer model(Tiny(), v.size());
  model.InitRandom(9);
  const std::vector<int> prefix{v.bos_id(), v.WordId("a"), v.WordId("c")};
  const Eigen::VectorXd logits = model.NextLogits(prefix);

  const auto disorders = RankNext(model, v, prefix, 16, {ConceptType::kDisorder, {}}, 10);
  ASSERT_EQ(disorders.size(), 2u);
  for (const auto& r : disorders) EXPECT_EQ(v.at(v.ConceptId(r.code)).type, ConceptType::kDisorder);

  // Oracle: softmax over the full vocabulary, then sort the concept ids.
  const Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  const Eigen::VectorXd probs = p / p.sum();
  auto ids = v.ConceptIds();
  std::sort(ids.begin(), ids.end(), [&](int a, int b) { return probs(a) > probs(b); });
  const auto all = RankNext(model, v, prefix, 16, {}, 100);
  ASSERT_EQ(all.size(), ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    EXPECT_EQ(all[i].code, v.at(ids[i]).token);
    EXPECT_NEAR(all[i].probability, probs(ids[i]), 1e-12);
  }
  EXPECT_EQ(RankNext(model, v, prefix, 16, {}, 2).size(), 2u);
  EXPECT_TRUE(RankNext(model, v, prefix, 16, {ConceptType::kProcedure, {}}, 5).empty());
  const auto excl = RankNext(model, v, prefix, 16, {std::nullopt, {all[0].code}}, 5);
  EXPECT_EQ(excl.front().code, all[1].code);
}

TEST(Rank, LongPrefixKeepsMostRecent) {
  const auto v = SmallVocab();
  Transformer model(Tiny(), v.size());
  model.InitRandom(9);
  Rng rng(1);
  const auto ids = RandomIds(rng, v.size(), 40);
  const std::vector<int> tail(ids.end() - 16, ids.end());
  const auto a = RankNext(model, v, ids, 16, {}, 4);
  const auto b = RankNext(model, v, tail, 16, {}, 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].code, b[i].code);
}

TEST(Train, LossFallsAndRunsAreDeterministic) {
  const auto d = Generated(120);
  auto cfg = Tiny();
  cfg.max_seq_len = 32;
  const auto examples = PackExamples(d.encoded, d.vocab, cfg.max_seq_len);
  OptimizerConfig opt;
  opt.grad_accum = 1;
  opt.epochs = std::max(1, static_cast<int>(200 / examples.size()) + 1);
  opt.learning_rate = 3e-3;

  auto run = [&] {
    Transformer m(cfg, d.vocab.size());
    m.SetEmbeddings(InitEmbeddings(d.vocab, cfg.model_dim, cfg.seed));
    const double initial = BatchLoss(m, examples);
    const auto res = Train(m, examples, {}, opt, 5);
    return std::make_tuple(initial, BatchLoss(m, examples), res, m.params());
  };
  const auto [initial, final_loss, res, params] = run();
  EXPECT_GE(res.steps, 200);
  EXPECT_LT(final_loss, initial);
  EXPECT_EQ(static_cast<std::int64_t>(res.step_losses.size()), res.steps);
  const auto [i2, f2, r2, params2] = run();
  EXPECT_EQ(params, params2);
  EXPECT_EQ(res.step_losses, r2.step_losses);
}
