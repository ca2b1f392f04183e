#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "ctl/timeline.hpp"

using namespace ctl;

namespace {

constexpr Timestamp kDay = 86400;

ConceptMention M(const std::string& code, DayIndex day, const std::string& doc = "d", int start = 0,
                 Timestamp seconds = 0) {
  ConceptMention m;
  m.code = code;
  m.patient_id = "p1";
  m.doc_id = doc;
  m.timestamp = day * kDay + seconds;
  m.mention_span = {start, start};
  m.context_span = {start, start};
  m.context_text = code;
  return m;
}

// Independent ladder written from the rule table.
std::string LadderOracle(std::int64_t g) {
  if (g <= 7) return "<" + std::to_string(g) + (g == 1 ? " day later>" : " days later>");
  if (g <= 30) {
    const auto w = g / 7;
    return "<" + std::to_string(w) + (w == 1 ? " week later>" : " weeks later>");
  }
  if (g <= 364) {
    const auto mo = g / 30;
    return "<" + std::to_string(mo) + (mo == 1 ? " month later>" : " months later>");
  }
  const auto y = g / 365;
  if (y > 10) return "<10+ years later>";
  return "<" + std::to_string(y) + (y == 1 ? " year later>" : " years later>");
}

PatientRecord Patient(DayIndex birth) {
  PatientRecord r;
  r.patient_id = "p1";
  r.sex = Sex::kFemale;
  r.ethnicity = "asian";
  r.birth_date = birth;
  return r;
}

std::vector<std::string> Demographics(const PatientTimeline& t) {
  std::vector<std::string> out;
  for (const auto& e : t.events) {
    if (const auto* d = std::get_if<DemographicEvent>(&e)) out.push_back(DemographicToken(*d));
  }
  return out;
}

}  // namespace

TEST(Bucket, RepeatedSameDayCollapses) {
  const auto events = BucketMentions({M("X", 0, "d1", 5, 30), M("X", 0, "d1", 1, 10), M("X", 0, "d2", 0, 10),
                                      M("X", 0, "d3", 0, 50)});
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].mention.doc_id, "d1");
  EXPECT_EQ(events[0].mention.mention_span.start, 1);
}

TEST(Bucket, DifferentDaysAndEmpty) {
  EXPECT_EQ(BucketMentions({M("X", 0), M("X", 2)}).size(), 2u);
  EXPECT_TRUE(BucketMentions({}).empty());
  EXPECT_THROW(BucketMentions({M("X", 0)}, 0), ConfigError);
}

TEST(Bucket, WiderBucketsMergeNearbyDays) {
  EXPECT_EQ(BucketMentions({M("X", 0), M("X", 6)}, 7).size(), 1u);
  EXPECT_EQ(BucketMentions({M("X", 6), M("X", 7)}, 7).size(), 2u);
}

TEST(Bucket, IdempotentAndChronological) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ConceptMention> ms;
    const int n = static_cast<int>(rng.UniformInt(0, 30));
    for (int i = 0; i < n; ++i) {
      ms.push_back(M(std::string(1, static_cast<char>('A' + rng.UniformInt(0, 3))), rng.UniformInt(0, 20),
                     "d" + std::to_string(rng.UniformInt(0, 3)), static_cast<int>(rng.UniformInt(0, 9)),
                     rng.UniformInt(0, 1000)));
    }
    const auto once = BucketMentions(ms);
    std::vector<ConceptMention> reps;
    for (const auto& e : once) reps.push_back(e.mention);
    EXPECT_EQ(BucketMentions(reps), once);
    for (std::size_t i = 1; i < once.size(); ++i) EXPECT_LE(once[i - 1].bucket_date, once[i].bucket_date);
  }
}

TEST(Singletons, RemovesOnlyCountOne) {
  const auto kept = FilterSingletons({M("X", 0), M("Y", 3), M("Y", 3), M("Z", 1), M("Z", 9)});
  ASSERT_EQ(kept.size(), 4u);
  for (const auto& m : kept) EXPECT_NE(m.code, "X");
  EXPECT_TRUE(FilterSingletons({}).empty());
}

TEST(Singletons, OrderIndependent) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<ConceptMention> ms;
    for (int i = 0; i < 15; ++i) ms.push_back(M(std::string(1, static_cast<char>('A' + rng.UniformInt(0, 6))), i));
    std::map<std::string, int> counts;
    for (const auto& m : ms) counts[m.code]++;
    auto shuffled = ms;
    rng.Shuffle(shuffled);
    auto codes = [](std::vector<ConceptMention> v) {
      std::vector<std::string> c;
      for (const auto& m : v) c.push_back(m.code);
      std::sort(c.begin(), c.end());
      return c;
    };
    const auto kept = FilterSingletons(ms);
    EXPECT_EQ(codes(kept), codes(FilterSingletons(shuffled)));
    for (const auto& m : kept) EXPECT_GE(counts[m.code], 2);
    std::size_t expected = 0;
    for (const auto& [code, n] : counts) if (n >= 2) expected += static_cast<std::size_t>(n);
    EXPECT_EQ(kept.size(), expected);
  }
}

TEST(Separators, LadderExamples) {
  EXPECT_EQ(SeparatorToken(1), "<1 day later>");
  EXPECT_EQ(SeparatorToken(7), "<7 days later>");
  EXPECT_EQ(SeparatorToken(400), "<1 year later>");
  EXPECT_EQ(SeparatorToken(365 * 11), "<10+ years later>");
}

TEST(Separators, MatchesLadderOverRandomGaps) {
  Rng rng(11);
  const auto all = AllSeparatorTokens();
  for (int i = 0; i < 2000; ++i) {
    const auto g = rng.UniformInt(1, 6000);
    const auto tok = SeparatorToken(g);
    EXPECT_EQ(tok, LadderOracle(g)) << g;
    EXPECT_NE(std::find(all.begin(), all.end(), tok), all.end());
  }
  EXPECT_THROW(SeparatorToken(0), std::exception);
}

TEST(Separators, OnlyBeyondBucket) {
  const auto events = BucketMentions({M("A", 0), M("B", 1), M("C", 9)});
  const auto out = InsertSeparators(events);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_TRUE(std::holds_alternative<ConceptEvent>(out[1]));
  ASSERT_TRUE(std::holds_alternative<SeparatorEvent>(out[2]));
  EXPECT_EQ(std::get<SeparatorEvent>(out[2]).gap_class, "<1 week later>");
}

TEST(BuildTimeline, DemographicPrefixAndDecade) {
  const auto rec = Patient(ParseDate("1950-03-01"));
  const DayIndex first = ParseDate("2016-06-01");  // aged 66
  const auto t = BuildTimeline(rec, {M("A", first), M("A", first + 3), M("B", first + 3), M("B", first + 5)});
  ASSERT_TRUE(t.has_value());
  const auto demo = Demographics(*t);
  ASSERT_EQ(demo.size(), 3u);
  EXPECT_EQ(demo[0], "<sex:F>");
  EXPECT_EQ(demo[1], "<ethnicity:asian>");
  EXPECT_EQ(demo[2], "<age:60s>");
  EXPECT_TRUE(ValidateTimeline(*t).empty());
  EXPECT_EQ(t->ConceptCount(), 4u);
}

TEST(BuildTimeline, AllSingletonsDropped) {
  EXPECT_FALSE(BuildTimeline(Patient(0), {M("A", 10), M("B", 11)}).has_value());
}

TEST(BuildTimeline, DecadeCrossingAddsOneEvent) {
  const auto rec = Patient(ParseDate("1950-01-01"));
  const DayIndex d64 = ParseDate("2014-06-01");
  const DayIndex d67 = ParseDate("2017-06-01");
  const DayIndex d71 = ParseDate("2021-06-01");
  const auto t = BuildTimeline(rec, {M("A", d64), M("A", d67), M("A", d71), M("B", d71)});
  ASSERT_TRUE(t.has_value());
  const auto demo = Demographics(*t);
  ASSERT_EQ(demo.size(), 4u);
  EXPECT_EQ(demo[2], "<age:60s>");
  EXPECT_EQ(demo[3], "<age:70s>");
  // The decade event comes right before the first concept of the new decade.
  for (std::size_t i = 0; i + 1 < t->events.size(); ++i) {
    const auto* d = std::get_if<DemographicEvent>(&t->events[i]);
    if (d && d->value == "70s") {
      ASSERT_TRUE(std::holds_alternative<ConceptEvent>(t->events[i + 1]));
      EXPECT_EQ(std::get<ConceptEvent>(t->events[i + 1]).bucket_date, d71);
    }
  }
  EXPECT_TRUE(ValidateTimeline(*t).empty());
}

TEST(BuildTimeline, ValidatorCatchesBrokenTimelines) {
  const auto rec = Patient(ParseDate("1950-01-01"));
  auto t = *BuildTimeline(rec, {M("A", 20000), M("A", 20010)});
  auto swapped = t;
  std::swap(swapped.events[0], swapped.events[1]);
  EXPECT_FALSE(ValidateTimeline(swapped).empty());
  auto doubled = t;
  doubled.events.push_back(SeparatorEvent{"<1 day later>"});
  doubled.events.push_back(SeparatorEvent{"<1 day later>"});
  EXPECT_FALSE(ValidateTimeline(doubled).empty());
}

TEST(BuildTimeline, CorpusTimelinesValidateAndRoundTrip) {
  const auto cfg = DefaultSyntheticConfig(80, 4);
  const auto corpus = GenerateSynthetic(cfg);
  const auto mentions = AnnotateCorpus(corpus, Lexicon::Build(LexiconFromSynthetic(cfg)));
  const auto timelines = BuildTimelines(corpus, mentions, 1, 1);
  ASSERT_FALSE(timelines.empty());
  EXPECT_EQ(timelines, BuildTimelines(corpus, mentions, 1, 4));
  for (const auto& t : timelines) EXPECT_TRUE(ValidateTimeline(t).empty()) << t.patient_id;
  const auto path = std::filesystem::temp_directory_path() / "ctl_timeline_rt.jsonl";
  WriteTimelines(timelines, path);
  EXPECT_EQ(LoadTimelines(path), timelines);
}
