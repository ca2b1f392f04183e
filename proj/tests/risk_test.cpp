#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include "ctl/risk.hpp"
#include "httplib.h"

using namespace ctl;

namespace {

PatientTimeline T(const std::vector<std::pair<std::string, DayIndex>>& events, const std::string& pid = "p") {
  PatientTimeline t;
  t.patient_id = pid;
  t.events.push_back(DemographicEvent{DemographicKind::kSex, "M"});
  for (const auto& [code, day] : events) {
    ConceptEvent e;
    e.mention.code = code;
    e.mention.patient_id = pid;
    e.mention.timestamp = day * 86400;
    e.bucket_date = day;
    t.events.push_back(e);
  }
  return t;
}

ConceptCatalog Catalog() {
  ConceptCatalog c;
  for (const char* d : {"H1", "H2", "N1", "N2", "N3", "N4", "N5"}) c[d] = ConceptType::kDisorder;
  for (const char* f : {"F1", "F2", "F3", "F4", "F5", "F6"}) c[f] = ConceptType::kFinding;
  return c;
}

// Seven history concepts ending on day 6, then `future`.
PatientTimeline WithFuture(std::vector<std::pair<std::string, DayIndex>> future) {
  std::vector<std::pair<std::string, DayIndex>> ev{{"H1", 0}, {"H2", 1}, {"F1", 2}, {"F2", 3},
                                                    {"F3", 4}, {"F4", 5}, {"F5", 6}};
  ev.insert(ev.end(), future.begin(), future.end());
  return T(ev);
}

// Constant logits with chosen spikes.
class SpikeModel : public NextTokenModel {
 public:
  SpikeModel(int vocab_size, std::vector<std::pair<int, double>> spikes) : logits_(Eigen::VectorXd::Zero(vocab_size)) {
    for (auto [id, v] : spikes) logits_(id) = v;
  }
  Eigen::VectorXd NextLogits(const std::vector<int>&) const override { return logits_; }

 private:
  Eigen::VectorXd logits_;
};

Vocabulary DisorderVocab(int n_disorders) {
  auto v = FitBaseVocab({{"p", {TextSegment{"some words here"}}}}, 1);
  for (int i = 0; i < n_disorders; ++i) {
    v.AddConcept({"d" + std::to_string(10 + i), "some", ConceptType::kDisorder, {}});
  }
  v.AddConcept({"s1", "words", ConceptType::kSubstance, {}});
  return v;
}

struct MockJudge {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> calls{0};
  std::function<void(const httplib::Request&, httplib::Response&, int)> handler;
  std::string last_body;
  std::string last_auth;
  std::mutex mu;

  MockJudge() {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = calls++;
      {
        std::lock_guard<std::mutex> lock(mu);
        last_body = req.body;
        last_auth = req.get_header_value("Authorization");
      }
      handler(req, res, n);
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~MockJudge() {
    server.stop();
    thread.join();
  }
  JudgeConfig Config() const {
    JudgeConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port);
    c.max_retries = 2;
    c.retry_backoff_ms = 1;
    c.timeout_seconds = 5;
    return c;
  }
};

std::string Completion(const std::string& content) {
  return Json{{"choices", Json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}.dump();
}

}  // namespace

TEST(SplitTimeline, MidpointAndCap) {
  auto make = [](int n) {
    std::vector<std::pair<std::string, DayIndex>> ev;
    for (int i = 0; i < n; ++i) ev.emplace_back("c" + std::to_string(i), i);
    return T(ev);
  };
  EXPECT_EQ(SplitTimeline(make(80))->history.ConceptCount(), 40u);
  EXPECT_EQ(SplitTimeline(make(200))->history.ConceptCount(), 50u);
  const auto three = SplitTimeline(make(3));
  EXPECT_EQ(three->history.ConceptCount(), 1u);
  EXPECT_EQ(three->split_day, 0);
  EXPECT_EQ(three->future.size(), 2u);
  EXPECT_FALSE(SplitTimeline(make(1)).has_value());
}

TEST(RiskDataset, SixDisordersFourNew) {
  const auto t = WithFuture({{"H1", 7}, {"H2", 8}, {"N1", 9}, {"N3", 10}, {"N2", 11}, {"N4", 12}, {"F6", 40}});
  std::string reason;
  const auto ex = MakeRiskExample(t, Catalog(), {}, &reason);
  ASSERT_TRUE(ex.has_value()) << reason;
  EXPECT_EQ(ex->labels, (std::vector<std::string>{"N1", "N3", "N2", "N4"}));
  EXPECT_EQ(ex->split_day, 6);
  EXPECT_EQ(ex->history.ConceptCount(), 7u);
}

TEST(RiskDataset, FourDistinctDisordersExcluded) {
  const auto t = WithFuture({{"N1", 7}, {"N2", 8}, {"N3", 9}, {"N4", 10}, {"F6", 11}, {"F6", 12}, {"F6", 40}});
  std::string reason;
  EXPECT_FALSE(MakeRiskExample(t, Catalog(), {}, &reason).has_value());
  EXPECT_FALSE(reason.empty());
}

TEST(RiskDataset, ShortFutureExcluded) {
  const auto t = WithFuture({{"N1", 7}, {"N2", 8}, {"N3", 9}, {"N4", 10}, {"N5", 11}, {"F6", 12}, {"F6", 26}});
  EXPECT_FALSE(MakeRiskExample(t, Catalog(), {}).has_value());
  // Same patient with a later visit is included with all five new.
  const auto later = WithFuture({{"N1", 7}, {"N2", 8}, {"N3", 9}, {"N4", 10}, {"N5", 11}, {"F6", 12}, {"F6", 36}});
  const auto ex = MakeRiskExample(later, Catalog(), {});
  ASSERT_TRUE(ex.has_value());
  EXPECT_EQ(ex->labels.size(), 5u);
}

TEST(RiskDataset, PurePerPatientPredicate) {
  const auto in = WithFuture({{"N1", 7}, {"N2", 8}, {"N3", 9}, {"N4", 10}, {"N5", 11}, {"F6", 12}, {"F6", 36}});
  auto out = WithFuture({{"N1", 7}, {"F6", 36}});
  out.patient_id = "q";
  std::vector<RiskExclusion> excluded;
  const auto a = BuildRiskDataset({in, out}, Catalog(), {}, &excluded, 1);
  const auto b = BuildRiskDataset({out, in}, Catalog(), {}, nullptr, 2);
  ASSERT_EQ(a.size(), 1u);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(RiskExampleToJson(a[0]), RiskExampleToJson(b[0]));
  ASSERT_EQ(excluded.size(), 1u);
  EXPECT_EQ(excluded[0].patient_id, "q");
  // Labels never repeat history disorders.
  for (const auto& ex : a) {
    std::set<std::string> hist;
    for (const auto* c : ex.history.Concepts()) hist.insert(c->code());
    for (const auto& l : ex.labels) EXPECT_FALSE(hist.count(l));
  }
  const auto path = std::filesystem::temp_directory_path() / "ctl_risk_examples.jsonl";
  WriteRiskExamples(a, path);
  EXPECT_EQ(RiskExampleToJson(LoadRiskExamples(path).at(0)), RiskExampleToJson(a[0]));
}

TEST(Stage2, ExampleSupervisesOnlyLabels) {
  const auto v = DisorderVocab(6);
  const std::vector<int> history{v.bos_id(), v.WordId("some"), v.ConceptId("d10"), v.WordId("words")};
  const auto ex = BuildStage2Example(history, {"d12", "d13"}, v, 16);
  const std::vector<int> expect_ids{v.bos_id(), v.WordId("some"), v.ConceptId("d10"), v.WordId("words"),
                                    v.risk_id(), v.ConceptId("d12"), v.ConceptId("d13")};
  ASSERT_GE(ex.input_ids.size(), expect_ids.size());
  for (std::size_t i = 0; i < expect_ids.size(); ++i) EXPECT_EQ(ex.input_ids[i], expect_ids[i]);
  for (std::size_t i = 0; i < ex.label_ids.size(); ++i) {
    if (i == 4) {
      EXPECT_EQ(ex.label_ids[i], v.ConceptId("d12"));
    } else if (i == 5) {
      EXPECT_EQ(ex.label_ids[i], v.ConceptId("d13"));
    } else {
      EXPECT_EQ(ex.label_ids[i], Vocabulary::kIgnoreLabel) << i;
    }
  }
}

TEST(Stage2, LongHistoryKeepsMostRecent) {
  const auto v = DisorderVocab(6);
  std::vector<int> history{v.bos_id()};
  for (int i = 0; i < 40; ++i) history.push_back(i % 2 ? v.WordId("some") : v.ConceptId("d10"));
  history.push_back(v.WordId("here"));
  const auto ex = BuildStage2Example(history, {"d11"}, v, 16);
  ASSERT_EQ(ex.input_ids.size(), 16u);
  EXPECT_EQ(ex.input_ids[13], v.WordId("here"));
  EXPECT_EQ(ex.input_ids[14], v.risk_id());
  EXPECT_EQ(ex.input_ids[15], v.ConceptId("d11"));
}

TEST(Stage2, FinetuneRejectsOtherVocabulary) {
  const auto v = DisorderVocab(6);
  ModelConfig mc;
  mc.model_dim = 16;
  mc.n_heads = 2;
  mc.ff_dim = 32;
  mc.max_seq_len = 16;
  Transformer m(mc, v.size());
  m.InitRandom(1);
  const auto ckpt = MakeCheckpoint(m, OptimizerConfig{}, v, LabelMode::kConceptsOnly, 0);
  const auto ex = BuildStage2Example({v.bos_id(), v.WordId("some")}, {"d11"}, v, 16);
  EXPECT_THROW(FinetuneStage2(ckpt, DisorderVocab(7), {ex}), DataError);
  const auto tuned = FinetuneStage2(ckpt, v, {ex, ex, ex, ex}, 1, 3);
  EXPECT_NE(tuned.params, ckpt.params);
  EXPECT_EQ(tuned.optimizer, ckpt.optimizer);
}

TEST(PredictTopK, SpikedLogitsInOrder) {
  const auto v = DisorderVocab(9);
  // d15 is spiked highest but lies in the history; s1 is not a disorder.
  const SpikeModel model(v.size(), {{v.ConceptId("d15"), 9.0}, {v.ConceptId("s1"), 8.5}, {v.ConceptId("d13"), 8.0},
                                     {v.ConceptId("d11"), 7.0}, {v.ConceptId("d17"), 6.0}, {v.ConceptId("d10"), 5.0},
                                     {v.ConceptId("d18"), 4.0}, {v.ConceptId("d12"), 3.0}});
  const auto out = PredictTopK(model, v, {v.bos_id()}, {"d15"}, 32, 5);
  EXPECT_EQ(out, (std::vector<std::string>{"d13", "d11", "d17", "d10", "d18"}));
}

TEST(PredictTopK, RunsOutOfDisorders) {
  const auto v = DisorderVocab(3);
  const SpikeModel model(v.size(), {});
  const auto out = PredictTopK(model, v, {v.bos_id()}, {"d10"}, 32, 5);
  EXPECT_EQ(out, (std::vector<std::string>{"d11", "d12"}));
}

TEST(PredictTopK, ConstraintsHoldForRandomModels) {
  const auto v = DisorderVocab(12);
  ModelConfig mc;
  mc.model_dim = 16;
  mc.n_heads = 2;
  mc.ff_dim = 32;
  mc.max_seq_len = 32;
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Transformer m(mc, v.size());
    m.InitRandom(static_cast<std::uint64_t>(trial));
    for (auto& p : m.params()) p += rng.Normal(0.0, 0.5);
    std::set<std::string> hist;
    std::vector<int> ids{v.bos_id()};
    for (int k = 0; k < 4; ++k) {
      const auto code = "d" + std::to_string(10 + rng.UniformInt(0, 11));
      hist.insert(code);
      ids.push_back(v.ConceptId(code));
    }
    const auto out = PredictTopK(m, v, ids, hist, mc.max_seq_len, 5);
    EXPECT_EQ(out.size(), 5u);
    EXPECT_EQ(std::set<std::string>(out.begin(), out.end()).size(), out.size());
    for (const auto& c : out) {
      EXPECT_FALSE(hist.count(c));
      EXPECT_EQ(v.at(v.ConceptId(c)).type, ConceptType::kDisorder);
    }
  }
}

TEST(Scoring, ExactAndTableOracles) {
  const ExactMatchOracle exact;
  EXPECT_EQ(exact.Count({"a", "b", "c", "d", "e"}, {"a", "b", "c", "d", "e"}), 5);
  EXPECT_EQ(exact.Count({"a", "x"}, {"a", "b", "c"}), 1);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> p, l;
    for (int k = 0; k < 5; ++k) {
      p.push_back(std::to_string(rng.UniformInt(0, 9)));
      l.push_back(std::to_string(rng.UniformInt(0, 9)));
    }
    EXPECT_EQ(exact.Count(p, l), exact.Count(l, p));
  }
  const TableMatchOracle table({{"t1dm", "diabetes"}, {"diabetes", "diabetes"}, {"t2dm", "diabetes"}});
  EXPECT_EQ(table.Count({"t1dm", "gout"}, {"diabetes", "gout"}), 2);
  EXPECT_EQ(table.Count({"t1dm", "t2dm"}, {"diabetes"}), 1);
  const auto path = std::filesystem::temp_directory_path() / "ctl_risk_table.tsv";
  WriteFileAtomic(path, "t1dm\tdiabetes\ndiabetes\tdiabetes\n");
  EXPECT_EQ(TableMatchOracle::Load(path).Count({"t1dm"}, {"diabetes"}), 1);
}

TEST(Scoring, AggregateFourPatients) {
  const auto r = AggregateRisk("m", {0, 1, 2, 3, std::nullopt});
  EXPECT_EQ(r.support, 4);
  EXPECT_DOUBLE_EQ(*r.at_least_1, 75.0);
  EXPECT_DOUBLE_EQ(*r.at_least_2, 50.0);
  EXPECT_DOUBLE_EQ(*r.at_least_3, 25.0);
  const auto all = AggregateRisk("m", {5, 5});
  EXPECT_DOUBLE_EQ(*all.at_least_3, 100.0);
  EXPECT_FALSE(AggregateRisk("m", {}).at_least_1.has_value());
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    std::vector<std::optional<int>> counts;
    for (int k = 0; k < 20; ++k) counts.push_back(static_cast<int>(rng.UniformInt(0, 5)));
    const auto a = AggregateRisk("m", counts);
    EXPECT_GE(*a.at_least_1, *a.at_least_2);
    EXPECT_GE(*a.at_least_2, *a.at_least_3);
  }
  EXPECT_NE(RiskReportToTsv({r}).find("75.0"), std::string::npos);
}

TEST(Judge, ReplyParsing) {
  const auto r = ParseJudgeReply("{\"explanation\":\"two shared\",\"number_of_direct_matches\":2}", 5);
  EXPECT_EQ(r.number_of_direct_matches, 2);
  EXPECT_EQ(r.explanation, "two shared");
  EXPECT_EQ(ParseJudgeReply("Sure! Here it is:\n{\"explanation\": \"x {y}\", \"number_of_direct_matches\": 3}\nThanks", 5)
                .number_of_direct_matches,
            3);
  EXPECT_EQ(ParseJudgeReply("{'explanation': 'ok', 'number_of_direct_matches': 1}", 5).number_of_direct_matches, 1);
  EXPECT_THROW(ParseJudgeReply("no json at all", 5), JudgeError);
  EXPECT_THROW(ParseJudgeReply("{\"explanation\":\"x\"}", 5), JudgeError);
  EXPECT_THROW(ParseJudgeReply("{\"number_of_direct_matches\":6}", 5), JudgeError);
  EXPECT_THROW(ParseJudgeReply("{\"number_of_direct_matches\":-1}", 5), JudgeError);
}

TEST(Judge, SendsPromptAndParsesReply) {
  MockJudge mock;
  mock.handler = [](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(Completion("{\"explanation\": \"pneumonia matches\", \"number_of_direct_matches\": 1}"),
                    "application/json");
  };
  auto cfg = mock.Config();
  cfg.api_key = "secret";
  const JudgeClient client(cfg);
  const auto r = client.Judge({"pneumonia", "gout"}, {"pneumonia"});
  EXPECT_EQ(r.number_of_direct_matches, 1);
  const auto body = Json::parse(mock.last_body);
  EXPECT_EQ(body["model"], cfg.model);
  EXPECT_EQ(body["temperature"], 0.0);
  ASSERT_EQ(body["messages"].size(), 2u);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  const std::string sys = body["messages"][0]["content"];
  EXPECT_NE(sys.find("marked as `Predictions:` match the labels marked as `Labels:`"), std::string::npos);
  EXPECT_NE(sys.find("'number_of_direct_matches': <number>"), std::string::npos);
  EXPECT_EQ(body["messages"][1]["content"], JudgeUserMessage({"pneumonia"}, {"pneumonia", "gout"}));
  EXPECT_EQ(mock.last_auth, "Bearer secret");
}

TEST(Judge, RetriesTransientFailures) {
  MockJudge mock;
  mock.handler = [](const httplib::Request&, httplib::Response& res, int n) {
    if (n == 0) {
      res.status = 503;
      return;
    }
    if (n == 1) {
      res.set_content(Completion("I cannot decide."), "application/json");
      return;
    }
    res.set_content(Completion("{\"explanation\":\"\",\"number_of_direct_matches\":0}"), "application/json");
  };
  EXPECT_EQ(JudgeClient(mock.Config()).Judge({"a"}, {"b"}).number_of_direct_matches, 0);
  EXPECT_EQ(mock.calls.load(), 3);
}

TEST(Judge, PersistentGarbageAndDownEndpoint) {
  MockJudge mock;
  mock.handler = [](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(Completion("nothing useful"), "application/json");
  };
  EXPECT_THROW(JudgeClient(mock.Config()).Judge({"a"}, {"b"}), JudgeError);
  EXPECT_EQ(mock.calls.load(), 3);

  JudgeConfig down;
  down.base_url = "http://127.0.0.1:1";
  down.max_retries = 1;
  down.retry_backoff_ms = 1;
  down.timeout_seconds = 1;
  EXPECT_THROW(JudgeClient(down).Judge({"a"}, {"b"}), JudgeError);
}

TEST(Judge, ManyIsOrderedAndDropsFailures) {
  MockJudge mock;
  mock.handler = [](const httplib::Request& req, httplib::Response& res, int) {
    const auto body = Json::parse(req.body);
    const std::string user = body["messages"][1]["content"];
    if (user.find("broken") != std::string::npos) {
      res.set_content(Completion("??"), "application/json");
    } else {
      res.set_content(Completion("{\"explanation\":\"\",\"number_of_direct_matches\":1}"), "application/json");
    }
  };
  auto cfg = mock.Config();
  cfg.concurrency = 3;
  std::vector<JudgeRequest> reqs;
  for (const char* id : {"p3", "p1", "p4", "p2"}) reqs.push_back({id, {"x"}, {std::string(id) == "p4" ? "broken" : "x"}});
  const auto out = JudgeMany(JudgeClient(cfg), reqs);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0].patient_id, "p1");
  EXPECT_EQ(out[3].patient_id, "p4");
  EXPECT_FALSE(out[3].result.has_value());
  EXPECT_TRUE(out[0].result.has_value());
  std::vector<std::optional<int>> counts;
  for (const auto& o : out) counts.push_back(o.result ? std::optional<int>(o.result->number_of_direct_matches) : std::nullopt);
  EXPECT_EQ(AggregateRisk("judge", counts).support, 3);
}

TEST(Prompts, TemplatesAndBudgets) {
  const auto gpt = RenderBaselinePrompt("Patient had pneumonia.", PromptFormat::kGpt4);
  EXPECT_NE(gpt.system.find("They have to be new disorders"), std::string::npos);
  EXPECT_NE(gpt.system.find("predict 5 specific disorders"), std::string::npos);
  EXPECT_EQ(gpt.user.rfind("Patient had pneumonia.", 0), 0u);
  EXPECT_NE(gpt.user.find("What 5 specific new disorders"), std::string::npos);

  const auto alpaca = RenderBaselinePrompt("h", PromptFormat::kMedAlpaca, 3).Text();
  EXPECT_EQ(alpaca.rfind("Context:", 0), 0u);
  auto trimmed = alpaca;
  while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back()))) trimmed.pop_back();
  EXPECT_EQ(trimmed.substr(trimmed.size() - 7), "Answer:");
  EXPECT_NE(alpaca.find("what 3 specific"), std::string::npos);

  const auto meditron = RenderBaselinePrompt("h", PromptFormat::kMeditron).Text();
  EXPECT_EQ(meditron.rfind("<|im_start|>system", 0), 0u);
  EXPECT_NE(meditron.find("They have to be new disorders"), std::string::npos);
  EXPECT_NE(RenderBaselinePrompt("h", PromptFormat::kBioMistral).Text().find("<patient_history>\nh\n</patient_history>"),
            std::string::npos);

  EXPECT_FALSE(PromptBudget(PromptFormat::kGpt4).has_value());
  EXPECT_EQ(PromptBudget(PromptFormat::kMedAlpaca), 2048 - 128);
  EXPECT_EQ(CountWhitespaceTokens("  a b\n c  "), 3);
  EXPECT_EQ(FillTemplate("{a} {b} {{x}}", {{"a", "1"}}), "1 {b} {{x}}");
  EXPECT_THROW(ParsePromptFormat("llama"), ConfigError);
}
