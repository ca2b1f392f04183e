#include "ctl/risk.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <sstream>
#include <thread>

#include "httplib.h"

namespace ctl {

namespace {
#include "prompt_templates.inc"
}  // namespace

// ---------------------------------------------------------------------------
// Dataset.

std::optional<RiskSplit> SplitTimeline(const PatientTimeline& t, int max_history_concepts) {
  const auto n = static_cast<int>(t.ConceptCount());
  if (n < 2) return std::nullopt;
  const int k = std::min(n / 2, max_history_concepts);
  RiskSplit s;
  s.history.patient_id = t.patient_id;
  int seen = 0;
  for (const auto& e : t.events) {
    if (seen < k) {
      s.history.events.push_back(e);
      if (const auto* c = std::get_if<ConceptEvent>(&e)) {
        if (++seen == k) s.split_day = c->bucket_date;
      }
    } else if (const auto* c = std::get_if<ConceptEvent>(&e)) {
      s.future.push_back(*c);
    }
  }
  return s;
}

std::optional<RiskExample> MakeRiskExample(const PatientTimeline& t, const ConceptCatalog& catalog,
                                           const RiskCriteria& criteria, std::string* reason) {
  auto fail = [&](std::string why) -> std::optional<RiskExample> {
    if (reason) *reason = std::move(why);
    return std::nullopt;
  };
  const auto split = SplitTimeline(t, criteria.max_history_concepts);
  if (!split) return fail("fewer than 2 concepts");
  if (split->future.empty()) return fail("no concepts after the split");
  const DayIndex span = split->future.back().bucket_date - split->split_day;
  if (span < criteria.min_future_days) {
    return fail("future span " + std::to_string(span) + " days < " + std::to_string(criteria.min_future_days));
  }
  std::set<std::string> history_codes;
  for (const auto* c : split->history.Concepts()) history_codes.insert(c->code());

  auto is_disorder = [&](const std::string& code) {
    auto it = catalog.find(code);
    return it != catalog.end() && it->second == ConceptType::kDisorder;
  };
  std::set<std::string> window_disorders;
  std::vector<std::string> labels;
  for (const auto& c : split->future) {
    if (c.bucket_date <= split->split_day || c.bucket_date > split->split_day + criteria.window_days) continue;
    if (!is_disorder(c.code())) continue;
    if (window_disorders.insert(c.code()).second && !history_codes.count(c.code())) labels.push_back(c.code());
  }
  if (static_cast<int>(window_disorders.size()) < criteria.min_window_disorders) {
    return fail(std::to_string(window_disorders.size()) + " distinct disorders in the window < " +
                std::to_string(criteria.min_window_disorders));
  }
  if (labels.empty()) return fail("no new disorders in the window");
  RiskExample e;
  e.patient_id = t.patient_id;
  e.history = split->history;
  e.split_day = split->split_day;
  e.labels = std::move(labels);
  return e;
}

std::vector<RiskExample> BuildRiskDataset(const std::vector<PatientTimeline>& timelines,
                                          const ConceptCatalog& catalog, const RiskCriteria& criteria,
                                          std::vector<RiskExclusion>* excluded, int jobs) {
  std::vector<std::optional<RiskExample>> made(timelines.size());
  std::vector<std::string> reasons(timelines.size());
  ParallelFor(timelines.size(), jobs,
              [&](std::size_t i) { made[i] = MakeRiskExample(timelines[i], catalog, criteria, &reasons[i]); });
  std::vector<RiskExample> out;
  for (std::size_t i = 0; i < made.size(); ++i) {
    if (made[i]) {
      out.push_back(std::move(*made[i]));
    } else {
      Log(LogLevel::kDebug, "risk", "excluded: " + reasons[i], timelines[i].patient_id);
      if (excluded) excluded->push_back({timelines[i].patient_id, reasons[i]});
    }
  }
  return out;
}

Json RiskExampleToJson(const RiskExample& e) {
  return Json{{"patient_id", e.patient_id},
              {"split_day", FormatDate(e.split_day)},
              {"labels", e.labels},
              {"history", TimelineToJson(e.history)}};
}

RiskExample RiskExampleFromJson(const Json& j) {
  RiskExample e;
  e.patient_id = j.at("patient_id").get<std::string>();
  e.split_day = ParseDate(j.at("split_day").get<std::string>());
  e.labels = j.at("labels").get<std::vector<std::string>>();
  e.history = TimelineFromJson(j.at("history"));
  return e;
}

std::vector<RiskExample> LoadRiskExamples(const std::filesystem::path& path) {
  std::vector<RiskExample> out;
  for (const auto& r : ReadRecords(path, kRiskExamplesSchema)) {
    try {
      out.push_back(RiskExampleFromJson(r.value));
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    } catch (const DataError& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteRiskExamples(const std::vector<RiskExample>& examples, const std::filesystem::path& path) {
  RecordWriter w(path, kRiskExamplesSchema);
  for (const auto& e : examples) w.Write(RiskExampleToJson(e));
  w.Close();
}

// ---------------------------------------------------------------------------
// Stage 2.

std::vector<int> HistoryIds(const PatientTimeline& history, const DocumentIndex& docs, const Vocabulary& vocab,
                            const RenderOptions& options) {
  const auto enc = Encode(RenderNote(history, docs, options), vocab);
  std::vector<int> ids{vocab.bos_id()};
  ids.insert(ids.end(), enc.token_ids.begin(), enc.token_ids.end());
  return ids;
}

TrainingExample BuildStage2Example(const std::vector<int>& history_ids, const std::vector<std::string>& labels,
                                   const Vocabulary& vocab, int max_seq_len) {
  if (labels.empty()) throw DataError("risk example without labels");
  if (static_cast<int>(labels.size()) + 2 > max_seq_len) throw DataError("risk labels exceed max_seq_len");
  std::vector<int> ids = history_ids;
  ids.push_back(vocab.risk_id());
  const std::size_t first_label = ids.size();
  for (const auto& code : labels) ids.push_back(vocab.ConceptId(code));
  std::size_t drop = 0;
  if (ids.size() > static_cast<std::size_t>(max_seq_len)) drop = ids.size() - static_cast<std::size_t>(max_seq_len);
  TrainingExample ex;
  ex.input_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(drop), ids.end());
  ex.label_ids.assign(ex.input_ids.size(), Vocabulary::kIgnoreLabel);
  for (std::size_t j = first_label; j < ids.size(); ++j) ex.label_ids[j - 1 - drop] = ids[j];
  return ex;
}

Checkpoint FinetuneStage2(const Checkpoint& ckpt, const Vocabulary& data_vocab,
                          const std::vector<TrainingExample>& examples, int epochs, std::uint64_t seed) {
  if (data_vocab.Hash() != ckpt.vocab.Hash()) {
    throw DataError("vocabulary mismatch between risk examples and checkpoint");
  }
  if (examples.empty()) throw DataError("no risk training examples");
  Transformer model = ModelFromCheckpoint(ckpt);
  OptimizerConfig opt = ckpt.optimizer;
  opt.epochs = epochs;
  const auto result = Train(model, examples, {}, opt, seed);
  return MakeCheckpoint(model, ckpt.optimizer, ckpt.vocab, ckpt.label_mode, ckpt.step + result.steps);
}

std::vector<std::string> PredictTopK(const NextTokenModel& model, const Vocabulary& vocab,
                                     std::vector<int> history_ids, const std::set<std::string>& history_codes,
                                     int max_seq_len, int k) {
  history_ids.push_back(vocab.risk_id());
  RankFilter filter;
  filter.type = ConceptType::kDisorder;
  filter.exclude = history_codes;
  std::vector<std::string> out;
  while (static_cast<int>(out.size()) < k) {
    const auto ranked = RankNext(model, vocab, history_ids, max_seq_len, filter, 1);
    if (ranked.empty()) {
      Log(LogLevel::kWarn, "risk",
          "disorder vocabulary exhausted after " + std::to_string(out.size()) + " predictions");
      break;
    }
    out.push_back(ranked.front().code);
    filter.exclude.insert(ranked.front().code);
    history_ids.push_back(vocab.ConceptId(ranked.front().code));
  }
  return out;
}

std::vector<RiskPrediction> LoadRiskPredictions(const std::filesystem::path& path) {
  std::vector<RiskPrediction> out;
  for (const auto& r : ReadRecords(path, kRiskPredictionsSchema)) {
    try {
      out.push_back({r.value.at("patient_id").get<std::string>(),
                     r.value.at("predictions").get<std::vector<std::string>>(),
                     r.value.at("labels").get<std::vector<std::string>>()});
    } catch (const Json::exception& e) {
      throw ParseError(path.string(), r.line, e.what());
    }
  }
  return out;
}

void WriteRiskPredictions(const std::vector<RiskPrediction>& preds, const std::filesystem::path& path) {
  RecordWriter w(path, kRiskPredictionsSchema);
  for (const auto& p : preds) {
    w.Write(Json{{"patient_id", p.patient_id}, {"predictions", p.predictions}, {"labels", p.labels}});
  }
  w.Close();
}

// ---------------------------------------------------------------------------
// Scoring.

int ExactMatchOracle::Count(const std::vector<std::string>& predictions,
                            const std::vector<std::string>& labels) const {
  const std::set<std::string> p(predictions.begin(), predictions.end());
  const std::set<std::string> l(labels.begin(), labels.end());
  int n = 0;
  for (const auto& x : p) n += l.count(x) ? 1 : 0;
  return n;
}

TableMatchOracle TableMatchOracle::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open equivalence table '" + path.string() + "'");
  std::map<std::string, std::string> m;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string(), n, "expected key<TAB>class");
    m[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return TableMatchOracle(std::move(m));
}

std::string TableMatchOracle::ClassOf(const std::string& key) const {
  auto it = classes_.find(key);
  return it == classes_.end() ? "\x01" + key : it->second;
}

int TableMatchOracle::Count(const std::vector<std::string>& predictions,
                            const std::vector<std::string>& labels) const {
  std::map<std::string, int> pc, lc;
  for (const auto& p : std::set<std::string>(predictions.begin(), predictions.end())) ++pc[ClassOf(p)];
  for (const auto& l : std::set<std::string>(labels.begin(), labels.end())) ++lc[ClassOf(l)];
  int n = 0;
  for (const auto& [cls, count] : pc) {
    auto it = lc.find(cls);
    if (it != lc.end()) n += std::min(count, it->second);
  }
  return n;
}

RiskReport AggregateRisk(const std::string& model, const std::vector<std::optional<int>>& counts) {
  RiskReport r;
  r.model = model;
  long ge[4] = {0, 0, 0, 0};
  for (const auto& c : counts) {
    if (!c) continue;
    ++r.support;
    for (int k = 1; k <= 3; ++k) ge[k] += *c >= k ? 1 : 0;
  }
  if (r.support > 0) {
    const double s = static_cast<double>(r.support);
    r.at_least_1 = 100.0 * static_cast<double>(ge[1]) / s;
    r.at_least_2 = 100.0 * static_cast<double>(ge[2]) / s;
    r.at_least_3 = 100.0 * static_cast<double>(ge[3]) / s;
  }
  return r;
}

std::string RiskReportToTsv(const std::vector<RiskReport>& reports) {
  auto fmt = [](std::optional<double> v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "model\tat_least_1\tat_least_2\tat_least_3\tsupport\n";
  for (const auto& r : reports) {
    out << r.model << '\t' << fmt(r.at_least_1) << '\t' << fmt(r.at_least_2) << '\t' << fmt(r.at_least_3) << '\t'
        << r.support << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Judge.

namespace {

// End index (inclusive) of the object opening at `start`, or npos.
std::size_t BalancedEnd(const std::string& s, std::size_t start) {
  int depth = 0;
  bool in_str = false;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i;
  }
  return std::string::npos;
}

std::optional<Json> TryParseObject(const std::string& s) {
  try {
    Json j = Json::parse(s);
    if (j.is_object()) return j;
  } catch (const Json::parse_error&) {
  }
  return std::nullopt;
}

std::string JoinNames(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

}  // namespace

std::optional<Json> ExtractJsonObject(const std::string& text) {
  for (std::size_t start = text.find('{'); start != std::string::npos; start = text.find('{', start + 1)) {
    const auto end = BalancedEnd(text, start);
    if (end == std::string::npos) continue;
    std::string candidate = text.substr(start, end - start + 1);
    if (auto j = TryParseObject(candidate)) return j;
    std::replace(candidate.begin(), candidate.end(), '\'', '"');
    if (auto j = TryParseObject(candidate)) return j;
  }
  // Single-quoted objects can hide their braces from the strict scan.
  std::string relaxed = text;
  std::replace(relaxed.begin(), relaxed.end(), '\'', '"');
  if (relaxed != text) {
    for (std::size_t start = relaxed.find('{'); start != std::string::npos; start = relaxed.find('{', start + 1)) {
      const auto end = BalancedEnd(relaxed, start);
      if (end == std::string::npos) continue;
      if (auto j = TryParseObject(relaxed.substr(start, end - start + 1))) return j;
    }
  }
  return std::nullopt;
}

JudgeResult ParseJudgeReply(const std::string& content, std::size_t n_predictions) {
  const auto obj = ExtractJsonObject(content);
  if (!obj) throw JudgeError("judge reply contains no JSON object");
  if (!obj->contains("number_of_direct_matches")) throw JudgeError("judge reply lacks number_of_direct_matches");
  const Json& v = obj->at("number_of_direct_matches");
  long n = -1;
  if (v.is_number_integer()) {
    n = v.get<long>();
  } else if (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long>(v.get<double>()))) {
    n = static_cast<long>(v.get<double>());
  } else if (v.is_string()) {
    try {
      std::size_t used = 0;
      n = std::stol(v.get<std::string>(), &used);
      if (used != v.get<std::string>().size()) n = -1;
    } catch (const std::exception&) {
      n = -1;
    }
  }
  if (n < 0 || n > static_cast<long>(n_predictions)) {
    throw JudgeError("judge count " + v.dump() + " outside [0, " + std::to_string(n_predictions) + "]");
  }
  JudgeResult r;
  r.number_of_direct_matches = static_cast<int>(n);
  if (obj->contains("explanation") && obj->at("explanation").is_string()) {
    r.explanation = obj->at("explanation").get<std::string>();
  }
  return r;
}

std::string JudgeUserMessage(const std::vector<std::string>& labels, const std::vector<std::string>& predictions) {
  return FillTemplate(kJudgeUser, {{"labels", JoinNames(labels)}, {"predictions", JoinNames(predictions)}});
}

JudgeResult JudgeClient::Judge(const std::vector<std::string>& predictions,
                               const std::vector<std::string>& labels) const {
  const Json body{{"model", config_.model},
                  {"messages",
                   Json::array({{{"role", "system"}, {"content", std::string(kJudgeSystem)}},
                                {{"role", "user"}, {"content", JudgeUserMessage(labels, predictions)}}})},
                  {"temperature", config_.temperature}};
  httplib::Client cli(config_.base_url);
  cli.set_connection_timeout(config_.timeout_seconds, 0);
  cli.set_read_timeout(config_.timeout_seconds, 0);
  cli.set_write_timeout(config_.timeout_seconds, 0);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace(config_.auth_header, "Bearer " + config_.api_key);

  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(config_.retry_backoff_ms * attempt));
    auto res = cli.Post(config_.path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "endpoint returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw JudgeError("endpoint returned HTTP " + std::to_string(res->status));
    try {
      const Json reply = Json::parse(res->body);
      const auto content = reply.at("choices").at(0).at("message").at("content").get<std::string>();
      return ParseJudgeReply(content, predictions.size());
    } catch (const Json::exception& e) {
      last_error = std::string("malformed completion: ") + e.what();
    } catch (const JudgeError& e) {
      last_error = e.what();
    }
  }
  throw JudgeError("judge failed after " + std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
}

std::vector<JudgeOutcome> JudgeMany(const JudgeClient& client, std::vector<JudgeRequest> requests) {
  std::sort(requests.begin(), requests.end(),
            [](const JudgeRequest& a, const JudgeRequest& b) { return a.patient_id < b.patient_id; });
  std::vector<JudgeOutcome> out(requests.size());
  ParallelFor(requests.size(), std::max(1, client.config().concurrency), [&](std::size_t i) {
    out[i].patient_id = requests[i].patient_id;
    try {
      out[i].result = client.Judge(requests[i].predictions, requests[i].labels);
    } catch (const JudgeError& e) {
      out[i].error = e.what();
    }
  });
  for (const auto& o : out) {
    if (!o.result) Log(LogLevel::kWarn, "risk", "judge unsupported: " + o.error, o.patient_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompts.

PromptFormat ParsePromptFormat(const std::string& s) {
  if (s == "gpt4") return PromptFormat::kGpt4;
  if (s == "biomistral") return PromptFormat::kBioMistral;
  if (s == "medalpaca") return PromptFormat::kMedAlpaca;
  if (s == "meditron") return PromptFormat::kMeditron;
  throw ConfigError("unknown prompt format '" + s + "' (expected gpt4|biomistral|medalpaca|meditron)");
}

const char* PromptFormatName(PromptFormat f) {
  switch (f) {
    case PromptFormat::kGpt4: return "gpt4";
    case PromptFormat::kBioMistral: return "biomistral";
    case PromptFormat::kMedAlpaca: return "medalpaca";
    case PromptFormat::kMeditron: return "meditron";
  }
  return "gpt4";
}

std::string BaselinePrompt::Text() const { return system.empty() ? user : system + "\n\n" + user; }

std::string FillTemplate(std::string_view tpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] == '{') {
      const auto close = tpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        auto it = values.find(std::string(tpl.substr(i + 1, close - i - 1)));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tpl[i++];
  }
  return out;
}

BaselinePrompt RenderBaselinePrompt(const std::string& history, PromptFormat format, int limit) {
  const std::map<std::string, std::string> vals{{"history", history}, {"limit", std::to_string(limit)}};
  BaselinePrompt p;
  switch (format) {
    case PromptFormat::kGpt4:
      p.system = FillTemplate(kGpt4System, vals);
      p.user = FillTemplate(kGpt4User, vals);
      break;
    case PromptFormat::kBioMistral:
      p.user = FillTemplate(kBioMistral, vals);
      break;
    case PromptFormat::kMedAlpaca:
      p.user = FillTemplate(kMedAlpaca, vals);
      break;
    case PromptFormat::kMeditron:
      p.user = FillTemplate(kMeditron, {{"system", FillTemplate(kGpt4System, vals)},
                                        {"prompt", FillTemplate(kGpt4User, vals)}});
      break;
  }
  return p;
}

std::optional<int> PromptBudget(PromptFormat format) {
  if (format == PromptFormat::kGpt4) return std::nullopt;
  return 2048 - 128;
}

int CountWhitespaceTokens(std::string_view text) {
  int n = 0;
  bool in = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in) ++n;
    in = !space;
  }
  return n;
}

}  // namespace ctl
