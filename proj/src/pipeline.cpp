#include "ctl/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

namespace ctl {

namespace fs = std::filesystem;

std::string NowIso() {
  const auto now = std::chrono::system_clock::now();
  return FormatTimestamp(std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
}

// ---------------------------------------------------------------------------
// Config parsing.

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void ReadConfigInto(const fs::path& path, std::map<std::string, std::string>& out, std::set<fs::path>& stack) {
  std::error_code ec;
  const fs::path canon = fs::weakly_canonical(path, ec);
  if (stack.count(canon)) throw ConfigError("config include cycle at '" + path.string() + "'");
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  stack.insert(canon);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = Trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    }
    const auto key = Trim(t.substr(0, eq));
    const auto value = Trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError(path.string() + ":" + std::to_string(n) + ": empty key");
    if (key == "include") {
      fs::path inc = value;
      if (inc.is_relative()) inc = path.parent_path() / inc;
      ReadConfigInto(inc, out, stack);
    } else {
      out[key] = value;
    }
  }
  stack.erase(canon);
}

long ParseLong(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long x = std::stol(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

int ParseInt(const std::string& key, const std::string& v) { return static_cast<int>(ParseLong(key, v)); }

double ParseDouble(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

bool ParseBool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> SplitList(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = Trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& Setters() {
  static const std::map<std::string, Setter> setters = {
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(ParseLong(k, v)); }},
      {"work_dir", [](RunConfig& c, auto&, auto& v) { c.work_dir = v; }},
      {"jobs", [](RunConfig& c, auto& k, auto& v) { c.jobs = ParseInt(k, v); }},
      {"corpus.source", [](RunConfig& c, auto&, auto& v) { c.corpus_source = v; }},
      {"corpus.path", [](RunConfig& c, auto&, auto& v) { c.corpus_path = v; }},
      {"corpus.n_patients", [](RunConfig& c, auto& k, auto& v) { c.n_patients = ParseInt(k, v); }},
      {"lexicon.path", [](RunConfig& c, auto&, auto& v) { c.lexicon_path = v; }},
      {"split.test_fraction", [](RunConfig& c, auto& k, auto& v) { c.test_fraction = ParseDouble(k, v); }},
      {"split.heldout_fraction", [](RunConfig& c, auto& k, auto& v) { c.heldout_fraction = ParseDouble(k, v); }},
      {"annotate.context_tokens", [](RunConfig& c, auto& k, auto& v) { c.context_tokens = ParseInt(k, v); }},
      {"timeline.bucket_days", [](RunConfig& c, auto& k, auto& v) { c.bucket_days = ParseInt(k, v); }},
      {"reconstruct.include_context",
       [](RunConfig& c, auto& k, auto& v) { c.include_context = ParseBool(k, v); }},
      {"reconstruct.placement",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "after_mention") c.placement = CodePlacement::kAfterMention;
         else if (v == "replace_mention") c.placement = CodePlacement::kReplaceMention;
         else throw ConfigError("config key '" + k + "': expected after_mention|replace_mention");
       }},
      {"vocab.min_freq", [](RunConfig& c, auto& k, auto& v) { c.min_freq = ParseInt(k, v); }},
      {"vocab.concept_init",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "name_mean") c.concept_init = ConceptInit::kNameMean;
         else if (v == "all_mean") c.concept_init = ConceptInit::kAllMean;
         else throw ConfigError("config key '" + k + "': expected name_mean|all_mean");
       }},
      {"model.n_layers", [](RunConfig& c, auto& k, auto& v) { c.model.n_layers = ParseInt(k, v); }},
      {"model.n_heads", [](RunConfig& c, auto& k, auto& v) { c.model.n_heads = ParseInt(k, v); }},
      {"model.model_dim", [](RunConfig& c, auto& k, auto& v) { c.model.model_dim = ParseInt(k, v); }},
      {"model.ff_dim", [](RunConfig& c, auto& k, auto& v) { c.model.ff_dim = ParseInt(k, v); }},
      {"model.max_seq_len", [](RunConfig& c, auto& k, auto& v) { c.model.max_seq_len = ParseInt(k, v); }},
      {"model.dropout", [](RunConfig& c, auto& k, auto& v) { c.model.dropout = ParseDouble(k, v); }},
      {"optim.learning_rate", [](RunConfig& c, auto& k, auto& v) { c.optimizer.learning_rate = ParseDouble(k, v); }},
      {"optim.beta1", [](RunConfig& c, auto& k, auto& v) { c.optimizer.beta1 = ParseDouble(k, v); }},
      {"optim.beta2", [](RunConfig& c, auto& k, auto& v) { c.optimizer.beta2 = ParseDouble(k, v); }},
      {"optim.weight_decay", [](RunConfig& c, auto& k, auto& v) { c.optimizer.weight_decay = ParseDouble(k, v); }},
      {"optim.warmup_ratio", [](RunConfig& c, auto& k, auto& v) { c.optimizer.warmup_ratio = ParseDouble(k, v); }},
      {"optim.grad_clip", [](RunConfig& c, auto& k, auto& v) { c.optimizer.grad_clip = ParseDouble(k, v); }},
      {"optim.grad_accum", [](RunConfig& c, auto& k, auto& v) { c.optimizer.grad_accum = ParseInt(k, v); }},
      {"optim.epochs", [](RunConfig& c, auto& k, auto& v) { c.optimizer.epochs = ParseInt(k, v); }},
      {"optim.patience", [](RunConfig& c, auto& k, auto& v) { c.optimizer.patience = ParseInt(k, v); }},
      {"train.label_mode", [](RunConfig& c, auto&, auto& v) { c.label_mode = ParseLabelMode(v); }},
      {"eval.t_days",
       [](RunConfig& c, auto& k, auto& v) {
         c.t_grid.clear();
         for (const auto& item : SplitList(v)) {
           if (item == "inf") c.t_grid.push_back(std::nullopt);
           else c.t_grid.push_back(ParseInt(k, item));
         }
       }},
      {"eval.n",
       [](RunConfig& c, auto& k, auto& v) {
         c.n_grid.clear();
         for (const auto& item : SplitList(v)) c.n_grid.push_back(ParseInt(k, item));
       }},
      {"eval.target_code", [](RunConfig& c, auto&, auto& v) { c.target_code = v; }},
      {"risk.enabled", [](RunConfig& c, auto& k, auto& v) { c.risk_enabled = ParseBool(k, v); }},
      {"risk.max_history_concepts",
       [](RunConfig& c, auto& k, auto& v) { c.risk.max_history_concepts = ParseInt(k, v); }},
      {"risk.window_days", [](RunConfig& c, auto& k, auto& v) { c.risk.window_days = ParseInt(k, v); }},
      {"risk.min_future_days", [](RunConfig& c, auto& k, auto& v) { c.risk.min_future_days = ParseInt(k, v); }},
      {"risk.min_window_disorders",
       [](RunConfig& c, auto& k, auto& v) { c.risk.min_window_disorders = ParseInt(k, v); }},
      {"risk.epochs", [](RunConfig& c, auto& k, auto& v) { c.risk_epochs = ParseInt(k, v); }},
      {"risk.oracle", [](RunConfig& c, auto&, auto& v) { c.oracle = v; }},
      {"risk.equivalence_table", [](RunConfig& c, auto&, auto& v) { c.equivalence_table = v; }},
      {"judge.base_url", [](RunConfig& c, auto&, auto& v) { c.judge.base_url = v; }},
      {"judge.path", [](RunConfig& c, auto&, auto& v) { c.judge.path = v; }},
      {"judge.model", [](RunConfig& c, auto&, auto& v) { c.judge.model = v; }},
      {"judge.auth_header", [](RunConfig& c, auto&, auto& v) { c.judge.auth_header = v; }},
      {"judge.api_key_env", [](RunConfig& c, auto&, auto& v) { c.judge_api_key_env = v; }},
      {"judge.temperature", [](RunConfig& c, auto& k, auto& v) { c.judge.temperature = ParseDouble(k, v); }},
      {"judge.max_retries", [](RunConfig& c, auto& k, auto& v) { c.judge.max_retries = ParseInt(k, v); }},
      {"judge.timeout_seconds", [](RunConfig& c, auto& k, auto& v) { c.judge.timeout_seconds = ParseInt(k, v); }},
      {"judge.concurrency", [](RunConfig& c, auto& k, auto& v) { c.judge.concurrency = ParseInt(k, v); }},
  };
  return setters;
}

}  // namespace

std::map<std::string, std::string> ReadConfigFile(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::set<fs::path> stack;
  ReadConfigInto(path, out, stack);
  return out;
}

RunConfig RunConfigFromMap(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  for (const auto& [k, v] : kv) {
    auto it = Setters().find(k);
    if (it == Setters().end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(c, k, v);
  }
  c.model.seed = c.seed;
  c.raw = kv;
  return c;
}

RunConfig LoadRunConfig(const fs::path& path) { return RunConfigFromMap(ReadConfigFile(path)); }

void ApplySecretEnv(RunConfig& cfg) {
  if (const char* key = std::getenv(cfg.judge_api_key_env.c_str())) cfg.judge.api_key = key;
}

std::string ConfigHash(const RunConfig& cfg) {
  // Hash the effective values so defaults and explicit keys agree.
  Json j{{"seed", cfg.seed},
         {"corpus_source", cfg.corpus_source},
         {"corpus_path", cfg.corpus_path},
         {"lexicon_path", cfg.lexicon_path},
         {"n_patients", cfg.n_patients},
         {"test_fraction", cfg.test_fraction},
         {"heldout_fraction", cfg.heldout_fraction},
         {"context_tokens", cfg.context_tokens},
         {"bucket_days", cfg.bucket_days},
         {"include_context", cfg.include_context},
         {"placement", cfg.placement == CodePlacement::kAfterMention ? "after_mention" : "replace_mention"},
         {"min_freq", cfg.min_freq},
         {"concept_init", cfg.concept_init == ConceptInit::kNameMean ? "name_mean" : "all_mean"},
         {"model", cfg.model.ToJson()},
         {"optimizer", cfg.optimizer.ToJson()},
         {"label_mode", LabelModeName(cfg.label_mode)},
         {"n_grid", cfg.n_grid},
         {"target_code", cfg.target_code},
         {"risk_enabled", cfg.risk_enabled},
         {"risk", {cfg.risk.max_history_concepts, cfg.risk.window_days, cfg.risk.min_future_days,
                   cfg.risk.min_window_disorders, cfg.risk_epochs}},
         {"oracle", cfg.oracle},
         {"equivalence_table", cfg.equivalence_table},
         {"judge", {cfg.judge.base_url, cfg.judge.path, cfg.judge.model, cfg.judge.temperature}}};
  Json t = Json::array();
  for (auto w : cfg.t_grid) t.push_back(w ? Json(*w) : Json("inf"));
  j["t_grid"] = t;
  return Sha256Hex(j.dump());
}

std::vector<std::string> ValidateConfig(const RunConfig& cfg) {
  std::vector<std::string> v;
  auto req = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  req(cfg.jobs >= 1, "cli: jobs must be >= 1");
  req(!cfg.work_dir.empty(), "cli: work_dir must be set");
  req(cfg.corpus_source == "synthetic" || cfg.corpus_source == "file",
      "corpus: source must be synthetic or file");
  if (cfg.corpus_source == "synthetic") {
    req(cfg.n_patients >= 2, "corpus: n_patients must be >= 2");
  } else {
    req(!cfg.corpus_path.empty(), "corpus: corpus.path is required when source=file");
    req(!cfg.lexicon_path.empty(), "annotator: lexicon.path is required when source=file");
  }
  req(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0, "corpus: split.test_fraction must be in (0, 1)");
  req(cfg.heldout_fraction >= 0.0 && cfg.heldout_fraction < 1.0,
      "corpus: split.heldout_fraction must be in [0, 1)");
  req(cfg.context_tokens >= 0, "annotator: context_tokens must be >= 0");
  req(cfg.bucket_days >= 1, "timeline: bucket_days must be >= 1");
  req(cfg.min_freq >= 1, "tokenizer: min_freq must be >= 1");
  for (const auto& m : cfg.model.Validate()) v.push_back(m);
  for (const auto& m : cfg.optimizer.Validate()) v.push_back(m);
  req(!cfg.t_grid.empty(), "eval: T grid is empty");
  for (auto t : cfg.t_grid) req(!t || *t >= 0, "eval: T grid value " + std::to_string(t.value_or(0)) + " is negative");
  req(!cfg.n_grid.empty(), "eval: N grid is empty");
  for (int n : cfg.n_grid) req(n >= 1, "eval: N grid value " + std::to_string(n) + " must be >= 1");
  req(cfg.risk.max_history_concepts >= 1, "risk: max_history_concepts must be >= 1");
  req(cfg.risk.window_days >= 1, "risk: window_days must be >= 1");
  req(cfg.risk.min_future_days >= 0, "risk: min_future_days must be >= 0");
  req(cfg.risk.min_window_disorders >= 1, "risk: min_window_disorders must be >= 1");
  req(cfg.risk_epochs >= 1, "risk: epochs must be >= 1");
  req(cfg.oracle == "exact" || cfg.oracle == "table" || cfg.oracle == "llm", "risk: oracle must be exact|table|llm");
  if (cfg.oracle == "table") req(!cfg.equivalence_table.empty(), "risk: oracle=table needs risk.equivalence_table");
  req(cfg.judge.max_retries >= 0, "risk: judge.max_retries must be >= 0");
  req(cfg.judge.concurrency >= 1, "risk: judge.concurrency must be >= 1");
  req(cfg.judge.timeout_seconds >= 1, "risk: judge.timeout_seconds must be >= 1");
  return v;
}

RenderOptions RenderOf(const RunConfig& cfg) { return {cfg.include_context, cfg.placement}; }

EvalGrid GridOf(const RunConfig& cfg) {
  EvalGrid g;
  g.t_days = cfg.t_grid;
  g.n = cfg.n_grid;
  return g;
}

// ---------------------------------------------------------------------------
// Manifest.

Json RunManifest::ToJson() const {
  Json stages_json = Json::array();
  for (const auto& s : stages) {
    stages_json.push_back({{"name", s.name},
                           {"fingerprint", s.fingerprint},
                           {"outputs", s.outputs},
                           {"started_at", s.started_at},
                           {"finished_at", s.finished_at}});
  }
  return Json{{"tool_version", tool_version}, {"config_hash", config_hash}, {"inputs", inputs},
              {"stages", stages_json},        {"executed", executed},       {"started_at", started_at},
              {"finished_at", finished_at}};
}

RunManifest RunManifest::FromJson(const Json& j) {
  RunManifest m;
  m.tool_version = j.value("tool_version", m.tool_version);
  m.config_hash = j.value("config_hash", "");
  m.inputs = j.value("inputs", std::map<std::string, std::string>{});
  for (const auto& s : j.value("stages", Json::array())) {
    StageRecord r;
    r.name = s.at("name").get<std::string>();
    r.fingerprint = s.at("fingerprint").get<std::string>();
    r.outputs = s.at("outputs").get<std::map<std::string, std::string>>();
    r.started_at = s.value("started_at", "");
    r.finished_at = s.value("finished_at", "");
    m.stages.push_back(std::move(r));
  }
  m.executed = j.value("executed", std::vector<std::string>{});
  m.started_at = j.value("started_at", "");
  m.finished_at = j.value("finished_at", "");
  return m;
}

// ---------------------------------------------------------------------------
// Shared stage helpers.

TrainedModel TrainOnNotes(const std::vector<ReconstructedNote>& train_notes,
                          const std::vector<ReconstructedNote>& heldout_notes, const Vocabulary& vocab,
                          const ModelConfig& model_cfg, const OptimizerConfig& opt, LabelMode mode,
                          ConceptInit init, std::uint64_t seed) {
  std::vector<EncodedNote> enc;
  for (const auto& n : train_notes) enc.push_back(Encode(n, vocab));
  const auto train = PackExamples(enc, vocab, model_cfg.max_seq_len, mode);
  std::vector<TrainingExample> heldout;
  if (!heldout_notes.empty()) {
    std::vector<EncodedNote> henc;
    for (const auto& n : heldout_notes) henc.push_back(Encode(n, vocab));
    heldout = PackExamples(henc, vocab, model_cfg.max_seq_len, mode);
  }
  Transformer model(model_cfg, vocab.size());
  model.SetEmbeddings(InitEmbeddings(vocab, model_cfg.model_dim, seed, init));
  TrainedModel out;
  out.result = Train(model, train, heldout, opt, seed);
  out.checkpoint = MakeCheckpoint(model, opt, vocab, mode, out.result.steps);
  return out;
}

std::vector<std::optional<int>> ScoreRiskPredictions(const std::vector<RiskPrediction>& preds,
                                                     const RunConfig& cfg, const Lexicon& lexicon) {
  std::vector<std::optional<int>> counts;
  if (cfg.oracle == "exact" || cfg.oracle == "table") {
    std::unique_ptr<MatchOracle> oracle;
    if (cfg.oracle == "exact") oracle = std::make_unique<ExactMatchOracle>();
    else oracle = std::make_unique<TableMatchOracle>(TableMatchOracle::Load(cfg.equivalence_table));
    for (const auto& p : preds) counts.push_back(oracle->Count(p.predictions, p.labels));
    return counts;
  }
  if (cfg.oracle != "llm") throw ConfigError("unknown oracle '" + cfg.oracle + "'");
  auto names = [&](const std::vector<std::string>& codes) {
    std::vector<std::string> out;
    for (const auto& c : codes) {
      const auto* e = lexicon.Find(c);
      out.push_back(e ? e->canonical_name : c);
    }
    return out;
  };
  std::vector<JudgeRequest> requests;
  for (const auto& p : preds) requests.push_back({p.patient_id, names(p.predictions), names(p.labels)});
  const auto outcomes = JudgeMany(JudgeClient(cfg.judge), requests);
  std::map<std::string, std::optional<int>> by_patient;
  for (const auto& o : outcomes) {
    by_patient[o.patient_id] = o.result ? std::optional<int>(o.result->number_of_direct_matches) : std::nullopt;
  }
  for (const auto& p : preds) counts.push_back(by_patient[p.patient_id]);
  return counts;
}

// ---------------------------------------------------------------------------
// Pipeline.

namespace {

class StageRunner {
 public:
  StageRunner(const RunConfig& cfg, const PipelineOptions& options)
      : cfg_(cfg), options_(options), dir_(cfg.work_dir), manifest_path_(dir_ / "manifest.json") {
    fs::create_directories(dir_);
    if (options.resume && fs::exists(manifest_path_)) {
      try {
        previous_ = RunManifest::FromJson(Json::parse(ReadFile(manifest_path_)));
      } catch (const std::exception& e) {
        Log(LogLevel::kWarn, "run", std::string("ignoring unreadable manifest: ") + e.what());
      }
    }
    manifest_.config_hash = ConfigHash(cfg);
    manifest_.started_at = NowIso();
  }

  fs::path Path(const std::string& name) const { return dir_ / name; }

  using StageFn = std::function<void(const std::map<std::string, fs::path>&)>;

  void Run(const std::string& name, const std::vector<fs::path>& inputs, const std::vector<std::string>& outputs,
           const StageFn& fn) {
    try {
      std::string fp_src = manifest_.config_hash + "|" + name;
      for (const auto& in : inputs) {
        if (!fs::exists(in)) throw DataError("input file '" + in.string() + "' does not exist");
        const auto digest = Sha256File(in);
        fp_src += "|" + digest;
        if (!in.string().starts_with(dir_.string())) manifest_.inputs[in.string()] = digest;
      }
      const std::string fingerprint = Sha256Hex(fp_src);
      if (const auto* prev = Previous(name); prev && prev->fingerprint == fingerprint && OutputsIntact(*prev)) {
        Log(LogLevel::kInfo, name, "up to date; skipped");
        manifest_.stages.push_back(*prev);
        Save();
        return;
      }
      StageRecord rec;
      rec.name = name;
      rec.fingerprint = fingerprint;
      rec.started_at = NowIso();
      Log(LogLevel::kInfo, name, "running");
      std::map<std::string, fs::path> partial;
      for (const auto& o : outputs) partial[o] = Path(o + ".partial");
      if (options_.fail_at_stage && *options_.fail_at_stage == name) {
        throw StageError("injected failure");
      }
      fn(partial);
      for (const auto& o : outputs) {
        fs::rename(partial[o], Path(o));
        rec.outputs[o] = Sha256File(Path(o));
      }
      rec.finished_at = NowIso();
      manifest_.stages.push_back(rec);
      manifest_.executed.push_back(name);
      Save();
    } catch (const std::exception& e) {
      Save();
      throw StageError("stage '" + name + "' failed: " + e.what());
    }
  }

  RunManifest Finish() {
    manifest_.finished_at = NowIso();
    Save();
    return manifest_;
  }

 private:
  const StageRecord* Previous(const std::string& name) const {
    if (!previous_) return nullptr;
    for (const auto& s : previous_->stages) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  bool OutputsIntact(const StageRecord& rec) const {
    for (const auto& [file, digest] : rec.outputs) {
      if (!fs::exists(Path(file)) || Sha256File(Path(file)) != digest) return false;
    }
    return true;
  }

  void Save() const { WriteFileAtomic(manifest_path_, manifest_.ToJson().dump(2) + "\n"); }

  const RunConfig& cfg_;
  const PipelineOptions& options_;
  fs::path dir_;
  fs::path manifest_path_;
  std::optional<RunManifest> previous_;
  RunManifest manifest_;
};

std::vector<PatientTimeline> SelectTimelines(const std::vector<PatientTimeline>& all, const Corpus& part) {
  std::set<std::string> ids;
  for (const auto& p : part.patients) ids.insert(p.patient_id);
  std::vector<PatientTimeline> out;
  for (const auto& t : all) {
    if (ids.count(t.patient_id)) out.push_back(t);
  }
  return out;
}

}  // namespace

namespace {

std::map<std::string, const PatientRecord*> RecordIndex(const Corpus& corpus) {
  std::map<std::string, const PatientRecord*> records;
  for (const auto& p : corpus.patients) records[p.patient_id] = &p;
  return records;
}

const PatientRecord& RecordOf(const std::map<std::string, const PatientRecord*>& records, const std::string& id) {
  auto it = records.find(id);
  if (it == records.end()) throw IntegrityError("no corpus record for patient '" + id + "'");
  return *it->second;
}

}  // namespace

std::vector<TrainingExample> Stage2Examples(const std::vector<RiskExample>& examples, const Corpus& corpus,
                                            const Vocabulary& vocab, const RenderOptions& render, int max_len) {
  const auto records = RecordIndex(corpus);
  std::vector<TrainingExample> out;
  for (const auto& e : examples) {
    const auto ids = HistoryIds(e.history, IndexDocuments(RecordOf(records, e.patient_id)), vocab, render);
    out.push_back(BuildStage2Example(ids, e.labels, vocab, max_len));
  }
  return out;
}

std::vector<RiskPrediction> PredictRisk(const Transformer& model, const Vocabulary& vocab,
                                        const std::vector<RiskExample>& examples, const Corpus& corpus,
                                        const RenderOptions& render) {
  const auto records = RecordIndex(corpus);
  std::vector<RiskPrediction> out;
  for (const auto& e : examples) {
    const auto ids = HistoryIds(e.history, IndexDocuments(RecordOf(records, e.patient_id)), vocab, render);
    std::set<std::string> history_codes;
    for (const auto* c : e.history.Concepts()) history_codes.insert(c->code());
    out.push_back({e.patient_id, PredictTopK(model, vocab, ids, history_codes, model.config().max_seq_len, 5),
                   e.labels});
  }
  return out;
}

RunManifest RunPipeline(const RunConfig& cfg_in, const PipelineOptions& options) {
  RunConfig cfg = cfg_in;
  ApplySecretEnv(cfg);
  if (auto v = ValidateConfig(cfg); !v.empty()) {
    std::string msg = "invalid config:";
    for (const auto& m : v) msg += "\n  " + m;
    throw ConfigError(msg);
  }
  StageRunner run(cfg, options);
  const RenderOptions render = RenderOf(cfg);
  const fs::path lexicon_path = cfg.corpus_source == "synthetic" ? run.Path("lexicon.jsonl") : fs::path(cfg.lexicon_path);

  // gen / ingest
  {
    std::vector<fs::path> inputs;
    if (cfg.corpus_source == "file") inputs.push_back(cfg.corpus_path);
    std::vector<std::string> outputs{"corpus.jsonl"};
    if (cfg.corpus_source == "synthetic") outputs.push_back("lexicon.jsonl");
    run.Run("corpus", inputs, outputs, [&](const auto& out) {
      if (cfg.corpus_source == "synthetic") {
        const auto syn = DefaultSyntheticConfig(static_cast<std::size_t>(cfg.n_patients), cfg.seed);
        WriteCorpus(GenerateSynthetic(syn), out.at("corpus.jsonl"));
        WriteLexicon(LexiconFromSynthetic(syn), out.at("lexicon.jsonl"));
      } else {
        WriteCorpus(LoadCorpus(cfg.corpus_path), out.at("corpus.jsonl"));
      }
    });
  }

  run.Run("annotate", {run.Path("corpus.jsonl"), lexicon_path}, {"mentions.jsonl"}, [&](const auto& out) {
    const auto lexicon = Lexicon::Build(LoadLexiconEntries(lexicon_path));
    const auto corpus = LoadCorpus(run.Path("corpus.jsonl"));
    WriteMentions(AnnotateCorpus(corpus, lexicon, cfg.context_tokens, cfg.jobs), out.at("mentions.jsonl"));
  });

  run.Run("timeline", {run.Path("corpus.jsonl"), run.Path("mentions.jsonl")},
          {"timelines_train.jsonl", "timelines_heldout.jsonl", "timelines_test.jsonl"}, [&](const auto& out) {
            const auto corpus = LoadCorpus(run.Path("corpus.jsonl"));
            const auto all =
                BuildTimelines(corpus, LoadMentions(run.Path("mentions.jsonl")), cfg.bucket_days, cfg.jobs);
            auto [train, test] = SplitPatients(corpus, cfg.test_fraction, cfg.seed);
            Corpus heldout;
            if (cfg.heldout_fraction > 0.0 && train.patients.size() >= 2) {
              auto [fit, held] = SplitPatients(train, cfg.heldout_fraction, cfg.seed + 1);
              train = std::move(fit);
              heldout = std::move(held);
            }
            WriteTimelines(SelectTimelines(all, train), out.at("timelines_train.jsonl"));
            WriteTimelines(SelectTimelines(all, heldout), out.at("timelines_heldout.jsonl"));
            WriteTimelines(SelectTimelines(all, test), out.at("timelines_test.jsonl"));
          });

  run.Run("reconstruct",
          {run.Path("corpus.jsonl"), run.Path("timelines_train.jsonl"), run.Path("timelines_heldout.jsonl")},
          {"notes_train.jsonl", "notes_heldout.jsonl"}, [&](const auto& out) {
            const auto corpus = LoadCorpus(run.Path("corpus.jsonl"));
            WriteNotes(RenderNotes(LoadTimelines(run.Path("timelines_train.jsonl")), corpus, render, cfg.jobs),
                       out.at("notes_train.jsonl"));
            WriteNotes(RenderNotes(LoadTimelines(run.Path("timelines_heldout.jsonl")), corpus, render, cfg.jobs),
                       out.at("notes_heldout.jsonl"));
          });

  run.Run("vocab", {run.Path("notes_train.jsonl"), lexicon_path}, {"vocab.txt"}, [&](const auto& out) {
    WriteVocabulary(BuildVocabulary(LoadNotes(run.Path("notes_train.jsonl")), LoadLexiconEntries(lexicon_path),
                                    cfg.min_freq),
                    out.at("vocab.txt"));
  });

  run.Run("train", {run.Path("notes_train.jsonl"), run.Path("notes_heldout.jsonl"), run.Path("vocab.txt")},
          {"model.ckpt", "train_log.jsonl"}, [&](const auto& out) {
            const auto vocab = LoadVocabulary(run.Path("vocab.txt"));
            auto trained = TrainOnNotes(LoadNotes(run.Path("notes_train.jsonl")),
                                        LoadNotes(run.Path("notes_heldout.jsonl")), vocab, cfg.model,
                                        cfg.optimizer, cfg.label_mode, cfg.concept_init, cfg.seed);
            SaveCheckpoint(trained.checkpoint, out.at("model.ckpt"));
            RecordWriter log(out.at("train_log.jsonl"), {"train_log", 1});
            for (std::size_t i = 0; i < trained.result.step_losses.size(); ++i) {
              log.Write({{"step", i}, {"loss", trained.result.step_losses[i]}});
            }
            for (std::size_t i = 0; i < trained.result.heldout_losses.size(); ++i) {
              log.Write({{"epoch", i + 1}, {"heldout_loss", trained.result.heldout_losses[i]}});
            }
            log.Close();
          });

  run.Run("eval", {run.Path("corpus.jsonl"), run.Path("timelines_test.jsonl"), run.Path("model.ckpt"), lexicon_path},
          {"eval_report.tsv", "eval_run.json", "per_concept_disorder.tsv"}, [&](const auto& out) {
            const auto ckpt = LoadCheckpoint(run.Path("model.ckpt"));
            const auto model = ModelFromCheckpoint(ckpt);
            const auto corpus = LoadCorpus(run.Path("corpus.jsonl"));
            const auto lexicon = Lexicon::Build(LoadLexiconEntries(lexicon_path));
            const auto catalog = CatalogFromLexicon(lexicon);
            const ModelPredictor predictor(model, ckpt.vocab, corpus, render);
            const auto scored = ScoreTimelines(predictor, LoadTimelines(run.Path("timelines_test.jsonl")), catalog,
                                               cfg.jobs);
            const auto grid = GridOf(cfg);
            const auto rows = ComputeMetrics(scored, catalog, grid);
            WriteFileAtomic(out.at("eval_report.tsv"), MetricsToTsv(rows));
            Json run_json{{"config_hash", ConfigHash(cfg)},
                          {"seed", cfg.seed},
                          {"checkpoint_sha256", Sha256File(run.Path("model.ckpt"))},
                          {"test_patients", scored.size()},
                          {"rows", MetricsToJson(rows)}};
            if (!cfg.target_code.empty()) {
              MetricsOptions mo;
              mo.gold_code = cfg.target_code;
              run_json["target"] = {{"code", cfg.target_code}, {"rows", MetricsToJson(ComputeMetrics(scored, catalog, grid, mo))}};
            }
            WriteFileAtomic(out.at("eval_run.json"), run_json.dump(2) + "\n");
            WriteFileAtomic(out.at("per_concept_disorder.tsv"),
                            PerConceptToTsv(PerConceptReport(scored, catalog, ConceptType::kDisorder), &lexicon));
          });

  if (cfg.risk_enabled) {
    run.Run("risk",
            {run.Path("corpus.jsonl"), run.Path("timelines_train.jsonl"), run.Path("timelines_heldout.jsonl"),
             run.Path("timelines_test.jsonl"), run.Path("model.ckpt"), lexicon_path},
            {"risk_train.jsonl", "risk_test.jsonl", "risk_model.ckpt", "risk_predictions.jsonl", "risk_report.tsv"},
            [&](const auto& out) {
              const auto ckpt = LoadCheckpoint(run.Path("model.ckpt"));
              const auto corpus = LoadCorpus(run.Path("corpus.jsonl"));
              const auto lexicon = Lexicon::Build(LoadLexiconEntries(lexicon_path));
              const auto catalog = CatalogFromLexicon(lexicon);
              auto train_tl = LoadTimelines(run.Path("timelines_train.jsonl"));
              for (auto& t : LoadTimelines(run.Path("timelines_heldout.jsonl"))) train_tl.push_back(std::move(t));
              const auto risk_train = BuildRiskDataset(train_tl, catalog, cfg.risk, nullptr, cfg.jobs);
              const auto risk_test =
                  BuildRiskDataset(LoadTimelines(run.Path("timelines_test.jsonl")), catalog, cfg.risk, nullptr, cfg.jobs);
              WriteRiskExamples(risk_train, out.at("risk_train.jsonl"));
              WriteRiskExamples(risk_test, out.at("risk_test.jsonl"));

              Checkpoint stage2 = ckpt;
              if (!risk_train.empty()) {
                const auto examples = Stage2Examples(risk_train, corpus, ckpt.vocab, render, ckpt.model.max_seq_len);
                stage2 = FinetuneStage2(ckpt, ckpt.vocab, examples, cfg.risk_epochs, cfg.seed);
              } else {
                Log(LogLevel::kWarn, "risk", "no training patients pass the risk filter; stage-2 skipped");
              }
              SaveCheckpoint(stage2, out.at("risk_model.ckpt"));
              const auto model = ModelFromCheckpoint(stage2);
              const auto preds = PredictRisk(model, stage2.vocab, risk_test, corpus, render);
              WriteRiskPredictions(preds, out.at("risk_predictions.jsonl"));
              const auto report = AggregateRisk("stage2", ScoreRiskPredictions(preds, cfg, lexicon));
              WriteFileAtomic(out.at("risk_report.tsv"), RiskReportToTsv({report}));
            });
  }
  return run.Finish();
}

}  // namespace ctl
