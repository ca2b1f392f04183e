#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "ctl/pipeline.hpp"

using namespace ctl;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> set;
  int jobs = 0;
  std::string log_level = "info";
};

RunConfig LoadConfig(const Options& o) {
  std::map<std::string, std::string> kv;
  if (!o.config.empty()) kv = ReadConfigFile(o.config);
  for (const auto& s : o.set) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  RunConfig cfg = RunConfigFromMap(kv);
  if (o.jobs > 0) cfg.jobs = o.jobs;
  ApplySecretEnv(cfg);
  if (auto v = ValidateConfig(cfg); !v.empty()) {
    std::string msg = "invalid config:";
    for (const auto& m : v) msg += "\n  " + m;
    throw ConfigError(msg);
  }
  return cfg;
}

void WriteOut(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    WriteFileAtomic(path, text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept timeline modelling toolkit"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "key=value config file");
  app.add_option("--set", o.set, "override a config key (key=value)");
  app.add_option("--jobs", o.jobs, "worker cap");
  app.add_option("--log-level", o.log_level, "debug|info|warn|error");
  std::function<void()> action;

  // corpus
  auto* corpus = app.add_subcommand("corpus", "synthetic corpus generation and patient split");
  corpus->require_subcommand(1);
  std::string gen_out, gen_lexicon;
  auto* gen = corpus->add_subcommand("gen", "generate a synthetic corpus");
  gen->add_option("--out", gen_out, "corpus file")->required();
  gen->add_option("--lexicon-out", gen_lexicon, "matching lexicon file");
  gen->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto syn = DefaultSyntheticConfig(static_cast<std::size_t>(cfg.n_patients), cfg.seed);
      WriteCorpus(GenerateSynthetic(syn), gen_out);
      if (!gen_lexicon.empty()) WriteLexicon(LexiconFromSynthetic(syn), gen_lexicon);
    };
  });
  std::string split_in, split_train, split_test;
  double split_frac = 0.05;
  std::uint64_t split_seed = 7;
  auto* split = corpus->add_subcommand("split", "split patients into train and test");
  split->add_option("--corpus", split_in)->required();
  split->add_option("--test-frac", split_frac);
  split->add_option("--seed", split_seed);
  split->add_option("--train-out", split_train)->required();
  split->add_option("--test-out", split_test)->required();
  split->callback([&] {
    action = [&] {
      const auto [train, test] = SplitPatients(LoadCorpus(split_in), split_frac, split_seed);
      WriteCorpus(train, split_train);
      WriteCorpus(test, split_test);
    };
  });

  // annotate
  std::string ann_corpus, ann_lexicon, ann_out;
  auto* annotate = app.add_subcommand("annotate", "dictionary concept annotation");
  annotate->add_option("--corpus", ann_corpus)->required();
  annotate->add_option("--lexicon", ann_lexicon)->required();
  annotate->add_option("--out", ann_out)->required();
  annotate->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto lexicon = Lexicon::Build(LoadLexiconEntries(ann_lexicon));
      WriteMentions(AnnotateCorpus(LoadCorpus(ann_corpus), lexicon, cfg.context_tokens, cfg.jobs), ann_out);
    };
  });

  // timeline
  std::string tl_mentions, tl_corpus, tl_out;
  auto* timeline = app.add_subcommand("timeline", "patient timelines");
  timeline->require_subcommand(1);
  auto* build = timeline->add_subcommand("build", "bucket mentions into timelines");
  build->add_option("--mentions", tl_mentions)->required();
  build->add_option("--corpus", tl_corpus)->required();
  build->add_option("--out", tl_out)->required();
  build->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      WriteTimelines(BuildTimelines(LoadCorpus(tl_corpus), LoadMentions(tl_mentions), cfg.bucket_days, cfg.jobs),
                     tl_out);
    };
  });

  // reconstruct
  std::string rc_timelines, rc_corpus, rc_out;
  bool rc_flat = false;
  auto* reconstruct = app.add_subcommand("reconstruct", "render one note per patient");
  reconstruct->add_option("--timelines", rc_timelines)->required();
  reconstruct->add_option("--corpus", rc_corpus)->required();
  reconstruct->add_option("--out", rc_out)->required();
  reconstruct->add_flag("--flat", rc_flat, "human-readable text with [[code]] markers");
  reconstruct->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto notes = RenderNotes(LoadTimelines(rc_timelines), LoadCorpus(rc_corpus), RenderOf(cfg), cfg.jobs);
      if (!rc_flat) {
        WriteNotes(notes, rc_out);
        return;
      }
      std::string text;
      for (const auto& n : notes) text += n.patient_id + "\t" + FlattenNote(n) + "\n";
      WriteOut(rc_out, text);
    };
  });

  // vocab
  std::string vc_notes, vc_lexicon, vc_out;
  auto* vocab = app.add_subcommand("vocab", "build the token vocabulary");
  vocab->add_option("--notes", vc_notes)->required();
  vocab->add_option("--lexicon", vc_lexicon)->required();
  vocab->add_option("--out", vc_out)->required();
  vocab->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      WriteVocabulary(BuildVocabulary(LoadNotes(vc_notes), LoadLexiconEntries(vc_lexicon), cfg.min_freq), vc_out);
    };
  });

  // train
  std::string tr_data, tr_heldout, tr_vocab, tr_out;
  bool tr_full_lm = false;
  auto* train = app.add_subcommand("train", "train the next-concept model");
  train->add_option("--data", tr_data, "training notes")->required();
  train->add_option("--heldout", tr_heldout, "held-out notes for early stopping");
  train->add_option("--vocab", tr_vocab)->required();
  train->add_option("--out", tr_out, "checkpoint")->required();
  train->add_flag("--ablate-full-lm", tr_full_lm, "supervise every token instead of concepts only");
  train->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      std::vector<ReconstructedNote> heldout;
      if (!tr_heldout.empty()) heldout = LoadNotes(tr_heldout);
      const auto trained =
          TrainOnNotes(LoadNotes(tr_data), heldout, LoadVocabulary(tr_vocab), cfg.model, cfg.optimizer,
                       tr_full_lm ? LabelMode::kFullLm : cfg.label_mode, cfg.concept_init, cfg.seed);
      SaveCheckpoint(trained.checkpoint, tr_out);
      Log(LogLevel::kInfo, "train",
          "steps=" + std::to_string(trained.result.steps) + " epochs=" + std::to_string(trained.result.epochs_run));
    };
  });

  // eval
  std::string ev_ckpt, ev_timelines, ev_corpus, ev_lexicon, ev_out, ev_run, ev_grid = "default";
  auto* eval = app.add_subcommand("eval", "next-concept precision and recall");
  eval->add_option("--ckpt", ev_ckpt)->required();
  eval->add_option("--timelines", ev_timelines)->required();
  eval->add_option("--corpus", ev_corpus)->required();
  eval->add_option("--lexicon", ev_lexicon)->required();
  eval->add_option("--grid", ev_grid, "default uses the configured T and N grids");
  eval->add_option("--out", ev_out, "report table")->required();
  eval->add_option("--run-out", ev_run, "machine-readable run file");
  eval->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      if (ev_grid != "default") throw ConfigError("eval: unknown grid '" + ev_grid + "'");
      const auto ckpt = LoadCheckpoint(ev_ckpt);
      const auto model = ModelFromCheckpoint(ckpt);
      const auto corpus_data = LoadCorpus(ev_corpus);
      const auto lexicon = Lexicon::Build(LoadLexiconEntries(ev_lexicon));
      const auto catalog = CatalogFromLexicon(lexicon);
      const ModelPredictor predictor(model, ckpt.vocab, corpus_data, RenderOf(cfg));
      const auto scored = ScoreTimelines(predictor, LoadTimelines(ev_timelines), catalog, cfg.jobs);
      const auto rows = ComputeMetrics(scored, catalog, GridOf(cfg));
      WriteOut(ev_out, MetricsToTsv(rows));
      if (!ev_run.empty()) {
        Json run{{"config_hash", ConfigHash(cfg)},
                 {"seed", cfg.seed},
                 {"checkpoint_sha256", Sha256File(ev_ckpt)},
                 {"test_patients", scored.size()},
                 {"rows", MetricsToJson(rows)}};
        WriteFileAtomic(ev_run, run.dump(2) + "\n");
      }
    };
  });

  // risk
  auto* risk = app.add_subcommand("risk", "30-day disorder risk forecasting");
  risk->require_subcommand(1);
  std::string rb_timelines, rb_lexicon, rb_out;
  auto* rbuild = risk->add_subcommand("build", "select patients and split history from labels");
  rbuild->add_option("--timelines", rb_timelines)->required();
  rbuild->add_option("--lexicon", rb_lexicon)->required();
  rbuild->add_option("--out", rb_out)->required();
  rbuild->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto catalog = CatalogFromLexicon(Lexicon::Build(LoadLexiconEntries(rb_lexicon)));
      std::vector<RiskExclusion> excluded;
      const auto examples = BuildRiskDataset(LoadTimelines(rb_timelines), catalog, cfg.risk, &excluded, cfg.jobs);
      WriteRiskExamples(examples, rb_out);
      Log(LogLevel::kInfo, "risk",
          "included=" + std::to_string(examples.size()) + " excluded=" + std::to_string(excluded.size()));
    };
  });
  std::string rt_ckpt, rt_examples, rt_corpus, rt_out;
  auto* rtrain = risk->add_subcommand("train", "second-stage fine-tuning on risk examples");
  rtrain->add_option("--ckpt", rt_ckpt)->required();
  rtrain->add_option("--examples", rt_examples)->required();
  rtrain->add_option("--corpus", rt_corpus)->required();
  rtrain->add_option("--out", rt_out)->required();
  rtrain->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto ckpt = LoadCheckpoint(rt_ckpt);
      const auto examples =
          Stage2Examples(LoadRiskExamples(rt_examples), LoadCorpus(rt_corpus), ckpt.vocab, RenderOf(cfg),
                         ckpt.model.max_seq_len);
      SaveCheckpoint(FinetuneStage2(ckpt, ckpt.vocab, examples, cfg.risk_epochs, cfg.seed), rt_out);
    };
  });
  std::string rp_ckpt, rp_examples, rp_corpus, rp_out;
  auto* rpredict = risk->add_subcommand("predict", "top-5 new disorders per patient");
  rpredict->add_option("--ckpt", rp_ckpt)->required();
  rpredict->add_option("--examples", rp_examples)->required();
  rpredict->add_option("--corpus", rp_corpus)->required();
  rpredict->add_option("--out", rp_out)->required();
  rpredict->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto ckpt = LoadCheckpoint(rp_ckpt);
      const auto model = ModelFromCheckpoint(ckpt);
      WriteRiskPredictions(
          PredictRisk(model, ckpt.vocab, LoadRiskExamples(rp_examples), LoadCorpus(rp_corpus), RenderOf(cfg)),
          rp_out);
    };
  });
  std::string rs_preds, rs_lexicon, rs_oracle, rs_table, rs_out, rs_name = "model";
  auto* rscore = risk->add_subcommand("score", "count matches and report at-least-N percentages");
  rscore->add_option("--predictions", rs_preds)->required();
  rscore->add_option("--lexicon", rs_lexicon, "names for the judge");
  rscore->add_option("--oracle", rs_oracle)->check(CLI::IsMember({"exact", "table", "llm"}));
  rscore->add_option("--table", rs_table, "equivalence table for --oracle table");
  rscore->add_option("--name", rs_name, "model column in the report");
  rscore->add_option("--out", rs_out)->required();
  rscore->callback([&] {
    action = [&] {
      auto cfg_opts = o;
      if (!rs_oracle.empty()) cfg_opts.set.push_back("risk.oracle=" + rs_oracle);
      if (!rs_table.empty()) cfg_opts.set.push_back("risk.equivalence_table=" + rs_table);
      const auto cfg = LoadConfig(cfg_opts);
      const auto lexicon = Lexicon::Build(rs_lexicon.empty() ? std::vector<ConceptEntry>{}
                                                             : LoadLexiconEntries(rs_lexicon));
      const auto counts = ScoreRiskPredictions(LoadRiskPredictions(rs_preds), cfg, lexicon);
      WriteOut(rs_out, RiskReportToTsv({AggregateRisk(rs_name, counts)}));
    };
  });
  std::string rq_examples, rq_corpus, rq_lexicon, rq_format, rq_out;
  auto* rprompt = risk->add_subcommand("prompt", "baseline prompts for external models");
  rprompt->add_option("--examples", rq_examples)->required();
  rprompt->add_option("--corpus", rq_corpus)->required();
  rprompt->add_option("--lexicon", rq_lexicon)->required();
  rprompt->add_option("--format", rq_format)->required()->check(
      CLI::IsMember({"gpt4", "biomistral", "medalpaca", "meditron"}));
  rprompt->add_option("--out", rq_out, "JSON lines, one prompt per patient");
  rprompt->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      const auto format = ParsePromptFormat(rq_format);
      const auto corpus_data = LoadCorpus(rq_corpus);
      const auto lexicon = Lexicon::Build(LoadLexiconEntries(rq_lexicon));
      std::map<std::string, const PatientRecord*> records;
      for (const auto& p : corpus_data.patients) records[p.patient_id] = &p;
      std::string text;
      for (const auto& e : LoadRiskExamples(rq_examples)) {
        auto it = records.find(e.patient_id);
        if (it == records.end()) throw IntegrityError("no corpus record for patient '" + e.patient_id + "'");
        const auto note = RenderNote(e.history, IndexDocuments(*it->second), RenderOf(cfg));
        const auto prompt = RenderBaselinePrompt(RenderWithNames(note, lexicon), format);
        text += Json{{"patient_id", e.patient_id}, {"system", prompt.system}, {"user", prompt.user}}.dump() + "\n";
      }
      WriteOut(rq_out, text);
    };
  });

  // run
  bool no_resume = false;
  auto* run = app.add_subcommand("run", "execute every stage with resumable outputs");
  run->add_flag("--no-resume", no_resume, "re-run stages even when outputs are current");
  run->callback([&] {
    action = [&] {
      const auto cfg = LoadConfig(o);
      PipelineOptions opts;
      opts.resume = !no_resume;
      const auto manifest = RunPipeline(cfg, opts);
      Log(LogLevel::kInfo, "run", "manifest " + (fs::path(cfg.work_dir) / "manifest.json").string());
      (void)manifest;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (o.log_level == "debug") SetLogLevel(LogLevel::kDebug);
    else if (o.log_level == "info") SetLogLevel(LogLevel::kInfo);
    else if (o.log_level == "warn") SetLogLevel(LogLevel::kWarn);
    else if (o.log_level == "error") SetLogLevel(LogLevel::kError);
    else throw ConfigError("unknown log level '" + o.log_level + "'");
    if (action) action();
    return 0;
  } catch (const ConfigError& e) {
    Log(LogLevel::kError, "cli", e.what());
    return 2;
  } catch (const DataError& e) {
    Log(LogLevel::kError, "cli", e.what());
    return 3;
  } catch (const StageError& e) {
    Log(LogLevel::kError, "cli", e.what());
    return 4;
  } catch (const std::exception& e) {
    Log(LogLevel::kError, "cli", e.what());
    return 4;
  }
}
