#include "calibrag/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "calibrag/config.hpp"
#include "calibrag/corpus_index.hpp"
#include "calibrag/datagen.hpp"
#include "calibrag/errors.hpp"
#include "calibrag/forecaster.hpp"
#include "calibrag/metrics.hpp"
#include "calibrag/pipeline.hpp"
#include "calibrag/trainer.hpp"
#include "json.hpp"

namespace calibrag::cli {

namespace fs = std::filesystem;

namespace {

using Path = std::optional<fs::path>;

// Flag value wins when the flag was given; otherwise the config value stays.
template <typename T, typename U>
void take(const CLI::Option* opt, const T& flag, U& target) {
  if (opt->count() > 0) target = flag;
}

fs::path need(const Path& p, const char* what) {
  if (!p) throw ConfigurationError(std::string("no ") + what + " path given");
  return *p;
}

fs::path need_input(const Path& p, const char* what) {
  auto path = need(p, what);
  if (!fs::exists(path)) throw std::runtime_error(std::string(what) + " not found: " + path.string());
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::shared_ptr<MockResponder> mock_responder(const RunConfig& cfg) {
  auto mock = std::make_shared<MockResponder>();
  for (const auto& [_, section] : cfg.endpoints)
    if (section.mock_script) mock->load_script(*section.mock_script);
  return mock;
}

std::unique_ptr<Gateway> make_gateway(const RunConfig& cfg, bool force_mock, std::uint64_t seed) {
  std::shared_ptr<AuditLog> audit;
  if (cfg.paths.audit_log) audit = std::make_shared<AuditLog>(*cfg.paths.audit_log);
  if (force_mock) return std::make_unique<Gateway>(Gateway::mock_endpoints(), mock_responder(cfg), audit);
  if (!cfg.endpoints.count(Role::generator) || !cfg.endpoints.count(Role::user))
    throw ConfigurationError("generator and user endpoints must be configured (or pass --mock)");
  std::vector<EndpointConfig> eps;
  for (const auto& [_, section] : cfg.endpoints) eps.push_back(section.endpoint);
  GatewayOptions options;
  options.unparseable_grade_is_incorrect = cfg.unparseable_grade_is_incorrect;
  options.retry.jitter_seed = derive_seed(seed, "gateway/jitter");
  return std::make_unique<Gateway>(std::move(eps), mock_responder(cfg), audit, options);
}

struct Common {
  Path config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config, "TOML run configuration");
    seed_opt = app->add_option("--seed", seed, "Global seed");
  }

  RunConfig load() const {
    RunConfig cfg;
    if (config) cfg = load_run_config(need_input(config, "config"));
    if (seed_opt->count() > 0) {
      cfg.seed = seed;
      cfg.train.seed = seed;
      cfg.datagen.seed = seed;
    }
    return cfg;
  }
};

// ---- index ----

struct IndexCmd {
  Common common;
  Path corpus, out;
  CLI::Option *corpus_opt, *out_opt;

  explicit IndexCmd(CLI::App& root) {
    auto* app = root.add_subcommand("index", "Build the BM25 index from a corpus JSONL file");
    common.add(app);
    corpus_opt = app->add_option("--corpus", corpus, "Corpus JSONL: {\"id\",\"title\",\"text\"} per line");
    out_opt = app->add_option("--out", out, "Index file to write");
  }

  void run(std::ostream& out_stream) {
    auto cfg = common.load();
    take(corpus_opt, corpus, cfg.paths.corpus);
    take(out_opt, out, cfg.paths.index);
    const auto docs = read_corpus_jsonl(need_input(cfg.paths.corpus, "corpus"));
    const auto index = InvertedIndex::build(docs);
    index.save(need(cfg.paths.index, "index output"));
    out_stream << "indexed " << index.doc_count() << " documents, " << index.vocabulary_size() << " terms\n";
  }
};

// ---- datagen ----

struct DatagenCmd {
  Common common;
  std::string mode = "synthetic";
  Path tasks, index, out;
  int k = kDefaultSupervisionK;
  int r = kDefaultSamplesPerPair;
  double alpha = 8.0;
  double tau = 0.0;
  double t_min = 1.0, t_max = 2.0;
  int threads = 1;
  bool per_doc_t = false;
  bool mock = false;
  Path audit_log;
  CLI::Option *audit_opt;
  CLI::Option *tasks_opt, *index_opt, *out_opt, *k_opt, *r_opt, *alpha_opt, *tau_opt, *tmin_opt, *tmax_opt,
      *threads_opt, *per_doc_opt;

  explicit DatagenCmd(CLI::App& root) {
    auto* app = root.add_subcommand("datagen", "Generate (t, query, doc, label) supervision records");
    common.add(app);
    app->add_option("--mode", mode, "synthetic (surrogate user) or live (model endpoints)")
        ->check(CLI::IsMember({"synthetic", "live"}))
        ->capture_default_str();
    tasks_opt = app->add_option("--tasks", tasks, "Tasks JSONL: {\"id\",\"question\",\"answer\",\"query\"?}");
    index_opt = app->add_option("--index", index, "Index file");
    out_opt = app->add_option("--out", out, "Dataset JSONL to write");
    k_opt = app->add_option("--k", k, "Documents retrieved per task")->capture_default_str();
    r_opt = app->add_option("--r", r, "Sampled decisions per (t, query, doc)")->capture_default_str();
    alpha_opt = app->add_option("--alpha", alpha, "Surrogate user slope")->capture_default_str();
    tau_opt = app->add_option("--tau", tau, "Surrogate user threshold (default: median relevance)");
    tmin_opt = app->add_option("--t-min", t_min, "Lowest user temperature")->capture_default_str();
    tmax_opt = app->add_option("--t-max", t_max, "Highest user temperature")->capture_default_str();
    threads_opt = app->add_option("--threads", threads, "Worker threads")->capture_default_str();
    per_doc_opt = app->add_flag("--per-document-t", per_doc_t, "Draw t per document instead of per query");
    app->add_flag("--mock", mock, "Live mode: answer every role with the offline mock");
    audit_opt = app->add_option("--audit-log", audit_log, "Append every model exchange to this JSONL file");
  }

  void run(std::ostream& out_stream) {
    auto cfg = common.load();
    take(tasks_opt, tasks, cfg.paths.tasks);
    take(index_opt, index, cfg.paths.index);
    take(out_opt, out, cfg.paths.dataset);
    take(k_opt, k, cfg.datagen.k);
    take(r_opt, r, cfg.datagen.r);
    take(threads_opt, threads, cfg.datagen.threads);
    take(per_doc_opt, per_doc_t, cfg.datagen.per_document_temperature);
    take(alpha_opt, alpha, cfg.surrogate.alpha);
    if (tau_opt->count() > 0) cfg.surrogate.tau = tau;
    take(tmin_opt, t_min, cfg.surrogate.temperature.lo);
    take(tmax_opt, t_max, cfg.surrogate.temperature.hi);
    take(audit_opt, audit_log, cfg.paths.audit_log);

    const auto task_list = read_tasks_jsonl(need_input(cfg.paths.tasks, "tasks"));
    const auto idx = InvertedIndex::load(need_input(cfg.paths.index, "index"));
    const auto out_path = need(cfg.paths.dataset, "dataset output");

    Dataset data;
    if (mode == "synthetic") {
      data = build_dataset(task_list, idx, cfg.surrogate, cfg.datagen);
    } else {
      auto gateway = make_gateway(cfg, mock, cfg.seed);
      data = live_generate(task_list, idx, *gateway, cfg.datagen, cfg.surrogate.temperature);
    }
    write_dataset_jsonl(out_path, data.records);

    std::ostringstream settings;
    settings << mode << '|' << cfg.datagen.k << '|' << cfg.datagen.r << '|' << cfg.datagen.per_document_temperature
             << '|' << cfg.surrogate.alpha << '|' << (cfg.surrogate.tau ? std::to_string(*cfg.surrogate.tau) : "median")
             << '|' << cfg.surrogate.temperature.lo << '|' << cfg.surrogate.temperature.hi;
    nlohmann::ordered_json manifest = {{"seed", cfg.datagen.seed},
                                       {"mode", mode},
                                       {"config_hash", hex64(fnv1a64(settings.str()))},
                                       {"corpus_hash", hex64(idx.corpus_hash())},
                                       {"records", data.records.size()},
                                       {"tau", data.tau}};
    nlohmann::ordered_json failures = nlohmann::ordered_json::array();
    for (const auto& f : data.failures)
      failures.push_back({{"task_id", f.task_id}, {"doc_id", f.doc_id}, {"stage", f.stage}, {"error", f.error}});
    manifest["failures"] = failures;
    write_text(fs::path(out_path.string() + ".manifest.json"), manifest.dump(2) + "\n");

    for (const auto& w : data.warnings) out_stream << "warning: " << w.task_id << ": " << w.message << '\n';
    out_stream << "wrote " << data.records.size() << " records";
    if (!data.failures.empty()) out_stream << " (" << data.failures.size() << " failures)";
    out_stream << '\n';
  }
};

// ---- train ----

struct TrainCmd {
  Common common;
  Path data, index, out;
  bool multi = false;
  double lr = 1e-4;
  int batch = 4;
  long steps = 10000;
  long warmup = 500;
  double wd = 0.01;
  double clip = 1.0;
  int fourier_n = 6;
  int h = 256;
  CLI::Option *data_opt, *index_opt, *out_opt, *multi_opt, *lr_opt, *batch_opt, *steps_opt, *warmup_opt, *wd_opt,
      *clip_opt, *n_opt, *h_opt;

  explicit TrainCmd(CLI::App& root) {
    auto* app = root.add_subcommand("train", "Train the confidence forecaster");
    common.add(app);
    data_opt = app->add_option("--data", data, "Dataset JSONL from datagen");
    index_opt = app->add_option("--index", index, "Index file (default: [paths].index from the config)");
    out_opt = app->add_option("--out", out, "Model JSON to write");
    multi_opt = app->add_flag("--multi", multi, "Train the 11-bin histogram head");
    lr_opt = app->add_option("--lr", lr, "Learning rate")->capture_default_str();
    batch_opt = app->add_option("--batch-size", batch, "Batch size")->capture_default_str();
    steps_opt = app->add_option("--max-steps", steps, "Optimizer steps")->capture_default_str();
    warmup_opt = app->add_option("--warmup-steps", warmup, "Linear warmup steps")->capture_default_str();
    wd_opt = app->add_option("--weight-decay", wd, "Decoupled weight decay")->capture_default_str();
    clip_opt = app->add_option("--grad-clip", clip, "Global gradient norm limit")->capture_default_str();
    n_opt = app->add_option("--fourier-n", fourier_n, "Temperature encoding frequencies")->capture_default_str();
    h_opt = app->add_option("--dim", h, "Feature dimension of the hashed extractor")->capture_default_str();
  }

  void run(std::ostream& out_stream) {
    auto cfg = common.load();
    take(data_opt, data, cfg.paths.dataset);
    take(index_opt, index, cfg.paths.index);
    take(out_opt, out, cfg.paths.model);
    if (multi_opt->count() > 0 && multi) cfg.train.head = HeadKind::multi;
    take(lr_opt, lr, cfg.train.learning_rate);
    take(batch_opt, batch, cfg.train.batch_size);
    take(steps_opt, steps, cfg.train.max_steps);
    take(warmup_opt, warmup, cfg.train.warmup_steps);
    take(wd_opt, wd, cfg.train.weight_decay);
    take(clip_opt, clip, cfg.train.grad_clip);
    take(n_opt, fourier_n, cfg.train.fourier.n);
    take(h_opt, h, cfg.extractor.h);
    cfg.train.validate();

    const auto records = read_dataset_jsonl(need_input(cfg.paths.dataset, "dataset"));
    const auto idx = InvertedIndex::load(need_input(cfg.paths.index, "index"));
    const auto model_path = need(cfg.paths.model, "model output");
    const auto extractor = make_extractor(cfg.extractor);
    const auto set = assemble_training_set(records, idx, *extractor);
    const auto result = train(set, cfg.train);
    save_model(model_path, result.params);
    save_train_report(fs::path(model_path.string() + ".report.json"), result.report);
    out_stream << "trained " << result.report.steps_run << " steps, final loss " << result.report.final_loss
               << '\n';
  }
};

// ---- infer ----

struct InferCmd {
  Common common;
  Path tasks, index, model, out, traces;
  int k = 20;
  double epsilon = 0.5;
  std::vector<double> temps = kDefaultTemperatures;
  double user_t = 1.0;
  bool no_reformulate = false;
  int max_reformulations = 1;
  int concurrency = 1;
  bool mock = false;
  Path audit_log;
  CLI::Option *audit_opt;
  CLI::Option *tasks_opt, *index_opt, *model_opt, *out_opt, *traces_opt, *k_opt, *eps_opt, *temps_opt, *user_t_opt,
      *no_ref_opt, *max_ref_opt, *conc_opt;

  explicit InferCmd(CLI::App& root) {
    auto* app = root.add_subcommand("infer", "Retrieve, rerank by forecast confidence, and decide");
    common.add(app);
    tasks_opt = app->add_option("--tasks", tasks, "Tasks JSONL");
    index_opt = app->add_option("--index", index, "Index file");
    model_opt = app->add_option("--model", model, "Model JSON from train");
    out_opt = app->add_option("--out", out, "Predictions JSONL to write");
    traces_opt = app->add_option("--traces", traces, "Decision traces JSONL to write");
    k_opt = app->add_option("--k", k, "Documents retrieved per query")->capture_default_str();
    eps_opt = app->add_option("--epsilon", epsilon, "Confidence below which the query is reformulated")
                  ->capture_default_str();
    temps_opt = app->add_option("--temps", temps, "Temperatures averaged over when --user-t is absent")
                    ->delimiter(',')
                    ->capture_default_str();
    user_t_opt = app->add_option("--user-t", user_t, "Known user temperature");
    temps_opt->excludes(user_t_opt);
    no_ref_opt = app->add_flag("--no-reformulate", no_reformulate, "Never reformulate the query");
    max_ref_opt =
        app->add_option("--max-reformulations", max_reformulations, "Reformulation budget")->capture_default_str();
    conc_opt = app->add_option("--concurrency", concurrency, "Tasks processed in parallel")->capture_default_str();
    app->add_flag("--mock", mock, "Answer every role with the offline mock");
    audit_opt = app->add_option("--audit-log", audit_log, "Append every model exchange to this JSONL file");
  }

  void run(std::ostream& out_stream) {
    auto cfg = common.load();
    take(tasks_opt, tasks, cfg.paths.tasks);
    take(index_opt, index, cfg.paths.index);
    take(model_opt, model, cfg.paths.model);
    take(out_opt, out, cfg.paths.predictions);
    take(traces_opt, traces, cfg.paths.traces);
    take(k_opt, k, cfg.pipeline.k);
    take(eps_opt, epsilon, cfg.pipeline.epsilon);
    take(temps_opt, temps, cfg.pipeline.temps);
    if (user_t_opt->count() > 0) cfg.pipeline.user_t = user_t;
    if (no_ref_opt->count() > 0 && no_reformulate) cfg.pipeline.reformulate = false;
    take(max_ref_opt, max_reformulations, cfg.pipeline.max_reformulations);
    take(conc_opt, concurrency, cfg.pipeline.concurrency);
    take(audit_opt, audit_log, cfg.paths.audit_log);
    cfg.pipeline.validate();

    const auto task_list = read_tasks_jsonl(need_input(cfg.paths.tasks, "tasks"));
    const auto idx = InvertedIndex::load(need_input(cfg.paths.index, "index"));
    const auto params = load_model(need_input(cfg.paths.model, "model"));
    const auto out_path = need(cfg.paths.predictions, "predictions output");

    auto ex_cfg = cfg.extractor;
    if (ex_cfg.mode == ExtractorMode::hashed && !common.config) ex_cfg.h = params.h();
    if (ex_cfg.h != params.h())
      throw ConfigurationError("extractor dimension " + std::to_string(ex_cfg.h) + " does not match model h " +
                               std::to_string(params.h()));
    const auto extractor = make_extractor(ex_cfg);
    auto gateway = make_gateway(cfg, mock, cfg.seed);

    const auto result = batch_run(task_list, idx, params, *extractor, *gateway, cfg.pipeline);
    write_predictions_jsonl(out_path, result.traces);
    if (cfg.paths.traces) write_traces_jsonl(*cfg.paths.traces, result.traces);
    write_task_errors_jsonl(fs::path(out_path.string() + ".errors.jsonl"), result.errors);

    long reformulations = 0;
    for (const auto& t : result.traces) reformulations += t.reformulations;
    out_stream << "processed " << result.traces.size() << " tasks, " << result.errors.size() << " failed, "
               << reformulations << " reformulations\n";
  }
};

// ---- eval / report ----

nlohmann::ordered_json metric_or_null(double (*fn)(std::span<const PredictionRecord>),
                                      std::span<const PredictionRecord> recs) {
  try {
    return fn(recs);
  } catch (const UndefinedMetric&) {
    return nullptr;
  }
}

struct EvalCmd {
  Path predictions;
  int bins = 10;

  explicit EvalCmd(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "Print accuracy and calibration metrics as JSON");
    app->add_option("--predictions", predictions, "Predictions JSONL")->required();
    app->add_option("--bins", bins, "Equal-width confidence bins for ECE")->capture_default_str();
  }

  void run(std::ostream& out_stream) {
    const auto recs = read_predictions_jsonl(need_input(predictions, "predictions"));
    nlohmann::ordered_json j;
    j["acc"] = metric_or_null(&accuracy, recs);
    j["auroc"] = metric_or_null(&auroc, recs);
    try {
      j["ece"] = ece(recs, bins);
    } catch (const UndefinedMetric&) {
      j["ece"] = nullptr;
    }
    j["brier"] = metric_or_null(&brier, recs);
    j["nll"] = metric_or_null(&nll, recs);
    j["n"] = recs.size();
    out_stream << j.dump() << '\n';
  }
};

struct ReportCmd {
  Path predictions, out;
  int bins = 10;

  explicit ReportCmd(CLI::App& root) {
    auto* app = root.add_subcommand("report", "Write reliability-diagram data as CSV");
    app->add_option("--predictions", predictions, "Predictions JSONL")->required();
    app->add_option("--bins", bins, "Equal-width confidence bins")->capture_default_str();
    app->add_option("--out", out, "CSV file to write")->required();
  }

  void run(std::ostream& out_stream) {
    const auto recs = read_predictions_jsonl(need_input(predictions, "predictions"));
    write_text(*out, reliability_csv(reliability_data(recs, bins)));
    out_stream << "wrote " << bins << " bins to " << out->string() << '\n';
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Decision-calibrated retrieval: index, datagen, train, infer, eval, report", "calibrag");
  app.require_subcommand(1);
  IndexCmd index_cmd(app);
  DatagenCmd datagen_cmd(app);
  TrainCmd train_cmd(app);
  InferCmd infer_cmd(app);
  EvalCmd eval_cmd(app);
  ReportCmd report_cmd(app);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    const CLI::App* shown = &app;
    if (!app.get_subcommands().empty()) shown = app.get_subcommands().front();
    err << "error: " << e.what() << "\n" << shown->help();
    return 2;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const auto& name = sub->get_name();
    if (name == "index") index_cmd.run(out);
    else if (name == "datagen") datagen_cmd.run(out);
    else if (name == "train") train_cmd.run(out);
    else if (name == "infer") infer_cmd.run(out);
    else if (name == "eval") eval_cmd.run(out);
    else report_cmd.run(out);
  } catch (const std::exception& e) {
    err << nlohmann::json{{"error", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace calibrag::cli
