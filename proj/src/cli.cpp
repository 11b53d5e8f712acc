#include "rubricmem/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/spdlog.h>

#include "rubricmem/config.hpp"
#include "rubricmem/digest.hpp"
#include "rubricmem/memory.hpp"
#include "rubricmem/rundir.hpp"
#include "rubricmem/verify.hpp"

namespace rubricmem::cli {

namespace {

/// Output sink: a file when a path is given, otherwise the command's stream.
class Sink {
  public:
    Sink(const std::string& path, std::ostream& fallback) {
        if (!path.empty()) {
            file_.open(path, std::ios::trunc);
            if (!file_) throw Error(Errc::io, "cannot write " + path);
        }
        os_ = path.empty() ? &fallback : &file_;
    }
    std::ostream& operator*() { return *os_; }

  private:
    std::ofstream file_;
    std::ostream* os_;
};

ports::Decoding eval_decoding(const RunConfigFile& cfg, std::string_view purpose, const std::string& query_id,
                              bool greedy) {
    // Depends on the query only, so every checkpoint is judged on the same
    // candidates (common random numbers).
    return {greedy ? 0.0 : cfg.tuning.temperature, cfg.tuning.nucleus_p,
            derive_seed(cfg.tuning.seed, {purpose, query_id})};
}

Rubric propose_from_bank(const Runtime& rt, const RunConfigFile& cfg, const Query& q, const CandidatePool& pool,
                         const RetrievedMemory& retrieved, std::string_view purpose) {
    ports::ProposerRequest req;
    req.query = q;
    req.candidates = pool;
    req.memory = retrieved;
    req.mode = ProposalMode::memory_driven;
    req.decoding = eval_decoding(cfg, purpose, q.id, true);
    return rt.guarded.proposer->propose(req);
}

CandidatePool eval_pool(const Runtime& rt, const RunConfigFile& cfg, const Query& q) {
    return rt.guarded.answers->generate_answers({q, cfg.tuning.candidates, eval_decoding(cfg, "eval_answers", q.id, false)});
}

struct EvalSet {
    std::vector<Query> queries;
    std::map<std::string, ReferenceAnswer> references;
};

EvalSet load_eval_set(const EvalPrefOptions& opt, const Runtime& rt) {
    EvalSet set;
    if (!opt.eval.empty()) {
        set.queries = read_jsonl<Query>(opt.eval);
        if (opt.references.empty()) throw Error(Errc::data, "eval set has no references (--references)");
        for (auto& r : read_jsonl<ReferenceAnswer>(opt.references)) set.references[r.query_id] = std::move(r);
    } else {
        if (!rt.world) throw Error(Errc::config, "no eval set: pass --eval/--references or configure a synthetic world");
        for (const auto& q : rt.world->queries()) {
            if (q.split != Split::evaluation) continue;
            set.queries.push_back(rt.world->as_query(q));
            set.references[q.id] = rt.world->reference(q);
        }
    }
    for (const auto& q : set.queries) {
        if (!set.references.count(q.id)) throw Error(Errc::data, "eval query " + q.id + " has no reference");
    }
    return set;
}

struct EvalReport {
    std::uint64_t bank_version = 0;
    double mean_accuracy = 0.0;
    std::vector<std::pair<std::string, double>> per_query;
};

EvalReport evaluate_bank(const memory::MemoryBank& bank, const EvalSet& set,
                         const std::map<std::string, CandidatePool>& pools, const Runtime& rt,
                         const RunConfigFile& cfg, verify::Scorer& scorer) {
    EvalReport report;
    report.bank_version = bank.version();
    const auto retrieved = memory::retrieve(bank, cfg.tuning.retrieval());
    double total = 0.0;
    for (const auto& q : set.queries) {
        const auto& pool = pools.at(q.id);
        Rubric rubric;
        try {
            rubric = propose_from_bank(rt, cfg, q, pool, retrieved, "eval_rubric");
        } catch (const Error& e) {
            if (!is_retryable(e.code())) throw;
            spdlog::warn("no rubric for eval query {}: {}", q.id, e.what());
            continue;
        }
        double acc = 0.0;
        for (const auto& c : pool.candidates) {
            acc += scorer.preference_accuracy(q, set.references.at(q.id), c.text, rubric, cfg.tuning.repetitions);
        }
        acc /= static_cast<double>(pool.candidates.size());
        report.per_query.emplace_back(q.id, acc);
        total += acc;
    }
    if (!set.queries.empty() && report.per_query.empty()) {
        throw Error(Errc::backend_unavailable, "no eval query produced a rubric");
    }
    report.mean_accuracy = report.per_query.empty() ? 0.0 : total / static_cast<double>(report.per_query.size());
    return report;
}

std::string query_text_lookup(const std::map<std::string, Query>& known, const std::string& id, Query& out) {
    if (auto it = known.find(id); it != known.end()) {
        out = it->second;
        return {};
    }
    out = Query{id, "", Split::evaluation};
    return "query text unknown";
}

}  // namespace

int exit_code(Errc code) noexcept {
    switch (code) {
        case Errc::config:
        case Errc::precondition:
        case Errc::universe_too_large:
            return kExitUsage;
        case Errc::backend_unavailable:
        case Errc::malformed_response:
        case Errc::out_of_range_response:
        case Errc::partial_trace:
            return kExitBackend;
        default:
            return kExitData;
    }
}

// tune -------------------------------------------------------------------------

int cmd_tune(const TuneOptions& opt, std::ostream& out) {
    auto cfg = RunConfigFile::load(opt.config);
    if (opt.output) cfg.output = fs::absolute(*opt.output);
    const fs::path dir = cfg.output;

    const auto status = loop::read_status(dir);
    if (opt.resume && status == loop::RunStatus::completed && !opt.from_round) {
        out << "run in " << dir.string() << " already completed; nothing to do\n";
        return kExitOk;
    }
    if (!opt.resume && (status != loop::RunStatus::absent || fs::exists(dir / "metrics.jsonl"))) {
        throw Error(Errc::config, "run directory " + dir.string() + " already holds a run; pass --resume");
    }

    loop::RunLock lock(dir);
    if (!opt.resume || !fs::exists(dir / "config.json")) {
        loop::write_file_atomic(dir / "config.json", cfg.to_json().dump(2) + "\n");
    }
    const auto rt = build_runtime(cfg, (dir / "audit.jsonl").string());
    const auto files = load_dataset(cfg, rt);
    const auto dataset = loop::select_dataset(files.queries, files.references, cfg.tuning);

    loop::RunRecorder recorder(dir);
    loop::Engine engine(rt.guarded, cfg.tuning, &recorder);

    loop::LoopState state;
    const auto rounds = loop::list_round_checkpoints(dir);
    if (opt.resume && (opt.from_round || !rounds.empty())) {
        const int round = opt.from_round.value_or(rounds.empty() ? 0 : rounds.back());
        state = loop::load_round_checkpoint(dir, round);
        loop::truncate_from_round(dir, round);
        out << "resuming " << dir.string() << " at round " << round << "\n";
    } else {
        try {
            state.pools = files.pools ? *files.pools : engine.initial_pools(dataset.all());
        } catch (const Error& e) {
            loop::write_status(dir, loop::RunStatus::failed, {{"error", e.what()}});
            throw;
        }
        for (const auto& q : dataset.all()) {
            if (!state.pools.count(q.id)) throw Error(Errc::data, "no candidate pool for query " + q.id);
        }
    }

    loop::DualLoopResult result;
    try {
        result = engine.run_dual_loop(dataset, std::move(state));
    } catch (const Error& e) {
        loop::write_status(dir, loop::RunStatus::failed, {{"error", e.what()}});
        throw;
    }
    recorder.finish(result.final_state);

    std::size_t skipped = 0;
    for (const auto& m : result.metrics) skipped += m.skipped ? 1 : 0;
    fmt::print(out, "run directory: {}\n", dir.string());
    fmt::print(out, "rounds: {}  iterations: {}  skipped: {}\n", result.rounds.size(), result.metrics.size(), skipped);
    for (const auto& r : result.rounds) {
        fmt::print(out, "  round {}: bank v{}, {} rubrics, converged={}, validation={}\n", r.s, r.bank_version,
                   r.rubrics.size(), r.converged,
                   r.validation_curve.empty() ? std::string("-") : fmt::format("{:.3f}", r.validation_curve.back()));
    }
    fmt::print(out, "final bank: version {}, {} entries in {} categories\n", result.final_state.bank.version(),
               result.final_state.bank.entry_count(), result.final_state.bank.categories().size());
    return kExitOk;
}

// generate ---------------------------------------------------------------------

int cmd_generate(const GenerateOptions& opt, std::ostream& out) {
    const auto cfg = RunConfigFile::load(opt.config);
    const auto bank = memory::load(opt.bank);
    const auto queries = read_jsonl<Query>(opt.queries);
    const auto rt = build_runtime(cfg);
    const auto retrieved = memory::retrieve(bank, cfg.tuning.retrieval());

    Sink sink(opt.out, out);
    int status = kExitOk;
    for (const auto& q : queries) {
        try {
            const auto pool = eval_pool(rt, cfg, q);
            const auto rubric = propose_from_bank(rt, cfg, q, pool, retrieved, "generate");
            *sink << nlohmann::json(rubric).dump() << '\n';
        } catch (const Error& e) {
            if (!is_retryable(e.code())) throw;
            spdlog::error("rubric generation failed for {}: {}", q.id, e.what());
            status = kExitBackend;
        }
    }
    return status;
}

// score ------------------------------------------------------------------------

int cmd_score(const ScoreOptions& opt, std::ostream& out) {
    const auto cfg = RunConfigFile::load(opt.config);
    const auto rt = build_runtime(cfg);
    std::map<std::string, Rubric> rubrics;
    for (auto& r : read_jsonl<Rubric>(opt.rubrics)) rubrics[r.query_id] = std::move(r);

    std::map<std::string, Query> known;
    if (rt.world) {
        for (const auto& q : rt.world->queries()) known[q.id] = rt.world->as_query(q);
    }
    if (!opt.queries.empty()) {
        for (auto& q : read_jsonl<Query>(opt.queries)) known[q.id] = std::move(q);
    }

    verify::Scorer scorer(rt.guarded.verifier, cfg.tuning.scoring());
    Sink sink(opt.out, out);
    int status = kExitOk;
    std::size_t line = 0;
    for (const auto& a : read_jsonl_raw(opt.answers)) {
        ++line;
        if (!a.contains("query_id") || !(a.contains("answer") || a.contains("text"))) {
            throw Error(Errc::data, fmt::format("{} record {}: needs query_id and answer", opt.answers, line));
        }
        const auto qid = a.at("query_id").get<std::string>();
        const auto text = a.contains("answer") ? a.at("answer").get<std::string>() : a.at("text").get<std::string>();
        nlohmann::json rec = {{"query_id", qid}, {"answer_digest", digest(text)}};
        const auto rubric = rubrics.find(qid);
        if (rubric == rubrics.end()) {
            rec["error"] = "no rubric for query " + qid;
            status = kExitData;
        } else {
            Query q;
            if (auto note = query_text_lookup(known, qid, q); !note.empty()) {
                spdlog::debug("{} for {}", note, qid);
            }
            try {
                const auto s = scorer.rubric_score(q, text, rubric->second, cfg.tuning.repetitions);
                rec["score"] = s.score;
                nlohmann::json items = nlohmann::json::array();
                for (const auto& i : s.items) {
                    items.push_back({{"criterion", i.criterion}, {"weight", i.weight}, {"score", i.score}});
                }
                rec["items"] = items;
            } catch (const Error& e) {
                if (!is_retryable(e.code())) throw;
                rec["error"] = e.what();
                status = std::max(status, kExitBackend);
            }
        }
        *sink << rec.dump() << '\n';
    }
    return status;
}

// eval-pref --------------------------------------------------------------------

int cmd_eval_pref(const EvalPrefOptions& opt, std::ostream& out) {
    if (opt.bank.empty() == opt.sweep.empty()) throw Error(Errc::config, "pass exactly one of --bank or --sweep");
    const auto cfg = RunConfigFile::load(opt.config);
    const auto rt = build_runtime(cfg);
    const auto set = load_eval_set(opt, rt);
    std::map<std::string, CandidatePool> pools;
    for (const auto& q : set.queries) pools[q.id] = eval_pool(rt, cfg, q);
    verify::Scorer scorer(rt.guarded.verifier, cfg.tuning.scoring());

    Sink sink(opt.out, out);
    if (!opt.bank.empty()) {
        const auto report = evaluate_bank(memory::load(opt.bank), set, pools, rt, cfg, scorer);
        nlohmann::json per_query = nlohmann::json::array();
        for (const auto& [id, acc] : report.per_query) per_query.push_back({{"query_id", id}, {"accuracy", acc}});
        *sink << nlohmann::json{{"bank_version", report.bank_version},
                                {"mean_accuracy", report.mean_accuracy},
                                {"per_query", per_query}}
                     .dump(2)
              << '\n';
        return kExitOk;
    }

    const auto checkpoints = loop::list_bank_checkpoints(opt.sweep);
    if (checkpoints.empty()) throw Error(Errc::data, "no bank checkpoints under " + opt.sweep);
    // The run's own tuning config decides which iterations were warm-up.
    auto run_tuning = cfg.tuning;
    if (fs::exists(fs::path(opt.sweep) / "config.json")) {
        run_tuning = nlohmann::json::parse(loop::read_file(fs::path(opt.sweep) / "config.json"))
                         .at("tuning")
                         .get<loop::TuningConfig>();
    }
    std::string csv = "round,iteration,mode,bank_version,mean_accuracy\n";
    for (const auto& c : checkpoints) {
        const auto report = evaluate_bank(memory::load(c.path.string()), set, pools, rt, cfg, scorer);
        const auto mode = loop::is_warmup(run_tuning, c.round, c.t) ? ProposalMode::contrastive
                                                                     : ProposalMode::memory_driven;
        csv += fmt::format("{},{},{},{},{:.6f}\n", c.round, c.t, to_string(mode), report.bank_version,
                           report.mean_accuracy);
    }
    if (!opt.csv.empty()) {
        std::ofstream f(opt.csv, std::ios::trunc);
        if (!f) throw Error(Errc::io, "cannot write " + opt.csv);
        f << csv;
    }
    *sink << csv;
    return kExitOk;
}

// inspect-memory ---------------------------------------------------------------

int cmd_inspect_memory(const InspectOptions& opt, std::ostream& out) {
    const auto bank = memory::load(opt.bank);
    if (opt.category && !bank.category(*opt.category)) {
        throw Error(Errc::config, "unknown category '" + *opt.category + "'");
    }
    if (bank.empty()) {
        out << "no entries\n";
        return kExitOk;
    }
    fmt::print(out, "bank version {}, {} entries\n", bank.version(), bank.entry_count());
    for (const auto& cat : bank.categories()) {
        if (opt.category && cat.name != *opt.category) continue;
        std::vector<const memory::MemoryEntry*> rows;
        for (const auto& [key, e] : cat.entries) rows.push_back(&e);
        std::sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
            if (a->mean_reward != b->mean_reward) return a->mean_reward > b->mean_reward;
            if (a->created_at != b->created_at) return a->created_at < b->created_at;
            return a->key < b->key;
        });
        if (opt.top) rows.resize(std::min(rows.size(), *opt.top));
        fmt::print(out, "\n## {} ({} entries)\n", cat.name, cat.entries.size());
        fmt::print(out, "  {:>8}  {:>7}  {:>8}  {}\n", "mean", "updates", "evidence", "criterion");
        for (const auto* e : rows) {
            fmt::print(out, "  {:>+8.3f}  {:>7}  {:>8}  {}\n", e->mean_reward, e->reward_history.size(),
                       e->evidence.size(), e->criterion);
        }
    }
    return kExitOk;
}

// argv -------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rubric memory tuning: tune, generate, score and evaluate rubrics", "rubricmem"};
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

    TuneOptions tune;
    auto* tune_cmd = app.add_subcommand("tune", "Run the dual tuning loop into a run directory");
    tune_cmd->add_option("config", tune.config, "run config JSON")->required()->check(CLI::ExistingFile);
    tune_cmd->add_flag("--resume", tune.resume, "continue from the latest round checkpoint");
    tune_cmd->add_option("--from-round", tune.from_round, "with --resume: restart at this round's checkpoint");
    tune_cmd->add_option("--output", tune.output, "override the run directory");

    GenerateOptions gen;
    auto* gen_cmd = app.add_subcommand("generate", "Generate memory-driven rubrics for queries");
    gen_cmd->add_option("--bank", gen.bank)->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--queries", gen.queries)->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--config", gen.config)->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--out", gen.out, "output JSONL (default stdout)");

    ScoreOptions score;
    auto* score_cmd = app.add_subcommand("score", "Score answers against rubrics");
    score_cmd->add_option("--rubrics", score.rubrics)->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--answers", score.answers)->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--config", score.config)->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--queries", score.queries, "query texts (JSONL)")->check(CLI::ExistingFile);
    score_cmd->add_option("--out", score.out, "output JSONL (default stdout)");

    EvalPrefOptions eval;
    auto* eval_cmd = app.add_subcommand("eval-pref", "Preference accuracy of a bank or a run's checkpoints");
    auto* bank_opt = eval_cmd->add_option("--bank", eval.bank)->check(CLI::ExistingFile);
    auto* sweep_opt = eval_cmd->add_option("--sweep", eval.sweep, "run directory")->check(CLI::ExistingDirectory);
    bank_opt->excludes(sweep_opt);
    eval_cmd->add_option("--eval", eval.eval, "eval queries (JSONL)")->check(CLI::ExistingFile);
    eval_cmd->add_option("--references", eval.references, "eval references (JSONL)")->check(CLI::ExistingFile);
    eval_cmd->add_option("--config", eval.config)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--csv", eval.csv, "write the sweep curve as CSV");
    eval_cmd->add_option("--out", eval.out, "report file (default stdout)");

    InspectOptions inspect;
    auto* inspect_cmd = app.add_subcommand("inspect-memory", "Print a bank as a per-category table");
    inspect_cmd->add_option("--bank", inspect.bank)->required()->check(CLI::ExistingFile);
    inspect_cmd->add_option("--category", inspect.category);
    inspect_cmd->add_option("--top", inspect.top)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*tune_cmd) return cmd_tune(tune, out);
        if (*gen_cmd) return cmd_generate(gen, out);
        if (*score_cmd) return cmd_score(score, out);
        if (*eval_cmd) return cmd_eval_pref(eval, out);
        if (*inspect_cmd) return cmd_inspect_memory(inspect, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"rubricmem"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rubricmem::cli
