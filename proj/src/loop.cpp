#include "rubricmem/loop.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rubricmem/digest.hpp"
#include "rubricmem/errors.hpp"

namespace rubricmem::loop {

namespace {

/// Errors a model call can raise at runtime; these skip work instead of aborting.
bool is_port_failure(Errc code) noexcept {
    switch (code) {
        case Errc::backend_unavailable:
        case Errc::malformed_response:
        case Errc::out_of_range_response:
        case Errc::partial_trace:
        case Errc::empty_rubric:
        case Errc::degenerate_weights:
            return true;
        default:
            return false;
    }
}

std::vector<std::string> criteria_of(const Rubric& rubric) {
    std::vector<std::string> out;
    out.reserve(rubric.items.size());
    for (const auto& item : rubric.items) out.push_back(item.criterion);
    return out;
}

}  // namespace

// Config -----------------------------------------------------------------------

void TuningConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(Errc::config, what); };
    if (examples < 1) fail("I (examples) must be >= 1");
    if (candidates < 1) fail("J (candidates) must be >= 1");
    if (warmup_passes < 0) fail("warmup_passes must be >= 0");
    if (!(fraction > 0.0 && fraction <= 1.0)) fail("retrieval fraction must lie in (0, 1]");
    if (repetitions < 1) fail("repetitions must be >= 1");
    if (convergence.window < 1 || convergence.patience < 1) fail("convergence window and patience must be >= 1");
    if (max_inner_iterations < 0) fail("max_inner_iterations must be >= 0");
    if (max_outer_rounds < 1) fail("max_outer_rounds must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) fail("validation_fraction must lie in [0, 1)");
    if (temperature < 0.0 || nucleus_p <= 0.0 || nucleus_p > 1.0) fail("invalid decoding parameters");
}

void to_json(nlohmann::json& j, const TuningConfig& v) {
    j = {{"examples", v.examples},
         {"candidates", v.candidates},
         {"warmup_passes", v.warmup_passes},
         {"fraction", v.fraction},
         {"evidence_cap", v.evidence_cap},
         {"repetitions", v.repetitions},
         {"verifier_mode", v.verifier_mode},
         {"convergence",
          {{"window", v.convergence.window},
           {"min_delta", v.convergence.min_delta},
           {"patience", v.convergence.patience}}},
         {"max_inner_iterations", v.max_inner_iterations},
         {"max_outer_rounds", v.max_outer_rounds},
         {"validation_fraction", v.validation_fraction},
         {"seed", v.seed},
         {"temperature", v.temperature},
         {"nucleus_p", v.nucleus_p},
         {"max_concurrency", v.max_concurrency},
         {"max_rubric_items", v.max_rubric_items}};
}

void from_json(const nlohmann::json& j, TuningConfig& v) {
    TuningConfig d;
    v.examples = j.value("examples", d.examples);
    v.candidates = j.value("candidates", d.candidates);
    v.warmup_passes = j.value("warmup_passes", d.warmup_passes);
    v.fraction = j.value("fraction", d.fraction);
    v.evidence_cap = j.value("evidence_cap", d.evidence_cap);
    v.repetitions = j.value("repetitions", d.repetitions);
    v.verifier_mode = j.contains("verifier_mode") ? j.at("verifier_mode").get<VerifierMode>() : d.verifier_mode;
    v.convergence = d.convergence;
    if (j.contains("convergence")) {
        const auto& c = j.at("convergence");
        v.convergence.window = c.value("window", d.convergence.window);
        v.convergence.min_delta = c.value("min_delta", d.convergence.min_delta);
        v.convergence.patience = c.value("patience", d.convergence.patience);
    }
    v.max_inner_iterations = j.value("max_inner_iterations", d.max_inner_iterations);
    v.max_outer_rounds = j.value("max_outer_rounds", d.max_outer_rounds);
    v.validation_fraction = j.value("validation_fraction", d.validation_fraction);
    v.seed = j.value("seed", d.seed);
    v.temperature = j.value("temperature", d.temperature);
    v.nucleus_p = j.value("nucleus_p", d.nucleus_p);
    v.max_concurrency = j.value("max_concurrency", d.max_concurrency);
    v.max_rubric_items = j.value("max_rubric_items", d.max_rubric_items);
}

// Dataset ----------------------------------------------------------------------

const ReferenceAnswer& Dataset::reference(const std::string& query_id) const {
    auto it = references.find(query_id);
    if (it == references.end()) throw Error(Errc::data, "no reference for query " + query_id);
    return it->second;
}

std::vector<Query> Dataset::all() const {
    std::vector<Query> out = tuning;
    out.insert(out.end(), validation.begin(), validation.end());
    return out;
}

Dataset select_dataset(std::span<const Query> queries, std::span<const ReferenceAnswer> references,
                       const TuningConfig& config) {
    Dataset d;
    std::vector<Query> tuning_split, validation_split;
    for (const auto& q : queries) {
        if (q.split == Split::tuning) tuning_split.push_back(q);
        if (q.split == Split::validation) validation_split.push_back(q);
    }
    if (tuning_split.empty()) throw Error(Errc::config, "dataset has no tuning queries");
    const auto I = static_cast<std::size_t>(config.examples);
    if (tuning_split.size() < I) {
        spdlog::warn("dataset has {} tuning queries, fewer than I={}", tuning_split.size(), I);
    }
    const std::size_t take = std::min(I, tuning_split.size());
    d.tuning.assign(tuning_split.begin(), tuning_split.begin() + static_cast<std::ptrdiff_t>(take));

    if (!validation_split.empty()) {
        d.validation = std::move(validation_split);
    } else if (tuning_split.size() > take) {
        d.validation.assign(tuning_split.begin() + static_cast<std::ptrdiff_t>(take), tuning_split.end());
    } else if (config.validation_fraction > 0.0 && d.tuning.size() > 1) {
        auto held = static_cast<std::size_t>(std::lround(config.validation_fraction * static_cast<double>(I)));
        held = std::clamp<std::size_t>(held, 1, d.tuning.size() - 1);
        d.validation.assign(d.tuning.end() - static_cast<std::ptrdiff_t>(held), d.tuning.end());
        d.tuning.resize(d.tuning.size() - held);
        spdlog::warn("no validation queries; holding out {} of the {} examples", held, take);
    }

    for (const auto& r : references) d.references[r.query_id] = r;
    for (const auto& q : d.all()) {
        if (!d.references.count(q.id)) throw Error(Errc::config, "query " + q.id + " has no reference answer");
    }
    return d;
}

// Serialization ----------------------------------------------------------------

void to_json(nlohmann::json& j, const IterationMetrics& v) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& i : v.items) items.push_back({{"criterion", i.criterion}, {"alpha", i.alpha}});
    j = {{"t", v.t},
         {"s", v.s},
         {"query_id", v.query_id},
         {"mode", v.mode},
         {"status", v.skipped ? "skipped" : "ok"},
         {"items", items},
         {"mean_alpha", v.mean_alpha},
         {"validation_mean_alpha", v.validation_mean_alpha ? nlohmann::json(*v.validation_mean_alpha) : nlohmann::json(nullptr)},
         {"bank_version", v.bank_version}};
    if (v.skipped) j["error"] = v.error;
}

void from_json(const nlohmann::json& j, IterationMetrics& v) {
    v.t = j.at("t").get<std::int64_t>();
    v.s = j.at("s").get<int>();
    v.query_id = j.at("query_id").get<std::string>();
    v.mode = j.at("mode").get<ProposalMode>();
    v.skipped = j.at("status").get<std::string>() == "skipped";
    v.error = j.value("error", "");
    v.items.clear();
    for (const auto& i : j.at("items")) v.items.push_back({i.at("criterion"), i.at("alpha")});
    v.mean_alpha = j.at("mean_alpha").get<double>();
    const auto& val = j.at("validation_mean_alpha");
    v.validation_mean_alpha = val.is_null() ? std::nullopt : std::optional<double>(val.get<double>());
    v.bank_version = j.at("bank_version").get<std::uint64_t>();
}

void to_json(nlohmann::json& j, const RoundResult& v) {
    nlohmann::json rubrics = nlohmann::json::array();
    for (const auto& [id, r] : v.rubrics) rubrics.push_back(r);
    j = {{"s", v.s},
         {"bank_version", v.bank_version},
         {"rubrics", rubrics},
         {"validation_curve", v.validation_curve},
         {"converged", v.converged},
         {"carried_forward", v.carried_forward}};
}

void to_json(nlohmann::json& j, const LoopState& v) {
    nlohmann::json pools = nlohmann::json::array();
    for (const auto& [id, p] : v.pools) pools.push_back(p);
    j = {{"round", v.round}, {"next_t", v.next_t}, {"bank", v.bank}, {"pools", pools}};
}

void from_json(const nlohmann::json& j, LoopState& v) {
    v.round = j.at("round").get<int>();
    v.next_t = j.at("next_t").get<std::int64_t>();
    v.bank = j.at("bank").get<memory::MemoryBank>();
    v.pools.clear();
    for (const auto& p : j.at("pools")) {
        auto pool = p.get<CandidatePool>();
        v.pools[pool.query_id] = std::move(pool);
    }
}

std::string pools_digest(const PoolMap& pools) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [id, p] : pools) j.push_back(p);
    return digest(j.dump());
}

bool is_warmup(const TuningConfig& config, int s, std::int64_t t) noexcept {
    return s == 0 && t <= static_cast<std::int64_t>(config.warmup_passes) * config.examples;
}

// Engine -----------------------------------------------------------------------

struct Engine::Attempt {
    memory::MemoryBank bank;
    std::vector<verify::ItemRewardRecord> records;
};

Engine::Engine(ports::ModelPorts ports, TuningConfig config, Observer* observer)
    : ports_(std::move(ports)),
      config_(std::move(config)),
      observer_(observer),
      scorer_(ports_.verifier, config_.scoring()) {
    config_.validate();
    if (!ports_.proposer || !ports_.verifier || !ports_.categorizer) {
        throw Error(Errc::config, "engine needs proposer, verifier and categorizer ports");
    }
}

ports::Decoding Engine::decoding(std::string_view purpose, int s, std::int64_t t, std::string_view query_id,
                                 bool greedy) const {
    return {greedy ? 0.0 : config_.temperature, config_.nucleus_p,
            derive_seed(config_.seed, {purpose, std::to_string(s), std::to_string(t), query_id})};
}

PoolMap Engine::initial_pools(std::span<const Query> queries) {
    if (!ports_.answers) throw Error(Errc::config, "no answer model configured for initial pools");
    PoolMap pools;
    for (const auto& q : queries) {
        ports::AnswerRequest req{q, config_.candidates, decoding("answers", 0, 0, q.id, false)};
        pools[q.id] = ports_.answers->generate_answers(req);
    }
    return pools;
}

LoopState Engine::initial_state(const Dataset& dataset) {
    LoopState state;
    state.pools = initial_pools(dataset.all());
    return state;
}

Engine::Attempt Engine::attempt_iteration(const Query& query, const ReferenceAnswer& reference,
                                          const CandidatePool& pool, const memory::MemoryBank& bank, int s,
                                          std::int64_t t, bool warmup) {
    ports::ProposerRequest req;
    req.query = query;
    req.candidates = pool;
    if (warmup) {
        req.mode = ProposalMode::contrastive;
        req.reference = reference;
    } else {
        req.mode = ProposalMode::memory_driven;
        req.memory = memory::retrieve(bank, config_.retrieval());
    }
    req.round = s;
    req.decoding = decoding("propose", s, t, query.id, false);
    const Rubric rubric = ports_.proposer->propose(req);

    const auto criteria = criteria_of(rubric);
    auto records = scorer_.item_rewards(query, reference, pool, criteria, config_.repetitions);
    for (auto& rec : records) {
        rec.round = s;
        rec.iteration = t;
    }

    // Category assignment and merging run on a copy so a failure midway leaves
    // the caller's bank untouched.
    memory::MemoryBank working = bank;
    working.advance({s, t});
    for (const auto& rec : records) {
        const auto category = memory::assign_category(working, rec.criterion, *ports_.categorizer);
        working.update(category, rec.criterion, rec.alpha, query.id);
    }
    return {std::move(working), std::move(records)};
}

InnerResult Engine::run_inner(const Dataset& dataset, const PoolMap& pools, memory::MemoryBank bank, int round,
                              std::int64_t first_t) {
    if (dataset.tuning.empty()) throw Error(Errc::precondition, "run_inner needs at least one example");
    InnerResult result;
    result.bank = std::move(bank);
    result.next_t = first_t;

    const auto I = static_cast<std::int64_t>(dataset.tuning.size());
    const auto& conv = config_.convergence;
    std::vector<double> history;  // post-warm-up validation values of this round
    int stalled = 0;

    for (std::int64_t k = 0; k < config_.max_inner_iterations; ++k) {
        const std::int64_t t = first_t + k;
        const Query& query = dataset.tuning[static_cast<std::size_t>((t - 1) % I)];
        const bool warmup = is_warmup(config_, round, t);
        const auto pool_it = pools.find(query.id);
        if (pool_it == pools.end()) throw Error(Errc::precondition, "no candidate pool for " + query.id);

        IterationMetrics m;
        m.t = t;
        m.s = round;
        m.query_id = query.id;
        m.mode = warmup ? ProposalMode::contrastive : ProposalMode::memory_driven;

        std::optional<Attempt> done;
        for (int attempt = 0; attempt < 2 && !done; ++attempt) {
            try {
                done = attempt_iteration(query, dataset.reference(query.id), pool_it->second, result.bank, round, t,
                                         warmup);
            } catch (const Error& e) {
                if (!is_port_failure(e.code())) throw;
                m.error = e.what();
                spdlog::warn("iteration {} (round {}, {}) failed{}: {}", t, round, query.id,
                             attempt == 0 ? ", retrying" : "", e.what());
            }
        }
        if (done) {
            result.bank = std::move(done->bank);
            m.error.clear();
            double sum = 0.0;
            for (const auto& rec : done->records) {
                m.items.push_back({rec.criterion, rec.alpha});
                sum += rec.alpha;
            }
            m.mean_alpha = m.items.empty() ? 0.0 : sum / static_cast<double>(m.items.size());
            if (observer_) observer_->on_item_rewards(done->records);
        } else {
            m.skipped = true;
            spdlog::warn("iteration {} skipped; bank left at version {}", t, result.bank.version());
        }
        m.bank_version = result.bank.version();

        bool converged = false;
        if ((k + 1) % I == 0) {
            m.validation_mean_alpha = validation_alpha(dataset, pools, result.bank, round);
            if (m.validation_mean_alpha) {
                const double v = *m.validation_mean_alpha;
                result.validation_curve.push_back(v);
                // Warm-up evaluations say nothing about memory-driven progress,
                // except the one taken right at the switch, which is the baseline.
                if (!is_warmup(config_, round, t + 1)) {
                    if (history.size() >= static_cast<std::size_t>(conv.window)) {
                        const double best = *std::max_element(history.end() - conv.window, history.end());
                        stalled = (v - best <= conv.min_delta) ? stalled + 1 : 0;
                        converged = stalled >= conv.patience;
                    }
                    history.push_back(v);
                }
            }
        }

        if (observer_) observer_->on_iteration(m, result.bank);
        result.metrics.push_back(std::move(m));
        result.next_t = t + 1;
        if (converged) {
            spdlog::info("round {} converged at iteration {}", round, t);
            result.converged = true;
            break;
        }
    }
    return result;
}

std::optional<double> Engine::validation_alpha(const Dataset& dataset, const PoolMap& pools,
                                               const memory::MemoryBank& bank, int round) {
    if (dataset.validation.empty()) return std::nullopt;
    const auto retrieved = memory::retrieve(bank, config_.retrieval());
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& q : dataset.validation) {
        const auto pool_it = pools.find(q.id);
        if (pool_it == pools.end()) continue;
        try {
            ports::ProposerRequest req;
            req.query = q;
            req.candidates = pool_it->second;
            req.memory = retrieved;
            req.mode = ProposalMode::memory_driven;
            req.round = round;
            req.decoding = decoding("validate", 0, 0, q.id, true);
            const auto rubric = ports_.proposer->propose(req);
            const auto criteria = criteria_of(rubric);
            for (const auto& rec :
                 scorer_.item_rewards(q, dataset.reference(q.id), pool_it->second, criteria, config_.repetitions)) {
                sum += rec.alpha;
                ++count;
            }
        } catch (const Error& e) {
            if (!is_port_failure(e.code())) throw;
            spdlog::warn("validation on {} skipped: {}", q.id, e.what());
        }
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
}

std::map<std::string, Rubric> Engine::make_round_rubrics(std::span<const Query> queries, const PoolMap& pools,
                                                         const memory::MemoryBank& bank, int round) {
    const auto retrieved = memory::retrieve(bank, config_.retrieval());
    std::map<std::string, Rubric> out;
    for (const auto& q : queries) {
        const auto pool_it = pools.find(q.id);
        if (pool_it == pools.end()) {
            spdlog::warn("no pool for {}; no round rubric", q.id);
            continue;
        }
        try {
            ports::ProposerRequest req;
            req.query = q;
            req.candidates = pool_it->second;
            req.memory = retrieved;
            req.mode = ProposalMode::memory_driven;
            req.round = round;
            req.decoding = decoding("round_rubric", round, 0, q.id, true);
            out[q.id] = ports_.proposer->propose(req);
        } catch (const Error& e) {
            if (!is_port_failure(e.code())) throw;
            spdlog::warn("round {} rubric for {} skipped: {}", round, q.id, e.what());
        }
    }
    return out;
}

PoolMap Engine::refresh_candidates(std::span<const Query> queries, const std::map<std::string, Rubric>& rubrics,
                                   const PoolMap& old_pools, int round, std::vector<std::string>* carried_forward) {
    if (!ports_.adversary) throw Error(Errc::config, "no adversary configured for candidate refresh");
    PoolMap out;
    auto carry = [&](const Query& q, std::string_view why) {
        auto it = old_pools.find(q.id);
        if (it == old_pools.end()) return;
        spdlog::warn("carrying the round {} pool of {} forward: {}", round, q.id, why);
        CandidatePool pool = it->second;
        pool.round = round + 1;
        out[q.id] = std::move(pool);
        if (carried_forward) carried_forward->push_back(q.id);
    };
    for (const auto& q : queries) {
        const auto rubric_it = rubrics.find(q.id);
        if (rubric_it == rubrics.end()) {
            carry(q, "no rubric");
            continue;
        }
        try {
            ports::AdversaryRequest req{q, rubric_it->second, config_.candidates, round + 1,
                                        decoding("refresh", round, 0, q.id, false)};
            out[q.id] = ports_.adversary->generate_adversarial(req);
        } catch (const Error& e) {
            if (!is_port_failure(e.code())) throw;
            carry(q, e.what());
        }
    }
    return out;
}

DualLoopResult Engine::run_dual_loop(const Dataset& dataset, LoopState state) {
    DualLoopResult out;
    const auto queries = dataset.all();
    while (state.round < config_.max_outer_rounds) {
        const int s = state.round;
        if (observer_) observer_->on_round_start(state);
        auto inner = run_inner(dataset, state.pools, std::move(state.bank), s, state.next_t);
        out.metrics.insert(out.metrics.end(), inner.metrics.begin(), inner.metrics.end());

        RoundResult round;
        round.s = s;
        round.bank_version = inner.bank.version();
        round.rubrics = make_round_rubrics(queries, state.pools, inner.bank, s);
        round.validation_curve = inner.validation_curve;
        round.converged = inner.converged;

        const bool last = s + 1 >= config_.max_outer_rounds;
        PoolMap next;
        if (!last) next = refresh_candidates(queries, round.rubrics, state.pools, s, &round.carried_forward);
        if (observer_) observer_->on_round_end(round, state.pools);

        state.bank = std::move(inner.bank);
        state.next_t = inner.next_t;
        state.round = s + 1;
        if (!last) state.pools = std::move(next);
        out.rounds.push_back(std::move(round));
    }
    out.final_state = std::move(state);
    return out;
}

}  // namespace rubricmem::loop
