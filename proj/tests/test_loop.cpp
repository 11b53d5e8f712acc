#include <doctest.h>

#include <algorithm>

#include "rubricmem/errors.hpp"
#include "rubricmem/loop.hpp"
#include "rubricmem/testbed.hpp"
#include "support.hpp"

using namespace rubricmem;
using namespace rubricmem::loop;

namespace {

struct Rig {
    std::shared_ptr<const testbed::SyntheticWorld> world;
    std::shared_ptr<testbed::SyntheticBackend> backend;
    std::shared_ptr<ports::AuditLog> audit = std::make_shared<ports::AuditLog>();
    TuningConfig config;
    Dataset dataset;

    Rig(std::shared_ptr<const testbed::SyntheticWorld> w, TuningConfig c, testbed::SyntheticSettings s = {})
        : world(std::move(w)), backend(testbed::SyntheticBackend::create(world, std::move(s))), config(c) {
        std::vector<Query> qs;
        std::vector<ReferenceAnswer> refs;
        for (const auto& q : world->queries()) {
            qs.push_back(world->as_query(q));
            refs.push_back(world->reference(q));
        }
        dataset = select_dataset(qs, refs, config);
    }

    ports::ModelPorts guarded(const ports::ModelPorts& raw) {
        ports::GuardOptions o;
        o.retry.max_retries = 1;
        o.retry.initial_backoff = std::chrono::milliseconds(0);
        return ports::guard(raw, audit, o);
    }
    ports::ModelPorts guarded() { return guarded(backend->ports()); }
};

TuningConfig binary_config(int examples, std::int64_t max_inner) {
    TuningConfig c;
    c.examples = examples;
    c.verifier_mode = VerifierMode::binary;
    c.repetitions = 1;
    c.max_inner_iterations = max_inner;
    c.max_outer_rounds = 1;
    return c;
}

std::vector<Query> queries_of(std::initializer_list<std::pair<const char*, Split>> qs) {
    std::vector<Query> out;
    for (auto [id, split] : qs) out.push_back({id, std::string("text ") + id, split});
    return out;
}

std::vector<ReferenceAnswer> refs_for(const std::vector<Query>& qs) {
    std::vector<ReferenceAnswer> out;
    for (const auto& q : qs) out.push_back({q.id, "ref " + q.id});
    return out;
}

class FailingAdversary : public ports::Adversary {
  public:
    CandidatePool generate_adversarial(const ports::AdversaryRequest&) override {
        throw Error(Errc::backend_unavailable, "down");
    }
};

}  // namespace

TEST_SUITE("loop") {

TEST_CASE("dataset selection") {
    TuningConfig c;
    c.examples = 4;
    auto qs = queries_of({{"a", Split::tuning}, {"b", Split::tuning}, {"c", Split::tuning}, {"d", Split::tuning},
                          {"e", Split::tuning}, {"v", Split::validation}, {"x", Split::evaluation}});
    auto d = select_dataset(qs, refs_for(qs), c);
    CHECK(d.tuning.size() == 4);
    CHECK(d.tuning.front().id == "a");
    REQUIRE(d.validation.size() == 1);
    CHECK(d.validation[0].id == "v");

    qs.erase(qs.begin() + 5);
    d = select_dataset(qs, refs_for(qs), c);
    REQUIRE(d.validation.size() == 1);
    CHECK(d.validation[0].id == "e");

    qs = queries_of({{"a", Split::tuning}, {"b", Split::tuning}, {"c", Split::tuning}, {"d", Split::tuning}});
    d = select_dataset(qs, refs_for(qs), c);
    CHECK(d.tuning.size() == 3);
    REQUIRE(d.validation.size() == 1);
    CHECK(d.validation[0].id == "d");

    auto refs = refs_for(qs);
    refs.pop_back();
    CHECK_THROWS_AS(select_dataset(qs, refs, c), Error);
    const auto none = queries_of({{"x", Split::evaluation}});
    CHECK_THROWS_AS(select_dataset(none, refs_for(none), c), Error);
}

TEST_CASE("config validation and json") {
    TuningConfig c;
    c.validate();
    c.fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TuningConfig{};
    c.candidates = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TuningConfig{};
    c.examples = 5;
    c.verifier_mode = VerifierMode::binary;
    c.convergence.window = 4;
    const auto back = nlohmann::json(c).get<TuningConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
}

TEST_CASE("warm-up schedule") {
    TuningConfig c;
    c.examples = 8;
    c.warmup_passes = 1;
    for (int t = 1; t <= 8; ++t) CHECK(is_warmup(c, 0, t));
    for (int t = 9; t <= 20; ++t) CHECK_FALSE(is_warmup(c, 0, t));
    CHECK_FALSE(is_warmup(c, 1, 3));
    c.warmup_passes = 0;
    CHECK_FALSE(is_warmup(c, 0, 1));
}

TEST_CASE("warm-up iterations are contrastive, later ones memory-driven") {
    Rig rig(support::bundled_world("w1"), binary_config(8, 12));
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    const auto digest_before = pools_digest(state.pools);
    const auto r = engine.run_inner(rig.dataset, state.pools, state.bank, 0, 1);
    REQUIRE(r.metrics.size() == 12);
    for (const auto& m : r.metrics) {
        CHECK(m.mode == (m.t <= 8 ? ProposalMode::contrastive : ProposalMode::memory_driven));
        CHECK(m.query_id == rig.dataset.tuning[static_cast<std::size_t>((m.t - 1) % 8)].id);
        CHECK_FALSE(m.skipped);
    }
    CHECK(r.metrics[7].validation_mean_alpha.has_value());
    CHECK_FALSE(r.metrics[6].validation_mean_alpha.has_value());
    CHECK(r.next_t == 13);
    CHECK(pools_digest(state.pools) == digest_before);
    CHECK(memory::check_integrity(r.bank).empty());
}

TEST_CASE("zero iterations leave the bank untouched") {
    Rig rig(support::tiny_world(), binary_config(2, 0));
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    memory::MemoryBank bank;
    bank.update("style", "has:a", 0.5, "q1");
    const auto r = engine.run_inner(rig.dataset, state.pools, bank, 0, 1);
    CHECK(r.bank == bank);
    CHECK(r.metrics.empty());
}

TEST_CASE("validation value is bounded by the oracle") {
    // I=2 tuning queries plus one validation query, J=4.
    Rig rig(support::tiny_world(), binary_config(2, 8), {4, {0.0}, 0.0});
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    const auto r = engine.run_inner(rig.dataset, state.pools, state.bank, 0, 1);
    REQUIRE_FALSE(r.validation_curve.empty());

    // Oracle: best mean item gap of any rubric on the validation pool.
    const auto& vq = rig.dataset.validation.front();
    std::vector<testbed::AttrSet> pool;
    for (const auto& c : state.pools.at(vq.id).candidates) pool.push_back(*rig.world->parse(c.text));
    const auto ref = rig.world->target(vq.id);
    double best = -1.0;
    for (std::size_t k = 1; k <= 8; ++k) {
        best = std::max(best, testbed::oracle_best_rubric(*rig.world, vq.id, ref, pool, k).gap);
    }
    CHECK(*std::max_element(r.validation_curve.begin(), r.validation_curve.end()) <= best + 1e-12);
    CHECK(r.validation_curve.back() > 0.0);
}

TEST_CASE("round rubrics share one bank version and draw from memory") {
    Rig rig(support::bundled_world("w1"), binary_config(8, 16), {4, {0.0}, 0.0});
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    const auto inner = engine.run_inner(rig.dataset, state.pools, state.bank, 0, 1);
    const auto queries = rig.dataset.all();
    const auto rubrics = engine.make_round_rubrics(queries, state.pools, inner.bank, 0);
    REQUIRE(rubrics.size() == queries.size());
    const auto retrieved = memory::retrieve(inner.bank, rig.config.retrieval());
    std::set<CriterionKey> retained;
    for (const auto& c : retrieved.categories) {
        for (const auto& i : c.items) retained.insert(i.key);
    }
    for (const auto& [id, r] : rubrics) {
        REQUIRE(r.provenance.has_value());
        CHECK(r.provenance->memory_version == inner.bank.version());
        for (const auto& item : r.items) CHECK(retained.count(canonicalize(item.criterion)) == 1);
    }

    const auto empty = engine.make_round_rubrics(queries, state.pools, memory::MemoryBank{}, 0);
    CHECK(empty.size() == queries.size());
}

TEST_CASE("refresh produces stronger candidates and carries forward on failure") {
    Rig rig(support::bundled_world("w1"), binary_config(8, 16), {4, {0.0}, 0.0});
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    const auto inner = engine.run_inner(rig.dataset, state.pools, state.bank, 0, 1);
    const auto queries = rig.dataset.all();
    const auto rubrics = engine.make_round_rubrics(queries, state.pools, inner.bank, 0);
    const auto next = engine.refresh_candidates(queries, rubrics, state.pools, 0);
    for (const auto& q : queries) {
        const auto& rubric = rubrics.at(q.id);
        auto mean_score = [&](const CandidatePool& p) {
            double sum = 0.0;
            for (const auto& c : p.candidates) sum += engine.scorer().rubric_score_value(q, c.text, rubric, 1);
            return sum / static_cast<double>(p.candidates.size());
        };
        const auto& pool = next.at(q.id);
        CHECK(pool.round == 1);
        CHECK(pool.candidates.size() == 4);
        for (const auto& c : pool.candidates) {
            CHECK(c.origin == Origin::adversarial);
            CHECK(c.round == 1);
        }
        CHECK(mean_score(pool) >= mean_score(state.pools.at(q.id)) - 1e-12);
    }

    auto raw = rig.backend->ports();
    raw.adversary = std::make_shared<FailingAdversary>();
    Engine broken(rig.guarded(raw), rig.config);
    std::vector<std::string> carried;
    const auto kept = broken.refresh_candidates(queries, rubrics, state.pools, 0, &carried);
    CHECK(carried.size() == queries.size());
    for (const auto& q : queries) {
        CHECK(kept.at(q.id).round == 1);
        CHECK(kept.at(q.id).candidates == state.pools.at(q.id).candidates);
    }
}

TEST_CASE("singleton pools") {
    auto c = binary_config(2, 4);
    c.candidates = 1;
    c.max_outer_rounds = 2;
    Rig rig(support::tiny_world(), c);
    Engine engine(rig.guarded(), rig.config);
    const auto state = engine.initial_state(rig.dataset);
    for (const auto& [id, p] : state.pools) CHECK(p.candidates.size() == 1);
    const auto out = engine.run_dual_loop(rig.dataset, state);
    for (const auto& [id, p] : out.final_state.pools) CHECK(p.candidates.size() == 1);
}

TEST_CASE("a single outer round equals one inner run") {
    Rig rig(support::bundled_world("w1"), binary_config(8, 20));
    Engine a(rig.guarded(), rig.config);
    const auto state = a.initial_state(rig.dataset);
    const auto dual = a.run_dual_loop(rig.dataset, state);
    Engine b(rig.guarded(), rig.config);
    const auto inner = b.run_inner(rig.dataset, state.pools, state.bank, 0, 1);
    CHECK(dual.final_state.bank == inner.bank);
    CHECK(dual.final_state.pools == state.pools);
    CHECK(dual.rounds.size() == 1);
    CHECK(nlohmann::json(dual.metrics) == nlohmann::json(inner.metrics));
}

TEST_CASE("dual loop is deterministic under a fixed seed") {
    auto c = binary_config(8, 12);
    c.max_outer_rounds = 2;
    auto run = [&] {
        Rig rig(support::bundled_world("w2"), c, {4, {0.0, 0.1}, 0.0});
        Engine engine(rig.guarded(), rig.config);
        return engine.run_dual_loop(rig.dataset, engine.initial_state(rig.dataset));
    };
    const auto x = run();
    const auto y = run();
    CHECK(x.final_state == y.final_state);
    CHECK(nlohmann::json(x.metrics) == nlohmann::json(y.metrics));
    CHECK(x.final_state.round == 2);
    CHECK(x.final_state.next_t == 25);
}

TEST_CASE("state json round trip") {
    Rig rig(support::tiny_world(), binary_config(2, 3));
    Engine engine(rig.guarded(), rig.config);
    auto state = engine.initial_state(rig.dataset);
    state.bank = engine.run_inner(rig.dataset, state.pools, state.bank, 0, 1).bank;
    state.next_t = 4;
    CHECK(nlohmann::json(state).get<LoopState>() == state);
}

}  // TEST_SUITE
